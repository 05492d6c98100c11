//! Patch score and weight branches and the per-image decision.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Mlp, Parameters};
use crate::scalar::Scalar;
use crate::tape::{bce, sigmoid, softplus, Param, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Hidden widths shared by both branches.
    #[serde(default = "hidden")]
    pub hidden: Vec<usize>,
}

fn hidden() -> Vec<usize> {
    vec![128, 64]
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: hidden() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchAssessment<T> {
    pub score: T,
    /// Positive after softplus.
    pub weight: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageDecision<T> {
    pub q_dist: T,
    pub label: u8,
}

/// Threshold rule: exactly 0.5 counts as lossless.
pub fn decide<T: Scalar>(q_dist: T) -> u8 {
    u8::from(q_dist > T::c(0.5))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub score: Mlp<T>,
    pub weight: Mlp<T>,
}

impl<T: Scalar> Head<T> {
    pub fn init(d_model: usize, config: &HeadConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4EAD_0003);
        let mut widths = vec![d_model];
        widths.extend(&config.hidden);
        widths.push(1);
        let score = Mlp::init(&widths, &mut rng);
        let weight = Mlp::init(&widths, &mut rng);
        Self { score, weight }
    }

    pub fn d_model(&self) -> usize {
        self.score.in_dim()
    }

    /// Mean-pools each patch's tokens and returns per-patch raw scores and
    /// softplus weights as `[patches, 1]` columns.
    pub fn branches_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        f_final: Var,
        patches: usize,
    ) -> (Var, Var) {
        let pooled = tape.group_mean(f_final, patches);
        let s = self.score.forward(tape, pooled);
        let raw = self.weight.forward(tape, pooled);
        let w = tape.softplus(raw);
        (s, w)
    }

    /// Weighted mean score `Σ S·W / Σ W`, the logit of `q_dist`.
    pub fn logit_tape(&self, tape: &mut Tape<'_, T>, scores: Var, weights: Var) -> Var {
        let sw = tape.mul(scores, weights);
        let num = tape.sum_all(sw);
        let den = tape.sum_all(weights);
        tape.div_scalar(num, den)
    }

    /// Per-patch assessments for `patches` stacked token blocks.
    pub fn assess(&self, f_final: &Array2<T>, patches: usize) -> Result<Vec<PatchAssessment<T>>> {
        if patches == 0 || !f_final.nrows().is_multiple_of(patches) || f_final.nrows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} token rows cannot split into {patches} patches",
                f_final.nrows()
            )));
        }
        self.check_width(f_final)?;
        let mut tape = Tape::new();
        let x = tape.constant_ref(f_final);
        let (s, w) = self.branches_tape(&mut tape, x, patches);
        Ok(tape
            .value(s)
            .iter()
            .zip(tape.value(w).iter())
            .map(|(&score, &weight)| PatchAssessment { score, weight })
            .collect())
    }

    fn check_width(&self, f_final: &Array2<T>) -> Result<()> {
        if f_final.ncols() != self.d_model() {
            return Err(Error::ShapeMismatch(format!(
                "tokens have width {}, head expects {}",
                f_final.ncols(),
                self.d_model()
            )));
        }
        Ok(())
    }
}

impl<T> Parameters<T> for Head<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.score.visit(&join(prefix, "score"), f);
        self.weight.visit(&join(prefix, "weight"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.score.visit_mut(&join(prefix, "score"), f);
        self.weight.visit_mut(&join(prefix, "weight"), f);
    }
}

fn mlp_on_pooled<T: Scalar>(f_final: &Array2<T>, mlp: &Mlp<T>) -> Result<T> {
    if f_final.nrows() == 0 || f_final.ncols() != mlp.in_dim() {
        return Err(Error::ShapeMismatch(format!(
            "tokens {:?}, MLP input width {}",
            f_final.dim(),
            mlp.in_dim()
        )));
    }
    let pooled = f_final
        .mean_axis(Axis(0))
        .expect("non-empty")
        .insert_axis(Axis(0));
    let mut tape = Tape::new();
    let x = tape.constant(pooled);
    let y = mlp.forward(&mut tape, x);
    Ok(tape.scalar(y))
}

/// Raw score of one patch from its token matrix.
pub fn patch_score<T: Scalar>(f_final: &Array2<T>, mlp: &Mlp<T>) -> Result<T> {
    mlp_on_pooled(f_final, mlp)
}

/// Softplus weight of one patch from its token matrix.
pub fn patch_weight<T: Scalar>(f_final: &Array2<T>, mlp: &Mlp<T>) -> Result<T> {
    mlp_on_pooled(f_final, mlp).map(softplus)
}

/// `q = sigmoid(Σ S·W / Σ W)` and its label.
pub fn aggregate<T: Scalar>(assessments: &[PatchAssessment<T>]) -> Result<ImageDecision<T>> {
    if assessments.is_empty() {
        return Err(Error::EmptyInput("no patch assessments".into()));
    }
    let (mut num, mut den) = (T::zero(), T::zero());
    for (i, a) in assessments.iter().enumerate() {
        if !(a.weight > T::zero()) || !a.weight.is_finite() {
            return Err(Error::NonPositiveWeight(i));
        }
        num += a.score * a.weight;
        den += a.weight;
    }
    let q_dist = sigmoid(num / den);
    Ok(ImageDecision {
        q_dist,
        label: decide(q_dist),
    })
}

/// Mean clipped binary cross-entropy.
pub fn bce_loss<T: Scalar>(q: &[T], gt: &[u8]) -> Result<T> {
    if q.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: q.len(),
            right: gt.len(),
        });
    }
    if q.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let total: T = q
        .iter()
        .zip(gt)
        .map(|(&q, &y)| bce(q, T::c(f64::from(y))))
        .sum();
    Ok(total / T::c(q.len() as f64))
}
