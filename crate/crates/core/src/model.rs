//! Backbone, fusion and head assembled into one classifier.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayViewD};
use serde::{Deserialize, Serialize};

use crate::archive::{self, Archive};
use crate::backbone::{Backbone, BackboneSpec, FeaturePyramid};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig};
use crate::head::{aggregate, Head, HeadConfig, ImageDecision, PatchAssessment};
use crate::nn::Parameters;
use crate::scalar::Scalar;
use crate::spatial::MapShape;
use crate::tape::{Param, Tape, Var};
use crate::types::ImageBuffer;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub head: HeadConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JndModel<T> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub fusion: Fusion<T>,
    pub head: Head<T>,
}

/// Stage outputs recorded on a tape.
pub type TapeStages = Vec<(Var, MapShape)>;

impl<T: Scalar> JndModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let backbone = Backbone::from_spec(&config.backbone, seed)?;
        let fusion = Fusion::init(&config.fusion, backbone.stage_widths(), seed)?;
        let head = Head::init(config.fusion.d_model, &config.head, seed);
        Ok(Self {
            config: config.clone(),
            backbone,
            fusion,
            head,
        })
    }

    /// Backbone stages for a batch of patches.
    pub fn features_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        patches: &[&ImageBuffer],
    ) -> Result<TapeStages> {
        let (rows, shape) = self.backbone.input_rows(patches)?;
        let x = tape.constant(rows);
        Ok(self.backbone.forward_tape(tape, x, shape))
    }

    /// Places a precomputed pyramid on the tape as constants.
    pub fn pyramid_on_tape<'a>(tape: &mut Tape<'a, T>, pyramid: &'a FeaturePyramid<T>) -> TapeStages {
        pyramid
            .stages
            .iter()
            .map(|m| (tape.constant_ref(&m.data), m.shape))
            .collect()
    }

    /// Per-patch scores and weights as `[patches, 1]` columns.
    pub fn branches_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        reference: &[(Var, MapShape)],
        distorted: &[(Var, MapShape)],
    ) -> Result<(Var, Var)> {
        let patches = distorted
            .first()
            .map(|s| s.1.batch)
            .ok_or_else(|| Error::EmptyInput("no stages".into()))?;
        let f_final = self.fusion.forward_tape(tape, reference, distorted)?;
        Ok(self.head.branches_tape(tape, f_final, patches))
    }

    /// Logit of `q_dist` for one distorted image from its patch stages.
    pub fn logit_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        reference: &[(Var, MapShape)],
        distorted: &[(Var, MapShape)],
    ) -> Result<Var> {
        let (s, w) = self.branches_tape(tape, reference, distorted)?;
        Ok(self.head.logit_tape(tape, s, w))
    }

    /// Per-patch assessments for aligned patch lists.
    pub fn assess(
        &self,
        reference: &[&ImageBuffer],
        distorted: &[&ImageBuffer],
    ) -> Result<Vec<PatchAssessment<T>>> {
        let pyr = self.backbone.pyramid(reference)?;
        self.assess_with_reference(&pyr, distorted)
    }

    /// As [`assess`](Self::assess) with the reference pyramid reused.
    pub fn assess_with_reference(
        &self,
        reference: &FeaturePyramid<T>,
        distorted: &[&ImageBuffer],
    ) -> Result<Vec<PatchAssessment<T>>> {
        if reference.batch() != distorted.len() {
            return Err(Error::LengthMismatch {
                left: reference.batch(),
                right: distorted.len(),
            });
        }
        let mut tape = Tape::new();
        let r = Self::pyramid_on_tape(&mut tape, reference);
        let d = self.features_tape(&mut tape, distorted)?;
        let (s, w) = self.branches_tape(&mut tape, &r, &d)?;
        Ok(tape
            .value(s)
            .iter()
            .zip(tape.value(w).iter())
            .map(|(&score, &weight)| PatchAssessment { score, weight })
            .collect())
    }

    pub fn decide(
        &self,
        reference: &[&ImageBuffer],
        distorted: &[&ImageBuffer],
    ) -> Result<ImageDecision<T>> {
        aggregate(&self.assess(reference, distorted)?)
    }

    /// Parameters that receive gradients.
    pub fn trainable_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        if self.backbone.trainable() {
            self.backbone.visit("backbone", &mut |n, p| out.push((n, p)));
        }
        self.fusion.visit("fusion", &mut |n, p| out.push((n, p)));
        self.head.visit("head", &mut |n, p| out.push((n, p)));
        out
    }

    pub fn visit_all<'a>(&'a self, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.backbone.visit("backbone", f);
        self.fusion.visit("fusion", f);
        self.head.visit("head", f);
    }

    pub fn visit_all_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.backbone.visit_mut("backbone", f);
        self.fusion.visit_mut("fusion", f);
        self.head.visit_mut("head", f);
    }

    /// Every parameter, by name.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        self.visit_all(&mut |n, p| out.push((n, p.value.view().into_dyn())));
        out
    }

    /// Writes the parameter archive and returns its SHA-256.
    pub fn save_weights(&self, path: &Path) -> Result<String> {
        archive::save(path, self.tensors())
    }

    /// Overwrites every parameter from `tensors`; names and shapes must
    /// match exactly.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Array2<T>>) -> Result<()> {
        let mut problems = Vec::new();
        let mut seen = 0;
        self.visit_all_mut(&mut |name, p| match tensors.get(&name) {
            Some(m) if m.dim() == p.value.dim() => {
                p.value.assign(m);
                seen += 1;
            }
            Some(m) => problems.push(format!("{name}: {:?} vs {:?}", m.dim(), p.value.dim())),
            None => problems.push(format!("{name}: missing")),
        });
        if seen != tensors.len() && problems.is_empty() {
            problems.push(format!("{} unexpected tensors", tensors.len() - seen));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::WeightLoadError(problems.join("; ")))
        }
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<String> {
        let arc = Archive::<T>::load(path)?;
        let mut mats = BTreeMap::new();
        for name in arc.tensors.keys() {
            mats.insert(name.clone(), arc.matrix(name)?);
        }
        self.load_tensors(&mats)?;
        Ok(arc.sha256)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            fusion: FusionConfig {
                d_model: 16,
                head_count: 2,
                layer_norm: false,
            },
            head: HeadConfig { hidden: vec![8, 4] },
            ..ModelConfig::default()
        }
    }

    fn patch(seed: u8) -> ImageBuffer {
        ImageBuffer::from_fn(32, 32, 3, |x, y, c| {
            (x as u8).wrapping_mul(7) ^ (y as u8).wrapping_mul(seed) ^ c as u8
        })
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let a = JndModel::<f32>::new(&small(), 1).unwrap();
        a.save_weights(&path).unwrap();
        let mut b = JndModel::<f32>::new(&small(), 2).unwrap();
        assert_ne!(a.fusion, b.fusion);
        b.load_weights(&path).unwrap();
        let (r, d) = (patch(3), patch(5));
        let qa = a.decide(&[&r], &[&d]).unwrap().q_dist;
        let qb = b.decide(&[&r], &[&d]).unwrap().q_dist;
        assert_eq!(qa, qb);
    }

    #[test]
    fn load_rejects_wrong_shapes() {
        let mut m = JndModel::<f32>::new(&small(), 1).unwrap();
        let mut t: BTreeMap<String, Array2<f32>> = BTreeMap::new();
        m.visit_all(&mut |n, p| {
            t.insert(n, p.value.clone());
        });
        t.insert("head.score.l0.bias".into(), Array2::zeros((1, 3)));
        assert!(matches!(m.load_tensors(&t), Err(Error::WeightLoadError(_))));
    }

    #[test]
    fn frozen_backbone_is_not_trainable() {
        let m = JndModel::<f32>::new(&small(), 0).unwrap();
        assert!(m
            .trainable_params()
            .iter()
            .all(|(n, _)| !n.starts_with("backbone")));
    }
}
