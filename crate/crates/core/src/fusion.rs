//! Semantic-guided feature fusion.
//!
//! Per stage, reference, distorted and difference features are concatenated
//! along channels, average-pooled onto the coarsest grid and projected to
//! `d_model`. A fixed 2-D sinusoidal encoding is added, then the coarsest
//! stage queries stages 4, 3, 2, 1 in turn through residual cross-scale
//! attention, and a final self-attention layer mixes the result.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeaturePyramid, STAGES};
use crate::error::{Error, Result};
use crate::nn::{join, uniform, xavier_bound, Linear, Parameters};
use crate::scalar::Scalar;
use crate::spatial::MapShape;
use crate::tape::{softmax_rows, Param, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    #[serde(default = "d_model")]
    pub d_model: usize,
    #[serde(default = "head_count")]
    pub head_count: usize,
    /// Normalize each attention layer's output (off by default).
    #[serde(default)]
    pub layer_norm: bool,
}

fn d_model() -> usize {
    256
}

fn head_count() -> usize {
    4
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_model: d_model(),
            head_count: head_count(),
            layer_norm: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_count == 0 || !self.d_model.is_multiple_of(self.head_count) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not a multiple of head_count {}",
                self.d_model, self.head_count
            )));
        }
        if !self.d_model.is_multiple_of(4) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be divisible by 4 for 2-D sinusoidal encoding",
                self.d_model
            )));
        }
        Ok(())
    }
}

/// Tokens of one stage on the shared coarse grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedStage<T> {
    /// `[batch·H·W, d_model]`.
    pub tokens: Array2<T>,
    pub grid: (usize, usize),
    /// 1 (finest) to 5 (coarsest).
    pub scale: usize,
    pub batch: usize,
    pub position_encoded: bool,
}

/// Attention projections for one cross-scale layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CsaParams<T> {
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
    /// Output projection applied after the heads are concatenated.
    pub wo: Param<T>,
    pub head_count: usize,
}

impl<T: Scalar> CsaParams<T> {
    pub fn init(d_model: usize, head_count: usize, rng: &mut ChaCha8Rng) -> Self {
        let b = xavier_bound(d_model, d_model);
        let mut m = || Param::new(uniform(d_model, d_model, b, rng));
        Self {
            wq: m(),
            wk: m(),
            wv: m(),
            wo: m(),
            head_count,
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.value.nrows()
    }

    pub fn d_k(&self) -> usize {
        self.d_model() / self.head_count
    }

    fn check(&self) -> Result<()> {
        let d = self.d_model();
        if self.head_count == 0 || !d.is_multiple_of(self.head_count) {
            return Err(Error::InvalidConfig(format!(
                "d_model {d} not divisible by {} heads",
                self.head_count
            )));
        }
        for (n, p) in [("Wq", &self.wq), ("Wk", &self.wk), ("Wv", &self.wv), ("Wo", &self.wo)] {
            if p.value.dim() != (d, d) {
                return Err(Error::ShapeMismatch(format!("{n} is {:?}", p.value.dim())));
            }
            if p.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{n} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// `Attn(query·Wq, kv·Wk, kv·Wv)·Wo + query`, optionally layer-normed.
    pub fn forward_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        query: Var,
        kv: Var,
        groups: usize,
        layer_norm: bool,
    ) -> Var {
        let wq = tape.param(&self.wq);
        let wk = tape.param(&self.wk);
        let wv = tape.param(&self.wv);
        let wo = tape.param(&self.wo);
        let q = tape.matmul(query, wq);
        let k = tape.matmul(kv, wk);
        let v = tape.matmul(kv, wv);
        let a = tape.attention(q, k, v, groups, self.head_count);
        let o = tape.matmul(a, wo);
        let out = tape.add(o, query);
        if layer_norm {
            tape.layer_norm(out)
        } else {
            out
        }
    }
}

impl<T> Parameters<T> for CsaParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "Wq"), &self.wq);
        f(join(prefix, "Wk"), &self.wk);
        f(join(prefix, "Wv"), &self.wv);
        f(join(prefix, "Wo"), &self.wo);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "Wq"), &mut self.wq);
        f(join(prefix, "Wk"), &mut self.wk);
        f(join(prefix, "Wv"), &mut self.wv);
        f(join(prefix, "Wo"), &mut self.wo);
    }
}

/// Learned parameters of the whole fusion block.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion<T> {
    pub config: FusionConfig,
    /// Channel projection `3·C_k → d_model` for stages 1..=5.
    pub proj: Vec<Linear<T>>,
    /// Cascade layers whose keys/values come from stages 4, 3, 2, 1.
    pub cascade: Vec<CsaParams<T>>,
    /// Final self-attention layer.
    pub last: CsaParams<T>,
}

/// Key/value stage of cascade layer `i`.
pub fn cascade_kv_stage(i: usize) -> usize {
    STAGES - 1 - i
}

impl<T: Scalar> Fusion<T> {
    pub fn init(config: &FusionConfig, stage_widths: [usize; STAGES], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF051_0002);
        let d = config.d_model;
        let proj = stage_widths
            .iter()
            .map(|&c| Linear::init(3 * c, d, xavier_bound(3 * c, d), &mut rng))
            .collect();
        let cascade = (0..STAGES - 1)
            .map(|_| CsaParams::init(d, config.head_count, &mut rng))
            .collect();
        let last = CsaParams::init(d, config.head_count, &mut rng);
        Ok(Self {
            config: config.clone(),
            proj,
            cascade,
            last,
        })
    }

    /// Zeroes every value projection; the cascade then returns its
    /// stage-5 input unchanged.
    pub fn zero_values(&mut self) {
        for p in self.cascade.iter_mut().chain(std::iter::once(&mut self.last)) {
            p.wv.value.fill(T::zero());
        }
    }

    /// Per-stage tokens before positional encoding, recorded on `tape`.
    pub fn stage_tokens_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        reference: &[(Var, MapShape)],
        distorted: &[(Var, MapShape)],
    ) -> Result<(Vec<Var>, (usize, usize), usize)> {
        if reference.len() != STAGES || distorted.len() != STAGES {
            return Err(Error::ShapeMismatch(format!(
                "expected {STAGES} stages, got {} and {}",
                reference.len(),
                distorted.len()
            )));
        }
        let top = reference[STAGES - 1].1;
        let grid = (top.height, top.width);
        let mut tokens = Vec::with_capacity(STAGES);
        for (k, ((r, rs), (d, ds))) in reference.iter().zip(distorted).enumerate() {
            if rs != ds {
                return Err(Error::ShapeMismatch(format!(
                    "stage {}: {rs:?} vs {ds:?}",
                    k + 1
                )));
            }
            if 3 * rs.channels != self.proj[k].in_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "stage {} has {} channels, projection expects {}",
                    k + 1,
                    rs.channels,
                    self.proj[k].in_dim() / 3
                )));
            }
            let diff = tape.sub(*r, *d);
            let cat = tape.concat_cols(&[*r, *d, diff]);
            let cat_shape = MapShape {
                channels: 3 * rs.channels,
                ..*rs
            };
            let pooled = if (rs.height, rs.width) == grid {
                cat
            } else {
                tape.avg_pool(cat, cat_shape, grid.0, grid.1)
            };
            tokens.push(self.proj[k].forward(tape, pooled));
        }
        Ok((tokens, grid, top.batch))
    }

    /// Full fusion on `tape`: tokens, positional encoding, cascade and final
    /// self-attention. Returns `F_final` as `[batch·H·W, d_model]`.
    pub fn forward_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        reference: &[(Var, MapShape)],
        distorted: &[(Var, MapShape)],
    ) -> Result<Var> {
        let (tokens, grid, batch) = self.stage_tokens_tape(tape, reference, distorted)?;
        let pe = tape.constant(tiled_position_encoding(
            grid.0,
            grid.1,
            self.config.d_model,
            batch,
        ));
        let encoded: Vec<Var> = tokens.into_iter().map(|t| tape.add(t, pe)).collect();
        Ok(self.cascade_tape(tape, &encoded, batch))
    }

    pub(crate) fn cascade_tape<'a>(&'a self, tape: &mut Tape<'a, T>, stages: &[Var], batch: usize) -> Var {
        let ln = self.config.layer_norm;
        let mut query = stages[STAGES - 1];
        for (i, layer) in self.cascade.iter().enumerate() {
            let kv = stages[cascade_kv_stage(i) - 1];
            query = layer.forward_tape(tape, query, kv, batch, ln);
        }
        self.last.forward_tape(tape, query, query, batch, ln)
    }
}

impl<T> Parameters<T> for Fusion<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        for (k, p) in self.proj.iter().enumerate() {
            p.visit(&join(prefix, &format!("stage{}.proj", k + 1)), f);
        }
        for (i, c) in self.cascade.iter().enumerate() {
            c.visit(&join(prefix, &format!("stage{}", cascade_kv_stage(i))), f);
        }
        self.last.visit(&join(prefix, "final"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        for (k, p) in self.proj.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &format!("stage{}.proj", k + 1)), f);
        }
        for (i, c) in self.cascade.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("stage{}", cascade_kv_stage(i))), f);
        }
        self.last.visit_mut(&join(prefix, "final"), f);
    }
}

/// Fixed 2-D sinusoidal table, one row per grid cell in row-major order.
/// The first half of each row encodes the row index, the second half the
/// column index, each as interleaved sine/cosine pairs.
pub fn position_encoding<T: Scalar>(height: usize, width: usize, d_model: usize) -> Array2<T> {
    let half = d_model / 2;
    let pairs = half / 2;
    let mut pe = Array2::zeros((height * width, d_model));
    for y in 0..height {
        for x in 0..width {
            let r = y * width + x;
            for (offset, pos) in [(0, y), (half, x)] {
                for i in 0..pairs {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    let angle = pos as f64 * freq;
                    pe[[r, offset + 2 * i]] = T::c(angle.sin());
                    pe[[r, offset + 2 * i + 1]] = T::c(angle.cos());
                }
            }
        }
    }
    pe
}

fn tiled_position_encoding<T: Scalar>(h: usize, w: usize, d: usize, batch: usize) -> Array2<T> {
    let pe = position_encoding::<T>(h, w, d);
    let views: Vec<ArrayView2<T>> = (0..batch).map(|_| pe.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
}

/// Difference features, channel concatenation, pooling to the stage-5 grid
/// and projection to `d_model`, for every stage.
pub fn diff_concat_pool<T: Scalar>(
    reference: &FeaturePyramid<T>,
    distorted: &FeaturePyramid<T>,
    fusion: &Fusion<T>,
) -> Result<Vec<FusedStage<T>>> {
    let mut tape = Tape::new();
    let r: Vec<(Var, MapShape)> = reference
        .stages
        .iter()
        .map(|m| (tape.constant_ref(&m.data), m.shape))
        .collect();
    let d: Vec<(Var, MapShape)> = distorted
        .stages
        .iter()
        .map(|m| (tape.constant_ref(&m.data), m.shape))
        .collect();
    let (tokens, grid, batch) = fusion.stage_tokens_tape(&mut tape, &r, &d)?;
    Ok(tokens
        .into_iter()
        .enumerate()
        .map(|(k, v)| FusedStage {
            tokens: tape.value(v).clone(),
            grid,
            scale: k + 1,
            batch,
            position_encoded: false,
        })
        .collect())
}

/// Adds the positional table. Not idempotent: each call adds it again.
pub fn add_position_encoding<T: Scalar>(stage: &FusedStage<T>) -> FusedStage<T> {
    let pe = tiled_position_encoding::<T>(
        stage.grid.0,
        stage.grid.1,
        stage.tokens.ncols(),
        stage.batch,
    );
    FusedStage {
        tokens: &stage.tokens + &pe,
        position_encoded: true,
        ..stage.clone()
    }
}

/// Single-head `softmax(Q·Kᵀ/√d_k)·V`.
pub fn attention<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    d_k: usize,
) -> Result<Array2<T>> {
    if k.nrows() != v.nrows() || q.ncols() != k.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "Q {:?}, K {:?}, V {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    let mut scores = q.dot(&k.t()) / T::c(d_k as f64).sqrt();
    softmax_rows(&mut scores);
    Ok(scores.dot(&v))
}

fn check_stage_pair<T>(a: &FusedStage<T>, b: &FusedStage<T>) -> Result<()> {
    if a.grid != b.grid || a.batch != b.batch || a.tokens.dim() != b.tokens.dim() {
        return Err(Error::ShapeMismatch(format!(
            "stages {} and {} are on different grids",
            a.scale, b.scale
        )));
    }
    Ok(())
}

/// One residual cross-scale attention layer: `query` attends to `kv`.
pub fn csa_layer<T: Scalar>(
    query: &FusedStage<T>,
    kv: &FusedStage<T>,
    params: &CsaParams<T>,
    layer_norm: bool,
) -> Result<FusedStage<T>> {
    check_stage_pair(query, kv)?;
    params.check()?;
    if query.tokens.ncols() != params.d_model() {
        return Err(Error::ShapeMismatch(format!(
            "tokens have width {}, params expect {}",
            query.tokens.ncols(),
            params.d_model()
        )));
    }
    let mut tape = Tape::new();
    let q = tape.constant_ref(&query.tokens);
    let k = tape.constant_ref(&kv.tokens);
    let out = params.forward_tape(&mut tape, q, k, query.batch, layer_norm);
    Ok(FusedStage {
        tokens: tape.value(out).clone(),
        ..query.clone()
    })
}

/// Coarse-to-fine cascade over five position-encoded stages followed by
/// the final self-attention; returns `F_final`.
pub fn cascade<T: Scalar>(stages: &[FusedStage<T>], fusion: &Fusion<T>) -> Result<Array2<T>> {
    if stages.len() != STAGES {
        return Err(Error::ShapeMismatch(format!(
            "cascade needs {STAGES} stages, got {}",
            stages.len()
        )));
    }
    for s in stages {
        if !s.position_encoded {
            return Err(Error::MissingPositionEncoding(s.scale));
        }
        check_stage_pair(s, &stages[STAGES - 1])?;
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = stages.iter().map(|s| tape.constant_ref(&s.tokens)).collect();
    let out = fusion.cascade_tape(&mut tape, &vars, stages[0].batch);
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BackboneSpec, FeatureMap};
    use crate::types::ImageBuffer;

    fn rng_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(rows, cols, 1.0, &mut rng)
    }

    fn small_fusion(seed: u64) -> Fusion<f64> {
        let cfg = FusionConfig {
            d_model: 8,
            head_count: 2,
            layer_norm: false,
        };
        Fusion::init(&cfg, [2, 3, 4, 5, 6], seed).unwrap()
    }

    fn random_pyramid(seed: u64) -> FeaturePyramid<f64> {
        let widths = [2, 3, 4, 5, 6];
        let sizes = [16, 8, 4, 2, 1];
        let stages = (0..5)
            .map(|k| {
                let shape = MapShape {
                    batch: 1,
                    height: sizes[k] * 2,
                    width: sizes[k] * 2,
                    channels: widths[k],
                };
                FeatureMap {
                    shape,
                    data: rng_matrix(shape.rows(), widths[k], seed * 10 + k as u64),
                }
            })
            .collect();
        FeaturePyramid {
            stages,
            downsample: vec![1, 2, 4, 8, 16],
        }
    }

    #[test]
    fn identical_pyramids_have_zero_difference() {
        let pyr = random_pyramid(1);
        let mut tape = Tape::new();
        let r: Vec<_> = pyr.stages.iter().map(|m| (tape.constant_ref(&m.data), m.shape)).collect();
        for (v, _) in &r {
            let d = tape.sub(*v, *v);
            assert!(tape.value(d).iter().all(|&x| x == 0.0));
        }
        // with zero difference the projection input's diff block is zero, so
        // zeroing the first two channel blocks zeroes the tokens up to bias
        let mut fusion = small_fusion(0);
        for (k, p) in fusion.proj.iter_mut().enumerate() {
            let c = pyr.stages[k].shape.channels;
            p.weight.value.slice_mut(ndarray::s![..2 * c, ..]).fill(0.0);
        }
        let stages = diff_concat_pool(&pyr, &pyr, &fusion).unwrap();
        for s in &stages {
            assert!(s.tokens.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn pooling_is_window_mean() {
        let pyr_r = random_pyramid(2);
        let pyr_d = random_pyramid(3);
        let mut fusion = small_fusion(1);
        // identity-like projection: read channel 0 of each block into columns 0..3
        for (k, p) in fusion.proj.iter_mut().enumerate() {
            let c = pyr_r.stages[k].shape.channels;
            p.weight.value.fill(0.0);
            p.weight.value[[0, 0]] = 1.0;
            p.weight.value[[c, 1]] = 1.0;
            p.weight.value[[2 * c, 2]] = 1.0;
        }
        let stages = diff_concat_pool(&pyr_r, &pyr_d, &fusion).unwrap();
        let grid = stages[0].grid;
        assert_eq!(grid, (2, 2));
        for (k, st) in stages.iter().enumerate() {
            let (mr, md) = (&pyr_r.stages[k], &pyr_d.stages[k]);
            let win = mr.shape.height / grid.0;
            for gy in 0..grid.0 {
                for gx in 0..grid.1 {
                    let (mut sr, mut sd) = (0.0, 0.0);
                    for y in gy * win..(gy + 1) * win {
                        for x in gx * win..(gx + 1) * win {
                            sr += mr.data[[mr.shape.row(0, y, x), 0]];
                            sd += md.data[[md.shape.row(0, y, x), 0]];
                        }
                    }
                    let n = (win * win) as f64;
                    let row = st.tokens.row(gy * grid.1 + gx);
                    assert!((row[0] - sr / n).abs() < 1e-12);
                    assert!((row[1] - sd / n).abs() < 1e-12);
                    assert!((row[2] - (sr - sd) / n).abs() < 1e-12);
                }
            }
        }
        // stage 5 sits on the target grid already: pooling is the identity
        let m5 = &pyr_r.stages[4];
        for r in 0..4 {
            assert_eq!(stages[4].tokens[[r, 0]], m5.data[[r, 0]]);
        }
    }

    #[test]
    fn position_encoding_properties() {
        let zero = FusedStage {
            tokens: Array2::<f64>::zeros((6, 8)),
            grid: (2, 3),
            scale: 1,
            batch: 1,
            position_encoded: false,
        };
        let once = add_position_encoding(&zero);
        assert_eq!(once.tokens, position_encoding::<f64>(2, 3, 8));
        assert!(once.position_encoded);
        let twice = add_position_encoding(&once);
        assert_eq!(twice.tokens, &once.tokens * 2.0);

        let pe = position_encoding::<f64>(8, 8, 16);
        for i in 0..pe.nrows() {
            for j in i + 1..pe.nrows() {
                let d: f64 = (&pe.row(i) - &pe.row(j)).mapv(|v| v * v).sum();
                assert!(d > 1e-6, "rows {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn attention_examples() {
        let k = rng_matrix(5, 4, 1);
        let v = rng_matrix(5, 3, 2);
        let q = Array2::<f64>::zeros((2, 4));
        let out = attention(q.view(), k.view(), v.view(), 4).unwrap();
        let mean = v.mean_axis(ndarray::Axis(0)).unwrap();
        for r in out.outer_iter() {
            for (a, b) in r.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let k1 = rng_matrix(1, 4, 3);
        let v1 = rng_matrix(1, 3, 4);
        let out = attention(rng_matrix(3, 4, 5).view(), k1.view(), v1.view(), 4).unwrap();
        for r in out.outer_iter() {
            assert_eq!(r, v1.row(0));
        }
        assert!(attention(q.view(), k.view(), rng_matrix(4, 3, 0).view(), 4).is_err());
    }

    fn encoded(seed: u64, fusion: &Fusion<f64>) -> Vec<FusedStage<f64>> {
        diff_concat_pool(&random_pyramid(seed), &random_pyramid(seed + 100), fusion)
            .unwrap()
            .iter()
            .map(add_position_encoding)
            .collect()
    }

    #[test]
    fn zero_value_projection_is_pure_residual() {
        let mut fusion = small_fusion(4);
        let stages = encoded(5, &fusion);
        let mut p = fusion.cascade[0].clone();
        p.wv.value.fill(0.0);
        let out = csa_layer(&stages[4], &stages[3], &p, false).unwrap();
        assert_eq!(out.tokens, stages[4].tokens);

        fusion.zero_values();
        let fin = cascade(&stages, &fusion).unwrap();
        assert_eq!(fin, stages[4].tokens);
    }

    #[test]
    fn cascade_requires_encoding_and_is_order_sensitive() {
        let fusion = small_fusion(6);
        let raw = diff_concat_pool(&random_pyramid(7), &random_pyramid(8), &fusion).unwrap();
        assert!(matches!(
            cascade(&raw, &fusion),
            Err(Error::MissingPositionEncoding(1))
        ));
        let stages: Vec<_> = raw.iter().map(add_position_encoding).collect();
        let a = cascade(&stages, &fusion).unwrap();
        assert_eq!(a.dim(), (4, 8));
        let mut permuted = stages.clone();
        permuted.swap(0, 3);
        let b = cascade(&permuted, &fusion).unwrap();
        assert!((&a - &b).mapv(f64::abs).sum() > 1e-6);
    }

    #[test]
    fn cascade_output_size_tracks_stage5_grid_only() {
        let spec = BackboneSpec::toy();
        let bb = Backbone::<f32>::from_spec(&spec, 0).unwrap();
        let cfg = FusionConfig {
            d_model: 16,
            head_count: 2,
            layer_norm: true,
        };
        let fusion = Fusion::<f32>::init(&cfg, bb.stage_widths(), 0).unwrap();
        for side in [32, 64] {
            let img = ImageBuffer::from_fn(side, side, 3, |x, y, c| (x * 5 + y * 3 + c) as u8);
            let pyr = bb.extract_pyramid(&img).unwrap();
            let stages: Vec<_> = diff_concat_pool(&pyr, &pyr, &fusion)
                .unwrap()
                .iter()
                .map(add_position_encoding)
                .collect();
            let out = cascade(&stages, &fusion).unwrap();
            let cells = (side / 16) * (side / 16);
            assert_eq!(out.dim(), (cells, 16));
        }
    }

    #[test]
    fn kv_permutation_leaves_layer_output_unchanged() {
        let fusion = small_fusion(9);
        let stages = encoded(10, &fusion);
        let p = &fusion.cascade[1];
        let base = csa_layer(&stages[4], &stages[2], p, false).unwrap();
        let mut shuffled = stages[2].clone();
        let perm = [2, 0, 3, 1];
        for (dst, &src) in perm.iter().enumerate() {
            shuffled
                .tokens
                .row_mut(dst)
                .assign(&stages[2].tokens.row(src));
        }
        let out = csa_layer(&stages[4], &shuffled, p, false).unwrap();
        assert!((&base.tokens - &out.tokens).mapv(f64::abs).sum() < 1e-9);
    }

    #[test]
    fn cascade_input_gradients_match_finite_differences() {
        let fusion = small_fusion(12);
        let stages = encoded(13, &fusion);
        let probe = rng_matrix(4, 8, 14);
        let loss = |st: &[FusedStage<f64>]| (cascade(st, &fusion).unwrap() * &probe).sum();
        let mut tape = Tape::new();
        let vars: Vec<Var> = stages.iter().map(|s| tape.input(s.tokens.clone())).collect();
        let out = fusion.cascade_tape(&mut tape, &vars, 1);
        let w = tape.constant(probe.clone());
        let m = tape.mul(out, w);
        let root = tape.sum_all(m);
        let grads = tape.backward(root);
        let eps = 1e-4;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.var(*v).unwrap();
            let mut numeric = Array2::zeros(analytic.dim());
            for ((i, j), slot) in numeric.indexed_iter_mut() {
                let mut up = stages.clone();
                up[k].tokens[[i, j]] += eps;
                let mut down = stages.clone();
                down[k].tokens[[i, j]] -= eps;
                *slot = (loss(&up) - loss(&down)) / (2.0 * eps);
            }
            let err = (analytic - &numeric).mapv(|d| d * d).sum().sqrt();
            let scale = numeric.mapv(|d| d * d).sum().sqrt().max(1e-12);
            assert!(err / scale < 1e-3, "stage {} relative error {}", k + 1, err / scale);
        }
    }

    #[test]
    fn parameter_names_follow_stage_convention() {
        let fusion = small_fusion(0);
        let mut names = Vec::new();
        fusion.visit("fusion", &mut |n, _| names.push(n));
        assert!(names.contains(&"fusion.stage1.proj.weight".to_string()));
        assert!(names.contains(&"fusion.stage4.Wq".to_string()));
        assert!(names.contains(&"fusion.stage1.Wv".to_string()));
        assert!(names.contains(&"fusion.final.Wo".to_string()));
        assert!(!names.contains(&"fusion.stage5.Wq".to_string()));
    }
}
