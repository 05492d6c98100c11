//! Five-stage convolutional feature pyramids.
//!
//! Two architectures are supported: a small self-contained CNN with one
//! 3×3 convolution per stage, and a ResNet-50 loaded from a torchvision-style
//! safetensors archive with batch normalization folded into the
//! convolutions. Stage 1 is the finest map, stage 5 the coarsest.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array2, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::nn::{he_bound, join, uniform, Parameters};
use crate::scalar::Scalar;
use crate::spatial::{MapShape, WindowGeom};
use crate::tape::{Param, Tape, Var};
use crate::types::ImageBuffer;

pub const STAGES: usize = 5;

/// Inputs must be a multiple of this so that five halvings stay exact.
pub const SIZE_MULTIPLE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BackboneKind {
    PretrainedResnet50,
    ToyCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub frozen: bool,
    /// Per-channel mean of `sample / 255`, subtracted before the first layer.
    #[serde(default = "imagenet_mean")]
    pub mean: [f64; 3],
    #[serde(default = "imagenet_std")]
    pub std: [f64; 3],
    #[serde(default = "toy_widths")]
    pub toy_widths: [usize; STAGES],
    /// Stride of the toy network's first convolution.
    #[serde(default = "one")]
    pub toy_first_stride: usize,
}

fn default_true() -> bool {
    true
}

fn one() -> usize {
    1
}

fn imagenet_mean() -> [f64; 3] {
    [0.485, 0.456, 0.406]
}

fn imagenet_std() -> [f64; 3] {
    [0.229, 0.224, 0.225]
}

fn toy_widths() -> [usize; STAGES] {
    [8, 16, 32, 64, 128]
}

impl BackboneSpec {
    pub fn toy() -> Self {
        Self {
            kind: BackboneKind::ToyCnn,
            weights_path: None,
            frozen: true,
            mean: imagenet_mean(),
            std: imagenet_std(),
            toy_widths: toy_widths(),
            toy_first_stride: 1,
        }
    }

    pub fn resnet50(weights_path: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackboneKind::PretrainedResnet50,
            weights_path: Some(weights_path.into()),
            ..Self::toy()
        }
    }
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::toy()
    }
}

/// One feature map of a (possibly batched) pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub shape: MapShape,
    /// `[batch·height·width, channels]`.
    pub data: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    pub stages: Vec<FeatureMap<T>>,
    /// Downsampling factor of each stage relative to the input.
    pub downsample: Vec<usize>,
}

impl<T> FeaturePyramid<T> {
    pub fn batch(&self) -> usize {
        self.stages[0].shape.batch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    /// `[kernel·kernel·in, out]`, rows ordered `(ky, kx, in)`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn in_channels(&self) -> usize {
        self.weight.value.nrows() / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.ncols()
    }

    fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        x: Var,
        shape: MapShape,
        trainable: bool,
    ) -> (Var, MapShape) {
        let geom = WindowGeom {
            input: shape,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let cols = if self.kernel == 1 && self.stride == 1 {
            x
        } else {
            tape.im2col(x, geom)
        };
        let (w, b) = if trainable {
            (tape.param(&self.weight), tape.param(&self.bias))
        } else {
            (tape.frozen(&self.weight), tape.frozen(&self.bias))
        };
        let h = tape.matmul(cols, w);
        (tape.add_row(h, b), geom.output(self.out_channels()))
    }
}

impl<T> Parameters<T> for ConvLayer<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck<T> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
    pub conv3: ConvLayer<T>,
    pub downsample: Option<ConvLayer<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Arch<T> {
    Toy(Vec<ConvLayer<T>>),
    ResNet {
        stem: ConvLayer<T>,
        layers: Vec<Vec<Bottleneck<T>>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub spec: BackboneSpec,
    pub arch: Arch<T>,
    /// Hash of the pretrained archive, when one was loaded.
    pub weights_sha256: Option<String>,
}

impl<T: Scalar> Backbone<T> {
    /// Builds the backbone: toy weights are drawn from `seed`, pretrained
    /// weights are read from `spec.weights_path`.
    pub fn from_spec(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        match spec.kind {
            BackboneKind::ToyCnn => Ok(Self::toy(spec, seed)),
            BackboneKind::PretrainedResnet50 => {
                let path = spec.weights_path.as_ref().ok_or_else(|| {
                    Error::WeightLoadError("PRETRAINED_RESNET50 requires weights_path".into())
                })?;
                let archive = Archive::<T>::load(path)?;
                let folded = fold_torchvision_resnet(&archive)?;
                let mut bb = Self::resnet_from_folded(spec, &folded)?;
                bb.weights_sha256 = Some(archive.sha256);
                Ok(bb)
            }
        }
    }

    fn toy(spec: &BackboneSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0B0_0001);
        let mut c_in = 3;
        let layers = spec
            .toy_widths
            .iter()
            .enumerate()
            .map(|(k, &c_out)| {
                let fan_in = 9 * c_in;
                let layer = ConvLayer {
                    weight: Param::new(uniform(fan_in, c_out, he_bound(fan_in), &mut rng)),
                    bias: Param::new(Array2::zeros((1, c_out))),
                    kernel: 3,
                    stride: if k == 0 { spec.toy_first_stride } else { 2 },
                    pad: 1,
                };
                c_in = c_out;
                layer
            })
            .collect();
        Self {
            spec: spec.clone(),
            arch: Arch::Toy(layers),
            weights_sha256: None,
        }
    }

    /// Rebuilds a ResNet from folded tensors named
    /// `stem.*`, `layer{L}.{B}.conv{1,2,3}.*`, `layer{L}.{B}.downsample.*`.
    pub fn resnet_from_folded(
        spec: &BackboneSpec,
        tensors: &BTreeMap<String, Array2<T>>,
    ) -> Result<Self> {
        let take = |name: &str, kernel: usize, stride: usize| -> Result<ConvLayer<T>> {
            let weight = tensors
                .get(&format!("{name}.weight"))
                .ok_or_else(|| Error::WeightLoadError(format!("missing {name}.weight")))?;
            let bias = tensors
                .get(&format!("{name}.bias"))
                .ok_or_else(|| Error::WeightLoadError(format!("missing {name}.bias")))?;
            Ok(ConvLayer {
                weight: Param::new(weight.clone()),
                bias: Param::new(bias.clone()),
                kernel,
                stride,
                pad: kernel / 2,
            })
        };
        let kernel_of = |name: &str, c_in: usize| -> Result<usize> {
            let rows = tensors
                .get(&format!("{name}.weight"))
                .ok_or_else(|| Error::WeightLoadError(format!("missing {name}.weight")))?
                .nrows();
            let k2 = rows / c_in.max(1);
            let k = (k2 as f64).sqrt().round() as usize;
            if k * k * c_in != rows {
                return Err(Error::WeightLoadError(format!(
                    "{name}.weight has {rows} rows, not k²·{c_in}"
                )));
            }
            Ok(k)
        };
        let stem = take("stem", kernel_of("stem", 3)?, 2)?;
        let mut c_in = stem.out_channels();
        let mut layers = Vec::new();
        for l in 1..=4 {
            let mut blocks = Vec::new();
            for b in 0.. {
                let p = format!("layer{l}.{b}");
                if !tensors.contains_key(&format!("{p}.conv1.weight")) {
                    break;
                }
                let stride = if l > 1 && b == 0 { 2 } else { 1 };
                let conv1 = take(&format!("{p}.conv1"), kernel_of(&format!("{p}.conv1"), c_in)?, 1)?;
                let mid = conv1.out_channels();
                let conv2 = take(&format!("{p}.conv2"), kernel_of(&format!("{p}.conv2"), mid)?, stride)?;
                let conv3 = take(&format!("{p}.conv3"), kernel_of(&format!("{p}.conv3"), mid)?, 1)?;
                let downsample = if tensors.contains_key(&format!("{p}.downsample.weight")) {
                    Some(take(&format!("{p}.downsample"), 1, stride)?)
                } else {
                    None
                };
                c_in = conv3.out_channels();
                blocks.push(Bottleneck {
                    conv1,
                    conv2,
                    conv3,
                    downsample,
                });
            }
            if blocks.is_empty() {
                return Err(Error::WeightLoadError(format!("layer{l} has no blocks")));
            }
            layers.push(blocks);
        }
        Ok(Self {
            spec: spec.clone(),
            arch: Arch::ResNet { stem, layers },
            weights_sha256: None,
        })
    }

    /// Channel count of every stage.
    pub fn stage_widths(&self) -> [usize; STAGES] {
        match &self.arch {
            Arch::Toy(layers) => {
                let mut w = [0; STAGES];
                for (slot, l) in w.iter_mut().zip(layers) {
                    *slot = l.out_channels();
                }
                w
            }
            Arch::ResNet { stem, layers } => {
                let mut w = [stem.out_channels(), 0, 0, 0, 0];
                for (i, blocks) in layers.iter().enumerate() {
                    w[i + 1] = blocks.last().expect("non-empty layer").conv3.out_channels();
                }
                w
            }
        }
    }

    pub fn trainable(&self) -> bool {
        !self.spec.frozen
    }

    /// Normalized, channel-last input rows for a batch of equally sized
    /// patches; grayscale is replicated to three channels.
    pub fn input_rows(&self, patches: &[&ImageBuffer]) -> Result<(Array2<T>, MapShape)> {
        let first = patches
            .first()
            .ok_or_else(|| Error::EmptyInput("no patches".into()))?;
        let (w, h) = (first.width(), first.height());
        if w % SIZE_MULTIPLE != 0 || h % SIZE_MULTIPLE != 0 || w == 0 || h == 0 {
            return Err(Error::ShapeError(format!(
                "patch {w}x{h} is not a positive multiple of {SIZE_MULTIPLE}"
            )));
        }
        let shape = MapShape {
            batch: patches.len(),
            height: h,
            width: w,
            channels: 3,
        };
        let mut data = Array2::zeros((shape.rows(), 3));
        let scale: [T; 3] =
            std::array::from_fn(|c| T::c(1.0 / (255.0 * self.spec.std[c])));
        let shift: [T; 3] = std::array::from_fn(|c| T::c(self.spec.mean[c] / self.spec.std[c]));
        for (b, p) in patches.iter().enumerate() {
            if p.width() != w || p.height() != h {
                return Err(Error::ShapeError("patches differ in size".into()));
            }
            for y in 0..h {
                for x in 0..w {
                    let r = shape.row(b, y, x);
                    for c in 0..3 {
                        let v = p.get(x, y, if p.channels() == 1 { 0 } else { c });
                        data[[r, c]] = T::c(v as f64) * scale[c] - shift[c];
                    }
                }
            }
        }
        Ok((data, shape))
    }

    /// Records the forward pass on `tape`; parameters take gradients only
    /// when the backbone is not frozen.
    pub fn forward_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        x: Var,
        shape: MapShape,
    ) -> Vec<(Var, MapShape)> {
        let trainable = self.trainable();
        let mut stages = Vec::with_capacity(STAGES);
        match &self.arch {
            Arch::Toy(layers) => {
                let (mut x, mut shape) = (x, shape);
                for layer in layers {
                    let (h, s) = layer.forward(tape, x, shape, trainable);
                    x = tape.relu(h);
                    shape = s;
                    stages.push((x, shape));
                }
            }
            Arch::ResNet { stem, layers } => {
                let (h, s) = stem.forward(tape, x, shape, trainable);
                let h = tape.relu(h);
                stages.push((h, s));
                let pool = WindowGeom {
                    input: s,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                };
                let (mut x, mut shape) = (tape.max_pool(h, pool), pool.output(s.channels));
                for blocks in layers {
                    for block in blocks {
                        let (a, sa) = block.conv1.forward(tape, x, shape, trainable);
                        let a = tape.relu(a);
                        let (b, sb) = block.conv2.forward(tape, a, sa, trainable);
                        let b = tape.relu(b);
                        let (c, sc) = block.conv3.forward(tape, b, sb, trainable);
                        let skip = match &block.downsample {
                            Some(ds) => ds.forward(tape, x, shape, trainable).0,
                            None => x,
                        };
                        let sum = tape.add(c, skip);
                        x = tape.relu(sum);
                        shape = sc;
                    }
                    stages.push((x, shape));
                }
            }
        }
        stages
    }

    /// Pyramid for a batch of patches (forward only).
    pub fn pyramid(&self, patches: &[&ImageBuffer]) -> Result<FeaturePyramid<T>> {
        let (rows, shape) = self.input_rows(patches)?;
        let mut tape = Tape::new();
        let x = tape.constant(rows);
        let stages = self.forward_tape(&mut tape, x, shape);
        let maps: Vec<FeatureMap<T>> = stages
            .into_iter()
            .map(|(v, s)| FeatureMap {
                shape: s,
                data: tape.value(v).clone(),
            })
            .collect();
        let downsample = maps.iter().map(|m| shape.height / m.shape.height).collect();
        Ok(FeaturePyramid {
            stages: maps,
            downsample,
        })
    }

    /// Five-stage pyramid of a single patch.
    pub fn extract_pyramid(&self, patch: &ImageBuffer) -> Result<FeaturePyramid<T>> {
        self.pyramid(&[patch])
    }
}

impl<T> Parameters<T> for Backbone<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        match &self.arch {
            Arch::Toy(layers) => {
                for (k, l) in layers.iter().enumerate() {
                    l.visit(&join(prefix, &format!("stage{}.conv", k + 1)), f);
                }
            }
            Arch::ResNet { stem, layers } => {
                stem.visit(&join(prefix, "stem"), f);
                for (l, blocks) in layers.iter().enumerate() {
                    for (b, block) in blocks.iter().enumerate() {
                        let p = join(prefix, &format!("layer{}.{}", l + 1, b));
                        block.conv1.visit(&join(&p, "conv1"), f);
                        block.conv2.visit(&join(&p, "conv2"), f);
                        block.conv3.visit(&join(&p, "conv3"), f);
                        if let Some(ds) = &block.downsample {
                            ds.visit(&join(&p, "downsample"), f);
                        }
                    }
                }
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        match &mut self.arch {
            Arch::Toy(layers) => {
                for (k, l) in layers.iter_mut().enumerate() {
                    l.visit_mut(&join(prefix, &format!("stage{}.conv", k + 1)), f);
                }
            }
            Arch::ResNet { stem, layers } => {
                stem.visit_mut(&join(prefix, "stem"), f);
                for (l, blocks) in layers.iter_mut().enumerate() {
                    for (b, block) in blocks.iter_mut().enumerate() {
                        let p = join(prefix, &format!("layer{}.{}", l + 1, b));
                        block.conv1.visit_mut(&join(&p, "conv1"), f);
                        block.conv2.visit_mut(&join(&p, "conv2"), f);
                        block.conv3.visit_mut(&join(&p, "conv3"), f);
                        if let Some(ds) = &mut block.downsample {
                            ds.visit_mut(&join(&p, "downsample"), f);
                        }
                    }
                }
            }
        }
    }
}

/// Converts `[out, in, kh, kw]` to `[(ky·kw + kx)·in + ci, out]`.
fn torch_conv_to_matrix<T: Scalar>(w: &ArrayD<T>, name: &str) -> Result<Array2<T>> {
    let s = w.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::WeightLoadError(format!(
            "{name}: expected square 4-D conv weight, got {s:?}"
        )));
    }
    let (out, cin, k) = (s[0], s[1], s[2]);
    let mut m = Array2::zeros((k * k * cin, out));
    for o in 0..out {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    m[[(ky * k + kx) * cin + ci, o]] = w[[o, ci, ky, kx]];
                }
            }
        }
    }
    Ok(m)
}

/// Folds an eval-mode batch norm into the preceding convolution.
fn fold_conv_bn<T: Scalar>(
    archive: &Archive<T>,
    conv: &str,
    bn: &str,
) -> Result<(Array2<T>, Array2<T>)> {
    let mut w = torch_conv_to_matrix(archive.get(&format!("{conv}.weight"))?, conv)?;
    let vec = |n: &str| -> Result<Vec<T>> {
        Ok(archive
            .get(&format!("{bn}.{n}"))?
            .iter()
            .copied()
            .collect())
    };
    let (gamma, beta, mean, var) = (vec("weight")?, vec("bias")?, vec("running_mean")?, vec("running_var")?);
    if gamma.len() != w.ncols() {
        return Err(Error::WeightLoadError(format!(
            "{bn}: {} channels for a conv with {} outputs",
            gamma.len(),
            w.ncols()
        )));
    }
    let eps = T::c(1e-5);
    let mut bias = Array2::zeros((1, w.ncols()));
    for (o, mut col) in w.axis_iter_mut(Axis(1)).enumerate() {
        let scale = gamma[o] / (var[o] + eps).sqrt();
        col.mapv_inplace(|v| v * scale);
        bias[[0, o]] = beta[o] - mean[o] * scale;
    }
    Ok((w, bias))
}

/// Reads torchvision ResNet tensor names (`conv1`, `bn1`, `layerL.B.*`) and
/// returns folded conv weights under this crate's naming.
pub fn fold_torchvision_resnet<T: Scalar>(
    archive: &Archive<T>,
) -> Result<BTreeMap<String, Array2<T>>> {
    let mut out = BTreeMap::new();
    let mut put = |name: String, (w, b): (Array2<T>, Array2<T>)| {
        out.insert(format!("{name}.weight"), w);
        out.insert(format!("{name}.bias"), b);
    };
    put("stem".into(), fold_conv_bn(archive, "conv1", "bn1")?);
    for l in 1..=4 {
        for b in 0.. {
            let p = format!("layer{l}.{b}");
            if !archive.tensors.contains_key(&format!("{p}.conv1.weight")) {
                break;
            }
            for j in 1..=3 {
                put(
                    format!("{p}.conv{j}"),
                    fold_conv_bn(archive, &format!("{p}.conv{j}"), &format!("{p}.bn{j}"))?,
                );
            }
            if archive.tensors.contains_key(&format!("{p}.downsample.0.weight")) {
                put(
                    format!("{p}.downsample"),
                    fold_conv_bn(
                        archive,
                        &format!("{p}.downsample.0"),
                        &format!("{p}.downsample.1"),
                    )?,
                );
            }
        }
    }
    Ok(out)
}
