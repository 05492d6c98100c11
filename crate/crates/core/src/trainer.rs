//! Supervised training, cross-validation folds, checkpoints and per-ladder
//! prediction.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, FeaturePyramid, SIZE_MULTIPLE};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::gev::{DEFAULT_MIN_SAMPLES, DEFAULT_QUANTILE};
use crate::head::{aggregate, HeadConfig};
use crate::ingest::{record_target, DatasetIndex};
use crate::ladder::{LadderDir, RungSource};
use crate::model::{JndModel, ModelConfig};
use crate::patcher::{sample_origins, PatchOrigin};
use crate::scalar::Scalar;
use crate::search::{search, SearchSpec};
use crate::tape::{bce, ParamId, Tape};
use crate::types::{ImageBuffer, JndResult, LabelOrigin, LabelSequence};

pub const CHECKPOINT_WEIGHTS: &str = "checkpoint.safetensors";
pub const CHECKPOINT_META: &str = "checkpoint.json";
pub const TRAIN_LOG: &str = "train_log.csv";

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub folds: usize,
    pub seed: u64,
    pub n_patches: usize,
    pub patch_size: usize,
    /// (image, level) samples drawn per training image per epoch.
    pub levels_per_image: usize,
    /// Half-width of the level band around the target that receives half
    /// of the samples.
    pub near_band: u32,
    pub gev_quantile: f64,
    pub gev_min_samples: usize,
    pub backbone: BackboneSpec,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    pub search: SearchSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            epochs: 50,
            lr_decay: 0.8,
            lr_decay_every: 10,
            folds: 10,
            seed: 0,
            n_patches: 16,
            patch_size: 64,
            levels_per_image: 16,
            near_band: 10,
            gev_quantile: DEFAULT_QUANTILE,
            gev_min_samples: DEFAULT_MIN_SAMPLES,
            backbone: BackboneSpec::default(),
            fusion: FusionConfig::default(),
            head: HeadConfig::default(),
            search: SearchSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            fusion: self.fusion.clone(),
            head: self.head.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0) {
            return bad(format!("lr_decay must be positive, got {}", self.lr_decay));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("lr_decay_every", self.lr_decay_every),
            ("n_patches", self.n_patches),
            ("patch_size", self.patch_size),
            ("levels_per_image", self.levels_per_image),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.folds < 3 {
            return bad(format!("folds must be at least 3, got {}", self.folds));
        }
        if !self.patch_size.is_multiple_of(SIZE_MULTIPLE) {
            return bad(format!(
                "patch_size {} is not a multiple of {SIZE_MULTIPLE}",
                self.patch_size
            ));
        }
        if !(self.gev_quantile > 0.0 && self.gev_quantile < 1.0) {
            return bad(format!("gev_quantile {} outside (0, 1)", self.gev_quantile));
        }
        self.fusion.validate()?;
        self.search.validate()
    }

    /// Step-decayed learning rate of a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Record indices of one cross-validation rotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// `k` rotations over a seeded shuffle split into `k` near-equal subsets:
/// fold `i` tests on subset `i`, validates on subset `i + 1` and trains on
/// the rest.
pub fn split_folds(index: &DatasetIndex, k: usize, seed: u64) -> Result<Vec<Fold>> {
    split_indices(index.records.len(), k, seed)
}

pub fn split_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || n < k {
        return Err(Error::TooFewRecords { got: n, folds: k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let subsets: Vec<Vec<usize>> = (0..k)
        .map(|j| {
            let mut s = order[j * n / k..(j + 1) * n / k].to_vec();
            s.sort_unstable();
            s
        })
        .collect();
    Ok((0..k)
        .map(|i| {
            let v = (i + 1) % k;
            let mut train: Vec<usize> = (0..k)
                .filter(|&j| j != i && j != v)
                .flat_map(|j| subsets[j].iter().copied())
                .collect();
            train.sort_unstable();
            Fold {
                train,
                val: subsets[v].clone(),
                test: subsets[i].clone(),
            }
        })
        .collect())
}

/// A ladder with its ground-truth target level.
#[derive(Debug, Clone)]
pub struct LabeledLadder<L> {
    pub image_id: String,
    pub ladder: L,
    pub target: u32,
}

impl<L: RungSource> LabeledLadder<L> {
    pub fn label(&self, level: u32) -> u8 {
        u8::from(level < self.target)
    }
}

/// Opens the ladders of `ids` and resolves their targets.
pub fn labeled_ladders(
    index: &DatasetIndex,
    ids: &[usize],
    config: &TrainConfig,
) -> Result<Vec<LabeledLadder<LadderDir>>> {
    ids.par_iter()
        .map(|&i| {
            let r = &index.records[i];
            let (target, _) = record_target(r, config.gev_quantile, config.gev_min_samples)?;
            Ok(LabeledLadder {
                image_id: r.image_id.clone(),
                ladder: index.ladder_dir(r)?,
                target,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_bce: f64,
    pub val_bce: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema: u32,
    pub config: TrainConfig,
    pub fold: Option<usize>,
    /// 0-based epoch whose parameters were kept.
    pub epoch: usize,
    pub train_bce: f64,
    pub val_bce: Option<f64>,
    /// Whether selection fell back to train BCE for lack of validation data.
    pub selected_on_train: bool,
    pub weights_file: String,
    pub weights_sha256: String,
    /// Sampling RNG state right after the selected epoch.
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub model: JndModel<T>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Writes `checkpoint.safetensors` and `checkpoint.json` into `dir`.
    pub fn save(&mut self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.meta.weights_file = CHECKPOINT_WEIGHTS.to_string();
        self.meta.weights_sha256 = self.model.save_weights(&dir.join(CHECKPOINT_WEIGHTS))?;
        let path = dir.join(CHECKPOINT_META);
        let text = serde_json::to_string_pretty(&self.meta)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads from a checkpoint directory or its `checkpoint.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let meta_path = if path.is_dir() {
            path.join(CHECKPOINT_META)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let dir = meta_path.parent().unwrap_or(Path::new("."));
        let mut model = JndModel::new(&meta.config.model(), meta.config.seed)?;
        let sha = model.load_weights(&dir.join(&meta.weights_file))?;
        if sha != meta.weights_sha256 {
            return Err(Error::WeightLoadError(format!(
                "{} hash {sha} does not match the sidecar",
                meta.weights_file
            )));
        }
        Ok(Self { meta, model })
    }
}

pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::gev::csv_error(path, e))?;
    for row in log {
        w.serialize(row).map_err(|e| crate::gev::csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub log: Vec<EpochLog>,
}

struct Adam<T> {
    state: HashMap<ParamId, (Array2<T>, Array2<T>)>,
    step: i32,
}

impl<T: Scalar> Adam<T> {
    fn new() -> Self {
        Self {
            state: HashMap::new(),
            step: 0,
        }
    }

    fn update(&mut self, model: &mut JndModel<T>, grads: &HashMap<ParamId, Array2<T>>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::c(ADAM_BETA1), T::c(ADAM_BETA2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let (lr, eps) = (T::c(lr), T::c(ADAM_EPS));
        let state = &mut self.state;
        model.visit_all_mut(&mut |_, p| {
            let Some(g) = grads.get(&p.id()) else { return };
            let (m, v) = state
                .entry(p.id())
                .or_insert_with(|| (Array2::zeros(g.raw_dim()), Array2::zeros(g.raw_dim())));
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        });
    }
}

/// Levels for one image: even draws fall within `near_band` of the
/// target, odd draws anywhere in the range.
pub fn stratified_levels<L: RungSource>(
    item: &LabeledLadder<L>,
    count: usize,
    near_band: u32,
    rng: &mut impl Rng,
) -> Vec<u32> {
    let range = item.ladder.codec().level_range;
    let lo = range.clamp(i64::from(item.target) - i64::from(near_band));
    let hi = range.clamp(i64::from(item.target) + i64::from(near_band));
    (0..count)
        .map(|j| {
            if j % 2 == 0 {
                rng.gen_range(lo..=hi)
            } else {
                rng.gen_range(range.lo()..=range.hi())
            }
        })
        .collect()
}

struct Sample {
    image: usize,
    level: u32,
    label: u8,
}

/// Patch crops of one image under one set of origins.
fn crops(img: &ImageBuffer, origins: &[PatchOrigin], size: usize) -> Result<Vec<ImageBuffer>> {
    origins
        .iter()
        .map(|o| img.crop(o.x, o.y, size, size))
        .collect()
}

/// Per-image reference crops, plus their pyramid when the backbone is
/// frozen.
struct ReferenceView<T> {
    origins: Vec<PatchOrigin>,
    patches: Vec<ImageBuffer>,
    pyramid: Option<FeaturePyramid<T>>,
}

fn reference_views<T: Scalar, L: RungSource>(
    model: &JndModel<T>,
    items: &[LabeledLadder<L>],
    config: &TrainConfig,
    rngs: Vec<ChaCha8Rng>,
) -> Result<Vec<ReferenceView<T>>> {
    items
        .par_iter()
        .zip(rngs)
        .map(|(item, mut rng)| {
            let reference = item.ladder.reference()?;
            let origins = sample_origins(
                reference.width(),
                reference.height(),
                config.n_patches,
                config.patch_size,
                &mut rng,
            )?;
            let patches = crops(&reference, &origins, config.patch_size)?;
            let pyramid = if model.backbone.trainable() {
                None
            } else {
                let refs: Vec<&ImageBuffer> = patches.iter().collect();
                Some(model.backbone.pyramid(&refs)?)
            };
            Ok(ReferenceView {
                origins,
                patches,
                pyramid,
            })
        })
        .collect()
}

/// Loss of one sample and, optionally, its parameter gradients.
fn sample_loss<T: Scalar, L: RungSource>(
    model: &JndModel<T>,
    view: &ReferenceView<T>,
    item: &LabeledLadder<L>,
    sample: &Sample,
    config: &TrainConfig,
    with_grad: bool,
) -> Result<(f64, Option<HashMap<ParamId, Array2<T>>>)> {
    let rung = item.ladder.rung(sample.level)?;
    let dist = crops(&rung, &view.origins, config.patch_size)?;
    let dist_refs: Vec<&ImageBuffer> = dist.iter().collect();
    let mut tape = Tape::new();
    let r = match &view.pyramid {
        Some(p) => JndModel::pyramid_on_tape(&mut tape, p),
        None => {
            let refs: Vec<&ImageBuffer> = view.patches.iter().collect();
            model.features_tape(&mut tape, &refs)?
        }
    };
    let d = model.features_tape(&mut tape, &dist_refs)?;
    let z = model.logit_tape(&mut tape, &r, &d)?;
    let loss = tape.bce_logits(z, &[T::c(f64::from(sample.label))]);
    let value = tape.scalar(loss).f64();
    let grads = with_grad.then(|| tape.backward(loss).into_params());
    Ok((value, grads))
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A11_0000_0000 ^ stream);
    rng.set_stream(epoch as u64);
    rng
}

fn image_rngs(rng: &mut ChaCha8Rng, n: usize) -> Vec<ChaCha8Rng> {
    (0..n).map(|_| ChaCha8Rng::seed_from_u64(rng.gen())).collect()
}

/// Mean BCE over a fixed validation draw (same positions and levels every
/// epoch).
fn validation_bce<T: Scalar, L: RungSource>(
    model: &JndModel<T>,
    items: &[LabeledLadder<L>],
    config: &TrainConfig,
) -> Result<Option<f64>> {
    if items.is_empty() {
        return Ok(None);
    }
    let mut rng = epoch_rng(config.seed, 0, 0x5A1);
    let views = reference_views(model, items, config, image_rngs(&mut rng, items.len()))?;
    let samples: Vec<Sample> = items
        .iter()
        .enumerate()
        .flat_map(|(i, item)| {
            stratified_levels(item, config.levels_per_image, config.near_band, &mut rng)
                .into_iter()
                .map(move |level| Sample {
                    image: i,
                    level,
                    label: item.label(level),
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| sample_loss(model, &views[s.image], &items[s.image], s, config, false).map(|r| r.0))
        .collect::<Result<_>>()?;
    Ok(Some(losses.iter().sum::<f64>() / losses.len() as f64))
}

/// Trains from a fresh model; keeps the parameters of the epoch with the
/// lowest validation BCE (train BCE when `val` is empty).
pub fn train<T: Scalar, L: RungSource>(
    config: &TrainConfig,
    train_set: &[LabeledLadder<L>],
    val_set: &[LabeledLadder<L>],
    fold: Option<usize>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("empty training fold".into()));
    }
    let mut model = JndModel::<T>::new(&config.model(), config.seed)?;
    let mut adam = Adam::new();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, JndModel<T>, CheckpointMeta)> = None;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut rng = epoch_rng(config.seed, epoch, 0x7EA);
        let views = reference_views(&model, train_set, config, image_rngs(&mut rng, train_set.len()))?;
        let mut samples: Vec<Sample> = Vec::new();
        for (i, item) in train_set.iter().enumerate() {
            for level in stratified_levels(item, config.levels_per_image, config.near_band, &mut rng) {
                samples.push(Sample {
                    image: i,
                    level,
                    label: item.label(level),
                });
            }
        }
        samples.shuffle(&mut rng);

        let mut total = 0.0;
        for (b, batch) in samples.chunks(config.batch_size).enumerate() {
            let results: Vec<(f64, Option<HashMap<ParamId, Array2<T>>>)> = batch
                .par_iter()
                .map(|s| sample_loss(&model, &views[s.image], &train_set[s.image], s, config, true))
                .collect::<Result<_>>()?;
            let mut sum: HashMap<ParamId, Array2<T>> = HashMap::new();
            let mut batch_loss = 0.0;
            for (loss, grads) in results {
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
                batch_loss += loss;
                for (id, g) in grads.expect("requested") {
                    match sum.get_mut(&id) {
                        Some(acc) => *acc += &g,
                        None => {
                            sum.insert(id, g);
                        }
                    }
                }
            }
            let scale = T::c(1.0 / batch.len() as f64);
            for g in sum.values_mut() {
                *g *= scale;
            }
            adam.update(&mut model, &sum, lr);
            total += batch_loss;
        }
        let train_bce = total / samples.len() as f64;
        let val_bce = validation_bce(&model, val_set, config)?;
        log.push(EpochLog {
            epoch,
            train_bce,
            val_bce,
            lr,
        });
        let criterion = val_bce.unwrap_or(train_bce);
        if best.as_ref().is_none_or(|(c, _, _)| criterion < *c) {
            let meta = CheckpointMeta {
                schema: 1,
                config: config.clone(),
                fold,
                epoch,
                train_bce,
                val_bce,
                selected_on_train: val_bce.is_none(),
                weights_file: CHECKPOINT_WEIGHTS.to_string(),
                weights_sha256: String::new(),
                rng: rng.clone(),
            };
            best = Some((criterion, model.clone(), meta));
        }
    }
    let (_, model, meta) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        checkpoint: Checkpoint { meta, model },
        log,
    })
}

/// Binary lossy/lossless decision per distorted image, given shared patch
/// positions.
pub trait LevelClassifier: Sync {
    type Prepared: Sync;

    fn prepare(&self, reference: &ImageBuffer, origins: &[PatchOrigin], size: usize) -> Result<Self::Prepared>;

    fn label(&self, prepared: &Self::Prepared, distorted: &ImageBuffer, origins: &[PatchOrigin], size: usize) -> Result<u8>;
}

/// The trained backbone, fusion and head.
pub struct NeuralClassifier<'a, T> {
    pub model: &'a JndModel<T>,
}

impl<T: Scalar> LevelClassifier for NeuralClassifier<'_, T> {
    type Prepared = FeaturePyramid<T>;

    fn prepare(&self, reference: &ImageBuffer, origins: &[PatchOrigin], size: usize) -> Result<Self::Prepared> {
        let patches = crops(reference, origins, size)?;
        let refs: Vec<&ImageBuffer> = patches.iter().collect();
        self.model.backbone.pyramid(&refs)
    }

    fn label(&self, prepared: &Self::Prepared, distorted: &ImageBuffer, origins: &[PatchOrigin], size: usize) -> Result<u8> {
        let patches = crops(distorted, origins, size)?;
        let refs: Vec<&ImageBuffer> = patches.iter().collect();
        let decision = aggregate(&self.model.assess_with_reference(prepared, &refs)?)?;
        Ok(decision.label)
    }
}

/// Lossy iff the whole-image PSNR does not exceed a known threshold.
pub struct PsnrThresholdOracle {
    pub threshold_db: f64,
}

impl LevelClassifier for PsnrThresholdOracle {
    type Prepared = ImageBuffer;

    fn prepare(&self, reference: &ImageBuffer, _: &[PatchOrigin], _: usize) -> Result<ImageBuffer> {
        Ok(reference.clone())
    }

    fn label(&self, reference: &ImageBuffer, distorted: &ImageBuffer, _: &[PatchOrigin], _: usize) -> Result<u8> {
        Ok(u8::from(crate::eval::psnr(reference, distorted)? <= self.threshold_db))
    }
}

/// Labels every rung with one shared set of patch positions and runs the
/// search.
pub fn predict_image<C: LevelClassifier, L: RungSource + ?Sized>(
    classifier: &C,
    ladder: &L,
    spec: &SearchSpec,
    n_patches: usize,
    patch_size: usize,
    seed: u64,
) -> Result<JndResult> {
    spec.validate()?;
    let reference = ladder.reference()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origins = sample_origins(reference.width(), reference.height(), n_patches, patch_size, &mut rng)?;
    let prepared = classifier.prepare(&reference, &origins, patch_size)?;
    let codec = ladder.codec().clone();
    let levels: Vec<u32> = codec.level_range.levels().collect();
    let labels: Vec<u8> = levels
        .par_iter()
        .map(|&level| {
            let rung = ladder.rung(level)?;
            classifier.label(&prepared, &rung, &origins, patch_size)
        })
        .collect::<Result<_>>()?;
    let seq = LabelSequence::from_levels(codec, &labels, LabelOrigin::Predicted)?;
    search(&seq, spec)
}

/// Mean BCE of the model on every level of `items`, using `q_dist`.
pub fn ladder_bce<T: Scalar, L: RungSource>(
    model: &JndModel<T>,
    items: &[LabeledLadder<L>],
    n_patches: usize,
    patch_size: usize,
    seed: u64,
) -> Result<f64> {
    let per: Vec<f64> = items
        .par_iter()
        .map(|item| -> Result<f64> {
            let reference = item.ladder.reference()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let origins = sample_origins(reference.width(), reference.height(), n_patches, patch_size, &mut rng)?;
            let classifier = NeuralClassifier { model };
            let pyr = classifier.prepare(&reference, &origins, patch_size)?;
            let mut total = 0.0;
            let range = item.ladder.codec().level_range;
            for level in range.levels() {
                let rung = item.ladder.rung(level)?;
                let patches = crops(&rung, &origins, patch_size)?;
                let refs: Vec<&ImageBuffer> = patches.iter().collect();
                let q = aggregate(&model.assess_with_reference(&pyr, &refs)?)?.q_dist;
                total += bce(q, T::c(f64::from(item.label(level)))).f64();
            }
            Ok(total / range.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// Probe used by checkpoint round-trip checks: `q_dist` for a fixed
/// synthetic patch pair.
pub fn probe_output<T: Scalar>(model: &JndModel<T>, patch_size: usize) -> Result<T> {
    let r = ImageBuffer::from_fn(patch_size, patch_size, 3, |x, y, c| ((x * 3 + y * 5 + c * 40) % 256) as u8);
    let d = ImageBuffer::from_fn(patch_size, patch_size, 3, |x, y, c| ((x * 3 + y * 5 + c * 40 + (x ^ y) % 9) % 256) as u8);
    Ok(model.decide(&[&r], &[&d])?.q_dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::synthesize;
    use crate::types::CompressionLadder;
    use std::collections::BTreeSet;

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-4);
        assert_eq!(c.lr_at(9), 1e-4);
        assert!((c.lr_at(10) - 8e-5).abs() < 1e-18);
        assert!((c.lr_at(25) - 6.4e-5).abs() < 1e-18);
        assert!((c.lr_at(49) - 1e-4 * 0.8f64.powi(4)).abs() < 1e-18);
    }

    #[test]
    fn folds_partition_records() {
        let folds = split_indices(10, 10, 3).unwrap();
        assert_eq!(folds.len(), 10);
        let tests: BTreeSet<usize> = folds.iter().map(|f| {
            assert_eq!(f.test.len(), 1);
            f.test[0]
        }).collect();
        assert_eq!(tests.len(), 10);
        for n in [10, 13, 37] {
            for f in split_indices(n, 10, 9).unwrap() {
                let all: Vec<usize> = f.train.iter().chain(&f.val).chain(&f.test).copied().collect();
                let set: BTreeSet<usize> = all.iter().copied().collect();
                assert_eq!(set.len(), all.len());
                assert_eq!(set, (0..n).collect());
            }
        }
        assert_eq!(split_indices(25, 10, 1).unwrap(), split_indices(25, 10, 1).unwrap());
        assert!(matches!(split_indices(5, 10, 0), Err(Error::TooFewRecords { got: 5, folds: 10 })));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.folds = 2;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            patch_size: 48,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"lr": 0.001}"#).unwrap();
        assert_eq!(parsed.batch_size, 16);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 0.001}"#).is_err());
    }

    fn tiny_set() -> Vec<LabeledLadder<CompressionLadder>> {
        synthesize(7, 3, 64)
            .unwrap()
            .into_iter()
            .map(|s| LabeledLadder {
                image_id: s.image_id,
                target: s.jnd_target,
                ladder: s.ladder,
            })
            .collect()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            n_patches: 2,
            patch_size: 32,
            levels_per_image: 4,
            fusion: FusionConfig {
                d_model: 16,
                head_count: 2,
                layer_norm: false,
            },
            head: HeadConfig { hidden: vec![8, 8] },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn oracle_prediction_recovers_targets() {
        for s in synthesize(11, 4, 64).unwrap() {
            let oracle = PsnrThresholdOracle {
                threshold_db: s.psnr_threshold,
            };
            let r = predict_image(&oracle, &s.ladder, &SearchSpec::naive(), 4, 32, 0).unwrap();
            assert_eq!(r.jnd_level, Some(s.jnd_target));
            assert_eq!(r.source_labels.labels.len(), s.ladder.rungs.len());
        }
    }

    #[test]
    fn training_is_deterministic_and_selects_best_epoch() {
        let set = tiny_set();
        let cfg = tiny_config();
        let a = train::<f32, _>(&cfg, &set[..2], &set[2..], Some(0)).unwrap();
        let b = train::<f32, _>(&cfg, &set[..2], &set[2..], Some(0)).unwrap();
        assert_eq!(a.log, b.log);
        let chosen = a.checkpoint.meta.val_bce.unwrap();
        assert!(a.log.iter().all(|e| chosen <= e.val_bce.unwrap()));

        let dir = tempfile::tempdir().unwrap();
        let mut ck = a.checkpoint.clone();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::<f32>::load(dir.path()).unwrap();
        let before = probe_output(&a.checkpoint.model, 32).unwrap();
        let after = probe_output(&back.model, 32).unwrap();
        assert!((before - after).abs() <= 1e-6);
        assert_eq!(back.meta.rng, a.checkpoint.meta.rng);

        let neural = NeuralClassifier { model: &back.model };
        let p1 = predict_image(&neural, &set[0].ladder, &SearchSpec::default(), 2, 32, 5).unwrap();
        let p2 = predict_image(&neural, &set[0].ladder, &SearchSpec::default(), 2, 32, 5).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.source_labels.labels.len(), 100);
    }

    #[test]
    fn empty_validation_falls_back_to_train_loss() {
        let set = tiny_set();
        let out = train::<f32, _>(&tiny_config(), &set, &[], None).unwrap();
        assert!(out.checkpoint.meta.selected_on_train);
        let best = out.checkpoint.meta.train_bce;
        assert!(out.log.iter().all(|e| best <= e.train_bce));
    }
}
