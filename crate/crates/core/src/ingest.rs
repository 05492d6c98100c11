//! Dataset indexing, synthetic data with known JND, and target derivation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::psnr;
use crate::gev::{fit_gev, gev_target, write_gev_log, GevLogRow};
use crate::ladder::{
    build_ladder, read_image, rung_file_name, write_ladder, LadderAnnotations, LadderDir,
    LadderManifest, LADDER_MANIFEST, REFERENCE_FILE,
};
use crate::types::{CodecSpec, CompressionLadder, ImageBuffer, LevelRange};

pub const INDEX_FILE: &str = "index.json";
pub const LADDERS_DIR: &str = "ladders";
pub const GEV_LOG: &str = "gev_fits.csv";
pub const MIN_SYNTHETIC_SIZE: usize = 32;

/// Fraction of the PSNR span at which synthetic thresholds are drawn.
const THRESHOLD_SPAN: (f64, f64) = (0.35, 0.65);
/// Synthetic ladders need at least this PSNR span to place a threshold.
const MIN_PSNR_SPAN_DB: f64 = 1.0;
const MAX_RENDER_ATTEMPTS: u64 = 16;

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "bmp", "jpg", "jpeg", "tif"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// `ref/<id>.<ext>`, `jnd.csv` (`id,level,level,...`), optional
    /// `dist/<id>/qNNN.<ext>`.
    #[serde(rename = "MCL_JCI")]
    MclJci,
    /// `images/<id>.<ext>` and `annotations.csv` (`image_id,jnd`, one row
    /// per sample or a single aggregated row).
    #[serde(rename = "KONJND_1K")]
    Konjnd1k,
    /// One `<id>/ladder.json` directory per image.
    #[serde(rename = "LADDER_DIR")]
    LadderDir,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidConfig(format!("unknown layout {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureClass {
    Gradient,
    Stripes,
    Glyphs,
    FlatRegions,
    Noise,
}

impl TextureClass {
    pub const ALL: [TextureClass; 5] = [
        TextureClass::Gradient,
        TextureClass::Stripes,
        TextureClass::Glyphs,
        TextureClass::FlatRegions,
        TextureClass::Noise,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub image_id: String,
    /// Relative to the index root unless absolute.
    pub source: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<PathBuf>,
    /// Pre-encoded distorted images, when the corpus ships them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distorted: Option<PathBuf>,
    pub codec: CodecSpec,
    #[serde(default)]
    pub jnd_samples: Vec<u32>,
    pub jnd_target: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture: Option<TextureClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub schema: u32,
    pub layout: Layout,
    pub records: Vec<DatasetRecord>,
    /// Directory that relative record paths hang off.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetIndex {
    pub fn new(layout: Layout, records: Vec<DatasetRecord>, root: &Path) -> Result<Self> {
        let index = Self {
            schema: 1,
            layout,
            records,
            root: root.to_path_buf(),
        };
        index.validate()?;
        Ok(index)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(&r.image_id) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate image_id {}",
                    r.image_id
                )));
            }
            if r.jnd_samples.is_empty() && r.jnd_target.is_none() {
                return Err(Error::InvalidConfig(format!(
                    "record {} has neither JND samples nor a target",
                    r.image_id
                )));
            }
            let range = r.codec.level_range;
            for &v in r.jnd_samples.iter().chain(r.jnd_target.iter()) {
                range.check(i64::from(v))?;
            }
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.root.join(path)
    }

    pub fn ladder_dir(&self, record: &DatasetRecord) -> Result<LadderDir> {
        let rel = record.ladder.as_ref().ok_or_else(|| Error::LayoutError {
            reason: format!("record {} has no materialized ladder", record.image_id),
            paths: vec![self.resolve(&record.source)],
        })?;
        LadderDir::open(&self.resolve(rel))
    }

    /// Opens every ladder (hash-checked), in record order.
    pub fn ladder_dirs(&self) -> Result<Vec<LadderDir>> {
        self.records
            .par_iter()
            .map(|r| self.ladder_dir(r))
            .collect()
    }

    pub fn subset(&self, ids: &[usize]) -> DatasetIndex {
        DatasetIndex {
            schema: self.schema,
            layout: self.layout,
            records: ids.iter().map(|&i| self.records[i].clone()).collect(),
            root: self.root.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Reads an index; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut index: DatasetIndex = serde_json::from_str(&text)?;
        index.root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        index.validate()?;
        Ok(index)
    }
}

fn relative_to(path: &Path, root: &Path) -> PathBuf {
    path.strip_prefix(root)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| path.to_path_buf())
}

fn layout_error(reason: impl Into<String>, mut paths: Vec<PathBuf>) -> Error {
    paths.sort();
    let count = paths.len();
    paths.truncate(10);
    let mut reason = reason.into();
    if count > 10 {
        reason = format!("{reason} ({count} paths, first 10 listed)");
    }
    Error::LayoutError { reason, paths }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out: Vec<PathBuf> = rd
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Indexes a corpus laid out as `layout`.
pub fn load_dataset(root: &Path, layout: Layout) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(layout_error("dataset root is not a directory", vec![root.to_path_buf()]));
    }
    match layout {
        Layout::LadderDir => load_ladder_dirs(root),
        Layout::MclJci => load_mcl_jci(root),
        Layout::Konjnd1k => load_konjnd(root),
    }
}

fn load_ladder_dirs(root: &Path) -> Result<DatasetIndex> {
    let mut bad = Vec::new();
    let mut manifests = Vec::new();
    for entry in sorted_entries(root)? {
        if !entry.is_dir() {
            continue;
        }
        if !entry.join(LADDER_MANIFEST).is_file() {
            bad.push(entry);
            continue;
        }
        manifests.push(entry);
    }
    let checked: Vec<std::result::Result<LadderManifest, Vec<PathBuf>>> = manifests
        .par_iter()
        .map(|dir| {
            let m = LadderManifest::read(dir).map_err(|_| vec![dir.join(LADDER_MANIFEST)])?;
            match m.verify(dir) {
                Ok(()) => Ok(m),
                Err(Error::LayoutError { paths, .. }) => Err(paths),
                Err(_) => Err(vec![dir.clone()]),
            }
        })
        .collect();
    let mut records = Vec::new();
    for (dir, res) in manifests.iter().zip(checked) {
        match res {
            Ok(m) => records.push(DatasetRecord {
                image_id: m.image_id.clone(),
                source: relative_to(&dir.join(REFERENCE_FILE), root),
                ladder: Some(relative_to(dir, root)),
                distorted: None,
                codec: m.codec(),
                jnd_samples: m.jnd_samples.clone(),
                jnd_target: m.jnd_target,
                psnr_threshold: m.psnr_threshold,
                texture: None,
            }),
            Err(paths) => bad.extend(paths),
        }
    }
    if !bad.is_empty() {
        return Err(layout_error("nonconforming ladder directories", bad));
    }
    if records.is_empty() {
        return Err(layout_error("no ladder manifests found", vec![root.to_path_buf()]));
    }
    DatasetIndex::new(Layout::LadderDir, records, root)
}

fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for p in sorted_entries(dir)? {
        if p.is_file() && is_image(&p) {
            out.entry(stem(&p)).or_insert(p);
        }
    }
    Ok(out)
}

/// Reads `id,value[,value...]` rows; `#` starts a comment line.
fn read_annotation_rows(path: &Path, header: bool) -> Result<Vec<(String, Vec<u32>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| crate::gev::csv_error(path, e))?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| crate::gev::csv_error(path, e))?;
        let mut fields = rec.iter().filter(|f| !f.is_empty());
        let Some(id) = fields.next() else { continue };
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite() && *v >= 0.0)
                    .map(|v| v.round() as u32)
                    .ok_or_else(|| layout_error(format!("bad level {f:?} for {id}"), vec![path.to_path_buf()]))
            })
            .collect::<Result<Vec<u32>>>()?;
        rows.push((id.to_string(), values));
    }
    Ok(rows)
}

fn annotated_records(
    root: &Path,
    sources: BTreeMap<String, PathBuf>,
    annotations: BTreeMap<String, Vec<u32>>,
    distorted_root: Option<&Path>,
    annotation_file: &Path,
    layout: Layout,
) -> Result<DatasetIndex> {
    let codec = CodecSpec::jpeg();
    let range = codec.level_range;
    let mut bad = Vec::new();
    let mut records = Vec::new();
    for id in annotations.keys() {
        if !sources.contains_key(id) {
            bad.push(root.join(format!("<missing source for {id}>")));
        }
    }
    for (id, src) in &sources {
        let Some(values) = annotations.get(id) else {
            bad.push(src.clone());
            continue;
        };
        if values.is_empty() || values.iter().any(|&v| !range.contains(i64::from(v))) {
            bad.push(annotation_file.to_path_buf());
            continue;
        }
        let distorted = match distorted_root {
            Some(d) => {
                let dir = d.join(id);
                let have = if dir.is_dir() { images_by_stem(&dir)? } else { BTreeMap::new() };
                let missing: Vec<PathBuf> = range
                    .levels()
                    .map(|l| rung_file_name(l).trim_end_matches(".png").to_string())
                    .filter(|s| !have.contains_key(s))
                    .map(|s| dir.join(format!("{s}.*")))
                    .collect();
                if !missing.is_empty() {
                    bad.extend(missing);
                    continue;
                }
                Some(relative_to(&dir, root))
            }
            None => None,
        };
        let (jnd_samples, jnd_target) = if values.len() == 1 {
            (Vec::new(), Some(values[0]))
        } else {
            (values.clone(), None)
        };
        records.push(DatasetRecord {
            image_id: id.clone(),
            source: relative_to(src, root),
            ladder: None,
            distorted,
            codec: codec.clone(),
            jnd_samples,
            jnd_target,
            psnr_threshold: None,
            texture: None,
        });
    }
    if !bad.is_empty() {
        return Err(layout_error("nonconforming or missing files", bad));
    }
    if records.is_empty() {
        return Err(layout_error("no source images found", vec![root.to_path_buf()]));
    }
    DatasetIndex::new(layout, records, root)
}

fn require(path: PathBuf, bad: &mut Vec<PathBuf>) -> Option<PathBuf> {
    if path.exists() {
        Some(path)
    } else {
        bad.push(path);
        None
    }
}

fn load_mcl_jci(root: &Path) -> Result<DatasetIndex> {
    let mut bad = Vec::new();
    let refs = require(root.join("ref"), &mut bad);
    let ann = require(root.join("jnd.csv"), &mut bad);
    let (Some(refs), Some(ann)) = (refs, ann) else {
        return Err(layout_error("MCL_JCI layout needs ref/ and jnd.csv", bad));
    };
    let sources = images_by_stem(&refs)?;
    let mut annotations = BTreeMap::new();
    for (id, values) in read_annotation_rows(&ann, false)? {
        annotations.entry(id).or_insert_with(Vec::new).extend(values);
    }
    let dist = root.join("dist");
    let dist = dist.is_dir().then_some(dist);
    annotated_records(root, sources, annotations, dist.as_deref(), &ann, Layout::MclJci)
}

fn load_konjnd(root: &Path) -> Result<DatasetIndex> {
    let mut bad = Vec::new();
    let imgs = require(root.join("images"), &mut bad);
    let ann = require(root.join("annotations.csv"), &mut bad);
    let (Some(imgs), Some(ann)) = (imgs, ann) else {
        return Err(layout_error("KONJND_1K layout needs images/ and annotations.csv", bad));
    };
    let sources = images_by_stem(&imgs)?;
    let mut annotations = BTreeMap::new();
    for (id, values) in read_annotation_rows(&ann, true)? {
        annotations.entry(id).or_insert_with(Vec::new).extend(values);
    }
    annotated_records(root, sources, annotations, None, &ann, Layout::Konjnd1k)
}

/// Target level of a record: explicit, else the GEV quantile of its samples.
pub fn record_target(
    record: &DatasetRecord,
    quantile: f64,
    min_n: usize,
) -> Result<(u32, Option<GevLogRow>)> {
    if let Some(t) = record.jnd_target {
        return Ok((t, None));
    }
    let xs: Vec<f64> = record.jnd_samples.iter().map(|&v| f64::from(v)).collect();
    let fit = fit_gev(&xs, min_n)?;
    let target = gev_target(&fit.params, quantile, record.codec.level_range);
    Ok((
        target,
        Some(GevLogRow {
            image_id: record.image_id.clone(),
            mu: fit.params.location,
            sigma: fit.params.scale,
            xi: fit.params.shape,
            target,
        }),
    ))
}

fn ladder_from_files(source: ImageBuffer, dir: &Path, codec: &CodecSpec) -> Result<CompressionLadder> {
    let files = images_by_stem(dir)?;
    let mut rungs = BTreeMap::new();
    for level in codec.level_range.levels() {
        let key = rung_file_name(level).trim_end_matches(".png").to_string();
        let path = files
            .get(&key)
            .ok_or_else(|| layout_error("missing distorted image", vec![dir.join(&key)]))?;
        let img = read_image(path)?;
        let img = if img.channels() != source.channels() {
            return Err(Error::DimensionMismatch(format!(
                "{} has {} channels, source has {}",
                path.display(),
                img.channels(),
                source.channels()
            )));
        } else {
            img
        };
        if !img.same_shape(&source) {
            return Err(Error::DimensionMismatch(format!("{} differs in size", path.display())));
        }
        rungs.insert(level, img);
    }
    Ok(CompressionLadder {
        source,
        codec: codec.clone(),
        rungs,
    })
}

/// Builds and writes a ladder directory for every record lacking one,
/// resolves targets (GEV for sample lists) and returns a `LADDER_DIR`
/// index rooted at `out_dir`. GEV fits are logged to `out_dir/gev_fits.csv`.
pub fn materialize(
    index: &DatasetIndex,
    out_dir: &Path,
    quantile: f64,
    min_n: usize,
) -> Result<DatasetIndex> {
    let ladders_root = out_dir.join(LADDERS_DIR);
    let results: Vec<(DatasetRecord, Option<GevLogRow>)> = index
        .records
        .par_iter()
        .map(|r| -> Result<_> {
            let (target, log) = record_target(r, quantile, min_n)?;
            let dir = ladders_root.join(&r.image_id);
            let notes = LadderAnnotations {
                jnd_samples: r.jnd_samples.clone(),
                jnd_target: Some(target),
                psnr_threshold: r.psnr_threshold,
            };
            let ladder = match (&r.ladder, &r.distorted) {
                (Some(l), _) => LadderDir::open(&index.resolve(l))?.load()?,
                (None, Some(d)) => {
                    let src = read_image(&index.resolve(&r.source))?;
                    ladder_from_files(src, &index.resolve(d), &r.codec)?
                }
                (None, None) => build_ladder(&read_image(&index.resolve(&r.source))?, &r.codec)?,
            };
            write_ladder(&ladder, &dir, &r.image_id, &notes)?;
            let rel = relative_to(&dir, out_dir);
            Ok((
                DatasetRecord {
                    source: rel.join(REFERENCE_FILE),
                    ladder: Some(rel),
                    distorted: None,
                    jnd_target: Some(target),
                    ..r.clone()
                },
                log,
            ))
        })
        .collect::<Result<_>>()?;
    let (records, logs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let logs: Vec<GevLogRow> = logs.into_iter().flatten().collect();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_gev_log(&out_dir.join(GEV_LOG), &logs)?;
    DatasetIndex::new(Layout::LadderDir, records, out_dir)
}

/// One synthetic image with its ladder and oracle ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub image_id: String,
    pub texture: TextureClass,
    pub ladder: CompressionLadder,
    /// PSNR of every rung against the source, in level order.
    pub psnr_curve: Vec<f64>,
    pub psnr_threshold: f64,
    pub jnd_target: u32,
}

fn image_rng(seed: u64, index: usize, attempt: u64) -> ChaCha8Rng {
    let mix = (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ attempt.wrapping_mul(0xD1B5_4A32_D192_ED03);
    ChaCha8Rng::seed_from_u64(seed ^ mix)
}

pub fn synthetic_id(i: usize) -> String {
    format!("syn{i:04}")
}

/// Texture class of image `i`; consecutive images cycle through all five.
pub fn synthetic_texture(seed: u64, i: usize) -> TextureClass {
    TextureClass::ALL[((seed % 5) as usize + i) % 5]
}

/// Smallest level whose rung PSNR exceeds `threshold`.
pub fn oracle_target(levels: LevelRange, psnr_curve: &[f64], threshold: f64) -> Option<u32> {
    levels
        .levels()
        .zip(psnr_curve)
        .find(|(_, &p)| p > threshold)
        .map(|(l, _)| l)
}

pub fn psnr_curve(ladder: &CompressionLadder) -> Result<Vec<f64>> {
    ladder
        .rungs
        .values()
        .map(|r| psnr(&ladder.source, r))
        .collect()
}

fn synthesize_one(seed: u64, i: usize, size: usize) -> Result<SyntheticImage> {
    let texture = synthetic_texture(seed, i);
    let codec = CodecSpec::jpeg();
    for attempt in 0..MAX_RENDER_ATTEMPTS {
        let mut rng = image_rng(seed, i, attempt);
        let source = render_texture(texture, size, &mut rng);
        let ladder = build_ladder(&source, &codec)?;
        let curve = psnr_curve(&ladder)?;
        let lo = curve.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < MIN_PSNR_SPAN_DB {
            continue;
        }
        let u = rng.gen_range(THRESHOLD_SPAN.0..=THRESHOLD_SPAN.1);
        let threshold = lo + u * (hi - lo);
        let target = oracle_target(codec.level_range, &curve, threshold)
            .expect("threshold lies below the curve maximum");
        return Ok(SyntheticImage {
            image_id: synthetic_id(i),
            texture,
            ladder,
            psnr_curve: curve,
            psnr_threshold: threshold,
            jnd_target: target,
        });
    }
    Err(Error::InvalidConfig(format!(
        "synthetic image {i} never produced a usable PSNR span"
    )))
}

/// In-memory synthetic dataset; identical for identical arguments.
pub fn synthesize(seed: u64, count: usize, size: usize) -> Result<Vec<SyntheticImage>> {
    if count == 0 {
        return Err(Error::InvalidConfig("synthetic count must be at least 1".into()));
    }
    if size < MIN_SYNTHETIC_SIZE {
        return Err(Error::InvalidConfig(format!(
            "synthetic size {size} is below {MIN_SYNTHETIC_SIZE}"
        )));
    }
    (0..count)
        .into_par_iter()
        .map(|i| synthesize_one(seed, i, size))
        .collect()
}

/// Writes `out_dir/ladders/<id>/...` and `out_dir/index.json`.
pub fn generate_synthetic(out_dir: &Path, seed: u64, count: usize, size: usize) -> Result<DatasetIndex> {
    let images = synthesize(seed, count, size)?;
    let ladders_root = out_dir.join(LADDERS_DIR);
    let records = images
        .par_iter()
        .map(|img| -> Result<DatasetRecord> {
            let dir = ladders_root.join(&img.image_id);
            let notes = LadderAnnotations {
                jnd_samples: Vec::new(),
                jnd_target: Some(img.jnd_target),
                psnr_threshold: Some(img.psnr_threshold),
            };
            write_ladder(&img.ladder, &dir, &img.image_id, &notes)?;
            let rel = relative_to(&dir, out_dir);
            Ok(DatasetRecord {
                image_id: img.image_id.clone(),
                source: rel.join(REFERENCE_FILE),
                ladder: Some(rel),
                distorted: None,
                codec: img.ladder.codec.clone(),
                jnd_samples: Vec::new(),
                jnd_target: Some(img.jnd_target),
                psnr_threshold: Some(img.psnr_threshold),
                texture: Some(img.texture),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = DatasetIndex::new(Layout::LadderDir, records, out_dir)?;
    index.save(&out_dir.join(INDEX_FILE))?;
    Ok(index)
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.gen_range(20.0..235.0))
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Procedural RGB content of one class.
pub fn render_texture(class: TextureClass, size: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let s = size as f64;
    match class {
        TextureClass::Gradient => {
            let (a, b) = (color(rng), color(rng));
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let ripple = rng.gen_range(2.0..6.0);
            let (ca, sa) = (angle.cos(), angle.sin());
            ImageBuffer::from_fn(size, size, 3, |x, y, c| {
                let t = ((x as f64 * ca + y as f64 * sa) / s * 0.7 + 0.5).clamp(0.0, 1.0);
                let wave = 6.0 * (t * ripple * std::f64::consts::TAU).sin();
                to_u8(a[c] + (b[c] - a[c]) * t + wave)
            })
        }
        TextureClass::Stripes => {
            let (a, b) = (color(rng), color(rng));
            let f1 = rng.gen_range(3.0..9.0) / s;
            let f2 = rng.gen_range(8.0..16.0) / s;
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let (ca, sa) = (angle.cos(), angle.sin());
            ImageBuffer::from_fn(size, size, 3, |x, y, c| {
                let (x, y) = (x as f64, y as f64);
                let u = (std::f64::consts::TAU * f1 * (x * ca + y * sa)).sin();
                let v = (std::f64::consts::TAU * f2 * (x * sa - y * ca)).sin();
                let t = 0.5 + 0.35 * u + 0.15 * v;
                to_u8(a[c] + (b[c] - a[c]) * t)
            })
        }
        TextureClass::Glyphs => {
            let paper = color(rng);
            let ink: [f64; 3] = std::array::from_fn(|c| (paper[c] - 140.0).abs().min(255.0));
            let cell = 8;
            let cells = size / cell;
            // each cell holds a random 3x5 bitmap glyph scaled into 6x6 pixels
            let glyphs: Vec<u16> = (0..cells * cells).map(|_| rng.gen::<u16>() & 0x7FFF).collect();
            ImageBuffer::from_fn(size, size, 3, |x, y, c| {
                let (cx, cy) = (x / cell, y / cell);
                let (ix, iy) = (x % cell, y % cell);
                let on = if cx < cells && cy < cells && (1..7).contains(&ix) && (1..7).contains(&iy) {
                    let gx = (ix - 1) / 2;
                    let gy = ((iy - 1) * 5) / 6;
                    (glyphs[cy * cells + cx] >> (gy * 3 + gx)) & 1 == 1
                } else {
                    false
                };
                to_u8(if on { ink[c] } else { paper[c] })
            })
        }
        TextureClass::FlatRegions => {
            let n = rng.gen_range(4..8);
            let seeds: Vec<(f64, f64, [f64; 3])> = (0..n)
                .map(|_| (rng.gen_range(0.0..s), rng.gen_range(0.0..s), color(rng)))
                .collect();
            ImageBuffer::from_fn(size, size, 3, |x, y, c| {
                let (x, y) = (x as f64, y as f64);
                let nearest = seeds
                    .iter()
                    .min_by(|a, b| {
                        let da = (a.0 - x).powi(2) + (a.1 - y).powi(2);
                        let db = (b.0 - x).powi(2) + (b.1 - y).powi(2);
                        da.total_cmp(&db)
                    })
                    .expect("at least one region");
                to_u8(nearest.2[c])
            })
        }
        TextureClass::Noise => {
            let g = 9;
            let lattice: Vec<[f64; 3]> = (0..g * g).map(|_| color(rng)).collect();
            let fine: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-18.0..18.0)).collect();
            let step = s / (g - 1) as f64;
            ImageBuffer::from_fn(size, size, 3, |x, y, c| {
                let fx = x as f64 / step;
                let fy = y as f64 / step;
                let (x0, y0) = ((fx as usize).min(g - 2), (fy as usize).min(g - 2));
                let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                let at = |i: usize, j: usize| lattice[j * g + i][c];
                let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
                let bot = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
                to_u8(top * (1.0 - ty) + bot * ty + fine[y * size + x])
            })
        }
    }
}
