//! Compression ladders: construction, ground-truth labels, and the on-disk
//! `<image_id>/{ref.png, qNNN.png, ladder.json}` layout.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use rayon::prelude::*;
use image::{DynamicImage, ExtendedColorType, ImageFormat};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{
    CodecId, CodecSpec, CompressionLadder, ImageBuffer, LabelOrigin, LabelSequence, LevelRange,
    Orientation,
};

/// Smallest source side accepted by [`build_ladder`].
pub const MIN_SOURCE_SIDE: usize = 8;

pub const LADDER_MANIFEST: &str = "ladder.json";
pub const REFERENCE_FILE: &str = "ref.png";

/// Baseline JPEG at a quality factor in `[1, 100]`, decoded back to samples.
pub fn jpeg_round_trip(source: &ImageBuffer, quality: u32) -> Result<ImageBuffer> {
    let fail = |reason: String| Error::CodecFailure {
        level: quality,
        reason,
    };
    if !(1..=100).contains(&quality) {
        return Err(fail("JPEG quality must lie in [1, 100]".into()));
    }
    let color = match source.channels() {
        1 => ExtendedColorType::L8,
        _ => ExtendedColorType::Rgb8,
    };
    let mut bytes = Vec::new();
    JpegEncoder::new_with_quality(&mut bytes, quality as u8)
        .encode(
            source.data(),
            source.width() as u32,
            source.height() as u32,
            color,
        )
        .map_err(|e| fail(e.to_string()))?;
    let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Jpeg)
        .map_err(|e| fail(e.to_string()))?;
    from_dynamic(decoded, source.channels()).map_err(|e| fail(e.to_string()))
}

pub(crate) fn from_dynamic(img: DynamicImage, channels: usize) -> Result<ImageBuffer> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = if channels == 1 {
        img.into_luma8().into_raw()
    } else {
        img.into_rgb8().into_raw()
    };
    ImageBuffer::new(w, h, channels, data)
}

/// Encodes `source` at every level of the codec's range and stores the
/// decoded results.
pub fn build_ladder(source: &ImageBuffer, codec: &CodecSpec) -> Result<CompressionLadder> {
    let range = codec.level_range;
    if source.width() < MIN_SOURCE_SIDE || source.height() < MIN_SOURCE_SIDE {
        return Err(Error::CodecFailure {
            level: range.lo(),
            reason: format!(
                "source {}x{} is smaller than {MIN_SOURCE_SIDE}x{MIN_SOURCE_SIDE}",
                source.width(),
                source.height()
            ),
        });
    }
    let levels: Vec<u32> = range.levels().collect();
    let decoded: Vec<ImageBuffer> = levels
        .par_iter()
        .map(|&level| encode_rung(source, codec, level))
        .collect::<Result<_>>()?;
    let rungs: BTreeMap<u32, ImageBuffer> = levels.into_iter().zip(decoded).collect();
    Ok(CompressionLadder {
        source: source.clone(),
        codec: codec.clone(),
        rungs,
    })
}

fn encode_rung(source: &ImageBuffer, codec: &CodecSpec, level: u32) -> Result<ImageBuffer> {
    let rung = match codec.codec_id {
        CodecId::Jpeg => jpeg_round_trip(source, level)?,
        CodecId::Generic => codec
            .encoder()
            .ok_or_else(|| Error::CodecFailure {
                level,
                reason: "GENERIC codec without an injected encoder".into(),
            })?
            .encode_decode(source, level)?,
    };
    if !rung.same_shape(source) {
        return Err(Error::DimensionMismatch(format!(
            "rung {level} decoded to {}x{}x{}, source is {}x{}x{}",
            rung.width(),
            rung.height(),
            rung.channels(),
            source.width(),
            source.height(),
            source.channels()
        )));
    }
    Ok(rung)
}

/// Ground-truth labels implied by a JND target: lossy strictly below it.
pub fn labels_from_jnd(jnd_target: i64, codec: &CodecSpec) -> Result<LabelSequence> {
    let target = codec.level_range.check(jnd_target)?;
    Ok(LabelSequence {
        codec: codec.clone(),
        labels: codec
            .level_range
            .levels()
            .map(|l| (l, u8::from(l < target)))
            .collect(),
        origin: LabelOrigin::GroundTruth,
    })
}

/// Anything that can hand out the reference image and the decoded rung at a
/// level, either from memory or lazily from disk.
pub trait RungSource: Sync {
    fn codec(&self) -> &CodecSpec;
    fn reference(&self) -> Result<Cow<'_, ImageBuffer>>;
    fn rung(&self, level: u32) -> Result<Cow<'_, ImageBuffer>>;
}

impl RungSource for CompressionLadder {
    fn codec(&self) -> &CodecSpec {
        &self.codec
    }

    fn reference(&self) -> Result<Cow<'_, ImageBuffer>> {
        Ok(Cow::Borrowed(&self.source))
    }

    fn rung(&self, level: u32) -> Result<Cow<'_, ImageBuffer>> {
        CompressionLadder::rung(self, level).map(Cow::Borrowed)
    }
}

pub fn rung_file_name(level: u32) -> String {
    format!("q{level:03}.png")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let color = if img.channels() == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    let mut out = Cursor::new(Vec::new());
    image::write_buffer_with_format(
        &mut out,
        img.data(),
        img.width() as u32,
        img.height() as u32,
        color,
        ImageFormat::Png,
    )
    .map_err(|source| Error::Image {
        path: PathBuf::from("<memory>"),
        source,
    })?;
    Ok(out.into_inner())
}

/// Reads any supported raster. Grayscale files stay single-channel, all
/// others become RGB.
pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let channels = match img.color() {
        image::ColorType::L8 | image::ColorType::L16 => 1,
        _ => 3,
    };
    from_dynamic(img, channels)
}

/// `ladder.json`: codec description, file hashes and optional annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderManifest {
    pub schema: u32,
    pub image_id: String,
    pub codec_id: CodecId,
    pub level_range: LevelRange,
    #[serde(default)]
    pub orientation: Orientation,
    /// File name → SHA-256 hex digest.
    pub files: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub jnd_samples: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jnd_target: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr_threshold: Option<f64>,
}

impl LadderManifest {
    pub fn codec(&self) -> CodecSpec {
        let mut codec = CodecSpec::jpeg().with_range(self.level_range);
        codec.codec_id = self.codec_id;
        codec.orientation = self.orientation;
        codec
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(LADDER_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::LayoutError {
            reason: format!("malformed manifest: {e}"),
            paths: vec![path],
        })
    }

    /// Re-hashes every listed file; reports mismatches and missing files.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let mut bad = Vec::new();
        for (name, digest) in &self.files {
            let path = dir.join(name);
            match sha256_file(&path) {
                Ok(actual) if &actual == digest => {}
                _ => bad.push(path),
            }
        }
        let expected = std::iter::once(REFERENCE_FILE.to_string())
            .chain(self.level_range.levels().map(rung_file_name));
        for name in expected {
            if !self.files.contains_key(&name) {
                bad.push(dir.join(name));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            let count = bad.len();
            bad.truncate(10);
            Err(Error::LayoutError {
                reason: format!("{count} ladder file(s) missing or failing hash check"),
                paths: bad,
            })
        }
    }
}

/// Optional annotations stored next to a ladder.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LadderAnnotations {
    pub jnd_samples: Vec<u32>,
    pub jnd_target: Option<u32>,
    pub psnr_threshold: Option<f64>,
}

/// Writes `dir/{ref.png, qNNN.png, ladder.json}` and returns the manifest.
pub fn write_ladder(
    ladder: &CompressionLadder,
    dir: &Path,
    image_id: &str,
    notes: &LadderAnnotations,
) -> Result<LadderManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    let mut put = |name: String, img: &ImageBuffer| -> Result<()> {
        let bytes = encode_png(img)?;
        let path = dir.join(&name);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        files.insert(name, sha256_hex(&bytes));
        Ok(())
    };
    put(REFERENCE_FILE.to_string(), &ladder.source)?;
    for (&level, rung) in &ladder.rungs {
        put(rung_file_name(level), rung)?;
    }
    let manifest = LadderManifest {
        schema: 1,
        image_id: image_id.to_string(),
        codec_id: ladder.codec.codec_id,
        level_range: ladder.codec.level_range,
        orientation: ladder.codec.orientation,
        files,
        jnd_samples: notes.jnd_samples.clone(),
        jnd_target: notes.jnd_target,
        psnr_threshold: notes.psnr_threshold,
    };
    let path = dir.join(LADDER_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Lazily reads rungs from a ladder directory.
#[derive(Debug, Clone)]
pub struct LadderDir {
    pub root: PathBuf,
    pub manifest: LadderManifest,
    codec: CodecSpec,
}

impl LadderDir {
    /// Opens a ladder directory, verifying all hashes.
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = LadderManifest::read(root)?;
        manifest.verify(root)?;
        Ok(Self::from_manifest(root, manifest))
    }

    pub fn from_manifest(root: &Path, manifest: LadderManifest) -> Self {
        Self {
            root: root.to_path_buf(),
            codec: manifest.codec(),
            manifest,
        }
    }

    /// Materializes the whole ladder in memory.
    pub fn load(&self) -> Result<CompressionLadder> {
        let source = read_image(&self.root.join(REFERENCE_FILE))?;
        let mut rungs = BTreeMap::new();
        for level in self.codec.level_range.levels() {
            rungs.insert(level, read_image(&self.root.join(rung_file_name(level)))?);
        }
        Ok(CompressionLadder {
            source,
            codec: self.codec.clone(),
            rungs,
        })
    }
}

impl RungSource for LadderDir {
    fn codec(&self) -> &CodecSpec {
        &self.codec
    }

    fn reference(&self) -> Result<Cow<'_, ImageBuffer>> {
        read_image(&self.root.join(REFERENCE_FILE)).map(Cow::Owned)
    }

    fn rung(&self, level: u32) -> Result<Cow<'_, ImageBuffer>> {
        if !self.codec.level_range.contains(level as i64) {
            return Err(Error::MissingRung(level));
        }
        read_image(&self.root.join(rung_file_name(level))).map(Cow::Owned)
    }
}
