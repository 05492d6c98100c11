//! Domain types shared across the pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit raster, row-major, interleaved channels.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::ShapeMismatch(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} image needs {} samples, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels])
            .expect("valid fill shape")
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> u8,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data).expect("valid generated shape")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Copies the `w`×`h` rectangle whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<ImageBuffer> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::ShapeMismatch(format!(
                "crop {w}x{h}@({x},{y}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * self.channels);
        for row in y..y + h {
            let start = (row * self.width + x) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        ImageBuffer::new(w, h, self.channels, data)
    }
}

impl fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CodecId {
    Jpeg,
    Generic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Orientation {
    #[default]
    HigherLevelIsBetter,
}

/// Inclusive interval of codec quality levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "(u32, u32)", into = "(u32, u32)")]
pub struct LevelRange {
    lo: u32,
    hi: u32,
}

impl LevelRange {
    pub fn new(lo: u32, hi: u32) -> Result<Self> {
        if lo > hi {
            return Err(Error::InvalidConfig(format!(
                "empty level range [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> u32 {
        self.lo
    }

    pub fn hi(&self) -> u32 {
        self.hi
    }

    pub fn len(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, level: i64) -> bool {
        level >= self.lo as i64 && level <= self.hi as i64
    }

    pub fn levels(&self) -> impl Iterator<Item = u32> + Clone {
        self.lo..=self.hi
    }

    pub fn check(&self, level: i64) -> Result<u32> {
        if self.contains(level) {
            Ok(level as u32)
        } else {
            Err(Error::OutOfRange {
                level,
                lo: self.lo,
                hi: self.hi,
            })
        }
    }

    pub fn clamp(&self, level: i64) -> u32 {
        level.clamp(self.lo as i64, self.hi as i64) as u32
    }
}

impl Default for LevelRange {
    fn default() -> Self {
        Self { lo: 1, hi: 100 }
    }
}

impl TryFrom<(u32, u32)> for LevelRange {
    type Error = Error;

    fn try_from((lo, hi): (u32, u32)) -> Result<Self> {
        LevelRange::new(lo, hi)
    }
}

impl From<LevelRange> for (u32, u32) {
    fn from(r: LevelRange) -> Self {
        (r.lo, r.hi)
    }
}

/// Encode-then-decode at one quality level. Injected for `GENERIC` codecs
/// (e.g. a BPG wrapper).
pub trait RungCodec: Send + Sync {
    fn encode_decode(&self, source: &ImageBuffer, level: u32) -> Result<ImageBuffer>;
}

#[derive(Clone, Serialize, Deserialize)]
pub struct CodecSpec {
    pub codec_id: CodecId,
    #[serde(default)]
    pub level_range: LevelRange,
    #[serde(default)]
    pub orientation: Orientation,
    #[serde(skip)]
    encoder: Option<Arc<dyn RungCodec>>,
}

impl CodecSpec {
    pub fn jpeg() -> Self {
        Self {
            codec_id: CodecId::Jpeg,
            level_range: LevelRange::default(),
            orientation: Orientation::HigherLevelIsBetter,
            encoder: None,
        }
    }

    pub fn generic(level_range: LevelRange, encoder: Arc<dyn RungCodec>) -> Self {
        Self {
            codec_id: CodecId::Generic,
            level_range,
            orientation: Orientation::HigherLevelIsBetter,
            encoder: Some(encoder),
        }
    }

    pub fn with_range(mut self, level_range: LevelRange) -> Self {
        self.level_range = level_range;
        self
    }

    pub fn encoder(&self) -> Option<&Arc<dyn RungCodec>> {
        self.encoder.as_ref()
    }
}

impl fmt::Debug for CodecSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CodecSpec")
            .field("codec_id", &self.codec_id)
            .field("level_range", &self.level_range)
            .field("orientation", &self.orientation)
            .field("encoder", &self.encoder.is_some())
            .finish()
    }
}

impl PartialEq for CodecSpec {
    fn eq(&self, other: &Self) -> bool {
        self.codec_id == other.codec_id
            && self.level_range == other.level_range
            && self.orientation == other.orientation
    }
}

/// One source image plus its decoded distorted versions, one per level.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionLadder {
    pub source: ImageBuffer,
    pub codec: CodecSpec,
    pub rungs: BTreeMap<u32, ImageBuffer>,
}

impl CompressionLadder {
    pub fn rung(&self, level: u32) -> Result<&ImageBuffer> {
        self.rungs.get(&level).ok_or(Error::MissingRung(level))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LabelOrigin {
    GroundTruth,
    Predicted,
}

/// Per-level perceptual labels: 1 = perceptually lossy, 0 = lossless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSequence {
    pub codec: CodecSpec,
    pub labels: BTreeMap<u32, u8>,
    pub origin: LabelOrigin,
}

impl LabelSequence {
    /// Builds a sequence from labels listed in level order starting at the
    /// range's first level.
    pub fn from_levels(codec: CodecSpec, labels: &[u8], origin: LabelOrigin) -> Result<Self> {
        let range = codec.level_range;
        if labels.len() != range.len() {
            return Err(Error::IncompleteSequence(format!(
                "{} labels for {} levels",
                labels.len(),
                range.len()
            )));
        }
        let seq = Self {
            labels: range.levels().zip(labels.iter().copied()).collect(),
            codec,
            origin,
        };
        seq.validate()?;
        Ok(seq)
    }

    /// Checks that keys cover the range exactly and every value is a bit.
    pub fn validate(&self) -> Result<()> {
        let range = self.codec.level_range;
        if self.labels.len() != range.len()
            || !range.levels().all(|l| self.labels.contains_key(&l))
        {
            return Err(Error::IncompleteSequence(format!(
                "{} labels do not cover [{}, {}]",
                self.labels.len(),
                range.lo(),
                range.hi()
            )));
        }
        if let Some((level, v)) = self.labels.iter().find(|(_, v)| **v > 1) {
            return Err(Error::IncompleteSequence(format!(
                "label at level {level} is {v}, expected 0 or 1"
            )));
        }
        Ok(())
    }

    /// Labels in level order.
    pub fn bits(&self) -> Vec<u8> {
        self.labels.values().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SearchStrategy {
    Naive,
    Window,
}

/// Predicted JND level and how it was obtained. `jnd_level = None` is the
/// NONE sentinel: no level qualified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JndResult {
    pub jnd_level: Option<u32>,
    pub strategy: SearchStrategy,
    pub window_size: u32,
    pub threshold: u32,
    pub source_labels: LabelSequence,
}

impl JndResult {
    /// Explicit NONE mapping for metric purposes: maximum level + 1.
    pub fn level_or_past_end(&self) -> u32 {
        self.jnd_level
            .unwrap_or(self.source_labels.codec.level_range.hi() + 1)
    }
}
