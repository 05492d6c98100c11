//! Turning a ladder's per-level labels into a JND level.
//!
//! Labels use 1 = perceptually lossy, so a clean sequence reads `1…1 0…0`
//! along increasing quality. The naive rule picks the first lossless level;
//! the window rule picks the first window start whose `w + 1` labels hold at
//! most `θ` lossy decisions, which tolerates isolated misclassifications.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{JndResult, LabelSequence, SearchStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpec {
    pub strategy: SearchStrategy,
    /// Window extent; a window spans `w + 1` consecutive levels.
    pub w: u32,
    /// Maximum number of lossy labels tolerated inside a window.
    pub theta: u32,
}

impl SearchSpec {
    pub fn naive() -> Self {
        Self {
            strategy: SearchStrategy::Naive,
            w: 0,
            theta: 0,
        }
    }

    pub fn window(w: u32, theta: u32) -> Self {
        Self {
            strategy: SearchStrategy::Window,
            w,
            theta,
        }
    }

    /// Window 6, threshold 5.
    pub fn jpeg_default() -> Self {
        Self::window(6, 5)
    }

    /// Window 3, threshold 2.
    pub fn bpg_default() -> Self {
        Self::window(3, 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy == SearchStrategy::Window && self.theta > self.w + 1 {
            return Err(Error::InvalidSpec(format!(
                "theta {} exceeds window length {}",
                self.theta,
                self.w + 1
            )));
        }
        Ok(())
    }
}

impl Default for SearchSpec {
    fn default() -> Self {
        Self::jpeg_default()
    }
}

/// First perceptually lossless level, or NONE when every label is lossy.
pub fn naive_search(labels: &LabelSequence) -> Result<JndResult> {
    labels.validate()?;
    let jnd_level = labels
        .labels
        .iter()
        .find(|(_, &bit)| bit == 0)
        .map(|(&level, _)| level);
    Ok(JndResult {
        jnd_level,
        strategy: SearchStrategy::Naive,
        window_size: 0,
        threshold: 0,
        source_labels: labels.clone(),
    })
}

/// Smallest window start whose inclusive window `[s, s + w]` contains at
/// most `θ` lossy labels.
pub fn window_search(labels: &LabelSequence, spec: &SearchSpec) -> Result<JndResult> {
    labels.validate()?;
    spec.validate()?;
    let bits = labels.bits();
    let len = spec.w as usize + 1;
    if len > bits.len() {
        return Err(Error::InvalidSpec(format!(
            "window of {len} levels does not fit {} levels",
            bits.len()
        )));
    }
    let lo = labels.codec.level_range.lo();
    let mut lossy: u32 = bits[..len].iter().map(|&b| b as u32).sum();
    let mut found = None;
    for start in 0..=bits.len() - len {
        if start > 0 {
            lossy = lossy - bits[start - 1] as u32 + bits[start + len - 1] as u32;
        }
        if lossy <= spec.theta {
            found = Some(lo + start as u32);
            break;
        }
    }
    Ok(JndResult {
        jnd_level: found,
        strategy: SearchStrategy::Window,
        window_size: spec.w,
        threshold: spec.theta,
        source_labels: labels.clone(),
    })
}

/// Dispatches on [`SearchSpec::strategy`].
pub fn search(labels: &LabelSequence, spec: &SearchSpec) -> Result<JndResult> {
    match spec.strategy {
        SearchStrategy::Naive => naive_search(labels),
        SearchStrategy::Window => window_search(labels, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ladder::labels_from_jnd;
    use crate::types::{CodecSpec, LabelOrigin, LevelRange};

    fn seq(bits: &[u8]) -> LabelSequence {
        let codec = CodecSpec::jpeg().with_range(LevelRange::new(1, bits.len() as u32).unwrap());
        LabelSequence::from_levels(codec, bits, LabelOrigin::Predicted).unwrap()
    }

    #[test]
    fn naive_examples() {
        let gt = labels_from_jnd(31, &CodecSpec::jpeg()).unwrap();
        assert_eq!(naive_search(&gt).unwrap().jnd_level, Some(31));
        assert_eq!(naive_search(&seq(&[1; 10])).unwrap().jnd_level, None);
        let noisy = seq(&[1, 1, 0, 1, 0, 0, 0, 0]);
        assert_eq!(naive_search(&noisy).unwrap().jnd_level, Some(3));
    }

    #[test]
    fn window_examples() {
        let s = seq(&[1, 1, 1, 1, 0, 0, 0, 0, 0, 0]);
        let r = window_search(&s, &SearchSpec::window(3, 2)).unwrap();
        assert_eq!(r.jnd_level, Some(3));
        assert_eq!(r.window_size, 3);
        assert_eq!(r.threshold, 2);

        let r = window_search(&s, &SearchSpec::window(3, 4)).unwrap();
        assert_eq!(r.jnd_level, Some(1));

        for t in [1, 17, 64, 100] {
            let gt = labels_from_jnd(t, &CodecSpec::jpeg()).unwrap();
            let r = window_search(&gt, &SearchSpec::window(0, 0)).unwrap();
            assert_eq!(r.jnd_level, Some(t as u32));
        }
    }

    #[test]
    fn window_errors() {
        let s = seq(&[1, 0, 0]);
        assert!(matches!(
            window_search(&s, &SearchSpec::window(1, 3)),
            Err(Error::InvalidSpec(_))
        ));
        assert!(matches!(
            window_search(&s, &SearchSpec::window(3, 1)),
            Err(Error::InvalidSpec(_))
        ));
        let mut broken = s.clone();
        broken.labels.remove(&2);
        assert!(matches!(
            window_search(&broken, &SearchSpec::window(1, 1)),
            Err(Error::IncompleteSequence(_))
        ));
        assert!(matches!(
            naive_search(&broken),
            Err(Error::IncompleteSequence(_))
        ));
    }

    #[test]
    fn all_lossy_sequence_has_no_window() {
        let r = window_search(&seq(&[1; 12]), &SearchSpec::window(2, 1)).unwrap();
        assert_eq!(r.jnd_level, None);
        assert_eq!(r.level_or_past_end(), 13);
    }
}
