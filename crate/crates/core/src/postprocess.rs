//! Mask validity filtering and the naive subtraction baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingestion::ImagePair;
use crate::mask::{Mask, Provenance, BLACK, WHITE};

/// Masks whiter than this are rejected.
pub const MAX_WHITE_FRACTION: f64 = 0.70;
/// Masks emptier than this are rejected.
pub const MIN_WHITE_FRACTION: f64 = 0.01;
/// Per-pixel difference at which the baseline marks a pixel.
pub const BASELINE_THRESHOLD: u8 = 30;

/// Fraction of white pixels, computed from exact integer counts.
pub fn white_fraction(mask: &Mask) -> Result<f64> {
    let mut white = 0u64;
    for &v in mask.data() {
        match v {
            WHITE => white += 1,
            BLACK => {}
            other => return Err(Error::NonBinaryMask(other)),
        }
    }
    let total = mask.data().len() as u64;
    if total == 0 {
        return Err(Error::InvalidArgument("empty mask".into()));
    }
    Ok(white as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    TooWhite,
    TooEmpty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "snake_case")]
pub enum Verdict {
    Valid,
    Invalid(InvalidReason),
}

impl Verdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, Verdict::Valid)
    }
}

/// Verdict for a white fraction; both bounds themselves are valid.
pub fn verdict_for_fraction(fraction: f64) -> Verdict {
    if fraction > MAX_WHITE_FRACTION {
        Verdict::Invalid(InvalidReason::TooWhite)
    } else if fraction < MIN_WHITE_FRACTION {
        Verdict::Invalid(InvalidReason::TooEmpty)
    } else {
        Verdict::Valid
    }
}

pub fn filter_valid(mask: &Mask) -> Result<Verdict> {
    Ok(verdict_for_fraction(white_fraction(mask)?))
}

/// White where the largest per-channel absolute difference reaches
/// `threshold`.
pub fn baseline_subtract(pair: &ImagePair, threshold: u8) -> Result<Mask> {
    let (a, b) = (&pair.original, &pair.tampered);
    if a.dimensions() != b.dimensions() {
        return Err(Error::shape("baseline_subtract", format!("{:?} vs {:?}", a.dimensions(), b.dimensions())));
    }
    let data = a
        .as_raw()
        .chunks_exact(3)
        .zip(b.as_raw().chunks_exact(3))
        .map(|(p, q)| {
            let diff = p.iter().zip(q).map(|(x, y)| x.abs_diff(*y)).max().unwrap_or(0);
            if diff >= threshold {
                WHITE
            } else {
                BLACK
            }
        })
        .collect();
    Mask::new(a.width(), a.height(), data, Provenance::Baseline)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};
    use proptest::prelude::*;

    fn mask_with_white(total: usize, white: usize) -> Mask {
        let data = (0..total).map(|i| if i < white { WHITE } else { BLACK }).collect();
        Mask::new(total as u32, 1, data, Provenance::Model).unwrap()
    }

    #[test]
    fn fraction_examples() {
        assert_eq!(white_fraction(&mask_with_white(100, 0)).unwrap(), 0.0);
        assert_eq!(white_fraction(&mask_with_white(100, 100)).unwrap(), 1.0);
        assert_eq!(white_fraction(&mask_with_white(4096, 400)).unwrap(), 0.09765625);
    }

    #[test]
    fn boundaries_are_valid() {
        assert_eq!(filter_valid(&mask_with_white(100, 71)).unwrap(), Verdict::Invalid(InvalidReason::TooWhite));
        assert_eq!(filter_valid(&mask_with_white(1000, 5)).unwrap(), Verdict::Invalid(InvalidReason::TooEmpty));
        assert_eq!(filter_valid(&mask_with_white(100, 70)).unwrap(), Verdict::Valid);
        assert_eq!(filter_valid(&mask_with_white(100, 1)).unwrap(), Verdict::Valid);
    }

    #[test]
    fn baseline_threshold_edge() {
        let a = RgbImage::from_pixel(8, 8, Rgb([100, 100, 100]));
        let mut b = a.clone();
        b.put_pixel(1, 1, Rgb([129, 100, 100]));
        b.put_pixel(2, 2, Rgb([100, 100, 130]));
        b.put_pixel(3, 3, Rgb([100, 71, 100]));
        let pair = ImagePair::new("t", a, b).unwrap();
        let m = baseline_subtract(&pair, BASELINE_THRESHOLD).unwrap();
        assert!(!m.is_white(1, 1));
        assert!(m.is_white(2, 2));
        assert!(!m.is_white(3, 3));
        assert_eq!(m.white_count(), 1);
    }

    #[test]
    fn verdict_serialises_with_reason() {
        let v = serde_json::to_string(&Verdict::Invalid(InvalidReason::TooWhite)).unwrap();
        assert_eq!(v, r#"{"verdict":"invalid","reason":"too_white"}"#);
        assert_eq!(serde_json::to_string(&Verdict::Valid).unwrap(), r#"{"verdict":"valid"}"#);
    }

    proptest! {
        #[test]
        fn verdict_depends_only_on_fraction(seed in any::<u64>(), w in 1u32..40, h in 1u32..40) {
            let mut state = seed | 1;
            let mask = Mask::from_fn(w, h, Provenance::Model, |_, _| {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                state % 3 == 0
            });
            let f = white_fraction(&mask).unwrap();
            prop_assert_eq!(filter_valid(&mask).unwrap(), verdict_for_fraction(f));
            let mut shuffled = mask.data().to_vec();
            shuffled.reverse();
            let other = Mask::new(w, h, shuffled, Provenance::Model).unwrap();
            prop_assert_eq!(filter_valid(&other).unwrap(), filter_valid(&mask).unwrap());
        }

        #[test]
        fn baseline_symmetric_and_self_pair_empty(seed in any::<u64>()) {
            let mut state = seed | 1;
            let mut next = move || { state ^= state << 13; state ^= state >> 7; state ^= state << 17; state as u8 };
            let a = RgbImage::from_fn(12, 9, |_, _| Rgb([next(), next(), next()]));
            let b = RgbImage::from_fn(12, 9, |_, _| Rgb([next(), next(), next()]));
            let ab = baseline_subtract(&ImagePair::new("ab", a.clone(), b.clone()).unwrap(), 30).unwrap();
            let ba = baseline_subtract(&ImagePair::new("ba", b, a.clone()).unwrap(), 30).unwrap();
            prop_assert_eq!(ab.data(), ba.data());
            let aa = baseline_subtract(&ImagePair::new("aa", a.clone(), a).unwrap(), 30).unwrap();
            prop_assert_eq!(filter_valid(&aa).unwrap(), Verdict::Invalid(InvalidReason::TooEmpty));
        }
    }
}
