//! Speed perturbation and SpecAugment.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::frontend::FeatureMatrix;
use crate::rng::seeded;
use crate::scalar::Scalar;

/// Zero crossings of the interpolation kernel on each side.
const SINC_ZEROS: f64 = 16.0;

/// Resamples `wave` so that it plays `factor` times faster (tempo and pitch
/// change together). Output length is `round(len / factor)`.
pub fn speed_perturb<S: Scalar>(wave: &[S], factor: f64) -> Vec<S> {
    assert!(factor > 0.0 && factor.is_finite(), "speed factor must be positive");
    if factor == 1.0 {
        return wave.to_vec();
    }
    let out_len = (wave.len() as f64 / factor).round() as usize;
    // cutoff relative to the input Nyquist; lowered when speeding up
    let cutoff = (1.0 / factor).min(1.0);
    let half = SINC_ZEROS / cutoff;
    let n = wave.len() as isize;
    (0..out_len)
        .map(|j| {
            let t = j as f64 * factor;
            let lo = ((t - half).ceil() as isize).max(0);
            let hi = ((t + half).floor() as isize).min(n - 1);
            let mut acc = 0.0;
            for i in lo..=hi {
                let d = t - i as f64;
                let x = cutoff * d;
                let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
                let window = 0.5 + 0.5 * (PI * d / half).cos();
                acc += wave[i as usize].as_f64() * cutoff * sinc * window;
            }
            S::of(acc)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecAugmentConfig {
    /// Maximum frequency-mask width in bins.
    pub freq_width: usize,
    pub freq_masks: usize,
    /// Maximum time-mask width in frames.
    pub time_width: usize,
    pub time_masks: usize,
    pub mask_value: f64,
    pub seed: u64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        SpecAugmentConfig {
            freq_width: 10,
            freq_masks: 2,
            time_width: 40,
            time_masks: 2,
            mask_value: 0.0,
            seed: 0,
        }
    }
}

/// Applies `freq_masks` frequency masks, then `time_masks` time masks.
/// A time mask wider than the utterance is clipped to its length.
pub fn spec_augment<S: Scalar>(feats: &FeatureMatrix<S>, cfg: &SpecAugmentConfig) -> FeatureMatrix<S> {
    let mut out = feats.clone();
    let (t_len, d) = (out.frames(), out.dim());
    let fill = S::of(cfg.mask_value);
    let mut rng = seeded(cfg.seed);
    for _ in 0..cfg.freq_masks {
        let f = rng.gen_range(0..=cfg.freq_width).min(d);
        let f0 = rng.gen_range(0..=d - f);
        for t in 0..t_len {
            out.values.row_mut(t)[f0..f0 + f].fill(fill);
        }
    }
    for _ in 0..cfg.time_masks {
        let w = rng.gen_range(0..=cfg.time_width).min(t_len);
        let t0 = rng.gen_range(0..=t_len - w);
        for t in t0..t0 + w {
            out.values.row_mut(t).fill(fill);
        }
    }
    out
}
