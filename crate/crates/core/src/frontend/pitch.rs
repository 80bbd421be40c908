//! Autocorrelation pitch descriptor: `(voicing, ln f0, Δ ln f0)` per frame.
//!
//! For each frame (same framing as the spectrum, no window) the normalized
//! autocorrelation `r(L) = Σ x[n]x[n+L] / sqrt(Σ x[n]² · Σ x[n+L]²)` is
//! evaluated for every lag whose frequency lies in 60–400 Hz. Voicing is the
//! largest `r` (clamped at 0). The selected lag is the shortest local
//! maximum within 1% of that largest value, which avoids picking multiples
//! of the period. Frames with voicing below 0.3 hold the previous f0.

use super::{FrontendConfig, FrontendError, Matrix};
use crate::scalar::Scalar;

pub const PITCH_DIM: usize = 3;
pub const MIN_F0_HZ: f64 = 60.0;
pub const MAX_F0_HZ: f64 = 400.0;
pub const VOICING_THRESHOLD: f64 = 0.3;
/// f0 reported before the first voiced frame.
pub const DEFAULT_F0_HZ: f64 = 100.0;

pub fn pitch3<S: Scalar>(wave: &[S], cfg: &FrontendConfig) -> Result<Matrix<S>, FrontendError> {
    let frames = cfg.check_len(wave.len())?;
    let n = cfg.frame_length();
    let shift = cfg.frame_shift();
    let sr = f64::from(cfg.sample_rate_hz);
    let min_lag = ((sr / MAX_F0_HZ).floor() as usize).max(1);
    let max_lag = ((sr / MIN_F0_HZ).ceil() as usize).min(n - 1);

    let mut voicing = vec![0.0; frames];
    let mut log_f0 = vec![0.0; frames];
    let mut held = DEFAULT_F0_HZ;
    let mut r = vec![0.0; max_lag + 2];
    let mut x = vec![0.0f64; n];
    let mut energy = vec![0.0f64; n + 1];
    for t in 0..frames {
        for (dst, s) in x.iter_mut().zip(&wave[t * shift..t * shift + n]) {
            *dst = s.as_f64();
        }
        for i in 0..n {
            energy[i + 1] = energy[i] + x[i] * x[i];
        }
        let mut best = 0.0f64;
        for lag in min_lag..=max_lag {
            let m = n - lag;
            let dot: f64 = x[..m].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum();
            let e0 = energy[m];
            let e1 = energy[n] - energy[lag];
            let denom = (e0 * e1).sqrt();
            r[lag] = if denom > 0.0 { dot / denom } else { 0.0 };
            best = best.max(r[lag]);
        }
        voicing[t] = best;
        if best >= VOICING_THRESHOLD {
            let is_peak = |l: usize| (l == min_lag || r[l] >= r[l - 1]) && (l == max_lag || r[l] >= r[l + 1]);
            let lag = (min_lag..=max_lag)
                .find(|&l| r[l] >= 0.99 * best && is_peak(l))
                .unwrap_or(min_lag);
            held = sr / lag as f64;
        }
        log_f0[t] = held.ln();
    }

    let mut out = Matrix::zeros(frames, PITCH_DIM);
    for t in 0..frames {
        let prev = log_f0[t.saturating_sub(1)];
        let next = log_f0[(t + 1).min(frames - 1)];
        let row = out.row_mut(t);
        row[0] = S::of(voicing[t]);
        row[1] = S::of(log_f0[t]);
        row[2] = S::of((next - prev) / 2.0);
    }
    Ok(out)
}
