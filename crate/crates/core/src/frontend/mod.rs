//! Acoustic front end: framing, power spectrum, log-mel filterbank, a
//! three-dimensional pitch descriptor and global mean/variance
//! normalization.
//!
//! All kernels are generic over [`Scalar`]; the pipeline computes in `f64`
//! and stores `f32`.

mod pitch;

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub use pitch::{pitch3, PITCH_DIM};

#[derive(Debug, Error, PartialEq)]
pub enum FrontendError {
    #[error("waveform of {len} samples is shorter than one {need}-sample frame")]
    TooShort { len: usize, need: usize },
    #[error("no frames to accumulate statistics over")]
    EmptyInput,
    #[error("invalid front-end configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub sample_rate_hz: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub pitch: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate_hz: 16000,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            n_fft: 512,
            n_mels: 80,
            fmin_hz: 20.0,
            fmax_hz: 7600.0,
            pitch: true,
        }
    }
}

impl FrontendConfig {
    pub fn frame_length(&self) -> usize {
        (f64::from(self.sample_rate_hz) * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn frame_shift(&self) -> usize {
        (f64::from(self.sample_rate_hz) * self.frame_shift_ms / 1000.0).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Feature dimension produced by [`extract_features`].
    pub fn feat_dim(&self) -> usize {
        self.n_mels + if self.pitch { PITCH_DIM } else { 0 }
    }

    /// Frames produced for `len` samples (0 when shorter than one frame).
    pub fn num_frames(&self, len: usize) -> usize {
        let fl = self.frame_length();
        if len < fl {
            0
        } else {
            1 + (len - fl) / self.frame_shift()
        }
    }

    pub fn validate(&self) -> Result<(), FrontendError> {
        let nyquist = f64::from(self.sample_rate_hz) / 2.0;
        let bad = |m: String| Err(FrontendError::InvalidConfig(m));
        if !(0.0 <= self.fmin_hz && self.fmin_hz < self.fmax_hz && self.fmax_hz <= nyquist) {
            return bad(format!("need 0 ≤ fmin < fmax ≤ {nyquist}"));
        }
        if self.frame_length() == 0 || self.frame_shift() == 0 {
            return bad("empty frame length or shift".into());
        }
        if self.n_fft < self.frame_length() {
            return bad(format!("n_fft {} < frame length {}", self.n_fft, self.frame_length()));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive".into());
        }
        Ok(())
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<usize, FrontendError> {
        self.validate()?;
        match self.num_frames(len) {
            0 => Err(FrontendError::TooShort {
                len,
                need: self.frame_length(),
            }),
            t => Ok(t),
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn cast<T: Scalar>(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| T::of(v.as_f64())).collect(),
        }
    }
}

/// Per-utterance features: one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<S> {
    pub utt_id: String,
    pub frame_shift_sec: f64,
    pub values: Matrix<S>,
}

impl<S: Scalar> FeatureMatrix<S> {
    pub fn new(utt_id: impl Into<String>, frame_shift_sec: f64, values: Matrix<S>) -> Self {
        FeatureMatrix {
            utt_id: utt_id.into(),
            frame_shift_sec,
            values,
        }
    }

    pub fn frames(&self) -> usize {
        self.values.rows
    }

    pub fn dim(&self) -> usize {
        self.values.cols
    }

    pub fn cast<T: Scalar>(&self) -> FeatureMatrix<T> {
        FeatureMatrix {
            utt_id: self.utt_id.clone(),
            frame_shift_sec: self.frame_shift_sec,
            values: self.values.cast(),
        }
    }
}

/// Symmetric Hann window of length `n`.
pub fn hann<S: Scalar>(n: usize) -> Vec<S> {
    if n == 1 {
        return vec![S::one()];
    }
    (0..n)
        .map(|i| {
            let x = 2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64;
            S::of(0.5 - 0.5 * x.cos())
        })
        .collect()
}

/// Reusable FFT plan for one configuration.
pub struct PowerSpectrum<S: Scalar> {
    fft: Arc<dyn Fft<S>>,
    window: Vec<S>,
    frame_len: usize,
    shift: usize,
    n_fft: usize,
}

impl<S: Scalar> PowerSpectrum<S> {
    pub fn new(cfg: &FrontendConfig) -> Result<Self, FrontendError> {
        cfg.validate()?;
        let mut planner = FftPlanner::<S>::new();
        Ok(PowerSpectrum {
            fft: planner.plan_fft_forward(cfg.n_fft),
            window: hann(cfg.frame_length()),
            frame_len: cfg.frame_length(),
            shift: cfg.frame_shift(),
            n_fft: cfg.n_fft,
        })
    }

    pub fn compute(&self, wave: &[S]) -> Result<Matrix<S>, FrontendError> {
        if wave.len() < self.frame_len {
            return Err(FrontendError::TooShort {
                len: wave.len(),
                need: self.frame_len,
            });
        }
        let frames = 1 + (wave.len() - self.frame_len) / self.shift;
        let bins = self.n_fft / 2 + 1;
        let mut out = Matrix::zeros(frames, bins);
        let mut buf = vec![Complex::new(S::zero(), S::zero()); self.n_fft];
        for t in 0..frames {
            let frame = &wave[t * self.shift..t * self.shift + self.frame_len];
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = match frame.get(i) {
                    Some(&x) => Complex::new(x * self.window[i], S::zero()),
                    None => Complex::new(S::zero(), S::zero()),
                };
            }
            self.fft.process(&mut buf);
            for (dst, c) in out.row_mut(t).iter_mut().zip(&buf) {
                *dst = c.re * c.re + c.im * c.im;
            }
        }
        Ok(out)
    }
}

/// Hann-windowed, zero-padded power spectrogram: `frames × (n_fft/2 + 1)`.
pub fn stft_power<S: Scalar>(wave: &[S], cfg: &FrontendConfig) -> Result<Matrix<S>, FrontendError> {
    cfg.check_len(wave.len())?;
    PowerSpectrum::new(cfg)?.compute(wave)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters, `n_mels × (n_fft/2 + 1)`, peak 1.0, centers
/// evenly spaced in mel between `fmin` and `fmax`.
pub fn mel_filterbank<S: Scalar>(cfg: &FrontendConfig) -> Result<Matrix<S>, FrontendError> {
    cfg.validate()?;
    let bins = cfg.n_bins();
    let lo = hz_to_mel(cfg.fmin_hz);
    let hi = hz_to_mel(cfg.fmax_hz);
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    let points: Vec<f64> = (0..cfg.n_mels + 2).map(|i| lo + step * i as f64).collect();
    let bin_hz = f64::from(cfg.sample_rate_hz) / cfg.n_fft as f64;
    let mut fb = Matrix::zeros(cfg.n_mels, bins);
    for k in 0..bins {
        let m = hz_to_mel(k as f64 * bin_hz);
        for i in 0..cfg.n_mels {
            let (left, center, right) = (points[i], points[i + 1], points[i + 2]);
            let w = if m > left && m <= center {
                (m - left) / (center - left)
            } else if m > center && m < right {
                (right - m) / (right - center)
            } else {
                0.0
            };
            fb.data[i * bins + k] = S::of(w);
        }
    }
    Ok(fb)
}

pub const LOG_FLOOR: f64 = 1e-10;

/// `ln(max(power · filterbankᵀ, 1e-10))`.
pub fn logmel<S: Scalar>(power: &Matrix<S>, filterbank: &Matrix<S>) -> Result<Matrix<S>, FrontendError> {
    if power.cols != filterbank.cols {
        return Err(FrontendError::ShapeMismatch(format!(
            "power has {} bins, filterbank {}",
            power.cols, filterbank.cols
        )));
    }
    let floor = S::of(LOG_FLOOR);
    // sparse view of each filter's support
    let support: Vec<Vec<(usize, S)>> = (0..filterbank.rows)
        .map(|m| {
            filterbank
                .row(m)
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != S::zero())
                .map(|(k, &w)| (k, w))
                .collect()
        })
        .collect();
    let mut out = Matrix::zeros(power.rows, filterbank.rows);
    for t in 0..power.rows {
        let p = power.row(t);
        for (m, taps) in support.iter().enumerate() {
            let e: S = taps.iter().map(|&(k, w)| p[k] * w).sum();
            out.data[t * filterbank.rows + m] = e.max(floor).ln();
        }
    }
    Ok(out)
}

/// Global per-dimension statistics (population std, floored).
#[derive(Debug, Clone, PartialEq)]
pub struct Cmvn {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

/// Running (count, mean, M2) merged with Chan's update so the result does
/// not depend on how frames are grouped into utterances.
#[derive(Debug, Clone)]
struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn of_rows<S: Scalar>(m: &Matrix<S>) -> Self {
        let d = m.cols;
        let n = m.rows as f64;
        let mut mean = vec![0.0; d];
        for r in 0..m.rows {
            for (acc, v) in mean.iter_mut().zip(m.row(r)) {
                *acc += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|v| *v /= n.max(1.0));
        let mut m2 = vec![0.0; d];
        for r in 0..m.rows {
            for ((acc, v), mu) in m2.iter_mut().zip(m.row(r)).zip(&mean) {
                *acc += (v.as_f64() - mu).powi(2);
            }
        }
        Moments { count: n, mean, m2 }
    }

    fn merge(&mut self, other: &Moments) {
        if other.count == 0.0 {
            return;
        }
        let total = self.count + other.count;
        for j in 0..self.mean.len() {
            let delta = other.mean[j] - self.mean[j];
            self.mean[j] += delta * other.count / total;
            self.m2[j] += other.m2[j] + delta * delta * self.count * other.count / total;
        }
        self.count = total;
    }
}

/// Mean and population standard deviation over every frame of every matrix.
pub fn compute_cmvn<S: Scalar>(matrices: &[FeatureMatrix<S>]) -> Result<Cmvn, FrontendError> {
    let dim = matrices
        .iter()
        .find(|m| m.frames() > 0)
        .map(|m| m.dim())
        .ok_or(FrontendError::EmptyInput)?;
    let mut acc = Moments {
        count: 0.0,
        mean: vec![0.0; dim],
        m2: vec![0.0; dim],
    };
    for m in matrices {
        if m.frames() == 0 {
            continue;
        }
        if m.dim() != dim {
            return Err(FrontendError::ShapeMismatch(format!("dim {} vs {}", m.dim(), dim)));
        }
        acc.merge(&Moments::of_rows(&m.values));
    }
    let std = acc
        .m2
        .iter()
        .map(|m2| (m2 / acc.count).sqrt().max(STD_FLOOR))
        .collect();
    Ok(Cmvn { mean: acc.mean, std })
}

impl Cmvn {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply<S: Scalar>(&self, m: &mut Matrix<S>) -> Result<(), FrontendError> {
        if m.cols != self.dim() {
            return Err(FrontendError::ShapeMismatch(format!("features {} vs stats {}", m.cols, self.dim())));
        }
        for r in 0..m.rows {
            for ((v, mu), sd) in m.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = S::of((v.as_f64() - mu) / sd);
            }
        }
        Ok(())
    }

    /// `(2, D)` matrix: row 0 mean, row 1 std.
    pub fn to_rows(&self) -> Vec<f32> {
        self.mean.iter().chain(&self.std).map(|&v| v as f32).collect()
    }

    pub fn from_rows(rows: usize, cols: usize, data: &[f32]) -> Result<Self, FrontendError> {
        if rows != 2 || data.len() != 2 * cols {
            return Err(FrontendError::ShapeMismatch(format!("cmvn stats must be 2x{cols}")));
        }
        Ok(Cmvn {
            mean: data[..cols].iter().map(|&v| f64::from(v)).collect(),
            std: data[cols..].iter().map(|&v| f64::from(v)).collect(),
        })
    }
}

/// Reusable extractor (FFT plan and filterbank built once).
pub struct FeatureExtractor<S: Scalar> {
    cfg: FrontendConfig,
    spectrum: PowerSpectrum<S>,
    filterbank: Matrix<S>,
}

impl<S: Scalar> FeatureExtractor<S> {
    pub fn new(cfg: &FrontendConfig) -> Result<Self, FrontendError> {
        Ok(FeatureExtractor {
            cfg: cfg.clone(),
            spectrum: PowerSpectrum::new(cfg)?,
            filterbank: mel_filterbank(cfg)?,
        })
    }

    /// `[logmel | pitch]` per frame, normalized when `cmvn` is given.
    pub fn extract(&self, utt_id: &str, wave: &[S], cmvn: Option<&Cmvn>) -> Result<FeatureMatrix<S>, FrontendError> {
        let power = self.spectrum.compute(wave)?;
        let mel = logmel(&power, &self.filterbank)?;
        let values = if self.cfg.pitch {
            let p = pitch3(wave, &self.cfg)?;
            let mut joined = Matrix::zeros(mel.rows, mel.cols + p.cols);
            for t in 0..mel.rows {
                let row = joined.row_mut(t);
                row[..mel.cols].copy_from_slice(mel.row(t));
                row[mel.cols..].copy_from_slice(p.row(t));
            }
            joined
        } else {
            mel
        };
        let mut fm = FeatureMatrix::new(utt_id, self.cfg.frame_shift_ms / 1000.0, values);
        if let Some(stats) = cmvn {
            stats.apply(&mut fm.values)?;
        }
        Ok(fm)
    }
}

pub fn extract_features<S: Scalar>(
    wave: &[S],
    cfg: &FrontendConfig,
    cmvn: Option<&Cmvn>,
) -> Result<FeatureMatrix<S>, FrontendError> {
    cfg.check_len(wave.len())?;
    FeatureExtractor::new(cfg)?.extract("", wave, cmvn)
}
