//! 16-bit mono PCM WAV input/output.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Wav { path: String, source: hound::Error },
    #[error("{path}: expected 16-bit mono PCM at {expected} Hz, got {channels} ch / {bits} bit / {rate} Hz")]
    Format {
        path: String,
        expected: u32,
        channels: u16,
        bits: u16,
        rate: u32,
    },
}

/// Reads a 16-bit mono WAV file as samples scaled to [-1, 1).
pub fn read_wav(path: &Path, sample_rate: u32) -> Result<Vec<f64>, AudioError> {
    let name = path.display().to_string();
    let wrap = |source| AudioError::Wav { path: name.clone(), source };
    let mut reader = hound::WavReader::open(path).map_err(wrap)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_rate != sample_rate || spec.sample_format != hound::SampleFormat::Int {
        return Err(AudioError::Format {
            path: name,
            expected: sample_rate,
            channels: spec.channels,
            bits: spec.bits_per_sample,
            rate: spec.sample_rate,
        });
    }
    reader
        .samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0).map_err(wrap))
        .collect()
}

/// Slice of `[start_sec, end_sec)` from a waveform.
pub fn segment(wave: &[f64], sample_rate: u32, start_sec: f64, end_sec: f64) -> &[f64] {
    let sr = f64::from(sample_rate);
    let a = ((start_sec * sr).round() as usize).min(wave.len());
    let b = ((end_sec * sr).round() as usize).clamp(a, wave.len());
    &wave[a..b]
}

/// Writes samples in [-1, 1] as 16-bit PCM (clipped, rounded).
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<(), AudioError> {
    let name = path.display().to_string();
    let wrap = |source| AudioError::Wav { path: name.clone(), source };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}
