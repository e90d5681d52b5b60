//! WAV decoding, channel down-mixing and sample-rate conversion.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::manifest::{Manifest, Recording};

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("audio file not found: {0}")]
    MissingFile(PathBuf),
    #[error("cannot decode {path}: {message}")]
    DecodeError { path: PathBuf, message: String },
    #[error("cannot resample from {from} Hz to {to} Hz")]
    ResampleError { from: u32, to: u32 },
    #[error("cannot write {path}: {message}")]
    WriteError { path: PathBuf, message: String },
}

/// Zero crossings of the sinc kernel on each side of the centre tap.
const KERNEL_ZERO_CROSSINGS: f64 = 16.0;
/// Fraction of the output Nyquist band that is kept.
const PASSBAND: f64 = 0.97;

/// Decodes a WAV file to mono `f32` at its native rate.
pub fn decode_wav(path: &Path) -> Result<(Vec<f32>, u32), AudioError> {
    if !path.is_file() {
        return Err(AudioError::MissingFile(path.to_path_buf()));
    }
    let decode_err = |e: hound::Error| AudioError::DecodeError {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = hound::WavReader::open(path).map_err(decode_err)?;
    let spec = reader.spec();
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(decode_err)?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(decode_err)?
        }
    };
    let channels = usize::from(spec.channels.max(1));
    Ok((downmix(&interleaved, channels), spec.sample_rate))
}

/// Averages interleaved channels into one.
pub fn downmix(interleaved: &[f32], channels: usize) -> Vec<f32> {
    if channels == 1 {
        return interleaved.to_vec();
    }
    interleaved
        .chunks_exact(channels)
        .map(|frame| (frame.iter().map(|&s| f64::from(s)).sum::<f64>() / channels as f64) as f32)
        .collect()
}

/// Number of output samples for `input_len` samples converted `from` -> `to`:
/// `round(input_len * to / from)`.
pub fn resampled_len(input_len: usize, from: u32, to: u32) -> usize {
    let num = input_len as u128 * u128::from(to);
    let den = u128::from(from);
    ((num + den / 2) / den) as usize
}

/// Band-limited resampling with a Blackman-windowed sinc kernel.
pub fn resample(input: &[f32], from: u32, to: u32) -> Result<Vec<f32>, AudioError> {
    if from == 0 || to == 0 {
        return Err(AudioError::ResampleError { from, to });
    }
    if from == to {
        return Ok(input.to_vec());
    }
    let out_len = resampled_len(input.len(), from, to);
    let step = f64::from(from) / f64::from(to);
    // cutoff in cycles per input sample
    let cutoff = 0.5 * (f64::from(to) / f64::from(from)).min(1.0) * PASSBAND;
    let half_width = KERNEL_ZERO_CROSSINGS / (2.0 * cutoff);
    let last = input.len() as i64 - 1;

    let out = (0..out_len)
        .map(|j| {
            let centre = j as f64 * step;
            let lo = ((centre - half_width).ceil() as i64).max(0);
            let hi = ((centre + half_width).floor() as i64).min(last);
            let mut acc = 0.0f64;
            for i in lo..=hi {
                let x = centre - i as f64;
                acc += f64::from(input[i as usize]) * kernel(x, cutoff, half_width);
            }
            acc as f32
        })
        .collect();
    Ok(out)
}

fn kernel(x: f64, cutoff: f64, half_width: f64) -> f64 {
    let arg = 2.0 * cutoff * x;
    let sinc = if arg.abs() < 1e-12 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
    // Blackman window over [-half_width, half_width]
    let r = (x / half_width + 1.0) * 0.5;
    let window = 0.42 - 0.5 * (2.0 * PI * r).cos() + 0.08 * (4.0 * PI * r).cos();
    2.0 * cutoff * sinc * window
}

/// Loads a file as a mono waveform at `target_rate_hz`, clamped to [-1, 1].
pub fn load_audio(path: &Path, target_rate_hz: u32) -> Result<Vec<f32>, AudioError> {
    if target_rate_hz == 0 {
        return Err(AudioError::ResampleError { from: 0, to: 0 });
    }
    let (mono, rate) = decode_wav(path)?;
    let mut out = resample(&mono, rate, target_rate_hz)?;
    for s in &mut out {
        *s = if s.is_finite() { s.clamp(-1.0, 1.0) } else { 0.0 };
    }
    Ok(out)
}

/// `load_audio` for a manifest recording.
pub fn load_recording(
    manifest: &Manifest,
    recording: &Recording,
    target_rate_hz: u32,
) -> Result<Vec<f32>, AudioError> {
    load_audio(&manifest.audio_path(recording), target_rate_hz)
}

/// Writes interleaved 32-bit float samples.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32, channels: u16) -> Result<(), AudioError> {
    let write_err = |e: hound::Error| AudioError::WriteError {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| write_err(hound::Error::IoError(e)))?;
    }
    let spec = hound::WavSpec {
        channels,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(write_err)?;
    for &s in samples {
        writer.write_sample(s).map_err(write_err)?;
    }
    writer.finalize().map_err(write_err)
}
