//! Two-class synthetic corpus with a controllable class separation.
//!
//! Every speaker owns an 8-vector of tone amplitudes on the synthetic
//! adapter's DFT bins. Within a class those vectors are Gaussian with
//! per-axis standard deviation `SPEAKER_STD`; the two class means sit
//! `separation * SPEAKER_STD` apart. Each speaker's position along the class
//! axis is drawn from its own quantile stratum, so even a small corpus
//! matches the nominal class geometry closely. Recordings of one speaker add a much smaller per-recording
//! perturbation and a little white noise. Because the adapter measures the bins exactly and maps them
//! linearly, the class geometry carries over to every layer's embedding.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::distributions::Open01;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use statrs::distribution::ContinuousCDF;

use crate::audio::{write_wav, AudioError};
use crate::embedding::synthetic::{BINS, SAMPLE_RATE_HZ, WINDOW};
use crate::manifest::{save_manifest, Label, Manifest, Recording, Sex, Speaker, Task};

pub const BASE_AMPLITUDE: f64 = 0.06;
pub const SPEAKER_STD: f64 = 0.01;
pub const RECORDING_STD: f64 = 0.002;
pub const NOISE_STD: f64 = 0.005;
pub const MIN_AMPLITUDE: f64 = 0.005;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("cannot write manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub n_speakers: usize,
    pub samples_per_speaker: usize,
    pub separation: f64,
    pub seed: u64,
    pub duration_s: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_speakers: 40,
            samples_per_speaker: 11,
            separation: 4.0,
            seed: 0,
            duration_s: 1.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidParams(m));
        if self.n_speakers < 4 || self.n_speakers % 2 != 0 {
            return bad(format!("n_speakers must be even and at least 4, got {}", self.n_speakers));
        }
        if self.samples_per_speaker == 0 {
            return bad("samples_per_speaker must be positive".into());
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad(format!("separation must be a finite value >= 0, got {}", self.separation));
        }
        let samples = self.duration_s * f64::from(SAMPLE_RATE_HZ);
        if !(samples >= WINDOW as f64 && samples.is_finite()) {
            return bad(format!("duration_s must give at least {WINDOW} samples"));
        }
        Ok(())
    }
}

/// Unit vector separating the classes. It alternates in sign so it is
/// orthogonal to the shared base amplitude.
pub fn class_axis() -> [f64; BINS.len()] {
    let v = 1.0 / (BINS.len() as f64).sqrt();
    std::array::from_fn(|p| if p % 2 == 0 { v } else { -v })
}

/// Mean amplitude vector of a class.
pub fn class_mean(label: Label, separation: f64) -> [f64; BINS.len()] {
    let sign = match label {
        Label::Healthy => -1.0,
        Label::Pathological => 1.0,
    };
    let axis = class_axis();
    std::array::from_fn(|p| BASE_AMPLITUDE + sign * 0.5 * separation * SPEAKER_STD * axis[p])
}

/// Householder reflection taking the first basis vector to the class axis.
/// Speaker draws are stratified in that rotated frame, so the stratified
/// coordinate is the one that decides the class.
fn to_class_frame(z: &[f64]) -> Vec<f64> {
    let axis = class_axis();
    let mut v: Vec<f64> = axis.iter().map(|a| -a).collect();
    v[0] += 1.0;
    let vv: f64 = v.iter().map(|x| x * x).sum();
    let vz: f64 = v.iter().zip(z).map(|(a, b)| a * b).sum();
    z.iter().zip(&v).map(|(zi, vi)| zi - 2.0 * vz / vv * vi).collect()
}

/// `n` standard normal vectors whose first coordinate is stratified (one
/// stratum per vector, in random order); the rest are independent.
pub fn stratified_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, dims: usize) -> Vec<Vec<f64>> {
    let unit = statrs::distribution::Normal::new(0.0, 1.0).expect("unit normal");
    let mut strata: Vec<usize> = (0..n).collect();
    strata.shuffle(rng);
    strata
        .into_iter()
        .map(|stratum| {
            let u: f64 = rng.sample(Open01);
            let mut z = vec![unit.inverse_cdf((stratum as f64 + u) / n as f64)];
            z.extend((1..dims).map(|_| unit.inverse_cdf(rng.sample(Open01))));
            z
        })
        .collect()
}

/// Sum of bin-centred tones plus white noise.
pub fn render_waveform(amplitudes: &[f64], phases: &[f64], noise: &[f64]) -> Vec<f32> {
    noise
        .iter()
        .enumerate()
        .map(|(n, &e)| {
            let mut x = e;
            for ((&k, &a), &phi) in BINS.iter().zip(amplitudes).zip(phases) {
                let freq = (k * SAMPLE_RATE_HZ as usize / WINDOW) as f64;
                x += a * (2.0 * PI * freq * n as f64 / f64::from(SAMPLE_RATE_HZ) + phi).sin();
            }
            x as f32
        })
        .collect()
}

/// Writes `audio/<recording>.wav` files and `manifest.toml` under `out_dir`
/// and returns the manifest. Output depends only on `params`.
pub fn generate_corpus(out_dir: &Path, params: &SynthParams) -> Result<Manifest, SynthError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let samples = (params.duration_s * f64::from(SAMPLE_RATE_HZ)).round() as usize;
    let per_class = params.n_speakers / 2;

    let mut speakers = Vec::with_capacity(params.n_speakers);
    let mut recordings = Vec::with_capacity(params.n_speakers * params.samples_per_speaker);
    for label in Label::ALL {
        let prefix = match label {
            Label::Healthy => "hc",
            Label::Pathological => "pd",
        };
        let mean = class_mean(label, params.separation);
        let draws = stratified_normal(&mut rng, per_class, BINS.len());
        for (i, z) in draws.iter().enumerate() {
            let id = format!("{prefix}{:03}", i + 1);
            let offset = to_class_frame(z);
            let centre: Vec<f64> = mean.iter().zip(&offset).map(|(m, z)| m + SPEAKER_STD * z).collect();
            speakers.push(Speaker {
                id: id.clone(),
                label,
                sex: if i % 2 == 0 { Sex::F } else { Sex::M },
                age: Some(rng.gen_range(40..=80)),
            });
            for j in 0..params.samples_per_speaker {
                let amplitudes: Vec<f64> = centre
                    .iter()
                    .map(|c| (c + RECORDING_STD * normal.sample(&mut rng)).max(MIN_AMPLITUDE))
                    .collect();
                let phases: Vec<f64> = (0..BINS.len()).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
                let noise: Vec<f64> = (0..samples).map(|_| NOISE_STD * normal.sample(&mut rng)).collect();
                let rec_id = format!("{id}_{:02}", j + 1);
                let rel = PathBuf::from("audio").join(format!("{rec_id}.wav"));
                write_wav(&out_dir.join(&rel), &render_waveform(&amplitudes, &phases, &noise), SAMPLE_RATE_HZ, 1)?;
                recordings.push(Recording {
                    id: rec_id,
                    speaker: id.clone(),
                    task: if j % 2 == 0 { Task::Sentence } else { Task::ReadSpeech },
                    path: rel,
                    sample_rate_hz: SAMPLE_RATE_HZ,
                    duration_s: samples as f64 / f64::from(SAMPLE_RATE_HZ),
                });
            }
        }
    }
    let name = format!("synthetic-sep{}-seed{}", params.separation, params.seed);
    let manifest = Manifest::new(name, speakers, recordings, out_dir).expect("generated corpus is consistent");
    let path = out_dir.join("manifest.toml");
    save_manifest(&manifest, &path).map_err(|source| SynthError::Io { path, source })?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{class_balance, load_manifest};

    fn small(seed: u64) -> SynthParams {
        SynthParams {
            n_speakers: 4,
            samples_per_speaker: 2,
            separation: 2.0,
            seed,
            duration_s: 0.1,
        }
    }

    #[test]
    fn rejects_bad_params() {
        for p in [
            SynthParams { n_speakers: 5, ..small(0) },
            SynthParams { n_speakers: 2, ..small(0) },
            SynthParams { separation: -1.0, ..small(0) },
            SynthParams { samples_per_speaker: 0, ..small(0) },
        ] {
            assert!(matches!(p.validate(), Err(SynthError::InvalidParams(_))));
        }
    }

    #[test]
    fn class_means_are_separation_stds_apart() {
        let a = class_mean(Label::Healthy, 4.0);
        let b = class_mean(Label::Pathological, 4.0);
        let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!((dist - 4.0 * SPEAKER_STD).abs() < 1e-15);
    }

    #[test]
    fn class_frame_is_a_rotation() {
        let axis = class_axis();
        let mut e0 = vec![0.0; BINS.len()];
        e0[0] = 1.0;
        for (a, b) in to_class_frame(&e0).iter().zip(&axis) {
            assert!((a - b).abs() < 1e-15);
        }
        let z = [0.3, -1.2, 0.5, 2.0, -0.7, 0.1, 0.9, -0.4];
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        assert!((norm(&to_class_frame(&z)) - norm(&z)).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_corpus() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate_corpus(a.path(), &small(3)).unwrap();
        let mb = generate_corpus(b.path(), &small(3)).unwrap();
        assert_eq!(ma, mb);
        for r in &ma.recordings {
            assert_eq!(std::fs::read(ma.audio_path(r)).unwrap(), std::fs::read(mb.audio_path(r)).unwrap());
        }
        let loaded = load_manifest(&a.path().join("manifest.toml")).unwrap();
        assert_eq!(loaded, ma);
        assert_eq!(class_balance(&loaded).values().copied().collect::<Vec<_>>(), vec![2, 2]);
    }
}
