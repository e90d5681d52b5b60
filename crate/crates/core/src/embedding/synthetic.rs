//! Deterministic stand-in for a pretrained speech encoder.
//!
//! Each 25 ms window (400 samples at 16 kHz, hop 320) is summarized by the
//! magnitudes of eight DFT bins (200 Hz to 480 Hz in 40 Hz steps). Every
//! layer maps those magnitudes through its own seeded random projection and
//! adds a small perturbation derived from a hash of the window's samples.
//! Tones whose frequencies sit exactly on those bins are measured without
//! leakage regardless of window alignment, which is what the synthetic
//! corpus generator relies on.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelAdapter;
use crate::util::{fnv1a64, splitmix64};

pub const SAMPLE_RATE_HZ: u32 = 16_000;
pub const WINDOW: usize = 400;
pub const HOP: usize = 320;
/// DFT bin indices over one window; bin `k` is `k * 40` Hz.
pub const BINS: [usize; 8] = [5, 6, 7, 8, 9, 10, 11, 12];
pub const FEATURE_SCALE: f64 = 10.0;
pub const JITTER: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct SyntheticAdapter {
    model_id: String,
    seed: u64,
    num_layers: usize,
    hidden_dim: usize,
    /// `L x D x BINS` row-major, uniform on [-1, 1).
    projection: Vec<f64>,
    cos_table: Vec<f64>,
    sin_table: Vec<f64>,
}

impl SyntheticAdapter {
    pub fn new(model_id: impl Into<String>, seed: u64, num_layers: usize, hidden_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut projection: Vec<f64> = (0..num_layers * hidden_dim * BINS.len())
            .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
            .collect();
        if hidden_dim >= BINS.len() {
            for layer in projection.chunks_mut(hidden_dim * BINS.len()) {
                orthogonalize_columns(layer, hidden_dim);
            }
        }
        let mut cos_table = Vec::with_capacity(BINS.len() * WINDOW);
        let mut sin_table = Vec::with_capacity(BINS.len() * WINDOW);
        for &k in &BINS {
            for n in 0..WINDOW {
                let phase = 2.0 * PI * (k * n) as f64 / WINDOW as f64;
                cos_table.push(phase.cos());
                sin_table.push(phase.sin());
            }
        }
        SyntheticAdapter {
            model_id: model_id.into(),
            seed,
            num_layers,
            hidden_dim,
            projection,
            cos_table,
            sin_table,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frame_count(samples: usize) -> usize {
        if samples < WINDOW {
            0
        } else {
            (samples - WINDOW) / HOP + 1
        }
    }

    /// Single-sided amplitude of each tracked bin over one window.
    pub fn bin_magnitudes(&self, window: &[f32]) -> [f64; BINS.len()] {
        let mut out = [0.0; BINS.len()];
        for (p, slot) in out.iter_mut().enumerate() {
            let cos = &self.cos_table[p * WINDOW..(p + 1) * WINDOW];
            let sin = &self.sin_table[p * WINDOW..(p + 1) * WINDOW];
            let (mut re, mut im) = (0.0, 0.0);
            for ((&x, &c), &s) in window.iter().zip(cos).zip(sin) {
                re += f64::from(x) * c;
                im += f64::from(x) * s;
            }
            *slot = 2.0 / WINDOW as f64 * (re * re + im * im).sqrt();
        }
        out
    }
}

/// Gram-Schmidt on the `BINS` columns of a `rows x BINS` row-major block,
/// rescaled to the expected norm of a uniform [-1, 1) column.
fn orthogonalize_columns(block: &mut [f64], rows: usize) {
    let p = BINS.len();
    let norm = (rows as f64 / 3.0).sqrt();
    for c in 0..p {
        for prev in 0..c {
            let dot: f64 = (0..rows).map(|r| block[r * p + c] * block[r * p + prev]).sum::<f64>() / (norm * norm);
            for r in 0..rows {
                block[r * p + c] -= dot * block[r * p + prev];
            }
        }
        let len = (0..rows).map(|r| block[r * p + c].powi(2)).sum::<f64>().sqrt();
        for r in 0..rows {
            block[r * p + c] *= norm / len;
        }
    }
}

fn window_hash(window: &[f32]) -> u64 {
    let bytes: Vec<u8> = window.iter().flat_map(|v| v.to_le_bytes()).collect();
    fnv1a64(&bytes)
}

fn unit_jitter(hash: u64, seed: u64, index: u64) -> f64 {
    let bits = splitmix64(hash ^ splitmix64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    (bits >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

impl ModelAdapter for SyntheticAdapter {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn num_layers(&self) -> usize {
        self.num_layers
    }

    fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn required_rate_hz(&self) -> u32 {
        SAMPLE_RATE_HZ
    }

    fn min_samples(&self) -> usize {
        WINDOW
    }

    fn hidden_states(&self, waveform: &[f32]) -> Result<(Vec<f32>, usize), String> {
        let frames = Self::frame_count(waveform.len());
        if frames == 0 {
            return Err(format!("need at least {WINDOW} samples"));
        }
        let (l_count, d_count, p_count) = (self.num_layers, self.hidden_dim, BINS.len());
        let mut out = vec![0.0f32; l_count * d_count * frames];
        for t in 0..frames {
            let window = &waveform[t * HOP..t * HOP + WINDOW];
            let mags = self.bin_magnitudes(window);
            let hash = window_hash(window);
            for l in 0..l_count {
                for d in 0..d_count {
                    let unit = l * d_count + d;
                    let weights = &self.projection[unit * p_count..(unit + 1) * p_count];
                    let projected: f64 = weights.iter().zip(&mags).map(|(w, m)| w * m).sum();
                    let value = FEATURE_SCALE * projected + JITTER * unit_jitter(hash, self.seed, unit as u64);
                    out[unit * frames + t] = value as f32;
                }
            }
        }
        Ok((out, frames))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(amps: &[f64], samples: usize, phase: f64) -> Vec<f32> {
        (0..samples)
            .map(|n| {
                BINS.iter()
                    .zip(amps)
                    .map(|(&k, a)| {
                        let f = k as f64 * SAMPLE_RATE_HZ as f64 / WINDOW as f64;
                        a * (2.0 * PI * f * n as f64 / SAMPLE_RATE_HZ as f64 + phase).sin()
                    })
                    .sum::<f64>() as f32
            })
            .collect()
    }

    #[test]
    fn bin_magnitudes_recover_tone_amplitudes_at_any_offset() {
        let adapter = SyntheticAdapter::new("s", 1, 2, 4);
        let amps = [0.05, 0.06, 0.07, 0.08, 0.04, 0.03, 0.09, 0.1];
        let wave = tone(&amps, 2_000, 0.3);
        for offset in [0, 37, 320, 999] {
            let mags = adapter.bin_magnitudes(&wave[offset..offset + WINDOW]);
            for (m, a) in mags.iter().zip(&amps) {
                assert!((m - a).abs() < 1e-6, "offset {offset}: {m} vs {a}");
            }
        }
    }

    #[test]
    fn frame_count_follows_window_and_hop() {
        assert_eq!(SyntheticAdapter::frame_count(399), 0);
        assert_eq!(SyntheticAdapter::frame_count(400), 1);
        assert_eq!(SyntheticAdapter::frame_count(16_000), 49);
    }

    #[test]
    fn distinct_seeds_give_distinct_projections() {
        let wave = tone(&[0.05; 8], 1_600, 0.0);
        let a = SyntheticAdapter::new("s", 1, 3, 5).hidden_states(&wave).unwrap();
        let b = SyntheticAdapter::new("s", 2, 3, 5).hidden_states(&wave).unwrap();
        assert_eq!(a.1, b.1);
        assert_ne!(a.0, b.0);
    }
}
