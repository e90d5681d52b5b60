//! Per-layer hidden states from a frozen model, temporal statistics pooling
//! and an on-disk cache for both forms.

mod cache;
mod external;
pub mod synthetic;

pub use cache::{
    cache_get, cache_path, cache_put, decode_embedding_file, encode_embedding_file, CacheError,
    Embedding, EmbeddingKind, EMBEDDING_MAGIC,
};
pub use external::ExternalAdapter;
pub use synthetic::SyntheticAdapter;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("waveform has {len} samples, adapter needs at least {min}")]
    WaveformTooShort { len: usize, min: usize },
    #[error("adapter '{model_id}' failed: {message}")]
    AdapterFailure { model_id: String, message: String },
    #[error("embedding has no frames")]
    EmptyTemporalAxis,
}

/// A frozen pretrained encoder exposing its per-layer hidden states.
///
/// Implementations must be deterministic: the same waveform yields the same
/// tensor bit for bit.
pub trait ModelAdapter: Send + Sync {
    fn model_id(&self) -> &str;
    /// Number of transformer blocks whose outputs are reported.
    fn num_layers(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn required_rate_hz(&self) -> u32;
    /// Shortest waveform (in samples) producing at least one frame.
    fn min_samples(&self) -> usize;
    /// Whether one instance may serve several threads at once.
    fn shareable(&self) -> bool {
        true
    }
    /// Hidden states in `layer, feature, frame` row-major order, and the
    /// number of frames.
    fn hidden_states(&self, waveform: &[f32]) -> Result<(Vec<f32>, usize), String>;
}

/// Hidden states of one recording, shape `L x D x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEmbeddings {
    pub recording_id: String,
    pub model_id: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub frames: usize,
    pub data: Vec<f32>,
}

impl LayerEmbeddings {
    pub fn new(
        recording_id: impl Into<String>,
        model_id: impl Into<String>,
        num_layers: usize,
        hidden_dim: usize,
        frames: usize,
        data: Vec<f32>,
    ) -> Self {
        assert_eq!(data.len(), num_layers * hidden_dim * frames, "tensor shape mismatch");
        LayerEmbeddings {
            recording_id: recording_id.into(),
            model_id: model_id.into(),
            num_layers,
            hidden_dim,
            frames,
            data,
        }
    }

    /// Frames of feature `d` in layer `l` (both zero-based).
    pub fn series(&self, l: usize, d: usize) -> &[f32] {
        let start = (l * self.hidden_dim + d) * self.frames;
        &self.data[start..start + self.frames]
    }

    pub fn get(&self, l: usize, d: usize, t: usize) -> f32 {
        self.data[(l * self.hidden_dim + d) * self.frames + t]
    }
}

/// Mean and standard deviation over time for every layer, shape `L x 2D`.
/// Within a layer the first `D` entries are means, the next `D` are
/// standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledEmbedding {
    pub recording_id: String,
    pub model_id: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub data: Vec<f32>,
}

impl PooledEmbedding {
    pub fn new(
        recording_id: impl Into<String>,
        model_id: impl Into<String>,
        num_layers: usize,
        hidden_dim: usize,
        data: Vec<f32>,
    ) -> Self {
        assert_eq!(data.len(), num_layers * 2 * hidden_dim, "pooled shape mismatch");
        PooledEmbedding {
            recording_id: recording_id.into(),
            model_id: model_id.into(),
            num_layers,
            hidden_dim,
            data,
        }
    }

    /// The `2D` pooled vector of a layer. Layers are numbered from 1.
    pub fn layer(&self, layer_index: usize) -> &[f32] {
        assert!(
            (1..=self.num_layers).contains(&layer_index),
            "layer {layer_index} outside 1..={}",
            self.num_layers
        );
        let width = 2 * self.hidden_dim;
        let start = (layer_index - 1) * width;
        &self.data[start..start + width]
    }
}

/// Runs the adapter on a waveform already at `adapter.required_rate_hz()`.
pub fn extract(
    recording_id: &str,
    waveform: &[f32],
    adapter: &dyn ModelAdapter,
) -> Result<LayerEmbeddings, EmbeddingError> {
    let min = adapter.min_samples();
    if waveform.len() < min {
        return Err(EmbeddingError::WaveformTooShort { len: waveform.len(), min });
    }
    let failure = |message: String| EmbeddingError::AdapterFailure {
        model_id: adapter.model_id().to_string(),
        message,
    };
    let (data, frames) = adapter.hidden_states(waveform).map_err(failure)?;
    let (l, d) = (adapter.num_layers(), adapter.hidden_dim());
    if frames == 0 {
        return Err(failure("adapter produced zero frames".into()));
    }
    if data.len() != l * d * frames {
        return Err(failure(format!(
            "expected {l}x{d}x{frames} = {} values, got {}",
            l * d * frames,
            data.len()
        )));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(failure(format!("non-finite hidden state at flat index {i}")));
    }
    Ok(LayerEmbeddings::new(recording_id, adapter.model_id(), l, d, frames, data))
}

/// Mean and population standard deviation over frames.
///
/// Each series is sorted before accumulation so the result does not depend on
/// frame order.
pub fn pool(embeddings: &LayerEmbeddings) -> Result<PooledEmbedding, EmbeddingError> {
    let (l_count, d_count, t_count) = (embeddings.num_layers, embeddings.hidden_dim, embeddings.frames);
    if t_count == 0 {
        return Err(EmbeddingError::EmptyTemporalAxis);
    }
    let mut out = vec![0.0f32; l_count * 2 * d_count];
    let mut scratch = Vec::with_capacity(t_count);
    for l in 0..l_count {
        let row = &mut out[l * 2 * d_count..(l + 1) * 2 * d_count];
        for d in 0..d_count {
            scratch.clear();
            scratch.extend(embeddings.series(l, d).iter().map(|&v| f64::from(v)));
            scratch.sort_unstable_by(f64::total_cmp);
            let n = t_count as f64;
            let mean = scratch.iter().sum::<f64>() / n;
            let var = scratch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row[d] = mean as f32;
            row[d_count + d] = var.sqrt() as f32;
        }
    }
    Ok(PooledEmbedding::new(
        embeddings.recording_id.clone(),
        embeddings.model_id.clone(),
        l_count,
        d_count,
        out,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(l: usize, d: usize, t: usize, f: impl Fn(usize, usize, usize) -> f32) -> LayerEmbeddings {
        let mut data = Vec::with_capacity(l * d * t);
        for li in 0..l {
            for di in 0..d {
                for ti in 0..t {
                    data.push(f(li, di, ti));
                }
            }
        }
        LayerEmbeddings::new("r", "m", l, d, t, data)
    }

    #[test]
    fn constant_tensor_pools_to_constant_and_zero() {
        let p = pool(&tensor(3, 4, 7, |_, _, _| 2.5)).unwrap();
        for l in 1..=3 {
            let v = p.layer(l);
            assert!(v[..4].iter().all(|&m| m == 2.5));
            assert!(v[4..].iter().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn single_frame() {
        let e = tensor(2, 3, 1, |l, d, _| (l * 10 + d) as f32);
        let p = pool(&e).unwrap();
        assert_eq!(p.layer(2), &[10.0, 11.0, 12.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn population_std_of_two_values() {
        let e = tensor(1, 1, 2, |_, _, t| if t == 0 { 1.0 } else { 3.0 });
        assert_eq!(pool(&e).unwrap().data, vec![2.0, 1.0]);
    }

    #[test]
    fn zero_frames_is_an_error() {
        let e = LayerEmbeddings::new("r", "m", 2, 2, 0, vec![]);
        assert!(matches!(pool(&e), Err(EmbeddingError::EmptyTemporalAxis)));
    }

    struct Broken(usize);

    impl ModelAdapter for Broken {
        fn model_id(&self) -> &str {
            "broken"
        }
        fn num_layers(&self) -> usize {
            2
        }
        fn hidden_dim(&self) -> usize {
            2
        }
        fn required_rate_hz(&self) -> u32 {
            16_000
        }
        fn min_samples(&self) -> usize {
            10
        }
        fn hidden_states(&self, _: &[f32]) -> Result<(Vec<f32>, usize), String> {
            match self.0 {
                0 => Err("checkpoint missing".into()),
                1 => Ok((vec![0.0; 3], 1)),
                _ => Ok((vec![f32::NAN; 4], 1)),
            }
        }
    }

    #[test]
    fn adapter_failures_are_reported() {
        assert!(matches!(
            extract("r", &[0.0; 5], &Broken(0)),
            Err(EmbeddingError::WaveformTooShort { len: 5, min: 10 })
        ));
        for mode in 0..3 {
            let err = extract("r", &[0.0; 20], &Broken(mode)).unwrap_err();
            assert!(matches!(err, EmbeddingError::AdapterFailure { .. }), "{err}");
        }
    }
}
