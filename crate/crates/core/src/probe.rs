//! Linear softmax probes over pooled layer embeddings.
//!
//! Training recipe: Xavier-uniform weights, zero bias, Adam, a step learning
//! rate schedule (`lr * gamma^floor(epoch / step)`), and early stopping on the
//! validation loss. The returned probe is the `f32` parameter snapshot of the
//! epoch with the lowest validation loss.

use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::Label;
use crate::util::write_atomic;

pub const NUM_CLASSES: usize = 2;
pub const PROBE_MAGIC: &[u8; 6] = b"LPPRB1";

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-8;
/// Minimum validation-loss decrease that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("training set contains only {0} samples")]
    SingleClassTrainingSet(Label),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("expected {expected} features, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error)]
pub enum ProbeFileError {
    #[error("corrupt probe file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("probe I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub decay_gamma: f64,
    pub decay_every_epochs: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-2,
            decay_gamma: 0.9,
            decay_every_epochs: 15,
            early_stop_patience: 10,
            max_epochs: 500,
            seed: 0,
            batch_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be positive");
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma < 1.0) {
            return bad("decay_gamma must lie in (0, 1)");
        }
        if self.decay_every_epochs == 0 || self.early_stop_patience == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return bad("decay_every_epochs, early_stop_patience, max_epochs and batch_size must be positive");
        }
        Ok(())
    }
}

/// `initial_lr * gamma^floor(epoch / every)`. The power is a plain product so
/// the value does not depend on how `powi` is lowered or constant-folded.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let steps = epoch / config.decay_every_epochs;
    config.initial_lr * (0..steps).fold(1.0, |acc, _| acc * config.decay_gamma)
}

pub fn xavier_bound(n_in: usize, n_out: usize) -> f64 {
    6f64.sqrt() / ((n_in + n_out) as f64).sqrt()
}

/// `n_out x n_in` weights drawn uniformly from `[-b, b]`,
/// `b = sqrt(6) / sqrt(n_in + n_out)`.
pub fn xavier_init<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Vec<f64> {
    let bound = xavier_bound(n_in, n_out);
    (0..n_in * n_out).map(|_| rng.gen_range(-bound..=bound)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub layer_index: usize,
    pub model_id: String,
    pub num_features: usize,
    /// `2 x num_features`, row-major.
    pub weights: Vec<f32>,
    pub bias: [f32; NUM_CLASSES],
}

impl ProbeModel {
    pub fn zeros(layer_index: usize, model_id: impl Into<String>, num_features: usize) -> Self {
        ProbeModel {
            layer_index,
            model_id: model_id.into(),
            num_features,
            weights: vec![0.0; NUM_CLASSES * num_features],
            bias: [0.0; NUM_CLASSES],
        }
    }

    pub fn logits(&self, x: &[f32]) -> Result<[f64; NUM_CLASSES], TrainError> {
        if x.len() != self.num_features {
            return Err(TrainError::DimensionMismatch {
                expected: self.num_features,
                found: x.len(),
            });
        }
        let mut out = [0.0; NUM_CLASSES];
        for (c, slot) in out.iter_mut().enumerate() {
            let row = &self.weights[c * self.num_features..(c + 1) * self.num_features];
            *slot = f64::from(self.bias[c])
                + row.iter().zip(x).map(|(&w, &v)| f64::from(w) * f64::from(v)).sum::<f64>();
        }
        Ok(out)
    }

    /// Class probabilities `[P(HEALTHY), P(PATHOLOGICAL)]`.
    pub fn predict(&self, x: &[f32]) -> Result<[f64; NUM_CLASSES], TrainError> {
        Ok(softmax2(self.logits(x)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PROBE_MAGIC);
        out.extend_from_slice(&(self.layer_index as u32).to_le_bytes());
        out.extend_from_slice(&(self.model_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.model_id.as_bytes());
        out.extend_from_slice(&(NUM_CLASSES as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_features as u32).to_le_bytes());
        for v in self.weights.iter().chain(&self.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, ProbeFileError> {
        let corrupt = |reason: &str| ProbeFileError::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut cursor = bytes;
        let mut take = |n: usize| -> Result<&[u8], ProbeFileError> {
            if cursor.len() < n {
                return Err(corrupt("truncated"));
            }
            let (head, rest) = cursor.split_at(n);
            cursor = rest;
            Ok(head)
        };
        if take(6)? != PROBE_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let read_u32 = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let layer_index = read_u32(take(4)?);
        let id_len = read_u32(take(4)?);
        let model_id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| corrupt("model id is not UTF-8"))?;
        let classes = read_u32(take(4)?);
        if classes != NUM_CLASSES {
            return Err(corrupt("unsupported class count"));
        }
        let num_features = read_u32(take(4)?);
        let count = NUM_CLASSES * num_features + NUM_CLASSES;
        let payload = take(count.checked_mul(4).ok_or_else(|| corrupt("dimension overflow"))?)?;
        if !cursor.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        let mut values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let bias_values = values.split_off(NUM_CLASSES * num_features);
        Ok(ProbeModel {
            layer_index,
            model_id,
            num_features,
            weights: values,
            bias: [bias_values[0], bias_values[1]],
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ProbeFileError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| ProbeFileError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ProbeFileError> {
        let bytes = std::fs::read(path).map_err(|source| ProbeFileError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}

fn softmax2(z: [f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = z[0].max(z[1]);
    let e = [(z[0] - max).exp(), (z[1] - max).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

/// Cross-entropy of one sample under `f64` parameters
/// (`params = weights (2 x n) followed by bias (2)`), and its gradient.
pub fn cross_entropy_and_grad(params: &[f64], x: &[f32], label: usize) -> (f64, Vec<f64>) {
    let n = x.len();
    assert_eq!(params.len(), NUM_CLASSES * n + NUM_CLASSES);
    let mut z = [0.0; NUM_CLASSES];
    for (c, slot) in z.iter_mut().enumerate() {
        let row = &params[c * n..(c + 1) * n];
        *slot = params[NUM_CLASSES * n + c] + row.iter().zip(x).map(|(w, &v)| w * f64::from(v)).sum::<f64>();
    }
    let max = z[0].max(z[1]);
    let lse = max + ((z[0] - max).exp() + (z[1] - max).exp()).ln();
    let loss = lse - z[label];
    let p = softmax2(z);
    let mut grad = vec![0.0; params.len()];
    for c in 0..NUM_CLASSES {
        let delta = p[c] - if c == label { 1.0 } else { 0.0 };
        for (g, &v) in grad[c * n..(c + 1) * n].iter_mut().zip(x) {
            *g = delta * f64::from(v);
        }
        grad[NUM_CLASSES * n + c] = delta;
    }
    (loss, grad)
}

/// Patience-based early stopping on a loss that should decrease.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            stale_epochs: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        if loss < self.best - MIN_IMPROVEMENT {
            self.best = loss;
            self.stale_epochs = 0;
            StopDecision::Improved
        } else {
            self.stale_epochs += 1;
            if self.stale_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("history serializes")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LabeledSample<'a> {
    pub features: &'a [f32],
    pub label: Label,
}

fn mean_loss(probe: &ProbeModel, set: &[LabeledSample<'_>]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for s in set {
        let z = probe.logits(s.features)?;
        let max = z[0].max(z[1]);
        let lse = max + ((z[0] - max).exp() + (z[1] - max).exp()).ln();
        total += lse - z[s.label.index()];
    }
    Ok(total / set.len() as f64)
}

fn snapshot(layer_index: usize, model_id: &str, n: usize, params: &[f64]) -> ProbeModel {
    let bias = [params[NUM_CLASSES * n] as f32, params[NUM_CLASSES * n + 1] as f32];
    ProbeModel {
        layer_index,
        model_id: model_id.to_string(),
        num_features: n,
        weights: params[..NUM_CLASSES * n].iter().map(|&w| w as f32).collect(),
        bias,
    }
}

pub fn train(
    layer_index: usize,
    model_id: &str,
    train_set: &[LabeledSample<'_>],
    val_set: &[LabeledSample<'_>],
    config: &TrainConfig,
) -> Result<(ProbeModel, TrainHistory), TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    let n = train_set[0].features.len();
    for s in train_set.iter().chain(val_set) {
        if s.features.len() != n {
            return Err(TrainError::DimensionMismatch {
                expected: n,
                found: s.features.len(),
            });
        }
    }
    let first = train_set[0].label;
    if train_set.iter().all(|s| s.label == first) {
        return Err(TrainError::SingleClassTrainingSet(first));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = xavier_init(n, NUM_CLASSES, &mut rng);
    params.extend([0.0; NUM_CLASSES]);
    let mut first_moment = vec![0.0; params.len()];
    let mut second_moment = vec![0.0; params.len()];
    let mut step = 0i32;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut batch_grad = vec![0.0; params.len()];
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut best = snapshot(layer_index, model_id, n, &params);
    let mut history = TrainHistory {
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
        epochs: Vec::new(),
    };

    for epoch in 0..config.max_epochs {
        let lr = lr_at_epoch(config, epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            batch_grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let s = &train_set[i];
                let (loss, grad) = cross_entropy_and_grad(&params, s.features, s.label.index());
                epoch_loss += loss;
                for (acc, g) in batch_grad.iter_mut().zip(grad) {
                    *acc += g;
                }
            }
            step += 1;
            let scale = 1.0 / batch.len() as f64;
            let correction1 = 1.0 - ADAM_BETA1.powi(step);
            let correction2 = 1.0 - ADAM_BETA2.powi(step);
            for j in 0..params.len() {
                let g = batch_grad[j] * scale;
                first_moment[j] = ADAM_BETA1 * first_moment[j] + (1.0 - ADAM_BETA1) * g;
                second_moment[j] = ADAM_BETA2 * second_moment[j] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = first_moment[j] / correction1;
                let v_hat = second_moment[j] / correction2;
                params[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            }
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let candidate = snapshot(layer_index, model_id, n, &params);
        let val_loss = mean_loss(&candidate, val_set)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            learning_rate: lr,
        });
        match stopper.observe(val_loss) {
            StopDecision::Improved => {
                best = candidate;
                history.best_epoch = epoch;
                history.best_val_loss = val_loss;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn schedule_values() {
        let c = TrainConfig::default();
        assert_eq!(lr_at_epoch(&c, 0), 0.01);
        assert_eq!(lr_at_epoch(&c, 14), 0.01);
        assert!((lr_at_epoch(&c, 15) - 0.009).abs() < 1e-15);
        assert!((lr_at_epoch(&c, 30) - 0.0081).abs() < 1e-15);
    }

    #[test]
    fn xavier_bounds() {
        assert_eq!(xavier_bound(3, 3), 1.0);
        assert!((xavier_bound(100, 28) - 0.216_506_350_946_109_66).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(xavier_init(3, 3, &mut rng).iter().all(|w| w.abs() <= 1.0));
        let a = xavier_init(10, 4, &mut ChaCha8Rng::seed_from_u64(9));
        let b = xavier_init(10, 4, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn predict_examples() {
        let probe = ProbeModel::zeros(1, "m", 3);
        assert_eq!(probe.predict(&[1.0, -2.0, 3.0]).unwrap(), [0.5, 0.5]);

        let mut probe = ProbeModel::zeros(1, "m", 1);
        probe.bias = [3f32.ln(), 0.0];
        let p = probe.predict(&[0.0]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-7 && (p[1] - 0.25).abs() < 1e-7);

        assert!(matches!(probe.predict(&[0.0, 1.0]), Err(TrainError::DimensionMismatch { .. })));
    }

    #[test]
    fn early_stopping_counts_stale_epochs() {
        let mut s = EarlyStopping::new(3);
        assert_eq!(s.observe(1.0), StopDecision::Improved);
        assert_eq!(s.observe(0.9999995), StopDecision::Continue); // below the 1e-6 threshold
        assert_eq!(s.observe(0.5), StopDecision::Improved);
        assert_eq!(s.observe(0.6), StopDecision::Continue);
        assert_eq!(s.observe(0.7), StopDecision::Continue);
        assert_eq!(s.observe(0.8), StopDecision::Stop);
        assert_eq!(s.best(), 0.5);
    }

    fn blobs(per_class: usize, dim: usize, margin_sigmas: f64, seed: u64) -> Vec<(Vec<f32>, Label)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f64, 1.0).unwrap();
        let mut out = Vec::new();
        for label in Label::ALL {
            let sign: f64 = if label == Label::Healthy { -1.0 } else { 1.0 };
            for _ in 0..per_class {
                let mut x: Vec<f32> = (0..dim).map(|_| noise.sample(&mut rng) as f32).collect();
                // keep the first axis at least `margin` from the boundary
                let offset: f64 = 0.5 * margin_sigmas + noise.sample(&mut rng).abs();
                x[0] = (sign * offset) as f32;
                out.push((x, label));
            }
        }
        out
    }

    fn samples(data: &[(Vec<f32>, Label)]) -> Vec<LabeledSample<'_>> {
        data.iter().map(|(x, l)| LabeledSample { features: x, label: *l }).collect()
    }

    #[test]
    fn separable_data_is_learned() {
        let train_data = blobs(40, 6, 2.0, 1);
        let val_data = blobs(40, 6, 2.0, 2);
        let (probe, history) = train(1, "m", &samples(&train_data), &samples(&val_data), &TrainConfig::default()).unwrap();
        assert!(history.epochs.len() <= 500);
        let correct = val_data
            .iter()
            .filter(|(x, l)| {
                let p = probe.predict(x).unwrap();
                usize::from(p[1] > p[0]) == l.index()
            })
            .count();
        assert_eq!(correct, val_data.len());
    }

    #[test]
    fn errors() {
        let data = blobs(3, 2, 2.0, 0);
        let all = samples(&data);
        let cfg = TrainConfig::default();
        assert!(matches!(train(1, "m", &[], &all, &cfg), Err(TrainError::EmptySet(_))));
        assert!(matches!(train(1, "m", &all, &[], &cfg), Err(TrainError::EmptySet(_))));
        assert!(matches!(
            train(1, "m", &all[..3], &all, &cfg),
            Err(TrainError::SingleClassTrainingSet(Label::Healthy))
        ));
        let ones = vec![1.0f32; 2];
        let diverging = [
            LabeledSample { features: &ones, label: Label::Healthy },
            LabeledSample { features: &ones, label: Label::Pathological },
        ];
        let hot = TrainConfig { initial_lr: 1e300, ..cfg };
        assert!(matches!(train(1, "m", &diverging, &diverging, &hot), Err(TrainError::NonFiniteLoss { .. })));
    }

    #[test]
    fn probe_bytes_round_trip_and_truncation() {
        let data = blobs(10, 4, 2.0, 3);
        let (probe, _) = train(7, "xlsr53-es", &samples(&data), &samples(&data), &TrainConfig::default()).unwrap();
        let bytes = probe.to_bytes();
        let path = Path::new("probe.prb");
        let back = ProbeModel::from_bytes(&bytes, path).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, probe);
        for cut in [0, 5, 12, bytes.len() - 1] {
            assert!(matches!(ProbeModel::from_bytes(&bytes[..cut], path), Err(ProbeFileError::Corrupt { .. })));
        }
    }

    proptest::proptest! {
        #[test]
        fn predict_is_a_distribution(w in proptest::collection::vec(-50f32..50.0, 6), b0 in -50f32..50.0, b1 in -50f32..50.0, x in proptest::collection::vec(-10f32..10.0, 3)) {
            let probe = ProbeModel { layer_index: 1, model_id: "m".into(), num_features: 3, weights: w, bias: [b0, b1] };
            let p = probe.predict(&x).unwrap();
            proptest::prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
            proptest::prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn argmax_ignores_common_logit_shift(w in proptest::collection::vec(-5f32..5.0, 4), b0 in -5f32..5.0, b1 in -5f32..5.0, shift in -20f32..20.0, x in proptest::collection::vec(-3f32..3.0, 2)) {
            let base = ProbeModel { layer_index: 1, model_id: "m".into(), num_features: 2, weights: w, bias: [b0, b1] };
            let shifted = ProbeModel { bias: [b0 + shift, b1 + shift], ..base.clone() };
            let z = base.logits(&x).unwrap();
            proptest::prop_assume!((z[0] - z[1]).abs() > 1e-3);
            let (p, q) = (base.predict(&x).unwrap(), shifted.predict(&x).unwrap());
            proptest::prop_assert_eq!(p[1] > p[0], q[1] > q[0]);
        }
    }
}
