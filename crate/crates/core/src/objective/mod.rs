//! Contrastive pretraining objective of wav2vec2-style encoders, at desk scale.
//!
//! Code selection uses a temperature-scaled Gumbel softmax over
//! `G` groups of `V` codebook entries. The loss is `L = L_c + alpha * L_d`
//! where `L_c` is an InfoNCE-style contrastive term over cosine similarities
//! and `L_d` is the mean negative entropy of the averaged code distributions.
//! Nothing here trains a model; the functions exist so the objective can be
//! checked numerically.

pub mod selfcheck;

use rand::Rng;
use thiserror::Error;

pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("uniform sample {0} outside the open interval (0, 1)")]
    DomainError(f64),
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("zero-length vector")]
    ZeroVector,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
}

type Result<T> = std::result::Result<T, ObjectiveError>;

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ObjectiveError::NonFiniteInput)
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(ObjectiveError::InvalidTemperature(tau))
    }
}

/// `-ln(-ln u)` for `u` in (0, 1).
pub fn gumbel_noise(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(ObjectiveError::DomainError(u));
    }
    Ok(-(-u.ln()).ln())
}

/// Draws `n` Gumbel(0, 1) values from `rng`.
pub fn sample_gumbel_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let u: f64 = rng.gen();
            if u > 0.0 {
                break gumbel_noise(u).expect("u in (0, 1)");
            }
        })
        .collect()
}

/// `softmax((logits + noise) / tau)`.
pub fn gumbel_code_probs(logits: &[f64], noise: &[f64], tau: f64) -> Result<Vec<f64>> {
    if logits.len() != noise.len() {
        return Err(ObjectiveError::Shape(format!(
            "{} logits, {} noise values",
            logits.len(),
            noise.len()
        )));
    }
    check_finite(logits)?;
    check_finite(noise)?;
    check_temperature(tau)?;
    let scaled: Vec<f64> = logits.iter().zip(noise).map(|(l, n)| (l + n) / tau).collect();
    Ok(softmax(&scaled))
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Product-quantization codebook: `groups` groups of `entries` vectors of
/// length `entry_dim`, plus a linear projection of their concatenation.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub groups: usize,
    pub entries: usize,
    pub entry_dim: usize,
    /// `groups x entries x entry_dim`, row-major.
    pub vectors: Vec<f64>,
    pub output_dim: usize,
    /// `output_dim x (groups * entry_dim)`, row-major.
    pub projection: Vec<f64>,
}

impl Codebook {
    pub fn new(
        groups: usize,
        entries: usize,
        entry_dim: usize,
        vectors: Vec<f64>,
        output_dim: usize,
        projection: Vec<f64>,
    ) -> Result<Self> {
        if groups < 1 || entries < 2 || entry_dim < 1 {
            return Err(ObjectiveError::Shape(format!(
                "need G >= 1, V >= 2, entry_dim >= 1; got {groups}, {entries}, {entry_dim}"
            )));
        }
        if vectors.len() != groups * entries * entry_dim {
            return Err(ObjectiveError::Shape("codebook vectors".into()));
        }
        if projection.len() != output_dim * groups * entry_dim {
            return Err(ObjectiveError::Shape("projection".into()));
        }
        check_finite(&vectors)?;
        check_finite(&projection)?;
        Ok(Codebook {
            groups,
            entries,
            entry_dim,
            vectors,
            output_dim,
            projection,
        })
    }

    /// Uniform random entries and projection, for experiments and tests.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        groups: usize,
        entries: usize,
        entry_dim: usize,
        output_dim: usize,
    ) -> Result<Self> {
        let vectors = (0..groups * entries * entry_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let projection = (0..output_dim * groups * entry_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Codebook::new(groups, entries, entry_dim, vectors, output_dim, projection)
    }

    pub fn entry(&self, group: usize, index: usize) -> &[f64] {
        let start = (group * self.entries + index) * self.entry_dim;
        &self.vectors[start..start + self.entry_dim]
    }

    pub fn project(&self, concatenated: &[f64]) -> Vec<f64> {
        let width = self.groups * self.entry_dim;
        self.projection
            .chunks_exact(width)
            .map(|row| row.iter().zip(concatenated).map(|(w, x)| w * x).sum())
            .collect()
    }
}

/// Linear map from an encoder frame to the `G * V` code logits.
#[derive(Debug, Clone)]
pub struct LogitMap {
    pub input_dim: usize,
    /// `(G * V) x input_dim`, row-major.
    pub weights: Vec<f64>,
}

impl LogitMap {
    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim {
            return Err(ObjectiveError::Shape(format!(
                "frame has {} features, logit map expects {}",
                z.len(),
                self.input_dim
            )));
        }
        check_finite(z)?;
        Ok(self
            .weights
            .chunks_exact(self.input_dim)
            .map(|row| row.iter().zip(z).map(|(w, x)| w * x).sum())
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelConfig {
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    /// Projected code vector.
    pub q: Vec<f64>,
    /// Concatenated group vectors before projection, length `G * entry_dim`.
    pub concatenated: Vec<f64>,
    /// Code probabilities, `G x V`.
    pub probs: Vec<f64>,
    /// Argmax entry per group.
    pub selected: Vec<usize>,
}

/// Quantizes one frame. `noise` holds one Gumbel value per logit (`G * V`).
///
/// In hard mode each group contributes its argmax entry; otherwise the
/// probability-weighted mixture of its entries.
pub fn quantize(
    z: &[f64],
    logit_map: &LogitMap,
    codebook: &Codebook,
    config: GumbelConfig,
    noise: &[f64],
    hard: bool,
) -> Result<Quantized> {
    let (g_count, v_count, e_dim) = (codebook.groups, codebook.entries, codebook.entry_dim);
    let logits = logit_map.logits(z)?;
    if logits.len() != g_count * v_count || noise.len() != g_count * v_count {
        return Err(ObjectiveError::Shape(format!(
            "expected {} logits and noise values, got {} and {}",
            g_count * v_count,
            logits.len(),
            noise.len()
        )));
    }
    let mut probs = Vec::with_capacity(g_count * v_count);
    let mut selected = Vec::with_capacity(g_count);
    let mut concatenated = Vec::with_capacity(g_count * e_dim);
    for g in 0..g_count {
        let span = g * v_count..(g + 1) * v_count;
        let p = gumbel_code_probs(&logits[span.clone()], &noise[span.clone()], config.temperature)?;
        let perturbed: Vec<f64> = logits[span.clone()].iter().zip(&noise[span]).map(|(l, n)| l + n).collect();
        let best = argmax(&perturbed);
        selected.push(best);
        if hard {
            concatenated.extend_from_slice(codebook.entry(g, best));
        } else {
            let mut mix = vec![0.0; e_dim];
            for (v, &pv) in p.iter().enumerate() {
                for (m, &e) in mix.iter_mut().zip(codebook.entry(g, v)) {
                    *m += pv * e;
                }
            }
            concatenated.extend(mix);
        }
        probs.extend(p);
    }
    let q = codebook.project(&concatenated);
    check_finite(&q)?;
    Ok(Quantized {
        q,
        concatenated,
        probs,
        selected,
    })
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ObjectiveError::Shape(format!("{} vs {} elements", a.len(), b.len())));
    }
    check_finite(a)?;
    check_finite(b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(ObjectiveError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Negative log softmax weight of the positive `q_t` among `{q_t} + distractors`,
/// with cosine similarities divided by `tau`.
pub fn contrastive_loss(c_t: &[f64], q_t: &[f64], distractors: &[Vec<f64>], tau: f64) -> Result<f64> {
    contrastive_loss_and_grad(c_t, q_t, distractors, tau).map(|(loss, _)| loss)
}

/// Contrastive loss and its gradient with respect to `c_t`.
pub fn contrastive_loss_and_grad(
    c_t: &[f64],
    q_t: &[f64],
    distractors: &[Vec<f64>],
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    check_temperature(tau)?;
    let candidates: Vec<&[f64]> = std::iter::once(q_t).chain(distractors.iter().map(Vec::as_slice)).collect();
    let sims = candidates
        .iter()
        .map(|q| cosine_sim(c_t, q))
        .collect::<Result<Vec<f64>>>()?;
    let scaled: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    let loss = if distractors.is_empty() {
        0.0
    } else {
        (log_sum_exp(&scaled) - scaled[0]).max(0.0)
    };

    // dL/dc = sum_j (softmax_j - [j == 0]) / tau * d sim_j / dc
    let weights = softmax(&scaled);
    let c_norm = norm(c_t);
    let mut grad = vec![0.0; c_t.len()];
    for (j, q) in candidates.iter().enumerate() {
        let coeff = (weights[j] - if j == 0 { 1.0 } else { 0.0 }) / tau;
        if coeff == 0.0 {
            continue;
        }
        let q_norm = norm(q);
        for (i, g) in grad.iter_mut().enumerate() {
            let d_sim = q[i] / (c_norm * q_norm) - sims[j] * c_t[i] / (c_norm * c_norm);
            *g += coeff * d_sim;
        }
    }
    Ok((loss, grad))
}

fn check_distributions(p_hat: &[f64], groups: usize, entries: usize) -> Result<()> {
    if groups == 0 || entries == 0 || p_hat.len() != groups * entries {
        return Err(ObjectiveError::Shape(format!(
            "{} probabilities for {groups} x {entries}",
            p_hat.len()
        )));
    }
    for (g, row) in p_hat.chunks_exact(entries).enumerate() {
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(ObjectiveError::InvalidDistribution(format!("group {g} has a negative or non-finite entry")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(ObjectiveError::InvalidDistribution(format!("group {g} sums to {sum}")));
        }
    }
    Ok(())
}

/// `(1 / (G V)) * sum_g sum_v p log p`, with `0 log 0 = 0`.
pub fn diversity_loss(p_hat: &[f64], groups: usize, entries: usize) -> Result<f64> {
    check_distributions(p_hat, groups, entries)?;
    let total: f64 = p_hat.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
    Ok(total / (groups * entries) as f64)
}

/// Gradient of [`diversity_loss`] with respect to each (strictly positive)
/// probability, treating entries as independent variables.
pub fn diversity_loss_grad(p_hat: &[f64], groups: usize, entries: usize) -> Result<Vec<f64>> {
    check_distributions(p_hat, groups, entries)?;
    if p_hat.iter().any(|&p| p <= 0.0) {
        return Err(ObjectiveError::InvalidDistribution("gradient undefined at zero probability".into()));
    }
    let scale = 1.0 / (groups * entries) as f64;
    Ok(p_hat.iter().map(|p| (p.ln() + 1.0) * scale).collect())
}

pub fn total_loss(contrastive: f64, diversity: f64, alpha: f64) -> f64 {
    contrastive + alpha * diversity
}
