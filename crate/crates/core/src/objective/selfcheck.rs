//! Numerical self-checks for the objective: normalization, limits, bounds
//! and analytic gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    contrastive_loss, contrastive_loss_and_grad, diversity_loss, diversity_loss_grad, gumbel_code_probs,
    quantize, sample_gumbel_noise, Codebook, GumbelConfig, LogitMap,
};

pub const GRADIENT_POINTS: usize = 100;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Check { name, passed, detail }
    }
}

/// `||a - b|| / max(||a||, ||b||)`; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_rows(rng: &mut ChaCha8Rng, groups: usize, entries: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(groups * entries);
    for _ in 0..groups {
        let row: Vec<f64> = (0..entries).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = row.iter().sum();
        p.extend(row.into_iter().map(|v| v / sum));
    }
    p
}

pub fn run(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..GRADIENT_POINTS {
        let v = rng.gen_range(2..40);
        let logits = random_vec(&mut rng, v).into_iter().map(|x| x * 5.0).collect::<Vec<_>>();
        let noise = sample_gumbel_noise(&mut rng, v);
        let tau = rng.gen_range(0.05..5.0);
        let p = gumbel_code_probs(&logits, &noise, tau).expect("finite inputs");
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    checks.push(Check::new("gumbel normalization", worst <= 1e-9, format!("max |sum - 1| = {worst:.2e}")));

    let p = gumbel_code_probs(&[0.4, 1.3, -0.2, 1.1], &[0.1, 0.0, 0.3, -0.05], 1e-4).expect("finite");
    let err = (p[1] - 1.0).abs();
    checks.push(Check::new("gumbel low-temperature one-hot", err <= 1e-3, format!("|p_argmax - 1| = {err:.2e}")));

    let mut bounds_ok = true;
    for (g, v) in [(1, 2), (2, 4), (2, 320), (3, 7)] {
        let bound = -(v as f64).ln() / v as f64;
        let uniform = diversity_loss(&vec![1.0 / v as f64; g * v], g, v).expect("valid");
        let mut one_hot = vec![0.0; g * v];
        for gi in 0..g {
            one_hot[gi * v] = 1.0;
        }
        let peaked = diversity_loss(&one_hot, g, v).expect("valid");
        let random = diversity_loss(&random_rows(&mut rng, g, v), g, v).expect("valid");
        bounds_ok &= (uniform - bound).abs() < 1e-12 && peaked == 0.0 && random >= bound - 1e-12 && random <= 0.0;
    }
    checks.push(Check::new("diversity bounds", bounds_ok, "uniform hits -ln(V)/V, one-hot hits 0".into()));

    let empty = contrastive_loss(&[0.3, -1.0, 2.0], &[1.0, 1.0, 1.0], &[], 0.1).expect("nonzero");
    let c = [1.0, 0.0, 0.0];
    let k = 6;
    let cands: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            vec![1.0, angle.cos(), angle.sin()]
        })
        .collect();
    let sym = contrastive_loss(&c, &cands[0], &cands[1..], 0.5).expect("nonzero");
    let ok = empty == 0.0 && (sym - (k as f64).ln()).abs() < 1e-12;
    checks.push(Check::new("contrastive edge cases", ok, format!("empty = {empty}, symmetric = {sym:.12} vs ln {k}")));

    let mut worst = 0.0f64;
    for _ in 0..GRADIENT_POINTS {
        let dim = rng.gen_range(2..16);
        let distractors = rng.gen_range(1..10);
        let tau = rng.gen_range(0.1..2.0);
        let c = random_vec(&mut rng, dim);
        let q = random_vec(&mut rng, dim);
        let d: Vec<Vec<f64>> = (0..distractors).map(|_| random_vec(&mut rng, dim)).collect();
        let (_, analytic) = contrastive_loss_and_grad(&c, &q, &d, tau).expect("nonzero vectors");
        let numeric = central_difference(|x| contrastive_loss(x, &q, &d, tau).expect("nonzero"), &c);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    checks.push(Check::new(
        "contrastive gradient",
        worst < GRADIENT_TOLERANCE,
        format!("max relative error {worst:.2e} over {GRADIENT_POINTS} points"),
    ));

    let mut worst = 0.0f64;
    for _ in 0..GRADIENT_POINTS {
        let g = rng.gen_range(1..4);
        let v = rng.gen_range(2..12);
        let p = random_rows(&mut rng, g, v);
        let analytic = diversity_loss_grad(&p, g, v).expect("interior point");
        // finite differences on the unnormalized expression
        let f = |x: &[f64]| x.iter().map(|p| p * p.ln()).sum::<f64>() / (g * v) as f64;
        let numeric = central_difference(f, &p);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    checks.push(Check::new(
        "diversity gradient",
        worst < GRADIENT_TOLERANCE,
        format!("max relative error {worst:.2e} over {GRADIENT_POINTS} points"),
    ));

    let mut mismatches = 0;
    let mut instances = 0;
    for g in 1..=3 {
        for v in 2..=8 {
            for _ in 0..5 {
                instances += 1;
                let e_dim = rng.gen_range(1..4);
                let input_dim = rng.gen_range(1..5);
                let output_dim = rng.gen_range(1..5);
                let codebook = Codebook::random(&mut rng, g, v, e_dim, output_dim).expect("shape");
                let map = LogitMap {
                    input_dim,
                    weights: random_vec(&mut rng, g * v * input_dim),
                };
                let z = random_vec(&mut rng, input_dim);
                let noise = sample_gumbel_noise(&mut rng, g * v);
                let out = quantize(&z, &map, &codebook, GumbelConfig { temperature: 1.0 }, &noise, true).expect("finite");
                let logits = map.logits(&z).expect("shape");
                let mut expected = Vec::new();
                for gi in 0..g {
                    let mut best = 0;
                    for vi in 1..v {
                        let i = gi * v + vi;
                        if logits[i] + noise[i] > logits[gi * v + best] + noise[gi * v + best] {
                            best = vi;
                        }
                    }
                    expected.extend_from_slice(codebook.entry(gi, best));
                }
                if codebook.project(&expected) != out.q {
                    mismatches += 1;
                }
            }
        }
    }
    checks.push(Check::new(
        "hard quantization vs per-group argmax",
        mismatches == 0,
        format!("{mismatches} mismatches over {instances} instances"),
    ));

    checks
}
