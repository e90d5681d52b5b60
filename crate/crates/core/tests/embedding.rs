use layerprobe::embedding::{
    cache_get, cache_put, extract, pool, CacheError, Embedding, EmbeddingKind, LayerEmbeddings, ModelAdapter,
    SyntheticAdapter,
};
use layerprobe::embedding::synthetic::{BINS, FEATURE_SCALE, JITTER, SAMPLE_RATE_HZ, WINDOW};
use proptest::prelude::*;

fn tensor() -> impl Strategy<Value = LayerEmbeddings> {
    (1usize..5, 1usize..9, 1usize..40).prop_flat_map(|(l, d, t)| {
        proptest::collection::vec(-100f32..100.0, l * d * t)
            .prop_map(move |data| LayerEmbeddings::new("rec", "model", l, d, t, data))
    })
}

proptest! {
    #[test]
    fn pool_matches_two_pass_statistics(e in tensor()) {
        let pooled = pool(&e).unwrap();
        for l in 0..e.num_layers {
            let row = pooled.layer(l + 1);
            for d in 0..e.hidden_dim {
                let series: Vec<f64> = e.series(l, d).iter().map(|&v| f64::from(v)).collect();
                let mean = series.iter().sum::<f64>() / series.len() as f64;
                let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / series.len() as f64;
                prop_assert!((f64::from(row[d]) - mean).abs() <= 1e-4);
                prop_assert!((f64::from(row[e.hidden_dim + d]) - var.sqrt()).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn cache_round_trips_both_kinds(e in tensor()) {
        let dir = tempfile::tempdir().unwrap();
        let pooled = pool(&e).unwrap();
        for item in [Embedding::Raw(e.clone()), Embedding::Pooled(pooled)] {
            cache_put(&item, dir.path()).unwrap();
            let back = cache_get(item.recording_id(), item.model_id(), item.kind(), dir.path()).unwrap();
            prop_assert_eq!(back, item);
        }
    }
}

#[test]
fn cache_miss_and_kind_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let e = LayerEmbeddings::new("r", "m", 1, 2, 3, vec![1.0; 6]);
    assert!(matches!(cache_get("r", "m", EmbeddingKind::Raw, dir.path()), Err(CacheError::NotCached)));
    cache_put(&Embedding::Raw(e), dir.path()).unwrap();
    assert!(matches!(cache_get("r", "m", EmbeddingKind::Pooled, dir.path()), Err(CacheError::NotCached)));
}

/// Sum of on-bin sinusoids sharing one phase, so magnitudes add linearly.
fn tones(amps: &[f64; 8], samples: usize) -> Vec<f32> {
    (0..samples)
        .map(|n| {
            BINS.iter()
                .zip(amps)
                .map(|(&k, a)| a * (2.0 * std::f64::consts::PI * (k * n) as f64 / WINDOW as f64 + 0.4).sin())
                .sum::<f64>() as f32
        })
        .collect()
}

fn mean_features(adapter: &SyntheticAdapter, amps: &[f64; 8]) -> Vec<f64> {
    let e = extract("r", &tones(amps, SAMPLE_RATE_HZ as usize / 4), adapter).unwrap();
    pool(&e).unwrap().data.iter().map(|&v| f64::from(v)).collect()
}

#[test]
fn synthetic_adapter_is_affine_in_bin_amplitudes() {
    let adapter = SyntheticAdapter::new("syn", 3, 4, 16);
    let a = [0.05, 0.02, 0.07, 0.01, 0.04, 0.03, 0.06, 0.02];
    let b = [0.01, 0.06, 0.02, 0.05, 0.03, 0.07, 0.01, 0.04];
    let sum: [f64; 8] = std::array::from_fn(|i| a[i] + b[i]);
    let (fa, fb, fs) = (mean_features(&adapter, &a), mean_features(&adapter, &b), mean_features(&adapter, &sum));
    let d = adapter.hidden_dim();
    for l in 0..adapter.num_layers() {
        for i in 0..d {
            let idx = l * 2 * d + i;
            // three jitters of at most JITTER each, plus float rounding
            assert!((fa[idx] + fb[idx] - fs[idx]).abs() <= 3.0 * JITTER + 1e-4, "layer {l} unit {i}");
        }
    }
}

#[test]
fn synthetic_adapter_layers_are_scaled_isometries() {
    let adapter = SyntheticAdapter::new("syn", 11, 3, 64);
    let a = [0.06; 8];
    let mut b = a;
    b[2] += 0.02;
    b[5] -= 0.01;
    let (fa, fb) = (mean_features(&adapter, &a), mean_features(&adapter, &b));
    let d = adapter.hidden_dim();
    let input_dist = (0.02f64.powi(2) + 0.01f64.powi(2)).sqrt();
    let expected = FEATURE_SCALE * (d as f64 / 3.0).sqrt() * input_dist;
    for l in 0..adapter.num_layers() {
        let dist = (0..d).map(|i| (fa[l * 2 * d + i] - fb[l * 2 * d + i]).powi(2)).sum::<f64>().sqrt();
        let slack = 2.0 * JITTER * (d as f64).sqrt();
        assert!((dist - expected).abs() <= slack, "layer {l}: {dist} vs {expected}");
    }
}

#[test]
fn synthetic_adapter_is_deterministic_per_seed() {
    let wave = tones(&[0.03; 8], 4_000);
    let run = |seed| extract("r", &wave, &SyntheticAdapter::new("syn", seed, 2, 8)).unwrap();
    assert_eq!(run(5), run(5));
    assert_ne!(run(5).data, run(6).data);
}
