use std::collections::BTreeMap;

use layerprobe::audio::load_audio;
use layerprobe::embedding::synthetic::{SAMPLE_RATE_HZ, WINDOW};
use layerprobe::embedding::SyntheticAdapter;
use layerprobe::manifest::{load_manifest, Label};
use layerprobe::synth::{class_axis, generate_corpus, SynthParams, BASE_AMPLITUDE, SPEAKER_STD};

/// Mean bin amplitude of each speaker projected on the class axis, in units
/// of the speaker std and relative to the shared base.
fn speaker_scores(separation: f64, seed: u64) -> Vec<(Label, f64)> {
    let dir = tempfile::tempdir().unwrap();
    let params = SynthParams { n_speakers: 40, samples_per_speaker: 2, separation, seed, duration_s: 0.25 };
    generate_corpus(dir.path(), &params).unwrap();
    let manifest = load_manifest(&dir.path().join("manifest.toml")).unwrap();
    let meter = SyntheticAdapter::new("meter", 0, 1, 1);
    let axis = class_axis();
    let mut per_speaker: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for rec in &manifest.recordings {
        let wave = load_audio(&manifest.audio_path(rec), SAMPLE_RATE_HZ).unwrap();
        let windows = wave.len() / WINDOW;
        let mut score = 0.0;
        for w in 0..windows {
            let mags = meter.bin_magnitudes(&wave[w * WINDOW..(w + 1) * WINDOW]);
            score += mags.iter().zip(&axis).map(|(m, a)| (m - BASE_AMPLITUDE) * a).sum::<f64>();
        }
        per_speaker.entry(rec.speaker.clone()).or_default().push(score / windows as f64 / SPEAKER_STD);
    }
    manifest
        .speakers
        .iter()
        .map(|s| {
            let scores = &per_speaker[&s.id];
            (s.label, scores.iter().sum::<f64>() / scores.len() as f64)
        })
        .collect()
}

fn class_mean(scores: &[(Label, f64)], label: Label) -> f64 {
    let picked: Vec<f64> = scores.iter().filter(|(l, _)| *l == label).map(|(_, s)| *s).collect();
    picked.iter().sum::<f64>() / picked.len() as f64
}

#[test]
fn class_means_are_separation_apart() {
    for separation in [0.0, 2.0, 4.0] {
        let scores = speaker_scores(separation, 5);
        let gap = class_mean(&scores, Label::Pathological) - class_mean(&scores, Label::Healthy);
        // the stratified axis coordinate pins each class mean closely
        assert!((gap - separation).abs() < 0.3, "separation {separation}: measured {gap}");
    }
}

#[test]
fn speakers_fall_on_their_class_side() {
    let scores = speaker_scores(4.0, 9);
    let correct = scores
        .iter()
        .filter(|(label, s)| (*s > 0.0) == (*label == Label::Pathological))
        .count();
    // nominal per-speaker rate is Phi(2) = 0.977
    assert!(correct >= 36, "{correct} of 40 speakers on their class side");
}
