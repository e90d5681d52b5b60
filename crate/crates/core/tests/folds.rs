use std::collections::BTreeSet;

use layerprobe::folds::{make_folds, Role};
use layerprobe::manifest::{Label, Manifest, Recording, Sex, Speaker, Task};
use proptest::prelude::*;

fn manifest(healthy: usize, pathological: usize) -> Manifest {
    let mut speakers = Vec::new();
    let mut recordings = Vec::new();
    for i in 0..healthy + pathological {
        let id = format!("s{i:03}");
        let label = if i < healthy { Label::Healthy } else { Label::Pathological };
        speakers.push(Speaker { id: id.clone(), label, sex: Sex::Unspecified, age: None });
        for j in 0..2 {
            recordings.push(Recording {
                id: format!("{id}_{j}"),
                speaker: id.clone(),
                task: Task::ReadSpeech,
                path: format!("{id}_{j}.wav").into(),
                sample_rate_hz: 16_000,
                duration_s: 1.0,
            });
        }
    }
    Manifest::new("props", speakers, recordings, "/").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn folds_partition_speakers(healthy in 10usize..40, pathological in 10usize..40, k in 3usize..10, seed in any::<u64>()) {
        let m = manifest(healthy, pathological);
        let plan = make_folds(&m, k, seed).unwrap();
        prop_assert_eq!(plan.folds.len(), k);
        let all: BTreeSet<String> = m.speakers.iter().map(|s| s.id.clone()).collect();
        let mut tested = BTreeSet::new();
        let labels = m.speaker_labels();
        for fold in &plan.folds {
            prop_assert!(fold.is_disjoint());
            let union: BTreeSet<String> = [Role::Train, Role::Val, Role::Test]
                .iter()
                .flat_map(|&r| fold.speakers(r).iter().cloned())
                .collect();
            prop_assert_eq!(&union, &all);
            for s in &fold.test_speakers {
                prop_assert!(tested.insert(s.clone()), "speaker tested twice");
            }
            for (count, class) in [(healthy, Label::Healthy), (pathological, Label::Pathological)] {
                let n = fold.test_speakers.iter().filter(|s| labels[s.as_str()] == class).count() as f64;
                prop_assert!((n - count as f64 / k as f64).abs() < 1.0 + 1e-9);
            }
        }
        prop_assert_eq!(tested, all);
        prop_assert_eq!(plan, make_folds(&m, k, seed).unwrap());
    }
}

#[test]
fn fold_plan_survives_toml() {
    let plan = make_folds(&manifest(12, 9), 4, 3).unwrap();
    let back = layerprobe::folds::FoldPlan::from_toml(&plan.to_toml()).unwrap();
    assert_eq!(back, plan);
}
