//! Speaker-disjoint, class-stratified k-fold partitions.
//!
//! Speakers of each class are shuffled with the plan seed and dealt
//! round-robin onto the k test sets; the deal continues across classes so the
//! first `n mod k` folds receive the extra speakers. Fold `i` validates on the
//! test set of fold `i + 1 (mod k)` and trains on everything else.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{Label, Manifest, Recording};

#[derive(Debug, Error)]
pub enum FoldError {
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("{speakers} speakers cannot fill {k} folds")]
    TooFewSpeakers { speakers: usize, k: usize },
    #[error("fold references speaker '{0}' absent from the manifest")]
    UnknownSpeaker(String),
    #[error("malformed fold plan: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train_speakers: BTreeSet<String>,
    pub val_speakers: BTreeSet<String>,
    pub test_speakers: BTreeSet<String>,
}

impl Fold {
    pub fn speakers(&self, role: Role) -> &BTreeSet<String> {
        match role {
            Role::Train => &self.train_speakers,
            Role::Val => &self.val_speakers,
            Role::Test => &self.test_speakers,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        self.train_speakers.is_disjoint(&self.val_speakers)
            && self.train_speakers.is_disjoint(&self.test_speakers)
            && self.val_speakers.is_disjoint(&self.test_speakers)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("fold plan serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, FoldError> {
        let plan: FoldPlan = toml::from_str(text).map_err(|e| FoldError::Malformed(e.to_string()))?;
        if plan.folds.len() != plan.k {
            return Err(FoldError::Malformed(format!(
                "k = {} but {} folds listed",
                plan.k,
                plan.folds.len()
            )));
        }
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<(), FoldError> {
        crate::util::write_atomic(path, self.to_toml().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FoldError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

pub fn make_folds(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldPlan, FoldError> {
    if k < 2 {
        return Err(FoldError::InvalidK(k));
    }
    let n = manifest.speakers.len();
    if n < k {
        return Err(FoldError::TooFewSpeakers { speakers: n, k });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_sets = vec![BTreeSet::new(); k];
    let mut position = 0usize;
    for label in Label::ALL {
        let mut ids: Vec<&str> = manifest
            .speakers
            .iter()
            .filter(|s| s.label == label)
            .map(|s| s.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        for id in ids {
            test_sets[position % k].insert(id.to_string());
            position += 1;
        }
    }

    let folds = (0..k)
        .map(|i| {
            let test = test_sets[i].clone();
            let val = test_sets[(i + 1) % k].clone();
            let train = manifest
                .speakers
                .iter()
                .map(|s| &s.id)
                .filter(|id| !test.contains(*id) && !val.contains(*id))
                .cloned()
                .collect();
            Fold {
                train_speakers: train,
                val_speakers: val,
                test_speakers: test,
            }
        })
        .collect();
    Ok(FoldPlan { k, seed, folds })
}

/// Recordings whose speaker plays `role` in `fold`, sorted by recording id.
pub fn recordings_for<'m>(
    fold: &Fold,
    role: Role,
    manifest: &'m Manifest,
) -> Result<Vec<&'m Recording>, FoldError> {
    let speakers = fold.speakers(role);
    let known: HashSet<&str> = manifest.speakers.iter().map(|s| s.id.as_str()).collect();
    if let Some(missing) = speakers.iter().find(|id| !known.contains(id.as_str())) {
        return Err(FoldError::UnknownSpeaker(missing.clone()));
    }
    let mut out: Vec<&Recording> = manifest
        .recordings
        .iter()
        .filter(|r| speakers.contains(&r.speaker))
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{Sex, Speaker, Task};

    fn corpus(healthy: usize, pathological: usize, recs_per_speaker: usize) -> Manifest {
        let mut speakers = Vec::new();
        let mut recordings = Vec::new();
        for i in 0..healthy + pathological {
            let id = format!("spk{i:03}");
            speakers.push(Speaker {
                id: id.clone(),
                label: if i < healthy { Label::Healthy } else { Label::Pathological },
                sex: Sex::Unspecified,
                age: None,
            });
            for r in 0..recs_per_speaker {
                recordings.push(Recording {
                    id: format!("{id}-{r:02}"),
                    speaker: id.clone(),
                    task: if r + 1 == recs_per_speaker { Task::ReadSpeech } else { Task::Sentence },
                    path: format!("{id}-{r:02}.wav").into(),
                    sample_rate_hz: 16_000,
                    duration_s: 1.0,
                });
            }
        }
        Manifest::new("t", speakers, recordings, ".").unwrap()
    }

    #[test]
    fn pc_gita_sizes() {
        let m = corpus(50, 50, 1);
        let plan = make_folds(&m, 10, 3).unwrap();
        for f in &plan.folds {
            assert_eq!(
                (f.train_speakers.len(), f.val_speakers.len(), f.test_speakers.len()),
                (80, 10, 10)
            );
        }
    }

    #[test]
    fn ten_speakers_ten_folds() {
        let m = corpus(5, 5, 1);
        let plan = make_folds(&m, 10, 0).unwrap();
        for (i, f) in plan.folds.iter().enumerate() {
            assert_eq!((f.train_speakers.len(), f.val_speakers.len(), f.test_speakers.len()), (8, 1, 1));
            assert_eq!(f.val_speakers, plan.folds[(i + 1) % 10].test_speakers);
        }
    }

    #[test]
    fn too_few_speakers() {
        let m = corpus(3, 2, 1);
        assert!(matches!(make_folds(&m, 10, 0), Err(FoldError::TooFewSpeakers { speakers: 5, k: 10 })));
        assert!(matches!(make_folds(&m, 1, 0), Err(FoldError::InvalidK(1))));
    }

    #[test]
    fn remainder_goes_to_earliest_folds() {
        let m = corpus(6, 5, 1);
        let plan = make_folds(&m, 4, 9).unwrap();
        let sizes: Vec<usize> = plan.folds.iter().map(|f| f.test_speakers.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 2]);
    }

    #[test]
    fn recordings_for_roles() {
        let m = corpus(5, 5, 11);
        let plan = make_folds(&m, 5, 1).unwrap();
        let fold = &plan.folds[0];
        let test = recordings_for(fold, Role::Test, &m).unwrap();
        assert_eq!(fold.test_speakers.len(), 2);
        assert_eq!(test.len(), 22);
        assert!(test.windows(2).all(|w| w[0].id < w[1].id));

        let empty = Fold {
            train_speakers: BTreeSet::new(),
            val_speakers: BTreeSet::new(),
            test_speakers: BTreeSet::new(),
        };
        assert!(recordings_for(&empty, Role::Test, &m).unwrap().is_empty());

        let mut bad = fold.clone();
        bad.test_speakers.insert("nobody".into());
        assert!(matches!(recordings_for(&bad, Role::Test, &m), Err(FoldError::UnknownSpeaker(_))));
    }

    #[test]
    fn single_speaker_all_recordings() {
        let m = corpus(2, 1, 3);
        let fold = Fold {
            train_speakers: BTreeSet::new(),
            val_speakers: BTreeSet::new(),
            test_speakers: ["spk000".to_string()].into(),
        };
        assert_eq!(recordings_for(&fold, Role::Test, &m).unwrap().len(), 3);
    }

    #[test]
    fn plan_round_trips_through_toml() {
        let m = corpus(4, 4, 1);
        let plan = make_folds(&m, 4, 77).unwrap();
        assert_eq!(FoldPlan::from_toml(&plan.to_toml()).unwrap(), plan);
    }

    proptest::proptest! {
        #[test]
        fn fold_invariants(healthy in 1usize..30, pathological in 1usize..30, k in 2usize..8, seed: u64) {
            let n = healthy + pathological;
            proptest::prop_assume!(n >= k);
            let m = corpus(healthy, pathological, 1);
            let plan = make_folds(&m, k, seed).unwrap();
            proptest::prop_assert_eq!(plan.folds.len(), k);
            let labels = m.speaker_labels();
            let mut tested = BTreeSet::new();
            for f in &plan.folds {
                proptest::prop_assert!(f.is_disjoint());
                proptest::prop_assert_eq!(f.train_speakers.len() + f.val_speakers.len() + f.test_speakers.len(), n);
                for id in &f.test_speakers {
                    proptest::prop_assert!(tested.insert(id.clone()), "speaker tested twice");
                }
                // test and val each deviate by less than one speaker per class;
                // train is the complement of both, so its deviation is below two
                for (role, share, tolerance) in [(Role::Test, 1.0, 1.0), (Role::Val, 1.0, 1.0), (Role::Train, (k - 2) as f64, 2.0)] {
                    for (label, total) in [(Label::Healthy, healthy), (Label::Pathological, pathological)] {
                        let count = f.speakers(role).iter().filter(|id| labels[id.as_str()] == label).count();
                        let proportional = share * total as f64 / k as f64;
                        proptest::prop_assert!((count as f64 - proportional).abs() < tolerance);
                    }
                }
            }
            proptest::prop_assert_eq!(tested.len(), n);
            proptest::prop_assert_eq!(make_folds(&m, k, seed).unwrap(), plan);
        }
    }
}
