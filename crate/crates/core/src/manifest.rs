//! Corpus description: speakers, their class labels and their recordings.
//!
//! Manifests are TOML documents. Audio paths inside a manifest are relative to
//! the directory holding the manifest file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest not found: {0}")]
    MissingFile(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {message}")]
    MalformedDocument { path: PathBuf, message: String },
    #[error("manifest integrity violated:\n  {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\n  "))]
    IntegrityViolation(Vec<Violation>),
}

/// A single broken manifest invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateSpeaker(String),
    DuplicateRecording(String),
    UnknownSpeaker { recording: String, speaker: String },
    SpeakerWithoutRecordings(String),
    NonPositiveSampleRate(String),
    NonPositiveDuration(String),
    NonPositiveAge(String),
    MissingAudio { recording: String, path: PathBuf },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateSpeaker(id) => write!(f, "duplicate speaker id '{id}'"),
            Violation::DuplicateRecording(id) => write!(f, "duplicate recording id '{id}'"),
            Violation::UnknownSpeaker { recording, speaker } => {
                write!(f, "recording '{recording}' references unknown speaker '{speaker}'")
            }
            Violation::SpeakerWithoutRecordings(id) => {
                write!(f, "speaker '{id}' has no recordings")
            }
            Violation::NonPositiveSampleRate(id) => {
                write!(f, "recording '{id}' has a non-positive sample rate")
            }
            Violation::NonPositiveDuration(id) => {
                write!(f, "recording '{id}' has a non-positive duration")
            }
            Violation::NonPositiveAge(id) => write!(f, "speaker '{id}' has a non-positive age"),
            Violation::MissingAudio { recording, path } => {
                write!(f, "recording '{recording}': audio file {} not found", path.display())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    Healthy,
    Pathological,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Healthy, Label::Pathological];

    /// Class index used by probes: HEALTHY = 0, PATHOLOGICAL = 1.
    pub fn index(self) -> usize {
        match self {
            Label::Healthy => 0,
            Label::Pathological => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Label> {
        Label::ALL.get(index).copied()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Healthy => "HEALTHY",
            Label::Pathological => "PATHOLOGICAL",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Sex {
    M,
    F,
    #[default]
    Unspecified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Task {
    Sentence,
    ReadSpeech,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Speaker {
    pub id: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "is_unspecified")]
    pub sex: Sex,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
}

fn is_unspecified(sex: &Sex) -> bool {
    *sex == Sex::Unspecified
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recording {
    pub id: String,
    pub speaker: String,
    pub task: Task,
    pub path: PathBuf,
    pub sample_rate_hz: u32,
    pub duration_s: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDocument {
    corpus_name: String,
    schema_version: u32,
    #[serde(default)]
    speakers: Vec<Speaker>,
    #[serde(default)]
    recordings: Vec<Recording>,
}

/// A validated corpus description. Immutable once loaded.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub corpus_name: String,
    pub speakers: Vec<Speaker>,
    pub recordings: Vec<Recording>,
    root: PathBuf,
}

impl PartialEq for Manifest {
    // The root directory is where the document lives, not part of its value.
    fn eq(&self, other: &Self) -> bool {
        self.corpus_name == other.corpus_name
            && self.speakers == other.speakers
            && self.recordings == other.recordings
    }
}

impl Manifest {
    /// Builds a manifest and checks every invariant. `root` is the directory
    /// relative audio paths resolve against.
    pub fn new(
        corpus_name: impl Into<String>,
        speakers: Vec<Speaker>,
        recordings: Vec<Recording>,
        root: impl Into<PathBuf>,
    ) -> Result<Self, ManifestError> {
        let manifest = Manifest {
            corpus_name: corpus_name.into(),
            speakers,
            recordings,
            root: root.into(),
        };
        let violations = manifest.violations();
        if violations.is_empty() {
            Ok(manifest)
        } else {
            Err(ManifestError::IntegrityViolation(violations))
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn speaker(&self, id: &str) -> Option<&Speaker> {
        self.speakers.iter().find(|s| s.id == id)
    }

    pub fn speaker_labels(&self) -> HashMap<&str, Label> {
        self.speakers.iter().map(|s| (s.id.as_str(), s.label)).collect()
    }

    pub fn audio_path(&self, recording: &Recording) -> PathBuf {
        self.root.join(&recording.path)
    }

    /// Every broken invariant, in document order.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut speaker_ids = HashSet::new();
        for s in &self.speakers {
            if !speaker_ids.insert(s.id.as_str()) {
                out.push(Violation::DuplicateSpeaker(s.id.clone()));
            }
            if s.age == Some(0) {
                out.push(Violation::NonPositiveAge(s.id.clone()));
            }
        }
        let mut recording_ids = HashSet::new();
        let mut with_recordings = HashSet::new();
        for r in &self.recordings {
            if !recording_ids.insert(r.id.as_str()) {
                out.push(Violation::DuplicateRecording(r.id.clone()));
            }
            if speaker_ids.contains(r.speaker.as_str()) {
                with_recordings.insert(r.speaker.as_str());
            } else {
                out.push(Violation::UnknownSpeaker {
                    recording: r.id.clone(),
                    speaker: r.speaker.clone(),
                });
            }
            if r.sample_rate_hz == 0 {
                out.push(Violation::NonPositiveSampleRate(r.id.clone()));
            }
            if !(r.duration_s > 0.0 && r.duration_s.is_finite()) {
                out.push(Violation::NonPositiveDuration(r.id.clone()));
            }
        }
        let mut reported = HashSet::new();
        for s in &self.speakers {
            if !with_recordings.contains(s.id.as_str()) && reported.insert(s.id.as_str()) {
                out.push(Violation::SpeakerWithoutRecordings(s.id.clone()));
            }
        }
        out
    }

    /// Audio files referenced by the manifest that do not exist on disk.
    pub fn missing_audio(&self) -> Vec<Violation> {
        self.recordings
            .iter()
            .filter_map(|r| {
                let path = self.audio_path(r);
                (!path.is_file()).then(|| Violation::MissingAudio {
                    recording: r.id.clone(),
                    path,
                })
            })
            .collect()
    }

    pub fn to_toml(&self) -> String {
        let doc = ManifestDocument {
            corpus_name: self.corpus_name.clone(),
            schema_version: SCHEMA_VERSION,
            speakers: self.speakers.clone(),
            recordings: self.recordings.clone(),
        };
        toml::to_string(&doc).expect("manifest serializes")
    }
}

/// Parses a manifest document without touching the filesystem.
pub fn parse_manifest(text: &str, root: &Path) -> Result<Manifest, ManifestError> {
    let source = root.to_path_buf();
    let doc: ManifestDocument =
        toml::from_str(text).map_err(|e| ManifestError::MalformedDocument {
            path: source.clone(),
            message: e.to_string(),
        })?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(ManifestError::MalformedDocument {
            path: source,
            message: format!(
                "field `schema_version`: expected {SCHEMA_VERSION}, found {}",
                doc.schema_version
            ),
        });
    }
    Manifest::new(doc.corpus_name, doc.speakers, doc.recordings, root)
}

pub fn load_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    if !path.is_file() {
        return Err(ManifestError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    parse_manifest(&text, &root).map_err(|e| match e {
        ManifestError::MalformedDocument { message, .. } => ManifestError::MalformedDocument {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> std::io::Result<()> {
    crate::util::write_atomic(path, manifest.to_toml().as_bytes())
}

/// Speakers per class. Both classes are always present in the map.
pub fn class_balance(manifest: &Manifest) -> BTreeMap<Label, usize> {
    let mut counts: BTreeMap<Label, usize> = Label::ALL.iter().map(|&l| (l, 0)).collect();
    for s in &manifest.speakers {
        *counts.entry(s.label).or_default() += 1;
    }
    counts
}
