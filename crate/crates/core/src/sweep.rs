//! Extraction into the cache and the (layer, fold) probing sweep.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::audio::load_recording;
use crate::embedding::{cache_get, cache_put, extract, pool, CacheError, EmbeddingKind, ModelAdapter, PooledEmbedding};
use crate::eval::{table_from_predictions, AggregationMode, EvalError, LayerAccuracyTable, PredictionRecord};
use crate::folds::{recordings_for, FoldError, FoldPlan, Role};
use crate::manifest::{Manifest, Recording};
use crate::probe::{train, LabeledSample, ProbeModel, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("layer {layer} outside 1..={num_layers}")]
    InvalidLayer { layer: usize, num_layers: usize },
    #[error("{} of {total} recordings failed to extract; first: {}: {}", failures.len(), failures[0].0, failures[0].1)]
    Extraction {
        total: usize,
        failures: Vec<(String, String)>,
    },
    #[error("layer {layer}, fold {fold}: {source}")]
    Fold {
        layer: usize,
        fold: usize,
        #[source]
        source: FoldError,
    },
    #[error("layer {layer}, fold {fold}: speaker {speaker} is in both training and test")]
    Leakage { layer: usize, fold: usize, speaker: String },
    #[error("layer {layer}, fold {fold}: {source}")]
    Train {
        layer: usize,
        fold: usize,
        #[source]
        source: TrainError,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractReport {
    pub total: usize,
    pub cache_hits: usize,
    pub extracted: usize,
    pub failures: Vec<(String, String)>,
}

impl ExtractReport {
    pub fn hit_rate(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.cache_hits as f64 / self.total as f64
        }
    }
}

fn cached_pooled(recording: &Recording, adapter: &dyn ModelAdapter, cache_dir: &Path) -> Option<PooledEmbedding> {
    match cache_get(&recording.id, adapter.model_id(), EmbeddingKind::Pooled, cache_dir) {
        Ok(e) => e
            .into_pooled()
            .filter(|p| p.num_layers == adapter.num_layers() && p.hidden_dim == adapter.hidden_dim()),
        // a corrupt or unreadable entry is rebuilt like a missing one
        Err(CacheError::NotCached | CacheError::CacheCorrupt { .. } | CacheError::Io { .. }) => None,
    }
}

fn build_pooled(
    manifest: &Manifest,
    recording: &Recording,
    adapter: &dyn ModelAdapter,
    cache_dir: &Path,
) -> Result<PooledEmbedding, String> {
    let waveform = load_recording(manifest, recording, adapter.required_rate_hz()).map_err(|e| e.to_string())?;
    let raw = extract(&recording.id, &waveform, adapter).map_err(|e| e.to_string())?;
    let pooled = pool(&raw).map_err(|e| e.to_string())?;
    cache_put(&raw.into(), cache_dir).map_err(|e| e.to_string())?;
    cache_put(&pooled.clone().into(), cache_dir).map_err(|e| e.to_string())?;
    Ok(pooled)
}

/// Makes sure every recording has a pooled embedding in the cache, extracting
/// what is missing (or everything, with `force`). Failures are collected
/// rather than aborting the run.
pub fn ensure_pooled(
    manifest: &Manifest,
    adapter: &dyn ModelAdapter,
    cache_dir: &Path,
    force: bool,
) -> (HashMap<String, PooledEmbedding>, ExtractReport) {
    let work = |recording: &Recording| {
        if !force {
            if let Some(p) = cached_pooled(recording, adapter, cache_dir) {
                return (recording.id.clone(), Ok((p, true)));
            }
        }
        let built = build_pooled(manifest, recording, adapter, cache_dir).map(|p| (p, false));
        (recording.id.clone(), built)
    };
    let results: Vec<_> = if adapter.shareable() {
        manifest.recordings.par_iter().map(work).collect()
    } else {
        manifest.recordings.iter().map(work).collect()
    };

    let mut report = ExtractReport {
        total: results.len(),
        ..ExtractReport::default()
    };
    let mut pooled = HashMap::with_capacity(results.len());
    for (id, result) in results {
        match result {
            Ok((p, hit)) => {
                if hit {
                    report.cache_hits += 1;
                } else {
                    report.extracted += 1;
                }
                pooled.insert(id, p);
            }
            Err(message) => report.failures.push((id, message)),
        }
    }
    (pooled, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepJob {
    pub layer: usize,
    pub fold: usize,
}

/// Jobs in layer-major order.
pub fn plan_jobs(layers: &[usize], plan: &FoldPlan) -> Vec<SweepJob> {
    layers
        .iter()
        .flat_map(|&layer| (0..plan.folds.len()).map(move |fold| SweepJob { layer, fold }))
        .collect()
}

/// Training seed for one job, so that every probe has its own stream.
pub fn job_seed(base: u64, job: SweepJob) -> u64 {
    base.wrapping_add(((job.layer as u64) << 32) | job.fold as u64)
}

#[derive(Debug, Clone)]
pub struct JobResult {
    pub job: SweepJob,
    pub probe: ProbeModel,
    pub history: TrainHistory,
    pub predictions: Vec<PredictionRecord>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub table: LayerAccuracyTable,
    pub jobs: Vec<JobResult>,
    pub extraction: ExtractReport,
}

impl SweepOutcome {
    pub fn predictions(&self) -> impl Iterator<Item = &PredictionRecord> {
        self.jobs.iter().flat_map(|j| j.predictions.iter())
    }
}

fn run_job(
    job: SweepJob,
    manifest: &Manifest,
    plan: &FoldPlan,
    pooled: &HashMap<String, PooledEmbedding>,
    model_id: &str,
    config: &TrainConfig,
) -> Result<JobResult, SweepError> {
    let SweepJob { layer, fold } = job;
    let f = &plan.folds[fold];
    if let Some(speaker) = f.train_speakers.iter().chain(&f.val_speakers).find(|s| f.test_speakers.contains(*s)) {
        return Err(SweepError::Leakage {
            layer,
            fold,
            speaker: speaker.clone(),
        });
    }
    let labels = manifest.speaker_labels();
    let samples = |role: Role| -> Result<Vec<(&Recording, LabeledSample<'_>)>, SweepError> {
        let recs = recordings_for(f, role, manifest).map_err(|source| SweepError::Fold { layer, fold, source })?;
        Ok(recs
            .into_iter()
            .map(|r| {
                let sample = LabeledSample {
                    features: pooled[&r.id].layer(layer),
                    label: labels[r.speaker.as_str()],
                };
                (r, sample)
            })
            .collect())
    };
    let train_set: Vec<_> = samples(Role::Train)?.into_iter().map(|(_, s)| s).collect();
    let val_set: Vec<_> = samples(Role::Val)?.into_iter().map(|(_, s)| s).collect();
    let test_set = samples(Role::Test)?;

    let config = TrainConfig {
        seed: job_seed(config.seed, job),
        ..config.clone()
    };
    let train_err = |source| SweepError::Train { layer, fold, source };
    let (probe, history) = train(layer, model_id, &train_set, &val_set, &config).map_err(train_err)?;
    let mut predictions = Vec::with_capacity(test_set.len());
    for (r, s) in test_set {
        predictions.push(PredictionRecord {
            recording_id: r.id.clone(),
            speaker_id: r.speaker.clone(),
            probs: probe.predict(s.features).map_err(train_err)?,
            true_label: s.label,
            layer_index: layer,
            model_id: model_id.to_string(),
            fold_index: fold,
        });
    }
    Ok(JobResult {
        job,
        probe,
        history,
        predictions,
    })
}

/// Trains and evaluates one probe per (layer, fold) and aggregates the
/// speaker-level votes into a table. Embeddings come from the cache when
/// present and are extracted otherwise.
pub fn run_layer_sweep(
    manifest: &Manifest,
    plan: &FoldPlan,
    adapter: &dyn ModelAdapter,
    train_config: &TrainConfig,
    layers: &[usize],
    cache_dir: &Path,
    mode: AggregationMode,
) -> Result<SweepOutcome, SweepError> {
    let num_layers = adapter.num_layers();
    if let Some(&layer) = layers.iter().find(|&&l| l == 0 || l > num_layers) {
        return Err(SweepError::InvalidLayer { layer, num_layers });
    }
    if layers.is_empty() {
        return Ok(SweepOutcome {
            table: LayerAccuracyTable::new(mode),
            jobs: Vec::new(),
            extraction: ExtractReport::default(),
        });
    }
    let (pooled, extraction) = ensure_pooled(manifest, adapter, cache_dir, false);
    if !extraction.failures.is_empty() {
        return Err(SweepError::Extraction {
            total: extraction.total,
            failures: extraction.failures,
        });
    }

    let jobs = plan_jobs(layers, plan);
    let model_id = adapter.model_id();
    let results: Vec<JobResult> = jobs
        .par_iter()
        .map(|&job| run_job(job, manifest, plan, &pooled, model_id, train_config))
        .collect::<Result<_, _>>()?;

    let predictions: Vec<PredictionRecord> = results.iter().flat_map(|r| r.predictions.iter().cloned()).collect();
    let table = table_from_predictions(&predictions, mode)?;
    Ok(SweepOutcome {
        table,
        jobs: results,
        extraction,
    })
}
