//! Speaker-level soft voting, accuracy and the per-layer accuracy table.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::Label;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot vote on an empty group")]
    EmptyGroup,
    #[error("records from different {0} in one voting group")]
    MixedSpeaker(&'static str),
    #[error("no votes to score")]
    EmptyInput,
    #[error("record {0} does not hold a probability distribution")]
    InvalidProbs(String),
    #[error("malformed table document: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub recording_id: String,
    pub speaker_id: String,
    pub probs: [f64; 2],
    pub true_label: Label,
    pub layer_index: usize,
    pub model_id: String,
    pub fold_index: usize,
}

impl PredictionRecord {
    fn check(&self) -> Result<(), EvalError> {
        let valid = self.probs.iter().all(|p| p.is_finite() && *p >= -1e-6 && *p <= 1.0 + 1e-6)
            && (self.probs[0] + self.probs[1] - 1.0).abs() <= 1e-6;
        if valid {
            Ok(())
        } else {
            Err(EvalError::InvalidProbs(self.recording_id.clone()))
        }
    }
}

/// Mean probability vector of one speaker's samples and its argmax.
/// Ties go to the lowest class index (HEALTHY).
pub fn soft_vote(records: &[PredictionRecord]) -> Result<([f64; 2], Label), EvalError> {
    let first = records.first().ok_or(EvalError::EmptyGroup)?;
    let mut sum = [0.0f64; 2];
    for r in records {
        if r.speaker_id != first.speaker_id {
            return Err(EvalError::MixedSpeaker("speakers"));
        }
        if r.layer_index != first.layer_index {
            return Err(EvalError::MixedSpeaker("layers"));
        }
        if r.model_id != first.model_id {
            return Err(EvalError::MixedSpeaker("models"));
        }
        r.check()?;
        sum[0] += r.probs[0];
        sum[1] += r.probs[1];
    }
    let n = records.len() as f64;
    let mean = [sum[0] / n, sum[1] / n];
    let label = if mean[1] > mean[0] { Label::Pathological } else { Label::Healthy };
    Ok((mean, label))
}

/// Fraction of `(predicted, true)` pairs that agree.
pub fn speaker_accuracy(votes: &[(Label, Label)]) -> Result<f64, EvalError> {
    if votes.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let correct = votes.iter().filter(|(p, t)| p == t).count();
    Ok(correct as f64 / votes.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AggregationMode {
    /// One accuracy over the test speakers of all folds together.
    #[default]
    PooledSpeakers,
    /// Per-fold accuracies, averaged.
    MeanOfFolds,
}

impl AggregationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMode::PooledSpeakers => "POOLED_SPEAKERS",
            AggregationMode::MeanOfFolds => "MEAN_OF_FOLDS",
        }
    }
}

/// Speaker-level accuracy per `(layer, model)`. Model columns keep the order
/// in which they were first inserted.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAccuracyTable {
    pub aggregation_mode: AggregationMode,
    models: Vec<String>,
    cells: BTreeMap<usize, BTreeMap<usize, f64>>,
}

#[derive(Serialize, Deserialize)]
struct TableRow {
    layer: usize,
    model: String,
    accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct TableDocument {
    aggregation_mode: AggregationMode,
    rows: Vec<TableRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Json,
    Markdown,
}

impl LayerAccuracyTable {
    pub fn new(aggregation_mode: AggregationMode) -> Self {
        LayerAccuracyTable {
            aggregation_mode,
            models: Vec::new(),
            cells: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, layer: usize, model: &str, accuracy: f64) {
        assert!((0.0..=1.0).contains(&accuracy), "accuracy {accuracy} outside [0, 1]");
        let column = match self.models.iter().position(|m| m == model) {
            Some(i) => i,
            None => {
                self.models.push(model.to_string());
                self.models.len() - 1
            }
        };
        self.cells.entry(layer).or_default().insert(column, accuracy);
    }

    pub fn get(&self, layer: usize, model: &str) -> Option<f64> {
        let column = self.models.iter().position(|m| m == model)?;
        self.cells.get(&layer)?.get(&column).copied()
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.cells.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// `(layer, model, accuracy)` ordered by layer, then column.
    pub fn rows(&self) -> impl Iterator<Item = (usize, &str, f64)> + '_ {
        self.cells.iter().flat_map(move |(&layer, row)| {
            row.iter().map(move |(&col, &acc)| (layer, self.models[col].as_str(), acc))
        })
    }

    /// Adds every cell of `other`; its values win on conflict.
    pub fn merge(&mut self, other: &LayerAccuracyTable) {
        for (layer, model, acc) in other.rows() {
            self.insert(layer, model, acc);
        }
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let doc: TableDocument = serde_json::from_str(text).map_err(|e| EvalError::Malformed(e.to_string()))?;
        let mut table = LayerAccuracyTable::new(doc.aggregation_mode);
        for row in doc.rows {
            if !(0.0..=1.0).contains(&row.accuracy) {
                return Err(EvalError::Malformed(format!("accuracy {} outside [0, 1]", row.accuracy)));
            }
            table.insert(row.layer, &row.model, row.accuracy);
        }
        Ok(table)
    }
}

fn percent(accuracy: f64) -> String {
    format!("{:.1}", accuracy * 100.0)
}

/// Renders one row per layer and one column per model, accuracy in percent
/// with one decimal. Output depends only on the table's contents.
pub fn render_table(table: &LayerAccuracyTable, format: TableFormat) -> String {
    let cell = |layer: usize, column: usize| {
        table.cells.get(&layer).and_then(|r| r.get(&column)).map(|&a| percent(a))
    };
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str("layer");
            for m in &table.models {
                out.push(',');
                out.push_str(&csv_field(m));
            }
            out.push('\n');
            for &layer in table.cells.keys() {
                write!(out, "{layer}").unwrap();
                for c in 0..table.models.len() {
                    out.push(',');
                    out.push_str(&cell(layer, c).unwrap_or_default());
                }
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            out.push_str("| Layer |");
            for m in &table.models {
                write!(out, " {} |", m.replace('|', "\\|")).unwrap();
            }
            out.push_str("\n|---:|");
            for _ in &table.models {
                out.push_str("---:|");
            }
            out.push('\n');
            for &layer in table.cells.keys() {
                write!(out, "| {layer} |").unwrap();
                for c in 0..table.models.len() {
                    write!(out, " {} |", cell(layer, c).unwrap_or_else(|| "-".into())).unwrap();
                }
                out.push('\n');
            }
            write!(
                out,
                "\nSpeaker-level accuracy (%), aggregation {}.\n",
                table.aggregation_mode.as_str()
            )
            .unwrap();
        }
        TableFormat::Json => {
            let doc = TableDocument {
                aggregation_mode: table.aggregation_mode,
                rows: table
                    .rows()
                    .map(|(layer, model, accuracy)| TableRow {
                        layer,
                        model: model.to_string(),
                        accuracy,
                    })
                    .collect(),
            };
            out = serde_json::to_string_pretty(&doc).expect("table serializes");
            out.push('\n');
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Re-votes a prediction dump into an accuracy table.
pub fn table_from_predictions(
    records: &[PredictionRecord],
    mode: AggregationMode,
) -> Result<LayerAccuracyTable, EvalError> {
    // model -> layer -> fold -> speaker -> records, keeping model order of first appearance
    let mut model_order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, BTreeMap<usize, BTreeMap<usize, BTreeMap<&str, Vec<PredictionRecord>>>>> =
        HashMap::new();
    for r in records {
        if !groups.contains_key(r.model_id.as_str()) {
            model_order.push(&r.model_id);
        }
        groups
            .entry(&r.model_id)
            .or_default()
            .entry(r.layer_index)
            .or_default()
            .entry(r.fold_index)
            .or_default()
            .entry(&r.speaker_id)
            .or_default()
            .push(r.clone());
    }

    let mut table = LayerAccuracyTable::new(mode);
    for model in model_order {
        for (&layer, folds) in &groups[model] {
            let mut pooled = Vec::new();
            let mut fold_accuracies = Vec::new();
            for speakers in folds.values() {
                let mut votes = Vec::with_capacity(speakers.len());
                for group in speakers.values() {
                    let (_, predicted) = soft_vote(group)?;
                    votes.push((predicted, group[0].true_label));
                }
                fold_accuracies.push(speaker_accuracy(&votes)?);
                pooled.extend(votes);
            }
            let accuracy = match mode {
                AggregationMode::PooledSpeakers => speaker_accuracy(&pooled)?,
                AggregationMode::MeanOfFolds => fold_accuracies.iter().sum::<f64>() / fold_accuracies.len() as f64,
            };
            table.insert(layer, model, accuracy);
        }
    }
    Ok(table)
}

/// Writes records as JSON lines.
pub fn write_predictions<W: Write>(mut out: W, records: &[PredictionRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(input: R) -> Result<Vec<PredictionRecord>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord =
            serde_json::from_str(&line).map_err(|e| EvalError::Malformed(format!("line {}: {e}", i + 1)))?;
        record.check()?;
        out.push(record);
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>, EvalError> {
    let file = std::fs::File::open(path)?;
    read_predictions(std::io::BufReader::new(file))
}
