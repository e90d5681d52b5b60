use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};

use layerprobe::eval::{
    load_predictions, render_table, table_from_predictions, write_predictions, AggregationMode, LayerAccuracyTable,
    TableFormat,
};
use layerprobe::folds::{make_folds, recordings_for, FoldPlan, Role};
use layerprobe::manifest::{class_balance, load_manifest, Manifest, ManifestError};
use layerprobe::objective::selfcheck;
use layerprobe::plot::render_plot;
use layerprobe::sweep::{ensure_pooled, plan_jobs, run_layer_sweep, SweepError};
use layerprobe::synth::{generate_corpus, SynthError, SynthParams};
use layerprobe::util::write_atomic;

use crate::config::{ConfigFile, ExperimentConfig, Overrides, CACHE_ENV};

/// Failure of a command. User errors (bad input, bad config) exit with 1,
/// runtime failures with 2.
#[derive(Debug)]
pub enum CliError {
    User(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::User(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

fn user(e: impl Into<anyhow::Error>) -> CliError {
    CliError::User(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

type CmdResult = Result<(), CliError>;

fn write_file(path: &Path, contents: &[u8]) -> CmdResult {
    write_atomic(path, contents)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)
}

fn open_manifest(path: &Path) -> Result<Manifest, CliError> {
    load_manifest(path).map_err(|e| match e {
        ManifestError::IntegrityViolation(violations) => {
            for v in &violations {
                eprintln!("  - {v}");
            }
            user(anyhow!("{}: {} integrity violation(s)", path.display(), violations.len()))
        }
        other => user(other),
    })
}

pub fn validate(path: &Path, check_audio: bool) -> CmdResult {
    let manifest = open_manifest(path)?;
    if check_audio {
        let missing = manifest.missing_audio();
        if !missing.is_empty() {
            for v in &missing {
                eprintln!("  - {v}");
            }
            return Err(user(anyhow!("{}: {} audio file(s) missing", path.display(), missing.len())));
        }
    }
    let balance = class_balance(&manifest);
    let counts: Vec<String> = balance.iter().map(|(label, n)| format!("{label}: {n}")).collect();
    println!(
        "ok: corpus '{}': {} speakers ({}), {} recordings",
        manifest.corpus_name,
        manifest.speakers.len(),
        counts.join(", "),
        manifest.recordings.len()
    );
    Ok(())
}

pub fn synth(out: &Path, params: SynthParams) -> CmdResult {
    let manifest = generate_corpus(out, &params).map_err(|e| match e {
        SynthError::InvalidParams(_) => user(e),
        other => runtime(other),
    })?;
    println!(
        "wrote {} speakers, {} recordings to {}",
        manifest.speakers.len(),
        manifest.recordings.len(),
        out.join("manifest.toml").display()
    );
    Ok(())
}

fn load_config(path: Option<&Path>, overrides: Overrides) -> Result<ExperimentConfig, CliError> {
    let file = match path {
        Some(p) => ConfigFile::load(p).map_err(user)?,
        None => ConfigFile::default(),
    };
    let env_cache = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    ExperimentConfig::resolve(file, overrides, env_cache).map_err(user)
}

pub fn extract(config: Option<&Path>, overrides: Overrides, force: bool) -> CmdResult {
    let cfg = load_config(config, overrides)?;
    let manifest = open_manifest(&cfg.manifest)?;
    let adapter = cfg.adapter.build();
    let (_, report) = ensure_pooled(&manifest, adapter.as_ref(), &cfg.cache_dir, force);
    println!(
        "extract: {} recordings, {} cache hits ({:.1}%), {} extracted, {} failed",
        report.total,
        report.cache_hits,
        100.0 * report.hit_rate(),
        report.extracted,
        report.failures.len()
    );
    if report.failures.is_empty() {
        Ok(())
    } else {
        for (id, message) in &report.failures {
            eprintln!("  - {id}: {message}");
        }
        Err(runtime(anyhow!(
            "{} of {} recordings failed to extract",
            report.failures.len(),
            report.total
        )))
    }
}

fn print_plan(cfg: &ExperimentConfig, manifest: &Manifest, plan: &FoldPlan, model_id: &str) -> CmdResult {
    let jobs = plan_jobs(&cfg.layers, plan);
    let mut text = format!(
        "{} jobs: {} layer(s) x {} folds, model {model_id}, {} workers\n",
        jobs.len(),
        cfg.layers.len(),
        plan.k,
        rayon::current_num_threads()
    );
    for job in jobs {
        let fold = &plan.folds[job.fold];
        let mut parts = Vec::new();
        for (role, name) in [(Role::Train, "train"), (Role::Val, "val"), (Role::Test, "test")] {
            let recs = recordings_for(fold, role, manifest).map_err(runtime)?;
            parts.push(format!("{name} {} spk/{} rec", fold.speakers(role).len(), recs.len()));
        }
        text.push_str(&format!("layer {:>2} fold {:>2}: {}\n", job.layer, job.fold, parts.join(", ")));
    }
    emit(&text)
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> CmdResult {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(runtime(e)),
        _ => Ok(()),
    }
}

fn write_tables(table: &LayerAccuracyTable, dir: &Path) -> CmdResult {
    write_file(&dir.join("table.csv"), render_table(table, TableFormat::Csv).as_bytes())?;
    write_file(&dir.join("table.json"), render_table(table, TableFormat::Json).as_bytes())?;
    write_file(&dir.join("table.md"), render_table(table, TableFormat::Markdown).as_bytes())?;
    if !table.is_empty() {
        render_plot(table, &dir.join("accuracy.svg")).map_err(runtime)?;
    }
    Ok(())
}

pub fn sweep(config: Option<&Path>, overrides: Overrides, force: bool, dry_run: bool) -> CmdResult {
    let cfg = load_config(config, overrides)?;
    let manifest = open_manifest(&cfg.manifest)?;
    let plan = make_folds(&manifest, cfg.k, cfg.split_seed).map_err(user)?;
    let adapter = cfg.adapter.build();
    if dry_run {
        return print_plan(&cfg, &manifest, &plan, adapter.model_id());
    }

    let out = &cfg.output_dir;
    let snapshot_path = out.join("resolved_config.toml");
    let snapshot = cfg.to_toml();
    if !force
        && out.join("table.json").is_file()
        && std::fs::read_to_string(&snapshot_path).is_ok_and(|s| s == snapshot)
    {
        println!("sweep: {} is up to date (use --force to recompute)", out.display());
        return Ok(());
    }

    let outcome = run_layer_sweep(
        &manifest,
        &plan,
        adapter.as_ref(),
        &cfg.train,
        &cfg.layers,
        &cfg.cache_dir,
        cfg.aggregation_mode,
    )
    .map_err(|e| match e {
        SweepError::InvalidLayer { .. } => user(e),
        other => runtime(other),
    })?;

    write_file(&out.join("folds.toml"), plan.to_toml().as_bytes())?;
    let predictions: Vec<_> = outcome.predictions().cloned().collect();
    let mut dump = Vec::new();
    write_predictions(&mut dump, &predictions).map_err(runtime)?;
    write_file(&out.join("predictions.jsonl"), &dump)?;
    for job in &outcome.jobs {
        let stem = format!("layer{:02}_fold{:02}", job.job.layer, job.job.fold);
        job.probe
            .save(&out.join("probes").join(format!("{stem}.lpp")))
            .map_err(runtime)?;
        write_file(
            &out.join("histories").join(format!("{stem}.toml")),
            job.history.to_toml().as_bytes(),
        )?;
    }
    write_tables(&outcome.table, out)?;
    // written last: its presence marks a complete run
    write_file(&snapshot_path, snapshot.as_bytes())?;

    let x = &outcome.extraction;
    eprintln!(
        "embeddings: {} cache hits, {} extracted; {} probes trained; outputs in {}",
        x.cache_hits,
        x.extracted,
        outcome.jobs.len(),
        out.display()
    );
    emit(&render_table(&outcome.table, TableFormat::Markdown))
}

fn load_table(path: &Path, mode: AggregationMode) -> Result<LayerAccuracyTable, CliError> {
    let context = |e: anyhow::Error| user(e.context(format!("cannot read {}", path.display())));
    if path.extension().is_some_and(|e| e == "jsonl") {
        let records = load_predictions(path).map_err(|e| context(e.into()))?;
        table_from_predictions(&records, mode).map_err(|e| context(e.into()))
    } else {
        let text = std::fs::read_to_string(path).map_err(|e| context(e.into()))?;
        LayerAccuracyTable::from_json(&text).map_err(|e| context(e.into()))
    }
}

pub fn report(inputs: &[PathBuf], output_dir: Option<&Path>, mode: AggregationMode) -> CmdResult {
    let mut merged: Option<LayerAccuracyTable> = None;
    for path in inputs {
        let table = load_table(path, mode)?;
        match &mut merged {
            None => merged = Some(table),
            Some(m) => {
                if m.aggregation_mode != table.aggregation_mode {
                    return Err(user(anyhow!(
                        "{} uses {} but earlier inputs use {}",
                        path.display(),
                        table.aggregation_mode.as_str(),
                        m.aggregation_mode.as_str()
                    )));
                }
                m.merge(&table);
            }
        }
    }
    let table = merged.expect("clap requires at least one input");
    if let Some(dir) = output_dir {
        write_tables(&table, dir)?;
    }
    emit(&render_table(&table, TableFormat::Markdown))
}

pub fn losses_selfcheck(seed: u64) -> CmdResult {
    let checks = selfcheck::run(seed);
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(runtime(anyhow!("{failed} of {} checks failed", checks.len())))
    }
}
