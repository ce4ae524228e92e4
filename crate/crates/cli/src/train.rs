//! The `train` command and its run directory:
//!
//! ```text
//! config.json                       effective configuration, written first
//! state.json                        {"status": "running" | "complete", ...}
//! checkpoints/<subject>_fold<k>.*   best-validation network (header + blob)
//! metrics/<subject>_fold<k>.csv     stage, epoch, train_loss, val_metric
//! folds/<subject>_fold<k>.json      one fold result; its presence marks the unit done
//! report.json, report.txt
//! ```
//!
//! A directory whose state is still `running` is resumed by rerunning the
//! same command: finished units are skipped.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use airscl::models::Arch;
use airscl::pipeline::{
    aggregate_report, plan_cv, train_fold, CellKey, EpochLog, FoldRecord, LossMode, TrainConfig,
};
use airscl::signal::{FeatureKind, TrialSet};
use airscl::store::{self, Layout, MANIFEST};
use anyhow::{Context, Result};
use clap::ValueEnum;
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::{prepare_out, store_dir};
use crate::config::{usage, Config};
use crate::{ArchArg, FeaturesArg, LossArg, TrainArgs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunConfig {
    store: PathBuf,
    subjects: Vec<String>,
    train: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunState {
    status: String,
    units_total: usize,
    units_done: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FoldResult {
    subject: String,
    fold: usize,
    test_accuracy: f64,
    best_val_accuracy: f64,
    epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding_margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frozen_encoder_digest: Option<String>,
}

fn choice<T: ValueEnum>(cfg: &Config, flag: Option<T>, section: &str, key: &str, default: T) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match cfg.pick_opt::<String>(None, section, key)? {
        Some(s) => T::from_str(&s, true).map_err(|e| usage(format!("config [{section}] {key}: {e}"))),
        None => Ok(default),
    }
}

fn train_config(cfg: &Config, a: &TrainArgs) -> Result<TrainConfig> {
    let arch = match choice(cfg, a.arch, "pipeline", "arch", ArchArg::Eegnet)? {
        ArchArg::Eegnet => Arch::Eegnet,
        ArchArg::Deepconvnet => Arch::Deepconvnet,
    };
    let loss = match choice(cfg, a.loss, "pipeline", "loss", LossArg::Ce)? {
        LossArg::Ce => LossMode::Ce,
        LossArg::Scl => LossMode::Scl,
    };
    let kind = match choice(cfg, a.features, "pipeline", "features", FeaturesArg::Eeg)? {
        FeaturesArg::Eeg => FeatureKind::PreprocessedEeg,
        FeaturesArg::Ica => FeatureKind::IcaComponents,
    };
    let mut t = TrainConfig::new(arch, loss, kind);
    t.folds = cfg.pick(a.folds, "pipeline", "folds", t.folds)?;
    t.batch_size = cfg.pick(a.batch, "pipeline", "batch", t.batch_size)?;
    t.patience = cfg.pick(a.patience, "pipeline", "patience", t.patience)?;
    t.max_epochs = cfg.pick(a.max_epochs, "pipeline", "max_epochs", t.max_epochs)?;
    t.lr = cfg.pick(a.lr, "pipeline", "lr", t.lr)?;
    t.seed = cfg.pick(a.seed, "pipeline", "seed", t.seed)?;
    t.val_fraction = cfg.pick(None, "pipeline", "val_fraction", t.val_fraction)?;
    t.tau = cfg.pick(a.tau, "contrastive", "tau", t.tau)?;
    t.validate().map_err(|e| usage(e.to_string()))?;
    Ok(t)
}

/// The epoched store holding `kind`: `data` itself, or the matching
/// subdirectory of a preprocess output.
fn locate_store(data: &Path, kind: FeatureKind) -> Result<PathBuf> {
    let candidates = [data.to_path_buf(), data.join(store_dir(kind))];
    for dir in candidates.iter().filter(|d| d.join(MANIFEST).is_file()) {
        let m = store::read_manifest(dir)?;
        if m.layout == Layout::Epoched && m.feature_kind == kind {
            return Ok(dir.clone());
        }
    }
    Err(usage(format!("no epoched {} store at {}", store_dir(kind), data.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn unit_stem(subject: &str, fold: usize) -> String {
    format!("{subject}_fold{fold}")
}

/// Creates or reopens the run directory. Returns true when resuming.
fn open_run(out: &Path, run: &RunConfig, force: bool) -> Result<bool> {
    let config_path = out.join("config.json");
    let resume = !force && config_path.is_file();
    if resume {
        let prev: RunConfig = serde_json::from_slice(&fs::read(&config_path)?)
            .with_context(|| format!("parsing {}", config_path.display()))?;
        if &prev != run {
            return Err(usage(format!(
                "{} holds a run with a different configuration (use --force to replace it)",
                out.display()
            )));
        }
    } else {
        prepare_out(out, force)?;
    }
    for sub in ["checkpoints", "metrics", "folds"] {
        fs::create_dir_all(out.join(sub)).with_context(|| format!("creating {}", out.join(sub).display()))?;
    }
    write_json(&config_path, run)?;
    Ok(resume)
}

fn read_fold(out: &Path, subject: &str, fold: usize) -> Option<FoldResult> {
    let path = out.join("folds").join(format!("{}.json", unit_stem(subject, fold)));
    serde_json::from_slice(&fs::read(path).ok()?).ok()
}

fn run_unit(out: &Path, cfg: &TrainConfig, ts: &TrialSet, plan: &airscl::pipeline::CvPlan, fold: usize) -> Result<FoldResult> {
    let subject = &plan.subject;
    let stem = unit_stem(subject, fold);
    let mut csv = csv::Writer::from_path(out.join("metrics").join(format!("{stem}.csv")))?;
    csv.write_record(["stage", "epoch", "train_loss", "val_metric"])?;
    let mut csv_err = None;
    let mut on_epoch = |e: &EpochLog| {
        info!(
            "{subject} fold {fold} stage {} epoch {}: train_loss {:.4} val {:.4}",
            e.stage, e.epoch, e.train_loss, e.val_metric
        );
        let row = [e.stage.to_string(), e.epoch.to_string(), e.train_loss.to_string(), e.val_metric.to_string()];
        if let Err(err) = csv.write_record(&row).and_then(|_| csv.flush().map_err(Into::into)) {
            csv_err.get_or_insert(err);
        }
    };
    let outcome = train_fold(ts, plan, fold, cfg, &mut on_epoch)?;
    if let Some(e) = csv_err {
        return Err(e.into());
    }
    outcome.network.save(&out.join("checkpoints").join(&stem))?;
    let result = FoldResult {
        subject: subject.clone(),
        fold,
        test_accuracy: outcome.test_accuracy,
        best_val_accuracy: outcome.best_val_accuracy,
        epochs: outcome.history.len(),
        embedding_margin: outcome.embedding_margin,
        frozen_encoder_digest: outcome.frozen_encoder_digest.map(|d| format!("{d:016x}")),
    };
    write_json(&out.join("folds").join(format!("{stem}.json")), &result)?;
    info!("{subject} fold {fold}: test accuracy {:.4}", result.test_accuracy);
    Ok(result)
}

pub fn run(cfg: &Config, a: TrainArgs) -> Result<()> {
    let mut tcfg = train_config(cfg, &a)?;
    let jobs = cfg.pick(a.jobs, "cli", "jobs", 1)?;
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let store_path = locate_store(&a.data, tcfg.feature_kind)?;
    let manifest = store::read_manifest(&store_path)?;
    tcfg.num_classes = manifest.num_classes;
    let all: Vec<String> = manifest.subjects.iter().map(|s| s.id.clone()).collect();
    let subjects = if a.subjects.is_empty() {
        all
    } else {
        if let Some(s) = a.subjects.iter().find(|s| !all.contains(s)) {
            return Err(usage(format!("subject {s} not in {}", store_path.display())));
        }
        a.subjects.clone()
    };
    let run_cfg = RunConfig {
        store: store_path.clone(),
        subjects: subjects.clone(),
        train: tcfg.clone(),
    };
    let resume = open_run(&a.out, &run_cfg, a.force)?;
    let total = subjects.len() * tcfg.folds;
    let done = Mutex::new(
        subjects
            .iter()
            .flat_map(|s| (0..tcfg.folds).map(move |f| (s, f)))
            .filter(|(s, f)| read_fold(&a.out, s, *f).is_some())
            .count(),
    );
    if resume {
        info!("resuming {}: {} of {total} units done", a.out.display(), done.lock().unwrap());
    }
    let state = |status: &str, units_done: usize| {
        write_json(
            &a.out.join("state.json"),
            &RunState {
                status: status.into(),
                units_total: total,
                units_done,
            },
        )
    };
    state("running", *done.lock().unwrap())?;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    for subject in &subjects {
        let pending: Vec<usize> = (0..tcfg.folds).filter(|&f| read_fold(&a.out, subject, f).is_none()).collect();
        if pending.is_empty() {
            continue;
        }
        let ts = store::read_subject_trials(&store_path, &manifest, subject)?;
        let plan = plan_cv(subject, &ts.labels(), tcfg.folds, tcfg.val_fraction, tcfg.seed)
            .map_err(|e| usage(format!("{subject}: {e}")))?;
        pool.install(|| {
            pending.par_iter().try_for_each(|&fold| -> Result<()> {
                run_unit(&a.out, &tcfg, &ts, &plan, fold).with_context(|| format!("{subject} fold {fold}"))?;
                let mut d = done.lock().unwrap();
                *d += 1;
                state("running", *d)
            })
        })?;
    }

    let key = CellKey {
        feature_kind: tcfg.feature_kind,
        loss_mode: tcfg.loss_mode,
        arch: tcfg.arch,
    };
    let mut records = Vec::with_capacity(total);
    for s in &subjects {
        for f in 0..tcfg.folds {
            let r = read_fold(&a.out, s, f).with_context(|| format!("missing result for {s} fold {f}"))?;
            records.push(FoldRecord {
                key,
                subject: r.subject,
                fold: r.fold,
                accuracy: r.test_accuracy,
            });
        }
    }
    let report = aggregate_report(&records, tcfg.folds)?;
    write_json(&a.out.join("report.json"), &report)?;
    fs::write(a.out.join("report.txt"), report.render_text())?;
    state("complete", total)?;
    let mean = report.cell(key).and_then(|c| c.mean).unwrap_or(f64::NAN);
    println!("train: {key}, {} subjects x {} folds, mean accuracy {:.2}% -> {}", subjects.len(), tcfg.folds, 100.0 * mean, a.out.display());
    Ok(())
}
