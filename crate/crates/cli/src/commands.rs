use std::fs;
use std::path::{Path, PathBuf};

use airscl::pipeline::{generate_subject, merge_reports, preprocess_subject, IcaSettings, PreprocessConfig, RunReport, SynthSpec};
use airscl::signal::FeatureKind;
use airscl::store::{self, IcaSidecar, Layout, StoreWriter};
use anyhow::{Context, Result};
use log::info;

use crate::config::{usage, Config};
use crate::{FormatArg, PreprocessArgs, ReportArgs, SynthArgs};

/// Store directory names inside a preprocess output.
pub fn store_dir(kind: FeatureKind) -> &'static str {
    match kind {
        FeatureKind::IcaComponents => "ica_components",
        FeatureKind::PreprocessedEeg => "preprocessed_eeg",
        FeatureKind::Raw => "raw",
    }
}

fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(false);
    }
    if !dir.is_dir() {
        return Err(usage(format!("{} exists and is not a directory", dir.display())));
    }
    Ok(fs::read_dir(dir)?.next().is_some())
}

/// Leaves `dir` absent or empty. A non-empty directory is removed with
/// `force` and refused otherwise.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if is_nonempty_dir(dir)? {
        if !force {
            return Err(usage(format!("{} exists and is not empty (use --force to replace it)", dir.display())));
        }
        fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    Ok(())
}

pub fn synth(cfg: &Config, a: SynthArgs) -> Result<()> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        subjects: cfg.pick(a.subjects, "synth", "subjects", d.subjects)?,
        trials_per_class: cfg.pick(a.trials_per_class, "synth", "trials_per_class", d.trials_per_class)?,
        snr_db: cfg.pick(a.snr_db, "synth", "snr_db", d.snr_db)?,
        blink_rate_per_min: cfg.pick(a.blink_rate, "synth", "blink_rate", d.blink_rate_per_min)?,
        emg_rate_per_min: cfg.pick(a.emg_rate, "synth", "emg_rate", d.emg_rate_per_min)?,
        seed: cfg.pick(a.seed, "synth", "seed", d.seed)?,
        ..d
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    prepare_out(&a.out, a.force)?;
    let mut w = StoreWriter::continuous(&a.out, FeatureKind::Raw, spec.fs, &spec.channel_labels(), spec.classes)
        .with_context(|| format!("creating {}", a.out.display()))?;
    let mut trials = 0;
    for s in 0..spec.subjects {
        let (rec, truth) = generate_subject(&spec, s)?;
        info!(
            "{}: {} samples, {} trials, mixing condition {:.1}",
            spec.subject_id(s),
            rec.samples(),
            rec.events.len(),
            truth.condition_number()
        );
        trials += rec.events.len();
        w.add_recording(&spec.subject_id(s), &rec)?;
    }
    let bytes = w.finish()?;
    println!(
        "synth: {} subjects, {trials} trials, {bytes} bytes -> {}",
        spec.subjects,
        a.out.display()
    );
    Ok(())
}

pub fn preprocess(cfg: &Config, a: PreprocessArgs) -> Result<()> {
    let d = PreprocessConfig::default();
    let low = cfg.pick(a.low, "signal-prep", "low", d.low_hz)?;
    let high = cfg.pick(a.high, "signal-prep", "high", d.high_hz)?;
    if !(low > 0.0 && low < high) {
        return Err(usage(format!("band edges must satisfy 0 < low < high (got {low}, {high})")));
    }
    let skip_ica = cfg.switch(a.skip_ica, "ica", "skip")?;
    let di = IcaSettings::default();
    let ica = IcaSettings {
        seed: cfg.pick(a.ica_seed, "ica", "seed", di.seed)?,
        threshold: cfg.pick(a.threshold, "ica", "threshold", di.threshold)?,
        ..di
    };
    if !(ica.threshold > 0.0 && ica.threshold <= 1.0) {
        return Err(usage(format!("threshold {} must be in (0, 1]", ica.threshold)));
    }
    let pcfg = PreprocessConfig {
        low_hz: low,
        high_hz: high,
        pre_s: cfg.pick(None, "signal-prep", "pre_s", d.pre_s)?,
        post_s: cfg.pick(None, "signal-prep", "post_s", d.post_s)?,
        ica: (!skip_ica).then_some(ica),
    };

    let m = store::read_manifest(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    if m.layout != Layout::Continuous {
        return Err(usage(format!("{} is not a store of continuous recordings", a.input.display())));
    }
    if high >= m.fs / 2.0 {
        return Err(usage(format!("high edge {high} Hz must be below Nyquist ({} Hz)", m.fs / 2.0)));
    }
    prepare_out(&a.out, a.force)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("preprocess.json"), serde_json::to_vec_pretty(&pcfg)?)?;

    let path = |k| a.out.join(store_dir(k));
    let mut eeg = StoreWriter::epoched(&path(FeatureKind::PreprocessedEeg), FeatureKind::PreprocessedEeg, m.fs, &m.channel_labels)?;
    let ic_labels: Vec<String> = (1..=m.channels).map(|i| format!("IC{i:02}")).collect();
    let mut comps = match &pcfg.ica {
        Some(_) => Some(StoreWriter::epoched(&path(FeatureKind::IcaComponents), FeatureKind::IcaComponents, m.fs, &ic_labels)?),
        None => None,
    };
    let mut trials = 0;
    for s in &m.subjects {
        let rec = store::read_recording(&a.input, &m, &s.id)?;
        let pre = preprocess_subject(&s.id, &rec, &pcfg).with_context(|| format!("preprocessing {}", s.id))?;
        trials += pre.eeg.len();
        eeg.add_trials(&s.id, &pre.eeg.trials)?;
        if let (Some(out), Some(w), Some(settings)) = (pre.ica, comps.as_mut(), &pcfg.ica) {
            info!("{}: removed {} of {} components", s.id, out.removed.len(), out.decomposition.components());
            w.add_trials(&s.id, &out.trials.trials)?;
            let meta = IcaSidecar {
                subject: s.id.clone(),
                channels: m.channels,
                components: out.decomposition.components(),
                seed: settings.seed,
                converged: out.decomposition.converged,
                iterations: out.decomposition.iterations,
                threshold: settings.threshold,
                removed: out.removed,
                scores: out.scores,
            };
            store::write_ica_sidecar(w.staging_path(), &meta, &out.decomposition)?;
        }
    }
    eeg.finish()?;
    let mut written = vec![store_dir(FeatureKind::PreprocessedEeg)];
    if let Some(w) = comps {
        w.finish()?;
        written.push(store_dir(FeatureKind::IcaComponents));
    }
    println!(
        "preprocess: {} subjects, {trials} trials -> {} ({})",
        m.subjects.len(),
        a.out.display(),
        written.join(", ")
    );
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    for dir in &a.runs {
        let path: PathBuf = dir.join("report.json");
        let bytes = fs::read(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let r: RunReport = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        reports.push((dir.display().to_string(), r));
    }
    let merged = merge_reports(&reports)?;
    match a.format {
        FormatArg::Text => print!("{}", merged.render_text()),
        FormatArg::Json => println!("{}", serde_json::to_string_pretty(&merged)?),
    }
    Ok(())
}
