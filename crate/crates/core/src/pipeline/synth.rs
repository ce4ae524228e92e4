//! Synthetic air-writing EEG with known sources.
//!
//! Each subject gets κ latent sources mixed into κ channels by a seeded,
//! well-conditioned matrix. Brain sources are amplitude-modulated pink noise;
//! four of them carry class templates (a Hann-windowed sinusoid whose source
//! and frequency depend on the class). Optional blink and EMG sources get
//! their own mixing columns: blinks project onto frontal channels only.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ica::is_frontal;
use crate::signal::{Event, Recording, NUM_CLASSES, STD_CHANNELS, STD_FS};

/// actiCAP-style 10–20 montage used for synthetic recordings.
pub const MONTAGE: [&str; 31] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "FC5", "FC1", "FC2", "FC6", "T7", "C3", "Cz", "C4", "T8", "TP9",
    "CP5", "CP1", "CP2", "CP6", "TP10", "P7", "P3", "Pz", "P4", "P8", "PO9", "O1", "Oz", "O2",
];

/// Number of sources carrying class templates.
pub const TASK_SOURCES: usize = 4;

const REST_S: f64 = 1.5;
const MOVE_S: (f64, f64) = (1.4, 2.4);
const TEMPLATE_S: f64 = 1.0;
const ONSET_JITTER_S: f64 = 0.1;
const AMP_JITTER: (f64, f64) = (0.8, 1.2);
const TAIL_S: f64 = 2.5;
const BLINK_SIGMA_S: f64 = 0.1;
const BLINK_AMP: f64 = 8.0;
const EMG_S: (f64, f64) = (0.5, 1.5);
const EMG_AMP: f64 = 3.0;
const EMG_LOW_HZ: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub subjects: usize,
    pub trials_per_class: usize,
    pub classes: usize,
    pub channels: usize,
    pub fs: f64,
    /// Template power over background power on the task sources.
    pub snr_db: f64,
    pub blink_rate_per_min: f64,
    pub emg_rate_per_min: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subjects: 5,
            trials_per_class: 100,
            classes: NUM_CLASSES,
            channels: STD_CHANNELS,
            fs: STD_FS,
            snr_db: 0.0,
            blink_rate_per_min: 10.0,
            emg_rate_per_min: 4.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Blink,
    Emg,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.trials_per_class == 0 {
            return Err(Error::invalid("subjects and trials_per_class must be positive"));
        }
        if !(2..=256).contains(&self.classes) {
            return Err(Error::invalid(format!("classes must be in 2..=256, got {}", self.classes)));
        }
        if self.channels > MONTAGE.len() {
            return Err(Error::invalid(format!("at most {} channels", MONTAGE.len())));
        }
        if self.channels < TASK_SOURCES + self.artifact_kinds().len() {
            return Err(Error::invalid("too few channels for task and artifact sources"));
        }
        if !(self.fs.is_finite() && self.fs >= 100.0) {
            return Err(Error::invalid(format!("fs must be at least 100 Hz, got {}", self.fs)));
        }
        if self.max_template_hz() >= self.fs / 2.0 {
            return Err(Error::invalid("class templates exceed the Nyquist frequency"));
        }
        if !self.snr_db.is_finite() || self.blink_rate_per_min < 0.0 || self.emg_rate_per_min < 0.0 {
            return Err(Error::invalid("snr and artifact rates must be finite and rates nonnegative"));
        }
        Ok(())
    }

    pub fn artifact_kinds(&self) -> Vec<ArtifactKind> {
        let mut v = Vec::new();
        if self.blink_rate_per_min > 0.0 {
            v.push(ArtifactKind::Blink);
        }
        if self.emg_rate_per_min > 0.0 {
            v.push(ArtifactKind::Emg);
        }
        v
    }

    pub fn channel_labels(&self) -> Vec<String> {
        MONTAGE[..self.channels].iter().map(|s| s.to_string()).collect()
    }

    pub fn subject_id(&self, s: usize) -> String {
        format!("sub{:02}", s + 1)
    }

    fn max_template_hz(&self) -> f64 {
        template_hz(self.classes - 1)
    }
}

/// Source index carrying class `c`.
pub fn template_source(c: usize) -> usize {
    c % TASK_SOURCES
}

/// Oscillation frequency of class `c`.
pub fn template_hz(c: usize) -> f64 {
    6.0 + 4.0 * (c / TASK_SOURCES) as f64
}

/// Unit-amplitude class waveform, `TEMPLATE_S` long.
pub fn template_waveform(c: usize, fs: f64) -> Vec<f64> {
    let n = (TEMPLATE_S * fs).round() as usize;
    let f = template_hz(c);
    let phase = PI / 4.0 * (c % 3) as f64;
    (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let env = 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos();
            env * (2.0 * PI * f * t + phase).sin()
        })
        .collect()
}

fn rng_for(seed: u64, subject: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(subject as u64 * 8 + purpose);
    rng
}

/// Cue schedule of one subject: every class `trials_per_class` times in a
/// shuffled order, each trial a rest period followed by a movement.
/// Returns the events and the recording length in samples.
pub fn plan_events(spec: &SynthSpec, subject: usize) -> (Vec<Event>, usize) {
    let mut rng = rng_for(spec.seed, subject, 0);
    let mut labels: Vec<u8> = (0..spec.classes)
        .flat_map(|c| std::iter::repeat(c as u8).take(spec.trials_per_class))
        .collect();
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.gen_range(0..=i));
    }
    let rest = (REST_S * spec.fs).round() as usize;
    let mut t = 0;
    let mut events = Vec::with_capacity(labels.len());
    for label in labels {
        let dur = (rng.gen_range(MOVE_S.0..MOVE_S.1) * spec.fs).round() as usize;
        let onset = t + rest;
        events.push(Event {
            onset,
            offset: onset + dur,
            label,
        });
        t = onset + dur;
    }
    (events, t + (TAIL_S * spec.fs).round() as usize)
}

#[derive(Debug, Clone)]
pub struct SubjectTruth {
    /// κ × κ mixing matrix, columns ordered as `sources` rows.
    pub mixing: Array2<f64>,
    pub sources: Array2<f64>,
    /// Source rows that are artifacts, with their kind.
    pub artifacts: Vec<(usize, ArtifactKind)>,
    /// Artifact-free sensor signal.
    pub clean: Array2<f64>,
    /// (start, end) sample spans of injected blinks and EMG bursts.
    pub artifact_segments: Vec<(ArtifactKind, usize, usize)>,
}

impl SubjectTruth {
    pub fn condition_number(&self) -> f64 {
        condition_number(&self.mixing)
    }
}

pub fn condition_number(a: &Array2<f64>) -> f64 {
    let m = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]]);
    let sv = m.singular_values();
    sv.max() / sv.min()
}

fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

fn mixing_matrix(rng: &mut ChaCha8Rng, labels: &[String], blink_col: Option<usize>) -> Array2<f64> {
    let n = labels.len();
    loop {
        let u = orthogonal(rng, n);
        let v = orthogonal(rng, n);
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |_, _| rng.gen_range(1.0..5.0)));
        let m = &u * s * v.transpose();
        let mut a = Array2::from_shape_fn((n, n), |(i, j)| m[(i, j)]);
        if let Some(j) = blink_col {
            let norm = a.column(j).iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut col: Vec<f64> = labels
                .iter()
                .map(|l| match l.as_str() {
                    "Fp1" | "Fp2" => 1.0,
                    l if is_frontal(l) => rng.gen_range(0.2..0.5),
                    _ => 0.0,
                })
                .collect();
            let cn = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            col.iter_mut().for_each(|x| *x *= norm / cn);
            a.column_mut(j).assign(&ndarray::Array1::from(col));
        }
        if condition_number(&a) < 50.0 {
            return a;
        }
    }
}

/// 1/f noise with unit RMS, shaped in the frequency domain.
fn pink_noise(rng: &mut ChaCha8Rng, n: usize, fs: f64) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(StandardNormal.sample(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        let f = bin as f64 * fs / n as f64;
        *v *= if bin == 0 { 0.0 } else { 1.0 / f.max(0.5).sqrt() };
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    out.iter_mut().for_each(|x| *x /= rms);
    out
}

/// White noise with everything below `low` Hz removed.
fn highpassed_noise(rng: &mut ChaCha8Rng, n: usize, fs: f64, low: f64) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(StandardNormal.sample(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        if (k.min(n - k) as f64) * fs / (n as f64) < low {
            *v = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter().map(|c| c.re * scale).collect()
}

fn artifact_times(rng: &mut ChaCha8Rng, rate_per_min: f64, n: usize, fs: f64) -> Vec<usize> {
    let count = (rate_per_min * n as f64 / fs / 60.0).round() as usize;
    let mut t: Vec<usize> = (0..count).map(|_| rng.gen_range(0..n)).collect();
    t.sort_unstable();
    t
}

/// One subject's recording and its ground truth.
pub fn generate_subject(spec: &SynthSpec, subject: usize) -> Result<(Recording, SubjectTruth)> {
    spec.validate()?;
    let (events, n) = plan_events(spec, subject);
    let k = spec.channels;
    let fs = spec.fs;
    let labels = spec.channel_labels();
    let kinds = spec.artifact_kinds();
    let brain = k - kinds.len();
    let artifacts: Vec<(usize, ArtifactKind)> = kinds.iter().enumerate().map(|(i, &a)| (brain + i, a)).collect();
    let blink_col = artifacts.iter().find(|(_, a)| *a == ArtifactKind::Blink).map(|(i, _)| *i);

    let mut mix_rng = rng_for(spec.seed, subject, 1);
    let mixing = mixing_matrix(&mut mix_rng, &labels, blink_col);

    let mut src_rng = rng_for(spec.seed, subject, 2);
    let mut sources = Array2::<f64>::zeros((k, n));
    for j in 0..brain {
        let noise = pink_noise(&mut src_rng, n, fs);
        let fm = src_rng.gen_range(0.05..0.5);
        let ph = src_rng.gen_range(0.0..2.0 * PI);
        for (t, (dst, x)) in sources.row_mut(j).iter_mut().zip(noise).enumerate() {
            *dst = x * (1.0 + 0.6 * (2.0 * PI * fm * t as f64 / fs + ph).sin());
        }
    }

    // Template amplitude: template RMS over its support equals the
    // background RMS scaled by the SNR.
    let probe = template_waveform(0, fs);
    let probe_rms = (probe.iter().map(|x| x * x).sum::<f64>() / probe.len() as f64).sqrt();
    let amp = 10f64.powf(spec.snr_db / 20.0) / probe_rms;
    let mut task_rng = rng_for(spec.seed, subject, 3);
    let jitter_max = (ONSET_JITTER_S * fs).round() as usize;
    for e in &events {
        let c = usize::from(e.label);
        let wave = template_waveform(c, fs);
        let start = e.onset + task_rng.gen_range(0..=jitter_max);
        let a = amp * task_rng.gen_range(AMP_JITTER.0..AMP_JITTER.1);
        let end = (start + wave.len()).min(n);
        let mut row = sources.row_mut(template_source(c));
        for (t, w) in (start..end).zip(&wave) {
            row[t] += a * w;
        }
    }

    let mut art_rng = rng_for(spec.seed, subject, 4);
    let mut segments = Vec::new();
    for &(j, kind) in &artifacts {
        match kind {
            ArtifactKind::Blink => {
                let sigma = BLINK_SIGMA_S * fs;
                let half = (4.0 * sigma) as usize;
                for t0 in artifact_times(&mut art_rng, spec.blink_rate_per_min, n, fs) {
                    let a = BLINK_AMP * art_rng.gen_range(0.7..1.3);
                    let (lo, hi) = (t0.saturating_sub(half), (t0 + half).min(n));
                    let mut row = sources.row_mut(j);
                    for t in lo..hi {
                        let d = (t as f64 - t0 as f64) / sigma;
                        row[t] += a * (-0.5 * d * d).exp();
                    }
                    segments.push((kind, lo, hi));
                }
            }
            ArtifactKind::Emg => {
                for t0 in artifact_times(&mut art_rng, spec.emg_rate_per_min, n, fs) {
                    let len = (art_rng.gen_range(EMG_S.0..EMG_S.1) * fs) as usize;
                    let hi = (t0 + len).min(n);
                    if hi <= t0 + 1 {
                        continue;
                    }
                    let burst = highpassed_noise(&mut art_rng, hi - t0, fs, EMG_LOW_HZ);
                    let rms = (burst.iter().map(|x| x * x).sum::<f64>() / burst.len() as f64).sqrt().max(1e-12);
                    let mut row = sources.row_mut(j);
                    for (t, b) in (t0..hi).zip(burst) {
                        row[t] += EMG_AMP * b / rms;
                    }
                    segments.push((kind, t0, hi));
                }
            }
        }
    }

    let data = mixing.dot(&sources);
    let clean = mixing.slice(s![.., ..brain]).dot(&sources.slice(s![..brain, ..]));
    let rec = Recording::new(data, fs, labels, events)?;
    Ok((
        rec,
        SubjectTruth {
            mixing,
            sources,
            artifacts,
            clean,
            artifact_segments: segments,
        },
    ))
}

/// All subjects, in order, without ground truth.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<(String, Recording)>> {
    (0..spec.subjects)
        .map(|s| generate_subject(spec, s).map(|(rec, _)| (spec.subject_id(s), rec)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            subjects: 2,
            trials_per_class: 2,
            classes: 26,
            channels: 12,
            fs: 200.0,
            snr_db: 10.0,
            blink_rate_per_min: 12.0,
            emg_rate_per_min: 6.0,
            seed: 7,
        }
    }

    #[test]
    fn full_scale_schedule_has_2600_trials() {
        let spec = SynthSpec::default();
        let (events, n) = plan_events(&spec, 0);
        assert_eq!(events.len(), 2600);
        let mut counts = [0usize; 26];
        for e in &events {
            counts[usize::from(e.label)] += 1;
        }
        assert!(counts.iter().all(|&c| c == 100));
        assert!(events.windows(2).all(|w| w[1].onset >= w[0].offset + 750));
        assert!(events[0].onset >= 500);
        assert!(events.last().unwrap().onset + 1000 <= n);
    }

    #[test]
    fn identical_spec_is_bit_identical() {
        let spec = small();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let mut other = spec.clone();
        other.seed += 1;
        assert_ne!(generate_synthetic(&other).unwrap()[0].1.data, a[0].1.data);
    }

    #[test]
    fn mixing_is_well_conditioned_and_blinks_are_frontal() {
        let spec = small();
        let (_, truth) = generate_subject(&spec, 1).unwrap();
        assert!(truth.condition_number() < 50.0);
        let (blink, _) = truth.artifacts.iter().find(|(_, k)| *k == ArtifactKind::Blink).unwrap();
        for (label, v) in spec.channel_labels().iter().zip(truth.mixing.column(*blink)) {
            assert_eq!(*v != 0.0, is_frontal(label), "{label}");
        }
    }

    #[test]
    fn class_templates_are_distinguishable() {
        let spec = small();
        let (_, truth) = generate_subject(&spec, 0).unwrap();
        let fs = spec.fs;
        let sensor: Vec<Vec<f64>> = (0..26)
            .map(|c| {
                let col = truth.mixing.column(template_source(c));
                let w = template_waveform(c, fs);
                col.iter().flat_map(|a| w.iter().map(move |x| a * x)).collect()
            })
            .collect();
        for i in 0..26 {
            for j in 0..i {
                let dot: f64 = sensor[i].iter().zip(&sensor[j]).map(|(a, b)| a * b).sum();
                let ni: f64 = sensor[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                let nj: f64 = sensor[j].iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!((dot / (ni * nj)).abs() < 0.9, "classes {i} and {j}");
            }
        }
    }

    #[test]
    fn no_artifacts_means_clean_equals_data() {
        let mut spec = small();
        spec.blink_rate_per_min = 0.0;
        spec.emg_rate_per_min = 0.0;
        let (rec, truth) = generate_subject(&spec, 0).unwrap();
        assert!(truth.artifacts.is_empty());
        let diff = (&rec.data - &truth.clean).mapv(f64::abs).fold(0.0f64, |m, &x| m.max(x));
        assert!(diff < 1e-9);
    }

    #[test]
    fn emg_bursts_have_no_low_frequency_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = highpassed_noise(&mut rng, 1000, 500.0, 30.0);
        let (low, _) = crate::ica::band_power_ratios(&x, 500.0, 25.0, 200.0);
        assert!(low < 0.01, "{low}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small();
        spec.channels = 40;
        assert!(spec.validate().is_err());
        let mut spec = small();
        spec.classes = 1;
        assert!(spec.validate().is_err());
        let mut spec = small();
        spec.fs = 50.0;
        assert!(spec.validate().is_err());
    }
}
