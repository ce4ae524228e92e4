//! Continuous-recording preprocessing: common-average referencing, linear-phase
//! FIR bandpass filtering, epoch extraction and per-trial z-scoring.

use std::f64::consts::PI;

use log::warn;
use ndarray::{Array2, Axis};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel count of the recording montage used throughout the pipeline.
pub const STD_CHANNELS: usize = 31;
pub const STD_FS: f64 = 500.0;
pub const TRIAL_SAMPLES: usize = 1500;
pub const NUM_CLASSES: usize = 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub onset: usize,
    /// Exclusive end of the recorded movement.
    pub offset: usize,
    pub label: u8,
}

/// Continuous multichannel signal, channels × samples, in microvolts.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub data: Array2<f64>,
    pub fs: f64,
    pub channel_labels: Vec<String>,
    pub events: Vec<Event>,
}

impl Recording {
    pub fn new(
        data: Array2<f64>,
        fs: f64,
        channel_labels: Vec<String>,
        events: Vec<Event>,
    ) -> Result<Self> {
        let rec = Recording {
            data,
            fs,
            channel_labels,
            events,
        };
        rec.validate()?;
        if rec.channels() != STD_CHANNELS {
            warn!(
                "recording has {} channels, expected {}",
                rec.channels(),
                STD_CHANNELS
            );
        }
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0) {
            return Err(Error::invalid(format!("sampling rate {} must be > 0", self.fs)));
        }
        if self.channel_labels.len() != self.channels() {
            return Err(Error::invalid(format!(
                "{} channel labels for {} channels",
                self.channel_labels.len(),
                self.channels()
            )));
        }
        let n = self.samples();
        for (i, ev) in self.events.iter().enumerate() {
            if ev.onset >= n || ev.offset > n || ev.offset <= ev.onset {
                return Err(Error::invalid(format!(
                    "event {i} [{}, {}) outside recording of {n} samples",
                    ev.onset, ev.offset
                )));
            }
            if ev.label as usize >= NUM_CLASSES {
                return Err(Error::invalid(format!("event {i} label {} out of range", ev.label)));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn has_standard_geometry(&self) -> bool {
        self.channels() == STD_CHANNELS && self.fs == STD_FS
    }

    fn with_data(&self, data: Array2<f64>) -> Recording {
        Recording {
            data,
            fs: self.fs,
            channel_labels: self.channel_labels.clone(),
            events: self.events.clone(),
        }
    }
}

/// Subtracts the instantaneous mean over channels from every channel.
pub fn common_average_reference(rec: &Recording) -> Result<Recording> {
    if rec.channels() < 2 {
        return Err(Error::invalid("common average reference needs at least 2 channels"));
    }
    let mean = rec.data.mean_axis(Axis(0)).expect("non-empty channel axis");
    let mut out = rec.data.clone();
    for mut row in out.rows_mut() {
        row -= &mean;
    }
    Ok(rec.with_data(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirFilter {
    pub coefficients: Vec<f64>,
    pub order: usize,
    pub band: (f64, f64),
    pub fs: f64,
    pub window: String,
    /// Transition bandwidths at the low and high edge, Hz.
    pub transition: (f64, f64),
}

impl FirFilter {
    /// Magnitude of the frequency response at `freq` Hz, by direct DFT of the taps.
    pub fn magnitude_at(&self, freq: f64) -> f64 {
        let w = 2.0 * PI * freq / self.fs;
        let (mut re, mut im) = (0.0, 0.0);
        for (k, c) in self.coefficients.iter().enumerate() {
            re += c * (w * k as f64).cos();
            im -= c * (w * k as f64).sin();
        }
        re.hypot(im)
    }

    pub fn dc_gain(&self) -> f64 {
        self.coefficients.iter().sum()
    }
}

fn windowed_sinc_lowpass(cutoff: f64, fs: f64, order: usize) -> Vec<f64> {
    let m = order as f64;
    let fc = cutoff / fs;
    let mut taps: Vec<f64> = (0..=order)
        .map(|k| {
            let x = k as f64 - m / 2.0;
            let sinc = if x == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * x).sin() / (PI * x)
            };
            let hamming = 0.54 - 0.46 * (2.0 * PI * k as f64 / m).cos();
            sinc * hamming
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Hamming-windowed sinc bandpass with cutoffs at the band edges.
///
/// Built as the difference of two unit-DC lowpass filters, so the DC gain is
/// zero up to rounding. Order is the smallest even integer ≥ 3.3·fs / Δf,
/// where Δf is the narrower of the two transition bands.
pub fn design_fir_bandpass(low: f64, high: f64, fs: f64) -> Result<FirFilter> {
    if !(fs > 0.0) || !(low > 0.0) || !(low < high) || !(high < fs / 2.0) {
        return Err(Error::invalid(format!(
            "band edges must satisfy 0 < low < high < fs/2 (got low={low}, high={high}, fs={fs})"
        )));
    }
    let tb_low = (0.25 * low).max(1.0);
    let tb_high = 0.25 * high;
    let tb = tb_low.min(tb_high);
    let mut order = (3.3 * fs / tb).ceil() as usize;
    if order % 2 == 1 {
        order += 1;
    }
    let lp_high = windowed_sinc_lowpass(high, fs, order);
    let lp_low = windowed_sinc_lowpass(low, fs, order);
    let coefficients = lp_high.iter().zip(&lp_low).map(|(h, l)| h - l).collect();
    Ok(FirFilter {
        coefficients,
        order,
        band: (low, high),
        fs,
        window: "hamming".into(),
        transition: (tb_low, tb_high),
    })
}

fn reflect_index(i: isize, n: usize) -> usize {
    // reflection about the end samples, without repeating them
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Full linear convolution of each row against `taps` via FFT.
fn fft_convolve_rows(rows: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (nrows, len) = rows.dim();
    let out_len = len + taps.len() - 1;
    let nfft = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(nfft);
    let inv = planner.plan_fft_inverse(nfft);

    let mut h: Vec<Complex<f64>> = taps.iter().map(|&t| Complex::new(t, 0.0)).collect();
    h.resize(nfft, Complex::new(0.0, 0.0));
    fwd.process(&mut h);

    let mut out = Array2::<f64>::zeros((nrows, out_len));
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    for (r, mut dst) in rows.rows().into_iter().zip(out.rows_mut()) {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, &x) in buf.iter_mut().zip(r.iter()) {
            b.re = x;
        }
        fwd.process(&mut buf);
        for (b, hh) in buf.iter_mut().zip(&h) {
            *b *= hh;
        }
        inv.process(&mut buf);
        let scale = 1.0 / nfft as f64;
        for (d, b) in dst.iter_mut().zip(&buf) {
            *d = b.re * scale;
        }
    }
    out
}

/// Applies a linear-phase FIR with group-delay compensation so the output is
/// aligned with the input. Both ends are reflect-padded by order/2 samples.
pub fn filter_zero_phase(rec: &Recording, filter: &FirFilter) -> Result<Recording> {
    let n = rec.samples();
    if n <= filter.order {
        return Err(Error::invalid(format!(
            "signal of {n} samples is not longer than filter order {}",
            filter.order
        )));
    }
    let half = filter.order / 2;
    let padded_len = n + 2 * half;
    let mut padded = Array2::<f64>::zeros((rec.channels(), padded_len));
    for (src, mut dst) in rec.data.rows().into_iter().zip(padded.rows_mut()) {
        for j in 0..padded_len {
            dst[j] = src[reflect_index(j as isize - half as isize, n)];
        }
    }
    let full = fft_convolve_rows(&padded, &filter.coefficients);
    // full[k] aligns with padded[k - half]; the original sample t sits at padded[t + half]
    let out = full.slice(ndarray::s![.., 2 * half..2 * half + n]).to_owned();
    Ok(rec.with_data(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Continuous, unprocessed recordings.
    Raw,
    PreprocessedEeg,
    IcaComponents,
}

impl FeatureKind {
    pub fn short(&self) -> &'static str {
        match self {
            FeatureKind::Raw => "raw",
            FeatureKind::PreprocessedEeg => "eeg",
            FeatureKind::IcaComponents => "ica",
        }
    }
}

/// One epoch, channels × samples, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub data: Array2<f32>,
    pub label: u8,
    pub subject: String,
    pub pad_len: usize,
}

impl Trial {
    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn samples(&self) -> usize {
        self.data.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
    pub feature_kind: FeatureKind,
    pub provenance: String,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn channels(&self) -> Option<usize> {
        self.trials.first().map(Trial::channels)
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = Vec::new();
        for t in &self.trials {
            if !s.contains(&t.subject) {
                s.push(t.subject.clone());
            }
        }
        s
    }

    /// Trials of one subject, in store order.
    pub fn for_subject(&self, subject: &str) -> TrialSet {
        TrialSet {
            trials: self
                .trials
                .iter()
                .filter(|t| t.subject == subject)
                .cloned()
                .collect(),
            feature_kind: self.feature_kind,
            provenance: self.provenance.clone(),
        }
    }

    pub fn labels(&self) -> Vec<u8> {
        self.trials.iter().map(|t| t.label).collect()
    }
}

/// Cuts one epoch per event spanning `[onset - pre_s, onset + post_s)`.
///
/// Samples after the event offset (or the end of the recording) are zero and
/// counted in `pad_len`. Events without `pre_s` of preceding signal are
/// skipped with a warning.
pub fn extract_epochs(
    rec: &Recording,
    subject: &str,
    pre_s: f64,
    post_s: f64,
    feature_kind: FeatureKind,
) -> Result<TrialSet> {
    if pre_s < 0.0 || post_s <= 0.0 {
        return Err(Error::invalid("epoch window must have pre_s >= 0 and post_s > 0"));
    }
    let pre = (pre_s * rec.fs).round() as usize;
    let total = ((pre_s + post_s) * rec.fs).round() as usize;
    let mut trials = Vec::with_capacity(rec.events.len());
    for (i, ev) in rec.events.iter().enumerate() {
        if ev.onset < pre {
            warn!("{subject}: event {i} at sample {} lacks {pre} pre-onset samples, skipped", ev.onset);
            continue;
        }
        let start = ev.onset - pre;
        let end = ev.offset.min(start + total).min(rec.samples());
        let real = end - start;
        let mut data = Array2::<f32>::zeros((rec.channels(), total));
        for (src, mut dst) in rec.data.rows().into_iter().zip(data.rows_mut()) {
            for j in 0..real {
                dst[j] = src[start + j] as f32;
            }
        }
        trials.push(Trial {
            data,
            label: ev.label,
            subject: subject.to_string(),
            pad_len: total - real,
        });
    }
    Ok(TrialSet {
        trials,
        feature_kind,
        provenance: format!("epochs {subject} [-{pre_s}s, +{post_s}s]"),
    })
}

/// Per-trial, per-channel z-score over the non-padded prefix, using the
/// population variance. Padded samples stay zero; constant channels become
/// all zeros.
pub fn zscore_trial(trial: &Trial) -> Trial {
    let n = trial.samples() - trial.pad_len;
    let mut data = Array2::<f32>::zeros(trial.data.dim());
    if n > 0 {
        for (src, mut dst) in trial.data.rows().into_iter().zip(data.rows_mut()) {
            let mean = src.iter().take(n).map(|&x| x as f64).sum::<f64>() / n as f64;
            let var = src
                .iter()
                .take(n)
                .map(|&x| (x as f64 - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let sd = var.sqrt();
            if sd <= 1e-12 * mean.abs().max(1.0) {
                continue;
            }
            for j in 0..n {
                dst[j] = ((src[j] as f64 - mean) / sd) as f32;
            }
        }
    }
    Trial {
        data,
        label: trial.label,
        subject: trial.subject.clone(),
        pad_len: trial.pad_len,
    }
}

pub fn zscore_normalize(ts: &TrialSet) -> TrialSet {
    TrialSet {
        trials: ts.trials.iter().map(zscore_trial).collect(),
        feature_kind: ts.feature_kind,
        provenance: ts.provenance.clone(),
    }
}
