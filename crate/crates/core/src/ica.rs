//! Independent component analysis for artifact removal and source features.
//!
//! Data are whitened by PCA, unmixed with symmetric FastICA (tanh contrast),
//! components are labeled by a spectral/topographic heuristic, and flagged
//! components are dropped from the mixing matrix before back-projection.

use std::fmt;

use log::{debug, warn};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Recording;

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// PCA whitening transform fitted on a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    pub mean: Array1<f64>,
    /// Maps centered data to unit covariance.
    pub matrix: Array2<f64>,
    /// Inverse of `matrix`.
    pub dewhitening: Array2<f64>,
    pub eigenvalues: Array1<f64>,
    pub regularized: bool,
}

impl Whitener {
    pub fn apply(&self, data: &Array2<f64>) -> Array2<f64> {
        let centered = data - &self.mean.view().insert_axis(Axis(1));
        self.matrix.dot(&centered)
    }

    pub fn invert(&self, white: &Array2<f64>) -> Array2<f64> {
        self.dewhitening.dot(white) + &self.mean.view().insert_axis(Axis(1))
    }
}

fn covariance(centered: &Array2<f64>) -> Array2<f64> {
    let n = centered.ncols() as f64;
    centered.dot(&centered.t()) / n
}

/// Centers the data and maps it to identity covariance. A rank-deficient
/// covariance gets `1e-9·trace/κ` added to its diagonal first.
pub fn whiten(data: &Array2<f64>) -> Result<(Whitener, Array2<f64>)> {
    let (k, n) = data.dim();
    if k == 0 || n < 2 {
        return Err(Error::invalid(format!("cannot whiten a {k}x{n} matrix")));
    }
    let mean = data.mean_axis(Axis(1)).expect("non-empty");
    let centered = data - &mean.view().insert_axis(Axis(1));
    let mut cov = covariance(&centered);

    let mut eig = SymmetricEigen::new(to_dmatrix(&cov));
    let max_ev = eig.eigenvalues.max().max(0.0);
    let min_ev = eig.eigenvalues.min();
    let mut regularized = false;
    if !(min_ev > 1e-12 * max_ev) || max_ev == 0.0 {
        let trace: f64 = cov.diag().sum();
        let bump = if trace > 0.0 { 1e-9 * trace / k as f64 } else { 1e-9 };
        cov.diag_mut().iter_mut().for_each(|d| *d += bump);
        eig = SymmetricEigen::new(to_dmatrix(&cov));
        regularized = true;
        debug!("whitening: covariance regularized by {bump:e}");
    }
    // order components by decreasing variance for reproducible layouts
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i].max(f64::MIN_POSITIVE)));
    let mut matrix = Array2::<f64>::zeros((k, k));
    let mut dewhitening = Array2::<f64>::zeros((k, k));
    for (row, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).clone_owned();
        // sign convention: largest-magnitude entry positive
        let (imax, _) = v.iter().enumerate().fold((0, 0.0), |acc, (j, x)| {
            if x.abs() > acc.1 { (j, x.abs()) } else { acc }
        });
        if v[imax] < 0.0 {
            v = -v;
        }
        let d = eigenvalues[row].sqrt();
        for j in 0..k {
            matrix[[row, j]] = v[j] / d;
            dewhitening[[j, row]] = v[j] * d;
        }
    }
    let white = matrix.dot(&centered);
    Ok((
        Whitener {
            mean,
            matrix,
            dewhitening,
            eigenvalues,
            regularized,
        },
        white,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastIcaConfig {
    pub max_iter: usize,
    pub tol: f64,
    /// Upper bound on the number of (evenly strided) samples used to fit the
    /// unmixing matrix. Sources are always computed for every sample.
    pub max_fit_samples: usize,
}

impl Default for FastIcaConfig {
    fn default() -> Self {
        FastIcaConfig {
            max_iter: 500,
            tol: 1e-6,
            max_fit_samples: 100_000,
        }
    }
}

/// Unmixing in the whitened basis. `unmixing` has orthonormal rows and
/// `mixing` is its transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct IcaDecomposition {
    pub whitener: Whitener,
    pub unmixing: Array2<f64>,
    pub mixing: Array2<f64>,
    pub sources: Array2<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl IcaDecomposition {
    pub fn components(&self) -> usize {
        self.unmixing.nrows()
    }

    /// Channel-space mixing: column j is the scalp projection of component j.
    pub fn sensor_mixing(&self) -> Array2<f64> {
        self.whitener.dewhitening.dot(&self.mixing)
    }

    /// Channel-space unmixing (applied to centered data).
    pub fn sensor_unmixing(&self) -> Array2<f64> {
        self.unmixing.dot(&self.whitener.matrix)
    }
}

/// W ← (W Wᵀ)^{-1/2} W
fn symmetric_decorrelation(w: &Array2<f64>) -> Array2<f64> {
    let k = w.nrows();
    let wwt = to_dmatrix(&w.dot(&w.t()));
    let eig = SymmetricEigen::new(wwt);
    let mut inv_sqrt = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        let v = eig.eigenvectors.column(i);
        let s = 1.0 / eig.eigenvalues[i].max(1e-300).sqrt();
        inv_sqrt += v * v.transpose() * s;
    }
    from_dmatrix(&inv_sqrt).dot(w)
}

fn strided_columns(x: &Array2<f64>, max: usize) -> Array2<f64> {
    let n = x.ncols();
    if n <= max || max == 0 {
        return x.clone();
    }
    let step = n.div_ceil(max);
    x.slice(s![.., ..;step]).to_owned()
}

/// Symmetric FastICA with the log-cosh (tanh) contrast on whitened data.
pub fn fastica(
    whitener: Whitener,
    white: &Array2<f64>,
    seed: u64,
    cfg: &FastIcaConfig,
) -> Result<IcaDecomposition> {
    let (k, n) = white.dim();
    if k == 0 {
        return Err(Error::invalid("fastica needs at least one component"));
    }
    if n < 10 * k {
        warn!("fastica: {n} samples for {k} components, at least {} recommended", 10 * k);
    }
    let fit = strided_columns(white, cfg.max_fit_samples);
    let m = fit.ncols() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Array2::from_shape_fn((k, k), |_| StandardNormal.sample(&mut rng));
    let mut w = symmetric_decorrelation(&init);

    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iter {
        iterations = it;
        let wx = w.dot(&fit);
        let g = wx.mapv(f64::tanh);
        let g_prime_mean = g.map_axis(Axis(1), |row| {
            row.iter().map(|v| 1.0 - v * v).sum::<f64>() / m
        });
        let mut w_new = g.dot(&fit.t()) / m;
        for i in 0..k {
            let gp = g_prime_mean[i];
            for j in 0..k {
                w_new[[i, j]] -= gp * w[[i, j]];
            }
        }
        let w_new = symmetric_decorrelation(&w_new);
        let lim = (0..k)
            .map(|i| {
                let d: f64 = w_new.row(i).dot(&w.row(i));
                (d.abs() - 1.0).abs()
            })
            .fold(0.0, f64::max);
        w = w_new;
        if lim < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("fastica did not converge in {} iterations", cfg.max_iter);
    }
    let sources = w.dot(white);
    Ok(IcaDecomposition {
        whitener,
        mixing: w.t().to_owned(),
        unmixing: w,
        sources,
        converged,
        iterations,
    })
}

/// Whitening followed by FastICA on the full recording.
pub fn decompose(rec: &Recording, seed: u64, cfg: &FastIcaConfig) -> Result<IcaDecomposition> {
    let (whitener, white) = whiten(&rec.data)?;
    fastica(whitener, &white, seed, cfg)
}

/// Amari distance between a true mixing `a` and an estimated unmixing `w`,
/// normalized to [0, 1]. Zero iff `w·a` is a scaled permutation.
pub fn amari_index(w: &Array2<f64>, a: &Array2<f64>) -> f64 {
    let p = w.dot(a).mapv(f64::abs);
    let n = p.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let row = p.row(i);
        let mx = row.iter().cloned().fold(0.0, f64::max);
        total += row.sum() / mx - 1.0;
    }
    for j in 0..n {
        let col = p.column(j);
        let mx = col.iter().cloned().fold(0.0, f64::max);
        total += col.sum() / mx - 1.0;
    }
    total / (2.0 * n as f64 * (n as f64 - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentLabel {
    Brain,
    Ocular,
    Muscular,
}

impl fmt::Display for ComponentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ComponentLabel::Brain => "brain",
            ComponentLabel::Ocular => "ocular",
            ComponentLabel::Muscular => "muscular",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentScore {
    pub kurtosis: f64,
    pub low_freq_power_ratio: f64,
    pub high_freq_power_ratio: f64,
    pub frontal_projection_ratio: f64,
    pub label: ComponentLabel,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub low_freq_cutoff: f64,
    pub high_freq_cutoff: f64,
    pub low_freq_threshold: f64,
    pub frontal_threshold: f64,
    pub high_freq_threshold: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            low_freq_cutoff: 3.0,
            high_freq_cutoff: 25.0,
            low_freq_threshold: 0.6,
            frontal_threshold: 0.5,
            high_freq_threshold: 0.5,
        }
    }
}

/// 10–20 labels starting with Fp, AF or F.
pub fn is_frontal(label: &str) -> bool {
    let l = label.trim();
    l.starts_with("Fp") || l.starts_with("FP") || l.starts_with("AF") || l.starts_with('F')
}

/// Maps a ratio above its threshold onto (0.5, 1]; at the threshold the
/// confidence is 0.5, at ratio 1 it is 1.
fn rescale(ratio: f64, threshold: f64) -> f64 {
    (0.5 + 0.5 * (ratio - threshold) / (1.0 - threshold)).clamp(0.0, 1.0)
}

/// Fractions of spectral power below `lo` Hz and above `hi` Hz, using a
/// Welch average of Hann-windowed 2 s segments (or the whole signal if
/// shorter). DC is excluded.
pub fn band_power_ratios(x: &[f64], fs: f64, lo: f64, hi: f64) -> (f64, f64) {
    let seg = ((2.0 * fs) as usize).min(x.len()).max(8);
    let seg = seg.min(x.len());
    if seg < 2 {
        return (0.0, 0.0);
    }
    let step = seg / 2;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(seg);
    let window: Vec<f64> = (0..seg)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / seg as f64).cos())
        .collect();
    let mut psd = vec![0.0; seg / 2 + 1];
    let mut buf = vec![Complex::new(0.0, 0.0); seg];
    let mut start = 0;
    while start + seg <= x.len() {
        let chunk = &x[start..start + seg];
        let mean = chunk.iter().sum::<f64>() / seg as f64;
        for i in 0..seg {
            buf[i] = Complex::new((chunk[i] - mean) * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (p, b) in psd.iter_mut().zip(&buf) {
            *p += b.norm_sqr();
        }
        start += step;
    }
    let df = fs / seg as f64;
    let (mut low, mut high, mut total) = (0.0, 0.0, 0.0);
    for (i, p) in psd.iter().enumerate().skip(1) {
        let f = i as f64 * df;
        total += p;
        if f < lo {
            low += p;
        }
        if f > hi {
            high += p;
        }
    }
    if total <= 0.0 {
        return (0.0, 0.0);
    }
    (low / total, high / total)
}

fn excess_kurtosis(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
    if v <= 0.0 {
        return 0.0;
    }
    x.iter().map(|a| (a - m).powi(4)).sum::<f64>() / n / (v * v) - 3.0
}

/// Scores one component from its time course and scalp projection.
pub fn score_component(
    source: &[f64],
    projection: &[f64],
    channel_labels: &[String],
    fs: f64,
    cfg: &ScoringConfig,
) -> ComponentScore {
    let (low, high) = band_power_ratios(source, fs, cfg.low_freq_cutoff, cfg.high_freq_cutoff);
    // Under a common average reference a scalp map is only defined up to a
    // constant; measure it against its median so a frontal-only projection
    // is not diluted by the reference offset.
    let mut sorted = projection.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    let mass: f64 = projection.iter().map(|v| (v - median).abs()).sum();
    let frontal_mass: f64 = projection
        .iter()
        .zip(channel_labels)
        .filter(|(_, l)| is_frontal(l))
        .map(|(v, _)| (v - median).abs())
        .sum();
    let frontal = if mass > 0.0 { frontal_mass / mass } else { 0.0 };

    let ocular = (low > cfg.low_freq_threshold && frontal > cfg.frontal_threshold).then(|| {
        rescale(low, cfg.low_freq_threshold).min(rescale(frontal, cfg.frontal_threshold))
    });
    let muscular = (high > cfg.high_freq_threshold).then(|| rescale(high, cfg.high_freq_threshold));
    let (label, confidence) = match (ocular, muscular) {
        (Some(o), Some(m)) if m > o => (ComponentLabel::Muscular, m),
        (Some(o), _) => (ComponentLabel::Ocular, o),
        (None, Some(m)) => (ComponentLabel::Muscular, m),
        (None, None) => {
            let o = rescale(low, cfg.low_freq_threshold).min(rescale(frontal, cfg.frontal_threshold));
            let m = rescale(high, cfg.high_freq_threshold);
            (ComponentLabel::Brain, 1.0 - o.max(m).min(0.5))
        }
    };
    ComponentScore {
        kurtosis: excess_kurtosis(source),
        low_freq_power_ratio: low,
        high_freq_power_ratio: high,
        frontal_projection_ratio: frontal,
        label,
        confidence,
    }
}

/// Labels every component of `dec`. `rec` supplies channel labels and the
/// sampling rate.
pub fn score_components(
    dec: &IcaDecomposition,
    rec: &Recording,
    cfg: &ScoringConfig,
) -> Vec<ComponentScore> {
    let mixing = dec.sensor_mixing();
    (0..dec.components())
        .map(|j| {
            let src = dec.sources.row(j).to_vec();
            let proj = mixing.column(j).to_vec();
            score_component(&src, &proj, &rec.channel_labels, rec.fs, cfg)
        })
        .collect()
}

/// Indices of components labeled ocular or muscular above `threshold`.
pub fn artifact_components(scores: &[ComponentScore], threshold: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label != ComponentLabel::Brain && s.confidence > threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Back-projects the sources through a mixing matrix with the artifact
/// columns zeroed.
pub fn remove_and_reconstruct(
    rec: &Recording,
    dec: &IcaDecomposition,
    scores: &[ComponentScore],
    threshold: f64,
) -> Result<(Recording, Vec<usize>)> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} must be in (0, 1]")));
    }
    if scores.len() != dec.components() {
        return Err(Error::invalid(format!(
            "{} scores for {} components",
            scores.len(),
            dec.components()
        )));
    }
    let removed = artifact_components(scores, threshold);
    if removed.len() == dec.components() {
        return Err(Error::AllComponentsRemoved(removed.len()));
    }
    let data = if removed.is_empty() {
        rec.data.clone()
    } else {
        let mut mixing = dec.mixing.clone();
        for &j in &removed {
            mixing.column_mut(j).fill(0.0);
        }
        dec.whitener.invert(&mixing.dot(&dec.sources))
    };
    let mut out = rec.clone();
    out.data = data;
    Ok((out, removed))
}

/// Component time courses as a recording with channels `IC01..ICnn`.
pub fn components_as_features(dec: &IcaDecomposition, rec: &Recording) -> Recording {
    let labels = (1..=dec.components()).map(|i| format!("IC{i:02}")).collect();
    Recording {
        data: dec.sources.clone(),
        fs: rec.fs,
        channel_labels: labels,
        events: rec.events.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn frob(a: &Array2<f64>) -> f64 {
        a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn whitening_gives_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Array2::from_shape_fn((31, 5000), |_| rng.gen::<f64>() - 0.5);
        let mix = Array2::from_shape_fn((31, 31), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let x = mix.dot(&s);
        let (_, white) = whiten(&x).unwrap();
        let cov = covariance(&white);
        assert!(frob(&(cov - Array2::<f64>::eye(31))) < 1e-6);
    }

    #[test]
    fn already_white_data_stays_white() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = Array2::from_shape_fn((3, 4000), |_| StandardNormal.sample(&mut rng));
        let (_, white0) = whiten(&raw).unwrap();
        let (w, white) = whiten(&white0).unwrap();
        // eigenvectors of identity are arbitrary, but the transform is orthogonal
        let wwt = w.matrix.dot(&w.matrix.t());
        assert!(frob(&(wwt - Array2::<f64>::eye(3))) < 1e-6);
        assert!(frob(&(covariance(&white) - Array2::<f64>::eye(3))) < 1e-6);
    }

    #[test]
    fn rank_deficient_input_is_regularized() {
        let x: Vec<f64> = (0..500).map(|i| (i as f64 * 0.1).sin()).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let data = Array2::from_shape_vec((2, 500), [x, y].concat()).unwrap();
        let (w, white) = whiten(&data).unwrap();
        assert!(w.regularized);
        assert!(white.iter().all(|v| v.is_finite()));
        assert!(w.matrix.iter().all(|v| v.is_finite()));
    }

    fn two_source_mix() -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let n = 5000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let uniform: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let saw: Vec<f64> = (0..n).map(|t| ((t % 97) as f64 / 97.0) * 2.0 - 1.0).collect();
        let s = Array2::from_shape_vec((2, n), [uniform, saw].concat()).unwrap();
        let a = ndarray::arr2(&[[1.0, 0.5], [0.5, 1.0]]);
        let x = a.dot(&s);
        (s, a, x)
    }

    /// Brute-force oracle: best |correlation| over both permutations.
    fn best_perm_corr(est: &Array2<f64>, truth: &Array2<f64>) -> f64 {
        let corr = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
            let (ma, mb) = (a.mean().unwrap(), b.mean().unwrap());
            let cov: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            (cov / (va * vb).sqrt()).abs()
        };
        let perms = [[0, 1], [1, 0]];
        perms
            .iter()
            .map(|p| {
                (0..2)
                    .map(|i| corr(est.row(i), truth.row(p[i])))
                    .fold(1.0, f64::min)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn fastica_separates_uniform_and_sawtooth() {
        let (s, a, x) = two_source_mix();
        let (w, white) = whiten(&x).unwrap();
        let dec = fastica(w, &white, 0, &FastIcaConfig::default()).unwrap();
        assert!(dec.converged);
        let amari = amari_index(&dec.sensor_unmixing(), &a);
        assert!(amari < 0.05, "amari {amari}");
        assert!(best_perm_corr(&dec.sources, &s) > 0.99);
    }

    #[test]
    fn fastica_rows_are_orthonormal_and_deterministic() {
        let (_, _, x) = two_source_mix();
        let (w, white) = whiten(&x).unwrap();
        let d1 = fastica(w.clone(), &white, 7, &FastIcaConfig::default()).unwrap();
        let d2 = fastica(w, &white, 7, &FastIcaConfig::default()).unwrap();
        assert_eq!(d1.unmixing, d2.unmixing);
        let wwt = d1.unmixing.dot(&d1.unmixing.t());
        assert!(frob(&(wwt - Array2::<f64>::eye(2))) < 1e-6);
        assert!(frob(&(d1.mixing.dot(&d1.unmixing) - Array2::<f64>::eye(2))) < 1e-6);
        let back = d1.mixing.dot(&d1.sources);
        assert!(max_abs_diff(&back, &white) < 1e-6);
    }

    #[test]
    fn identity_mix_yields_signed_permutation() {
        // Coprime periods: over 50·97 samples every (square, saw) pair occurs
        // exactly once, so the empirical joint law factorizes exactly.
        let n = 50 * 97 * 2;
        let square: Vec<f64> = (0..n).map(|t| if t % 50 < 25 { 1.0 } else { -1.0 }).collect();
        let saw: Vec<f64> = (0..n).map(|t| ((t % 97) as f64 - 48.0) / 28.0).collect();
        let s = Array2::from_shape_vec((2, n), [square, saw].concat()).unwrap();
        let dec = decompose_array(&s, 1);
        let p = dec.sensor_unmixing();
        for i in 0..2 {
            let mut row: Vec<f64> = p.row(i).iter().map(|v| v.abs()).collect();
            let mx = row.iter().cloned().fold(0.0, f64::max);
            row.iter_mut().for_each(|v| *v /= mx);
            row.sort_by(f64::total_cmp);
            assert!(row[0] < 1e-3, "row {i}: {row:?}");
        }
    }

    fn decompose_array(x: &Array2<f64>, seed: u64) -> IcaDecomposition {
        let (w, white) = whiten(x).unwrap();
        fastica(w, &white, seed, &FastIcaConfig::default()).unwrap()
    }

    #[test]
    fn amari_is_zero_for_scaled_permutations() {
        let a = ndarray::arr2(&[[2.0, 0.3], [-0.4, 1.0]]);
        let inv = ndarray::arr2(&[[1.0, -0.3], [0.4, 2.0]]) / (2.0 + 0.12);
        let perm_scaled = ndarray::arr2(&[[0.0, -3.0], [0.5, 0.0]]).dot(&inv);
        assert!(amari_index(&perm_scaled, &a) < 1e-12);
        assert!(amari_index(&Array2::eye(2), &a) > 0.1);
    }

    #[test]
    fn frontal_labels() {
        for l in ["Fp1", "Fp2", "AF3", "F7", "Fz", "FC1", "FT9"] {
            assert!(is_frontal(l), "{l}");
        }
        for l in ["Cz", "O1", "Pz", "T7", "TP9", "IC01"] {
            assert!(!is_frontal(l), "{l}");
        }
    }

    #[test]
    fn average_referenced_frontal_map_still_scores_frontal() {
        // 5 frontal channels out of 12, then the average reference offset.
        let labels: Vec<String> = ["Fp1", "Fp2", "F3", "F4", "Fz", "C3", "C4", "Cz", "P3", "P4", "O1", "O2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut proj = vec![0.0; 12];
        proj[..5].copy_from_slice(&[0.3, 0.4, 0.2, 0.25, 0.35]);
        let mean = proj.iter().sum::<f64>() / 12.0;
        proj.iter_mut().for_each(|v| *v -= mean);
        let fs = 500.0;
        let blink: Vec<f64> = (0..5000).map(|i| (-((i % 1000) as f64 - 500.0).powi(2) / 2500.0).exp()).collect();
        let s = score_component(&blink, &proj, &labels, fs, &ScoringConfig::default());
        assert!((s.frontal_projection_ratio - 1.0).abs() < 1e-12, "{}", s.frontal_projection_ratio);
        assert_eq!(s.label, ComponentLabel::Ocular);
        assert!(s.confidence > 0.8);
    }

    #[test]
    fn reconstruction_with_nothing_removed_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = Array2::from_shape_fn((4, 3000), |_| rng.gen::<f64>() - 0.5);
        let rec = Recording::new(data, 500.0, (0..4).map(|i| format!("C{i}")).collect(), vec![]).unwrap();
        let dec = decompose(&rec, 0, &FastIcaConfig::default()).unwrap();
        let brain = ComponentScore {
            kurtosis: 0.0,
            low_freq_power_ratio: 0.0,
            high_freq_power_ratio: 0.0,
            frontal_projection_ratio: 0.0,
            label: ComponentLabel::Brain,
            confidence: 1.0,
        };
        let scores = vec![brain; 4];
        let (out, removed) = remove_and_reconstruct(&rec, &dec, &scores, 0.8).unwrap();
        assert!(removed.is_empty());
        assert!(max_abs_diff(&out.data, &rec.data) < 1e-6);

        // the non-shortcut path reproduces the input as well
        let back = dec.whitener.invert(&dec.mixing.dot(&dec.sources));
        assert!(max_abs_diff(&back, &rec.data) < 1e-6);

        let all: Vec<ComponentScore> = (0..4)
            .map(|_| ComponentScore {
                label: ComponentLabel::Ocular,
                confidence: 0.95,
                ..scores[0].clone()
            })
            .collect();
        assert!(matches!(
            remove_and_reconstruct(&rec, &dec, &all, 0.8),
            Err(Error::AllComponentsRemoved(4))
        ));
        assert!(remove_and_reconstruct(&rec, &dec, &scores, 0.0).is_err());
    }

    #[test]
    fn features_are_relabeled_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = Array2::from_shape_fn((3, 2000), |_| rng.gen::<f64>() - 0.5);
        let rec = Recording::new(data, 500.0, vec!["a".into(), "b".into(), "c".into()], vec![]).unwrap();
        let dec = decompose(&rec, 0, &FastIcaConfig::default()).unwrap();
        let feats = components_as_features(&dec, &rec);
        assert_eq!(feats.channel_labels, vec!["IC01", "IC02", "IC03"]);
        assert_eq!(feats.data, dec.sources);
    }

    #[test]
    fn power_ratios_of_pure_tones() {
        let fs = 500.0;
        let tone = |f: f64| -> Vec<f64> {
            (0..5000).map(|t| (2.0 * std::f64::consts::PI * f * t as f64 / fs).sin()).collect()
        };
        let (lo, hi) = band_power_ratios(&tone(1.0), fs, 3.0, 25.0);
        assert!(lo > 0.95 && hi < 0.01);
        let (lo, hi) = band_power_ratios(&tone(35.0), fs, 3.0, 25.0);
        assert!(lo < 0.01 && hi > 0.95);
        let (lo, hi) = band_power_ratios(&tone(10.0), fs, 3.0, 25.0);
        assert!(lo < 0.01 && hi < 0.01);
    }
}
