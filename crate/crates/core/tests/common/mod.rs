#![allow(dead_code)]

use airscl::contrastive::{supcon_loss, EmptyPositives};
use airscl::nn::{grad_check, numeric_gradient, relative_error, LayerSpec, Padding, Sequential, Tensor};
use airscl::signal::{FeatureKind, Trial, TrialSet};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Random linear readout plus a quadratic term, so no gradient vanishes by symmetry.
fn loss_fn(weights: Vec<f64>) -> impl Fn(&Tensor) -> (f64, Tensor) {
    move |y: &Tensor| {
        let mut g = y.clone();
        let mut v = 0.0;
        for ((gi, &yi), &w) in g.data_mut().iter_mut().zip(y.data()).zip(&weights) {
            v += w * yi + 0.25 * yi * yi;
            *gi = w + 0.5 * yi;
        }
        (v, g)
    }
}

fn conv(in_ch: usize, out_ch: usize, kernel: (usize, usize), padding: Padding, bias: bool) -> LayerSpec {
    LayerSpec::Conv2d {
        in_ch,
        out_ch,
        kernel,
        padding,
        bias,
    }
}

/// Every layer kind, alone or in the chains the two networks use.
pub fn layer_cases() -> Vec<(&'static str, Vec<LayerSpec>, Vec<usize>)> {
    vec![
        ("conv2d same", vec![conv(2, 3, (2, 4), Padding::Same, false)], vec![2, 2, 3, 9]),
        ("conv2d same bias", vec![conv(2, 3, (2, 4), Padding::Same, true)], vec![2, 2, 3, 9]),
        ("conv2d valid", vec![conv(2, 3, (2, 4), Padding::Valid, false)], vec![2, 2, 3, 9]),
        ("conv2d valid bias", vec![conv(2, 3, (2, 4), Padding::Valid, true)], vec![2, 2, 3, 9]),
        ("conv2d pointwise", vec![conv(3, 2, (1, 1), Padding::Valid, true)], vec![2, 3, 2, 5]),
        (
            "depthwise",
            vec![LayerSpec::DepthwiseConv2d {
                channels: 2,
                multiplier: 2,
                kernel: (3, 1),
                padding: Padding::Valid,
                bias: false,
            }],
            vec![2, 2, 3, 6],
        ),
        (
            "separable",
            vec![LayerSpec::SeparableConv2d {
                in_ch: 2,
                out_ch: 3,
                kernel: (1, 4),
                padding: Padding::Same,
                bias: false,
            }],
            vec![2, 2, 1, 8],
        ),
        ("batch norm", vec![LayerSpec::BatchNorm { features: 3 }], vec![4, 3, 2, 3]),
        ("elu", vec![LayerSpec::Elu], vec![2, 2, 2, 4]),
        ("relu", vec![LayerSpec::Relu], vec![2, 2, 2, 4]),
        ("avg pool", vec![LayerSpec::AvgPool { pool: (1, 3) }], vec![2, 2, 2, 10]),
        ("max pool", vec![LayerSpec::MaxPool { pool: (1, 2) }], vec![2, 2, 2, 9]),
        ("dropout", vec![LayerSpec::Dropout { p: 0.5 }], vec![2, 3, 1, 8]),
        (
            "flatten dense",
            vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: 12, outputs: 5 }],
            vec![3, 2, 2, 3],
        ),
        ("l2 normalize", vec![LayerSpec::L2Normalize], vec![3, 6]),
        ("softmax", vec![LayerSpec::Softmax], vec![3, 6]),
        (
            "projection head",
            vec![
                LayerSpec::L2Normalize,
                LayerSpec::Dense { inputs: 6, outputs: 4 },
                LayerSpec::Relu,
                LayerSpec::L2Normalize,
            ],
            vec![3, 6],
        ),
        (
            "eegnet first block",
            vec![
                conv(1, 2, (1, 8), Padding::Same, false),
                LayerSpec::BatchNorm { features: 2 },
                LayerSpec::DepthwiseConv2d {
                    channels: 2,
                    multiplier: 2,
                    kernel: (8, 1),
                    padding: Padding::Valid,
                    bias: false,
                },
                LayerSpec::BatchNorm { features: 4 },
                LayerSpec::Elu,
                LayerSpec::AvgPool { pool: (1, 4) },
            ],
            vec![2, 1, 8, 64],
        ),
    ]
}

/// Worst relative error over parameters and inputs across `seeds` random draws.
pub fn layer_max_error(specs: &[LayerSpec], input_shape: &[usize], seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Sequential::from_specs(specs, &mut rng);
        let x = random(&mut rng, input_shape);
        let out = net.output_shape(input_shape).unwrap();
        let weights = (0..out.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = grad_check(&mut net, &x, loss_fn(weights), STEP).unwrap();
        assert!(report.checked > 0);
        worst = worst.max(report.max_error());
    }
    worst
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_vec(&[rows.len(), rows[0].len()], rows.concat()).unwrap()
}

/// Direct double loop over anchors and positives, summed over anchors that
/// have at least one positive.
pub fn supcon_oracle(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let n = z.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| (dot(&z[i], &z[a]) / tau).exp()).sum();
        let mut acc = 0.0;
        for &p in &pos {
            acc += ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
        }
        total += -acc / pos.len() as f64;
    }
    total
}

/// Worst relative error of the contrastive-loss gradient on one random batch.
pub fn supcon_grad_error(seed: u64, n: usize, d: usize, tau: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = unit_rows(&mut rng, n, d);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
    let z = rows_tensor(&rows);
    let out = supcon_loss(&z, &labels, tau, EmptyPositives::Skip).unwrap();
    let numeric = numeric_gradient(z.data(), STEP, |v| {
        let t = Tensor::from_vec(&[n, d], v.to_vec()).unwrap();
        supcon_loss(&t, &labels, tau, EmptyPositives::Skip).unwrap().value
    });
    out.grad
        .data()
        .iter()
        .zip(&numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

/// Two classes with different dominant frequencies on different channels,
/// `channels` × `samples` per trial.
pub fn separable(per_class: usize, channels: usize, samples: usize, seed: u64) -> TrialSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::new();
    for i in 0..2 * per_class {
        let label = (i % 2) as u8;
        let (freq, ch) = if label == 0 { (4.0, 0) } else { (11.0, channels / 2) };
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let data = Array2::from_shape_fn((channels, samples), |(c, t)| {
            let noise: f64 = rng.gen_range(-0.3..0.3);
            let tone = std::f64::consts::TAU * freq * t as f64 / samples as f64 + phase;
            let sig = if c == ch { tone.sin() } else { 0.0 };
            (sig + noise) as f32
        });
        trials.push(Trial {
            data,
            label,
            subject: "toy".into(),
            pad_len: 0,
        });
    }
    TrialSet {
        trials,
        feature_kind: FeatureKind::PreprocessedEeg,
        provenance: "separable toy".into(),
    }
}
