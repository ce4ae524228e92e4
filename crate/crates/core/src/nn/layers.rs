use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::gemm;
use super::{Mode, Param, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-12;

fn missing(name: &'static str) -> Error {
    Error::BackwardBeforeForward(name)
}

fn same_shape(context: &str, expected: &[usize], got: &Tensor) -> Result<()> {
    if got.shape() != expected {
        return Err(Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            actual: got.shape().to_vec(),
        });
    }
    Ok(())
}

/// Splits a (N, C, ...) shape into (N, C, spatial size).
fn feature_layout(shape: &[usize], features: usize, context: &str) -> Result<(usize, usize)> {
    if shape.len() < 2 || shape[1] != features {
        let mut expected = shape.to_vec();
        if expected.len() >= 2 {
            expected[1] = features;
        }
        return Err(Error::ShapeMismatch {
            context: context.into(),
            expected,
            actual: shape.to_vec(),
        });
    }
    Ok((shape[0], shape[2..].iter().product()))
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    train: bool,
}

/// Batch normalization over the batch and spatial axes of channel dim 1.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub features: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            features,
            gamma: Param::new("gamma", Tensor::filled(&[features], 1.0)),
            beta: Param::new("beta", Tensor::zeros(&[features])),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::filled(&[features], 1.0),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, sp) = feature_layout(x.shape(), self.features, "batch_norm")?;
        let c = self.features;
        let m = n * sp;
        let xs = x.data();
        let mut out = Tensor::zeros(x.shape());
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; c];
        let train = mode == Mode::Train;
        for ch in 0..c {
            let (mean, var) = if train {
                let mut sum = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * sp;
                    sum += xs[base..base + sp].iter().sum::<f64>();
                }
                let mean = sum / m as f64;
                let mut sq = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * sp;
                    sq += xs[base..base + sp].iter().map(|v| (v - mean).powi(2)).sum::<f64>();
                }
                let var = sq / m as f64;
                let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean;
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased;
                (mean, var)
            } else {
                (self.running_mean.data()[ch], self.running_var.data()[ch])
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = is;
            let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for s in 0..n {
                let r = (s * c + ch) * sp..(s * c + ch + 1) * sp;
                let hs = &mut xhat.data_mut()[r.clone()];
                for (h, &v) in hs.iter_mut().zip(&xs[r.clone()]) {
                    *h = (v - mean) * is;
                }
                for (o, &h) in out.data_mut()[r].iter_mut().zip(&*hs) {
                    *o = g * h + b;
                }
            }
        }
        self.cache = Some(BnCache { xhat, inv_std, train });
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or(missing("batch_norm backward"))?;
        same_shape("batch_norm backward", cache.xhat.shape(), dy)?;
        let (n, sp) = feature_layout(dy.shape(), self.features, "batch_norm backward")?;
        let c = self.features;
        let m = (n * sp) as f64;
        let mut dx = Tensor::zeros(dy.shape());
        let (g_all, xh, d) = (self.gamma.value.data(), cache.xhat.data(), dy.data());
        for ch in 0..c {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for s in 0..n {
                let r = (s * c + ch) * sp..(s * c + ch + 1) * sp;
                for (&g, &h) in d[r.clone()].iter().zip(&xh[r]) {
                    sum_dy += g;
                    sum_dy_xhat += g * h;
                }
            }
            self.gamma.grad.data_mut()[ch] += sum_dy_xhat;
            self.beta.grad.data_mut()[ch] += sum_dy;
            let gs = g_all[ch] * cache.inv_std[ch];
            for s in 0..n {
                let r = (s * c + ch) * sp..(s * c + ch + 1) * sp;
                let dst = &mut dx.data_mut()[r.clone()];
                if cache.train {
                    for ((o, &g), &h) in dst.iter_mut().zip(&d[r.clone()]).zip(&xh[r]) {
                        *o = gs * (g - (sum_dy + h * sum_dy_xhat) / m);
                    }
                } else {
                    for (o, &g) in dst.iter_mut().zip(&d[r]) {
                        *o = gs * g;
                    }
                }
            }
        }
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Elementwise activation with cached input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Relu,
}

#[derive(Debug, Clone)]
pub struct Act {
    pub kind: Activation,
    cache: Option<Tensor>,
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

impl Act {
    pub fn new(kind: Activation) -> Self {
        Act { kind, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = match self.kind {
            Activation::Elu => x.map(elu),
            Activation::Relu => x.map(|v| v.max(0.0)),
        };
        self.cache = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or(missing("activation backward"))?;
        same_shape("activation backward", x.shape(), dy)?;
        let d: Vec<f64> = x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| match self.kind {
                Activation::Elu => {
                    if v > 0.0 {
                        g
                    } else {
                        g * v.exp()
                    }
                }
                Activation::Relu => {
                    if v > 0.0 {
                        g
                    } else {
                        0.0
                    }
                }
            })
            .collect();
        Tensor::from_vec(dy.shape(), d)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Non-overlapping pooling (stride = window); trailing remainders are dropped.
#[derive(Debug, Clone)]
pub struct Pool2d {
    pub kind: PoolKind,
    pub pool: (usize, usize),
    in_shape: Option<Vec<usize>>,
    argmax: Vec<usize>,
}

impl Pool2d {
    pub fn new(kind: PoolKind, pool: (usize, usize)) -> Self {
        Pool2d {
            kind,
            pool,
            in_shape: None,
            argmax: Vec::new(),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [n, c, h, w] if h / self.pool.0 > 0 && w / self.pool.1 > 0 => {
                Ok(vec![*n, *c, h / self.pool.0, w / self.pool.1])
            }
            _ => Err(Error::ShapeMismatch {
                context: "pool".into(),
                expected: vec![0, 0, self.pool.0, self.pool.1],
                actual: input.to_vec(),
            }),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let out_shape = self.output_shape(x.shape())?;
        let (n, c, h, w) = x.dims4("pool")?;
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let (ph, pw) = self.pool;
        let mut out = Tensor::zeros(&out_shape);
        let mut argmax = Vec::new();
        if self.kind == PoolKind::Max {
            argmax = vec![0; out.len()];
        }
        let xs = x.data();
        let area = (ph * pw) as f64;
        for plane in 0..n * c {
            let xin = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let o = (plane * ho + oh) * wo + ow;
                    match self.kind {
                        PoolKind::Avg => {
                            let mut s = 0.0;
                            for i in 0..ph {
                                let row = xin + (oh * ph + i) * w + ow * pw;
                                s += xs[row..row + pw].iter().sum::<f64>();
                            }
                            out.data_mut()[o] = s / area;
                        }
                        PoolKind::Max => {
                            let mut best = (f64::NEG_INFINITY, 0);
                            for i in 0..ph {
                                for j in 0..pw {
                                    let idx = xin + (oh * ph + i) * w + ow * pw + j;
                                    if xs[idx] > best.0 {
                                        best = (xs[idx], idx);
                                    }
                                }
                            }
                            out.data_mut()[o] = best.0;
                            argmax[o] = best.1;
                        }
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.in_shape = Some(x.shape().to_vec());
            self.argmax = argmax;
        } else {
            self.in_shape = None;
        }
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let in_shape = self.in_shape.clone().ok_or(missing("pool backward"))?;
        let out_shape = self.output_shape(&in_shape)?;
        same_shape("pool backward", &out_shape, dy)?;
        let mut dx = Tensor::zeros(&in_shape);
        let (h, w) = (in_shape[2], in_shape[3]);
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let (ph, pw) = self.pool;
        match self.kind {
            PoolKind::Max => {
                for (o, &g) in dy.data().iter().enumerate() {
                    dx.data_mut()[self.argmax[o]] += g;
                }
            }
            PoolKind::Avg => {
                let area = (ph * pw) as f64;
                for plane in 0..in_shape[0] * in_shape[1] {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let g = dy.data()[(plane * ho + oh) * wo + ow] / area;
                            for i in 0..ph {
                                let row = plane * h * w + (oh * ph + i) * w + ow * pw;
                                dx.data_mut()[row..row + pw].iter_mut().for_each(|v| *v += g);
                            }
                        }
                    }
                }
            }
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.in_shape = None;
        self.argmax.clear();
    }
}

/// Inverted dropout: kept units are scaled by 1/(1-p) in train mode.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
    rng: ChaCha8Rng,
    seed: u64,
    mask: Option<Tensor>,
    /// Reuse the previous mask instead of drawing a new one (gradient checks).
    pub freeze_mask: bool,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        Dropout {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            mask: None,
            freeze_mask: false,
        }
    }

    /// (seed, word position) of the mask generator.
    pub fn rng_state(&self) -> (u64, u128) {
        (self.seed, self.rng.get_word_pos())
    }

    pub fn restore_rng(&mut self, seed: u64, word_pos: u128) {
        self.seed = seed;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.rng.set_word_pos(word_pos);
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Eval || self.p == 0.0 {
            self.mask = None;
            return Ok(x.clone());
        }
        let reuse = self.freeze_mask && self.mask.as_ref().is_some_and(|m| m.shape() == x.shape());
        if !reuse {
            let keep = 1.0 - self.p;
            let scale = 1.0 / keep;
            let mut mask = Tensor::zeros(x.shape());
            for v in mask.data_mut() {
                *v = if self.rng.gen::<f64>() < keep { scale } else { 0.0 };
            }
            self.mask = Some(mask);
        }
        let mask = self.mask.as_ref().expect("mask set above");
        let data = x.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
        Tensor::from_vec(x.shape(), data)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        match &self.mask {
            Some(mask) => {
                same_shape("dropout backward", mask.shape(), dy)?;
                let data = dy.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
                Tensor::from_vec(dy.shape(), data)
            }
            // eval-mode forward or p == 0: identity
            None => Ok(dy.clone()),
        }
    }

    pub fn clear_cache(&mut self) {
        if !self.freeze_mask {
            self.mask = None;
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Flatten {
    in_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.in_shape = Some(x.shape().to_vec());
        x.clone().reshaped(&[x.batch(), x.item_len()])
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let shape = self.in_shape.clone().ok_or(missing("flatten backward"))?;
        dy.clone().reshaped(&shape)
    }
}

/// y = x·Wᵀ + b with W of shape (outputs, inputs).
#[derive(Debug, Clone)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, weight: Tensor) -> Self {
        Dense {
            inputs,
            outputs,
            weight: Param::new("weight", weight),
            bias: Param::new("bias", Tensor::zeros(&[outputs])),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, d) = x.dims2("dense")?;
        if d != self.inputs {
            return Err(Error::ShapeMismatch {
                context: "dense".into(),
                expected: vec![n, self.inputs],
                actual: x.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[n, self.outputs]);
        for row in out.data_mut().chunks_mut(self.outputs) {
            row.copy_from_slice(self.bias.value.data());
        }
        gemm(n, d, self.outputs, x.data(), false, self.weight.value.data(), true, out.data_mut(), 1.0, 1.0);
        self.cache = (mode == Mode::Train).then(|| x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or(missing("dense backward"))?;
        let n = x.batch();
        same_shape("dense backward", &[n, self.outputs], dy)?;
        gemm(self.outputs, n, self.inputs, dy.data(), true, x.data(), false, self.weight.grad.data_mut(), 1.0, 1.0);
        for row in dy.data().chunks(self.outputs) {
            self.bias.grad.data_mut().iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let mut dx = Tensor::zeros(&[n, self.inputs]);
        gemm(n, self.outputs, self.inputs, dy.data(), false, self.weight.value.data(), false, dx.data_mut(), 1.0, 0.0);
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Row-wise x / max(‖x‖₂, 1e-12).
#[derive(Debug, Clone, Default)]
pub struct L2Normalize {
    cache: Option<(Tensor, Vec<f64>)>,
}

impl L2Normalize {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2("l2_normalize")?;
        let mut y = x.clone();
        let mut norms = Vec::with_capacity(x.batch());
        for row in y.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= denom);
            norms.push(norm);
        }
        self.cache = Some((y.clone(), norms));
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let (y, norms) = self.cache.as_ref().ok_or(missing("l2_normalize backward"))?;
        same_shape("l2_normalize backward", y.shape(), dy)?;
        let d = y.item_len();
        let mut dx = dy.clone();
        for ((g, yr), &norm) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)).zip(norms) {
            if norm > NORM_EPS {
                let dot: f64 = g.iter().zip(yr).map(|(a, b)| a * b).sum();
                g.iter_mut().zip(yr).for_each(|(a, b)| *a = (*a - b * dot) / norm);
            } else {
                g.iter_mut().for_each(|a| *a /= NORM_EPS);
            }
        }
        Ok(dx)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let d = x.item_len();
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(d) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    y
}

#[derive(Debug, Clone, Default)]
pub struct Softmax {
    cache: Option<Tensor>,
}

impl Softmax {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        x.dims2("softmax")?;
        let y = softmax_rows(x);
        self.cache = Some(y.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let y = self.cache.as_ref().ok_or(missing("softmax backward"))?;
        same_shape("softmax backward", y.shape(), dy)?;
        let d = y.item_len();
        let mut dx = dy.clone();
        for (g, yr) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
            let dot: f64 = g.iter().zip(yr).map(|(a, b)| a * b).sum();
            g.iter_mut().zip(yr).for_each(|(a, b)| *a = b * (*a - dot));
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elu_definition() {
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(elu(1.0), 1.0);
        assert!((elu(-50.0) + 1.0).abs() < 1e-12);
        assert!((elu(-1.0) - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn avg_pool_1x4() {
        let mut p = Pool2d::new(PoolKind::Avg, (1, 4));
        let x = Tensor::from_vec(&[1, 1, 1, 8], (1..=8).map(f64::from).collect()).unwrap();
        assert_eq!(p.forward(&x, Mode::Eval).unwrap().data(), &[2.5, 6.5]);
    }

    #[test]
    fn floor_pooling_drops_remainder() {
        let p = Pool2d::new(PoolKind::Avg, (1, 8));
        assert_eq!(p.output_shape(&[2, 16, 1, 375]).unwrap(), vec![2, 16, 1, 46]);
        let q = Pool2d::new(PoolKind::Max, (1, 2));
        assert_eq!(q.output_shape(&[1, 25, 1, 1495]).unwrap()[3], 747);
    }

    #[test]
    fn max_pool_routes_to_argmax() {
        let mut p = Pool2d::new(PoolKind::Max, (1, 2));
        let x = Tensor::from_vec(&[1, 1, 1, 5], vec![1.0, 3.0, 5.0, 2.0, 9.0]).unwrap();
        let y = p.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);
        let dx = p.backward(&Tensor::from_vec(&[1, 1, 1, 2], vec![10.0, 20.0]).unwrap()).unwrap();
        assert_eq!(dx.data(), &[0.0, 10.0, 20.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_input_grad_is_transpose_product() {
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut dense = Dense::new(3, 2, w);
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 0.0, -1.0]).unwrap();
        let y = dense.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.data(), &[-2.0, -2.0]);
        let dx = dense.backward(&Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        // Wᵀ·[1, 2]
        assert_eq!(dx.data(), &[9.0, 12.0, 15.0]);
        assert_eq!(dense.bias.grad.data(), &[1.0, 2.0]);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_preserves_expectation() {
        let x = Tensor::filled(&[1, 10_000], 1.0);
        let mut d = Dropout::new(0.5, 3);
        assert_eq!(d.forward(&x, Mode::Eval).unwrap(), x);
        // average over 10k masks of a single unit, and over units of one mask
        let mut acc = 0.0;
        let one = Tensor::filled(&[1, 1], 1.0);
        for _ in 0..10_000 {
            acc += d.forward(&one, Mode::Train).unwrap().data()[0];
        }
        assert!((acc / 10_000.0 - 1.0).abs() < 0.02);
        let y = d.forward(&x, Mode::Train).unwrap();
        let mean = y.data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.02);
    }

    #[test]
    fn batch_norm_train_output_is_standardized() {
        let mut bn = BatchNorm::new(3);
        let data: Vec<f64> = (0..4 * 3 * 5).map(|i| ((i * 37) % 11) as f64 * 0.7 - 2.0).collect();
        let x = Tensor::from_vec(&[4, 3, 1, 5], data).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|s| y.data()[(s * 3 + ch) * 5..(s * 3 + ch + 1) * 5].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 20.0;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 20.0;
            assert!(m.abs() < 1e-5);
            // eps slightly shrinks the variance
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
        assert!(bn.running_mean.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let x = Tensor::from_vec(&[2, 3], vec![1e4, -1e4, 0.0, 3.0, 3.0, 3.0]).unwrap();
        let y = softmax_rows(&x);
        assert!(y.is_finite());
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_guards_zero_rows() {
        let mut l2 = L2Normalize::default();
        let x = Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let y = l2.forward(&x).unwrap();
        assert_eq!(y.data(), &[0.6, 0.8, 0.0, 0.0]);
        let dx = l2.backward(&Tensor::filled(&[2, 2], 1.0)).unwrap();
        assert!(dx.is_finite());
    }
}
