//! 2-D cross-correlation layers over (channels, height, width) items.
//!
//! Dense convolutions go through im2col + GEMM one batch item at a time,
//! in blocks of output positions; the columns are rebuilt in backward
//! instead of being cached. Batch items
//! run through [`crate::par`] and their weight gradients are summed in item
//! order, so results do not depend on the thread count.

use ndarray::{linalg::general_mat_mul, ArrayView2, ArrayViewMut2, ShapeBuilder};
use serde::{Deserialize, Serialize};

use super::{Mode, Param, Tensor};
use super::tensor::gemm;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output keeps the input extent; an odd remainder pads after.
    Same,
    Valid,
}

/// (output length, padding before) along one axis.
pub(crate) fn axis_geometry(n: usize, k: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => Ok((n, (k - 1) / 2)),
        Padding::Valid if k <= n => Ok((n - k + 1, 0)),
        Padding::Valid => Err(Error::invalid(format!(
            "kernel extent {k} exceeds input extent {n} with valid padding"
        ))),
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(c: usize, h: usize, w: usize, kernel: (usize, usize), padding: Padding) -> Result<Self> {
        let (ho, ph) = axis_geometry(h, kernel.0, padding)?;
        let (wo, pw) = axis_geometry(w, kernel.1, padding)?;
        Ok(Geometry {
            c,
            h,
            w,
            kh: kernel.0,
            kw: kernel.1,
            ph,
            pw,
            ho,
            wo,
        })
    }

    /// Valid output-column range for kernel column `j`.
    fn ow_range(&self, j: usize) -> (usize, usize) {
        let lo = self.pw.saturating_sub(j);
        let hi = (self.w + self.pw).saturating_sub(j).min(self.wo);
        (lo, hi.max(lo))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }
}

/// Output positions per im2col block; keeps the column buffer near L2 size.
fn block_width(k: usize, p: usize) -> usize {
    (32_768 / k.max(1)).max(64).min(p.max(1))
}

/// Walks output positions [p0, p1) row by row, yielding
/// (output row, first column, end column, offset into the block).
fn segments(g: &Geometry, p0: usize, p1: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
    let wo = g.wo;
    (p0 / wo..=(p1 - 1) / wo).map(move |oh| {
        let a = p0.max(oh * wo) - oh * wo;
        let b = p1.min((oh + 1) * wo) - oh * wo;
        (oh, a, b, oh * wo + a - p0)
    })
}

/// Columns for output positions [p0, p1) into `cols` (K rows of p1 - p0).
fn im2col(x: &[f64], g: &Geometry, p0: usize, p1: usize, cols: &mut [f64]) {
    let bw = p1 - p0;
    for ci in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (ci * g.kh + i) * g.kw + j;
                let row = &mut cols[r * bw..(r + 1) * bw];
                let (lo, hi) = g.ow_range(j);
                for (oh, a, b, off) in segments(g, p0, p1) {
                    let dst = &mut row[off..off + (b - a)];
                    let ih = oh as isize + i as isize - g.ph as isize;
                    let (va, vb) = (a.max(lo), b.min(hi));
                    if ih < 0 || ih >= g.h as isize || va >= vb {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + ih as usize) * g.w..];
                    dst[..va - a].fill(0.0);
                    let s0 = va + j - g.pw;
                    dst[va - a..vb - a].copy_from_slice(&src[s0..s0 + (vb - va)]);
                    dst[vb - a..].fill(0.0);
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, p0: usize, p1: usize, dx: &mut [f64]) {
    let bw = p1 - p0;
    for ci in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (ci * g.kh + i) * g.kw + j;
                let row = &cols[r * bw..(r + 1) * bw];
                let (lo, hi) = g.ow_range(j);
                for (oh, a, b, off) in segments(g, p0, p1) {
                    let ih = oh as isize + i as isize - g.ph as isize;
                    let (va, vb) = (a.max(lo), b.min(hi));
                    if ih < 0 || ih >= g.h as isize || va >= vb {
                        continue;
                    }
                    let base = (ci * g.h + ih as usize) * g.w + va + j - g.pw;
                    let src = &row[off + va - a..off + vb - a];
                    dx[base..base + (vb - va)].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
    }
}

/// Row-major (rows, cols) view with row stride `stride`.
fn strided(data: &[f64], rows: usize, cols: usize, stride: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols).strides((stride, 1)), data).expect("strided view")
}

fn strided_mut(data: &mut [f64], rows: usize, cols: usize, stride: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols).strides((stride, 1)), data).expect("strided view")
}

fn check_channels(context: &str, got: &[usize], expected_c: usize) -> Result<()> {
    if got.len() != 4 || got[1] != expected_c {
        let mut expected = got.to_vec();
        if expected.len() == 4 {
            expected[1] = expected_c;
        }
        return Err(Error::ShapeMismatch {
            context: context.into(),
            expected,
            actual: got.to_vec(),
        });
    }
    Ok(())
}

/// Dense 2-D cross-correlation with stride 1.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub padding: Padding,
    pub weight: Param,
    pub bias: Option<Param>,
    /// When false, backward skips the input gradient (first layer of a net).
    pub input_grad: bool,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        padding: Padding,
        bias: bool,
        weight: Tensor,
    ) -> Self {
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            padding,
            weight: Param::new("weight", weight),
            bias: bias.then(|| Param::new("bias", Tensor::zeros(&[out_ch]))),
            input_grad: true,
            cache: None,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        check_channels("conv2d", input, self.in_ch)?;
        let g = Geometry::new(self.in_ch, input[2], input[3], self.kernel, self.padding)?;
        Ok(vec![input[0], self.out_ch, g.ho, g.wo])
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4("conv2d")?;
        check_channels("conv2d", x.shape(), self.in_ch)?;
        let g = Geometry::new(c, h, w, self.kernel, self.padding)?;
        let k = c * g.kh * g.kw;
        let p = g.ho * g.wo;
        let mut out = Tensor::zeros(&[n, self.out_ch, g.ho, g.wo]);
        let wt = self.weight.value.data();
        let bias = self.bias.as_ref().map(|b| b.value.data());
        let oc = self.out_ch;
        let bw = block_width(k, p);
        par::for_each_chunk_mut(out.data_mut(), oc * p, |s, dst| {
            let xs = x.item(s);
            if g.is_pointwise() {
                gemm(oc, k, p, wt, false, xs, false, dst, 1.0, 0.0);
            } else {
                let wv = ArrayView2::from_shape((oc, k), wt).expect("conv weight");
                let mut cols = vec![0.0; k * bw];
                for p0 in (0..p).step_by(bw) {
                    let p1 = (p0 + bw).min(p);
                    let cols = &mut cols[..k * (p1 - p0)];
                    im2col(xs, &g, p0, p1, cols);
                    let cv = ArrayView2::from_shape((k, p1 - p0), &*cols).expect("cols");
                    let mut ov = strided_mut(&mut dst[p0..], oc, p1 - p0, p);
                    general_mat_mul(1.0, &wv, &cv, 0.0, &mut ov);
                }
            }
            if let Some(b) = bias {
                for (o, row) in dst.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += b[o]);
                }
            }
        });
        self.cache = (mode == Mode::Train).then(|| x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("conv2d backward"))?;
        let (n, c, h, w) = x.dims4("conv2d")?;
        let g = Geometry::new(c, h, w, self.kernel, self.padding)?;
        let k = c * g.kh * g.kw;
        let p = g.ho * g.wo;
        let expected = [n, self.out_ch, g.ho, g.wo];
        if dy.shape() != expected {
            return Err(Error::ShapeMismatch {
                context: "conv2d backward".into(),
                expected: expected.to_vec(),
                actual: dy.shape().to_vec(),
            });
        }
        let wt = self.weight.value.data();
        let input_grad = self.input_grad;
        let oc = self.out_ch;
        let bw = block_width(k, p);
        let parts = par::map_indexed(n, |s| {
            let xs = x.item(s);
            let dys = dy.item(s);
            let db: Vec<f64> = dys.chunks(p).map(|r| r.iter().sum()).collect();
            let mut dw = vec![0.0; oc * k];
            if g.is_pointwise() {
                gemm(oc, p, k, dys, false, xs, true, &mut dw, 1.0, 0.0);
                let dx = input_grad.then(|| {
                    let mut dx = vec![0.0; k * p];
                    gemm(k, oc, p, wt, true, dys, false, &mut dx, 1.0, 0.0);
                    dx
                });
                return (dw, db, dx);
            }
            let wv = ArrayView2::from_shape((oc, k), wt).expect("conv weight");
            let mut dwv = ArrayViewMut2::from_shape((oc, k), &mut dw[..]).expect("conv weight grad");
            let mut dx = input_grad.then(|| vec![0.0; c * h * w]);
            let mut cols = vec![0.0; k * bw];
            let mut dcols = vec![0.0; if input_grad { k * bw } else { 0 }];
            for p0 in (0..p).step_by(bw) {
                let p1 = (p0 + bw).min(p);
                let cols = &mut cols[..k * (p1 - p0)];
                im2col(xs, &g, p0, p1, cols);
                let cv = ArrayView2::from_shape((k, p1 - p0), &*cols).expect("cols");
                let gv = strided(&dys[p0..], oc, p1 - p0, p);
                general_mat_mul(1.0, &gv, &cv.t(), 1.0, &mut dwv);
                if let Some(dx) = dx.as_mut() {
                    let dcols = &mut dcols[..k * (p1 - p0)];
                    let mut dv = ArrayViewMut2::from_shape((k, p1 - p0), &mut *dcols).expect("dcols");
                    general_mat_mul(1.0, &wv.t(), &gv, 0.0, &mut dv);
                    col2im(dcols, &g, p0, p1, dx);
                }
            }
            (dw, db, dx)
        });
        let mut dx_all = if input_grad {
            Tensor::zeros(x.shape())
        } else {
            Tensor::default()
        };
        let item = c * h * w;
        for (s, (dw, db, dx)) in parts.into_iter().enumerate() {
            self.weight
                .grad
                .data_mut()
                .iter_mut()
                .zip(&dw)
                .for_each(|(a, b)| *a += b);
            if let Some(bias) = self.bias.as_mut() {
                bias.grad.data_mut().iter_mut().zip(&db).for_each(|(a, b)| *a += b);
            }
            if let Some(dx) = dx {
                dx_all.data_mut()[s * item..(s + 1) * item].copy_from_slice(&dx);
            }
        }
        Ok(dx_all)
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Per-channel spatial filtering: each input channel c produces `multiplier`
/// output channels `c·multiplier + m`.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub channels: usize,
    pub multiplier: usize,
    pub kernel: (usize, usize),
    pub padding: Padding,
    /// (channels·multiplier, kh, kw)
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<Tensor>,
}

impl DepthwiseConv2d {
    pub fn new(
        channels: usize,
        multiplier: usize,
        kernel: (usize, usize),
        padding: Padding,
        bias: bool,
        weight: Tensor,
    ) -> Self {
        DepthwiseConv2d {
            channels,
            multiplier,
            kernel,
            padding,
            weight: Param::new("weight", weight),
            bias: bias.then(|| Param::new("bias", Tensor::zeros(&[channels * multiplier]))),
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.channels * self.multiplier
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        check_channels("depthwise_conv2d", input, self.channels)?;
        let g = Geometry::new(self.channels, input[2], input[3], self.kernel, self.padding)?;
        Ok(vec![input[0], self.out_channels(), g.ho, g.wo])
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4("depthwise_conv2d")?;
        check_channels("depthwise_conv2d", x.shape(), self.channels)?;
        let g = Geometry::new(c, h, w, self.kernel, self.padding)?;
        let oc = self.out_channels();
        let p = g.ho * g.wo;
        let mut out = Tensor::zeros(&[n, oc, g.ho, g.wo]);
        let wt = self.weight.value.data();
        let bias = self.bias.as_ref().map(|b| b.value.data());
        let d = self.multiplier;
        par::for_each_chunk_mut(out.data_mut(), oc * p, |s, dst| {
            let xs = x.item(s);
            for o in 0..oc {
                let ci = o / d;
                let out_o = &mut dst[o * p..(o + 1) * p];
                if let Some(b) = bias {
                    out_o.fill(b[o]);
                }
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let wv = wt[(o * g.kh + i) * g.kw + j];
                        let (lo, hi) = g.ow_range(j);
                        if lo >= hi {
                            continue;
                        }
                        for oh in 0..g.ho {
                            let ih = oh as isize + i as isize - g.ph as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let src = &xs[(ci * g.h + ih as usize) * g.w + lo + j - g.pw..];
                            let row = &mut out_o[oh * g.wo + lo..oh * g.wo + hi];
                            row.iter_mut().zip(src).for_each(|(a, b)| *a += wv * b);
                        }
                    }
                }
            }
        });
        self.cache = (mode == Mode::Train).then(|| x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .as_ref()
            .ok_or(Error::BackwardBeforeForward("depthwise_conv2d backward"))?;
        let (n, c, h, w) = x.dims4("depthwise_conv2d")?;
        let g = Geometry::new(c, h, w, self.kernel, self.padding)?;
        let oc = self.out_channels();
        let p = g.ho * g.wo;
        let expected = [n, oc, g.ho, g.wo];
        if dy.shape() != expected {
            return Err(Error::ShapeMismatch {
                context: "depthwise_conv2d backward".into(),
                expected: expected.to_vec(),
                actual: dy.shape().to_vec(),
            });
        }
        let wt = self.weight.value.data();
        let d = self.multiplier;
        let nw = wt.len();
        let parts = par::map_indexed(n, |s| {
            let xs = x.item(s);
            let dys = dy.item(s);
            let mut dw = vec![0.0; nw];
            let mut db = vec![0.0; oc];
            let mut dx = vec![0.0; c * h * w];
            for o in 0..oc {
                let ci = o / d;
                let dy_o = &dys[o * p..(o + 1) * p];
                db[o] = dy_o.iter().sum();
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let widx = (o * g.kh + i) * g.kw + j;
                        let wv = wt[widx];
                        let (lo, hi) = g.ow_range(j);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oh in 0..g.ho {
                            let ih = oh as isize + i as isize - g.ph as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let base = (ci * g.h + ih as usize) * g.w + lo + j - g.pw;
                            let g_row = &dy_o[oh * g.wo + lo..oh * g.wo + hi];
                            let x_row = &xs[base..base + (hi - lo)];
                            acc += g_row.iter().zip(x_row).map(|(a, b)| a * b).sum::<f64>();
                            let dx_row = &mut dx[base..base + (hi - lo)];
                            dx_row.iter_mut().zip(g_row).for_each(|(a, b)| *a += wv * b);
                        }
                        dw[widx] += acc;
                    }
                }
            }
            (dw, db, dx)
        });
        let mut dx_all = Tensor::zeros(x.shape());
        let item = c * h * w;
        for (s, (dw, db, dx)) in parts.into_iter().enumerate() {
            self.weight.grad.data_mut().iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
            if let Some(bias) = self.bias.as_mut() {
                bias.grad.data_mut().iter_mut().zip(&db).for_each(|(a, b)| *a += b);
            }
            dx_all.data_mut()[s * item..(s + 1) * item].copy_from_slice(&dx);
        }
        Ok(dx_all)
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Depthwise (multiplier 1) followed by a pointwise 1×1 channel mix.
#[derive(Debug, Clone)]
pub struct SeparableConv2d {
    pub depthwise: DepthwiseConv2d,
    pub pointwise: Conv2d,
}

impl SeparableConv2d {
    pub fn new(depthwise: DepthwiseConv2d, pointwise: Conv2d) -> Self {
        SeparableConv2d { depthwise, pointwise }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mid = self.depthwise.output_shape(input)?;
        self.pointwise.output_shape(&mid)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mid = self.depthwise.forward(x, mode)?;
        self.pointwise.forward(&mid, mode)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let dmid = self.pointwise.backward(dy)?;
        self.depthwise.backward(&dmid)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.depthwise.params();
        v.extend(self.pointwise.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.depthwise.params_mut();
        v.extend(self.pointwise.params_mut());
        v
    }

    pub fn clear_cache(&mut self) {
        self.depthwise.clear_cache();
        self.pointwise.clear_cache();
    }
}
