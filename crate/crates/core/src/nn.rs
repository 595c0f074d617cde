//! Differentiable layers: convolution (plain, strided, dilated), transposed
//! convolution, 2x2 max pooling with argmax indices and the matching
//! unpooling, batch normalization, PReLU and spatial dropout.
//!
//! Convolutions lower to im2col + GEMM per batch sample. Cross-correlation
//! semantics, no kernel flip.

use std::sync::Arc;

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::ops::check_prob;
use crate::rng;
use crate::tensor::{matmul, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Stride, padding and dilation of a 2-D convolution (square, both axes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvCfg {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1 }
    }
}

impl ConvCfg {
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self { stride: 1, padding: dilation * (kernel - 1) / 2, dilation }
    }
}

/// Geometry of a convolution over a `(c, h, w)` plane stack.
#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, cfg: ConvCfg) -> Result<Self> {
        if cfg.stride == 0 || cfg.dilation == 0 {
            return contract_err("stride and dilation must be positive");
        }
        let out = |extent: usize, k: usize| -> Result<usize> {
            let span = cfg.dilation * (k - 1) + 1;
            let padded = extent + 2 * cfg.padding;
            if span > padded {
                return shape_err(format!(
                    "kernel extent {span} exceeds padded input extent {padded}"
                ));
            }
            Ok((padded - span) / cfg.stride + 1)
        };
        let oh = out(h, kh)?;
        let ow = out(w, kw)?;
        Ok(Self { c, h, w, kh, kw, stride: cfg.stride, pad: cfg.padding, dil: cfg.dilation, oh, ow })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output columns `[lo, hi)` for a kernel column offset, i.e. those
    /// whose input column lands inside `[0, w)`.
    fn col_range(&self, kj: usize) -> (usize, usize, isize) {
        let off = (kj * self.dil) as isize - self.pad as isize;
        let s = self.stride as isize;
        let w = self.w as isize;
        // ix = ox * s + off in [0, w)
        let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
        let hi = if off >= w { 0 } else { (((w - off - 1) / s) + 1).max(0) as usize };
        (lo.min(self.ow), hi.min(self.ow).max(lo.min(self.ow)), off)
    }

    fn im2col<T: Element>(&self, src: &[T], col: &mut [T]) {
        let p = self.cols();
        for c in 0..self.c {
            let plane = &src[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    let row = &mut col[r * p..(r + 1) * p];
                    let (lo, hi, off) = self.col_range(kj);
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki * self.dil) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if hi <= lo {
                            continue;
                        }
                        if self.stride == 1 {
                            let start = (lo as isize + off) as usize;
                            dst[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                dst[ox] = src_row[(ox as isize * self.stride as isize + off) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geom::im2col`]: accumulates columns into `dst`.
    fn col2im<T: Element>(&self, col: &[T], dst: &mut [T]) {
        let p = self.cols();
        for c in 0..self.c {
            let plane = &mut dst[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    let row = &col[r * p..(r + 1) * p];
                    let (lo, hi, off) = self.col_range(kj);
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki * self.dil) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &row[oy * self.ow..(oy + 1) * self.ow];
                        let dst_row = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in lo..hi {
                            let ix = (ox as isize * self.stride as isize + off) as usize;
                            dst_row[ix] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Element>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v += *b;
        }
    }
}

fn bias_grad<T: Element>(g: &Tensor<T>, channels: usize) -> Tensor<T> {
    let (n, _, h, w) = g.dims4().expect("rank 4");
    let plane = h * w;
    let mut out = Tensor::zeros(&[channels]);
    let od = out.data_mut();
    let gd = g.data();
    for i in 0..n {
        for (c, o) in od.iter_mut().enumerate() {
            let base = (i * channels + c) * plane;
            *o += gd[base..base + plane].iter().copied().sum::<T>();
        }
    }
    out
}

fn check_bias<T: Element>(bias: Option<&Var<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return shape_err(format!("bias shape {:?}, expected [{channels}]", b.shape()));
        }
    }
    Ok(())
}

/// `x (N, C_in, H, W)` with `weight (C_out, C_in, kH, kW)`.
pub fn conv2d<T: Element>(
    tape: &Tape<T>,
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    cfg: ConvCfg,
) -> Result<Var<T>> {
    let (n, cin, h, w) = x.value().dims4()?;
    let (cout, wcin, kh, kw) = weight.value().dims4()?;
    if cin != wcin {
        return shape_err(format!("conv2d: input has {cin} channels, weight expects {wcin}"));
    }
    check_bias(bias, cout)?;
    let g = Geom::new(cin, h, w, kh, kw, cfg)?;
    let (k, p) = (g.rows(), g.cols());
    let xs = cin * h * w;
    let os = cout * p;

    let xv = x.value_arc().clone();
    let wv = weight.value_arc().clone();
    let mut out = vec![T::zero(); n * os];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for i in 0..n {
        let xi = &xv.data()[i * xs..(i + 1) * xs];
        let colref: &[T] = if g.is_pointwise() {
            xi
        } else {
            g.im2col(xi, &mut col);
            &col
        };
        matmul(cout, k, p, wv.data(), false, colref, false, &mut out[i * os..(i + 1) * os], false);
        if let Some(b) = bias {
            add_bias(&mut out[i * os..(i + 1) * os], b.value().data(), p);
        }
    }
    let out = Tensor::new(&[n, cout, g.oh, g.ow], out)?;

    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    Ok(tape.record(out, &inputs, move |gout, needs| {
        let gd = gout.data();
        let mut gx = needs[0].then(|| vec![T::zero(); n * xs]);
        let mut gw = needs[1].then(|| vec![T::zero(); cout * k]);
        let mut col = vec![T::zero(); k * p];
        for i in 0..n {
            let gi = &gd[i * os..(i + 1) * os];
            if let Some(gw) = gw.as_mut() {
                let xi = &xv.data()[i * xs..(i + 1) * xs];
                let colref: &[T] = if g.is_pointwise() {
                    xi
                } else {
                    g.im2col(xi, &mut col);
                    &col
                };
                matmul(cout, p, k, gi, false, colref, true, gw, true);
            }
            if let Some(gx) = gx.as_mut() {
                let gxi = &mut gx[i * xs..(i + 1) * xs];
                if g.is_pointwise() {
                    matmul(k, cout, p, wv.data(), true, gi, false, gxi, false);
                } else {
                    matmul(k, cout, p, wv.data(), true, gi, false, &mut col, false);
                    g.col2im(&col, gxi);
                }
            }
        }
        let mut res = vec![
            gx.map(|d| Tensor::new(&[n, cin, h, w], d).expect("shape")),
            gw.map(|d| Tensor::new(&[cout, cin, kh, kw], d).expect("shape")),
        ];
        if needs.len() > 2 {
            res.push(needs[2].then(|| bias_grad(gout, cout)));
        }
        res
    }))
}

/// Transposed convolution, the adjoint of [`conv2d`] with the same weight:
/// `weight (C_in, C_out, kH, kW)`, output extent `(H-1)*stride - 2*pad + k`.
pub fn conv_transpose2d<T: Element>(
    tape: &Tape<T>,
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    stride: usize,
    padding: usize,
) -> Result<Var<T>> {
    let (n, cin, h, w) = x.value().dims4()?;
    let (wcin, cout, kh, kw) = weight.value().dims4()?;
    if cin != wcin {
        return shape_err(format!("conv_transpose2d: input has {cin} channels, weight expects {wcin}"));
    }
    check_bias(bias, cout)?;
    if stride == 0 {
        return contract_err("stride must be positive");
    }
    let ho = ((h - 1) * stride + kh) as isize - 2 * padding as isize;
    let wo = ((w - 1) * stride + kw) as isize - 2 * padding as isize;
    if ho < 1 || wo < 1 {
        return shape_err(format!("conv_transpose2d output extent {ho}x{wo} is not positive"));
    }
    let (ho, wo) = (ho as usize, wo as usize);
    let cfg = ConvCfg { stride, padding, dilation: 1 };
    // Geometry of the forward convolution this op is the adjoint of.
    let g = Geom::new(cout, ho, wo, kh, kw, cfg)?;
    if (g.oh, g.ow) != (h, w) {
        return shape_err(format!("conv_transpose2d geometry mismatch: {}x{} vs {h}x{w}", g.oh, g.ow));
    }
    let (k, p) = (g.rows(), g.cols());
    let xs = cin * p;
    let os = cout * ho * wo;

    let xv = x.value_arc().clone();
    let wv = weight.value_arc().clone();
    let mut out = vec![T::zero(); n * os];
    let mut col = vec![T::zero(); k * p];
    for i in 0..n {
        matmul(k, cin, p, wv.data(), true, &xv.data()[i * xs..(i + 1) * xs], false, &mut col, false);
        g.col2im(&col, &mut out[i * os..(i + 1) * os]);
        if let Some(b) = bias {
            add_bias(&mut out[i * os..(i + 1) * os], b.value().data(), ho * wo);
        }
    }
    let out = Tensor::new(&[n, cout, ho, wo], out)?;

    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    Ok(tape.record(out, &inputs, move |gout, needs| {
        let gd = gout.data();
        let mut gx = needs[0].then(|| vec![T::zero(); n * xs]);
        let mut gw = needs[1].then(|| vec![T::zero(); cin * k]);
        let mut col = vec![T::zero(); k * p];
        for i in 0..n {
            g.im2col(&gd[i * os..(i + 1) * os], &mut col);
            if let Some(gx) = gx.as_mut() {
                matmul(cin, k, p, wv.data(), false, &col, false, &mut gx[i * xs..(i + 1) * xs], false);
            }
            if let Some(gw) = gw.as_mut() {
                matmul(cin, p, k, &xv.data()[i * xs..(i + 1) * xs], false, &col, true, gw, true);
            }
        }
        let mut res = vec![
            gx.map(|d| Tensor::new(&[n, cin, h, w], d).expect("shape")),
            gw.map(|d| Tensor::new(&[cin, cout, kh, kw], d).expect("shape")),
        ];
        if needs.len() > 2 {
            res.push(needs[2].then(|| bias_grad(gout, cout)));
        }
        res
    }))
}

/// Argmax positions of a 2x2/stride-2 max pool: for each pooled element, the
/// offset `y * W + x` of the winning input inside its plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    input_shape: [usize; 4],
    offsets: Arc<Vec<u32>>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> [usize; 4] {
        self.input_shape
    }

    pub fn pooled_shape(&self) -> [usize; 4] {
        let [n, c, h, w] = self.input_shape;
        [n, c, h / 2, w / 2]
    }

    pub fn offsets(&self) -> &[u32] {
        &self.offsets
    }

    /// Checks every offset against its pooling window.
    pub fn validate(&self) -> Result<()> {
        let [_, _, h, w] = self.input_shape;
        let (ph, pw) = (h / 2, w / 2);
        for (k, &off) in self.offsets.iter().enumerate() {
            let within = k % (ph * pw);
            let (oy, ox) = (within / pw, within % pw);
            let (y, x) = (off as usize / w, off as usize % w);
            if y / 2 != oy || x / 2 != ox || y >= h {
                return Err(Error::Contract(format!(
                    "pool index corruption: offset {off} of element {k} lies outside its window"
                )));
            }
        }
        Ok(())
    }
}

/// 2x2 max pool with stride 2. Ties go to the first maximum in row-major
/// order.
pub fn maxpool2d<T: Element>(tape: &Tape<T>, x: &Var<T>) -> Result<(Var<T>, PoolIndices)> {
    let (n, c, h, w) = x.value().dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return contract_err(format!("max pool needs even spatial extents, got {h}x{w}"));
    }
    let (ph, pw) = (h / 2, w / 2);
    let xd = x.value().data();
    let mut out = Vec::with_capacity(n * c * ph * pw);
    let mut idx = Vec::with_capacity(n * c * ph * pw);
    for p in 0..n * c {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..ph {
            for ox in 0..pw {
                let mut best = (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let o = (2 * oy + dy) * w + 2 * ox + dx;
                    if plane[o] > plane[best] {
                        best = o;
                    }
                }
                out.push(plane[best]);
                idx.push(best as u32);
            }
        }
    }
    let indices = PoolIndices { input_shape: [n, c, h, w], offsets: Arc::new(idx) };
    let out = Tensor::new(&[n, c, ph, pw], out)?;
    let offsets = indices.offsets.clone();
    let var = tape.record(out, &[x], move |g, _| {
        let mut gi = vec![T::zero(); n * c * h * w];
        let per = ph * pw;
        for (k, &v) in g.data().iter().enumerate() {
            gi[(k / per) * h * w + offsets[k] as usize] += v;
        }
        vec![Some(Tensor::new(&[n, c, h, w], gi).expect("shape"))]
    });
    Ok((var, indices))
}

/// Scatters each value to its recorded argmax position, zeros elsewhere.
pub fn max_unpool2d<T: Element>(tape: &Tape<T>, y: &Var<T>, indices: &PoolIndices) -> Result<Var<T>> {
    if y.shape() != indices.pooled_shape() {
        return shape_err(format!(
            "unpool input {:?} does not match pooled shape {:?}",
            y.shape(),
            indices.pooled_shape()
        ));
    }
    indices.validate()?;
    let [n, c, h, w] = indices.input_shape;
    let per = (h / 2) * (w / 2);
    let mut out = vec![T::zero(); n * c * h * w];
    for (k, &v) in y.value().data().iter().enumerate() {
        out[(k / per) * h * w + indices.offsets[k] as usize] = v;
    }
    let out = Tensor::new(&[n, c, h, w], out)?;
    let offsets = indices.offsets.clone();
    let pooled = indices.pooled_shape();
    Ok(tape.record(out, &[y], move |g, _| {
        let gd = g.data();
        let gi = (0..offsets.len()).map(|k| gd[(k / per) * h * w + offsets[k] as usize]).collect();
        vec![Some(Tensor::new(&pooled, gi).expect("shape"))]
    }))
}

/// Running statistics and hyperparameters of one batch-norm layer. The
/// learnable scale and shift live with the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub updated: bool,
}

impl BatchNormState {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPSILON: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::MOMENTUM,
            epsilon: Self::EPSILON,
            updated: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Batch normalization over `(N, H, W)` per channel.
pub fn batchnorm2d<T: Element>(
    tape: &Tape<T>,
    x: &Var<T>,
    scale: &Var<T>,
    shift: &Var<T>,
    state: &mut BatchNormState,
    mode: Mode,
) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    if state.channels() != c || scale.shape() != [c] || shift.shape() != [c] {
        return shape_err(format!("batchnorm over {c} channels got mismatched parameters"));
    }
    let plane = h * w;
    let m = n * plane;
    let xd = x.value().data();
    let each = move |ch: usize| (0..n).flat_map(move |i| ((i * c + ch) * plane)..((i * c + ch) * plane + plane));

    let (mean, inv_std): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            if m < 2 {
                return contract_err("batchnorm in train mode needs at least two values per channel");
            }
            let mut means = Vec::with_capacity(c);
            let mut inv = Vec::with_capacity(c);
            for ch in 0..c {
                let mean = each(ch).map(|k| xd[k].to_f64()).sum::<f64>() / m as f64;
                let var = each(ch).map(|k| (xd[k].to_f64() - mean).powi(2)).sum::<f64>() / m as f64;
                let unbiased = var * m as f64 / (m - 1) as f64;
                let mo = state.momentum;
                state.running_mean[ch] = (1.0 - mo) * state.running_mean[ch] + mo * mean;
                state.running_var[ch] = (1.0 - mo) * state.running_var[ch] + mo * unbiased;
                means.push(mean);
                inv.push(1.0 / (var + state.epsilon).sqrt());
            }
            state.updated = true;
            (means, inv)
        }
        Mode::Eval => {
            if !state.updated {
                log::warn!("batchnorm evaluated before any training update; using initial statistics");
            }
            let inv = state.running_var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
            (state.running_mean.clone(), inv)
        }
    };

    let sc = scale.value().data();
    let sh = shift.value().data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for ch in 0..c {
        let (mu, is) = (T::from_f64(mean[ch]), T::from_f64(inv_std[ch]));
        for k in each(ch) {
            let xh = (xd[k] - mu) * is;
            xhat[k] = xh;
            out[k] = sc[ch] * xh + sh[ch];
        }
    }
    let out = Tensor::new(&[n, c, h, w], out)?;
    let sv = scale.value_arc().clone();
    Ok(tape.record(out, &[x, scale, shift], move |g, needs| {
        let gd = g.data();
        let mut gscale = vec![T::zero(); c];
        let mut gshift = vec![T::zero(); c];
        let mut gx = needs[0].then(|| vec![T::zero(); gd.len()]);
        for ch in 0..c {
            let (mut sg, mut sgx) = (0.0f64, 0.0f64);
            for k in each(ch) {
                sg += gd[k].to_f64();
                sgx += gd[k].to_f64() * xhat[k].to_f64();
            }
            gshift[ch] = T::from_f64(sg);
            gscale[ch] = T::from_f64(sgx);
            if let Some(gx) = gx.as_mut() {
                let s = sv.data()[ch].to_f64();
                let is = inv_std[ch];
                match mode {
                    Mode::Train => {
                        // dx = s*is/M * (M*g - sum(g) - xhat*sum(g*xhat))
                        let mf = m as f64;
                        let a = T::from_f64(s * is);
                        let mean_g = T::from_f64(sg / mf);
                        let mean_gx = T::from_f64(sgx / mf);
                        for k in each(ch) {
                            gx[k] = a * (gd[k] - mean_g - xhat[k] * mean_gx);
                        }
                    }
                    Mode::Eval => {
                        let a = T::from_f64(s * is);
                        for k in each(ch) {
                            gx[k] = a * gd[k];
                        }
                    }
                }
            }
        }
        vec![
            gx.map(|d| Tensor::new(&[n, c, h, w], d).expect("shape")),
            needs[1].then(|| Tensor::new(&[c], gscale).expect("shape")),
            needs[2].then(|| Tensor::new(&[c], gshift).expect("shape")),
        ]
    }))
}

/// `x` where positive, `slope[c] * x` elsewhere.
pub fn prelu<T: Element>(tape: &Tape<T>, x: &Var<T>, slopes: &Var<T>) -> Result<Var<T>> {
    let (_, c, h, w) = x.value().dims4()?;
    if slopes.shape() != [c] {
        return shape_err(format!("prelu slopes {:?}, expected [{c}]", slopes.shape()));
    }
    let plane = h * w;
    let zero = T::zero();
    let a = slopes.value().data();
    let xd = x.value().data();
    let out: Vec<T> = xd
        .iter()
        .enumerate()
        .map(|(k, &v)| if v > zero { v } else { a[(k / plane) % c] * v })
        .collect();
    let out = Tensor::new(x.shape(), out)?;
    let (xv, av) = (x.value_arc().clone(), slopes.value_arc().clone());
    Ok(tape.record(out, &[x, slopes], move |g, needs| {
        let (gd, xd, a) = (g.data(), xv.data(), av.data());
        let gx = needs[0].then(|| {
            let d = gd
                .iter()
                .zip(xd)
                .enumerate()
                .map(|(k, (&g, &x))| if x > zero { g } else { a[(k / plane) % c] * g })
                .collect();
            Tensor::new(xv.shape(), d).expect("shape")
        });
        let ga = needs[1].then(|| {
            let mut s = vec![zero; c];
            for (k, (&g, &x)) in gd.iter().zip(xd).enumerate() {
                if x <= zero {
                    s[(k / plane) % c] += g * x;
                }
            }
            Tensor::new(&[c], s).expect("shape")
        });
        vec![gx, ga]
    }))
}

/// Zeroes whole channels with probability `p` in train mode, rescaling
/// survivors by `1 / (1 - p)`. Eval mode returns the input unchanged.
pub fn spatial_dropout2d<T: Element>(
    tape: &Tape<T>,
    x: &Var<T>,
    p: f64,
    seed: u64,
    mode: Mode,
) -> Result<Var<T>> {
    check_prob(p)?;
    let (n, c, h, w) = x.value().dims4()?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x.clone());
    }
    let mut r = rng::rng(seed);
    let keep_scale = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..n * c).map(|_| if r.random::<f64>() < p { T::zero() } else { keep_scale }).collect();
    let plane = h * w;
    let out: Vec<T> = x.value().data().iter().enumerate().map(|(k, &v)| v * mask[k / plane]).collect();
    let out = Tensor::new(x.shape(), out)?;
    Ok(tape.record(out, &[x], move |g, _| {
        let d = g.data().iter().enumerate().map(|(k, &v)| v * mask[k / plane]).collect();
        vec![Some(Tensor::new(g.shape(), d).expect("shape"))]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::ops;
    use crate::tensor::Init;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::create(shape, Init::Uniform { seed, lo: -1.0, hi: 1.0 }).unwrap()
    }

    fn c(t: Tensor<f64>) -> Var<f64> {
        Var::constant(t)
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, b: Option<&Tensor<f64>>, cfg: ConvCfg) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims4().unwrap();
        let (cout, _, kh, kw) = wt.dims4().unwrap();
        let oh = (h + 2 * cfg.padding - cfg.dilation * (kh - 1) - 1) / cfg.stride + 1;
        let ow = (w + 2 * cfg.padding - cfg.dilation * (kw - 1) - 1) / cfg.stride + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for i in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * cfg.stride + ki * cfg.dilation) as isize - cfg.padding as isize;
                                    let ix = (ox * cfg.stride + kj * cfg.dilation) as isize - cfg.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    s += x.data()[((i * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * wt.data()[((co * cin + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out[((i * cout + co) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        Tensor::new(&[n, cout, oh, ow], out).unwrap()
    }

    fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn conv_shape_formula() {
        let tape = Tape::<f32>::no_grad();
        let x = Var::constant(Tensor::zeros(&[1, 3, 64, 64]));
        let w = Var::constant(Tensor::zeros(&[8, 3, 3, 3]));
        let y = conv2d(&tape, &x, &w, None, ConvCfg::same(3, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 8, 64, 64]);
        let y = conv2d(&tape, &x, &w, None, ConvCfg { stride: 2, padding: 1, dilation: 1 }).unwrap();
        assert_eq!(y.shape(), &[1, 8, 32, 32]);
    }

    #[test]
    fn conv_errors() {
        let tape = Tape::<f64>::no_grad();
        let x = c(Tensor::zeros(&[1, 3, 4, 4]));
        let w = c(Tensor::zeros(&[2, 4, 3, 3]));
        assert!(matches!(conv2d(&tape, &x, &w, None, ConvCfg::default()), Err(Error::Shape(_))));
        let w = c(Tensor::zeros(&[2, 3, 3, 3]));
        let cfg = ConvCfg { stride: 1, padding: 0, dilation: 4 };
        assert!(matches!(conv2d(&tape, &x, &w, None, cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_pointwise_conv() {
        let tape = Tape::no_grad();
        let x = rand(&[2, 3, 5, 4], 1);
        let mut eye = Tensor::zeros(&[3, 3, 1, 1]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let y = conv2d(&tape, &c(x.clone()), &c(eye), None, ConvCfg::default()).unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let tape = Tape::no_grad();
        let cases = [
            (ConvCfg { stride: 1, padding: 2, dilation: 2 }, [1, 2, 5, 5], 3),
            (ConvCfg { stride: 2, padding: 1, dilation: 1 }, [2, 3, 7, 6], 3),
            (ConvCfg { stride: 1, padding: 0, dilation: 1 }, [1, 4, 5, 5], 1),
            (ConvCfg { stride: 2, padding: 0, dilation: 1 }, [1, 2, 6, 6], 2),
            (ConvCfg { stride: 1, padding: 8, dilation: 8 }, [1, 2, 6, 7], 3),
        ];
        for (s, (cfg, shape, k)) in cases.into_iter().enumerate() {
            let x = rand(&shape, 10 + s as u64);
            let w = rand(&[3, shape[1], k, k], 20 + s as u64);
            let b = rand(&[3], 30 + s as u64);
            let y = conv2d(&tape, &c(x.clone()), &c(w.clone()), Some(&c(b.clone())), cfg).unwrap();
            let oracle = naive_conv(&x, &w, Some(&b), cfg);
            assert!(max_abs_diff(y.value(), &oracle) < 1e-12, "case {s}");
        }
    }

    #[test]
    fn dilation_equals_zero_upsampled_kernel() {
        let tape = Tape::no_grad();
        for d in [2usize, 4] {
            let x = rand(&[1, 2, 9, 9], d as u64);
            let w = rand(&[2, 2, 3, 3], 100 + d as u64);
            let k = 2 * d + 1;
            let mut up = Tensor::zeros(&[2, 2, k, k]);
            for o in 0..2 {
                for i in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            up.data_mut()[((o * 2 + i) * k + ki * d) * k + kj * d] =
                                w.data()[((o * 2 + i) * 3 + ki) * 3 + kj];
                        }
                    }
                }
            }
            let a = conv2d(&tape, &c(x.clone()), &c(w), None, ConvCfg::same(3, d)).unwrap();
            let b = conv2d(&tape, &c(x), &c(up), None, ConvCfg { stride: 1, padding: d, dilation: 1 }).unwrap();
            assert!(max_abs_diff(a.value(), b.value()) < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint() {
        let tape = Tape::no_grad();
        let cases = [(2usize, 0usize, 2usize, [2, 3, 8, 6]), (2, 1, 3, [2, 3, 7, 9]), (1, 1, 3, [1, 3, 5, 4]), (3, 0, 3, [1, 3, 9, 6])];
        for (s, (stride, pad, k, shape)) in cases.into_iter().enumerate() {
            let x = rand(&shape, 40 + s as u64);
            let w = rand(&[4, 3, k, k], 50 + s as u64);
            let cfg = ConvCfg { stride, padding: pad, dilation: 1 };
            let y = conv2d(&tape, &c(x.clone()), &c(w.clone()), None, cfg).unwrap();
            let probe = rand(y.shape(), 60 + s as u64);
            // conv_transpose2d weight (C_in_t = 4, C_out_t = 3) is the same array.
            let xt = conv_transpose2d(&tape, &c(probe.clone()), &c(w), None, stride, pad).unwrap();
            assert_eq!(xt.shape(), x.shape());
            let lhs: f64 = y.value().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(xt.value().data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "case {s}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn transposed_conv_shapes() {
        let tape = Tape::<f32>::no_grad();
        let x = Var::constant(Tensor::zeros(&[1, 16, 128, 128]));
        let w = Var::constant(Tensor::zeros(&[16, 2, 2, 2]));
        let y = conv_transpose2d(&tape, &x, &w, None, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 256, 256]);
    }

    #[test]
    fn transposed_pointwise_is_transposed_channel_map() {
        let tape = Tape::no_grad();
        let x = rand(&[1, 3, 4, 4], 70);
        let w = rand(&[3, 2, 1, 1], 71);
        let y = conv_transpose2d(&tape, &c(x.clone()), &c(w.clone()), None, 1, 0).unwrap();
        let mut wt = Tensor::zeros(&[2, 3, 1, 1]);
        for i in 0..3 {
            for o in 0..2 {
                wt.data_mut()[o * 3 + i] = w.data()[i * 2 + o];
            }
        }
        let z = conv2d(&tape, &c(x), &c(wt), None, ConvCfg::default()).unwrap();
        assert!(max_abs_diff(y.value(), z.value()) < 1e-14);
    }

    #[test]
    fn pooling_examples() {
        let tape = Tape::<f64>::no_grad();
        let x = c(Tensor::from_f64_slice(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let (y, idx) = maxpool2d(&tape, &x).unwrap();
        assert_eq!(y.value().data(), &[4.0]);
        assert_eq!(idx.offsets(), &[3]);

        let ties = c(Tensor::full(&[1, 1, 2, 2], 1.0));
        let (_, idx) = maxpool2d(&tape, &ties).unwrap();
        assert_eq!(idx.offsets(), &[0]);

        let big = c(Tensor::zeros(&[1, 1, 256, 256]));
        assert_eq!(maxpool2d(&tape, &big).unwrap().0.shape(), &[1, 1, 128, 128]);

        let odd = c(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(matches!(maxpool2d(&tape, &odd), Err(Error::Contract(_))));
    }

    #[test]
    fn pool_unpool_pool_is_pool() {
        let tape = Tape::no_grad();
        // Unpooling fills with zeros, so the identity needs positive values.
        for seed in 0..5 {
            let x = c(rand(&[2, 3, 6, 8], seed).map(|v| v + 1.5));
            let (y, idx) = maxpool2d(&tape, &x).unwrap();
            let up = max_unpool2d(&tape, &y, &idx).unwrap();
            let (y2, idx2) = maxpool2d(&tape, &up).unwrap();
            assert_eq!(y.value(), y2.value());
            assert_eq!(idx, idx2);
        }
    }

    #[test]
    fn corrupted_indices_rejected() {
        let tape = Tape::<f64>::no_grad();
        let x = c(rand(&[1, 1, 4, 4], 3));
        let (y, idx) = maxpool2d(&tape, &x).unwrap();
        let mut offsets = idx.offsets().to_vec();
        offsets[0] = 15;
        let bad = PoolIndices { input_shape: idx.input_shape(), offsets: Arc::new(offsets) };
        assert!(matches!(max_unpool2d(&tape, &y, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let tape = Tape::no_grad();
        let x = c(rand(&[2, 3, 4, 4], 5).map(|v| 3.0 * v + 1.0));
        let mut st = BatchNormState::new(3);
        let one = c(Tensor::full(&[3], 1.0));
        let zero = c(Tensor::zeros(&[3]));
        let y = batchnorm2d(&tape, &x, &one, &zero, &mut st, Mode::Train).unwrap();
        let yd = y.value().data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|i| yd[(i * 3 + ch) * 16..(i * 3 + ch) * 16 + 16].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-6);
            // epsilon shrinks the variance slightly below 1
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
        assert!(st.updated && st.running_var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn batchnorm_eval_identity() {
        let tape = Tape::no_grad();
        let x = rand(&[1, 2, 3, 3], 6);
        let mut st = BatchNormState::new(2);
        let y = batchnorm2d(
            &tape,
            &c(x.clone()),
            &c(Tensor::full(&[2], 1.0)),
            &c(Tensor::zeros(&[2])),
            &mut st,
            Mode::Eval,
        )
        .unwrap();
        assert!(max_abs_diff(y.value(), &x) < 1e-5);
    }

    #[test]
    fn prelu_and_dropout_examples() {
        let tape = Tape::no_grad();
        let x = c(Tensor::from_f64_slice(&[1, 1, 1, 2], &[-2.0, 3.0]).unwrap());
        let y = prelu(&tape, &x, &c(Tensor::full(&[1], 0.25))).unwrap();
        assert_eq!(y.value().data(), &[-0.5, 3.0]);

        let x = c(rand(&[2, 4, 3, 3], 8));
        let y = spatial_dropout2d(&tape, &x, 0.5, 1, Mode::Eval).unwrap();
        assert_eq!(y.value(), x.value());
        assert!(matches!(spatial_dropout2d(&tape, &x, 1.0, 1, Mode::Train), Err(Error::Contract(_))));

        let x = c(Tensor::full(&[1, 10_000, 1, 1], 1.0));
        let y = spatial_dropout2d(&tape, &x, 0.5, 99, Mode::Train).unwrap();
        let kept = y.value().data().iter().filter(|&&v| v != 0.0).count() as f64 / 10_000.0;
        assert!((kept - 0.5).abs() < 0.02, "{kept}");
        assert!(y.value().data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn layer_gradients() {
        let tol = 1e-5;
        let eps = 1e-4;
        let sum_sq = |tp: &Tape<f64>, v: &Var<f64>| {
            // weight output elements so that the loss is not a trivial sum
            let w = c(rand(v.shape(), 999));
            Ok(ops::reduce_sum_all(tp, &ops::mul(tp, v, &w)?))
        };

        for d in [1usize, 2, 4, 8, 16] {
            let x = rand(&[1, 2, 6, 5], d as u64);
            let w = rand(&[2, 2, 3, 3], 200 + d as u64);
            let b = rand(&[2], 300 + d as u64);
            let cfg = ConvCfg::same(3, d);
            let r = grad_check(|tp, v| sum_sq(tp, &conv2d(tp, &v[0], &v[1], Some(&v[2]), cfg)?), &[x, w, b], eps).unwrap();
            assert!(r.max_rel_error < tol, "dilation {d}: {r:?}");
        }

        let x = rand(&[2, 2, 5, 6], 1);
        let w = rand(&[3, 2, 3, 3], 2);
        let cfg = ConvCfg { stride: 2, padding: 1, dilation: 1 };
        let r = grad_check(|tp, v| sum_sq(tp, &conv2d(tp, &v[0], &v[1], None, cfg)?), &[x, w], eps).unwrap();
        assert!(r.max_rel_error < tol, "strided: {r:?}");

        let x = rand(&[2, 3, 3, 4], 3);
        let w = rand(&[3, 2, 2, 2], 4);
        let b = rand(&[2], 5);
        let r = grad_check(|tp, v| sum_sq(tp, &conv_transpose2d(tp, &v[0], &v[1], Some(&v[2]), 2, 0)?), &[x, w, b], eps)
            .unwrap();
        assert!(r.max_rel_error < tol, "transposed: {r:?}");

        let x = rand(&[2, 3, 4, 4], 6);
        let sc = rand(&[3], 7);
        let sh = rand(&[3], 8);
        let r = grad_check(
            |tp, v| {
                let mut st = BatchNormState::new(3);
                sum_sq(tp, &batchnorm2d(tp, &v[0], &v[1], &v[2], &mut st, Mode::Train)?)
            },
            &[x.clone(), sc.clone(), sh.clone()],
            eps,
        )
        .unwrap();
        assert!(r.max_rel_error < tol, "batchnorm train: {r:?}");
        let r = grad_check(
            |tp, v| {
                let mut st = BatchNormState::new(3);
                st.running_mean = vec![0.1, -0.2, 0.3];
                st.running_var = vec![0.5, 1.5, 2.0];
                sum_sq(tp, &batchnorm2d(tp, &v[0], &v[1], &v[2], &mut st, Mode::Eval)?)
            },
            &[x, sc, sh],
            eps,
        )
        .unwrap();
        assert!(r.max_rel_error < tol, "batchnorm eval: {r:?}");

        // keep inputs away from the kink at zero
        let x = rand(&[2, 3, 3, 3], 9).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let a = rand(&[3], 10);
        let r = grad_check(|tp, v| sum_sq(tp, &prelu(tp, &v[0], &v[1])?), &[x, a], eps).unwrap();
        assert!(r.max_rel_error < tol, "prelu: {r:?}");

        // distinct values so that the argmax is stable under perturbation
        let x = Tensor::from_f64_slice(&[1, 2, 4, 4], &(0..32).map(|i| ((i * 37) % 32) as f64 * 0.1).collect::<Vec<_>>())
            .unwrap();
        let r = grad_check(
            |tp, v| {
                let (y, idx) = maxpool2d(tp, &v[0])?;
                let y2 = ops::sigmoid(tp, &y);
                let up = max_unpool2d(tp, &y2, &idx)?;
                sum_sq(tp, &up)
            },
            &[x],
            eps,
        )
        .unwrap();
        assert!(r.max_rel_error < tol, "pool/unpool: {r:?}");

        let x = rand(&[2, 4, 3, 3], 11);
        let r = grad_check(|tp, v| sum_sq(tp, &spatial_dropout2d(tp, &v[0], 0.3, 5, Mode::Train)?), &[x], eps).unwrap();
        assert!(r.max_rel_error < tol, "dropout: {r:?}");
    }
}
