//! Differentiable tensor primitives: elementwise arithmetic, reductions and
//! layout ops.
//!
//! Binary ops accept equal shapes, or an `(N, C, H, W)` left operand with a
//! per-channel `(C)` right operand.

use std::ops::Range;

use crate::autodiff::{Tape, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    MaxWithZero,
    Sigmoid,
    Exp,
}

/// Dispatches an [`Elementwise`] op. Unary ops ignore `b`.
pub fn elementwise<T: Element>(
    tape: &Tape<T>,
    op: Elementwise,
    a: &Var<T>,
    b: Option<&Var<T>>,
) -> Result<Var<T>> {
    let need_b = || b.ok_or_else(|| crate::Error::Contract(format!("{op:?} needs two operands")));
    match op {
        Elementwise::Add => add(tape, a, need_b()?),
        Elementwise::Sub => sub(tape, a, need_b()?),
        Elementwise::Mul => mul(tape, a, need_b()?),
        Elementwise::MaxWithZero => Ok(relu(tape, a)),
        Elementwise::Sigmoid => Ok(sigmoid(tape, a)),
        Elementwise::Exp => Ok(exp(tape, a)),
    }
}

#[derive(Clone, Copy)]
enum Pairing {
    Same,
    /// Right operand is one value per channel; `inner` = H*W.
    PerChannel { channels: usize, inner: usize },
}

fn pairing<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Pairing> {
    if a.shape() == b.shape() {
        return Ok(Pairing::Same);
    }
    if let ([_, c, h, w], [bc]) = (a.shape(), b.shape()) {
        if c == bc {
            return Ok(Pairing::PerChannel { channels: *c, inner: h * w });
        }
    }
    shape_err(format!("incompatible operand shapes {:?} and {:?}", a.shape(), b.shape()))
}

fn channel_of(i: usize, channels: usize, inner: usize) -> usize {
    (i / inner) % channels
}

fn broadcast_zip<T: Element>(a: &Tensor<T>, b: &Tensor<T>, p: Pairing, f: impl Fn(T, T) -> T) -> Tensor<T> {
    match p {
        Pairing::Same => a.zip_map(b, f),
        Pairing::PerChannel { channels, inner } => {
            let bd = b.data();
            let data = a.data().iter().enumerate().map(|(i, &x)| f(x, bd[channel_of(i, channels, inner)])).collect();
            Tensor::new(a.shape(), data).expect("same shape")
        }
    }
}

/// Sums a full-size gradient down to the right operand's shape.
fn reduce_to_b<T: Element>(g: &Tensor<T>, p: Pairing, b_shape: &[usize]) -> Tensor<T> {
    match p {
        Pairing::Same => g.clone(),
        Pairing::PerChannel { channels, inner } => {
            let mut out = Tensor::zeros(b_shape);
            let od = out.data_mut();
            for (i, &v) in g.data().iter().enumerate() {
                od[channel_of(i, channels, inner)] += v;
            }
            out
        }
    }
}

pub fn add<T: Element>(tape: &Tape<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let p = pairing(a.value(), b.value())?;
    let out = broadcast_zip(a.value(), b.value(), p, |x, y| x + y);
    let b_shape = b.shape().to_vec();
    Ok(tape.record(out, &[a, b], move |g, needs| {
        vec![needs[0].then(|| g.clone()), needs[1].then(|| reduce_to_b(g, p, &b_shape))]
    }))
}

pub fn sub<T: Element>(tape: &Tape<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let p = pairing(a.value(), b.value())?;
    let out = broadcast_zip(a.value(), b.value(), p, |x, y| x - y);
    let b_shape = b.shape().to_vec();
    Ok(tape.record(out, &[a, b], move |g, needs| {
        vec![
            needs[0].then(|| g.clone()),
            needs[1].then(|| reduce_to_b(&g.map(|v| -v), p, &b_shape)),
        ]
    }))
}

pub fn mul<T: Element>(tape: &Tape<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let p = pairing(a.value(), b.value())?;
    let out = broadcast_zip(a.value(), b.value(), p, |x, y| x * y);
    let (av, bv) = (a.value_arc().clone(), b.value_arc().clone());
    Ok(tape.record(out, &[a, b], move |g, needs| {
        vec![
            needs[0].then(|| broadcast_zip(g, &bv, p, |g, y| g * y)),
            needs[1].then(|| reduce_to_b(&g.zip_map(&av, |g, x| g * x), p, bv.shape())),
        ]
    }))
}

/// Multiplies by a constant scalar.
pub fn scale<T: Element>(tape: &Tape<T>, a: &Var<T>, c: f64) -> Var<T> {
    let c = T::from_f64(c);
    let out = a.value().map(|v| v * c);
    tape.record(out, &[a], move |g, _| vec![Some(g.map(|v| v * c))])
}

/// `max(x, 0)`.
pub fn relu<T: Element>(tape: &Tape<T>, a: &Var<T>) -> Var<T> {
    let zero = T::zero();
    let out = a.value().map(|v| if v > zero { v } else { zero });
    let av = a.value_arc().clone();
    tape.record(out, &[a], move |g, _| vec![Some(g.zip_map(&av, |g, x| if x > zero { g } else { zero }))])
}

pub(crate) fn sigmoid_scalar<T: Element>(v: T) -> T {
    let one = T::one();
    if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    }
}

pub fn sigmoid<T: Element>(tape: &Tape<T>, a: &Var<T>) -> Var<T> {
    let out = a.value().map(sigmoid_scalar);
    let s = out.clone();
    tape.record(out, &[a], move |g, _| vec![Some(g.zip_map(&s, |g, s| g * s * (T::one() - s)))])
}

pub fn exp<T: Element>(tape: &Tape<T>, a: &Var<T>) -> Var<T> {
    let out = a.value().map(Element::exp);
    let e = out.clone();
    tape.record(out, &[a], move |g, _| vec![Some(g.zip_map(&e, |g, e| g * e))])
}

/// Sum of all elements, shape `[1]`.
pub fn reduce_sum_all<T: Element>(tape: &Tape<T>, a: &Var<T>) -> Var<T> {
    let out = Tensor::scalar(a.value().sum());
    let shape = a.shape().to_vec();
    tape.record(out, &[a], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
}

/// Sums over `axes`, dropping them from the shape. Reducing every axis gives
/// shape `[1]`.
pub fn reduce_sum<T: Element>(tape: &Tape<T>, a: &Var<T>, axes: &[usize]) -> Result<Var<T>> {
    let shape = a.shape().to_vec();
    let rank = shape.len();
    if let Some(&bad) = axes.iter().find(|&&ax| ax >= rank) {
        return shape_err(format!("axis {bad} out of range for rank {rank}"));
    }
    let reduced: Vec<bool> = (0..rank).map(|d| axes.contains(&d)).collect();
    let mut out_shape: Vec<usize> = (0..rank).filter(|&d| !reduced[d]).map(|d| shape[d]).collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let map = OutIndex::new(&shape, &reduced);
    let mut out = Tensor::zeros(&out_shape);
    {
        let od = out.data_mut();
        for (i, &v) in a.value().data().iter().enumerate() {
            od[map.of(i)] += v;
        }
    }
    Ok(tape.record(out, &[a], move |g, _| {
        let gd = g.data();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|i| gd[map.of(i)]).collect();
        vec![Some(Tensor::new(&shape, data).expect("shape"))]
    }))
}

/// Maps a flat input index to the flat index of the reduction output.
struct OutIndex {
    strides_in: Vec<usize>,
    shape: Vec<usize>,
    strides_out: Vec<usize>,
}

impl OutIndex {
    fn new(shape: &[usize], reduced: &[bool]) -> Self {
        let rank = shape.len();
        let mut strides_in = vec![1; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            strides_in[d] = strides_in[d + 1] * shape[d + 1];
        }
        let mut strides_out = vec![0; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            if !reduced[d] {
                strides_out[d] = acc;
                acc *= shape[d];
            }
        }
        Self { strides_in, shape: shape.to_vec(), strides_out }
    }

    fn of(&self, i: usize) -> usize {
        let mut o = 0;
        for d in 0..self.shape.len() {
            o += ((i / self.strides_in[d]) % self.shape[d]) * self.strides_out[d];
        }
        o
    }
}

pub fn reshape<T: Element>(tape: &Tape<T>, a: &Var<T>, new_shape: &[usize]) -> Result<Var<T>> {
    let out = a.value().clone().reshaped(new_shape)?;
    let old = a.shape().to_vec();
    Ok(tape.record(out, &[a], move |g, _| vec![Some(g.clone().reshaped(&old).expect("same numel"))]))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Visits every element of the sub-box `ranges` of a tensor with `shape`,
/// yielding (flat source index, flat index within the box).
fn for_each_in_box(shape: &[usize], ranges: &[Range<usize>], mut f: impl FnMut(usize, usize)) {
    let st = strides(shape);
    let ext: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
    let total: usize = ext.iter().product();
    let est = strides(&ext);
    for k in 0..total {
        let mut src = 0;
        for d in 0..shape.len() {
            src += (ranges[d].start + (k / est[d]) % ext[d]) * st[d];
        }
        f(src, k);
    }
}

/// Extracts the sub-box given by one range per axis.
pub fn slice<T: Element>(tape: &Tape<T>, a: &Var<T>, ranges: &[Range<usize>]) -> Result<Var<T>> {
    let shape = a.shape().to_vec();
    if ranges.len() != shape.len() {
        return shape_err(format!("slice needs {} ranges, got {}", shape.len(), ranges.len()));
    }
    for (d, r) in ranges.iter().enumerate() {
        if r.start >= r.end || r.end > shape[d] {
            return shape_err(format!("range {r:?} overflows axis {d} of extent {}", shape[d]));
        }
    }
    let out_shape: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
    let src = a.value().data();
    let mut data = vec![T::zero(); out_shape.iter().product()];
    for_each_in_box(&shape, ranges, |s, k| data[k] = src[s]);
    let out = Tensor::new(&out_shape, data)?;
    let ranges = ranges.to_vec();
    Ok(tape.record(out, &[a], move |g, _| {
        let mut gi = Tensor::zeros(&shape);
        let gd = g.data();
        let gid = gi.data_mut();
        for_each_in_box(&shape, &ranges, |s, k| gid[s] = gd[k]);
        vec![Some(gi)]
    }))
}

/// Concatenates two `(N, C, H, W)` tensors along channels.
pub fn concat_channels<T: Element>(tape: &Tape<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (n, ca, h, w) = a.value().dims4()?;
    let (nb, cb, hb, wb) = b.value().dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return shape_err(format!("concat needs matching N,H,W: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let hw = h * w;
    let (ad, bd) = (a.value().data(), b.value().data());
    let mut data = Vec::with_capacity(n * (ca + cb) * hw);
    for i in 0..n {
        data.extend_from_slice(&ad[i * ca * hw..(i + 1) * ca * hw]);
        data.extend_from_slice(&bd[i * cb * hw..(i + 1) * cb * hw]);
    }
    let out = Tensor::new(&[n, ca + cb, h, w], data)?;
    Ok(tape.record(out, &[a, b], move |g, needs| {
        let gd = g.data();
        let split = |off: usize, c: usize| {
            let mut d = Vec::with_capacity(n * c * hw);
            for i in 0..n {
                let base = i * (ca + cb) * hw + off * hw;
                d.extend_from_slice(&gd[base..base + c * hw]);
            }
            Tensor::new(&[n, c, h, w], d).expect("shape")
        };
        vec![needs[0].then(|| split(0, ca)), needs[1].then(|| split(ca, cb))]
    }))
}

/// Zero-pads both spatial axes by `pad` on each side.
pub fn pad_spatial<T: Element>(tape: &Tape<T>, a: &Var<T>, pad: usize) -> Result<Var<T>> {
    let (n, c, h, w) = a.value().dims4()?;
    let (ho, wo) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    {
        let src = a.value().data();
        let od = out.data_mut();
        for p in 0..n * c {
            for y in 0..h {
                let s = p * h * w + y * w;
                let d = p * ho * wo + (y + pad) * wo + pad;
                od[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    Ok(tape.record(out, &[a], move |g, _| {
        let gd = g.data();
        let mut gi = Tensor::zeros(&[n, c, h, w]);
        let gid = gi.data_mut();
        for p in 0..n * c {
            for y in 0..h {
                let s = p * ho * wo + (y + pad) * wo + pad;
                let d = p * h * w + y * w;
                gid[d..d + w].copy_from_slice(&gd[s..s + w]);
            }
        }
        vec![Some(gi)]
    }))
}

/// Appends `extra` all-zero channels (downsampling skip branch).
pub fn pad_channels<T: Element>(tape: &Tape<T>, a: &Var<T>, extra: usize) -> Result<Var<T>> {
    if extra == 0 {
        return Ok(a.clone());
    }
    let (n, _, h, w) = a.value().dims4()?;
    let zeros = Var::constant(Tensor::zeros(&[n, extra, h, w]));
    concat_channels(tape, a, &zeros)
}

pub(crate) fn check_prob(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return contract_err(format!("probability {p} outside [0, 1)"));
    }
    Ok(())
}
