//! Box convolution: every output value is the average of its input plane over
//! an axis-aligned box with learnable, continuous edges, evaluated in O(1) per
//! position through an integral image.
//!
//! Coordinates are continuous pixel units: pixel `(i, j)` covers
//! `[j, j+1) x [i, i+1)`. Box offsets are relative to the output pixel center
//! `(x + 0.5, y + 0.5)`. The integral table is bilinearly interpolated at
//! fractional corners, which equals the exact integral of the piecewise
//! constant image. Rectangles are clipped to the image, but the average always
//! divides by the full (unclipped) box area.

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::rng;
use crate::tensor::{Element, Tensor};

/// Summed-area table of one plane, `(H+1) x (W+1)`, first row and column zero.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralImage {
    h: usize,
    w: usize,
    table: Vec<f64>,
}

/// Continuous rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl IntegralImage {
    pub fn new<T: Element>(plane: &[T], h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || plane.len() != h * w {
            return shape_err(format!("integral image of {h}x{w} needs {} values, got {}", h * w, plane.len()));
        }
        Ok(Self::from_fn(h, w, |i, j| plane[i * w + j].to_f64()))
    }

    fn from_fn(h: usize, w: usize, v: impl Fn(usize, usize) -> f64) -> Self {
        let stride = w + 1;
        let mut table = vec![0.0; (h + 1) * stride];
        for i in 0..h {
            let mut row = 0.0;
            for j in 0..w {
                row += v(i, j);
                table[(i + 1) * stride + j + 1] = table[i * stride + j + 1] + row;
            }
        }
        Self { h, w, table }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Sum of `plane[0..i, 0..j]`.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.table[i * (self.w + 1) + j]
    }

    /// Cell and fraction for a coordinate already clipped to `[0, extent]`.
    fn cell(v: f64, extent: usize) -> (usize, f64) {
        let c = (v.floor() as usize).min(extent - 1);
        (c, v - c as f64)
    }

    /// Bilinear interpolation of the table at `(x, y)`, plus its partial
    /// derivatives in x and y.
    fn eval(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let (j, fx) = Self::cell(x, self.w);
        let (i, fy) = Self::cell(y, self.h);
        let s = self.w + 1;
        let t00 = self.table[i * s + j];
        let t01 = self.table[i * s + j + 1];
        let t10 = self.table[(i + 1) * s + j];
        let t11 = self.table[(i + 1) * s + j + 1];
        let top = t00 + fx * (t01 - t00);
        let bottom = t10 + fx * (t11 - t10);
        let value = top + fy * (bottom - top);
        let dx = (1.0 - fy) * (t01 - t00) + fy * (t11 - t10);
        let dy = bottom - top;
        (value, dx, dy)
    }

    fn clip(&self, r: &Rect) -> Rect {
        let (w, h) = (self.w as f64, self.h as f64);
        Rect { x0: r.x0.clamp(0.0, w), x1: r.x1.clamp(0.0, w), y0: r.y0.clamp(0.0, h), y1: r.y1.clamp(0.0, h) }
    }

    /// Sum over `rect` clipped to the image; zero for an empty intersection.
    pub fn box_sum(&self, rect: &Rect) -> f64 {
        let c = self.clip(rect);
        if c.x1 <= c.x0 || c.y1 <= c.y0 {
            return 0.0;
        }
        self.eval(c.x1, c.y1).0 - self.eval(c.x0, c.y1).0 - self.eval(c.x1, c.y0).0 + self.eval(c.x0, c.y0).0
    }
}

/// Edge indices inside a box quadruple.
pub const X_MIN: usize = 0;
pub const X_MAX: usize = 1;
pub const Y_MIN: usize = 2;
pub const Y_MAX: usize = 3;

/// Projection bounds applied after every optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoxClamp {
    /// Minimum box extent along each axis.
    pub delta_min: f64,
    /// Maximum absolute edge offset.
    pub radius: f64,
}

impl BoxClamp {
    pub const DELTA_MIN: f64 = 1.0;

    /// Defaults for a feature map of the given extent: `R = max(H, W)`.
    pub fn for_extent(h: usize, w: usize) -> Self {
        Self { delta_min: Self::DELTA_MIN, radius: h.max(w) as f64 }
    }
}

fn quad<T: Element>(boxes: &Tensor<T>, k: usize) -> [f64; 4] {
    let d = &boxes.data()[4 * k..4 * k + 4];
    [d[0].to_f64(), d[1].to_f64(), d[2].to_f64(), d[3].to_f64()]
}

/// Projects one axis pair onto `hi - lo >= delta`, `|lo|, |hi| <= radius`,
/// moving offending edges symmetrically about their midpoint.
fn project_pair(lo: f64, hi: f64, c: BoxClamp) -> (f64, f64) {
    let (mut lo, mut hi) = (lo.clamp(-c.radius, c.radius), hi.clamp(-c.radius, c.radius));
    if hi - lo < c.delta_min {
        let half = c.delta_min / 2.0;
        let mid = ((lo + hi) / 2.0).clamp(-c.radius + half, c.radius - half);
        lo = mid - half;
        hi = mid + half;
    }
    (lo, hi)
}

/// Projects every box of a `(planes, 4)` tensor onto the feasible set.
/// Feasible boxes are left bit-identical.
pub fn clamp_boxes<T: Element>(boxes: &mut Tensor<T>, clamp: BoxClamp) {
    let n = boxes.numel() / 4;
    for k in 0..n {
        let q = quad(boxes, k);
        let (x0, x1) = project_pair(q[X_MIN], q[X_MAX], clamp);
        let (y0, y1) = project_pair(q[Y_MIN], q[Y_MAX], clamp);
        let d = &mut boxes.data_mut()[4 * k..4 * k + 4];
        for (slot, (old, new)) in d.iter_mut().zip(q.iter().zip([x0, x1, y0, y1])) {
            if *old != new {
                *slot = T::from_f64(new);
            }
        }
    }
}

/// Whether every box satisfies the clamp invariants (with a tiny slack for
/// rounding in lower precisions).
pub fn boxes_valid<T: Element>(boxes: &Tensor<T>, clamp: BoxClamp) -> bool {
    let slack = 1e-6 * clamp.radius.max(1.0);
    (0..boxes.numel() / 4).all(|k| {
        let q = quad(boxes, k);
        q.iter().all(|v| v.is_finite() && v.abs() <= clamp.radius + slack)
            && q[X_MAX] - q[X_MIN] >= clamp.delta_min - slack
            && q[Y_MAX] - q[Y_MIN] >= clamp.delta_min - slack
    })
}

/// Random boxes: centers uniform in `[-r0/2, r0/2]^2`, extents uniform in
/// `[4 * delta_min, r0]`, so no edge exceeds `r0`.
pub fn init_boxes<T: Element>(seed: u64, planes: usize, boxes_per_plane: usize, r0: f64, delta_min: f64) -> Result<Tensor<T>> {
    if r0 < 4.0 * delta_min {
        return contract_err(format!("initial radius {r0} is below 4 * delta_min = {}", 4.0 * delta_min));
    }
    let mut r = rng::rng(seed);
    let count = planes * boxes_per_plane;
    let mut data = Vec::with_capacity(4 * count);
    for _ in 0..count {
        let cx = r0 * (r.random::<f64>() - 0.5);
        let cy = r0 * (r.random::<f64>() - 0.5);
        let sx = 4.0 * delta_min + (r0 - 4.0 * delta_min) * r.random::<f64>();
        let sy = 4.0 * delta_min + (r0 - 4.0 * delta_min) * r.random::<f64>();
        for v in [cx - sx / 2.0, cx + sx / 2.0, cy - sy / 2.0, cy + sy / 2.0] {
            data.push(T::from_f64(v));
        }
    }
    Tensor::new(&[count, 4], data)
}

fn check_boxes<T: Element>(x: &Tensor<T>, boxes: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let [planes_b, 4] = boxes.shape()[..] else {
        return shape_err(format!("box parameters must be (planes * B, 4), got {:?}", boxes.shape()));
    };
    if planes_b % c != 0 {
        return shape_err(format!("{planes_b} boxes do not divide evenly over {c} planes"));
    }
    for k in 0..planes_b {
        let q = quad(boxes, k);
        if !q.iter().all(|v| v.is_finite()) || q[X_MAX] <= q[X_MIN] || q[Y_MAX] <= q[Y_MIN] {
            return contract_err(format!("box {k} is invalid: {q:?}"));
        }
    }
    Ok((n, c, h, w, planes_b / c))
}

fn rect_at(q: &[f64; 4], y: usize, x: usize) -> Rect {
    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
    Rect { x0: cx + q[X_MIN], x1: cx + q[X_MAX], y0: cy + q[Y_MIN], y1: cy + q[Y_MAX] }
}

fn area(q: &[f64; 4]) -> f64 {
    (q[X_MAX] - q[X_MIN]) * (q[Y_MAX] - q[Y_MIN])
}

/// `x (N, C, H, W)`, `boxes (C * B, 4)` → `(N, C * B, H, W)`; output channel
/// `c * B + b` averages plane `c` over box `c * B + b`.
pub fn boxconv_forward<T: Element>(x: &Tensor<T>, boxes: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w, b) = check_boxes(x, boxes)?;
    let plane = h * w;
    let mut out = vec![T::zero(); n * c * b * plane];
    for i in 0..n {
        for ch in 0..c {
            let ii = IntegralImage::new(&x.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane], h, w)?;
            for bi in 0..b {
                let q = quad(boxes, ch * b + bi);
                let inv_area = 1.0 / area(&q);
                let o = &mut out[((i * c + ch) * b + bi) * plane..][..plane];
                for y in 0..h {
                    for xx in 0..w {
                        o[y * w + xx] = T::from_f64(ii.box_sum(&rect_at(&q, y, xx)) * inv_area);
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c * b, h, w], out)
}

/// Gradients of [`boxconv_forward`] with respect to the input planes and the
/// box edges. Either side can be skipped.
pub fn boxconv_backward<T: Element>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    boxes: &Tensor<T>,
    want_x: bool,
    want_boxes: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, c, h, w, b) = check_boxes(x, boxes)?;
    if grad_out.shape() != [n, c * b, h, w] {
        return shape_err(format!("box conv gradient has shape {:?}", grad_out.shape()));
    }
    let plane = h * w;
    let ts = w + 1;
    let (wf, hf) = (w as f64, h as f64);
    let mut gx = want_x.then(|| vec![T::zero(); n * c * plane]);
    let mut gb = vec![0.0f64; c * b * 4];
    let gd = grad_out.data();
    let mut gtable = vec![0.0f64; (h + 1) * ts];

    for i in 0..n {
        for ch in 0..c {
            let ii = IntegralImage::new(&x.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane], h, w)?;
            gtable.fill(0.0);
            for bi in 0..b {
                let k = ch * b + bi;
                let q = quad(boxes, k);
                let a = area(&q);
                let (ex, ey) = (q[X_MAX] - q[X_MIN], q[Y_MAX] - q[Y_MIN]);
                let g_plane = &gd[((i * c + ch) * b + bi) * plane..][..plane];
                for y in 0..h {
                    for xx in 0..w {
                        let g = g_plane[y * w + xx].to_f64();
                        if g == 0.0 {
                            continue;
                        }
                        let r = rect_at(&q, y, xx);
                        let cr = ii.clip(&r);
                        if cr.x1 <= cr.x0 || cr.y1 <= cr.y0 {
                            continue;
                        }
                        let ga = g / a;
                        if want_x {
                            for (px, py, sign) in [(cr.x1, cr.y1, 1.0), (cr.x0, cr.y1, -1.0), (cr.x1, cr.y0, -1.0), (cr.x0, cr.y0, 1.0)] {
                                splat(&mut gtable, ts, w, h, px, py, sign * ga);
                            }
                        }
                        if want_boxes {
                            let (f11, dx11, dy11) = ii.eval(cr.x1, cr.y1);
                            let (f01, dx01, dy01) = ii.eval(cr.x0, cr.y1);
                            let (f10, dx10, dy10) = ii.eval(cr.x1, cr.y0);
                            let (f00, dx00, dy00) = ii.eval(cr.x0, cr.y0);
                            let s = f11 - f01 - f10 + f00;
                            let inside = |v: f64, lim: f64| v > 0.0 && v < lim;
                            let norm = s / (a * a);
                            let e = &mut gb[4 * k..4 * k + 4];
                            let mut d_xmax = -norm * ey;
                            if inside(r.x1, wf) {
                                d_xmax += (dx11 - dx10) / a;
                            }
                            let mut d_xmin = norm * ey;
                            if inside(r.x0, wf) {
                                d_xmin -= (dx01 - dx00) / a;
                            }
                            let mut d_ymax = -norm * ex;
                            if inside(r.y1, hf) {
                                d_ymax += (dy11 - dy01) / a;
                            }
                            let mut d_ymin = norm * ex;
                            if inside(r.y0, hf) {
                                d_ymin -= (dy10 - dy00) / a;
                            }
                            e[X_MIN] += g * d_xmin;
                            e[X_MAX] += g * d_xmax;
                            e[Y_MIN] += g * d_ymin;
                            e[Y_MAX] += g * d_ymax;
                        }
                    }
                }
            }
            if let Some(gx) = gx.as_mut() {
                // plane[p][q] feeds every table entry (i, j) with i > p, j > q
                let dst = &mut gx[(i * c + ch) * plane..][..plane];
                let mut suffix = vec![0.0f64; (h + 2) * (ts + 1)];
                let ss = ts + 1;
                for r in (0..=h).rev() {
                    for col in (0..=w).rev() {
                        suffix[r * ss + col] = gtable[r * ts + col] + suffix[(r + 1) * ss + col]
                            + suffix[r * ss + col + 1]
                            - suffix[(r + 1) * ss + col + 1];
                    }
                }
                for p in 0..h {
                    for qx in 0..w {
                        dst[p * w + qx] = T::from_f64(suffix[(p + 1) * ss + qx + 1]);
                    }
                }
            }
        }
    }
    let gx = gx.map(|d| Tensor::new(&[n, c, h, w], d)).transpose()?;
    let gb = want_boxes.then(|| Tensor::new(boxes.shape(), gb.into_iter().map(T::from_f64).collect())).transpose()?;
    Ok((gx, gb))
}

/// Adds `v` times the bilinear weights of point `(x, y)` to the table.
fn splat(table: &mut [f64], ts: usize, w: usize, h: usize, x: f64, y: f64, v: f64) {
    let (j, fx) = IntegralImage::cell(x, w);
    let (i, fy) = IntegralImage::cell(y, h);
    table[i * ts + j] += v * (1.0 - fx) * (1.0 - fy);
    table[i * ts + j + 1] += v * fx * (1.0 - fy);
    table[(i + 1) * ts + j] += v * (1.0 - fx) * fy;
    table[(i + 1) * ts + j + 1] += v * fx * fy;
}

/// Differentiable box convolution.
pub fn boxconv<T: Element>(tape: &Tape<T>, x: &Var<T>, boxes: &Var<T>) -> Result<Var<T>> {
    let out = boxconv_forward(x.value(), boxes.value())?;
    let (xv, bv) = (x.value_arc().clone(), boxes.value_arc().clone());
    Ok(tape.record(out, &[x, boxes], move |g, needs| {
        let (gx, gb) = boxconv_backward(g, &xv, &bv, needs[0], needs[1]).expect("validated in forward");
        vec![gx, gb]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::ops;
    use crate::tensor::Init;
    use proptest::prelude::*;

    fn rand(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::create(shape, Init::Uniform { seed, lo, hi }).unwrap()
    }

    /// Clipped box average from per-pixel overlap areas, no integral image.
    pub(crate) fn naive_boxconv(x: &Tensor<f64>, boxes: &Tensor<f64>) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4().unwrap();
        let b = boxes.shape()[0] / c;
        let mut out = vec![0.0; n * c * b * h * w];
        let overlap = |a0: f64, a1: f64, p: usize| (a1.min(p as f64 + 1.0) - a0.max(p as f64)).max(0.0);
        for i in 0..n {
            for ch in 0..c {
                for bi in 0..b {
                    let q = quad(boxes, ch * b + bi);
                    for y in 0..h {
                        for xx in 0..w {
                            let r = rect_at(&q, y, xx);
                            let mut s = 0.0;
                            for py in 0..h {
                                let oy = overlap(r.y0, r.y1, py);
                                if oy == 0.0 {
                                    continue;
                                }
                                for px in 0..w {
                                    s += oy * overlap(r.x0, r.x1, px) * x.data()[((i * c + ch) * h + py) * w + px];
                                }
                            }
                            out[(((i * c + ch) * b + bi) * h + y) * w + xx] = s / area(&q);
                        }
                    }
                }
            }
        }
        Tensor::new(&[n, c * b, h, w], out).unwrap()
    }

    #[test]
    fn integral_image_examples() {
        let ones = vec![1.0f64; 16];
        let ii = IntegralImage::new(&ones, 4, 4).unwrap();
        assert_eq!(ii.at(4, 4), 16.0);
        assert!((0..=4).all(|i| ii.at(i, 0) == 0.0 && ii.at(0, i) == 0.0));

        let p = rand(&[6, 7], 3, -1.0, 1.0);
        let ii = IntegralImage::new(p.data(), 6, 7).unwrap();
        for i in 0..=6 {
            for j in 0..=7 {
                let mut s = 0.0;
                for a in 0..i {
                    for b in 0..j {
                        s += p.data()[a * 7 + b];
                    }
                }
                assert!((ii.at(i, j) - s).abs() < 1e-12);
            }
        }
        assert!(IntegralImage::new(&ones, 4, 5).is_err());
    }

    #[test]
    fn integral_image_monotone_for_non_negative() {
        let p = rand(&[5, 8], 4, 0.0, 1.0);
        let ii = IntegralImage::new(p.data(), 5, 8).unwrap();
        for i in 0..=5 {
            for j in 0..8 {
                assert!(ii.at(i, j + 1) >= ii.at(i, j));
            }
        }
        for j in 0..=8 {
            for i in 0..5 {
                assert!(ii.at(i + 1, j) >= ii.at(i, j));
            }
        }
    }

    #[test]
    fn box_sum_examples() {
        let ones = vec![1.0f64; 12];
        let ii = IntegralImage::new(&ones, 3, 4).unwrap();
        assert_eq!(ii.box_sum(&Rect { x0: 0.0, x1: 4.0, y0: 0.0, y1: 3.0 }), 12.0);
        assert!((ii.box_sum(&Rect { x0: 0.0, x1: 2.5, y0: 0.0, y1: 1.0 }) - 2.5).abs() < 1e-15);
        assert_eq!(ii.box_sum(&Rect { x0: 5.0, x1: 7.0, y0: 0.0, y1: 1.0 }), 0.0);

        let p = rand(&[6, 7], 5, -1.0, 1.0);
        let ii = IntegralImage::new(p.data(), 6, 7).unwrap();
        let r = Rect { x0: 1.0, x1: 5.0, y0: 2.0, y1: 6.0 };
        let naive: f64 = (2..6).flat_map(|y| (1..5).map(move |x| (y, x))).map(|(y, x)| p.data()[y * 7 + x]).sum();
        assert!((ii.box_sum(&r) - naive).abs() < 1e-12);
    }

    #[test]
    fn constant_input_gives_constant_inside() {
        let x = Tensor::full(&[1, 1, 12, 12], 2.5f64);
        let boxes = Tensor::from_f64_slice(&[1, 4], &[-2.3, 1.7, -1.2, 2.6]).unwrap();
        let y = boxconv_forward(&x, &boxes).unwrap();
        for yy in 3..9 {
            for xx in 3..9 {
                assert!((y.data()[yy * 12 + xx] - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_box_reproduces_input() {
        let x = rand(&[1, 2, 6, 6], 8, -1.0, 1.0);
        let boxes = Tensor::from_f64_slice(&[2, 4], &[-0.5, 0.5, -0.5, 0.5, -0.5, 0.5, -0.5, 0.5]).unwrap();
        let y = boxconv_forward(&x, &boxes).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_naive_average() {
        for s in 0..50u64 {
            let x = rand(&[1, 2, 8, 8], s, -1.0, 1.0);
            let mut boxes = rand(&[2, 4], 1000 + s, -6.0, 6.0);
            clamp_boxes(&mut boxes, BoxClamp { delta_min: 0.5, radius: 6.0 });
            let y = boxconv_forward(&x, &boxes).unwrap();
            let oracle = naive_boxconv(&x, &boxes);
            let err = y.data().iter().zip(oracle.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "case {s}: {err}");
        }
    }

    #[test]
    fn multiple_boxes_per_plane() {
        let x = rand(&[2, 2, 5, 6], 9, -1.0, 1.0);
        let mut boxes = rand(&[6, 4], 10, -3.0, 3.0);
        clamp_boxes(&mut boxes, BoxClamp { delta_min: 0.7, radius: 3.0 });
        let y = boxconv_forward(&x, &boxes).unwrap();
        assert_eq!(y.shape(), &[2, 6, 5, 6]);
        let oracle = naive_boxconv(&x, &boxes);
        assert!(y.data().iter().zip(oracle.data()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn adding_a_constant_propagates_exactly() {
        let x = rand(&[1, 1, 7, 9], 11, -1.0, 1.0);
        let boxes = Tensor::from_f64_slice(&[1, 4], &[-3.2, 2.1, -1.4, 4.3]).unwrap();
        let c = 0.75;
        let y = boxconv_forward(&x, &boxes).unwrap();
        let y2 = boxconv_forward(&x.map(|v| v + c), &boxes).unwrap();
        let ones = boxconv_forward(&Tensor::full(&[1, 1, 7, 9], 1.0), &boxes).unwrap();
        for k in 0..y.numel() {
            // the all-ones response is clipped_area / full_area
            assert!((y2.data()[k] - y.data()[k] - c * ones.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_boxes_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let boxes = Tensor::from_f64_slice(&[1, 4], &[1.0, 0.5, -1.0, 1.0]).unwrap();
        assert!(matches!(boxconv_forward(&x, &boxes), Err(crate::Error::Contract(_))));
        let boxes = Tensor::from_f64_slice(&[3, 4], &[0.0; 12]).unwrap();
        assert!(matches!(boxconv_forward(&Tensor::<f64>::zeros(&[1, 2, 4, 4]), &boxes), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn edge_gradient_vanishes_on_constant_input() {
        let x = Tensor::full(&[1, 1, 16, 16], 3.0f64);
        let boxes = Tensor::from_f64_slice(&[1, 4], &[-1.7, 2.2, -2.4, 1.3]).unwrap();
        // gradient restricted to interior outputs, where boxes are unclipped
        let mut g = Tensor::zeros(&[1, 1, 16, 16]);
        for y in 4..12 {
            for xx in 4..12 {
                g.data_mut()[y * 16 + xx] = 1.0;
            }
        }
        let (_, gb) = boxconv_backward(&g, &x, &boxes, false, true).unwrap();
        assert!(gb.unwrap().data().iter().all(|v| v.abs() < 1e-10));
    }

    /// Random boxes whose corners stay at least 0.3 away from the integer
    /// grid once offset by the pixel center.
    fn fractional_boxes(planes: usize, seed: u64) -> Tensor<f64> {
        let base = rand(&[planes, 4], seed, -3.0, 3.0);
        let mut d: Vec<f64> = base
            .data()
            .iter()
            .map(|v| {
                let whole = v.round();
                let frac = ((v - whole) * 0.4).clamp(-0.2, 0.2);
                whole + frac
            })
            .collect();
        for k in 0..planes {
            if d[4 * k + 1] <= d[4 * k] + 1.0 {
                d[4 * k + 1] = d[4 * k] + 2.0;
            }
            if d[4 * k + 3] <= d[4 * k + 2] + 1.0 {
                d[4 * k + 3] = d[4 * k + 2] + 2.0;
            }
        }
        Tensor::new(&[planes, 4], d).unwrap()
    }

    // linear in x, so a wide step is exact and keeps roundoff small
    #[test]
    fn input_gradient_matches_finite_differences() {
        let x = rand(&[2, 2, 6, 7], 12, -1.0, 1.0);
        let boxes = fractional_boxes(2, 13);
        let wts = rand(&[2, 2, 6, 7], 14, -1.0, 1.0);
        let r = grad_check(
            |tp, v| {
                let y = boxconv(tp, &v[0], &Var::constant(boxes.clone()))?;
                Ok(ops::reduce_sum_all(tp, &ops::mul(tp, &y, &Var::constant(wts.clone()))?))
            },
            &[x],
            1e-2,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn edge_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let x = rand(&[2, 2, 8, 9], 20 + seed, -1.0, 1.0);
            let boxes = fractional_boxes(2, 30 + seed);
            let wts = rand(&[2, 2, 8, 9], 40 + seed, -1.0, 1.0);
            let r = grad_check(
                |tp, v| {
                    let y = boxconv(tp, &Var::constant(x.clone()), &v[0])?;
                    Ok(ops::reduce_sum_all(tp, &ops::mul(tp, &y, &Var::constant(wts.clone()))?))
                },
                &[boxes],
                1e-4,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-3, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn clamp_examples() {
        let c = BoxClamp { delta_min: 1.0, radius: 8.0 };
        let mut ok = Tensor::<f64>::from_f64_slice(&[1, 4], &[-1.25, 2.5, -3.0, 0.5]).unwrap();
        let before = ok.clone();
        clamp_boxes(&mut ok, c);
        assert_eq!(ok, before);

        let mut bad = Tensor::<f64>::from_f64_slice(&[1, 4], &[1.0, 0.5, -1.0, 1.0]).unwrap();
        clamp_boxes(&mut bad, c);
        assert_eq!(&bad.data()[..2], &[0.25, 1.25]);
    }

    #[test]
    fn init_examples() {
        let a: Tensor<f64> = init_boxes(5, 8, 1, 4.0, 1.0).unwrap();
        let b: Tensor<f64> = init_boxes(5, 8, 1, 4.0, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 4.0));
        assert!(boxes_valid(&a, BoxClamp { delta_min: 1.0, radius: 8.0 }));
        assert!(init_boxes::<f64>(5, 8, 1, 3.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn clamp_always_yields_valid_boxes(vals in proptest::collection::vec(-50.0f64..50.0, 4 * 1000)) {
            let mut boxes = Tensor::new(&[1000, 4], vals).unwrap();
            let c = BoxClamp { delta_min: 1.0, radius: 16.0 };
            clamp_boxes(&mut boxes, c);
            prop_assert!(boxes_valid(&boxes, c));
        }

        #[test]
        fn init_always_valid(seed in any::<u64>(), r0 in 4.0f64..40.0) {
            let boxes: Tensor<f64> = init_boxes(seed, 16, 1, r0, 1.0).unwrap();
            let c = BoxClamp { delta_min: 1.0, radius: r0 };
            prop_assert!(boxes_valid(&boxes, c));
        }
    }
}
