//! Differentiable tensor operations recorded on a [`Graph`].
//!
//! Activations are laid out NCHW. Shape errors inside this module are
//! programming errors and panic; user-facing layers validate first.
//!
//! Every operation also reports its cost to the graph meter:
//! convolution and linear layers count `2·MAC` FLOPs (plus one per bias
//! add), normalisation costs 2 FLOPs per element (5 for layer norm, which
//! also computes statistics), activations and elementwise arithmetic cost 1
//! per element, max pooling `k²` per output and global average pooling 1
//! per input element. Channel selection, concatenation and reshapes are free.

use ndarray::{linalg::general_mat_mul, ArrayView2, ArrayViewMut2, IxDyn};
use rayon::prelude::*;

use crate::graph::Var;
use crate::params::Tensor;

/// Samples per parallel work unit in convolution backward. Fixed so the
/// weight-gradient reduction order never depends on the thread count.
const GRAD_CHUNK: usize = 4;

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected NCHW tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn dims2(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected 2-D tensor, got shape {s:?}");
    (s[0], s[1])
}

fn contiguous(t: &Tensor) -> std::borrow::Cow<'_, [f64]> {
    match t.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(t.iter().copied().collect()),
    }
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_shape_vec(IxDyn(shape), data).expect("shape matches data")
}

fn placeholder(shape: &[usize]) -> Tensor {
    Tensor::zeros(IxDyn(shape))
}

/// `c = a·b` (or `c += a·b`), with optional transposes, on row-major slices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    (ar, ac): (usize, usize),
    trans_a: bool,
    b: &[f64],
    (br, bc): (usize, usize),
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let a = ArrayView2::from_shape((ar, ac), a).expect("lhs shape");
    let b = ArrayView2::from_shape((br, bc), b).expect("rhs shape");
    let a = if trans_a { a.reversed_axes() } else { a };
    let b = if trans_b { b.reversed_axes() } else { b };
    let mut c = ArrayViewMut2::from_shape((a.nrows(), b.ncols()), c).expect("output shape");
    general_mat_mul(1.0, &a, &b, if accumulate { 1.0 } else { 0.0 }, &mut c);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvSpec { stride, padding, groups }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.padding - kernel) / self.stride + 1
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl ConvGeom {
    fn cg(&self) -> usize {
        self.c / self.groups
    }
    fn og(&self) -> usize {
        self.o / self.groups
    }
    fn depthwise(&self) -> bool {
        self.cg() == 1 && self.og() == 1
    }
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
    fn col_rows(&self) -> usize {
        self.cg() * self.k * self.k
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (k, hw_o) = (g.k, g.ho * g.wo);
    for ci in 0..g.cg() {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw_o..(row + 1) * hw_o];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (k, hw_o) = (g.k, g.ho * g.wo);
    for ci in 0..g.cg() {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw_o..(row + 1) * hw_o];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward(x: &[f64], wt: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let k = g.k;
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let wc = &wt[c * k * k..(c + 1) * k * k];
        let oc = &mut out[c * g.ho * g.wo..(c + 1) * g.ho * g.wo];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut acc = 0.0;
                for ki in 0..k {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            acc += wc[ki * k + kj] * xc[iy as usize * g.w + ix as usize];
                        }
                    }
                }
                oc[oy * g.wo + ox] = acc;
            }
        }
    }
}

fn depthwise_backward(x: &[f64], wt: &[f64], dy: &[f64], g: &ConvGeom, dx: &mut [f64], dw: &mut [f64]) {
    let k = g.k;
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let wc = &wt[c * k * k..(c + 1) * k * k];
        let dyc = &dy[c * g.ho * g.wo..(c + 1) * g.ho * g.wo];
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        let dwc = &mut dw[c * k * k..(c + 1) * k * k];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let d = dyc[oy * g.wo + ox];
                if d == 0.0 {
                    continue;
                }
                for ki in 0..k {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let xi = iy as usize * g.w + ix as usize;
                            dxc[xi] += wc[ki * k + kj] * d;
                            dwc[ki * k + kj] += xc[xi] * d;
                        }
                    }
                }
            }
        }
    }
}

fn conv_sample_forward(x: &[f64], wt: &[f64], g: &ConvGeom, out: &mut [f64], cols: &mut Vec<f64>) {
    if g.depthwise() {
        depthwise_forward(x, wt, g, out);
        return;
    }
    let (cg, og, rows, hw_i, hw_o) = (g.cg(), g.og(), g.col_rows(), g.h * g.w, g.ho * g.wo);
    for gi in 0..g.groups {
        let xg = &x[gi * cg * hw_i..(gi + 1) * cg * hw_i];
        let wg = &wt[gi * og * rows..(gi + 1) * og * rows];
        let og_out = &mut out[gi * og * hw_o..(gi + 1) * og * hw_o];
        if g.pointwise() {
            gemm(wg, (og, rows), false, xg, (cg, hw_o), false, og_out, false);
        } else {
            cols.resize(rows * hw_o, 0.0);
            im2col(xg, g, cols);
            gemm(wg, (og, rows), false, cols, (rows, hw_o), false, og_out, false);
        }
    }
}

fn conv_sample_backward(
    x: &[f64],
    wt: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    dx: &mut [f64],
    dw: &mut [f64],
    cols: &mut Vec<f64>,
) {
    if g.depthwise() {
        depthwise_backward(x, wt, dy, g, dx, dw);
        return;
    }
    let (cg, og, rows, hw_i, hw_o) = (g.cg(), g.og(), g.col_rows(), g.h * g.w, g.ho * g.wo);
    for gi in 0..g.groups {
        let xg = &x[gi * cg * hw_i..(gi + 1) * cg * hw_i];
        let wg = &wt[gi * og * rows..(gi + 1) * og * rows];
        let dyg = &dy[gi * og * hw_o..(gi + 1) * og * hw_o];
        let dwg = &mut dw[gi * og * rows..(gi + 1) * og * rows];
        let dxg = &mut dx[gi * cg * hw_i..(gi + 1) * cg * hw_i];
        if g.pointwise() {
            gemm(dyg, (og, hw_o), false, xg, (cg, hw_o), true, dwg, true);
            gemm(wg, (og, rows), true, dyg, (og, hw_o), false, dxg, false);
        } else {
            cols.resize(rows * hw_o, 0.0);
            im2col(xg, g, cols);
            gemm(dyg, (og, hw_o), false, cols, (rows, hw_o), true, dwg, true);
            gemm(wg, (og, rows), true, dyg, (og, hw_o), false, cols, false);
            dxg.fill(0.0);
            col2im(cols, g, dxg);
        }
    }
}

/// 2-D convolution. `w` has shape `[O, C/groups, k, k]`, `b` shape `[O]`.
pub fn conv2d<'g>(x: &Var<'g>, w: &Var<'g>, b: Option<&Var<'g>>, spec: ConvSpec) -> Var<'g> {
    let graph = x.graph();
    let (n, c, h, wd) = dims4(x.value());
    let ws = w.shape().to_vec();
    assert_eq!(ws.len(), 4, "conv weight must be 4-D");
    let (o, k) = (ws[0], ws[2]);
    assert_eq!(ws[2], ws[3], "square kernels only");
    assert!(c % spec.groups == 0 && o % spec.groups == 0, "channels not divisible by groups");
    assert_eq!(ws[1], c / spec.groups, "conv weight expects {} input channels per group, got {}", ws[1], c / spec.groups);
    assert!(h + 2 * spec.padding >= k && wd + 2 * spec.padding >= k, "input smaller than kernel");
    let geom = ConvGeom {
        c,
        h,
        w: wd,
        o,
        k,
        ho: spec.output_size(h, k),
        wo: spec.output_size(wd, k),
        stride: spec.stride,
        pad: spec.padding,
        groups: spec.groups,
    };
    let out_shape = [n, o, geom.ho, geom.wo];
    let macs = (n * geom.cg() * k * k * o * geom.ho * geom.wo) as u64;
    let bias_flops = if b.is_some() { (n * o * geom.ho * geom.wo) as u64 } else { 0 };
    graph.add_cost(2 * macs + bias_flops, macs);
    if !graph.computes() {
        return graph.input(placeholder(&out_shape));
    }

    let xv = x.shared_value();
    let wv = w.shared_value();
    let per_in = c * h * wd;
    let per_out = o * geom.ho * geom.wo;
    let mut out = vec![0.0; n * per_out];
    {
        let xs = contiguous(&xv);
        let wsl = contiguous(&wv);
        out.par_chunks_mut(per_out).enumerate().for_each_init(Vec::new, |cols, (i, o_n)| {
            conv_sample_forward(&xs[i * per_in..(i + 1) * per_in], &wsl, &geom, o_n, cols);
        });
    }
    if let Some(b) = b {
        let bs = contiguous(b.value());
        let hw = geom.ho * geom.wo;
        for (idx, chunk) in out.chunks_mut(hw).enumerate() {
            let bias = bs[idx % o];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
    }
    let value = tensor(&out_shape, out);

    let parents: Vec<&Var<'g>> = match b {
        Some(b) => vec![x, w, b],
        None => vec![x, w],
    };
    let has_bias = b.is_some();
    graph.op(value, &parents, move |dy| {
        let xs = contiguous(&xv);
        let wsl = contiguous(&wv);
        let dys = contiguous(dy);
        let mut dx = vec![0.0; n * per_in];
        let partials: Vec<Vec<f64>> = dx
            .par_chunks_mut(per_in * GRAD_CHUNK)
            .enumerate()
            .map(|(chunk, dx_chunk)| {
                let mut dw = vec![0.0; wsl.len()];
                let mut cols = Vec::new();
                for (j, dx_n) in dx_chunk.chunks_mut(per_in).enumerate() {
                    let i = chunk * GRAD_CHUNK + j;
                    conv_sample_backward(
                        &xs[i * per_in..(i + 1) * per_in],
                        &wsl,
                        &dys[i * per_out..(i + 1) * per_out],
                        &geom,
                        dx_n,
                        &mut dw,
                        &mut cols,
                    );
                }
                dw
            })
            .collect();
        let mut dw = vec![0.0; wsl.len()];
        for p in partials {
            dw.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        let mut grads = vec![Some(tensor(&[n, c, h, wd], dx)), Some(tensor(&ws, dw))];
        if has_bias {
            let hw = geom.ho * geom.wo;
            let mut db = vec![0.0; o];
            for (idx, chunk) in dys.chunks(hw).enumerate() {
                db[idx % o] += chunk.iter().sum::<f64>();
            }
            grads.push(Some(tensor(&[o], db)));
        }
        grads
    })
}

/// Output of a training-mode batch norm: the normalised activations plus the
/// batch statistics (mean, unbiased variance) for running-average updates.
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

/// Batch normalisation over N, H, W using batch statistics.
pub fn batch_norm_train<'g>(x: &Var<'g>, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> (Var<'g>, BatchStats) {
    let graph = x.graph();
    let (n, c, h, w) = dims4(x.value());
    graph.add_cost(2 * (n * c * h * w) as u64, 0);
    if !graph.computes() {
        let stats = BatchStats {
            mean: vec![0.0; c],
            var_unbiased: vec![1.0; c],
        };
        return (graph.input(placeholder(&[n, c, h, w])), stats);
    }
    let hw = h * w;
    let m = (n * hw) as f64;
    let xs = contiguous(x.value()).into_owned();
    let gs = contiguous(gamma.value()).into_owned();
    let bs = contiguous(beta.value()).into_owned();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let s = &xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            mean[ci] += s.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for ni in 0..n {
        for ci in 0..c {
            let s = &xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            var[ci] += s.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; xs.len()];
    let mut out = vec![0.0; xs.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for j in base..base + hw {
                xhat[j] = (xs[j] - mean[ci]) * inv_std[ci];
                out[j] = gs[ci] * xhat[j] + bs[ci];
            }
        }
    }
    let stats = BatchStats {
        mean: mean.clone(),
        var_unbiased: var.iter().map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v }).collect(),
    };
    let value = tensor(&[n, c, h, w], out);
    let var = graph.op(value, &[x, gamma, beta], move |dy| {
        let dys = contiguous(dy);
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for j in base..base + hw {
                    dgamma[ci] += dys[j] * xhat[j];
                    dbeta[ci] += dys[j];
                }
            }
        }
        let mut dx = vec![0.0; dys.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let k = gs[ci] * inv_std[ci] / m;
                for j in base..base + hw {
                    dx[j] = k * (m * dys[j] - dbeta[ci] - xhat[j] * dgamma[ci]);
                }
            }
        }
        vec![
            Some(tensor(&[n, c, h, w], dx)),
            Some(tensor(&[c], dgamma)),
            Some(tensor(&[c], dbeta)),
        ]
    });
    (var, stats)
}

/// Batch normalisation with fixed (running) statistics.
pub fn batch_norm_eval<'g>(x: &Var<'g>, gamma: &Var<'g>, beta: &Var<'g>, mean: &Tensor, var: &Tensor, eps: f64) -> Var<'g> {
    let graph = x.graph();
    let (n, c, h, w) = dims4(x.value());
    graph.add_cost(2 * (n * c * h * w) as u64, 0);
    if !graph.computes() {
        return graph.input(placeholder(&[n, c, h, w]));
    }
    let hw = h * w;
    let xs = contiguous(x.value()).into_owned();
    let gs = contiguous(gamma.value()).into_owned();
    let bs = contiguous(beta.value());
    let ms = contiguous(mean);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; xs.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for j in base..base + hw {
                out[j] = gs[ci] * (xs[j] - ms[ci]) * inv_std[ci] + bs[ci];
            }
        }
    }
    let ms = ms.into_owned();
    graph.op(tensor(&[n, c, h, w], out), &[x, gamma, beta], move |dy| {
        let dys = contiguous(dy);
        let mut dx = vec![0.0; dys.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for j in base..base + hw {
                    dx[j] = dys[j] * gs[ci] * inv_std[ci];
                    dgamma[ci] += dys[j] * (xs[j] - ms[ci]) * inv_std[ci];
                    dbeta[ci] += dys[j];
                }
            }
        }
        vec![
            Some(tensor(&[n, c, h, w], dx)),
            Some(tensor(&[c], dgamma)),
            Some(tensor(&[c], dbeta)),
        ]
    })
}

fn unary<'g>(x: &Var<'g>, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Var<'g> {
    let graph = x.graph();
    graph.add_cost(x.value().len() as u64, 0);
    if !graph.computes() {
        return graph.input(placeholder(x.shape()));
    }
    let xv = x.shared_value();
    let value = xv.mapv(f);
    graph.op(value, &[x], move |dy| {
        let mut g = dy.clone();
        g.zip_mut_with(&xv, |d, &xi| *d *= df(xi));
        vec![Some(g)]
    })
}

pub fn relu<'g>(x: &Var<'g>) -> Var<'g> {
    unary(x, |v| v.max(0.0), |v| if v > 0.0 { 1.0 } else { 0.0 })
}

pub fn leaky_relu<'g>(x: &Var<'g>, slope: f64) -> Var<'g> {
    unary(
        x,
        move |v| if v > 0.0 { v } else { slope * v },
        move |v| if v > 0.0 { 1.0 } else { slope },
    )
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid<'g>(x: &Var<'g>) -> Var<'g> {
    unary(x, sigmoid_scalar, |v| {
        let s = sigmoid_scalar(v);
        s * (1.0 - s)
    })
}

/// `x · relu6(x + 3) / 6`.
pub fn hard_swish<'g>(x: &Var<'g>) -> Var<'g> {
    unary(
        x,
        |v| v * (v + 3.0).clamp(0.0, 6.0) / 6.0,
        |v| {
            if v <= -3.0 {
                0.0
            } else if v >= 3.0 {
                1.0
            } else {
                (2.0 * v + 3.0) / 6.0
            }
        },
    )
}

/// `relu6(x + 3) / 6`.
pub fn hard_sigmoid<'g>(x: &Var<'g>) -> Var<'g> {
    unary(
        x,
        |v| (v + 3.0).clamp(0.0, 6.0) / 6.0,
        |v| if v > -3.0 && v < 3.0 { 1.0 / 6.0 } else { 0.0 },
    )
}

fn binary<'g>(
    a: &Var<'g>,
    b: &Var<'g>,
    f: impl Fn(f64, f64) -> f64,
    backward: impl Fn(&Tensor, &Tensor, &Tensor) -> (Tensor, Tensor) + 'static,
) -> Var<'g> {
    assert_eq!(a.shape(), b.shape(), "elementwise operands differ in shape");
    let graph = a.graph();
    graph.add_cost(a.value().len() as u64, 0);
    if !graph.computes() {
        return graph.input(placeholder(a.shape()));
    }
    let (av, bv) = (a.shared_value(), b.shared_value());
    let mut value = (*av).clone();
    value.zip_mut_with(&bv, |x, &y| *x = f(*x, y));
    graph.op(value, &[a, b], move |dy| {
        let (ga, gb) = backward(dy, &av, &bv);
        vec![Some(ga), Some(gb)]
    })
}

pub fn add<'g>(a: &Var<'g>, b: &Var<'g>) -> Var<'g> {
    binary(a, b, |x, y| x + y, |dy, _, _| (dy.clone(), dy.clone()))
}

pub fn sub<'g>(a: &Var<'g>, b: &Var<'g>) -> Var<'g> {
    binary(a, b, |x, y| x - y, |dy, _, _| (dy.clone(), -dy))
}

pub fn mul<'g>(a: &Var<'g>, b: &Var<'g>) -> Var<'g> {
    binary(a, b, |x, y| x * y, |dy, a, b| (dy * b, dy * a))
}

/// Scales each (sample, channel) plane of `x` `[N,C,H,W]` by `s` `[N,C]`.
pub fn scale_planes<'g>(x: &Var<'g>, s: &Var<'g>) -> Var<'g> {
    let graph = x.graph();
    let (n, c, h, w) = dims4(x.value());
    assert_eq!(s.shape(), &[n, c], "plane scales must be [N, C]");
    graph.add_cost((n * c * h * w) as u64, 0);
    if !graph.computes() {
        return graph.input(placeholder(&[n, c, h, w]));
    }
    let hw = h * w;
    let xv = x.shared_value();
    let sv = s.shared_value();
    let xs = contiguous(&xv).into_owned();
    let ss = contiguous(&sv).into_owned();
    let out: Vec<f64> = xs.chunks(hw).zip(&ss).flat_map(|(p, &k)| p.iter().map(move |v| v * k)).collect();
    graph.op(tensor(&[n, c, h, w], out), &[x, s], move |dy| {
        let dys = contiguous(dy);
        let dx: Vec<f64> = dys.chunks(hw).zip(&ss).flat_map(|(p, &k)| p.iter().map(move |v| v * k)).collect();
        let ds: Vec<f64> = dys.chunks(hw).zip(xs.chunks(hw)).map(|(d, x)| d.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
        vec![Some(tensor(&[n, c, h, w], dx)), Some(tensor(&[n, c], ds))]
    })
}

/// Per-channel convex mix `m[c]·local + (1 − m[c])·global` over NCHW tensors.
pub fn channel_mix<'g>(local: &Var<'g>, global: &Var<'g>, mask: &Var<'g>) -> Var<'g> {
    assert_eq!(local.shape(), global.shape(), "mix operands differ in shape");
    let graph = local.graph();
    let (n, c, h, w) = dims4(local.value());
    assert_eq!(mask.shape(), &[c], "mask length must equal channel count");
    graph.add_cost(3 * (n * c * h * w) as u64, 0);
    if !graph.computes() {
        return graph.input(placeholder(&[n, c, h, w]));
    }
    let hw = h * w;
    let (lv, gv, mv) = (local.shared_value(), global.shared_value(), mask.shared_value());
    let (ls, gs, ms) = (contiguous(&lv).into_owned(), contiguous(&gv).into_owned(), contiguous(&mv).into_owned());
    let mut out = vec![0.0; ls.len()];
    for (p, o) in out.chunks_mut(hw).enumerate() {
        let m = ms[p % c];
        for (j, v) in o.iter_mut().enumerate() {
            *v = m * ls[p * hw + j] + (1.0 - m) * gs[p * hw + j];
        }
    }
    graph.op(tensor(&[n, c, h, w], out), &[local, global, mask], move |dy| {
        let dys = contiguous(dy);
        let mut dl = vec![0.0; dys.len()];
        let mut dg = vec![0.0; dys.len()];
        let mut dm = vec![0.0; c];
        for (p, d) in dys.chunks(hw).enumerate() {
            let m = ms[p % c];
            for (j, &dv) in d.iter().enumerate() {
                dl[p * hw + j] = m * dv;
                dg[p * hw + j] = (1.0 - m) * dv;
                dm[p % c] += dv * (ls[p * hw + j] - gs[p * hw + j]);
            }
        }
        vec![
            Some(tensor(&[n, c, h, w], dl)),
            Some(tensor(&[n, c, h, w], dg)),
            Some(tensor(&[c], dm)),
        ]
    })
}

/// Max pooling with `-inf` padding; ties resolve to the first maximum in scan order.
pub fn max_pool2d<'g>(x: &Var<'g>, k: usize, stride: usize, pad: usize) -> Var<'g> {
    let graph = x.graph();
    let (n, c, h, w) = dims4(x.value());
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    graph.add_cost((n * c * ho * wo * k * k) as u64, 0);
    if !graph.computes() {
        return graph.input(placeholder(&[n, c, ho, wo]));
    }
    let xs = contiguous(x.value());
    let mut out = vec![0.0; n * c * ho * wo];
    let mut arg = vec![0usize; n * c * ho * wo];
    for p in 0..n * c {
        let plane = &xs[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = iy as usize * w + ix as usize;
                        if best_i == usize::MAX || plane[i] > best {
                            best = plane[i];
                            best_i = i;
                        }
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = p * h * w + best_i;
            }
        }
    }
    graph.op(tensor(&[n, c, ho, wo], out), &[x], move |dy| {
        let dys = contiguous(dy);
        let mut dx = vec![0.0; n * c * h * w];
        for (o, &i) in arg.iter().enumerate() {
            dx[i] += dys[o];
        }
        vec![Some(tensor(&[n, c, h, w], dx))]
    })
}

/// `[N,C,H,W] → [N,C]` spatial mean.
pub fn global_avg_pool<'g>(x: &Var<'g>) -> Var<'g> {
    let graph = x.graph();
    let (n, c, h, w) = dims4(x.value());
    graph.add_cost((n * c * h * w) as u64, 0);
    if !graph.computes() {
        return graph.input(placeholder(&[n, c]));
    }
    let hw = h * w;
    let xs = contiguous(x.value());
    let out: Vec<f64> = xs.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    graph.op(tensor(&[n, c], out), &[x], move |dy| {
        let dys = contiguous(dy);
        let dx: Vec<f64> = dys.iter().flat_map(|&d| std::iter::repeat_n(d / hw as f64, hw)).collect();
        vec![Some(tensor(&[n, c, h, w], dx))]
    })
}

/// `y = x·wᵀ + b` with `x` `[N,D]`, `w` `[O,D]`, `b` `[O]`.
pub fn linear<'g>(x: &Var<'g>, w: &Var<'g>, b: Option<&Var<'g>>) -> Var<'g> {
    let graph = x.graph();
    let (n, d) = dims2(x.value());
    let (o, d2) = dims2(w.value());
    assert_eq!(d, d2, "linear input width {d} does not match weight width {d2}");
    let macs = (n * d * o) as u64;
    graph.add_cost(2 * macs + if b.is_some() { (n * o) as u64 } else { 0 }, macs);
    if !graph.computes() {
        return graph.input(placeholder(&[n, o]));
    }
    let (xv, wv) = (x.shared_value(), w.shared_value());
    let xs = contiguous(&xv).into_owned();
    let ws = contiguous(&wv).into_owned();
    let mut out = vec![0.0; n * o];
    gemm(&xs, (n, d), false, &ws, (o, d), true, &mut out, false);
    if let Some(b) = b {
        let bs = contiguous(b.value());
        for row in out.chunks_mut(o) {
            row.iter_mut().zip(bs.iter()).for_each(|(v, bb)| *v += bb);
        }
    }
    let parents: Vec<&Var<'g>> = match b {
        Some(b) => vec![x, w, b],
        None => vec![x, w],
    };
    let has_bias = b.is_some();
    graph.op(tensor(&[n, o], out), &parents, move |dy| {
        let dys = contiguous(dy);
        let mut dx = vec![0.0; n * d];
        gemm(&dys, (n, o), false, &ws, (o, d), false, &mut dx, false);
        let mut dw = vec![0.0; o * d];
        gemm(&dys, (n, o), true, &xs, (n, d), false, &mut dw, false);
        let mut grads = vec![Some(tensor(&[n, d], dx)), Some(tensor(&[o, d], dw))];
        if has_bias {
            let mut db = vec![0.0; o];
            for row in dys.chunks(o) {
                db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            grads.push(Some(tensor(&[o], db)));
        }
        grads
    })
}

/// Row-wise layer normalisation of `[N,D]` with affine `gamma`, `beta` `[D]`.
pub fn layer_norm<'g>(x: &Var<'g>, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Var<'g> {
    let graph = x.graph();
    let (n, d) = dims2(x.value());
    graph.add_cost(5 * (n * d) as u64, 0);
    if !graph.computes() {
        return graph.input(placeholder(&[n, d]));
    }
    let xs = contiguous(x.value()).into_owned();
    let gs = contiguous(gamma.value()).into_owned();
    let bs = contiguous(beta.value()).into_owned();
    let mut xhat = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        let row = &xs[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        inv_std[r] = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            xhat[r * d + j] = (row[j] - mean) * inv_std[r];
            out[r * d + j] = gs[j] * xhat[r * d + j] + bs[j];
        }
    }
    graph.op(tensor(&[n, d], out), &[x, gamma, beta], move |dy| {
        let dys = contiguous(dy);
        let mut dx = vec![0.0; n * d];
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        for r in 0..n {
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for j in 0..d {
                let i = r * d + j;
                dg[j] += dys[i] * xhat[i];
                db[j] += dys[i];
                let dxh = dys[i] * gs[j];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xhat[i];
            }
            for j in 0..d {
                let i = r * d + j;
                let dxh = dys[i] * gs[j];
                dx[i] = inv_std[r] / d as f64 * (d as f64 * dxh - sum_dxhat - xhat[i] * sum_dxhat_xhat);
            }
        }
        vec![Some(tensor(&[n, d], dx)), Some(tensor(&[d], dg)), Some(tensor(&[d], db))]
    })
}

/// Channels `offset, offset + step, …` of an NCHW tensor.
pub fn select_channels<'g>(x: &Var<'g>, offset: usize, step: usize) -> Var<'g> {
    let graph = x.graph();
    let (n, c, h, w) = dims4(x.value());
    let picked: Vec<usize> = (offset..c).step_by(step).collect();
    let cs = picked.len();
    if !graph.computes() {
        return graph.input(placeholder(&[n, cs, h, w]));
    }
    let hw = h * w;
    let xs = contiguous(x.value());
    let mut out = Vec::with_capacity(n * cs * hw);
    for ni in 0..n {
        for &ci in &picked {
            out.extend_from_slice(&xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]);
        }
    }
    graph.op(tensor(&[n, cs, h, w], out), &[x], move |dy| {
        let dys = contiguous(dy);
        let mut dx = vec![0.0; n * c * hw];
        for ni in 0..n {
            for (k, &ci) in picked.iter().enumerate() {
                dx[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].copy_from_slice(&dys[(ni * cs + k) * hw..(ni * cs + k + 1) * hw]);
            }
        }
        vec![Some(tensor(&[n, c, h, w], dx))]
    })
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels<'g>(parts: &[&Var<'g>]) -> Var<'g> {
    let graph = parts[0].graph();
    let (n, _, h, w) = dims4(parts[0].value());
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| {
            let (pn, pc, ph, pw) = dims4(p.value());
            assert_eq!((pn, ph, pw), (n, h, w), "concat operands differ outside the channel axis");
            pc
        })
        .collect();
    let c: usize = widths.iter().sum();
    if !graph.computes() {
        return graph.input(placeholder(&[n, c, h, w]));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c * hw);
    let slices: Vec<_> = parts.iter().map(|p| contiguous(p.value())).collect();
    for ni in 0..n {
        for (s, &pc) in slices.iter().zip(&widths) {
            out.extend_from_slice(&s[ni * pc * hw..(ni + 1) * pc * hw]);
        }
    }
    graph.op(tensor(&[n, c, h, w], out), parts, move |dy| {
        let dys = contiguous(dy);
        let mut grads: Vec<Vec<f64>> = widths.iter().map(|&pc| Vec::with_capacity(n * pc * hw)).collect();
        for ni in 0..n {
            let mut off = ni * c * hw;
            for (g, &pc) in grads.iter_mut().zip(&widths) {
                g.extend_from_slice(&dys[off..off + pc * hw]);
                off += pc * hw;
            }
        }
        grads
            .into_iter()
            .zip(&widths)
            .map(|(g, &pc)| Some(tensor(&[n, pc, h, w], g)))
            .collect()
    })
}

pub fn reshape<'g>(x: &Var<'g>, shape: &[usize]) -> Var<'g> {
    let graph = x.graph();
    assert_eq!(x.value().len(), shape.iter().product::<usize>(), "reshape changes element count");
    if !graph.computes() {
        return graph.input(placeholder(shape));
    }
    let from = x.shape().to_vec();
    let data = contiguous(x.value()).into_owned();
    graph.op(tensor(shape, data), &[x], move |dy| {
        vec![Some(tensor(&from, contiguous(dy).into_owned()))]
    })
}
