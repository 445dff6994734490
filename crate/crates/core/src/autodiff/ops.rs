use super::{gemm, Node, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Output extent of a strided, zero-padded window.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::param("conv2d stride must be >= 1"));
    }
    if kernel > input + 2 * pad {
        return Err(Error::shape(format!(
            "kernel extent {kernel} exceeds padded input extent {}",
            input + 2 * pad
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one image `[C,H,W]` into `[C*kh*kw, Ho*Wo]`.
    fn im2col(&self, img: &[f64], out: &mut [f64]) {
        let cols = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            dst[oi * self.wo + oj] = if ii >= 0
                                && jj >= 0
                                && (ii as usize) < self.h
                                && (jj as usize) < self.w
                            {
                                img[(c * self.h + ii as usize) * self.w + jj as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters-adds columns into `img`.
    fn col2im(&self, cols_buf: &[f64], img: &mut [f64]) {
        let cols = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols_buf[row * cols..(row + 1) * cols];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii as usize >= self.h {
                            continue;
                        }
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && (jj as usize) < self.w {
                                img[(c * self.h + ii as usize) * self.w + jj as usize] +=
                                    src[oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d expects input [N,C,H,W] and weight [F,C,kH,kW], got {xs:?} and {ws:?}"
        )));
    }
    if xs[1] != ws[1] {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {} channels, weight expects {}",
            xs[1], ws[1]
        )));
    }
    if b.shape() != [ws[0]] {
        return Err(Error::shape(format!(
            "conv2d bias shape {:?} does not match {} filters",
            b.shape(),
            ws[0]
        )));
    }
    Ok(ConvGeom {
        c: xs[1],
        h: xs[2],
        w: xs[3],
        kh: ws[2],
        kw: ws[3],
        ho: conv_out_extent(xs[2], ws[2], stride, pad)?,
        wo: conv_out_extent(xs[3], ws[3], stride, pad)?,
        stride,
        pad,
    })
}

fn binary_forward(kind: Binary, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let f = |x: f64, y: f64| match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
        Binary::Div => x / y,
    };
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![0.0; out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Tensor::new(&out, data)
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

impl Tape {
    fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            binary_forward(kind, &nodes[ia].value, &nodes[ib].value)?
        };
        let op = match kind {
            Binary::Add => Op::Add(ia, ib),
            Binary::Sub => Op::Sub(ia, ib),
            Binary::Mul => Op::Mul(ia, ib),
            Binary::Div => Op::Div(ia, ib),
        };
        self.push(value, op)
    }

    fn unary(&self, a: Var, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ia = self.check(a)?;
        let value = f(&self.nodes.borrow()[ia].value)?;
        self.push(value, op(ia))
    }

    /// Elementwise `a + b` with broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        self.unary(a, |t| Ok(t.map(|v| v * factor)), |i| Op::Scale(i, factor))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |t| Ok(t.map(|v| v + c)), Op::AddScalar)
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary(a, |t| Ok(t.map(|v| v * v)), Op::Square)
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |t| {
                if t.data().iter().any(|&v| v < 0.0) {
                    return Err(Error::NonFinite("sqrt of negative value".into()));
                }
                Ok(t.map(f64::sqrt))
            },
            Op::Sqrt,
        )
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, |t| Ok(t.map(|v| if v > 0.0 { v } else { 0.0 })), Op::Relu)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, a: Var) -> Result<Var> {
        self.unary(a, |t| Ok(Tensor::scalar(t.sum())), Op::Sum)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.with_value(a, Tensor::len)?;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over `axes`, keeping them as extent-1 axes.
    pub fn mean_axes(&self, a: Var, axes: &[usize]) -> Result<Var> {
        self.unary(
            a,
            |t| {
                let ax = axes;
                if let Some(&bad) = ax.iter().find(|&&i| i >= t.rank()) {
                    return Err(Error::shape(format!(
                        "mean axis {bad} out of range for rank {}",
                        t.rank()
                    )));
                }
                let out_shape = reduced_shape(t.shape(), ax);
                let count = (t.len() / out_shape.iter().product::<usize>()) as f64;
                let so = broadcast_strides(&out_shape, t.shape());
                let si = crate::tensor::strides(t.shape());
                let mut out = vec![0.0; out_shape.iter().product()];
                let d = t.data();
                for_each_broadcast(t.shape(), &si, &so, |_, i, o| out[o] += d[i]);
                out.iter_mut().for_each(|v| *v /= count);
                Tensor::new(&out_shape, out)
            },
            Op::MeanAxes,
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.unary(a, |t| t.reshape(shape), Op::Reshape)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |t| {
                let k = *t.shape().last().expect("tensors have rank >= 1");
                let mut out = t.data().to_vec();
                for row in out.chunks_mut(k) {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        z += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= z);
                }
                Tensor::new(t.shape(), out)
            },
            Op::Softmax,
        )
    }

    /// Element at flat row-major `index`, shape `[1]`.
    pub fn select(&self, a: Var, index: usize) -> Result<Var> {
        self.unary(
            a,
            |t| {
                t.data()
                    .get(index)
                    .map(|&v| Tensor::scalar(v))
                    .ok_or_else(|| Error::shape(format!("select index {index} out of {}", t.len())))
            },
            |i| Op::Select(i, index),
        )
    }

    /// 2-D cross-correlation: input `[N,C,H,W]`, weight `[F,C,kH,kW]`, bias
    /// `[F]`, zero padding on all sides.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (xt, wt, bt) = (&nodes[ix].value, &nodes[iw].value, &nodes[ib].value);
            let g = conv_geom(xt, wt, bt, stride, pad)?;
            let (n, f) = (xt.shape()[0], wt.shape()[0]);
            let (rows, cols) = (g.rows(), g.cols());
            let img = g.c * g.h * g.w;
            let mut out = vec![0.0; n * f * cols];
            let mut buf = vec![0.0; rows * cols];
            for s in 0..n {
                g.im2col(&xt.data()[s * img..(s + 1) * img], &mut buf);
                let o = &mut out[s * f * cols..(s + 1) * f * cols];
                for (fi, chunk) in o.chunks_mut(cols).enumerate() {
                    chunk.fill(bt.data()[fi]);
                }
                gemm(f, rows, cols, 1.0, wt.data(), false, &buf, false, 1.0, o);
            }
            Tensor::new(&[n, f, g.ho, g.wo], out)?
        };
        self.push(
            value,
            Op::Conv2d {
                x: ix,
                w: iw,
                b: ib,
                stride,
                pad,
            },
        )
    }

    /// Nearest-neighbour upsampling of `[N,C,H,W]` by an integer factor.
    pub fn upsample_nearest(&self, a: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::param("upsample factor must be >= 1"));
        }
        self.unary(
            a,
            |t| {
                let s = t.shape();
                if s.len() != 4 {
                    return Err(Error::shape(format!("upsample expects [N,C,H,W], got {s:?}")));
                }
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h * factor, w * factor);
                let planes = s[0] * s[1];
                let mut out = Vec::with_capacity(planes * ho * wo);
                for p in 0..planes {
                    let plane = &t.data()[p * h * w..(p + 1) * h * w];
                    for i in 0..ho {
                        let row = &plane[(i / factor) * w..(i / factor + 1) * w];
                        for j in 0..wo {
                            out.push(row[j / factor]);
                        }
                    }
                }
                Tensor::new(&[s[0], s[1], ho, wo], out)
            },
            |i| Op::Upsample(i, factor),
        )
    }

    /// Affine map `x · w + b` with `x: [N,D]`, `w: [D,K]`, `b: [K]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (xt, wt, bt) = (&nodes[ix].value, &nodes[iw].value, &nodes[ib].value);
            let (xs, ws) = (xt.shape(), wt.shape());
            if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bt.shape() != [ws[1]] {
                return Err(Error::shape(format!(
                    "linear: input {xs:?}, weight {ws:?}, bias {:?} are incompatible",
                    bt.shape()
                )));
            }
            let (n, d, k) = (xs[0], xs[1], ws[1]);
            let mut out: Vec<f64> = (0..n).flat_map(|_| bt.data().iter().copied()).collect();
            gemm(n, d, k, 1.0, xt.data(), false, wt.data(), false, 1.0, &mut out);
            Tensor::new(&[n, k], out)?
        };
        self.push(value, Op::Linear { x: ix, w: iw, b: ib })
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |t| {
                let s = t.shape();
                if s.len() != 4 {
                    return Err(Error::shape(format!("global_avg_pool expects [N,C,H,W], got {s:?}")));
                }
                let hw = s[2] * s[3];
                let out = t.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
                Tensor::new(&[s[0], s[1]], out)
            },
            Op::GlobalAvgPool,
        )
    }

    /// Mean negative log-likelihood of `targets` under softmax over axis 1 of
    /// `logits: [N,K,...]`. `targets` holds one class per `(n, position)` in
    /// row-major order of the non-class axes.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[il].value;
            let s = t.shape();
            if s.len() < 2 {
                return Err(Error::shape(format!("cross_entropy logits need [N,K,...], got {s:?}")));
            }
            let (n, k) = (s[0], s[1]);
            let spatial: usize = s[2..].iter().product();
            if targets.len() != n * spatial {
                return Err(Error::shape(format!(
                    "cross_entropy: {} targets for logits {s:?}",
                    targets.len()
                )));
            }
            if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
                return Err(Error::data(format!("target class {bad} out of range 0..{k}")));
            }
            let d = t.data();
            let mut total = 0.0;
            for ni in 0..n {
                for p in 0..spatial {
                    let at = |c: usize| d[(ni * k + c) * spatial + p];
                    let m = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + (0..k).map(|c| (at(c) - m).exp()).sum::<f64>().ln();
                    total += lse - at(targets[ni * spatial + p]);
                }
            }
            Tensor::scalar(total / (n * spatial) as f64)
        };
        self.push(
            value,
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
            },
        )
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

fn binary_backward(
    kind: Binary,
    nodes: &[Node],
    ia: usize,
    ib: usize,
    out_shape: &[usize],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (a, b) = (&nodes[ia].value, &nodes[ib].value);
    let (ad, bd) = (a.data(), b.data());
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, &sa, &sb, |o, i, j| match kind {
        Binary::Add => {
            ga[i] += g[o];
            gb[j] += g[o];
        }
        Binary::Sub => {
            ga[i] += g[o];
            gb[j] -= g[o];
        }
        Binary::Mul => {
            ga[i] += g[o] * bd[j];
            gb[j] += g[o] * ad[i];
        }
        Binary::Div => {
            ga[i] += g[o] / bd[j];
            gb[j] -= g[o] * ad[i] / (bd[j] * bd[j]);
        }
    });
    accumulate(nodes, grads, ia, ga);
    accumulate(nodes, grads, ib, gb);
}

pub(super) fn backward_node(
    nodes: &[Node],
    id: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) -> Result<()> {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => binary_backward(Binary::Add, nodes, *a, *b, out.shape(), g, grads),
        Op::Sub(a, b) => binary_backward(Binary::Sub, nodes, *a, *b, out.shape(), g, grads),
        Op::Mul(a, b) => binary_backward(Binary::Mul, nodes, *a, *b, out.shape(), g, grads),
        Op::Div(a, b) => binary_backward(Binary::Div, nodes, *a, *b, out.shape(), g, grads),
        Op::Scale(a, f) => accumulate(nodes, grads, *a, g.iter().map(|v| v * f).collect()),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Square(a) => {
            let x = nodes[*a].value.data();
            accumulate(nodes, grads, *a, g.iter().zip(x).map(|(g, x)| 2.0 * x * g).collect());
        }
        Op::Sqrt(a) => {
            let y = out.data();
            accumulate(nodes, grads, *a, g.iter().zip(y).map(|(g, y)| g / (2.0 * y)).collect());
        }
        Op::Relu(a) => {
            let x = nodes[*a].value.data();
            let gx = g
                .iter()
                .zip(x)
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *a, gx);
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, vec![g[0]; nodes[*a].value.len()]),
        Op::MeanAxes(a) => {
            let input = &nodes[*a].value;
            let count = (input.len() / out.len()) as f64;
            let si = crate::tensor::strides(input.shape());
            let so = broadcast_strides(out.shape(), input.shape());
            let mut gx = vec![0.0; input.len()];
            for_each_broadcast(input.shape(), &si, &so, |_, i, o| gx[i] = g[o] / count);
            accumulate(nodes, grads, *a, gx);
        }
        Op::Softmax(a) => {
            let k = *out.shape().last().expect("rank >= 1");
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for ((gr, yr), gxr) in g.chunks(k).zip(y.chunks(k)).zip(gx.chunks_mut(k)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for i in 0..k {
                    gxr[i] = yr[i] * (gr[i] - dot);
                }
            }
            accumulate(nodes, grads, *a, gx);
        }
        Op::Select(a, index) => {
            let mut gx = vec![0.0; nodes[*a].value.len()];
            gx[*index] = g[0];
            accumulate(nodes, grads, *a, gx);
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let (xt, wt, bt) = (&nodes[*x].value, &nodes[*w].value, &nodes[*b].value);
            let geom = conv_geom(xt, wt, bt, *stride, *pad)?;
            let (n, f) = (xt.shape()[0], wt.shape()[0]);
            let (rows, cols) = (geom.rows(), geom.cols());
            let img = geom.c * geom.h * geom.w;
            let want_x = nodes[*x].requires_grad;
            let want_w = nodes[*w].requires_grad;
            let mut gx = vec![0.0; if want_x { xt.len() } else { 0 }];
            let mut gw = vec![0.0; wt.len()];
            let mut gb = vec![0.0; f];
            let mut buf = vec![0.0; rows * cols];
            for s in 0..n {
                let gs = &g[s * f * cols..(s + 1) * f * cols];
                for (fi, chunk) in gs.chunks(cols).enumerate() {
                    gb[fi] += chunk.iter().sum::<f64>();
                }
                if want_w {
                    geom.im2col(&xt.data()[s * img..(s + 1) * img], &mut buf);
                    gemm(f, cols, rows, 1.0, gs, false, &buf, true, 1.0, &mut gw);
                }
                if want_x {
                    gemm(rows, f, cols, 1.0, wt.data(), true, gs, false, 0.0, &mut buf);
                    geom.col2im(&buf, &mut gx[s * img..(s + 1) * img]);
                }
            }
            if want_x {
                accumulate(nodes, grads, *x, gx);
            }
            accumulate(nodes, grads, *w, gw);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Upsample(a, factor) => {
            let s = nodes[*a].value.shape();
            let (h, w) = (s[2], s[3]);
            let wo = w * factor;
            let mut gx = vec![0.0; nodes[*a].value.len()];
            for (p, plane) in g.chunks(h * factor * wo).enumerate() {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (i, row) in plane.chunks(wo).enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        dst[(i / factor) * w + j / factor] += v;
                    }
                }
            }
            accumulate(nodes, grads, *a, gx);
        }
        Op::Linear { x, w, b } => {
            let (xt, wt) = (&nodes[*x].value, &nodes[*w].value);
            let (n, d, k) = (xt.shape()[0], xt.shape()[1], wt.shape()[1]);
            let mut gx = vec![0.0; n * d];
            gemm(n, k, d, 1.0, g, false, wt.data(), true, 0.0, &mut gx);
            let mut gw = vec![0.0; d * k];
            gemm(d, n, k, 1.0, xt.data(), true, g, false, 0.0, &mut gw);
            let mut gb = vec![0.0; k];
            for row in g.chunks(k) {
                gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            accumulate(nodes, grads, *x, gx);
            accumulate(nodes, grads, *w, gw);
            accumulate(nodes, grads, *b, gb);
        }
        Op::GlobalAvgPool(a) => {
            let s = nodes[*a].value.shape();
            let hw = s[2] * s[3];
            let gx = g.iter().flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw)).collect();
            accumulate(nodes, grads, *a, gx);
        }
        Op::CrossEntropy { logits, targets } => {
            let t = &nodes[*logits].value;
            let s = t.shape();
            let (n, k) = (s[0], s[1]);
            let spatial: usize = s[2..].iter().product();
            let scale = g[0] / (n * spatial) as f64;
            let d = t.data();
            let mut gx = vec![0.0; d.len()];
            for ni in 0..n {
                for p in 0..spatial {
                    let idx = |c: usize| (ni * k + c) * spatial + p;
                    let m = (0..k).map(|c| d[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..k).map(|c| (d[idx(c)] - m).exp()).sum();
                    for c in 0..k {
                        gx[idx(c)] = (d[idx(c)] - m).exp() / z * scale;
                    }
                    gx[idx(targets[ni * spatial + p])] -= scale;
                }
            }
            accumulate(nodes, grads, *logits, gx);
        }
    }
    Ok(())
}
