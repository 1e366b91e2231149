//! A small reverse-mode automatic differentiation tape over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value. A node requires
//! a gradient iff one of its inputs does, so constants (for example the
//! parameters of a frozen network) never receive gradient work.

use rand::Rng;

use crate::audio::deltas::{augment_plane, augment_plane_adjoint, AUGMENTED_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2 {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    InstanceNorm {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        x: Var,
    },
    Elu {
        x: Var,
        alpha: f64,
    },
    ScaledTanh {
        x: Var,
        scale: f64,
    },
    Mask {
        x: Var,
        mask: Vec<f64>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
    SpectralNorm {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
    },
    Deltas {
        x: Var,
    },
    ProjectUnitBall {
        x: Var,
        norms: Vec<f64>,
    },
    MeanSquaredTo {
        x: Var,
        target: f64,
    },
    MeanAbsDiff {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, ci, kh, kw) = self.value(w).dims4()?;
        if ci != c || kh != kw {
            return Err(Error::Shape(format!(
                "conv weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != o {
                return Err(Error::Shape("conv bias length".into()));
            }
        }
        let geom = ConvGeom::new(c, h, wd, kh, stride, pad)?;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = b.map(|b| self.value(b).data());
        let out_hw = geom.out_h * geom.out_w;
        let mut out = vec![0.0; n * o * out_hw];
        let mut cols = vec![0.0; geom.col_rows() * out_hw];
        for i in 0..n {
            geom.im2col(&xs[i * c * h * wd..(i + 1) * c * h * wd], &mut cols);
            let dst = &mut out[i * o * out_hw..(i + 1) * o * out_hw];
            gemm(o, geom.col_rows(), out_hw, ws, false, &cols, false, dst, 0.0);
            if let Some(bs) = bs {
                for (oc, row) in dst.chunks_mut(out_hw).enumerate() {
                    row.iter_mut().for_each(|v| *v += bs[oc]);
                }
            }
        }
        let value = Tensor::from_vec(&[n, o, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Nearest-neighbour 2× upsampling of both spatial axes.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    d[y * ow + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Upsample2 { x }, rg))
    }

    /// `y = x Wᵀ + b` for `x: [N, in]`, `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, inp) = self.value(x).dims2()?;
        let (o, wi) = self.value(w).dims2()?;
        if wi != inp {
            return Err(Error::Shape(format!(
                "linear weight {:?} vs input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * o];
        for i in 0..n {
            let xr = &xs[i * inp..(i + 1) * inp];
            for j in 0..o {
                let wr = &ws[j * inp..(j + 1) * inp];
                let mut acc = bs.map_or(0.0, |b| b[j]);
                for (a, bb) in xr.iter().zip(wr) {
                    acc += a * bb;
                }
                out[i * o + j] = acc;
            }
        }
        let value = Tensor::from_vec(&[n, o], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Per-sample, per-channel normalization over the spatial axes (no affine).
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let m = h * w;
        let src = self.value(x).data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; n * c];
        for p in 0..n * c {
            let s = &src[p * m..(p + 1) * m];
            let mean = s.iter().sum::<f64>() / m as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
            inv_std[p] = is;
            for (d, v) in xhat[p * m..(p + 1) * m].iter_mut().zip(s) {
                *d = (v - mean) * is;
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], xhat.clone())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::InstanceNorm { x, xhat, inv_std }, rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        Tensor::from_vec(t.shape(), data).expect("same shape")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn elu(&mut self, x: Var, alpha: f64) -> Var {
        let value = self.map(x, |v| if v > 0.0 { v } else { alpha * v.exp_m1() });
        let rg = self.rg(x);
        self.push(value, Op::Elu { x, alpha }, rg)
    }

    /// `scale · tanh(x)`.
    pub fn scaled_tanh(&mut self, x: Var, scale: f64) -> Var {
        let value = self.map(x, |v| scale * v.tanh());
        let rg = self.rg(x);
        self.push(value, Op::ScaledTanh { x, scale }, rg)
    }

    /// Inverted dropout: each element survives with probability `keep_prob`
    /// and survivors are scaled by `1 / keep_prob`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, keep_prob: f64, rng: &mut R) -> Var {
        if keep_prob >= 1.0 {
            return x;
        }
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep_prob {
                    1.0 / keep_prob
                } else {
                    0.0
                }
            })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_vec(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Mask { x, mask }, rg)
    }

    /// Non-overlapping max pooling with window = stride = `(kh, kw)`.
    pub fn max_pool(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if kh == 0 || kw == 0 || h % kh != 0 || w % kw != 0 {
            return Err(Error::Shape(format!(
                "pool {kh}x{kw} does not tile {h}x{w}"
            )));
        }
        let (oh, ow) = (h / kh, w / kw);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0; out.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let idx = base + (y * kh + dy) * w + xx * kw + dx;
                            if src[idx] > best {
                                best = src[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = p * oh * ow + y * ow + xx;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(parts[0]).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "channel concat needs equal batch/spatial dims, got {:?} and {:?}",
                    self.value(parts[0]).shape(),
                    self.value(p).shape()
                )));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for i in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[i * pc * hw..(i + 1) * pc * hw]);
            }
        }
        let value = Tensor::from_vec(&[n, total_c, h, w], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// `W / σ` with `σ = uᵀ W v` for fixed singular-vector estimates `u`, `v`,
    /// where `W` is viewed as `[rows, len/rows]`.
    pub fn spectral_norm(&mut self, w: Var, u: &[f64], v: &[f64]) -> Result<Var> {
        let t = self.value(w);
        let rows = t.shape()[0];
        let cols = t.len() / rows;
        if u.len() != rows || v.len() != cols {
            return Err(Error::Shape("spectral-norm vectors".into()));
        }
        let sigma = bilinear(t.data(), rows, cols, u, v);
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Numeric(format!("spectral norm sigma = {sigma}")));
        }
        let data = t.data().iter().map(|x| x / sigma).collect();
        let value = Tensor::from_vec(t.shape(), data)?;
        let rg = self.rg(w);
        Ok(self.push(
            value,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            rg,
        ))
    }

    /// `[N, 1, T, F]` → `[N, 5, T, F]` delta augmentation.
    pub fn deltas(&mut self, x: Var) -> Result<Var> {
        let (n, c, t, f) = self.value(x).dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("delta input needs 1 channel, got {c}")));
        }
        let src = self.value(x).data();
        let plane = t * f;
        let mut out = vec![0.0; n * AUGMENTED_CHANNELS * plane];
        for i in 0..n {
            augment_plane(
                &src[i * plane..(i + 1) * plane],
                t,
                f,
                &mut out[i * AUGMENTED_CHANNELS * plane..(i + 1) * AUGMENTED_CHANNELS * plane],
            );
        }
        let value = Tensor::from_vec(&[n, AUGMENTED_CHANNELS, t, f], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Deltas { x }, rg))
    }

    /// Row-wise `c / max(‖c‖₂, 1)` on `[N, D]`.
    pub fn project_unit_ball(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut norms = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = norm;
            let div = norm.max(1.0);
            for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = v / div;
            }
        }
        let value = Tensor::from_vec(&[n, d], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::ProjectUnitBall { x, norms }, rg))
    }

    /// Scalar `mean((x - target)²)`.
    pub fn mean_squared_to(&mut self, x: Var, target: f64) -> Var {
        let t = self.value(x);
        let m = t.len() as f64;
        let v = t.data().iter().map(|v| (v - target) * (v - target)).sum::<f64>() / m;
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::MeanSquaredTo { x, target }, rg)
    }

    /// Scalar `mean(|a - b|)`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mean_abs_diff {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let m = ta.len() as f64;
        let v = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / m;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::MeanAbsDiff { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("add {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.map(x, |v| k * v);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, k }, rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Grads { grads };
        }
        let seed = Tensor::filled(self.value(loss).shape(), 1.0);
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xt = self.value(x);
                let wt = self.value(w);
                let (n, c, h, wd) = xt.dims4().expect("checked in forward");
                let o = wt.shape()[0];
                let k = wt.shape()[2];
                let geom = ConvGeom::new(c, h, wd, k, stride, pad).expect("checked in forward");
                let out_hw = geom.out_h * geom.out_w;
                let rows = geom.col_rows();
                let want_x = self.rg(x);
                let want_w = self.rg(w);
                let mut dx = want_x.then(|| vec![0.0; xt.len()]);
                let mut dw = want_w.then(|| vec![0.0; wt.len()]);
                let mut cols = vec![0.0; rows * out_hw];
                let mut dcols = vec![0.0; rows * out_hw];
                for i in 0..n {
                    let gy = &gd[i * o * out_hw..(i + 1) * o * out_hw];
                    if let Some(dw) = dw.as_mut() {
                        geom.im2col(&xt.data()[i * c * h * wd..(i + 1) * c * h * wd], &mut cols);
                        gemm(o, out_hw, rows, gy, false, &cols, true, dw, 1.0);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(rows, o, out_hw, wt.data(), true, gy, false, &mut dcols, 0.0);
                        geom.col2im(&dcols, &mut dx[i * c * h * wd..(i + 1) * c * h * wd]);
                    }
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    let mut db = vec![0.0; o];
                    for i in 0..n {
                        for (oc, d) in db.iter_mut().enumerate() {
                            let s = (i * o + oc) * out_hw;
                            *d += gd[s..s + out_hw].iter().sum::<f64>();
                        }
                    }
                    accumulate(grads, b, self.value(b).shape(), db);
                }
                if let Some(dx) = dx {
                    accumulate(grads, x, xt.shape(), dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, w, wt.shape(), dw);
                }
            }
            &Op::Upsample2 { x } => {
                let xt = self.value(x);
                let (n, c, h, w) = xt.dims4().expect("rank 4");
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; xt.len()];
                for p in 0..n * c {
                    let s = &gd[p * oh * ow..(p + 1) * oh * ow];
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            d[(y / 2) * w + xx / 2] += s[y * ow + xx];
                        }
                    }
                }
                accumulate(grads, x, xt.shape(), dx);
            }
            &Op::Linear { x, w, b } => {
                let xt = self.value(x);
                let wt = self.value(w);
                let (n, inp) = xt.dims2().expect("rank 2");
                let o = wt.shape()[0];
                if self.rg(x) {
                    let mut dx = vec![0.0; n * inp];
                    for i in 0..n {
                        let dr = &mut dx[i * inp..(i + 1) * inp];
                        for j in 0..o {
                            let gv = gd[i * o + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, wv) in dr.iter_mut().zip(&wt.data()[j * inp..(j + 1) * inp]) {
                                *d += gv * wv;
                            }
                        }
                    }
                    accumulate(grads, x, xt.shape(), dx);
                }
                if self.rg(w) {
                    let mut dw = vec![0.0; o * inp];
                    for i in 0..n {
                        let xr = &xt.data()[i * inp..(i + 1) * inp];
                        for j in 0..o {
                            let gv = gd[i * o + j];
                            for (d, xv) in dw[j * inp..(j + 1) * inp].iter_mut().zip(xr) {
                                *d += gv * xv;
                            }
                        }
                    }
                    accumulate(grads, w, wt.shape(), dw);
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    let mut db = vec![0.0; o];
                    for i in 0..n {
                        for j in 0..o {
                            db[j] += gd[i * o + j];
                        }
                    }
                    accumulate(grads, b, self.value(b).shape(), db);
                }
            }
            Op::InstanceNorm { x, xhat, inv_std } => {
                let xt = self.value(*x);
                let (n, c, h, w) = xt.dims4().expect("rank 4");
                let m = h * w;
                let mf = m as f64;
                let mut dx = vec![0.0; xt.len()];
                for p in 0..n * c {
                    let gy = &gd[p * m..(p + 1) * m];
                    let xh = &xhat[p * m..(p + 1) * m];
                    let sum_g: f64 = gy.iter().sum();
                    let sum_gx: f64 = gy.iter().zip(xh).map(|(a, b)| a * b).sum();
                    let k = inv_std[p] / mf;
                    for ((d, gv), xv) in dx[p * m..(p + 1) * m].iter_mut().zip(gy).zip(xh) {
                        *d = k * (mf * gv - sum_g - xv * sum_gx);
                    }
                }
                accumulate(grads, *x, xt.shape(), dx);
            }
            &Op::Relu { x } => {
                let xt = self.value(x);
                let dx = xt
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, x, xt.shape(), dx);
            }
            &Op::Elu { x, alpha } => {
                let xt = self.value(x);
                let dx = xt
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(v, g)| if *v > 0.0 { *g } else { g * alpha * v.exp() })
                    .collect();
                accumulate(grads, x, xt.shape(), dx);
            }
            &Op::ScaledTanh { x, scale } => {
                let xt = self.value(x);
                let dx = xt
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(v, g)| {
                        let th = v.tanh();
                        g * scale * (1.0 - th * th)
                    })
                    .collect();
                accumulate(grads, x, xt.shape(), dx);
            }
            Op::Mask { x, mask } => {
                let dx = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate(grads, *x, self.value(*x).shape(), dx);
            }
            Op::MaxPool { x, argmax } => {
                let xt = self.value(*x);
                let mut dx = vec![0.0; xt.len()];
                for (g, &at) in gd.iter().zip(argmax) {
                    dx[at] += g;
                }
                accumulate(grads, *x, xt.shape(), dx);
            }
            Op::Concat { parts } => {
                let (n, total_c, h, w) = g.dims4().expect("rank 4");
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(n * pc * hw);
                        for i in 0..n {
                            let s = (i * total_c + offset) * hw;
                            dp.extend_from_slice(&gd[s..s + pc * hw]);
                        }
                        accumulate(grads, p, self.value(p).shape(), dp);
                    }
                    offset += pc;
                }
            }
            &Op::Reshape { x } => {
                accumulate(grads, x, self.value(x).shape(), gd.to_vec());
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                // d(W/σ) with σ = uᵀWv: (G - <G, W/σ> u vᵀ) / σ
                let wn = &node.value;
                let inner: f64 = gd.iter().zip(wn.data()).map(|(a, b)| a * b).sum();
                let cols = v.len();
                let mut dw = vec![0.0; gd.len()];
                for (r, ur) in u.iter().enumerate() {
                    for (cidx, vc) in v.iter().enumerate() {
                        let k = r * cols + cidx;
                        dw[k] = (gd[k] - inner * ur * vc) / sigma;
                    }
                }
                accumulate(grads, *w, wn.shape(), dw);
            }
            &Op::Deltas { x } => {
                let (n, _, t, f) = g.dims4().expect("rank 4");
                let plane = t * f;
                let mut dx = vec![0.0; n * plane];
                for i in 0..n {
                    augment_plane_adjoint(
                        &gd[i * AUGMENTED_CHANNELS * plane..(i + 1) * AUGMENTED_CHANNELS * plane],
                        t,
                        f,
                        &mut dx[i * plane..(i + 1) * plane],
                    );
                }
                accumulate(grads, x, self.value(x).shape(), dx);
            }
            Op::ProjectUnitBall { x, norms } => {
                let y = &node.value;
                let (n, d) = y.dims2().expect("rank 2");
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    let gy = &gd[i * d..(i + 1) * d];
                    let dr = &mut dx[i * d..(i + 1) * d];
                    if norms[i] <= 1.0 {
                        dr.copy_from_slice(gy);
                    } else {
                        let yr = &y.data()[i * d..(i + 1) * d];
                        let dot: f64 = yr.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in dr.iter_mut().zip(gy).zip(yr) {
                            *o = (gv - yv * dot) / norms[i];
                        }
                    }
                }
                accumulate(grads, *x, y.shape(), dx);
            }
            &Op::MeanSquaredTo { x, target } => {
                let xt = self.value(x);
                let k = 2.0 * gd[0] / xt.len() as f64;
                let dx = xt.data().iter().map(|v| k * (v - target)).collect();
                accumulate(grads, x, xt.shape(), dx);
            }
            &Op::MeanAbsDiff { a, b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let k = gd[0] / ta.len() as f64;
                let sign: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| k * sign_of(x - y))
                    .collect();
                if self.rg(b) {
                    let neg = sign.iter().map(|s| -s).collect();
                    accumulate(grads, b, tb.shape(), neg);
                }
                if self.rg(a) {
                    accumulate(grads, a, ta.shape(), sign);
                }
            }
            &Op::Add { a, b } => {
                for p in [a, b] {
                    if self.rg(p) {
                        accumulate(grads, p, self.value(p).shape(), gd.to_vec());
                    }
                }
            }
            &Op::Scale { x, k } => {
                let dx = gd.iter().map(|g| k * g).collect();
                accumulate(grads, x, self.value(x).shape(), dx);
            }
        }
    }
}

fn sign_of(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(Tensor::from_vec(shape, data).expect("gradient shape")),
    }
}

/// `uᵀ W v` for `W` stored row-major as `rows × cols`.
pub fn bilinear(w: &[f64], rows: usize, cols: usize, u: &[f64], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        s += u[r] * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
    s
}

/// Geometry of a square-kernel 2-D convolution on one sample.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Shape(format!(
                "kernel {k} stride {stride} pad {pad} on {h}x{w}"
            )));
        }
        Ok(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Source index range along one axis for kernel offset `kk`:
    /// output positions `lo..hi` map to in-bounds inputs.
    fn valid_range(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        // in = o*stride + kk - pad must lie in [0, len)
        let lo = if kk >= self.pad {
            0
        } else {
            (self.pad - kk).div_ceil(self.stride)
        };
        let hi = if len + self.pad > kk {
            ((len + self.pad - kk - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let out_hw = self.out_h * self.out_w;
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                let (ylo, yhi) = self.valid_range(ki, self.h, self.out_h);
                for kj in 0..self.k {
                    let (xlo, xhi) = self.valid_range(kj, self.w, self.out_w);
                    let row = (ci * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * out_hw..(row + 1) * out_hw];
                    dst.iter_mut().for_each(|v| *v = 0.0);
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + ki - self.pad;
                        let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                        let drow = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        for ox in xlo..xhi {
                            drow[ox] = src_row[ox * self.stride + kj - self.pad];
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let out_hw = self.out_h * self.out_w;
        for ci in 0..self.c {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.k {
                let (ylo, yhi) = self.valid_range(ki, self.h, self.out_h);
                for kj in 0..self.k {
                    let (xlo, xhi) = self.valid_range(kj, self.w, self.out_w);
                    let row = (ci * self.k + ki) * self.k + kj;
                    let src = &cols[row * out_hw..(row + 1) * out_hw];
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + ki - self.pad;
                        let srow = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let drow = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for ox in xlo..xhi {
                            drow[ox * self.stride + kj - self.pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `C = A·B + beta·C` with optional transposition of the row-major operands.
/// `A` is logically `m × k`, `B` is `k × n`, `C` is `m × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices hold at least m*k, k*n and m*n elements under the
    // given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
