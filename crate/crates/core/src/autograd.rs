//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in evaluation order; [`Graph::backward`]
//! walks the tape once in reverse. Nodes that do not depend on a leaf created
//! with `requires_grad = true` are never visited in the backward pass, so
//! inference graphs (teacher forward passes) pay nothing for differentiation.

use crate::error::{Error, Result};
use crate::tensor::{gemm, ConvGeom, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One region of interest for [`Graph::roi_align`], in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSample {
    pub batch: usize,
    pub level: usize,
    /// `[x1, y1, x2, y2]`
    pub bbox: [f64; 4],
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Add(Var, Var),
    ConcatChannels(Vec<Var>),
    Upsample2x(Var),
    GradReverse {
        x: Var,
        coeff: f64,
    },
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SpatialMean(Var),
    Sigmoid(Var),
    Square(Var),
    SubScalar {
        x: Var,
        s: Var,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
    Combine(Vec<(Var, f64)>),
    RoiAlign {
        levels: Vec<Var>,
        strides: Vec<f64>,
        rois: Vec<RoiSample>,
        out: usize,
        sampling: usize,
    },
    BceLogits {
        x: Var,
        targets: Tensor,
        weights: Tensor,
    },
    SmoothL1 {
        x: Var,
        targets: Tensor,
        weights: Tensor,
        beta: f64,
    },
    SoftmaxCe {
        x: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4();
        let (o, ci, k, k2) = self.value(w).dims4();
        if ci != c || k != k2 || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!(
                "conv2d: input {:?}, weight {:?}, stride {stride}, pad {pad}",
                self.shape(x),
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::Shape(format!(
                    "conv2d bias {:?} for {o} outputs",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let ckk = c * k * k;
        let mut out = vec![0.0; n * o * ho * wo];
        let mut cols = vec![0.0; ckk * ho * wo];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            geom.im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], &mut cols);
            let dst = &mut out[i * o * ho * wo..(i + 1) * o * ho * wo];
            gemm(o, ckk, ho * wo, wv, false, &cols, false, dst, 0.0);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (oc, plane) in dst.chunks_mut(ho * wo).enumerate() {
                    for v in plane {
                        *v += bv[oc];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::new(&[n, o, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels: {:?} vs {:?}",
                    self.shape(parts[0]),
                    self.shape(p)
                )));
            }
            total_c += pc;
        }
        let mut out = Vec::with_capacity(n * total_c * h * w);
        for i in 0..n {
            for &p in parts {
                let t = self.value(p);
                let plane = t.len() / n;
                out.extend_from_slice(&t.data()[i * plane..(i + 1) * plane]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::new(&[n, total_c, h, w], out)?;
        Ok(self.push(value, Op::ConcatChannels(parts.to_vec()), needs))
    }

    /// Nearest-neighbour ×2 upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * 4 * h * w];
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let needs = self.needs(x);
        let value = Tensor::new(&[n, c, 2 * h, 2 * w], out).expect("upsample shape");
        self.push(value, Op::Upsample2x(x), needs)
    }

    /// Identity forward; backward multiplies the incoming gradient by `-coeff`.
    pub fn grad_reverse(&mut self, x: Var, coeff: f64) -> Var {
        let value = self.value(x).clone();
        let needs = self.needs(x);
        self.push(value, Op::GradReverse { x, coeff }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// `x·wᵀ + b` for `x: [R, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        let (r, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; r * out];
        gemm(
            r,
            inp,
            out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut y,
            0.0,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != out {
                return Err(Error::Shape(format!(
                    "linear bias {} for {out} outputs",
                    bv.len()
                )));
            }
            for row in y.chunks_mut(out) {
                for (v, bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::new(&[r, out], y)?;
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = (h * w) as f64;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let needs = self.needs(x);
        self.push(
            Tensor::new(&[n, c], out).expect("mean shape"),
            Op::SpatialMean(x),
            needs,
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let needs = self.needs(x);
        self.push(value, Op::Square(x), needs)
    }

    /// `x - s` with `s` a single-element node broadcast over `x`.
    pub fn sub_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape(format!(
                "sub_scalar: {:?} is not a scalar",
                self.shape(s)
            )));
        }
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v - sv);
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(value, Op::SubScalar { x, s }, needs))
    }

    /// `Σ weights_i · x_i`, a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::Shape(format!(
                "weighted_sum: {} weights for {:?}",
                weights.len(),
                self.shape(x)
            )));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, needs))
    }

    /// `Σ coeff_j · s_j` over single-element nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::Shape(format!(
                    "combine: {:?} is not a scalar",
                    self.shape(v)
                )));
            }
            s += c * self.value(v).item();
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Tensor::scalar(s), Op::Combine(terms.to_vec()), needs))
    }

    /// Bilinear region pooling over a multi-level feature pyramid.
    ///
    /// `strides[l]` is the pixel stride of `levels[l]`. Output is `[R, C, out, out]`;
    /// each bin averages `sampling × sampling` bilinear taps (half-pixel aligned).
    pub fn roi_align(
        &mut self,
        levels: &[Var],
        strides: &[f64],
        rois: &[RoiSample],
        out: usize,
        sampling: usize,
    ) -> Result<Var> {
        if levels.len() != strides.len() || levels.is_empty() {
            return Err(Error::Shape(
                "roi_align: one stride per level required".into(),
            ));
        }
        let c = self.value(levels[0]).dims4().1;
        for &l in levels {
            if self.value(l).dims4().1 != c {
                return Err(Error::Shape(
                    "roi_align: channel count differs across levels".into(),
                ));
            }
        }
        let bins = out * out;
        let mut y = vec![0.0; rois.len() * c * bins];
        for (r, roi) in rois.iter().enumerate() {
            let feat = self.value(*levels.get(roi.level).ok_or_else(|| {
                Error::Shape(format!("roi_align: level {} out of range", roi.level))
            })?);
            let (n, _, h, w) = feat.dims4();
            if roi.batch >= n {
                return Err(Error::Shape(format!(
                    "roi_align: batch {} out of range",
                    roi.batch
                )));
            }
            let fd = feat.data();
            let base = roi.batch * c * h * w;
            let dst = &mut y[r * c * bins..(r + 1) * c * bins];
            for_each_tap(
                roi,
                strides[roi.level],
                h,
                w,
                out,
                sampling,
                |bin, off, wt| {
                    for ch in 0..c {
                        dst[ch * bins + bin] += wt * fd[base + ch * h * w + off];
                    }
                },
            );
        }
        let needs = levels.iter().any(|&l| self.needs(l));
        let value = Tensor::new(&[rois.len(), c, out, out], y)?;
        Ok(self.push(
            value,
            Op::RoiAlign {
                levels: levels.to_vec(),
                strides: strides.to_vec(),
                rois: rois.to_vec(),
                out,
                sampling,
            },
            needs,
        ))
    }

    /// `Σ wᵢ · BCE(σ(xᵢ), tᵢ)`, computed stably from logits.
    pub fn bce_with_logits(&mut self, x: Var, targets: Tensor, weights: Tensor) -> Result<Var> {
        let n = self.value(x).len();
        if targets.len() != n || weights.len() != n {
            return Err(Error::Shape(
                "bce_with_logits: target/weight length mismatch".into(),
            ));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(targets.data())
            .zip(weights.data())
            .filter(|(_, &w)| w != 0.0)
            .map(|((&z, &t), &w)| w * bce_logit(z, t))
            .sum();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::BceLogits {
                x,
                targets,
                weights,
            },
            needs,
        ))
    }

    /// `Σ wᵢ · smoothL1_β(xᵢ - tᵢ)`.
    pub fn smooth_l1(
        &mut self,
        x: Var,
        targets: Tensor,
        weights: Tensor,
        beta: f64,
    ) -> Result<Var> {
        let n = self.value(x).len();
        if targets.len() != n || weights.len() != n {
            return Err(Error::Shape(
                "smooth_l1: target/weight length mismatch".into(),
            ));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(targets.data())
            .zip(weights.data())
            .filter(|(_, &w)| w != 0.0)
            .map(|((&p, &t), &w)| w * smooth_l1(p - t, beta))
            .sum();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::SmoothL1 {
                x,
                targets,
                weights,
                beta,
            },
            needs,
        ))
    }

    /// `Σ_r w_r · CE(softmax(x_r), label_r)` for `x: [R, K]`.
    pub fn softmax_cross_entropy(
        &mut self,
        x: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || labels.len() != weights.len() {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: logits {shape:?}, {} labels",
                labels.len()
            )));
        }
        let k = shape[1];
        if labels.iter().any(|&l| l >= k) {
            return Err(Error::Shape(
                "softmax_cross_entropy: label out of range".into(),
            ));
        }
        let xv = self.value(x).data();
        let mut s = 0.0;
        for (r, (&l, &w)) in labels.iter().zip(&weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let row = &xv[r * k..(r + 1) * k];
            s += w * (log_sum_exp(row) - row[l]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::SoftmaxCe { x, labels, weights },
            needs,
        ))
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be a scalar, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        value: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (n, c, h, wd) = xt.dims4();
                let (o, _, k, _) = wt.dims4();
                let geom = ConvGeom {
                    c,
                    h,
                    w: wd,
                    k,
                    stride: *stride,
                    pad: *pad,
                };
                let (ho, wo) = geom.out_hw();
                let ckk = c * k * k;
                let plane = o * ho * wo;
                let want_x = self.needs(*x);
                let want_w = self.needs(*w);
                let mut dw = want_w.then(|| vec![0.0; o * ckk]);
                let mut dx = want_x.then(|| vec![0.0; n * c * h * wd]);
                let mut cols = vec![0.0; ckk * ho * wo];
                let gd = g.data();
                for i in 0..n {
                    let gi = &gd[i * plane..(i + 1) * plane];
                    if let Some(dw) = dw.as_mut() {
                        geom.im2col(&xt.data()[i * c * h * wd..(i + 1) * c * h * wd], &mut cols);
                        gemm(o, ho * wo, ckk, gi, false, &cols, true, dw, 1.0);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(ckk, o, ho * wo, wt.data(), true, gi, false, &mut cols, 0.0);
                        geom.col2im(&cols, &mut dx[i * c * h * wd..(i + 1) * c * h * wd]);
                    }
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(wt.shape(), dw)?);
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(xt.shape(), dx)?);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; o];
                    for (idx, p) in gd.chunks(ho * wo).enumerate() {
                        db[idx % o] += p.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *b, Tensor::new(&[o], db)?);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gg, &v)| if v > 0.0 { gg } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::ConcatChannels(parts) => {
                let (n, _, h, w) = value.dims4();
                let total_plane = g.len() / n;
                let mut offset = 0;
                for &p in parts {
                    let pshape = self.shape(p).to_vec();
                    let pc = pshape[1];
                    let pp = pc * h * w;
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(n * pp);
                        for i in 0..n {
                            d.extend_from_slice(
                                &g.data()[i * total_plane + offset..i * total_plane + offset + pp],
                            );
                        }
                        self.accumulate(grads, p, Tensor::new(&pshape, d)?);
                    }
                    offset += pp;
                }
            }
            Op::Upsample2x(x) => {
                let xs = self.shape(*x).to_vec();
                let (h, w) = (xs[2], xs[3]);
                let mut d = vec![0.0; xs.iter().product()];
                for (idx, &gg) in g.data().iter().enumerate() {
                    let xx = idx % (2 * w);
                    let y = (idx / (2 * w)) % (2 * h);
                    let p = idx / (4 * h * w);
                    d[(p * h + y / 2) * w + xx / 2] += gg;
                }
                self.accumulate(grads, *x, Tensor::new(&xs, d)?);
            }
            Op::GradReverse { x, coeff } => {
                self.accumulate(grads, *x, g.map(|v| -coeff * v));
            }
            Op::Reshape(x) => {
                let xs = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&xs)?);
            }
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (r, inp) = (xt.shape()[0], xt.shape()[1]);
                let out = wt.shape()[0];
                if self.needs(*x) {
                    let mut dx = vec![0.0; r * inp];
                    gemm(r, out, inp, g.data(), false, wt.data(), false, &mut dx, 0.0);
                    self.accumulate(grads, *x, Tensor::new(xt.shape(), dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; out * inp];
                    gemm(out, r, inp, g.data(), true, xt.data(), false, &mut dw, 0.0);
                    self.accumulate(grads, *w, Tensor::new(wt.shape(), dw)?);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; out];
                    for row in g.data().chunks(out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&[out], db)?);
                }
            }
            Op::SpatialMean(x) => {
                let xs = self.shape(*x).to_vec();
                let hw = xs[2] * xs[3];
                let mut d = Vec::with_capacity(xs.iter().product());
                for &gg in g.data() {
                    d.extend(std::iter::repeat_n(gg / hw as f64, hw));
                }
                self.accumulate(grads, *x, Tensor::new(&xs, d)?);
            }
            Op::Sigmoid(x) => {
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(value.data())
                    .map(|(&gg, &y)| gg * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gg, &v)| 2.0 * v * gg)
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::SubScalar { x, s } => {
                self.accumulate(grads, *x, g.clone());
                let total: f64 = g.data().iter().sum();
                let sshape = self.shape(*s).to_vec();
                self.accumulate(grads, *s, Tensor::new(&sshape, vec![-total])?);
            }
            Op::WeightedSum { x, weights } => {
                let gg = g.item();
                let xs = self.shape(*x).to_vec();
                self.accumulate(
                    grads,
                    *x,
                    Tensor::new(&xs, weights.data().iter().map(|w| w * gg).collect())?,
                );
            }
            Op::Combine(terms) => {
                let gg = g.item();
                for &(v, c) in terms {
                    let vs = self.shape(v).to_vec();
                    self.accumulate(grads, v, Tensor::new(&vs, vec![c * gg])?);
                }
            }
            Op::RoiAlign {
                levels,
                strides,
                rois,
                out,
                sampling,
            } => {
                let c = self.value(levels[0]).dims4().1;
                let bins = out * out;
                let mut dl: Vec<Option<Vec<f64>>> = levels
                    .iter()
                    .map(|&l| self.needs(l).then(|| vec![0.0; self.value(l).len()]))
                    .collect();
                for (r, roi) in rois.iter().enumerate() {
                    let Some(d) = dl[roi.level].as_mut() else {
                        continue;
                    };
                    let (_, _, h, w) = self.value(levels[roi.level]).dims4();
                    let base = roi.batch * c * h * w;
                    let src = &g.data()[r * c * bins..(r + 1) * c * bins];
                    for_each_tap(
                        roi,
                        strides[roi.level],
                        h,
                        w,
                        *out,
                        *sampling,
                        |bin, off, wt| {
                            for ch in 0..c {
                                d[base + ch * h * w + off] += wt * src[ch * bins + bin];
                            }
                        },
                    );
                }
                for (l, d) in levels.iter().zip(dl) {
                    if let Some(d) = d {
                        let ls = self.shape(*l).to_vec();
                        self.accumulate(grads, *l, Tensor::new(&ls, d)?);
                    }
                }
            }
            Op::BceLogits {
                x,
                targets,
                weights,
            } => {
                let gg = g.item();
                let d: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(targets.data())
                    .zip(weights.data())
                    .map(|((&z, &t), &w)| {
                        if w == 0.0 {
                            0.0
                        } else {
                            gg * w * (sigmoid(z) - t)
                        }
                    })
                    .collect();
                let xs = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::new(&xs, d)?);
            }
            Op::SmoothL1 {
                x,
                targets,
                weights,
                beta,
            } => {
                let gg = g.item();
                let d: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(targets.data())
                    .zip(weights.data())
                    .map(|((&p, &t), &w)| {
                        if w == 0.0 {
                            0.0
                        } else {
                            gg * w * smooth_l1_grad(p - t, *beta)
                        }
                    })
                    .collect();
                let xs = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::new(&xs, d)?);
            }
            Op::SoftmaxCe { x, labels, weights } => {
                let gg = g.item();
                let xt = self.value(*x);
                let k = xt.shape()[1];
                let mut d = vec![0.0; xt.len()];
                for (r, (&l, &w)) in labels.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let row = &xt.data()[r * k..(r + 1) * k];
                    let lse = log_sum_exp(row);
                    for j in 0..k {
                        let p = (row[j] - lse).exp();
                        d[r * k + j] = gg * w * (p - if j == l { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xt.shape(), d)?);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

pub(crate) fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Visits every bilinear tap of an aligned ROI: `(bin index, spatial offset, weight)`.
fn for_each_tap(
    roi: &RoiSample,
    stride: f64,
    h: usize,
    w: usize,
    out: usize,
    sampling: usize,
    mut f: impl FnMut(usize, usize, f64),
) {
    let scale = 1.0 / stride;
    let x1 = roi.bbox[0] * scale - 0.5;
    let y1 = roi.bbox[1] * scale - 0.5;
    let bin_w = (roi.bbox[2] - roi.bbox[0]) * scale / out as f64;
    let bin_h = (roi.bbox[3] - roi.bbox[1]) * scale / out as f64;
    let norm = 1.0 / (sampling * sampling) as f64;
    for py in 0..out {
        for px in 0..out {
            let bin = py * out + px;
            for sy in 0..sampling {
                let y = y1 + py as f64 * bin_h + (sy as f64 + 0.5) * bin_h / sampling as f64;
                for sx in 0..sampling {
                    let x = x1 + px as f64 * bin_w + (sx as f64 + 0.5) * bin_w / sampling as f64;
                    bilinear_taps(y, x, h, w, |off, wt| f(bin, off, wt * norm));
                }
            }
        }
    }
}

fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, mut f: impl FnMut(usize, f64)) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (y0, y1, ly) = axis_taps(y, h);
    let (x0, x1, lx) = axis_taps(x, w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    f(y0 * w + x0, hy * hx);
    f(y0 * w + x1, hy * lx);
    f(y1 * w + x0, ly * hx);
    f(y1 * w + x1, ly * lx);
}

fn axis_taps(v: f64, n: usize) -> (usize, usize, f64) {
    let lo = v.floor() as usize;
    if lo >= n - 1 {
        (n - 1, n - 1, 0.0)
    } else {
        (lo, lo + 1, v - lo as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(root)/d(leaf) for every element of `leaf`.
    fn check<F>(leaf_value: Tensor, build: F)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut g = Graph::new();
        let leaf = g.leaf(leaf_value.clone(), true);
        let root = build(&mut g, leaf);
        let grads = g.backward(root).unwrap();
        let analytic = grads.get(leaf).unwrap().clone();
        let eps = 1e-6;
        for i in 0..leaf_value.len() {
            let eval = |delta: f64| {
                let mut t = leaf_value.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let l = g.leaf(t, true);
                let r = build(&mut g, l);
                g.value(r).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < 1e-5,
                "elem {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 6]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let probe = rand_tensor(&mut rng, &[2 * 3 * 3 * 3]);
        let (w2, b2, p2) = (w.clone(), b.clone(), probe.clone());
        check(x.clone(), move |g, xv| {
            let wv = g.constant(w2.clone());
            let bv = g.constant(b2.clone());
            let y = g.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
            g.weighted_sum(y, p2.clone()).unwrap()
        });
        let (x2, p3) = (x.clone(), probe.clone());
        check(w, move |g, wv| {
            let xv = g.constant(x2.clone());
            let bv = g.constant(b.clone());
            let y = g.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
            g.weighted_sum(y, p3.clone()).unwrap()
        });
    }

    #[test]
    fn elementwise_and_pooling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let probe = rand_tensor(&mut rng, &[2 * 8 * 8]);
        check(x.clone(), move |g, v| {
            let s = g.sigmoid(v);
            let u = g.upsample2x(s);
            let q = g.square(u);
            g.weighted_sum(q, probe.clone()).unwrap()
        });
        check(x.clone(), |g, v| {
            let m = g.spatial_mean(v);
            let r = g.reshape(m, &[2, 1]).unwrap();
            let sq = g.square(r);
            g.weighted_sum(sq, Tensor::new(&[2], vec![0.3, -1.2]).unwrap())
                .unwrap()
        });
        let targets = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        check(x.clone(), move |g, v| {
            g.bce_with_logits(v, targets.clone(), Tensor::full(&[1, 2, 4, 4], 0.5))
                .unwrap()
        });
        let t2 = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        check(x, move |g, v| {
            g.smooth_l1(v, t2.clone(), Tensor::full(&[1, 2, 4, 4], 1.0), 1.0 / 9.0)
                .unwrap()
        });
    }

    #[test]
    fn linear_softmax_and_scalar_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[4, 5]);
        let w = rand_tensor(&mut rng, &[3, 5]);
        check(x.clone(), move |g, v| {
            let wv = g.constant(w.clone());
            let y = g.linear(v, wv, None).unwrap();
            g.softmax_cross_entropy(y, vec![0, 2, 1, 2], vec![1.0, 0.5, 0.0, 2.0])
                .unwrap()
        });
        check(x, |g, v| {
            let m = g.weighted_sum(v, Tensor::full(&[4, 5], 0.05)).unwrap();
            let d = g.sub_scalar(v, m).unwrap();
            let sq = g.square(d);
            let a = g.weighted_sum(sq, Tensor::full(&[4, 5], 1.0)).unwrap();
            g.combine(&[(a, 0.7), (m, -2.0)]).unwrap()
        });
    }

    #[test]
    fn roi_align_and_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f0 = rand_tensor(&mut rng, &[2, 3, 8, 8]);
        let f1 = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let probe = rand_tensor(&mut rng, &[3 * 2 * 3 * 2 * 2]);
        let rois = vec![
            RoiSample {
                batch: 0,
                level: 0,
                bbox: [3.0, 5.0, 20.0, 17.5],
            },
            RoiSample {
                batch: 1,
                level: 1,
                bbox: [0.0, 0.0, 31.0, 30.0],
            },
            RoiSample {
                batch: 1,
                level: 0,
                bbox: [10.2, 1.7, 14.9, 9.3],
            },
        ];
        check(f0.clone(), move |g, v| {
            let l1 = g.constant(f1.clone());
            let c = g.concat_channels(&[v, v]).unwrap();
            let c1 = g.concat_channels(&[l1, l1]).unwrap();
            let y = g.roi_align(&[c, c1], &[4.0, 8.0], &rois, 2, 2).unwrap();
            g.weighted_sum(y, probe.clone()).unwrap()
        });
    }

    #[test]
    fn grad_reverse_is_identity_forward_and_negated_backward() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let r = g.grad_reverse(x, 2.5e-3);
        assert_eq!(g.value(r), g.value(x));
        let s = g.weighted_sum(r, Tensor::full(&[3], 1.0)).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[-2.5e-3; 3]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[2], 1.0));
        let p = g.leaf(Tensor::full(&[2], 3.0), true);
        let s = g.add(c, p).unwrap();
        let r = g.weighted_sum(s, Tensor::full(&[2], 1.0)).unwrap();
        let grads = g.backward(r).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0]);
    }
}
