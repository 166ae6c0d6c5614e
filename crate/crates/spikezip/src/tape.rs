//! Linear operation tape with hand-written backward passes.
//!
//! Supported architectures are sequential, so a flat replayable tape over a
//! closed op set replaces a general autodiff graph. Every node stores the
//! value refs and saved context its vector-Jacobian product needs; backward
//! walks the nodes in exact reverse order.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;

/// Handle to a value held by an [`OpTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueRef(usize);

/// Norm floor for degenerate (all-zero) attention maps.
pub const AG_NORM_FLOOR: f64 = 1e-12;

enum Node<F> {
    Conv2d {
        x: ValueRef,
        w: ValueRef,
        out: ValueRef,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: ValueRef,
        w: ValueRef,
        out: ValueRef,
    },
    Relu {
        x: ValueRef,
        out: ValueRef,
    },
    AvgPool2d {
        x: ValueRef,
        out: ValueRef,
        k: usize,
        stride: usize,
    },
    Dropout {
        x: ValueRef,
        out: ValueRef,
        mask: Tensor<F>,
        keep: F,
    },
    SoftmaxCrossEntropy {
        logits: ValueRef,
        out: ValueRef,
        probs: Tensor<F>,
        targets: Vec<usize>,
    },
    Add {
        a: ValueRef,
        b: ValueRef,
        out: ValueRef,
    },
    Mul {
        a: ValueRef,
        b: ValueRef,
        out: ValueRef,
    },
    Scale {
        x: ValueRef,
        out: ValueRef,
        c: F,
    },
    Reshape {
        x: ValueRef,
        out: ValueRef,
    },
    SumAll {
        x: ValueRef,
        out: ValueRef,
    },
    AttentionMap {
        x: ValueRef,
        out: ValueRef,
        p: u32,
    },
    /// One attention pair: tracked map `qc` against a frozen guide map.
    /// `qm_unit` is the guide already normalized per sample.
    AgPair {
        qc: ValueRef,
        out: ValueRef,
        qm_unit: Tensor<F>,
        squared: bool,
    },
}

/// Gradients for every tape value reached by backward.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient with respect to `v`, if any path from the loss reached it.
    pub fn wrt(&self, v: ValueRef) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient or a zero tensor of the given shape.
    pub fn wrt_or_zero(&self, v: ValueRef, shape: &[usize]) -> Tensor<F> {
        match self.grads[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// Replayable forward tape. Single-owner; not shared across threads.
pub struct OpTape<F> {
    values: Vec<Tensor<F>>,
    nodes: Vec<Node<F>>,
    degenerate_maps: u64,
}

impl<F: Scalar> Default for OpTape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> OpTape<F> {
    pub fn new() -> Self {
        OpTape {
            values: Vec::new(),
            nodes: Vec::new(),
            degenerate_maps: 0,
        }
    }

    /// Register a tensor (parameter or input) as a tape value.
    pub fn value(&mut self, t: Tensor<F>) -> ValueRef {
        self.values.push(t);
        ValueRef(self.values.len() - 1)
    }

    pub fn get(&self, v: ValueRef) -> &Tensor<F> {
        &self.values[v.0]
    }

    /// Count of all-zero attention maps hit by `ag_pair` so far.
    pub fn degenerate_map_events(&self) -> u64 {
        self.degenerate_maps
    }

    fn push(&mut self, out: Tensor<F>, make: impl FnOnce(ValueRef) -> Node<F>) -> ValueRef {
        let out_ref = self.value(out);
        self.nodes.push(make(out_ref));
        out_ref
    }

    /// 2-D cross-correlation, no bias. Input `[N,Ci,H,W]`, weight `[Co,Ci,k,k]`.
    pub fn conv2d(&mut self, x: ValueRef, w: ValueRef, stride: usize, pad: usize) -> Result<ValueRef> {
        let out = conv2d_forward(self.get(x), self.get(w), stride, pad)?;
        out.check_finite("conv2d")?;
        Ok(self.push(out, |o| Node::Conv2d { x, w, out: o, stride, pad }))
    }

    /// Fully connected layer, no bias. Input `[N,In]`, weight `[Out,In]`.
    pub fn linear(&mut self, x: ValueRef, w: ValueRef) -> Result<ValueRef> {
        let out = linear_forward(self.get(x), self.get(w))?;
        out.check_finite("linear")?;
        Ok(self.push(out, |o| Node::Linear { x, w, out: o }))
    }

    pub fn relu(&mut self, x: ValueRef) -> Result<ValueRef> {
        let out = self.get(x).map(|v| if v > F::zero() { v } else { F::zero() });
        Ok(self.push(out, |o| Node::Relu { x, out: o }))
    }

    /// Average pooling over `k`x`k` windows. No padding; trailing rows/cols
    /// that do not fill a window are dropped.
    pub fn avgpool2d(&mut self, x: ValueRef, k: usize, stride: usize) -> Result<ValueRef> {
        let out = avgpool2d_forward(self.get(x), k, stride)?;
        Ok(self.push(out, |o| Node::AvgPool2d { x, out: o, k, stride }))
    }

    /// Inverted dropout with a caller-supplied binary mask (values 0/1).
    /// The mask is frozen for this forward call; SNN training reuses one
    /// mask across all T steps of a sample by passing it repeatedly.
    pub fn dropout(&mut self, x: ValueRef, mask: &Tensor<F>, rate: f64) -> Result<ValueRef> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0,1)", rate)));
        }
        if mask.shape() != self.get(x).shape() {
            return Err(Error::shape(
                "dropout",
                format!("mask {:?} vs input {:?}", mask.shape(), self.get(x).shape()),
            ));
        }
        let keep = F::from_f64(1.0 - rate);
        let out = self
            .get(x)
            .zip_map(mask, "dropout", |v, m| v * m / keep)?;
        Ok(self.push(out, |o| Node::Dropout { x, out: o, mask: mask.clone(), keep }))
    }

    /// Mean softmax cross-entropy over the batch. Logits `[N,K]`.
    pub fn softmax_cross_entropy(&mut self, logits: ValueRef, targets: &[usize]) -> Result<ValueRef> {
        let lt = self.get(logits);
        if lt.shape().len() != 2 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits must be [N,K], got {:?}", lt.shape()),
            ));
        }
        let (n, k) = (lt.shape()[0], lt.shape()[1]);
        if targets.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} targets for batch of {}", targets.len(), n),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Data(format!("label {} out of range 0..{}", bad, k)));
        }
        let mut probs = Tensor::zeros(&[n, k]);
        let mut loss = F::zero();
        for i in 0..n {
            let row = &lt.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for j in 0..k {
                let e = (row[j] - max).exp();
                probs.data_mut()[i * k + j] = e;
                denom += e;
            }
            for j in 0..k {
                probs.data_mut()[i * k + j] /= denom;
            }
            loss -= probs.data()[i * k + targets[i]].ln();
        }
        loss /= F::from_f64(n as f64);
        let out = Tensor::scalar(loss);
        out.check_finite("softmax_cross_entropy")?;
        Ok(self.push(out, |o| Node::SoftmaxCrossEntropy {
            logits,
            out: o,
            probs,
            targets: targets.to_vec(),
        }))
    }

    pub fn add(&mut self, a: ValueRef, b: ValueRef) -> Result<ValueRef> {
        let out = self.get(a).add(self.get(b))?;
        out.check_finite("add")?;
        Ok(self.push(out, |o| Node::Add { a, b, out: o }))
    }

    pub fn mul(&mut self, a: ValueRef, b: ValueRef) -> Result<ValueRef> {
        let out = self.get(a).mul(self.get(b))?;
        out.check_finite("mul")?;
        Ok(self.push(out, |o| Node::Mul { a, b, out: o }))
    }

    pub fn scale(&mut self, x: ValueRef, c: F) -> Result<ValueRef> {
        let out = self.get(x).scale(c);
        out.check_finite("scale")?;
        Ok(self.push(out, |o| Node::Scale { x, out: o, c }))
    }

    pub fn reshape(&mut self, x: ValueRef, shape: Vec<usize>) -> Result<ValueRef> {
        let out = self.get(x).reshape(shape)?;
        Ok(self.push(out, |o| Node::Reshape { x, out: o }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, x: ValueRef) -> Result<ValueRef> {
        let out = Tensor::scalar(self.get(x).sum());
        out.check_finite("sum_all")?;
        Ok(self.push(out, |o| Node::SumAll { x, out: o }))
    }

    /// Per-sample activation attention map: `out[n,hw] = sum_c |x[n,c,h,w]|^p`.
    pub fn attention_map(&mut self, x: ValueRef, p: u32) -> Result<ValueRef> {
        let out = attention_map_forward(self.get(x), p)?;
        Ok(self.push(out, |o| Node::AttentionMap { x, out: o, p }))
    }

    /// One pair of the attention-guided loss: mean over the batch of the
    /// l2 distance (or its square, when `squared`) between the l2-normalized
    /// tracked map and the frozen guide map. Zero-norm maps hit a tiny
    /// denominator floor and are counted as degenerate events.
    pub fn ag_pair(&mut self, qc: ValueRef, qm: &Tensor<F>, squared: bool) -> Result<ValueRef> {
        let qct = self.get(qc);
        if qct.shape() != qm.shape() || qct.shape().len() != 2 {
            return Err(Error::shape(
                "ag_pair",
                format!("maps {:?} vs {:?} (want matching [N,M])", qct.shape(), qm.shape()),
            ));
        }
        let (n, m) = (qct.shape()[0], qct.shape()[1]);
        let floor = F::from_f64(AG_NORM_FLOOR);
        let mut qm_unit = Tensor::zeros(&[n, m]);
        let mut loss = F::zero();
        let mut degenerate = 0u64;
        for i in 0..n {
            let qcr = &qct.data()[i * m..(i + 1) * m];
            let qmr = &qm.data()[i * m..(i + 1) * m];
            let nc = l2(qcr);
            let nm = l2(qmr);
            if nc <= floor {
                degenerate += 1;
            }
            if nm <= floor {
                degenerate += 1;
            }
            let dc = nc + floor;
            let dm = nm + floor;
            let mut d2 = F::zero();
            for j in 0..m {
                let u = qmr[j] / dm;
                qm_unit.data_mut()[i * m + j] = u;
                let diff = qcr[j] / dc - u;
                d2 += diff * diff;
            }
            loss += if squared { d2 } else { d2.sqrt() };
        }
        loss /= F::from_f64(n as f64);
        self.degenerate_maps += degenerate;
        let out = Tensor::scalar(loss);
        out.check_finite("ag_pair")?;
        Ok(self.push(out, |o| Node::AgPair { qc, out: o, qm_unit, squared }))
    }

    /// Reverse pass seeded with gradient 1 at the scalar `loss`.
    pub fn backward(&self, loss: ValueRef) -> Result<Gradients<F>> {
        self.backward_seeded(loss, F::one())
    }

    /// Reverse pass with an arbitrary scalar seed gradient.
    pub fn backward_seeded(&self, loss: ValueRef, seed: F) -> Result<Gradients<F>> {
        if self.nodes.is_empty() {
            return Err(Error::Invariant("backward on empty tape".into()));
        }
        if self.get(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.get(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::scalar(seed));

        for node in self.nodes.iter().rev() {
            self.backward_node(node, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        fn acc<F: Scalar>(grads: &mut [Option<Tensor<F>>], v: ValueRef, add: Tensor<F>) -> Result<()> {
            match &mut grads[v.0] {
                Some(g) => g.add_assign(&add),
                slot @ None => {
                    *slot = Some(add);
                    Ok(())
                }
            }
        }

        match node {
            Node::Conv2d { x, w, out, stride, pad } => {
                let Some(g) = grads[out.0].clone() else { return Ok(()) };
                let (dx, dw) = conv2d_backward(self.get(*x), self.get(*w), &g, *stride, *pad)?;
                acc(grads, *x, dx)?;
                acc(grads, *w, dw)?;
            }
            Node::Linear { x, w, out } => {
                let Some(g) = grads[out.0].clone() else { return Ok(()) };
                let (dx, dw) = linear_backward(self.get(*x), self.get(*w), &g)?;
                acc(grads, *x, dx)?;
                acc(grads, *w, dw)?;
            }
            Node::Relu { x, out } => {
                let Some(g) = grads[out.0].clone() else { return Ok(()) };
                let dx = self.get(*x).zip_map(&g, "relu_backward", |v, gi| {
                    if v > F::zero() {
                        gi
                    } else {
                        F::zero()
                    }
                })?;
                acc(grads, *x, dx)?;
            }
            Node::AvgPool2d { x, out, k, stride } => {
                let Some(g) = grads[out.0].clone() else { return Ok(()) };
                let dx = avgpool2d_backward(self.get(*x).shape(), &g, *k, *stride);
                acc(grads, *x, dx)?;
            }
            Node::Dropout { x, out, mask, keep } => {
                let Some(g) = grads[out.0].clone() else { return Ok(()) };
                let keep = *keep;
                let dx = g.zip_map(mask, "dropout_backward", |gi, m| gi * m / keep)?;
                acc(grads, *x, dx)?;
            }
            Node::SoftmaxCrossEntropy { logits, out, probs, targets } => {
                let Some(g) = grads[out.0].clone() else { return Ok(()) };
                let gs = g.item();
                let (n, k) = (probs.shape()[0], probs.shape()[1]);
                let inv_n = F::from_f64(1.0 / n as f64);
                let mut dl = probs.scale(gs * inv_n);
                for (i, &t) in targets.iter().enumerate() {
                    dl.data_mut()[i * k + t] -= gs * inv_n;
                }
                acc(grads, *logits, dl)?;
            }
            Node::Add { a, b, out } => {
                let Some(g) = grads[out.0].clone() else { return Ok(()) };
                acc(grads, *a, g.clone())?;
                acc(grads, *b, g)?;
            }
            Node::Mul { a, b, out } => {
                let Some(g) = grads[out.0].clone() else { return Ok(()) };
                let da = g.mul(self.get(*b))?;
                let db = g.mul(self.get(*a))?;
                acc(grads, *a, da)?;
                acc(grads, *b, db)?;
            }
            Node::Scale { x, out, c } => {
                let Some(g) = grads[out.0].clone() else { return Ok(()) };
                acc(grads, *x, g.scale(*c))?;
            }
            Node::Reshape { x, out } => {
                let Some(g) = grads[out.0].clone() else { return Ok(()) };
                let dx = g.reshape(self.get(*x).shape().to_vec())?;
                acc(grads, *x, dx)?;
            }
            Node::SumAll { x, out } => {
                let Some(g) = grads[out.0].clone() else { return Ok(()) };
                let dx = Tensor::full(self.get(*x).shape(), g.item());
                acc(grads, *x, dx)?;
            }
            Node::AttentionMap { x, out, p } => {
                let Some(g) = grads[out.0].clone() else { return Ok(()) };
                let xt = self.get(*x);
                let (n, c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]);
                let hw = h * w;
                let pf = F::from_f64(*p as f64);
                let mut dx = Tensor::zeros(xt.shape());
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for s in 0..hw {
                            let v = xt.data()[base + s];
                            let mag = if *p == 1 {
                                F::one()
                            } else {
                                v.abs().powi(*p as i32 - 1)
                            };
                            dx.data_mut()[base + s] = g.data()[ni * hw + s] * pf * mag * sign(v);
                        }
                    }
                }
                acc(grads, *x, dx)?;
            }
            Node::AgPair { qc, out, qm_unit, squared } => {
                let Some(g) = grads[out.0].clone() else { return Ok(()) };
                let gs = g.item();
                let qct = self.get(*qc);
                let (n, m) = (qct.shape()[0], qct.shape()[1]);
                let floor = F::from_f64(AG_NORM_FLOOR);
                let inv_n = F::from_f64(1.0 / n as f64);
                let two = F::from_f64(2.0);
                let mut dq = Tensor::zeros(qct.shape());
                for i in 0..n {
                    let qcr = &qct.data()[i * m..(i + 1) * m];
                    let r = l2(qcr);
                    let dc = r + floor;
                    // u = qc/dc - qm_unit
                    // d(u_i)/dqc_j = delta_ij/dc - qc_i qc_j/(dc^2 r)
                    // unsquared: d(||u||)/dqc_j = u_j/(||u|| dc) - (u.qc) qc_j/(||u|| dc^2 r)
                    // squared:   d(||u||^2)/dqc_j = 2 u_j/dc - 2 (u.qc) qc_j/(dc^2 r)
                    let mut nrm2 = F::zero();
                    let mut u_dot_qc = F::zero();
                    let mut u = vec![F::zero(); m];
                    for j in 0..m {
                        let uj = qcr[j] / dc - qm_unit.data()[i * m + j];
                        nrm2 += uj * uj;
                        u_dot_qc += uj * qcr[j];
                        u[j] = uj;
                    }
                    let nrm = nrm2.sqrt();
                    if !*squared && nrm <= floor {
                        continue; // identical maps: subgradient 0
                    }
                    for j in 0..m {
                        let mut d = if *squared { two * u[j] / dc } else { u[j] / (nrm * dc) };
                        if r > F::zero() {
                            let coupling = if *squared {
                                two * u_dot_qc * qcr[j] / (dc * dc * r)
                            } else {
                                u_dot_qc * qcr[j] / (nrm * dc * dc * r)
                            };
                            d -= coupling;
                        }
                        dq.data_mut()[i * m + j] = gs * inv_n * d;
                    }
                }
                acc(grads, *qc, dq)?;
            }
        }
        Ok(())
    }
}

fn sign<F: Scalar>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

fn l2<F: Scalar>(v: &[F]) -> F {
    v.iter().map(|&x| x * x).sum::<F>().sqrt()
}

/// Output spatial size of a convolution axis.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

pub(crate) fn conv2d_forward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    if x.shape().len() != 4 || w.shape().len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} weight {:?} (want 4-D both)", x.shape(), w.shape()),
        ));
    }
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, wci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if kh != kw {
        return Err(Error::shape("conv2d", format!("non-square kernel {}x{}", kh, kw)));
    }
    if ci != wci {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {} (axis 1) != weight in-channels {} (axis 1)", ci, wci),
        ));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be positive"));
    }
    if kh > h + 2 * pad || kw > wd + 2 * pad {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {} exceeds padded input {}x{} (axes 2,3)", kh, h + 2 * pad, wd + 2 * pad),
        ));
    }
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wd, kw, stride, pad);
    let mut out = Tensor::zeros(&[n, co, ho, wo]);

    let xs = x.data();
    let ws = w.data();
    let per_sample = co * ho * wo;
    out.data_mut()
        .par_chunks_mut(per_sample)
        .enumerate()
        .for_each(|(ni, chunk)| {
            for coi in 0..co {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = F::zero();
                        for cii in 0..ci {
                            let xbase = ((ni * ci + cii) * h) * wd;
                            let wbase = ((coi * ci + cii) * kh) * kw;
                            for i in 0..kh {
                                let ih = (oh * stride + i) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for j in 0..kw {
                                    let iw = (ow * stride + j) as isize - pad as isize;
                                    if iw < 0 || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += xs[xbase + ih as usize * wd + iw as usize]
                                        * ws[wbase + i * kw + j];
                                }
                            }
                        }
                        chunk[(coi * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        });
    Ok(out)
}

pub(crate) fn conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    g: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (g.shape()[2], g.shape()[3]);

    let xs = x.data();
    let ws = w.data();
    let gs = g.data();

    let mut dx = Tensor::zeros(x.shape());
    let per_sample_x = ci * h * wd;
    dx.data_mut()
        .par_chunks_mut(per_sample_x)
        .enumerate()
        .for_each(|(ni, chunk)| {
            for coi in 0..co {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let gv = gs[((ni * co + coi) * ho + oh) * wo + ow];
                        if gv == F::zero() {
                            continue;
                        }
                        for cii in 0..ci {
                            let wbase = ((coi * ci + cii) * kh) * kw;
                            for i in 0..kh {
                                let ih = (oh * stride + i) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for j in 0..kw {
                                    let iw = (ow * stride + j) as isize - pad as isize;
                                    if iw < 0 || iw >= wd as isize {
                                        continue;
                                    }
                                    chunk[(cii * h + ih as usize) * wd + iw as usize] +=
                                        ws[wbase + i * kw + j] * gv;
                                }
                            }
                        }
                    }
                }
            }
        });

    let mut dw = Tensor::zeros(w.shape());
    let per_out_channel = ci * kh * kw;
    dw.data_mut()
        .par_chunks_mut(per_out_channel)
        .enumerate()
        .for_each(|(coi, chunk)| {
            for ni in 0..n {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let gv = gs[((ni * co + coi) * ho + oh) * wo + ow];
                        if gv == F::zero() {
                            continue;
                        }
                        for cii in 0..ci {
                            let xbase = ((ni * ci + cii) * h) * wd;
                            for i in 0..kh {
                                let ih = (oh * stride + i) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for j in 0..kw {
                                    let iw = (ow * stride + j) as isize - pad as isize;
                                    if iw < 0 || iw >= wd as isize {
                                        continue;
                                    }
                                    chunk[(cii * kh + i) * kw + j] +=
                                        xs[xbase + ih as usize * wd + iw as usize] * gv;
                                }
                            }
                        }
                    }
                }
            }
        });

    Ok((dx, dw))
}

pub(crate) fn linear_forward<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>) -> Result<Tensor<F>> {
    if x.shape().len() != 2 || w.shape().len() != 2 {
        return Err(Error::shape(
            "linear",
            format!("input {:?} weight {:?} (want 2-D both)", x.shape(), w.shape()),
        ));
    }
    let (n, inp) = (x.shape()[0], x.shape()[1]);
    let (out_dim, winp) = (w.shape()[0], w.shape()[1]);
    if inp != winp {
        return Err(Error::shape(
            "linear",
            format!("input features {} (axis 1) != weight in-features {} (axis 1)", inp, winp),
        ));
    }
    let mut out = Tensor::zeros(&[n, out_dim]);
    let xs = x.data();
    let ws = w.data();
    out.data_mut()
        .par_chunks_mut(out_dim)
        .enumerate()
        .for_each(|(ni, chunk)| {
            for o in 0..out_dim {
                let mut acc = F::zero();
                let wrow = &ws[o * inp..(o + 1) * inp];
                let xrow = &xs[ni * inp..(ni + 1) * inp];
                for i in 0..inp {
                    acc += xrow[i] * wrow[i];
                }
                chunk[o] = acc;
            }
        });
    Ok(out)
}

pub(crate) fn linear_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    g: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (n, inp) = (x.shape()[0], x.shape()[1]);
    let out_dim = w.shape()[0];
    let xs = x.data();
    let ws = w.data();
    let gs = g.data();

    let mut dx = Tensor::zeros(x.shape());
    dx.data_mut()
        .par_chunks_mut(inp)
        .enumerate()
        .for_each(|(ni, chunk)| {
            for o in 0..out_dim {
                let gv = gs[ni * out_dim + o];
                if gv == F::zero() {
                    continue;
                }
                let wrow = &ws[o * inp..(o + 1) * inp];
                for i in 0..inp {
                    chunk[i] += gv * wrow[i];
                }
            }
        });

    let mut dw = Tensor::zeros(w.shape());
    dw.data_mut()
        .par_chunks_mut(inp)
        .enumerate()
        .for_each(|(o, chunk)| {
            for ni in 0..n {
                let gv = gs[ni * out_dim + o];
                if gv == F::zero() {
                    continue;
                }
                let xrow = &xs[ni * inp..(ni + 1) * inp];
                for i in 0..inp {
                    chunk[i] += gv * xrow[i];
                }
            }
        });

    Ok((dx, dw))
}

pub(crate) fn attention_map_forward<F: Scalar>(x: &Tensor<F>, p: u32) -> Result<Tensor<F>> {
    if p < 1 {
        return Err(Error::Config("attention power p must be >= 1".into()));
    }
    if x.shape().len() != 4 {
        return Err(Error::shape(
            "attention_map",
            format!("expected [N,C,H,W], got {:?}", x.shape()),
        ));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, hw]);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for s in 0..hw {
                let v = x.data()[base + s].abs().powi(p as i32);
                out.data_mut()[ni * hw + s] += v;
            }
        }
    }
    out.check_finite("attention_map")?;
    Ok(out)
}

pub(crate) fn avgpool2d_forward<F: Scalar>(x: &Tensor<F>, k: usize, stride: usize) -> Result<Tensor<F>> {
    if x.shape().len() != 4 {
        return Err(Error::shape(
            "avgpool2d",
            format!("expected [N,C,H,W], got {:?}", x.shape()),
        ));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if k == 0 || stride == 0 || k > h || k > w {
        return Err(Error::shape(
            "avgpool2d",
            format!("window {}/stride {} on {}x{} input", k, stride, h, w),
        ));
    }
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let inv = F::from_f64(1.0 / (k * k) as f64);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for nc in 0..n * c {
        let xbase = nc * h * w;
        let obase = nc * ho * wo;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = F::zero();
                for i in 0..k {
                    for j in 0..k {
                        acc += x.data()[xbase + (oh * stride + i) * w + (ow * stride + j)];
                    }
                }
                out.data_mut()[obase + oh * wo + ow] = acc * inv;
            }
        }
    }
    Ok(out)
}

pub(crate) fn avgpool2d_backward<F: Scalar>(
    xshape: &[usize],
    g: &Tensor<F>,
    k: usize,
    stride: usize,
) -> Tensor<F> {
    let (n, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let inv = F::from_f64(1.0 / (k * k) as f64);
    let mut dx = Tensor::zeros(xshape);
    for nc in 0..n * c {
        let xbase = nc * h * w;
        let gbase = nc * ho * wo;
        for oh in 0..ho {
            for ow in 0..wo {
                let gv = g.data()[gbase + oh * wo + ow] * inv;
                for i in 0..k {
                    for j in 0..k {
                        dx.data_mut()[xbase + (oh * stride + i) * w + (ow * stride + j)] += gv;
                    }
                }
            }
        }
    }
    dx
}
