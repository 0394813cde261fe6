use super::kernels;
use super::tensor::Tensor;
use super::Real;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

const LN_EPS: f64 = 1e-5;

enum Op<F> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, F),
    /// Row-broadcast bias add: [rows, d] + [d].
    AddBias(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    /// Output row i is input row `indices[i]`; duplicates allowed.
    GatherRows(TensorId, Vec<usize>),
    /// Output element i is input[i, indices[i]].
    SelectCols(TensorId, Vec<usize>),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        inv_std: Vec<F>,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    /// Multi-head causal self-attention over already-projected q/k/v.
    /// `probs` stores the post-softmax attention matrix per head.
    CausalAttention {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        n_heads: usize,
        probs: Vec<Vec<F>>,
    },
    Relu(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Record of primitive operations in execution order. Parents are always
/// recorded before children, so one reverse sweep visits each node exactly
/// once.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient for `id`; nodes off the loss path get zeros.
    pub fn get(&self, id: TensorId, tape: &Tape<F>) -> Tensor<F> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape().to_vec()),
        }
    }

    pub fn take(&mut self, id: TensorId, tape: &Tape<F>) -> Tensor<F> {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape().to_vec()))
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Trainable input; receives a gradient.
    pub fn leaf(&mut self, value: Tensor<F>) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input (targets, masks, token data).
    pub fn constant(&mut self, value: Tensor<F>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.value(a).same_shape(self.value(b), "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.value(a).same_shape(self.value(b), "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.value(a).same_shape(self.value(b), "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn scale(&mut self, a: TensorId, factor: F) -> TensorId {
        let t = self.value(a).map(|x| x * factor);
        let needs = self.needs(a);
        self.push(t, Op::Scale(a, factor), needs)
    }

    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let d = self.value(x).last_dim();
        if self.value(bias).shape() != [d] {
            return Err(Error::Dimension(format!(
                "add_bias: x last dim {d}, bias shape {:?}",
                self.value(bias).shape()
            )));
        }
        let rows = self.value(x).rows_2d();
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for r in 0..rows {
            let row = &mut data[r * d..(r + 1) * d];
            for j in 0..d {
                row[j] += b[j];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, bias), self.needs(x) || self.needs(bias)))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul expects 2-D operands, got {sa:?} x {sb:?}"
            )));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dims differ: {sa:?} x {sb:?}"
            )));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::Matmul(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn gather_rows(&mut self, x: TensorId, indices: Vec<usize>) -> Result<TensorId> {
        let shape = self.value(x).shape();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "gather_rows expects 2-D input, got {shape:?}"
            )));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![indices.len(), d], data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::GatherRows(x, indices), needs))
    }

    pub fn select_cols(&mut self, x: TensorId, indices: Vec<usize>) -> Result<TensorId> {
        let shape = self.value(x).shape();
        if shape.len() != 2 || shape[0] != indices.len() {
            return Err(Error::Dimension(format!(
                "select_cols: shape {shape:?} vs {} indices",
                indices.len()
            )));
        }
        let cols = shape[1];
        if let Some(&bad) = indices.iter().find(|&&c| c >= cols) {
            return Err(Error::Dimension(format!(
                "select_cols: column {bad} out of range for {cols}"
            )));
        }
        let src = self.value(x).data();
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| src[r * cols + c])
            .collect();
        let t = Tensor::new(vec![indices.len()], data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::SelectCols(x, indices), needs))
    }

    /// Per-row normalization over the last dimension, then affine.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let d = self.value(x).last_dim();
        if d < 2 {
            return Err(Error::Dimension(
                "layer_norm needs last dim >= 2".to_string(),
            ));
        }
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: gain/bias must be [{d}]"
            )));
        }
        let mut out = vec![F::zero(); self.value(x).numel()];
        let inv_std = kernels::layer_norm_rows(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            &mut out,
            d,
            F::from_f64(LN_EPS),
        );
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
            },
            needs,
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        if !self.value(x).all_finite() {
            return Err(Error::NonFinite("softmax input".to_string()));
        }
        let mut data = self.value(x).data().to_vec();
        for_each_lane(&shape, axis, |lane| {
            let mut vals: Vec<F> = lane.iter().map(|&i| data[i]).collect();
            kernels::softmax_row(&mut vals);
            for (&i, &v) in lane.iter().zip(&vals) {
                data[i] = v;
            }
        });
        let t = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Softmax { x, axis }, needs))
    }

    /// Multi-head causal self-attention. `q`, `k`, `v` are [len, d_model];
    /// heads split the feature dimension evenly. Output row `i` depends only
    /// on rows `0..=i` of the inputs.
    pub fn causal_attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        n_heads: usize,
    ) -> Result<TensorId> {
        let shape = self.value(q).shape().to_vec();
        self.value(q).same_shape(self.value(k), "causal_attention")?;
        self.value(q).same_shape(self.value(v), "causal_attention")?;
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "causal_attention expects 2-D inputs, got {shape:?}"
            )));
        }
        let (len, d) = (shape[0], shape[1]);
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Dimension(format!(
                "d_model {d} not divisible by n_heads {n_heads}"
            )));
        }
        let dh = d / n_heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = vec![F::zero(); len * d];
        let mut probs = Vec::with_capacity(n_heads);
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut qh = vec![F::zero(); len * dh];
        let mut kh = vec![F::zero(); len * dh];
        let mut vh = vec![F::zero(); len * dh];
        for h in 0..n_heads {
            kernels::copy_head(qd, &mut qh, len, d, dh, h);
            kernels::copy_head(kd, &mut kh, len, d, dh, h);
            kernels::copy_head(vd, &mut vh, len, d, dh, h);
            let mut a = vec![F::zero(); len * len];
            let mut oh = vec![F::zero(); len * dh];
            for i in 0..len {
                let qrow = &qh[i * dh..(i + 1) * dh];
                let arow = &mut a[i * len..(i + 1) * len];
                for j in 0..=i {
                    arow[j] = kernels::dot(qrow, &kh[j * dh..(j + 1) * dh]) * scale;
                }
                kernels::softmax_row(&mut arow[..=i]);
                kernels::weighted_rows_acc(&arow[..=i], &vh, &mut oh[i * dh..(i + 1) * dh], dh);
            }
            for i in 0..len {
                out[i * d + h * dh..i * d + (h + 1) * dh]
                    .copy_from_slice(&oh[i * dh..(i + 1) * dh]);
            }
            probs.push(a);
        }
        let t = Tensor::new(vec![len, d], out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            t,
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                probs,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let t = self.value(x).map(kernels::relu);
        let needs = self.needs(x);
        self.push(t, Op::Relu(x), needs)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: F = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = F::from_f64(self.value(x).numel() as f64);
        let s: F = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s / n), Op::MeanAll(x), needs)
    }

    /// Reverse sweep from a scalar loss. Each node is visited exactly once;
    /// inputs off the loss path keep a zero gradient.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<F>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], id: TensorId, delta: &[F]) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(t) => {
                for (a, &b) in t.data_mut().iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => {
                let t = Tensor::new(self.value(id).shape().to_vec(), delta.to_vec())
                    .expect("gradient shape matches value shape");
                *slot = Some(t);
            }
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd);
                self.accumulate(grads, *b, gd);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd);
                if self.needs(*b) {
                    let neg: Vec<F> = gd.iter().map(|&x| -x).collect();
                    self.accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da: Vec<F> = gd
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<F> = gd
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Scale(a, factor) => {
                if self.needs(*a) {
                    let da: Vec<F> = gd.iter().map(|&x| x * *factor).collect();
                    self.accumulate(grads, *a, &da);
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, gd);
                if self.needs(*bias) {
                    let d = self.value(*bias).numel();
                    let mut db = vec![F::zero(); d];
                    for row in gd.chunks_exact(d) {
                        for j in 0..d {
                            db[j] += row[j];
                        }
                    }
                    self.accumulate(grads, *bias, &db);
                }
            }
            Op::Matmul(a, b) => {
                let sa = self.value(*a).shape();
                let (m, k) = (sa[0], sa[1]);
                let n = self.value(*b).shape()[1];
                if self.needs(*a) {
                    // dA = dC * B^T
                    let mut da = vec![F::zero(); m * k];
                    kernels::matmul_nt_acc(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T * dC
                    let mut db = vec![F::zero(); k * n];
                    kernels::matmul_tn_acc(self.value(*a).data(), gd, &mut db, m, k, n);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::GatherRows(x, indices) => {
                if self.needs(*x) {
                    let d = self.value(*x).last_dim();
                    let mut dx = vec![F::zero(); self.value(*x).numel()];
                    for (r, &i) in indices.iter().enumerate() {
                        let src = &gd[r * d..(r + 1) * d];
                        let dst = &mut dx[i * d..(i + 1) * d];
                        for j in 0..d {
                            dst[j] += src[j];
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::SelectCols(x, indices) => {
                if self.needs(*x) {
                    let cols = self.value(*x).shape()[1];
                    let mut dx = vec![F::zero(); self.value(*x).numel()];
                    for (r, &c) in indices.iter().enumerate() {
                        dx[r * cols + c] += gd[r];
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
            } => {
                let d = self.value(*x).last_dim();
                let rows = self.value(*x).rows_2d();
                let xd = self.value(*x).data();
                let gaind = self.value(*gain).data();
                let inv_d = F::one() / F::from_f64(d as f64);
                let mut dx = vec![F::zero(); xd.len()];
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                for r in 0..rows {
                    let xr = &xd[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let is = inv_std[r];
                    let mut mean = F::zero();
                    for &v in xr {
                        mean += v;
                    }
                    mean *= inv_d;
                    // xhat, plus the two row reductions the backward needs.
                    let mut sum_gy = F::zero();
                    let mut sum_gy_xhat = F::zero();
                    let mut xhat = vec![F::zero(); d];
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * is;
                        let gy = gr[j] * gaind[j];
                        sum_gy += gy;
                        sum_gy_xhat += gy * xhat[j];
                    }
                    let dxr = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let gy = gr[j] * gaind[j];
                        dxr[j] = (gy - inv_d * sum_gy - xhat[j] * inv_d * sum_gy_xhat) * is;
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gain, &dgain);
                self.accumulate(grads, *bias, &dbias);
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let y = self.nodes[idx].value.data();
                    let shape = self.value(*x).shape().to_vec();
                    let mut dx = vec![F::zero(); y.len()];
                    for_each_lane(&shape, *axis, |lane| {
                        let mut dot = F::zero();
                        for &i in lane {
                            dot += gd[i] * y[i];
                        }
                        for &i in lane {
                            dx[i] = y[i] * (gd[i] - dot);
                        }
                    });
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                probs,
            } => {
                let d = self.value(*q).last_dim();
                let len = self.value(*q).rows_2d();
                let dh = d / n_heads;
                let scale = F::from_f64(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![F::zero(); len * d];
                let mut dk = vec![F::zero(); len * d];
                let mut dv = vec![F::zero(); len * d];
                let mut qh = vec![F::zero(); len * dh];
                let mut kh = vec![F::zero(); len * dh];
                let mut vh = vec![F::zero(); len * dh];
                let mut goh = vec![F::zero(); len * dh];
                for h in 0..*n_heads {
                    kernels::copy_head(qd, &mut qh, len, d, dh, h);
                    kernels::copy_head(kd, &mut kh, len, d, dh, h);
                    kernels::copy_head(vd, &mut vh, len, d, dh, h);
                    kernels::copy_head(gd, &mut goh, len, d, dh, h);
                    let a = &probs[h];
                    // dV_h = A^T * dO_h; rows above the diagonal are zero in
                    // A, and the tn kernel skips zero entries.
                    let mut dvh = vec![F::zero(); len * dh];
                    kernels::matmul_tn_acc(a, &goh, &mut dvh, len, len, dh);
                    // Row-wise over the causal triangle: dA = dO_h * V_h^T,
                    // softmax backward, then dQ_h = dS * K_h.
                    let mut ds = vec![F::zero(); len * len];
                    let mut dqh = vec![F::zero(); len * dh];
                    let mut da_row = vec![F::zero(); len];
                    for i in 0..len {
                        let ar = &a[i * len..(i + 1) * len];
                        let go_row = &goh[i * dh..(i + 1) * dh];
                        for j in 0..=i {
                            da_row[j] = kernels::dot(go_row, &vh[j * dh..(j + 1) * dh]);
                        }
                        let mut dot = F::zero();
                        for j in 0..=i {
                            dot += da_row[j] * ar[j];
                        }
                        let dsr = &mut ds[i * len..(i + 1) * len];
                        for j in 0..=i {
                            dsr[j] = ar[j] * (da_row[j] - dot) * scale;
                        }
                        kernels::weighted_rows_acc(
                            &dsr[..=i],
                            &kh,
                            &mut dqh[i * dh..(i + 1) * dh],
                            dh,
                        );
                    }
                    // dK_h = dS^T * Q_h; dS is zero above the diagonal.
                    let mut dkh = vec![F::zero(); len * dh];
                    kernels::matmul_tn_acc(&ds, &qh, &mut dkh, len, len, dh);
                    kernels::scatter_head(&dqh, &mut dq, len, d, dh, h);
                    kernels::scatter_head(&dkh, &mut dk, len, d, dh, h);
                    kernels::scatter_head(&dvh, &mut dv, len, d, dh, h);
                }
                self.accumulate(grads, *q, &dq);
                self.accumulate(grads, *k, &dk);
                self.accumulate(grads, *v, &dv);
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let dx: Vec<F> = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&xi, &gi)| gi * kernels::relu_grad(xi))
                        .collect();
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::SumAll(x) => {
                if self.needs(*x) {
                    let dx = vec![gd[0]; self.value(*x).numel()];
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::MeanAll(x) => {
                if self.needs(*x) {
                    let n = F::from_f64(self.value(*x).numel() as f64);
                    let dx = vec![gd[0] / n; self.value(*x).numel()];
                    self.accumulate(grads, *x, &dx);
                }
            }
        }
    }
}

/// Calls `f` with the flat indices of each 1-D lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut lane = vec![0usize; axis_len];
    for o in 0..outer {
        for i in 0..inner {
            for (t, slot) in lane.iter_mut().enumerate() {
                *slot = o * axis_len * inner + t * inner + i;
            }
            f(&lane);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(vec![rows, cols], vals).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let prod = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(prod).data(), &[1.0, 2.0, 3.0, 4.0]);

        let proj = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let m2 = tape.constant(t2(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let out = tape.matmul(proj, m2).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn matmul_associativity_on_random_triples() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let a = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(vec![4, 5], 1.0, &mut rng);
            let c = Tensor::<f64>::randn(vec![5, 2], 1.0, &mut rng);
            let mut tape = Tape::new();
            let (ia, ib, ic) = (
                tape.constant(a.clone()),
                tape.constant(b.clone()),
                tape.constant(c.clone()),
            );
            let ab = tape.matmul(ia, ib).unwrap();
            let ab_c = tape.matmul(ab, ic).unwrap();
            let bc = tape.matmul(ib, ic).unwrap();
            let a_bc = tape.matmul(ia, bc).unwrap();
            for (x, y) in tape
                .value(ab_c)
                .data()
                .iter()
                .zip(tape.value(a_bc).data())
            {
                assert!((x - y).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn softmax_shift_invariance_and_sums() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(vec![4, 6], 2.0, &mut rng);
        let shifted = x.map(|v| v + 13.5);
        let mut tape = Tape::new();
        let ix = tape.constant(x);
        let ixs = tape.constant(shifted);
        let s1 = tape.softmax(ix, 1).unwrap();
        let s2 = tape.softmax(ixs, 1).unwrap();
        for (a, b) in tape.value(s1).data().iter().zip(tape.value(s2).data()) {
            assert!((a - b).abs() < 1e-9);
        }
        for row in tape.value(s1).data().chunks_exact(6) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64s(vec![2], &[f64::NAN, 0.0]).unwrap());
        assert!(matches!(tape.softmax(x, 0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_supports_non_last_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(2, 3, &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]));
        let s = tape.softmax(x, 0).unwrap();
        // Columns are [0,0], [1,1], [2,2]: softmax over equal pairs is 0.5.
        for &p in tape.value(s).data() {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(1, 4, &[3.0, 3.0, 3.0, 3.0]));
        let g = tape.constant(Tensor::full(vec![4], 1.0));
        let b = tape.constant(Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(1, 2, &[1.0, -1.0]));
        let g = tape.constant(Tensor::full(vec![2], 1.0));
        let b = tape.constant(Tensor::zeros(vec![2]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-3);
        assert!((tape.value(y).data()[1] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn layer_norm_statistics_on_random_rows() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let d = 16;
        let x = Tensor::<f64>::randn(vec![5, d], 3.0, &mut rng);
        let mut tape = Tape::new();
        let ix = tape.constant(x);
        let g = tape.constant(Tensor::full(vec![d], 1.0));
        let b = tape.constant(Tensor::zeros(vec![d]));
        let y = tape.layer_norm(ix, g, b).unwrap();
        for row in tape.value(y).data().chunks_exact(d) {
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64s(vec![1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x, &tape).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_disconnected_param_gets_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64s(vec![1, 2], &[1.0, 2.0]).unwrap());
        let unused = tape.leaf(Tensor::from_f64s(vec![1, 2], &[5.0, 5.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused, &tape).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64s(vec![1, 2], &[1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn causal_attention_single_head_matches_hand_rolled() {
        // One head, two tokens, d=2: row 0 attends only to itself, row 1
        // softmax-mixes both value rows.
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let k = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let v = tape.constant(t2(2, 2, &[10.0, 0.0, 0.0, 10.0]));
        let o = tape.causal_attention(q, k, v, 1).unwrap();
        let scale = 1.0 / (2.0f64).sqrt();
        // row 0: only j=0 -> v0
        assert!((tape.value(o).data()[0] - 10.0).abs() < 1e-12);
        assert!(tape.value(o).data()[1].abs() < 1e-12);
        // row 1: scores = [q1.k0, q1.k1]*scale = [0, scale]
        let e0 = (0.0f64).exp();
        let e1 = scale.exp();
        let a0 = e0 / (e0 + e1);
        let a1 = e1 / (e0 + e1);
        assert!((tape.value(o).data()[2] - 10.0 * a0).abs() < 1e-12);
        assert!((tape.value(o).data()[3] - 10.0 * a1).abs() < 1e-12);
    }

    /// Central-difference check used for every primitive below.
    fn finite_diff_check(
        inputs: &[Tensor<f64>],
        build: &dyn Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
    ) {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-5;
        for (which, input) in inputs.iter().enumerate() {
            let ad = grads.get(ids[which], &tape);
            for e in 0..input.numel() {
                let eval = |delta: f64| {
                    let mut bumped: Vec<Tensor<f64>> = inputs.to_vec();
                    bumped[which].data_mut()[e] += delta;
                    let mut t = Tape::new();
                    let ids: Vec<TensorId> = bumped.iter().map(|t2| t.leaf(t2.clone())).collect();
                    let l = build(&mut t, &ids);
                    t.value(l).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let got = ad.data()[e];
                let denom = fd.abs().max(got.abs()).max(1e-4);
                assert!(
                    (fd - got).abs() / denom < 1e-4,
                    "input {which} elem {e}: fd {fd} vs ad {got}"
                );
            }
        }
    }

    #[test]
    fn finite_differences_agree_for_every_primitive() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let a = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![4, 3], 1.0, &mut rng);
        let sq3 = Tensor::<f64>::randn(vec![3, 3], 1.0, &mut rng);
        let vec4 = Tensor::<f64>::randn(vec![4], 1.0, &mut rng);

        // matmul
        finite_diff_check(&[a.clone(), b.clone()], &|t, ids| {
            let m = t.matmul(ids[0], ids[1]).unwrap();
            t.sum_all(m)
        });
        // add / sub / mul / scale
        finite_diff_check(&[sq3.clone(), sq3.map(|x| x + 0.3)], &|t, ids| {
            let s = t.add(ids[0], ids[1]).unwrap();
            let d = t.sub(s, ids[1]).unwrap();
            let m = t.mul(d, ids[0]).unwrap();
            let sc = t.scale(m, 0.7);
            t.sum_all(sc)
        });
        // add_bias
        finite_diff_check(&[a.clone(), vec4.clone()], &|t, ids| {
            let y = t.add_bias(ids[0], ids[1]).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum_all(sq)
        });
        // gather_rows + select_cols
        finite_diff_check(&[a.clone()], &|t, ids| {
            let g = t.gather_rows(ids[0], vec![2, 0, 2]).unwrap();
            let s = t.select_cols(g, vec![1, 3, 1]).unwrap();
            let sq = t.mul(s, s).unwrap();
            t.sum_all(sq)
        });
        // layer_norm
        finite_diff_check(
            &[a.clone(), vec4.map(|_| 1.1), vec4.map(|_| -0.2)],
            &|t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2]).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum_all(sq)
            },
        );
        // softmax
        finite_diff_check(&[a.clone()], &|t, ids| {
            let s = t.softmax(ids[0], 1).unwrap();
            let sq = t.mul(s, s).unwrap();
            t.sum_all(sq)
        });
        // relu (inputs shifted off the kink so central differences hold)
        let off_kink = a.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
        finite_diff_check(&[off_kink], &|t, ids| {
            let y = t.relu(ids[0]);
            let sq = t.mul(y, y).unwrap();
            t.sum_all(sq)
        });
        // mean_all
        finite_diff_check(&[a.clone()], &|t, ids| {
            let sq = t.mul(ids[0], ids[0]).unwrap();
            t.mean_all(sq)
        });
        // causal attention, two heads
        let q = Tensor::<f64>::randn(vec![5, 4], 0.7, &mut rng);
        let k = Tensor::<f64>::randn(vec![5, 4], 0.7, &mut rng);
        let v = Tensor::<f64>::randn(vec![5, 4], 0.7, &mut rng);
        finite_diff_check(&[q, k, v], &|t, ids| {
            let o = t.causal_attention(ids[0], ids[1], ids[2], 2).unwrap();
            let sq = t.mul(o, o).unwrap();
            t.sum_all(sq)
        });
    }
}
