//! Reverse-mode differentiation over a tape of recorded operations.
//!
//! A [`Tape`] owns every intermediate value of one forward computation.
//! Operations push nodes and return [`ValueId`]s; [`Tape::backward`] walks
//! the nodes in reverse execution order and accumulates gradients for every
//! node that can reach a trainable leaf.

use crate::error::{Result, XragError};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

/// Counter-based generator used for dropout masks; cheap to reseed per
/// (step, query, layer) so training runs are bit-reproducible.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Mixes identifying integers into one dropout seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut rng = SplitMix64::new(0x5EED_0F_DA7A ^ parts.len() as u64);
    let mut acc = 0u64;
    for &p in parts {
        rng.state ^= p;
        acc ^= rng.next_u64();
    }
    acc
}

enum Op {
    Leaf,
    Matmul(ValueId, ValueId),
    MatmulNT(ValueId, ValueId),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Maximum(ValueId, ValueId),
    BiasAdd(ValueId, ValueId),
    Relu(ValueId),
    Sigmoid(ValueId),
    SoftmaxLastDim(ValueId),
    MeanAxis(ValueId, usize),
    MeanAll(ValueId),
    Dropout(ValueId, Vec<f64>),
    ConcatLastDim(Vec<ValueId>),
    Scale(ValueId, f64),
    ScaleByScalar(ValueId, ValueId),
    Reshape(ValueId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records one forward computation.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. Trainable leaves receive gradients in backward.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> ValueId {
        self.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
        })
    }

    /// Non-trainable leaf: inputs, targets, frozen weights.
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, node: Node) -> ValueId {
        self.nodes.push(node);
        ValueId(self.nodes.len() - 1)
    }

    fn check(&self, id: ValueId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(XragError::InvalidTapeRef {
                id: id.0,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, x: ValueId, value: Tensor, op: Op) -> Result<ValueId> {
        self.check(x)?;
        let needs_grad = self.nodes[x.0].needs_grad;
        Ok(self.push(Node {
            value,
            op,
            needs_grad,
        }))
    }

    fn binary(&mut self, a: ValueId, b: ValueId, value: Tensor, op: Op) -> Result<ValueId> {
        self.check(a)?;
        self.check(b)?;
        let needs_grad = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(Node {
            value,
            op,
            needs_grad,
        }))
    }

    fn same_shape(&self, op: &'static str, a: ValueId, b: ValueId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(XragError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// (m×n) · (n×p).
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(a)?;
        self.check(b)?;
        let (m, n) = self.value(a).dims2()?;
        let (n2, p) = self.value(b).dims2()?;
        if n != n2 {
            return Err(XragError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(vec![m, p]);
        matmul_acc(
            out.data_mut(),
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            n,
            p,
        );
        self.binary(a, b, out, Op::Matmul(a, b))
    }

    /// a · bᵀ: (m×n) · (p×n)ᵀ → (m×p). Used for attention scores.
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(a)?;
        self.check(b)?;
        let (m, n) = self.value(a).dims2()?;
        let (p, n2) = self.value(b).dims2()?;
        if n != n2 {
            return Err(XragError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(vec![m, p]);
        matmul_nt_acc(
            out.data_mut(),
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            n,
            p,
        );
        self.binary(a, b, out, Op::MatmulNT(a, b))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.binary(a, b, out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.binary(a, b, out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.binary(a, b, out, Op::Mul(a, b))
    }

    /// Elementwise max; ties route the gradient to the first argument.
    pub fn maximum(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape("maximum", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x.max(*y))
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.binary(a, b, out, Op::Maximum(a, b))
    }

    /// (m×n) + bias(n), broadcast over rows.
    pub fn bias_add(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        self.check(x)?;
        self.check(bias)?;
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).shape() != [n] {
            return Err(XragError::ShapeMismatch {
                op: "bias_add",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += b[j];
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.binary(x, bias, out, Op::BiasAdd(x, bias))
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(x)?;
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.unary(x, out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(x)?;
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.unary(x, out, Op::Sigmoid(x))
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(x)?;
        let shape = self.value(x).shape().to_vec();
        let n = *shape.last().ok_or(XragError::ShapeMismatch {
            op: "softmax_lastdim",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = Tensor::new(shape, data)?;
        self.unary(x, out, Op::SoftmaxLastDim(x))
    }

    /// Mean over one axis of a 2-D tensor.
    pub fn mean_axis(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        self.check(x)?;
        let (m, n) = self.value(x).dims2()?;
        let data = self.value(x).data();
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        acc[j] += data[i * n + j];
                    }
                }
                for v in acc.iter_mut() {
                    *v /= m as f64;
                }
                Tensor::from_vec(acc)
            }
            1 => {
                let mut acc = vec![0.0; m];
                for i in 0..m {
                    acc[i] = data[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64;
                }
                Tensor::from_vec(acc)
            }
            _ => {
                return Err(XragError::ShapeMismatch {
                    op: "mean_axis",
                    lhs: vec![m, n],
                    rhs: vec![axis],
                })
            }
        };
        self.unary(x, out, Op::MeanAxis(x, axis))
    }

    /// Mean of all elements; produces a scalar.
    pub fn mean_all(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(x)?;
        let t = self.value(x);
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.unary(x, Tensor::scalar(mean), Op::MeanAll(x))
    }

    /// Inverted dropout: scales survivors by 1/(1-p) so inference needs no
    /// correction. With `train == false` (or p == 0) the input id is
    /// returned unchanged — identity, bitwise.
    pub fn dropout(
        &mut self,
        x: ValueId,
        p: f64,
        train: bool,
        rng: &mut SplitMix64,
    ) -> Result<ValueId> {
        self.check(x)?;
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1)");
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|_| if rng.next_f64() < p { 0.0 } else { keep_scale })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.unary(x, out, Op::Dropout(x, mask))
    }

    /// Concatenates 2-D tensors with equal row counts along the last dim.
    pub fn concat_lastdim(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(XragError::EmptyInput("concat_lastdim of zero tensors"));
        }
        for &p in parts {
            self.check(p)?;
        }
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(XragError::ShapeMismatch {
                    op: "concat_lastdim",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let needs_grad = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push(Node {
            value: out,
            op: Op::ConcatLastDim(parts.to_vec()),
            needs_grad,
        }))
    }

    pub fn scale(&mut self, x: ValueId, alpha: f64) -> Result<ValueId> {
        self.check(x)?;
        let data = self.value(x).data().iter().map(|v| v * alpha).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.unary(x, out, Op::Scale(x, alpha))
    }

    /// Multiplies every element of `x` by a scalar tensor `s` (shape [1]).
    pub fn scale_by(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        self.check(x)?;
        self.check(s)?;
        if !self.value(s).is_scalar() {
            return Err(XragError::ShapeMismatch {
                op: "scale_by",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let sv = self.value(s).data()[0];
        let data = self.value(x).data().iter().map(|v| v * sv).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.binary(x, s, out, Op::ScaleByScalar(x, s))
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        self.check(x)?;
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(XragError::ShapeMismatch {
                op: "reshape",
                lhs: self.value(x).shape().to_vec(),
                rhs: shape,
            });
        }
        let out = Tensor::new(shape, self.value(x).data().to_vec())?;
        self.unary(x, out, Op::Reshape(x))
    }

    /// Reverse pass from a scalar loss. Returns one gradient slot per node;
    /// only nodes on a path to a trainable leaf are populated.
    pub fn backward(&self, loss: ValueId) -> Result<Vec<Option<Tensor>>> {
        self.check(loss)?;
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(XragError::NotScalar {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !loss_node.needs_grad {
            return Ok(grads); // loss does not depend on any trainable leaf
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, n) = self.nodes[a.0].value.dims2().unwrap();
                let p = self.nodes[b.0].value.shape()[1];
                if self.needs(*a) {
                    let da = self.grad_slot(grads, *a);
                    matmul_nt_acc(da.data_mut(), g.data(), self.nodes[b.0].value.data(), m, p, n);
                }
                if self.needs(*b) {
                    let db = self.grad_slot(grads, *b);
                    matmul_tn_acc(db.data_mut(), self.nodes[a.0].value.data(), g.data(), n, m, p);
                }
            }
            Op::MatmulNT(a, b) => {
                let (m, n) = self.nodes[a.0].value.dims2().unwrap();
                let p = self.nodes[b.0].value.shape()[0];
                if self.needs(*a) {
                    let da = self.grad_slot(grads, *a);
                    matmul_acc(da.data_mut(), g.data(), self.nodes[b.0].value.data(), m, p, n);
                }
                if self.needs(*b) {
                    let db = self.grad_slot(grads, *b);
                    matmul_tn_acc(db.data_mut(), g.data(), self.nodes[a.0].value.data(), p, m, n);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.data(), 1.0);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.data(), 1.0);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.data(), 1.0);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.data(), -1.0);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let da = self.grad_slot(grads, *a);
                    for ((dv, gv), bv) in da.data_mut().iter_mut().zip(g.data()).zip(&bv) {
                        *dv += gv * bv;
                    }
                }
                if self.needs(*b) {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let db = self.grad_slot(grads, *b);
                    for ((dv, gv), av) in db.data_mut().iter_mut().zip(g.data()).zip(&av) {
                        *dv += gv * av;
                    }
                }
            }
            Op::Maximum(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let to_a: Vec<f64> = av
                    .iter()
                    .zip(bv)
                    .zip(g.data())
                    .map(|((x, y), gv)| if x >= y { *gv } else { 0.0 })
                    .collect();
                let to_b: Vec<f64> = av
                    .iter()
                    .zip(bv)
                    .zip(g.data())
                    .map(|((x, y), gv)| if x < y { *gv } else { 0.0 })
                    .collect();
                if self.needs(*a) {
                    self.accumulate(grads, *a, &to_a, 1.0);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, &to_b, 1.0);
                }
            }
            Op::BiasAdd(x, bias) => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, g.data(), 1.0);
                }
                if self.needs(*bias) {
                    let (m, n) = self.nodes[x.0].value.dims2().unwrap();
                    let db = self.grad_slot(grads, *bias);
                    let dbd = db.data_mut();
                    for i in 0..m {
                        for j in 0..n {
                            dbd[j] += g.data()[i * n + j];
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let dx = self.grad_slot(grads, *x);
                    for ((dv, gv), xv) in dx.data_mut().iter_mut().zip(g.data()).zip(&xv) {
                        if *xv > 0.0 {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let yv = node.value.data().to_vec();
                    let dx = self.grad_slot(grads, *x);
                    for ((dv, gv), yv) in dx.data_mut().iter_mut().zip(g.data()).zip(&yv) {
                        *dv += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::SoftmaxLastDim(x) => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap();
                    let mut delta = vec![0.0; y.len()];
                    for (row, (yr, gr)) in y.chunks(n).zip(g.data().chunks(n)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            delta[row * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(grads, *x, &delta, 1.0);
                }
            }
            Op::MeanAxis(x, axis) => {
                if self.needs(*x) {
                    let (m, n) = self.nodes[x.0].value.dims2().unwrap();
                    let dx = self.grad_slot(grads, *x);
                    let dxd = dx.data_mut();
                    match axis {
                        0 => {
                            for i in 0..m {
                                for j in 0..n {
                                    dxd[i * n + j] += g.data()[j] / m as f64;
                                }
                            }
                        }
                        _ => {
                            for i in 0..m {
                                for j in 0..n {
                                    dxd[i * n + j] += g.data()[i] / n as f64;
                                }
                            }
                        }
                    }
                }
            }
            Op::MeanAll(x) => {
                if self.needs(*x) {
                    let numel = self.nodes[x.0].value.numel() as f64;
                    let gv = g.data()[0] / numel;
                    let dx = self.grad_slot(grads, *x);
                    for dv in dx.data_mut() {
                        *dv += gv;
                    }
                }
            }
            Op::Dropout(x, mask) => {
                if self.needs(*x) {
                    let dx = self.grad_slot(grads, *x);
                    for ((dv, gv), mv) in dx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *dv += gv * mv;
                    }
                }
            }
            Op::ConcatLastDim(parts) => {
                let total = *node.value.shape().last().unwrap();
                let rows = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    if self.needs(p) {
                        let dp = self.grad_slot(grads, p);
                        let dpd = dp.data_mut();
                        for r in 0..rows {
                            for c in 0..w {
                                dpd[r * w + c] += g.data()[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Scale(x, alpha) => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, g.data(), *alpha);
                }
            }
            Op::ScaleByScalar(x, s) => {
                let sv = self.nodes[s.0].value.data()[0];
                if self.needs(*x) {
                    self.accumulate(grads, *x, g.data(), sv);
                }
                if self.needs(*s) {
                    let xv = self.nodes[x.0].value.data();
                    let dot: f64 = xv.iter().zip(g.data()).map(|(a, b)| a * b).sum();
                    let ds = self.grad_slot(grads, *s);
                    ds.data_mut()[0] += dot;
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, g.data(), 1.0);
                }
            }
        }
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor>], id: ValueId) -> &'a mut Tensor {
        grads[id.0].get_or_insert_with(|| Tensor::zeros(self.nodes[id.0].value.shape().to_vec()))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: ValueId, delta: &[f64], factor: f64) {
        let slot = self.grad_slot(grads, id);
        for (dv, &d) in slot.data_mut().iter_mut().zip(delta) {
            *dv += factor * d;
        }
    }

    /// Gradient of a trainable leaf after [`Tape::backward`]; zeros when the
    /// loss never touched it.
    pub fn leaf_grad(&self, grads: &[Option<Tensor>], id: ValueId) -> Tensor {
        grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape().to_vec()))
    }
}

/// Index of a trainable leaf's gradient, for callers holding named params.
pub fn grad_of(grads: &[Option<Tensor>], id: ValueId) -> Option<&Tensor> {
    grads[id.0].as_ref()
}
