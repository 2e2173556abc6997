use crate::error::{Error, Result};

use super::{
    gelu_grad_scalar, gelu_scalar, sigmoid_scalar, softplus_scalar, NodeId, Tensor,
};

const NORMALIZE_EPS: f64 = 1e-12;

/// One recorded operation. Inputs always precede the node that consumes them,
/// so a single reverse scan visits every node exactly once.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out = a (m×k) · b (k×n)
    MatMul,
    /// out = m (r×c) · v (c)
    MatVec,
    /// out = aᵀ
    Transpose,
    Add,
    Sub,
    /// elementwise product
    Mul,
    Neg,
    AddConst,
    MulConst(f64),
    Softplus,
    Gelu,
    Exp,
    Ln,
    Abs,
    /// sum of all elements → scalar
    Sum,
    /// mean of all elements → scalar
    Mean,
    /// inner product of two equal-length vectors → scalar
    Dot,
    /// v / ‖v‖₂ for a vector
    L2Normalize,
    /// column sums of a matrix (r×c) → vector (c)
    ColSum,
    /// row k of m scaled by s[k]: out[k,l] = m[k,l]·s[k]
    ScaleRows,
    /// row `k` of a matrix → vector
    RowSlice(usize),
    /// scalar node × vector node
    ScaleVec,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Gradients of one scalar loss, keyed by node id of the leaves.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a tensor's node, if any gradient flowed to it.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let id = t.node_id()?;
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    /// Gradient for a leaf, zero-filled when no gradient flowed to it.
    pub fn get_or_zero(&self, t: &Tensor) -> Vec<f64> {
        match self.get(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        }
    }
}

/// Append-only recording of a differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Register a value as a leaf of the computation.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Tensor {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            requires_grad,
        });
        let mut out = t;
        out.set_node_id(id);
        out.set_requires_grad(requires_grad);
        out
    }

    /// Leaf holding a single scalar constant.
    pub fn constant_scalar(&mut self, v: f64) -> Result<Tensor> {
        Ok(self.leaf(Tensor::scalar(v)?, false))
    }

    fn node_of(&self, t: &Tensor) -> Result<NodeId> {
        let id = t.node_id().ok_or(Error::DetachedTensor)?;
        if id.0 >= self.nodes.len() {
            return Err(Error::DetachedTensor);
        }
        Ok(id)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, value: Vec<f64>) -> Tensor {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            shape: shape.clone(),
            value: value.clone(),
            requires_grad,
        });
        Tensor::from_op(shape, value, requires_grad, id)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ia, ib) = (self.node_of(a)?, self.node_of(b)?);
        let (m, ka) = a.dims2()?;
        let (kb, n) = b.dims2()?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = matmul_raw(a.data(), b.data(), m, ka, n);
        Ok(self.push(Op::MatMul, vec![ia, ib], vec![m, n], out))
    }

    /// Matrix-vector product.
    pub fn matvec(&mut self, m: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (im, iv) = (self.node_of(m)?, self.node_of(v)?);
        let (r, c) = m.dims2()?;
        if v.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: m.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &m.data()[i * c..(i + 1) * c];
            out[i] = row.iter().zip(v.data()).map(|(a, b)| a * b).sum();
        }
        Ok(self.push(Op::MatVec, vec![im, iv], vec![r], out))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let ia = self.node_of(a)?;
        let (r, c) = a.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose, vec![ia], vec![c, r], out))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        op: Op,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ia, ib) = (self.node_of(a)?, self.node_of(b)?);
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.push(op, vec![ia, ib], a.shape().to_vec(), out))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    fn unary(&mut self, op: Op, a: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let ia = self.node_of(a)?;
        let out: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
        Ok(self.push(op, vec![ia], a.shape().to_vec(), out))
    }

    pub fn neg(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn add_const(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(Op::AddConst, a, |x| x + c)
    }

    pub fn mul_const(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(Op::MulConst(c), a, |x| x * c)
    }

    /// Elementwise log(1+exp(x)), stable for large |x|.
    pub fn softplus(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Softplus, a, softplus_scalar)
    }

    /// Elementwise GELU (tanh approximation).
    pub fn gelu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Gelu, a, gelu_scalar)
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn ln(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Ln, a, f64::ln)
    }

    pub fn abs(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Abs, a, f64::abs)
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let ia = self.node_of(a)?;
        let s: f64 = a.data().iter().sum();
        Ok(self.push(Op::Sum, vec![ia], vec![], vec![s]))
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        let ia = self.node_of(a)?;
        if a.is_empty() {
            return Err(Error::BadShape {
                op: "mean",
                expected: "a non-empty tensor",
                got: a.shape().to_vec(),
            });
        }
        let s: f64 = a.data().iter().sum::<f64>() / a.len() as f64;
        Ok(self.push(Op::Mean, vec![ia], vec![], vec![s]))
    }

    /// Inner product of two equal-length vectors.
    pub fn dot(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ia, ib) = (self.node_of(a)?, self.node_of(b)?);
        if a.shape().len() != 1 || a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Op::Dot, vec![ia, ib], vec![], vec![s]))
    }

    // ── Structured ops ───────────────────────────────────────────────

    /// v / ‖v‖₂. Rejects vectors with norm below 1e-12 as degenerate.
    pub fn l2_normalize(&mut self, v: &Tensor) -> Result<Tensor> {
        let iv = self.node_of(v)?;
        if v.shape().len() != 1 {
            return Err(Error::BadShape {
                op: "l2_normalize",
                expected: "a rank-1 vector",
                got: v.shape().to_vec(),
            });
        }
        let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= NORMALIZE_EPS {
            return Err(Error::DegenerateVector {
                norm,
                eps: NORMALIZE_EPS,
            });
        }
        let out: Vec<f64> = v.data().iter().map(|x| x / norm).collect();
        Ok(self.push(Op::L2Normalize, vec![iv], v.shape().to_vec(), out))
    }

    /// Column sums of a matrix: (r×c) → (c).
    pub fn col_sum(&mut self, m: &Tensor) -> Result<Tensor> {
        let im = self.node_of(m)?;
        let (r, c) = m.dims2()?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += m.data()[i * c + j];
            }
        }
        Ok(self.push(Op::ColSum, vec![im], vec![c], out))
    }

    /// Scale row k of `m` by `s[k]`.
    pub fn scale_rows(&mut self, m: &Tensor, s: &Tensor) -> Result<Tensor> {
        let (im, is) = (self.node_of(m)?, self.node_of(s)?);
        let (r, c) = m.dims2()?;
        if s.shape() != [r] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: m.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = m.data()[i * c + j] * s.data()[i];
            }
        }
        Ok(self.push(Op::ScaleRows, vec![im, is], vec![r, c], out))
    }

    /// Row `k` of a matrix as a vector.
    pub fn row_slice(&mut self, m: &Tensor, k: usize) -> Result<Tensor> {
        let im = self.node_of(m)?;
        let (r, c) = m.dims2()?;
        if k >= r {
            return Err(Error::InvalidParameter(format!(
                "row_slice index {k} out of range for {r} rows"
            )));
        }
        let out = m.data()[k * c..(k + 1) * c].to_vec();
        Ok(self.push(Op::RowSlice(k), vec![im], vec![c], out))
    }

    /// Scalar node times vector node.
    pub fn scale_vec(&mut self, s: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (is, iv) = (self.node_of(s)?, self.node_of(v)?);
        if !s.is_scalar() || v.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale_vec",
                lhs: s.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let sv = s.data()[0];
        let out: Vec<f64> = v.data().iter().map(|x| x * sv).collect();
        Ok(self.push(Op::ScaleVec, vec![is, iv], v.shape().to_vec(), out))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients are returned for every
    /// leaf that requires them; the tape is cleared afterwards.
    pub fn backward(&mut self, loss: &Tensor) -> Result<Gradients> {
        let loss_id = self.node_of(loss)?;
        if !loss.is_scalar() {
            return Err(Error::NotScalar {
                context: "backward",
                got: loss.shape().to_vec(),
            });
        }

        let mut slots: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        slots[loss_id.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            let g = match slots[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(idx, &g, &mut slots);
            // Leaves keep their gradient; interior node slots are dropped.
            if matches!(self.nodes[idx].op, Op::Leaf) || idx == loss_id.0 {
                slots[idx] = Some(g);
            }
        }

        self.nodes.clear();
        Ok(Gradients { slots })
    }

    fn backward_node(&self, idx: usize, g: &[f64], slots: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let acc = |slots: &mut [Option<Vec<f64>>], id: NodeId, contrib: &[f64]| {
            match &mut slots[id.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                None => slots[id.0] = Some(contrib.to_vec()),
            }
        };
        let input_value = |i: usize| -> &[f64] { &self.nodes[node.inputs[i].0].value };
        let input_shape = |i: usize| -> &[usize] { &self.nodes[node.inputs[i].0].shape };

        match node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (input_value(0), input_value(1));
                let (m, k) = (input_shape(0)[0], input_shape(0)[1]);
                let n = input_shape(1)[1];
                // dA = G · Bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for l in 0..k {
                            da[i * k + l] += gij * b[l * n + j];
                        }
                    }
                }
                acc(slots, node.inputs[0], &da);
                // dB = Aᵀ · G
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for l in 0..k {
                        let ail = a[i * k + l];
                        for j in 0..n {
                            db[l * n + j] += ail * g[i * n + j];
                        }
                    }
                }
                acc(slots, node.inputs[1], &db);
            }
            Op::MatVec => {
                let (m, v) = (input_value(0), input_value(1));
                let (r, c) = (input_shape(0)[0], input_shape(0)[1]);
                let mut dm = vec![0.0; r * c];
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    let gi = g[i];
                    for j in 0..c {
                        dm[i * c + j] += gi * v[j];
                        dv[j] += gi * m[i * c + j];
                    }
                }
                acc(slots, node.inputs[0], &dm);
                acc(slots, node.inputs[1], &dv);
            }
            Op::Transpose => {
                let (r, c) = (input_shape(0)[0], input_shape(0)[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                acc(slots, node.inputs[0], &da);
            }
            Op::Add => {
                acc(slots, node.inputs[0], g);
                acc(slots, node.inputs[1], g);
            }
            Op::Sub => {
                acc(slots, node.inputs[0], g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                acc(slots, node.inputs[1], &neg);
            }
            Op::Mul => {
                let (a, b) = (input_value(0), input_value(1));
                let da: Vec<f64> = g.iter().zip(b).map(|(gi, bi)| gi * bi).collect();
                let db: Vec<f64> = g.iter().zip(a).map(|(gi, ai)| gi * ai).collect();
                acc(slots, node.inputs[0], &da);
                acc(slots, node.inputs[1], &db);
            }
            Op::Neg => {
                let da: Vec<f64> = g.iter().map(|x| -x).collect();
                acc(slots, node.inputs[0], &da);
            }
            Op::AddConst => acc(slots, node.inputs[0], g),
            Op::MulConst(c) => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                acc(slots, node.inputs[0], &da);
            }
            Op::Softplus => {
                let x = input_value(0);
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| gi * sigmoid_scalar(xi))
                    .collect();
                acc(slots, node.inputs[0], &da);
            }
            Op::Gelu => {
                let x = input_value(0);
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| gi * gelu_grad_scalar(xi))
                    .collect();
                acc(slots, node.inputs[0], &da);
            }
            Op::Exp => {
                let y = &node.value;
                let da: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * yi).collect();
                acc(slots, node.inputs[0], &da);
            }
            Op::Ln => {
                let x = input_value(0);
                let da: Vec<f64> = g.iter().zip(x).map(|(gi, xi)| gi / xi).collect();
                acc(slots, node.inputs[0], &da);
            }
            Op::Abs => {
                let x = input_value(0);
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| gi * if xi > 0.0 { 1.0 } else if xi < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                acc(slots, node.inputs[0], &da);
            }
            Op::Sum => {
                let n = self.nodes[node.inputs[0].0].value.len();
                acc(slots, node.inputs[0], &vec![g[0]; n]);
            }
            Op::Mean => {
                let n = self.nodes[node.inputs[0].0].value.len();
                acc(slots, node.inputs[0], &vec![g[0] / n as f64; n]);
            }
            Op::Dot => {
                let (a, b) = (input_value(0), input_value(1));
                let da: Vec<f64> = b.iter().map(|bi| g[0] * bi).collect();
                let db: Vec<f64> = a.iter().map(|ai| g[0] * ai).collect();
                acc(slots, node.inputs[0], &da);
                acc(slots, node.inputs[1], &db);
            }
            Op::L2Normalize => {
                let x = input_value(0);
                let y = &node.value;
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let gy: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                let da: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| (gi - yi * gy) / norm)
                    .collect();
                acc(slots, node.inputs[0], &da);
            }
            Op::ColSum => {
                let (r, c) = (input_shape(0)[0], input_shape(0)[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c..(i + 1) * c].copy_from_slice(g);
                }
                acc(slots, node.inputs[0], &da);
            }
            Op::ScaleRows => {
                let (m, s) = (input_value(0), input_value(1));
                let (r, c) = (input_shape(0)[0], input_shape(0)[1]);
                let mut dm = vec![0.0; r * c];
                let mut ds = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        dm[i * c + j] = g[i * c + j] * s[i];
                        ds[i] += g[i * c + j] * m[i * c + j];
                    }
                }
                acc(slots, node.inputs[0], &dm);
                acc(slots, node.inputs[1], &ds);
            }
            Op::RowSlice(k) => {
                let (r, c) = (input_shape(0)[0], input_shape(0)[1]);
                let mut dm = vec![0.0; r * c];
                dm[k * c..(k + 1) * c].copy_from_slice(g);
                acc(slots, node.inputs[0], &dm);
            }
            Op::ScaleVec => {
                let (s, v) = (input_value(0), input_value(1));
                let ds: f64 = g.iter().zip(v).map(|(gi, vi)| gi * vi).sum();
                let dv: Vec<f64> = g.iter().map(|gi| gi * s[0]).collect();
                acc(slots, node.inputs[0], &[ds]);
                acc(slots, node.inputs[1], &dv);
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += ail * b[l * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            false,
        );
        let a = tape.leaf(
            Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            false,
        );
        let out = tape.matmul(&i2, &a).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_dot_product_case() {
        // Frozen from the scalar dot-product oracle: 1·3 + 2·4 = 11.
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(), false);
        let b = tape.leaf(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap(), false);
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        let b = tape.leaf(
            Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            false,
        );
        let out = tape.matmul(&z, &b).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_reports_extents() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        let b = tape.leaf(Tensor::zeros(vec![2, 2]), false);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softplus_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 100.0, -100.0]).unwrap(), false);
        let y = tape.softplus(&x).unwrap();
        assert!(close(y.data()[0], std::f64::consts::LN_2, 1e-15));
        assert!(close(y.data()[1], 100.0, 1e-12));
        assert!(close(y.data()[2], 0.0, 1e-12));
    }

    #[test]
    fn l2_normalize_values_and_errors() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![3.0, 4.0]).unwrap(), false);
        let y = tape.l2_normalize(&v).unwrap();
        assert!(close(y.data()[0], 0.6, 1e-15));
        assert!(close(y.data()[1], 0.8, 1e-15));
        let unit = tape.leaf(Tensor::vector(vec![1.0, 0.0]).unwrap(), false);
        let y = tape.l2_normalize(&unit).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
        let z = tape.leaf(Tensor::vector(vec![0.0, 0.0]).unwrap(), false);
        assert!(matches!(
            tape.l2_normalize(&z).unwrap_err(),
            Error::DegenerateVector { .. }
        ));
    }

    #[test]
    fn backward_bilinear_form() {
        // loss = sum(x ⊙ y) → grad_x = y, grad_y = x.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap(), true);
        let y = tape.leaf(Tensor::vector(vec![4.0, 5.0, 6.0]).unwrap(), true);
        let p = tape.mul(&x, &y).unwrap();
        let loss = tape.sum(&p).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[4.0, 5.0, 6.0]);
        assert_eq!(grads.get(&y).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_softplus_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0]).unwrap(), true);
        let y = tape.softplus(&x).unwrap();
        let loss = tape.sum(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        for g in grads.get(&x).unwrap() {
            assert!(close(*g, 0.5, 1e-15));
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
        let y = tape.softplus(&x).unwrap();
        assert!(matches!(
            tape.backward(&y).unwrap_err(),
            Error::NotScalar { .. }
        ));
    }

    #[test]
    fn backward_clears_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).unwrap(), true);
        let y = tape.mul_const(&x, 3.0).unwrap();
        let _ = tape.backward(&y).unwrap();
        assert!(tape.is_empty());
    }

    /// Central finite differences on a scalar-valued function of a flat input.
    fn finite_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        let mut buf = x.to_vec();
        for i in 0..x.len() {
            let old = buf[i];
            buf[i] = old + h;
            let fp = f(&buf);
            buf[i] = old - h;
            let fm = f(&buf);
            buf[i] = old;
            out[i] = (fp - fm) / (2.0 * h);
        }
        out
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    /// Composite of every differentiable op, as a function of a 3×3 matrix
    /// leaf and a 3-vector leaf. Exercises the whole VJP set at once.
    fn composite_loss(tape: &mut Tape, m: &Tensor, v: &Tensor) -> Tensor {
        let w = tape.matvec(m, v).unwrap();
        let mt = tape.transpose(m).unwrap();
        let w2 = tape.matvec(&mt, &w).unwrap();
        let s = tape.softplus(&w2).unwrap();
        let g = tape.gelu(&s).unwrap();
        let scaled = tape.mul_const(&g, 0.3).unwrap();
        let negs = tape.neg(&scaled).unwrap();
        let e = tape.exp(&negs).unwrap();
        let shifted = tape.add_const(&e, -0.4).unwrap();
        let a = tape.abs(&shifted).unwrap();
        let pos = tape.add_const(&a, 1.5).unwrap();
        let l = tape.ln(&pos).unwrap();
        let n = tape.l2_normalize(&l).unwrap();
        let d = tape.dot(&n, v).unwrap();

        let p = tape.mul(&w, &w2).unwrap();
        let diff = tape.sub(&p, &w).unwrap();
        let sum1 = tape.sum(&diff).unwrap();
        let mean1 = tape.mean(&l).unwrap();

        let mm = tape.matmul(m, &mt).unwrap();
        let cs = tape.col_sum(&mm).unwrap();
        let sr = tape.scale_rows(&mm, &cs).unwrap();
        let rs = tape.row_slice(&sr, 1).unwrap();
        let d2 = tape.dot(&rs, &n).unwrap();
        let sv = tape.scale_vec(&d2, v).unwrap();
        let su = tape.sum(&sv).unwrap();

        let t1 = tape.add(&d, &mean1).unwrap();
        let t2 = tape.mul_const(&sum1, 0.05).unwrap();
        let t3 = tape.mul_const(&su, 0.01).unwrap();
        let t12 = tape.add(&t1, &t2).unwrap();
        let total = tape.add(&t12, &t3).unwrap();
        tape.mul_const(&total, 2.0).unwrap()
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let m_data: Vec<f64> = (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let v_data: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();

            let eval_m = |p: &[f64]| -> f64 {
                let mut tape = Tape::new();
                let m = tape.leaf(Tensor::matrix(3, 3, p.to_vec()).unwrap(), true);
                let v = tape.leaf(Tensor::vector(v_data.clone()).unwrap(), true);
                composite_loss(&mut tape, &m, &v).item().unwrap()
            };
            let eval_v = |p: &[f64]| -> f64 {
                let mut tape = Tape::new();
                let m = tape.leaf(Tensor::matrix(3, 3, m_data.clone()).unwrap(), true);
                let v = tape.leaf(Tensor::vector(p.to_vec()).unwrap(), true);
                composite_loss(&mut tape, &m, &v).item().unwrap()
            };

            let mut tape = Tape::new();
            let m = tape.leaf(Tensor::matrix(3, 3, m_data.clone()).unwrap(), true);
            let v = tape.leaf(Tensor::vector(v_data.clone()).unwrap(), true);
            let loss = composite_loss(&mut tape, &m, &v);
            let grads = tape.backward(&loss).unwrap();

            let fd_m = finite_diff(&eval_m, &m_data, 1e-5);
            let fd_v = finite_diff(&eval_v, &v_data, 1e-5);
            let err_m = max_rel_err(grads.get(&m).unwrap(), &fd_m);
            let err_v = max_rel_err(grads.get(&v).unwrap(), &fd_v);
            assert!(err_m < 1e-4, "matrix gradient error {err_m} too large");
            assert!(err_v < 1e-4, "vector gradient error {err_v} too large");
        }
    }

    proptest! {
        #[test]
        fn softplus_odd_identity(xs in proptest::collection::vec(-30.0f64..30.0, 1..8)) {
            // softplus(x) − softplus(−x) = x
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(xs.clone()).unwrap(), false);
            let nx = tape.neg(&x).unwrap();
            let a = tape.softplus(&x).unwrap();
            let b = tape.softplus(&nx).unwrap();
            for i in 0..xs.len() {
                prop_assert!((a.data()[i] - b.data()[i] - xs[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn matmul_associativity(
            a in proptest::collection::vec(-2.0f64..2.0, 9),
            b in proptest::collection::vec(-2.0f64..2.0, 9),
            c in proptest::collection::vec(-2.0f64..2.0, 9),
        ) {
            let mut tape = Tape::new();
            let ta = tape.leaf(Tensor::matrix(3, 3, a).unwrap(), false);
            let tb = tape.leaf(Tensor::matrix(3, 3, b).unwrap(), false);
            let tc = tape.leaf(Tensor::matrix(3, 3, c).unwrap(), false);
            let ab = tape.matmul(&ta, &tb).unwrap();
            let ab_c = tape.matmul(&ab, &tc).unwrap();
            let bc = tape.matmul(&tb, &tc).unwrap();
            let a_bc = tape.matmul(&ta, &bc).unwrap();
            for (x, y) in ab_c.data().iter().zip(a_bc.data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn l2_normalize_unit_norm(v in proptest::collection::vec(-5.0f64..5.0, 2..10)) {
            prop_assume!(v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-6);
            let mut tape = Tape::new();
            let t = tape.leaf(Tensor::vector(v).unwrap(), false);
            let y = tape.l2_normalize(&t).unwrap();
            let norm = y.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-10);
        }
    }
}
