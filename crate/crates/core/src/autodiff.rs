//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! Nodes are tensors (shape + flat f64 data) stored in an index arena; each
//! primitive appends one node recording its inputs. `backward` walks the
//! tape once in reverse and accumulates gradients for every leaf marked as
//! requiring them. A tape is confined to one thread; distinct tapes may run
//! concurrently.
//!
//! Subgradient conventions: relu'(0) = 0; max reductions route the gradient
//! to the lowest-index maximizer; the row norm and sqrt have gradient 0 at 0.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// [m,k] x [k,n] -> [m,n]; a vector rhs [k] is treated as [k,1].
    MatMul(usize, usize),
    Tanh(usize),
    Relu(usize),
    Sqrt(usize),
    /// Euclidean norm of each row of a 2-D tensor: [m,k] -> [m].
    NormRows(usize),
    Sum(usize),
    Mean(usize),
    /// Global max -> scalar.
    MaxAll(usize),
    /// Column-wise max over rows: [m,n] -> [n].
    MaxAxis0(usize),
    /// Concatenation along axis 0.
    Concat(Vec<usize>),
    /// Stack k same-shape tensors into a new leading axis.
    Stack(Vec<usize>),
    /// Rows [start, start+len) along axis 0.
    Slice(usize, usize, usize),
    /// Multiply by a compile-time constant.
    Scale(usize, f64),
    Reshape(usize),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one scalar loss with respect to every tape node that
/// required them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `v`; zeros if the loss does not depend on it.
    pub fn get(&self, v: Var) -> &[f64] {
        self.grads[v.0].as_deref().unwrap_or(&[])
    }

    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Var {
        assert_eq!(numel(shape), data.len(), "leaf data does not match shape");
        self.push(shape.to_vec(), data, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(&[], vec![value], false)
    }

    fn needs(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    fn elementwise_shapes(&self, a: Var, b: Var, name: &str) -> Result<(Vec<usize>, bool)> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa == sb {
            return Ok((sa.clone(), false));
        }
        // scalar broadcast: one side has a single element
        if numel(sb) == 1 {
            return Ok((sa.clone(), true));
        }
        Err(Error::Shape(format!(
            "{name}: incompatible shapes {sa:?} vs {sb:?}"
        )))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, broadcast_b) = self.elementwise_shapes(a, b, "add")?;
        let bd = if broadcast_b {
            self.nodes[b.0].data[0]
        } else {
            0.0
        };
        let data = if broadcast_b {
            self.nodes[a.0].data.iter().map(|x| x + bd).collect()
        } else {
            self.nodes[a.0]
                .data
                .iter()
                .zip(&self.nodes[b.0].data)
                .map(|(x, y)| x + y)
                .collect()
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, broadcast_b) = self.elementwise_shapes(a, b, "sub")?;
        let data = if broadcast_b {
            let bd = self.nodes[b.0].data[0];
            self.nodes[a.0].data.iter().map(|x| x - bd).collect()
        } else {
            self.nodes[a.0]
                .data
                .iter()
                .zip(&self.nodes[b.0].data)
                .map(|(x, y)| x - y)
                .collect()
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, broadcast_b) = self.elementwise_shapes(a, b, "mul")?;
        let data = if broadcast_b {
            let bd = self.nodes[b.0].data[0];
            self.nodes[a.0].data.iter().map(|x| x * bd).collect()
        } else {
            self.nodes[a.0]
                .data
                .iter()
                .zip(&self.nodes[b.0].data)
                .map(|(x, y)| x * y)
                .collect()
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, Op::Mul(a.0, b.0), rg))
    }

    fn matmul_dims(&self, a: Var, b: Var) -> Result<(usize, usize, usize, bool)> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 {
            return Err(Error::Shape(format!("matmul lhs must be 2-D, got {sa:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        match sb.len() {
            2 if sb[0] == k => Ok((m, k, sb[1], false)),
            1 if sb[0] == k => Ok((m, k, 1, true)),
            _ => Err(Error::Shape(format!(
                "matmul: {sa:?} incompatible with {sb:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, vector_rhs) = self.matmul_dims(a, b)?;
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = ad[i * k + l];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * bd[l * n + j];
                }
            }
        }
        let shape = if vector_rhs { vec![m] } else { vec![m, n] };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::MatMul(a.0, b.0), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| x.tanh()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(a);
        self.push(shape, data, Op::Tanh(a.0), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(a);
        self.push(shape, data, Op::Relu(a.0), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| x.sqrt()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(a);
        self.push(shape, data, Op::Sqrt(a.0), rg)
    }

    pub fn norm_rows(&mut self, a: Var) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 {
            return Err(Error::Shape(format!("norm_rows needs 2-D input, got {sa:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let ad = &self.nodes[a.0].data;
        let data = (0..m)
            .map(|i| ad[i * k..(i + 1) * k].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let rg = self.needs(a);
        Ok(self.push(vec![m], data, Op::NormRows(a.0), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.needs(a);
        self.push(vec![], vec![s], Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let len = self.nodes[a.0].data.len().max(1);
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.needs(a);
        self.push(vec![], vec![s / len as f64], Op::Mean(a.0), rg)
    }

    pub fn max_all(&mut self, a: Var) -> Var {
        let m = self
            .nodes[a.0]
            .data
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let rg = self.needs(a);
        self.push(vec![], vec![m], Op::MaxAll(a.0), rg)
    }

    pub fn max_axis0(&mut self, a: Var) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 {
            return Err(Error::Shape(format!("max_axis0 needs 2-D input, got {sa:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        if m == 0 {
            return Err(Error::Shape("max_axis0 over zero rows".into()));
        }
        let ad = &self.nodes[a.0].data;
        let mut out = ad[..n].to_vec();
        for i in 1..m {
            for j in 0..n {
                if ad[i * n + j] > out[j] {
                    out[j] = ad[i * n + j];
                }
            }
        }
        let rg = self.needs(a);
        Ok(self.push(vec![n], out, Op::MaxAxis0(a.0), rg))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let tail = self.nodes[parts[0].0].shape.get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0usize;
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            let (r, t): (usize, &[usize]) = if s.is_empty() {
                (1, &[])
            } else {
                (s[0], &s[1..])
            };
            if t != tail.as_slice() {
                return Err(Error::Shape(format!(
                    "concat: trailing dims {t:?} != {tail:?}"
                )));
            }
            rows += r;
            data.extend_from_slice(&self.nodes[p.0].data);
            rg |= self.needs(p);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        Ok(self.push(shape, data, Op::Concat(parts.iter().map(|v| v.0).collect()), rg))
    }

    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("stack of zero tensors".into()));
        }
        let inner = self.nodes[parts[0].0].shape.clone();
        let mut data = Vec::with_capacity(parts.len() * numel(&inner));
        let mut rg = false;
        for &p in parts {
            if self.nodes[p.0].shape != inner {
                return Err(Error::Shape(format!(
                    "stack: shape {:?} != {inner:?}",
                    self.nodes[p.0].shape
                )));
            }
            data.extend_from_slice(&self.nodes[p.0].data);
            rg |= self.needs(p);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        Ok(self.push(shape, data, Op::Stack(parts.iter().map(|v| v.0).collect()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        if sa.is_empty() {
            return Err(Error::Shape("slice_rows on a scalar".into()));
        }
        if start + len > sa[0] {
            return Err(Error::Shape(format!(
                "slice_rows [{start}, {}) out of range for axis of size {}",
                start + len,
                sa[0]
            )));
        }
        let row = numel(&sa[1..]);
        let data = self.nodes[a.0].data[start * row..(start + len) * row].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&sa[1..]);
        let rg = self.needs(a);
        Ok(self.push(shape, data, Op::Slice(a.0, start, len), rg))
    }

    /// Single row of a 2-D tensor, flattened to [k].
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let s = self.slice_rows(a, index, 1)?;
        let inner = self.nodes[s.0].shape[1..].to_vec();
        self.reshape(s, &inner)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(a);
        self.push(shape, data, Op::Scale(a.0, c), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[a.0].data.len() {
            return Err(Error::Shape(format!(
                "reshape to {shape:?} with {} elements",
                self.nodes[a.0].data.len()
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.needs(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a.0), rg))
    }

    /// Frobenius norm of any tensor: sqrt(sum of squares).
    pub fn frobenius(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        let s = self.sum(sq);
        Ok(self.sqrt(s))
    }

    /// dLoss/dNode for every node; `loss` must be scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(Error::NonScalarLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad && !matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn add_into(grads: &mut Vec<Option<Vec<f64>>>, idx: usize, len: usize) -> &mut Vec<f64> {
        grads[idx].get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.nodes[*a].requires_grad {
                    let ga = Self::add_into(grads, *a, self.nodes[*a].data.len());
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if self.nodes[*b].requires_grad {
                    let blen = self.nodes[*b].data.len();
                    let gb = Self::add_into(grads, *b, blen);
                    if blen == g.len() {
                        for (x, y) in gb.iter_mut().zip(g) {
                            *x += y;
                        }
                    } else {
                        gb[0] += g.iter().sum::<f64>();
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[*a].requires_grad {
                    let ga = Self::add_into(grads, *a, self.nodes[*a].data.len());
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if self.nodes[*b].requires_grad {
                    let blen = self.nodes[*b].data.len();
                    let gb = Self::add_into(grads, *b, blen);
                    if blen == g.len() {
                        for (x, y) in gb.iter_mut().zip(g) {
                            *x -= y;
                        }
                    } else {
                        gb[0] -= g.iter().sum::<f64>();
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let blen = self.nodes[b].data.len();
                if self.nodes[a].requires_grad {
                    let contrib: Vec<f64> = if blen == g.len() {
                        g.iter()
                            .zip(&self.nodes[b].data)
                            .map(|(gy, bv)| gy * bv)
                            .collect()
                    } else {
                        let bv = self.nodes[b].data[0];
                        g.iter().map(|gy| gy * bv).collect()
                    };
                    let ga = Self::add_into(grads, a, self.nodes[a].data.len());
                    for (x, y) in ga.iter_mut().zip(&contrib) {
                        *x += y;
                    }
                }
                if self.nodes[b].requires_grad {
                    if blen == g.len() {
                        let contrib: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[a].data)
                            .map(|(gy, av)| gy * av)
                            .collect();
                        let gb = Self::add_into(grads, b, blen);
                        for (x, y) in gb.iter_mut().zip(&contrib) {
                            *x += y;
                        }
                    } else {
                        let s: f64 = g
                            .iter()
                            .zip(&self.nodes[a].data)
                            .map(|(gy, av)| gy * av)
                            .sum();
                        let gb = Self::add_into(grads, b, blen);
                        gb[0] += s;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let sa = &self.nodes[a].shape;
                    (sa[0], sa[1])
                };
                let n = if self.nodes[b].shape.len() == 2 {
                    self.nodes[b].shape[1]
                } else {
                    1
                };
                if self.nodes[a].requires_grad {
                    // dA = G . B^T
                    let bd = &self.nodes[b].data;
                    let mut contrib = vec![0.0; m * k];
                    for i2 in 0..m {
                        for j in 0..n {
                            let gv = g[i2 * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for l in 0..k {
                                contrib[i2 * k + l] += gv * bd[l * n + j];
                            }
                        }
                    }
                    let ga = Self::add_into(grads, a, m * k);
                    for (x, y) in ga.iter_mut().zip(&contrib) {
                        *x += y;
                    }
                }
                if self.nodes[b].requires_grad {
                    // dB = A^T . G
                    let ad = &self.nodes[a].data;
                    let mut contrib = vec![0.0; k * n];
                    for i2 in 0..m {
                        for l in 0..k {
                            let av = ad[i2 * k + l];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                contrib[l * n + j] += av * g[i2 * n + j];
                            }
                        }
                    }
                    let gb = Self::add_into(grads, b, k * n);
                    for (x, y) in gb.iter_mut().zip(&contrib) {
                        *x += y;
                    }
                }
            }
            Op::Tanh(a) => {
                if self.nodes[*a].requires_grad {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(&node.data)
                        .map(|(gy, y)| gy * (1.0 - y * y))
                        .collect();
                    let ga = Self::add_into(grads, *a, self.nodes[*a].data.len());
                    for (x, y) in ga.iter_mut().zip(&contrib) {
                        *x += y;
                    }
                }
            }
            Op::Relu(a) => {
                if self.nodes[*a].requires_grad {
                    let input = &self.nodes[*a].data;
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(input)
                        .map(|(gy, x)| if *x > 0.0 { *gy } else { 0.0 })
                        .collect();
                    let ga = Self::add_into(grads, *a, input.len());
                    for (x, y) in ga.iter_mut().zip(&contrib) {
                        *x += y;
                    }
                }
            }
            Op::Sqrt(a) => {
                if self.nodes[*a].requires_grad {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(&node.data)
                        .map(|(gy, y)| if *y > 0.0 { gy / (2.0 * y) } else { 0.0 })
                        .collect();
                    let ga = Self::add_into(grads, *a, self.nodes[*a].data.len());
                    for (x, y) in ga.iter_mut().zip(&contrib) {
                        *x += y;
                    }
                }
            }
            Op::NormRows(a) => {
                if self.nodes[*a].requires_grad {
                    let sa = &self.nodes[*a].shape;
                    let (m, k) = (sa[0], sa[1]);
                    let input = &self.nodes[*a].data;
                    let mut contrib = vec![0.0; m * k];
                    for r in 0..m {
                        let norm = node.data[r];
                        if norm > 0.0 {
                            let s = g[r] / norm;
                            for c in 0..k {
                                contrib[r * k + c] = s * input[r * k + c];
                            }
                        }
                        // zero-row gradient is defined as zero
                    }
                    let ga = Self::add_into(grads, *a, m * k);
                    for (x, y) in ga.iter_mut().zip(&contrib) {
                        *x += y;
                    }
                }
            }
            Op::Sum(a) => {
                if self.nodes[*a].requires_grad {
                    let ga = Self::add_into(grads, *a, self.nodes[*a].data.len());
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if self.nodes[*a].requires_grad {
                    let len = self.nodes[*a].data.len().max(1);
                    let share = g[0] / len as f64;
                    let ga = Self::add_into(grads, *a, self.nodes[*a].data.len());
                    for x in ga.iter_mut() {
                        *x += share;
                    }
                }
            }
            Op::MaxAll(a) => {
                if self.nodes[*a].requires_grad {
                    let input = &self.nodes[*a].data;
                    let max = node.data[0];
                    let idx = input.iter().position(|&x| x == max).unwrap_or(0);
                    let ga = Self::add_into(grads, *a, input.len());
                    ga[idx] += g[0];
                }
            }
            Op::MaxAxis0(a) => {
                if self.nodes[*a].requires_grad {
                    let sa = &self.nodes[*a].shape;
                    let (m, n) = (sa[0], sa[1]);
                    let input = &self.nodes[*a].data;
                    let ga = Self::add_into(grads, *a, m * n);
                    for j in 0..n {
                        let max = node.data[j];
                        // lowest-index maximizer gets the gradient
                        for i2 in 0..m {
                            if input[i2 * n + j] == max {
                                ga[i2 * n + j] += g[j];
                                break;
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0usize;
                for &p in parts {
                    let len = self.nodes[p].data.len();
                    if self.nodes[p].requires_grad {
                        let gp = Self::add_into(grads, p, len);
                        for (x, y) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *x += y;
                        }
                    }
                    offset += len;
                }
            }
            Op::Stack(parts) => {
                let mut offset = 0usize;
                for &p in parts {
                    let len = self.nodes[p].data.len();
                    if self.nodes[p].requires_grad {
                        let gp = Self::add_into(grads, p, len);
                        for (x, y) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *x += y;
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice(a, start, _len) => {
                if self.nodes[*a].requires_grad {
                    let sa = &self.nodes[*a].shape;
                    let row = numel(&sa[1..]);
                    let ga = Self::add_into(grads, *a, self.nodes[*a].data.len());
                    for (offset, y) in g.iter().enumerate() {
                        ga[start * row + offset] += y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[*a].requires_grad {
                    let ga = Self::add_into(grads, *a, self.nodes[*a].data.len());
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += c * y;
                    }
                }
            }
            Op::Reshape(a) => {
                if self.nodes[*a].requires_grad {
                    let ga = Self::add_into(grads, *a, self.nodes[*a].data.len());
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }
    }
}
