use super::kernels::{self, gemm, permute_map, MatRef};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Target value that excludes a row from [`Graph::cross_entropy`].
pub const IGNORE_INDEX: i64 = -100;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operation kinds accepted by [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    GeluApprox,
}

/// Second operand of a binary pointwise operation.
#[derive(Clone, Copy, Debug)]
pub enum Operand {
    Tensor(Var),
    Scalar(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    AddBias {
        x: usize,
        bias: usize,
    },
    Relu(usize),
    Gelu(usize),
    Map {
        x: usize,
        derivative: fn(f64) -> f64,
    },
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Reshape(usize),
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Select {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
        index: usize,
    },
    Mse(usize, usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(usize),
    Mean(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(_) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu_approx",
            Op::Map { .. } => "map",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding_lookup",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Select { .. } => "select",
            Op::Mse(..) => "mse",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![a, b],
            Op::AddBias { x, bias } => vec![x, bias],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Embedding { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::AddScalar(x)
            | Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Map { x, .. }
            | Op::Softmax { x, .. }
            | Op::Reshape(x)
            | Op::Permute { x, .. }
            | Op::Select { x, .. }
            | Op::Sum(x)
            | Op::Mean(x) => vec![x],
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only populated for leaves.
    grad: Option<Vec<f64>>,
}

/// Append-only differentiation graph. Parents always precede children, so
/// append order is a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of a node's value as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.data.len() != 1 {
            return Err(Error::Rank {
                op: "scalar",
                shape: n.shape.clone(),
            });
        }
        Ok(n.data[0])
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents().into_iter().map(Var).collect()
    }

    /// Accumulated gradient of a leaf. Leaves that require grad but were not
    /// reached by any backward pass report zeros once a backward ran.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = op
            .parents()
            .iter()
            .any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a copy of `t` as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, op)
    }

    fn unary_map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, op)
    }

    /// Matrix product over the last two axes. `b` is either rank 2 (shared
    /// across the batch) or carries exactly the batch dimensions of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let batch_dims = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && &sb[..sb.len() - 2] != batch_dims {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let batch = numel(batch_dims);
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
            if shared_rhs {
                gemm(
                    MatRef::row_major(da, batch * m, k),
                    MatRef::row_major(db, k, n),
                    &mut out,
                    0.0,
                );
            } else {
                for bi in 0..batch {
                    gemm(
                        MatRef::row_major(&da[bi * m * k..(bi + 1) * m * k], m, k),
                        MatRef::row_major(&db[bi * k * n..(bi + 1) * k * n], k, n),
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        0.0,
                    );
                }
            }
        }
        let mut shape = batch_dims.to_vec();
        shape.extend([m, n]);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a.0, b.0)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary_map(a, |x| x + c, Op::AddScalar(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary_map(a, |x| x * c, Op::Scale(a.0, c))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        let sb = &self.nodes[bias.0].shape;
        if sb.len() != 1 || sx.last() != sb.first() {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let h = sb[0];
        let b = &self.nodes[bias.0].data;
        let data = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % h])
            .collect();
        let shape = sx.clone();
        Ok(self.push(shape, data, Op::AddBias { x: x.0, bias: bias.0 }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary_map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a.0))
    }

    /// GELU with the tanh approximation (cubic coefficient 0.044715).
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary_map(a, kernels::gelu, Op::Gelu(a.0))
    }

    /// Pointwise `f` whose backward multiplies by `derivative`.
    pub fn map(&mut self, a: Var, f: fn(f64) -> f64, derivative: fn(f64) -> f64) -> Var {
        self.unary_map(a, f, Op::Map { x: a.0, derivative })
    }

    /// Dispatches a pointwise operation by kind.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, rhs: Option<Operand>) -> Result<Var> {
        let missing = || Error::Input(format!("{kind:?} needs a second operand"));
        match (kind, rhs) {
            (Elementwise::Add, Some(Operand::Tensor(b))) => self.add(a, b),
            (Elementwise::Add, Some(Operand::Scalar(c))) => Ok(self.add_scalar(a, c)),
            (Elementwise::Sub, Some(Operand::Tensor(b))) => self.sub(a, b),
            (Elementwise::Sub, Some(Operand::Scalar(c))) => Ok(self.add_scalar(a, -c)),
            (Elementwise::Mul, Some(Operand::Tensor(b))) => self.mul(a, b),
            (Elementwise::Mul | Elementwise::Scale, Some(Operand::Scalar(c))) => {
                Ok(self.scale(a, c))
            }
            (Elementwise::Scale, Some(Operand::Tensor(_))) => Err(Error::Input(
                "scale takes a scalar operand".to_string(),
            )),
            (Elementwise::Relu, _) => Ok(self.relu(a)),
            (Elementwise::GeluApprox, _) => Ok(self.gelu(a)),
            (_, None) => Err(missing()),
        }
    }

    /// Softmax along `axis`, computed with the slice maximum subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Index {
                op: "softmax axis",
                index: axis,
                size: shape.len(),
            });
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[base + j * inner]);
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x: x.0,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let h = *shape.last().ok_or_else(|| Error::dim("layer_norm", &shape, &[]))?;
        for p in [gain, bias] {
            let sp = &self.nodes[p.0].shape;
            if sp.as_slice() != [h] {
                return Err(Error::dim("layer_norm", &shape, sp));
            }
        }
        let rows = numel(&shape) / h.max(1);
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut normalized = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * h..(r + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..h {
                let n = (row[j] - mean) * is;
                normalized[r * h + j] = n;
                out[r * h + j] = n * g[j] + b[j];
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                normalized,
                inv_std,
            },
        ))
    }

    /// Gathers rows of a `[V, H]` table; output is `[ids.len(), H]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.nodes[table.0].shape.clone();
        if st.len() != 2 {
            return Err(Error::dim("embedding_lookup", &st, &[]));
        }
        let (v, h) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Index {
                op: "embedding_lookup",
                index: bad,
                size: v,
            });
        }
        let src = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            out.extend_from_slice(&src[id * h..(id + 1) * h]);
        }
        Ok(self.push(
            vec![ids.len(), h],
            out,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let from = &self.nodes[x.0].shape;
        if numel(from) != numel(&shape) {
            return Err(Error::dim("reshape", from, &shape));
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(shape, data, Op::Reshape(x.0)))
    }

    /// Reorders axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() {
            return Err(Error::dim("permute", &shape, axes));
        }
        for &a in axes {
            if a >= shape.len() || seen[a] {
                return Err(Error::dim("permute", &shape, axes));
            }
            seen[a] = true;
        }
        let map = permute_map(&shape, axes);
        let src = &self.nodes[x.0].data;
        let data = map.iter().map(|&i| src[i]).collect();
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        Ok(self.push(
            out_shape,
            data,
            Op::Permute {
                x: x.0,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Picks `index` along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::dim("select", &shape, &[axis]));
        }
        if index >= shape[axis] {
            return Err(Error::Index {
                op: "select",
                index,
                size: shape[axis],
            });
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let src = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * len * inner + index * inner;
            data.extend_from_slice(&src[base..base + inner]);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.push(
            out_shape,
            data,
            Op::Select {
                x: x.0,
                outer,
                len,
                inner,
                index,
            },
        ))
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mse", a, b)?;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let n = da.len().max(1) as f64;
        let total: f64 = da.iter().zip(db).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.push(vec![], vec![total / n], Op::Mse(a.0, b.0)))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` over
    /// the rows whose target is not `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64], ignore_index: i64) -> Result<Var> {
        let shape = self.nodes[logits.0].shape.clone();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::dim("cross_entropy", &shape, &[targets.len()]));
        }
        let (rows, classes) = (shape[0], shape[1]);
        let mut parsed = Vec::with_capacity(rows);
        for &t in targets {
            if t == ignore_index {
                parsed.push(None);
            } else if t < 0 || t as usize >= classes {
                return Err(Error::Index {
                    op: "cross_entropy target",
                    index: t.max(0) as usize,
                    size: classes,
                });
            } else {
                parsed.push(Some(t as usize));
            }
        }
        let count = parsed.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::UndefinedMean);
        }
        let src = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - log_z).exp();
            }
            if let Some(t) = parsed[r] {
                total += log_z - row[t];
            }
        }
        Ok(self.push(
            vec![],
            vec![total / count as f64],
            Op::CrossEntropy {
                logits: logits.0,
                targets: parsed,
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].data.iter().sum();
        self.push(vec![], vec![s], Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = &self.nodes[x.0].data;
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        self.push(vec![], vec![s], Op::Mean(x.0))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of leaves that
    /// require grad are added to what previous sweeps left there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Rank {
                op: "backward",
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].requires_grad {
                    let g = grads[i]
                        .take()
                        .unwrap_or_else(|| vec![0.0; self.nodes[i].data.len()]);
                    match &mut self.nodes[i].grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                        None => self.nodes[i].grad = Some(g),
                    }
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // Adds `contribution` into the pending gradient of node `p`.
        let mut send = |p: usize, contribution: Vec<f64>| {
            if !nodes[p].requires_grad {
                return;
            }
            match &mut grads[p] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, x)| *a += x),
                slot @ None => *slot = Some(contribution),
            }
        };
        let wants = |p: usize| nodes[p].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (da, db) = (&nodes[a].data, &nodes[b].data);
                if wants(a) {
                    let mut ga = vec![0.0; batch * m * k];
                    if shared_rhs {
                        gemm(
                            MatRef::row_major(g, batch * m, n),
                            MatRef::transposed(db, k, n),
                            &mut ga,
                            0.0,
                        );
                    } else {
                        for bi in 0..batch {
                            gemm(
                                MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n),
                                MatRef::transposed(&db[bi * k * n..(bi + 1) * k * n], k, n),
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                0.0,
                            );
                        }
                    }
                    send(a, ga);
                }
                if wants(b) {
                    let gb = if shared_rhs {
                        let mut gb = vec![0.0; k * n];
                        gemm(
                            MatRef::transposed(da, batch * m, k),
                            MatRef::row_major(g, batch * m, n),
                            &mut gb,
                            0.0,
                        );
                        gb
                    } else {
                        let mut gb = vec![0.0; batch * k * n];
                        for bi in 0..batch {
                            gemm(
                                MatRef::transposed(&da[bi * m * k..(bi + 1) * m * k], m, k),
                                MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n),
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                0.0,
                            );
                        }
                        gb
                    };
                    send(b, gb);
                }
            }
            &Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                send(a, g.to_vec());
                send(b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    send(a, g.iter().zip(&nodes[b].data).map(|(x, y)| x * y).collect());
                }
                if wants(b) {
                    send(b, g.iter().zip(&nodes[a].data).map(|(x, y)| x * y).collect());
                }
            }
            &Op::AddScalar(x) | &Op::Reshape(x) => send(x, g.to_vec()),
            &Op::Scale(x, c) => send(x, g.iter().map(|v| v * c).collect()),
            &Op::AddBias { x, bias } => {
                send(x, g.to_vec());
                if wants(bias) {
                    let h = nodes[bias].data.len();
                    let mut gb = vec![0.0; h];
                    for (j, v) in g.iter().enumerate() {
                        gb[j % h] += v;
                    }
                    send(bias, gb);
                }
            }
            &Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(&nodes[x].data)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                send(x, gx);
            }
            &Op::Gelu(x) => {
                let gx = g
                    .iter()
                    .zip(&nodes[x].data)
                    .map(|(gv, &xv)| gv * kernels::gelu_derivative(xv))
                    .collect();
                send(x, gx);
            }
            &Op::Map { x, derivative } => {
                let gx = g
                    .iter()
                    .zip(&nodes[x].data)
                    .map(|(gv, &xv)| gv * derivative(xv))
                    .collect();
                send(x, gx);
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.data;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let base = o * len * inner + c;
                        let dot: f64 = (0..len)
                            .map(|j| y[base + j * inner] * g[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let idx = base + j * inner;
                            gx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                send(x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let h = nodes[*gain].data.len();
                let gw = &nodes[*gain].data;
                let rows = inv_std.len();
                if wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let (mut sum_d, mut sum_dn) = (0.0, 0.0);
                        for j in 0..h {
                            let d = g[r * h + j] * gw[j];
                            sum_d += d;
                            sum_dn += d * normalized[r * h + j];
                        }
                        let scale = inv_std[r] / h as f64;
                        for j in 0..h {
                            let d = g[r * h + j] * gw[j];
                            gx[r * h + j] =
                                scale * (h as f64 * d - sum_d - normalized[r * h + j] * sum_dn);
                        }
                    }
                    send(*x, gx);
                }
                if wants(*gain) {
                    let mut gg = vec![0.0; h];
                    for (idx, v) in g.iter().enumerate() {
                        gg[idx % h] += v * normalized[idx];
                    }
                    send(*gain, gg);
                }
                if wants(*bias) {
                    let mut gb = vec![0.0; h];
                    for (idx, v) in g.iter().enumerate() {
                        gb[idx % h] += v;
                    }
                    send(*bias, gb);
                }
            }
            Op::Embedding { table, ids } => {
                let h = nodes[*table].shape[1];
                let mut gt = vec![0.0; nodes[*table].data.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..h {
                        gt[id * h + j] += g[row * h + j];
                    }
                }
                send(*table, gt);
            }
            Op::Permute { x, axes } => {
                let map = permute_map(&nodes[*x].shape, axes);
                let mut gx = vec![0.0; g.len()];
                for (o, &src) in map.iter().enumerate() {
                    gx[src] = g[o];
                }
                send(*x, gx);
            }
            &Op::Select {
                x,
                outer,
                len,
                inner,
                index,
            } => {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let base = o * len * inner + index * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                send(x, gx);
            }
            &Op::Mse(a, b) => {
                let (da, db) = (&nodes[a].data, &nodes[b].data);
                let factor = 2.0 * g[0] / da.len().max(1) as f64;
                let diff: Vec<f64> = da.iter().zip(db).map(|(x, y)| factor * (x - y)).collect();
                if wants(b) {
                    send(b, diff.iter().map(|v| -v).collect());
                }
                send(a, diff);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let classes = nodes[*logits].shape[1];
                let factor = g[0] / *count as f64;
                let mut gl = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for c in 0..classes {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        gl[r * classes + c] = factor * (probs[r * classes + c] - onehot);
                    }
                }
                send(*logits, gl);
            }
            &Op::Sum(x) => send(x, vec![g[0]; nodes[x].data.len()]),
            &Op::Mean(x) => {
                let n = nodes[x].data.len();
                send(x, vec![g[0] / n.max(1) as f64; n]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    fn p(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::parameter(shape, data)
    }

    #[test]
    fn matmul_hand_cases() {
        let mut g = Graph::new();
        let id = g.leaf(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let m = g.leaf(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let out = g.matmul(id, m).unwrap();
        assert_eq!(g.value(out), &[1.0, 2.0, 3.0, 4.0]);

        let row = g.leaf(&t(vec![1, 2], vec![1.0, 2.0]));
        let col = g.leaf(&t(vec![2, 1], vec![3.0, 4.0]));
        let dot = g.matmul(row, col).unwrap();
        assert_eq!(g.value(dot), &[11.0]);
        assert_eq!(g.shape(dot), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(vec![2, 3]));
        let b = g.leaf(&Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        let c = g.leaf(&Tensor::zeros(vec![4, 3, 2]));
        let d = g.leaf(&Tensor::zeros(vec![5, 2, 2]));
        assert!(g.matmul(c, d).is_err());
    }

    #[test]
    fn batched_matmul_gradients_hand() {
        // sum(A x B) for batched A [2,1,2], shared B [2,1]: dA = rows of B^T.
        let mut g = Graph::new();
        let a = g.leaf(&p(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(&p(vec![2, 1], vec![5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[17.0, 39.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(g.grad(b).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn relu_and_identity_add() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![3], vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
        let z = g.elementwise(Elementwise::Add, x, Some(Operand::Scalar(0.0))).unwrap();
        assert_eq!(g.value(z), g.value(x));
        let y = g.leaf(&t(vec![2], vec![1.0, 1.0]));
        assert!(matches!(g.add(x, y), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![3], vec![0.0, 0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        for v in g.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = g.leaf(&t(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.1, -0.2]));
        let b = g.add_scalar(a, 123.25);
        let sa = g.softmax(a, 1).unwrap();
        let sb = g.softmax(b, 1).unwrap();
        for (u, v) in g.value(sa).iter().zip(g.value(sb)) {
            assert!((u - v).abs() < 1e-12);
        }
        assert!(g.softmax(a, 2).is_err());
    }

    #[test]
    fn softmax_over_leading_axis() {
        let mut g = Graph::new();
        let a = g.leaf(&t(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]));
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(s), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![1, 4], vec![3.0; 4]));
        let gain = g.leaf(&t(vec![4], vec![1.0; 4]));
        let bias = g.leaf(&t(vec![4], vec![0.0; 4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|v| *v == 0.0));

        let x = g.leaf(&t(vec![1, 5], vec![0.1; 5]));
        let gain = g.leaf(&t(vec![5], vec![1.0; 5]));
        let bias = g.leaf(&t(vec![5], vec![0.0; 5]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_rows_have_zero_mean() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![2, 3], vec![1.0, 5.0, -2.0, 0.3, 0.2, 9.0]));
        let gain = g.leaf(&t(vec![3], vec![1.0; 3]));
        let bias = g.leaf(&t(vec![3], vec![0.0; 3]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        for row in g.value(y).chunks(3) {
            let mean: f64 = row.iter().sum::<f64>() / 3.0;
            let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
        let wrong = g.leaf(&t(vec![2], vec![1.0; 2]));
        assert!(g.layer_norm(x, wrong, bias, 1e-5).is_err());
    }

    #[test]
    fn embedding_gather_and_scatter() {
        let mut g = Graph::new();
        let table = g.leaf(&p(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let first = g.embedding(table, &[0]).unwrap();
        assert_eq!(g.value(first), &[0.0, 1.0]);
        let rep = g.embedding(table, &[1, 1]).unwrap();
        let s = g.sum(rep);
        g.backward(s).unwrap();
        assert_eq!(g.grad(table).unwrap(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
        let err = g.embedding(table, &[3]).unwrap_err();
        assert!(err.to_string().contains('3'));
    }

    #[test]
    fn mse_hand_values() {
        let mut g = Graph::new();
        let a = g.leaf(&t(vec![2], vec![1.0, 2.0]));
        let b = g.leaf(&t(vec![2], vec![3.0, 4.0]));
        let m = g.mse(a, b).unwrap();
        assert_eq!(g.scalar(m).unwrap(), 4.0);
        let same = g.mse(a, a).unwrap();
        assert_eq!(g.scalar(same).unwrap(), 0.0);
        let c = g.leaf(&t(vec![1, 2], vec![3.0, 4.0]));
        assert!(g.mse(a, c).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let logits = g.leaf(&t(vec![1, 2], vec![0.0, 0.0]));
        let ce = g.cross_entropy(logits, &[0], IGNORE_INDEX).unwrap();
        assert!((g.scalar(ce).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let sharp = g.leaf(&t(vec![1, 3], vec![100.0, 0.0, 0.0]));
        let ce = g.cross_entropy(sharp, &[0], IGNORE_INDEX).unwrap();
        assert!(g.scalar(ce).unwrap() < 1e-40);

        assert!(matches!(
            g.cross_entropy(logits, &[IGNORE_INDEX], IGNORE_INDEX),
            Err(Error::UndefinedMean)
        ));
        assert!(g.cross_entropy(logits, &[2], IGNORE_INDEX).is_err());
    }

    #[test]
    fn ignored_rows_match_reduced_batch() {
        let rows = vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4, -0.5, 0.9, 1.1];
        let mut g = Graph::new();
        let full = g.leaf(&p(vec![3, 3], rows.clone()));
        let ce = g.cross_entropy(full, &[2, IGNORE_INDEX, 0], IGNORE_INDEX).unwrap();
        g.backward(ce).unwrap();

        let mut reduced: Vec<f64> = rows[..3].to_vec();
        reduced.extend_from_slice(&rows[6..]);
        let mut h = Graph::new();
        let part = h.leaf(&p(vec![2, 3], reduced));
        let ce2 = h.cross_entropy(part, &[2, 0], IGNORE_INDEX).unwrap();
        h.backward(ce2).unwrap();

        assert_eq!(g.scalar(ce).unwrap(), h.scalar(ce2).unwrap());
        let gf = g.grad(full).unwrap();
        let gr = h.grad(part).unwrap();
        assert_eq!(&gf[..3], &gr[..3]);
        assert_eq!(&gf[3..6], &[0.0, 0.0, 0.0]);
        assert_eq!(&gf[6..], &gr[3..]);
    }

    #[test]
    fn backward_hand_cases() {
        let mut g = Graph::new();
        let x = g.leaf(&p(vec![3], vec![0.5, -2.0, 7.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(&p(vec![1], vec![2.0]));
        let zero = g.constant(vec![1], vec![0.0]).unwrap();
        let m = g.mse(x, zero).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
        assert!(g.grad(zero).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(&p(vec![2], vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Rank { .. })));
    }

    #[test]
    fn second_backward_doubles_leaf_gradients() {
        let mut g = Graph::new();
        let w = g.leaf(&p(vec![2, 2], vec![0.1, -0.3, 0.7, 0.2]));
        let x = g.leaf(&t(vec![1, 2], vec![1.5, -0.5]));
        let y = g.matmul(x, w).unwrap();
        let a = g.gelu(y);
        let l = g.sum(a);
        g.backward(l).unwrap();
        let once = g.grad(w).unwrap().to_vec();
        g.backward(l).unwrap();
        for (two, one) in g.grad(w).unwrap().iter().zip(&once) {
            assert_eq!(*two, 2.0 * one);
        }
    }

    #[test]
    fn parents_precede_children() {
        let mut g = Graph::new();
        let a = g.leaf(&p(vec![2, 2], vec![1.0; 4]));
        let b = g.leaf(&p(vec![2], vec![1.0; 2]));
        let c = g.add_bias(a, b).unwrap();
        let d = g.softmax(c, 1).unwrap();
        let e = g.mean(d);
        for v in [c, d, e] {
            for parent in g.parents(v) {
                assert!(parent.index() < v.index());
            }
        }
        assert_eq!(g.op_name(d), "softmax");
        assert_eq!(g.len(), 5);
    }

    #[test]
    fn unreached_trainable_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let used = g.leaf(&p(vec![1], vec![3.0]));
        let unused = g.leaf(&p(vec![2], vec![1.0, 1.0]));
        let s = g.sum(used);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn select_and_permute_round_trip() {
        let mut g = Graph::new();
        let x = g.leaf(&p(vec![2, 3, 2], (0..12).map(f64::from).collect()));
        let first = g.select(x, 1, 0).unwrap();
        assert_eq!(g.shape(first), &[2, 2]);
        assert_eq!(g.value(first), &[0.0, 1.0, 6.0, 7.0]);
        let perm = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(perm), &[2, 2, 3]);
        let back = g.permute(perm, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
        assert!(g.permute(x, &[0, 0, 1]).is_err());
        assert!(g.select(x, 1, 3).is_err());
    }
}
