//! Wengert-list reverse mode. Forward ops append nodes to the tape; `backward`
//! walks the list once in reverse. Nodes that cannot reach a trainable leaf
//! are marked `needs_grad = false` and skipped.

use std::cell::{Ref, RefCell};

use indexmap::IndexMap;

use crate::error::{NumericsError, Result};
use crate::float::Float;
use crate::grad::GradMap;
use crate::params::ParamStore;
use crate::tensor::{dims2, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Affine(usize, T),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    LeakyRelu(usize, T),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Mse(usize, usize),
    BceLogits {
        x: usize,
        targets: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mean: bool,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Transpose(usize),
    Reshape(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation over parameters drawn from one or more [`ParamStore`]s.
///
/// Parameter names must be unique across the stores. Frozen parameters enter
/// the tape as constants.
pub struct Tape<'s, T: Float = f32> {
    stores: Vec<&'s ParamStore<T>>,
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<IndexMap<String, usize>>,
}

impl<'s, T: Float> Tape<'s, T> {
    pub fn new(stores: &[&'s ParamStore<T>]) -> Self {
        Tape {
            stores: stores.to_vec(),
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(IndexMap::new()),
        }
    }

    /// A tape with no parameter stores, for pure functions of inputs.
    pub fn detached() -> Self {
        Self::new(&[])
    }

    pub fn stores(&self) -> &[&'s ParamStore<T>] {
        &self.stores
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn ng(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Looks up a named parameter. Repeated calls return the same node.
    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Var(id));
        }
        let store = self
            .stores
            .iter()
            .find(|s| s.contains(name))
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))?;
        let tensor = store.require(name)?.clone();
        let trainable = !store.is_frozen(name);
        let v = self.push(tensor, Op::Leaf, trainable);
        self.params.borrow_mut().insert(name.to_string(), v.0);
        Ok(v)
    }

    /// Non-differentiable input.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input; its gradient is available through [`Gradients::wrt`].
    pub fn input(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        dims2(self.nodes.borrow()[v.0].value.shape()).map_err(|_| {
            NumericsError::shape(op, format!("rank-1/2 operand expected, got {:?}", self.shape(v)))
        })
    }

    // ---- linear algebra ----

    /// `[n,k] x [k,m] -> [n,m]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a, "matmul")?;
        let (k2, m) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(NumericsError::shape(
                "matmul",
                format!("[{n},{k}] x [{k2},{m}]"),
            ));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let mut out = vec![T::zero(); n * m];
            for i in 0..n {
                let orow = &mut out[i * m..(i + 1) * m];
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == T::zero() {
                        continue;
                    }
                    let brow = &bv[p * m..(p + 1) * m];
                    for (o, &bb) in orow.iter_mut().zip(brow) {
                        *o += x * bb;
                    }
                }
            }
            out
        };
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a.0, b.0), ng))
    }

    /// `[n,k] x [m,k]^T -> [n,m]`
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a, "matmul_t")?;
        let (m, k2) = self.dims(b, "matmul_t")?;
        if k != k2 {
            return Err(NumericsError::shape(
                "matmul_t",
                format!("[{n},{k}] x [{m},{k2}]^T"),
            ));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let mut out = vec![T::zero(); n * m];
            for i in 0..n {
                let arow = &av[i * k..(i + 1) * k];
                for j in 0..m {
                    out[i * m + j] = dot(arow, &bv[j * k..(j + 1) * k]);
                }
            }
            out
        };
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMulT(a.0, b.0), ng))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a, "transpose")?;
        let out = {
            let nodes = self.nodes.borrow();
            let av = nodes[a.0].value.data();
            let mut out = vec![T::zero(); n * m];
            for i in 0..n {
                for j in 0..m {
                    out[j * n + i] = av[i * m + j];
                }
            }
            out
        };
        let ng = self.ng(&[a.0]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Transpose(a.0), ng))
    }

    // ---- elementwise ----

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(NumericsError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn binary(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let shape = self.same_shape(a, b, op)?;
        let data = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .value
                .data()
                .iter()
                .zip(nodes[b.0].value.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        Ok((Tensor::new(shape, data)?, self.ng(&[a.0, b.0])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0), ng))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), ng))
    }

    /// Adds a length-`m` vector to every row of an `[n,m]` matrix.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.dims(a, "add_row")?;
        let shape = self.shape(a);
        let data = {
            let nodes = self.nodes.borrow();
            let bv = nodes[bias.0].value.data();
            if bv.len() != m {
                return Err(NumericsError::shape(
                    "add_row",
                    format!("[{n},{m}] + bias of length {}", bv.len()),
                ));
            }
            let av = nodes[a.0].value.data();
            let mut out = av.to_vec();
            for row in out.chunks_mut(m) {
                for (o, &b) in row.iter_mut().zip(bv) {
                    *o += b;
                }
            }
            out
        };
        let ng = self.ng(&[a.0, bias.0]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a.0, bias.0), ng))
    }

    /// `scale * x + shift`
    pub fn affine(&self, x: Var, scale: T, shift: T) -> Result<Var> {
        let t = self.map(x, |v| scale * v + shift);
        let ng = self.ng(&[x.0]);
        Ok(self.push(t, Op::Affine(x.0, scale), ng))
    }

    pub fn scale(&self, x: Var, s: T) -> Result<Var> {
        self.affine(x, s, T::zero())
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let v = &nodes[x.0].value;
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
            .expect("map preserves shape")
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let t = self.map(x, sigmoid);
        let ng = self.ng(&[x.0]);
        Ok(self.push(t, Op::Sigmoid(x.0), ng))
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v.tanh());
        let ng = self.ng(&[x.0]);
        Ok(self.push(t, Op::Tanh(x.0), ng))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(&[x.0]);
        Ok(self.push(t, Op::Relu(x.0), ng))
    }

    pub fn leaky_relu(&self, x: Var, slope: T) -> Result<Var> {
        let t = self.map(x, |v| if v > T::zero() { v } else { slope * v });
        let ng = self.ng(&[x.0]);
        Ok(self.push(t, Op::LeakyRelu(x.0, slope), ng))
    }

    /// Softmax over the last axis, independently per row.
    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let (_, m) = self.dims(x, "softmax_rows")?;
        let shape = self.shape(x);
        let data = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[x.0].value.data().to_vec();
            for row in out.chunks_mut(m) {
                softmax_in_place(row);
            }
            out
        };
        let ng = self.ng(&[x.0]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SoftmaxRows(x.0), ng))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, m) = self.dims(x, "layer_norm")?;
        let shape = self.shape(x);
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let g = nodes[gamma.0].value.data();
            let b = nodes[beta.0].value.data();
            if g.len() != m || b.len() != m {
                return Err(NumericsError::shape(
                    "layer_norm",
                    format!("width {m} with gain {} / bias {}", g.len(), b.len()),
                ));
            }
            let xv = nodes[x.0].value.data();
            let mut out = vec![T::zero(); n * m];
            let mut xhat = vec![T::zero(); n * m];
            let mut inv_std = vec![T::zero(); n];
            let mf = T::c(m as f64);
            let eps = T::c(eps);
            for r in 0..n {
                let row = &xv[r * m..(r + 1) * m];
                let mean = row.iter().copied().sum::<T>() / mf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                let is = T::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..m {
                    let h = (row[j] - mean) * is;
                    xhat[r * m + j] = h;
                    out[r * m + j] = h * g[j] + b[j];
                }
            }
            (out, xhat, inv_std)
        };
        let ng = self.ng(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Gathers rows of a `[V,d]` table.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table, "embedding")?;
        if ids.is_empty() {
            return Err(NumericsError::shape("embedding", "empty id list"));
        }
        let data = {
            let nodes = self.nodes.borrow();
            let tv = nodes[table.0].value.data();
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(NumericsError::IndexOutOfRange {
                        op: "embedding",
                        index: id,
                        bound: v,
                    });
                }
                out.extend_from_slice(&tv[id * d..(id + 1) * d]);
            }
            out
        };
        let ng = self.ng(&[table.0]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    // ---- losses and reductions ----

    /// Mean squared error over all entries.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let v = {
            let nodes = self.nodes.borrow();
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let s: T = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum();
            s / T::c(av.len() as f64)
        };
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(Tensor::scalar(v), Op::Mse(a.0, b.0), ng))
    }

    /// Mean binary cross-entropy on logits against targets in `[0,1]`.
    pub fn bce_with_logits(&self, x: Var, targets: &[T]) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = nodes[x.0].value.data();
            if xv.len() != targets.len() {
                return Err(NumericsError::shape(
                    "bce_with_logits",
                    format!("{} logits vs {} targets", xv.len(), targets.len()),
                ));
            }
            let s: T = xv
                .iter()
                .zip(targets)
                .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
                .sum();
            s / T::c(xv.len() as f64)
        };
        let ng = self.ng(&[x.0]);
        Ok(self.push(
            Tensor::scalar(v),
            Op::BceLogits {
                x: x.0,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Categorical cross-entropy of `[n,V]` logits against class ids; summed,
    /// or averaged over rows when `mean` is set.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], mean: bool) -> Result<Var> {
        let (n, vsz) = self.dims(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(NumericsError::shape(
                "cross_entropy",
                format!("{n} rows vs {} targets", targets.len()),
            ));
        }
        let v = {
            let nodes = self.nodes.borrow();
            let lv = nodes[logits.0].value.data();
            let mut total = T::zero();
            for (r, &t) in targets.iter().enumerate() {
                if t >= vsz {
                    return Err(NumericsError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: t,
                        bound: vsz,
                    });
                }
                let row = &lv[r * vsz..(r + 1) * vsz];
                total += log_sum_exp(row) - row[t];
            }
            if mean {
                total / T::c(n as f64)
            } else {
                total
            }
        };
        let ng = self.ng(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(v),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                mean,
            },
            ng,
        ))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.nodes.borrow()[x.0].value.data().iter().copied().sum();
        let ng = self.ng(&[x.0]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x.0), ng))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let s = {
            let nodes = self.nodes.borrow();
            let d = nodes[x.0].value.data();
            d.iter().copied().sum::<T>() / T::c(d.len() as f64)
        };
        let ng = self.ng(&[x.0]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x.0), ng))
    }

    /// Sums each row of `[n,m]`, producing `[n,1]`.
    pub fn sum_rows(&self, x: Var) -> Result<Var> {
        let (n, m) = self.dims(x, "sum_rows")?;
        let data = {
            let nodes = self.nodes.borrow();
            nodes[x.0]
                .value
                .data()
                .chunks(m)
                .map(|r| r.iter().copied().sum())
                .collect()
        };
        let ng = self.ng(&[x.0]);
        Ok(self.push(Tensor::new(vec![n, 1], data)?, Op::SumRows(x.0), ng))
    }

    // ---- structural ----

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::shape("concat_rows", "no operands"));
        }
        let (_, m) = self.dims(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        {
            let nodes = self.nodes.borrow();
            for p in parts {
                let (r, c) = dims2(nodes[p.0].value.shape())?;
                if c != m {
                    return Err(NumericsError::shape(
                        "concat_rows",
                        format!("width {c} vs {m}"),
                    ));
                }
                rows += r;
                data.extend_from_slice(nodes[p.0].value.data());
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&ids);
        Ok(self.push(Tensor::new(vec![rows, m], data)?, Op::ConcatRows(ids), ng))
    }

    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.dims(x, "slice_rows")?;
        if start >= end || end > n {
            return Err(NumericsError::shape(
                "slice_rows",
                format!("rows {start}..{end} of {n}"),
            ));
        }
        let data = self.nodes.borrow()[x.0].value.data()[start * m..end * m].to_vec();
        let ng = self.ng(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![end - start, m], data)?,
            Op::SliceRows { x: x.0, start },
            ng,
        ))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::shape("concat_cols", "no operands"));
        }
        let (n, _) = self.dims(parts[0], "concat_cols")?;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| self.dims(*p, "concat_cols").map(|(r, c)| (r, c)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .map(|(r, c)| if r == n { Ok(c) } else { Err(NumericsError::shape("concat_cols", format!("rows {r} vs {n}"))) })
            .collect::<Result<Vec<_>>>()?;
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); n * total];
        {
            let nodes = self.nodes.borrow();
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let pv = nodes[p.0].value.data();
                for r in 0..n {
                    data[r * total + off..r * total + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
                }
                off += w;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&ids);
        Ok(self.push(Tensor::new(vec![n, total], data)?, Op::ConcatCols(ids), ng))
    }

    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.dims(x, "slice_cols")?;
        if start >= end || end > m {
            return Err(NumericsError::shape(
                "slice_cols",
                format!("cols {start}..{end} of {m}"),
            ));
        }
        let w = end - start;
        let data = {
            let nodes = self.nodes.borrow();
            let xv = nodes[x.0].value.data();
            let mut out = Vec::with_capacity(n * w);
            for r in 0..n {
                out.extend_from_slice(&xv[r * m + start..r * m + end]);
            }
            out
        };
        let ng = self.ng(&[x.0]);
        Ok(self.push(Tensor::new(vec![n, w], data)?, Op::SliceCols { x: x.0, start }, ng))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let ng = self.ng(&[x.0]);
        Ok(self.push(t, Op::Reshape(x.0), ng))
    }

    // ---- backward ----

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(NumericsError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop_node(&nodes, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params.borrow().clone(),
        })
    }
}

fn acc<'g, T: Float>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    i: usize,
) -> Option<&'g mut Vec<T>> {
    if !nodes[i].needs_grad {
        return None;
    }
    let n = nodes[i].value.numel();
    Some(grads[i].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop_node<T: Float>(nodes: &[Node<T>], idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[idx];
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (n, k) = dims2(nodes[*a].value.shape()).unwrap();
            let (_, m) = dims2(nodes[*b].value.shape()).unwrap();
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if let Some(da) = acc(nodes, grads, *a) {
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        da[i * k + p] += dot(grow, &bv[p * m..(p + 1) * m]);
                    }
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let x = av[i * k + p];
                        if x == T::zero() {
                            continue;
                        }
                        for (d, &gg) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                            *d += x * gg;
                        }
                    }
                }
            }
        }
        Op::MatMulT(a, b) => {
            let (n, k) = dims2(nodes[*a].value.shape()).unwrap();
            let (m, _) = dims2(nodes[*b].value.shape()).unwrap();
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if let Some(da) = acc(nodes, grads, *a) {
                for i in 0..n {
                    let drow = &mut da[i * k..(i + 1) * k];
                    for j in 0..m {
                        let gg = g[i * m + j];
                        if gg == T::zero() {
                            continue;
                        }
                        for (d, &bb) in drow.iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                            *d += gg * bb;
                        }
                    }
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for i in 0..n {
                    let arow = &av[i * k..(i + 1) * k];
                    for j in 0..m {
                        let gg = g[i * m + j];
                        if gg == T::zero() {
                            continue;
                        }
                        for (d, &aa) in db[j * k..(j + 1) * k].iter_mut().zip(arow) {
                            *d += gg * aa;
                        }
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (n, m) = dims2(nodes[*a].value.shape()).unwrap();
            if let Some(da) = acc(nodes, grads, *a) {
                for i in 0..n {
                    for j in 0..m {
                        da[i * m + j] += g[j * n + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = acc(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = acc(nodes, grads, *b) {
                add_into(db, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = acc(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for (d, &gg) in db.iter_mut().zip(g) {
                    *d -= gg;
                }
            }
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if let Some(da) = acc(nodes, grads, *a) {
                for ((d, &gg), &bb) in da.iter_mut().zip(g).zip(bv) {
                    *d += gg * bb;
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for ((d, &gg), &aa) in db.iter_mut().zip(g).zip(av) {
                    *d += gg * aa;
                }
            }
        }
        Op::AddRow(a, bias) => {
            if let Some(da) = acc(nodes, grads, *a) {
                add_into(da, g);
            }
            let m = nodes[*bias].value.numel();
            if let Some(db) = acc(nodes, grads, *bias) {
                for row in g.chunks(m) {
                    add_into(db, row);
                }
            }
        }
        Op::Affine(x, s) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for (d, &gg) in dx.iter_mut().zip(g) {
                    *d += *s * gg;
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((d, &gg), &y) in dx.iter_mut().zip(g).zip(out) {
                    *d += gg * y * (T::one() - y);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((d, &gg), &y) in dx.iter_mut().zip(g).zip(out) {
                    *d += gg * (T::one() - y * y);
                }
            }
        }
        Op::Relu(x) => {
            let xv = nodes[*x].value.data();
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xv) {
                    if v > T::zero() {
                        *d += gg;
                    }
                }
            }
        }
        Op::LeakyRelu(x, slope) => {
            let xv = nodes[*x].value.data();
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xv) {
                    *d += if v > T::zero() { gg } else { *slope * gg };
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let (_, m) = dims2(node.value.shape()).unwrap();
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((drow, grow), yrow) in dx.chunks_mut(m).zip(g.chunks(m)).zip(out.chunks(m)) {
                    let s = dot(grow, yrow);
                    for j in 0..m {
                        drow[j] += yrow[j] * (grow[j] - s);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (n, m) = dims2(node.value.shape()).unwrap();
            let gv = nodes[*gamma].value.data();
            if let Some(dg) = acc(nodes, grads, *gamma) {
                for r in 0..n {
                    for j in 0..m {
                        dg[j] += g[r * m + j] * xhat[r * m + j];
                    }
                }
            }
            if let Some(db) = acc(nodes, grads, *beta) {
                for row in g.chunks(m) {
                    add_into(db, row);
                }
            }
            if let Some(dx) = acc(nodes, grads, *x) {
                let mf = T::c(m as f64);
                let mut dxhat = vec![T::zero(); m];
                for r in 0..n {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..m {
                        dxhat[j] = g[r * m + j] * gv[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[r * m + j];
                    }
                    let k = inv_std[r] / mf;
                    for j in 0..m {
                        dx[r * m + j] += k * (mf * dxhat[j] - s1 - xhat[r * m + j] * s2);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let (_, d) = dims2(nodes[*table].value.shape()).unwrap();
            if let Some(dt) = acc(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::Mse(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let k = g[0] * T::c(2.0 / av.len() as f64);
            if let Some(da) = acc(nodes, grads, *a) {
                for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                    *d += k * (x - y);
                }
            }
            if let Some(db) = acc(nodes, grads, *b) {
                for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                    *d -= k * (x - y);
                }
            }
        }
        Op::BceLogits { x, targets } => {
            let xv = nodes[*x].value.data();
            let k = g[0] / T::c(xv.len() as f64);
            if let Some(dx) = acc(nodes, grads, *x) {
                for ((d, &z), &t) in dx.iter_mut().zip(xv).zip(targets) {
                    *d += k * (sigmoid(z) - t);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            mean,
        } => {
            let (n, vsz) = dims2(nodes[*logits].value.shape()).unwrap();
            let lv = nodes[*logits].value.data();
            let k = if *mean { g[0] / T::c(n as f64) } else { g[0] };
            if let Some(dl) = acc(nodes, grads, *logits) {
                let mut p = vec![T::zero(); vsz];
                for (r, &t) in targets.iter().enumerate() {
                    p.copy_from_slice(&lv[r * vsz..(r + 1) * vsz]);
                    softmax_in_place(&mut p);
                    p[t] -= T::one();
                    for (d, &pp) in dl[r * vsz..(r + 1) * vsz].iter_mut().zip(&p) {
                        *d += k * pp;
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                if let Some(dp) = acc(nodes, grads, p) {
                    add_into(dp, &g[off..off + len]);
                }
                off += len;
            }
        }
        Op::SliceRows { x, start } => {
            let (_, m) = dims2(nodes[*x].value.shape()).unwrap();
            if let Some(dx) = acc(nodes, grads, *x) {
                add_into(&mut dx[start * m..start * m + g.len()], g);
            }
        }
        Op::ConcatCols(parts) => {
            let (n, total) = dims2(node.value.shape()).unwrap();
            let mut off = 0;
            for &p in parts {
                let (_, w) = dims2(nodes[p].value.shape()).unwrap();
                if let Some(dp) = acc(nodes, grads, p) {
                    for r in 0..n {
                        add_into(
                            &mut dp[r * w..(r + 1) * w],
                            &g[r * total + off..r * total + off + w],
                        );
                    }
                }
                off += w;
            }
        }
        Op::SliceCols { x, start } => {
            let (n, m) = dims2(nodes[*x].value.shape()).unwrap();
            let (_, w) = dims2(node.value.shape()).unwrap();
            if let Some(dx) = acc(nodes, grads, *x) {
                for r in 0..n {
                    add_into(
                        &mut dx[r * m + start..r * m + start + w],
                        &g[r * w..(r + 1) * w],
                    );
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean(x) => {
            let k = g[0] / T::c(nodes[*x].value.numel() as f64);
            if let Some(dx) = acc(nodes, grads, *x) {
                for d in dx.iter_mut() {
                    *d += k;
                }
            }
        }
        Op::SumRows(x) => {
            let (_, m) = dims2(nodes[*x].value.shape()).unwrap();
            if let Some(dx) = acc(nodes, grads, *x) {
                for (row, &gg) in dx.chunks_mut(m).zip(g) {
                    for d in row {
                        *d += gg;
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(dx) = acc(nodes, grads, *x) {
                add_into(dx, g);
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Float> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: IndexMap<String, usize>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to any node; `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradients for every trainable parameter of `stores`; parameters the
    /// loss never touched get zeros. Frozen parameters are omitted.
    pub fn params_for(&self, stores: &[&ParamStore<T>]) -> GradMap<T> {
        let mut out = GradMap::new();
        for store in stores {
            for name in store.trainable_names() {
                let t = store.get(name).expect("listed name");
                let g = self
                    .params
                    .get(name)
                    .and_then(|&id| self.grads[id].clone())
                    .map(|g| Tensor::new(t.shape().to_vec(), g).expect("grad shape"))
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                out.insert(name.to_string(), g);
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    // eight independent partial sums so the loop vectorizes
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

#[inline]
fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub(crate) fn log_sum_exp<T: Float>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}
