//! The reverse-mode tape.
//!
//! Every op appends one node holding its forward value and enough cached
//! state for its backward rule. Nodes are only ever appended, so node ids are
//! a topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Ops treat the trailing dimension as columns and flatten every leading
//! dimension into rows. The only broadcast is [`Tape::add_bias`].

use std::collections::HashMap;

use super::{ParamId, ParamStore, Real, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Mask(Var, Vec<bool>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<T>,
    },
    MeanPool {
        x: Var,
        batch: usize,
    },
    GatherRows(Var, Vec<usize>),
    CombineRows(Vec<(Var, Vec<usize>)>),
    GatherElems(Var, Vec<(usize, usize)>),
    RowScale(Var, Var),
    ColSum(Var),
    CvSquared(Var),
    Sum(Var),
    StopGrad,
    Reshape(Var),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

impl<T> Node<T> {
    fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }
    fn rows(&self) -> usize {
        self.value.len() / self.cols()
    }
}

/// Per-pass record of operations over one immutable [`ParamStore`].
pub struct Tape<'s, T: Real> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    perturb: Option<(ParamId, usize, f64)>,
    flops: u64,
    held: Vec<Vec<T>>,
    frozen: Option<Vec<Vec<T>>>,
}

impl<'s, T: Real> Tape<'s, T> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            bound: HashMap::new(),
            perturb: None,
            flops: 0,
            held: Vec::new(),
            frozen: None,
        }
    }

    /// A tape with no parameter store; leaves come from [`Tape::leaf`].
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            bound: HashMap::new(),
            perturb: None,
            flops: 0,
            held: Vec::new(),
            frozen: None,
        }
    }

    /// Binds parameter `id` with `delta` added to element `index`, in `T`
    /// precision. Used by the finite-difference checker.
    pub fn with_perturbation(store: &'s ParamStore, id: ParamId, index: usize, delta: f64) -> Self {
        let mut t = Self::new(store);
        t.perturb = Some((id, index, delta));
        t
    }

    /// Makes the i-th [`Tape::stop_grad`] call return `values[i]` instead of
    /// its input. Finite differences over a graph with stop-gradients hold
    /// those terms at their unperturbed values this way.
    pub fn freeze_stop_grads(mut self, values: Vec<Vec<T>>) -> Self {
        self.frozen = Some(values);
        self
    }

    /// Values produced by every [`Tape::stop_grad`] call so far, in order.
    pub fn stop_grad_values(&self) -> &[Vec<T>] {
        &self.held
    }

    /// Matmul FLOPs (2·m·n·k per product) executed so far.
    pub fn matmul_flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Binds a store parameter (once per tape; later calls return the same node).
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::Contract("tape has no parameter store".into()))?;
        let t = store.get(id);
        let mut value: Vec<T> = t.data().iter().map(|&x| T::of_f32(x)).collect();
        if let Some((pid, idx, delta)) = self.perturb {
            if pid == id {
                value[idx] = T::of_f64(value[idx].as_f64() + delta);
            }
        }
        let v = self.push("param", t.shape().to_vec(), value, Op::Leaf, t.requires_grad)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    /// A free leaf; its gradient is readable through [`Gradients::wrt`].
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        let value = t.data().iter().map(|&x| T::of_f32(x)).collect();
        self.push("leaf", t.shape().to_vec(), value, Op::Leaf, requires_grad)
    }

    /// A constant input.
    pub fn input(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    /// A constant given directly in `T` precision.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("constant shape {shape:?} vs {} values", value.len())));
        }
        self.push("constant", shape, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0].as_f64()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.iter().map(|x| x.as_f32()).collect())
            .expect("node shape is valid")
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[..., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if nb.shape.len() != 2 || na.cols() != nb.shape[0] {
            return Err(Error::Dimension(format!("matmul {:?} x {:?}", na.shape, nb.shape)));
        }
        let (m, k, n) = (na.rows(), na.cols(), nb.shape[1]);
        let bf: Vec<f64> = nb.value.iter().map(|x| x.as_f64()).collect();
        let mut out = vec![T::zero(); m * n];
        let mut acc = vec![0f64; n];
        for i in 0..m {
            acc.fill(0.0);
            let arow = &na.value[i * k..(i + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                let av = av.as_f64();
                let brow = &bf[p * n..(p + 1) * n];
                for (s, &bv) in acc.iter_mut().zip(brow) {
                    *s += av * bv;
                }
            }
            for (o, &s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
                *o = T::of_f64(s);
            }
        }
        let mut shape = na.shape.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        self.flops += 2 * (m * n * k) as u64;
        self.push("matmul", shape, out, Op::MatMul(a, b), rg)
    }

    /// `a[..., k] · b[n, k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if nb.shape.len() != 2 || na.cols() != nb.shape[1] {
            return Err(Error::Dimension(format!("matmul_bt {:?} x {:?}ᵀ", na.shape, nb.shape)));
        }
        let (m, k, n) = (na.rows(), na.cols(), nb.shape[0]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &na.value[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &nb.value[j * k..(j + 1) * k];
                out[i * n + j] = T::of_f64(dot(arow, brow));
            }
        }
        let mut shape = na.shape.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        self.flops += 2 * (m * n * k) as u64;
        self.push("matmul_bt", shape, out, Op::MatMulBt(a, b), rg)
    }

    /// `x[..., c] + b[c]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (nx, nb) = (self.node(x), self.node(b));
        let c = nx.cols();
        if nb.value.len() != c {
            return Err(Error::Dimension(format!("bias {:?} for {:?}", nb.shape, nx.shape)));
        }
        let out = nx
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| v + nb.value[i % c])
            .collect();
        let (shape, rg) = (nx.shape.clone(), self.rg(&[x, b]));
        self.push("add_bias", shape, out, Op::AddBias(x, b), rg)
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.value.len() != nb.value.len() || na.cols() != nb.cols() {
            return Err(Error::Dimension(format!("{what} {:?} vs {:?}", na.shape, nb.shape)));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let out = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let (shape, rg) = (na.shape.clone(), self.rg(&[a, b]));
        self.push(name, shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let nx = self.node(x);
        let cc = T::of_f64(c);
        let out = nx.value.iter().map(|&v| v * cc).collect();
        let (shape, rg) = (nx.shape.clone(), nx.requires_grad);
        self.push("scale", shape, out, Op::Scale(x, c), rg)
    }

    // ---- nonlinearities -------------------------------------------------

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let nx = self.node(x);
        let out = nx.value.iter().map(|&v| T::of_f64(gelu(v.as_f64()))).collect();
        let (shape, rg) = (nx.shape.clone(), nx.requires_grad);
        self.push("gelu", shape, out, Op::Gelu(x), rg)
    }

    /// Per-row normalisation (population variance, eps 1e-5) then affine.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let nx = self.node(x);
        let d = nx.cols();
        if self.node(gamma).value.len() != d || self.node(beta).value.len() != d {
            return Err(Error::Dimension(format!("layernorm affine params must have {d} entries")));
        }
        let (g, b) = (&self.node(gamma).value, &self.node(beta).value);
        let rows = nx.rows();
        let mut xhat = vec![0f64; rows * d];
        let mut rstd = vec![0f64; rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &nx.value[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j].as_f64() - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = T::of_f64(h * g[j].as_f64() + b[j].as_f64());
            }
        }
        let (shape, rg) = (nx.shape.clone(), self.rg(&[x, gamma, beta]));
        self.push("layernorm", shape, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Softmax over the trailing axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let nx = self.node(x);
        let c = nx.cols();
        let mut out = vec![T::zero(); nx.value.len()];
        for (src, dst) in nx.value.chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(src, dst);
        }
        let (shape, rg) = (nx.shape.clone(), nx.requires_grad);
        self.push("softmax", shape, out, Op::Softmax(x), rg)
    }

    /// Zeroes every entry whose mask bit is false. The mask is a constant.
    pub fn mask(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let nx = self.node(x);
        if mask.len() != nx.value.len() {
            return Err(Error::Dimension("mask length".into()));
        }
        let out = nx
            .value
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v } else { T::zero() })
            .collect();
        let (shape, rg) = (nx.shape.clone(), nx.requires_grad);
        self.push("mask", shape, out, Op::Mask(x, mask), rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let nl = self.node(logits);
        let (rows, c) = (nl.rows(), nl.cols());
        if labels.len() != rows {
            return Err(Error::Input(format!("{} labels for {rows} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0f64; rows * c];
        let mut total = 0f64;
        for r in 0..rows {
            let row = &nl.value[r * c..(r + 1) * c];
            let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[labels[r]].as_f64();
            for j in 0..c {
                probs[r * c + j] = (row[j].as_f64() - lse).exp();
            }
        }
        let rg = nl.requires_grad;
        let value = vec![T::of_f64(total / rows as f64)];
        self.push(
            "cross_entropy",
            vec![1],
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention core:
    /// `softmax(Q_h K_hᵀ / √d_head) V_h` per batch item and head, heads
    /// concatenated. `q`, `k`, `v` are `[batch·T, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        self.same_shape("attention q/k", q, k)?;
        self.same_shape("attention q/v", q, v)?;
        let nq = self.node(q);
        let (rows, d) = (nq.rows(), nq.cols());
        if batch == 0 || rows % batch != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention over {rows}x{d} with batch {batch}, heads {heads}"
            )));
        }
        let t = rows / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (&nq.value, &self.node(k).value, &self.node(v).value);
        let mut probs = vec![T::zero(); batch * heads * t * t];
        let mut out = vec![T::zero(); rows * d];
        let mut srow = vec![T::zero(); t];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let qi = &qv[(b * t + i) * d + off..(b * t + i) * d + off + dh];
                    for j in 0..t {
                        let kj = &kv[(b * t + j) * d + off..(b * t + j) * d + off + dh];
                        srow[j] = T::of_f64(dot(qi, kj) * scale);
                    }
                    let p = &mut probs[((b * heads + h) * t + i) * t..((b * heads + h) * t + i + 1) * t];
                    softmax_row(&srow, p);
                    for c in 0..dh {
                        let mut s = 0f64;
                        for j in 0..t {
                            s += p[j].as_f64() * vv[(b * t + j) * d + off + c].as_f64();
                        }
                        out[(b * t + i) * d + off + c] = T::of_f64(s);
                    }
                }
            }
        }
        let shape = nq.shape.clone();
        let rg = self.rg(&[q, k, v]);
        self.flops += 4 * (batch * t * t * d) as u64;
        self.push("attention", shape, out, Op::Attention { q, k, v, batch, heads, probs }, rg)
    }

    // ---- reductions and indexing ---------------------------------------

    /// Mean over tokens: `[batch·T, d] -> [batch, d]`.
    pub fn mean_pool(&mut self, x: Var, batch: usize) -> Result<Var> {
        let nx = self.node(x);
        let (rows, d) = (nx.rows(), nx.cols());
        if batch == 0 || rows % batch != 0 {
            return Err(Error::Dimension(format!("mean_pool {rows} rows into {batch}")));
        }
        let t = rows / batch;
        let mut out = vec![T::zero(); batch * d];
        for b in 0..batch {
            for j in 0..d {
                let s: f64 = (0..t).map(|i| nx.value[(b * t + i) * d + j].as_f64()).sum();
                out[b * d + j] = T::of_f64(s / t as f64);
            }
        }
        let rg = nx.requires_grad;
        self.push("mean_pool", vec![batch, d], out, Op::MeanPool { x, batch }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let nx = self.node(x);
        let (rows, c) = (nx.rows(), nx.cols());
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::Dimension(format!("gather_rows index out of {rows} rows or empty")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&nx.value[i * c..(i + 1) * c]);
        }
        let rg = nx.requires_grad;
        self.push("gather_rows", vec![idx.len(), c], out, Op::GatherRows(x, idx.to_vec()), rg)
    }

    /// Sums each part's rows into the listed output rows of a zero tensor of
    /// `shape`. Parts are added in the order given.
    pub fn combine_rows(&mut self, shape: Vec<usize>, parts: Vec<(Var, Vec<usize>)>) -> Result<Var> {
        let c = *shape
            .last()
            .ok_or_else(|| Error::Dimension("combine_rows: empty shape".into()))?;
        let n: usize = shape.iter().product();
        let rows = n / c;
        let mut out = vec![T::zero(); n];
        for (v, idx) in &parts {
            let nv = self.node(*v);
            if nv.cols() != c || nv.rows() != idx.len() || idx.iter().any(|&i| i >= rows) {
                return Err(Error::Dimension(format!("combine_rows part {:?} into {shape:?}", nv.shape)));
            }
            for (r, &dst) in idx.iter().enumerate() {
                for j in 0..c {
                    out[dst * c + j] = out[dst * c + j] + nv.value[r * c + j];
                }
            }
        }
        let vars: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        let rg = self.rg(&vars);
        self.push("combine_rows", shape, out, Op::CombineRows(parts), rg)
    }

    /// Picks `x[row, col]` for each pair, giving a `[m]` vector.
    pub fn gather_elems(&mut self, x: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let nx = self.node(x);
        let (rows, c) = (nx.rows(), nx.cols());
        if pairs.is_empty() || pairs.iter().any(|&(r, j)| r >= rows || j >= c) {
            return Err(Error::Dimension("gather_elems index out of range or empty".into()));
        }
        let out = pairs.iter().map(|&(r, j)| nx.value[r * c + j]).collect();
        let rg = nx.requires_grad;
        self.push("gather_elems", vec![pairs.len()], out, Op::GatherElems(x, pairs.to_vec()), rg)
    }

    /// Multiplies row `r` of `x` by `s[r]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (nx, ns) = (self.node(x), self.node(s));
        let (rows, c) = (nx.rows(), nx.cols());
        if ns.value.len() != rows {
            return Err(Error::Dimension(format!("row_scale {} scales for {rows} rows", ns.value.len())));
        }
        let out = nx
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| v * ns.value[i / c])
            .collect();
        let (shape, rg) = (nx.shape.clone(), self.rg(&[x, s]));
        self.push("row_scale", shape, out, Op::RowScale(x, s), rg)
    }

    /// Column sums: `[rows, c] -> [c]`.
    pub fn col_sum(&mut self, x: Var) -> Result<Var> {
        let nx = self.node(x);
        let c = nx.cols();
        let mut acc = vec![0f64; c];
        for row in nx.value.chunks(c) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v.as_f64();
            }
        }
        let out = acc.into_iter().map(T::of_f64).collect();
        let rg = nx.requires_grad;
        self.push("col_sum", vec![c], out, Op::ColSum(x), rg)
    }

    /// `(std(x) / mean(x))²` with population standard deviation.
    pub fn cv_squared(&mut self, x: Var) -> Result<Var> {
        let nx = self.node(x);
        let n = nx.value.len() as f64;
        let mean = nx.value.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        if mean == 0.0 {
            return Err(Error::DegenerateRouting);
        }
        let var = nx.value.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
        let rg = nx.requires_grad;
        self.push("cv_squared", vec![1], vec![T::of_f64(var / (mean * mean))], Op::CvSquared(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let nx = self.node(x);
        let s: f64 = nx.value.iter().map(|v| v.as_f64()).sum();
        let rg = nx.requires_grad;
        self.push("sum", vec![1], vec![T::of_f64(s)], Op::Sum(x), rg)
    }

    /// Identity forward; the backward rule emits nothing.
    pub fn stop_grad(&mut self, x: Var) -> Result<Var> {
        let nx = self.node(x);
        let shape = nx.shape.clone();
        let i = self.held.len();
        let value = match &self.frozen {
            Some(f) => match f.get(i) {
                Some(v) if v.len() == nx.value.len() => v.clone(),
                _ => return Err(Error::Contract(format!("no frozen value for stop-gradient #{i}"))),
            },
            None => nx.value.clone(),
        };
        self.held.push(value.clone());
        self.push("stop_grad", shape, value, Op::StopGrad, false)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let nx = self.node(x);
        if shape.iter().product::<usize>() != nx.value.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("reshape {:?} to {shape:?}", nx.shape)));
        }
        let (value, rg) = (nx.value.clone(), nx.requires_grad);
        self.push("reshape", shape, value, Op::Reshape(x), rg)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let params = self
            .bound
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect::<HashMap<_, _>>();
        Ok(Gradients { nodes: grads, params })
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let n = &self.nodes[v.0];
        if !n.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]);
        f(slot);
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (na, nb) = (self.node(*a), self.node(*b));
                let (m, k, n) = (na.rows(), na.cols(), nb.shape[1]);
                self.send(grads, *a, |ga| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let d = dot(grow, &nb.value[p * n..(p + 1) * n]);
                            ga[r * k + p] = ga[r * k + p] + T::of_f64(d);
                        }
                    }
                });
                self.send(grads, *b, |gb| {
                    let mut acc = vec![0f64; k * n];
                    for r in 0..m {
                        for p in 0..k {
                            let av = na.value[r * k + p].as_f64();
                            for (s, gv) in acc[p * n..(p + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *s += av * gv.as_f64();
                            }
                        }
                    }
                    for (o, s) in gb.iter_mut().zip(acc) {
                        *o = *o + T::of_f64(s);
                    }
                });
            }
            Op::MatMulBt(a, b) => {
                let (na, nb) = (self.node(*a), self.node(*b));
                let (m, k, n) = (na.rows(), na.cols(), nb.shape[0]);
                self.send(grads, *a, |ga| {
                    let mut acc = vec![0f64; k];
                    for r in 0..m {
                        acc.fill(0.0);
                        for j in 0..n {
                            let gv = g[r * n + j].as_f64();
                            for (s, bv) in acc.iter_mut().zip(&nb.value[j * k..(j + 1) * k]) {
                                *s += gv * bv.as_f64();
                            }
                        }
                        for (o, s) in ga[r * k..(r + 1) * k].iter_mut().zip(&acc) {
                            *o = *o + T::of_f64(*s);
                        }
                    }
                });
                self.send(grads, *b, |gb| {
                    let mut acc = vec![0f64; n * k];
                    for r in 0..m {
                        for j in 0..n {
                            let gv = g[r * n + j].as_f64();
                            for (s, av) in acc[j * k..(j + 1) * k].iter_mut().zip(&na.value[r * k..(r + 1) * k]) {
                                *s += gv * av.as_f64();
                            }
                        }
                    }
                    for (o, s) in gb.iter_mut().zip(acc) {
                        *o = *o + T::of_f64(s);
                    }
                });
            }
            Op::AddBias(x, b) => {
                let c = node.cols();
                self.send(grads, *x, |gx| add_into(gx, g));
                self.send(grads, *b, |gb| {
                    let mut acc = vec![0f64; c];
                    for row in g.chunks(c) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v.as_f64();
                        }
                    }
                    for (o, s) in gb.iter_mut().zip(acc) {
                        *o = *o + T::of_f64(s);
                    }
                });
            }
            Op::Add(a, b) => {
                self.send(grads, *a, |ga| add_into(ga, g));
                self.send(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, |ga| add_into(ga, g));
                self.send(grads, *b, |gb| {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o = *o - v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.node(*a).value, &self.node(*b).value);
                self.send(grads, *a, |ga| {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *o = *o + gv * y;
                    }
                });
                self.send(grads, *b, |gb| {
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(va) {
                        *o = *o + gv * x;
                    }
                });
            }
            Op::Scale(x, c) => {
                let cc = T::of_f64(*c);
                self.send(grads, *x, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o = *o + v * cc;
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = &self.node(*x).value;
                self.send(grads, *x, |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        *o = *o + T::of_f64(gv.as_f64() * gelu_grad(xv.as_f64()));
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = node.cols();
                let rows = node.rows();
                let gam = &self.node(*gamma).value;
                self.send(grads, *x, |gx| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let dxh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a.as_f64() * b.as_f64()).collect();
                        let m1 = dxh.iter().sum::<f64>() / d as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            let v = rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                            gx[r * d + j] = gx[r * d + j] + T::of_f64(v);
                        }
                    }
                });
                self.send(grads, *gamma, |gg| {
                    let mut acc = vec![0f64; d];
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += g[r * d + j].as_f64() * xhat[r * d + j];
                        }
                    }
                    for (o, s) in gg.iter_mut().zip(acc) {
                        *o = *o + T::of_f64(s);
                    }
                });
                self.send(grads, *beta, |gb| {
                    let mut acc = vec![0f64; d];
                    for row in g.chunks(d) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v.as_f64();
                        }
                    }
                    for (o, s) in gb.iter_mut().zip(acc) {
                        *o = *o + T::of_f64(s);
                    }
                });
            }
            Op::Softmax(x) => {
                let c = node.cols();
                let y = &node.value;
                self.send(grads, *x, |gx| {
                    for ((gr, yr), or) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let s = dot(gr, yr);
                        for j in 0..c {
                            let v = yr[j].as_f64() * (gr[j].as_f64() - s);
                            or[j] = or[j] + T::of_f64(v);
                        }
                    }
                });
            }
            Op::Mask(x, mask) => {
                self.send(grads, *x, |gx| {
                    for ((o, &gv), &m) in gx.iter_mut().zip(g).zip(mask) {
                        if m {
                            *o = *o + gv;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let nl = self.node(*logits);
                let (rows, c) = (nl.rows(), nl.cols());
                let scale = g[0].as_f64() / rows as f64;
                self.send(grads, *logits, |gl| {
                    for r in 0..rows {
                        for j in 0..c {
                            let t = if labels[r] == j { 1.0 } else { 0.0 };
                            let v = (probs[r * c + j] - t) * scale;
                            gl[r * c + j] = gl[r * c + j] + T::of_f64(v);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, batch, heads, probs } => {
                self.attention_backward(*q, *k, *v, *batch, *heads, probs, g, grads);
            }
            Op::MeanPool { x, batch } => {
                let nx = self.node(*x);
                let (rows, d) = (nx.rows(), nx.cols());
                let t = rows / batch;
                let inv = T::of_f64(1.0 / t as f64);
                self.send(grads, *x, |gx| {
                    for r in 0..rows {
                        let b = r / t;
                        for j in 0..d {
                            gx[r * d + j] = gx[r * d + j] + g[b * d + j] * inv;
                        }
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let c = node.cols();
                self.send(grads, *x, |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[src * c + j] = gx[src * c + j] + g[r * c + j];
                        }
                    }
                });
            }
            Op::CombineRows(parts) => {
                let c = node.cols();
                for (v, idx) in parts {
                    self.send(grads, *v, |gv| {
                        for (r, &dst) in idx.iter().enumerate() {
                            for j in 0..c {
                                gv[r * c + j] = gv[r * c + j] + g[dst * c + j];
                            }
                        }
                    });
                }
            }
            Op::GatherElems(x, pairs) => {
                let c = self.node(*x).cols();
                self.send(grads, *x, |gx| {
                    for (m, &(r, j)) in pairs.iter().enumerate() {
                        gx[r * c + j] = gx[r * c + j] + g[m];
                    }
                });
            }
            Op::RowScale(x, s) => {
                let c = node.cols();
                let (vx, vs) = (&self.node(*x).value, &self.node(*s).value);
                self.send(grads, *x, |gx| {
                    for (i, o) in gx.iter_mut().enumerate() {
                        *o = *o + g[i] * vs[i / c];
                    }
                });
                self.send(grads, *s, |gs| {
                    for (r, o) in gs.iter_mut().enumerate() {
                        let d = dot(&g[r * c..(r + 1) * c], &vx[r * c..(r + 1) * c]);
                        *o = *o + T::of_f64(d);
                    }
                });
            }
            Op::ColSum(x) => {
                let c = node.value.len();
                self.send(grads, *x, |gx| {
                    for (i, o) in gx.iter_mut().enumerate() {
                        *o = *o + g[i % c];
                    }
                });
            }
            Op::CvSquared(x) => {
                let vx = &self.node(*x).value;
                let n = vx.len() as f64;
                let mean = vx.iter().map(|v| v.as_f64()).sum::<f64>() / n;
                let var = vx.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
                let g0 = g[0].as_f64();
                self.send(grads, *x, |gx| {
                    for (o, xv) in gx.iter_mut().zip(vx) {
                        let d = 2.0 / (n * mean * mean) * ((xv.as_f64() - mean) - var / mean);
                        *o = *o + T::of_f64(g0 * d);
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.send(grads, *x, |gx| {
                    for o in gx.iter_mut() {
                        *o = *o + g0;
                    }
                });
            }
            Op::Reshape(x) => {
                self.send(grads, *x, |gx| add_into(gx, g));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let nq = self.node(q);
        let (rows, d) = (nq.rows(), nq.cols());
        let t = rows / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (&nq.value, &self.node(k).value, &self.node(v).value);
        let mut dq = vec![0f64; rows * d];
        let mut dk = vec![0f64; rows * d];
        let mut dv = vec![0f64; rows * d];
        let mut ds = vec![0f64; t];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let p = &probs[((b * heads + h) * t + i) * t..((b * heads + h) * t + i + 1) * t];
                    let gi = &g[(b * t + i) * d + off..(b * t + i) * d + off + dh];
                    // dP_ij = <dO_i, V_j>; dV_j += P_ij dO_i
                    let mut row_dot = 0f64;
                    for j in 0..t {
                        let vj = &vv[(b * t + j) * d + off..(b * t + j) * d + off + dh];
                        let dp = dot(gi, vj);
                        ds[j] = dp;
                        row_dot += dp * p[j].as_f64();
                        let pij = p[j].as_f64();
                        for c in 0..dh {
                            dv[(b * t + j) * d + off + c] += pij * gi[c].as_f64();
                        }
                    }
                    for j in 0..t {
                        let dsj = p[j].as_f64() * (ds[j] - row_dot) * scale;
                        if dsj == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            dq[(b * t + i) * d + off + c] += dsj * kv[(b * t + j) * d + off + c].as_f64();
                            dk[(b * t + j) * d + off + c] += dsj * qv[(b * t + i) * d + off + c].as_f64();
                        }
                    }
                }
            }
        }
        for (var, acc) in [(q, dq), (k, dk), (v, dv)] {
            self.send(grads, var, |gx| {
                for (o, s) in gx.iter_mut().zip(acc) {
                    *o = *o + T::of_f64(s);
                }
            });
        }
    }
}

/// Gradients from one [`Tape::backward`] call.
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a bound parameter; `None` if unbound or unreached.
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).and_then(|v| self.nodes[v.0].as_deref())
    }

    /// Gradient for any node; `None` if unreached.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].as_deref()
    }

    /// Gradient for any node as f64, zeros when unreached.
    pub fn wrt_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        match self.wrt(v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; len],
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o = *o + v;
    }
}

fn softmax_row<T: Real>(src: &[T], dst: &mut [T]) {
    let m = src.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0f64;
    let e: Vec<f64> = src
        .iter()
        .map(|v| {
            let x = (v.as_f64() - m).exp();
            z += x;
            x
        })
        .collect();
    for (o, x) in dst.iter_mut().zip(e) {
        *o = T::of_f64(x / z);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
