//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations append nodes in
//! evaluation order, so the node list is always topologically sorted and the
//! backward sweep is a single reverse scan that touches each node once.
//!
//! Gradients of tensors that require them are accumulated across repeated
//! [`Tape::backward`] calls until [`Tape::zero_grad`] is invoked.

use std::fmt;

use crate::error::{Error, Result};

/// Row-major dense array. A scalar has the empty shape `[]`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(op, format!("expected rank-2 tensor, got shape {s:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `backward` receives the parent values, the forward output and the upstream
/// gradient, and returns one gradient buffer per parent (same length as the
/// parent's data).
pub trait BackwardRule: Send + Sync {
    fn backward(&self, parents: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Norm(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Linear { x: Var, w: Var, b: Var },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<f64>, per_sample: bool },
    WeightedMean { x: Var, weights: Vec<f64>, total: f64 },
    Custom { parents: Vec<Var>, rule: Box<dyn BackwardRule> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Recording of one forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// New tape in checked mode: every op verifies its output is finite and
    /// `log` rejects non-positive inputs.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn unchecked() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the most recent backward passes, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, parents: &[Var], op: Op) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor {
            shape: ta.shape.clone(),
            data,
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push("add", v, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", v, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", v, &[a, b], Op::Mul(a, b))
    }

    /// Adds a length-`m` bias to every row of an `n × m` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2("add_bias")?;
        if self.value(bias).shape() != [m] {
            return Err(Error::dim(
                "add_bias",
                format!("bias shape {:?} does not match {m} columns", self.value(bias).shape()),
            ));
        }
        let (tx, tb) = (self.value(x), self.value(bias));
        let mut data = tx.data.clone();
        for r in 0..n {
            for (o, b) in data[r * m..(r + 1) * m].iter_mut().zip(&tb.data) {
                *o += b;
            }
        }
        let v = Tensor {
            shape: vec![n, m],
            data,
        };
        self.push("add_bias", v, &[x, bias], Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map(a, |x| c * x);
        self.push("scale", v, &[a], Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::exp);
        self.push("exp", v, &[a], Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.checked {
            if let Some(bad) = self.value(a).data.iter().find(|&&x| !(x > 0.0)) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("argument {bad} is not positive"),
                });
            }
        }
        let v = self.map(a, f64::ln);
        self.push("log", v, &[a], Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", v, &[a], Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.push("sum", Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.push("mean", Tensor::scalar(s), &[a], Op::Mean(a))
    }

    /// Sum of elementwise products of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).sum();
        self.push("dot", Tensor::scalar(s), &[a, b], Op::Dot(a, b))
    }

    /// Euclidean norm over all entries. The gradient at the origin is taken as zero.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push("norm", Tensor::scalar(s), &[a], Op::Norm(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner dimensions {k} and {k2} disagree")));
        }
        let data = matmul_kernel(&self.value(a).data, &self.value(b).data, m, k, n);
        self.push("matmul", Tensor { shape: vec![m, n], data }, &[a, b], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("transpose")?;
        let data = transpose_kernel(&self.value(a).data, r, c);
        self.push("transpose", Tensor { shape: vec![c, r], data }, &[a], Op::Transpose(a))
    }

    /// Affine map `x · wᵀ + b` with `x: [n × in]`, `w: [out × in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, fan_in) = self.value(x).dims2("linear")?;
        let (out, w_in) = self.value(w).dims2("linear")?;
        if fan_in != w_in {
            return Err(Error::dim(
                "linear",
                format!("input has {fan_in} columns but weights expect {w_in}"),
            ));
        }
        if self.value(b).shape() != [out] {
            return Err(Error::dim(
                "linear",
                format!("bias shape {:?} does not match {out} outputs", self.value(b).shape()),
            ));
        }
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let mut data = vec![0.0; n * out];
        for i in 0..n {
            let xi = &tx.data[i * fan_in..(i + 1) * fan_in];
            for o in 0..out {
                let wo = &tw.data[o * fan_in..(o + 1) * fan_in];
                data[i * out + o] = tb.data[o] + dot_slices(xi, wo);
            }
        }
        let v = Tensor {
            shape: vec![n, out],
            data,
        };
        self.push("linear", v, &[x, w, b], Op::Linear { x, w, b })
    }

    /// Mean softmax cross-entropy of `[batch × classes]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.xent(logits, labels, false)
    }

    /// Per-sample softmax cross-entropy, shape `[batch]`.
    pub fn softmax_cross_entropy_per_sample(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.xent(logits, labels, true)
    }

    fn xent(&mut self, logits: Var, labels: &[usize], per_sample: bool) -> Result<Var> {
        let (n, c) = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{n} logit rows but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let z = &self.value(logits).data;
        let mut probs = vec![0.0; n * c];
        let mut losses = vec![0.0; n];
        for i in 0..n {
            let row = &z[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for t in 0..c {
                probs[i * c + t] = (row[t] - lse).exp();
            }
            losses[i] = lse - row[labels[i]];
        }
        let value = if per_sample {
            Tensor {
                shape: vec![n],
                data: losses,
            }
        } else {
            Tensor::scalar(losses.iter().sum::<f64>() / n as f64)
        };
        let op = Op::SoftmaxXent {
            logits,
            labels: labels.to_vec(),
            probs,
            per_sample,
        };
        self.push("softmax_cross_entropy", value, &[logits], op)
    }

    /// `Σ wᵢ xᵢ / Σ wᵢ` with constant weights. Weights must be positive.
    pub fn weighted_mean(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if t.len() != weights.len() {
            return Err(Error::dim(
                "weighted_mean",
                format!("{} values but {} weights", t.len(), weights.len()),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Contract("weighted_mean requires positive weights".into()));
        }
        let total: f64 = weights.iter().sum();
        let s = t.data.iter().zip(weights).map(|(x, w)| w * x).sum::<f64>() / total;
        let op = Op::WeightedMean {
            x,
            weights: weights.to_vec(),
            total,
        };
        self.push("weighted_mean", Tensor::scalar(s), &[x], op)
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        name: &'static str,
        parents: &[Var],
        value: Tensor,
        rule: Box<dyn BackwardRule>,
    ) -> Result<Var> {
        let op = Op::Custom {
            parents: parents.to_vec(),
            rule,
        };
        self.push(name, value, parents, op)
    }

    /// Propagates `∂root/∂·` to every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut upstream: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        upstream.resize_with(root.0 + 1, || None);
        upstream[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = upstream[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            for (parent, pg) in self.local_grads(idx, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut upstream[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = g.iter().zip(&tb.data).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(&ta.data).map(|(g, x)| g * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddBias(x, b) => {
                let m = val(*b).len();
                let mut gb = vec![0.0; m];
                for row in g.chunks(m) {
                    gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| c * x).collect())],
            Op::Exp(a) => {
                let ga = g.iter().zip(&node.value.data).map(|(g, y)| g * y).collect();
                vec![(*a, ga)]
            }
            Op::Log(a) => {
                let ga = g.iter().zip(&val(*a).data).map(|(g, x)| g / x).collect();
                vec![(*a, ga)]
            }
            Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(&val(*a).data)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                vec![(*a, ga)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Dot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = tb.data.iter().map(|y| g[0] * y).collect();
                let gb = ta.data.iter().map(|x| g[0] * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Norm(a) => {
                let r = node.value.item();
                let ta = val(*a);
                let ga = if r > 0.0 {
                    ta.data.iter().map(|x| g[0] * x / r).collect()
                } else {
                    vec![0.0; ta.len()]
                };
                vec![(*a, ga)]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                // dA = G·Bᵀ, dB = Aᵀ·G
                let bt = transpose_kernel(&tb.data, k, n);
                let ga = matmul_kernel(g, &bt, m, n, k);
                let at = transpose_kernel(&ta.data, m, k);
                let gb = matmul_kernel(&at, g, k, m, n);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape[0], val(*a).shape[1]);
                vec![(*a, transpose_kernel(g, c, r))]
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (n, fan_in) = (tx.shape[0], tx.shape[1]);
                let out = tw.shape[0];
                let mut gx = vec![0.0; n * fan_in];
                let mut gw = vec![0.0; out * fan_in];
                let mut gb = vec![0.0; out];
                for i in 0..n {
                    let xi = &tx.data[i * fan_in..(i + 1) * fan_in];
                    let gxi = &mut gx[i * fan_in..(i + 1) * fan_in];
                    for o in 0..out {
                        let go = g[i * out + o];
                        if go == 0.0 {
                            continue;
                        }
                        gb[o] += go;
                        let wo = &tw.data[o * fan_in..(o + 1) * fan_in];
                        let gwo = &mut gw[o * fan_in..(o + 1) * fan_in];
                        for k in 0..fan_in {
                            gxi[k] += go * wo[k];
                            gwo[k] += go * xi[k];
                        }
                    }
                }
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
                per_sample,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let mut gl = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    gl[i * c + y] -= 1.0;
                    let scale = if *per_sample { g[i] } else { g[0] / n as f64 };
                    gl[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= scale);
                }
                vec![(*logits, gl)]
            }
            Op::WeightedMean { x, weights, total } => {
                let gx = weights.iter().map(|w| g[0] * w / total).collect();
                vec![(*x, gx)]
            }
            Op::Custom { parents, rule } => {
                let pvals: Vec<&Tensor> = parents.iter().map(|p| val(*p)).collect();
                let grads = rule.backward(&pvals, &node.value, g);
                parents.iter().copied().zip(grads).collect()
            }
        }
    }
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable `ln Σ exp(xᵢ)`; `-∞` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of a `[rows × cols]` buffer.
pub fn softmax_rows(z: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(cols) {
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|v| (v - lse).exp()));
    }
    out
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += aip * bv);
        }
    }
    out
}

fn transpose_kernel(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
