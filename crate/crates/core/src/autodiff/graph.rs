//! Define-by-run tape. Every op evaluates eagerly, stores its value on a node
//! and, when any input participates in differentiation, remembers enough to
//! replay its vector-Jacobian product in reverse.

use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};
use crate::layers::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Embed { table: Var, ids: Vec<usize> },
    Reshape(Var),
    SwapAxes01(Var),
    Unfold1d { input: Var, width: usize },
    /// Scalar-valued op whose local gradients were computed during the forward pass.
    Precomputed { inputs: Vec<(Var, Tensor)> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape plus the values of every node evaluated on it.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    store: Option<&'p ParamStore>,
    grad_enabled: bool,
    param_vars: BTreeMap<ParamId, Var>,
    grads: Option<Vec<Option<Vec<f64>>>>,
    consumed: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// (outer, mid, inner) strides for splitting a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().unwrap();
    (shape.iter().product::<usize>() / n, n)
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            grad_enabled: true,
            param_vars: BTreeMap::new(),
            grads: None,
            consumed: false,
        }
    }

    /// Tape bound to a parameter store; [`Graph::param`] resolves against it.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            ..Graph::new()
        }
    }

    /// Disables gradient tracking: parameters become constants and no op keeps
    /// backward state.
    pub fn no_grad(mut self) -> Self {
        self.grad_enabled = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node. Outstanding [`Var`]s and gradients become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
        self.grads = None;
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, make: impl FnOnce() -> Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { make() } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store bound");
        let v = self.leaf(store.get(id).clone(), true);
        self.param_vars.insert(id, v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let value = Tensor::from_parts(vec![m, n], out);
        self.push("matmul", value, || Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum. `b` may also be a single row (`[n]` or `[1, n]`) that
    /// is added to every row of a `[m, n]` input.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            let value = Tensor::from_parts(ta.shape().to_vec(), data);
            return self.push("add", value, || Op::Add(a, b), &[a, b]);
        }
        let n = *ta.shape().last().unwrap();
        let row_like = tb.len() == n && (tb.shape().len() == 1 || (tb.shape().len() == 2 && tb.shape()[0] == 1));
        if !row_like {
            return Err(Error::shape("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let bd = tb.data();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("add", value, || Op::AddRow(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("mul", value, || Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * k).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("scale", value, || Op::Scale(a, k), &[a])
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let m = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * m * inner..(o + 1) * m * inner]);
            }
        }
        let value = Tensor::from_parts(shape, data);
        let owned = inputs.to_vec();
        self.push("concat", value, || Op::Concat { inputs: owned, axis }, inputs)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("{s:?} axis {axis} range {start}..{}", start + len),
            ));
        }
        let (outer, mid, inner) = split_axis(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            data.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let value = Tensor::from_parts(shape, data);
        self.push("slice", value, || Op::Slice { input: a, axis, start }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        self.push("reshape", value, || Op::Reshape(a), &[a])
    }

    /// `[a, b, c] -> [b, a, c]`.
    pub fn swap_axes01(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 3 {
            return Err(Error::shape("swap_axes01", format!("expected rank 3, got {:?}", t.shape())));
        }
        let (a, b, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut data = vec![0.0; a * b * c];
        for i in 0..a {
            for j in 0..b {
                let src = (i * b + j) * c;
                let dst = (j * a + i) * c;
                data[dst..dst + c].copy_from_slice(&t.data()[src..src + c]);
            }
        }
        let value = Tensor::from_parts(vec![b, a, c], data);
        self.push("swap_axes01", value, || Op::SwapAxes01(x), &[x])
    }

    /// Sliding windows of an `L`-vector with zero padding: row `l` holds
    /// `x[l - w/2 ..= l + w/2]`. `width` must be odd.
    pub fn unfold1d(&mut self, x: Var, width: usize) -> Result<Var> {
        let t = self.value(x);
        if width.is_multiple_of(2) {
            return Err(Error::shape("unfold1d", format!("width {width} must be odd")));
        }
        let l = t.len();
        let pad = width / 2;
        let mut data = vec![0.0; l * width];
        for r in 0..l {
            for j in 0..width {
                let src = r + j;
                if src >= pad && src - pad < l {
                    data[r * width + j] = t.data()[src - pad];
                }
            }
        }
        let value = Tensor::from_parts(vec![l, width], data);
        self.push("unfold1d", value, || Op::Unfold1d { input: x, width }, &[x])
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 || ids.is_empty() {
            return Err(Error::shape("embed", format!("table {:?}, {} ids", t.shape(), ids.len())));
        }
        let (v, e) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::shape("embed", format!("id {id} outside table of {v} rows")));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::from_parts(vec![ids.len(), e], data);
        let ids = ids.to_vec();
        self.push("embed", value, || Op::Embed { table, ids }, &[table])
    }

    // ---- elementwise ----------------------------------------------------

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, make: impl FnOnce() -> Op) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(name, value, make, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, || Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, || Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), || Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, || Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, || Op::Log(a))
    }

    // ---- reductions over the last axis ----------------------------------

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, n) = last_axis(ta.shape());
        let mut data = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(n) {
            data.extend(softmax_row(row));
        }
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("softmax", value, || Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, n) = last_axis(ta.shape());
        let mut data = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(n) {
            let lse = logsumexp(row);
            data.extend(row.iter().map(|x| x - lse));
        }
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("log_softmax", value, || Op::LogSoftmax(a), &[a])
    }

    /// Reduces the last axis. A rank-1 input yields shape `[1]`.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, n) = last_axis(ta.shape());
        let data: Vec<f64> = ta.data().chunks(n).map(logsumexp).collect();
        let mut shape = ta.shape()[..ta.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::from_parts(shape, data);
        self.push("logsumexp", value, || Op::LogSumExp(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", value, || Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push("mean", value, || Op::Mean(a), &[a])
    }

    // ---- convolution ----------------------------------------------------

    /// Stride-1 2-D convolution with symmetric zero padding.
    /// `x: [cin, h, w]`, `w: [cout, cin, kh, kw]`, `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || tb.len() != ws[0] {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, filters {ws:?}, bias {:?}", tb.shape()),
            ));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} smaller than receptive field {kh}x{kw} with padding {pad}"),
            ));
        }
        let (oh, ow) = (h + 2 * pad + 1 - kh, wd + 2 * pad + 1 - kw);
        let (xd, wdat, bd) = (tx.data(), tw.data(), tb.data());
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = bd[co]);
            for ci in 0..cin {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wdat[((co * cin + ci) * kh + ki) * kw + kj];
                        for i in 0..oh {
                            let si = i + ki;
                            if si < pad || si - pad >= h {
                                continue;
                            }
                            let xrow = &xd[(ci * h + si - pad) * wd..(ci * h + si - pad + 1) * wd];
                            let orow = &mut plane[i * ow..(i + 1) * ow];
                            for (j, o) in orow.iter_mut().enumerate() {
                                let sj = j + kj;
                                if sj >= pad && sj - pad < wd {
                                    *o += wv * xrow[sj - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![cout, oh, ow], out);
        self.push("conv2d", value, || Op::Conv2d { x, w, b, pad }, &[x, w, b])
    }

    /// Non-overlapping max pooling with window = stride = `k`; partial windows
    /// at the border are kept (ceil division).
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 || k == 0 {
            return Err(Error::shape("maxpool2d", format!("input {s:?}, window {k}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h.div_ceil(k), w.div_ceil(k));
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..k {
                        for dj in 0..k {
                            let (si, sj) = (i * k + di, j * k + dj);
                            if si < h && sj < w {
                                let idx = (ch * h + si) * w + sj;
                                if t.data()[idx] > best {
                                    best = t.data()[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let value = Tensor::from_parts(vec![c, oh, ow], out);
        self.push("maxpool2d", value, || Op::MaxPool2d { x, argmax }, &[x])
    }

    /// Records a scalar-valued op whose value and local gradients were
    /// computed outside the tape (e.g. analytic CTC).
    pub fn custom_scalar(&mut self, name: &'static str, value: f64, inputs: Vec<(Var, Tensor)>) -> Result<Var> {
        for (v, g) in &inputs {
            if self.shape(*v) != g.shape() {
                return Err(Error::shape(name, format!("gradient {:?} for input {:?}", g.shape(), self.shape(*v))));
            }
        }
        let vars: Vec<Var> = inputs.iter().map(|(v, _)| *v).collect();
        self.push(name, Tensor::scalar(value), || Op::Precomputed { inputs }, &vars)
    }

    // ---- reverse pass ---------------------------------------------------

    /// Populates gradients for every node reachable from `loss`. A tape can be
    /// differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.shape(loss);
        if shape != [1] {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(go) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(go);
                continue;
            }
            self.propagate(i, &go, &mut grads);
            grads[i] = Some(go);
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.as_ref()?;
        let g = grads[v.0].as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    /// Gradients of every parameter leaf touched by this tape, ordered by id.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.param_vars
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect()
    }

    fn propagate(&self, i: usize, go: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        let gorow = &go[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            ga[r * k + p] += gorow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..m {
                        let gorow = &go[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (g, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(gorow) {
                                *g += av * x;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, go));
                acc(*b, &mut |g| add_into(g, go));
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |g| add_into(g, go));
                let n = nodes[b.0].value.len();
                acc(*b, &mut |g| {
                    for row in go.chunks(n) {
                        add_into(g, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |g| {
                    for ((g, x), y) in g.iter_mut().zip(go).zip(tb) {
                        *g += x * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((g, x), y) in g.iter_mut().zip(go).zip(ta) {
                        *g += x * y;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |g| {
                for (g, x) in g.iter_mut().zip(go) {
                    *g += k * x;
                }
            }),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let m = nodes[v.0].value.shape()[*axis];
                    acc(*v, &mut |g| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut g[o * m * inner..(o + 1) * m * inner], &go[src..src + m * inner]);
                        }
                    });
                    offset += m;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, mid, inner) = split_axis(nodes[input.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                acc(*input, &mut |g| {
                    for o in 0..outer {
                        let dst = (o * mid + start) * inner;
                        add_into(&mut g[dst..dst + len * inner], &go[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |g| add_into(g, go)),
            Op::SwapAxes01(x) => {
                let s = nodes[x.0].value.shape();
                let (a, b, c) = (s[0], s[1], s[2]);
                acc(*x, &mut |g| {
                    for i in 0..a {
                        for j in 0..b {
                            let src = (j * a + i) * c;
                            let dst = (i * b + j) * c;
                            add_into(&mut g[dst..dst + c], &go[src..src + c]);
                        }
                    }
                });
            }
            Op::Unfold1d { input, width } => {
                let l = nodes[input.0].value.len();
                let pad = width / 2;
                acc(*input, &mut |g| {
                    for r in 0..l {
                        for j in 0..*width {
                            let src = r + j;
                            if src >= pad && src - pad < l {
                                g[src - pad] += go[r * width + j];
                            }
                        }
                    }
                });
            }
            Op::Embed { table, ids } => {
                let e = nodes[table.0].value.shape()[1];
                acc(*table, &mut |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * e..(id + 1) * e], &go[r * e..(r + 1) * e]);
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &mut |g| {
                for ((g, x), y) in g.iter_mut().zip(go).zip(out) {
                    *g += x * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |g| {
                for ((g, x), y) in g.iter_mut().zip(go).zip(out) {
                    *g += x * y * (1.0 - y);
                }
            }),
            Op::Relu(a) => {
                let inp = nodes[a.0].value.data();
                acc(*a, &mut |g| {
                    for ((g, x), v) in g.iter_mut().zip(go).zip(inp) {
                        if *v > 0.0 {
                            *g += x;
                        }
                    }
                })
            }
            Op::Exp(a) => acc(*a, &mut |g| {
                for ((g, x), y) in g.iter_mut().zip(go).zip(out) {
                    *g += x * y;
                }
            }),
            Op::Log(a) => {
                let inp = nodes[a.0].value.data();
                acc(*a, &mut |g| {
                    for ((g, x), v) in g.iter_mut().zip(go).zip(inp) {
                        *g += x / v;
                    }
                })
            }
            Op::Softmax(a) => {
                let (_, n) = last_axis(node.value.shape());
                acc(*a, &mut |g| {
                    for ((gr, gor), yr) in g.chunks_mut(n).zip(go.chunks(n)).zip(out.chunks(n)) {
                        let dot: f64 = gor.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((g, x), y) in gr.iter_mut().zip(gor).zip(yr) {
                            *g += y * (x - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let (_, n) = last_axis(node.value.shape());
                acc(*a, &mut |g| {
                    for ((gr, gor), yr) in g.chunks_mut(n).zip(go.chunks(n)).zip(out.chunks(n)) {
                        let total: f64 = gor.iter().sum();
                        for ((g, x), y) in gr.iter_mut().zip(gor).zip(yr) {
                            *g += x - y.exp() * total;
                        }
                    }
                })
            }
            Op::LogSumExp(a) => {
                let inp = &nodes[a.0].value;
                let (_, n) = last_axis(inp.shape());
                acc(*a, &mut |g| {
                    for (r, (gr, xr)) in g.chunks_mut(n).zip(inp.data().chunks(n)).enumerate() {
                        for (g, x) in gr.iter_mut().zip(xr) {
                            *g += go[r] * (x - out[r]).exp();
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += go[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += go[0] / n))
            }
            Op::Conv2d { x, w, b, pad } => {
                let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                let (cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (cout, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
                let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                let pad = *pad;
                acc(*b, &mut |g| {
                    for co in 0..cout {
                        g[co] += go[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
                    }
                });
                // Visits every (output, filter tap) pair that touched a real input cell.
                let for_taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for co in 0..cout {
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let widx = ((co * cin + ci) * kh + ki) * kw + kj;
                                    for i in 0..oh {
                                        let si = i + ki;
                                        if si < pad || si - pad >= h {
                                            continue;
                                        }
                                        for j in 0..ow {
                                            let sj = j + kj;
                                            if sj < pad || sj - pad >= wd {
                                                continue;
                                            }
                                            let xidx = (ci * h + si - pad) * wd + sj - pad;
                                            f((co * oh + i) * ow + j, widx, xidx);
                                        }
                                    }
                                }
                            }
                        }
                    }
                };
                acc(*w, &mut |g| for_taps(&mut |o, wi, xi| g[wi] += go[o] * tx.data()[xi]));
                acc(*x, &mut |g| for_taps(&mut |o, wi, xi| g[xi] += go[o] * tw.data()[wi]));
            }
            Op::MaxPool2d { x, argmax } => acc(*x, &mut |g| {
                for (o, &src) in argmax.iter().enumerate() {
                    g[src] += go[o];
                }
            }),
            Op::Precomputed { inputs } => {
                for (v, local) in inputs {
                    acc(*v, &mut |g| {
                        for (g, l) in g.iter_mut().zip(local.data()) {
                            *g += go[0] * l;
                        }
                    });
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(sum(exp(xs)))`; `-inf` for an empty or all `-inf` slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let lse = logsumexp(row);
    row.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn vec1(g: &mut Graph, xs: &[f64], grad: bool) -> Var {
        g.leaf(Tensor::vector(xs.to_vec()).unwrap(), grad)
    }

    #[test]
    fn logsumexp_of_two_halves_is_zero() {
        let mut g = Graph::new();
        let x = vec1(&mut g, &[0.5f64.ln(), 0.5f64.ln()], false);
        let y = g.logsumexp(x).unwrap();
        assert_abs_diff_eq!(g.value(y).item(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = vec1(&mut g, &[0.0; 3], false);
        let y = g.softmax(x).unwrap();
        for v in g.value(y).data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 3], 1.0));
        let b = g.constant(Tensor::full(&[3, 2], 1.0));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
        assert!(g.value(c).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = vec1(&mut g, &[0.0, 1.0], false);
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = vec1(&mut g, &[0.3, -1.0, 2.0], true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = vec1(&mut g, &[1.0, 2.0], true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_use() {
        let mut g = Graph::new();
        let x = vec1(&mut g, &[1.0, 2.0], true);
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NotScalar(_))));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn clear_invalidates_grads() {
        let mut g = Graph::new();
        let x = vec1(&mut g, &[1.0], true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.clear();
        assert!(g.is_empty());
        let x = vec1(&mut g, &[1.0], true);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn two_uses_accumulate() {
        // y = sum(x) + sum(tanh(x)) against a duplicated-leaf construction.
        let xs = [0.2, -0.7, 1.1];
        let mut g = Graph::new();
        let x = vec1(&mut g, &xs, true);
        let a = g.sum(x).unwrap();
        let t = g.tanh(x).unwrap();
        let b = g.sum(t).unwrap();
        let y = g.add(a, b).unwrap();
        g.backward(y).unwrap();
        let shared = g.grad(x).unwrap();

        let mut h = Graph::new();
        let x1 = vec1(&mut h, &xs, true);
        let x2 = vec1(&mut h, &xs, true);
        let a = h.sum(x1).unwrap();
        let t = h.tanh(x2).unwrap();
        let b = h.sum(t).unwrap();
        let y = h.add(a, b).unwrap();
        h.backward(y).unwrap();
        let split: Vec<f64> = h
            .grad(x1)
            .unwrap()
            .data()
            .iter()
            .zip(h.grad(x2).unwrap().data())
            .map(|(p, q)| p + q)
            .collect();
        assert_eq!(shared.data(), split.as_slice());
    }

    #[test]
    fn no_grad_graph_records_nothing_differentiable() {
        let mut g = Graph::new().no_grad();
        let x = vec1(&mut g, &[1.0, 2.0], true);
        assert!(!g.requires_grad(x));
    }

    #[test]
    fn maxpool_ceil_division() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 12, 5]));
        let p = g.maxpool2d(x, 2).unwrap();
        let p = g.maxpool2d(p, 2).unwrap();
        assert_eq!(g.shape(p), &[2, 3, 2]);
    }

    #[test]
    fn conv_rejects_tiny_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 1]));
        let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(g.conv2d(x, w, b, 0).is_err());
        assert!(g.conv2d(x, w, b, 1).is_ok());
    }
}
