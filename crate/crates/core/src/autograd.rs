//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op evaluates eagerly and, when the tape is recording, appends a
//! node holding its output value, its input node ids and a [`Backward`]
//! rule. Nodes are appended in evaluation order, so the tape is always
//! topologically sorted and backward is a single reverse sweep.
//!
//! Parameters enter the tape through [`Tape::param`]; [`Tape::backward`]
//! adds the resulting gradients into the owning [`ParamStore`], so calling
//! it twice without [`ParamStore::zero_grads`] doubles them.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Tensor};

pub type NodeId = usize;

/// Handle to a value produced on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    id: Option<NodeId>,
    value: Rc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn rows(&self) -> usize {
        self.value.rows()
    }

    pub fn cols(&self) -> usize {
        self.value.cols()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.id
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, {:?})", self.id, self.value)
    }
}

/// What a backward rule sees: the gradient flowing into the op's output
/// plus the forward values of its output and inputs.
pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
}

pub trait Backward {
    /// One entry per input; `None` means no contribution.
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<NodeId>,
    rule: Option<Box<dyn Backward>>,
    param: Option<ParamId>,
}

pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    op_counts: BTreeMap<&'static str, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        v.id.and_then(|id| self.grads.get(id))
            .and_then(Option::as_ref)
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            op_counts: BTreeMap::new(),
        }
    }

    /// A tape that evaluates ops without retaining anything for backward.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of times op `name` was evaluated on this tape.
    pub fn op_count(&self, name: &str) -> usize {
        self.op_counts.get(name).copied().unwrap_or(0)
    }

    pub fn op_counts(&self) -> &BTreeMap<&'static str, usize> {
        &self.op_counts
    }

    fn push(
        &mut self,
        value: Rc<Tensor>,
        inputs: Vec<NodeId>,
        rule: Option<Box<dyn Backward>>,
        param: Option<ParamId>,
    ) -> Option<NodeId> {
        if !self.recording {
            return None;
        }
        self.nodes.push(Node {
            value,
            inputs,
            rule,
            param,
        });
        Some(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        let value = Rc::new(value);
        let id = self.push(value.clone(), Vec::new(), None, None);
        Var { id, value }
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = Rc::new(store.get(id).value.clone());
        let node = self.push(value.clone(), Vec::new(), None, Some(id));
        Var { id: node, value }
    }

    fn track(&mut self, v: &Var) -> Option<NodeId> {
        match v.id {
            Some(id) => Some(id),
            None => self.push(v.value.clone(), Vec::new(), None, None),
        }
    }

    /// Records an op output. Non-finite outputs are rejected.
    pub fn record(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: &[&Var],
        rule: impl Backward + 'static,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        *self.op_counts.entry(op).or_default() += 1;
        let value = Rc::new(value);
        if !self.recording {
            return Ok(Var { id: None, value });
        }
        let ids = inputs
            .iter()
            .map(|v| self.track(v).expect("recording tape"))
            .collect();
        let id = self.push(value.clone(), ids, Some(Box::new(rule)), None);
        Ok(Var { id, value })
    }

    /// Gradients of a scalar `loss` with respect to every recorded node.
    pub fn gradients(&self, loss: &Var) -> Result<Gradients> {
        if loss.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                loss.shape()
            )));
        }
        let root = loss
            .id
            .ok_or_else(|| Error::Contract("loss was not recorded on this tape".into()))?;
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            let Some(rule) = &node.rule else { continue };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.inputs.iter().map(|&i| &*self.nodes[i].value).collect(),
            };
            let contributions = rule.backward(&ctx);
            debug_assert_eq!(contributions.len(), node.inputs.len());
            for (&input, contrib) in node.inputs.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                debug_assert_eq!(c.shape(), self.nodes[input].value.shape());
                match &mut grads[input] {
                    Some(existing) => existing.add_assign(&c),
                    slot => *slot = Some(c),
                }
            }
            grads[id] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    /// Backward sweep that also accumulates parameter gradients into `store`.
    pub fn backward(&self, loss: &Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Some(pid), Some(g)) = (node.param, g) {
                store.get_mut(pid).grad.add_assign(g);
            }
        }
        Ok(grads)
    }

    // ---- elementary ops -------------------------------------------------

    /// `x · w (+ b)`, with `b` a `1 x cols` row broadcast over rows.
    pub fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let mut out = tensor::matmul(x.value(), w.value())?;
        if let Some(b) = b {
            if b.shape() != (1, w.cols()) {
                return dim_err(
                    "linear",
                    format!("bias {:?} for {} outputs", b.shape(), w.cols()),
                );
            }
            let bias = b.value().row(0);
            for r in 0..out.rows() {
                for (o, v) in out.row_mut(r).iter_mut().zip(bias) {
                    *o += v;
                }
            }
            self.record("linear", out, &[x, w, b], LinearBackward { bias: true })
        } else {
            self.record("linear", out, &[x, w], LinearBackward { bias: false })
        }
    }

    pub fn relu(&mut self, x: &Var) -> Result<Var> {
        let out = x.value().map(|v| v.max(0.0));
        self.record("relu", out, &[x], ReluBackward)
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return dim_err("add", format!("{:?} + {:?}", a.shape(), b.shape()));
        }
        let mut out = a.value().clone();
        out.add_assign(b.value());
        self.record("add", out, &[a, b], AddBackward)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return dim_err("mul", format!("{:?} ⊙ {:?}", a.shape(), b.shape()));
        }
        let data = a
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(a.rows(), a.cols(), data)?;
        self.record("mul", out, &[a, b], MulBackward)
    }

    pub fn scale(&mut self, x: &Var, factor: f64) -> Result<Var> {
        let out = x.value().scaled(factor);
        self.record("scale", out, &[x], ScaleBackward(factor))
    }

    /// Sum of all elements, as a 1x1 tensor.
    pub fn sum(&mut self, x: &Var) -> Result<Var> {
        let out = Tensor::scalar(x.value().sum());
        self.record("sum", out, &[x], SumBackward)
    }

    pub fn concat_cols(&mut self, xs: &[&Var]) -> Result<Var> {
        let Some(first) = xs.first() else {
            return dim_err("concat_cols", "no inputs");
        };
        let rows = first.rows();
        if let Some(bad) = xs.iter().find(|x| x.rows() != rows) {
            return dim_err("concat_cols", format!("{} rows vs {}", bad.rows(), rows));
        }
        let widths: Vec<usize> = xs.iter().map(|x| x.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(rows, total);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut at = 0;
            for x in xs {
                let src = x.value().row(r);
                dst[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        self.record("concat_cols", out, xs, ConcatBackward { widths })
    }

    pub fn slice_cols(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let out = x.value().slice_cols(start, len)?;
        self.record("slice_cols", out, &[x], SliceColsBackward { start })
    }

    /// Rows `indices` of `x`, in order (repeats allowed).
    pub fn select_rows(&mut self, x: &Var, indices: &[usize]) -> Result<Var> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
            return dim_err("select_rows", format!("row {bad} of {}", x.rows()));
        }
        let out = x.value().select_rows(indices);
        self.record(
            "select_rows",
            out,
            &[x],
            SelectRowsBackward {
                indices: indices.to_vec(),
            },
        )
    }

    /// Column-wise maximum, `1 x cols`. Ties resolve to the lowest row.
    pub fn reduce_max_rows(&mut self, x: &Var) -> Result<Var> {
        let t = x.value();
        if t.rows() == 0 {
            return dim_err("reduce_max_rows", "no rows");
        }
        let mut argmax = vec![0usize; t.cols()];
        let mut out = Tensor::zeros(1, t.cols());
        out.row_mut(0).copy_from_slice(t.row(0));
        for r in 1..t.rows() {
            for (c, &v) in t.row(r).iter().enumerate() {
                if v > out.get(0, c) {
                    out.set(0, c, v);
                    argmax[c] = r;
                }
            }
        }
        self.record("reduce_max_rows", out, &[x], ReduceMaxBackward { argmax })
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax_rows(&mut self, x: &Var) -> Result<Var> {
        let t = x.value();
        let mut out = Tensor::zeros(t.rows(), t.cols());
        for r in 0..t.rows() {
            let src = t.row(r);
            let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = out.row_mut(r);
            let mut z = 0.0;
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - m).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        self.record("softmax_rows", out, &[x], SoftmaxBackward)
    }
}

struct LinearBackward {
    bias: bool,
}

impl Backward for LinearBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let dx = tensor::matmul_a_bt(ctx.grad, w).expect("shapes checked in forward");
        let dw = tensor::matmul_at_b(x, ctx.grad).expect("shapes checked in forward");
        let mut out = vec![Some(dx), Some(dw)];
        if self.bias {
            out.push(Some(tensor::column_sums(ctx.grad)));
        }
        out
    }
}

struct ReluBackward;

impl Backward for ReluBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = ctx.inputs[0];
        let data = ctx
            .grad
            .data()
            .iter()
            .zip(x.data())
            .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
            .collect();
        vec![Some(Tensor::from_vec(x.rows(), x.cols(), data).unwrap())]
    }
}

struct AddBackward;

impl Backward for AddBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
    }
}

struct MulBackward;

impl Backward for MulBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let prod = |other: &Tensor| {
            let data = ctx
                .grad
                .data()
                .iter()
                .zip(other.data())
                .map(|(g, v)| g * v)
                .collect();
            Tensor::from_vec(other.rows(), other.cols(), data).unwrap()
        };
        vec![Some(prod(b)), Some(prod(a))]
    }
}

struct ScaleBackward(f64);

impl Backward for ScaleBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.scaled(self.0))]
    }
}

struct SumBackward;

impl Backward for SumBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = ctx.inputs[0];
        vec![Some(Tensor::filled(x.rows(), x.cols(), ctx.grad.data()[0]))]
    }
}

struct ConcatBackward {
    widths: Vec<usize>,
}

impl Backward for ConcatBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let mut at = 0;
        self.widths
            .iter()
            .map(|&w| {
                let part = ctx.grad.slice_cols(at, w).unwrap();
                at += w;
                Some(part)
            })
            .collect()
    }
}

struct SliceColsBackward {
    start: usize,
}

impl Backward for SliceColsBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = ctx.inputs[0];
        let mut dx = Tensor::zeros(x.rows(), x.cols());
        let w = ctx.grad.cols();
        for r in 0..x.rows() {
            dx.row_mut(r)[self.start..self.start + w].copy_from_slice(ctx.grad.row(r));
        }
        vec![Some(dx)]
    }
}

struct SelectRowsBackward {
    indices: Vec<usize>,
}

impl Backward for SelectRowsBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = ctx.inputs[0];
        let mut dx = Tensor::zeros(x.rows(), x.cols());
        for (src, &dst) in self.indices.iter().enumerate() {
            for (d, g) in dx.row_mut(dst).iter_mut().zip(ctx.grad.row(src)) {
                *d += g;
            }
        }
        vec![Some(dx)]
    }
}

struct ReduceMaxBackward {
    argmax: Vec<usize>,
}

impl Backward for ReduceMaxBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = ctx.inputs[0];
        let mut dx = Tensor::zeros(x.rows(), x.cols());
        for (c, &r) in self.argmax.iter().enumerate() {
            dx.set(r, c, ctx.grad.get(0, c));
        }
        vec![Some(dx)]
    }
}

struct SoftmaxBackward;

impl Backward for SoftmaxBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let p = ctx.output;
        let mut dx = Tensor::zeros(p.rows(), p.cols());
        for r in 0..p.rows() {
            let (pr, gr) = (p.row(r), ctx.grad.row(r));
            let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((d, &pv), &gv) in dx.row_mut(r).iter_mut().zip(pr).zip(gr) {
                *d = pv * (gv - dot);
            }
        }
        vec![Some(dx)]
    }
}
