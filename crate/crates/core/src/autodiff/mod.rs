//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward computation eagerly; [`Graph::backward`]
//! walks the recorded nodes in reverse and accumulates parameter gradients
//! into a [`GradMap`]. Parameters are named, shared tensors ([`Param`]);
//! loading one into a graph does not copy its data, so one parameter can
//! feed many graphs (and many leaves of one graph) cheaply.
//!
//! The op surface is intentionally small: dense matrix multiply, elementwise
//! arithmetic, the sigmoid/tanh/ReLU nonlinearities, concatenation, slicing,
//! reductions, and a masked log-softmax. Everything is `f64`. There is no
//! broadcasting beyond matrix-vector products and row-wise bias addition.

mod adam;
pub mod gradcheck;

pub use adam::{adam_step, AdamConfig, AdamState};

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

/// Log-probability assigned to masked-out entries. Finite so arithmetic
/// stays NaN-free, yet `exp` of it is exactly 0.
pub const MASKED_LOG_PROB: f64 = -1e30;

/// Dense row-major tensor. Rank 1 (`[n]`) or rank 2 (`[rows, cols]`)
/// everywhere in this crate; scalars are `[1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for shape {shape:?}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("masked_log_softmax: mask length {mask_len} does not match logits length {len}")]
    MaskLength { mask_len: usize, len: usize },
    #[error("masked_log_softmax: all actions are masked")]
    DegenerateMask,
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(AutodiffError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Row-major matrix from `rows * cols` values.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AutodiffError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Unique parameter identity within a process.
pub type ParamId = u64;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A named, trainable tensor. The value lives behind an `Arc` so graphs
/// reference it without copying; mutation uses copy-on-write and only ever
/// happens in the single-threaded optimizer phase.
#[derive(Debug)]
pub struct Param {
    id: ParamId,
    name: String,
    value: Arc<Tensor>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            value: Arc::new(value),
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn set_value(&mut self, value: Tensor) {
        assert_eq!(
            value.shape(),
            self.value.shape(),
            "parameter {} shape changed",
            self.name
        );
        self.value = Arc::new(value);
    }

    /// In-place update; clones the storage only if a graph still holds it.
    pub fn update(&mut self, f: impl FnOnce(&mut Tensor)) {
        f(Arc::make_mut(&mut self.value));
    }
}

/// Accumulated parameter gradients, keyed by [`ParamId`]. Repeated
/// [`Graph::backward`] calls into the same map accumulate; the optimizer
/// drains entries when it applies them.
#[derive(Debug, Default)]
pub struct GradMap {
    entries: HashMap<ParamId, Tensor>,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, param: &Param) -> Option<&Tensor> {
        self.entries.get(&param.id)
    }

    pub fn get_by_id(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.get(&id)
    }

    pub fn take(&mut self, param: &Param) -> Option<Tensor> {
        self.entries.remove(&param.id)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn accumulate(&mut self, id: ParamId, shape: &[usize], grad: &[f64]) {
        let entry = self
            .entries
            .entry(id)
            .or_insert_with(|| Tensor::zeros(shape.to_vec()));
        for (g, &d) in entry.data.iter_mut().zip(grad) {
            *g += d;
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Values {
    Owned(Vec<f64>),
    Shared(Arc<Tensor>),
}

impl Values {
    fn as_slice(&self) -> &[f64] {
        match self {
            Values::Owned(v) => v,
            Values::Shared(t) => t.data(),
        }
    }
}

enum BackOp {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { m: Var, bias: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, k: f64 },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Relu { a: Var },
    Exp { a: Var },
    Concat { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    Pick { a: Var, index: usize },
    PickCol { a: Var, col: usize },
    Sum { a: Var },
    SumRows { a: Var },
    Mean { a: Var },
    MaskedLogSoftmax { a: Var, mask: Vec<bool> },
}

struct Node {
    shape: Vec<usize>,
    values: Values,
    op: BackOp,
}

/// One recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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
        self.nodes[v.0].values.as_slice()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.value(v).len(), 1);
        self.value(v)[0]
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: BackOp) -> Var {
        self.nodes.push(Node {
            shape,
            values: Values::Owned(values),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a constant leaf (no gradient flows into it).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            values: Values::Owned(t.data),
            op: BackOp::Input,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar_input(&mut self, v: f64) -> Var {
        self.input(Tensor::scalar(v))
    }

    pub fn vector_input(&mut self, v: Vec<f64>) -> Var {
        self.input(Tensor::vector(v))
    }

    /// Adds (or reuses) a leaf for a parameter; gradients accumulate under
    /// its id. The tensor storage is shared, not copied.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.param_leaves.get(&p.id) {
            return v;
        }
        self.nodes.push(Node {
            shape: p.value.shape.clone(),
            values: Values::Shared(Arc::clone(&p.value)),
            op: BackOp::Param(p.id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_leaves.insert(p.id, v);
        v
    }

    /// `[r,c] x [c] -> [r]` or `[r,c] x [c,k] -> [r,k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        match (ashape.as_slice(), bshape.as_slice()) {
            ([r, c], [c2]) if c == c2 => {
                let (r, c) = (*r, *c);
                let av = self.value(a);
                let bv = self.value(b);
                let mut out = vec![0.0; r];
                for i in 0..r {
                    let row = &av[i * c..(i + 1) * c];
                    let mut acc = 0.0;
                    for j in 0..c {
                        acc += row[j] * bv[j];
                    }
                    out[i] = acc;
                }
                Ok(self.push(vec![r], out, BackOp::MatMul { a, b }))
            }
            ([r, c], [c2, k]) if c == c2 => {
                let (r, c, k) = (*r, *c, *k);
                let av = self.value(a);
                let bv = self.value(b);
                let mut out = vec![0.0; r * k];
                for i in 0..r {
                    for j in 0..c {
                        let aij = av[i * c + j];
                        if aij == 0.0 {
                            continue;
                        }
                        let brow = &bv[j * k..(j + 1) * k];
                        let orow = &mut out[i * k..(i + 1) * k];
                        for l in 0..k {
                            orow[l] += aij * brow[l];
                        }
                    }
                }
                Ok(self.push(vec![r, k], out, BackOp::MatMul { a, b }))
            }
            _ => Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: ashape,
                rhs: bshape,
            }),
        }
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: BackOp,
    ) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("add", a, b, |x, y| x + y, BackOp::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("sub", a, b, |x, y| x - y, BackOp::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("mul", a, b, |x, y| x * y, BackOp::Mul { a, b })
    }

    /// `[r,c] + [r]`: adds `bias[i]` to every column of row `i`.
    pub fn add_bias(&mut self, m: Var, bias: Var) -> Result<Var, AutodiffError> {
        let mshape = self.shape(m).to_vec();
        let bshape = self.shape(bias).to_vec();
        match (mshape.as_slice(), bshape.as_slice()) {
            ([r, c], [r2]) if r == r2 => {
                let (r, c) = (*r, *c);
                let mv = self.value(m);
                let bv = self.value(bias);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = mv[i * c + j] + bv[i];
                    }
                }
                Ok(self.push(vec![r, c], out, BackOp::AddBias { m, bias }))
            }
            _ => Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: mshape,
                rhs: bshape,
            }),
        }
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| k * x).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, BackOp::Scale { a, k })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: BackOp) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), BackOp::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, BackOp::Tanh { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, BackOp::Relu { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, BackOp::Exp { a })
    }

    /// Concatenates rank-1 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::EmptyInput { op: "concat" });
        }
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(AutodiffError::BadShape {
                    op: "concat",
                    expected: "rank-1 tensors",
                    shape: self.shape(p).to_vec(),
                });
            }
            out.extend_from_slice(self.value(p));
        }
        let len = out.len();
        Ok(self.push(
            vec![len],
            out,
            BackOp::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Contiguous row slice: `[n] -> [len]` or `[r,c] -> [len,c]`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        match shape.as_slice() {
            [n] => {
                if start + len > *n {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "slice_rows",
                        index: start + len,
                        shape,
                    });
                }
                let out = self.value(a)[start..start + len].to_vec();
                Ok(self.push(vec![len], out, BackOp::SliceRows { a, start }))
            }
            [r, c] => {
                if start + len > *r {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "slice_rows",
                        index: start + len,
                        shape,
                    });
                }
                let c = *c;
                let out = self.value(a)[start * c..(start + len) * c].to_vec();
                Ok(self.push(vec![len, c], out, BackOp::SliceRows { a, start }))
            }
            _ => Err(AutodiffError::BadShape {
                op: "slice_rows",
                expected: "rank-1 or rank-2 tensor",
                shape,
            }),
        }
    }

    /// Single element of a rank-1 tensor, as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        match shape.as_slice() {
            [n] if index < *n => {
                let v = self.value(a)[index];
                Ok(self.push(vec![1], vec![v], BackOp::Pick { a, index }))
            }
            [_] => Err(AutodiffError::IndexOutOfRange {
                op: "pick",
                index,
                shape,
            }),
            _ => Err(AutodiffError::BadShape {
                op: "pick",
                expected: "rank-1 tensor",
                shape,
            }),
        }
    }

    /// Column of a rank-2 tensor, as a rank-1 tensor.
    pub fn pick_col(&mut self, a: Var, col: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        match shape.as_slice() {
            [r, c] if col < *c => {
                let (r, c) = (*r, *c);
                let av = self.value(a);
                let out: Vec<f64> = (0..r).map(|i| av[i * c + col]).collect();
                Ok(self.push(vec![r], out, BackOp::PickCol { a, col }))
            }
            [_, _] => Err(AutodiffError::IndexOutOfRange {
                op: "pick_col",
                index: col,
                shape,
            }),
            _ => Err(AutodiffError::BadShape {
                op: "pick_col",
                expected: "rank-2 tensor",
                shape,
            }),
        }
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).iter().sum();
        self.push(vec![1], vec![total], BackOp::Sum { a })
    }

    /// `[r,c] -> [c]`: sums the rows together.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        match shape.as_slice() {
            [r, c] => {
                let (r, c) = (*r, *c);
                let av = self.value(a);
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += av[i * c + j];
                    }
                }
                Ok(self.push(vec![c], out, BackOp::SumRows { a }))
            }
            _ => Err(AutodiffError::BadShape {
                op: "sum_rows",
                expected: "rank-2 tensor",
                shape,
            }),
        }
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(AutodiffError::EmptyInput { op: "mean" });
        }
        let total: f64 = self.value(a).iter().sum();
        Ok(self.push(vec![1], vec![total / n as f64], BackOp::Mean { a }))
    }

    /// Log of the masked softmax of `a`: masked entries get
    /// [`MASKED_LOG_PROB`]; unmasked entries are normalized with
    /// max-subtraction so their probabilities sum to 1.
    pub fn masked_log_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let [n] = shape.as_slice() else {
            return Err(AutodiffError::BadShape {
                op: "masked_log_softmax",
                expected: "rank-1 tensor",
                shape,
            });
        };
        if mask.len() != *n {
            return Err(AutodiffError::MaskLength {
                mask_len: mask.len(),
                len: *n,
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(AutodiffError::DegenerateMask);
        }
        let av = self.value(a);
        let max = av
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&x, _)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = av
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&x, _)| (x - max).exp())
            .sum();
        let log_denom = denom.ln();
        let out: Vec<f64> = av
            .iter()
            .zip(mask)
            .map(|(&x, &m)| {
                if m {
                    x - max - log_denom
                } else {
                    MASKED_LOG_PROB
                }
            })
            .collect();
        Ok(self.push(
            vec![*n],
            out,
            BackOp::MaskedLogSoftmax {
                a,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar loss: accumulates d(loss)/d(param) into
    /// `grads` for every parameter leaf reachable from `loss`. Calling this
    /// repeatedly accumulates unless the map is cleared or drained.
    pub fn backward(&self, loss: Var, grads: &mut GradMap) -> Result<(), AutodiffError> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(go) = adjoints[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            // Seeds an input's adjoint buffer on first touch.
            macro_rules! adj {
                ($v:expr) => {{
                    let len = self.value($v).len();
                    adjoints[$v.0].get_or_insert_with(|| vec![0.0; len])
                }};
            }
            match &node.op {
                BackOp::Input => {}
                BackOp::Param(id) => grads.accumulate(*id, &node.shape, &go),
                BackOp::MatMul { a, b } => {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let k = if self.shape(*b).len() == 2 {
                        self.shape(*b)[1]
                    } else {
                        1
                    };
                    {
                        let bv = self.value(*b);
                        let da = adj!(*a);
                        for i in 0..r {
                            for j in 0..c {
                                let mut acc = 0.0;
                                for l in 0..k {
                                    acc += go[i * k + l] * bv[j * k + l];
                                }
                                da[i * c + j] += acc;
                            }
                        }
                    }
                    {
                        let av = self.value(*a);
                        let db = adj!(*b);
                        for j in 0..c {
                            for l in 0..k {
                                let mut acc = 0.0;
                                for i in 0..r {
                                    acc += av[i * c + j] * go[i * k + l];
                                }
                                db[j * k + l] += acc;
                            }
                        }
                    }
                }
                BackOp::Add { a, b } => {
                    for (d, &g) in adj!(*a).iter_mut().zip(&go) {
                        *d += g;
                    }
                    for (d, &g) in adj!(*b).iter_mut().zip(&go) {
                        *d += g;
                    }
                }
                BackOp::Sub { a, b } => {
                    for (d, &g) in adj!(*a).iter_mut().zip(&go) {
                        *d += g;
                    }
                    for (d, &g) in adj!(*b).iter_mut().zip(&go) {
                        *d -= g;
                    }
                }
                BackOp::AddBias { m, bias } => {
                    let mshape = self.shape(*m).to_vec();
                    let (r, c) = (mshape[0], mshape[1]);
                    for (d, &g) in adj!(*m).iter_mut().zip(&go) {
                        *d += g;
                    }
                    let db = adj!(*bias);
                    for i in 0..r {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += go[i * c + j];
                        }
                        db[i] += acc;
                    }
                }
                BackOp::Mul { a, b } => {
                    {
                        let bv = self.value(*b);
                        for ((d, &g), &y) in adj!(*a).iter_mut().zip(&go).zip(bv) {
                            *d += g * y;
                        }
                    }
                    {
                        let av = self.value(*a);
                        for ((d, &g), &x) in adj!(*b).iter_mut().zip(&go).zip(av) {
                            *d += g * x;
                        }
                    }
                }
                BackOp::Scale { a, k } => {
                    let k = *k;
                    for (d, &g) in adj!(*a).iter_mut().zip(&go) {
                        *d += k * g;
                    }
                }
                BackOp::Sigmoid { a } => {
                    let out = node.values.as_slice();
                    for ((d, &g), &s) in adj!(*a).iter_mut().zip(&go).zip(out) {
                        *d += g * s * (1.0 - s);
                    }
                }
                BackOp::Tanh { a } => {
                    let out = node.values.as_slice();
                    for ((d, &g), &t) in adj!(*a).iter_mut().zip(&go).zip(out) {
                        *d += g * (1.0 - t * t);
                    }
                }
                BackOp::Relu { a } => {
                    let input = self.value(*a);
                    for ((d, &g), &x) in adj!(*a).iter_mut().zip(&go).zip(input) {
                        if x > 0.0 {
                            *d += g;
                        }
                    }
                }
                BackOp::Exp { a } => {
                    let out = node.values.as_slice();
                    for ((d, &g), &e) in adj!(*a).iter_mut().zip(&go).zip(out) {
                        *d += g * e;
                    }
                }
                BackOp::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let dp = adj!(p);
                        for (d, &g) in dp.iter_mut().zip(&go[offset..offset + len]) {
                            *d += g;
                        }
                        offset += len;
                    }
                }
                BackOp::SliceRows { a, start } => {
                    let cols = match self.shape(*a) {
                        [_, c] => *c,
                        _ => 1,
                    };
                    let da = adj!(*a);
                    let offset = start * cols;
                    for (i, &g) in go.iter().enumerate() {
                        da[offset + i] += g;
                    }
                }
                BackOp::Pick { a, index } => {
                    adj!(*a)[*index] += go[0];
                }
                BackOp::PickCol { a, col } => {
                    let c = self.shape(*a)[1];
                    let da = adj!(*a);
                    for (i, &g) in go.iter().enumerate() {
                        da[i * c + col] += g;
                    }
                }
                BackOp::Sum { a } => {
                    for d in adj!(*a).iter_mut() {
                        *d += go[0];
                    }
                }
                BackOp::SumRows { a } => {
                    let ashape = self.shape(*a).to_vec();
                    let (r, c) = (ashape[0], ashape[1]);
                    let da = adj!(*a);
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += go[j];
                        }
                    }
                }
                BackOp::Mean { a } => {
                    let n = self.value(*a).len() as f64;
                    let g = go[0] / n;
                    for d in adj!(*a).iter_mut() {
                        *d += g;
                    }
                }
                BackOp::MaskedLogSoftmax { a, mask } => {
                    // d(logp_i)/d(y_j) = delta_ij - p_j over unmasked pairs;
                    // masked logits receive exactly zero gradient.
                    let out = node.values.as_slice();
                    let upstream_sum: f64 = go
                        .iter()
                        .zip(mask)
                        .filter(|(_, &m)| m)
                        .map(|(&g, _)| g)
                        .sum();
                    let da = adj!(*a);
                    for j in 0..out.len() {
                        if mask[j] {
                            let p = out[j].exp();
                            da[j] += go[j] - p * upstream_sum;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert_eq!(
            Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err(),
            AutodiffError::DataLength {
                len: 5,
                shape: vec![2, 3]
            }
        );
    }

    #[test]
    fn forward_op_basics() {
        let mut g = Graph::new();
        let x = g.vector_input(vec![-1.0, 2.0]);
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 2.0]);

        let s = g.vector_input(vec![0.0]);
        let sv = g.sigmoid(s);
        assert_eq!(g.value(sv), &[0.5]);

        let eye = g.input(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let v = g.vector_input(vec![4.0, -2.0, 7.0]);
        let out = g.matmul(eye, v).unwrap();
        assert_eq!(g.value(out), &[4.0, -2.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.vector_input(vec![0.0; 2]);
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2]
            }
        );
        let c = g.vector_input(vec![0.0; 3]);
        assert!(g.add(b, c).is_err());
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let p = Param::new("x", Tensor::vector(vec![1.0, -2.0, 3.0]));
        let x = g.param(&p);
        let loss = g.sum(x);
        let mut grads = GradMap::new();
        g.backward(loss, &mut grads).unwrap();
        assert_eq!(grads.get(&p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let p = Param::new("x", Tensor::vector(vec![1.0, 2.0]));
        let x = g.param(&p);
        let mut grads = GradMap::new();
        assert_eq!(
            g.backward(x, &mut grads).unwrap_err(),
            AutodiffError::NonScalarLoss { shape: vec![2] }
        );
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let p = Param::new("x", Tensor::vector(vec![2.0]));
        let x = g.param(&p);
        let loss = g.sum(x);
        let mut grads = GradMap::new();
        g.backward(loss, &mut grads).unwrap();
        g.backward(loss, &mut grads).unwrap();
        assert_eq!(grads.get(&p).unwrap().data(), &[2.0]);
        grads.clear();
        assert!(grads.get(&p).is_none());
    }

    #[test]
    fn param_leaves_are_cached_per_graph() {
        let mut g = Graph::new();
        let p = Param::new("w", Tensor::vector(vec![1.0]));
        let a = g.param(&p);
        let b = g.param(&p);
        assert_eq!(a, b);
    }

    #[test]
    fn masked_log_softmax_values() {
        let mut g = Graph::new();
        // Single unmasked entry gets log-probability 0.
        let y = g.vector_input(vec![13.0, -4.0, 2.0]);
        let lp = g.masked_log_softmax(y, &[false, true, false]).unwrap();
        assert_eq!(g.value(lp)[1], 0.0);
        assert_eq!(g.value(lp)[0], MASKED_LOG_PROB);

        // Symmetric logits split evenly.
        let y = g.vector_input(vec![3.0, 3.0]);
        let lp = g.masked_log_softmax(y, &[true, true]).unwrap();
        let probs: Vec<f64> = g.value(lp).iter().map(|&l| l.exp()).collect();
        assert!((probs[0] - 0.5).abs() < 1e-15);
        assert!((probs[1] - 0.5).abs() < 1e-15);

        // Direct evaluation of the masked-softmax formula.
        let y = g.vector_input(vec![1.0, 2.0, 3.0]);
        let lp = g.masked_log_softmax(y, &[true, false, true]).unwrap();
        let probs: Vec<f64> = g.value(lp).iter().map(|&l| l.exp()).collect();
        let denom = 1.0f64.exp() + 3.0f64.exp();
        assert!((probs[0] - 1.0f64.exp() / denom).abs() < 1e-12);
        assert_eq!(probs[1], 0.0);
        assert!((probs[2] - 3.0f64.exp() / denom).abs() < 1e-12);
        let total: f64 = probs.iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);

        let y = g.vector_input(vec![1.0, 2.0]);
        assert_eq!(
            g.masked_log_softmax(y, &[false, false]).unwrap_err(),
            AutodiffError::DegenerateMask
        );
    }

    #[test]
    fn masked_logits_get_zero_gradient() {
        let mut g = Graph::new();
        let p = Param::new("y", Tensor::vector(vec![0.3, -1.0, 2.0]));
        let y = g.param(&p);
        let lp = g.masked_log_softmax(y, &[true, false, true]).unwrap();
        let loss = g.sum(lp);
        let mut grads = GradMap::new();
        g.backward(loss, &mut grads).unwrap();
        let gy = grads.get(&p).unwrap().data();
        assert_eq!(gy[1], 0.0);
        assert!(gy[0] != 0.0 && gy[2] != 0.0);
    }

    #[test]
    fn slice_concat_pick_roundtrip_gradients() {
        let mut g = Graph::new();
        let p = Param::new("v", Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let v = g.param(&p);
        let head = g.slice_rows(v, 0, 2).unwrap();
        let tail = g.slice_rows(v, 2, 2).unwrap();
        let swapped = g.concat(&[tail, head]).unwrap();
        assert_eq!(g.value(swapped), &[3.0, 4.0, 1.0, 2.0]);
        let picked = g.pick(swapped, 0).unwrap();
        let mut grads = GradMap::new();
        g.backward(picked, &mut grads).unwrap();
        assert_eq!(grads.get(&p).unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn sum_rows_and_pick_col() {
        let mut g = Graph::new();
        let m = g.input(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let s = g.sum_rows(m).unwrap();
        assert_eq!(g.value(s), &[5.0, 7.0, 9.0]);
        let col = g.pick_col(m, 2).unwrap();
        assert_eq!(g.value(col), &[3.0, 6.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let p = Param::new(
                "w",
                Tensor::matrix(2, 2, vec![0.5, -0.25, 1.5, 2.0]).unwrap(),
            );
            let mut g = Graph::new();
            let w = g.param(&p);
            let x = g.vector_input(vec![0.7, -0.3]);
            let y = g.matmul(w, x).unwrap();
            let t = g.tanh(y);
            let loss = g.mean(t).unwrap();
            let mut grads = GradMap::new();
            g.backward(loss, &mut grads).unwrap();
            (g.scalar_value(loss), grads.get(&p).unwrap().data().to_vec())
        };
        assert_eq!(build(), build());
    }
}
