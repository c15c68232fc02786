//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive operation applied during a forward
//! pass. [`Tape::backward`] replays the record in reverse, accumulating
//! vector–Jacobian products into every reachable differentiable node.
//! Double precision is used throughout so analytic gradients can be checked
//! against central finite differences at tight tolerances.
//!
//! Tensors on the tape are immutable once created; an operation always
//! allocates a new node. Model parameters live outside the tape in a
//! [`ParamStore`] and are attached per-episode as `Param` leaves, so several
//! episodes can share one frozen parameter snapshot across threads.

use crate::error::{Error, Result};
use crate::glimpse::kernel;

/// Dense n-dimensional array of `f64` values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    vals: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, vals: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            vals.len(),
            "tensor shape {:?} does not match value count {}",
            shape,
            vals.len()
        );
        Tensor { shape, vals }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            vals: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            vals: vec![v],
        }
    }

    pub fn vector(vals: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![vals.len()],
            vals,
        }
    }

    pub fn matrix(rows: usize, cols: usize, vals: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], vals)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn vals(&self) -> &[f64] {
        &self.vals
    }

    pub fn vals_mut(&mut self) -> &mut [f64] {
        &mut self.vals
    }

    pub fn numel(&self) -> usize {
        self.vals.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.vals.len() == 1
    }

    /// Value of a rank-2 tensor at (row, col).
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.vals[row * self.shape[1] + col]
    }
}

/// Which loss owns a parameter. The state/action split is load-bearing:
/// the training step asserts that gradients never cross it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum System {
    State,
    Action,
    Baseline,
}

/// Handle to a registered parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub u32);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub system: System,
    pub value: Tensor,
}

/// Owner of all trainable parameters, in registration order.
///
/// Registration order is the canonical layout used by checkpoints and by
/// the optimizer state, so it must be deterministic for a given config.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, system: System, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len() as u32);
        self.entries.push(ParamEntry {
            name,
            system,
            value,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0 as usize]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0 as usize].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0 as usize].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| ParamId(i as u32))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len() as u32).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i as u32), e))
    }
}

/// Per-parameter gradient accumulator, aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Vec<f64>>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> GradStore {
        GradStore {
            grads: store
                .entries
                .iter()
                .map(|e| vec![0.0; e.value.numel()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0 as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0 as usize]
    }

    pub fn add(&mut self, other: &GradStore) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            for x in g.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Max absolute gradient component, for divergence diagnostics.
    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global norm is at most `max_norm` (no-op if ≤ 0).
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        if max_norm <= 0.0 {
            return;
        }
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Src {
    /// Untracked value: constants, detached copies.
    Const,
    /// Tracked leaf owning its values (used by tests and ad-hoc graphs).
    Leaf,
    /// Tracked leaf whose values live in the episode's `ParamStore`.
    Param(ParamId),
    Op(Op),
}

#[derive(Debug, Clone)]
enum Op {
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Relu { a: Var },
    LeakyRelu { a: Var, slope: f64 },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Mean { a: Var },
    SumSquares { a: Var },
    Concat { parts: Vec<Var> },
    Slice { a: Var, start: usize },
    Reshape { a: Var },
    /// Square patch of the given side sampled bilinearly around `loc`.
    Patch { img: Var, loc: Var, side: usize },
    /// Whole-image bilinear resize to the given side.
    Downsample { img: Var, side: usize },
    SoftmaxXent { logits: Var, target: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    /// Empty for `Param` nodes; their values are read from the store.
    vals: Vec<f64>,
    src: Src,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Tape<'static> {
        Tape {
            params: None,
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Tape<'p> {
        Tape {
            params: Some(params),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, vals: Vec<f64>, src: Src, needs_grad: bool) -> Var {
        debug_assert!(matches!(src, Src::Param(_)) || shape.iter().product::<usize>() == vals.len());
        self.nodes.push(Node {
            shape,
            vals,
            src,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() as u32 - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.vals, Src::Const, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Tracked leaf; gradients accumulate on the tape node itself.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.vals, Src::Leaf, true)
    }

    /// Attach a stored parameter as a tracked leaf.
    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self
            .params
            .expect("Tape::param requires a tape built with_params");
        let shape = store.value(id).shape().to_vec();
        self.push(shape, Vec::new(), Src::Param(id), true)
    }

    /// Same values, no gradient flow to the source.
    pub fn detach(&mut self, v: Var) -> Var {
        let shape = self.shape(v).to_vec();
        let vals = self.vals(v).to_vec();
        self.push(shape, vals, Src::Const, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx()].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.idx()].shape.iter().product()
    }

    pub fn vals(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.idx()];
        match node.src {
            Src::Param(id) => self
                .params
                .expect("param node on a tape without a store")
                .value(id)
                .vals(),
            _ => &node.vals,
        }
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.vals(v).to_vec())
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.idx()].needs_grad
    }

    // ---- primitive operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (out_shape, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k1], [k2, n]) if k1 == k2 => (vec![*m, *n], *m, *k1, *n),
            ([m, k1], [k2]) if k1 == k2 => (vec![*m], *m, *k1, 1),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let mut out = vec![0.0; m * n];
        {
            let av = self.vals(a);
            let bv = self.vals(b);
            if n == 1 {
                for i in 0..m {
                    let row = &av[i * k..(i + 1) * k];
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += row[l] * bv[l];
                    }
                    out[i] = acc;
                }
            } else {
                for i in 0..m {
                    let row = &av[i * k..(i + 1) * k];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (l, &al) in row.iter().enumerate() {
                        let brow = &bv[l * n..(l + 1) * n];
                        for j in 0..n {
                            orow[j] += al * brow[j];
                        }
                    }
                }
            }
        }
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(out_shape, out, Src::Op(Op::Matmul { a, b }), ng))
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        src: Src,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let vals: Vec<f64> = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(shape, vals, src, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Src::Op(Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Src::Op(Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Src::Op(Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let vals: Vec<f64> = self.vals(a).iter().map(|&x| c * x).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs_grad(a);
        self.push(shape, vals, Src::Op(Op::Scale { a, c }), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, src: Src) -> Var {
        let vals: Vec<f64> = self.vals(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs_grad(a);
        self.push(shape, vals, src, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Src::Op(Op::Relu { a }))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Src::Op(Op::LeakyRelu { a, slope }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Src::Op(Op::Tanh { a }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Src::Op(Op::Sigmoid { a }))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.vals(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs_grad(a);
        self.push(vec![1], vec![m], Src::Op(Op::Mean { a }), ng)
    }

    /// Sum of squared entries, `‖a‖²`.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.vals(a).iter().map(|&x| x * x).sum();
        let ng = self.needs_grad(a);
        self.push(vec![1], vec![s], Src::Op(Op::SumSquares { a }), ng)
    }

    /// Concatenate rank-1 tensors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut vals = Vec::new();
        let mut ng = false;
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(Error::invalid(
                    "concat",
                    format!("expects rank-1 tensors, got shape {:?}", self.shape(p)),
                ));
            }
            vals.extend_from_slice(self.vals(p));
            ng |= self.needs_grad(p);
        }
        let n = vals.len();
        Ok(self.push(
            vec![n],
            vals,
            Src::Op(Op::Concat {
                parts: parts.to_vec(),
            }),
            ng,
        ))
    }

    /// Contiguous sub-vector of a rank-1 tensor.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        if self.shape(a).len() != 1 || start + len > self.numel(a) {
            return Err(Error::invalid(
                "slice",
                format!(
                    "range {start}..{} out of bounds for shape {:?}",
                    start + len,
                    self.shape(a)
                ),
            ));
        }
        let vals = self.vals(a)[start..start + len].to_vec();
        let ng = self.needs_grad(a);
        Ok(self.push(vec![len], vals, Src::Op(Op::Slice { a, start }), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(a) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let vals = self.vals(a).to_vec();
        let ng = self.needs_grad(a);
        Ok(self.push(shape, vals, Src::Op(Op::Reshape { a }), ng))
    }

    /// Bilinear square patch of side `side` centered at normalized location
    /// `loc`; see [`crate::glimpse`] for the coordinate convention.
    /// Differentiable in both the image and the location.
    pub fn extract_patch(&mut self, img: Var, loc: Var, side: usize) -> Result<Var> {
        let ishape = self.shape(img);
        if ishape.len() != 2 || ishape[0] != ishape[1] {
            return Err(Error::invalid(
                "extract_patch",
                format!("image must be square rank-2, got {ishape:?}"),
            ));
        }
        if self.numel(loc) != 2 {
            return Err(Error::invalid(
                "extract_patch",
                format!("location must have 2 entries, got {:?}", self.shape(loc)),
            ));
        }
        let n = ishape[0];
        let lv = self.vals(loc);
        let (lx, ly) = (lv[0], lv[1]);
        let out = kernel::patch_forward(self.vals(img), n, lx, ly, side);
        let ng = self.needs_grad(img) || self.needs_grad(loc);
        Ok(self.push(
            vec![side, side],
            out,
            Src::Op(Op::Patch { img, loc, side }),
            ng,
        ))
    }

    /// Bilinear resize of the whole image to `side × side`.
    pub fn downsample(&mut self, img: Var, side: usize) -> Result<Var> {
        let ishape = self.shape(img);
        if ishape.len() != 2 || ishape[0] != ishape[1] {
            return Err(Error::invalid(
                "downsample",
                format!("image must be square rank-2, got {ishape:?}"),
            ));
        }
        if side == 0 || side > ishape[0] {
            return Err(Error::invalid(
                "downsample",
                format!("target side {side} not in 1..={}", ishape[0]),
            ));
        }
        let n = ishape[0];
        let out = kernel::resize_forward(self.vals(img), n, side);
        let ng = self.needs_grad(img);
        Ok(self.push(
            vec![side, side],
            out,
            Src::Op(Op::Downsample { img, side }),
            ng,
        ))
    }

    /// Cross-entropy of a softmax over `logits` against a class index.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        if self.shape(logits).len() != 1 || target >= self.numel(logits) {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!(
                    "target {target} out of range for logits shape {:?}",
                    self.shape(logits)
                ),
            ));
        }
        let v = self.vals(logits);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - v[target];
        let ng = self.needs_grad(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Src::Op(Op::SoftmaxXent { logits, target }),
            ng,
        ))
    }

    // ---- reverse pass ----

    /// Accumulate `∂loss/∂node` for every tracked node reachable from `loss`.
    ///
    /// Resets any gradients from a previous call, so separate losses can be
    /// examined independently on one tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.idx()] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let op = match &self.nodes[i].src {
                Src::Op(op) => op.clone(),
                _ => continue,
            };
            let go = self.grads[i].take().expect("gradient present");
            self.backward_op(&op, &go);
            // keep the output gradient readable after the pass
            self.grads[i] = Some(go);
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<f64> {
        let n = self.numel(v);
        self.grads[v.idx()].get_or_insert_with(|| vec![0.0; n])
    }

    fn backward_op(&mut self, op: &Op, go: &[f64]) {
        match *op {
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let (m, k) = (sa[0], sa[1]);
                let n = if sb.len() == 2 { sb[1] } else { 1 };
                if self.needs_grad(a) {
                    let bv = self.vals(b).to_vec();
                    let ga = self.grad_buf(a);
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += go[i * n + j] * bv[l * n + j];
                            }
                            ga[i * k + l] += acc;
                        }
                    }
                }
                if self.needs_grad(b) {
                    let av = self.vals(a).to_vec();
                    let gb = self.grad_buf(b);
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        let grow = &go[i * n..(i + 1) * n];
                        for (l, &al) in arow.iter().enumerate() {
                            for j in 0..n {
                                gb[l * n + j] += al * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs_grad(v) {
                        let g = self.grad_buf(v);
                        for (x, &y) in g.iter_mut().zip(go) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.needs_grad(a) {
                    let g = self.grad_buf(a);
                    for (x, &y) in g.iter_mut().zip(go) {
                        *x += y;
                    }
                }
                if self.needs_grad(b) {
                    let g = self.grad_buf(b);
                    for (x, &y) in g.iter_mut().zip(go) {
                        *x -= y;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs_grad(a) {
                    let bv = self.vals(b).to_vec();
                    let g = self.grad_buf(a);
                    for i in 0..go.len() {
                        g[i] += go[i] * bv[i];
                    }
                }
                if self.needs_grad(b) {
                    let av = self.vals(a).to_vec();
                    let g = self.grad_buf(b);
                    for i in 0..go.len() {
                        g[i] += go[i] * av[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.needs_grad(a) {
                    let g = self.grad_buf(a);
                    for (x, &y) in g.iter_mut().zip(go) {
                        *x += c * y;
                    }
                }
            }
            Op::Relu { a } => {
                if self.needs_grad(a) {
                    let av = self.vals(a).to_vec();
                    let g = self.grad_buf(a);
                    for i in 0..go.len() {
                        if av[i] > 0.0 {
                            g[i] += go[i];
                        }
                    }
                }
            }
            Op::LeakyRelu { a, slope } => {
                if self.needs_grad(a) {
                    let av = self.vals(a).to_vec();
                    let g = self.grad_buf(a);
                    for i in 0..go.len() {
                        g[i] += go[i] * if av[i] > 0.0 { 1.0 } else { slope };
                    }
                }
            }
            Op::Tanh { a } => {
                if self.needs_grad(a) {
                    let av = self.vals(a).to_vec();
                    let g = self.grad_buf(a);
                    for i in 0..go.len() {
                        let t = av[i].tanh();
                        g[i] += go[i] * (1.0 - t * t);
                    }
                }
            }
            Op::Sigmoid { a } => {
                if self.needs_grad(a) {
                    let av = self.vals(a).to_vec();
                    let g = self.grad_buf(a);
                    for i in 0..go.len() {
                        let s = 1.0 / (1.0 + (-av[i]).exp());
                        g[i] += go[i] * s * (1.0 - s);
                    }
                }
            }
            Op::Mean { a } => {
                if self.needs_grad(a) {
                    let n = self.numel(a) as f64;
                    let g = self.grad_buf(a);
                    let c = go[0] / n;
                    for x in g.iter_mut() {
                        *x += c;
                    }
                }
            }
            Op::SumSquares { a } => {
                if self.needs_grad(a) {
                    let av = self.vals(a).to_vec();
                    let g = self.grad_buf(a);
                    for i in 0..av.len() {
                        g[i] += 2.0 * av[i] * go[0];
                    }
                }
            }
            Op::Concat { ref parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.numel(p);
                    if self.needs_grad(p) {
                        let g = self.grad_buf(p);
                        for i in 0..n {
                            g[i] += go[offset + i];
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { a, start } => {
                if self.needs_grad(a) {
                    let g = self.grad_buf(a);
                    for (i, &y) in go.iter().enumerate() {
                        g[start + i] += y;
                    }
                }
            }
            Op::Reshape { a } => {
                if self.needs_grad(a) {
                    let g = self.grad_buf(a);
                    for (x, &y) in g.iter_mut().zip(go) {
                        *x += y;
                    }
                }
            }
            Op::Patch { img, loc, side } => {
                let n = self.shape(img)[0];
                let lv = self.vals(loc).to_vec();
                let iv = self.vals(img).to_vec();
                if self.needs_grad(img) {
                    let g = self.grad_buf(img);
                    kernel::patch_backward_img(go, n, lv[0], lv[1], side, g);
                }
                if self.needs_grad(loc) {
                    let (dlx, dly) = kernel::patch_backward_loc(go, &iv, n, lv[0], lv[1], side);
                    let g = self.grad_buf(loc);
                    g[0] += dlx;
                    g[1] += dly;
                }
            }
            Op::Downsample { img, side } => {
                if self.needs_grad(img) {
                    let n = self.shape(img)[0];
                    let g = self.grad_buf(img);
                    kernel::resize_backward(go, n, side, g);
                }
            }
            Op::SoftmaxXent { logits, target } => {
                if self.needs_grad(logits) {
                    let v = self.vals(logits).to_vec();
                    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = v.iter().map(|&x| (x - max).exp()).sum();
                    let g = self.grad_buf(logits);
                    for i in 0..v.len() {
                        let p = (v[i] - max).exp() / denom;
                        let delta = if i == target { 1.0 } else { 0.0 };
                        g[i] += go[0] * (p - delta);
                    }
                }
            }
        }
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.idx()].as_deref()
    }

    /// Like [`Tape::grad`] but materializing zeros for untouched nodes.
    pub fn grad_or_zero(&self, v: Var) -> Tensor {
        match self.grad(v) {
            Some(g) => Tensor::new(self.shape(v).to_vec(), g.to_vec()),
            None => Tensor::zeros(self.shape(v).to_vec()),
        }
    }

    /// Fold this tape's parameter gradients into an accumulator.
    pub fn param_grads_into(&self, out: &mut GradStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Src::Param(id) = node.src {
                if let Some(g) = &self.grads[i] {
                    let dst = out.get_mut(id);
                    for (x, y) in dst.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }
    }
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Tape::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_leaky_relu_definitions() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.5]));
        let r = tape.relu(x);
        assert_eq!(tape.vals(r), &[0.0, 0.5]);
        let y = tape.constant(Tensor::vector(vec![-2.0]));
        let l = tape.leaky_relu(y, 0.2);
        assert!((tape.vals(l)[0] - (-0.4)).abs() < 1e-15);
    }

    #[test]
    fn sum_squares_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let s = tape.sum_squares(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn chain_rule_through_scale_and_square() {
        // loss = (2x)^2 at x = 3 -> dloss/dx = 8x = 24
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let two_x = tape.scale(x, 2.0);
        let loss = tape.sum_squares(two_x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.vals(loss), &[36.0]);
        assert_eq!(tape.grad(x).unwrap(), &[24.0]);
    }

    #[test]
    fn disjoint_component_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let sy = tape.sum_squares(y);
        let _unused = tape.sum_squares(x);
        tape.backward(sy).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad_or_zero(x).vals(), &[0.0, 0.0]);
        assert_eq!(tape.grad(y).unwrap(), &[6.0, 8.0]);
    }

    #[test]
    fn detach_blocks_gradient_but_keeps_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.5, -2.0]));
        let w = tape.leaf(Tensor::vector(vec![0.5, 3.0]));
        let xd = tape.detach(x);
        assert_eq!(tape.vals(xd), tape.vals(x));
        let prod = tape.mul(w, xd).unwrap();
        let loss = tape.sum_squares(prod);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none(), "gradient must not reach through detach");
        assert!(tape.grad(w).is_some(), "gradient must still reach w");
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = tape.constant(Tensor::vector(vec![0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn matmul_matrix_vector_and_matrix_matrix_agree() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let x = tape.constant(Tensor::vector(vec![5.0, 6.0]));
        let y = tape.matmul(a, x).unwrap();
        assert_eq!(tape.vals(y), &[17.0, 39.0]);
        let xm = tape.constant(Tensor::matrix(2, 1, vec![5.0, 6.0]));
        let ym = tape.matmul(a, xm).unwrap();
        assert_eq!(tape.vals(ym), &[17.0, 39.0]);
    }

    #[test]
    fn backward_twice_resets_accumulators() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let s = tape.sum_squares(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn param_grads_accumulate_into_store() {
        let mut store = ParamStore::new();
        let id = store.register("w", System::State, Tensor::vector(vec![1.0, -1.0]));
        let mut tape = Tape::with_params(&store);
        let w = tape.param(id);
        let s = tape.sum_squares(w);
        tape.backward(s).unwrap();
        let mut grads = GradStore::zeros_like(&store);
        tape.param_grads_into(&mut grads);
        assert_eq!(grads.get(id), &[2.0, -2.0]);
    }
}
