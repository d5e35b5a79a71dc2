//! Dense-tensor core with a reverse-mode tape.
//!
//! All model computation is expressed through [`Graph`]: forward values are
//! computed eagerly as ops are recorded, and `backward` replays the tape in
//! exact reverse order. Tensors are rank-1 or rank-2, row-major. The engine
//! is generic over the float width: `f32` for training, `f64` for gradient
//! checks.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Result, SgcnError};
use crate::rng::Rng;

pub mod adam;
pub mod gradcheck;

/// Scalar type bound for the engine. `f32` and `f64` only.
pub trait Real:
    num_traits::Float + std::fmt::Debug + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// A named parameter buffer, independent of any tape.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Param<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Param { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64(rng.uniform_range(lo, hi)))
            .collect();
        Param { shape, data }
    }
}

/// Ordered, name-addressed parameter set. BTreeMap keeps iteration (and
/// therefore Adam updates and checkpoints) deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: BTreeMap<String, Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, p: Param<F>) {
        self.params.insert(name.to_string(), p);
    }

    pub fn get(&self, name: &str) -> Result<&Param<F>> {
        self.params
            .get(name)
            .ok_or_else(|| SgcnError::Data(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<F>)> {
        self.params.iter_mut()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// Convert every buffer to another float width.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for (name, p) in &self.params {
            out.insert(
                name,
                Param::new(
                    p.shape.clone(),
                    p.data.iter().map(|&x| G::from_f64(x.to_f64())).collect(),
                ),
            );
        }
        out
    }
}

/// Gradients keyed by parameter name, as produced by [`Graph::param_grads`].
pub type GradMap<F> = BTreeMap<String, Vec<F>>;

struct Val<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

enum Op<F> {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Transpose {
        a: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
        broadcast: bool,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    AffineConst {
        a: TensorId,
        mul: F,
    },
    ScaleBy {
        a: TensorId,
        s: TensorId,
    },
    Relu {
        a: TensorId,
    },
    Sigmoid {
        a: TensorId,
    },
    Tanh {
        a: TensorId,
    },
    ConcatCols {
        parts: Vec<TensorId>,
    },
    StackRows {
        parts: Vec<TensorId>,
    },
    Row {
        a: TensorId,
        i: usize,
    },
    Embed {
        table: TensorId,
        ids: Vec<usize>,
    },
    MeanRowsMasked {
        a: TensorId,
        mask: Vec<bool>,
    },
    MaskedSoftmaxCol {
        a: TensorId,
        mask: Vec<bool>,
    },
    SoftmaxXent {
        logits: TensorId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<F>,
    },
    Dropout {
        a: TensorId,
        mask: Vec<F>,
    },
}

struct Node<F> {
    op: Op<F>,
    out: TensorId,
}

/// Wengert tape plus value arena. One graph per forward/backward pass.
pub struct Graph<F: Real> {
    vals: Vec<Val<F>>,
    nodes: Vec<Node<F>>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<F>>>,
    tracked: Vec<(String, TensorId)>,
    param_cache: HashMap<(usize, String), TensorId>,
    pub training: bool,
}

impl<F: Real> Graph<F> {
    pub fn new(training: bool) -> Self {
        Graph {
            vals: Vec::new(),
            nodes: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            tracked: Vec::new(),
            param_cache: HashMap::new(),
            training,
        }
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<F>, op: Op<F>, requires: bool) -> Result<TensorId> {
        debug_assert_eq!(rows * cols, data.len());
        if data.iter().any(|x| !x.is_finite()) {
            return Err(SgcnError::Numeric(
                "non-finite value produced in forward pass".into(),
            ));
        }
        let id = TensorId(self.vals.len());
        self.vals.push(Val { rows, cols, data });
        self.requires.push(requires);
        self.grads.push(None);
        self.nodes.push(Node { op, out: id });
        Ok(id)
    }

    fn req(&self, id: TensorId) -> bool {
        self.requires[id.0]
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let v = &self.vals[id.0];
        (v.rows, v.cols)
    }

    pub fn value(&self, id: TensorId) -> &[F] {
        &self.vals[id.0].data
    }

    /// Scalar extraction; the tensor must hold exactly one element.
    pub fn item(&self, id: TensorId) -> F {
        assert_eq!(self.vals[id.0].data.len(), 1);
        self.vals[id.0].data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }

    fn shape_vec(&self, id: TensorId) -> Vec<usize> {
        let (r, c) = self.shape(id);
        vec![r, c]
    }

    // ---- leaves ----

    /// Constant tensor (no gradient).
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<F>) -> TensorId {
        self.push(rows, cols, data, Op::Leaf, false)
            .expect("constant must be finite")
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> TensorId {
        self.constant(rows, cols, vec![F::zero(); rows * cols])
    }

    /// Insert a parameter from a store as a differentiable leaf and track it
    /// by name so its gradient can be collected after backward. Repeated
    /// fetches of the same name return the same leaf. Rank-1 shapes [n]
    /// enter the graph as n-by-1 columns.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<TensorId> {
        // Key the cache by store identity too: mixing several stores on one
        // tape (comparison tests) must not alias their leaves.
        let key = (store as *const ParamStore<F> as usize, name.to_string());
        if let Some(&id) = self.param_cache.get(&key) {
            return Ok(id);
        }
        let p = store.get(name)?;
        let (rows, cols) = match p.shape.len() {
            1 => (p.shape[0], 1),
            2 => (p.shape[0], p.shape[1]),
            r => {
                return Err(SgcnError::Config(format!(
                    "parameter {name} has unsupported rank {r}"
                )))
            }
        };
        let id = self.push(rows, cols, p.data.clone(), Op::Leaf, true)?;
        self.tracked.push((name.to_string(), id));
        self.param_cache.insert(key, id);
        Ok(id)
    }

    /// Gradients of all tracked parameters after `backward`. Parameters the
    /// loss does not reach get zero gradients.
    pub fn param_grads(&self) -> GradMap<F> {
        let mut out = GradMap::new();
        for (name, id) in &self.tracked {
            let g = match &self.grads[id.0] {
                Some(g) => g.clone(),
                None => vec![F::zero(); self.vals[id.0].data.len()],
            };
            out.insert(name.clone(), g);
        }
        out
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(SgcnError::Dim {
                op: "matmul",
                lhs: self.shape_vec(a),
                rhs: self.shape_vec(b),
            });
        }
        let mut out = vec![F::zero(); m * n];
        gemm_nn(
            m,
            k,
            n,
            &self.vals[a.0].data,
            &self.vals[b.0].data,
            &mut out,
        );
        let req = self.req(a) || self.req(b);
        self.push(m, n, out, Op::Matmul { a, b }, req)
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let src = &self.vals[a.0].data;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let req = self.req(a);
        self.push(n, m, out, Op::Transpose { a }, req)
    }

    /// Elementwise add; also broadcasts a 1-by-n row vector over every row
    /// of an m-by-n left operand.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let (bm, bn) = self.shape(b);
        let broadcast = if (bm, bn) == (m, n) {
            false
        } else if bm == 1 && bn == n {
            true
        } else {
            return Err(SgcnError::Dim {
                op: "add",
                lhs: self.shape_vec(a),
                rhs: self.shape_vec(b),
            });
        };
        let av = &self.vals[a.0].data;
        let bv = &self.vals[b.0].data;
        let mut out = Vec::with_capacity(m * n);
        if broadcast {
            for i in 0..m {
                for j in 0..n {
                    out.push(av[i * n + j] + bv[j]);
                }
            }
        } else {
            out.extend(av.iter().zip(bv).map(|(&x, &y)| x + y));
        }
        let req = self.req(a) || self.req(b);
        self.push(m, n, out, Op::Add { a, b, broadcast }, req)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            return Err(SgcnError::Dim {
                op: "mul",
                lhs: self.shape_vec(a),
                rhs: self.shape_vec(b),
            });
        }
        let out = self.vals[a.0]
            .data
            .iter()
            .zip(&self.vals[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let req = self.req(a) || self.req(b);
        self.push(m, n, out, Op::Mul { a, b }, req)
    }

    /// out = mul * a + add, elementwise with scalar constants.
    pub fn affine_const(&mut self, a: TensorId, mul: F, add: F) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let out = self.vals[a.0].data.iter().map(|&x| mul * x + add).collect();
        let req = self.req(a);
        self.push(m, n, out, Op::AffineConst { a, mul }, req)
    }

    pub fn scale(&mut self, a: TensorId, c: F) -> Result<TensorId> {
        self.affine_const(a, c, F::zero())
    }

    /// out = s * a where s is a 1-element tensor on the tape.
    pub fn scale_by(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        if self.vals[s.0].data.len() != 1 {
            return Err(SgcnError::Dim {
                op: "scale_by",
                lhs: self.shape_vec(a),
                rhs: self.shape_vec(s),
            });
        }
        let sv = self.vals[s.0].data[0];
        let (m, n) = self.shape(a);
        let out = self.vals[a.0].data.iter().map(|&x| sv * x).collect();
        let req = self.req(a) || self.req(s);
        self.push(m, n, out, Op::ScaleBy { a, s }, req)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let out = self.vals[a.0]
            .data
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let req = self.req(a);
        self.push(m, n, out, Op::Relu { a }, req)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let one = F::one();
        let out = self.vals[a.0]
            .data
            .iter()
            .map(|&x| one / (one + (-x).exp()))
            .collect();
        let req = self.req(a);
        self.push(m, n, out, Op::Sigmoid { a }, req)
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        let out = self.vals[a.0].data.iter().map(|&x| x.tanh()).collect();
        let req = self.req(a);
        self.push(m, n, out, Op::Tanh { a }, req)
    }

    /// Concatenate along columns; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        let mut n = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pm != m {
                return Err(SgcnError::Dim {
                    op: "concat_cols",
                    lhs: self.shape_vec(parts[0]),
                    rhs: self.shape_vec(p),
                });
            }
            n += pn;
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let (_, pn) = self.shape(p);
                let row = &self.vals[p.0].data[i * pn..(i + 1) * pn];
                out.extend_from_slice(row);
            }
        }
        let req = parts.iter().any(|&p| self.req(p));
        self.push(
            m,
            n,
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            req,
        )
    }

    /// Stack 1-by-d rows into a T-by-d matrix.
    pub fn stack_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty());
        let (r0, d) = self.shape(parts[0]);
        if r0 != 1 {
            return Err(SgcnError::Dim {
                op: "stack_rows",
                lhs: self.shape_vec(parts[0]),
                rhs: vec![1, d],
            });
        }
        let mut out = Vec::with_capacity(parts.len() * d);
        for &p in parts {
            if self.shape(p) != (1, d) {
                return Err(SgcnError::Dim {
                    op: "stack_rows",
                    lhs: vec![1, d],
                    rhs: self.shape_vec(p),
                });
            }
            out.extend_from_slice(&self.vals[p.0].data);
        }
        let req = parts.iter().any(|&p| self.req(p));
        self.push(
            parts.len(),
            d,
            out,
            Op::StackRows {
                parts: parts.to_vec(),
            },
            req,
        )
    }

    /// Extract row i as a 1-by-d tensor.
    pub fn row(&mut self, a: TensorId, i: usize) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        assert!(i < m, "row {i} out of {m}");
        let out = self.vals[a.0].data[i * n..(i + 1) * n].to_vec();
        let req = self.req(a);
        self.push(1, n, out, Op::Row { a, i }, req)
    }

    /// Gather rows of an embedding table by id.
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (v, d) = self.shape(table);
        for &id in ids {
            if id >= v {
                return Err(SgcnError::Vocab(format!(
                    "embedding id {id} out of range for table of {v} rows"
                )));
            }
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&self.vals[table.0].data[id * d..(id + 1) * d]);
        }
        let req = self.req(table);
        self.push(
            ids.len(),
            d,
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            req,
        )
    }

    /// Mean of unmasked rows; at least one mask entry must be true.
    pub fn mean_rows_masked(&mut self, a: TensorId, mask: &[bool]) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        assert_eq!(mask.len(), m);
        let k = mask.iter().filter(|&&b| b).count();
        if k == 0 {
            return Err(SgcnError::Data("mean over fully masked tensor".into()));
        }
        let inv = F::from_f64(1.0 / k as f64);
        let mut out = vec![F::zero(); n];
        for i in 0..m {
            if mask[i] {
                for j in 0..n {
                    out[j] = out[j] + self.vals[a.0].data[i * n + j] * inv;
                }
            }
        }
        let req = self.req(a);
        self.push(
            1,
            n,
            out,
            Op::MeanRowsMasked {
                a,
                mask: mask.to_vec(),
            },
            req,
        )
    }

    /// Softmax over the unmasked entries of an n-by-1 column; masked entries
    /// get weight exactly 0.
    pub fn masked_softmax_col(&mut self, a: TensorId, mask: &[bool]) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if n != 1 {
            return Err(SgcnError::Dim {
                op: "masked_softmax_col",
                lhs: self.shape_vec(a),
                rhs: vec![m, 1],
            });
        }
        assert_eq!(mask.len(), m);
        if !mask.iter().any(|&b| b) {
            return Err(SgcnError::Data("softmax over fully masked column".into()));
        }
        let src = &self.vals[a.0].data;
        let mut max = F::neg_infinity();
        for i in 0..m {
            if mask[i] && src[i] > max {
                max = src[i];
            }
        }
        let mut out = vec![F::zero(); m];
        let mut sum = F::zero();
        for i in 0..m {
            if mask[i] {
                let e = (src[i] - max).exp();
                out[i] = e;
                sum = sum + e;
            }
        }
        for x in &mut out {
            *x = *x / sum;
        }
        let req = self.req(a);
        self.push(
            m,
            1,
            out,
            Op::MaskedSoftmaxCol {
                a,
                mask: mask.to_vec(),
            },
            req,
        )
    }

    /// Mean over unmasked positions of -log softmax(logits)[target],
    /// stabilized by max subtraction. Returns a 1-by-1 scalar.
    pub fn softmax_xent(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<TensorId> {
        let (m, v) = self.shape(logits);
        assert_eq!(targets.len(), m);
        assert_eq!(mask.len(), m);
        let k = mask.iter().filter(|&&b| b).count();
        if k == 0 {
            return Err(SgcnError::Data("cross-entropy over fully masked rows".into()));
        }
        for i in 0..m {
            if mask[i] && targets[i] >= v {
                return Err(SgcnError::Vocab(format!(
                    "target id {} out of range for vocabulary of size {v}",
                    targets[i]
                )));
            }
        }
        let src = &self.vals[logits.0].data;
        let mut probs = vec![F::zero(); m * v];
        let mut loss = F::zero();
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[i * v + j] = e;
                sum = sum + e;
            }
            for j in 0..v {
                probs[i * v + j] = probs[i * v + j] / sum;
            }
            loss = loss - (row[targets[i]] - max - sum.ln());
        }
        loss = loss / F::from_f64(k as f64);
        let req = self.req(logits);
        self.push(
            1,
            1,
            vec![loss],
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            req,
        )
    }

    /// Inverted dropout: in training mode zero each element with probability
    /// p and scale survivors by 1/(1-p); in eval mode this is the identity.
    pub fn dropout(&mut self, a: TensorId, p: f64, rng: &mut Rng) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(SgcnError::Config(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        let (m, n) = self.shape(a);
        let keep = F::from_f64(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..m * n)
            .map(|_| if rng.uniform() < p { F::zero() } else { keep })
            .collect();
        let out = self.vals[a.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(&x, &k)| x * k)
            .collect();
        let req = self.req(a);
        self.push(m, n, out, Op::Dropout { a, mask }, req)
    }

    // ---- backward ----

    fn acc(&mut self, id: TensorId, delta: &[F]) {
        if !self.requires[id.0] {
            return;
        }
        let len = self.vals[id.0].data.len();
        let g = self.grads[id.0].get_or_insert_with(|| vec![F::zero(); len]);
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi = *gi + d;
        }
    }

    /// Reverse pass from a scalar loss. Gradients accumulate into every
    /// tensor with `requires_grad` reachable from the loss.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.vals[loss.0].data.len() != 1 {
            return Err(SgcnError::Dim {
                op: "backward",
                lhs: self.shape_vec(loss),
                rhs: vec![1, 1],
            });
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..self.nodes.len()).rev() {
            let out = self.nodes[idx].out;
            if !self.requires[out.0] {
                continue;
            }
            let g = match self.grads[out.0].take() {
                Some(g) => g,
                None => continue,
            };
            // Put the gradient back; callers may want to inspect it.
            self.grads[out.0] = Some(g.clone());
            self.step_backward(idx, &g);
        }
        Ok(())
    }

    fn step_backward(&mut self, idx: usize, g: &[F]) {
        // Ops are matched by index to avoid borrowing the node across the
        // accumulation calls.
        let (out_rows, out_cols) = {
            let out = self.nodes[idx].out;
            self.shape(out)
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.shape(a);
                let n = out_cols;
                if self.req(a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm_nt(m, n, k, g, &self.vals[b.0].data, &mut da);
                    self.acc(a, &da);
                }
                if self.req(b) {
                    let mut db = vec![F::zero(); k * n];
                    gemm_tn(m, k, n, &self.vals[a.0].data, g, &mut db);
                    self.acc(b, &db);
                }
            }
            Op::Transpose { a } => {
                let a = *a;
                let (m, n) = self.shape(a);
                let mut da = vec![F::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                self.acc(a, &da);
            }
            Op::Add { a, b, broadcast } => {
                let (a, b, broadcast) = (*a, *b, *broadcast);
                self.acc(a, g);
                if self.req(b) {
                    if broadcast {
                        let n = out_cols;
                        let mut db = vec![F::zero(); n];
                        for i in 0..out_rows {
                            for j in 0..n {
                                db[j] = db[j] + g[i * n + j];
                            }
                        }
                        self.acc(b, &db);
                    } else {
                        self.acc(b, g);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.req(a) {
                    let da: Vec<F> = self.vals[b.0]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&y, &gi)| y * gi)
                        .collect();
                    self.acc(a, &da);
                }
                if self.req(b) {
                    let db: Vec<F> = self.vals[a.0]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&x, &gi)| x * gi)
                        .collect();
                    self.acc(b, &db);
                }
            }
            Op::AffineConst { a, mul } => {
                let (a, mul) = (*a, *mul);
                let da: Vec<F> = g.iter().map(|&gi| mul * gi).collect();
                self.acc(a, &da);
            }
            Op::ScaleBy { a, s } => {
                let (a, s) = (*a, *s);
                let sv = self.vals[s.0].data[0];
                if self.req(a) {
                    let da: Vec<F> = g.iter().map(|&gi| sv * gi).collect();
                    self.acc(a, &da);
                }
                if self.req(s) {
                    let ds = self.vals[a.0]
                        .data
                        .iter()
                        .zip(g)
                        .fold(F::zero(), |acc, (&x, &gi)| acc + x * gi);
                    self.acc(s, &[ds]);
                }
            }
            Op::Relu { a } => {
                let a = *a;
                let da: Vec<F> = self.vals[a.0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| if x > F::zero() { gi } else { F::zero() })
                    .collect();
                self.acc(a, &da);
            }
            Op::Sigmoid { a } => {
                let a = *a;
                let out = self.nodes[idx].out;
                let da: Vec<F> = self.vals[out.0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&y, &gi)| gi * y * (F::one() - y))
                    .collect();
                self.acc(a, &da);
            }
            Op::Tanh { a } => {
                let a = *a;
                let out = self.nodes[idx].out;
                let da: Vec<F> = self.vals[out.0]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&y, &gi)| gi * (F::one() - y * y))
                    .collect();
                self.acc(a, &da);
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let n = out_cols;
                let mut col0 = 0;
                for p in parts {
                    let (pm, pn) = self.shape(p);
                    if self.req(p) {
                        let mut dp = vec![F::zero(); pm * pn];
                        for i in 0..pm {
                            for j in 0..pn {
                                dp[i * pn + j] = g[i * n + col0 + j];
                            }
                        }
                        self.acc(p, &dp);
                    }
                    col0 += pn;
                }
            }
            Op::StackRows { parts } => {
                let parts = parts.clone();
                let d = out_cols;
                for (i, p) in parts.into_iter().enumerate() {
                    if self.req(p) {
                        self.acc(p, &g[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::Row { a, i } => {
                let (a, i) = (*a, *i);
                if self.req(a) {
                    let (m, n) = self.shape(a);
                    let mut da = vec![F::zero(); m * n];
                    da[i * n..(i + 1) * n].copy_from_slice(g);
                    self.acc(a, &da);
                }
            }
            Op::Embed { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                if self.req(table) {
                    let (v, d) = self.shape(table);
                    let mut dt = vec![F::zero(); v * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] = dt[id * d + j] + g[r * d + j];
                        }
                    }
                    self.acc(table, &dt);
                }
            }
            Op::MeanRowsMasked { a, mask } => {
                let a = *a;
                let mask = mask.clone();
                let (m, n) = self.shape(a);
                let k = mask.iter().filter(|&&b| b).count();
                let inv = F::from_f64(1.0 / k as f64);
                let mut da = vec![F::zero(); m * n];
                for i in 0..m {
                    if mask[i] {
                        for j in 0..n {
                            da[i * n + j] = g[j] * inv;
                        }
                    }
                }
                self.acc(a, &da);
            }
            Op::MaskedSoftmaxCol { a, mask } => {
                let a = *a;
                let mask = mask.clone();
                let out = self.nodes[idx].out;
                let y = self.vals[out.0].data.clone();
                let m = y.len();
                let mut dot = F::zero();
                for i in 0..m {
                    if mask[i] {
                        dot = dot + g[i] * y[i];
                    }
                }
                let mut da = vec![F::zero(); m];
                for i in 0..m {
                    if mask[i] {
                        da[i] = y[i] * (g[i] - dot);
                    }
                }
                self.acc(a, &da);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                mask,
                probs,
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let mask = mask.clone();
                let probs = probs.clone();
                let (m, v) = self.shape(logits);
                let k = mask.iter().filter(|&&b| b).count();
                let scale = g[0] / F::from_f64(k as f64);
                let mut dl = vec![F::zero(); m * v];
                for i in 0..m {
                    if !mask[i] {
                        continue;
                    }
                    for j in 0..v {
                        let indicator = if j == targets[i] { F::one() } else { F::zero() };
                        dl[i * v + j] = scale * (probs[i * v + j] - indicator);
                    }
                }
                self.acc(logits, &dl);
            }
            Op::Dropout { a, mask } => {
                let a = *a;
                let mask = mask.clone();
                let da: Vec<F> = mask.iter().zip(g).map(|(&k, &gi)| k * gi).collect();
                self.acc(a, &da);
            }
        }
    }
}

// c += a (m x k) * b (k x n), all row-major.
fn gemm_nn<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &al) in arow.iter().enumerate() {
            if al == F::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + al * brow[j];
            }
        }
    }
}

// c += g (m x n) * b^T where b is (k x n): c is m x k.
fn gemm_nt<F: Real>(m: usize, n: usize, k: usize, g: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = F::zero();
            for l in 0..n {
                s = s + grow[l] * brow[l];
            }
            c[i * k + j] = c[i * k + j] + s;
        }
    }
}

// c += a^T * g where a is (m x k), g is (m x n): c is k x n.
fn gemm_tn<F: Real>(m: usize, k: usize, n: usize, a: &[F], g: &[F], c: &mut [F]) {
    for l in 0..m {
        let arow = &a[l * k..(l + 1) * k];
        let grow = &g[l * n..(l + 1) * n];
        for i in 0..k {
            let ai = arow[i];
            if ai == F::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + ai * grow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn matmul_identity() {
        let mut g: Graph<f64> = Graph::new(false);
        let i2 = g.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let a = g.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand() {
        let mut g: Graph<f64> = Graph::new(false);
        let a = g.constant(1, 2, vec![1.0, 2.0]);
        let b = g.constant(2, 1, vec![3.0, 4.0]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut g: Graph<f64> = Graph::new(false);
        let a = g.constant(2, 3, vec![0.0; 6]);
        let b = g.constant(2, 2, vec![0.0; 4]);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_of_sum_wrt_a_is_ones_times_bt() {
        // sum(a*b) gradient w.r.t. a is ones(m,n) * b^T.
        let mut rng = Rng::new(5);
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("a", Param::uniform(vec![3, 4], -1.0, 1.0, &mut rng));
        let bdata: Vec<f64> = (0..8).map(|_| rng.uniform_range(-1.0, 1.0)).collect();

        let mut g: Graph<f64> = Graph::new(false);
        let a = g.param(&store, "a").unwrap();
        let b = g.constant(4, 2, bdata.clone());
        let c = g.matmul(a, b).unwrap();
        // Reduce to scalar: ones^T * c * ones via mean tricks.
        let ones_l = g.constant(1, 3, vec![1.0; 3]);
        let ones_r = g.constant(2, 1, vec![1.0; 2]);
        let s1 = g.matmul(ones_l, c).unwrap();
        let s = g.matmul(s1, ones_r).unwrap();
        g.backward(s).unwrap();
        let da = g.grad(a).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let expect: f64 = (0..2).map(|l| bdata[j * 2 + l]).sum();
                approx(da[i * 4 + j], expect, 1e-12);
            }
        }
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g: Graph<f64> = Graph::new(false);
        let x = g.constant(1, 3, vec![-1.0, 0.0, 2.0]);
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
        let z = g.constant(1, 1, vec![0.0]);
        let s = g.sigmoid(z).unwrap();
        approx(g.value(s)[0], 0.5, 1e-12);
    }

    #[test]
    fn tanh_gradient_matches_central_differences() {
        let xs = [0.3, -0.7];
        let eps = 1e-6;
        for &x0 in &xs {
            let f = |x: f64| {
                let mut g: Graph<f64> = Graph::new(false);
                let mut store = ParamStore::new();
                store.insert("x", Param::new(vec![1, 1], vec![x]));
                let xi = g.param(&store, "x").unwrap();
                let y = g.tanh(xi).unwrap();
                (g.item(y), {
                    g.backward(y).unwrap();
                    g.grad(xi).unwrap()[0]
                })
            };
            let (_, ad) = f(x0);
            let (fp, _) = f(x0 + eps);
            let (fm, _) = f(x0 - eps);
            let fd = (fp - fm) / (2.0 * eps);
            approx(ad, fd, 1e-8);
        }
    }

    #[test]
    fn softmax_xent_uniform_logits_is_ln_v() {
        let mut g: Graph<f64> = Graph::new(false);
        let logits = g.constant(2, 4, vec![0.0; 8]);
        let loss = g
            .softmax_xent(logits, &[1, 3], &[true, true])
            .unwrap();
        approx(g.item(loss), (4.0f64).ln(), 1e-12);
    }

    #[test]
    fn softmax_xent_one_hot_limit() {
        let mut g: Graph<f64> = Graph::new(false);
        let logits = g.constant(1, 3, vec![0.0, 100.0, 0.0]);
        let loss = g.softmax_xent(logits, &[1], &[true]).unwrap();
        assert!(g.item(loss) < 1e-10);
    }

    #[test]
    fn softmax_xent_matches_direct_formula() {
        let data = vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4];
        let mut g: Graph<f64> = Graph::new(false);
        let logits = g.constant(2, 3, data.clone());
        let loss = g.softmax_xent(logits, &[2, 0], &[true, true]).unwrap();
        // Direct scalar evaluation.
        let mut expect = 0.0;
        for (row, t) in [(&data[0..3], 2usize), (&data[3..6], 0usize)] {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            expect += -(row[t].exp() / z).ln();
        }
        expect /= 2.0;
        approx(g.item(loss), expect, 1e-12);
    }

    #[test]
    fn softmax_xent_out_of_range_target() {
        let mut g: Graph<f64> = Graph::new(false);
        let logits = g.constant(1, 3, vec![0.0; 3]);
        assert!(matches!(
            g.softmax_xent(logits, &[5], &[true]),
            Err(SgcnError::Vocab(_))
        ));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = Rng::new(1);
        let data = vec![1.0, 2.0, 3.0];
        let mut g: Graph<f64> = Graph::new(true);
        let x = g.constant(1, 3, data.clone());
        let y = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(g.value(y), &data[..]);

        let mut g2: Graph<f64> = Graph::new(false);
        let x2 = g2.constant(1, 3, data.clone());
        let y2 = g2.dropout(x2, 0.5, &mut rng).unwrap();
        assert_eq!(g2.value(y2), &data[..]);
    }

    #[test]
    fn dropout_rejects_p_one() {
        let mut rng = Rng::new(1);
        let mut g: Graph<f64> = Graph::new(true);
        let x = g.zeros(1, 3);
        assert!(matches!(
            g.dropout(x, 1.0, &mut rng),
            Err(SgcnError::Config(_))
        ));
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut rng = Rng::new(99);
        let n = 100_000;
        let mut g: Graph<f64> = Graph::new(true);
        let x = g.constant(1, n, vec![1.0; n]);
        let y = g.dropout(x, 0.2, &mut rng).unwrap();
        let survivors = g.value(y).iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / n as f64;
        assert!((frac - 0.8).abs() < 0.01, "survivor fraction {frac}");
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = Rng::new(123);
        let n = 1000;
        let input = vec![0.5; n];
        let mut total = 0.0;
        let trials = 100;
        for _ in 0..trials {
            let mut g: Graph<f64> = Graph::new(true);
            let x = g.constant(1, n, input.clone());
            let y = g.dropout(x, 0.2, &mut rng).unwrap();
            total += g.value(y).iter().sum::<f64>() / n as f64;
        }
        let mean = total / trials as f64;
        assert!((mean - 0.5).abs() / 0.5 < 0.02, "mean {mean}");
    }

    #[test]
    fn masked_softmax_sums_to_one_and_zeroes_pads() {
        let mut g: Graph<f64> = Graph::new(false);
        let e = g.constant(4, 1, vec![0.2, 1.5, -0.3, 9.0]);
        let w = g
            .masked_softmax_col(e, &[true, true, true, false])
            .unwrap();
        let v = g.value(w);
        approx(v.iter().sum::<f64>(), 1.0, 1e-12);
        assert_eq!(v[3], 0.0);
    }

    #[test]
    fn broadcast_add_gradients() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("b", Param::new(vec![1, 2], vec![0.5, -0.5]));
        let mut g: Graph<f64> = Graph::new(false);
        let a = g.constant(3, 2, vec![1.0; 6]);
        let b = g.param(&store, "b").unwrap();
        let c = g.add(a, b).unwrap();
        let ones = g.constant(1, 3, vec![1.0; 3]);
        let s1 = g.matmul(ones, c).unwrap();
        let onesr = g.constant(2, 1, vec![1.0; 2]);
        let s = g.matmul(s1, onesr).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn nan_input_is_rejected() {
        let mut g: Graph<f64> = Graph::new(false);
        let a = g.constant(1, 1, vec![1e308]);
        let b = g.constant(1, 1, vec![1e308]);
        // Overflow to inf must surface as a numeric error.
        assert!(matches!(g.mul(a, b), Err(SgcnError::Numeric(_))));
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let mut rng = Rng::new(77);
            let mut g: Graph<f64> = Graph::new(true);
            let x = g.constant(4, 4, (0..16).map(|i| i as f64 * 0.1).collect());
            let d = g.dropout(x, 0.3, &mut rng).unwrap();
            let t = g.tanh(d).unwrap();
            let m = g.mean_rows_masked(t, &[true; 4]).unwrap();
            let ones = g.constant(4, 1, vec![1.0; 4]);
            let s = g.matmul(m, ones).unwrap();
            g.item(s)
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
