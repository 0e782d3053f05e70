use std::rc::Rc;

use crate::error::TensorError;

use super::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Attention admissibility mask handed to [`Graph::row_softmax`].
#[derive(Debug, Clone)]
pub enum AttnMask {
    /// Every key is admissible for every query.
    Full,
    /// Query at position i may attend to keys at positions <= i.
    Causal,
    /// Arbitrary boolean admissibility, row-major `[n_q * n_k]`.
    Custom(Rc<Vec<bool>>),
}

#[derive(Debug, Clone)]
struct MaskData {
    nk: usize,
    allow: Option<Rc<Vec<bool>>>, // None = causal
}

impl MaskData {
    #[inline]
    fn admits(&self, i: usize, j: usize) -> bool {
        match &self.allow {
            None => j <= i,
            Some(a) => a[i * self.nk + j],
        }
    }
}

/// Per-position rotation table for rotary/xPos position handling.
/// `cos`/`sin` are `[n * half]` row-major, pair p of a head dimension d_k
/// rotating dims (2p, 2p+1).
#[derive(Debug, Clone)]
pub struct RopeTable<T> {
    pub n: usize,
    pub half: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RopeId(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AffineScalar { x: Var, mul: T },
    Matmul(Var, Var),
    Transpose(Var),
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    MulCol { x: Var, col: Var },
    Scale { x: Var, s: Var },
    SumAll(Var),
    MeanRows(Var),
    PrefixMeanRows(Var),
    Softmax { x: Var, mask: Option<MaskId> },
    LayerNorm(Var),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    Rope { x: Var, table: RopeId },
    TriSelect { lower: Var, upper: Var },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, idx: Rc<Vec<usize>> },
    SelectRows { mask: Rc<Vec<bool>>, a: Var, b: Var },
    CrossEntropy { logits: Var, targets: Rc<Vec<usize>>, weights: Rc<Vec<T>> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AffineScalar { .. } => "affine_scalar",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::MulCol { .. } => "mul_col",
            Op::Scale { .. } => "scale",
            Op::SumAll(..) => "sum_all",
            Op::MeanRows(..) => "mean_rows",
            Op::PrefixMeanRows(..) => "prefix_mean_rows",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Abs(..) => "abs",
            Op::Rope { .. } => "rope",
            Op::TriSelect { .. } => "tri_select",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::SelectRows { .. } => "select_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
    saved: Option<Vec<T>>,
}

const LN_EPS: f64 = 1e-5;

/// Eagerly evaluated computation graph. Ops compute their value at creation;
/// `backward` walks the node list in reverse (creation order is topological).
///
/// Single-threaded per instance; independent instances may live on separate
/// threads.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    masks: Vec<MaskData>,
    ropes: Vec<Rc<RopeTable<T>>>,
    checked: bool,
    fault: Option<&'static str>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            masks: Vec::new(),
            ropes: Vec::new(),
            checked: false,
            fault: None,
        }
    }

    /// Checked mode validates that every produced value is finite and records
    /// the first offending op.
    pub fn checked() -> Self {
        let mut g = Self::new();
        g.checked = true;
        g
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn numeric_fault(&self) -> Option<&'static str> {
        self.fault
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<T>, op: Op<T>, saved: Option<Vec<T>>) -> Var {
        debug_assert_eq!(rows * cols, data.len());
        if self.checked && self.fault.is_none() && !data.iter().all(|v| v.is_finite()) {
            self.fault = Some(op.name());
        }
        let requires_grad = match &op {
            Op::Leaf => false, // set by leaf()
            _ => self.any_requires(&op),
        };
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad: None,
            requires_grad,
            op,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_requires(&self, op: &Op<T>) -> bool {
        let mut req = false;
        self.visit_inputs(op, |v| req |= self.nodes[v.0].requires_grad);
        req
    }

    fn visit_inputs(&self, op: &Op<T>, mut f: impl FnMut(Var)) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => {
                f(*a);
                f(*b)
            }
            Op::AffineScalar { x, .. }
            | Op::Transpose(x)
            | Op::SumAll(x)
            | Op::MeanRows(x)
            | Op::PrefixMeanRows(x)
            | Op::Softmax { x, .. }
            | Op::LayerNorm(x)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Abs(x)
            | Op::Rope { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::CrossEntropy { logits: x, .. } => f(*x),
            Op::AddRow { x, row } | Op::MulRow { x, row } => {
                f(*x);
                f(*row)
            }
            Op::MulCol { x, col } => {
                f(*x);
                f(*col)
            }
            Op::Scale { x, s } => {
                f(*x);
                f(*s)
            }
            Op::TriSelect { lower, upper } => {
                f(*lower);
                f(*upper)
            }
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => {
                for v in vs {
                    f(*v)
                }
            }
            Op::SelectRows { a, b, .. } => {
                f(*a);
                f(*b)
            }
        }
    }

    // ---- accessors -------------------------------------------------------

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let n = &self.nodes[v.0];
        assert_eq!((n.rows, n.cols), (1, 1), "scalar_value on non-scalar");
        n.data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.data.clone())
    }

    // ---- leaves and masks ------------------------------------------------

    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        let (rows, cols) = t.dims2();
        let v = self.push(rows, cols, t.data().to_vec(), Op::Leaf, None);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Var {
        assert_eq!(rows * cols, data.len(), "constant shape mismatch");
        self.push(rows, cols, data, Op::Leaf, None)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(1, 1, vec![v])
    }

    fn register_mask(&mut self, nq: usize, nk: usize, mask: &AttnMask) -> Option<MaskId> {
        let data = match mask {
            AttnMask::Full => return None,
            AttnMask::Causal => MaskData { nk, allow: None },
            AttnMask::Custom(allow) => {
                assert_eq!(allow.len(), nq * nk, "mask shape mismatch");
                MaskData { nk, allow: Some(allow.clone()) }
            }
        };
        for i in 0..nq {
            assert!(
                (0..nk).any(|j| data.admits(i, j)),
                "contract violation: query row {i} has every key masked"
            );
        }
        self.masks.push(data);
        Some(MaskId(self.masks.len() - 1))
    }

    pub fn rope_table(&mut self, table: RopeTable<T>) -> RopeId {
        assert_eq!(table.cos.len(), table.n * table.half);
        assert_eq!(table.sin.len(), table.n * table.half);
        self.ropes.push(Rc::new(table));
        RopeId(self.ropes.len() - 1)
    }

    // ---- elementwise -----------------------------------------------------

    fn assert_same(&self, a: Var, b: Var, op: &str) -> (usize, usize) {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        assert_eq!((ra, ca), (rb, cb), "{op}: shape mismatch {ra}x{ca} vs {rb}x{cb}");
        (ra, ca)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.assert_same(a, b, "add");
        let data = self.zip(a, b, |x, y| x + y);
        self.push(r, c, data, Op::Add(a, b), None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.assert_same(a, b, "sub");
        let data = self.zip(a, b, |x, y| x - y);
        self.push(r, c, data, Op::Sub(a, b), None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.assert_same(a, b, "mul");
        let data = self.zip(a, b, |x, y| x * y);
        self.push(r, c, data, Op::Mul(a, b), None)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    /// out = x * mul + add, elementwise with scalar constants.
    pub fn affine_scalar(&mut self, x: Var, mul: T, add: T) -> Var {
        let (r, c) = self.dims(x);
        let data = self.data(x).iter().map(|&v| v * mul + add).collect();
        self.push(r, c, data, Op::AffineScalar { x, mul }, None)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine_scalar(x, -T::ONE, T::ZERO)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine_scalar(x, -T::ONE, T::ONE)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let data = self.data(x).iter().map(|&v| gelu_exact(v)).collect();
        self.push(r, c, data, Op::Gelu(x), None)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let data = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(r, c, data, Op::Sigmoid(x), None)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let data = self.data(x).iter().map(|&v| v.abs()).collect();
        self.push(r, c, data, Op::Abs(x), None)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        assert_eq!(ka, kb, "matmul: inner dims {ka} vs {kb}");
        let mut out = vec![T::ZERO; m * n];
        unsafe {
            T::gemm(
                m,
                ka,
                n,
                T::ONE,
                self.data(a).as_ptr(),
                ka as isize,
                1,
                self.data(b).as_ptr(),
                n as isize,
                1,
                T::ZERO,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        self.push(m, n, out, Op::Matmul(a, b), None)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let src = self.data(x);
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(c, r, out, Op::Transpose(x), None)
    }

    /// [n,d] + [1,d] broadcast over rows (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.dims(x);
        let (rr, rc) = self.dims(row);
        assert_eq!((rr, rc), (1, c), "add_row: expected [1,{c}], got {rr}x{rc}");
        let rowd = self.data(row).to_vec();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + rowd[i % c])
            .collect();
        self.push(r, c, data, Op::AddRow { x, row }, None)
    }

    /// [n,d] * [1,d] broadcast over rows (e.g. layer-norm gain).
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.dims(x);
        let (rr, rc) = self.dims(row);
        assert_eq!((rr, rc), (1, c), "mul_row: expected [1,{c}], got {rr}x{rc}");
        let rowd = self.data(row).to_vec();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * rowd[i % c])
            .collect();
        self.push(r, c, data, Op::MulRow { x, row }, None)
    }

    /// [n,d] * [n,1] broadcast over columns (per-token halting weights).
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (r, c) = self.dims(x);
        let (cr, cc) = self.dims(col);
        assert_eq!((cr, cc), (r, 1), "mul_col: expected [{r},1], got {cr}x{cc}");
        let cold = self.data(col).to_vec();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * cold[i / c])
            .collect();
        self.push(r, c, data, Op::MulCol { x, col }, None)
    }

    /// [n,d] * [1,1] broadcast (scalar weight that participates in autodiff).
    pub fn scale(&mut self, x: Var, s: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(s), (1, 1), "scale: s must be [1,1]");
        let sv = self.data(s)[0];
        let data = self.data(x).iter().map(|&v| v * sv).collect();
        self.push(r, c, data, Op::Scale { x, s }, None)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        self.push(1, 1, vec![s], Op::SumAll(x), None)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let s = self.sum_all(x);
        self.affine_scalar(s, T::from_f64(1.0 / (r * c) as f64), T::ZERO)
    }

    /// [n,d] -> [1,d] mean over the temporal axis.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        assert!(r >= 1, "mean_rows of empty tensor is a contract violation");
        let src = self.data(x);
        let inv = T::from_f64(1.0 / r as f64);
        let mut out = vec![T::ZERO; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += src[i * c + j];
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        self.push(1, c, out, Op::MeanRows(x), None)
    }

    /// Row t of the output is the mean of input rows 0..=t (cumulative mean,
    /// leaks nothing from the future).
    pub fn prefix_mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let src = self.data(x);
        let mut out = vec![T::ZERO; r * c];
        let mut acc = vec![T::ZERO; c];
        for i in 0..r {
            for j in 0..c {
                acc[j] += src[i * c + j];
                out[i * c + j] = acc[j] * T::from_f64(1.0 / (i + 1) as f64);
            }
        }
        self.push(r, c, out, Op::PrefixMeanRows(x), None)
    }

    /// Row-wise softmax with optional admissibility mask. Masked entries get
    /// exactly zero weight and never enter the max/sum.
    pub fn row_softmax(&mut self, x: Var, mask: &AttnMask) -> Var {
        let (r, c) = self.dims(x);
        assert!(c >= 1, "softmax of an empty row is a contract violation");
        let mid = self.register_mask(r, c, mask);
        let src = self.data(x);
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            let admits = |j: usize| match mid {
                None => true,
                Some(m) => self.masks[m.0].admits(i, j),
            };
            let mut mx: Option<T> = None;
            for j in 0..c {
                if admits(j) {
                    let v = src[i * c + j];
                    mx = Some(match mx {
                        None => v,
                        Some(m) => m.max(v),
                    });
                }
            }
            let mx = mx.expect("mask admissibility is checked at registration");
            let mut z = T::ZERO;
            for j in 0..c {
                if admits(j) {
                    let e = (src[i * c + j] - mx).exp();
                    out[i * c + j] = e;
                    z += e;
                }
            }
            for j in 0..c {
                if admits(j) {
                    out[i * c + j] = out[i * c + j] / z;
                }
            }
        }
        self.push(r, c, out, Op::Softmax { x, mask: mid }, None)
    }

    /// Row-wise normalization to zero mean and unit variance (1/d variance,
    /// epsilon 1e-5 inside the root). Affine gain/shift are separate ops.
    pub fn layer_norm_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        assert!(c >= 1, "layer_norm of zero-width rows is a contract violation");
        let src = self.data(x);
        let mut out = vec![T::ZERO; r * c];
        let mut inv_std = vec![T::ZERO; r];
        let invc = T::from_f64(1.0 / c as f64);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= invc;
            let mut var = T::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= invc;
            let inv = T::ONE / (var + T::from_f64(LN_EPS)).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv;
            }
        }
        self.push(r, c, out, Op::LayerNorm(x), Some(inv_std))
    }

    /// Rotate head-dimension pairs by per-position angles.
    pub fn rope(&mut self, x: Var, table: RopeId) -> Var {
        let (r, c) = self.dims(x);
        let t = self.ropes[table.0].clone();
        assert_eq!(c, t.half * 2, "rope: width {c} does not match table half {}", t.half);
        assert!(r <= t.n, "rope: {r} rows exceed table length {}", t.n);
        let src = self.data(x);
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for p in 0..t.half {
                let (cs, sn) = (t.cos[i * t.half + p], t.sin[i * t.half + p]);
                let a = src[i * c + 2 * p];
                let b = src[i * c + 2 * p + 1];
                out[i * c + 2 * p] = a * cs - b * sn;
                out[i * c + 2 * p + 1] = a * sn + b * cs;
            }
        }
        self.push(r, c, out, Op::Rope { x, table }, None)
    }

    /// out[i][j] = lower[i][j] if i >= j else upper[i][j]; both square.
    pub fn tri_select(&mut self, lower: Var, upper: Var) -> Var {
        let (r, c) = self.assert_same(lower, upper, "tri_select");
        let lo = self.data(lower);
        let up = self.data(upper);
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = if i >= j { lo[i * c + j] } else { up[i * c + j] };
            }
        }
        self.push(r, c, out, Op::TriSelect { lower, upper }, None)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(x);
        assert!(start + len <= r, "slice_rows: {start}+{len} > {r}");
        let data = self.data(x)[start * c..(start + len) * c].to_vec();
        self.push(len, c, data, Op::SliceRows { x, start }, None)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(x);
        assert!(start + len <= c, "slice_cols: {start}+{len} > {c}");
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push(r, len, out, Op::SliceCols { x, start }, None)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let (_, c) = self.dims(parts[0]);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims(p);
            assert_eq!(pc, c, "concat_rows: column mismatch");
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        self.push(rows, c, data, Op::ConcatRows(parts.to_vec()), None)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let (r, _) = self.dims(parts[0]);
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = vec![T::ZERO; r * total];
        let mut off = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            assert_eq!(pr, r, "concat_cols: row mismatch");
            let src = self.data(p);
            for i in 0..r {
                data[i * total + off..i * total + off + pc]
                    .copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        self.push(r, total, data, Op::ConcatCols(parts.to_vec()), None)
    }

    /// Row r of the output is row idx[r] of the input (embedding lookup,
    /// END-token pooling, read-position gathering). Duplicate indices
    /// accumulate gradient.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let (r, c) = self.dims(x);
        assert!(!idx.is_empty(), "gather_rows with no indices");
        let src = self.data(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            assert!(i < r, "gather_rows: index {i} out of {r}");
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rows = idx.len();
        self.push(rows, c, data, Op::GatherRows { x, idx: Rc::new(idx) }, None)
    }

    /// Rows where `mask` is true come from `a`, the rest from `b`.
    /// Gradient is routed only to the chosen side (per-token freezing).
    pub fn select_rows(&mut self, mask: Rc<Vec<bool>>, a: Var, b: Var) -> Var {
        let (r, c) = self.assert_same(a, b, "select_rows");
        assert_eq!(mask.len(), r, "select_rows: mask length mismatch");
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            let src = if mask[i] { &ad[i * c..(i + 1) * c] } else { &bd[i * c..(i + 1) * c] };
            out[i * c..(i + 1) * c].copy_from_slice(src);
        }
        self.push(r, c, out, Op::SelectRows { mask, a, b }, None)
    }

    /// Weighted mean of -log softmax(logits)[target] over rows. Rows with
    /// zero weight contribute nothing and receive exactly zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<T>) -> Var {
        let (r, c) = self.dims(logits);
        assert_eq!(targets.len(), r, "cross_entropy: target count mismatch");
        assert_eq!(weights.len(), r, "cross_entropy: weight count mismatch");
        let total: T = weights.iter().copied().sum();
        assert!(
            total.to_f64() > 0.0,
            "cross_entropy: weights must have positive sum"
        );
        let src = self.data(logits);
        let mut probs = vec![T::ZERO; r * c];
        let mut loss = T::ZERO;
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let p = super::softmax(row);
            assert!(targets[i] < c, "cross_entropy: target {} out of {c}", targets[i]);
            if weights[i].to_f64() != 0.0 {
                loss += weights[i] * -(p[targets[i]].ln());
            }
            probs[i * c..(i + 1) * c].copy_from_slice(&p);
        }
        loss = loss / total;
        self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: Rc::new(targets),
                weights: Rc::new(weights),
            },
            Some(probs),
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode differentiation from a scalar root. Every `requires_grad`
    /// leaf ends up with the exact reverse-mode derivative of the root.
    /// Grads are reset first, so repeated calls are idempotent.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if let Some(op) = self.fault {
            return Err(TensorError::NumericFault(op));
        }
        {
            let n = &self.nodes[root.0];
            if (n.rows, n.cols) != (1, 1) {
                return Err(TensorError::NonScalarRoot(vec![n.rows, n.cols]));
            }
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![T::ONE]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad && !matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[v.0];
        let grad = node
            .grad
            .get_or_insert_with(|| vec![T::ZERO; node.rows * node.cols]);
        debug_assert_eq!(grad.len(), contrib.len());
        for (gv, &cv) in grad.iter_mut().zip(contrib) {
            *gv += cv;
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Ops are cloned cheaply (Vars + Rc handles) so we can borrow data
        // while accumulating.
        let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<T> = g.iter().zip(self.data(b)).map(|(&gv, &bv)| gv * bv).collect();
                let db: Vec<T> = g.iter().zip(self.data(a)).map(|(&gv, &av)| gv * av).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::AffineScalar { x, mul, .. } => {
                let (x, mul) = (*x, *mul);
                let dx: Vec<T> = g.iter().map(|&v| v * mul).collect();
                self.accumulate(x, &dx);
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.dims(a);
                let (_, n) = self.dims(b);
                // dA = g . B^T  (use B with swapped strides)
                let mut da = vec![T::ZERO; m * k];
                unsafe {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::ONE,
                        g.as_ptr(),
                        n as isize,
                        1,
                        self.data(b).as_ptr(),
                        1,
                        n as isize,
                        T::ZERO,
                        da.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                }
                // dB = A^T . g
                let mut db = vec![T::ZERO; k * n];
                unsafe {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::ONE,
                        self.data(a).as_ptr(),
                        1,
                        k as isize,
                        g.as_ptr(),
                        n as isize,
                        1,
                        T::ZERO,
                        db.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Transpose(x) => {
                let x = *x;
                let (xr, xc) = self.dims(x);
                let mut dx = vec![T::ZERO; xr * xc];
                for i2 in 0..rows {
                    for j2 in 0..cols {
                        dx[j2 * xc + i2] = g[i2 * cols + j2];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::AddRow { x, row } => {
                let (x, row) = (*x, *row);
                self.accumulate(x, g);
                let mut dr = vec![T::ZERO; cols];
                for i2 in 0..rows {
                    for j2 in 0..cols {
                        dr[j2] += g[i2 * cols + j2];
                    }
                }
                self.accumulate(row, &dr);
            }
            Op::MulRow { x, row } => {
                let (x, row) = (*x, *row);
                let rowd = self.data(row).to_vec();
                let dx: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(idx, &v)| v * rowd[idx % cols])
                    .collect();
                let xd = self.data(x);
                let mut dr = vec![T::ZERO; cols];
                for i2 in 0..rows {
                    for j2 in 0..cols {
                        dr[j2] += g[i2 * cols + j2] * xd[i2 * cols + j2];
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(row, &dr);
            }
            Op::MulCol { x, col } => {
                let (x, col) = (*x, *col);
                let cold = self.data(col).to_vec();
                let dx: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(idx, &v)| v * cold[idx / cols])
                    .collect();
                let xd = self.data(x);
                let mut dc = vec![T::ZERO; rows];
                for i2 in 0..rows {
                    for j2 in 0..cols {
                        dc[i2] += g[i2 * cols + j2] * xd[i2 * cols + j2];
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(col, &dc);
            }
            Op::Scale { x, s } => {
                let (x, s) = (*x, *s);
                let sv = self.data(s)[0];
                let dx: Vec<T> = g.iter().map(|&v| v * sv).collect();
                let ds: T = g.iter().zip(self.data(x)).map(|(&gv, &xv)| gv * xv).sum();
                self.accumulate(x, &dx);
                self.accumulate(s, &[ds]);
            }
            Op::SumAll(x) => {
                let x = *x;
                let (xr, xc) = self.dims(x);
                let dx = vec![g[0]; xr * xc];
                self.accumulate(x, &dx);
            }
            Op::MeanRows(x) => {
                let x = *x;
                let (xr, xc) = self.dims(x);
                let inv = T::from_f64(1.0 / xr as f64);
                let mut dx = vec![T::ZERO; xr * xc];
                for i2 in 0..xr {
                    for j2 in 0..xc {
                        dx[i2 * xc + j2] = g[j2] * inv;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::PrefixMeanRows(x) => {
                let x = *x;
                let (xr, xc) = self.dims(x);
                let mut dx = vec![T::ZERO; xr * xc];
                let mut acc = vec![T::ZERO; xc];
                for t in (0..xr).rev() {
                    let inv = T::from_f64(1.0 / (t + 1) as f64);
                    for j2 in 0..xc {
                        acc[j2] += g[t * xc + j2] * inv;
                        dx[t * xc + j2] = acc[j2];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Softmax { x, mask } => {
                let (x, mask) = (*x, *mask);
                let y = &self.nodes[i].data;
                let mut dx = vec![T::ZERO; rows * cols];
                for i2 in 0..rows {
                    let mut dot = T::ZERO;
                    for j2 in 0..cols {
                        dot += g[i2 * cols + j2] * y[i2 * cols + j2];
                    }
                    for j2 in 0..cols {
                        let admit = match mask {
                            None => true,
                            Some(m) => self.masks[m.0].admits(i2, j2),
                        };
                        if admit {
                            dx[i2 * cols + j2] =
                                y[i2 * cols + j2] * (g[i2 * cols + j2] - dot);
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::LayerNorm(x) => {
                let x = *x;
                let y = self.nodes[i].data.clone();
                let inv_std = self.nodes[i].saved.as_ref().expect("ln saved").clone();
                let invc = T::from_f64(1.0 / cols as f64);
                let mut dx = vec![T::ZERO; rows * cols];
                for i2 in 0..rows {
                    let mut mg = T::ZERO;
                    let mut mgy = T::ZERO;
                    for j2 in 0..cols {
                        mg += g[i2 * cols + j2];
                        mgy += g[i2 * cols + j2] * y[i2 * cols + j2];
                    }
                    mg *= invc;
                    mgy *= invc;
                    for j2 in 0..cols {
                        dx[i2 * cols + j2] = inv_std[i2]
                            * (g[i2 * cols + j2] - mg - y[i2 * cols + j2] * mgy);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Gelu(x) => {
                let x = *x;
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(&gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let y = &self.nodes[i].data;
                let dx: Vec<T> = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (T::ONE - yv))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Abs(x) => {
                let x = *x;
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(&gv, &xv)| {
                        if xv.to_f64() > 0.0 {
                            gv
                        } else if xv.to_f64() < 0.0 {
                            -gv
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Rope { x, table } => {
                let (x, table) = (*x, *table);
                let t = self.ropes[table.0].clone();
                let mut dx = vec![T::ZERO; rows * cols];
                for i2 in 0..rows {
                    for p in 0..t.half {
                        let (cs, sn) = (t.cos[i2 * t.half + p], t.sin[i2 * t.half + p]);
                        let ga = g[i2 * cols + 2 * p];
                        let gb = g[i2 * cols + 2 * p + 1];
                        // inverse rotation
                        dx[i2 * cols + 2 * p] = ga * cs + gb * sn;
                        dx[i2 * cols + 2 * p + 1] = -ga * sn + gb * cs;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::TriSelect { lower, upper } => {
                let (lower, upper) = (*lower, *upper);
                let mut dl = vec![T::ZERO; rows * cols];
                let mut du = vec![T::ZERO; rows * cols];
                for i2 in 0..rows {
                    for j2 in 0..cols {
                        if i2 >= j2 {
                            dl[i2 * cols + j2] = g[i2 * cols + j2];
                        } else {
                            du[i2 * cols + j2] = g[i2 * cols + j2];
                        }
                    }
                }
                self.accumulate(lower, &dl);
                self.accumulate(upper, &du);
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                let (xr, xc) = self.dims(x);
                let mut dx = vec![T::ZERO; xr * xc];
                dx[start * xc..start * xc + rows * cols].copy_from_slice(g);
                self.accumulate(x, &dx);
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let (xr, xc) = self.dims(x);
                let mut dx = vec![T::ZERO; xr * xc];
                for i2 in 0..rows {
                    for j2 in 0..cols {
                        dx[i2 * xc + start + j2] = g[i2 * cols + j2];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let (pr, pc) = self.dims(p);
                    let slice = g[off..off + pr * pc].to_vec();
                    self.accumulate(p, &slice);
                    off += pr * pc;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let (pr, pc) = self.dims(p);
                    let mut dp = vec![T::ZERO; pr * pc];
                    for i2 in 0..pr {
                        dp[i2 * pc..(i2 + 1) * pc]
                            .copy_from_slice(&g[i2 * cols + off..i2 * cols + off + pc]);
                    }
                    self.accumulate(p, &dp);
                    off += pc;
                }
            }
            Op::GatherRows { x, idx } => {
                let (x, idx) = (*x, idx.clone());
                let (xr, xc) = self.dims(x);
                let mut dx = vec![T::ZERO; xr * xc];
                for (r2, &src_row) in idx.iter().enumerate() {
                    for j2 in 0..xc {
                        dx[src_row * xc + j2] += g[r2 * cols + j2];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::SelectRows { mask, a, b } => {
                let (mask, a, b) = (mask.clone(), *a, *b);
                let mut da = vec![T::ZERO; rows * cols];
                let mut db = vec![T::ZERO; rows * cols];
                for i2 in 0..rows {
                    let dst = if mask[i2] { &mut da } else { &mut db };
                    dst[i2 * cols..(i2 + 1) * cols]
                        .copy_from_slice(&g[i2 * cols..(i2 + 1) * cols]);
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::CrossEntropy { logits, targets, weights } => {
                let (logits, targets, weights) = (*logits, targets.clone(), weights.clone());
                let (lr, lc) = self.dims(logits);
                let probs = self.nodes[i].saved.as_ref().expect("ce saved").clone();
                let total: T = weights.iter().copied().sum();
                let gs = g[0];
                let mut dx = vec![T::ZERO; lr * lc];
                for i2 in 0..lr {
                    let w = weights[i2] / total;
                    if w.to_f64() == 0.0 {
                        continue;
                    }
                    for j2 in 0..lc {
                        let ind = if j2 == targets[i2] { T::ONE } else { T::ZERO };
                        dx[i2 * lc + j2] = gs * w * (probs[i2 * lc + j2] - ind);
                    }
                }
                self.accumulate(logits, &dx);
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x.to_f64() >= 0.0 {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Exact-erf GeLU: x * Phi(x).
#[inline]
fn gelu_exact<T: Scalar>(x: T) -> T {
    let phi = (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf()) * T::from_f64(0.5);
    x * phi
}

/// d/dx GeLU = Phi(x) + x * phi(x).
#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf()) * T::from_f64(0.5);
    let pdf = T::from_f64(INV_SQRT_2PI) * (-(x * x) * T::from_f64(0.5)).exp();
    cdf + x * pdf
}
