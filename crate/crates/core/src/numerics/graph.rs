//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Each builder method evaluates its primitive eagerly and appends a node,
//! so node order is a topological order by construction. `backward` walks
//! the tape in reverse, accumulating adjoints only along paths that reach a
//! parameter.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::scalar::Scalar;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Clamp floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddN(Vec<NodeId>),
    Scale {
        x: NodeId,
        k: T,
    },
    ScaleBy {
        x: NodeId,
        s: NodeId,
    },
    Exp(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Prelu {
        x: NodeId,
        slope: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    Narrow {
        x: NodeId,
        start: usize,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    Reshape(NodeId),
    Softmax(NodeId),
    CrossEntropy {
        probs: NodeId,
        targets: Vec<usize>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Distance {
        a: NodeId,
        b: NodeId,
    },
    PowBy {
        x: NodeId,
        g: NodeId,
    },
    NormalizeRows(NodeId),
    ApplyClassifiers {
        params: NodeId,
        z: NodeId,
        classes: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddN(_) => "add_n",
            Op::Scale { .. } => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::Exp(_) => "exp",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Prelu { .. } => "prelu",
            Op::Concat { .. } => "concat",
            Op::ConcatRows { .. } => "concat_rows",
            Op::Narrow { .. } => "narrow",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Distance { .. } => "distance",
            Op::PowBy { .. } => "pow_by",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::ApplyClassifiers { .. } => "apply_classifiers",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation graph. Build it with the primitive methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, NodeId>,
    clamp_events: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            clamp_events: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Number of probabilities clamped at [`PROB_FLOOR`] by cross-entropy nodes.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn dims2(&self, id: NodeId, op: &str) -> Result<(usize, usize)> {
        self.value(id)
            .dims2()
            .map_err(|_| shape_err(op, format!("expected matrix, got {:?}", self.shape(id))))
    }

    /// Constant input; gradients are never propagated into it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let node = self.push(store.get(id).clone(), Op::Param(id), true);
        self.params.insert(id, node);
        node
    }

    /// `x (N x I) * w^T (I x O) + b`, with `w` stored `O x I`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (n, i) = self.dims2(x, "affine")?;
        let (o, i2) = self.dims2(w, "affine")?;
        if i != i2 {
            return Err(shape_err(
                "affine",
                format!("input width {i} vs weight {o}x{i2}"),
            ));
        }
        let mut out = vec![T::zero(); n * o];
        gemm(
            n,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != o {
                return Err(shape_err(
                    "affine",
                    format!("bias length {} vs {o}", bias.len()),
                ));
            }
            for row in out.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v = *v + bb;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(Tensor::new(&[n, o], out)?, Op::Affine { x, w, b }, ng))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .map_err(|e| shape_err("matmul", e.to_string()))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, ng))
    }

    fn zip_same(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op.name(),
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Sum of equally shaped nodes.
    pub fn add_n(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("add_n", "no operands".into()))?;
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            if self.shape(p) != acc.shape() {
                return Err(shape_err(
                    "add_n",
                    format!("{:?} vs {:?}", self.shape(p), acc.shape()),
                ));
            }
            for (a, &b) in acc.data_mut().iter_mut().zip(self.nodes[p.0].value.data()) {
                *a = *a + b;
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(acc, Op::AddN(parts.to_vec()), ng))
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> NodeId {
        let value = self.value(x).map(|v| v * k);
        let ng = self.ng(&[x]);
        self.push(value, Op::Scale { x, k }, ng)
    }

    /// Multiplies every entry of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(shape_err(
                "scale_by",
                format!("scale must be a scalar, got {:?}", self.shape(s)),
            ));
        }
        let k = self.value(s).data()[0];
        let value = self.value(x).map(|v| v * k);
        let ng = self.ng(&[x, s]);
        Ok(self.push(value, Op::ScaleBy { x, s }, ng))
    }

    fn unary(&mut self, x: NodeId, op: Op<T>, f: impl Fn(T) -> T) -> NodeId {
        let value = self.value(x).map(f);
        let ng = self.ng(&[x]);
        self.push(value, op, ng)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    /// Parametric ReLU with a single learned slope for negative inputs.
    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> Result<NodeId> {
        if self.value(slope).len() != 1 {
            return Err(shape_err("prelu", "slope must hold one value".into()));
        }
        let a = self.value(slope).data()[0];
        let value = self.value(x).map(|v| if v > T::zero() { v } else { a * v });
        let ng = self.ng(&[x, slope]);
        Ok(self.push(value, Op::Prelu { x, slope }, ng))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no operands".into()));
        }
        let rows = self.dims2(parts[0], "concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat")?;
            if r != rows {
                return Err(shape_err("concat", format!("row count {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::new(&[rows, total], out)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    /// Row-wise concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no operands".into()));
        }
        let cols = self.dims2(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(shape_err(
                    "concat_rows",
                    format!("column count {c} vs {cols}"),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::new(&[rows, cols], out)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn narrow(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.dims2(x, "narrow")?;
        if len == 0 || start + len > cols {
            return Err(shape_err(
                "narrow",
                format!("{start}+{len} exceeds {cols} columns"),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[rows, len], out)?, Op::Narrow { x, start }, ng))
    }

    /// Selects (possibly repeated) rows of a matrix.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (n, cols) = self.dims2(x, "gather_rows")?;
        if rows.is_empty() {
            return Err(shape_err("gather_rows", "no rows selected".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err("gather_rows", format!("row {bad} out of {n}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::new(&[rows.len(), cols], out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .map_err(|e| shape_err("reshape", e.to_string()))?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, cols) = self.dims2(x, "softmax")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(x), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Softmax(x), ng))
    }

    /// Mean over rows of `-log p[row, target[row]]`, with probabilities
    /// clamped at [`PROB_FLOOR`].
    pub fn cross_entropy(&mut self, probs: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.dims2(probs, "cross_entropy")?;
        if targets.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(shape_err(
                "cross_entropy",
                format!("target {bad} out of {cols} classes"),
            ));
        }
        let floor = T::lit(PROB_FLOOR);
        let p = self.value(probs).data();
        let mut total = T::zero();
        let mut clamped = 0;
        for (r, &t) in targets.iter().enumerate() {
            let v = p[r * cols + t];
            if v < floor {
                clamped += 1;
            }
            total = total - v.max(floor).ln();
        }
        if clamped > 0 {
            log::warn!("cross_entropy: {clamped} probabilities clamped at {PROB_FLOOR}");
        }
        self.clamp_events += clamped;
        let value = Tensor::scalar(total / T::lit(rows as f64));
        let ng = self.ng(&[probs]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.len() as f64);
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// 2-D convolution. `x` is `N x C x H x W`, `w` is `O x C x k x k`,
    /// `b` has `O` entries; zero padding `pad` on every side.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(w), stride, pad)?;
        if self.value(b).len() != geo.out_c {
            return Err(shape_err(
                "conv2d",
                format!("bias length {} vs {}", self.value(b).len(), geo.out_c),
            ));
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(b).data();
        let plane = geo.out_h * geo.out_w;
        let mut out = vec![T::zero(); geo.n * geo.out_c * plane];
        let mut cols = vec![T::zero(); geo.col_rows() * plane];
        for i in 0..geo.n {
            geo.im2col(&xs[i * geo.in_len()..(i + 1) * geo.in_len()], &mut cols);
            let dst = &mut out[i * geo.out_c * plane..(i + 1) * geo.out_c * plane];
            gemm(
                geo.out_c,
                geo.col_rows(),
                plane,
                ws,
                false,
                &cols,
                false,
                dst,
                false,
            );
            for (o, chunk) in dst.chunks_mut(plane).enumerate() {
                for v in chunk {
                    *v = *v + bs[o];
                }
            }
        }
        let value = Tensor::new(&[geo.n, geo.out_c, geo.out_h, geo.out_w], out)?;
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        ))
    }

    /// Max-pool with a square window and stride equal to the window.
    /// Trailing rows/columns that do not fill a window are dropped.
    /// Ties go to the first maximal element in row-major order.
    pub fn max_pool2d(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let (n, c, h, w) = match self.shape(x) {
            &[n, c, h, w] => (n, c, h, w),
            other => {
                return Err(shape_err(
                    "max_pool2d",
                    format!("expected NCHW, got {other:?}"),
                ))
            }
        };
        let (oh, ow) = (h / window, w / window);
        if window == 0 || oh == 0 || ow == 0 {
            return Err(shape_err(
                "max_pool2d",
                format!("window {window} larger than {h}x{w}"),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * window + dy) * w + ox * window + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::new(&[n, c, oh, ow], out)?,
            Op::MaxPool2d { x, argmax },
            ng,
        ))
    }

    /// Euclidean distance of every row of `a` (`m x d`) to the single row
    /// `b` (`1 x d`); returns `m x 1`.
    pub fn distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, d) = self.dims2(a, "distance")?;
        let (one, d2) = self.dims2(b, "distance")?;
        if one != 1 || d != d2 {
            return Err(shape_err(
                "distance",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out = (0..m)
            .map(|r| {
                av[r * d..(r + 1) * d]
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum::<T>()
                    .sqrt()
            })
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&[m, 1], out)?, Op::Distance { a, b }, ng))
    }

    /// `x^g` elementwise for non-negative `x` and scalar `g`; zero entries
    /// stay zero and pass no gradient.
    pub fn pow_by(&mut self, x: NodeId, g: NodeId) -> Result<NodeId> {
        if self.value(g).len() != 1 {
            return Err(shape_err("pow_by", "exponent must be a scalar".into()));
        }
        let e = self.value(g).data()[0];
        if self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(Error::Contract(
                "pow_by requires non-negative inputs".into(),
            ));
        }
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v.powf(e) } else { T::zero() });
        let ng = self.ng(&[x, g]);
        Ok(self.push(value, Op::PowBy { x, g }, ng))
    }

    /// Divides each row of a non-negative matrix by its sum. A row that sums
    /// to zero becomes uniform.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, cols) = self.dims2(x, "normalize_rows")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(cols) {
            let s: T = row.iter().copied().sum();
            if s > T::zero() {
                row.iter_mut().for_each(|v| *v = *v / s);
            } else {
                let u = T::one() / T::lit(cols as f64);
                row.iter_mut().for_each(|v| *v = u);
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::NormalizeRows(x), ng))
    }

    /// Applies one linear classifier per row. Row `n` of `params` holds a
    /// `classes x D` weight matrix (row-major) followed by `classes` biases;
    /// row `n` of `z` is the `D`-dimensional feature vector. Returns the
    /// `N x classes` logits.
    pub fn apply_classifiers(
        &mut self,
        params: NodeId,
        z: NodeId,
        classes: usize,
    ) -> Result<NodeId> {
        let (n, width) = self.dims2(params, "apply_classifiers")?;
        let (n2, d) = self.dims2(z, "apply_classifiers")?;
        if n != n2 || width != classes * (d + 1) {
            return Err(shape_err(
                "apply_classifiers",
                format!("params {n}x{width}, features {n2}x{d}, {classes} classes"),
            ));
        }
        let p = self.value(params).data();
        let zv = self.value(z).data();
        let mut out = vec![T::zero(); n * classes];
        for r in 0..n {
            let pr = &p[r * width..(r + 1) * width];
            let zr = &zv[r * d..(r + 1) * d];
            for c in 0..classes {
                let dot: T = pr[c * d..(c + 1) * d]
                    .iter()
                    .zip(zr)
                    .map(|(&a, &b)| a * b)
                    .sum();
                out[r * classes + c] = dot + pr[classes * d + c];
            }
        }
        let ng = self.ng(&[params, z]);
        Ok(self.push(
            Tensor::new(&[n, classes], out)?,
            Op::ApplyClassifiers { params, z, classes },
            ng,
        ))
    }

    /// Gradients of the scalar `output` with respect to every parameter of
    /// `store`.
    pub fn backward(&self, output: NodeId, store: &ParamStore<T>) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut result = Gradients::zeros_like(store);
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![T::one()]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.all_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    node: i,
                    op: node.op.name(),
                });
            }
            self.backprop_node(i, &g, &mut grads, &mut result)?;
        }
        Ok(result)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        result: &mut Gradients<T>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let val = node.value.data();
        match &node.op {
            Op::Input => {}
            Op::Param(pid) => {
                let dst = result.get_mut(*pid).data_mut();
                for (d, &v) in dst.iter_mut().zip(g) {
                    *d = *d + v;
                }
            }
            Op::Affine { x, w, b } => {
                let (n, inp) = self.value(*x).dims2()?;
                let o = self.value(*w).dims2()?.0;
                if self.needs(*x) {
                    let wv = self.value(*w).data();
                    self.acc(grads, *x, |dx| {
                        gemm(n, o, inp, g, false, wv, false, dx, true)
                    });
                }
                if self.needs(*w) {
                    let xv = self.value(*x).data();
                    self.acc(grads, *w, |dw| {
                        gemm(o, n, inp, g, true, xv, false, dw, true)
                    });
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.acc(grads, *b, |db| {
                            for row in g.chunks(o) {
                                for (d, &v) in db.iter_mut().zip(row) {
                                    *d = *d + v;
                                }
                            }
                        });
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    self.acc(grads, *a, |da| gemm(m, n, k, g, false, bv, true, da, true));
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    self.acc(grads, *b, |db| gemm(k, m, n, av, true, g, false, db, true));
                }
            }
            Op::Add(a, b) => {
                self.acc_scaled(grads, *a, g, T::one());
                self.acc_scaled(grads, *b, g, T::one());
            }
            Op::Sub(a, b) => {
                self.acc_scaled(grads, *a, g, T::one());
                self.acc_scaled(grads, *b, g, -T::one());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.acc(grads, *a, |d| zip_acc(d, g, bv, |gi, y| gi * y));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, |d| zip_acc(d, g, av, |gi, x| gi * x));
                }
            }
            Op::AddN(parts) => {
                for &p in parts {
                    self.acc_scaled(grads, p, g, T::one());
                }
            }
            Op::Scale { x, k } => self.acc_scaled(grads, *x, g, *k),
            Op::ScaleBy { x, s } => {
                let k = self.value(*s).data()[0];
                self.acc_scaled(grads, *x, g, k);
                if self.needs(*s) {
                    let xv = self.value(*x).data();
                    let dot: T = g.iter().zip(xv).map(|(&a, &b)| a * b).sum();
                    self.acc(grads, *s, |ds| ds[0] = ds[0] + dot);
                }
            }
            Op::Exp(x) => {
                if self.needs(*x) {
                    self.acc(grads, *x, |d| zip_acc(d, g, val, |gi, y| gi * y));
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    self.acc(grads, *x, |d| {
                        zip_acc(d, g, val, |gi, y| gi * y * (T::one() - y))
                    });
                }
            }
            Op::Tanh(x) => {
                if self.needs(*x) {
                    self.acc(grads, *x, |d| {
                        zip_acc(d, g, val, |gi, y| gi * (T::one() - y * y))
                    });
                }
            }
            Op::Prelu { x, slope } => {
                let a = self.value(*slope).data()[0];
                let xv = self.value(*x).data();
                if self.needs(*x) {
                    self.acc(grads, *x, |d| {
                        zip_acc(d, g, xv, |gi, v| if v > T::zero() { gi } else { gi * a })
                    });
                }
                if self.needs(*slope) {
                    let ds: T = g
                        .iter()
                        .zip(xv)
                        .filter(|(_, &v)| v <= T::zero())
                        .map(|(&gi, &v)| gi * v)
                        .sum();
                    self.acc(grads, *slope, |d| d[0] = d[0] + ds);
                }
            }
            Op::Concat { parts } => {
                let (rows, total) = node.value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2()?.1;
                    if self.needs(p) {
                        self.acc(grads, p, |d| {
                            for r in 0..rows {
                                let src = &g[r * total + offset..r * total + offset + w];
                                for (a, &b) in d[r * w..(r + 1) * w].iter_mut().zip(src) {
                                    *a = *a + b;
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc_scaled(grads, p, &g[offset..offset + len], T::one());
                    offset += len;
                }
            }
            Op::Narrow { x, start } => {
                if self.needs(*x) {
                    let (rows, len) = node.value.dims2()?;
                    let cols = self.value(*x).dims2()?.1;
                    self.acc(grads, *x, |d| {
                        for r in 0..rows {
                            let dst = &mut d[r * cols + start..r * cols + start + len];
                            for (a, &b) in dst.iter_mut().zip(&g[r * len..(r + 1) * len]) {
                                *a = *a + b;
                            }
                        }
                    });
                }
            }
            Op::GatherRows { x, rows } => {
                if self.needs(*x) {
                    let cols = self.value(*x).dims2()?.1;
                    self.acc(grads, *x, |d| {
                        for (k, &r) in rows.iter().enumerate() {
                            let dst = &mut d[r * cols..(r + 1) * cols];
                            for (a, &b) in dst.iter_mut().zip(&g[k * cols..(k + 1) * cols]) {
                                *a = *a + b;
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => self.acc_scaled(grads, *x, g, T::one()),
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let cols = node.value.dims2()?.1;
                    self.acc(grads, *x, |d| {
                        for ((dr, gr), yr) in
                            d.chunks_mut(cols).zip(g.chunks(cols)).zip(val.chunks(cols))
                        {
                            let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                            for ((dd, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                                *dd = *dd + yi * (gi - dot);
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { probs, targets } => {
                if self.needs(*probs) {
                    let (rows, cols) = self.value(*probs).dims2()?;
                    let p = self.value(*probs).data();
                    let floor = T::lit(PROB_FLOOR);
                    let scale = g[0] / T::lit(rows as f64);
                    self.acc(grads, *probs, |d| {
                        for (r, &t) in targets.iter().enumerate() {
                            let v = p[r * cols + t];
                            if v >= floor {
                                d[r * cols + t] = d[r * cols + t] - scale / v;
                            }
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v = *v + g[0]));
                }
            }
            Op::Mean(x) => {
                if self.needs(*x) {
                    let k = g[0] / T::lit(self.value(*x).len() as f64);
                    self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v = *v + k));
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let geo = ConvGeometry::new(self.shape(*x), self.shape(*w), *stride, *pad)?;
                let plane = geo.out_h * geo.out_w;
                let per_out = geo.out_c * plane;
                if self.needs(*b) {
                    self.acc(grads, *b, |db| {
                        for img in g.chunks(per_out) {
                            for (o, chunk) in img.chunks(plane).enumerate() {
                                db[o] = db[o] + chunk.iter().copied().sum::<T>();
                            }
                        }
                    });
                }
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let mut cols = vec![T::zero(); geo.col_rows() * plane];
                if self.needs(*w) {
                    self.acc(grads, *w, |dw| {
                        for i in 0..geo.n {
                            geo.im2col(&xs[i * geo.in_len()..(i + 1) * geo.in_len()], &mut cols);
                            let gi = &g[i * per_out..(i + 1) * per_out];
                            gemm(
                                geo.out_c,
                                plane,
                                geo.col_rows(),
                                gi,
                                false,
                                &cols,
                                true,
                                dw,
                                true,
                            );
                        }
                    });
                }
                if self.needs(*x) {
                    self.acc(grads, *x, |dx| {
                        for i in 0..geo.n {
                            let gi = &g[i * per_out..(i + 1) * per_out];
                            gemm(
                                geo.col_rows(),
                                geo.out_c,
                                plane,
                                ws,
                                true,
                                gi,
                                false,
                                &mut cols,
                                false,
                            );
                            geo.col2im_add(
                                &cols,
                                &mut dx[i * geo.in_len()..(i + 1) * geo.in_len()],
                            );
                        }
                    });
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if self.needs(*x) {
                    self.acc(grads, *x, |d| {
                        for (&src, &gi) in argmax.iter().zip(g) {
                            d[src] = d[src] + gi;
                        }
                    });
                }
            }
            Op::Distance { a, b } => {
                let (m, dim) = self.value(*a).dims2()?;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // unit direction (a_r - b) / |a_r - b| scaled by upstream; zero at coincidence
                let mut dirs = vec![T::zero(); m * dim];
                for r in 0..m {
                    let dist = val[r];
                    if dist > T::zero() {
                        let k = g[r] / dist;
                        for c in 0..dim {
                            dirs[r * dim + c] = (av[r * dim + c] - bv[c]) * k;
                        }
                    }
                }
                if self.needs(*a) {
                    self.acc_scaled(grads, *a, &dirs, T::one());
                }
                if self.needs(*b) {
                    self.acc(grads, *b, |db| {
                        for row in dirs.chunks(dim) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d - v;
                            }
                        }
                    });
                }
            }
            Op::PowBy { x, g: ge } => {
                let e = self.value(*ge).data()[0];
                let xv = self.value(*x).data();
                if self.needs(*x) {
                    self.acc(grads, *x, |d| {
                        for ((dd, &gi), (&xi, &yi)) in d.iter_mut().zip(g).zip(xv.iter().zip(val)) {
                            if xi > T::zero() {
                                *dd = *dd + gi * e * yi / xi;
                            }
                        }
                    });
                }
                if self.needs(*ge) {
                    let de: T = g
                        .iter()
                        .zip(xv.iter().zip(val))
                        .filter(|(_, (&xi, _))| xi > T::zero())
                        .map(|(&gi, (&xi, &yi))| gi * yi * xi.ln())
                        .sum();
                    self.acc(grads, *ge, |d| d[0] = d[0] + de);
                }
            }
            Op::NormalizeRows(x) => {
                if self.needs(*x) {
                    let cols = node.value.dims2()?.1;
                    let xv = self.value(*x).data();
                    self.acc(grads, *x, |d| {
                        for r in 0..xv.len() / cols {
                            let xr = &xv[r * cols..(r + 1) * cols];
                            let s: T = xr.iter().copied().sum();
                            if s <= T::zero() {
                                continue;
                            }
                            let yr = &val[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                            for (dd, &gi) in d[r * cols..(r + 1) * cols].iter_mut().zip(gr) {
                                *dd = *dd + (gi - dot) / s;
                            }
                        }
                    });
                }
            }
            Op::ApplyClassifiers { params, z, classes } => {
                let (n, width) = self.value(*params).dims2()?;
                let d = self.value(*z).dims2()?.1;
                let pv = self.value(*params).data();
                let zv = self.value(*z).data();
                let c = *classes;
                if self.needs(*params) {
                    self.acc(grads, *params, |dp| {
                        for r in 0..n {
                            let zr = &zv[r * d..(r + 1) * d];
                            let dpr = &mut dp[r * width..(r + 1) * width];
                            for k in 0..c {
                                let gk = g[r * c + k];
                                for (dd, &zz) in dpr[k * d..(k + 1) * d].iter_mut().zip(zr) {
                                    *dd = *dd + gk * zz;
                                }
                                dpr[c * d + k] = dpr[c * d + k] + gk;
                            }
                        }
                    });
                }
                if self.needs(*z) {
                    self.acc(grads, *z, |dz| {
                        for r in 0..n {
                            let pr = &pv[r * width..(r + 1) * width];
                            for k in 0..c {
                                let gk = g[r * c + k];
                                for (dd, &ww) in dz[r * d..(r + 1) * d]
                                    .iter_mut()
                                    .zip(&pr[k * d..(k + 1) * d])
                                {
                                    *dd = *dd + gk * ww;
                                }
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], id: NodeId, f: impl FnOnce(&mut [T])) {
        if !self.needs(id) {
            return;
        }
        let len = self.nodes[id.0].value.len();
        let slot = grads[id.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(slot);
    }

    fn acc_scaled(&self, grads: &mut [Option<Vec<T>>], id: NodeId, g: &[T], k: T) {
        self.acc(grads, id, |d| {
            for (a, &b) in d.iter_mut().zip(g) {
                *a = *a + b * k;
            }
        });
    }
}

fn zip_acc<T: Scalar>(d: &mut [T], g: &[T], other: &[T], f: impl Fn(T, T) -> T) {
    for ((dd, &gi), &o) in d.iter_mut().zip(g).zip(other) {
        *dd = *dd + f(gi, o);
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, in_c, in_h, in_w) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("expected NCHW input, got {x:?}"),
                ))
            }
        };
        let (out_c, k) = match *w {
            [o, c, kh, kw] if c == in_c && kh == kw => (o, kh),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel {w:?} does not fit input {x:?}"),
                ))
            }
        };
        if stride == 0 || in_h + 2 * pad < k || in_w + 2 * pad < k {
            return Err(shape_err(
                "conv2d",
                format!("kernel {k} does not fit {in_h}x{in_w} with pad {pad}"),
            ));
        }
        Ok(Self {
            n,
            in_c,
            in_h,
            in_w,
            out_c,
            k,
            stride,
            pad,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
        })
    }

    fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    /// Position in the input plane for output `(oy, ox)` and kernel offset
    /// `(ky, kx)`, or `None` inside the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.in_h && x < self.in_w).then_some(y * self.in_w + x)
    }

    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let plane = self.out_h * self.out_w;
        for c in 0..self.in_c {
            let src = &img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            dst[oy * self.out_w + ox] = match self.source(oy, ox, ky, kx) {
                                Some(i) => src[i],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let plane = self.out_h * self.out_w;
        for c in 0..self.in_c {
            let dst = &mut img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some(i) = self.source(oy, ox, ky, kx) {
                                dst[i] = dst[i] + src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
