//! Wengert-list autodiff: ops append nodes with stored forward values,
//! `backward` replays the list in reverse accumulating gradients.

use std::rc::Rc;

use super::element::Element;
use super::kernels;
use super::tensor::Tensor;
use super::TensorError;

/// Probability clamp for log-loss, keeping `ln` finite at the extremes.
pub const PROB_EPS: f64 = 1e-7;
/// Norm floor for L2 row normalization of near-zero vectors.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    ConcatCols(Vec<NodeId>),
    MeanRows(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxSeg {
        x: NodeId,
        seg: usize,
        mask: Option<Rc<[bool]>>,
    },
    AddRowBias {
        m: NodeId,
        bias: NodeId,
    },
    L2NormRows(NodeId),
    Logloss {
        yhat: NodeId,
        labels: Rc<[f32]>,
    },
    EmbedLookup {
        table: NodeId,
        ids: Rc<[u32]>,
    },
    BroadcastRows {
        v: NodeId,
    },
    AttnScores {
        q: NodeId,
        k: NodeId,
        b: usize,
        r: usize,
        t: usize,
        heads: usize,
        dh: usize,
    },
    AttnApply {
        w: NodeId,
        v: NodeId,
        b: usize,
        r: usize,
        t: usize,
        heads: usize,
        dh: usize,
    },
    StopGrad(NodeId),
}

struct Node<T> {
    dims: Vec<usize>,
    data: Vec<T>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Build a fresh one per forward/backward pass; nodes own
/// their forward values so the graph can be replayed exactly in reverse.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    check_finite: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: false,
        }
    }

    /// Enable per-op output scans that turn NaN/Inf into a structured error.
    /// Off by default; the training loops leave it off for speed, tests and
    /// the gradient checker switch it on.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; gradients will be accumulated for it.
    pub fn param(&mut self, t: &Tensor) -> NodeId {
        let data = t.data().iter().map(|&v| T::from_f32(v)).collect();
        self.push_leaf(t.dims().to_vec(), data, true)
    }

    /// Non-trainable leaf; backward treats it (and anything derived only
    /// from constants) as opaque.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        let data = t.data().iter().map(|&v| T::from_f32(v)).collect();
        self.push_leaf(t.dims().to_vec(), data, false)
    }

    /// Leaf from raw values at the tape's own scalar width.
    pub fn leaf(&mut self, dims: &[usize], data: Vec<T>, needs_grad: bool) -> Result<NodeId, TensorError> {
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                dims: dims.to_vec(),
            });
        }
        Ok(self.push_leaf(dims.to_vec(), data, needs_grad))
    }

    fn push_leaf(&mut self, dims: Vec<usize>, data: Vec<T>, needs_grad: bool) -> NodeId {
        self.push(Node {
            dims,
            data,
            op: Op::Leaf,
            needs_grad,
        })
    }

    fn push(&mut self, node: Node<T>) -> NodeId {
        self.nodes.push(node);
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn finite_check(&self, id: NodeId, op: &'static str) -> Result<NodeId, TensorError> {
        if self.check_finite && !self.nodes[id.0].data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(id)
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].dims
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].data
    }

    /// Forward value converted back to an f32 [`Tensor`].
    pub fn value_tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::from_vec(&n.dims, n.data.iter().map(|v| v.cast_f32()).collect())
            .expect("node buffers are consistent")
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> T {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Accumulated gradient, if backward reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn grad_tensor(&self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].as_ref().map(|g| {
            Tensor::from_vec(&self.nodes[id.0].dims, g.iter().map(|v| v.cast_f32()).collect())
                .expect("grad buffers are consistent")
        })
    }

    fn rows_cols(&self, id: NodeId) -> (usize, usize) {
        let d = &self.nodes[id.0].dims;
        if d.len() == 2 {
            (d[0], d[1])
        } else {
            (1, d[0])
        }
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    // ---- elementwise ----

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        if self.nodes[a.0].dims != self.nodes[b.0].dims {
            return Err(TensorError::DimMismatch {
                op: op_name,
                lhs: self.nodes[a.0].dims.clone(),
                rhs: self.nodes[b.0].dims.clone(),
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let id = self.push(Node {
            dims: self.nodes[a.0].dims.clone(),
            data,
            op,
            needs_grad: self.needs(&[a, b]),
        });
        self.finite_check(id, op_name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let id = self.push(Node {
            dims: self.nodes[a.0].dims.clone(),
            data,
            op: Op::Relu(a),
            needs_grad: self.needs(&[a]),
        });
        self.finite_check(id, "relu")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let id = self.push(Node {
            dims: self.nodes[a.0].dims.clone(),
            data,
            op: Op::Sigmoid(a),
            needs_grad: self.needs(&[a]),
        });
        self.finite_check(id, "sigmoid")
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ad, bd) = (&self.nodes[a.0].dims, &self.nodes[b.0].dims);
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                lhs: ad.clone(),
                rhs: bd.clone(),
            });
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let mut data = vec![T::zero(); m * n];
        kernels::gemm_nn(
            m,
            k,
            n,
            T::one(),
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            T::zero(),
            &mut data,
        );
        let id = self.push(Node {
            dims: vec![m, n],
            data,
            op: Op::Matmul(a, b),
            needs_grad: self.needs(&[a, b]),
        });
        self.finite_check(id, "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let d = &self.nodes[a.0].dims;
        if d.len() != 2 {
            return Err(TensorError::BadShape {
                op: "transpose",
                dims: d.clone(),
                why: "rank-2 required",
            });
        }
        let (m, n) = (d[0], d[1]);
        let src = &self.nodes[a.0].data;
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let id = self.push(Node {
            dims: vec![n, m],
            data,
            op: Op::Transpose(a),
            needs_grad: self.needs(&[a]),
        });
        self.finite_check(id, "transpose")
    }

    /// Concatenate along the last axis. All rank-1 (lengths add) or all
    /// rank-2 with equal row counts (column blocks side by side).
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::BadShape {
                op: "concat_cols",
                dims: vec![],
                why: "needs at least one input",
            });
        }
        let rank = self.nodes[parts[0].0].dims.len();
        for p in parts {
            let d = &self.nodes[p.0].dims;
            if d.len() != rank || (rank == 2 && d[0] != self.nodes[parts[0].0].dims[0]) {
                return Err(TensorError::DimMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].dims.clone(),
                    rhs: d.clone(),
                });
            }
        }
        let rows = if rank == 2 {
            self.nodes[parts[0].0].dims[0]
        } else {
            1
        };
        let total: usize = parts.iter().map(|p| *self.nodes[p.0].dims.last().unwrap()).sum();
        let mut data = vec![T::zero(); rows * total];
        let mut off = 0;
        for p in parts {
            let c = *self.nodes[p.0].dims.last().unwrap();
            let src = &self.nodes[p.0].data;
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let dims = if rank == 2 { vec![rows, total] } else { vec![total] };
        let id = self.push(Node {
            dims,
            data,
            op: Op::ConcatCols(parts.to_vec()),
            needs_grad: self.needs(parts),
        });
        self.finite_check(id, "concat_cols")
    }

    /// Column means: rank-2 (m×n) → rank-1 [n]; rank-1 [n] → [1].
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let d = self.nodes[a.0].dims.clone();
        let (dims, data) = if d.len() == 2 {
            let (m, n) = (d[0], d[1]);
            if m == 0 {
                return Err(TensorError::BadShape {
                    op: "mean_rows",
                    dims: d,
                    why: "zero rows",
                });
            }
            let inv = T::from_f64(1.0 / m as f64);
            let src = &self.nodes[a.0].data;
            let mut out = vec![T::zero(); n];
            for i in 0..m {
                for j in 0..n {
                    out[j] = out[j] + src[i * n + j];
                }
            }
            for v in &mut out {
                *v = *v * inv;
            }
            (vec![n], out)
        } else {
            let n = d[0];
            if n == 0 {
                return Err(TensorError::BadShape {
                    op: "mean_rows",
                    dims: d,
                    why: "zero length",
                });
            }
            let inv = T::from_f64(1.0 / n as f64);
            let mut acc = T::zero();
            for &v in &self.nodes[a.0].data {
                acc = acc + v;
            }
            (vec![1], vec![acc * inv])
        };
        let id = self.push(Node {
            dims,
            data,
            op: Op::MeanRows(a),
            needs_grad: self.needs(&[a]),
        });
        self.finite_check(id, "mean_rows")
    }

    /// Add a rank-1 bias `[n]` to every row of a rank-2 `m×n` input.
    pub fn add_row_bias(&mut self, m: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let md = &self.nodes[m.0].dims;
        let bd = &self.nodes[bias.0].dims;
        if md.len() != 2 || bd.len() != 1 || md[1] != bd[0] {
            return Err(TensorError::DimMismatch {
                op: "add_row_bias",
                lhs: md.clone(),
                rhs: bd.clone(),
            });
        }
        let (rows, cols) = (md[0], md[1]);
        let mut data = self.nodes[m.0].data.clone();
        let b = &self.nodes[bias.0].data;
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = data[r * cols + c] + b[c];
            }
        }
        let id = self.push(Node {
            dims: vec![rows, cols],
            data,
            op: Op::AddRowBias { m, bias },
            needs_grad: self.needs(&[m, bias]),
        });
        self.finite_check(id, "add_row_bias")
    }

    /// Repeat a rank-1 vector `[n]` as each of `rows` rows.
    pub fn broadcast_rows(&mut self, v: NodeId, rows: usize) -> Result<NodeId, TensorError> {
        let d = &self.nodes[v.0].dims;
        if d.len() != 1 {
            return Err(TensorError::BadShape {
                op: "broadcast_rows",
                dims: d.clone(),
                why: "rank-1 required",
            });
        }
        let n = d[0];
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(&self.nodes[v.0].data);
        }
        let id = self.push(Node {
            dims: vec![rows, n],
            data,
            op: Op::BroadcastRows { v },
            needs_grad: self.needs(&[v]),
        });
        self.finite_check(id, "broadcast_rows")
    }

    /// Normalize each row to unit L2 norm; rows with norm below
    /// [`NORM_EPS`] are divided by the floor instead.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.rows_cols(a);
        let eps = T::from_f64(NORM_EPS);
        let src = &self.nodes[a.0].data;
        let mut data = vec![T::zero(); src.len()];
        for r in 0..rows {
            let s = &src[r * cols..(r + 1) * cols];
            let mut sq = T::zero();
            for &v in s {
                sq = sq + v * v;
            }
            let norm = sq.sqrt();
            let denom = if norm < eps { eps } else { norm };
            for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(s) {
                *o = v / denom;
            }
        }
        let id = self.push(Node {
            dims: self.nodes[a.0].dims.clone(),
            data,
            op: Op::L2NormRows(a),
            needs_grad: self.needs(&[a]),
        });
        self.finite_check(id, "l2_normalize_rows")
    }

    /// Segment softmax along rows. `cols` must divide into segments of
    /// width `seg`; an optional mask (same layout as the input) excludes
    /// entries from normalization and zeroes their output.
    pub fn softmax_seg(
        &mut self,
        x: NodeId,
        seg: usize,
        mask: Option<Rc<[bool]>>,
    ) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.rows_cols(x);
        if seg == 0 || cols % seg != 0 {
            return Err(TensorError::BadShape {
                op: "softmax_seg",
                dims: self.nodes[x.0].dims.clone(),
                why: "segment width must divide columns",
            });
        }
        if let Some(m) = &mask {
            if m.len() != rows * cols {
                return Err(TensorError::DimMismatch {
                    op: "softmax_seg",
                    lhs: self.nodes[x.0].dims.clone(),
                    rhs: vec![m.len()],
                });
            }
        }
        let mut data = vec![T::zero(); rows * cols];
        kernels::softmax_seg_fwd(
            &self.nodes[x.0].data,
            rows,
            cols,
            seg,
            mask.as_deref(),
            &mut data,
        );
        let id = self.push(Node {
            dims: self.nodes[x.0].dims.clone(),
            data,
            op: Op::SoftmaxSeg { x, seg, mask },
            needs_grad: self.needs(&[x]),
        });
        self.finite_check(id, "softmax_seg")
    }

    /// Elementwise binary cross-entropy against fixed 0/1 labels, with the
    /// prediction clamped to `[PROB_EPS, 1 − PROB_EPS]` before the logs.
    pub fn logloss(&mut self, yhat: NodeId, labels: &[f32]) -> Result<NodeId, TensorError> {
        let d = &self.nodes[yhat.0].dims;
        let n: usize = d.iter().product();
        if labels.len() != n || (d.len() == 2 && d[1] != 1) {
            return Err(TensorError::DimMismatch {
                op: "logloss",
                lhs: d.clone(),
                rhs: vec![labels.len()],
            });
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(TensorError::BadShape {
                op: "logloss",
                dims: d.clone(),
                why: "labels must be 0 or 1",
            });
        }
        let lo = T::from_f64(PROB_EPS);
        let hi = T::one() - lo;
        let data = self.nodes[yhat.0]
            .data
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let c = if p < lo {
                    lo
                } else if p > hi {
                    hi
                } else {
                    p
                };
                if y == 1.0 {
                    -c.ln()
                } else {
                    -(T::one() - c).ln()
                }
            })
            .collect();
        let id = self.push(Node {
            dims: d.clone(),
            data,
            op: Op::Logloss {
                yhat,
                labels: labels.into(),
            },
            needs_grad: self.needs(&[yhat]),
        });
        self.finite_check(id, "logloss")
    }

    /// Gather rows of an embedding table: ids `[n]`, table `v×d` → `n×d`.
    pub fn embed_lookup(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId, TensorError> {
        let d = &self.nodes[table.0].dims;
        if d.len() != 2 {
            return Err(TensorError::BadShape {
                op: "embed_lookup",
                dims: d.clone(),
                why: "table must be rank-2",
            });
        }
        let (v, dim) = (d[0], d[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            let i = i as usize;
            if i >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embed_lookup",
                    index: i,
                    bound: v,
                });
            }
            data.extend_from_slice(&self.nodes[table.0].data[i * dim..(i + 1) * dim]);
        }
        let id = self.push(Node {
            dims: vec![ids.len(), dim],
            data,
            op: Op::EmbedLookup {
                table,
                ids: ids.into(),
            },
            needs_grad: self.needs(&[table]),
        });
        self.finite_check(id, "embed_lookup")
    }

    /// Multi-head scaled dot-product scores between block-stacked queries
    /// and keys. `q` is (b·r)×d, `k` is (b·t)×d with the same head layout;
    /// returns (b·r)×(heads·t).
    pub fn attn_scores(
        &mut self,
        q: NodeId,
        k: NodeId,
        t: usize,
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        let qd = &self.nodes[q.0].dims;
        let kd = &self.nodes[k.0].dims;
        let bad = |why| TensorError::BadShape {
            op: "attn_scores",
            dims: kd.clone(),
            why,
        };
        if qd.len() != 2 || kd.len() != 2 {
            return Err(bad("rank-2 required"));
        }
        if qd[1] != kd[1] {
            return Err(TensorError::DimMismatch {
                op: "attn_scores",
                lhs: qd.clone(),
                rhs: kd.clone(),
            });
        }
        let d = qd[1];
        if heads == 0 || d % heads != 0 {
            return Err(bad("columns must split into heads"));
        }
        if t == 0 || kd[0] % t != 0 {
            return Err(bad("key rows must split into windows of t"));
        }
        let b = kd[0] / t;
        if b == 0 || qd[0] % b != 0 {
            return Err(bad("query rows must split across samples"));
        }
        let r = qd[0] / b;
        let dh = d / heads;
        let mut data = vec![T::zero(); b * r * heads * t];
        kernels::attn_scores_fwd(
            &self.nodes[q.0].data,
            &self.nodes[k.0].data,
            b,
            r,
            t,
            heads,
            dh,
            &mut data,
        );
        let id = self.push(Node {
            dims: vec![b * r, heads * t],
            data,
            op: Op::AttnScores {
                q,
                k,
                b,
                r,
                t,
                heads,
                dh,
            },
            needs_grad: self.needs(&[q, k]),
        });
        self.finite_check(id, "attn_scores")
    }

    /// Apply attention weights `(b·r)×(heads·t)` to values `(b·t)×d`,
    /// producing `(b·r)×d` with the same head layout as the values.
    pub fn attn_apply(
        &mut self,
        w: NodeId,
        v: NodeId,
        t: usize,
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        let wd = &self.nodes[w.0].dims;
        let vd = &self.nodes[v.0].dims;
        let bad = |why| TensorError::BadShape {
            op: "attn_apply",
            dims: vd.clone(),
            why,
        };
        if wd.len() != 2 || vd.len() != 2 {
            return Err(bad("rank-2 required"));
        }
        let d = vd[1];
        if heads == 0 || d % heads != 0 {
            return Err(bad("columns must split into heads"));
        }
        if t == 0 || vd[0] % t != 0 {
            return Err(bad("value rows must split into windows of t"));
        }
        if wd[1] != heads * t {
            return Err(TensorError::DimMismatch {
                op: "attn_apply",
                lhs: wd.clone(),
                rhs: vec![vd[0], heads * t],
            });
        }
        let b = vd[0] / t;
        if b == 0 || wd[0] % b != 0 {
            return Err(bad("weight rows must split across samples"));
        }
        let r = wd[0] / b;
        let dh = d / heads;
        let mut data = vec![T::zero(); b * r * d];
        kernels::attn_apply_fwd(
            &self.nodes[w.0].data,
            &self.nodes[v.0].data,
            b,
            r,
            t,
            heads,
            dh,
            &mut data,
        );
        let id = self.push(Node {
            dims: vec![b * r, d],
            data,
            op: Op::AttnApply {
                w,
                v,
                b,
                r,
                t,
                heads,
                dh,
            },
            needs_grad: self.needs(&[w, v]),
        });
        self.finite_check(id, "attn_apply")
    }

    /// Pass the value through but cut the graph: downstream gradients do
    /// not flow into `a` or anything behind it.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        self.push(Node {
            dims: self.nodes[a.0].dims.clone(),
            data: self.nodes[a.0].data.clone(),
            op: Op::StopGrad(a),
            needs_grad: false,
        })
    }

    // ---- backward ----

    /// Accumulate `d loss / d node` for every node the scalar `loss`
    /// depends on. Gradients add up across calls on the same tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                dims: self.nodes[loss.0].dims.clone(),
            });
        }
        let nodes = &self.nodes;
        // Fresh adjoints per call, merged into the persistent grads at the
        // end: replaying with the accumulated grads as the working buffers
        // would re-propagate earlier seeds and double-count shared paths.
        let mut adj: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        let grads = &mut adj;
        let seed = acc_into(grads, loss, 1);
        seed[0] = seed[0] + T::one();

        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad && !matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf | Op::StopGrad(_) => {}
                Op::Add(a, b) => {
                    if nodes[a.0].needs_grad {
                        axpy(acc_into(grads, *a, g.len()), &g, T::one());
                    }
                    if nodes[b.0].needs_grad {
                        axpy(acc_into(grads, *b, g.len()), &g, T::one());
                    }
                }
                Op::Sub(a, b) => {
                    if nodes[a.0].needs_grad {
                        axpy(acc_into(grads, *a, g.len()), &g, T::one());
                    }
                    if nodes[b.0].needs_grad {
                        axpy(acc_into(grads, *b, g.len()), &g, -T::one());
                    }
                }
                Op::Mul(a, b) => {
                    if nodes[a.0].needs_grad {
                        let da = acc_into(grads, *a, g.len());
                        for ((o, &gv), &bv) in da.iter_mut().zip(&g).zip(&nodes[b.0].data) {
                            *o = *o + gv * bv;
                        }
                    }
                    if nodes[b.0].needs_grad {
                        let db = acc_into(grads, *b, g.len());
                        for ((o, &gv), &av) in db.iter_mut().zip(&g).zip(&nodes[a.0].data) {
                            *o = *o + gv * av;
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (nodes[a.0].dims[0], nodes[a.0].dims[1]);
                    let n = nodes[b.0].dims[1];
                    if nodes[a.0].needs_grad {
                        let da = acc_into(grads, *a, m * k);
                        kernels::gemm_nt_acc(m, n, k, &g, &nodes[b.0].data, da);
                    }
                    if nodes[b.0].needs_grad {
                        let db = acc_into(grads, *b, k * n);
                        kernels::gemm_tn_acc(k, m, n, &nodes[a.0].data, &g, db);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (nodes[a.0].dims[0], nodes[a.0].dims[1]);
                    let da = acc_into(grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = da[i * n + j] + g[j * m + i];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let rank = node.dims.len();
                    let rows = if rank == 2 { node.dims[0] } else { 1 };
                    let total = *node.dims.last().unwrap();
                    let mut off = 0;
                    for p in parts {
                        let c = *nodes[p.0].dims.last().unwrap();
                        if nodes[p.0].needs_grad {
                            let dp = acc_into(grads, *p, rows * c);
                            for r in 0..rows {
                                for j in 0..c {
                                    dp[r * c + j] = dp[r * c + j] + g[r * total + off + j];
                                }
                            }
                        }
                        off += c;
                    }
                }
                Op::MeanRows(a) => {
                    let ad = &nodes[a.0].dims;
                    if ad.len() == 2 {
                        let (m, n) = (ad[0], ad[1]);
                        let inv = T::from_f64(1.0 / m as f64);
                        let da = acc_into(grads, *a, m * n);
                        for i in 0..m {
                            for j in 0..n {
                                da[i * n + j] = da[i * n + j] + g[j] * inv;
                            }
                        }
                    } else {
                        let n = ad[0];
                        let inv = T::from_f64(1.0 / n as f64);
                        let da = acc_into(grads, *a, n);
                        for v in da.iter_mut() {
                            *v = *v + g[0] * inv;
                        }
                    }
                }
                Op::Relu(a) => {
                    let da = acc_into(grads, *a, g.len());
                    for ((o, &gv), &x) in da.iter_mut().zip(&g).zip(&nodes[a.0].data) {
                        if x > T::zero() {
                            *o = *o + gv;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let da = acc_into(grads, *a, g.len());
                    for ((o, &gv), &y) in da.iter_mut().zip(&g).zip(&node.data) {
                        *o = *o + gv * y * (T::one() - y);
                    }
                }
                Op::SoftmaxSeg { x, seg, .. } => {
                    let (rows, cols) = if node.dims.len() == 2 {
                        (node.dims[0], node.dims[1])
                    } else {
                        (1, node.dims[0])
                    };
                    let dx = acc_into(grads, *x, rows * cols);
                    kernels::softmax_seg_bwd(&node.data, &g, rows, cols, *seg, dx);
                }
                Op::AddRowBias { m, bias } => {
                    let (rows, cols) = (node.dims[0], node.dims[1]);
                    if nodes[m.0].needs_grad {
                        axpy(acc_into(grads, *m, rows * cols), &g, T::one());
                    }
                    if nodes[bias.0].needs_grad {
                        let db = acc_into(grads, *bias, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                db[c] = db[c] + g[r * cols + c];
                            }
                        }
                    }
                }
                Op::BroadcastRows { v } => {
                    let (rows, cols) = (node.dims[0], node.dims[1]);
                    let dv = acc_into(grads, *v, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dv[c] = dv[c] + g[r * cols + c];
                        }
                    }
                }
                Op::L2NormRows(a) => {
                    let (rows, cols) = if node.dims.len() == 2 {
                        (node.dims[0], node.dims[1])
                    } else {
                        (1, node.dims[0])
                    };
                    let eps = T::from_f64(NORM_EPS);
                    let da = acc_into(grads, *a, rows * cols);
                    for r in 0..rows {
                        let xin = &nodes[a.0].data[r * cols..(r + 1) * cols];
                        let y = &node.data[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut sq = T::zero();
                        for &v in xin {
                            sq = sq + v * v;
                        }
                        let norm = sq.sqrt();
                        let out = &mut da[r * cols..(r + 1) * cols];
                        if norm < eps {
                            for (o, &gv) in out.iter_mut().zip(gr) {
                                *o = *o + gv / eps;
                            }
                        } else {
                            let mut dot = T::zero();
                            for (&gv, &yv) in gr.iter().zip(y) {
                                dot = dot + gv * yv;
                            }
                            for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(y) {
                                *o = *o + (gv - yv * dot) / norm;
                            }
                        }
                    }
                }
                Op::Logloss { yhat, labels } => {
                    let lo = T::from_f64(PROB_EPS);
                    let hi = T::one() - lo;
                    let dy = acc_into(grads, *yhat, g.len());
                    for (i, ((o, &gv), &p)) in
                        dy.iter_mut().zip(&g).zip(&nodes[yhat.0].data).enumerate()
                    {
                        // clamp saturates: no gradient outside the open interval
                        if p <= lo || p >= hi {
                            continue;
                        }
                        let y = T::from_f32(labels[i]);
                        *o = *o + gv * (p - y) / (p * (T::one() - p));
                    }
                }
                Op::EmbedLookup { table, ids } => {
                    let dim = nodes[table.0].dims[1];
                    let dt = acc_into(grads, *table, nodes[table.0].data.len());
                    for (r, &i) in ids.iter().enumerate() {
                        let base = i as usize * dim;
                        for c in 0..dim {
                            dt[base + c] = dt[base + c] + g[r * dim + c];
                        }
                    }
                }
                Op::AttnScores {
                    q,
                    k,
                    b,
                    r,
                    t,
                    heads,
                    dh,
                } => {
                    let (q, k, b, r, t, heads, dh) = (*q, *k, *b, *r, *t, *heads, *dh);
                    let qlen = nodes[q.0].data.len();
                    let klen = nodes[k.0].data.len();
                    // both sides always accumulated; Q/K share the embedding
                    // trunk in practice so skipping one is never useful
                    let mut dq = grads[q.0].take().unwrap_or_else(|| vec![T::zero(); qlen]);
                    let mut dk = grads[k.0].take().unwrap_or_else(|| vec![T::zero(); klen]);
                    kernels::attn_scores_bwd(
                        &nodes[q.0].data,
                        &nodes[k.0].data,
                        &g,
                        b,
                        r,
                        t,
                        heads,
                        dh,
                        &mut dq,
                        &mut dk,
                    );
                    grads[q.0] = Some(dq);
                    grads[k.0] = Some(dk);
                }
                Op::AttnApply {
                    w,
                    v,
                    b,
                    r,
                    t,
                    heads,
                    dh,
                } => {
                    let (w, v, b, r, t, heads, dh) = (*w, *v, *b, *r, *t, *heads, *dh);
                    let wlen = nodes[w.0].data.len();
                    let vlen = nodes[v.0].data.len();
                    let mut dw = grads[w.0].take().unwrap_or_else(|| vec![T::zero(); wlen]);
                    let mut dv = grads[v.0].take().unwrap_or_else(|| vec![T::zero(); vlen]);
                    kernels::attn_apply_bwd(
                        &nodes[w.0].data,
                        &nodes[v.0].data,
                        &g,
                        b,
                        r,
                        t,
                        heads,
                        dh,
                        &mut dw,
                        &mut dv,
                    );
                    grads[w.0] = Some(dw);
                    grads[v.0] = Some(dv);
                }
            }
            grads[i] = Some(g);
        }
        for (slot, a) in self.grads.iter_mut().zip(adj) {
            if let Some(a) = a {
                match slot {
                    Some(acc) => axpy(acc, &a, T::one()),
                    None => *slot = Some(a),
                }
            }
        }
        Ok(())
    }
}

/// `y += alpha * x` elementwise.
fn axpy<T: Element>(y: &mut [T], x: &[T], alpha: T) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = *o + alpha * v;
    }
}

fn acc_into<'g, T: Element>(
    grads: &'g mut [Option<Vec<T>>],
    id: NodeId,
    len: usize,
) -> &'g mut Vec<T> {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
}


#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: Vec<f32>) -> Tensor {
        Tensor::from_vec(&[rows, cols], v).unwrap()
    }

    #[test]
    fn matmul_forward_known() {
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.constant(&t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&t2(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_dim_mismatch_is_structured() {
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.constant(&t2(2, 3, vec![0.0; 6]));
        let b = tape.constant(&t2(2, 2, vec![0.0; 4]));
        match tape.matmul(a, b) {
            Err(TensorError::DimMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected DimMismatch, got {other:?}"),
        }
    }

    #[test]
    fn square_via_mul_has_gradient_two_x() {
        // f(w) = w^2 at w = 3 → df/dw = 6
        let mut tape: Tape<f64> = Tape::new();
        let w = tape.param(&Tensor::scalar(3.0));
        let f = tape.mul(w, w).unwrap();
        tape.backward(f).unwrap();
        assert!((tape.grad(w).unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn grad_accumulates_across_backward_calls() {
        let mut tape: Tape<f64> = Tape::new();
        let w = tape.param(&Tensor::scalar(3.0));
        let f = tape.mul(w, w).unwrap();
        tape.backward(f).unwrap();
        tape.backward(f).unwrap();
        assert!((tape.grad(w).unwrap()[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn relu_kink_has_zero_grad_at_origin() {
        let mut tape: Tape<f64> = Tape::new();
        let w = tape.param(&Tensor::scalar(0.0));
        let f = tape.relu(w).unwrap();
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(w).unwrap()[0], 0.0);
    }

    #[test]
    fn logloss_matches_hand_values() {
        // -ln(0.8) for y=1, p=0.8 ; -ln(0.6) for y=0, p=0.4
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.constant(&Tensor::from_vec(&[2], vec![0.8, 0.4]).unwrap());
        let l = tape.logloss(p, &[1.0, 0.0]).unwrap();
        let v = tape.value(l);
        assert!((v[0] - (-0.8f64.ln())).abs() < 1e-7);
        assert!((v[1] - (-0.6f64.ln())).abs() < 1e-7);
    }

    #[test]
    fn logloss_clamps_extremes_finite() {
        let mut tape: Tape<f64> = Tape::new().with_finite_checks();
        let p = tape.constant(&Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap());
        let l = tape.logloss(p, &[1.0, 0.0]).unwrap();
        let want = -(PROB_EPS).ln();
        for &v in tape.value(l) {
            assert!((v - want).abs() / want < 1e-3);
        }
    }

    #[test]
    fn logloss_rejects_soft_labels() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.constant(&Tensor::from_vec(&[1], vec![0.5]).unwrap());
        assert!(tape.logloss(p, &[0.5]).is_err());
    }

    #[test]
    fn saturated_logloss_has_zero_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.param(&Tensor::from_vec(&[2, 1], vec![0.0, 0.5]).unwrap());
        let l = tape.logloss(p, &[1.0, 1.0]).unwrap();
        let m = tape.mean_rows(l).unwrap();
        let s = tape.mean_rows(m).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(p).unwrap();
        assert_eq!(g[0], 0.0); // clamped entry
        assert!(g[1] < 0.0); // live entry pushes p up toward the label
    }

    #[test]
    fn l2_normalize_produces_unit_rows() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(&t2(2, 3, vec![3.0, 0.0, 4.0, 1.0, 1.0, 1.0]));
        let y = tape.l2_normalize_rows(x).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 0.6).abs() < 1e-12);
        assert!((v[2] - 0.8).abs() < 1e-12);
        let n1: f64 = v[3..6].iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((n1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_zero_row_stays_zero() {
        let mut tape: Tape<f64> = Tape::new().with_finite_checks();
        let x = tape.constant(&t2(1, 3, vec![0.0, 0.0, 0.0]));
        let y = tape.l2_normalize_rows(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut tape: Tape<f64> = Tape::new();
        let w = tape.param(&Tensor::scalar(3.0));
        let sg = tape.stop_grad(w);
        let f = tape.mul(sg, sg).unwrap();
        tape.backward(f).unwrap();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn embed_lookup_gathers_and_scatters() {
        let mut tape: Tape<f64> = Tape::new();
        let table = tape.param(&t2(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let e = tape.embed_lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(e), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let m = tape.mean_rows(e).unwrap(); // [3.666.., 4.666..]
        let s = tape.mean_rows(m).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(table).unwrap();
        // row 2 used twice, row 0 once, row 1 never
        assert!((g[0] - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(g[2], 0.0);
        assert!((g[4] - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn embed_lookup_rejects_out_of_range() {
        let mut tape: Tape<f64> = Tape::new();
        let table = tape.constant(&t2(3, 2, vec![0.0; 6]));
        match tape.embed_lookup(table, &[3]) {
            Err(TensorError::IndexOutOfRange { index: 3, bound: 3, .. }) => {}
            other => panic!("expected IndexOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape: Tape<f64> = Tape::new();
        let w = tape.param(&t2(1, 2, vec![1.0, 2.0]));
        let f = tape.mul(w, w).unwrap();
        assert!(matches!(
            tape.backward(f),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn finite_checks_catch_overflow() {
        let mut tape: Tape<f32> = Tape::new().with_finite_checks();
        let a = tape.constant(&Tensor::scalar(f32::MAX));
        assert!(matches!(
            tape.mul(a, a),
            Err(TensorError::NonFinite { op: "mul" })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one_under_mask() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(&t2(1, 4, vec![0.1, 3.0, -2.0, 0.5]));
        let mask: Rc<[bool]> = vec![true, true, false, true].into();
        let y = tape.softmax_seg(x, 4, Some(mask)).unwrap();
        let v = tape.value(y);
        assert_eq!(v[2], 0.0);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
