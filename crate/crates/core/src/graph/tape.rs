//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every differentiable computation in the crate is recorded as a flat list
//! of nodes; `backward` walks the list in reverse, dispatching on the op
//! enum. Parameters enter as [`Op::Param`] leaves so their gradients can be
//! accumulated across many small tapes (one per ray) into a shared
//! [`GradStore`].

use super::params::{GradStore, ParamId, ParamStore};
use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Shape, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Arithmetic precision of recorded values. `Single` emulates binary32 by
/// rounding every op output; storage stays f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    Single,
    #[default]
    Double,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Input,
    Param(ParamId),
    MatMul,
    Transpose,
    Reshape,
    Add,
    Sub,
    Mul,
    Affine { scale: f64 },
    AddBias,
    RepeatRows { rows: usize },
    ConcatCols,
    SliceCols { start: usize, len: usize },
    ConcatRows,
    SliceRows { start: usize, len: usize },
    Silu,
    Relu,
    Sigmoid,
    Abs,
    SoftmaxRows,
    Mha { heads: usize },
    GroupedMha { heads: usize },
    LayerNorm,
    MeanAll,
    SumAll,
    MeanRows,
    Rot3Blocks { m: [[f64; 3]; 3] },
    PadReflect { pad: usize },
    Conv2d { stride: usize },
    ChannelMean,
    BilinearGather { pts: Vec<(f64, f64, bool)> },
    GatherRows { idx: Vec<usize> },
    ScatterRowsInto { idx: Vec<usize> },
    ChwFromRows { h: usize, w: usize },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    saved: Option<Tensor>,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by tape node.
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl NodeGrads {
    /// Gradient at `var`, zeros if the node was never reached.
    pub fn take(&mut self, var: Var, len: usize) -> Vec<f64> {
        self.grads[var.0].take().unwrap_or_else(|| vec![0.0; len])
    }

    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    precision: Precision,
}

impl Tape {
    pub fn new(grad_enabled: bool) -> Tape {
        Tape {
            nodes: Vec::new(),
            grad_enabled,
            precision: Precision::Double,
        }
    }

    pub fn with_precision(grad_enabled: bool, precision: Precision) -> Tape {
        Tape {
            nodes: Vec::new(),
            grad_enabled,
            precision,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn round(&self, mut t: Tensor) -> Tensor {
        if self.precision == Precision::Single {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        t
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor, saved: Option<Tensor>) -> Var {
        let needs_grad = self.grad_enabled
            && match op {
                Op::Leaf => false,
                Op::Input | Op::Param(_) => true,
                _ => inputs.iter().any(|&i| self.nodes[i].needs_grad),
            };
        let value = self.round(value);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            saved: if needs_grad { saved } else { None },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], value, None)
    }

    /// Differentiable leaf; its gradient is read back after `backward`.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, vec![], value, None)
    }

    /// Binds a stored parameter; gradients accumulate into the [`GradStore`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Op::Param(id), vec![], store.value(id).clone(), None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (ta.shape().rows(), ta.shape().cols());
        let (k2, n) = (tb.shape().rows(), tb.shape().cols());
        assert_eq!(k, k2, "matmul {} x {}", ta.shape(), tb.shape());
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Op::MatMul, vec![a.0, b.0], Tensor::matrix(m, n, out), None)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.shape().rows(), ta.shape().cols());
        let src = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Op::Transpose, vec![a.0], Tensor::matrix(n, m, out), None)
    }

    pub fn reshape(&mut self, a: Var, shape: Shape) -> Var {
        let value = self.nodes[a.0].value.reshaped(shape);
        self.push(Op::Reshape, vec![a.0], value, None)
    }

    fn zip_elementwise(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let out: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape();
        self.push(op, vec![a.0, b.0], Tensor::new(shape, out), None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_elementwise(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_elementwise(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_elementwise(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn affine(&mut self, a: Var, scale: f64, offset: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let out: Vec<f64> = ta.data().iter().map(|&x| scale * x + offset).collect();
        let shape = ta.shape();
        self.push(Op::Affine { scale }, vec![a.0], Tensor::new(shape, out), None)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let (m, n) = (ta.shape().rows(), ta.shape().cols());
        assert_eq!(tb.len(), n, "bias length mismatch");
        let mut out = ta.to_vec();
        for i in 0..m {
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let shape = ta.shape();
        self.push(Op::AddBias, vec![a.0, bias.0], Tensor::new(shape, out), None)
    }

    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        assert_eq!(ta.shape().rows(), 1, "repeat_rows needs a single row");
        let n = ta.shape().cols();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(ta.data());
        }
        self.push(
            Op::RepeatRows { rows },
            vec![a.0],
            Tensor::matrix(rows, n, out),
            None,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.nodes[parts[0].0].value.shape().rows();
        let total: usize = parts
            .iter()
            .map(|v| {
                let t = &self.nodes[v.0].value;
                assert_eq!(t.shape().rows(), m, "concat_cols row mismatch");
                t.shape().cols()
            })
            .sum();
        let mut out = vec![0.0; m * total];
        let mut col = 0;
        for v in parts {
            let t = &self.nodes[v.0].value;
            let n = t.shape().cols();
            for i in 0..m {
                out[i * total + col..i * total + col + n]
                    .copy_from_slice(&t.data()[i * n..(i + 1) * n]);
            }
            col += n;
        }
        self.push(
            Op::ConcatCols,
            parts.iter().map(|v| v.0).collect(),
            Tensor::matrix(m, total, out),
            None,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.shape().rows(), ta.shape().cols());
        assert!(start + len <= n);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&ta.data()[i * n + start..i * n + start + len]);
        }
        self.push(
            Op::SliceCols { start, len },
            vec![a.0],
            Tensor::matrix(m, len, out),
            None,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].value.shape().cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for v in parts {
            let t = &self.nodes[v.0].value;
            assert_eq!(t.shape().cols(), n, "concat_rows col mismatch");
            rows += t.shape().rows();
            out.extend_from_slice(t.data());
        }
        self.push(
            Op::ConcatRows,
            parts.iter().map(|v| v.0).collect(),
            Tensor::matrix(rows, n, out),
            None,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.shape().rows(), ta.shape().cols());
        assert!(start + len <= m);
        let out = ta.data()[start * n..(start + len) * n].to_vec();
        self.push(
            Op::SliceRows { start, len },
            vec![a.0],
            Tensor::matrix(len, n, out),
            None,
        )
    }

    fn map_elementwise(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let out: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let shape = ta.shape();
        self.push(op, vec![a.0], Tensor::new(shape, out), None)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map_elementwise(Op::Silu, a, |x| x / (1.0 + (-x).exp()))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_elementwise(Op::Relu, a, |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_elementwise(Op::Sigmoid, a, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map_elementwise(Op::Abs, a, f64::abs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.shape().rows(), ta.shape().cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&ta.data()[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        self.push(Op::SoftmaxRows, vec![a.0], Tensor::matrix(m, n, out), None)
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// q/k/v. `mask[j] = false` removes key `j` from every softmax; a row
    /// with no valid keys yields zeros.
    pub fn mha(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<Vec<bool>>) -> Var {
        let (tq_t, tk_t, tv_t) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let (tq, d) = (tq_t.shape().rows(), tq_t.shape().cols());
        let tk = tk_t.shape().rows();
        assert_eq!(tk_t.shape().cols(), d);
        assert_eq!(tv_t.shape().rows(), tk);
        assert_eq!(tv_t.shape().cols(), d);
        assert!(heads >= 1 && d % heads == 0, "head count must divide dim");
        if let Some(m) = &mask {
            assert_eq!(m.len(), tk);
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; tq * d];
        let mut probs = vec![0.0; heads * tq * tk];
        let qd = tq_t.data();
        let kd = tk_t.data();
        let vd = tv_t.data();
        let mut scores = vec![0.0; tk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let qrow = &qd[i * d + off..i * d + off + dh];
                let mut any_valid = false;
                for j in 0..tk {
                    let keep = mask.as_ref().map_or(true, |m| m[j]);
                    if keep {
                        let krow = &kd[j * d + off..j * d + off + dh];
                        let mut s = 0.0;
                        for (a, b) in qrow.iter().zip(krow) {
                            s += a * b;
                        }
                        scores[j] = s * scale;
                        any_valid = true;
                    } else {
                        scores[j] = f64::NEG_INFINITY;
                    }
                }
                let prow = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                if any_valid {
                    softmax_into(&scores, prow);
                } else {
                    prow.iter_mut().for_each(|p| *p = 0.0);
                }
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..tk {
                    let p = prow[j];
                    if p != 0.0 {
                        let vrow = &vd[j * d + off..j * d + off + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        self.push(
            Op::Mha { heads },
            vec![q.0, k.0, v.0],
            Tensor::matrix(tq, d, out),
            Some(Tensor::matrix(heads * tq, tk, probs)),
        )
    }

    /// Block-diagonal multi-head attention: query row `i` of `q [G, D]`
    /// attends only to the `n` key/value rows `{v·G + i}` of `k`/`v`
    /// (`[n·G, D]`, view-major). `mask[v·G + i] = false` removes that key
    /// for that group; a fully masked group yields a zero row. One node
    /// covers the per-point view fusion for a whole ray.
    pub fn grouped_mha(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Vec<bool>,
    ) -> Var {
        let (tq_t, tk_t, tv_t) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let (groups, d) = (tq_t.shape().rows(), tq_t.shape().cols());
        let rows = tk_t.shape().rows();
        assert_eq!(tk_t.shape().cols(), d);
        assert_eq!(tv_t.shape().rows(), rows);
        assert_eq!(tv_t.shape().cols(), d);
        assert!(groups >= 1 && rows % groups == 0, "keys must tile groups");
        let n = rows / groups;
        assert_eq!(mask.len(), rows);
        assert!(heads >= 1 && d % heads == 0);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = tq_t.data();
        let kd = tk_t.data();
        let vd = tv_t.data();
        let mut out = vec![0.0; groups * d];
        let mut probs = vec![0.0; heads * groups * n];
        let mut scores = vec![0.0; n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..groups {
                let qrow = &qd[i * d + off..i * d + off + dh];
                let mut any_valid = false;
                for j in 0..n {
                    let row = j * groups + i;
                    if mask[row] {
                        let krow = &kd[row * d + off..row * d + off + dh];
                        let mut s = 0.0;
                        for (a, b) in qrow.iter().zip(krow) {
                            s += a * b;
                        }
                        scores[j] = s * scale;
                        any_valid = true;
                    } else {
                        scores[j] = f64::NEG_INFINITY;
                    }
                }
                let prow = &mut probs[(h * groups + i) * n..(h * groups + i + 1) * n];
                if any_valid {
                    softmax_into(&scores, prow);
                } else {
                    prow.iter_mut().for_each(|p| *p = 0.0);
                }
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..n {
                    let p = prow[j];
                    if p != 0.0 {
                        let vrow = &vd[(j * groups + i) * d + off..(j * groups + i) * d + off + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        self.push(
            Op::GroupedMha { heads },
            vec![q.0, k.0, v.0],
            Tensor::matrix(groups, d, out),
            Some(Tensor::matrix(heads * groups, n, probs)),
        )
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let tx = &self.nodes[x.0].value;
        let (m, n) = (tx.shape().rows(), tx.shape().cols());
        assert_eq!(self.nodes[gain.0].value.len(), n);
        assert_eq!(self.nodes[bias.0].value.len(), n);
        let xd = tx.data();
        let gd = self.nodes[gain.0].value.clone();
        let bd = self.nodes[bias.0].value.clone();
        let mut out = vec![0.0; m * n];
        // saved: normalized activations plus one inverse-sigma column.
        let mut saved = vec![0.0; m * (n + 1)];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_sigma = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mean) * inv_sigma;
                saved[i * (n + 1) + j] = xhat;
                out[i * n + j] = gd.data()[j] * xhat + bd.data()[j];
            }
            saved[i * (n + 1) + n] = inv_sigma;
        }
        self.push(
            Op::LayerNorm,
            vec![x.0, gain.0, bias.0],
            Tensor::matrix(m, n, out),
            Some(Tensor::matrix(m, n + 1, saved)),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let v = ta.data().iter().sum::<f64>() / ta.len() as f64;
        self.push(Op::MeanAll, vec![a.0], Tensor::scalar(v), None)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let v = ta.data().iter().sum::<f64>();
        self.push(Op::SumAll, vec![a.0], Tensor::scalar(v), None)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.shape().rows(), ta.shape().cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += ta.data()[i * n + j];
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.push(Op::MeanRows, vec![a.0], Tensor::matrix(1, n, out), None)
    }

    /// Applies a fixed 3x3 matrix to each consecutive triplet of a vector.
    pub fn rot3_blocks(&mut self, a: Var, m: [[f64; 3]; 3]) -> Var {
        let ta = &self.nodes[a.0].value;
        let len = ta.len();
        assert_eq!(len % 3, 0, "rot3_blocks length must be divisible by 3");
        let src = ta.data();
        let mut out = vec![0.0; len];
        for j in 0..len / 3 {
            for r in 0..3 {
                out[3 * j + r] = m[r][0] * src[3 * j]
                    + m[r][1] * src[3 * j + 1]
                    + m[r][2] * src[3 * j + 2];
            }
        }
        let shape = ta.shape();
        self.push(Op::Rot3Blocks { m }, vec![a.0], Tensor::new(shape, out), None)
    }

    pub fn pad_reflect(&mut self, a: Var, pad: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        assert_eq!(ta.shape().ndim(), 3);
        let (c, h, w) = (ta.shape().dim(0), ta.shape().dim(1), ta.shape().dim(2));
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let src = ta.data();
        let mut out = vec![0.0; c * hp * wp];
        for ch in 0..c {
            for i in 0..hp {
                let si = reflect_index(i as isize - pad as isize, h);
                for j in 0..wp {
                    let sj = reflect_index(j as isize - pad as isize, w);
                    out[(ch * hp + i) * wp + j] = src[(ch * h + si) * w + sj];
                }
            }
        }
        self.push(
            Op::PadReflect { pad },
            vec![a.0],
            Tensor::new(Shape::d3(c, hp, wp), out),
            None,
        )
    }

    /// Valid-mode 2-d convolution: `x [ci,h,w]`, `w [co,ci,kh,kw]`, `b [co]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Var {
        let tx = &self.nodes[x.0].value;
        let tw = &self.nodes[weight.0].value;
        let tb = &self.nodes[bias.0].value;
        assert_eq!(tx.shape().ndim(), 3);
        assert_eq!(tw.shape().ndim(), 4);
        let (ci, h, w) = (tx.shape().dim(0), tx.shape().dim(1), tx.shape().dim(2));
        let (co, ci2, kh, kw) = (
            tw.shape().dim(0),
            tw.shape().dim(1),
            tw.shape().dim(2),
            tw.shape().dim(3),
        );
        assert_eq!(ci, ci2, "conv2d channel mismatch");
        assert_eq!(tb.len(), co);
        assert!(h >= kh && w >= kw, "conv2d input smaller than kernel");
        let ho = (h - kh) / stride + 1;
        let wo = (w - kw) / stride + 1;
        let xd = tx.data();
        let wd = tw.data();
        let bd = tb.data();
        let mut out = vec![0.0; co * ho * wo];
        for oc in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bd[oc];
                    for ic in 0..ci {
                        for di in 0..kh {
                            let xrow = &xd[(ic * h + i * stride + di) * w + j * stride..];
                            let wrow = &wd[((oc * ci + ic) * kh + di) * kw..];
                            for dj in 0..kw {
                                acc += xrow[dj] * wrow[dj];
                            }
                        }
                    }
                    out[(oc * ho + i) * wo + j] = acc;
                }
            }
        }
        self.push(
            Op::Conv2d { stride },
            vec![x.0, weight.0, bias.0],
            Tensor::new(Shape::d3(co, ho, wo), out),
            None,
        )
    }

    /// Spatial mean per channel of a `[c,h,w]` grid.
    pub fn channel_mean(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        assert_eq!(ta.shape().ndim(), 3);
        let (c, h, w) = (ta.shape().dim(0), ta.shape().dim(1), ta.shape().dim(2));
        let hw = h * w;
        let src = ta.data();
        let out: Vec<f64> = (0..c)
            .map(|ch| src[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Op::ChannelMean, vec![a.0], Tensor::matrix(1, c, out), None)
    }

    /// Bilinear reads from a `[l,h,w]` feature grid at continuous grid
    /// coordinates; invalid points yield zero rows.
    pub fn bilinear_gather(&mut self, fmap: Var, pts: Vec<(f64, f64, bool)>) -> Var {
        let tf = &self.nodes[fmap.0].value;
        assert_eq!(tf.shape().ndim(), 3);
        let (l, h, w) = (tf.shape().dim(0), tf.shape().dim(1), tf.shape().dim(2));
        let src = tf.data();
        let p = pts.len();
        let mut out = vec![0.0; p * l];
        for (pi, &(x, y, valid)) in pts.iter().enumerate() {
            if !valid {
                continue;
            }
            for (cell, weight) in bilinear_cells(x, y, w, h) {
                if weight == 0.0 {
                    continue;
                }
                let (cx, cy) = cell;
                for ch in 0..l {
                    out[pi * l + ch] += weight * src[(ch * h + cy) * w + cx];
                }
            }
        }
        self.push(
            Op::BilinearGather { pts },
            vec![fmap.0],
            Tensor::matrix(p, l, out),
            None,
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.shape().rows(), ta.shape().cols());
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            assert!(i < m);
            out.extend_from_slice(&ta.data()[i * n..(i + 1) * n]);
        }
        let rows = idx.len();
        self.push(
            Op::GatherRows { idx },
            vec![a.0],
            Tensor::matrix(rows, n, out),
            None,
        )
    }

    /// Writes the rows of `a` into a constant base at `idx`; the base rows
    /// are treated as constants so gradients reach only the written rows.
    pub fn scatter_rows_into(&mut self, a: Var, base: Tensor, idx: Vec<usize>) -> Var {
        let ta = &self.nodes[a.0].value;
        let n = ta.shape().cols();
        assert_eq!(base.shape().cols(), n);
        assert_eq!(ta.shape().rows(), idx.len());
        let mut out = base.to_vec();
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < base.shape().rows());
            out[i * n..(i + 1) * n].copy_from_slice(&ta.data()[r * n..(r + 1) * n]);
        }
        let rows = base.shape().rows();
        self.push(
            Op::ScatterRowsInto { idx },
            vec![a.0],
            Tensor::matrix(rows, n, out),
            None,
        )
    }

    /// `[h*w, c]` pixel rows to a `[c,h,w]` grid.
    pub fn chw_from_rows(&mut self, a: Var, h: usize, w: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, c) = (ta.shape().rows(), ta.shape().cols());
        assert_eq!(m, h * w);
        let src = ta.data();
        let mut out = vec![0.0; c * h * w];
        for p in 0..m {
            for ch in 0..c {
                out[ch * m + p] = src[p * c + ch];
            }
        }
        self.push(
            Op::ChwFromRows { h, w },
            vec![a.0],
            Tensor::new(Shape::d3(c, h, w), out),
            None,
        )
    }

    /// Reverse pass from the given seeds. Parameter gradients accumulate
    /// into `grads`; leaf-input gradients are read from the returned map.
    pub fn backward(&self, seeds: &[(Var, Vec<f64>)], grads: &mut GradStore) -> NodeGrads {
        assert!(self.grad_enabled, "backward on an eval-only tape");
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (var, seed) in seeds {
            let node = &self.nodes[var.0];
            assert_eq!(seed.len(), node.value.len(), "seed length mismatch");
            match &mut g[var.0] {
                Some(buf) => {
                    for (b, s) in buf.iter_mut().zip(seed) {
                        *b += s;
                    }
                }
                slot => *slot = Some(seed.clone()),
            }
        }
        for idx in (0..self.nodes.len()).rev() {
            if g[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let gout = g[idx].take().unwrap();
            let node = &self.nodes[idx];
            self.backprop_node(idx, node, &gout, &mut g, grads);
            if let Op::Param(pid) = node.op {
                grads.accumulate(pid, &gout);
            }
            if matches!(node.op, Op::Input) {
                g[idx] = Some(gout);
            }
        }
        NodeGrads { grads: g }
    }

    fn backprop_node(
        &self,
        _idx: usize,
        node: &Node,
        gout: &[f64],
        g: &mut [Option<Vec<f64>>],
        _grads: &mut GradStore,
    ) {
        let add_to = |g: &mut [Option<Vec<f64>>], input: usize, contribution: Vec<f64>| {
            if !self.nodes[input].needs_grad {
                return;
            }
            match &mut g[input] {
                Some(buf) => {
                    for (b, c) in buf.iter_mut().zip(&contribution) {
                        *b += c;
                    }
                }
                slot => *slot = Some(contribution),
            }
        };
        let needs = |input: usize| self.nodes[input].needs_grad;
        let val = |input: usize| &self.nodes[input].value;
        match &node.op {
            Op::Leaf | Op::Input | Op::Param(_) => {}
            Op::MatMul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (m, k) = (val(a).shape().rows(), val(a).shape().cols());
                let n = val(b).shape().cols();
                if needs(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_acc(gout, val(b).data(), &mut da, m, n, k);
                    add_to(g, a, da);
                }
                if needs(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_acc(val(a).data(), gout, &mut db, k, m, n);
                    add_to(g, b, db);
                }
            }
            Op::Transpose => {
                let a = node.inputs[0];
                let (m, n) = (val(a).shape().rows(), val(a).shape().cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = gout[j * m + i];
                    }
                }
                add_to(g, a, da);
            }
            Op::Reshape => add_to(g, node.inputs[0], gout.to_vec()),
            Op::Add => {
                add_to(g, node.inputs[0], gout.to_vec());
                add_to(g, node.inputs[1], gout.to_vec());
            }
            Op::Sub => {
                add_to(g, node.inputs[0], gout.to_vec());
                add_to(g, node.inputs[1], gout.iter().map(|v| -v).collect());
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if needs(a) {
                    add_to(
                        g,
                        a,
                        gout.iter().zip(val(b).data()).map(|(g, v)| g * v).collect(),
                    );
                }
                if needs(b) {
                    add_to(
                        g,
                        b,
                        gout.iter().zip(val(a).data()).map(|(g, v)| g * v).collect(),
                    );
                }
            }
            Op::Affine { scale, .. } => {
                add_to(g, node.inputs[0], gout.iter().map(|v| v * scale).collect());
            }
            Op::AddBias => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let n = val(b).len();
                add_to(g, a, gout.to_vec());
                if needs(b) {
                    let mut db = vec![0.0; n];
                    for chunk in gout.chunks_exact(n) {
                        for (d, &c) in db.iter_mut().zip(chunk) {
                            *d += c;
                        }
                    }
                    add_to(g, b, db);
                }
            }
            Op::RepeatRows { rows } => {
                let n = gout.len() / rows;
                let mut da = vec![0.0; n];
                for chunk in gout.chunks_exact(n) {
                    for (d, &c) in da.iter_mut().zip(chunk) {
                        *d += c;
                    }
                }
                add_to(g, node.inputs[0], da);
            }
            Op::ConcatCols => {
                let m = node.value.shape().rows();
                let total = node.value.shape().cols();
                let mut col = 0;
                for &input in &node.inputs {
                    let n = val(input).shape().cols();
                    if needs(input) {
                        let mut da = vec![0.0; m * n];
                        for i in 0..m {
                            da[i * n..(i + 1) * n]
                                .copy_from_slice(&gout[i * total + col..i * total + col + n]);
                        }
                        add_to(g, input, da);
                    }
                    col += n;
                }
            }
            Op::SliceCols { start, len } => {
                let a = node.inputs[0];
                let (m, n) = (val(a).shape().rows(), val(a).shape().cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + len]
                        .copy_from_slice(&gout[i * len..(i + 1) * len]);
                }
                add_to(g, a, da);
            }
            Op::ConcatRows => {
                let n = node.value.shape().cols();
                let mut row = 0;
                for &input in &node.inputs {
                    let r = val(input).shape().rows();
                    if needs(input) {
                        add_to(g, input, gout[row * n..(row + r) * n].to_vec());
                    }
                    row += r;
                }
            }
            Op::SliceRows { start, len } => {
                let a = node.inputs[0];
                let (m, n) = (val(a).shape().rows(), val(a).shape().cols());
                let mut da = vec![0.0; m * n];
                da[start * n..(start + len) * n].copy_from_slice(gout);
                add_to(g, a, da);
            }
            Op::Silu => {
                let x = val(node.inputs[0]).data();
                let da = gout
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        let s = 1.0 / (1.0 + (-xv).exp());
                        gv * (s + xv * s * (1.0 - s))
                    })
                    .collect();
                add_to(g, node.inputs[0], da);
            }
            Op::Relu => {
                let x = val(node.inputs[0]).data();
                let da = gout
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                add_to(g, node.inputs[0], da);
            }
            Op::Sigmoid => {
                let y = node.value.data();
                let da = gout
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                    .collect();
                add_to(g, node.inputs[0], da);
            }
            Op::Abs => {
                let x = val(node.inputs[0]).data();
                let da = gout
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        if xv > 0.0 {
                            gv
                        } else if xv < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_to(g, node.inputs[0], da);
            }
            Op::SoftmaxRows => {
                let y = node.value.data();
                let (m, n) = (node.value.shape().rows(), node.value.shape().cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let yrow = &y[i * n..(i + 1) * n];
                    let grow = &gout[i * n..(i + 1) * n];
                    let dot: f64 = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        da[i * n + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                add_to(g, node.inputs[0], da);
            }
            Op::Mha { heads, .. } => {
                let (q, k, v) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let (tq, d) = (val(q).shape().rows(), val(q).shape().cols());
                let tk = val(k).shape().rows();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let probs = node.saved.as_ref().expect("mha saved probs").data();
                let qd = val(q).data();
                let kd = val(k).data();
                let vd = val(v).data();
                let mut dq = vec![0.0; tq * d];
                let mut dk = vec![0.0; tk * d];
                let mut dv = vec![0.0; tk * d];
                let mut dp = vec![0.0; tk];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..tq {
                        let prow = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                        let grow = &gout[i * d + off..i * d + off + dh];
                        // dV and dP
                        for j in 0..tk {
                            let p = prow[j];
                            let vrow = &vd[j * d + off..j * d + off + dh];
                            let mut acc = 0.0;
                            for (a, b) in grow.iter().zip(vrow) {
                                acc += a * b;
                            }
                            dp[j] = acc;
                            if p != 0.0 {
                                let dvrow = &mut dv[j * d + off..j * d + off + dh];
                                for (dvv, &gv) in dvrow.iter_mut().zip(grow) {
                                    *dvv += p * gv;
                                }
                            }
                        }
                        // dS = P ⊙ (dP − Σ dP⊙P), then into dQ/dK
                        let dot: f64 = dp.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for j in 0..tk {
                            let ds = prow[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = &kd[j * d + off..j * d + off + dh];
                            let qrow = &qd[i * d + off..i * d + off + dh];
                            let dqrow = &mut dq[i * d + off..i * d + off + dh];
                            for (dqv, &kv) in dqrow.iter_mut().zip(krow) {
                                *dqv += ds * kv;
                            }
                            let dkrow = &mut dk[j * d + off..j * d + off + dh];
                            for (dkv, &qv) in dkrow.iter_mut().zip(qrow) {
                                *dkv += ds * qv;
                            }
                        }
                    }
                }
                if needs(q) {
                    add_to(g, q, dq);
                }
                if needs(k) {
                    add_to(g, k, dk);
                }
                if needs(v) {
                    add_to(g, v, dv);
                }
            }
            Op::GroupedMha { heads } => {
                let (q, k, v) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let (groups, d) = (val(q).shape().rows(), val(q).shape().cols());
                let rows = val(k).shape().rows();
                let n = rows / groups;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let probs = node.saved.as_ref().expect("grouped mha saved probs").data();
                let qd = val(q).data();
                let kd = val(k).data();
                let vd = val(v).data();
                let mut dq = vec![0.0; groups * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; n];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..groups {
                        let prow = &probs[(h * groups + i) * n..(h * groups + i + 1) * n];
                        let grow = &gout[i * d + off..i * d + off + dh];
                        for j in 0..n {
                            let row = j * groups + i;
                            let p = prow[j];
                            let vrow = &vd[row * d + off..row * d + off + dh];
                            let mut acc = 0.0;
                            for (a, b) in grow.iter().zip(vrow) {
                                acc += a * b;
                            }
                            dp[j] = acc;
                            if p != 0.0 {
                                let dvrow = &mut dv[row * d + off..row * d + off + dh];
                                for (dvv, &gv) in dvrow.iter_mut().zip(grow) {
                                    *dvv += p * gv;
                                }
                            }
                        }
                        let dot: f64 = dp.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            let ds = prow[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let row = j * groups + i;
                            let krow = &kd[row * d + off..row * d + off + dh];
                            let qrow = &qd[i * d + off..i * d + off + dh];
                            let dqrow = &mut dq[i * d + off..i * d + off + dh];
                            for (dqv, &kv) in dqrow.iter_mut().zip(krow) {
                                *dqv += ds * kv;
                            }
                            let dkrow = &mut dk[row * d + off..row * d + off + dh];
                            for (dkv, &qv) in dkrow.iter_mut().zip(qrow) {
                                *dkv += ds * qv;
                            }
                        }
                    }
                }
                if needs(q) {
                    add_to(g, q, dq);
                }
                if needs(k) {
                    add_to(g, k, dk);
                }
                if needs(v) {
                    add_to(g, v, dv);
                }
            }
            Op::LayerNorm => {
                let (x, gain, bias) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let (m, n) = (val(x).shape().rows(), val(x).shape().cols());
                let saved = node.saved.as_ref().expect("layernorm saved").data();
                let gd = val(gain).data();
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    let xhat = &saved[i * (n + 1)..i * (n + 1) + n];
                    let inv_sigma = saved[i * (n + 1) + n];
                    let grow = &gout[i * n..(i + 1) * n];
                    let mut mean_gdy = 0.0;
                    let mut mean_gdy_xhat = 0.0;
                    for j in 0..n {
                        let gdy = gd[j] * grow[j];
                        mean_gdy += gdy;
                        mean_gdy_xhat += gdy * xhat[j];
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    mean_gdy /= n as f64;
                    mean_gdy_xhat /= n as f64;
                    for j in 0..n {
                        let gdy = gd[j] * grow[j];
                        dx[i * n + j] = (gdy - mean_gdy - xhat[j] * mean_gdy_xhat) * inv_sigma;
                    }
                }
                if needs(x) {
                    add_to(g, x, dx);
                }
                if needs(gain) {
                    add_to(g, gain, dgain);
                }
                if needs(bias) {
                    add_to(g, bias, dbias);
                }
            }
            Op::MeanAll => {
                let a = node.inputs[0];
                let len = val(a).len();
                let gv = gout[0] / len as f64;
                add_to(g, a, vec![gv; len]);
            }
            Op::SumAll => {
                let a = node.inputs[0];
                add_to(g, a, vec![gout[0]; val(a).len()]);
            }
            Op::MeanRows => {
                let a = node.inputs[0];
                let (m, n) = (val(a).shape().rows(), val(a).shape().cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = gout[j] / m as f64;
                    }
                }
                add_to(g, a, da);
            }
            Op::Rot3Blocks { m } => {
                let a = node.inputs[0];
                let len = val(a).len();
                let mut da = vec![0.0; len];
                for j in 0..len / 3 {
                    for r in 0..3 {
                        da[3 * j + r] = m[0][r] * gout[3 * j]
                            + m[1][r] * gout[3 * j + 1]
                            + m[2][r] * gout[3 * j + 2];
                    }
                }
                add_to(g, a, da);
            }
            Op::PadReflect { pad } => {
                let a = node.inputs[0];
                let shape = val(a).shape();
                let (c, h, w) = (shape.dim(0), shape.dim(1), shape.dim(2));
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                let mut da = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..hp {
                        let si = reflect_index(i as isize - *pad as isize, h);
                        for j in 0..wp {
                            let sj = reflect_index(j as isize - *pad as isize, w);
                            da[(ch * h + si) * w + sj] += gout[(ch * hp + i) * wp + j];
                        }
                    }
                }
                add_to(g, a, da);
            }
            Op::Conv2d { stride } => {
                let (x, weight, bias) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let xs = val(x).shape();
                let ws = val(weight).shape();
                let (ci, h, w) = (xs.dim(0), xs.dim(1), xs.dim(2));
                let (co, _, kh, kw) = (ws.dim(0), ws.dim(1), ws.dim(2), ws.dim(3));
                let ho = (h - kh) / stride + 1;
                let wo = (w - kw) / stride + 1;
                let xd = val(x).data();
                let wd = val(weight).data();
                let mut dx = if needs(x) {
                    Some(vec![0.0; ci * h * w])
                } else {
                    None
                };
                let mut dw = if needs(weight) {
                    Some(vec![0.0; wd.len()])
                } else {
                    None
                };
                let mut db = if needs(bias) {
                    Some(vec![0.0; co])
                } else {
                    None
                };
                for oc in 0..co {
                    for i in 0..ho {
                        for j in 0..wo {
                            let gv = gout[(oc * ho + i) * wo + j];
                            if gv == 0.0 {
                                continue;
                            }
                            if let Some(db) = &mut db {
                                db[oc] += gv;
                            }
                            for ic in 0..ci {
                                for di in 0..kh {
                                    let xrow_base = (ic * h + i * stride + di) * w + j * stride;
                                    let wrow_base = ((oc * ci + ic) * kh + di) * kw;
                                    if let Some(dw) = &mut dw {
                                        for dj in 0..kw {
                                            dw[wrow_base + dj] += gv * xd[xrow_base + dj];
                                        }
                                    }
                                    if let Some(dx) = &mut dx {
                                        for dj in 0..kw {
                                            dx[xrow_base + dj] += gv * wd[wrow_base + dj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    add_to(g, x, dx);
                }
                if let Some(dw) = dw {
                    add_to(g, weight, dw);
                }
                if let Some(db) = db {
                    add_to(g, bias, db);
                }
            }
            Op::ChannelMean => {
                let a = node.inputs[0];
                let shape = val(a).shape();
                let (c, h, w) = (shape.dim(0), shape.dim(1), shape.dim(2));
                let hw = h * w;
                let mut da = vec![0.0; c * hw];
                for ch in 0..c {
                    let gv = gout[ch] / hw as f64;
                    for o in &mut da[ch * hw..(ch + 1) * hw] {
                        *o = gv;
                    }
                }
                add_to(g, a, da);
            }
            Op::BilinearGather { pts } => {
                let a = node.inputs[0];
                let shape = val(a).shape();
                let (l, h, w) = (shape.dim(0), shape.dim(1), shape.dim(2));
                let mut da = vec![0.0; l * h * w];
                for (pi, &(x, y, valid)) in pts.iter().enumerate() {
                    if !valid {
                        continue;
                    }
                    for (cell, weight) in bilinear_cells(x, y, w, h) {
                        if weight == 0.0 {
                            continue;
                        }
                        let (cx, cy) = cell;
                        for ch in 0..l {
                            da[(ch * h + cy) * w + cx] += weight * gout[pi * l + ch];
                        }
                    }
                }
                add_to(g, a, da);
            }
            Op::GatherRows { idx } => {
                let a = node.inputs[0];
                let (m, n) = (val(a).shape().rows(), val(a).shape().cols());
                let mut da = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        da[i * n + j] += gout[r * n + j];
                    }
                }
                add_to(g, a, da);
            }
            Op::ScatterRowsInto { idx, .. } => {
                let a = node.inputs[0];
                let n = val(a).shape().cols();
                let mut da = vec![0.0; idx.len() * n];
                for (r, &i) in idx.iter().enumerate() {
                    da[r * n..(r + 1) * n].copy_from_slice(&gout[i * n..(i + 1) * n]);
                }
                add_to(g, a, da);
            }
            Op::ChwFromRows { h, w } => {
                let a = node.inputs[0];
                let (m, c) = (val(a).shape().rows(), val(a).shape().cols());
                let hw = h * w;
                debug_assert_eq!(m, hw);
                let mut da = vec![0.0; m * c];
                for p in 0..m {
                    for ch in 0..c {
                        da[p * c + ch] = gout[ch * hw + p];
                    }
                }
                add_to(g, a, da);
            }
        }
    }
}

fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        let e = if s == f64::NEG_INFINITY {
            0.0
        } else {
            (s - max).exp()
        };
        *o = e;
        sum += e;
    }
    if sum > 0.0 {
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// The four cells and weights of bilinear interpolation at `(x, y)`,
/// clamped to the grid.
fn bilinear_cells(x: f64, y: f64, w: usize, h: usize) -> [((usize, usize), f64); 4] {
    let x0f = x.floor().clamp(0.0, (w - 1) as f64);
    let y0f = y.floor().clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x0f as usize, y0f as usize);
    let (fx, fy) = (x - x0f, y - y0f);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    [
        ((x0, y0), (1.0 - fx) * (1.0 - fy)),
        ((x1, y0), fx * (1.0 - fy)),
        ((x0, y1), (1.0 - fx) * fy),
        ((x1, y1), fx * fy),
    ]
}
