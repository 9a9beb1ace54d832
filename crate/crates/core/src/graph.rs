//! Reverse-mode differentiation on a per-step tape.
//!
//! A [`Graph`] records every forward operation into a flat node list; calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients. Graphs are built fresh for each training or tracking
//! step and dropped afterwards; parameters live outside the graph as
//! [`Tensor`]s and are attached with [`Graph::leaf`].
//!
//! The graph also keeps a multiply-accumulate counter (`macs`) fed by every
//! matmul-family operation, which serves as the brute-force oracle for the
//! analytic compute model in [`crate::macs`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Stride-1 im2col geometry for 2-D convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }
    pub fn out_width(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    Bmm(Var, Var),
    TransposeLast(Var),
    Reshape(Var),
    SoftmaxLast(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Ln(Var),
    PowConst(Var, f64),
    Abs(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanLast(Var),
    SumLast(Var),
    Concat0(Vec<Var>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    /// Multiply along `axis` by a vector of length `shape[axis]`.
    ScaleAxis {
        x: Var,
        d: Var,
        axis: usize,
    },
    /// Divide each length-`last` row by a per-row scalar.
    DivByLast {
        a: Var,
        d: Var,
    },
    /// In a full attention matrix `[h, Q, K]`, scale key columns `0..key_len`
    /// by `d` for queries at `query_start..` only.
    MaskRefKeys {
        w: Var,
        d: Var,
        query_start: usize,
        key_len: usize,
    },
    /// Forward emits the hard values; backward passes gradients to `soft`.
    StraightThrough(Var),
    Im2col {
        x: Var,
        geom: ConvGeom,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads(Var),
    AddRowBcast {
        a: Var,
        b: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    /// Multiply-accumulate count of all matmul-family forward ops.
    pub macs: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Attach an external tensor; gradient participation follows its flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t.clone(), Op::Leaf, needs)
    }

    /// Attach a value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last backward pass w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ── elementwise and scalar ops ──────────────────────────────────────

    fn binary_same_shape(&mut self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x / y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Div(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("maximum", a, b)?;
        let data = zip_map(
            self.data(a),
            self.data(b),
            |x, y| if x >= y { x } else { y },
        );
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Maximum(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("minimum", a, b)?;
        let data = zip_map(
            self.data(a),
            self.data(b),
            |x, y| if x <= y { x } else { y },
        );
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Minimum(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|x| -x).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push(t, Op::Neg(a), self.needs(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| c * x).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push(t, Op::Scale(a, c), self.needs(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x + c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push(t, Op::AddScalar(a), self.needs(a))
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x.max(c)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push(t, Op::ClampMin(a, c), self.needs(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| gelu_fwd(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push(t, Op::Gelu(a), self.needs(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self
            .data(a)
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push(t, Op::Sigmoid(a), self.needs(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite("ln of non-positive input".into()));
        }
        let data = self.data(a).iter().map(|x| x.ln()).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Ln(a), self.needs(a)))
    }

    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let data = self.data(a).iter().map(|x| x.powf(p)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push(t, Op::PowConst(a, p), self.needs(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|x| x.abs()).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push(t, Op::Abs(a), self.needs(a))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(self.data(a), self.data(b), m, k, n, &mut out);
        self.macs += (m * k * n) as u64;
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::Matmul(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            matmul_nn(
                &self.data(a)[i * m * k..(i + 1) * m * k],
                &self.data(b)[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.macs += (bs * m * k * n) as u64;
        let t = Tensor::new(vec![bs, m, n], out)?;
        Ok(self.push(t, Op::Bmm(a, b), self.needs(a) || self.needs(b)))
    }

    /// Swap the last two axes (2-D or 3-D).
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("{s:?}")));
        }
        let (batch, m, n) = last2(&s);
        let mut out = vec![0.0; batch * m * n];
        transpose_batched(self.data(a), batch, m, n, &mut out);
        let mut ns = s.clone();
        let l = ns.len();
        ns.swap(l - 1, l - 2);
        let t = Tensor::new(ns, out)?;
        Ok(self.push(t, Op::TransposeLast(a), self.needs(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(a), shape),
            ));
        }
        let t = Tensor::new(shape, self.data(a).to_vec())?;
        Ok(self.push(t, Op::Reshape(a), self.needs(a)))
    }

    // ── normalization and reductions ────────────────────────────────────

    /// Softmax along the last axis, stabilized by max subtraction.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let s = self.shape(a).to_vec();
        let n = *s.last().ok_or_else(|| Error::shape("softmax", "rank 0"))?;
        let rows = self.value(a).numel() / n;
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let x = &self.data(a)[r * n..(r + 1) * n];
            let o = &mut out[r * n..(r + 1) * n];
            let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (oi, &xi) in o.iter_mut().zip(x) {
                *oi = (xi - mx).exp();
                z += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= z;
            }
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, Op::SoftmaxLast(a), self.needs(a)))
    }

    /// Softmax along an arbitrary axis of a 1-D/2-D tensor (last axis for any rank).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let nd = self.shape(a).len();
        if axis + 1 == nd || nd == 1 {
            self.softmax_last(a)
        } else if nd == 2 && axis == 0 {
            let at = self.transpose_last(a)?;
            let sm = self.softmax_last(at)?;
            self.transpose_last(sm)
        } else {
            Err(Error::shape("softmax", format!("axis {axis} of rank {nd}")))
        }
    }

    /// Layer norm over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-6;
        let s = self.shape(x).to_vec();
        let n = *s
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "rank 0"))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?} gamma {:?} beta {:?}",
                    s,
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let rows = self.value(x).numel() / n;
        let mut out = vec![0.0; rows * n];
        let mut means = vec![0.0; rows];
        let mut rstds = vec![0.0; rows];
        for r in 0..rows {
            let xr = &self.data(x)[r * n..(r + 1) * n];
            let mu = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + EPS).sqrt();
            means[r] = mu;
            rstds[r] = rstd;
            let g = self.data(gamma);
            let b = self.data(beta);
            for i in 0..n {
                out[r * n + i] = (xr[i] - mu) * rstd * g[i] + b[i];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let t = Tensor::new(s, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.data(a).iter().sum());
        self.push(t, Op::Sum(a), self.needs(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let t = Tensor::scalar(self.data(a).iter().sum::<f64>() / n);
        self.push(t, Op::Mean(a), self.needs(a))
    }

    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("mean_last", format!("{s:?}")));
        }
        let n = *s.last().unwrap();
        let rows = self.value(a).numel() / n;
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            out[r] = self.data(a)[r * n..(r + 1) * n].iter().sum::<f64>() / n as f64;
        }
        let t = Tensor::new(s[..s.len() - 1].to_vec(), out)?;
        Ok(self.push(t, Op::MeanLast(a), self.needs(a)))
    }

    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("sum_last", format!("{s:?}")));
        }
        let n = *s.last().unwrap();
        let rows = self.value(a).numel() / n;
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            out[r] = self.data(a)[r * n..(r + 1) * n].iter().sum::<f64>();
        }
        let t = Tensor::new(s[..s.len() - 1].to_vec(), out)?;
        Ok(self.push(t, Op::SumLast(a), self.needs(a)))
    }

    // ── layout ops ──────────────────────────────────────────────────────

    /// Concatenate along axis 0; trailing dims must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat0", "empty input list"));
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(Error::shape(
                    "concat0",
                    format!("{:?} vs [_, {:?}]", self.shape(p), tail),
                ));
            }
            rows += self.shape(p)[0];
        }
        let mut data = Vec::with_capacity(rows * tail.iter().product::<usize>());
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let needs = parts.iter().any(|&p| self.needs(p));
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat0(parts.to_vec()), needs))
    }

    /// Contiguous slice along one axis.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} [{start}..{}] of {:?}", start + len, s),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&self.data(x)[base..base + len * inner]);
        }
        let mut ns = s.clone();
        ns[axis] = len;
        let t = Tensor::new(ns, data)?;
        Ok(self.push(
            t,
            Op::Narrow {
                x,
                axis,
                start,
                len,
            },
            self.needs(x),
        ))
    }

    /// Select rows (axis 0) by index, in the given order.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::shape("gather_rows", "rank 0"));
        }
        let inner: usize = s[1..].iter().product();
        for &i in idx {
            if i >= s[0] {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row {i} out of {}", s[0]),
                ));
            }
        }
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&self.data(x)[i * inner..(i + 1) * inner]);
        }
        let mut ns = s.clone();
        ns[0] = idx.len();
        let t = Tensor::new(ns, data)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            self.needs(x),
        ))
    }

    /// Multiply along `axis` by a vector `d` of length `shape[axis]`.
    pub fn scale_axis(&mut self, x: Var, d: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || self.shape(d) != [s[axis]] {
            return Err(Error::shape(
                "scale_axis",
                format!("x {:?} d {:?} axis {axis}", s, self.shape(d)),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let mid = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * mid * inner];
        for o in 0..outer {
            for m in 0..mid {
                let dv = self.data(d)[m];
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    out[base + i] = self.data(x)[base + i] * dv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(d);
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, Op::ScaleAxis { x, d, axis }, needs))
    }

    /// Divide each row (last axis) of `a` by the matching entry of `d`.
    pub fn div_by_last(&mut self, a: Var, d: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let n = *s
            .last()
            .ok_or_else(|| Error::shape("div_by_last", "rank 0"))?;
        let rows = self.value(a).numel() / n;
        if self.value(d).numel() != rows {
            return Err(Error::shape(
                "div_by_last",
                format!("a {:?} d {:?}", s, self.shape(d)),
            ));
        }
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let dv = self.data(d)[r];
            for i in 0..n {
                out[r * n + i] = self.data(a)[r * n + i] / dv;
            }
        }
        let needs = self.needs(a) || self.needs(d);
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, Op::DivByLast { a, d }, needs))
    }

    /// Mask reference-key columns of a full attention matrix for search queries.
    pub fn mask_ref_keys(
        &mut self,
        w: Var,
        d: Var,
        query_start: usize,
        key_len: usize,
    ) -> Result<Var> {
        let s = self.shape(w).to_vec();
        if s.len() != 3 || self.shape(d) != [key_len] || key_len > s[2] || query_start > s[1] {
            return Err(Error::shape(
                "mask_ref_keys",
                format!(
                    "w {:?} d {:?} query_start {query_start} key_len {key_len}",
                    s,
                    self.shape(d)
                ),
            ));
        }
        let (h, q, k) = (s[0], s[1], s[2]);
        let mut out = self.data(w).to_vec();
        for hi in 0..h {
            for qi in query_start..q {
                let base = (hi * q + qi) * k;
                for ki in 0..key_len {
                    out[base + ki] *= self.data(d)[ki];
                }
            }
        }
        let needs = self.needs(w) || self.needs(d);
        let t = Tensor::new(s, out)?;
        Ok(self.push(
            t,
            Op::MaskRefKeys {
                w,
                d,
                query_start,
                key_len,
            },
            needs,
        ))
    }

    /// Emit `hard` in the forward pass while routing gradients to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Vec<f64>) -> Result<Var> {
        if hard.len() != self.value(soft).numel() {
            return Err(Error::shape(
                "straight_through",
                format!("{} hard values for {:?}", hard.len(), self.shape(soft)),
            ));
        }
        let t = Tensor::new(self.shape(soft).to_vec(), hard)?;
        Ok(self.push(t, Op::StraightThrough(soft), self.needs(soft)))
    }

    /// Unfold `[C, H, W]` into `[H_out*W_out, C*k*k]` patches (stride 1).
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let s = self.shape(x);
        if s != [geom.channels, geom.height, geom.width] {
            return Err(Error::shape(
                "im2col",
                format!(
                    "x {:?} vs geom [{}, {}, {}]",
                    s, geom.channels, geom.height, geom.width
                ),
            ));
        }
        let (oh, ow, k) = (geom.out_height(), geom.out_width(), geom.kernel);
        let cols = geom.channels * k * k;
        let mut out = vec![0.0; oh * ow * cols];
        let xd = self.data(x);
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (oy * ow + ox) * cols;
                for c in 0..geom.channels {
                    for ky in 0..k {
                        let iy = (oy + ky) as isize - geom.pad as isize;
                        for kx in 0..k {
                            let ix = (ox + kx) as isize - geom.pad as isize;
                            let col = (c * k + ky) * k + kx;
                            if iy >= 0
                                && iy < geom.height as isize
                                && ix >= 0
                                && ix < geom.width as isize
                            {
                                out[row + col] =
                                    xd[(c * geom.height + iy as usize) * geom.width + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![oh * ow, cols], out)?;
        Ok(self.push(t, Op::Im2col { x, geom }, self.needs(x)))
    }

    /// `[N, C]` → `[heads, N, C/heads]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] % heads != 0 {
            return Err(Error::shape(
                "split_heads",
                format!("{s:?} into {heads} heads"),
            ));
        }
        let (n, c) = (s[0], s[1]);
        let d = c / heads;
        let mut out = vec![0.0; n * c];
        for h in 0..heads {
            for i in 0..n {
                for j in 0..d {
                    out[(h * n + i) * d + j] = self.data(x)[i * c + h * d + j];
                }
            }
        }
        let t = Tensor::new(vec![heads, n, d], out)?;
        Ok(self.push(t, Op::SplitHeads { x, heads }, self.needs(x)))
    }

    /// `[heads, N, d]` → `[N, heads*d]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("merge_heads", format!("{s:?}")));
        }
        let (h, n, d) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; h * n * d];
        for hi in 0..h {
            for i in 0..n {
                for j in 0..d {
                    out[i * h * d + hi * d + j] = self.data(x)[(hi * n + i) * d + j];
                }
            }
        }
        let t = Tensor::new(vec![n, h * d], out)?;
        Ok(self.push(t, Op::MergeHeads(x), self.needs(x)))
    }

    /// `[R, C] + [C]`, broadcasting the bias across rows.
    pub fn add_row_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let n = *s
            .last()
            .ok_or_else(|| Error::shape("add_row_bcast", "rank 0"))?;
        if self.shape(b) != [n] {
            return Err(Error::shape(
                "add_row_bcast",
                format!("a {:?} b {:?}", s, self.shape(b)),
            ));
        }
        let rows = self.value(a).numel() / n;
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            for i in 0..n {
                out[r * n + i] = self.data(a)[r * n + i] + self.data(b)[i];
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, Op::AddRowBcast { a, b }, needs))
    }

    /// `x @ w + b` with bias broadcast across rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_bcast(y, b)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar node; gradients land in [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            // leaf grads are read by the caller; interior grads can be dropped,
            // but keeping leaves only would need another pass, so restore leaves.
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn acc_owned(&mut self, v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(a, g);
                self.acc(b, g);
            }
            Op::Sub(a, b) => {
                self.acc(a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.acc_owned(b, neg);
            }
            Op::Mul(a, b) => {
                let da = zip_map(g, self.data(b), |x, y| x * y);
                let db = zip_map(g, self.data(a), |x, y| x * y);
                self.acc_owned(a, da);
                self.acc_owned(b, db);
            }
            Op::Div(a, b) => {
                let da = zip_map(g, self.data(b), |x, y| x / y);
                let db: Vec<f64> = g
                    .iter()
                    .zip(self.data(a).iter().zip(self.data(b)))
                    .map(|(gi, (av, bv))| -gi * av / (bv * bv))
                    .collect();
                self.acc_owned(a, da);
                self.acc_owned(b, db);
            }
            Op::Neg(a) => {
                let da: Vec<f64> = g.iter().map(|x| -x).collect();
                self.acc_owned(a, da);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|x| c * x).collect();
                self.acc_owned(a, da);
            }
            Op::AddScalar(a) => self.acc(a, g),
            Op::ClampMin(a, c) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(gi, &x)| if x > c { *gi } else { 0.0 })
                    .collect();
                self.acc_owned(a, da);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt(g, self.data(b), m, n, k, &mut da);
                    self.acc_owned(a, da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn(self.data(a), g, m, k, n, &mut db);
                    self.acc_owned(b, db);
                }
            }
            Op::Bmm(a, b) => {
                let (bs, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let n = self.shape(b)[2];
                if self.needs(a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        matmul_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &self.data(b)[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.acc_owned(a, da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        matmul_tn(
                            &self.data(a)[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    self.acc_owned(b, db);
                }
            }
            Op::TransposeLast(a) => {
                let s = self.shape(i_var(i)).to_vec();
                let (batch, m, n) = last2(&s);
                let mut da = vec![0.0; batch * m * n];
                transpose_batched(g, batch, m, n, &mut da);
                self.acc_owned(a, da);
            }
            Op::Reshape(a) => self.acc(a, g),
            Op::SoftmaxLast(a) => {
                let y = self.data(i_var(i));
                let n = *self.shape(i_var(i)).last().unwrap();
                let rows = y.len() / n;
                let mut da = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..n {
                        da[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc_owned(a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let n = *self.shape(x).last().unwrap();
                let rows = self.value(x).numel() / n;
                let needs_x = self.needs(x);
                let needs_gamma = self.needs(gamma);
                let needs_beta = self.needs(beta);
                let mut dx = vec![0.0; rows * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                {
                    let xd = self.data(x);
                    let gam = self.data(gamma);
                    for r in 0..rows {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xd[r * n..(r + 1) * n];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let xhat = (xr[j] - mu) * rs;
                            let dxhat = gr[j] * gam[j];
                            dgamma[j] += gr[j] * xhat;
                            dbeta[j] += gr[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= n as f64;
                        mean_dxhat_xhat /= n as f64;
                        if needs_x {
                            for j in 0..n {
                                let xhat = (xr[j] - mu) * rs;
                                let dxhat = gr[j] * gam[j];
                                dx[r * n + j] = rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                            }
                        }
                    }
                }
                if needs_x {
                    self.acc_owned(x, dx);
                }
                if needs_gamma {
                    self.acc_owned(gamma, dgamma);
                }
                if needs_beta {
                    self.acc_owned(beta, dbeta);
                }
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(gi, &x)| gi * gelu_bwd(x))
                    .collect();
                self.acc_owned(a, da);
            }
            Op::Sigmoid(a) => {
                let y = self.data(i_var(i));
                let da: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .map(|(gi, &yi)| gi * yi * (1.0 - yi))
                    .collect();
                self.acc_owned(a, da);
            }
            Op::Ln(a) => {
                let da = zip_map(g, self.data(a), |gi, x| gi / x);
                self.acc_owned(a, da);
            }
            Op::PowConst(a, p) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(gi, &x)| gi * p * x.powf(p - 1.0))
                    .collect();
                self.acc_owned(a, da);
            }
            Op::Abs(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(gi, &x)| gi * x.signum() * if x == 0.0 { 0.0 } else { 1.0 })
                    .collect();
                self.acc_owned(a, da);
            }
            Op::Maximum(a, b) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(a).iter().zip(self.data(b)))
                    .map(|(gi, (av, bv))| if av >= bv { *gi } else { 0.0 })
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(self.data(a).iter().zip(self.data(b)))
                    .map(|(gi, (av, bv))| if av >= bv { 0.0 } else { *gi })
                    .collect();
                self.acc_owned(a, da);
                self.acc_owned(b, db);
            }
            Op::Minimum(a, b) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(a).iter().zip(self.data(b)))
                    .map(|(gi, (av, bv))| if av <= bv { *gi } else { 0.0 })
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(self.data(a).iter().zip(self.data(b)))
                    .map(|(gi, (av, bv))| if av <= bv { 0.0 } else { *gi })
                    .collect();
                self.acc_owned(a, da);
                self.acc_owned(b, db);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(a).numel()];
                self.acc_owned(a, da);
            }
            Op::Mean(a) => {
                let n = self.value(a).numel();
                let da = vec![g[0] / n as f64; n];
                self.acc_owned(a, da);
            }
            Op::MeanLast(a) => {
                let n = *self.shape(a).last().unwrap();
                let rows = self.value(a).numel() / n;
                let mut da = vec![0.0; rows * n];
                for r in 0..rows {
                    let v = g[r] / n as f64;
                    for j in 0..n {
                        da[r * n + j] = v;
                    }
                }
                self.acc_owned(a, da);
            }
            Op::SumLast(a) => {
                let n = *self.shape(a).last().unwrap();
                let rows = self.value(a).numel() / n;
                let mut da = vec![0.0; rows * n];
                for r in 0..rows {
                    for j in 0..n {
                        da[r * n + j] = g[r];
                    }
                }
                self.acc_owned(a, da);
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for p in parts {
                    let sz = self.value(p).numel();
                    let slice = g[off..off + sz].to_vec();
                    self.acc_owned(p, slice);
                    off += sz;
                }
            }
            Op::Narrow {
                x,
                axis,
                start,
                len,
            } => {
                let s = self.shape(x).to_vec();
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut dx = vec![0.0; self.value(x).numel()];
                for o in 0..outer {
                    let dst = (o * s[axis] + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.acc_owned(x, dx);
            }
            Op::GatherRows { x, idx } => {
                let inner: usize = self.shape(x)[1..].iter().product();
                let mut dx = vec![0.0; self.value(x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..inner {
                        dx[i * inner + j] += g[r * inner + j];
                    }
                }
                self.acc_owned(x, dx);
            }
            Op::ScaleAxis { x, d, axis } => {
                let s = self.shape(x).to_vec();
                let outer: usize = s[..axis].iter().product();
                let mid = s[axis];
                let inner: usize = s[axis + 1..].iter().product();
                let needs_x = self.needs(x);
                let needs_d = self.needs(d);
                let mut dx = vec![0.0; self.value(x).numel()];
                let mut dd = vec![0.0; mid];
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        let dv = self.data(d)[m];
                        for j in 0..inner {
                            dx[base + j] = g[base + j] * dv;
                            dd[m] += g[base + j] * self.data(x)[base + j];
                        }
                    }
                }
                if needs_x {
                    self.acc_owned(x, dx);
                }
                if needs_d {
                    self.acc_owned(d, dd);
                }
            }
            Op::DivByLast { a, d } => {
                let n = *self.shape(a).last().unwrap();
                let rows = self.value(a).numel() / n;
                let needs_a = self.needs(a);
                let needs_d = self.needs(d);
                let mut da = vec![0.0; rows * n];
                let mut dd = vec![0.0; rows];
                for r in 0..rows {
                    let dv = self.data(d)[r];
                    for j in 0..n {
                        let gi = g[r * n + j];
                        da[r * n + j] = gi / dv;
                        dd[r] -= gi * self.data(a)[r * n + j] / (dv * dv);
                    }
                }
                if needs_a {
                    self.acc_owned(a, da);
                }
                if needs_d {
                    self.acc_owned(d, dd);
                }
            }
            Op::MaskRefKeys {
                w,
                d,
                query_start,
                key_len,
            } => {
                let s = self.shape(w).to_vec();
                let (h, q, k) = (s[0], s[1], s[2]);
                let needs_w = self.needs(w);
                let needs_d = self.needs(d);
                let mut dw = g.to_vec();
                let mut dd = vec![0.0; key_len];
                for hi in 0..h {
                    for qi in query_start..q {
                        let base = (hi * q + qi) * k;
                        for ki in 0..key_len {
                            dd[ki] += g[base + ki] * self.data(w)[base + ki];
                            dw[base + ki] = g[base + ki] * self.data(d)[ki];
                        }
                    }
                }
                if needs_w {
                    self.acc_owned(w, dw);
                }
                if needs_d {
                    self.acc_owned(d, dd);
                }
            }
            Op::StraightThrough(soft) => self.acc(soft, g),
            Op::Im2col { x, geom } => {
                let (oh, ow, k) = (geom.out_height(), geom.out_width(), geom.kernel);
                let cols = geom.channels * k * k;
                let mut dx = vec![0.0; self.value(x).numel()];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = (oy * ow + ox) * cols;
                        for c in 0..geom.channels {
                            for ky in 0..k {
                                let iy = (oy + ky) as isize - geom.pad as isize;
                                for kx in 0..k {
                                    let ix = (ox + kx) as isize - geom.pad as isize;
                                    if iy >= 0
                                        && iy < geom.height as isize
                                        && ix >= 0
                                        && ix < geom.width as isize
                                    {
                                        let col = (c * k + ky) * k + kx;
                                        dx[(c * geom.height + iy as usize) * geom.width
                                            + ix as usize] += g[row + col];
                                    }
                                }
                            }
                        }
                    }
                }
                self.acc_owned(x, dx);
            }
            Op::SplitHeads { x, heads } => {
                let s = self.shape(x).to_vec();
                let (n, c) = (s[0], s[1]);
                let d = c / heads;
                let mut dx = vec![0.0; n * c];
                for h in 0..heads {
                    for i in 0..n {
                        for j in 0..d {
                            dx[i * c + h * d + j] = g[(h * n + i) * d + j];
                        }
                    }
                }
                self.acc_owned(x, dx);
            }
            Op::MergeHeads(x) => {
                let s = self.shape(x).to_vec();
                let (h, n, d) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; h * n * d];
                for hi in 0..h {
                    for i in 0..n {
                        for j in 0..d {
                            dx[(hi * n + i) * d + j] = g[i * h * d + hi * d + j];
                        }
                    }
                }
                self.acc_owned(x, dx);
            }
            Op::AddRowBcast { a, b } => {
                let n = *self.shape(a).last().unwrap();
                let rows = self.value(a).numel() / n;
                self.acc(a, g);
                if self.needs(b) {
                    let mut db = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            db[j] += g[r * n + j];
                        }
                    }
                    self.acc_owned(b, db);
                }
            }
        }
    }
}

#[inline]
fn i_var(i: usize) -> Var {
    Var(i)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn last2(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape.len();
    let batch: usize = shape[..n - 2].iter().product();
    (batch, shape[n - 2], shape[n - 1])
}

fn transpose_batched(x: &[f64], batch: usize, m: usize, n: usize, out: &mut [f64]) {
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = x[base + i * n + j];
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[k,n]
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += a[m,n] * b[k,n]^T
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *o += s;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(i2, i2).unwrap();
        assert_eq!(g.data(y), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.data(y), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax_last(x).unwrap();
        for v in g.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x2 = g.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y2 = g.softmax_last(x2).unwrap();
        let expect = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (v, e) in g.data(y2).iter().zip(expect) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 4], &[0.3, -1.0, 2.0, 0.7, 5.0, 5.0, -5.0, 0.0]));
        let y = g.softmax_last(x).unwrap();
        for r in 0..2 {
            let s: f64 = g.data(y)[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(g.data(y)[r * 4..(r + 1) * 4].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(g.softmax_last(x).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[3.0, 3.0, 3.0, 3.0]));
        let gamma = g.constant(Tensor::ones(&[4]));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for v in g.data(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[0.0]));
        let y = g.gelu(x);
        assert_eq!(g.data(y), &[0.0]);
    }

    #[test]
    fn backward_through_product() {
        // f(a) = sum(a * a) → df/da = 2a
        let mut g = Graph::new();
        let mut a = t(&[3], &[1.0, -2.0, 3.0]);
        a.set_requires_grad(true);
        let av = g.leaf(&a);
        let sq = g.mul(av, av).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(av).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn gather_and_concat_round_trip_grads() {
        let mut g = Graph::new();
        let mut a = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        a.set_requires_grad(true);
        let av = g.leaf(&a);
        let x = g.gather_rows(av, &[2, 0]).unwrap();
        assert_eq!(g.data(x), &[5.0, 6.0, 1.0, 2.0]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(av).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn split_merge_heads_inverse() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 4], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
        let sh = g.split_heads(x, 2).unwrap();
        assert_eq!(g.shape(sh), &[2, 2, 2]);
        // head 0 carries dims 0..2 of each token
        assert_eq!(g.data(sh), &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
        let back = g.merge_heads(sh).unwrap();
        assert_eq!(g.data(back), g.data(x));
    }

    #[test]
    fn straight_through_passes_hard_forward_soft_backward() {
        let mut g = Graph::new();
        let mut a = t(&[2], &[0.3, 0.9]);
        a.set_requires_grad(true);
        let av = g.leaf(&a);
        let st = g.straight_through(av, vec![0.0, 1.0]).unwrap();
        assert_eq!(g.data(st), &[0.0, 1.0]);
        let s = g.sum(st);
        g.backward(s).unwrap();
        assert_eq!(g.grad(av).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn mask_ref_keys_masks_search_queries_only() {
        // h=1, Q=3 (1 ref + 2 search), K=3 (ref keys first)
        let mut g = Graph::new();
        let w = g.constant(t(&[1, 3, 3], &[1.0; 9]));
        let d = g.constant(t(&[1], &[0.0]));
        let masked = g.mask_ref_keys(w, d, 1, 1).unwrap();
        let out = g.data(masked);
        assert_eq!(out[0..3], [1.0, 1.0, 1.0]); // ref query row untouched
        assert_eq!(out[3], 0.0); // search row, ref key column zeroed
        assert_eq!(out[4..6], [1.0, 1.0]);
        assert_eq!(out[6], 0.0);
    }

    #[test]
    fn macs_counter_tracks_matmul_volume() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 4]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        g.matmul(a, b).unwrap();
        assert_eq!(g.macs, 60);
    }
}
