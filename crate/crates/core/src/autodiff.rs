//! Tape-based reverse-mode differentiation over a fixed set of tensor ops.
//!
//! Every op appends a node to the [`Tape`] holding its forward value and the
//! handles of its inputs. [`Tape::backward`] walks the nodes in reverse
//! order and accumulates gradients into every node that (transitively)
//! depends on a tracked leaf. Only first derivatives are supported.
//!
//! Leading axes are treated as batch axes: matrix-like ops act on the last
//! one or two axes and loop over everything in front of them.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive mask value for blocked attention entries.
pub const MASK_VALUE: f64 = -1e9;

/// Softmax rows whose maximum lies below this are treated as fully masked
/// and produce all zeros.
const FULLY_MASKED: f64 = MASK_VALUE * 0.5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    RouteScores {
        q: Var,
        k: Var,
        qr: Var,
        kr: Var,
        dims: RouteDims,
        scale: f64,
    },
    RouteAttn {
        a: Var,
        v: Var,
        vr: Var,
        dims: RouteDims,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    AddRows {
        base: Var,
        v: Var,
        rows: Vec<usize>,
    },
    PoolRows {
        x: Var,
        weights: Vec<f64>,
        batch: usize,
        n: usize,
    },
    Sum(Var),
    Mean(Var),
    /// Masked reductions store d(loss)/d(input) per element.
    MaskedLoss {
        input: Var,
        coef: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy)]
struct RouteDims {
    batch: usize,
    n: usize,
    /// Feature size of the node part (d_k for scores, d_v for values).
    d_node: usize,
    /// Feature size of the route part (d_r for scores, d_v for values).
    d_route: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn leading(shape: &[usize], trailing: usize) -> usize {
    shape[..shape.len() - trailing].iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A tracked leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`backward`](Self::backward), if any
    /// flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like the value; zeros when nothing flowed.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.grads[v.0] {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// `a[..., m, k] × b[k, n]`, or a batched product when `b` carries the
    /// same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch = leading(&sa, 2);
        let b_batched = sb.len() > 2;
        if b_batched && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            let ab = &ad[t * m * k..(t + 1) * m * k];
            let bb = if b_batched {
                &bd[t * k * n..(t + 1) * k * n]
            } else {
                bd
            };
            let ob = &mut out[t * m * n..(t + 1) * m * n];
            for i in 0..m {
                for p in 0..k {
                    let x = ab[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    for (o, &y) in ob[i * n..(i + 1) * n].iter_mut().zip(&bb[p * n..(p + 1) * n]) {
                        *o += x * y;
                    }
                }
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            b_batched,
        };
        self.push(Tensor::new(shape, out)?, op, &[a, b], "matmul")
    }

    /// `x[..., in] · wᵀ + bias` with `w[out, in]` and `bias[out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (out_dim, inp) = (sw[0], sw[1]);
        if let Some(b) = bias {
            if self.shape(b) != [out_dim] {
                return Err(Error::shape("linear bias", self.shape(b), &[out_dim]));
            }
        }
        let rows = leading(&sx, 1);
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![0.0; rows * out_dim];
        for r in 0..rows {
            let xr = &xd[r * inp..(r + 1) * inp];
            for o in 0..out_dim {
                let wr = &wd[o * inp..(o + 1) * inp];
                out[r * out_dim + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = bias {
            let bd = self.data(b);
            for row in out.chunks_mut(out_dim) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = out_dim;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let op = Op::Linear {
            x,
            w,
            bias,
            rows,
            inp,
            out: out_dim,
        };
        self.push(Tensor::new(shape, out)?, op, &inputs, "linear")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Add(a, b), &[a, b], "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a], "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a], "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a], "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a), &[a], "tanh")
    }

    /// Softmax over the last axis, stabilized by max-subtraction. Rows that
    /// are entirely masked (max below half of [`MASK_VALUE`]) become zeros.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = x.last_dim();
        let mut out = x.data().to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                softmax_row(row);
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push(value, Op::Softmax(a), &[a], "softmax")
    }

    /// Layer normalization over the last axis with learned affine terms.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let (xd, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = xd.len() / d.max(1);
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.push(value, op, &[x, gamma, beta], "layer_norm")
    }

    /// Route-aware attention logits
    /// `S[i,j] = scale · (q[i]·k[j] + qr[i]·kr[i,j])`.
    ///
    /// Shapes: `q, k: [.., N, dk]`, `qr: [.., N, dr]`, `kr: [.., N, N, dr]`;
    /// output `[.., N, N]`.
    pub fn route_scores(&mut self, q: Var, k: Var, qr: Var, kr: Var, scale: f64) -> Result<Var> {
        self.same_shape("route_scores (q, k)", q, k)?;
        let sq = self.shape(q).to_vec();
        let (sqr, skr) = (self.shape(qr).to_vec(), self.shape(kr).to_vec());
        if sq.len() < 2 || sqr.len() != sq.len() || skr.len() != sq.len() + 1 {
            return Err(Error::shape("route_scores (q, kr)", &sq, &skr));
        }
        let r = sq.len();
        let (n, dk) = (sq[r - 2], sq[r - 1]);
        let dr = sqr[r - 1];
        let lead = &sq[..r - 2];
        if &sqr[..r - 1] != &sq[..r - 1]
            || &skr[..r - 2] != lead
            || skr[r - 2] != n
            || skr[r - 1] != n
            || skr[r] != dr
        {
            return Err(Error::shape("route_scores (qr, kr)", &sqr, &skr));
        }
        let dims = RouteDims {
            batch: lead.iter().product(),
            n,
            d_node: dk,
            d_route: dr,
        };
        let (qd, kd, qrd, krd) = (self.data(q), self.data(k), self.data(qr), self.data(kr));
        let mut out = vec![0.0; dims.batch * n * n];
        for b in 0..dims.batch {
            for i in 0..n {
                let qi = &qd[(b * n + i) * dk..(b * n + i + 1) * dk];
                let qri = &qrd[(b * n + i) * dr..(b * n + i + 1) * dr];
                for j in 0..n {
                    let kj = &kd[(b * n + j) * dk..(b * n + j + 1) * dk];
                    let krij = &krd[((b * n + i) * n + j) * dr..((b * n + i) * n + j + 1) * dr];
                    let node: f64 = qi.iter().zip(kj).map(|(x, y)| x * y).sum();
                    let route: f64 = qri.iter().zip(krij).map(|(x, y)| x * y).sum();
                    out[(b * n + i) * n + j] = scale * (node + route);
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([n, n]);
        let op = Op::RouteScores {
            q,
            k,
            qr,
            kr,
            dims,
            scale,
        };
        self.push(Tensor::new(shape, out)?, op, &[q, k, qr, kr], "route_scores")
    }

    /// Route-aware aggregation `out[i] = Σ_j a[i,j] · (v[j] + vr[i,j])`.
    ///
    /// Shapes: `a: [.., N, N]`, `v: [.., N, dv]`, `vr: [.., N, N, dv]`.
    pub fn route_attn(&mut self, a: Var, v: Var, vr: Var) -> Result<Var> {
        let (sa, sv, svr) = (
            self.shape(a).to_vec(),
            self.shape(v).to_vec(),
            self.shape(vr).to_vec(),
        );
        let r = sa.len();
        if r < 2 || sv.len() != r || svr.len() != r + 1 || sa[r - 1] != sa[r - 2] {
            return Err(Error::shape("route_attn (a, v)", &sa, &sv));
        }
        let n = sa[r - 1];
        let dv = sv[r - 1];
        if sv[..r - 1] != sa[..r - 1] || svr[..r] != sa[..] || svr[r] != dv {
            return Err(Error::shape("route_attn (v, vr)", &sv, &svr));
        }
        let dims = RouteDims {
            batch: leading(&sa, 2),
            n,
            d_node: dv,
            d_route: dv,
        };
        let (ad, vd, vrd) = (self.data(a), self.data(v), self.data(vr));
        let mut out = vec![0.0; dims.batch * n * dv];
        for b in 0..dims.batch {
            for i in 0..n {
                let oi = &mut out[(b * n + i) * dv..(b * n + i + 1) * dv];
                for j in 0..n {
                    let w = ad[(b * n + i) * n + j];
                    if w == 0.0 {
                        continue;
                    }
                    let vj = &vd[(b * n + j) * dv..(b * n + j + 1) * dv];
                    let vrij = &vrd[((b * n + i) * n + j) * dv..((b * n + i) * n + j + 1) * dv];
                    for ((o, x), y) in oi.iter_mut().zip(vj).zip(vrij) {
                        *o += w * (x + y);
                    }
                }
            }
        }
        let mut shape = sv.clone();
        shape[r - 1] = dv;
        let op = Op::RouteAttn { a, v, vr, dims };
        self.push(Tensor::new(shape, out)?, op, &[a, v, vr], "route_attn")
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Param("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.data(p);
            for r in 0..rows {
                out[r * total + col..r * total + col + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let mut shape = lead;
        shape.push(total);
        let op = Op::Concat {
            parts: parts.iter().copied().zip(widths).collect(),
            rows,
        };
        self.push(Tensor::new(shape, out)?, op, parts, "concat")
    }

    /// Adds the vector `v[d]` to the listed rows of `base[.., d]` (rows are
    /// flat indices over all leading axes).
    pub fn add_rows(&mut self, base: Var, v: Var, rows: &[usize]) -> Result<Var> {
        let d = self.value(base).last_dim();
        if self.shape(v) != [d] {
            return Err(Error::shape("add_rows", self.shape(base), self.shape(v)));
        }
        let n_rows = self.value(base).len() / d.max(1);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_rows) {
            return Err(Error::Param(format!("add_rows: row {bad} out of {n_rows}")));
        }
        let mut out = self.data(base).to_vec();
        let vd = self.data(v).to_vec();
        for &r in rows {
            for (o, x) in out[r * d..(r + 1) * d].iter_mut().zip(&vd) {
                *o += x;
            }
        }
        let value = Tensor::new(self.shape(base).to_vec(), out)?;
        let op = Op::AddRows {
            base,
            v,
            rows: rows.to_vec(),
        };
        self.push(value, op, &[base, v], "add_rows")
    }

    /// Weighted reduction over the node axis: `out[b] = Σ_n w[b,n] · x[b,n]`
    /// for `x: [B, N, d]` and constant weights `[B, N]`.
    pub fn pool_rows(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || weights.shape() != &sx[..2] {
            return Err(Error::shape("pool_rows", &sx, weights.shape()));
        }
        let (batch, n, d) = (sx[0], sx[1], sx[2]);
        let xd = self.data(x);
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            for i in 0..n {
                let w = weights.data()[b * n + i];
                if w == 0.0 {
                    continue;
                }
                for (o, v) in out[b * d..(b + 1) * d]
                    .iter_mut()
                    .zip(&xd[(b * n + i) * d..(b * n + i + 1) * d])
                {
                    *o += w * v;
                }
            }
        }
        let op = Op::PoolRows {
            x,
            weights: weights.data().to_vec(),
            batch,
            n,
        };
        self.push(Tensor::new(vec![batch, d], out)?, op, &[x], "pool_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Param("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(value, Op::Mean(a), &[a], "mean")
    }

    fn check_loss_inputs(
        &self,
        op: &'static str,
        input: Var,
        target: &Tensor,
        mask: &[bool],
    ) -> Result<usize> {
        let s = self.shape(input);
        if target.shape() != s || mask.len() != target.len() {
            return Err(Error::shape(op, s, target.shape()));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Loss(format!("{op}: mask selects no entries")));
        }
        Ok(count)
    }

    /// Mean absolute error over entries where `mask` is true.
    pub fn masked_mae(&mut self, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
        let count = self.check_loss_inputs("masked_mae", pred, target, mask)? as f64;
        let mut loss = 0.0;
        let mut coef = vec![0.0; mask.len()];
        for (i, ((&p, &t), &m)) in self.data(pred).iter().zip(target.data()).zip(mask).enumerate() {
            if m {
                let diff = p - t;
                loss += diff.abs();
                coef[i] = if diff > 0.0 {
                    1.0 / count
                } else if diff < 0.0 {
                    -1.0 / count
                } else {
                    0.0
                };
            }
        }
        let op = Op::MaskedLoss { input: pred, coef };
        self.push(Tensor::scalar(loss / count), op, &[pred], "masked_mae")
    }

    /// Mean binary cross-entropy with logits over entries where `mask` is
    /// true, in the overflow-free form `max(z,0) − z·t + ln(1 + e^{−|z|})`.
    pub fn masked_bce(&mut self, logits: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
        let count = self.check_loss_inputs("masked_bce", logits, target, mask)? as f64;
        let mut loss = 0.0;
        let mut coef = vec![0.0; mask.len()];
        for (i, ((&z, &t), &m)) in self.data(logits).iter().zip(target.data()).zip(mask).enumerate() {
            if m {
                loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
                coef[i] = (sigmoid(z) - t) / count;
            }
        }
        let op = Op::MaskedLoss { input: logits, coef };
        self.push(Tensor::scalar(loss / count), op, &[logits], "masked_bce")
    }

    /// Back-propagates from the scalar `loss`, clearing earlier gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Param(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = self.grads[idx].take() else {
                continue;
            };
            backward_op(&self.nodes, &mut self.grads, idx, &grad);
            self.grads[idx] = Some(grad);
        }
        Ok(())
    }

}

fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    f(grads[v.0].get_or_insert_with(|| vec![0.0; len]));
}

fn acc_from(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, src: &[f64], factor: f64) {
    acc(nodes, grads, v, |g| {
        for (a, b) in g.iter_mut().zip(src) {
            *a += factor * b;
        }
    });
}

fn backward_op(nodes: &[Node], grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
        match nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
            } => {
                if nodes[a.0].requires_grad {
                    let bd = nodes[b.0].value.data();
                    acc(nodes, grads, a, |ga| {
                        for t in 0..batch {
                            let bb = if b_batched { &bd[t * k * n..(t + 1) * k * n] } else { &bd[..] };
                            for i in 0..m {
                                let gr = &g[(t * m + i) * n..(t * m + i + 1) * n];
                                for p in 0..k {
                                    let brow = &bb[p * n..(p + 1) * n];
                                    ga[(t * m + i) * k + p] += gr.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                                }
                            }
                        }
                    });
                }
                if nodes[b.0].requires_grad {
                    let ad = nodes[a.0].value.data();
                    acc(nodes, grads, b, |gb| {
                        for t in 0..batch {
                            let off = if b_batched { t * k * n } else { 0 };
                            for i in 0..m {
                                let gr = &g[(t * m + i) * n..(t * m + i + 1) * n];
                                for p in 0..k {
                                    let x = ad[(t * m + i) * k + p];
                                    if x == 0.0 {
                                        continue;
                                    }
                                    for (o, y) in gb[off + p * n..off + (p + 1) * n].iter_mut().zip(gr) {
                                        *o += x * y;
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::Linear {
                x,
                w,
                bias,
                rows,
                inp,
                out,
            } => {
                if nodes[x.0].requires_grad {
                    let wd = nodes[w.0].value.data();
                    acc(nodes, grads, x, |gx| {
                        for r in 0..rows {
                            let gxr = &mut gx[r * inp..(r + 1) * inp];
                            for o in 0..out {
                                let go = g[r * out + o];
                                if go == 0.0 {
                                    continue;
                                }
                                for (a, b) in gxr.iter_mut().zip(&wd[o * inp..(o + 1) * inp]) {
                                    *a += go * b;
                                }
                            }
                        }
                    });
                }
                if nodes[w.0].requires_grad {
                    let xd = nodes[x.0].value.data();
                    acc(nodes, grads, w, |gw| {
                        for r in 0..rows {
                            let xr = &xd[r * inp..(r + 1) * inp];
                            for o in 0..out {
                                let go = g[r * out + o];
                                if go == 0.0 {
                                    continue;
                                }
                                for (a, b) in gw[o * inp..(o + 1) * inp].iter_mut().zip(xr) {
                                    *a += go * b;
                                }
                            }
                        }
                    });
                }
                if let Some(b) = bias {
                    acc(nodes, grads, b, |gb| {
                        for row in g.chunks(out) {
                            for (a, x) in gb.iter_mut().zip(row) {
                                *a += x;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc_from(nodes, grads, a, g, 1.0);
                acc_from(nodes, grads, b, g, 1.0);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(nodes, grads, a, |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bd) {
                        *o += x * y;
                    }
                });
                acc(nodes, grads, b, |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(ad) {
                        *o += x * y;
                    }
                });
            }
            Op::Scale(a, factor) => acc_from(nodes, grads, a, g, factor),
            Op::Sigmoid(a) => {
                let y = nodes[idx].value.data();
                acc(nodes, grads, a, |ga| {
                    for ((o, gy), y) in ga.iter_mut().zip(g).zip(y) {
                        *o += gy * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = nodes[idx].value.data();
                acc(nodes, grads, a, |ga| {
                    for ((o, gy), y) in ga.iter_mut().zip(g).zip(y) {
                        *o += gy * (1.0 - y * y);
                    }
                });
            }
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                acc(nodes, grads, a, |ga| {
                    for ((o, gy), x) in ga.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *o += gy;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = nodes[idx].value.data();
                let d = nodes[idx].value.last_dim().max(1);
                acc(nodes, grads, a, |ga| {
                    for ((gar, gr), yr) in ga.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((o, gy), y) in gar.iter_mut().zip(gr).zip(yr) {
                            *o += y * (gy - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
            } => {
                let d = nodes[x.0].value.last_dim().max(1);
                let gd = nodes[gamma.0].value.data();
                if nodes[x.0].requires_grad {
                    acc(nodes, grads, x, |gx| {
                        let mut dxhat = vec![0.0; d];
                        for (r, &inv) in inv_std.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            for j in 0..d {
                                dxhat[j] = gr[j] * gd[j];
                            }
                            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                            let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                gx[r * d + j] += inv * (dxhat[j] - mean_d - hr[j] * mean_dh);
                            }
                        }
                    });
                }
                acc(nodes, grads, gamma, |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, a), b) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += a * b;
                        }
                    }
                });
                acc(nodes, grads, beta, |gb| {
                    for gr in g.chunks(d) {
                        for (o, a) in gb.iter_mut().zip(gr) {
                            *o += a;
                        }
                    }
                });
            }
            Op::RouteScores {
                q,
                k,
                qr,
                kr,
                dims,
                scale,
            } => {
                let RouteDims {
                    batch,
                    n,
                    d_node: dk,
                    d_route: dr,
                } = dims;
                let (qd, kd) = (nodes[q.0].value.data(), nodes[k.0].value.data());
                let (qrd, krd) = (nodes[qr.0].value.data(), nodes[kr.0].value.data());
                let gs = |b: usize, i: usize, j: usize| scale * g[(b * n + i) * n + j];
                acc(nodes, grads, q, |gq| {
                    for b in 0..batch {
                        for i in 0..n {
                            for j in 0..n {
                                let s = gs(b, i, j);
                                for c in 0..dk {
                                    gq[(b * n + i) * dk + c] += s * kd[(b * n + j) * dk + c];
                                }
                            }
                        }
                    }
                });
                acc(nodes, grads, k, |gk| {
                    for b in 0..batch {
                        for i in 0..n {
                            for j in 0..n {
                                let s = gs(b, i, j);
                                for c in 0..dk {
                                    gk[(b * n + j) * dk + c] += s * qd[(b * n + i) * dk + c];
                                }
                            }
                        }
                    }
                });
                acc(nodes, grads, qr, |gqr| {
                    for b in 0..batch {
                        for i in 0..n {
                            for j in 0..n {
                                let s = gs(b, i, j);
                                let base = ((b * n + i) * n + j) * dr;
                                for c in 0..dr {
                                    gqr[(b * n + i) * dr + c] += s * krd[base + c];
                                }
                            }
                        }
                    }
                });
                acc(nodes, grads, kr, |gkr| {
                    for b in 0..batch {
                        for i in 0..n {
                            for j in 0..n {
                                let s = gs(b, i, j);
                                let base = ((b * n + i) * n + j) * dr;
                                for c in 0..dr {
                                    gkr[base + c] += s * qrd[(b * n + i) * dr + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::RouteAttn { a, v, vr, dims } => {
                let RouteDims {
                    batch,
                    n,
                    d_node: dv,
                    ..
                } = dims;
                let (ad, vd, vrd) = (
                    nodes[a.0].value.data(),
                    nodes[v.0].value.data(),
                    nodes[vr.0].value.data(),
                );
                acc(nodes, grads, a, |ga| {
                    for b in 0..batch {
                        for i in 0..n {
                            let gi = &g[(b * n + i) * dv..(b * n + i + 1) * dv];
                            for j in 0..n {
                                let vj = &vd[(b * n + j) * dv..(b * n + j + 1) * dv];
                                let base = ((b * n + i) * n + j) * dv;
                                let vrij = &vrd[base..base + dv];
                                ga[(b * n + i) * n + j] +=
                                    gi.iter().zip(vj).zip(vrij).map(|((g, x), y)| g * (x + y)).sum::<f64>();
                            }
                        }
                    }
                });
                acc(nodes, grads, v, |gv| {
                    for b in 0..batch {
                        for i in 0..n {
                            let gi = &g[(b * n + i) * dv..(b * n + i + 1) * dv];
                            for j in 0..n {
                                let w = ad[(b * n + i) * n + j];
                                if w == 0.0 {
                                    continue;
                                }
                                for (o, x) in gv[(b * n + j) * dv..(b * n + j + 1) * dv].iter_mut().zip(gi) {
                                    *o += w * x;
                                }
                            }
                        }
                    }
                });
                acc(nodes, grads, vr, |gvr| {
                    for b in 0..batch {
                        for i in 0..n {
                            let gi = &g[(b * n + i) * dv..(b * n + i + 1) * dv];
                            for j in 0..n {
                                let w = ad[(b * n + i) * n + j];
                                if w == 0.0 {
                                    continue;
                                }
                                let base = ((b * n + i) * n + j) * dv;
                                for (o, x) in gvr[base..base + dv].iter_mut().zip(gi) {
                                    *o += w * x;
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { ref parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut col = 0;
                for &(p, w) in parts {
                    acc(nodes, grads, p, |gp| {
                        for r in 0..rows {
                            for (o, x) in gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + col..r * total + col + w])
                            {
                                *o += x;
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::AddRows { base, v, ref rows } => {
                acc_from(nodes, grads, base, g, 1.0);
                let d = nodes[v.0].value.len();
                acc(nodes, grads, v, |gv| {
                    for &r in rows {
                        for (o, x) in gv.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += x;
                        }
                    }
                });
            }
            Op::PoolRows {
                x,
                ref weights,
                batch,
                n,
            } => {
                let d = nodes[x.0].value.last_dim();
                acc(nodes, grads, x, |gx| {
                    for b in 0..batch {
                        for i in 0..n {
                            let w = weights[b * n + i];
                            if w == 0.0 {
                                continue;
                            }
                            for (o, y) in gx[(b * n + i) * d..(b * n + i + 1) * d]
                                .iter_mut()
                                .zip(&g[b * d..(b + 1) * d])
                            {
                                *o += w * y;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                acc(nodes, grads, a, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::Mean(a) => {
                let s = g[0] / nodes[a.0].value.len() as f64;
                acc(nodes, grads, a, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::MaskedLoss { input, ref coef } => {
                let s = g[0];
                acc(nodes, grads, input, |gi| {
                    for (o, c) in gi.iter_mut().zip(coef) {
                        *o += s * c;
                    }
                });
            }
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

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max < FULLY_MASKED {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
