//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records primitive applications in execution order; `backward`
//! walks the record once in reverse, accumulating gradients into every node
//! that (transitively) depends on a `requires_grad` leaf. Parameters enter
//! the tape as leaves each forward pass, so a fresh tape is built per
//! training step and the parameter structs themselves stay plain tensors.
//!
//! Broadcasting is restricted to a leading-batch dimension (`add_row`,
//! batched matmul); everything else demands exact shapes, which keeps the
//! backward rules short enough to audit one by one.

use crate::error::{Error, Result};
use crate::tensor::{axpy, matmul_into, matmul_ta_into, matmul_tb_into, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Handle to a tape node.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[ .., d ] + [d]`, broadcast over leading dims.
    AddRow(Var, Var),
    Scale(Var, f32),
    AddScalar(Var, f32),
    /// `[p,q] x [q,r]`.
    Matmul(Var, Var),
    /// `[p,q] x [r,q]^T -> [p,r]`.
    MatmulTB(Var, Var),
    /// `[B,p,q] x [B,q,r]`.
    Bmm(Var, Var),
    /// `[B,p,q] x [B,r,q]^T -> [B,p,r]`.
    BmmTB(Var, Var),
    Reshape(Var),
    /// Concat along the last dim; stores each part's width.
    ConcatLast(Vec<(Var, usize)>),
    /// Row gather on a 2-D tensor; backward scatter-adds.
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    /// `[.., d] -> [..]`.
    SumLast(Var),
    /// `[k,d] -> [d]`.
    MeanDim0(Var),
    /// value `[B,m,d]`, 0/1 weights `[B,m]` -> `[B,d]`; all-zero rows of the
    /// mask produce a zero output row.
    MaskedMeanRows(Var, Tensor),
    /// Masked softmax over the last dim; `None` mask = plain softmax. A row
    /// whose mask is all zero yields zeros.
    SoftmaxLast(Var, Option<Tensor>),
    /// Layer norm over the last dim with affine params; caches mean and
    /// 1/std per row for backward.
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        istd: Vec<f32>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Softplus(Var),
    Clamp(Var, f32, f32),
    /// Row-wise x/||x||; caches 1/||x|| per row.
    RowNormalize(Var, Vec<f32>),
    /// Inverted-dropout mask (already scaled by 1/(1-p)).
    Dropout(Var, Vec<f32>),
    /// Squared Gaussian-kernel MMD between two row sets, k(x,y) =
    /// exp(-gamma * ||x-y||^2).
    Mmd2 { x: Var, y: Var, gamma: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_seed(0)
    }

    /// `seed` drives dropout masks only.
    pub fn with_seed(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            backward_done: false,
        }
    }

    pub fn set_training(&mut self, on: bool) {
        self.training = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a node; zeros when the node was not reached by backward
    /// (or does not require grad).
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::invalid(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut v = self.nodes[a.0].value.clone();
        axpy(v.data_mut(), self.nodes[b.0].value.data());
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let mut v = self.nodes[a.0].value.clone();
        for (d, s) in v.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *d -= *s;
        }
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut v = self.nodes[a.0].value.clone();
        for (d, s) in v.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *d *= *s;
        }
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = *self.nodes[a.0]
            .value
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("add_row on scalar"))?;
        if self.nodes[row.0].value.shape() != [d] {
            return Err(Error::invalid(format!(
                "add_row: want [{d}], got {:?}",
                self.nodes[row.0].value.shape()
            )));
        }
        let mut v = self.nodes[a.0].value.clone();
        let r = self.nodes[row.0].value.data().to_vec();
        for chunk in v.data_mut().chunks_mut(d) {
            axpy(chunk, &r);
        }
        let rg = self.req(a) || self.req(row);
        Ok(self.push(Op::AddRow(a, row), v, rg))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        for x in v.data_mut() {
            *x *= c;
        }
        let rg = self.req(a);
        self.push(Op::Scale(a, c), v, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        for x in v.data_mut() {
            *x += c;
        }
        let rg = self.req(a);
        self.push(Op::AddScalar(a, c), v, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = two_dims(self.nodes[a.0].value.shape())?;
        let (q2, r) = two_dims(self.nodes[b.0].value.shape())?;
        if q != q2 {
            return Err(Error::invalid(format!(
                "matmul: {:?} x {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        let mut out = Tensor::zeros(&[p, r]);
        matmul_into(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            p,
            q,
            r,
            out.data_mut(),
        );
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Op::Matmul(a, b), out, rg))
    }

    /// `a (p×q) * b^T` with `b (r×q)`.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = two_dims(self.nodes[a.0].value.shape())?;
        let (r, q2) = two_dims(self.nodes[b.0].value.shape())?;
        if q != q2 {
            return Err(Error::invalid(format!(
                "matmul_tb: {:?} x {:?}^T",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        let mut out = Tensor::zeros(&[p, r]);
        matmul_tb_into(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            p,
            q,
            r,
            out.data_mut(),
        );
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Op::MatmulTB(a, b), out, rg))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bs, p, q) = three_dims(self.nodes[a.0].value.shape())?;
        let (bs2, q2, r) = three_dims(self.nodes[b.0].value.shape())?;
        if bs != bs2 || q != q2 {
            return Err(Error::invalid(format!(
                "bmm: {:?} x {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        let mut out = Tensor::zeros(&[bs, p, r]);
        for i in 0..bs {
            matmul_into(
                &self.nodes[a.0].value.data()[i * p * q..(i + 1) * p * q],
                &self.nodes[b.0].value.data()[i * q * r..(i + 1) * q * r],
                p,
                q,
                r,
                &mut out.data_mut()[i * p * r..(i + 1) * p * r],
            );
        }
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Op::Bmm(a, b), out, rg))
    }

    /// Batched `a_i (p×q) * b_i^T` with `b_i (r×q)`.
    pub fn bmm_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bs, p, q) = three_dims(self.nodes[a.0].value.shape())?;
        let (bs2, r, q2) = three_dims(self.nodes[b.0].value.shape())?;
        if bs != bs2 || q != q2 {
            return Err(Error::invalid(format!(
                "bmm_tb: {:?} x {:?}^T",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        let mut out = Tensor::zeros(&[bs, p, r]);
        for i in 0..bs {
            matmul_tb_into(
                &self.nodes[a.0].value.data()[i * p * q..(i + 1) * p * q],
                &self.nodes[b.0].value.data()[i * r * q..(i + 1) * r * q],
                p,
                q,
                r,
                &mut out.data_mut()[i * p * r..(i + 1) * p * r],
            );
        }
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Op::BmmTB(a, b), out, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.nodes[a.0].value.clone().reshaped(shape)?;
        let rg = self.req(a);
        Ok(self.push(Op::Reshape(a), v, rg))
    }

    /// Concat along the last dim; all leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_last of zero parts"));
        }
        let lead = |s: &[usize]| s[..s.len() - 1].to_vec();
        let lead0 = lead(self.nodes[parts[0].0].value.shape());
        let rows: usize = lead0.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.is_empty() || lead(s) != lead0 {
                return Err(Error::invalid("concat_last: leading dims differ"));
            }
            widths.push((*p, *s.last().unwrap()));
        }
        let d_total: usize = widths.iter().map(|(_, w)| w).sum();
        let mut shape = lead0.clone();
        shape.push(d_total);
        let mut out = Tensor::zeros(&shape);
        for r in 0..rows {
            let mut off = 0;
            for (p, w) in &widths {
                let src = &self.nodes[p.0].value.data()[r * w..(r + 1) * w];
                out.data_mut()[r * d_total + off..r * d_total + off + w].copy_from_slice(src);
                off += w;
            }
        }
        let rg = parts.iter().any(|p| self.req(*p));
        Ok(self.push(Op::ConcatLast(widths), out, rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = two_dims(self.nodes[a.0].value.shape())?;
        for &i in idx {
            if i >= n {
                return Err(Error::invalid(format!("gather_rows: index {i} >= {n}")));
            }
        }
        let mut out = Tensor::zeros(&[idx.len(), d]);
        for (j, &i) in idx.iter().enumerate() {
            out.data_mut()[j * d..(j + 1) * d]
                .copy_from_slice(&self.nodes[a.0].value.data()[i * d..(i + 1) * d]);
        }
        let rg = self.req(a);
        Ok(self.push(Op::GatherRows(a, idx.to_vec()), out, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().map(|&x| x as f64).sum();
        let rg = self.req(a);
        self.push(Op::SumAll(a), Tensor::scalar(s as f32), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel().max(1);
        let s: f64 = self.nodes[a.0].value.data().iter().map(|&x| x as f64).sum();
        let rg = self.req(a);
        self.push(Op::MeanAll(a), Tensor::scalar((s / n as f64) as f32), rg)
    }

    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.shape();
        if s.is_empty() {
            return Err(Error::invalid("sum_last on scalar"));
        }
        let d = *s.last().unwrap();
        let out_shape = &s[..s.len() - 1];
        let rows: usize = out_shape.iter().product();
        let mut out = Tensor::zeros(out_shape);
        for r in 0..rows {
            let mut acc = 0.0f64;
            for k in 0..d {
                acc += self.nodes[a.0].value.data()[r * d + k] as f64;
            }
            out.data_mut()[r] = acc as f32;
        }
        let rg = self.req(a);
        Ok(self.push(Op::SumLast(a), out, rg))
    }

    pub fn mean_dim0(&mut self, a: Var) -> Result<Var> {
        let (k, d) = two_dims(self.nodes[a.0].value.shape())?;
        if k == 0 {
            return Err(Error::invalid("mean_dim0 of empty tensor"));
        }
        let mut out = Tensor::zeros(&[d]);
        for j in 0..d {
            let mut acc = 0.0f64;
            for i in 0..k {
                acc += self.nodes[a.0].value.data()[i * d + j] as f64;
            }
            out.data_mut()[j] = (acc / k as f64) as f32;
        }
        let rg = self.req(a);
        Ok(self.push(Op::MeanDim0(a), out, rg))
    }

    /// Mean over the middle dim of `[B,m,d]` weighted by a 0/1 mask `[B,m]`.
    pub fn masked_mean_rows(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let (bs, m, d) = three_dims(self.nodes[a.0].value.shape())?;
        if mask.shape() != [bs, m] {
            return Err(Error::invalid(format!(
                "masked_mean_rows: mask {:?} for value {:?}",
                mask.shape(),
                self.nodes[a.0].value.shape()
            )));
        }
        let mut out = Tensor::zeros(&[bs, d]);
        for b in 0..bs {
            let cnt: f64 = mask.data()[b * m..(b + 1) * m]
                .iter()
                .map(|&x| x as f64)
                .sum();
            if cnt == 0.0 {
                continue;
            }
            for j in 0..d {
                let mut acc = 0.0f64;
                for t in 0..m {
                    let w = mask.data()[b * m + t] as f64;
                    if w != 0.0 {
                        acc += w * self.nodes[a.0].value.data()[(b * m + t) * d + j] as f64;
                    }
                }
                out.data_mut()[b * d + j] = (acc / cnt) as f32;
            }
        }
        let rg = self.req(a);
        Ok(self.push(Op::MaskedMeanRows(a, mask.clone()), out, rg))
    }

    /// Softmax over the last dim. `mask` (same shape, 0/1) suppresses
    /// positions; a fully-masked row becomes all zeros.
    pub fn softmax_last(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let s = self.nodes[a.0].value.shape().to_vec();
        if s.is_empty() {
            return Err(Error::invalid("softmax_last on scalar"));
        }
        if let Some(m) = mask {
            if m.shape() != s.as_slice() {
                return Err(Error::invalid(format!(
                    "softmax_last: mask {:?} for value {:?}",
                    m.shape(),
                    s
                )));
            }
        }
        let d = *s.last().unwrap();
        let rows = self.nodes[a.0].value.numel() / d;
        let mut out = Tensor::zeros(&s);
        for r in 0..rows {
            let row = &self.nodes[a.0].value.data()[r * d..(r + 1) * d];
            let mrow = mask.map(|m| &m.data()[r * d..(r + 1) * d]);
            let mut mx = f64::NEG_INFINITY;
            for k in 0..d {
                let live = mrow.map_or(true, |m| m[k] != 0.0);
                if live {
                    mx = mx.max(row[k] as f64);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue; // all masked
            }
            let mut denom = 0.0f64;
            let mut exps = vec![0.0f64; d];
            for k in 0..d {
                let live = mrow.map_or(true, |m| m[k] != 0.0);
                if live {
                    let e = ((row[k] as f64) - mx).exp();
                    exps[k] = e;
                    denom += e;
                }
            }
            for k in 0..d {
                out.data_mut()[r * d + k] = (exps[k] / denom) as f32;
            }
        }
        let rg = self.req(a);
        Ok(self.push(Op::SoftmaxLast(a, mask.cloned()), out, rg))
    }

    /// Layer norm over the last dim, then affine `gamma * x_hat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.shape().to_vec();
        let d = *s
            .last()
            .ok_or_else(|| Error::invalid("layer_norm on scalar"))?;
        if self.nodes[gamma.0].value.shape() != [d] || self.nodes[beta.0].value.shape() != [d] {
            return Err(Error::invalid("layer_norm: affine params must be [d]"));
        }
        const EPS: f64 = 1e-5;
        let rows = self.nodes[x.0].value.numel() / d;
        let mut out = Tensor::zeros(&s);
        let mut means = vec![0.0f32; rows];
        let mut istds = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &self.nodes[x.0].value.data()[r * d..(r + 1) * d];
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var: f64 =
                row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            means[r] = mean as f32;
            istds[r] = istd as f32;
            for k in 0..d {
                let xh = ((row[k] as f64) - mean) * istd;
                out.data_mut()[r * d + k] = (xh * self.nodes[gamma.0].value.data()[k] as f64
                    + self.nodes[beta.0].value.data()[k] as f64)
                    as f32;
            }
        }
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                istd: istds,
            },
            out,
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        for x in v.data_mut() {
            *x = gelu_f(*x as f64) as f32;
        }
        let rg = self.req(a);
        self.push(Op::Gelu(a), v, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        for x in v.data_mut() {
            *x = (1.0 / (1.0 + (-(*x as f64)).exp())) as f32;
        }
        let rg = self.req(a);
        self.push(Op::Sigmoid(a), v, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        for x in v.data_mut() {
            *x = (*x as f64).exp() as f32;
        }
        let rg = self.req(a);
        self.push(Op::Exp(a), v, rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        for x in v.data_mut() {
            *x = (*x as f64).ln() as f32;
        }
        let rg = self.req(a);
        self.push(Op::Ln(a), v, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        for x in v.data_mut() {
            *x = x.max(0.0);
        }
        let rg = self.req(a);
        self.push(Op::Relu(a), v, rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        for x in v.data_mut() {
            // ln(1+e^x), stable for large |x|.
            let z = *x as f64;
            *x = if z > 30.0 { z } else { z.exp().ln_1p() } as f32;
        }
        let rg = self.req(a);
        self.push(Op::Softplus(a), v, rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        for x in v.data_mut() {
            *x = x.clamp(lo, hi);
        }
        let rg = self.req(a);
        self.push(Op::Clamp(a, lo, hi), v, rg)
    }

    /// Rows scaled to unit L2 norm (zero rows stay zero).
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.shape().to_vec();
        let d = *s
            .last()
            .ok_or_else(|| Error::invalid("row_normalize on scalar"))?;
        let rows = self.nodes[a.0].value.numel() / d;
        let mut v = self.nodes[a.0].value.clone();
        let mut invs = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &self.nodes[a.0].value.data()[r * d..(r + 1) * d];
            let norm: f64 = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let inv = if norm > 1e-12 { 1.0 / norm } else { 0.0 };
            invs[r] = inv as f32;
            for k in 0..d {
                v.data_mut()[r * d + k] = (row[k] as f64 * inv) as f32;
            }
        }
        let rg = self.req(a);
        Ok(self.push(Op::RowNormalize(a, invs), v, rg))
    }

    /// Inverted dropout; identity (and no tape node) outside training mode.
    pub fn dropout(&mut self, a: Var, rate: f32) -> Var {
        if !self.training || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let n = self.nodes[a.0].value.numel();
        let mask: Vec<f32> = (0..n)
            .map(|_| {
                if self.rng.gen::<f32>() < keep {
                    scale
                } else {
                    0.0
                }
            })
            .collect();
        let mut v = self.nodes[a.0].value.clone();
        for (x, m) in v.data_mut().iter_mut().zip(&mask) {
            *x *= *m;
        }
        let rg = self.req(a);
        self.push(Op::Dropout(a, mask), v, rg)
    }

    /// Cosine similarity of matching rows of two `[n,d]` tensors -> `[n]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_similarity")?;
        let an = self.row_normalize(a)?;
        let bn = self.row_normalize(b)?;
        let prod = self.mul(an, bn)?;
        self.sum_last(prod)
    }

    /// Squared Gaussian-kernel MMD between row sets `x [p,d]` and `y [q,d]`.
    pub fn mmd2(&mut self, x: Var, y: Var, gamma: f64) -> Result<Var> {
        let (p, d) = two_dims(self.nodes[x.0].value.shape())?;
        let (q, d2) = two_dims(self.nodes[y.0].value.shape())?;
        if d != d2 {
            return Err(Error::invalid("mmd2: feature dims differ"));
        }
        if p == 0 || q == 0 {
            return Err(Error::invalid("mmd2: empty sample set"));
        }
        let xv = self.nodes[x.0].value.data();
        let yv = self.nodes[y.0].value.data();
        let kxx = kernel_mean(xv, xv, p, p, d, gamma);
        let kxy = kernel_mean(xv, yv, p, q, d, gamma);
        let kyy = kernel_mean(yv, yv, q, q, d, gamma);
        let val = (kxx - 2.0 * kxy + kyy) as f32;
        let rg = self.req(x) || self.req(y);
        Ok(self.push(Op::Mmd2 { x, y, gamma }, Tensor::scalar(val), rg))
    }

    /// Reverse pass from a scalar loss. Errs on a non-scalar loss or when
    /// called twice on the same tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::invalid(
                "backward already ran on this tape; rebuild the forward pass first",
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(&seed_shape, 1.0));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, delta: &Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => axpy(g.data_mut(), delta.data()),
            None => self.nodes[v.0].grad = Some(delta.clone()),
        }
    }

    fn propagate(&mut self, i: usize) {
        let g = self.nodes[i].grad.clone().expect("grad present");
        // Ops are taken apart by shape bookkeeping below; each arm mirrors
        // the forward rule exactly.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, &g);
                self.accum(b, &g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, &g);
                let mut neg = g.clone();
                for x in neg.data_mut() {
                    *x = -*x;
                }
                self.accum(b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let mut ga = g.clone();
                for (x, y) in ga.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
                    *x *= *y;
                }
                let mut gb = g.clone();
                for (x, y) in gb.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                    *x *= *y;
                }
                self.accum(a, &ga);
                self.accum(b, &gb);
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                self.accum(a, &g);
                let d = self.nodes[row.0].value.numel();
                let mut gr = Tensor::zeros(&[d]);
                for chunk in g.data().chunks(d) {
                    axpy(gr.data_mut(), chunk);
                }
                self.accum(row, &gr);
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let mut ga = g.clone();
                for x in ga.data_mut() {
                    *x *= c;
                }
                self.accum(a, &ga);
            }
            Op::AddScalar(a, _) => {
                let a = *a;
                self.accum(a, &g);
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (p, q) = (
                    self.nodes[a.0].value.shape()[0],
                    self.nodes[a.0].value.shape()[1],
                );
                let r = self.nodes[b.0].value.shape()[1];
                // dA = G * B^T ; dB = A^T * G
                let mut ga = Tensor::zeros(&[p, q]);
                matmul_tb_into(g.data(), self.nodes[b.0].value.data(), p, r, q, ga.data_mut());
                let mut gb = Tensor::zeros(&[q, r]);
                matmul_ta_into(self.nodes[a.0].value.data(), g.data(), p, q, r, gb.data_mut());
                self.accum(a, &ga);
                self.accum(b, &gb);
            }
            Op::MatmulTB(a, b) => {
                let (a, b) = (*a, *b);
                let (p, q) = (
                    self.nodes[a.0].value.shape()[0],
                    self.nodes[a.0].value.shape()[1],
                );
                let r = self.nodes[b.0].value.shape()[0];
                // out = A * B^T ; dA = G * B ; dB = G^T * A
                let mut ga = Tensor::zeros(&[p, q]);
                matmul_into(g.data(), self.nodes[b.0].value.data(), p, r, q, ga.data_mut());
                let mut gb = Tensor::zeros(&[r, q]);
                matmul_ta_into(g.data(), self.nodes[a.0].value.data(), p, r, q, gb.data_mut());
                self.accum(a, &ga);
                self.accum(b, &gb);
            }
            Op::Bmm(a, b) => {
                let (a, b) = (*a, *b);
                let (bs, p, q) = (
                    self.nodes[a.0].value.shape()[0],
                    self.nodes[a.0].value.shape()[1],
                    self.nodes[a.0].value.shape()[2],
                );
                let r = self.nodes[b.0].value.shape()[2];
                let mut ga = Tensor::zeros(&[bs, p, q]);
                let mut gb = Tensor::zeros(&[bs, q, r]);
                for i in 0..bs {
                    matmul_tb_into(
                        &g.data()[i * p * r..(i + 1) * p * r],
                        &self.nodes[b.0].value.data()[i * q * r..(i + 1) * q * r],
                        p,
                        r,
                        q,
                        &mut ga.data_mut()[i * p * q..(i + 1) * p * q],
                    );
                    matmul_ta_into(
                        &self.nodes[a.0].value.data()[i * p * q..(i + 1) * p * q],
                        &g.data()[i * p * r..(i + 1) * p * r],
                        p,
                        q,
                        r,
                        &mut gb.data_mut()[i * q * r..(i + 1) * q * r],
                    );
                }
                self.accum(a, &ga);
                self.accum(b, &gb);
            }
            Op::BmmTB(a, b) => {
                let (a, b) = (*a, *b);
                let (bs, p, q) = (
                    self.nodes[a.0].value.shape()[0],
                    self.nodes[a.0].value.shape()[1],
                    self.nodes[a.0].value.shape()[2],
                );
                let r = self.nodes[b.0].value.shape()[1];
                let mut ga = Tensor::zeros(&[bs, p, q]);
                let mut gb = Tensor::zeros(&[bs, r, q]);
                for i in 0..bs {
                    // out_i = A_i * B_i^T ; dA_i = G_i * B_i ; dB_i = G_i^T * A_i
                    matmul_into(
                        &g.data()[i * p * r..(i + 1) * p * r],
                        &self.nodes[b.0].value.data()[i * r * q..(i + 1) * r * q],
                        p,
                        r,
                        q,
                        &mut ga.data_mut()[i * p * q..(i + 1) * p * q],
                    );
                    matmul_ta_into(
                        &g.data()[i * p * r..(i + 1) * p * r],
                        &self.nodes[a.0].value.data()[i * p * q..(i + 1) * p * q],
                        p,
                        r,
                        q,
                        &mut gb.data_mut()[i * r * q..(i + 1) * r * q],
                    );
                }
                self.accum(a, &ga);
                self.accum(b, &gb);
            }
            Op::Reshape(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let gr = g.clone().reshaped(&shape).expect("reshape grad");
                self.accum(a, &gr);
            }
            Op::ConcatLast(parts) => {
                let parts = parts.clone();
                let d_total: usize = parts.iter().map(|(_, w)| w).sum();
                let rows = g.numel() / d_total;
                let mut off = 0;
                for (p, w) in parts {
                    let shape = self.nodes[p.0].value.shape().to_vec();
                    let mut gp = Tensor::zeros(&shape);
                    for r in 0..rows {
                        gp.data_mut()[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * d_total + off..r * d_total + off + w]);
                    }
                    self.accum(p, &gp);
                    off += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let a = *a;
                let idx = idx.clone();
                let shape = self.nodes[a.0].value.shape().to_vec();
                let d = shape[1];
                let mut ga = Tensor::zeros(&shape);
                for (j, &i) in idx.iter().enumerate() {
                    let dst = &mut ga.data_mut()[i * d..(i + 1) * d];
                    axpy(dst, &g.data()[j * d..(j + 1) * d]);
                }
                self.accum(a, &ga);
            }
            Op::SumAll(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let ga = Tensor::full(&shape, g.item());
                self.accum(a, &ga);
            }
            Op::MeanAll(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let n: usize = shape.iter().product::<usize>().max(1);
                let ga = Tensor::full(&shape, g.item() / n as f32);
                self.accum(a, &ga);
            }
            Op::SumLast(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let d = *shape.last().unwrap();
                let rows = self.nodes[a.0].value.numel() / d;
                let mut ga = Tensor::zeros(&shape);
                for r in 0..rows {
                    let gr = g.data()[r];
                    for k in 0..d {
                        ga.data_mut()[r * d + k] = gr;
                    }
                }
                self.accum(a, &ga);
            }
            Op::MeanDim0(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let (k, d) = (shape[0], shape[1]);
                let mut ga = Tensor::zeros(&shape);
                for i in 0..k {
                    for j in 0..d {
                        ga.data_mut()[i * d + j] = g.data()[j] / k as f32;
                    }
                }
                self.accum(a, &ga);
            }
            Op::MaskedMeanRows(a, mask) => {
                let a = *a;
                let mask = mask.clone();
                let shape = self.nodes[a.0].value.shape().to_vec();
                let (bs, m, d) = (shape[0], shape[1], shape[2]);
                let mut ga = Tensor::zeros(&shape);
                for b in 0..bs {
                    let cnt: f32 = mask.data()[b * m..(b + 1) * m].iter().sum();
                    if cnt == 0.0 {
                        continue;
                    }
                    for t in 0..m {
                        let w = mask.data()[b * m + t];
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            ga.data_mut()[(b * m + t) * d + j] = w / cnt * g.data()[b * d + j];
                        }
                    }
                }
                self.accum(a, &ga);
            }
            Op::SoftmaxLast(a, _) => {
                let a = *a;
                let y = self.nodes[i].value.clone();
                let d = *y.shape().last().unwrap();
                let rows = y.numel() / d;
                let mut ga = Tensor::zeros(y.shape());
                for r in 0..rows {
                    let mut dot = 0.0f64;
                    for k in 0..d {
                        dot += g.data()[r * d + k] as f64 * y.data()[r * d + k] as f64;
                    }
                    for k in 0..d {
                        let yv = y.data()[r * d + k] as f64;
                        ga.data_mut()[r * d + k] =
                            (yv * (g.data()[r * d + k] as f64 - dot)) as f32;
                    }
                }
                self.accum(a, &ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                istd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let mean = mean.clone();
                let istd = istd.clone();
                let shape = self.nodes[x.0].value.shape().to_vec();
                let d = *shape.last().unwrap();
                let rows = self.nodes[x.0].value.numel() / d;
                let mut gx = Tensor::zeros(&shape);
                let mut ggamma = Tensor::zeros(&[d]);
                let mut gbeta = Tensor::zeros(&[d]);
                for r in 0..rows {
                    let xs = &self.nodes[x.0].value.data()[r * d..(r + 1) * d];
                    let (mu, is) = (mean[r] as f64, istd[r] as f64);
                    // gy = g * gamma; then the standard LN input gradient.
                    let mut sum_gy = 0.0f64;
                    let mut sum_gy_xh = 0.0f64;
                    let mut gy = vec![0.0f64; d];
                    for k in 0..d {
                        let xh = (xs[k] as f64 - mu) * is;
                        let gk = g.data()[r * d + k] as f64;
                        ggamma.data_mut()[k] += (gk * xh) as f32;
                        gbeta.data_mut()[k] += gk as f32;
                        let gyk = gk * self.nodes[gamma.0].value.data()[k] as f64;
                        gy[k] = gyk;
                        sum_gy += gyk;
                        sum_gy_xh += gyk * xh;
                    }
                    for k in 0..d {
                        let xh = (xs[k] as f64 - mu) * is;
                        gx.data_mut()[r * d + k] =
                            (is * (gy[k] - sum_gy / d as f64 - xh * sum_gy_xh / d as f64)) as f32;
                    }
                }
                self.accum(x, &gx);
                self.accum(gamma, &ggamma);
                self.accum(beta, &gbeta);
            }
            Op::Gelu(a) => {
                let a = *a;
                let mut ga = g.clone();
                for (gk, &xk) in ga
                    .data_mut()
                    .iter_mut()
                    .zip(self.nodes[a.0].value.data().iter())
                {
                    *gk *= gelu_df(xk as f64) as f32;
                }
                self.accum(a, &ga);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = self.nodes[i].value.clone();
                let mut ga = g.clone();
                for (gk, &yk) in ga.data_mut().iter_mut().zip(y.data().iter()) {
                    *gk *= yk * (1.0 - yk);
                }
                self.accum(a, &ga);
            }
            Op::Exp(a) => {
                let a = *a;
                let y = self.nodes[i].value.clone();
                let mut ga = g.clone();
                for (gk, &yk) in ga.data_mut().iter_mut().zip(y.data().iter()) {
                    *gk *= yk;
                }
                self.accum(a, &ga);
            }
            Op::Ln(a) => {
                let a = *a;
                let mut ga = g.clone();
                for (gk, &xk) in ga
                    .data_mut()
                    .iter_mut()
                    .zip(self.nodes[a.0].value.data().iter())
                {
                    *gk /= xk;
                }
                self.accum(a, &ga);
            }
            Op::Relu(a) => {
                let a = *a;
                let mut ga = g.clone();
                for (gk, &xk) in ga
                    .data_mut()
                    .iter_mut()
                    .zip(self.nodes[a.0].value.data().iter())
                {
                    if xk <= 0.0 {
                        *gk = 0.0;
                    }
                }
                self.accum(a, &ga);
            }
            Op::Softplus(a) => {
                let a = *a;
                let mut ga = g.clone();
                for (gk, &xk) in ga
                    .data_mut()
                    .iter_mut()
                    .zip(self.nodes[a.0].value.data().iter())
                {
                    *gk *= (1.0 / (1.0 + (-(xk as f64)).exp())) as f32;
                }
                self.accum(a, &ga);
            }
            Op::Clamp(a, lo, hi) => {
                let (a, lo, hi) = (*a, *lo, *hi);
                let mut ga = g.clone();
                for (gk, &xk) in ga
                    .data_mut()
                    .iter_mut()
                    .zip(self.nodes[a.0].value.data().iter())
                {
                    if xk < lo || xk > hi {
                        *gk = 0.0;
                    }
                }
                self.accum(a, &ga);
            }
            Op::RowNormalize(a, invs) => {
                let a = *a;
                let invs = invs.clone();
                let y = self.nodes[i].value.clone();
                let d = *y.shape().last().unwrap();
                let rows = y.numel() / d;
                let mut ga = Tensor::zeros(y.shape());
                for r in 0..rows {
                    let inv = invs[r] as f64;
                    let mut dot = 0.0f64;
                    for k in 0..d {
                        dot += g.data()[r * d + k] as f64 * y.data()[r * d + k] as f64;
                    }
                    for k in 0..d {
                        ga.data_mut()[r * d + k] = (inv
                            * (g.data()[r * d + k] as f64 - y.data()[r * d + k] as f64 * dot))
                            as f32;
                    }
                }
                self.accum(a, &ga);
            }
            Op::Dropout(a, mask) => {
                let a = *a;
                let mask = mask.clone();
                let mut ga = g.clone();
                for (gk, m) in ga.data_mut().iter_mut().zip(&mask) {
                    *gk *= *m;
                }
                self.accum(a, &ga);
            }
            Op::Mmd2 { x, y, gamma } => {
                let (x, y, gamma) = (*x, *y, *gamma);
                let gs = g.item() as f64;
                let xv = self.nodes[x.0].value.clone();
                let yv = self.nodes[y.0].value.clone();
                let (p, d) = (xv.shape()[0], xv.shape()[1]);
                let q = yv.shape()[0];
                let mut gx = Tensor::zeros(&[p, d]);
                let mut gy = Tensor::zeros(&[q, d]);
                // d k(u,v)/du = -2*gamma*(u-v)*k(u,v)
                for a_i in 0..p {
                    for b_i in 0..p {
                        let k = kernel(xv.row(a_i), xv.row(b_i), gamma);
                        let c = gs * 2.0 / (p * p) as f64 * (-2.0 * gamma) * k;
                        for j in 0..d {
                            gx.data_mut()[a_i * d + j] +=
                                (c * (xv.row(a_i)[j] as f64 - xv.row(b_i)[j] as f64)) as f32;
                        }
                    }
                    for b_i in 0..q {
                        let k = kernel(xv.row(a_i), yv.row(b_i), gamma);
                        let c = gs * (-2.0) / (p * q) as f64 * (-2.0 * gamma) * k;
                        for j in 0..d {
                            gx.data_mut()[a_i * d + j] +=
                                (c * (xv.row(a_i)[j] as f64 - yv.row(b_i)[j] as f64)) as f32;
                        }
                    }
                }
                for a_i in 0..q {
                    for b_i in 0..q {
                        let k = kernel(yv.row(a_i), yv.row(b_i), gamma);
                        let c = gs * 2.0 / (q * q) as f64 * (-2.0 * gamma) * k;
                        for j in 0..d {
                            gy.data_mut()[a_i * d + j] +=
                                (c * (yv.row(a_i)[j] as f64 - yv.row(b_i)[j] as f64)) as f32;
                        }
                    }
                    for b_i in 0..p {
                        let k = kernel(yv.row(a_i), xv.row(b_i), gamma);
                        let c = gs * (-2.0) / (p * q) as f64 * (-2.0 * gamma) * k;
                        for j in 0..d {
                            gy.data_mut()[a_i * d + j] +=
                                (c * (yv.row(a_i)[j] as f64 - xv.row(b_i)[j] as f64)) as f32;
                        }
                    }
                }
                self.accum(x, &gx);
                self.accum(y, &gy);
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn two_dims(s: &[usize]) -> Result<(usize, usize)> {
    if s.len() != 2 {
        return Err(Error::invalid(format!("expected 2-D, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

fn three_dims(s: &[usize]) -> Result<(usize, usize, usize)> {
    if s.len() != 3 {
        return Err(Error::invalid(format!("expected 3-D, got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

fn gelu_f(x: f64) -> f64 {
    // tanh approximation
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_df(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn kernel(a: &[f32], b: &[f32], gamma: f64) -> f64 {
    let mut d2 = 0.0f64;
    for k in 0..a.len() {
        let diff = a[k] as f64 - b[k] as f64;
        d2 += diff * diff;
    }
    (-gamma * d2).exp()
}

fn kernel_mean(a: &[f32], b: &[f32], p: usize, q: usize, d: usize, gamma: f64) -> f64 {
    let mut acc = 0.0f64;
    for i in 0..p {
        for j in 0..q {
            acc += kernel(&a[i * d..(i + 1) * d], &b[j * d..(j + 1) * d], gamma);
        }
    }
    acc / (p * q) as f64
}

/// Median of pairwise squared distances over the union of two row sets,
/// used as the Gaussian-kernel bandwidth heuristic. Falls back to 1.0 when
/// every pair coincides.
pub fn median_sq_dist(a: &Tensor, b: &Tensor) -> f64 {
    let d = *a.shape().last().unwrap();
    let rows_a = a.numel() / d;
    let rows_b = b.numel() / d;
    let mut rows: Vec<&[f32]> = Vec::with_capacity(rows_a + rows_b);
    for i in 0..rows_a {
        rows.push(&a.data()[i * d..(i + 1) * d]);
    }
    for i in 0..rows_b {
        rows.push(&b.data()[i * d..(i + 1) * d]);
    }
    let mut dists = Vec::new();
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let mut d2 = 0.0f64;
            for k in 0..d {
                let diff = rows[i][k] as f64 - rows[j][k] as f64;
                d2 += diff * diff;
            }
            dists.push(d2);
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let med = dists[dists.len() / 2];
    if med <= 1e-12 {
        1.0
    } else {
        med
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter
/// position, so callers must pass parameters in a stable order.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid("adam: params/grads length mismatch"));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid("adam: parameter group changed size"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::invalid(format!(
                    "adam: param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (pk, gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *pk -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Central finite-difference gradient check. `f` must rebuild the forward
/// pass from the given leaves each call. Returns the worst relative error
/// across all parameter entries.
pub fn grad_check<F>(params: &[Tensor], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let loss = f(&mut tape, &vars)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::invalid("grad_check: loss must be scalar"));
        }
        Ok(tape.value(loss).item() as f64)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| tape.grad(*v)).collect();

    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[k] += h as f32;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[k] -= h as f32;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let an = analytic[pi].data()[k] as f64;
            // Unit floor: below gradient magnitude 1 this degrades to an
            // absolute tolerance, which keeps f32 forward rounding (about
            // 1e-4 through the divided difference) out of the verdict.
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_grad_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[2.0]), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[2.0, 1.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn off_path_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[2.0, 1.0]), true);
        let y = tape.leaf(t(&[2], &[5.0, 5.0]), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[0.1, 5.0, -2.0, 100.0, 100.0, 100.0]), false);
        let y = tape.softmax_last(x, None).unwrap();
        for r in 0..2 {
            let s: f32 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_softmax_zeroes_dead_positions() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3], &[1.0, 2.0, 3.0]), false);
        let mask = t(&[1, 3], &[1.0, 0.0, 1.0]);
        let y = tape.softmax_last(x, Some(&mask)).unwrap();
        assert_eq!(tape.value(y).data()[1], 0.0);
        let s: f32 = tape.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 10.0]), false);
        let g = tape.leaf(Tensor::full(&[4], 1.0), false);
        let b = tape.leaf(Tensor::zeros(&[4]), false);
        let y = tape.layer_norm(x, g, b).unwrap();
        for r in 0..2 {
            let row = tape.value(y).row(r);
            let mean: f32 = row.iter().sum::<f32>() / 4.0;
            let var: f32 = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn matmul_identity_bitwise() {
        let mut tape = Tape::new();
        let m = t(&[2, 2], &[1.5, -2.25, 3.0, 0.125]);
        let a = tape.leaf(m.clone(), false);
        let eye = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let y = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(y).data(), m.data());
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut p = t(&[2], &[1.0, -2.0]);
        let before = p.clone();
        let mut opt = Adam::new(0.01);
        let g = Tensor::zeros(&[2]);
        opt.step(&mut [&mut p], &[g]).unwrap();
        assert_eq!(p.data(), before.data());
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        let mut p = t(&[1], &[0.0]);
        let mut opt = Adam::new(0.01);
        let g = t(&[1], &[3.0]);
        opt.step(&mut [&mut p], &[g]).unwrap();
        // bias-corrected first step is lr * g/|g| up to eps
        assert!((p.data()[0] + 0.01).abs() < 1e-5);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = t(&[2], &[1.0, -1.0]);
            let mut opt = Adam::new(0.005);
            for i in 0..10 {
                let g = t(&[2], &[(i as f32) * 0.1, -0.3]);
                opt.step(&mut [&mut p], &[g]).unwrap();
            }
            p
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn mmd2_identical_sets_is_zero() {
        let mut tape = Tape::new();
        let x = t(&[3, 2], &[0.0, 1.0, 2.0, 3.0, -1.0, 0.5]);
        let a = tape.leaf(x.clone(), false);
        let b = tape.leaf(x, false);
        let v = tape.mmd2(a, b, 0.7).unwrap();
        assert!(tape.value(v).item().abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_invalid_argument() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 2]), false);
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut tape = Tape::new();
        tape.set_training(false);
        let a = tape.leaf(t(&[4], &[1.0, 2.0, 3.0, 4.0]), false);
        let b = tape.dropout(a, 0.5);
        assert_eq!(a, b);
    }

    // Per-primitive finite-difference checks on random small shapes.
    #[test]
    fn primitive_grad_checks() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(shape, 0.8, rng);

        let a = r(&[3, 4], &mut rng);
        let b = r(&[3, 4], &mut rng);
        let w = r(&[4, 2], &mut rng);
        let row = r(&[4], &mut rng);
        let g3 = r(&[2, 3, 4], &mut rng);
        let h3 = r(&[2, 4, 3], &mut rng);

        let checks: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>)> = vec![
            (
                "add+mul",
                vec![a.clone(), b.clone()],
                Box::new(|t, v| {
                    let s = t.add(v[0], v[1])?;
                    let m = t.mul(s, v[0])?;
                    Ok(t.sum_all(m))
                }),
            ),
            (
                "sub",
                vec![a.clone(), b.clone()],
                Box::new(|t, v| {
                    let s = t.sub(v[0], v[1])?;
                    let m = t.mul(s, s)?;
                    Ok(t.mean_all(m))
                }),
            ),
            (
                "matmul",
                vec![a.clone(), w.clone()],
                Box::new(|t, v| {
                    let m = t.matmul(v[0], v[1])?;
                    let sq = t.mul(m, m)?;
                    Ok(t.sum_all(sq))
                }),
            ),
            (
                "matmul_tb",
                vec![a.clone(), b.clone()],
                Box::new(|t, v| {
                    let m = t.matmul_tb(v[0], v[1])?;
                    let e = t.gelu(m);
                    Ok(t.sum_all(e))
                }),
            ),
            (
                "bmm",
                vec![g3.clone(), h3.clone()],
                Box::new(|t, v| {
                    let m = t.bmm(v[0], v[1])?;
                    let sq = t.mul(m, m)?;
                    Ok(t.mean_all(sq))
                }),
            ),
            (
                "bmm_tb",
                vec![g3.clone(), g3.clone()],
                Box::new(|t, v| {
                    let m = t.bmm_tb(v[0], v[1])?;
                    Ok(t.sum_all(m))
                }),
            ),
            (
                "add_row",
                vec![a.clone(), row.clone()],
                Box::new(|t, v| {
                    let m = t.add_row(v[0], v[1])?;
                    let sq = t.mul(m, m)?;
                    Ok(t.sum_all(sq))
                }),
            ),
            (
                "softmax",
                vec![a.clone()],
                Box::new(|t, v| {
                    let s = t.softmax_last(v[0], None)?;
                    let sq = t.mul(s, s)?;
                    Ok(t.sum_all(sq))
                }),
            ),
            (
                "layer_norm",
                vec![a.clone(), r(&[4], &mut rng), r(&[4], &mut rng)],
                Box::new(|t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2])?;
                    let sq = t.mul(y, y)?;
                    Ok(t.sum_all(sq))
                }),
            ),
            (
                "activations",
                vec![a.clone()],
                Box::new(|t, v| {
                    let s = t.sigmoid(v[0]);
                    let e = t.exp(s);
                    let l = t.ln(e);
                    let g = t.gelu(l);
                    let sp = t.softplus(g);
                    let rl = t.relu(sp);
                    Ok(t.mean_all(rl))
                }),
            ),
            (
                "row_normalize+cosine",
                vec![a.clone(), b.clone()],
                Box::new(|t, v| {
                    let c = t.cosine_similarity(v[0], v[1])?;
                    let sq = t.mul(c, c)?;
                    Ok(t.sum_all(sq))
                }),
            ),
            (
                "gather+mean_dim0+concat",
                vec![a.clone(), b.clone()],
                Box::new(|t, v| {
                    let g = t.gather_rows(v[0], &[2, 0, 2])?;
                    let m = t.mean_dim0(g)?;
                    let m2 = t.reshape(m, &[1, 4])?;
                    let c = t.concat_last(&[m2, m2])?;
                    let sq = t.mul(c, c)?;
                    Ok(t.sum_all(sq))
                }),
            ),
            (
                "masked_mean+sum_last",
                vec![g3.clone()],
                Box::new(|t, v| {
                    let mask =
                        Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
                    let m = t.masked_mean_rows(v[0], &mask)?;
                    let s = t.sum_last(m)?;
                    Ok(t.sum_all(s))
                }),
            ),
            (
                "mmd2",
                vec![r(&[3, 2], &mut rng), r(&[4, 2], &mut rng)],
                Box::new(|t, v| t.mmd2(v[0], v[1], 0.6)),
            ),
            (
                "clamp+scale",
                vec![a.clone()],
                Box::new(|t, v| {
                    let c = t.clamp(v[0], -0.5, 0.5);
                    let s = t.scale(c, 3.0);
                    let s = t.add_scalar(s, 0.25);
                    Ok(t.sum_all(s))
                }),
            ),
        ];

        for (name, params, f) in checks {
            let err = grad_check(&params, |t, v| f(t, v), 1e-3).unwrap();
            assert!(err < 1e-3, "{name}: finite-difference mismatch {err}");
        }
    }
}
