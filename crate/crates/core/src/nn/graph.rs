//! Tape-based reverse-mode differentiation over `[batch, channels, length]`
//! activations.
//!
//! Each op records its inputs and whatever it needs for the backward pass.
//! Nodes are appended in evaluation order, so a single reverse sweep
//! visits every consumer before its producers.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub prefix: String,
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    Conv1d { x: Var, w: Var, b: Var, pad: usize },
    ConvTranspose2 { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, x_hat: Tensor, inv_std: Vec<f64>, train: bool },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Add { a: Var, b: Var },
    AddChannel { x: Var, v: Var },
    ScaleChannel { x: Var, s: Var },
    FloorMixture { z: Var, mu: Var, rho: Var, logit: Var, coeffs: Vec<(f64, f64)>, floor: f64 },
    ItemLincomb { a: Var, b: Var, ca: Vec<f64>, cb: Vec<f64> },
    Concat { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    Attention { q: Var, k: Var, v: Var, probs: Vec<f64> },
    MeanTime { x: Var },
    Reshape { x: Var },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv1d { x, w, b, .. } | Op::ConvTranspose2 { x, w, b } | Op::Linear { x, w, b } => vec![x, w, b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Relu { x } | Op::MaxPool2 { x, .. } | Op::MeanTime { x } | Op::Reshape { x } => vec![x],
            Op::Add { a, b } | Op::Concat { a, b } => vec![a, b],
            Op::AddChannel { x, v } | Op::ScaleChannel { x, s: v } => vec![x, v],
            Op::FloorMixture { z, mu, rho, logit, .. } => vec![z, mu, rho, logit],
            Op::ItemLincomb { a, b, .. } => vec![a, b],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bn_stats: Vec<BnBatchStats>,
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, c, l] => Ok((b, c, l)),
        _ => Err(Error::invalid(format!(
            "expected [batch, channels, length], got {:?}",
            t.shape()
        ))),
    }
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [b, c] => Ok((b, c)),
        _ => Err(Error::invalid(format!("expected [batch, features], got {:?}", t.shape()))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_value(mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn bn_stats(&self) -> &[BnBatchStats] {
        &self.bn_stats
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?
            .clone();
        Ok(self.push(t, Op::Param(name.to_string())))
    }

    /// Stride-1 convolution with symmetric zero padding `pad`.
    /// `w` is `[out, in, kernel]`, `b` is `[out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (bs, ci, len) = dims3(self.value(x))?;
        let wt = self.value(w);
        let (co, wci, k) = dims3(wt)?;
        if wci != ci || self.value(b).shape() != [co] {
            return Err(Error::invalid(format!(
                "conv weight {:?} / bias {:?} incompatible with {ci} input channels",
                wt.shape(),
                self.value(b).shape()
            )));
        }
        let out_len = len + 2 * pad + 1 - k;
        let mut y = Tensor::zeros(&[bs, co, out_len]);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(b).data();
            let mut cols = Vec::new();
            for bi in 0..bs {
                let xi = &xd[bi * ci * len..(bi + 1) * ci * len];
                let yi = &mut y.data_mut()[bi * co * out_len..(bi + 1) * co * out_len];
                for (row, &bv) in yi.chunks_exact_mut(out_len).zip(bd) {
                    row.fill(bv);
                }
                let cols = im2col(xi, ci, len, k, pad, out_len, &mut cols);
                // y[co, L] += w[co, ci*k] . cols[ci*k, L]
                gemm((co, ci * k, out_len), wd, (ci * k, 1), cols, (out_len, 1), 1.0, yi, (out_len, 1));
            }
        }
        Ok(self.push(y, Op::Conv1d { x, w, b, pad }))
    }

    /// Kernel-2, stride-2 transposed convolution doubling the length.
    /// `w` is `[in, out, 2]`.
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, ci, len) = dims3(self.value(x))?;
        let (wci, co, k) = dims3(self.value(w))?;
        if wci != ci || k != 2 || self.value(b).shape() != [co] {
            return Err(Error::invalid("transposed conv weight must be [in, out, 2]"));
        }
        let mut y = Tensor::zeros(&[bs, co, 2 * len]);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(b).data();
            for bi in 0..bs {
                let xi = &xd[bi * ci * len..(bi + 1) * ci * len];
                let yi = &mut y.data_mut()[bi * co * 2 * len..(bi + 1) * co * 2 * len];
                for (row, &bv) in yi.chunks_exact_mut(2 * len).zip(bd) {
                    row.fill(bv);
                }
                // y[o, 2l + kk] += sum_c w[c, o, kk] x[c, l]
                for kk in 0..2 {
                    gemm((co, ci, len), &wd[kk..], (2, 2 * co), xi, (len, 1), 1.0, &mut yi[kk..], (2 * len, 2));
                }
            }
        }
        Ok(self.push(y, Op::ConvTranspose2 { x, w, b }))
    }

    /// Batch normalization over the batch and length axes.
    ///
    /// In training mode the batch statistics are used and recorded under
    /// `prefix`; otherwise `running` supplies `(mean, var)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        prefix: &str,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<Var> {
        let (bs, c, len) = dims3(self.value(x))?;
        let n = (bs * len) as f64;
        let xd = self.value(x).data();
        let (mean, var, train) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::invalid(format!("running stats for `{prefix}` have wrong size")));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                if bs * len < 2 {
                    return Err(Error::invalid("training-mode batch norm needs at least two values per channel"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..bs {
                        s += xd[(bi * c + ch) * len..(bi * c + ch + 1) * len].iter().sum::<f64>();
                    }
                    let m = s / n;
                    let mut ss = 0.0;
                    for bi in 0..bs {
                        for &v in &xd[(bi * c + ch) * len..(bi * c + ch + 1) * len] {
                            ss += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = ss / n;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        if g.len() != c || be.len() != c {
            return Err(Error::invalid(format!("batch norm `{prefix}` affine has wrong size")));
        }
        let mut x_hat = Tensor::zeros(&[bs, c, len]);
        let mut y = Tensor::zeros(&[bs, c, len]);
        for bi in 0..bs {
            for ch in 0..c {
                let r = (bi * c + ch) * len..(bi * c + ch + 1) * len;
                for ((h, o), &v) in x_hat.data_mut()[r.clone()]
                    .iter_mut()
                    .zip(&mut y.data_mut()[r.clone()])
                    .zip(&xd[r])
                {
                    *h = (v - mean[ch]) * inv_std[ch];
                    *o = g[ch] * *h + be[ch];
                }
            }
        }
        if train {
            let unbias = n / (n - 1.0);
            self.bn_stats.push(BnBatchStats {
                prefix: prefix.to_string(),
                mean,
                var: var.iter().map(|v| v * unbias).collect(),
            });
        }
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                train,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu { x })
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (bs, c, len) = dims3(self.value(x))?;
        if len % 2 != 0 {
            return Err(Error::invalid(format!("max-pool over odd length {len}")));
        }
        let half = len / 2;
        let xd = self.value(x).data();
        let mut y = Tensor::zeros(&[bs, c, half]);
        let mut argmax = vec![0; bs * c * half];
        for row in 0..bs * c {
            for l in 0..half {
                let i0 = row * len + 2 * l;
                let pick = if xd[i0 + 1] > xd[i0] { i0 + 1 } else { i0 };
                y.data_mut()[row * half + l] = xd[pick];
                argmax[row * half + l] = pick;
            }
        }
        Ok(self.push(y, Op::MaxPool2 { x, argmax }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).lincomb(1.0, self.value(b), 1.0)?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    /// `x[b, c, l] + v[b, c]`
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (bs, c, len) = dims3(self.value(x))?;
        if self.value(v).shape() != [bs, c] {
            return Err(Error::invalid("channel bias must be [batch, channels]"));
        }
        let mut y = self.value(x).clone();
        let vd = self.value(v).data();
        for (row, chunk) in y.data_mut().chunks_exact_mut(len).enumerate() {
            let add = vd[row];
            chunk.iter_mut().for_each(|e| *e += add);
        }
        Ok(self.push(y, Op::AddChannel { x, v }))
    }

    /// Multiply every channel of `x` (`[B, C, L]`) by `s` (`[B, C]`).
    pub fn scale_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (bs, c, len) = dims3(self.value(x))?;
        if self.value(s).shape() != [bs, c] {
            return Err(Error::invalid("channel scale must be [batch, channels]"));
        }
        let mut y = self.value(x).clone();
        let sd = self.value(s).data();
        for (row, chunk) in y.data_mut().chunks_exact_mut(len).enumerate() {
            let k = sd[row];
            chunk.iter_mut().for_each(|e| *e *= k);
        }
        Ok(self.push(y, Op::ScaleChannel { x, s }))
    }

    /// Per-element posterior mean `E[x | z]` for `z = alpha x + sigma eps`
    /// under the per-channel prior `pi delta(x - floor) + (1 - pi) N(mu, s^2)`
    /// with `s = exp(rho)`, `pi = sigmoid(logit)`. `z` is `[B, C, L]`, the
    /// prior parameters `[B, C]`; `coeffs` holds `(alpha, sigma)` per item.
    pub fn floor_mixture(
        &mut self,
        z: Var,
        mu: Var,
        rho: Var,
        logit: Var,
        coeffs: &[(f64, f64)],
        floor: f64,
    ) -> Result<Var> {
        let (bs, c, len) = dims3(self.value(z))?;
        for v in [mu, rho, logit] {
            if self.value(v).shape() != [bs, c] {
                return Err(Error::invalid("mixture parameters must be [batch, channels]"));
            }
        }
        if coeffs.len() != bs {
            return Err(Error::invalid("one (alpha, sigma) pair per batch item required"));
        }
        let mut y = Tensor::zeros(&[bs, c, len]);
        for row in 0..bs * c {
            let (a, s) = coeffs[row / c];
            let prior = MixturePrior::new(self.value(mu).data()[row], self.value(rho).data()[row], self.value(logit).data()[row], floor);
            let zs = &self.value(z).data()[row * len..(row + 1) * len];
            for (o, &zv) in y.data_mut()[row * len..(row + 1) * len].iter_mut().zip(zs) {
                *o = prior.posterior(zv, a, s).mean;
            }
        }
        Ok(self.push(y, Op::FloorMixture { z, mu, rho, logit, coeffs: coeffs.to_vec(), floor }))
    }

    /// `ca[b] * a + cb[b] * b` per batch item.
    pub fn item_lincomb(&mut self, a: Var, b: Var, ca: &[f64], cb: &[f64]) -> Result<Var> {
        self.value(a).ensure_same_shape(self.value(b))?;
        let bs = self.value(a).batch();
        if ca.len() != bs || cb.len() != bs {
            return Err(Error::invalid("one coefficient pair per batch item required"));
        }
        let mut y = self.value(a).clone();
        for bi in 0..bs {
            for (o, &v) in y.item_mut(bi).iter_mut().zip(self.value(b).item(bi)) {
                *o = ca[bi] * *o + cb[bi] * v;
            }
        }
        Ok(self.push(y, Op::ItemLincomb { a, b, ca: ca.to_vec(), cb: cb.to_vec() }))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bs, ca, len) = dims3(self.value(a))?;
        let (bs2, cb, len2) = dims3(self.value(b))?;
        if bs != bs2 || len != len2 {
            return Err(Error::invalid("concat inputs disagree on batch or length"));
        }
        let mut data = Vec::with_capacity(bs * (ca + cb) * len);
        for bi in 0..bs {
            data.extend_from_slice(self.value(a).item(bi));
            data.extend_from_slice(self.value(b).item(bi));
        }
        let y = Tensor::from_vec(&[bs, ca + cb, len], data)?;
        Ok(self.push(y, Op::Concat { a, b }))
    }

    /// `x [batch, in] -> [batch, out]` with `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, fin) = dims2(self.value(x))?;
        let (fout, wfin) = dims2(self.value(w))?;
        if wfin != fin || self.value(b).shape() != [fout] {
            return Err(Error::invalid("linear weight must be [out, in] with bias [out]"));
        }
        let bd = self.value(b).data();
        let mut y = Tensor::zeros(&[bs, fout]);
        for row in y.data_mut().chunks_exact_mut(fout) {
            row.copy_from_slice(bd);
        }
        // y[B, out] += x[B, in] . w^T[in, out]
        gemm(
            (bs, fin, fout),
            self.value(x).data(),
            (fin, 1),
            self.value(w).data(),
            (1, fin),
            1.0,
            y.data_mut(),
            (fout, 1),
        );
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    /// Single-head dot-product self-attention over the length axis:
    /// `out[c, i] = sum_j softmax_j(q[:, i] . k[:, j] / sqrt(C)) v[c, j]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (bs, c, len) = dims3(self.value(q))?;
        self.value(k).ensure_same_shape(self.value(q))?;
        self.value(v).ensure_same_shape(self.value(q))?;
        let scale = 1.0 / (c as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; bs * len * len];
        let mut y = Tensor::zeros(&[bs, c, len]);
        for bi in 0..bs {
            let off = bi * c * len;
            let p = &mut probs[bi * len * len..(bi + 1) * len * len];
            for i in 0..len {
                let row = &mut p[i * len..(i + 1) * len];
                for ch in 0..c {
                    let qv = qd[off + ch * len + i] * scale;
                    let krow = &kd[off + ch * len..off + (ch + 1) * len];
                    for (r, &kv) in row.iter_mut().zip(krow) {
                        *r += qv * kv;
                    }
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - m).exp();
                    z += *r;
                }
                row.iter_mut().for_each(|r| *r /= z);
            }
            let yd = y.data_mut();
            for ch in 0..c {
                let vrow = &vd[off + ch * len..off + (ch + 1) * len];
                for i in 0..len {
                    let prow = &p[i * len..(i + 1) * len];
                    yd[off + ch * len + i] = prow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                }
            }
        }
        Ok(self.push(y, Op::Attention { q, k, v, probs }))
    }

    /// Mean over the length axis: `[batch, channels, length] -> [batch, channels]`.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let (bs, c, len) = dims3(self.value(x))?;
        let data = self
            .value(x)
            .data()
            .chunks_exact(len)
            .map(|r| r.iter().sum::<f64>() / len as f64)
            .collect();
        let y = Tensor::from_vec(&[bs, c], data)?;
        Ok(self.push(y, Op::MeanTime { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }))
    }

    /// Back-propagate `seed = dL/d(output)` and collect parameter gradients.
    /// Whether each node depends on a parameter, i.e. needs a gradient.
    fn needs_grad(&self) -> Vec<bool> {
        let mut needs: Vec<bool> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let n = match &node.op {
                Op::Input => false,
                Op::Param(_) => true,
                op => op.inputs().iter().any(|v| needs[v.0]),
            };
            needs.push(n);
        }
        needs
    }

    pub fn backward(&self, output: Var, seed: Tensor) -> Result<ParamStore> {
        seed.ensure_same_shape(self.value(output))?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut params = ParamStore::new();
        let needs = self.needs_grad();
        let accumulate = |grads: &mut [Option<Tensor>], v: Var, g: Tensor| -> Result<()> {
            if needs[v.0] { accumulate(grads, v, g) } else { Ok(()) }
        };

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    match params.get_mut(name) {
                        Some(acc) => acc.axpy(1.0, &dy)?,
                        None => {
                            params.insert(name.clone(), dy);
                        }
                    }
                }
                Op::Conv1d { x, w, b, pad } => {
                    let (dx, dw, db) = self.conv1d_backward(*x, *w, *pad, &dy, needs[x.0])?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx)?;
                    }
                    accumulate(&mut grads, *w, dw)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::ConvTranspose2 { x, w, b } => {
                    let (dx, dw, db) = self.conv_t2_backward(*x, *w, &dy, needs[x.0])?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx)?;
                    }
                    accumulate(&mut grads, *w, dw)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    x_hat,
                    inv_std,
                    train,
                } => {
                    let (bs, c, len) = dims3(&dy)?;
                    let g = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for bi in 0..bs {
                        for ch in 0..c {
                            let r = (bi * c + ch) * len..(bi * c + ch + 1) * len;
                            for (&d, &h) in dy.data()[r.clone()].iter().zip(&x_hat.data()[r]) {
                                dgamma[ch] += d * h;
                                dbeta[ch] += d;
                            }
                        }
                    }
                    let n = (bs * len) as f64;
                    let mut dx = Tensor::zeros(&[bs, c, len]);
                    for bi in 0..bs {
                        for ch in 0..c {
                            let r = (bi * c + ch) * len..(bi * c + ch + 1) * len;
                            let k = g[ch] * inv_std[ch];
                            for ((o, &d), &h) in dx.data_mut()[r.clone()]
                                .iter_mut()
                                .zip(&dy.data()[r.clone()])
                                .zip(&x_hat.data()[r])
                            {
                                *o = if *train {
                                    k * (d - dbeta[ch] / n - h * dgamma[ch] / n)
                                } else {
                                    k * d
                                };
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gamma, Tensor::from_vec(&[c], dgamma)?)?;
                    accumulate(&mut grads, *beta, Tensor::from_vec(&[c], dbeta)?)?;
                }
                Op::Relu { x } => {
                    let dx = dy.zip_map(self.value(*x), |d, v| if v > 0.0 { d } else { 0.0 })?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (&src, &d) in argmax.iter().zip(dy.data()) {
                        dx.data_mut()[src] += d;
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, dy.clone())?;
                    accumulate(&mut grads, *b, dy)?;
                }
                Op::AddChannel { x, v } => {
                    let len = dy.shape()[2];
                    let dv_data = dy.data().chunks_exact(len).map(|r| r.iter().sum()).collect();
                    let dv = Tensor::from_vec(self.value(*v).shape(), dv_data)?;
                    accumulate(&mut grads, *v, dv)?;
                    accumulate(&mut grads, *x, dy)?;
                }
                Op::ScaleChannel { x, s } => {
                    let len = dy.shape()[2];
                    let xd = self.value(*x).data();
                    let sd = self.value(*s).data();
                    let ds_data = dy
                        .data()
                        .chunks_exact(len)
                        .zip(xd.chunks_exact(len))
                        .map(|(d, x)| d.iter().zip(x).map(|(a, b)| a * b).sum())
                        .collect();
                    let ds = Tensor::from_vec(self.value(*s).shape(), ds_data)?;
                    accumulate(&mut grads, *s, ds)?;
                    if needs[x.0] {
                        let mut dx = dy;
                        for (row, chunk) in dx.data_mut().chunks_exact_mut(len).enumerate() {
                            let k = sd[row];
                            chunk.iter_mut().for_each(|e| *e *= k);
                        }
                        accumulate(&mut grads, *x, dx)?;
                    }
                }
                Op::FloorMixture { z, mu, rho, logit, coeffs, floor } => {
                    let (bs, c, len) = dims3(&dy)?;
                    let mut dz = needs[z.0].then(|| Tensor::zeros(dy.shape()));
                    let mut dmu = Tensor::zeros(&[bs, c]);
                    let mut drho = Tensor::zeros(&[bs, c]);
                    let mut dlogit = Tensor::zeros(&[bs, c]);
                    for row in 0..bs * c {
                        let (a, s) = coeffs[row / c];
                        let prior = MixturePrior::new(
                            self.value(*mu).data()[row],
                            self.value(*rho).data()[row],
                            self.value(*logit).data()[row],
                            *floor,
                        );
                        let zs = &self.value(*z).data()[row * len..(row + 1) * len];
                        let ds = &dy.data()[row * len..(row + 1) * len];
                        let (mut gm, mut gr, mut gl) = (0.0, 0.0, 0.0);
                        for (i, (&zv, &d)) in zs.iter().zip(ds).enumerate() {
                            let p = prior.posterior(zv, a, s);
                            gm += d * p.d_mu;
                            gr += d * p.d_rho;
                            gl += d * p.d_logit;
                            if let Some(dz) = dz.as_mut() {
                                dz.data_mut()[row * len + i] = d * p.d_z;
                            }
                        }
                        dmu.data_mut()[row] = gm;
                        drho.data_mut()[row] = gr;
                        dlogit.data_mut()[row] = gl;
                    }
                    if let Some(dz) = dz {
                        accumulate(&mut grads, *z, dz)?;
                    }
                    accumulate(&mut grads, *mu, dmu)?;
                    accumulate(&mut grads, *rho, drho)?;
                    accumulate(&mut grads, *logit, dlogit)?;
                }
                Op::ItemLincomb { a, b, ca, cb } => {
                    for (v, k) in [(*a, ca), (*b, cb)] {
                        if needs[v.0] {
                            let mut d = dy.clone();
                            for (bi, &kb) in k.iter().enumerate() {
                                d.item_mut(bi).iter_mut().for_each(|e| *e *= kb);
                            }
                            accumulate(&mut grads, v, d)?;
                        }
                    }
                }
                Op::Concat { a, b } => {
                    let (bs, _, len) = dims3(&dy)?;
                    let ca = self.value(*a).shape()[1];
                    let cb = self.value(*b).shape()[1];
                    let mut da = Vec::with_capacity(bs * ca * len);
                    let mut db = Vec::with_capacity(bs * cb * len);
                    for bi in 0..bs {
                        let item = dy.item(bi);
                        da.extend_from_slice(&item[..ca * len]);
                        db.extend_from_slice(&item[ca * len..]);
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(&[bs, ca, len], da)?)?;
                    accumulate(&mut grads, *b, Tensor::from_vec(&[bs, cb, len], db)?)?;
                }
                Op::Linear { x, w, b } => {
                    let (bs, fout) = dims2(&dy)?;
                    let fin = self.value(*x).shape()[1];
                    let mut dw = Tensor::zeros(&[fout, fin]);
                    let mut db = Tensor::zeros(&[fout]);
                    for row in dy.data().chunks_exact(fout) {
                        for (g, d) in db.data_mut().iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                    // dw[out, in] = dy^T[out, B] . x[B, in]
                    gemm((fout, bs, fin), dy.data(), (1, fout), self.value(*x).data(), (fin, 1), 0.0, dw.data_mut(), (fin, 1));
                    if needs[x.0] {
                        // dx[B, in] = dy[B, out] . w[out, in]
                        let mut dx = Tensor::zeros(&[bs, fin]);
                        gemm((bs, fout, fin), dy.data(), (fout, 1), self.value(*w).data(), (fin, 1), 0.0, dx.data_mut(), (fin, 1));
                        accumulate(&mut grads, *x, dx)?;
                    }
                    accumulate(&mut grads, *w, dw)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Attention { q, k, v, probs } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, probs, &dy)?;
                    accumulate(&mut grads, *q, dq)?;
                    accumulate(&mut grads, *k, dk)?;
                    accumulate(&mut grads, *v, dv)?;
                }
                Op::MeanTime { x } => {
                    let (bs, c, len) = dims3(self.value(*x))?;
                    let mut dx = Tensor::zeros(&[bs, c, len]);
                    for (row, chunk) in dx.data_mut().chunks_exact_mut(len).enumerate() {
                        let d = dy.data()[row] / len as f64;
                        chunk.fill(d);
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Reshape { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, dy.reshape(&shape)?)?;
                }
            }
        }
        Ok(params)
    }

    fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        pad: usize,
        dy: &Tensor,
        need_dx: bool,
    ) -> Result<(Option<Tensor>, Tensor, Tensor)> {
        let (bs, ci, len) = dims3(self.value(x))?;
        let (co, _, k) = dims3(self.value(w))?;
        let out_len = dy.shape()[2];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut dx = need_dx.then(|| Tensor::zeros(&[bs, ci, len]));
        let mut dw = Tensor::zeros(&[co, ci, k]);
        let mut db = Tensor::zeros(&[co]);
        let mut cols = Vec::new();
        let mut dcols = vec![0.0; ci * k * out_len];
        for bi in 0..bs {
            let dyi = &dy.data()[bi * co * out_len..(bi + 1) * co * out_len];
            for (g, row) in db.data_mut().iter_mut().zip(dyi.chunks_exact(out_len)) {
                *g += row.iter().sum::<f64>();
            }
            let xi = &xd[bi * ci * len..(bi + 1) * ci * len];
            let cols = im2col(xi, ci, len, k, pad, out_len, &mut cols);
            // dw[co, ci*k] += dy[co, L] . cols^T[L, ci*k]
            gemm((co, out_len, ci * k), dyi, (out_len, 1), cols, (1, out_len), 1.0, dw.data_mut(), (ci * k, 1));
            if let Some(dx) = dx.as_mut() {
                // dcols[ci*k, L] = w^T[ci*k, co] . dy[co, L], then scatter back
                gemm((ci * k, co, out_len), wd, (1, ci * k), dyi, (out_len, 1), 0.0, &mut dcols, (out_len, 1));
                let dxi = &mut dx.data_mut()[bi * ci * len..(bi + 1) * ci * len];
                for c in 0..ci {
                    let dxrow = &mut dxi[c * len..(c + 1) * len];
                    for kk in 0..k {
                        let (lo, hi) = valid_range(out_len, len, kk, pad);
                        let src = lo + kk - pad;
                        let drow = &dcols[(c * k + kk) * out_len..(c * k + kk + 1) * out_len];
                        for (g, d) in dxrow[src..src + hi - lo].iter_mut().zip(&drow[lo..hi]) {
                            *g += d;
                        }
                    }
                }
            }
        }
        Ok((dx, dw, db))
    }

    fn conv_t2_backward(
        &self,
        x: Var,
        w: Var,
        dy: &Tensor,
        need_dx: bool,
    ) -> Result<(Option<Tensor>, Tensor, Tensor)> {
        let (bs, ci, len) = dims3(self.value(x))?;
        let co = self.value(w).shape()[1];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut dx = need_dx.then(|| Tensor::zeros(&[bs, ci, len]));
        let mut dw = Tensor::zeros(&[ci, co, 2]);
        let mut db = Tensor::zeros(&[co]);
        for bi in 0..bs {
            let dyi = &dy.data()[bi * co * 2 * len..(bi + 1) * co * 2 * len];
            for (g, row) in db.data_mut().iter_mut().zip(dyi.chunks_exact(2 * len)) {
                *g += row.iter().sum::<f64>();
            }
            let xi = &xd[bi * ci * len..(bi + 1) * ci * len];
            for kk in 0..2 {
                let dyk = &dyi[kk..];
                // dw_kk[ci, co] += x[ci, L] . dy_kk^T[L, co]
                gemm((ci, len, co), xi, (len, 1), dyk, (2, 2 * len), 1.0, &mut dw.data_mut()[kk..], (2 * co, 2));
                if let Some(dx) = dx.as_mut() {
                    // dx[ci, L] += w_kk[ci, co] . dy_kk[co, L]
                    let dxi = &mut dx.data_mut()[bi * ci * len..(bi + 1) * ci * len];
                    gemm((ci, co, len), &wd[kk..], (2 * co, 2), dyk, (2 * len, 2), 1.0, dxi, (len, 1));
                }
            }
        }
        Ok((dx, dw, db))
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        probs: &[f64],
        dy: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let (bs, c, len) = dims3(dy)?;
        let scale = 1.0 / (c as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = Tensor::zeros(&[bs, c, len]);
        let mut dk = Tensor::zeros(&[bs, c, len]);
        let mut dv = Tensor::zeros(&[bs, c, len]);
        let mut dp = vec![0.0; len * len];
        for bi in 0..bs {
            let off = bi * c * len;
            let p = &probs[bi * len * len..(bi + 1) * len * len];
            let dyd = &dy.data()[off..off + c * len];
            // dV[c, j] = sum_i dY[c, i] P[i, j];  dP[i, j] = sum_c dY[c, i] V[c, j]
            dp.fill(0.0);
            for ch in 0..c {
                let vrow = &vd[off + ch * len..off + (ch + 1) * len];
                let dvrow = &mut dv.data_mut()[off + ch * len..off + (ch + 1) * len];
                for i in 0..len {
                    let d = dyd[ch * len + i];
                    let prow = &p[i * len..(i + 1) * len];
                    for (g, &pv) in dvrow.iter_mut().zip(prow) {
                        *g += d * pv;
                    }
                    for (g, &vv) in dp[i * len..(i + 1) * len].iter_mut().zip(vrow) {
                        *g += d * vv;
                    }
                }
            }
            // softmax backward: dS = P * (dP - rowsum(dP * P)), scaled
            for i in 0..len {
                let prow = &p[i * len..(i + 1) * len];
                let drow = &mut dp[i * len..(i + 1) * len];
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (g, &pv) in drow.iter_mut().zip(prow) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            for ch in 0..c {
                let qrow = &qd[off + ch * len..off + (ch + 1) * len];
                let krow = &kd[off + ch * len..off + (ch + 1) * len];
                for i in 0..len {
                    let srow = &dp[i * len..(i + 1) * len];
                    let mut acc = 0.0;
                    for (s, &kv) in srow.iter().zip(krow) {
                        acc += s * kv;
                    }
                    dq.data_mut()[off + ch * len + i] += acc;
                    let qv = qrow[i];
                    let dkrow = &mut dk.data_mut()[off + ch * len..off + (ch + 1) * len];
                    for (g, &s) in dkrow.iter_mut().zip(srow) {
                        *g += s * qv;
                    }
                }
            }
        }
        Ok((dq, dk, dv))
    }
}

/// Unfold `x` (`[ci, len]`) into `[ci * k, out_len]` rows of shifted,
/// zero-padded copies. Returns `x` itself for pointwise kernels.
fn im2col<'a>(
    x: &'a [f64],
    ci: usize,
    len: usize,
    k: usize,
    pad: usize,
    out_len: usize,
    buf: &'a mut Vec<f64>,
) -> &'a [f64] {
    if k == 1 && pad == 0 {
        return x;
    }
    buf.clear();
    buf.resize(ci * k * out_len, 0.0);
    for c in 0..ci {
        let xrow = &x[c * len..(c + 1) * len];
        for kk in 0..k {
            let (lo, hi) = valid_range(out_len, len, kk, pad);
            let src = lo + kk - pad;
            let row = &mut buf[(c * k + kk) * out_len..(c * k + kk + 1) * out_len];
            row[lo..hi].copy_from_slice(&xrow[src..src + hi - lo]);
        }
    }
    buf
}

/// `c = a . b + beta * c` for an `(m, k, n)` product over strided views;
/// strides are `(row, column)` in elements.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, n, rsc, csc) < c.len(), "gemm output view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!(last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len(), "gemm input view out of bounds");
    // SAFETY: every index reachable through the given strides was checked
    // to be in bounds above, and `c` is an exclusive borrow distinct from
    // `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Output positions `[lo, hi)` whose source `l + kk - pad` lies in `0..len`.
fn valid_range(out_len: usize, len: usize, kk: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk);
    let hi = out_len.min((len + pad).saturating_sub(kk));
    (lo, hi.max(lo))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Posterior of one cell under the floor-plus-Gaussian prior.
struct MixturePrior {
    mu: f64,
    var: f64,
    logit: f64,
    floor: f64,
}

/// Posterior mean and its partial derivatives.
struct MixturePosterior {
    mean: f64,
    d_z: f64,
    d_mu: f64,
    d_rho: f64,
    d_logit: f64,
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl MixturePrior {
    fn new(mu: f64, rho: f64, logit: f64, floor: f64) -> Self {
        MixturePrior { mu, var: (2.0 * rho).exp(), logit, floor }
    }

    fn posterior(&self, z: f64, a: f64, s: f64) -> MixturePosterior {
        let (m, u, x0) = (self.mu, self.var, self.floor);
        if s == 0.0 {
            // noiseless: the observation pins x down
            return MixturePosterior { mean: z / a, d_z: 1.0 / a, d_mu: 0.0, d_rho: 0.0, d_logit: 0.0 };
        }
        let den = a * a * u + s * s;
        let dm = z - a * m;
        let d0 = z - a * x0;
        let gauss_mean = m + a * u * dm / den;
        // log-likelihood of z under each component
        let l0 = -d0 * d0 / (2.0 * s * s) - s.ln();
        let l1 = -dm * dm / (2.0 * den) - 0.5 * den.ln();
        let r = sigmoid(self.logit + l0 - l1);
        let q = r * (1.0 - r);
        let gap = x0 - gauss_mean;
        let dl1_dm = a * dm / den;
        let dl1_drho = a * a * u * (dm * dm / (den * den) - 1.0 / den);
        let dl0_dz = -d0 / (s * s);
        let dl1_dz = -dm / den;
        MixturePosterior {
            mean: r * x0 + (1.0 - r) * gauss_mean,
            d_z: gap * q * (dl0_dz - dl1_dz) + (1.0 - r) * a * u / den,
            d_mu: -gap * q * dl1_dm + (1.0 - r) * s * s / den,
            d_rho: -gap * q * dl1_drho + (1.0 - r) * 2.0 * a * dm * u * s * s / (den * den),
            d_logit: gap * q,
        }
    }
}
