//! Differentiable operations recorded on the [`Tape`].
//!
//! Every method runs the forward computation eagerly, then (when any input
//! requires gradients) registers a closure that adds the operation's
//! vector-Jacobian product into the upstream gradient buffers. Saved values
//! are cheap clones of the shared tensor buffers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Batch statistics produced by a train-mode batch norm, to be folded into
/// the running estimates by the caller.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[inline]
fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    /// Dense 2-D convolution: `x` is `(N, Ci, H, W)`, `w` is `(Co, Ci, Kh, Kw)`.
    /// Zero padding, no bias (a batch norm always follows in this crate).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        let xt = self.value(x).clone();
        let wt = self.value(w).clone();
        let (xs, ws) = (xt.shape(), wt.shape());
        if ws.c != xs.c {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {} vs kernel {}",
                xs, ws
            )));
        }
        let oh = kernels::conv_out_len(xs.h, ws.h, stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv2d kernel {} exceeds input {}", ws, xs)))?;
        let ow = kernels::conv_out_len(xs.w, ws.w, stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv2d kernel {} exceeds input {}", ws, xs)))?;
        let out = kernels::conv2d_forward(xt.data(), xs, wt.data(), ws, stride, pad, oh, ow);
        let value = Tensor::from_vec(Shape::new(xs.n, ws.n, oh, ow), out)?;

        let req = self.requires_grad(x) || self.requires_grad(w);
        let backward = req.then(|| {
            Box::new(move |go: &[f64], sink: &mut crate::tape::GradSink| {
                if sink.needs(x) {
                    let gx = sink.entry(x, xs.count());
                    kernels::conv2d_backward_data(go, wt.data(), ws, xs, stride, pad, oh, ow, gx);
                }
                if sink.needs(w) {
                    let gw = sink.entry(w, ws.count());
                    kernels::conv2d_backward_weights(go, xt.data(), xs, ws, stride, pad, oh, ow, gw);
                }
            }) as _
        });
        Ok(self.push(value, req, backward))
    }

    /// Depthwise 2-D convolution: `x` is `(N, C, H, W)`, `w` is `(C, 1, Kh, Kw)`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Shape("depthwise_conv2d stride must be positive".into()));
        }
        let xt = self.value(x).clone();
        let wt = self.value(w).clone();
        let (xs, ws) = (xt.shape(), wt.shape());
        if ws.n != xs.c || ws.c != 1 {
            return Err(Error::Shape(format!(
                "depthwise kernel must be (C, 1, Kh, Kw) with C = {}, got {}",
                xs.c, ws
            )));
        }
        let oh = kernels::conv_out_len(xs.h, ws.h, stride, pad)
            .ok_or_else(|| Error::Shape(format!("depthwise kernel {} exceeds input {}", ws, xs)))?;
        let ow = kernels::conv_out_len(xs.w, ws.w, stride, pad)
            .ok_or_else(|| Error::Shape(format!("depthwise kernel {} exceeds input {}", ws, xs)))?;
        let out = kernels::depthwise_forward(xt.data(), xs, wt.data(), ws, stride, pad, oh, ow);
        let value = Tensor::from_vec(Shape::new(xs.n, xs.c, oh, ow), out)?;

        let req = self.requires_grad(x) || self.requires_grad(w);
        let backward = req.then(|| {
            Box::new(move |go: &[f64], sink: &mut crate::tape::GradSink| {
                if sink.needs(x) {
                    let gx = sink.entry(x, xs.count());
                    kernels::depthwise_backward_data(go, wt.data(), ws, xs, stride, pad, oh, ow, gx);
                }
                if sink.needs(w) {
                    let gw = sink.entry(w, ws.count());
                    kernels::depthwise_backward_weights(
                        go,
                        xt.data(),
                        xs,
                        ws,
                        stride,
                        pad,
                        oh,
                        ow,
                        gw,
                    );
                }
            }) as _
        });
        Ok(self.push(value, req, backward))
    }

    /// Batch normalisation over `(N, H, W)` per channel.
    ///
    /// In train mode the batch statistics (biased variance) normalise the
    /// activations and are returned so the caller can update its running
    /// estimates. In eval mode the provided running statistics are used and
    /// no update is returned.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        mode: Mode,
        eps: f64,
    ) -> Result<(Var, Option<BnBatchStats>)> {
        let xt = self.value(x).clone();
        let gt = self.value(gamma).clone();
        let bt = self.value(beta).clone();
        let xs = xt.shape();
        let c = xs.c;
        for (name, t) in [
            ("gamma", &gt),
            ("beta", &bt),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ] {
            let s = t.shape();
            if s != Shape::new(1, c, 1, 1) {
                return Err(Error::Shape(format!(
                    "batch_norm {name} must be (1, {c}, 1, 1), got {s}"
                )));
            }
        }
        let m = xs.n * xs.h * xs.w;
        if m == 0 {
            return Err(Error::Shape("batch_norm input has no elements".into()));
        }
        let plane = xs.h * xs.w;

        // Per-channel mean/var of the normalising distribution.
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for n in 0..xs.n {
                        let row = xs.index(n, ch, 0, 0);
                        for v in &xt.data()[row..row + plane] {
                            acc += v;
                        }
                    }
                    let mu = acc / m as f64;
                    let mut acc2 = 0.0;
                    for n in 0..xs.n {
                        let row = xs.index(n, ch, 0, 0);
                        for v in &xt.data()[row..row + plane] {
                            let d = v - mu;
                            acc2 += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = acc2 / m as f64;
                }
                (mean, var)
            }
            Mode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xs.count()];
        let mut out = vec![0.0; xs.count()];
        for n in 0..xs.n {
            for ch in 0..c {
                let row = xs.index(n, ch, 0, 0);
                let (mu, is) = (mean[ch], inv_std[ch]);
                let (g, b) = (gt.data()[ch], bt.data()[ch]);
                for i in row..row + plane {
                    let h = (xt.data()[i] - mu) * is;
                    xhat[i] = h;
                    out[i] = g * h + b;
                }
            }
        }
        let value = Tensor::from_vec(xs, out)?;
        let stats = match mode {
            Mode::Train => Some(BnBatchStats {
                mean: mean.clone(),
                var: var.clone(),
            }),
            Mode::Eval => None,
        };

        let req = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let backward = req.then(|| {
            let train = mode == Mode::Train;
            Box::new(move |go: &[f64], sink: &mut crate::tape::GradSink| {
                // Per-channel reductions shared by all three gradients.
                let mut s1 = vec![0.0; c];
                let mut s2 = vec![0.0; c];
                for n in 0..xs.n {
                    for ch in 0..c {
                        let row = xs.index(n, ch, 0, 0);
                        let (mut a1, mut a2) = (0.0, 0.0);
                        for i in row..row + plane {
                            a1 += go[i];
                            a2 += go[i] * xhat[i];
                        }
                        s1[ch] += a1;
                        s2[ch] += a2;
                    }
                }
                if sink.needs(beta) {
                    let gb = sink.entry(beta, c);
                    for ch in 0..c {
                        gb[ch] += s1[ch];
                    }
                }
                if sink.needs(gamma) {
                    let gg = sink.entry(gamma, c);
                    for ch in 0..c {
                        gg[ch] += s2[ch];
                    }
                }
                if sink.needs(x) {
                    let gx = sink.entry(x, xs.count());
                    let mf = m as f64;
                    for n in 0..xs.n {
                        for ch in 0..c {
                            let row = xs.index(n, ch, 0, 0);
                            let scale = gt.data()[ch] * inv_std[ch];
                            if train {
                                let (c1, c2) = (s1[ch] / mf, s2[ch] / mf);
                                for i in row..row + plane {
                                    gx[i] += scale * (go[i] - c1 - xhat[i] * c2);
                                }
                            } else {
                                for i in row..row + plane {
                                    gx[i] += scale * go[i];
                                }
                            }
                        }
                    }
                }
            }) as _
        });
        Ok((self.push(value, req, backward), stats))
    }

    /// Swish activation `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        let xt = self.value(x).clone();
        let out: Vec<f64> = xt.data().iter().map(|&v| v * sigmoid_scalar(v)).collect();
        let value = Tensor::from_vec(xt.shape(), out).expect("same shape");
        let req = self.requires_grad(x);
        let backward = req.then(|| {
            Box::new(move |go: &[f64], sink: &mut crate::tape::GradSink| {
                if sink.needs(x) {
                    let gx = sink.entry(x, xt.shape().count());
                    for (i, &v) in xt.data().iter().enumerate() {
                        let s = sigmoid_scalar(v);
                        gx[i] += go[i] * (s + v * s * (1.0 - s));
                    }
                }
            }) as _
        });
        self.push(value, req, backward)
    }

    /// Logistic sigmoid.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xt = self.value(x).clone();
        let out: Vec<f64> = xt.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let value = Tensor::from_vec(xt.shape(), out.clone()).expect("same shape");
        let req = self.requires_grad(x);
        let backward = req.then(|| {
            Box::new(move |go: &[f64], sink: &mut crate::tape::GradSink| {
                if sink.needs(x) {
                    let gx = sink.entry(x, out.len());
                    for i in 0..out.len() {
                        gx[i] += go[i] * out[i] * (1.0 - out[i]);
                    }
                }
            }) as _
        });
        self.push(value, req, backward)
    }

    /// Squeeze-excitation: global pooling, two fully connected layers with a
    /// swish bottleneck, sigmoid gate, channelwise rescale of `x`.
    pub fn squeeze_excitation(
        &mut self,
        x: Var,
        w1: Var,
        b1: Var,
        w2: Var,
        b2: Var,
    ) -> Result<Var> {
        let s = self.global_avg_pool(x);
        let h = self.fully_connected(s, w1, b1)?;
        let h = self.swish(h);
        let g = self.fully_connected(h, w2, b2)?;
        let g = self.sigmoid(g);
        self.mul(x, g)
    }

    /// DropConnect / stochastic depth: in train mode each sample's residual
    /// branch is zeroed with probability `1 - survival_p` and survivors are
    /// rescaled by `1 / survival_p`. Eval mode is the identity.
    pub fn drop_connect(
        &mut self,
        x: Var,
        survival_p: f64,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if !(survival_p > 0.0 && survival_p <= 1.0) {
            return Err(Error::Numeric(format!(
                "drop_connect survival probability must be in (0, 1], got {survival_p}"
            )));
        }
        if mode == Mode::Eval {
            return Ok(x);
        }
        let xt = self.value(x).clone();
        let xs = xt.shape();
        let factors: Vec<f64> = (0..xs.n)
            .map(|_| {
                if rng.random::<f64>() < survival_p {
                    1.0 / survival_p
                } else {
                    0.0
                }
            })
            .collect();
        let per = xs.c * xs.h * xs.w;
        let mut out = vec![0.0; xs.count()];
        for n in 0..xs.n {
            let f = factors[n];
            if f != 0.0 {
                for i in n * per..(n + 1) * per {
                    out[i] = xt.data()[i] * f;
                }
            }
        }
        let value = Tensor::from_vec(xs, out)?;
        let req = self.requires_grad(x);
        let backward = req.then(|| {
            Box::new(move |go: &[f64], sink: &mut crate::tape::GradSink| {
                if sink.needs(x) {
                    let gx = sink.entry(x, xs.count());
                    for n in 0..xs.n {
                        let f = factors[n];
                        if f != 0.0 {
                            for i in n * per..(n + 1) * per {
                                gx[i] += go[i] * f;
                            }
                        }
                    }
                }
            }) as _
        });
        Ok(self.push(value, req, backward))
    }

    /// Mean over the spatial plane, producing `(N, C, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xt = self.value(x).clone();
        let xs = xt.shape();
        let plane = xs.h * xs.w;
        let mut out = vec![0.0; xs.n * xs.c];
        for n in 0..xs.n {
            for ch in 0..xs.c {
                let row = xs.index(n, ch, 0, 0);
                let mut acc = 0.0;
                for v in &xt.data()[row..row + plane] {
                    acc += v;
                }
                out[n * xs.c + ch] = acc / plane as f64;
            }
        }
        let value = Tensor::from_vec(Shape::new(xs.n, xs.c, 1, 1), out).expect("pool shape");
        let req = self.requires_grad(x);
        let backward = req.then(|| {
            Box::new(move |go: &[f64], sink: &mut crate::tape::GradSink| {
                if sink.needs(x) {
                    let gx = sink.entry(x, xs.count());
                    let inv = 1.0 / plane as f64;
                    for n in 0..xs.n {
                        for ch in 0..xs.c {
                            let g = go[n * xs.c + ch] * inv;
                            let row = xs.index(n, ch, 0, 0);
                            for v in &mut gx[row..row + plane] {
                                *v += g;
                            }
                        }
                    }
                }
            }) as _
        });
        self.push(value, req, backward)
    }

    /// Fully connected layer on pooled features: `x` is `(N, C, 1, 1)`,
    /// `w` is `(K, C, 1, 1)`, `b` is `(1, K, 1, 1)`; output `(N, K, 1, 1)`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xt = self.value(x).clone();
        let wt = self.value(w).clone();
        let bt = self.value(b).clone();
        let (xs, ws, bs) = (xt.shape(), wt.shape(), bt.shape());
        if xs.h != 1 || xs.w != 1 {
            return Err(Error::Shape(format!(
                "fully_connected input must be (N, C, 1, 1), got {xs}"
            )));
        }
        if ws.c != xs.c || ws.h != 1 || ws.w != 1 {
            return Err(Error::Shape(format!(
                "fully_connected weight must be (K, {}, 1, 1), got {ws}",
                xs.c
            )));
        }
        let k = ws.n;
        if bs != Shape::new(1, k, 1, 1) {
            return Err(Error::Shape(format!(
                "fully_connected bias must be (1, {k}, 1, 1), got {bs}"
            )));
        }
        let c = xs.c;
        let mut out = vec![0.0; xs.n * k];
        for n in 0..xs.n {
            let xrow = &xt.data()[n * c..(n + 1) * c];
            for j in 0..k {
                let wrow = &wt.data()[j * c..(j + 1) * c];
                out[n * k + j] = bt.data()[j] + kernels::dot(xrow, wrow);
            }
        }
        let value = Tensor::from_vec(Shape::new(xs.n, k, 1, 1), out)?;
        let req =
            self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        let backward = req.then(|| {
            Box::new(move |go: &[f64], sink: &mut crate::tape::GradSink| {
                if sink.needs(x) {
                    let gx = sink.entry(x, xs.n * c);
                    for n in 0..xs.n {
                        for j in 0..k {
                            kernels::axpy(
                                go[n * k + j],
                                &wt.data()[j * c..(j + 1) * c],
                                &mut gx[n * c..(n + 1) * c],
                            );
                        }
                    }
                }
                if sink.needs(w) {
                    let gw = sink.entry(w, k * c);
                    for n in 0..xs.n {
                        let xrow = &xt.data()[n * c..(n + 1) * c];
                        for j in 0..k {
                            kernels::axpy(go[n * k + j], xrow, &mut gw[j * c..(j + 1) * c]);
                        }
                    }
                }
                if sink.needs(b) {
                    let gb = sink.entry(b, k);
                    for n in 0..xs.n {
                        for j in 0..k {
                            gb[j] += go[n * k + j];
                        }
                    }
                }
            }) as _
        });
        Ok(self.push(value, req, backward))
    }

    /// Mean softmax cross-entropy over the batch. `logits` is `(N, K, 1, 1)`
    /// and `labels[n]` is the true class of sample `n`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lt = self.value(logits).clone();
        let ls = lt.shape();
        if ls.h != 1 || ls.w != 1 {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy logits must be (N, K, 1, 1), got {ls}"
            )));
        }
        let (n, k) = (ls.n, ls.c);
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy got {} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lt.data()[i * k..(i + 1) * k];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut denom = 0.0;
            for j in 0..k {
                let e = (row[j] - max).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            for j in 0..k {
                probs[i * k + j] /= denom;
            }
            loss -= (probs[i * k + labels[i]]).ln();
        }
        loss /= n as f64;
        let labels = labels.to_vec();
        let req = self.requires_grad(logits);
        let backward = req.then(|| {
            Box::new(move |go: &[f64], sink: &mut crate::tape::GradSink| {
                if sink.needs(logits) {
                    let g = go[0] / n as f64;
                    let gx = sink.entry(logits, n * k);
                    for i in 0..n {
                        for j in 0..k {
                            let ind = if labels[i] == j { 1.0 } else { 0.0 };
                            gx[i * k + j] += g * (probs[i * k + j] - ind);
                        }
                    }
                }
            }) as _
        });
        Ok(self.push(Tensor::scalar(loss), req, backward))
    }

    /// Elementwise addition of same-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let at = self.value(a).clone();
        let bt = self.value(b).clone();
        if at.shape() != bt.shape() {
            return Err(Error::Shape(format!(
                "add shape mismatch: {} vs {}",
                at.shape(),
                bt.shape()
            )));
        }
        let out: Vec<f64> = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(at.shape(), out)?;
        let len = at.shape().count();
        let req = self.requires_grad(a) || self.requires_grad(b);
        let backward = req.then(|| {
            Box::new(move |go: &[f64], sink: &mut crate::tape::GradSink| {
                for v in [a, b] {
                    if sink.needs(v) {
                        let g = sink.entry(v, len);
                        for i in 0..len {
                            g[i] += go[i];
                        }
                    }
                }
            }) as _
        });
        Ok(self.push(value, req, backward))
    }

    /// Elementwise multiply. Either both operands share a shape, or one is
    /// `(N, C, 1, 1)` and broadcasts over the other's spatial plane (the SE
    /// gating case).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let at = self.value(a).clone();
        let bt = self.value(b).clone();
        let (asp, bsp) = (at.shape(), bt.shape());
        if asp == bsp {
            let out: Vec<f64> = at.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
            let value = Tensor::from_vec(asp, out)?;
            let len = asp.count();
            let req = self.requires_grad(a) || self.requires_grad(b);
            let backward = req.then(|| {
                Box::new(move |go: &[f64], sink: &mut crate::tape::GradSink| {
                    if sink.needs(a) {
                        let g = sink.entry(a, len);
                        for i in 0..len {
                            g[i] += go[i] * bt.data()[i];
                        }
                    }
                    if sink.needs(b) {
                        let g = sink.entry(b, len);
                        for i in 0..len {
                            g[i] += go[i] * at.data()[i];
                        }
                    }
                }) as _
            });
            return Ok(self.push(value, req, backward));
        }

        // Broadcast case: normalise so `big` has the plane and `small` is
        // (N, C, 1, 1).
        let (big, small, big_t, small_t) = if bsp.h == 1 && bsp.w == 1 {
            (a, b, at, bt)
        } else if asp.h == 1 && asp.w == 1 {
            (b, a, bt, at)
        } else {
            return Err(Error::Shape(format!(
                "mul shape mismatch: {asp} vs {bsp}"
            )));
        };
        let (bs, ss) = (big_t.shape(), small_t.shape());
        if ss.n != bs.n || ss.c != bs.c {
            return Err(Error::Shape(format!(
                "mul broadcast requires matching batch and channels: {bs} vs {ss}"
            )));
        }
        let plane = bs.h * bs.w;
        let mut out = vec![0.0; bs.count()];
        for n in 0..bs.n {
            for ch in 0..bs.c {
                let f = small_t.data()[n * bs.c + ch];
                let row = bs.index(n, ch, 0, 0);
                for i in row..row + plane {
                    out[i] = big_t.data()[i] * f;
                }
            }
        }
        let value = Tensor::from_vec(bs, out)?;
        let req = self.requires_grad(big) || self.requires_grad(small);
        let backward = req.then(|| {
            Box::new(move |go: &[f64], sink: &mut crate::tape::GradSink| {
                if sink.needs(big) {
                    let g = sink.entry(big, bs.count());
                    for n in 0..bs.n {
                        for ch in 0..bs.c {
                            let f = small_t.data()[n * bs.c + ch];
                            let row = bs.index(n, ch, 0, 0);
                            for i in row..row + plane {
                                g[i] += go[i] * f;
                            }
                        }
                    }
                }
                if sink.needs(small) {
                    let g = sink.entry(small, bs.n * bs.c);
                    for n in 0..bs.n {
                        for ch in 0..bs.c {
                            let row = bs.index(n, ch, 0, 0);
                            let mut acc = 0.0;
                            for i in row..row + plane {
                                acc += go[i] * big_t.data()[i];
                            }
                            g[n * bs.c + ch] += acc;
                        }
                    }
                }
            }) as _
        });
        Ok(self.push(value, req, backward))
    }

    /// Concatenates along the channel axis. All parts must agree on batch
    /// and spatial dimensions.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_channels needs at least one input".into()));
        }
        let tensors: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let first = tensors[0].shape();
        let mut c_total = 0;
        for t in &tensors {
            let s = t.shape();
            if s.n != first.n || s.h != first.h || s.w != first.w {
                return Err(Error::Shape(format!(
                    "concat_channels mismatch: {} vs {}",
                    first, s
                )));
            }
            c_total += s.c;
        }
        let os = Shape::new(first.n, c_total, first.h, first.w);
        let plane = first.h * first.w;
        let mut out = vec![0.0; os.count()];
        for n in 0..first.n {
            let mut c_off = 0;
            for t in &tensors {
                let s = t.shape();
                let src = s.index(n, 0, 0, 0);
                let dst = os.index(n, c_off, 0, 0);
                let len = s.c * plane;
                out[dst..dst + len].copy_from_slice(&t.data()[src..src + len]);
                c_off += s.c;
            }
        }
        let value = Tensor::from_vec(os, out)?;
        let shapes: Vec<Shape> = tensors.iter().map(|t| t.shape()).collect();
        let parts: Vec<Var> = parts.to_vec();
        let req = parts.iter().any(|&p| self.requires_grad(p));
        let backward = req.then(|| {
            Box::new(move |go: &[f64], sink: &mut crate::tape::GradSink| {
                for (idx, &p) in parts.iter().enumerate() {
                    if !sink.needs(p) {
                        continue;
                    }
                    let s = shapes[idx];
                    let c_off: usize = shapes[..idx].iter().map(|sh| sh.c).sum();
                    let g = sink.entry(p, s.count());
                    for n in 0..s.n {
                        let src = os.index(n, c_off, 0, 0);
                        let dst = s.index(n, 0, 0, 0);
                        let len = s.c * plane;
                        for i in 0..len {
                            g[dst + i] += go[src + i];
                        }
                    }
                }
            }) as _
        });
        Ok(self.push(value, req, backward))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xt = self.value(x).clone();
        let out: Vec<f64> = xt.data().iter().map(|v| v * factor).collect();
        let value = Tensor::from_vec(xt.shape(), out).expect("same shape");
        let len = xt.shape().count();
        let req = self.requires_grad(x);
        let backward = req.then(|| {
            Box::new(move |go: &[f64], sink: &mut crate::tape::GradSink| {
                if sink.needs(x) {
                    let g = sink.entry(x, len);
                    for i in 0..len {
                        g[i] += go[i] * factor;
                    }
                }
            }) as _
        });
        self.push(value, req, backward)
    }

    /// Sum of all elements, producing a scalar (useful as a test loss).
    pub fn sum(&mut self, x: Var) -> Var {
        let xt = self.value(x).clone();
        let total: f64 = xt.data().iter().sum();
        let len = xt.shape().count();
        let req = self.requires_grad(x);
        let backward = req.then(|| {
            Box::new(move |go: &[f64], sink: &mut crate::tape::GradSink| {
                if sink.needs(x) {
                    let g = sink.entry(x, len);
                    for v in g.iter_mut() {
                        *v += go[0];
                    }
                }
            }) as _
        });
        self.push(Tensor::scalar(total), req, backward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tensor_of(shape: Shape, vals: &[f64]) -> Tensor {
        Tensor::from_vec(shape, vals.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let mut tape = Tape::new();
        let k = 7;
        let logits = tape.leaf(Tensor::zeros(Shape::new(3, k, 1, 1)), false);
        let loss = tape.softmax_cross_entropy(logits, &[0, 3, 6]).unwrap();
        let got = tape.value(loss).item().unwrap();
        assert!((got - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_gradient_is_probs_minus_onehot() {
        let mut tape = Tape::new();
        let logits = tape.leaf(
            tensor_of(Shape::new(1, 3, 1, 1), &[1.0, 2.0, 0.5]),
            true,
        );
        let loss = tape.softmax_cross_entropy(logits, &[1]).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let g = grads.take(logits).unwrap();

        let z = [1.0f64, 2.0, 0.5];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let p: Vec<f64> = z.iter().map(|v| v.exp() / denom).collect();
        assert!((g[0] - p[0]).abs() < 1e-12);
        assert!((g[1] - (p[1] - 1.0)).abs() < 1e-12);
        assert!((g[2] - p[2]).abs() < 1e-12);
    }

    #[test]
    fn swish_fixes_zero_and_is_monotone_for_positive_input() {
        let mut tape = Tape::new();
        let xs: Vec<f64> = (0..50).map(|i| i as f64 * 0.2).collect();
        let x = tape.leaf(tensor_of(Shape::new(1, 1, 1, 50), &xs), false);
        let y = tape.swish(x);
        let out = tape.value(y).data().to_vec();
        assert_eq!(out[0], 0.0);
        for i in 1..out.len() {
            assert!(out[i] > out[i - 1]);
        }
    }

    #[test]
    fn batch_norm_train_output_is_standardised() {
        let mut tape = Tape::new();
        let shape = Shape::new(4, 2, 3, 3);
        let vals: Vec<f64> = (0..shape.count()).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.5).collect();
        let x = tape.leaf(tensor_of(shape, &vals), false);
        let gamma = tape.leaf(tensor_of(Shape::new(1, 2, 1, 1), &[1.0, 1.0]), false);
        let beta = tape.leaf(tensor_of(Shape::new(1, 2, 1, 1), &[0.0, 0.0]), false);
        let rm = Tensor::zeros(Shape::new(1, 2, 1, 1));
        let rv = tensor_of(Shape::new(1, 2, 1, 1), &[1.0, 1.0]);
        let (y, stats) = tape
            .batch_norm(x, gamma, beta, &rm, &rv, Mode::Train, 0.0)
            .unwrap();
        assert!(stats.is_some());
        let out = tape.value(y);
        let m = 4 * 3 * 3;
        for ch in 0..2 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for n in 0..4 {
                for h in 0..3 {
                    for w in 0..3 {
                        mean += out.get(n, ch, h, w);
                    }
                }
            }
            mean /= m as f64;
            for n in 0..4 {
                for h in 0..3 {
                    for w in 0..3 {
                        let d = out.get(n, ch, h, w) - mean;
                        var += d * d;
                    }
                }
            }
            var /= m as f64;
            assert!(mean.abs() <= 1e-6, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-5, "channel {ch} var {var}");
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut tape = Tape::new();
        let shape = Shape::new(1, 1, 1, 3);
        let x = tape.leaf(tensor_of(shape, &[1.0, 2.0, 3.0]), false);
        let gamma = tape.leaf(tensor_of(Shape::new(1, 1, 1, 1), &[2.0]), false);
        let beta = tape.leaf(tensor_of(Shape::new(1, 1, 1, 1), &[0.5]), false);
        let rm = tensor_of(Shape::new(1, 1, 1, 1), &[2.0]);
        let rv = tensor_of(Shape::new(1, 1, 1, 1), &[4.0]);
        let (y, stats) = tape
            .batch_norm(x, gamma, beta, &rm, &rv, Mode::Eval, 0.0)
            .unwrap();
        assert!(stats.is_none());
        let out = tape.value(y).data().to_vec();
        // (x - 2) / 2 * 2 + 0.5
        assert!((out[0] - (-0.5)).abs() < 1e-12);
        assert!((out[1] - 0.5).abs() < 1e-12);
        assert!((out[2] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn drop_connect_eval_is_identity_var() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor_of(Shape::new(2, 1, 1, 2), &[1.0, 2.0, 3.0, 4.0]), false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = tape.drop_connect(x, 0.8, Mode::Eval, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn drop_connect_train_matches_bernoulli_statistics() {
        // 10_000 samples, survival 0.8: kept fraction within 0.8 +/- 0.02
        // and survivors scaled by exactly 1/0.8.
        let n = 10_000;
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(Shape::new(n, 1, 1, 1), vec![1.0; n]).unwrap(),
            false,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let y = tape.drop_connect(x, 0.8, Mode::Train, &mut rng).unwrap();
        let out = tape.value(y).data();
        let mut kept = 0usize;
        for &v in out {
            if v != 0.0 {
                kept += 1;
                assert_eq!(v, 1.0 / 0.8);
            }
        }
        let frac = kept as f64 / n as f64;
        assert!((frac - 0.8).abs() <= 0.02, "kept fraction {frac}");
    }

    #[test]
    fn drop_connect_rejects_bad_probability() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0), false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(tape.drop_connect(x, 0.0, Mode::Train, &mut rng).is_err());
        assert!(tape.drop_connect(x, 1.5, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn global_avg_pool_of_constant_is_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(Shape::new(1, 2, 4, 4), vec![3.25; 32]).unwrap(),
            false,
        );
        let y = tape.global_avg_pool(x);
        assert_eq!(tape.value(y).shape(), Shape::new(1, 2, 1, 1));
        assert_eq!(tape.value(y).data(), &[3.25, 3.25]);
    }

    #[test]
    fn concat_channels_layout_and_backward_split() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor_of(Shape::new(2, 1, 1, 2), &[1.0, 2.0, 3.0, 4.0]), true);
        let b = tape.leaf(
            tensor_of(Shape::new(2, 2, 1, 2), &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]),
            true,
        );
        let y = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(y).shape(), Shape::new(2, 3, 1, 2));
        // Sample 0 channels: [1 2 | 5 6 | 7 8], sample 1: [3 4 | 9 10 | 11 12].
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let s = tape.sum(y);
        let loss = tape.scale(s, 2.0);
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take(a).unwrap(), vec![2.0; 4]);
        assert_eq!(grads.take(b).unwrap(), vec![2.0; 8]);
    }

    #[test]
    fn mul_broadcast_matches_manual_expansion() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            tensor_of(Shape::new(1, 2, 2, 2), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]),
            true,
        );
        let gate = tape.leaf(tensor_of(Shape::new(1, 2, 1, 1), &[2.0, -1.0]), true);
        let y = tape.mul(x, gate).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[2.0, 4.0, 6.0, 8.0, -5.0, -6.0, -7.0, -8.0]
        );
        let loss = tape.sum(y);
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take(x).unwrap(), vec![2.0, 2.0, 2.0, 2.0, -1.0, -1.0, -1.0, -1.0]);
        // d/dgate = sum of x over each channel plane.
        assert_eq!(grads.take(gate).unwrap(), vec![10.0, 26.0]);
    }

    #[test]
    fn conv2d_identity_kernel_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, h, w| (h * 4 + w) as f64),
            false,
        );
        let w = tape.leaf(tensor_of(Shape::new(1, 1, 1, 1), &[1.0]), false);
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 3, 4, 4)), false);
        let w = tape.leaf(Tensor::zeros(Shape::new(8, 2, 3, 3)), false);
        assert!(matches!(tape.conv2d(x, w, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn fully_connected_known_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor_of(Shape::new(1, 2, 1, 1), &[1.0, 2.0]), false);
        let w = tape.leaf(tensor_of(Shape::new(3, 2, 1, 1), &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]), false);
        let b = tape.leaf(tensor_of(Shape::new(1, 3, 1, 1), &[0.0, 0.5, -1.0]), false);
        let y = tape.fully_connected(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.5, 2.0]);
    }

    #[test]
    fn squeeze_excitation_gates_channels() {
        // With zero SE weights the gate is sigmoid(0) = 0.5 everywhere, so
        // the block halves its input.
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_fn(Shape::new(2, 3, 2, 2), |n, c, h, w| {
                (n * 100 + c * 10 + h * 2 + w) as f64
            }),
            false,
        );
        let w1 = tape.leaf(Tensor::zeros(Shape::new(2, 3, 1, 1)), false);
        let b1 = tape.leaf(Tensor::zeros(Shape::new(1, 2, 1, 1)), false);
        let w2 = tape.leaf(Tensor::zeros(Shape::new(3, 2, 1, 1)), false);
        let b2 = tape.leaf(Tensor::zeros(Shape::new(1, 3, 1, 1)), false);
        let y = tape.squeeze_excitation(x, w1, b1, w2, b2).unwrap();
        let xin = tape.value(x).data().to_vec();
        let out = tape.value(y).data();
        for (o, i) in out.iter().zip(&xin) {
            assert!((o - 0.5 * i).abs() < 1e-15);
        }
    }
}
