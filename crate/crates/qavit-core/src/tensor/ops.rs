//! Differentiable operations. Each op validates shapes, computes the
//! forward value, and records a backward rule that accumulates into its
//! parents' gradient buffers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::{debug_check_finite, first_non_finite, Element, Tensor};
use crate::error::{Error, Result};

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl<T: Element> Tensor<T> {
    /// Standard matrix product `[m×k]·[k×n] -> [m×n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims disagree: {}x{} vs {}x{}", m, k, k2, n)));
        }
        let out = kernels::matmul_nn(&self.data(), &rhs.data(), m, k, n);
        debug_check_finite("matmul", &out)?;
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(vec![m, n], out, vec![a.clone(), b.clone()], move |g, _| {
            if a.requires_grad() {
                let da = kernels::matmul_nt(g, &b.data(), m, n, k);
                a.accum_grad(&da);
            }
            if b.requires_grad() {
                let db = kernels::matmul_tn(&a.data(), g, m, k, n);
                b.accum_grad(&db);
            }
        }))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2("transpose")?;
        let x = self.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        drop(x);
        let p = self.clone();
        Ok(Tensor::from_op(vec![n, m], out, vec![p.clone()], move |g, _| {
            p.accum_grad_with(|buf| {
                for j in 0..n {
                    for i in 0..m {
                        buf[i * n + j] = buf[i * n + j] + g[j * m + i];
                    }
                }
            });
        }))
    }

    /// Elementwise sum of two identically shaped tensors.
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != rhs.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(), rhs.shape())));
        }
        let out: Vec<T> = self.data().iter().zip(rhs.data().iter()).map(|(&a, &b)| a + b).collect();
        debug_check_finite("add", &out)?;
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![a.clone(), b.clone()], move |g, _| {
            a.accum_grad(g);
            b.accum_grad(g);
        }))
    }

    /// Broadcast-add a length-`n` bias row to every row of `[m×n]`.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = self.dims2("add_bias")?;
        if bias.shape() != [n] {
            return Err(shape_err("add_bias", format!("bias {:?} vs row width {}", bias.shape(), n)));
        }
        let bv = bias.to_vec();
        let out: Vec<T> = self
            .data()
            .chunks_exact(n.max(1))
            .flat_map(|row| row.iter().zip(&bv).map(|(&x, &b)| x + b).collect::<Vec<_>>())
            .collect();
        let out = if m == 0 { Vec::new() } else { out };
        debug_check_finite("add_bias", &out)?;
        let (x, b) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(vec![m, n], out, vec![x.clone(), b.clone()], move |g, _| {
            x.accum_grad(g);
            b.accum_grad_with(|buf| {
                for row in g.chunks_exact(n) {
                    for (bv, &gv) in buf.iter_mut().zip(row) {
                        *bv = *bv + gv;
                    }
                }
            });
        }))
    }

    /// Hadamard product.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != rhs.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", self.shape(), rhs.shape())));
        }
        let out: Vec<T> = self.data().iter().zip(rhs.data().iter()).map(|(&a, &b)| a * b).collect();
        debug_check_finite("mul", &out)?;
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![a.clone(), b.clone()], move |g, _| {
            if a.requires_grad() {
                let bd = b.data();
                let da: Vec<T> = g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv * bv).collect();
                drop(bd);
                a.accum_grad(&da);
            }
            if b.requires_grad() {
                let ad = a.data();
                let db: Vec<T> = g.iter().zip(ad.iter()).map(|(&gv, &av)| gv * av).collect();
                drop(ad);
                b.accum_grad(&db);
            }
        }))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::from_f64(c);
        let out: Vec<T> = self.data().iter().map(|&x| x * c).collect();
        debug_check_finite("scale", &out)?;
        let p = self.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![p.clone()], move |g, _| {
            p.accum_grad_with(|buf| {
                for (bv, &gv) in buf.iter_mut().zip(g) {
                    *bv = *bv + gv * c;
                }
            });
        }))
    }

    /// Multiply every element by a rank-0 tensor (differentiable in both).
    pub fn mul_scalar(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        if s.numel() != 1 {
            return Err(shape_err("mul_scalar", format!("scale must be scalar, got {:?}", s.shape())));
        }
        let sv = s.item();
        let out: Vec<T> = self.data().iter().map(|&x| x * sv).collect();
        debug_check_finite("mul_scalar", &out)?;
        let (x, sc) = (self.clone(), s.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![x.clone(), sc.clone()], move |g, _| {
            if x.requires_grad() {
                let dx: Vec<T> = g.iter().map(|&gv| gv * sv).collect();
                x.accum_grad(&dx);
            }
            if sc.requires_grad() {
                let xd = x.data();
                let mut acc = T::zero();
                for (&gv, &xv) in g.iter().zip(xd.iter()) {
                    acc = acc + gv * xv;
                }
                drop(xd);
                sc.accum_grad(&[acc]);
            }
        }))
    }

    /// Elementwise hyperbolic tangent; the gate nonlinearity on rank-0 tensors.
    pub fn tanh(&self) -> Result<Tensor<T>> {
        let out: Vec<T> = self.data().iter().map(|&x| x.tanh()).collect();
        debug_check_finite("tanh", &out)?;
        let p = self.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![p.clone()], move |g, y| {
            p.accum_grad_with(|buf| {
                for ((bv, &gv), &yv) in buf.iter_mut().zip(g).zip(y) {
                    *bv = *bv + gv * (T::one() - yv * yv);
                }
            });
        }))
    }

    /// GELU with the tanh approximation. The inner tanh values are saved
    /// for the backward pass.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
        let k = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let n = self.numel();
        let mut out = vec![T::zero(); n];
        let mut tanh_u = vec![T::zero(); n];
        {
            let x = self.data();
            let xs: &[T] = &x;
            for ((o, t_slot), &xv) in out.iter_mut().zip(tanh_u.iter_mut()).zip(xs) {
                let u = c * (xv + k * xv * xv * xv);
                let t = u.tanh_bulk();
                *t_slot = t;
                *o = half * xv * (T::one() + t);
            }
        }
        debug_check_finite("gelu", &out)?;
        let p = self.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![p.clone()], move |g, _| {
            let xd = p.to_vec();
            p.accum_grad_with(|buf| {
                for i in 0..buf.len() {
                    let x = xd[i];
                    let t = tanh_u[i];
                    let sech2 = T::one() - t * t;
                    let du = c * (T::one() + T::from_f64(3.0) * k * x * x);
                    let d = half * (T::one() + t) + half * x * sech2 * du;
                    buf[i] = buf[i] + g[i] * d;
                }
            });
        }))
    }

    /// Row-wise softmax with per-row max subtraction. Raises a numeric
    /// fault on non-finite input in every build profile.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let (m, n) = self.dims2("softmax_rows")?;
        if n == 0 {
            return Err(shape_err("softmax_rows", "rows must be non-empty".into()));
        }
        let x = self.data();
        if let Some(index) = first_non_finite(&x) {
            return Err(Error::NumericFault { op: "softmax_rows", index });
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                let e = (v - mx).exp();
                *o = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for o in orow.iter_mut() {
                *o = *o * inv;
            }
        }
        drop(x);
        let p = self.clone();
        Ok(Tensor::from_op(vec![m, n], out, vec![p.clone()], move |g, y| {
            p.accum_grad_with(|buf| {
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    let yr = &y[i * n..(i + 1) * n];
                    let mut dot = T::zero();
                    for (&gv, &yv) in gr.iter().zip(yr) {
                        dot = dot + gv * yv;
                    }
                    let br = &mut buf[i * n..(i + 1) * n];
                    for ((bv, &gv), &yv) in br.iter_mut().zip(gr).zip(yr) {
                        *bv = *bv + yv * (gv - dot);
                    }
                }
            });
        }))
    }

    /// Per-row layer normalization with affine parameters.
    pub fn layernorm(&self, gamma: &Tensor<T>, beta_shift: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let (m, n) = self.dims2("layernorm")?;
        if gamma.shape() != [n] || beta_shift.shape() != [n] {
            return Err(shape_err(
                "layernorm",
                format!("gamma {:?} / beta {:?} vs width {}", gamma.shape(), beta_shift.shape(), n),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::OutOfRange { op: "layernorm", detail: format!("eps must be positive, got {}", eps) });
        }
        let x = self.data();
        if let Some(index) = first_non_finite(&x) {
            return Err(Error::NumericFault { op: "layernorm", index });
        }
        let eps = T::from_f64(eps);
        let gv = gamma.to_vec();
        let bv = beta_shift.to_vec();
        let inv_n = T::one() / T::from_f64(n as f64);
        let mut out = vec![T::zero(); m * n];
        let mut x_hat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_n;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let xh = (row[j] - mean) * inv;
                x_hat[i * n + j] = xh;
                out[i * n + j] = xh * gv[j] + bv[j];
            }
        }
        drop(x);
        let (xt, gt, bt) = (self.clone(), gamma.clone(), beta_shift.clone());
        Ok(Tensor::from_op(vec![m, n], out, vec![xt.clone(), gt.clone(), bt.clone()], move |g, _| {
            gt.accum_grad_with(|buf| {
                for i in 0..m {
                    for j in 0..n {
                        buf[j] = buf[j] + g[i * n + j] * x_hat[i * n + j];
                    }
                }
            });
            bt.accum_grad_with(|buf| {
                for row in g.chunks_exact(n) {
                    for (b, &gvv) in buf.iter_mut().zip(row) {
                        *b = *b + gvv;
                    }
                }
            });
            if xt.requires_grad() {
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    let xh = &x_hat[i * n..(i + 1) * n];
                    let mut mean_h = T::zero();
                    let mut mean_hx = T::zero();
                    let mut h = vec![T::zero(); n];
                    for j in 0..n {
                        h[j] = gr[j] * gv[j];
                        mean_h = mean_h + h[j];
                        mean_hx = mean_hx + h[j] * xh[j];
                    }
                    mean_h = mean_h * inv_n;
                    mean_hx = mean_hx * inv_n;
                    for j in 0..n {
                        dx[i * n + j] = inv_std[i] * (h[j] - mean_h - xh[j] * mean_hx);
                    }
                }
                xt.accum_grad(&dx);
            }
        }))
    }

    /// Stack `self` on top of `rhs` along the row axis.
    pub fn concat_rows(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, c) = self.dims2("concat_rows")?;
        let (k, c2) = rhs.dims2("concat_rows")?;
        if c != c2 {
            return Err(shape_err("concat_rows", format!("column counts differ: {} vs {}", c, c2)));
        }
        let mut out = Vec::with_capacity((m + k) * c);
        out.extend_from_slice(&self.data());
        out.extend_from_slice(&rhs.data());
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(vec![m + k, c], out, vec![a.clone(), b.clone()], move |g, _| {
            a.accum_grad(&g[..m * c]);
            b.accum_grad(&g[m * c..]);
        }))
    }

    /// Copy of rows `start..end`; backward scatters into the slice.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let (m, c) = self.dims2("slice_rows")?;
        if start > end || end > m {
            return Err(Error::OutOfRange {
                op: "slice_rows",
                detail: format!("range {}..{} of {} rows", start, end, m),
            });
        }
        let out = self.data()[start * c..end * c].to_vec();
        let p = self.clone();
        Ok(Tensor::from_op(vec![end - start, c], out, vec![p.clone()], move |g, _| {
            p.accum_grad_with(|buf| {
                for (bv, &gv) in buf[start * c..end * c].iter_mut().zip(g) {
                    *bv = *bv + gv;
                }
            });
        }))
    }

    /// Copy of columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let (m, c) = self.dims2("slice_cols")?;
        if start > end || end > c {
            return Err(Error::OutOfRange {
                op: "slice_cols",
                detail: format!("range {}..{} of {} cols", start, end, c),
            });
        }
        let w = end - start;
        let x = self.data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&x[i * c + start..i * c + end]);
        }
        drop(x);
        let p = self.clone();
        Ok(Tensor::from_op(vec![m, w], out, vec![p.clone()], move |g, _| {
            p.accum_grad_with(|buf| {
                for i in 0..m {
                    for j in 0..w {
                        buf[i * c + start + j] = buf[i * c + start + j] + g[i * w + j];
                    }
                }
            });
        }))
    }

    /// Concatenate tensors with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no parts".into()));
        }
        let (m, _) = parts[0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            let (mi, ci) = p.dims2("concat_cols")?;
            if mi != m {
                return Err(shape_err("concat_cols", format!("row counts differ: {} vs {}", m, mi)));
            }
            widths.push(ci);
            total += ci;
        }
        let mut out = vec![T::zero(); m * total];
        let mut off = 0usize;
        for (p, &w) in parts.iter().zip(&widths) {
            let d = p.data();
            for i in 0..m {
                out[i * total + off..i * total + off + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let owned: Vec<Tensor<T>> = parts.to_vec();
        let widths2 = widths.clone();
        Ok(Tensor::from_op(vec![m, total], out, owned.clone(), move |g, _| {
            let mut off = 0usize;
            for (p, &w) in owned.iter().zip(&widths2) {
                p.accum_grad_with(|buf| {
                    for i in 0..m {
                        for j in 0..w {
                            buf[i * w + j] = buf[i * w + j] + g[i * total + off + j];
                        }
                    }
                });
                off += w;
            }
        }))
    }

    /// Same data, new shape (copies).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", self.shape(), shape)));
        }
        let out = self.to_vec();
        let p = self.clone();
        Ok(Tensor::from_op(shape.to_vec(), out, vec![p.clone()], move |g, _| {
            p.accum_grad(g);
        }))
    }

    /// Mean over rows: `[m×c] -> [1×c]`.
    pub fn mean_pool_rows(&self) -> Result<Tensor<T>> {
        let (m, c) = self.dims2("mean_pool_rows")?;
        if m == 0 {
            return Err(shape_err("mean_pool_rows", "cannot pool zero rows".into()));
        }
        let inv_m = T::one() / T::from_f64(m as f64);
        let x = self.data();
        let mut out = vec![T::zero(); c];
        for row in x.chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv_m;
        }
        drop(x);
        let p = self.clone();
        Ok(Tensor::from_op(vec![1, c], out, vec![p.clone()], move |g, _| {
            p.accum_grad_with(|buf| {
                for row in buf.chunks_exact_mut(c) {
                    for (bv, &gv) in row.iter_mut().zip(g) {
                        *bv = *bv + gv * inv_m;
                    }
                }
            });
        }))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor<T>> {
        let mut acc = T::zero();
        for &v in self.data().iter() {
            acc = acc + v;
        }
        let p = self.clone();
        Ok(Tensor::from_op(vec![], vec![acc], vec![p.clone()], move |g, _| {
            let g0 = g[0];
            p.accum_grad_with(|buf| {
                for bv in buf.iter_mut() {
                    *bv = *bv + g0;
                }
            });
        }))
    }

    /// Inverted dropout: keep with probability `1-p`, scale kept values by
    /// `1/(1-p)`. `p == 0` is the identity.
    pub fn dropout(&self, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::OutOfRange { op: "dropout", detail: format!("p must be in [0,1), got {}", p) });
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = self.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = self.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![t.clone()], move |g, _| {
            let dx: Vec<T> = g.iter().zip(&mask).map(|(&gv, &m)| gv * m).collect();
            t.accum_grad(&dx);
        }))
    }

    /// Gather rows of an embedding-style table; backward scatters into the
    /// used rows only.
    pub fn gather_rows(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let (v, c) = self.dims2("gather_rows")?;
        for &id in ids {
            if id as usize >= v {
                return Err(Error::IdOutOfRange { id, vocab: v });
            }
        }
        let x = self.data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            out.extend_from_slice(&x[id as usize * c..(id as usize + 1) * c]);
        }
        drop(x);
        let ids: Vec<u32> = ids.to_vec();
        let p = self.clone();
        Ok(Tensor::from_op(vec![ids.len(), c], out, vec![p.clone()], move |g, _| {
            p.accum_grad_with(|buf| {
                for (k, &id) in ids.iter().enumerate() {
                    let dst = &mut buf[id as usize * c..(id as usize + 1) * c];
                    for (bv, &gv) in dst.iter_mut().zip(&g[k * c..(k + 1) * c]) {
                        *bv = *bv + gv;
                    }
                }
            });
        }))
    }

    /// Mean cross-entropy of row logits `[b×a]` against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        let (b, a) = self.dims2("cross_entropy")?;
        if labels.len() != b || b == 0 {
            return Err(shape_err("cross_entropy", format!("{} label(s) for {} row(s)", labels.len(), b)));
        }
        for &y in labels {
            if y >= a {
                return Err(Error::OutOfRange { op: "cross_entropy", detail: format!("label {} for {} classes", y, a) });
            }
        }
        let x = self.data();
        let inv_b = T::one() / T::from_f64(b as f64);
        let mut probs = vec![T::zero(); b * a];
        let mut loss = T::zero();
        for i in 0..b {
            let row = &x[i * a..(i + 1) * a];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[i * a + j] = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for j in 0..a {
                probs[i * a + j] = probs[i * a + j] * inv;
            }
            loss = loss + sum.ln() + mx - row[labels[i]];
        }
        loss = loss * inv_b;
        drop(x);
        let labels: Vec<usize> = labels.to_vec();
        let p = self.clone();
        Ok(Tensor::from_op(vec![], vec![loss], vec![p.clone()], move |g, _| {
            let g0 = g[0] * inv_b;
            p.accum_grad_with(|buf| {
                for i in 0..b {
                    for j in 0..a {
                        let mut d = probs[i * a + j];
                        if j == labels[i] {
                            d = d - T::one();
                        }
                        buf[i * a + j] = buf[i * a + j] + g0 * d;
                    }
                }
            });
        }))
    }

    /// Mean binary cross-entropy with logits against multi-hot targets,
    /// averaged over all elements.
    pub fn bce_with_logits(&self, targets: &[T]) -> Result<Tensor<T>> {
        let n = self.numel();
        if targets.len() != n || n == 0 {
            return Err(shape_err("bce_with_logits", format!("{} target(s) for {} logit(s)", targets.len(), n)));
        }
        let x = self.data();
        let inv_n = T::one() / T::from_f64(n as f64);
        let mut loss = T::zero();
        for (&xv, &t) in x.iter().zip(targets) {
            // max(x,0) - x*t + ln(1 + exp(-|x|))
            let pos = if xv > T::zero() { xv } else { T::zero() };
            loss = loss + pos - xv * t + (T::one() + (-xv.abs()).exp()).ln();
        }
        loss = loss * inv_n;
        drop(x);
        let targets: Vec<T> = targets.to_vec();
        let p = self.clone();
        Ok(Tensor::from_op(vec![], vec![loss], vec![p.clone()], move |g, _| {
            let g0 = g[0] * inv_n;
            let xd = p.to_vec();
            p.accum_grad_with(|buf| {
                for ((bv, &xv), &t) in buf.iter_mut().zip(&xd).zip(&targets) {
                    let sig = T::one() / (T::one() + (-xv).exp());
                    *bv = *bv + g0 * (sig - t);
                }
            });
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let a = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_analytic_case() {
        let a = t64(&[1, 2], &[1.0, 2.0]);
        let b = t64(&[2, 1], &[3.0, 4.0]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let a = t64(&[1, 2], &[1.0, 2.0]);
        let b = t64(&[3, 1], &[1.0, 2.0, 3.0]);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_symmetry() {
        let x = t64(&[1, 3], &[0.0, 0.0, 0.0]);
        let y = x.softmax_rows().unwrap().to_vec();
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_saturation() {
        let x = t64(&[1, 2], &[1000.0, 0.0]);
        let y = x.softmax_rows().unwrap().to_vec();
        assert!((y[0] - 1.0).abs() < 1e-9);
        assert!(y[1].abs() < 1e-9);
    }

    #[test]
    fn softmax_analytic_two_to_one() {
        let x = t64(&[1, 2], &[2.0f64.ln(), 1.0f64.ln()]);
        let y = x.softmax_rows().unwrap().to_vec();
        assert!((y[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((y[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = t64(&[1, 2], &[f64::NAN, 0.0]);
        assert!(matches!(x.softmax_rows(), Err(Error::NumericFault { .. })));
    }

    #[test]
    fn layernorm_zero_variance_row() {
        let x = t64(&[1, 3], &[1.0, 1.0, 1.0]);
        let gamma = t64(&[3], &[1.0, 1.0, 1.0]);
        let beta = t64(&[3], &[0.0, 0.0, 0.0]);
        let y = x.layernorm(&gamma, &beta, 1e-5).unwrap().to_vec();
        assert_eq!(y, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn layernorm_unit_variance_analytic() {
        let x = t64(&[1, 2], &[-1.0, 1.0]);
        let gamma = t64(&[2], &[1.0, 1.0]);
        let beta = t64(&[2], &[0.0, 0.0]);
        let y = x.layernorm(&gamma, &beta, 1e-14).unwrap().to_vec();
        assert!((y[0] + 1.0).abs() < 1e-6);
        assert!((y[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tanh_matches_analytic_and_is_odd() {
        let x = Tensor::scalar(0.5f64);
        assert!((x.tanh().unwrap().item() - 0.462117).abs() < 1e-6);
        assert_eq!(Tensor::scalar(0.0f64).tanh().unwrap().item(), 0.0);
        for v in [0.1, 0.7, 1.3, 2.9] {
            let pos = Tensor::scalar(v).tanh().unwrap().item();
            let neg = Tensor::scalar(-v).tanh().unwrap().item();
            assert_eq!(pos, -neg);
        }
    }

    #[test]
    fn concat_and_slice_round_trip_is_bitwise() {
        let a = t64(&[1, 2], &[1.0, 2.0]);
        let b = t64(&[1, 2], &[3.0, 4.0]);
        let cat = a.concat_rows(&b).unwrap();
        assert_eq!(cat.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(cat.slice_rows(0, 1).unwrap().to_vec(), a.to_vec());

        let empty = Tensor::<f64>::zeros(&[0, 2]);
        let same = a.concat_rows(&empty).unwrap();
        assert_eq!(same.to_vec(), a.to_vec());
        assert_eq!(same.shape(), &[1, 2]);
    }

    #[test]
    fn slice_rows_bounds_and_empty() {
        let x = t64(&[3, 1], &[1.0, 2.0, 3.0]);
        assert_eq!(x.slice_rows(0, 2).unwrap().to_vec(), vec![1.0, 2.0]);
        let e = x.slice_rows(1, 1).unwrap();
        assert_eq!(e.shape(), &[0, 1]);
        assert!(x.slice_rows(2, 4).is_err());
    }

    #[test]
    fn slice_grad_scatters_exactly() {
        let x = Tensor::param(&[3, 2], vec![1.0f64; 6]).unwrap();
        let loss = x.slice_rows(1, 2).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_rows_scatters_only_used_rows() {
        let table = Tensor::param(&[4, 2], (0..8).map(|i| i as f64).collect()).unwrap();
        let out = table.gather_rows(&[2, 2, 0]).unwrap();
        assert_eq!(out.to_vec(), vec![4.0, 5.0, 4.0, 5.0, 0.0, 1.0]);
        out.sum().unwrap().backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
        assert!(table.gather_rows(&[4]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let x = t64(&[1, 4], &[0.0; 4]);
        let loss = x.cross_entropy(&[1]).unwrap().item();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_with_logits_matches_naive() {
        let x = t64(&[1, 3], &[0.5, -1.0, 2.0]);
        let t = [1.0, 0.0, 1.0];
        let loss = x.bce_with_logits(&t).unwrap().item();
        let naive: f64 = x
            .to_vec()
            .iter()
            .zip(&t)
            .map(|(&xv, &tv): (&f64, &f64)| {
                let p = 1.0 / (1.0 + (-xv).exp());
                -(tv * p.ln() + (1.0 - tv) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!((loss - naive).abs() < 1e-12);
    }

    #[test]
    fn dropout_zero_p_is_identity() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = x.dropout(0.0, &mut rng).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }
}
