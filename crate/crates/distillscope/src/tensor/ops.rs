//! Differentiable tensor operations.

use std::rc::Rc;

use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// (outer, axis_len, inner) decomposition around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Scalar> Tensor<F> {
    // ---- binary elementwise ----

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.zip_with("add", other, |a, b| a + b, |_, _| (F::one(), F::one()))
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.zip_with(
            "sub",
            other,
            |a, b| a - b,
            |_, _| (F::one(), -F::one()),
        )
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.zip_with("mul", other, |a, b| a * b, |a, b| (b, a))
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &Tensor<F>,
        f: impl Fn(F, F) -> F,
        df: impl Fn(F, F) -> (F, F) + 'static,
    ) -> Result<Tensor<F>> {
        let shape = self.shape();
        if shape != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: shape,
                rhs: other.shape(),
            });
        }
        let out: Vec<F> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let a = self.clone();
        let b = other.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |dout| {
                let (da, db): (Vec<F>, Vec<F>) = {
                    let ad = a.data();
                    let bd = b.data();
                    dout.iter()
                        .zip(ad.iter().zip(bd.iter()))
                        .map(|(&d, (&x, &y))| {
                            let (gx, gy) = df(x, y);
                            (d * gx, d * gy)
                        })
                        .unzip()
                };
                a.accumulate_grad(&da);
                b.accumulate_grad(&db);
            }),
        ))
    }

    /// Adds a vector to every row: self is `[..., m]`, v is `[m]`.
    pub fn add_broadcast(&self, v: &Tensor<F>) -> Result<Tensor<F>> {
        let shape = self.shape();
        let m = *shape.last().ok_or(Error::ShapeMismatch {
            op: "add_broadcast",
            lhs: shape.clone(),
            rhs: v.shape(),
        })?;
        if v.shape() != [m] {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast",
                lhs: shape,
                rhs: v.shape(),
            });
        }
        let out: Vec<F> = {
            let a = self.data();
            let vd = v.data();
            a.chunks(m)
                .flat_map(|row| row.iter().zip(vd.iter()).map(|(&x, &y)| x + y))
                .collect()
        };
        let a = self.clone();
        let vt = v.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), v.clone()],
            Box::new(move |dout| {
                a.accumulate_grad(dout);
                let mut dv = vec![F::zero(); m];
                for row in dout.chunks(m) {
                    for (d, &g) in dv.iter_mut().zip(row) {
                        *d = *d + g;
                    }
                }
                vt.accumulate_grad(&dv);
            }),
        ))
    }

    /// Multiplies every element by a scalar tensor `s` of shape `[1]`.
    pub fn mul_scalar_tensor(&self, s: &Tensor<F>) -> Result<Tensor<F>> {
        if s.shape() != [1] {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar_tensor",
                lhs: self.shape(),
                rhs: s.shape(),
            });
        }
        let sv = s.item();
        let out: Vec<F> = self.data().iter().map(|&x| x * sv).collect();
        let a = self.clone();
        let st = s.clone();
        Ok(Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone(), s.clone()],
            Box::new(move |dout| {
                let sv = st.item();
                let (da, ds): (Vec<F>, F) = {
                    let ad = a.data();
                    let da: Vec<F> = dout.iter().map(|&d| d * sv).collect();
                    let ds = dout
                        .iter()
                        .zip(ad.iter())
                        .fold(F::zero(), |acc, (&d, &x)| acc + d * x);
                    (da, ds)
                };
                a.accumulate_grad(&da);
                st.accumulate_grad(&[ds]);
            }),
        ))
    }

    // ---- scalar constants ----

    pub fn scale(&self, c: f64) -> Tensor<F> {
        let cf = F::c(c);
        let out: Vec<F> = self.data().iter().map(|&x| x * cf).collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |dout| {
                let da: Vec<F> = dout.iter().map(|&d| d * cf).collect();
                a.accumulate_grad(&da);
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<F> {
        let cf = F::c(c);
        let out: Vec<F> = self.data().iter().map(|&x| x + cf).collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |dout| a.accumulate_grad(dout)),
        )
    }

    pub fn neg(&self) -> Tensor<F> {
        self.scale(-1.0)
    }

    // ---- unary elementwise ----

    fn unary(
        &self,
        f: impl Fn(F) -> F,
        // df(x, y) where y = f(x)
        df: impl Fn(F, F) -> F + 'static,
    ) -> Tensor<F> {
        let out: Vec<F> = self.data().iter().map(|&x| f(x)).collect();
        let a = self.clone();
        let saved = out.clone();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |dout| {
                let da: Vec<F> = {
                    let ad = a.data();
                    dout.iter()
                        .zip(ad.iter().zip(saved.iter()))
                        .map(|(&d, (&x, &y))| d * df(x, y))
                        .collect()
                };
                a.accumulate_grad(&da);
            }),
        )
    }

    /// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3))).
    pub fn gelu(&self) -> Tensor<F> {
        let k = F::c((2.0 / std::f64::consts::PI).sqrt());
        let c3 = F::c(0.044715);
        let half = F::c(0.5);
        let one = F::one();
        let three = F::c(3.0);
        self.unary(
            move |x| {
                let u = k * (x + c3 * x * x * x);
                half * x * (one + u.tanh())
            },
            move |x, _| {
                let u = k * (x + c3 * x * x * x);
                let t = u.tanh();
                let sech2 = one - t * t;
                half * (one + t) + half * x * sech2 * k * (one + three * c3 * x * x)
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        let one = F::one();
        self.unary(
            move |x| one / (one + (-x).exp()),
            move |_, y| y * (one - y),
        )
    }

    pub fn exp(&self) -> Tensor<F> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Result<Tensor<F>> {
        if self.data().iter().any(|&x| x <= F::zero()) {
            return Err(Error::Domain {
                op: "ln",
                msg: "input must be strictly positive".into(),
            });
        }
        Ok(self.unary(|x| x.ln(), |x, _| F::one() / x))
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor<F> {
        let total = self.data().iter().fold(F::zero(), |acc, &x| acc + x);
        let n = self.len();
        let a = self.clone();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |dout| {
                a.accumulate_grad(&vec![dout[0]; n]);
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = self.len();
        self.sum_all().scale(1.0 / n as f64)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<F>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { axis, shape });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![F::zero(); outer * inner];
        {
            let d = self.data();
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        out[o * inner + i] = out[o * inner + i] + d[base + i];
                    }
                }
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let a = self.clone();
        let total = numel(&shape);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |dout| {
                let mut da = vec![F::zero(); total];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            da[base + i] = dout[o * inner + i];
                        }
                    }
                }
                a.accumulate_grad(&da);
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<F>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::InvalidAxis {
                axis,
                shape: self.shape(),
            })?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    // ---- softmax family ----

    /// Softmax along `axis` with max subtraction for overflow safety.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<F>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { axis, shape });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![F::zero(); numel(&shape)];
        {
            let d = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mut max = d[at(0)];
                    for l in 1..len {
                        if d[at(l)] > max {
                            max = d[at(l)];
                        }
                    }
                    let mut sum = F::zero();
                    for l in 0..len {
                        let e = (d[at(l)] - max).exp();
                        out[at(l)] = e;
                        sum = sum + e;
                    }
                    for l in 0..len {
                        out[at(l)] = out[at(l)] / sum;
                    }
                }
            }
        }
        let a = self.clone();
        let saved = out.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |dout| {
                let mut da = vec![F::zero(); saved.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut dot = F::zero();
                        for l in 0..len {
                            dot = dot + saved[at(l)] * dout[at(l)];
                        }
                        for l in 0..len {
                            da[at(l)] = saved[at(l)] * (dout[at(l)] - dot);
                        }
                    }
                }
                a.accumulate_grad(&da);
            }),
        ))
    }

    /// log softmax along `axis` via log-sum-exp.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<F>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { axis, shape });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![F::zero(); numel(&shape)];
        {
            let d = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mut max = d[at(0)];
                    for l in 1..len {
                        if d[at(l)] > max {
                            max = d[at(l)];
                        }
                    }
                    let mut sum = F::zero();
                    for l in 0..len {
                        sum = sum + (d[at(l)] - max).exp();
                    }
                    let lse = max + sum.ln();
                    for l in 0..len {
                        out[at(l)] = d[at(l)] - lse;
                    }
                }
            }
        }
        let a = self.clone();
        let saved = out.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |dout| {
                let mut da = vec![F::zero(); saved.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut total = F::zero();
                        for l in 0..len {
                            total = total + dout[at(l)];
                        }
                        for l in 0..len {
                            da[at(l)] = dout[at(l)] - saved[at(l)].exp() * total;
                        }
                    }
                }
                a.accumulate_grad(&da);
            }),
        ))
    }

    // ---- linear algebra ----

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let ls = self.shape();
        let rs = other.shape();
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ls,
                rhs: rs,
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let mut out = vec![F::zero(); m * n];
        {
            let a = self.data();
            let b = other.data();
            matmul_into(&a, &b, &mut out, m, k, n);
        }
        let at = self.clone();
        let bt = other.clone();
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |dout| {
                let (da, db) = {
                    let a = at.data();
                    let b = bt.data();
                    // dA = dC B^T
                    let mut da = vec![F::zero(); m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = dout[i * n + j];
                            if d != F::zero() {
                                let brow = j;
                                for p in 0..k {
                                    da[i * k + p] = da[i * k + p] + d * b[p * n + brow];
                                }
                            }
                        }
                    }
                    // dB = A^T dC
                    let mut db = vec![F::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = a[i * k + p];
                            if av != F::zero() {
                                for j in 0..n {
                                    db[p * n + j] = db[p * n + j] + av * dout[i * n + j];
                                }
                            }
                        }
                    }
                    (da, db)
                };
                at.accumulate_grad(&da);
                bt.accumulate_grad(&db);
            }),
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor<F>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (m, n) = (shape[0], shape[1]);
        let mut out = vec![F::zero(); m * n];
        {
            let d = self.data();
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = d[i * n + j];
                }
            }
        }
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |dout| {
                let mut da = vec![F::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = dout[j * m + i];
                    }
                }
                a.accumulate_grad(&da);
            }),
        ))
    }

    // ---- layout ----

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        if numel(shape) != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape.to_vec(),
            });
        }
        let a = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |dout| a.accumulate_grad(dout)),
        ))
    }

    /// Flat-index gather: `out[i] = self[indices[i]]`, reshaped to `out_shape`.
    pub fn gather(&self, indices: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Tensor<F>> {
        if numel(out_shape) != indices.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: vec![indices.len()],
                rhs: out_shape.to_vec(),
            });
        }
        let n = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                limit: n,
            });
        }
        let out: Vec<F> = {
            let d = self.data();
            indices.iter().map(|&i| d[i]).collect()
        };
        let a = self.clone();
        let idx = Rc::clone(&indices);
        Ok(Tensor::from_op(
            out_shape.to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |dout| {
                let mut da = vec![F::zero(); n];
                for (&i, &d) in idx.iter().zip(dout) {
                    da[i] = da[i] + d;
                }
                a.accumulate_grad(&da);
            }),
        ))
    }

    /// Slice of length `len` starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<F>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { axis, shape });
        }
        if start + len > shape[axis] {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                limit: shape[axis],
            });
        }
        let (outer, axis_len, inner) = axis_split(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let d = self.data();
            for o in 0..outer {
                for l in start..start + len {
                    let base = (o * axis_len + l) * inner;
                    out.extend_from_slice(&d[base..base + inner]);
                }
            }
        }
        let a = self.clone();
        let total = numel(&shape);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |dout| {
                let mut da = vec![F::zero(); total];
                let mut src = 0;
                for o in 0..outer {
                    for l in start..start + len {
                        let base = (o * axis_len + l) * inner;
                        for i in 0..inner {
                            da[base + i] = dout[src];
                            src += 1;
                        }
                    }
                }
                a.accumulate_grad(&da);
            }),
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor<F>], axis: usize) -> Result<Tensor<F>> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero tensors".into()));
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(Error::InvalidAxis { axis, shape: first });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s,
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        for o in 0..outer {
            for (p, &plen) in parts.iter().zip(&lens) {
                let d = p.data();
                let base = o * plen * inner;
                out.extend_from_slice(&d[base..base + plen * inner]);
            }
        }
        let owned: Vec<Tensor<F>> = parts.to_vec();
        let lens_bw = lens.clone();
        Ok(Tensor::from_op(
            out_shape,
            out,
            parts.to_vec(),
            Box::new(move |dout| {
                let mut src = 0;
                let mut slices: Vec<Vec<F>> = owned
                    .iter()
                    .map(|p| vec![F::zero(); p.len()])
                    .collect();
                let mut cursors = vec![0usize; owned.len()];
                for _o in 0..outer {
                    for (pi, &plen) in lens_bw.iter().enumerate() {
                        let block = plen * inner;
                        slices[pi][cursors[pi]..cursors[pi] + block]
                            .copy_from_slice(&dout[src..src + block]);
                        cursors[pi] += block;
                        src += block;
                    }
                }
                for (p, s) in owned.iter().zip(&slices) {
                    p.accumulate_grad(s);
                }
            }),
        ))
    }

    // ---- normalization ----

    /// Per-row layer normalization over the last axis with learned
    /// scale/shift. `gamma` and `beta` have shape `[d]`.
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
        let shape = self.shape();
        let d = *shape.last().ok_or(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: shape.clone(),
            rhs: gamma.shape(),
        })?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gamma.shape(),
            });
        }
        let rows = self.len() / d;
        let epsf = F::c(eps);
        let mut out = vec![F::zero(); self.len()];
        let mut xhat = vec![F::zero(); self.len()];
        let mut inv_std = vec![F::zero(); rows];
        {
            let x = self.data();
            let g = gamma.data();
            let b = beta.data();
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().fold(F::zero(), |a, &v| a + v) / F::c(d as f64);
                let var = row
                    .iter()
                    .fold(F::zero(), |a, &v| a + (v - mean) * (v - mean))
                    / F::c(d as f64);
                let istd = F::one() / (var + epsf).sqrt();
                inv_std[r] = istd;
                for j in 0..d {
                    let xh = (row[j] - mean) * istd;
                    xhat[r * d + j] = xh;
                    out[r * d + j] = xh * g[j] + b[j];
                }
            }
        }
        let xt = self.clone();
        let gt = gamma.clone();
        let bt = beta.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |dout| {
                let (dx, dg, db) = {
                    let g = gt.data();
                    let mut dx = vec![F::zero(); xhat.len()];
                    let mut dg = vec![F::zero(); d];
                    let mut db = vec![F::zero(); d];
                    let dn = F::c(d as f64);
                    for r in 0..rows {
                        let istd = inv_std[r];
                        let mut sum_dy = F::zero();
                        let mut sum_dy_xhat = F::zero();
                        for j in 0..d {
                            let idx = r * d + j;
                            let dy = dout[idx] * g[j];
                            sum_dy = sum_dy + dy;
                            sum_dy_xhat = sum_dy_xhat + dy * xhat[idx];
                            dg[j] = dg[j] + dout[idx] * xhat[idx];
                            db[j] = db[j] + dout[idx];
                        }
                        for j in 0..d {
                            let idx = r * d + j;
                            let dy = dout[idx] * g[j];
                            dx[idx] =
                                istd * (dy - sum_dy / dn - xhat[idx] * sum_dy_xhat / dn);
                        }
                    }
                    (dx, dg, db)
                };
                xt.accumulate_grad(&dx);
                gt.accumulate_grad(&dg);
                bt.accumulate_grad(&db);
            }),
        ))
    }
}

/// out += a[m,k] * b[k,n] (out assumed zeroed).
pub(crate) fn matmul_into<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av != F::zero() {
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + av * brow[j];
                }
            }
        }
    }
}
