//! Differentiable primitives on [`Var`].

use super::tensor::{gemm, Scalar, Tensor};
use super::var::Var;

fn unary<T: Scalar>(
    x: &Var<T>,
    f: impl Fn(T) -> T,
    // derivative from (input, output)
    df: impl Fn(T, T) -> T + 'static,
) -> Var<T> {
    let out = x.value().map(f);
    Var::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g, out, p| {
            let xv = p[0].data();
            let data = g
                .data()
                .iter()
                .zip(xv)
                .zip(out.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(p[0].shape(), data))]
        }),
    )
}

impl<T: Scalar> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let out = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, p| {
                vec![
                    p[0].requires_grad().then(|| g.clone().reshape(p[0].shape())),
                    p[1].requires_grad().then(|| g.clone().reshape(p[1].shape())),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let out = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, p| {
                vec![
                    p[0].requires_grad().then(|| g.clone().reshape(p[0].shape())),
                    p[1].requires_grad()
                        .then(|| g.map(|v| -v).reshape(p[1].shape())),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let out = self.value().zip_map(other.value(), |a, b| a * b);
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, p| {
                vec![
                    p[0].requires_grad()
                        .then(|| g.zip_map(p[1].value(), |g, b| g * b)),
                    p[1].requires_grad()
                        .then(|| g.zip_map(p[0].value(), |g, a| g * a)),
                ]
            }),
        )
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        let out = self.value().zip_map(other.value(), |a, b| a / b);
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, out, p| {
                vec![
                    p[0].requires_grad()
                        .then(|| g.zip_map(p[1].value(), |g, b| g / b)),
                    p[1].requires_grad().then(|| {
                        let t = g.zip_map(out, |g, y| g * y);
                        t.zip_map(p[1].value(), |t, b| -t / b)
                    }),
                ]
            }),
        )
    }

    pub fn scale(&self, c: T) -> Var<T> {
        let out = self.value().map(|v| v * c);
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.map(|v| v * c))]),
        )
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        let out = self.value().map(|v| v + c);
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.clone())]),
        )
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    /// `1 - x`
    pub fn one_minus(&self) -> Var<T> {
        self.neg().add_scalar(T::one())
    }

    pub fn relu(&self) -> Var<T> {
        unary(
            self,
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Var<T> {
        unary(
            self,
            Scalar::sigmoid,
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(&self) -> Var<T> {
        unary(self, Scalar::fast_tanh, |_, y| T::one() - y * y)
    }

    pub fn square(&self) -> Var<T> {
        unary(self, |v| v * v, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Var<T> {
        unary(
            self,
            |v| v.sqrt(),
            |_, y| {
                if y > T::zero() {
                    T::lit(0.5) / y
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&self) -> Var<T> {
        unary(
            self,
            |v| v.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn recip(&self) -> Var<T> {
        unary(self, |v| T::one() / v, |_, y| -y * y)
    }

    /// Clamp to `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&self, lo: T, hi: T) -> Var<T> {
        unary(
            self,
            move |v| v.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sum(&self) -> Var<T> {
        let out = Tensor::scalar(self.value().sum());
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, _, p| vec![Some(Tensor::full(p[0].shape(), g.item()))]),
        )
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::lit(self.value().len().max(1) as f64);
        self.sum().scale(T::one() / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let out = self.value().clone().reshape(shape);
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, _, p| vec![Some(g.clone().reshape(p[0].shape()))]),
        )
    }

    /// `[R, K] x [K, M] -> [R, M]`, treating leading dimensions as rows.
    pub fn matmul(&self, w: &Var<T>) -> Var<T> {
        let (r, k) = (self.rows(), self.cols());
        assert_eq!(w.shape().len(), 2, "matmul rhs must be 2-D");
        assert_eq!(w.shape()[0], k, "matmul inner dimension");
        let m = w.shape()[1];
        let mut out = vec![T::zero(); r * m];
        gemm(r, k, m, self.data(), false, w.data(), false, &mut out, false);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        Var::from_op(
            Tensor::new(&shape, out),
            vec![self.clone(), w.clone()],
            Box::new(move |g, _, p| {
                let ga = p[0].requires_grad().then(|| {
                    let mut d = vec![T::zero(); r * k];
                    gemm(r, m, k, g.data(), false, p[1].data(), true, &mut d, false);
                    Tensor::new(p[0].shape(), d)
                });
                let gb = p[1].requires_grad().then(|| {
                    let mut d = vec![T::zero(); k * m];
                    gemm(k, r, m, p[0].data(), true, g.data(), false, &mut d, false);
                    Tensor::new(p[1].shape(), d)
                });
                vec![ga, gb]
            }),
        )
    }

    /// Adds a `[C]` vector to every row of a `[.., C]` tensor.
    pub fn add_row(&self, bias: &Var<T>) -> Var<T> {
        let c = self.cols();
        assert_eq!(bias.value().len(), c, "add_row width");
        let mut out = self.value().clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, &b) in row.iter_mut().zip(bias.data()) {
                *o += b;
            }
        }
        Var::from_op(
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _, p| {
                let gb = p[1].requires_grad().then(|| {
                    let mut acc = vec![T::zero(); c];
                    for row in g.data().chunks_exact(c) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::new(p[1].shape(), acc)
                });
                vec![p[0].requires_grad().then(|| g.clone()), gb]
            }),
        )
    }

    /// Multiplies every row of `[R, C]` by the matching entry of `[R, 1]`.
    pub fn mul_col(&self, s: &Var<T>) -> Var<T> {
        let (r, c) = (self.rows(), self.cols());
        assert_eq!(s.value().len(), r, "mul_col height");
        let mut out = self.value().clone();
        for (row, &sv) in out.data_mut().chunks_exact_mut(c).zip(s.data()) {
            row.iter_mut().for_each(|v| *v *= sv);
        }
        Var::from_op(
            out,
            vec![self.clone(), s.clone()],
            Box::new(move |g, _, p| {
                let ga = p[0].requires_grad().then(|| {
                    let mut d = g.clone();
                    for (row, &sv) in d.data_mut().chunks_exact_mut(c).zip(p[1].data()) {
                        row.iter_mut().for_each(|v| *v *= sv);
                    }
                    d
                });
                let gs = p[1].requires_grad().then(|| {
                    let d = g
                        .data()
                        .chunks_exact(c)
                        .zip(p[0].data().chunks_exact(c))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(&a, &b)| a * b).sum())
                        .collect();
                    Tensor::new(p[1].shape(), d)
                });
                vec![ga, gs]
            }),
        )
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_cols(parts: &[&Var<T>]) -> Var<T> {
        assert!(!parts.is_empty());
        let r = parts[0].rows();
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        for p in parts {
            assert_eq!(p.rows(), r, "concat_cols row mismatch");
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        let mut shape = parts[0].shape().to_vec();
        *shape.last_mut().unwrap() = total;
        Var::from_op(
            Tensor::new(&shape, out),
            parts.iter().map(|&p| p.clone()).collect(),
            Box::new(move |g, _, p| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(p.len());
                for (pi, &w) in p.iter().zip(&widths) {
                    if pi.requires_grad() {
                        let mut d = Vec::with_capacity(r * w);
                        for row in g.data().chunks_exact(total) {
                            d.extend_from_slice(&row[offset..offset + w]);
                        }
                        grads.push(Some(Tensor::new(pi.shape(), d)));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        )
    }

    /// Columns `start..start + len` of the last dimension.
    pub fn slice_cols(&self, start: usize, len: usize) -> Var<T> {
        let c = self.cols();
        assert!(start + len <= c, "slice_cols out of range");
        let out: Vec<T> = self
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Var::from_op(
            Tensor::new(&shape, out),
            vec![self.clone()],
            Box::new(move |g, _, p| {
                let mut d = Tensor::zeros(p[0].shape());
                for (drow, grow) in d.data_mut().chunks_exact_mut(c).zip(g.data().chunks_exact(len)) {
                    drow[start..start + len].copy_from_slice(grow);
                }
                vec![Some(d)]
            }),
        )
    }

    /// Stacks 2-D tensors with equal width along rows.
    pub fn concat_rows(parts: &[&Var<T>]) -> Var<T> {
        assert!(!parts.is_empty());
        let c = parts[0].cols();
        let lens: Vec<usize> = parts.iter().map(|p| p.value().len()).collect();
        let mut out = Vec::with_capacity(lens.iter().sum());
        for p in parts {
            assert_eq!(p.cols(), c, "concat_rows width mismatch");
            out.extend_from_slice(p.data());
        }
        let rows = out.len() / c.max(1);
        Var::from_op(
            Tensor::new(&[rows, c], out),
            parts.iter().map(|&p| p.clone()).collect(),
            Box::new(move |g, _, p| {
                let mut offset = 0;
                p.iter()
                    .zip(&lens)
                    .map(|(pi, &n)| {
                        let s = offset;
                        offset += n;
                        pi.requires_grad()
                            .then(|| Tensor::new(pi.shape(), g.data()[s..s + n].to_vec()))
                    })
                    .collect()
            }),
        )
    }

    /// Rows `start..start + len` of a tensor viewed as a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Var<T> {
        let c = self.cols();
        assert!(start + len <= self.rows(), "slice_rows out of range");
        let out = self.data()[start * c..(start + len) * c].to_vec();
        Var::from_op(
            Tensor::new(&[len, c], out),
            vec![self.clone()],
            Box::new(move |g, _, p| {
                let mut d = Tensor::zeros(p[0].shape());
                d.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                vec![Some(d)]
            }),
        )
    }

    /// Unfolds `k×k` neighbourhoods of a `[B, H, W, C]` map into rows of a
    /// `[B·H·W, k·k·C]` matrix, zero padded so the spatial size is preserved.
    /// Column order is `(dy, dx, c)`.
    pub fn im2col(&self, k: usize) -> Var<T> {
        let [b, h, w, c] = dims4(self.shape());
        assert!(k % 2 == 1, "odd kernel sizes only");
        let pad = (k / 2) as isize;
        let kc = k * k * c;
        let src = self.data();
        let mut out = vec![T::zero(); b * h * w * kc];
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let row = ((bi * h + y) * w + x) * kc;
                    for dy in 0..k {
                        let sy = y as isize + dy as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let sx = x as isize + dx as isize - pad;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let s = ((bi * h + sy as usize) * w + sx as usize) * c;
                            let d = row + (dy * k + dx) * c;
                            out[d..d + c].copy_from_slice(&src[s..s + c]);
                        }
                    }
                }
            }
        }
        Var::from_op(
            Tensor::new(&[b * h * w, kc], out),
            vec![self.clone()],
            Box::new(move |g, _, p| {
                let gd = g.data();
                let mut d = vec![T::zero(); b * h * w * c];
                for bi in 0..b {
                    for y in 0..h {
                        for x in 0..w {
                            let row = ((bi * h + y) * w + x) * kc;
                            for dy in 0..k {
                                let sy = y as isize + dy as isize - pad;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for dx in 0..k {
                                    let sx = x as isize + dx as isize - pad;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let s = ((bi * h + sy as usize) * w + sx as usize) * c;
                                    let o = row + (dy * k + dx) * c;
                                    for (dv, &gv) in d[s..s + c].iter_mut().zip(&gd[o..o + c]) {
                                        *dv += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(p[0].shape(), d))]
            }),
        )
    }

    /// Stride-1 "same" convolution of a `[B, H, W, C]` map with a
    /// `[k·k·C, O]` kernel (rows ordered like `im2col`) plus a `[O]` bias.
    ///
    /// The input is zero padded and flattened with row stride `W + k - 1`, so
    /// each kernel offset is a single contiguous matrix product; the padding
    /// columns of the output grid are discarded.
    pub fn conv2d_same(&self, weight: &Var<T>, bias: &Var<T>, k: usize) -> Var<T> {
        let [b, h, w, c] = dims4(self.shape());
        assert!(k % 2 == 1, "odd kernel sizes only");
        assert_eq!(weight.shape(), [k * k * c, bias.value().len()], "conv weight shape");
        let o = bias.value().len();
        let p = k / 2;
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let m = h * wp - 2 * p;
        let mut padded = vec![T::zero(); b * hp * wp * c];
        let src = self.data();
        for bi in 0..b {
            for y in 0..h {
                let s = ((bi * h + y) * w) * c;
                let d = ((bi * hp + y + p) * wp + p) * c;
                padded[d..d + w * c].copy_from_slice(&src[s..s + w * c]);
            }
        }
        let wd = weight.data();
        let mut grid = vec![T::zero(); m * o];
        let mut out = vec![T::zero(); b * h * w * o];
        for bi in 0..b {
            let base = bi * hp * wp;
            for (off, wo) in (0..k * k).map(|i| ((i / k) * wp + i % k, &wd[i * c * o..(i + 1) * c * o])) {
                let a = &padded[(base + off) * c..(base + off + m) * c];
                gemm(m, c, o, a, false, wo, false, &mut grid, off != 0);
            }
            for y in 0..h {
                for x in 0..w {
                    let g = &grid[(y * wp + x) * o..][..o];
                    let dst = &mut out[((bi * h + y) * w + x) * o..][..o];
                    for ((d, &g), &bv) in dst.iter_mut().zip(g).zip(bias.data()) {
                        *d = g + bv;
                    }
                }
            }
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = o;
        Var::from_op(
            Tensor::new(&shape, out),
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g, _, parents| {
                let gd = g.data();
                let wd = parents[1].data();
                let need_x = parents[0].requires_grad();
                let need_w = parents[1].requires_grad();
                let mut dx = need_x.then(|| vec![T::zero(); b * h * w * c]);
                let mut dw = need_w.then(|| vec![T::zero(); k * k * c * o]);
                let mut dpad = vec![T::zero(); if need_x { hp * wp * c } else { 0 }];
                let mut ggrid = vec![T::zero(); m * o];
                for bi in 0..b {
                    for y in 0..h {
                        let s = ((bi * h + y) * w) * o;
                        ggrid[y * wp * o..][..w * o].copy_from_slice(&gd[s..s + w * o]);
                    }
                    let base = bi * hp * wp;
                    if need_x {
                        dpad.iter_mut().for_each(|v| *v = T::zero());
                    }
                    for i in 0..k * k {
                        let off = (i / k) * wp + i % k;
                        if let Some(dw) = dw.as_mut() {
                            let a = &padded[(base + off) * c..(base + off + m) * c];
                            gemm(c, m, o, a, true, &ggrid, false, &mut dw[i * c * o..(i + 1) * c * o], true);
                        }
                        if need_x {
                            let wo = &wd[i * c * o..(i + 1) * c * o];
                            gemm(m, o, c, &ggrid, false, wo, true, &mut dpad[off * c..(off + m) * c], true);
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        for y in 0..h {
                            let d = ((bi * h + y) * w) * c;
                            let s = ((y + p) * wp + p) * c;
                            dx[d..d + w * c].copy_from_slice(&dpad[s..s + w * c]);
                        }
                    }
                }
                let db = parents[2].requires_grad().then(|| {
                    let mut acc = vec![T::zero(); o];
                    for row in gd.chunks_exact(o) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::new(&[o], acc)
                });
                vec![
                    dx.map(|d| Tensor::new(parents[0].shape(), d)),
                    dw.map(|d| Tensor::new(parents[1].shape(), d)),
                    db,
                ]
            }),
        )
    }

    /// LSTM gate nonlinearities. `self` holds the `[N, 4n]` pre-activations
    /// ordered (input, forget, cell, output); `cell` is the `[N, n]` previous
    /// cell state. Returns `[N, 2n]` = `[h', c']`.
    pub fn lstm_gates(&self, cell: &Var<T>) -> Var<T> {
        let n = cell.cols();
        let rows = self.rows();
        assert_eq!(self.cols(), 4 * n, "lstm gate width");
        assert_eq!(rows, cell.rows(), "lstm rows");
        // Activated gates, kept for the backward pass.
        let mut act = self.value().clone().into_data();
        for z in act.chunks_exact_mut(4 * n) {
            let (ifg, o) = z.split_at_mut(3 * n);
            let (i_f, g) = ifg.split_at_mut(2 * n);
            i_f.iter_mut().chain(o.iter_mut()).for_each(|v| *v = v.sigmoid());
            g.iter_mut().for_each(|v| *v = v.fast_tanh());
        }
        let mut out = vec![T::zero(); rows * 2 * n];
        let mut tc = vec![T::zero(); rows * n];
        for (((a, c), o), t) in act
            .chunks_exact(4 * n)
            .zip(cell.data().chunks_exact(n))
            .zip(out.chunks_exact_mut(2 * n))
            .zip(tc.chunks_exact_mut(n))
        {
            let (h2, c2) = o.split_at_mut(n);
            for j in 0..n {
                c2[j] = a[n + j] * c[j] + a[j] * a[2 * n + j];
            }
            for j in 0..n {
                t[j] = c2[j].fast_tanh();
            }
            for j in 0..n {
                h2[j] = a[3 * n + j] * t[j];
            }
        }
        Var::from_op(
            Tensor::new(&[rows, 2 * n], out),
            vec![self.clone(), cell.clone()],
            Box::new(move |grad, _, p| {
                let one = T::one();
                let mut dz = vec![T::zero(); rows * 4 * n];
                let mut dc = vec![T::zero(); rows * n];
                for ((((a, c), t), g), (d, dcr)) in act
                    .chunks_exact(4 * n)
                    .zip(p[1].data().chunks_exact(n))
                    .zip(tc.chunks_exact(n))
                    .zip(grad.data().chunks_exact(2 * n))
                    .zip(dz.chunks_exact_mut(4 * n).zip(dc.chunks_exact_mut(n)))
                {
                    let (i, f, gg, o) = (&a[..n], &a[n..2 * n], &a[2 * n..3 * n], &a[3 * n..]);
                    let (gh, gc) = g.split_at(n);
                    for j in 0..n {
                        let dc2 = gc[j] + gh[j] * o[j] * (one - t[j] * t[j]);
                        d[j] = dc2 * gg[j] * i[j] * (one - i[j]);
                        d[n + j] = dc2 * c[j] * f[j] * (one - f[j]);
                        d[2 * n + j] = dc2 * i[j] * (one - gg[j] * gg[j]);
                        d[3 * n + j] = gh[j] * t[j] * o[j] * (one - o[j]);
                        dcr[j] = dc2 * f[j];
                    }
                }
                vec![
                    Some(Tensor::new(p[0].shape(), dz)),
                    p[1].requires_grad().then(|| Tensor::new(p[1].shape(), dc)),
                ]
            }),
        )
    }

    /// Weighted mean and spread of equally shaped `[N, C]` samples with scalar
    /// weights: returns `[N, 2C]` = `[Σ b_i s_i, Σ b_i (s_i − μ)²]`.
    pub fn weighted_moments(samples: &[Var<T>], weights: &[f64]) -> Var<T> {
        assert_eq!(samples.len(), weights.len(), "one weight per sample");
        assert!(!samples.is_empty(), "no samples");
        let (rows, c) = (samples[0].rows(), samples[0].cols());
        assert!(samples.iter().all(|s| s.rows() == rows && s.cols() == c), "sample shapes differ");
        let b: Vec<T> = weights.iter().map(|&w| T::lit(w)).collect();
        let mut out = vec![T::zero(); rows * 2 * c];
        for r in 0..rows {
            let o = &mut out[r * 2 * c..][..2 * c];
            for (s, &bi) in samples.iter().zip(&b) {
                for (m, &v) in o[..c].iter_mut().zip(&s.data()[r * c..][..c]) {
                    *m += bi * v;
                }
            }
            let (mu, var) = o.split_at_mut(c);
            for (s, &bi) in samples.iter().zip(&b) {
                for ((v, &x), &m) in var.iter_mut().zip(&s.data()[r * c..][..c]).zip(mu.iter()) {
                    *v += bi * (x - m) * (x - m);
                }
            }
        }
        let bsum: T = b.iter().copied().sum();
        Var::from_op(
            Tensor::new(&[rows, 2 * c], out),
            samples.to_vec(),
            Box::new(move |grad, out, p| {
                let two = T::lit(2.0);
                p.iter()
                    .zip(&b)
                    .map(|(s, &bi)| {
                        s.requires_grad().then(|| {
                            let mut d = vec![T::zero(); rows * c];
                            for r in 0..rows {
                                let o = &out.data()[r * 2 * c..][..2 * c];
                                let g = &grad.data()[r * 2 * c..][..2 * c];
                                let x = &s.data()[r * c..][..c];
                                for j in 0..c {
                                    let mu = o[j];
                                    let spread = x[j] - mu - mu * (T::one() - bsum);
                                    d[r * c + j] = bi * (g[j] + two * g[c + j] * spread);
                                }
                            }
                            Tensor::new(s.shape(), d)
                        })
                    })
                    .collect()
            }),
        )
    }

    /// 2×2 average pooling of a `[B, H, W, C]` map (H and W even).
    pub fn avg_pool2(&self) -> Var<T> {
        let [b, h, w, c] = dims4(self.shape());
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sizes");
        let (h2, w2) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let src = self.data();
        let mut out = vec![T::zero(); b * h2 * w2 * c];
        for bi in 0..b {
            for y in 0..h2 {
                for x in 0..w2 {
                    let o = ((bi * h2 + y) * w2 + x) * c;
                    for (sy, sx) in [(2 * y, 2 * x), (2 * y, 2 * x + 1), (2 * y + 1, 2 * x), (2 * y + 1, 2 * x + 1)] {
                        let s = ((bi * h + sy) * w + sx) * c;
                        for ch in 0..c {
                            out[o + ch] += src[s + ch] * quarter;
                        }
                    }
                }
            }
        }
        Var::from_op(
            Tensor::new(&[b, h2, w2, c], out),
            vec![self.clone()],
            Box::new(move |g, _, p| {
                let gd = g.data();
                let mut d = vec![T::zero(); b * h * w * c];
                for bi in 0..b {
                    for y in 0..h2 {
                        for x in 0..w2 {
                            let o = ((bi * h2 + y) * w2 + x) * c;
                            for (sy, sx) in [(2 * y, 2 * x), (2 * y, 2 * x + 1), (2 * y + 1, 2 * x), (2 * y + 1, 2 * x + 1)] {
                                let s = ((bi * h + sy) * w + sx) * c;
                                for ch in 0..c {
                                    d[s + ch] += gd[o + ch] * quarter;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(p[0].shape(), d))]
            }),
        )
    }

    /// Nearest-neighbour 2× upsampling of a `[B, H, W, C]` map.
    pub fn upsample_nearest2(&self) -> Var<T> {
        let [b, h, w, c] = dims4(self.shape());
        let (h2, w2) = (h * 2, w * 2);
        let src = self.data();
        let mut out = vec![T::zero(); b * h2 * w2 * c];
        for bi in 0..b {
            for y in 0..h2 {
                for x in 0..w2 {
                    let s = ((bi * h + y / 2) * w + x / 2) * c;
                    let o = ((bi * h2 + y) * w2 + x) * c;
                    out[o..o + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        Var::from_op(
            Tensor::new(&[b, h2, w2, c], out),
            vec![self.clone()],
            Box::new(move |g, _, p| {
                let gd = g.data();
                let mut d = vec![T::zero(); b * h * w * c];
                for bi in 0..b {
                    for y in 0..h2 {
                        for x in 0..w2 {
                            let s = ((bi * h + y / 2) * w + x / 2) * c;
                            let o = ((bi * h2 + y) * w2 + x) * c;
                            for ch in 0..c {
                                d[s + ch] += gd[o + ch];
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(p[0].shape(), d))]
            }),
        )
    }
}

pub(crate) fn dims4(shape: &[usize]) -> [usize; 4] {
    match *shape {
        [b, h, w, c] => [b, h, w, c],
        [h, w, c] => [1, h, w, c],
        _ => panic!("expected a [B, H, W, C] or [H, W, C] tensor, got {shape:?}"),
    }
}
