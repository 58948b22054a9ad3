//! Differentiable primitives recorded on a [`Graph`].

use super::{shape_err, Graph, Tensor, TensorError, Var};

/// `c = alpha * a * b + beta * c` with arbitrary strides; `a` is `m x k`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
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
    let span =
        |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(c.len() >= span(m, n, rsc, csc));
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
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

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
    }
}

impl Graph {
    /// `(n x k) . (k x m) -> (n x m)`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, n, k, m) = {
            let (ta, tb) = (self.value(a), self.value(b));
            let (n, k) = matrix_dims("matmul", &ta)?;
            let (k2, m) = matrix_dims("matmul", &tb)?;
            if k != k2 {
                return Err(shape_err(
                    "matmul",
                    format!("{:?} x {:?}", ta.shape(), tb.shape()),
                ));
            }
            let mut out = vec![0.0; n * m];
            gemm(
                n,
                k,
                m,
                ta.data(),
                (k, 1),
                tb.data(),
                (m, 1),
                0.0,
                &mut out,
                (m, 1),
            );
            (
                Tensor {
                    shape: vec![n, m],
                    data: out,
                },
                n,
                k,
                m,
            )
        };
        Ok(self.push_op(value, &[a, b], move |ctx, g, sink| {
            if sink.wants(a) {
                let tb = ctx.value(b).data();
                let ga = sink.buf(a).unwrap();
                gemm(n, m, k, g, (m, 1), tb, (1, m), 1.0, ga, (k, 1));
            }
            if sink.wants(b) {
                let ta = ctx.value(a).data();
                let gb = sink.buf(b).unwrap();
                gemm(k, n, m, ta, (1, k), g, (m, 1), 1.0, gb, (m, 1));
            }
        }))
    }

    /// Elementwise sum. `b` may also match the trailing dimensions of `a`,
    /// in which case it is broadcast over the leading ones.
    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            let sa = ta.shape();
            let sb = tb.shape();
            if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
                return Err(shape_err("add", format!("{sa:?} + {sb:?}")));
            }
            let inner = tb.len();
            let data = if inner == 0 {
                ta.data().to_vec()
            } else {
                ta.data()
                    .chunks(inner)
                    .flat_map(|row| row.iter().zip(tb.data()).map(|(x, y)| x + y))
                    .collect()
            };
            Tensor {
                shape: sa.to_vec(),
                data,
            }
        };
        Ok(self.push_op(value, &[a, b], move |_, g, sink| {
            sink.add(a, g);
            if let Some(gb) = sink.buf(b) {
                let inner = gb.len();
                if inner > 0 {
                    for row in g.chunks(inner) {
                        for (acc, x) in gb.iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                }
            }
        }))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.shape() != tb.shape() {
                return Err(shape_err(
                    "mul",
                    format!("{:?} * {:?}", ta.shape(), tb.shape()),
                ));
            }
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x * y)
                .collect();
            Tensor {
                shape: ta.shape().to_vec(),
                data,
            }
        };
        Ok(self.push_op(value, &[a, b], move |ctx, g, sink| {
            if sink.wants(a) {
                let gb: Vec<f64> = g
                    .iter()
                    .zip(ctx.value(b).data())
                    .map(|(g, y)| g * y)
                    .collect();
                sink.add(a, &gb);
            }
            if sink.wants(b) {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(ctx.value(a).data())
                    .map(|(g, x)| g * x)
                    .collect();
                sink.add(b, &ga);
            }
        }))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let value = {
            let ta = self.value(a);
            Tensor {
                shape: ta.shape().to_vec(),
                data: ta.data().iter().map(|x| x * s).collect(),
            }
        };
        self.push_op(value, &[a], move |_, g, sink| {
            if let Some(buf) = sink.buf(a) {
                for (b, x) in buf.iter_mut().zip(g) {
                    *b += s * x;
                }
            }
        })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push_op(value, &[a], move |_, g, sink| {
            let g0 = g[0];
            if let Some(buf) = sink.buf(a) {
                for b in buf.iter_mut() {
                    *b += g0;
                }
            }
        })
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = {
            let ta = self.value(a);
            Tensor {
                shape: ta.shape().to_vec(),
                data: ta
                    .data()
                    .iter()
                    .map(|&x| if x > 0.0 { x } else { 0.0 })
                    .collect(),
            }
        };
        self.push_op(value, &[a], move |ctx, g, sink| {
            let x = ctx.value(a).data();
            if let Some(buf) = sink.buf(a) {
                for ((b, gi), xi) in buf.iter_mut().zip(g).zip(x) {
                    if *xi > 0.0 {
                        *b += gi;
                    }
                }
            }
        })
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (value, outer, n, inner) = {
            let ta = self.value(a);
            let s = ta.shape();
            if axis >= s.len() {
                return Err(shape_err("softmax", format!("axis {axis} for shape {s:?}")));
            }
            let outer: usize = s[..axis].iter().product();
            let n = s[axis];
            let inner: usize = s[axis + 1..].iter().product();
            let x = ta.data();
            let mut y = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let mx = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..n {
                        let e = (x[at(j)] - mx).exp();
                        y[at(j)] = e;
                        z += e;
                    }
                    for j in 0..n {
                        y[at(j)] /= z;
                    }
                }
            }
            (
                Tensor {
                    shape: s.to_vec(),
                    data: y,
                },
                outer,
                n,
                inner,
            )
        };
        Ok(self.push_op(value, &[a], move |ctx, g, sink| {
            let y = ctx.out().data();
            let Some(buf) = sink.buf(a) else { return };
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..n {
                        buf[at(j)] += y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
        }))
    }

    /// Normalization over the last axis with learnable `gamma`/`beta` of that width.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (value, xhat, inv_std, c) = {
            let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
            let c = *tx
                .shape()
                .last()
                .ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
            if tg.shape() != [c] || tb.shape() != [c] {
                return Err(shape_err(
                    "layer_norm",
                    format!(
                        "input {:?}, gamma {:?}, beta {:?}",
                        tx.shape(),
                        tg.shape(),
                        tb.shape()
                    ),
                ));
            }
            let rows = tx.len().checked_div(c).unwrap_or(0);
            let mut xhat = vec![0.0; tx.len()];
            let mut inv_std = vec![0.0; rows];
            let mut y = vec![0.0; tx.len()];
            for r in 0..rows {
                let row = &tx.data()[r * c..(r + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..c {
                    let h = (row[j] - mean) * is;
                    xhat[r * c + j] = h;
                    y[r * c + j] = tg.data()[j] * h + tb.data()[j];
                }
            }
            (
                Tensor {
                    shape: tx.shape().to_vec(),
                    data: y,
                },
                xhat,
                inv_std,
                c,
            )
        };
        Ok(self.push_op(value, &[x, gamma, beta], move |ctx, g, sink| {
            if sink.wants(gamma) {
                let mut gg = vec![0.0; c];
                for (r, gr) in g.chunks(c).enumerate() {
                    for j in 0..c {
                        gg[j] += gr[j] * xhat[r * c + j];
                    }
                }
                sink.add(gamma, &gg);
            }
            if sink.wants(beta) {
                let mut gb = vec![0.0; c];
                for gr in g.chunks(c) {
                    for j in 0..c {
                        gb[j] += gr[j];
                    }
                }
                sink.add(beta, &gb);
            }
            if sink.wants(x) {
                let gamma_v = ctx.value(gamma).data().to_vec();
                let buf = sink.buf(x).unwrap();
                for (r, gr) in g.chunks(c).enumerate() {
                    let h = &xhat[r * c..(r + 1) * c];
                    let gh: Vec<f64> = gr.iter().zip(&gamma_v).map(|(a, b)| a * b).collect();
                    let m1 = gh.iter().sum::<f64>() / c as f64;
                    let m2 = gh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        buf[r * c + j] += inv_std[r] * (gh[j] - m1 - h[j] * m2);
                    }
                }
            }
        }))
    }

    /// Same-padded 1-D convolution along the sequence axis.
    ///
    /// `x`: `(batch, len, c_in)`, `w`: `(c_out, c_in, kernel)` with odd
    /// `kernel`, `bias`: `(c_out)`. Output `(batch, len, c_out)`.
    pub fn conv1d(&self, x: Var, w: Var, bias: Var) -> Result<Var, TensorError> {
        let (value, dims) = {
            let (tx, tw, tb) = (self.value(x), self.value(w), self.value(bias));
            let (&[bsz, len, cin], &[cout, cin2, kernel]) = (tx.shape(), tw.shape()) else {
                return Err(shape_err(
                    "conv1d",
                    format!("input {:?}, weight {:?}", tx.shape(), tw.shape()),
                ));
            };
            if cin != cin2 || kernel % 2 == 0 || tb.shape() != [cout] {
                return Err(shape_err(
                    "conv1d",
                    format!(
                        "input {:?}, weight {:?}, bias {:?}",
                        tx.shape(),
                        tw.shape(),
                        tb.shape()
                    ),
                ));
            }
            let pad = kernel / 2;
            let (xd, wd) = (tx.data(), tw.data());
            let mut y = vec![0.0; bsz * len * cout];
            for b in 0..bsz {
                for t in 0..len {
                    let yrow = &mut y[(b * len + t) * cout..(b * len + t + 1) * cout];
                    yrow.copy_from_slice(tb.data());
                    for j in 0..kernel {
                        let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < len) else {
                            continue;
                        };
                        let xrow = &xd[(b * len + src) * cin..(b * len + src + 1) * cin];
                        for (o, yo) in yrow.iter_mut().enumerate() {
                            for (ci, xv) in xrow.iter().enumerate() {
                                *yo += wd[(o * cin + ci) * kernel + j] * xv;
                            }
                        }
                    }
                }
            }
            (
                Tensor {
                    shape: vec![bsz, len, cout],
                    data: y,
                },
                (bsz, len, cin, cout, kernel),
            )
        };
        Ok(self.push_op(value, &[x, w, bias], move |ctx, g, sink| {
            let (bsz, len, cin, cout, kernel) = dims;
            let pad = kernel / 2;
            if sink.wants(bias) {
                let mut gb = vec![0.0; cout];
                for grow in g.chunks(cout) {
                    for o in 0..cout {
                        gb[o] += grow[o];
                    }
                }
                sink.add(bias, &gb);
            }
            let want_w = sink.wants(w);
            let want_x = sink.wants(x);
            let xd = ctx.value(x).data();
            let wd = ctx.value(w).data();
            let mut gw = vec![0.0; if want_w { wd.len() } else { 0 }];
            let mut gx = vec![0.0; if want_x { xd.len() } else { 0 }];
            for b in 0..bsz {
                for t in 0..len {
                    let grow = &g[(b * len + t) * cout..(b * len + t + 1) * cout];
                    for j in 0..kernel {
                        let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < len) else {
                            continue;
                        };
                        let xoff = (b * len + src) * cin;
                        for (o, go) in grow.iter().enumerate() {
                            for ci in 0..cin {
                                let wi = (o * cin + ci) * kernel + j;
                                if want_w {
                                    gw[wi] += go * xd[xoff + ci];
                                }
                                if want_x {
                                    gx[xoff + ci] += go * wd[wi];
                                }
                            }
                        }
                    }
                }
            }
            if want_w {
                sink.add(w, &gw);
            }
            if want_x {
                sink.add(x, &gx);
            }
        }))
    }

    /// Single-layer LSTM over `x: (batch, steps, input)` from a zero state,
    /// returning every hidden state `(batch, steps, hidden)`.
    ///
    /// `w_ih`: `(input, 4h)`, `w_hh`: `(h, 4h)`, `bias`: `(4h)`; gate blocks
    /// are ordered input, forget, cell, output.
    pub fn lstm_sequence(
        &self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
    ) -> Result<Var, TensorError> {
        let (value, cache) = {
            let (tx, ti, th, tb) = (
                self.value(x),
                self.value(w_ih),
                self.value(w_hh),
                self.value(bias),
            );
            let (&[bsz, steps, input], &[input2, four_h], &[hid, four_h2]) =
                (tx.shape(), ti.shape(), th.shape())
            else {
                return Err(shape_err(
                    "lstm_sequence",
                    format!(
                        "input {:?}, w_ih {:?}, w_hh {:?}",
                        tx.shape(),
                        ti.shape(),
                        th.shape()
                    ),
                ));
            };
            if input != input2 || four_h != 4 * hid || four_h2 != four_h || tb.shape() != [four_h] {
                return Err(shape_err(
                    "lstm_sequence",
                    format!(
                        "input {:?}, w_ih {:?}, w_hh {:?}, bias {:?}",
                        tx.shape(),
                        ti.shape(),
                        th.shape(),
                        tb.shape()
                    ),
                ));
            }
            let h4 = four_h;
            // Input projections for every (batch, step) row at once.
            let mut xw = vec![0.0; bsz * steps * h4];
            gemm(
                bsz * steps,
                input,
                h4,
                tx.data(),
                (input, 1),
                ti.data(),
                (h4, 1),
                0.0,
                &mut xw,
                (h4, 1),
            );
            // Step-major caches: activated gates, cell and hidden states.
            let mut gates = vec![0.0; steps * bsz * h4];
            let mut cells = vec![0.0; steps * bsz * hid];
            let mut hidden = vec![0.0; steps * bsz * hid];
            let mut z = vec![0.0; bsz * h4];
            for t in 0..steps {
                for b in 0..bsz {
                    let src = &xw[(b * steps + t) * h4..(b * steps + t + 1) * h4];
                    for (zj, (s, bj)) in z[b * h4..(b + 1) * h4]
                        .iter_mut()
                        .zip(src.iter().zip(tb.data()))
                    {
                        *zj = s + bj;
                    }
                }
                if t > 0 {
                    let hprev = &hidden[(t - 1) * bsz * hid..t * bsz * hid];
                    gemm(
                        bsz,
                        hid,
                        h4,
                        hprev,
                        (hid, 1),
                        th.data(),
                        (h4, 1),
                        1.0,
                        &mut z,
                        (h4, 1),
                    );
                }
                for b in 0..bsz {
                    let zr = &z[b * h4..(b + 1) * h4];
                    let gr = &mut gates[(t * bsz + b) * h4..(t * bsz + b + 1) * h4];
                    for j in 0..hid {
                        gr[j] = sigmoid(zr[j]);
                        gr[hid + j] = sigmoid(zr[hid + j]);
                        gr[2 * hid + j] = zr[2 * hid + j].tanh();
                        gr[3 * hid + j] = sigmoid(zr[3 * hid + j]);
                    }
                    for j in 0..hid {
                        let cprev = if t > 0 {
                            cells[((t - 1) * bsz + b) * hid + j]
                        } else {
                            0.0
                        };
                        let c = gr[hid + j] * cprev + gr[j] * gr[2 * hid + j];
                        cells[(t * bsz + b) * hid + j] = c;
                        hidden[(t * bsz + b) * hid + j] = gr[3 * hid + j] * c.tanh();
                    }
                }
            }
            let mut out = vec![0.0; bsz * steps * hid];
            for t in 0..steps {
                for b in 0..bsz {
                    out[(b * steps + t) * hid..(b * steps + t + 1) * hid]
                        .copy_from_slice(&hidden[(t * bsz + b) * hid..(t * bsz + b + 1) * hid]);
                }
            }
            (
                Tensor {
                    shape: vec![bsz, steps, hid],
                    data: out,
                },
                (gates, cells, hidden, bsz, steps, input, hid),
            )
        };
        Ok(
            self.push_op(value, &[x, w_ih, w_hh, bias], move |ctx, g, sink| {
                let (gates, cells, hidden, bsz, steps, input, hid) = (
                    &cache.0, &cache.1, &cache.2, cache.3, cache.4, cache.5, cache.6,
                );
                let h4 = 4 * hid;
                let whh = ctx.value(w_hh).data();
                // Pre-activation gradients in (batch, step) row order, matching `x`.
                let mut dz_all = vec![0.0; bsz * steps * h4];
                let mut dh_next = vec![0.0; bsz * hid];
                let mut dc_next = vec![0.0; bsz * hid];
                let mut dz = vec![0.0; bsz * h4];
                let mut gwhh = vec![0.0; hid * h4];
                for t in (0..steps).rev() {
                    for b in 0..bsz {
                        let gr = &gates[(t * bsz + b) * h4..(t * bsz + b + 1) * h4];
                        for j in 0..hid {
                            let (i_g, f_g, c_g, o_g) =
                                (gr[j], gr[hid + j], gr[2 * hid + j], gr[3 * hid + j]);
                            let c = cells[(t * bsz + b) * hid + j];
                            let cprev = if t > 0 {
                                cells[((t - 1) * bsz + b) * hid + j]
                            } else {
                                0.0
                            };
                            let tc = c.tanh();
                            let dh = g[(b * steps + t) * hid + j] + dh_next[b * hid + j];
                            let d_o = dh * tc;
                            let dc = dc_next[b * hid + j] + dh * o_g * (1.0 - tc * tc);
                            let d_i = dc * c_g;
                            let d_c = dc * i_g;
                            let d_f = dc * cprev;
                            dc_next[b * hid + j] = dc * f_g;
                            let zr = &mut dz[b * h4..(b + 1) * h4];
                            zr[j] = d_i * i_g * (1.0 - i_g);
                            zr[hid + j] = d_f * f_g * (1.0 - f_g);
                            zr[2 * hid + j] = d_c * (1.0 - c_g * c_g);
                            zr[3 * hid + j] = d_o * o_g * (1.0 - o_g);
                        }
                        dz_all[(b * steps + t) * h4..(b * steps + t + 1) * h4]
                            .copy_from_slice(&dz[b * h4..(b + 1) * h4]);
                    }
                    // dh_{t-1} = dz . w_hh^T
                    gemm(
                        bsz,
                        h4,
                        hid,
                        &dz,
                        (h4, 1),
                        whh,
                        (1, h4),
                        0.0,
                        &mut dh_next,
                        (hid, 1),
                    );
                    if t > 0 {
                        let hprev = &hidden[(t - 1) * bsz * hid..t * bsz * hid];
                        gemm(
                            hid,
                            bsz,
                            h4,
                            hprev,
                            (1, hid),
                            &dz,
                            (h4, 1),
                            1.0,
                            &mut gwhh,
                            (h4, 1),
                        );
                    }
                }
                if sink.wants(w_hh) {
                    sink.add(w_hh, &gwhh);
                }
                if let Some(gb) = sink.buf(bias) {
                    for row in dz_all.chunks(h4) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
                let rows = bsz * steps;
                if sink.wants(w_ih) {
                    let xd = ctx.value(x).data();
                    let gi = sink.buf(w_ih).unwrap();
                    gemm(
                        input,
                        rows,
                        h4,
                        xd,
                        (1, input),
                        &dz_all,
                        (h4, 1),
                        1.0,
                        gi,
                        (h4, 1),
                    );
                }
                if sink.wants(x) {
                    let wih = ctx.value(w_ih).data();
                    let gx = sink.buf(x).unwrap();
                    gemm(
                        rows,
                        h4,
                        input,
                        &dz_all,
                        (h4, 1),
                        wih,
                        (1, h4),
                        1.0,
                        gx,
                        (input, 1),
                    );
                }
            }),
        )
    }

    /// Componentwise max of rows grouped by `segments[row]`, giving
    /// `(num_segments, row_len)`. Every segment must own at least one row;
    /// ties route the gradient to the lowest row index.
    pub fn max_over_segments(
        &self,
        x: Var,
        segments: &[usize],
        num_segments: usize,
    ) -> Result<Var, TensorError> {
        let (value, argmax, c) = {
            let tx = self.value(x);
            let rows = tx.rows();
            if segments.len() != rows || tx.shape().is_empty() {
                return Err(shape_err(
                    "max_over_segments",
                    format!("{} segment ids for shape {:?}", segments.len(), tx.shape()),
                ));
            }
            let c = tx.row_len();
            let mut best = vec![f64::NEG_INFINITY; num_segments * c];
            let mut argmax = vec![usize::MAX; num_segments * c];
            for (r, &s) in segments.iter().enumerate() {
                if s >= num_segments {
                    return Err(TensorError::Index {
                        op: "max_over_segments",
                        index: s,
                        len: num_segments,
                    });
                }
                let row = tx.row(r);
                for j in 0..c {
                    if argmax[s * c + j] == usize::MAX || row[j] > best[s * c + j] {
                        best[s * c + j] = row[j];
                        argmax[s * c + j] = r;
                    }
                }
            }
            if c > 0 {
                if let Some(s) = (0..num_segments).find(|&s| argmax[s * c] == usize::MAX) {
                    return Err(TensorError::EmptySegment {
                        op: "max_over_segments",
                        segment: s,
                    });
                }
            }
            let mut shape = tx.shape().to_vec();
            shape[0] = num_segments;
            (Tensor { shape, data: best }, argmax, c)
        };
        Ok(self.push_op(value, &[x], move |_, g, sink| {
            let Some(buf) = sink.buf(x) else { return };
            for (k, &r) in argmax.iter().enumerate() {
                buf[r * c + k % c] += g[k];
            }
        }))
    }

    /// Row gather: output row `i` is input row `indices[i]`.
    pub fn gather(&self, x: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let (value, c) = {
            let tx = self.value(x);
            if tx.shape().is_empty() {
                return Err(shape_err("gather", "scalar input"));
            }
            let rows = tx.rows();
            let c = tx.row_len();
            let mut data = Vec::with_capacity(indices.len() * c);
            for &i in indices {
                if i >= rows {
                    return Err(TensorError::Index {
                        op: "gather",
                        index: i,
                        len: rows,
                    });
                }
                data.extend_from_slice(tx.row(i));
            }
            let mut shape = tx.shape().to_vec();
            shape[0] = indices.len();
            (Tensor { shape, data }, c)
        };
        let indices = indices.to_vec();
        Ok(self.push_op(value, &[x], move |_, g, sink| {
            let Some(buf) = sink.buf(x) else { return };
            for (k, &i) in indices.iter().enumerate() {
                for j in 0..c {
                    buf[i * c + j] += g[k * c + j];
                }
            }
        }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let (value, widths, outer) = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let s0 = vals[0].shape().to_vec();
            if axis >= s0.len() {
                return Err(shape_err("concat", format!("axis {axis} for shape {s0:?}")));
            }
            for v in &vals {
                let s = v.shape();
                if s.len() != s0.len()
                    || s.iter()
                        .zip(&s0)
                        .enumerate()
                        .any(|(i, (a, b))| i != axis && a != b)
                {
                    return Err(shape_err("concat", format!("{s0:?} vs {s:?}")));
                }
            }
            let outer: usize = s0[..axis].iter().product();
            let widths: Vec<usize> = vals
                .iter()
                .map(|v| v.shape()[axis..].iter().product())
                .collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(outer * total);
            for o in 0..outer {
                for (v, &w) in vals.iter().zip(&widths) {
                    data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = s0.clone();
            shape[axis] = vals.iter().map(|v| v.shape()[axis]).sum();
            (Tensor { shape, data }, widths, outer)
        };
        let parts_owned = parts.to_vec();
        Ok(self.push_op(value, parts, move |_, g, sink| {
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for (&p, &w) in parts_owned.iter().zip(&widths) {
                if let Some(buf) = sink.buf(p) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + w];
                        for (b, s) in buf[o * w..(o + 1) * w].iter_mut().zip(src) {
                            *b += s;
                        }
                    }
                }
                offset += w;
            }
        }))
    }

    /// Replaces elements where `mask` is true with `fill`; those positions get no gradient.
    pub fn masked_fill(&self, x: Var, mask: &[bool], fill: f64) -> Result<Var, TensorError> {
        let value = {
            let tx = self.value(x);
            if mask.len() != tx.len() {
                return Err(shape_err(
                    "masked_fill",
                    format!("mask of {} for shape {:?}", mask.len(), tx.shape()),
                ));
            }
            let data = tx
                .data()
                .iter()
                .zip(mask)
                .map(|(&v, &m)| if m { fill } else { v })
                .collect();
            Tensor {
                shape: tx.shape().to_vec(),
                data,
            }
        };
        let mask = mask.to_vec();
        Ok(self.push_op(value, &[x], move |_, g, sink| {
            let Some(buf) = sink.buf(x) else { return };
            for ((b, gi), m) in buf.iter_mut().zip(g).zip(&mask) {
                if !m {
                    *b += gi;
                }
            }
        }))
    }

    pub fn transpose(&self, x: Var) -> Result<Var, TensorError> {
        let (value, r, c) = {
            let tx = self.value(x);
            let (r, c) = matrix_dims("transpose", &tx)?;
            let d = tx.data();
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = d[i * c + j];
                }
            }
            (
                Tensor {
                    shape: vec![c, r],
                    data,
                },
                r,
                c,
            )
        };
        Ok(self.push_op(value, &[x], move |_, g, sink| {
            let Some(buf) = sink.buf(x) else { return };
            for i in 0..r {
                for j in 0..c {
                    buf[i * c + j] += g[j * r + i];
                }
            }
        }))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let value = {
            let tx = self.value(x);
            if shape.iter().product::<usize>() != tx.len() {
                return Err(shape_err(
                    "reshape",
                    format!("{:?} -> {shape:?}", tx.shape()),
                ));
            }
            Tensor {
                shape,
                data: tx.data().to_vec(),
            }
        };
        Ok(self.push_op(value, &[x], move |_, g, sink| sink.add(x, g)))
    }

    /// Convex row blend: output row `i` is `sum_j w[i*k + j] * src[idx[i*k + j]]`.
    pub fn weighted_rows(
        &self,
        src: Var,
        indices: &[usize],
        weights: &[f64],
        k: usize,
    ) -> Result<Var, TensorError> {
        if k == 0 || indices.len() != weights.len() || !indices.len().is_multiple_of(k) {
            return Err(shape_err(
                "weighted_rows",
                format!(
                    "{} indices, {} weights, k = {k}",
                    indices.len(),
                    weights.len()
                ),
            ));
        }
        let (value, c) = {
            let ts = self.value(src);
            if ts.shape().is_empty() {
                return Err(shape_err("weighted_rows", "scalar input"));
            }
            let rows = ts.rows();
            let c = ts.row_len();
            let n = indices.len() / k;
            let mut data = vec![0.0; n * c];
            for i in 0..n {
                for j in 0..k {
                    let s = indices[i * k + j];
                    if s >= rows {
                        return Err(TensorError::Index {
                            op: "weighted_rows",
                            index: s,
                            len: rows,
                        });
                    }
                    let w = weights[i * k + j];
                    for (o, v) in data[i * c..(i + 1) * c].iter_mut().zip(ts.row(s)) {
                        *o += w * v;
                    }
                }
            }
            let mut shape = ts.shape().to_vec();
            shape[0] = n;
            (Tensor { shape, data }, c)
        };
        let indices = indices.to_vec();
        let weights = weights.to_vec();
        Ok(self.push_op(value, &[src], move |_, g, sink| {
            let Some(buf) = sink.buf(src) else { return };
            for (q, (&s, &w)) in indices.iter().zip(&weights).enumerate() {
                let i = q / k;
                for j in 0..c {
                    buf[s * c + j] += w * g[i * c + j];
                }
            }
        }))
    }

    /// Weighted mean softmax cross-entropy of `logits: (n, classes)`:
    /// `sum_i w_i * -log softmax(logits_i)[t_i] / sum_i w_i`.
    pub fn cross_entropy(
        &self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var, TensorError> {
        let (value, probs, classes, wsum) = {
            let tl = self.value(logits);
            let (n, classes) = matrix_dims("cross_entropy", &tl)?;
            if targets.len() != n || weights.len() != n || n == 0 {
                return Err(shape_err(
                    "cross_entropy",
                    format!(
                        "{n} rows, {} targets, {} weights",
                        targets.len(),
                        weights.len()
                    ),
                ));
            }
            let wsum: f64 = weights.iter().sum();
            if wsum <= 0.0 {
                return Err(shape_err(
                    "cross_entropy",
                    "weights must sum to a positive value",
                ));
            }
            let mut probs = vec![0.0; n * classes];
            let mut loss = 0.0;
            for i in 0..n {
                let t = targets[i];
                if t >= classes {
                    return Err(TensorError::Index {
                        op: "cross_entropy",
                        index: t,
                        len: classes,
                    });
                }
                let row = tl.row(i);
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                let lse = mx + z.ln();
                for j in 0..classes {
                    probs[i * classes + j] = (row[j] - lse).exp();
                }
                loss += weights[i] * (lse - row[t]);
            }
            (Tensor::scalar(loss / wsum), probs, classes, wsum)
        };
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        Ok(self.push_op(value, &[logits], move |_, g, sink| {
            let Some(buf) = sink.buf(logits) else { return };
            for (i, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
                let s = g[0] * w / wsum;
                for j in 0..classes {
                    let onehot = if j == t { 1.0 } else { 0.0 };
                    buf[i * classes + j] += s * (probs[i * classes + j] - onehot);
                }
            }
        }))
    }

    /// `x . w + b` for `x: (n, in)`, `w: (in, out)`, `b: (out)`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }
}
