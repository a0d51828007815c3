//! Forward and backward passes of the network building blocks over flat
//! row-major slices. Backward functions accumulate into parameter gradients.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `y = W x + b` with `W` stored as `out x in`.
pub fn dense_forward(w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    let n_in = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        *yo = b[o] + dot(&w[o * n_in..(o + 1) * n_in], x);
    }
}

/// Accumulates `dW += dy x^T`, `db += dy`; writes `dx = W^T dy` when given.
pub fn dense_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let n_in = x.len();
    for (o, &g) in dy.iter().enumerate() {
        db[o] += g;
        if g != 0.0 {
            for (d, xi) in dw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                *d += g * xi;
            }
        }
    }
    if let Some(dx) = dx {
        dx.fill(0.0);
        for (o, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                for (d, wi) in dx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *d += g * wi;
                }
            }
        }
    }
}

pub fn tanh_inplace(y: &mut [f64]) {
    for v in y.iter_mut() {
        *v = v.tanh();
    }
}

/// Turns the gradient w.r.t. `tanh` outputs `y` into the gradient w.r.t. its inputs.
pub fn tanh_backward(y: &[f64], dy: &mut [f64]) {
    for (d, v) in dy.iter_mut().zip(y) {
        *d *= 1.0 - v * v;
    }
}

/// Valid (unpadded) strided 2D convolution over a `cin x in_h x in_w` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.k) / self.stride + 1
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.out_h() * self.out_w()
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }
}

pub fn conv_forward(s: &ConvShape, w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    let (oh, ow, k) = (s.out_h(), s.out_w(), s.k);
    let plane = s.in_h * s.in_w;
    for co in 0..s.cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[co];
                for ci in 0..s.cin {
                    let wbase = ((co * s.cin) + ci) * k * k;
                    let xbase = ci * plane;
                    for ky in 0..k {
                        let row = xbase + (oy * s.stride + ky) * s.in_w + ox * s.stride;
                        acc += dot(&w[wbase + ky * k..wbase + (ky + 1) * k], &x[row..row + k]);
                    }
                }
                y[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

pub fn conv_backward(
    s: &ConvShape,
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let (oh, ow, k) = (s.out_h(), s.out_w(), s.k);
    let plane = s.in_h * s.in_w;
    if let Some(dx) = dx.as_deref_mut() {
        dx.fill(0.0);
    }
    for co in 0..s.cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(co * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                db[co] += g;
                for ci in 0..s.cin {
                    let wbase = ((co * s.cin) + ci) * k * k;
                    let xbase = ci * plane;
                    for ky in 0..k {
                        let row = xbase + (oy * s.stride + ky) * s.in_w + ox * s.stride;
                        let wrow = wbase + ky * k;
                        for kx in 0..k {
                            dw[wrow + kx] += g * x[row + kx];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            for kx in 0..k {
                                dx[row + kx] += g * w[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Intermediates of one LSTM step (gate order: input, forget, candidate, output).
#[derive(Debug, Clone, Default)]
pub struct LstmCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

/// `wx` is `4r x in`, `wh` is `4r x r`, `b` has length `4r`.
pub fn lstm_forward(wx: &[f64], wh: &[f64], b: &[f64], x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> LstmCache {
    let r = h_prev.len();
    let n_in = x.len();
    let mut z = vec![0.0; 4 * r];
    for (j, zj) in z.iter_mut().enumerate() {
        *zj = b[j] + dot(&wx[j * n_in..(j + 1) * n_in], x) + dot(&wh[j * r..(j + 1) * r], h_prev);
    }
    let i: Vec<f64> = z[..r].iter().map(|&v| sigmoid(v)).collect();
    let f: Vec<f64> = z[r..2 * r].iter().map(|&v| sigmoid(v)).collect();
    let g: Vec<f64> = z[2 * r..3 * r].iter().map(|v| v.tanh()).collect();
    let o: Vec<f64> = z[3 * r..].iter().map(|&v| sigmoid(v)).collect();
    let c: Vec<f64> = (0..r).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h = (0..r).map(|k| o[k] * tanh_c[k]).collect();
    LstmCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        i,
        f,
        g,
        o,
        c,
        tanh_c,
        h,
    }
}

/// Gradients of one LSTM step. `dh`, `dc` are the gradients reaching this
/// step's outputs; `dh_prev`, `dc_prev` receive the gradients of its inputs.
#[allow(clippy::too_many_arguments)]
pub fn lstm_backward(
    wx: &[f64],
    wh: &[f64],
    cache: &LstmCache,
    dh: &[f64],
    dc: &[f64],
    dwx: &mut [f64],
    dwh: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
    dh_prev: &mut [f64],
    dc_prev: &mut [f64],
) {
    let r = dh.len();
    let n_in = cache.x.len();
    let mut dz = vec![0.0; 4 * r];
    for k in 0..r {
        let dct = dc[k] + dh[k] * cache.o[k] * (1.0 - cache.tanh_c[k] * cache.tanh_c[k]);
        let d_o = dh[k] * cache.tanh_c[k];
        let d_i = dct * cache.g[k];
        let d_f = dct * cache.c_prev[k];
        let d_g = dct * cache.i[k];
        dc_prev[k] = dct * cache.f[k];
        dz[k] = d_i * cache.i[k] * (1.0 - cache.i[k]);
        dz[r + k] = d_f * cache.f[k] * (1.0 - cache.f[k]);
        dz[2 * r + k] = d_g * (1.0 - cache.g[k] * cache.g[k]);
        dz[3 * r + k] = d_o * cache.o[k] * (1.0 - cache.o[k]);
    }
    for (j, &g) in dz.iter().enumerate() {
        db[j] += g;
        if g == 0.0 {
            continue;
        }
        for (d, xi) in dwx[j * n_in..(j + 1) * n_in].iter_mut().zip(&cache.x) {
            *d += g * xi;
        }
        for (d, hi) in dwh[j * r..(j + 1) * r].iter_mut().zip(&cache.h_prev) {
            *d += g * hi;
        }
    }
    dh_prev.fill(0.0);
    for (j, &g) in dz.iter().enumerate() {
        for (d, w) in dh_prev.iter_mut().zip(&wh[j * r..(j + 1) * r]) {
            *d += g * w;
        }
    }
    if let Some(dx) = dx {
        dx.fill(0.0);
        for (j, &g) in dz.iter().enumerate() {
            for (d, w) in dx.iter_mut().zip(&wx[j * n_in..(j + 1) * n_in]) {
                *d += g * w;
            }
        }
    }
}
