//! Dense kernels for the GRU cell.

/// Dot product with four partial sums.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut s = [0.0; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let k = 4 * i;
        s[0] += a[k] * b[k];
        s[1] += a[k + 1] * b[k + 1];
        s[2] += a[k + 2] * b[k + 2];
        s[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in 4 * chunks..n {
        tail += a[k] * b[k];
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Extra values saved after the new hidden state: `z, r, c, r*h`.
pub fn gru_cell_scratch(hidden: usize) -> usize {
    4 * hidden
}

/// One GRU step.
///
/// `w` is `3H x D` and `u` is `3H x H`, both row-major with gate blocks in
/// the order update, reset, candidate; `b` has `3H` entries. Writes
/// `[h', z, r, c, r*h]` into `out`.
pub fn gru_cell_forward(w: &[f64], u: &[f64], b: &[f64], x: &[f64], h: &[f64], out: &mut [f64]) {
    let hd = h.len();
    let d = x.len();
    debug_assert_eq!(w.len(), 3 * hd * d);
    debug_assert_eq!(u.len(), 3 * hd * hd);
    let (hn, rest) = out.split_at_mut(hd);
    let (z, rest) = rest.split_at_mut(hd);
    let (r, rest) = rest.split_at_mut(hd);
    let (c, rest) = rest.split_at_mut(hd);
    let rh = &mut rest[..hd];
    for k in 0..hd {
        z[k] = sigmoid(b[k] + dot(&w[k * d..(k + 1) * d], x) + dot(&u[k * hd..(k + 1) * hd], h));
        let kr = hd + k;
        r[k] = sigmoid(b[kr] + dot(&w[kr * d..(kr + 1) * d], x) + dot(&u[kr * hd..(kr + 1) * hd], h));
        rh[k] = r[k] * h[k];
    }
    for k in 0..hd {
        let kc = 2 * hd + k;
        c[k] = (b[kc] + dot(&w[kc * d..(kc + 1) * d], x) + dot(&u[kc * hd..(kc + 1) * hd], rh)).tanh();
        hn[k] = (1.0 - z[k]) * h[k] + z[k] * c[k];
    }
}

/// Reverse of [`gru_cell_forward`]. Parameter gradients and `dx`, `dh` are
/// accumulated.
#[allow(clippy::too_many_arguments)]
pub fn gru_cell_backward(
    w: &[f64],
    u: &[f64],
    x: &[f64],
    h: &[f64],
    saved: &[f64],
    dy: &[f64],
    gw: &mut [f64],
    gu: &mut [f64],
    gb: &mut [f64],
    dx: &mut [f64],
    dh: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let hd = h.len();
    let d = x.len();
    let z = &saved[hd..2 * hd];
    let r = &saved[2 * hd..3 * hd];
    let c = &saved[3 * hd..4 * hd];
    let rh = &saved[4 * hd..5 * hd];
    scratch.clear();
    scratch.resize(4 * hd, 0.0);
    let (da, drh) = scratch.split_at_mut(3 * hd);
    for k in 0..hd {
        let dz = dy[k] * (c[k] - h[k]);
        let dc = dy[k] * z[k];
        dh[k] += dy[k] * (1.0 - z[k]);
        da[k] = dz * z[k] * (1.0 - z[k]);
        da[2 * hd + k] = dc * (1.0 - c[k] * c[k]);
    }
    // candidate path through U_c (r*h)
    for k in 0..hd {
        let g = da[2 * hd + k];
        if g == 0.0 {
            continue;
        }
        let row = (2 * hd + k) * hd;
        for j in 0..hd {
            drh[j] += g * u[row + j];
            gu[row + j] += g * rh[j];
        }
    }
    for k in 0..hd {
        dh[k] += drh[k] * r[k];
        let dr = drh[k] * h[k];
        da[hd + k] = dr * r[k] * (1.0 - r[k]);
    }
    for k in 0..2 * hd {
        let g = da[k];
        if g == 0.0 {
            continue;
        }
        let row = k * hd;
        for j in 0..hd {
            dh[j] += g * u[row + j];
            gu[row + j] += g * h[j];
        }
    }
    for k in 0..3 * hd {
        let g = da[k];
        gb[k] += g;
        if g == 0.0 {
            continue;
        }
        let row = &w[k * d..(k + 1) * d];
        let grow = &mut gw[k * d..(k + 1) * d];
        for j in 0..d {
            dx[j] += g * row[j];
            grow[j] += g * x[j];
        }
    }
}
