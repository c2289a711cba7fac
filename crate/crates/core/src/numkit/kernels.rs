//! Raw slice kernels. Every row of an output is computed from its own input
//! row with a fixed accumulation order, so results do not depend on how rows
//! are batched.

/// `out[r×c] += a[r×k] · b[k×c]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[r×k] += a[r×c] · b[k×c]ᵀ`
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, c: usize, k: usize) {
    for i in 0..r {
        let arow = &a[i * c..(i + 1) * c];
        for p in 0..k {
            let brow = &b[p * c..(p + 1) * c];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k×c] += a[r×k]ᵀ · b[r×c]`
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * c..(i + 1) * c];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Same-padding 3×3 cross-correlation of one `[c_in, h, w]` image.
pub fn conv3x3(
    input: &[f64],
    kernels: &[f64],
    out: &mut [f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
) {
    for co in 0..c_out {
        let oplane = &mut out[co * h * w..(co + 1) * h * w];
        for ci in 0..c_in {
            let iplane = &input[ci * h * w..(ci + 1) * h * w];
            let kb = &kernels[(co * c_in + ci) * 9..(co * c_in + ci + 1) * 9];
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for ky in 0..3 {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let xx = x as isize + kx as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            s += kb[ky * 3 + kx] * iplane[yy as usize * w + xx as usize];
                        }
                    }
                    oplane[y * w + x] += s;
                }
            }
        }
    }
}

/// Adjoints of [`conv3x3`] for one image: accumulates into `d_input` and
/// `d_kernels`.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    input: &[f64],
    kernels: &[f64],
    d_out: &[f64],
    d_input: Option<&mut [f64]>,
    d_kernels: Option<&mut [f64]>,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
) {
    let mut d_input = d_input;
    let mut d_kernels = d_kernels;
    for co in 0..c_out {
        let gplane = &d_out[co * h * w..(co + 1) * h * w];
        for ci in 0..c_in {
            let kidx = (co * c_in + ci) * 9;
            let iplane = &input[ci * h * w..(ci + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let g = gplane[y * w + x];
                    if g == 0.0 {
                        continue;
                    }
                    for ky in 0..3 {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let xx = x as isize + kx as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let ii = yy as usize * w + xx as usize;
                            if let Some(dk) = d_kernels.as_deref_mut() {
                                dk[kidx + ky * 3 + kx] += g * iplane[ii];
                            }
                            if let Some(di) = d_input.as_deref_mut() {
                                di[ci * h * w + ii] += g * kernels[kidx + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}
