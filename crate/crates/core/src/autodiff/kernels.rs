//! Value kernels for every op. These only read input buffers and write the
//! output buffer; shape checking happens when a node is created.

use super::graph::ConvMode;

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `op(A) * op(B)` where `op` optionally transposes. `a_shape`/`b_shape` are
/// the stored (untransposed) 2-D shapes.
pub(crate) fn matmul(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    trans_a: bool,
    trans_b: bool,
    out: &mut [f64],
) {
    let (m, k) = if trans_a {
        (a_shape[1], a_shape[0])
    } else {
        (a_shape[0], a_shape[1])
    };
    let n = if trans_b { b_shape[0] } else { b_shape[1] };
    out.iter_mut().for_each(|v| *v = 0.0);
    match (trans_a, trans_b) {
        (false, false) => {
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for l in 0..k {
                    let av = a[i * k + l];
                    let brow = &b[l * n..(l + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
        }
        (true, false) => {
            // a stored k x m
            for l in 0..k {
                let brow = &b[l * n..(l + 1) * n];
                for i in 0..m {
                    let av = a[l * m + i];
                    let row = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            // a stored k x m, b stored n x k
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += a[l * m + i] * b[j * k + l];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
    }
}

/// The three bilinear members of the stride-1 convolution family.
///
/// All share one index relation: output pixel `(i, j)` of channel `o` reads
/// input pixel `(i + a - pad, j + b - pad)` of channel `c` through kernel tap
/// `(o, c, a, b)`.
pub(crate) fn conv2d(
    mode: ConvMode,
    pad: usize,
    lhs: &[f64],
    lhs_shape: &[usize],
    rhs: &[f64],
    rhs_shape: &[usize],
    out: &mut [f64],
    out_shape: &[usize],
) {
    out.iter_mut().for_each(|v| *v = 0.0);
    // Recover (x, k, y) extents regardless of which two are the inputs.
    let (x_shape, k_shape, y_shape) = match mode {
        ConvMode::Forward => (lhs_shape, rhs_shape, out_shape),
        ConvMode::InputGrad => (out_shape, rhs_shape, lhs_shape),
        ConvMode::KernelGrad => (lhs_shape, out_shape, rhs_shape),
    };
    let (n_batch, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (cout, kh, kw) = (k_shape[0], k_shape[2], k_shape[3]);
    let (ho, wo) = (y_shape[2], y_shape[3]);
    let pad = pad as isize;
    let xi = |n: usize, c: usize, r: usize, s: usize| ((n * cin + c) * h + r) * w + s;
    let ki = |o: usize, c: usize, a: usize, b: usize| ((o * cin + c) * kh + a) * kw + b;
    let yi = |n: usize, o: usize, i: usize, j: usize| ((n * cout + o) * ho + i) * wo + j;

    for n in 0..n_batch {
        for o in 0..cout {
            for c in 0..cin {
                for a in 0..kh {
                    for b in 0..kw {
                        for i in 0..ho {
                            let r = i as isize + a as isize - pad;
                            if r < 0 || r >= h as isize {
                                continue;
                            }
                            let r = r as usize;
                            for j in 0..wo {
                                let s = j as isize + b as isize - pad;
                                if s < 0 || s >= w as isize {
                                    continue;
                                }
                                let s = s as usize;
                                match mode {
                                    ConvMode::Forward => {
                                        out[yi(n, o, i, j)] += lhs[xi(n, c, r, s)] * rhs[ki(o, c, a, b)];
                                    }
                                    ConvMode::InputGrad => {
                                        out[xi(n, c, r, s)] += lhs[yi(n, o, i, j)] * rhs[ki(o, c, a, b)];
                                    }
                                    ConvMode::KernelGrad => {
                                        out[ki(o, c, a, b)] += rhs[yi(n, o, i, j)] * lhs[xi(n, c, r, s)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Map an output index of a numpy-style broadcast back to the source index.
fn broadcast_source_index(idx: usize, out_shape: &[usize], src_shape: &[usize]) -> usize {
    let offset = out_shape.len() - src_shape.len();
    let mut rem = idx;
    let mut src = 0;
    let mut src_stride = 1;
    for d in (0..out_shape.len()).rev() {
        let coord = rem % out_shape[d];
        rem /= out_shape[d];
        if d >= offset {
            let sd = src_shape[d - offset];
            if sd != 1 {
                src += coord * src_stride;
            }
            src_stride *= sd;
        }
    }
    src
}

pub(crate) fn broadcast(src: &[f64], src_shape: &[usize], out: &mut [f64], out_shape: &[usize]) {
    if src.len() == 1 {
        out.iter_mut().for_each(|v| *v = src[0]);
        return;
    }
    for (i, o) in out.iter_mut().enumerate() {
        *o = src[broadcast_source_index(i, out_shape, src_shape)];
    }
}

/// Reduce `src` onto the broadcast-compatible `out_shape` by summation.
pub(crate) fn sum_to(src: &[f64], src_shape: &[usize], out: &mut [f64], out_shape: &[usize]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    if out.len() == 1 {
        out[0] = src.iter().sum();
        return;
    }
    for (i, &v) in src.iter().enumerate() {
        out[broadcast_source_index(i, src_shape, out_shape)] += v;
    }
}

/// Softmax over the last axis with max subtraction.
pub(crate) fn softmax(src: &[f64], width: usize, out: &mut [f64]) {
    for (row, orow) in src.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
}
