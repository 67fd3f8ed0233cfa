//! Raw loops behind the convolution family and the index-based gather/scatter pair.
//!
//! All buffers are row-major. Convolutions use the cross-correlation convention
//! `y[b, o, t] = sum_{c, j} w[o, c, j] * x[b, c, t + j - pad_left]`, with taps that
//! fall outside `[0, len_in)` contributing zero.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub pad_left: usize,
}

/// Copies `rows` rows of `src` (each `len` long) into rows of `width`,
/// shifted right by `shift` positions; entries with no source stay zero.
fn shifted_rows(src: &[f64], rows: usize, len: usize, width: usize, shift: isize) -> Vec<f64> {
    let mut out = vec![0.0; rows * width];
    let lo = shift.max(0) as usize;
    let hi = ((len as isize + shift).max(0) as usize).min(width);
    if lo < hi {
        let from = (lo as isize - shift) as usize;
        for r in 0..rows {
            out[r * width + lo..r * width + hi].copy_from_slice(&src[r * len + from..][..hi - lo]);
        }
    }
    out
}

/// `out[d, t] += sum_{s, j} w(d, s, j) * src[s, t + j]` for `t < len_out`,
/// where `src` holds `n_src` rows of `len_out + kernel - 1` and `w(d, s, j)`
/// is read at `w + d*wd + s*ws + j*wj`.
///
/// Each source row seen through `A[t, j] = src[s, t + j]` is a matrix with
/// unit row and column strides, so no im2col buffer is needed.
#[allow(clippy::too_many_arguments)]
fn correlate(
    src: &[f64],
    n_src: usize,
    len_out: usize,
    kernel: usize,
    w: &[f64],
    w_origin: usize,
    (wd, ws, wj): (isize, isize, isize),
    out: &mut [f64],
    n_dst: usize,
) {
    let lp = len_out + kernel - 1;
    assert!(src.len() >= n_src * lp && out.len() >= n_dst * len_out);
    for s in 0..n_src {
        // SAFETY: every index read through the strides stays inside `src`,
        // `w` and `out`, which the assertions and the callers' shapes bound.
        unsafe {
            matrixmultiply::dgemm(
                len_out,
                kernel,
                n_dst,
                1.0,
                src.as_ptr().add(s * lp),
                1,
                1,
                w.as_ptr().add(w_origin).offset(s as isize * ws),
                wj,
                wd,
                1.0,
                out.as_mut_ptr(),
                1,
                len_out as isize,
            );
        }
    }
}

pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let lp = d.len_out + d.kernel - 1;
    let k = d.kernel as isize;
    let mut y = vec![0.0; d.batch * d.c_out * d.len_out];
    for b in 0..d.batch {
        let xp = shifted_rows(&x[b * d.c_in * d.len_in..][..d.c_in * d.len_in], d.c_in, d.len_in, lp, d.pad_left as isize);
        let y_b = &mut y[b * d.c_out * d.len_out..][..d.c_out * d.len_out];
        correlate(&xp, d.c_in, d.len_out, d.kernel, w, 0, (d.c_in as isize * k, k, 1), y_b, d.c_out);
    }
    y
}

/// Adjoint of [`conv1d_forward`] with respect to `x`: maps an output-shaped `g` to
/// an input-shaped buffer. Computed as a correlation of the shifted `g` with
/// the flipped kernel.
pub(crate) fn conv1d_input_grad(g: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let lp = d.len_in + d.kernel - 1;
    let k = d.kernel as isize;
    let shift = d.kernel as isize - 1 - d.pad_left as isize;
    let mut dx = vec![0.0; d.batch * d.c_in * d.len_in];
    for b in 0..d.batch {
        let gp = shifted_rows(&g[b * d.c_out * d.len_out..][..d.c_out * d.len_out], d.c_out, d.len_out, lp, shift);
        let dx_b = &mut dx[b * d.c_in * d.len_in..][..d.c_in * d.len_in];
        // w(c, o, u) = w[o, c, kernel - 1 - u]
        correlate(&gp, d.c_out, d.len_in, d.kernel, w, d.kernel - 1, (k, d.c_in as isize * k, -1), dx_b, d.c_in);
    }
    dx
}

/// Adjoint of [`conv1d_forward`] with respect to `w`.
pub(crate) fn conv1d_weight_grad(x: &[f64], g: &[f64], d: &ConvDims) -> Vec<f64> {
    let lp = d.len_out + d.kernel - 1;
    let mut dw = vec![0.0; d.c_out * d.c_in * d.kernel];
    for b in 0..d.batch {
        let xp = shifted_rows(&x[b * d.c_in * d.len_in..][..d.c_in * d.len_in], d.c_in, d.len_in, lp, d.pad_left as isize);
        let g_b = &g[b * d.c_out * d.len_out..][..d.c_out * d.len_out];
        for c in 0..d.c_in {
            // dW_c[j, o] += sum_t xp[c, t + j] * g[o, t]
            // SAFETY: the views stay inside `xp`, `g_b` and `dw`.
            unsafe {
                matrixmultiply::dgemm(
                    d.kernel,
                    d.len_out,
                    d.c_out,
                    1.0,
                    xp.as_ptr().add(c * lp),
                    1,
                    1,
                    g_b.as_ptr(),
                    1,
                    d.len_out as isize,
                    1.0,
                    dw.as_mut_ptr().add(c * d.kernel),
                    1,
                    (d.c_in * d.kernel) as isize,
                );
            }
        }
    }
    dw
}

pub(crate) fn gather(x: &[f64], index: &[usize]) -> Vec<f64> {
    index.iter().map(|&i| x[i]).collect()
}

pub(crate) fn scatter_add(g: &[f64], index: &[usize], out_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_len];
    for (&i, &v) in index.iter().zip(g) {
        out[i] += v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
        let mut y = vec![0.0; d.batch * d.c_out * d.len_out];
        for b in 0..d.batch {
            for o in 0..d.c_out {
                for t in 0..d.len_out {
                    let mut s = 0.0;
                    for c in 0..d.c_in {
                        for j in 0..d.kernel {
                            let src = t as isize + j as isize - d.pad_left as isize;
                            if src >= 0 && (src as usize) < d.len_in {
                                s += w[(o * d.c_in + c) * d.kernel + j]
                                    * x[(b * d.c_in + c) * d.len_in + src as usize];
                            }
                        }
                    }
                    y[(b * d.c_out + o) * d.len_out + t] = s;
                }
            }
        }
        y
    }

    #[test]
    fn valid_conv_by_hand() {
        let d = ConvDims {
            batch: 1,
            c_in: 1,
            c_out: 1,
            kernel: 2,
            len_in: 3,
            len_out: 2,
            pad_left: 0,
        };
        assert_eq!(conv1d_forward(&[1.0, 2.0, 3.0], &[1.0, 1.0], &d), vec![3.0, 5.0]);
    }

    #[test]
    fn matches_naive_with_padding() {
        let d = ConvDims {
            batch: 2,
            c_in: 3,
            c_out: 2,
            kernel: 4,
            len_in: 7,
            len_out: 7,
            pad_left: 1,
        };
        let x: Vec<f64> = (0..d.batch * d.c_in * d.len_in)
            .map(|i| ((i * 7919) % 13) as f64 - 6.0)
            .collect();
        let w: Vec<f64> = (0..d.c_out * d.c_in * d.kernel)
            .map(|i| ((i * 104729) % 11) as f64 * 0.5 - 2.0)
            .collect();
        assert_eq!(conv1d_forward(&x, &w, &d), naive_conv(&x, &w, &d));
    }

    #[test]
    fn adjoint_identities_hold() {
        // <conv(x, w), g> == <x, input_grad(g, w)> == <w, weight_grad(x, g)>
        let d = ConvDims {
            batch: 2,
            c_in: 2,
            c_out: 3,
            kernel: 3,
            len_in: 6,
            len_out: 6,
            pad_left: 1,
        };
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..18).map(|i| (i as f64 * 0.71).cos()).collect();
        let g: Vec<f64> = (0..36).map(|i| (i as f64 * 0.13).sin() + 0.2).collect();
        let y = conv1d_forward(&x, &w, &d);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let dx = conv1d_input_grad(&g, &w, &d);
        let mid: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        let dw = conv1d_weight_grad(&x, &g, &d);
        let rhs: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - mid).abs() < 1e-12);
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
