//! Dense kernels on `[C, T, H, W]` activations and `[O, I, KT, KH, KW]` filters.
//!
//! The three convolution kernels are the partial contractions of a single
//! trilinear form `<y, conv(x, w)>`, so each one's adjoints are the other two.

/// Reflect index (`-1 -> 1`, `n -> n-2`); length-1 axes replicate.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn reflect_map(n: usize, pad: usize) -> Vec<usize> {
    (0..n + 2 * pad)
        .map(|k| reflect(k as isize - pad as isize, n))
        .collect()
}

pub fn padded_dims(dims: [usize; 4], pad: [usize; 3]) -> [usize; 4] {
    [
        dims[0],
        dims[1] + 2 * pad[0],
        dims[2] + 2 * pad[1],
        dims[3] + 2 * pad[2],
    ]
}

pub fn pad_reflect(x: &[f64], dims: [usize; 4], pad: [usize; 3]) -> Vec<f64> {
    let [c, t, h, w] = dims;
    let [_, tp, hp, wp] = padded_dims(dims, pad);
    let (mt, mh, mw) = (
        reflect_map(t, pad[0]),
        reflect_map(h, pad[1]),
        reflect_map(w, pad[2]),
    );
    let mut out = Vec::with_capacity(c * tp * hp * wp);
    for ci in 0..c {
        for &st in &mt {
            for &sh in &mh {
                let row = &x[((ci * t + st) * h + sh) * w..][..w];
                out.extend(mw.iter().map(|&sw| row[sw]));
            }
        }
    }
    out
}

/// Adjoint of [`pad_reflect`]: folds padded cotangents back onto their sources.
pub fn pad_reflect_adj(g: &[f64], dims: [usize; 4], pad: [usize; 3]) -> Vec<f64> {
    let [c, t, h, w] = dims;
    let [_, tp, hp, wp] = padded_dims(dims, pad);
    let (mt, mh, mw) = (
        reflect_map(t, pad[0]),
        reflect_map(h, pad[1]),
        reflect_map(w, pad[2]),
    );
    let mut out = vec![0.0; c * t * h * w];
    for ci in 0..c {
        for (a, &st) in mt.iter().enumerate() {
            for (b, &sh) in mh.iter().enumerate() {
                let src = &g[((ci * tp + a) * hp + b) * wp..][..wp];
                let dst = &mut out[((ci * t + st) * h + sh) * w..][..w];
                for (d, &sw) in mw.iter().enumerate() {
                    dst[sw] += src[d];
                }
            }
        }
    }
    out
}

/// Valid-mode cross-correlation.
pub fn conv(xp: &[f64], xd: [usize; 4], w: &[f64], wd: [usize; 5]) -> (Vec<f64>, [usize; 4]) {
    let [ci_n, tp, hp, wp] = xd;
    let [o_n, i_n, kt, kh, kw] = wd;
    assert_eq!(ci_n, i_n, "conv channel mismatch");
    let (t, h, wo) = (tp + 1 - kt, hp + 1 - kh, wp + 1 - kw);
    let mut out = vec![0.0; o_n * t * h * wo];
    for o in 0..o_n {
        for i in 0..i_n {
            for a in 0..kt {
                for b in 0..kh {
                    for d in 0..kw {
                        let wv = w[(((o * i_n + i) * kt + a) * kh + b) * kw + d];
                        for tt in 0..t {
                            for hh in 0..h {
                                let src = &xp[((i * tp + tt + a) * hp + hh + b) * wp + d..][..wo];
                                let dst = &mut out[((o * t + tt) * h + hh) * wo..][..wo];
                                for (y, &x) in dst.iter_mut().zip(src) {
                                    *y += wv * x;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [o_n, t, h, wo])
}

/// Transposed valid correlation: cotangent of [`conv`] with respect to its input.
pub fn conv_t(g: &[f64], gd: [usize; 4], w: &[f64], wd: [usize; 5]) -> (Vec<f64>, [usize; 4]) {
    let [o_n, t, h, wo] = gd;
    let [o2, i_n, kt, kh, kw] = wd;
    assert_eq!(o_n, o2, "conv_t channel mismatch");
    let (tp, hp, wp) = (t + kt - 1, h + kh - 1, wo + kw - 1);
    let mut out = vec![0.0; i_n * tp * hp * wp];
    for o in 0..o_n {
        for i in 0..i_n {
            for a in 0..kt {
                for b in 0..kh {
                    for d in 0..kw {
                        let wv = w[(((o * i_n + i) * kt + a) * kh + b) * kw + d];
                        for tt in 0..t {
                            for hh in 0..h {
                                let src = &g[((o * t + tt) * h + hh) * wo..][..wo];
                                let dst =
                                    &mut out[((i * tp + tt + a) * hp + hh + b) * wp + d..][..wo];
                                for (x, &y) in dst.iter_mut().zip(src) {
                                    *x += wv * y;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [i_n, tp, hp, wp])
}

/// Cotangent of [`conv`] with respect to its filter.
pub fn wgrad(xp: &[f64], xd: [usize; 4], g: &[f64], gd: [usize; 4]) -> (Vec<f64>, [usize; 5]) {
    let [i_n, tp, hp, wp] = xd;
    let [o_n, t, h, wo] = gd;
    let (kt, kh, kw) = (tp + 1 - t, hp + 1 - h, wp + 1 - wo);
    let mut out = vec![0.0; o_n * i_n * kt * kh * kw];
    for o in 0..o_n {
        for i in 0..i_n {
            for a in 0..kt {
                for b in 0..kh {
                    for d in 0..kw {
                        let mut acc = 0.0;
                        for tt in 0..t {
                            for hh in 0..h {
                                let src = &xp[((i * tp + tt + a) * hp + hh + b) * wp + d..][..wo];
                                let gy = &g[((o * t + tt) * h + hh) * wo..][..wo];
                                acc += src.iter().zip(gy).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                        out[(((o * i_n + i) * kt + a) * kh + b) * kw + d] = acc;
                    }
                }
            }
        }
    }
    (out, [o_n, i_n, kt, kh, kw])
}

/// 2x2 spatial average pooling.
pub fn pool2(x: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [c, t, h, w] = dims;
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; c * t * h2 * w2];
    for ct in 0..c * t {
        for i in 0..h2 {
            for j in 0..w2 {
                let base = ct * h * w;
                let s = x[base + 2 * i * w + 2 * j]
                    + x[base + 2 * i * w + 2 * j + 1]
                    + x[base + (2 * i + 1) * w + 2 * j]
                    + x[base + (2 * i + 1) * w + 2 * j + 1];
                out[(ct * h2 + i) * w2 + j] = 0.25 * s;
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn unpool2(x: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [c, t, h, w] = dims;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * t * h2 * w2];
    for ct in 0..c * t {
        for i in 0..h2 {
            for j in 0..w2 {
                out[(ct * h2 + i) * w2 + j] = x[(ct * h + i / 2) * w + j / 2];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn seq(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect()
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect_map(4, 2), vec![2, 1, 0, 1, 2, 3, 2, 1]);
        assert_eq!(reflect_map(1, 1), vec![0, 0, 0]);
    }

    #[test]
    fn pad_adjoint_identity() {
        let dims = [2, 3, 4, 5];
        let pad = [1, 1, 2];
        let x = seq(120, 0.37);
        let pd = padded_dims(dims, pad);
        let g = seq(pd.iter().product(), 0.91);
        let lhs = dot(&pad_reflect(&x, dims, pad), &g);
        let rhs = dot(&x, &pad_reflect_adj(&g, dims, pad));
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv_trilinear_identities() {
        let xd = [2, 4, 6, 7];
        let wd = [3, 2, 3, 3, 3];
        let x = seq(xd.iter().product(), 0.13);
        let w = seq(wd.iter().product(), 0.71);
        let (y, yd) = conv(&x, xd, &w, wd);
        assert_eq!(yd, [3, 2, 4, 5]);
        let g = seq(y.len(), 0.29);
        let form = dot(&g, &y);
        let (xt, xtd) = conv_t(&g, yd, &w, wd);
        assert_eq!(xtd, xd);
        let (wg, wgd) = wgrad(&x, xd, &g, yd);
        assert_eq!(wgd, wd);
        assert!((form - dot(&x, &xt)).abs() < 1e-11);
        assert!((form - dot(&w, &wg)).abs() < 1e-11);
    }

    #[test]
    fn pool_unpool_adjoint() {
        let dims = [2, 1, 4, 6];
        let x = seq(48, 0.5);
        let g = seq(12, 0.8);
        let lhs = dot(&pool2(&x, dims), &g);
        let rhs = 0.25 * dot(&x, &unpool2(&g, [2, 1, 2, 3]));
        assert!((lhs - rhs).abs() < 1e-13);
    }
}
