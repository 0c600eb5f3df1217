//! Slice-level compute kernels shared by the tape and the functional API.

/// `C = A·B + beta·C` for row/column-strided `f64` matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    c_strides: (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= extent(m, k, a_strides), "gemm: A too short");
    assert!(b.len() >= extent(k, n, b_strides), "gemm: B too short");
    assert!(c.len() >= extent(m, n, c_strides), "gemm: C too short");
    // SAFETY: the extents above bound every element matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

/// Geometry of a batched 1-D convolution over `[batch, cin, t]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub t: usize,
    pub cout: usize,
    pub k: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvGeom {
    pub fn t_out(&self) -> usize {
        self.t + self.pad_left + self.pad_right + 1 - self.k
    }
}

const LANES: usize = 16;

#[inline(always)]
fn madd(a: f64, b: f64, c: f64) -> f64 {
    a.mul_add(b, c)
}

/// `out[co][t] += Σ_ci Σ_kk w[co][ci][kk] · src[ci][t + kk]` for
/// `t < out_len`; every `src` row must hold `out_len + k - 1` samples.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn correlate(
    src: &[f64],
    cin: usize,
    src_len: usize,
    w: &[f64],
    cout: usize,
    k: usize,
    out: &mut [f64],
    out_len: usize,
) {
    for co in 0..cout {
        let orow = &mut out[co * out_len..][..out_len];
        let mut t = 0;
        while t + LANES <= out_len {
            let mut acc = [0.0; LANES];
            acc.copy_from_slice(&orow[t..t + LANES]);
            for ci in 0..cin {
                let s = &src[ci * src_len + t..][..LANES + k - 1];
                let wr = &w[(co * cin + ci) * k..][..k];
                for (kk, &wv) in wr.iter().enumerate() {
                    let x = &s[kk..kk + LANES];
                    for l in 0..LANES {
                        acc[l] = madd(wv, x[l], acc[l]);
                    }
                }
            }
            orow[t..t + LANES].copy_from_slice(&acc);
            t += LANES;
        }
        for (tt, o) in orow.iter_mut().enumerate().skip(t) {
            let mut a = *o;
            for ci in 0..cin {
                let wr = &w[(co * cin + ci) * k..][..k];
                let s = &src[ci * src_len + tt..][..k];
                for kk in 0..k {
                    a = madd(wr[kk], s[kk], a);
                }
            }
            *o = a;
        }
    }
}

/// `dw[co][ci][kk] += Σ_t g[co][t] · src[ci][t + kk]`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn correlate_weights(
    g: &[f64],
    cout: usize,
    g_len: usize,
    src: &[f64],
    cin: usize,
    src_len: usize,
    k: usize,
    dw: &mut [f64],
) {
    for co in 0..cout {
        let grow = &g[co * g_len..][..g_len];
        for ci in 0..cin {
            let srow = &src[ci * src_len..][..src_len];
            let dst = &mut dw[(co * cin + ci) * k..][..k];
            let mut k0 = 0;
            while k0 + LANES <= k {
                let mut acc = [0.0; LANES];
                for (t, &gv) in grow.iter().enumerate() {
                    let x = &srow[t + k0..][..LANES];
                    for l in 0..LANES {
                        acc[l] = madd(gv, x[l], acc[l]);
                    }
                }
                for l in 0..LANES {
                    dst[k0 + l] += acc[l];
                }
                k0 += LANES;
            }
            for kk in k0..k {
                let mut a = 0.0;
                for (t, &gv) in grow.iter().enumerate() {
                    a = madd(gv, srow[t + kk], a);
                }
                dst[kk] += a;
            }
        }
    }
}

/// Zero-padded copy of one `[rows, t]` block as `[rows, left + t + right]`.
fn pad_rows(x: &[f64], rows: usize, t: usize, left: usize, right: usize) -> Vec<f64> {
    let len = left + t + right;
    let mut out = vec![0.0; rows * len];
    for r in 0..rows {
        out[r * len + left..][..t].copy_from_slice(&x[r * t..][..t]);
    }
    out
}

#[inline(always)]
fn conv_forward_body(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
    out: &mut [f64],
    correlate: impl Fn(&[f64], usize, usize, &[f64], usize, usize, &mut [f64], usize),
) {
    let t_out = g.t_out();
    let tp = g.t + g.pad_left + g.pad_right;
    for n in 0..g.batch {
        let xp = pad_rows(&x[n * g.cin * g.t..][..g.cin * g.t], g.cin, g.t, g.pad_left, g.pad_right);
        let dst = &mut out[n * g.cout * t_out..][..g.cout * t_out];
        if let Some(b) = bias {
            for (co, row) in dst.chunks_exact_mut(t_out).enumerate() {
                row.fill(b[co]);
            }
        }
        correlate(&xp, g.cin, tp, w, g.cout, g.k, dst, t_out);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn conv_backward_body(
    gout: &[f64],
    x: &[f64],
    w: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    correlate: impl Fn(&[f64], usize, usize, &[f64], usize, usize, &mut [f64], usize),
    correlate_weights: impl Fn(&[f64], usize, usize, &[f64], usize, usize, usize, &mut [f64]),
) {
    let t_out = g.t_out();
    let tp = g.t + g.pad_left + g.pad_right;
    // dx is a full correlation of the output gradient with the flipped,
    // transposed kernels.
    let w_flip: Vec<f64> = if dx.is_some() {
        let mut f = vec![0.0; w.len()];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                for kk in 0..g.k {
                    f[(ci * g.cout + co) * g.k + kk] = w[(co * g.cin + ci) * g.k + (g.k - 1 - kk)];
                }
            }
        }
        f
    } else {
        Vec::new()
    };
    for n in 0..g.batch {
        let gn = &gout[n * g.cout * t_out..][..g.cout * t_out];
        if let Some(dw) = dw.as_deref_mut() {
            let xp = pad_rows(&x[n * g.cin * g.t..][..g.cin * g.t], g.cin, g.t, g.pad_left, g.pad_right);
            correlate_weights(gn, g.cout, t_out, &xp, g.cin, tp, g.k, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let gp = pad_rows(gn, g.cout, t_out, g.k - 1, g.k - 1);
            let mut dxp = vec![0.0; g.cin * tp];
            correlate(&gp, g.cout, t_out + 2 * (g.k - 1), &w_flip, g.cin, g.k, &mut dxp, tp);
            let dst = &mut dx[n * g.cin * g.t..][..g.cin * g.t];
            for ci in 0..g.cin {
                for (d, s) in dst[ci * g.t..][..g.t].iter_mut().zip(&dxp[ci * tp + g.pad_left..]) {
                    *d += s;
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod fma {
    //! AVX2/FMA versions of the correlation kernels. Each lane performs the
    //! same fused multiply-adds in the same order as the scalar `mul_add`
    //! fallback, so both paths agree bit for bit.

    use std::arch::x86_64::*;

    use super::{ConvGeom, LANES};

    #[target_feature(enable = "avx2,fma")]
    #[allow(clippy::too_many_arguments)]
    pub(super) unsafe fn correlate(
        src: &[f64],
        cin: usize,
        src_len: usize,
        w: &[f64],
        cout: usize,
        k: usize,
        out: &mut [f64],
        out_len: usize,
    ) {
        assert!(src.len() >= cin * src_len && src_len + 1 >= out_len + k);
        assert!(w.len() >= cout * cin * k && out.len() >= cout * out_len);
        for co in 0..cout {
            let orow = out.as_mut_ptr().add(co * out_len);
            let mut t = 0;
            while t + LANES <= out_len {
                let mut a0 = _mm256_loadu_pd(orow.add(t));
                let mut a1 = _mm256_loadu_pd(orow.add(t + 4));
                let mut a2 = _mm256_loadu_pd(orow.add(t + 8));
                let mut a3 = _mm256_loadu_pd(orow.add(t + 12));
                for ci in 0..cin {
                    let s = src.as_ptr().add(ci * src_len + t);
                    let wr = w.as_ptr().add((co * cin + ci) * k);
                    for kk in 0..k {
                        let wv = _mm256_set1_pd(*wr.add(kk));
                        let x = s.add(kk);
                        a0 = _mm256_fmadd_pd(wv, _mm256_loadu_pd(x), a0);
                        a1 = _mm256_fmadd_pd(wv, _mm256_loadu_pd(x.add(4)), a1);
                        a2 = _mm256_fmadd_pd(wv, _mm256_loadu_pd(x.add(8)), a2);
                        a3 = _mm256_fmadd_pd(wv, _mm256_loadu_pd(x.add(12)), a3);
                    }
                }
                _mm256_storeu_pd(orow.add(t), a0);
                _mm256_storeu_pd(orow.add(t + 4), a1);
                _mm256_storeu_pd(orow.add(t + 8), a2);
                _mm256_storeu_pd(orow.add(t + 12), a3);
                t += LANES;
            }
            for tt in t..out_len {
                let mut a = *orow.add(tt);
                for ci in 0..cin {
                    for kk in 0..k {
                        a = w[(co * cin + ci) * k + kk].mul_add(src[ci * src_len + tt + kk], a);
                    }
                }
                *orow.add(tt) = a;
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    #[allow(clippy::too_many_arguments)]
    pub(super) unsafe fn correlate_weights(
        g: &[f64],
        cout: usize,
        g_len: usize,
        src: &[f64],
        cin: usize,
        src_len: usize,
        k: usize,
        dw: &mut [f64],
    ) {
        assert!(g.len() >= cout * g_len && src.len() >= cin * src_len && src_len + 1 >= g_len + k);
        assert!(dw.len() >= cout * cin * k);
        for co in 0..cout {
            let grow = &g[co * g_len..][..g_len];
            for ci in 0..cin {
                let srow = src.as_ptr().add(ci * src_len);
                let base = (co * cin + ci) * k;
                let mut k0 = 0;
                while k0 + LANES <= k {
                    let mut a0 = _mm256_setzero_pd();
                    let mut a1 = _mm256_setzero_pd();
                    let mut a2 = _mm256_setzero_pd();
                    let mut a3 = _mm256_setzero_pd();
                    for (t, &gv) in grow.iter().enumerate() {
                        let gv = _mm256_set1_pd(gv);
                        let x = srow.add(t + k0);
                        a0 = _mm256_fmadd_pd(gv, _mm256_loadu_pd(x), a0);
                        a1 = _mm256_fmadd_pd(gv, _mm256_loadu_pd(x.add(4)), a1);
                        a2 = _mm256_fmadd_pd(gv, _mm256_loadu_pd(x.add(8)), a2);
                        a3 = _mm256_fmadd_pd(gv, _mm256_loadu_pd(x.add(12)), a3);
                    }
                    let mut lanes = [0.0; LANES];
                    _mm256_storeu_pd(lanes.as_mut_ptr(), a0);
                    _mm256_storeu_pd(lanes.as_mut_ptr().add(4), a1);
                    _mm256_storeu_pd(lanes.as_mut_ptr().add(8), a2);
                    _mm256_storeu_pd(lanes.as_mut_ptr().add(12), a3);
                    for l in 0..LANES {
                        dw[base + k0 + l] += lanes[l];
                    }
                    k0 += LANES;
                }
                for kk in k0..k {
                    let mut a = 0.0;
                    for (t, &gv) in grow.iter().enumerate() {
                        a = gv.mul_add(*srow.add(t + kk), a);
                    }
                    dw[base + kk] += a;
                }
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom, out: &mut [f64]) {
        super::conv_forward_body(x, w, bias, g, out, |s, ci, sl, w, co, k, o, ol| correlate(s, ci, sl, w, co, k, o, ol))
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn backward(
        gout: &[f64],
        x: &[f64],
        w: &[f64],
        g: &ConvGeom,
        dx: Option<&mut [f64]>,
        dw: Option<&mut [f64]>,
    ) {
        super::conv_backward_body(
            gout,
            x,
            w,
            g,
            dx,
            dw,
            |s, ci, sl, w, co, k, o, ol| correlate(s, ci, sl, w, co, k, o, ol),
            |gg, co, gl, s, ci, sl, k, d| correlate_weights(gg, co, gl, s, ci, sl, k, d),
        )
    }
}

fn has_fma() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Direct forward convolution into `[batch, cout, t_out]`.
pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.cout * g.t_out()];
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the CPU supports AVX2 and FMA, checked just above.
        unsafe { fma::forward(x, w, bias, g, &mut out) };
        return out;
    }
    conv_forward_body(x, w, bias, g, &mut out, correlate);
    out
}

/// Backward convolution: accumulates into `dx`, `dw` and optionally `db`.
pub(crate) fn conv1d_backward(
    gout: &[f64],
    x: &[f64],
    w: &[f64],
    g: &ConvGeom,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let t_out = g.t_out();
    if let Some(db) = db {
        for n in 0..g.batch {
            for co in 0..g.cout {
                db[co] += gout[(n * g.cout + co) * t_out..][..t_out].iter().sum::<f64>();
            }
        }
    }
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the CPU supports AVX2 and FMA, checked just above.
        unsafe { fma::backward(gout, x, w, g, dx, dw) };
        return;
    }
    conv_backward_body(gout, x, w, g, dx, dw, correlate, correlate_weights);
}

/// Source index and blend weight for each output sample of a linear
/// resampling from `t` to `t_target` samples over normalized time.
pub(crate) fn interp_plan(t: usize, t_target: usize) -> Vec<(usize, f64)> {
    (0..t_target)
        .map(|j| {
            if t_target == 1 || t == 1 {
                return (0, 0.0);
            }
            let pos = (j * (t - 1)) as f64 / (t_target - 1) as f64;
            let i0 = (pos.floor() as usize).min(t - 1);
            let w = pos - i0 as f64;
            if i0 == t - 1 {
                (t - 2, 1.0)
            } else {
                (i0, w)
            }
        })
        .collect()
}

pub(crate) fn interp_forward(x: &[f64], rows: usize, t: usize, plan: &[(usize, f64)]) -> Vec<f64> {
    let tt = plan.len();
    let mut out = vec![0.0; rows * tt];
    for r in 0..rows {
        let src = &x[r * t..][..t];
        for (o, &(i0, w)) in out[r * tt..][..tt].iter_mut().zip(plan) {
            *o = if w == 0.0 {
                src[i0]
            } else if w == 1.0 {
                src[i0 + 1]
            } else {
                (1.0 - w) * src[i0] + w * src[i0 + 1]
            };
        }
    }
    out
}

pub(crate) fn interp_backward(g: &[f64], rows: usize, t: usize, plan: &[(usize, f64)], dx: &mut [f64]) {
    let tt = plan.len();
    for r in 0..rows {
        let dst = &mut dx[r * t..][..t];
        for (&go, &(i0, w)) in g[r * tt..][..tt].iter().zip(plan) {
            if w == 0.0 {
                dst[i0] += go;
            } else if w == 1.0 {
                dst[i0 + 1] += go;
            } else {
                dst[i0] += (1.0 - w) * go;
                dst[i0 + 1] += w * go;
            }
        }
    }
}

/// Softmax over `axis` of a tensor viewed as `[outer, dim, inner]`.
pub(crate) fn softmax_strided(x: &[f64], outer: usize, dim: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * dim * inner + i;
            let max = (0..dim).map(|d| x[base + d * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for d in 0..dim {
                let e = (x[base + d * inner] - max).exp();
                out[base + d * inner] = e;
                total += e;
            }
            for d in 0..dim {
                out[base + d * inner] /= total;
            }
        }
    }
    out
}

pub(crate) fn log_softmax_row(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Logistic function clamped to the open interval `(0, 1)` so that
/// saturated inputs never produce an exact 0 or 1.
pub(crate) fn sigmoid(v: f64) -> f64 {
    const UPPER: f64 = 1.0 - f64::EPSILON / 2.0;
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, UPPER)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interp_plan_hits_endpoints() {
        let plan = interp_plan(10, 7);
        assert_eq!(plan[0], (0, 0.0));
        assert_eq!(plan[6], (8, 1.0));
    }

    #[test]
    fn gemm_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, (2, 1), &b, (2, 1), &mut c, (2, 1), 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }
}
