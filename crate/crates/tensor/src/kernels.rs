//! Raw loops behind the heavier graph ops. All buffers are dense NCHW.

use crate::elem::Elem;

/// Unfolds one C×H×W image into a (C·k·k)×(H·W) matrix for a stride-1,
/// zero-padded ("same") convolution with an odd kernel size k.
pub fn im2col<T: Elem>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * k * k * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    // valid x range: 0 <= x + dx < w
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    out[..x0.min(w)].fill(T::ZERO);
                    if x1 > x0 {
                        let s0 = (x0 as isize + dx) as usize;
                        out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                    if x1 < w {
                        out[x1.max(x0).min(w)..].fill(T::ZERO);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto the image.
pub fn col2im<T: Elem>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dxo).max(0) as usize;
                    let x1 = ((w as isize - dxo).min(w as isize)).max(0) as usize;
                    if x1 <= x0 {
                        continue;
                    }
                    let s0 = (x0 as isize + dxo) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

pub fn conv2d_forward<T: Elem>(x: &[T], weight: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let hw = d.h * d.w;
    let kk = d.cin * d.k * d.k;
    let mut out = vec![T::ZERO; d.n * d.cout * hw];
    let mut cols = if d.k == 1 { Vec::new() } else { vec![T::ZERO; kk * hw] };
    for b in 0..d.n {
        let xb = &x[b * d.cin * hw..(b + 1) * d.cin * hw];
        let ob = &mut out[b * d.cout * hw..(b + 1) * d.cout * hw];
        if let Some(bias) = bias {
            for (co, plane) in ob.chunks_exact_mut(hw).enumerate() {
                plane.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { T::ONE } else { T::ZERO };
        let rhs: &[T] = if d.k == 1 {
            xb
        } else {
            im2col(xb, d.cin, d.h, d.w, d.k, &mut cols);
            &cols
        };
        T::gemm(d.cout, kk, hw, weight, false, rhs, false, beta, ob);
    }
    out
}

/// Returns (dx, dweight, dbias).
pub fn conv2d_backward<T: Elem>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    d: &ConvDims,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let hw = d.h * d.w;
    let kk = d.cin * d.k * d.k;
    let mut dw = vec![T::ZERO; d.cout * kk];
    let mut db = vec![T::ZERO; d.cout];
    let mut dx = need_dx.then(|| vec![T::ZERO; d.n * d.cin * hw]);
    let mut cols = if d.k == 1 { Vec::new() } else { vec![T::ZERO; kk * hw] };
    let mut dcols = if d.k == 1 || !need_dx { Vec::new() } else { vec![T::ZERO; kk * hw] };
    for b in 0..d.n {
        let xb = &x[b * d.cin * hw..(b + 1) * d.cin * hw];
        let gb = &dout[b * d.cout * hw..(b + 1) * d.cout * hw];
        for (co, plane) in gb.chunks_exact(hw).enumerate() {
            db[co] += plane.iter().copied().sum::<T>();
        }
        let rhs: &[T] = if d.k == 1 {
            xb
        } else {
            im2col(xb, d.cin, d.h, d.w, d.k, &mut cols);
            &cols
        };
        // dW (cout×kk) += dout_b (cout×hw) · colsᵀ (hw×kk)
        T::gemm(d.cout, hw, kk, gb, false, rhs, true, T::ONE, &mut dw);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * d.cin * hw..(b + 1) * d.cin * hw];
            if d.k == 1 {
                T::gemm(kk, d.cout, hw, weight, true, gb, false, T::ZERO, dxb);
            } else {
                T::gemm(kk, d.cout, hw, weight, true, gb, false, T::ZERO, &mut dcols);
                col2im(&dcols, d.cin, d.h, d.w, d.k, dxb);
            }
        }
    }
    (dx, dw, db)
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Returns (output, per-(n,group) mean, per-(n,group) reciprocal std).
pub fn group_norm_forward<T: Elem>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = c / groups;
    let m = cpg * hw;
    let mut out = vec![T::ZERO; x.len()];
    let mut means = vec![T::ZERO; n * groups];
    let mut rstds = vec![T::ZERO; n * groups];
    let eps = T::from_f64(GROUP_NORM_EPS);
    let inv_m = T::from_f64(1.0 / m as f64);
    for b in 0..n {
        for g in 0..groups {
            let start = (b * c + g * cpg) * hw;
            let seg = &x[start..start + m];
            let mean = seg.iter().copied().sum::<T>() * inv_m;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
            let rstd = T::ONE / (var + eps).sqrt();
            means[b * groups + g] = mean;
            rstds[b * groups + g] = rstd;
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let off = start + ci * hw;
                let (ga, be) = (gamma[ch], beta[ch]);
                for (o, &v) in out[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                    *o = (v - mean) * rstd * ga + be;
                }
            }
        }
    }
    (out, means, rstds)
}

/// Returns (dx, dgamma, dbeta).
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Elem>(
    x: &[T],
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    dout: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = c / groups;
    let m = cpg * hw;
    let mut dx = vec![T::ZERO; x.len()];
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    let inv_m = T::from_f64(1.0 / m as f64);
    for b in 0..n {
        for g in 0..groups {
            let mean = means[b * groups + g];
            let rstd = rstds[b * groups + g];
            let start = (b * c + g * cpg) * hw;
            // sums of dxhat and dxhat·xhat over the group
            let mut s1 = T::ZERO;
            let mut s2 = T::ZERO;
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let off = start + ci * hw;
                let mut dg = T::ZERO;
                let mut dbt = T::ZERO;
                for (&v, &gy) in x[off..off + hw].iter().zip(&dout[off..off + hw]) {
                    let xhat = (v - mean) * rstd;
                    dg += gy * xhat;
                    dbt += gy;
                    let dxhat = gy * gamma[ch];
                    s1 += dxhat;
                    s2 += dxhat * xhat;
                }
                dgamma[ch] += dg;
                dbeta[ch] += dbt;
            }
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let off = start + ci * hw;
                for ((d, &v), &gy) in dx[off..off + hw]
                    .iter_mut()
                    .zip(&x[off..off + hw])
                    .zip(&dout[off..off + hw])
                {
                    let xhat = (v - mean) * rstd;
                    let dxhat = gy * gamma[ch];
                    *d = rstd * (dxhat - s1 * inv_m - xhat * s2 * inv_m);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
