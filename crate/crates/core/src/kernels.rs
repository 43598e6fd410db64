//! Low-level f32 routines behind the tape ops. Inner loops are written in
//! axpy/chunked-dot form so LLVM can vectorize them without reassociation.

/// y += alpha * x
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * *xi;
    }
}

/// Dot product with 8 parallel accumulators (keeps the reduction vectorizable).
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ai = &a[c * 8..c * 8 + 8];
        let bi = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += ai[l] * bi[l];
        }
    }
    let mut s = acc.iter().sum::<f32>();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// out[m×n] += a[m×k] · b[k×n]
pub fn gemm_nn(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], orow);
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub fn gemm_nt(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub fn gemm_tn(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], brow, &mut out[p * n..(p + 1) * n]);
        }
    }
}

pub fn conv1d_out_len(lin: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = lin + 2 * pad;
    if padded < k {
        return None;
    }
    let lout = (padded - k) / stride + 1;
    if lout == 0 {
        None
    } else {
        Some(lout)
    }
}

pub fn convt1d_out_len(lin: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (lin - 1) * stride + k;
    if full < 2 * pad {
        return None;
    }
    let lout = full - 2 * pad;
    if lout == 0 {
        None
    } else {
        Some(lout)
    }
}

/// Valid output range [l0, l1) for a given tap, so x index l*stride + t - pad
/// stays in bounds. Keeps the bounds check out of the inner loop.
#[inline]
fn tap_range(lout: usize, lin: usize, stride: usize, pad: usize, t: usize) -> (usize, usize) {
    // need 0 <= l*stride + t - pad < lin
    let l0 = if t >= pad { 0 } else { (pad - t + stride - 1) / stride };
    let max_x = lin + pad;
    let l1 = if t >= max_x { 0 } else { ((max_x - t - 1) / stride + 1).min(lout) };
    (l0.min(lout), l1)
}

///// Tap offset decomposed for stride-2 phase arithmetic: index
/// `2l + t - pad = 2(l + q) + p` with parity p and phase shift q.
#[inline]
fn phase_of(t: usize, pad: usize) -> (usize, isize) {
    let d = t as isize - pad as isize;
    let p = d.rem_euclid(2);
    (p as usize, (d - p) / 2)
}

/// Valid output range [l0, l1) so that the phase index l + q lies in
/// [0, plen) and l stays under lmax.
#[inline]
fn phase_range(q: isize, plen: usize, lmax: usize) -> (usize, usize) {
    let l0 = (-q).max(0) as usize;
    let hi = plen as isize - q;
    if hi <= l0 as isize {
        return (0, 0);
    }
    (l0.min(lmax), (hi as usize).min(lmax))
}

/// Split a row into even/odd sample phases, so a stride-2 tap becomes a
/// contiguous (vectorizable) slice operation on one phase.
#[inline]
fn split_phases(row: &[f32], buf: &mut [f32]) {
    let ne = row.len().div_ceil(2);
    for (m, v) in row.iter().step_by(2).enumerate() {
        buf[m] = *v;
    }
    for (m, v) in row.iter().skip(1).step_by(2).enumerate() {
        buf[ne + m] = *v;
    }
}

#[inline]
fn merge_phases_add(buf: &[f32], row: &mut [f32]) {
    let ne = row.len().div_ceil(2);
    for (m, v) in row.iter_mut().step_by(2).enumerate() {
        *v += buf[m];
    }
    for (m, v) in row.iter_mut().skip(1).step_by(2).enumerate() {
        *v += buf[ne + m];
    }
}

#[inline]
fn phase_slice(buf: &[f32], n: usize, p: usize) -> &[f32] {
    let ne = n.div_ceil(2);
    if p == 0 {
        &buf[..ne]
    } else {
        &buf[ne..ne + n / 2]
    }
}

#[inline]
fn phase_slice_mut(buf: &mut [f32], n: usize, p: usize) -> &mut [f32] {
    let ne = n.div_ceil(2);
    if p == 0 {
        &mut buf[..ne]
    } else {
        &mut buf[ne..ne + n / 2]
    }
}

/// Cross-correlation convolution. x: [cin×lin], w: [cout×cin×k], b: [cout],
/// out: [cout×lout] (overwritten).
pub fn conv1d_fwd(
    out: &mut [f32],
    x: &[f32],
    w: &[f32],
    b: &[f32],
    cin: usize,
    lin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
) {
    for co in 0..cout {
        out[co * lout..(co + 1) * lout].fill(b[co]);
    }
    if stride == 2 {
        // phase-decompose x once, then every tap is a contiguous axpy
        let mut phases = vec![0.0f32; cin * lin];
        for ci in 0..cin {
            split_phases(&x[ci * lin..(ci + 1) * lin], &mut phases[ci * lin..(ci + 1) * lin]);
        }
        for co in 0..cout {
            let orow = &mut out[co * lout..(co + 1) * lout];
            for ci in 0..cin {
                for t in 0..k {
                    let wv = w[(co * cin + ci) * k + t];
                    let (p, q) = phase_of(t, pad);
                    let ph = phase_slice(&phases[ci * lin..(ci + 1) * lin], lin, p);
                    let (l0, l1) = phase_range(q, ph.len(), lout);
                    if l1 > l0 {
                        let po = (l0 as isize + q) as usize;
                        axpy(wv, &ph[po..po + (l1 - l0)], &mut orow[l0..l1]);
                    }
                }
            }
        }
        return;
    }
    for co in 0..cout {
        let orow = &mut out[co * lout..(co + 1) * lout];
        for ci in 0..cin {
            let xrow = &x[ci * lin..(ci + 1) * lin];
            for t in 0..k {
                let wv = w[(co * cin + ci) * k + t];
                let (l0, l1) = tap_range(lout, lin, stride, pad, t);
                if stride == 1 {
                    let off = t as isize - pad as isize;
                    let xs = &xrow[(l0 as isize + off) as usize..(l1 as isize + off) as usize];
                    axpy(wv, xs, &mut orow[l0..l1]);
                } else {
                    for l in l0..l1 {
                        orow[l] += wv * xrow[l * stride + t - pad];
                    }
                }
            }
        }
    }
}

/// Gradient of conv1d w.r.t. x. dx accumulated.
pub fn conv1d_bwd_x(
    dx: &mut [f32],
    dout: &[f32],
    w: &[f32],
    cin: usize,
    lin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
) {
    if stride == 2 {
        // accumulate into x phase buffers, merge back at the end
        let mut dphases = vec![0.0f32; cin * lin];
        for co in 0..cout {
            let gorow = &dout[co * lout..(co + 1) * lout];
            for ci in 0..cin {
                for t in 0..k {
                    let wv = w[(co * cin + ci) * k + t];
                    let (p, q) = phase_of(t, pad);
                    let ph = phase_slice_mut(&mut dphases[ci * lin..(ci + 1) * lin], lin, p);
                    let (l0, l1) = phase_range(q, ph.len(), lout);
                    if l1 > l0 {
                        let po = (l0 as isize + q) as usize;
                        axpy(wv, &gorow[l0..l1], &mut ph[po..po + (l1 - l0)]);
                    }
                }
            }
        }
        for ci in 0..cin {
            merge_phases_add(&dphases[ci * lin..(ci + 1) * lin], &mut dx[ci * lin..(ci + 1) * lin]);
        }
        return;
    }
    for co in 0..cout {
        let gorow = &dout[co * lout..(co + 1) * lout];
        for ci in 0..cin {
            let dxrow = &mut dx[ci * lin..(ci + 1) * lin];
            for t in 0..k {
                let wv = w[(co * cin + ci) * k + t];
                let (l0, l1) = tap_range(lout, lin, stride, pad, t);
                if stride == 1 {
                    let off = t as isize - pad as isize;
                    let xs = &mut dxrow[(l0 as isize + off) as usize..(l1 as isize + off) as usize];
                    axpy(wv, &gorow[l0..l1], xs);
                } else {
                    for l in l0..l1 {
                        dxrow[l * stride + t - pad] += wv * gorow[l];
                    }
                }
            }
        }
    }
}

/// Gradients of conv1d w.r.t. w and b. Accumulated.
pub fn conv1d_bwd_w(
    dw: &mut [f32],
    db: &mut [f32],
    dout: &[f32],
    x: &[f32],
    cin: usize,
    lin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
) {
    if stride == 2 {
        let mut phases = vec![0.0f32; cin * lin];
        for ci in 0..cin {
            split_phases(&x[ci * lin..(ci + 1) * lin], &mut phases[ci * lin..(ci + 1) * lin]);
        }
        for co in 0..cout {
            let gorow = &dout[co * lout..(co + 1) * lout];
            db[co] += gorow.iter().sum::<f32>();
            for ci in 0..cin {
                for t in 0..k {
                    let (p, q) = phase_of(t, pad);
                    let ph = phase_slice(&phases[ci * lin..(ci + 1) * lin], lin, p);
                    let (l0, l1) = phase_range(q, ph.len(), lout);
                    if l1 > l0 {
                        let po = (l0 as isize + q) as usize;
                        dw[(co * cin + ci) * k + t] +=
                            dot(&gorow[l0..l1], &ph[po..po + (l1 - l0)]);
                    }
                }
            }
        }
        return;
    }
    for co in 0..cout {
        let gorow = &dout[co * lout..(co + 1) * lout];
        db[co] += gorow.iter().sum::<f32>();
        for ci in 0..cin {
            let xrow = &x[ci * lin..(ci + 1) * lin];
            for t in 0..k {
                let (l0, l1) = tap_range(lout, lin, stride, pad, t);
                let g = if stride == 1 {
                    let off = t as isize - pad as isize;
                    dot(
                        &gorow[l0..l1],
                        &xrow[(l0 as isize + off) as usize..(l1 as isize + off) as usize],
                    )
                } else {
                    let mut s = 0.0;
                    for l in l0..l1 {
                        s += gorow[l] * xrow[l * stride + t - pad];
                    }
                    s
                };
                dw[(co * cin + ci) * k + t] += g;
            }
        }
    }
}

/// Transposed convolution (adjoint of conv1d geometry). x: [cin×lin],
/// w: [cin×cout×k], b: [cout], out: [cout×lout] (overwritten).
pub fn convt1d_fwd(
    out: &mut [f32],
    x: &[f32],
    w: &[f32],
    b: &[f32],
    cin: usize,
    lin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
) {
    for co in 0..cout {
        out[co * lout..(co + 1) * lout].fill(b[co]);
    }
    // out[co][l*stride + t - pad] += w[ci][co][t] * x[ci][l]
    if stride == 2 {
        // Accumulate into even/odd output phase buffers so each tap is a
        // contiguous axpy, then fold them back on top of the bias fill.
        let mut ophases = vec![0.0f32; cout * lout];
        for ci in 0..cin {
            let xrow = &x[ci * lin..(ci + 1) * lin];
            for co in 0..cout {
                let obuf = &mut ophases[co * lout..(co + 1) * lout];
                for t in 0..k {
                    let (p, q) = phase_of(t, pad);
                    let ph = phase_slice_mut(obuf, lout, p);
                    let (l0, l1) = phase_range(q, ph.len(), lin);
                    if l1 > l0 {
                        let po = (l0 as isize + q) as usize;
                        let wv = w[(ci * cout + co) * k + t];
                        axpy(wv, &xrow[l0..l1], &mut ph[po..po + (l1 - l0)]);
                    }
                }
            }
        }
        for co in 0..cout {
            merge_phases_add(&ophases[co * lout..(co + 1) * lout], &mut out[co * lout..(co + 1) * lout]);
        }
        return;
    }
    for ci in 0..cin {
        let xrow = &x[ci * lin..(ci + 1) * lin];
        for co in 0..cout {
            let orow = &mut out[co * lout..(co + 1) * lout];
            for t in 0..k {
                let wv = w[(ci * cout + co) * k + t];
                let (l0, l1) = tap_range(lin, lout, stride, pad, t);
                if stride == 1 {
                    let off = t as isize - pad as isize;
                    let os = &mut orow[(l0 as isize + off) as usize..(l1 as isize + off) as usize];
                    axpy(wv, &xrow[l0..l1], os);
                } else {
                    for l in l0..l1 {
                        orow[l * stride + t - pad] += wv * xrow[l];
                    }
                }
            }
        }
    }
}

pub fn convt1d_bwd_x(
    dx: &mut [f32],
    dout: &[f32],
    w: &[f32],
    cin: usize,
    lin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
) {
    if stride == 2 {
        let mut gphases = vec![0.0f32; cout * lout];
        for co in 0..cout {
            split_phases(&dout[co * lout..(co + 1) * lout], &mut gphases[co * lout..(co + 1) * lout]);
        }
        for ci in 0..cin {
            let dxrow = &mut dx[ci * lin..(ci + 1) * lin];
            for co in 0..cout {
                for t in 0..k {
                    let (p, q) = phase_of(t, pad);
                    let gph = phase_slice(&gphases[co * lout..(co + 1) * lout], lout, p);
                    let (l0, l1) = phase_range(q, gph.len(), lin);
                    if l1 > l0 {
                        let po = (l0 as isize + q) as usize;
                        let wv = w[(ci * cout + co) * k + t];
                        axpy(wv, &gph[po..po + (l1 - l0)], &mut dxrow[l0..l1]);
                    }
                }
            }
        }
        return;
    }
    for ci in 0..cin {
        let dxrow = &mut dx[ci * lin..(ci + 1) * lin];
        for co in 0..cout {
            let gorow = &dout[co * lout..(co + 1) * lout];
            for t in 0..k {
                let wv = w[(ci * cout + co) * k + t];
                let (l0, l1) = tap_range(lin, lout, stride, pad, t);
                if stride == 1 {
                    let off = t as isize - pad as isize;
                    let gs = &gorow[(l0 as isize + off) as usize..(l1 as isize + off) as usize];
                    axpy(wv, gs, &mut dxrow[l0..l1]);
                } else {
                    for l in l0..l1 {
                        dxrow[l] += wv * gorow[l * stride + t - pad];
                    }
                }
            }
        }
    }
}

pub fn convt1d_bwd_w(
    dw: &mut [f32],
    db: &mut [f32],
    dout: &[f32],
    x: &[f32],
    cin: usize,
    lin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
) {
    for co in 0..cout {
        db[co] += dout[co * lout..(co + 1) * lout].iter().sum::<f32>();
    }
    if stride == 2 {
        let mut gphases = vec![0.0f32; cout * lout];
        for co in 0..cout {
            split_phases(&dout[co * lout..(co + 1) * lout], &mut gphases[co * lout..(co + 1) * lout]);
        }
        for ci in 0..cin {
            let xrow = &x[ci * lin..(ci + 1) * lin];
            for co in 0..cout {
                for t in 0..k {
                    let (p, q) = phase_of(t, pad);
                    let gph = phase_slice(&gphases[co * lout..(co + 1) * lout], lout, p);
                    let (l0, l1) = phase_range(q, gph.len(), lin);
                    if l1 > l0 {
                        let po = (l0 as isize + q) as usize;
                        dw[(ci * cout + co) * k + t] +=
                            dot(&xrow[l0..l1], &gph[po..po + (l1 - l0)]);
                    }
                }
            }
        }
        return;
    }
    for ci in 0..cin {
        let xrow = &x[ci * lin..(ci + 1) * lin];
        for co in 0..cout {
            let gorow = &dout[co * lout..(co + 1) * lout];
            for t in 0..k {
                let (l0, l1) = tap_range(lin, lout, stride, pad, t);
                let g = if stride == 1 {
                    let off = t as isize - pad as isize;
                    dot(
                        &xrow[l0..l1],
                        &gorow[(l0 as isize + off) as usize..(l1 as isize + off) as usize],
                    )
                } else {
                    let mut s = 0.0;
                    for l in l0..l1 {
                        s += xrow[l] * gorow[l * stride + t - pad];
                    }
                    s
                };
                dw[(ci * cout + co) * k + t] += g;
            }
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

/// gelu value together with the inner tanh, so backward can reuse it instead
/// of paying for a second tanh evaluation.
#[inline]
pub fn gelu_parts(x: f32) -> (f32, f32) {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    (0.5 * x * (1.0 + t), t)
}

#[inline]
pub fn gelu_grad_from_tanh(x: f32, t: f32) -> f32 {
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// In-place softmax of a slice with max-shift.
#[inline]
pub fn softmax_inplace(row: &mut [f32]) {
    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    let inv = 1.0 / s;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// log(sum(exp(row))) with max-shift.
#[inline]
pub fn logsumexp(row: &[f32]) -> f32 {
    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let s: f32 = row.iter().map(|v| (v - mx).exp()).sum();
    mx + s.ln()
}
