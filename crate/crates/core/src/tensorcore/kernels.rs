//! Inner loops behind the tape ops. Everything here is deterministic:
//! fixed iteration order, no threading, no fast-math reassociation beyond
//! what the gemm backend does consistently on one machine.

use super::element::Element;

/// `c = alpha * a @ b + beta * c` for contiguous row-major buffers.
pub fn gemm_nn<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += a @ b^T` where `a` is m×n and `b` is k×n (so `b^T` is n×k).
/// Used by matmul backward for the left operand.
pub fn gemm_nt_acc<T: Element>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    if m == 0 || k == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            n,
            k,
            T::one(),
            a.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            T::one(),
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `c += a^T @ b` where `a` is m×k and `b` is m×n (so `a^T` is k×m).
/// Used by matmul backward for the right operand.
pub fn gemm_tn_acc<T: Element>(k: usize, m: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if k == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            k,
            m,
            n,
            T::one(),
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            T::one(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-segmented masked softmax forward.
///
/// Each row of `x` (rows × cols, cols = segs * seg) is split into `segs`
/// contiguous segments of width `seg`; softmax normalizes each segment
/// independently. `mask[row * cols + col] == false` excludes an entry:
/// its output is exactly 0 and it contributes nothing to the normalizer.
/// A fully masked segment yields all zeros.
pub fn softmax_seg_fwd<T: Element>(
    x: &[T],
    rows: usize,
    cols: usize,
    seg: usize,
    mask: Option<&[bool]>,
    y: &mut [T],
) {
    debug_assert_eq!(cols % seg, 0);
    for r in 0..rows {
        let base = r * cols;
        for s in (0..cols).step_by(seg) {
            let lo = base + s;
            let hi = lo + seg;
            let xs = &x[lo..hi];
            let ms = mask.map(|m| &m[lo..hi]);
            let live = |j: usize| ms.map_or(true, |m| m[j]);

            let mut maxv = T::neg_infinity();
            for j in 0..seg {
                if live(j) && xs[j] > maxv {
                    maxv = xs[j];
                }
            }
            if maxv == T::neg_infinity() {
                for v in &mut y[lo..hi] {
                    *v = T::zero();
                }
                continue;
            }
            let ys = &mut y[lo..hi];
            match ms {
                // select instead of branch so the exp lane vectorizes
                Some(m) => {
                    for j in 0..seg {
                        let e = (xs[j] - maxv).exp_lane();
                        ys[j] = if m[j] { e } else { T::zero() };
                    }
                }
                None => {
                    for j in 0..seg {
                        ys[j] = (xs[j] - maxv).exp_lane();
                    }
                }
            }
            let mut denom = T::zero();
            for &v in ys.iter() {
                denom = denom + v;
            }
            for v in ys.iter_mut() {
                *v = *v / denom;
            }
        }
    }
}

/// Backward of [`softmax_seg_fwd`]: `dx = y ⊙ (g − Σ_seg(g ⊙ y))`.
/// Masked entries have `y == 0`, which zeroes their gradient automatically.
pub fn softmax_seg_bwd<T: Element>(
    y: &[T],
    g: &[T],
    rows: usize,
    cols: usize,
    seg: usize,
    dx: &mut [T],
) {
    for r in 0..rows {
        let base = r * cols;
        for s in (0..cols).step_by(seg) {
            let lo = base + s;
            let hi = lo + seg;
            let mut dot = T::zero();
            for j in lo..hi {
                dot = dot + g[j] * y[j];
            }
            for j in lo..hi {
                dx[j] = dx[j] + y[j] * (g[j] - dot);
            }
        }
    }
}

/// Copy one sample/head tile out of the interleaved layout. `rows` rows of
/// width `dh` taken at stride `d`, starting at `base`.
#[inline]
fn pack_tile<T: Element>(src: &[T], base: usize, rows: usize, d: usize, dh: usize, dst: &mut [T]) {
    for j in 0..rows {
        dst[j * dh..(j + 1) * dh].copy_from_slice(&src[base + j * d..base + j * d + dh]);
    }
}

/// `dst_rows[0..dh] += scale * src_rows[0..dh]` for packed tiles, written so
/// the inner loop is over independent output lanes (vectorizes cleanly).
#[inline]
fn fma_row<T: Element>(dst: &mut [T], src: &[T], scale: T) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o = *o + scale * s;
    }
}

/// Multi-head attention scores.
///
/// `q` is (b*r)×(heads*dh) and `k` is (b*t)×(heads*dh), both row-major with
/// sample-major blocking (sample 0's rows first). Output is
/// (b*r)×(heads*t): for query row `i` of sample `s`, head `h`, key `j`,
/// `out[s*r+i, h*t+j] = q_slice · k_slice / sqrt(dh)`.
#[allow(clippy::too_many_arguments)]
pub fn attn_scores_fwd<T: Element>(
    q: &[T],
    k: &[T],
    b: usize,
    r: usize,
    t: usize,
    heads: usize,
    dh: usize,
    out: &mut [T],
) {
    let d = heads * dh;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    // K tile transposed to dh×t so score rows accumulate lane-parallel
    let mut kt = vec![T::zero(); dh * t];
    for s in 0..b {
        for h in 0..heads {
            for j in 0..t {
                let krow = &k[(s * t + j) * d + h * dh..(s * t + j) * d + (h + 1) * dh];
                for x in 0..dh {
                    kt[x * t + j] = krow[x];
                }
            }
            for i in 0..r {
                let qh = &q[(s * r + i) * d + h * dh..(s * r + i) * d + (h + 1) * dh];
                let orow = &mut out[(s * r + i) * heads * t + h * t..(s * r + i) * heads * t + (h + 1) * t];
                for x in 0..dh {
                    fma_row(orow, &kt[x * t..(x + 1) * t], qh[x]);
                }
                for o in orow.iter_mut() {
                    *o = *o * scale;
                }
            }
        }
    }
}

/// Backward of [`attn_scores_fwd`] accumulating into `dq`/`dk`.
#[allow(clippy::too_many_arguments)]
pub fn attn_scores_bwd<T: Element>(
    q: &[T],
    k: &[T],
    g: &[T],
    b: usize,
    r: usize,
    t: usize,
    heads: usize,
    dh: usize,
    dq: &mut [T],
    dk: &mut [T],
) {
    let d = heads * dh;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut kp = vec![T::zero(); t * dh];
    for s in 0..b {
        for h in 0..heads {
            pack_tile(k, s * t * d + h * dh, t, d, dh, &mut kp);
            for i in 0..r {
                let grow = &g[(s * r + i) * heads * t + h * t..(s * r + i) * heads * t + (h + 1) * t];
                let qoff = (s * r + i) * d + h * dh;
                // dQ_i += Σ_j (g_ij · scale) K_j
                for j in 0..t {
                    let gv = grow[j] * scale;
                    if gv != T::zero() {
                        fma_row(&mut dq[qoff..qoff + dh], &kp[j * dh..(j + 1) * dh], gv);
                    }
                }
                // dK_j += (g_ij · scale) Q_i
                let qh = &q[qoff..qoff + dh];
                for j in 0..t {
                    let gv = grow[j] * scale;
                    if gv != T::zero() {
                        let koff = (s * t + j) * d + h * dh;
                        fma_row(&mut dk[koff..koff + dh], qh, gv);
                    }
                }
            }
        }
    }
}

/// Weighted value aggregation: `out[s*r+i, h*dh+x] = Σ_j w[s*r+i, h*t+j] * v[s*t+j, h*dh+x]`.
#[allow(clippy::too_many_arguments)]
pub fn attn_apply_fwd<T: Element>(
    w: &[T],
    v: &[T],
    b: usize,
    r: usize,
    t: usize,
    heads: usize,
    dh: usize,
    out: &mut [T],
) {
    let d = heads * dh;
    let mut vp = vec![T::zero(); t * dh];
    for s in 0..b {
        for h in 0..heads {
            pack_tile(v, s * t * d + h * dh, t, d, dh, &mut vp);
            for i in 0..r {
                let wrow = &w[(s * r + i) * heads * t + h * t..(s * r + i) * heads * t + (h + 1) * t];
                let ooff = (s * r + i) * d + h * dh;
                for j in 0..t {
                    let wv = wrow[j];
                    if wv != T::zero() {
                        fma_row(&mut out[ooff..ooff + dh], &vp[j * dh..(j + 1) * dh], wv);
                    }
                }
            }
        }
    }
}

/// Backward of [`attn_apply_fwd`] accumulating into `dw`/`dv`.
#[allow(clippy::too_many_arguments)]
pub fn attn_apply_bwd<T: Element>(
    w: &[T],
    v: &[T],
    g: &[T],
    b: usize,
    r: usize,
    t: usize,
    heads: usize,
    dh: usize,
    dw: &mut [T],
    dv: &mut [T],
) {
    let d = heads * dh;
    // V tile transposed to dh×t: dW rows then accumulate lane-parallel over j
    let mut vt = vec![T::zero(); dh * t];
    for s in 0..b {
        for h in 0..heads {
            for j in 0..t {
                let vrow = &v[(s * t + j) * d + h * dh..(s * t + j) * d + (h + 1) * dh];
                for x in 0..dh {
                    vt[x * t + j] = vrow[x];
                }
            }
            for i in 0..r {
                let gh = &g[(s * r + i) * d + h * dh..(s * r + i) * d + (h + 1) * dh];
                let woff = (s * r + i) * heads * t + h * t;
                // dW_ij += Σ_x g_ix V_jx   (outer loop x keeps j lanes independent)
                for x in 0..dh {
                    fma_row(&mut dw[woff..woff + t], &vt[x * t..(x + 1) * t], gh[x]);
                }
                // dV_j += w_ij g_i
                let wrow = &w[woff..woff + t];
                for j in 0..t {
                    let wv = wrow[j];
                    if wv != T::zero() {
                        let voff = (s * t + j) * d + h * dh;
                        fma_row(&mut dv[voff..voff + dh], gh, wv);
                    }
                }
            }
        }
    }
}
