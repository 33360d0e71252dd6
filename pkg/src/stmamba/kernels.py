"""JIT inner kernels: depthwise convolution, deformable sampling, scan loops.

Everything here is plain numeric code over contiguous arrays; shape policing
and tape recording happen in the callers. Kernels are deterministic: parallel
loops only ever write to disjoint slices and reduce in a fixed order within a
thread.

The fused scan kernels use the division-free zero-order-hold form
b_in = (exp(dt*a) - 1) * (1/a) * b * u, switching to the series limit
b_in = dt * b * u when |dt*a| < 1e-6. ``carry`` is a 0/1 vector: 0 resets the
recurrence at that token (used to batch independent window segments into one
sequence).
"""

import numpy as np
from numba import get_num_threads, get_thread_id, njit, prange

SERIES_EPS = 1e-6


@njit(cache=True, parallel=True, fastmath=True)
def depthwise_conv2d(x, k, ph, pw):
    # x: (B,C,H,W); k: (C,kh,kw) -> (B,C,Ho,Wo) with zero padding (ph,pw)
    b, c, h, w = x.shape
    kh, kw = k.shape[1], k.shape[2]
    ho = h + 2 * ph - kh + 1
    wo = w + 2 * pw - kw + 1
    out = np.empty((b, c, ho, wo), dtype=x.dtype)
    hp = h + 2 * ph
    wp = w + 2 * pw
    zero = x.dtype.type(0.0)
    pad_ws = np.zeros((get_num_threads(), hp, wp), dtype=x.dtype)
    for bc in prange(b * c):
        bi = bc // c
        ci = bc % c
        pad = pad_ws[get_thread_id()]
        pad[:] = zero
        pad[ph:ph + h, pw:pw + w] = x[bi, ci]
        for yo in range(ho):
            for xo in range(wo):
                acc = zero
                for i in range(kh):
                    for j in range(kw):
                        acc += k[ci, i, j] * pad[yo + i, xo + j]
                out[bi, ci, yo, xo] = acc
    return out


@njit(cache=True, parallel=True, fastmath=True)
def depthwise_conv2d_wgrad(xp, gy, kh, kw):
    # xp: padded input (B,C,Hp,Wp); gy: (B,C,Ho,Wo) -> (C,kh,kw)
    b, c, hp, wp = xp.shape
    ho, wo = gy.shape[2], gy.shape[3]
    gk = np.zeros((c, kh, kw), dtype=xp.dtype)
    for ci in prange(c):
        for bi in range(b):
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for yo in range(ho):
                        for xo in range(wo):
                            acc += gy[bi, ci, yo, xo] * xp[bi, ci, yo + i, xo + j]
                    gk[ci, i, j] += acc
    return gk


# --------------------------------------------------------------------------- #
# Deformable sampling with precomputed bilinear geometry
# --------------------------------------------------------------------------- #
# Geometry arrays (computed once per call in numpy, see tensor.deform_conv2d):
#   iy0, ix0: (T,K2,H,W) int32 floor corner, clipped to [0, dim-1]
#   wgt:      (T,K2,4,H,W) corner weights with out-of-bounds corners zeroed
#   wy, wx:   (T,K2,H,W) fractional offsets
#   vmask:    (T,K2,4,H,W) 1.0 where the corner is inside the grid

@njit(cache=True, parallel=True, fastmath=True)
def dcn_sample(x, iy0, ix0, wgt):
    # -> samples (T,K2,C,H,W)
    t, c, h, w = x.shape
    k2 = iy0.shape[1]
    out = np.empty((t, k2, c, h, w), dtype=x.dtype)
    for tk in prange(t * k2):
        ti = tk // k2
        ki = tk % k2
        for y in range(h):
            for xx in range(w):
                y0 = iy0[ti, ki, y, xx]
                x0 = ix0[ti, ki, y, xx]
                y1 = min(y0 + 1, h - 1)
                x1 = min(x0 + 1, w - 1)
                w00 = wgt[ti, ki, 0, y, xx]
                w01 = wgt[ti, ki, 1, y, xx]
                w10 = wgt[ti, ki, 2, y, xx]
                w11 = wgt[ti, ki, 3, y, xx]
                for ci in range(c):
                    out[ti, ki, ci, y, xx] = (
                        w00 * x[ti, ci, y0, x0] + w01 * x[ti, ci, y0, x1]
                        + w10 * x[ti, ci, y1, x0] + w11 * x[ti, ci, y1, x1])
    return out


@njit(cache=True, parallel=True, fastmath=True)
def dcn_input_grad(gfeat, mod, iy0, ix0, wgt, h, w):
    # gfeat: (T,K2,C,H,W) grads of modulated samples; multiply by mod inline.
    t, k2, c = gfeat.shape[0], gfeat.shape[1], gfeat.shape[2]
    gx = np.zeros((t, c, h, w), dtype=gfeat.dtype)
    for tc in prange(t * c):
        ti = tc // c
        ci = tc % c
        for ki in range(k2):
            for y in range(h):
                for xx in range(w):
                    g = gfeat[ti, ki, ci, y, xx] * mod[ti, ki, y, xx]
                    if g == 0.0:
                        continue
                    y0 = iy0[ti, ki, y, xx]
                    x0 = ix0[ti, ki, y, xx]
                    y1 = min(y0 + 1, h - 1)
                    x1 = min(x0 + 1, w - 1)
                    gx[ti, ci, y0, x0] += g * wgt[ti, ki, 0, y, xx]
                    gx[ti, ci, y0, x1] += g * wgt[ti, ki, 1, y, xx]
                    gx[ti, ci, y1, x0] += g * wgt[ti, ki, 2, y, xx]
                    gx[ti, ci, y1, x1] += g * wgt[ti, ki, 3, y, xx]
    return gx


@njit(cache=True, parallel=True, fastmath=True)
def dcn_offset_mod_grad(x, gfeat, mod, iy0, ix0, wy, wx, vmask):
    # -> goff (T,2*K2,H,W), gmod (T,K2,H,W); raw samples recomputed inline
    t, c, h, w = x.shape
    k2 = gfeat.shape[1]
    goff = np.empty((t, 2 * k2, h, w), dtype=x.dtype)
    gmod = np.empty((t, k2, h, w), dtype=x.dtype)
    for tk in prange(t * k2):
        ti = tk // k2
        ki = tk % k2
        for y in range(h):
            for xx in range(w):
                y0 = iy0[ti, ki, y, xx]
                x0 = ix0[ti, ki, y, xx]
                y1 = min(y0 + 1, h - 1)
                x1 = min(x0 + 1, w - 1)
                fy = wy[ti, ki, y, xx]
                fx = wx[ti, ki, y, xx]
                m00 = vmask[ti, ki, 0, y, xx]
                m01 = vmask[ti, ki, 1, y, xx]
                m10 = vmask[ti, ki, 2, y, xx]
                m11 = vmask[ti, ki, 3, y, xx]
                mv = mod[ti, ki, y, xx]
                acc_y = 0.0
                acc_x = 0.0
                acc_m = 0.0
                for ci in range(c):
                    v00 = x[ti, ci, y0, x0] * m00
                    v01 = x[ti, ci, y0, x1] * m01
                    v10 = x[ti, ci, y1, x0] * m10
                    v11 = x[ti, ci, y1, x1] * m11
                    g = gfeat[ti, ki, ci, y, xx]
                    gm = g * mv
                    acc_y += gm * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))
                    acc_x += gm * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))
                    acc_m += g * ((1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                                  + fy * ((1.0 - fx) * v10 + fx * v11))
                goff[ti, 2 * ki, y, xx] = acc_y
                goff[ti, 2 * ki + 1, y, xx] = acc_x
                gmod[ti, ki, y, xx] = acc_m
    return goff, gmod


# --------------------------------------------------------------------------- #
# Scan recurrences
# --------------------------------------------------------------------------- #

@njit(cache=True, parallel=True, fastmath=True)
def s6_fused_fwd(dt, a, inv_a, b, c, u, abar, carry):
    # dt,u: (L,D); a,inv_a: (D,N); b,c: (L,N); abar: (L,D,N); carry: (L,)
    # returns y (L,D) without the skip term, and hidden states h (L,D,N).
    # Fast path: assumes every dt*a is below -SERIES_EPS (checked by caller).
    ln, d = dt.shape
    n = a.shape[1]
    one = dt.dtype.type(1.0)
    zero = dt.dtype.type(0.0)
    y = np.empty((ln, d), dtype=dt.dtype)
    h = np.empty((ln, d, n), dtype=dt.dtype)
    for di in prange(d):
        hv = np.zeros(n, dtype=dt.dtype)
        qrow = inv_a[di]
        for l in range(ln):
            uv = u[l, di]
            ml = carry[l]
            arow = abar[l, di]
            hrow = h[l, di]
            brow = b[l]
            crow = c[l]
            acc = zero
            for ni in range(n):
                av = arow[ni]
                hv[ni] = av * hv[ni] * ml + (av - one) * qrow[ni] * brow[ni] * uv
                hrow[ni] = hv[ni]
                acc += crow[ni] * hv[ni]
            y[l, di] = acc
    return y, h


@njit(cache=True, parallel=True, fastmath=True)
def s6_fused_fwd_safe(dt, a, inv_a, b, c, u, abar, carry):
    # As s6_fused_fwd but honoring the series limit b_in -> dt*b*u when
    # |dt*a| < SERIES_EPS; used when the caller detects near-singular values.
    ln, d = dt.shape
    n = a.shape[1]
    one = dt.dtype.type(1.0)
    zero = dt.dtype.type(0.0)
    y = np.empty((ln, d), dtype=dt.dtype)
    h = np.empty((ln, d, n), dtype=dt.dtype)
    for di in prange(d):
        hv = np.zeros(n, dtype=dt.dtype)
        for l in range(ln):
            dtv = dt[l, di]
            uv = u[l, di]
            ml = carry[l]
            acc = zero
            for ni in range(n):
                av = abar[l, di, ni]
                za = dtv * a[di, ni]
                if za > -SERIES_EPS:
                    bin_ = dtv * b[l, ni] * uv
                else:
                    bin_ = (av - one) * inv_a[di, ni] * b[l, ni] * uv
                hv[ni] = av * hv[ni] * ml + bin_
                h[l, di, ni] = hv[ni]
                acc += c[l, ni] * hv[ni]
            y[l, di] = acc
    return y, h


@njit(cache=True, parallel=True, fastmath=True)
def s6_fused_bwd(dt, a, inv_a, b, c, u, abar, carry, h, gy):
    # Adjoints of s6_fused_fwd (without the skip term). Returns da (D,N),
    # ddt (L,D), du (L,D) and per-thread partials db_p, dc_p of shape
    # (n_threads, L, N) that the caller sums over axis 0.
    ln, d = dt.shape
    n = a.shape[1]
    nt = get_num_threads()
    one = dt.dtype.type(1.0)
    zero = dt.dtype.type(0.0)
    da = np.zeros((d, n), dtype=dt.dtype)
    ddt = np.empty((ln, d), dtype=dt.dtype)
    du = np.empty((ln, d), dtype=dt.dtype)
    db_p = np.zeros((nt, ln, n), dtype=dt.dtype)
    dc_p = np.zeros((nt, ln, n), dtype=dt.dtype)
    zrow = np.zeros(n, dtype=dt.dtype)
    for di in prange(d):
        tid = get_thread_id()
        gh = np.zeros(n, dtype=dt.dtype)
        arow_a = a[di]
        qrow = inv_a[di]
        darow = da[di]
        for l in range(ln - 1, -1, -1):
            dtv = dt[l, di]
            uv = u[l, di]
            gyv = gy[l, di]
            ml = carry[l]
            if l + 1 < ln:
                anext = abar[l + 1, di]
                mn = carry[l + 1]
            else:
                anext = zrow
                mn = zero
            arow = abar[l, di]
            hrow = h[l, di]
            hprev = h[l - 1, di] if l > 0 else zrow
            brow = b[l]
            crow = c[l]
            dbrow = db_p[tid, l]
            dcrow = dc_p[tid, l]
            ddt_acc = zero
            du_acc = zero
            for ni in range(n):
                g = crow[ni] * gyv + (anext[ni] * mn) * gh[ni]
                gh[ni] = g
                av = arow[ni]
                q = qrow[ni]
                bl = brow[ni]
                hp = hprev[ni] * ml
                bq = bl * q
                avm1 = av - one
                dza = g * av * (hp + bq * uv)
                ddt_acc += dza * arow_a[ni]
                du_acc += g * avm1 * bq
                darow[ni] += dza * dtv - g * avm1 * bq * uv * q
                dbrow[ni] += g * avm1 * q * uv
                dcrow[ni] += gyv * hrow[ni]
            ddt[l, di] = ddt_acc
            du[l, di] = du_acc
    return da, ddt, du, db_p, dc_p


@njit(cache=True, parallel=True, fastmath=True)
def s6_fused_bwd_safe(dt, a, inv_a, b, c, u, abar, carry, h, gy):
    # As s6_fused_bwd but honoring the series limit branch.
    ln, d = dt.shape
    n = a.shape[1]
    nt = get_num_threads()
    one = dt.dtype.type(1.0)
    zero = dt.dtype.type(0.0)
    da = np.zeros((d, n), dtype=dt.dtype)
    ddt = np.empty((ln, d), dtype=dt.dtype)
    du = np.empty((ln, d), dtype=dt.dtype)
    db_p = np.zeros((nt, ln, n), dtype=dt.dtype)
    dc_p = np.zeros((nt, ln, n), dtype=dt.dtype)
    zrow = np.zeros(n, dtype=dt.dtype)
    for di in prange(d):
        tid = get_thread_id()
        gh = np.zeros(n, dtype=dt.dtype)
        for l in range(ln - 1, -1, -1):
            dtv = dt[l, di]
            uv = u[l, di]
            gyv = gy[l, di]
            ml = carry[l]
            if l + 1 < ln:
                anext = abar[l + 1, di]
                mn = carry[l + 1]
            else:
                anext = zrow
                mn = zero
            hprev = h[l - 1, di] if l > 0 else zrow
            ddt_acc = zero
            du_acc = zero
            for ni in range(n):
                g = c[l, ni] * gyv + (anext[ni] * mn) * gh[ni]
                gh[ni] = g
                av = abar[l, di, ni]
                za = dtv * a[di, ni]
                hp = hprev[ni] * ml
                if za > -SERIES_EPS:
                    dza = g * hp * av
                    ddt_acc += g * b[l, ni] * uv
                    du_acc += g * dtv * b[l, ni]
                    db_p[tid, l, ni] += g * dtv * uv
                else:
                    q = inv_a[di, ni]
                    bq = b[l, ni] * q
                    dza = g * av * (hp + bq * uv)
                    du_acc += g * (av - one) * bq
                    da[di, ni] -= g * (av - one) * bq * uv * q
                    db_p[tid, l, ni] += g * (av - one) * q * uv
                da[di, ni] += dza * dtv
                ddt_acc += dza * a[di, ni]
                dc_p[tid, l, ni] += gyv * h[l, di, ni]
            ddt[l, di] = ddt_acc
            du[l, di] = du_acc
    return da, ddt, du, db_p, dc_p
