# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: pairwise Poincaré distance gradients, fused edge and
masked-visit losses, and lagged co-occurrence key emission."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log, log1p, exp, tanh, atanh

cnp.import_array()

cdef double _TINY = 1e-30
cdef double _CLAMP = 1.0 - 1e-15


cdef inline double _softplus(double x) noexcept nogil:
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double _dist_grad(const double* x, const double* y, Py_ssize_t d, double c,
                              double* gx, double* gy, double* gc) noexcept nogil:
    """Distance between x and y; writes d/dx, d/dy (may be NULL) and d/dc."""
    cdef Py_ssize_t k
    cdef double A = 0.0, x2 = 0.0, y2 = 0.0, t
    cdef double s = sqrt(c)
    for k in range(d):
        t = x[k] - y[k]
        A += t * t
        x2 += x[k] * x[k]
        y2 += y[k] * y[k]
    cdef double al = 1.0 - c * x2
    cdef double be = 1.0 - c * y2
    cdef double delta = 2.0 * c * A / (al * be)
    cdef double q = sqrt(delta * (delta + 2.0))
    cdef double dist = log1p(delta + q) / s
    cdef double inv, coef, cx, cy
    if q <= _TINY:
        if gx != NULL:
            for k in range(d):
                gx[k] = 0.0
        if gy != NULL:
            for k in range(d):
                gy[k] = 0.0
        gc[0] = 0.0
        return dist
    inv = 1.0 / (s * q)
    coef = inv * 4.0 * c / (al * be)
    cx = c * A / al
    cy = c * A / be
    if gx != NULL:
        for k in range(d):
            gx[k] = coef * ((x[k] - y[k]) + cx * x[k])
    if gy != NULL:
        for k in range(d):
            gy[k] = coef * ((y[k] - x[k]) + cy * y[k])
    gc[0] = -dist / (2.0 * c) + inv * (delta / c) * (1.0 + c * x2 / al + c * y2 / be)
    return dist


NAME = "compiled"

def pair_dist_grad(x, y, double c):
    cdef const double[:, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] Y = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], i
    out_d = np.empty(n, dtype=np.float64)
    out_gx = np.empty((n, d), dtype=np.float64)
    out_gy = np.empty((n, d), dtype=np.float64)
    out_gc = np.empty(n, dtype=np.float64)
    cdef double[::1] D = out_d, GC = out_gc
    cdef double[:, ::1] GX = out_gx, GY = out_gy
    with nogil:
        for i in range(n):
            D[i] = _dist_grad(&X[i, 0], &Y[i, 0], d, c, &GX[i, 0], &GY[i, 0], &GC[i])
    return out_d, out_gx, out_gy, out_gc


def edge_loss_grad(Z, double c, gamma, src, dst, etype, neg):
    cdef const double[:, ::1] ZZ = np.ascontiguousarray(Z, dtype=np.float64)
    cdef const double[::1] G = np.ascontiguousarray(gamma, dtype=np.float64)
    cdef const long long[::1] S = np.ascontiguousarray(src, dtype=np.int64)
    cdef const long long[::1] T = np.ascontiguousarray(dst, dtype=np.int64)
    cdef const long long[::1] R = np.ascontiguousarray(etype, dtype=np.int64)
    cdef Py_ssize_t E = S.shape[0]
    neg_arr = np.ascontiguousarray(neg, dtype=np.int64).reshape(E, -1)
    cdef const long long[:, ::1] NG = neg_arr
    cdef Py_ssize_t n_neg = NG.shape[1], d = ZZ.shape[1]
    out_gz = np.zeros((ZZ.shape[0], d), dtype=np.float64)
    out_gg = np.zeros(G.shape[0], dtype=np.float64)
    cdef double[:, ::1] GZ = out_gz
    cdef double[::1] GG = out_gg
    bx = np.empty(d, dtype=np.float64)
    by = np.empty(d, dtype=np.float64)
    cdef double[::1] BX = bx, BY = by
    cdef double loss = 0.0, gc_tot = 0.0, gcl = 0.0, g, dd, w
    cdef Py_ssize_t e, j, k
    cdef long long u, v, r
    with nogil:
        for e in range(E):
            u = S[e]
            v = T[e]
            r = R[e]
            g = G[r]
            dd = _dist_grad(&ZZ[u, 0], &ZZ[v, 0], d, c, &BX[0], &BY[0], &gcl)
            loss += _softplus(dd - g)
            w = _sigmoid(dd - g)
            GG[r] -= w
            gc_tot += w * gcl
            for k in range(d):
                GZ[u, k] += w * BX[k]
                GZ[v, k] += w * BY[k]
            for j in range(n_neg):
                v = NG[e, j]
                dd = _dist_grad(&ZZ[u, 0], &ZZ[v, 0], d, c, &BX[0], &BY[0], &gcl)
                loss += _softplus(g - dd)
                w = -_sigmoid(g - dd)
                GG[r] -= w
                gc_tot += w * gcl
                for k in range(d):
                    GZ[u, k] += w * BX[k]
                    GZ[v, k] += w * BY[k]
    return loss, out_gz, out_gg, gc_tot


def mask_loss_grad(Z, double c, double tau, kept_ptr, kept_idx, kept_w,
                   mask_ptr, mask_idx, neg):
    cdef const double[:, ::1] ZZ = np.ascontiguousarray(Z, dtype=np.float64)
    cdef const long long[::1] KP = np.ascontiguousarray(kept_ptr, dtype=np.int64)
    cdef const long long[::1] KI = np.ascontiguousarray(kept_idx, dtype=np.int64)
    cdef const double[::1] KW = np.ascontiguousarray(kept_w, dtype=np.float64)
    cdef const long long[::1] MP = np.ascontiguousarray(mask_ptr, dtype=np.int64)
    cdef const long long[::1] MI = np.ascontiguousarray(mask_idx, dtype=np.int64)
    cdef Py_ssize_t M = MI.shape[0]
    neg_arr = np.ascontiguousarray(neg, dtype=np.int64).reshape(M, -1)
    cdef const long long[:, ::1] NG = neg_arr
    cdef Py_ssize_t n_neg = NG.shape[1], d = ZZ.shape[1], nv = KP.shape[0] - 1
    cdef Py_ssize_t kk = n_neg + 1
    out_gz = np.zeros((ZZ.shape[0], d), dtype=np.float64)
    cdef double[:, ::1] GZ = out_gz
    buf = np.zeros((6, d), dtype=np.float64)
    cdef double[:, ::1] B = buf
    # rows of B: 0 tangent mean m, 1 mu, 2 grad wrt mu accum, 3 grad wrt m,
    # 4 scratch grad wrt mu (unused output), 5 scratch grad wrt z
    dists = np.zeros(kk, dtype=np.float64)
    cdef double[::1] DS = dists
    gcs = np.zeros(kk, dtype=np.float64)
    cdef double[::1] GCS = gcs
    cdef double s = sqrt(c)
    cdef double loss = 0.0, gc_tot = 0.0, gcl = 0.0
    cdef double wsum, wi, r, sr, at, f, fp, dfc, n, sn, th, sech2, h, hp, dhc
    cdef double top, tot, a, mg, zg
    cdef Py_ssize_t i, j, q, k, t
    cdef long long z, idx
    with nogil:
        for i in range(nv):
            if KP[i + 1] == KP[i] or MP[i + 1] == MP[i]:
                continue
            wsum = 0.0
            for t in range(KP[i], KP[i + 1]):
                wsum += KW[t]
            for k in range(d):
                B[0, k] = 0.0
                B[2, k] = 0.0
            # tangent mean of log0 images
            for t in range(KP[i], KP[i + 1]):
                z = KI[t]
                r = 0.0
                for k in range(d):
                    r += ZZ[z, k] * ZZ[z, k]
                r = sqrt(r)
                sr = s * r
                if sr > _CLAMP:
                    sr = _CLAMP
                if sr < 1e-4:
                    f = 2.0 + 2.0 * sr * sr / 3.0
                else:
                    f = 2.0 * atanh(sr) / sr
                wi = KW[t] / wsum
                for k in range(d):
                    B[0, k] += wi * f * ZZ[z, k]
            n = 0.0
            for k in range(d):
                n += B[0, k] * B[0, k]
            n = sqrt(n)
            sn = s * n
            if sn < 1e-4:
                h = 0.5 - sn * sn / 24.0
                hp = -c * n / 12.0
                dhc = -n * n / 24.0
            else:
                th = tanh(sn / 2.0)
                sech2 = 1.0 - th * th
                h = th / sn
                hp = sech2 / (2.0 * n) - th / (s * n * n)
                dhc = (sech2 / (2.0 * s) - th / (s * s * n)) / (2.0 * s)
            for k in range(d):
                B[1, k] = h * B[0, k]

            for j in range(MP[i], MP[i + 1]):
                top = -1e308
                for q in range(kk):
                    idx = MI[j] if q == 0 else NG[j, q - 1]
                    DS[q] = _dist_grad(&B[1, 0], &ZZ[idx, 0], d, c, NULL, NULL, &GCS[q])
                    if -DS[q] / tau > top:
                        top = -DS[q] / tau
                tot = 0.0
                for q in range(kk):
                    tot += exp(-DS[q] / tau - top)
                loss += log(tot) + top + DS[0] / tau
                for q in range(kk):
                    idx = MI[j] if q == 0 else NG[j, q - 1]
                    a = -exp(-DS[q] / tau - top) / tot
                    if q == 0:
                        a += 1.0
                    a /= tau
                    _dist_grad(&B[1, 0], &ZZ[idx, 0], d, c, &B[4, 0], &B[5, 0], &gcl)
                    gc_tot += a * gcl
                    for k in range(d):
                        B[2, k] += a * B[4, k]
                        GZ[idx, k] += a * B[5, k]

            # back through exp0
            mg = 0.0
            for k in range(d):
                mg += B[0, k] * B[2, k]
            for k in range(d):
                B[3, k] = h * B[2, k]
                if n > 0:
                    B[3, k] += hp * mg / n * B[0, k]
            gc_tot += mg * dhc
            # back through the tangent mean and log0
            for t in range(KP[i], KP[i + 1]):
                z = KI[t]
                wi = KW[t] / wsum
                r = 0.0
                zg = 0.0
                for k in range(d):
                    r += ZZ[z, k] * ZZ[z, k]
                    zg += ZZ[z, k] * B[3, k]
                r = sqrt(r)
                zg *= wi
                sr = s * r
                if sr > _CLAMP:
                    sr = _CLAMP
                if sr < 1e-4:
                    f = 2.0 + 2.0 * sr * sr / 3.0
                    fp = 4.0 * c * r / 3.0
                    dfc = 2.0 * r * r / 3.0
                else:
                    at = atanh(sr)
                    f = 2.0 * at / sr
                    fp = 2.0 / (r * (1.0 - sr * sr)) - 2.0 * at / (s * r * r)
                    dfc = (2.0 / (s * (1.0 - sr * sr)) - 2.0 * at / (s * s * r)) / (2.0 * s)
                for k in range(d):
                    GZ[z, k] += f * wi * B[3, k]
                    if r > 0:
                        GZ[z, k] += fp * zg / r * ZZ[z, k]
                gc_tot += zg * dfc
    return loss, out_gz, gc_tot


def lagged_pair_keys(codes, visit_ptr, patient_ptr, code_mod, int max_lag, long long n_codes):
    cdef const long long[::1] C = np.ascontiguousarray(codes, dtype=np.int64)
    cdef const long long[::1] VP = np.ascontiguousarray(visit_ptr, dtype=np.int64)
    cdef const long long[::1] PP = np.ascontiguousarray(patient_ptr, dtype=np.int64)
    cdef const long long[::1] MOD = np.ascontiguousarray(code_mod, dtype=np.int64)
    cdef Py_ssize_t n_pat = PP.shape[0] - 1, p, i, ia, ib, total = 0, pos = 0
    cdef int lag
    with nogil:
        for p in range(n_pat):
            for lag in range(max_lag + 1):
                for i in range(PP[p], PP[p + 1] - lag):
                    for ia in range(VP[i], VP[i + 1]):
                        for ib in range(VP[i + lag], VP[i + lag + 1]):
                            if MOD[C[ia]] != MOD[C[ib]]:
                                total += 1
    keys = np.empty(total, dtype=np.int64)
    pats = np.empty(total, dtype=np.int64)
    cdef long long[::1] K = keys, P = pats
    with nogil:
        for p in range(n_pat):
            for lag in range(max_lag + 1):
                for i in range(PP[p], PP[p + 1] - lag):
                    for ia in range(VP[i], VP[i + 1]):
                        for ib in range(VP[i + lag], VP[i + lag + 1]):
                            if MOD[C[ia]] != MOD[C[ib]]:
                                K[pos] = (lag * n_codes + C[ia]) * n_codes + C[ib]
                                P[pos] = p
                                pos += 1
    return keys, pats
