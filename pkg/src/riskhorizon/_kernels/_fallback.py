"""Pure numpy implementations of the hot kernels.

Same signatures and outputs as the compiled ``_core`` module. Distances here
use the arccosh form of the Poincaré metric, which has simple closed-form
derivatives with respect to both points and the curvature.
"""

from __future__ import annotations

import numpy as np

NAME = "python"
_TINY = 1e-30
_CLAMP = 1.0 - 1e-15


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def pair_dist_grad(x, y, c):
    """Row-wise distance and its gradients w.r.t. ``x``, ``y`` and ``c``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    s = np.sqrt(c)
    diff = x - y
    A = np.einsum("ij,ij->i", diff, diff)
    x2 = np.einsum("ij,ij->i", x, x)
    y2 = np.einsum("ij,ij->i", y, y)
    al = 1.0 - c * x2
    be = 1.0 - c * y2
    delta = 2.0 * c * A / (al * be)
    q = np.sqrt(delta * (delta + 2.0))
    d = np.log1p(delta + q) / s
    ok = q > _TINY
    inv = np.where(ok, 1.0 / (s * np.where(ok, q, 1.0)), 0.0)
    coef = inv * 4.0 * c / (al * be)
    gx = coef[:, None] * (diff + (c * A / al)[:, None] * x)
    gy = coef[:, None] * (-diff + (c * A / be)[:, None] * y)
    gc = np.where(ok, -d / (2.0 * c) + inv * (delta / c) * (1.0 + c * x2 / al + c * y2 / be), 0.0)
    return d, gx, gy, gc


def edge_loss_grad(Z, c, gamma, src, dst, etype, neg):
    """Negative-sampling edge loss summed over the batch, with gradients.

    Returns ``(loss, grad_Z, grad_gamma, grad_c)``.
    """
    Z = np.asarray(Z, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    etype = np.asarray(etype, dtype=np.int64)
    neg = np.asarray(neg, dtype=np.int64).reshape(len(src), -1)
    n_neg = neg.shape[1]
    gZ = np.zeros_like(Z)
    gg = np.zeros_like(gamma)
    if len(src) == 0:
        return 0.0, gZ, gg, 0.0
    g = gamma[etype]

    dp, gxp, gyp, gcp = pair_dist_grad(Z[src], Z[dst], c)
    loss = float(np.sum(_softplus(dp - g)))
    wp = _sigmoid(dp - g)
    np.add.at(gg, etype, -wp)
    np.add.at(gZ, src, wp[:, None] * gxp)
    np.add.at(gZ, dst, wp[:, None] * gyp)
    gc = float(np.sum(wp * gcp))

    if n_neg:
        su = np.repeat(src, n_neg)
        nv = neg.reshape(-1)
        gn = np.repeat(g, n_neg)
        dn, gxn, gyn, gcn = pair_dist_grad(Z[su], Z[nv], c)
        loss += float(np.sum(_softplus(gn - dn)))
        wn = -_sigmoid(gn - dn)
        np.add.at(gg, np.repeat(etype, n_neg), -wn)
        np.add.at(gZ, su, wn[:, None] * gxn)
        np.add.at(gZ, nv, wn[:, None] * gyn)
        gc += float(np.sum(wn * gcn))
    return loss, gZ, gg, gc


def _log0_parts(Z, s):
    r = np.sqrt(np.einsum("ij,ij->i", Z, Z))
    sr = np.minimum(s * r, _CLAMP)
    small = sr < 1e-4
    rs = np.where(small, 1.0, r)
    at = np.arctanh(sr)
    f = np.where(small, 2.0 + 2.0 * sr * sr / 3.0, 2.0 * at / np.where(small, 1.0, sr))
    fp = np.where(small, 4.0 * s * s * r / 3.0, 2.0 / (rs * (1.0 - sr * sr)) - 2.0 * at / (s * rs * rs))
    dfs = np.where(small, 4.0 * s * r * r / 3.0, 2.0 / (s * (1.0 - sr * sr)) - 2.0 * at / (s * s * rs))
    return r, f, fp, dfs / (2.0 * s)


def _exp0_parts(m, s):
    n = float(np.sqrt(m @ m))
    sn = s * n
    if sn < 1e-4:
        return n, 0.5 - sn * sn / 24.0, -s * s * n / 12.0, -n * n / 24.0
    th = np.tanh(sn / 2.0)
    sech2 = 1.0 - th * th
    h = th / sn
    hp = sech2 / (2.0 * n) - th / (s * n * n)
    dhs = sech2 / (2.0 * s) - th / (s * s * n)
    return n, h, hp, dhs / (2.0 * s)


def mask_loss_grad(Z, c, tau, kept_ptr, kept_idx, kept_w, mask_ptr, mask_idx, neg):
    """Sampled-softmax masked-code loss over a batch of visits.

    Visit ``i`` keeps ``kept_idx[kept_ptr[i]:kept_ptr[i+1]]`` (weights
    ``kept_w``) and masks ``mask_idx[mask_ptr[i]:mask_ptr[i+1]]``; ``neg[j]``
    holds the negatives for masked entry ``j``. Returns ``(loss, grad_Z, grad_c)``.
    """
    Z = np.asarray(Z, dtype=np.float64)
    kept_ptr = np.asarray(kept_ptr, dtype=np.int64)
    kept_idx = np.asarray(kept_idx, dtype=np.int64)
    kept_w = np.asarray(kept_w, dtype=np.float64)
    mask_ptr = np.asarray(mask_ptr, dtype=np.int64)
    mask_idx = np.asarray(mask_idx, dtype=np.int64)
    neg = np.asarray(neg, dtype=np.int64).reshape(len(mask_idx), -1)
    s = np.sqrt(c)
    gZ = np.zeros_like(Z)
    loss = 0.0
    gc = 0.0
    for i in range(len(kept_ptr) - 1):
        ks = kept_idx[kept_ptr[i]:kept_ptr[i + 1]]
        ms = mask_idx[mask_ptr[i]:mask_ptr[i + 1]]
        if len(ks) == 0 or len(ms) == 0:
            continue
        w = kept_w[kept_ptr[i]:kept_ptr[i + 1]]
        wn = w / w.sum()
        zk = Z[ks]
        r, f, fp, dfc = _log0_parts(zk, s)
        m = (wn * f) @ zk
        n, h, hp, dhc = _exp0_parts(m, s)
        mu = h * m

        cand = np.concatenate([ms[:, None], neg[mask_ptr[i]:mask_ptr[i + 1]]], axis=1)
        k = cand.shape[1]
        flat = cand.reshape(-1)
        d, gmu, gz, gcd = pair_dist_grad(np.broadcast_to(mu, (len(flat), len(mu))), Z[flat], c)
        logits = (-d / tau).reshape(-1, k)
        top = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - top)
        p = e / e.sum(axis=1, keepdims=True)
        loss += float(np.sum(np.log(e.sum(axis=1)) + top[:, 0] - logits[:, 0]))
        a = -p
        a[:, 0] += 1.0
        a = (a / tau).reshape(-1)
        Gmu = a @ gmu
        np.add.at(gZ, flat, a[:, None] * gz)
        gc += float(a @ gcd)

        # back through exp0 and the weighted tangent mean
        if n > 0:
            Gm = h * Gmu + hp * (m @ Gmu) / n * m
        else:
            Gm = h * Gmu
        gc += float(Gmu @ m) * dhc
        GL = wn[:, None] * Gm[None, :]
        zg = np.einsum("ij,ij->i", zk, GL)
        rs = np.where(r > 0, r, 1.0)
        Gz = f[:, None] * GL + np.where(r > 0, fp * zg / rs, 0.0)[:, None] * zk
        np.add.at(gZ, ks, Gz)
        gc += float(np.sum(zg * dfc))
    return loss, gZ, gc


def lagged_pair_keys(codes, visit_ptr, patient_ptr, code_mod, max_lag, n_codes):
    """Emit one key per cross-modal ordered code pair at every lag.

    Key layout is ``(lag * n_codes + a) * n_codes + b``; the second array
    gives the patient index for each emission.
    """
    codes = np.asarray(codes, dtype=np.int64)
    visit_ptr = np.asarray(visit_ptr, dtype=np.int64)
    patient_ptr = np.asarray(patient_ptr, dtype=np.int64)
    code_mod = np.asarray(code_mod, dtype=np.int64)
    keys, pats = [], []
    for p in range(len(patient_ptr) - 1):
        v0, v1 = patient_ptr[p], patient_ptr[p + 1]
        for lag in range(max_lag + 1):
            for i in range(v0, v1 - lag):
                a = codes[visit_ptr[i]:visit_ptr[i + 1]]
                b = codes[visit_ptr[i + lag]:visit_ptr[i + lag + 1]]
                if len(a) == 0 or len(b) == 0:
                    continue
                ok = code_mod[a][:, None] != code_mod[b][None, :]
                k = ((lag * n_codes + a[:, None]) * n_codes + b[None, :])[ok]
                keys.append(k)
                pats.append(np.full(len(k), p, dtype=np.int64))
    if not keys:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(keys), np.concatenate(pats)
