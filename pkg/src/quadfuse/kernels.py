"""Hot numerical kernels with twin numba and pure-numpy implementations.

Three kernels dominate pipeline runtime: windowed map attention, bilinear
map sampling at scattered points, and segment-mean pooling.  Each has an
@njit implementation and a vectorized numpy fallback; ``numba_enabled``
selects between them at call time via the QUADFUSE_NUMBA env flag so the
two paths stay comparable (see benchmarks/bench_kernels.py).

Array conventions: feature maps are (d, H, W) float64, masks (H, W) bool.
Attention windows are k x k (k odd) centred on the query cell; cells off
the map edge or with a false mask bit are excluded from the softmax.  A
fully excluded window falls back to the raw (unprojected) query feature.
"""

from __future__ import annotations

import os

import numpy as np

from . import autodiff as ad

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency, but be safe
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(f):
            return f

        return deco


def numba_enabled() -> bool:
    """Numba path active? Checked per call so tests can flip the env flag."""
    return HAVE_NUMBA and os.environ.get("QUADFUSE_NUMBA", "1") != "0"


# ---------------------------------------------------------------------------
# windowed map attention
# ---------------------------------------------------------------------------

@njit(cache=True)
def _attn_fwd_nb(Q, K, V, rawQ, mask, k):
    d, H, W = Q.shape
    dv = V.shape[0]
    r = k // 2
    k2 = k * k
    scale = 1.0 / np.sqrt(d)
    out = np.zeros((dv, H, W))
    probs = np.zeros((k2, H, W))
    fallback = np.zeros((H, W), dtype=np.bool_)
    logit = np.empty(k2)
    ok = np.empty(k2, dtype=np.bool_)
    for i in range(H):
        for j in range(W):
            m = -1e300
            n_ok = 0
            w = 0
            for di in range(-r, r + 1):
                ii = i + di
                for dj in range(-r, r + 1):
                    jj = j + dj
                    good = 0 <= ii < H and 0 <= jj < W and mask[ii, jj]
                    ok[w] = good
                    if good:
                        s = 0.0
                        for c in range(d):
                            s += Q[c, i, j] * K[c, ii, jj]
                        s *= scale
                        logit[w] = s
                        if s > m:
                            m = s
                        n_ok += 1
                    w += 1
            if n_ok == 0:
                fallback[i, j] = True
                for c in range(dv):
                    out[c, i, j] = rawQ[c, i, j]
                continue
            z = 0.0
            for w in range(k2):
                if ok[w]:
                    e = np.exp(logit[w] - m)
                    logit[w] = e
                    z += e
            w = 0
            for di in range(-r, r + 1):
                ii = i + di
                for dj in range(-r, r + 1):
                    jj = j + dj
                    if ok[w]:
                        p = logit[w] / z
                        probs[w, i, j] = p
                        for c in range(dv):
                            out[c, i, j] += p * V[c, ii, jj]
                    w += 1
    return out, probs, fallback


@njit(cache=True)
def _attn_bwd_nb(dOut, Q, K, V, probs, fallback, k):
    d, H, W = Q.shape
    dv = V.shape[0]
    r = k // 2
    k2 = k * k
    scale = 1.0 / np.sqrt(d)
    dQ = np.zeros_like(Q)
    dK = np.zeros_like(K)
    dV = np.zeros_like(V)
    dRawQ = np.zeros((dv, H, W))
    dots = np.empty(k2)
    for i in range(H):
        for j in range(W):
            if fallback[i, j]:
                for c in range(dv):
                    dRawQ[c, i, j] = dOut[c, i, j]
                continue
            S = 0.0
            w = 0
            for di in range(-r, r + 1):
                ii = i + di
                for dj in range(-r, r + 1):
                    jj = j + dj
                    p = probs[w, i, j]
                    if p != 0.0:
                        s = 0.0
                        for c in range(dv):
                            s += dOut[c, i, j] * V[c, ii, jj]
                        dots[w] = s
                        S += p * s
                    else:
                        dots[w] = 0.0
                    w += 1
            w = 0
            for di in range(-r, r + 1):
                ii = i + di
                for dj in range(-r, r + 1):
                    jj = j + dj
                    p = probs[w, i, j]
                    if p != 0.0:
                        dl = p * (dots[w] - S)
                        for c in range(dv):
                            dV[c, ii, jj] += p * dOut[c, i, j]
                        for c in range(d):
                            dK[c, ii, jj] += dl * Q[c, i, j] * scale
                            dQ[c, i, j] += dl * K[c, ii, jj] * scale
                    w += 1
    return dQ, dK, dV, dRawQ


def _attn_fwd_np(Q, K, V, rawQ, mask, k):
    d, H, W = Q.shape
    dv = V.shape[0]
    r = k // 2
    k2 = k * k
    scale = 1.0 / np.sqrt(d)
    Kp = np.zeros((d, H + 2 * r, W + 2 * r))
    Vp = np.zeros((dv, H + 2 * r, W + 2 * r))
    Mp = np.zeros((H + 2 * r, W + 2 * r), dtype=bool)
    Kp[:, r:r + H, r:r + W] = K
    Vp[:, r:r + H, r:r + W] = V
    Mp[r:r + H, r:r + W] = mask
    logits = np.empty((k2, H, W))
    valid = np.empty((k2, H, W), dtype=bool)
    w = 0
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            sl = (slice(r + di, r + di + H), slice(r + dj, r + dj + W))
            logits[w] = np.einsum("chw,chw->hw", Q, Kp[:, sl[0], sl[1]]) * scale
            valid[w] = Mp[sl]
            w += 1
    logits[~valid] = -np.inf
    fallback = ~valid.any(axis=0)
    m = logits.max(axis=0)
    m[fallback] = 0.0  # avoid inf-inf below; these rows end up all-zero
    e = np.exp(logits - m)
    e[~valid] = 0.0
    z = e.sum(axis=0)
    z[fallback] = 1.0
    probs = e / z
    out = np.zeros((dv, H, W))
    w = 0
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            out += probs[w] * Vp[:, r + di:r + di + H, r + dj:r + dj + W]
            w += 1
    out[:, fallback] = rawQ[:, fallback]
    return out, probs, fallback


def _attn_bwd_np(dOut, Q, K, V, probs, fallback, k):
    d, H, W = Q.shape
    dv = V.shape[0]
    r = k // 2
    k2 = k * k
    scale = 1.0 / np.sqrt(d)
    dA = dOut * ~fallback
    Kp = np.zeros((d, H + 2 * r, W + 2 * r))
    Vp = np.zeros((dv, H + 2 * r, W + 2 * r))
    Kp[:, r:r + H, r:r + W] = K
    Vp[:, r:r + H, r:r + W] = V
    dots = np.empty((k2, H, W))
    w = 0
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            dots[w] = np.einsum("chw,chw->hw", dA,
                                Vp[:, r + di:r + di + H, r + dj:r + dj + W])
            w += 1
    S = (probs * dots).sum(axis=0)
    dlogits = probs * (dots - S)
    dKp = np.zeros_like(Kp)
    dVp = np.zeros_like(Vp)
    dQ = np.zeros_like(Q)
    w = 0
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            sl = (slice(r + di, r + di + H), slice(r + dj, r + dj + W))
            dVp[:, sl[0], sl[1]] += probs[w] * dA
            dKp[:, sl[0], sl[1]] += dlogits[w] * Q * scale
            dQ += dlogits[w] * Kp[:, sl[0], sl[1]] * scale
            w += 1
    dK = dKp[:, r:r + H, r:r + W]
    dV = dVp[:, r:r + H, r:r + W]
    dRawQ = dOut * fallback
    return dQ, dK, dV, dRawQ


def attn_forward(Q, K, V, rawQ, mask, k):
    """Windowed attention forward on raw ndarrays.

    Returns (out, probs, fallback) where probs is (k*k, H, W) with zeros at
    excluded window slots and fallback marks rows whose window was empty.
    """
    args = (np.ascontiguousarray(Q), np.ascontiguousarray(K),
            np.ascontiguousarray(V), np.ascontiguousarray(rawQ),
            np.ascontiguousarray(mask), int(k))
    if numba_enabled():
        return _attn_fwd_nb(*args)
    return _attn_fwd_np(*args)


def attn_backward(dOut, Q, K, V, probs, fallback, k):
    args = (np.ascontiguousarray(dOut), np.ascontiguousarray(Q),
            np.ascontiguousarray(K), np.ascontiguousarray(V),
            np.ascontiguousarray(probs), np.ascontiguousarray(fallback), int(k))
    if numba_enabled():
        return _attn_bwd_nb(*args)
    return _attn_bwd_np(*args)


# ---------------------------------------------------------------------------
# bilinear sampling at scattered (row, col) coordinates
# ---------------------------------------------------------------------------

def corner_weights(H, W, mask, rows, cols):
    """Corner indices and mask-renormalized bilinear weights.

    Coordinates are continuous map indices (integer values hit cell
    centers); out-of-range queries clamp to the border.  Masked corners
    get zero weight and the rest renormalize; a query with no unmasked
    support is flagged invalid.

    Returns (wn (N,4), idx (N,4) flattened cell indices, ok (N,) bool).
    """
    rows = np.clip(np.asarray(rows, dtype=np.float64), 0.0, H - 1.0)
    cols = np.clip(np.asarray(cols, dtype=np.float64), 0.0, W - 1.0)
    r0 = np.minimum(np.floor(rows), max(H - 2, 0)).astype(np.int64)
    c0 = np.minimum(np.floor(cols), max(W - 2, 0)).astype(np.int64)
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    fr = rows - r0
    fc = cols - c0
    w = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc,
                  fr * (1 - fc), fr * fc], axis=1)
    rr = np.stack([r0, r0, r1, r1], axis=1)
    cc = np.stack([c0, c1, c0, c1], axis=1)
    idx = rr * W + cc
    w = w * mask.reshape(-1)[idx]
    tot = w.sum(axis=1)
    ok = tot > 1e-12
    denom = np.where(tot == 0.0, 1.0, tot)
    wn = np.where(ok[:, None], w / denom[:, None], 0.0)
    return wn, idx, ok


@njit(cache=True)
def _gather_nb(fmT, wn, idx):
    N = idx.shape[0]
    d = fmT.shape[1]
    out = np.zeros((N, d))
    for n in range(N):
        for corner in range(4):
            w = wn[n, corner]
            if w != 0.0:
                cell = idx[n, corner]
                for c in range(d):
                    out[n, c] += w * fmT[cell, c]
    return out


@njit(cache=True)
def _scatter_nb(dOut, wn, idx, n_cells):
    N, d = dOut.shape
    dfmT = np.zeros((n_cells, d))
    for n in range(N):
        for corner in range(4):
            w = wn[n, corner]
            if w != 0.0:
                cell = idx[n, corner]
                for c in range(d):
                    dfmT[cell, c] += w * dOut[n, c]
    return dfmT


def sample_forward(fmap, mask, rows, cols):
    """Sample (d, H, W) map at N continuous (row, col) points -> (N, d).

    Returns (out, ok, wn, idx); keep wn/idx for sample_backward.
    """
    d, H, W = fmap.shape
    wn, idx, ok = corner_weights(H, W, mask, rows, cols)
    fmT = np.ascontiguousarray(fmap.reshape(d, -1).T)
    if numba_enabled():
        out = _gather_nb(fmT, wn, idx)
    else:
        out = np.einsum("nc,ncd->nd", wn, fmT[idx])
    return out, ok, wn, idx


def sample_backward(dOut, wn, idx, shape):
    d, H, W = shape
    dOut = np.ascontiguousarray(dOut)
    if numba_enabled():
        dfmT = _scatter_nb(dOut, wn, idx, H * W)
    else:
        dfmT = np.zeros((H * W, d))
        for corner in range(4):
            np.add.at(dfmT, idx[:, corner], wn[:, corner, None] * dOut)
    return np.ascontiguousarray(dfmT.T).reshape(d, H, W)


# ---------------------------------------------------------------------------
# segment-mean pooling
# ---------------------------------------------------------------------------

@njit(cache=True)
def _segmean_fwd_nb(values, seg, n_segments):
    N, d = values.shape
    out = np.zeros((n_segments, d))
    cnt = np.zeros(n_segments)
    for n in range(N):
        s = seg[n]
        if s >= 0:
            cnt[s] += 1.0
            for c in range(d):
                out[s, c] += values[n, c]
    for s in range(n_segments):
        if cnt[s] > 0.0:
            for c in range(d):
                out[s, c] /= cnt[s]
    return out, cnt


@njit(cache=True)
def _segmean_bwd_nb(dOut, seg, cnt, N):
    d = dOut.shape[1]
    dValues = np.zeros((N, d))
    for n in range(N):
        s = seg[n]
        if s >= 0 and cnt[s] > 0.0:
            for c in range(d):
                dValues[n, c] = dOut[s, c] / cnt[s]
    return dValues


def segmean_forward(values, seg, n_segments):
    """Mean of `values` rows per segment id; seg = -1 drops the row.

    Returns (out (S, d), cnt (S,)); empty segments stay zero.
    """
    values = np.ascontiguousarray(values)
    seg = np.ascontiguousarray(seg, dtype=np.int64)
    if numba_enabled():
        return _segmean_fwd_nb(values, seg, int(n_segments))
    d = values.shape[1]
    out = np.zeros((n_segments, d))
    cnt = np.zeros(n_segments)
    keep = seg >= 0
    np.add.at(out, seg[keep], values[keep])
    np.add.at(cnt, seg[keep], 1.0)
    nz = cnt > 0.0
    out[nz] /= cnt[nz, None]
    return out, cnt


def segmean_backward(dOut, seg, cnt, n_rows):
    dOut = np.ascontiguousarray(dOut)
    seg = np.ascontiguousarray(seg, dtype=np.int64)
    if numba_enabled():
        return _segmean_bwd_nb(dOut, seg, cnt, int(n_rows))
    d = dOut.shape[1]
    dValues = np.zeros((n_rows, d))
    keep = (seg >= 0) & (cnt[np.maximum(seg, 0)] > 0.0)
    dValues[keep] = dOut[seg[keep]] / cnt[seg[keep], None]
    return dValues


# ---------------------------------------------------------------------------
# autodiff wrappers
# ---------------------------------------------------------------------------

def attend_map(q_proj: ad.Tensor, k_proj: ad.Tensor, v_proj: ad.Tensor,
               q_raw: ad.Tensor, mask, k: int):
    """Differentiable windowed attention; returns (out Tensor, fallback)."""
    mask = np.asarray(mask, dtype=bool)
    out, probs, fallback = attn_forward(q_proj.data, k_proj.data, v_proj.data,
                                        q_raw.data, mask, k)

    def vjp(g):
        return attn_backward(g, q_proj.data, k_proj.data, v_proj.data,
                             probs, fallback, k)

    return ad.make(out, (q_proj, k_proj, v_proj, q_raw), vjp), fallback


def sample_map(fmap: ad.Tensor, mask, rows, cols):
    """Differentiable bilinear sampling; returns (values Tensor (N,d), ok)."""
    mask = np.asarray(mask, dtype=bool)
    out, ok, wn, idx = sample_forward(fmap.data, mask, rows, cols)

    def vjp(g):
        return (sample_backward(g, wn, idx, fmap.data.shape),)

    return ad.make(out, (fmap,), vjp), ok


def segment_mean(values: ad.Tensor, seg, n_segments: int):
    """Differentiable segment-mean; returns (means Tensor (S,d), counts)."""
    seg = np.ascontiguousarray(seg, dtype=np.int64)
    out, cnt = segmean_forward(values.data, seg, n_segments)
    n_rows = values.data.shape[0]

    def vjp(g):
        return (segmean_backward(g, seg, cnt, n_rows),)

    return ad.make(out, (values,), vjp), cnt
