"""Hot inner loops, each with a numba implementation and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment variable
``MBCONVNEXT_NO_NUMBA`` is unset (or ``0``).  Both paths produce the same labels
for connected components and the same values (up to float summation order) for
the numeric kernels; the test-suite runs every kernel under both.

Use :func:`set_backend` / :func:`backend` to switch at runtime (benchmarks and
tests do this).
"""
from __future__ import annotations

import math
import os
from contextlib import contextmanager

import numpy as np

try:  # pragma: no cover - exercised implicitly
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


def _env_disabled() -> bool:
    return os.environ.get("MBCONVNEXT_NO_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


_BACKEND = "numba" if HAVE_NUMBA and not _env_disabled() else "numpy"


def get_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> None:
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _BACKEND = name


@contextmanager
def backend(name: str):
    prev = _BACKEND
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def available_backends() -> list[str]:
    return ["numba", "numpy"] if HAVE_NUMBA else ["numpy"]


# ---------------------------------------------------------------------------
# 8-connected component labelling
#
# Labels are 1..n, numbered in raster order of each component's first pixel.
# ---------------------------------------------------------------------------

@njit(cache=True)
def _label8_numba(mask):
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    stack_r = np.empty(h * w, dtype=np.int32)
    stack_c = np.empty(h * w, dtype=np.int32)
    n = 0
    for r in range(h):
        for c in range(w):
            if mask[r, c] == 0 or labels[r, c] != 0:
                continue
            n += 1
            labels[r, c] = n
            top = 0
            stack_r[0] = r
            stack_c[0] = c
            top = 1
            while top > 0:
                top -= 1
                pr = stack_r[top]
                pc = stack_c[top]
                for dr in range(-1, 2):
                    rr = pr + dr
                    if rr < 0 or rr >= h:
                        continue
                    for dc in range(-1, 2):
                        cc = pc + dc
                        if cc < 0 or cc >= w:
                            continue
                        if mask[rr, cc] != 0 and labels[rr, cc] == 0:
                            labels[rr, cc] = n
                            stack_r[top] = rr
                            stack_c[top] = cc
                            top += 1
    return labels, n


def _row_runs(row: np.ndarray):
    padded = np.concatenate(([0], row.astype(np.int8), [0]))
    d = np.diff(padded)
    return np.flatnonzero(d == 1), np.flatnonzero(d == -1)


def _label8_numpy(mask):
    """Run-length labelling: vectorised run detection, union-find over runs."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    run_row, run_start, run_end = [], [], []
    parent: list[int] = []

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    prev = (0, 0)  # index range of runs in previous row
    for r in range(h):
        starts, ends = _row_runs(mask[r] != 0)
        first = len(run_start)
        for s, e in zip(starts.tolist(), ends.tolist()):
            idx = len(run_start)
            run_row.append(r)
            run_start.append(s)
            run_end.append(e)
            parent.append(idx)
            # 8-connectivity: [s, e) touches [s2, e2) in the row above iff s <= e2 and s2 <= e
            for j in range(prev[0], prev[1]):
                if run_start[j] <= e and s <= run_end[j]:
                    a, b = find(idx), find(j)
                    if a != b:
                        # keep the earliest run as root so numbering follows raster order
                        if a < b:
                            parent[b] = a
                        else:
                            parent[a] = b
        prev = (first, len(run_start))

    n = 0
    root_label: dict[int, int] = {}
    for i in range(len(run_start)):
        root = find(i)
        lab = root_label.get(root)
        if lab is None:
            n += 1
            lab = root_label[root] = n
        labels[run_row[i], run_start[i]:run_end[i]] = lab
    return labels, n


def label8(mask: np.ndarray):
    """Label 8-connected foreground components; returns ``(labels, count)``."""
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    if m.ndim != 2:
        raise ValueError("mask must be 2-D")
    if _BACKEND == "numba":
        labels, n = _label8_numba(m)
        return labels, int(n)
    return _label8_numpy(m)


# ---------------------------------------------------------------------------
# CLAHE: bilinear blend of per-tile mappings
# ---------------------------------------------------------------------------

@njit(cache=True)
def _clahe_blend_numba(q, maps, r0, r1, fy, c0, c1, fx):
    h, w = q.shape
    out = np.empty((h, w), dtype=np.float64)
    for y in range(h):
        a0 = r0[y]
        a1 = r1[y]
        wy = fy[y]
        for x in range(w):
            b = q[y, x]
            k0 = c0[x]
            k1 = c1[x]
            wx = fx[x]
            top = (1.0 - wx) * maps[a0, k0, b] + wx * maps[a0, k1, b]
            bot = (1.0 - wx) * maps[a1, k0, b] + wx * maps[a1, k1, b]
            out[y, x] = (1.0 - wy) * top + wy * bot
    return out


def _clahe_blend_numpy(q, maps, r0, r1, fy, c0, c1, fx):
    qi = q.astype(np.intp)
    A0 = r0[:, None]
    A1 = r1[:, None]
    K0 = c0[None, :]
    K1 = c1[None, :]
    wx = fx[None, :]
    wy = fy[:, None]
    top = (1.0 - wx) * maps[A0, K0, qi] + wx * maps[A0, K1, qi]
    bot = (1.0 - wx) * maps[A1, K0, qi] + wx * maps[A1, K1, qi]
    return (1.0 - wy) * top + wy * bot


def clahe_blend(q, maps, r0, r1, fy, c0, c1, fx) -> np.ndarray:
    """Interpolate tile mappings ``maps[tile_r, tile_c, bin]`` at every pixel of ``q``.

    ``r0/r1/fy`` give, per row, the two neighbouring tile rows and the weight of
    the second; ``c0/c1/fx`` the same per column.
    """
    args = (
        np.ascontiguousarray(q, dtype=np.uint8),
        np.ascontiguousarray(maps, dtype=np.float64),
        np.ascontiguousarray(r0, dtype=np.int64),
        np.ascontiguousarray(r1, dtype=np.int64),
        np.ascontiguousarray(fy, dtype=np.float64),
        np.ascontiguousarray(c0, dtype=np.int64),
        np.ascontiguousarray(c1, dtype=np.int64),
        np.ascontiguousarray(fx, dtype=np.float64),
    )
    if _BACKEND == "numba":
        return _clahe_blend_numba(*args)
    return _clahe_blend_numpy(*args)


# ---------------------------------------------------------------------------
# Depthwise 2-D convolution (channels-last), forward and both gradients.
# xp is the already zero-padded input [N, Hp, Wp, C]; k is [kh, kw, C].
# ---------------------------------------------------------------------------

@njit(cache=True)
def _dw_forward_numba(xp, k, stride, ho, wo):
    n_, _, _, c_ = xp.shape
    kh, kw, _ = k.shape
    out = np.zeros((n_, ho, wo, c_), dtype=xp.dtype)
    for n in range(n_):
        for i in range(ho):
            for j in range(wo):
                for a in range(kh):
                    ii = i * stride + a
                    for b in range(kw):
                        jj = j * stride + b
                        for c in range(c_):
                            out[n, i, j, c] += xp[n, ii, jj, c] * k[a, b, c]
    return out


@njit(cache=True)
def _dw_backward_numba(xp, k, dy, stride):
    n_, hp, wp, c_ = xp.shape
    kh, kw, _ = k.shape
    _, ho, wo, _ = dy.shape
    dxp = np.zeros((n_, hp, wp, c_), dtype=xp.dtype)
    dk = np.zeros((kh, kw, c_), dtype=xp.dtype)
    for n in range(n_):
        for i in range(ho):
            for j in range(wo):
                for a in range(kh):
                    ii = i * stride + a
                    for b in range(kw):
                        jj = j * stride + b
                        for c in range(c_):
                            g = dy[n, i, j, c]
                            dxp[n, ii, jj, c] += g * k[a, b, c]
                            dk[a, b, c] += g * xp[n, ii, jj, c]
    return dxp, dk


def _dw_forward_numpy(xp, k, stride, ho, wo):
    kh, kw, _ = k.shape
    out = np.zeros((xp.shape[0], ho, wo, xp.shape[3]), dtype=xp.dtype)
    for a in range(kh):
        for b in range(kw):
            win = xp[:, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride, :]
            out += win * k[a, b]
    return out


def _dw_backward_numpy(xp, k, dy, stride):
    kh, kw, _ = k.shape
    _, ho, wo, _ = dy.shape
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(k)
    for a in range(kh):
        for b in range(kw):
            sl = (slice(None), slice(a, a + stride * (ho - 1) + 1, stride),
                  slice(b, b + stride * (wo - 1) + 1, stride), slice(None))
            dxp[sl] += dy * k[a, b]
            dk[a, b] = np.einsum("nhwc,nhwc->c", xp[sl], dy)
    return dxp, dk


def depthwise_forward(xp, k, stride, ho, wo):
    xp = np.ascontiguousarray(xp)
    k = np.ascontiguousarray(k, dtype=xp.dtype)
    if _BACKEND == "numba":
        return _dw_forward_numba(xp, k, int(stride), int(ho), int(wo))
    return _dw_forward_numpy(xp, k, stride, ho, wo)


def depthwise_backward(xp, k, dy, stride):
    """Return ``(d_xpadded, d_kernel)``."""
    xp = np.ascontiguousarray(xp)
    k = np.ascontiguousarray(k, dtype=xp.dtype)
    dy = np.ascontiguousarray(dy, dtype=xp.dtype)
    if _BACKEND == "numba":
        return _dw_backward_numba(xp, k, dy, int(stride))
    return _dw_backward_numpy(xp, k, dy, stride)


# ---------------------------------------------------------------------------
# GELU, erf form. float64 uses libm erf; float32 a rational fit.
# ---------------------------------------------------------------------------

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


@njit(cache=True, error_model="numpy")
def _erf32_numba(z):
    # clamped to [-4, 4]; max abs error ~5e-7. Keep branch-free (vectorises).
    out = np.empty_like(z)
    lo = np.float32(-4.0)
    hi = np.float32(4.0)
    for i in range(z.size):
        x = min(max(z[i], lo), hi)
        x2 = x * x
        p = np.float32(-2.72614225801306e-10)
        p = p * x2 + np.float32(2.77068142495902e-08)
        p = p * x2 + np.float32(-2.10102402082508e-06)
        p = p * x2 + np.float32(-5.69250639462346e-05)
        p = p * x2 + np.float32(-7.34990630326855e-04)
        p = p * x2 + np.float32(-2.95459980854025e-03)
        p = p * x2 + np.float32(-1.60960333262415e-02)
        p = p * x
        q = np.float32(-1.45660718464996e-05)
        q = q * x2 + np.float32(-2.13374055278905e-04)
        q = q * x2 + np.float32(-1.68282697438203e-03)
        q = q * x2 + np.float32(-7.37332916720468e-03)
        q = q * x2 + np.float32(-1.42647390514189e-02)
        out[i] = p / q
    return out


@njit(cache=True)
def _erf64_numba(z):
    out = np.empty_like(z)
    for i in range(z.size):
        out[i] = math.erf(z[i])
    return out


def _gelu_forward_numba(z):
    u = (z * z.dtype.type(_INV_SQRT2)).ravel()
    e = _erf32_numba(u) if z.dtype == np.float32 else _erf64_numba(u)
    cdf = (0.5 * (1.0 + e)).reshape(z.shape).astype(z.dtype, copy=False)
    return z * cdf, cdf


def _gelu_forward_numpy(z):
    from scipy.special import erf

    cdf = 0.5 * (1.0 + erf(z * _INV_SQRT2))
    return (z * cdf).astype(z.dtype, copy=False), cdf.astype(z.dtype, copy=False)


def gelu_forward(z):
    """Return ``(gelu(z), Phi(z))``."""
    z = np.ascontiguousarray(z)
    if _BACKEND == "numba":
        return _gelu_forward_numba(z)
    return _gelu_forward_numpy(z)


def gelu_backward(z, cdf, g):
    # numpy only: its SIMD exp is faster than scalar exp under numba
    pdf = np.exp(z * z * z.dtype.type(-0.5))
    pdf *= z.dtype.type(_INV_SQRT_2PI)
    return g * (cdf + z * pdf)


# ---------------------------------------------------------------------------
# Layer norm over the last axis (rows of a 2-D view)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _ln_forward_numba(x, gamma, beta, eps):
    n, c = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(n, dtype=x.dtype)
    for r in range(n):
        mu = 0.0
        for j in range(c):
            mu += x[r, j]
        mu /= c
        var = 0.0
        for j in range(c):
            d = x[r, j] - mu
            var += d * d
        var /= c
        s = 1.0 / math.sqrt(var + eps)
        inv[r] = s
        for j in range(c):
            h = (x[r, j] - mu) * s
            xhat[r, j] = h
            y[r, j] = h * gamma[j] + beta[j]
    return y, xhat, inv


@njit(cache=True)
def _ln_backward_numba(xhat, inv, gamma, g):
    n, c = xhat.shape
    gx = np.empty_like(xhat)
    gg = np.zeros(c, dtype=np.float64)
    gb = np.zeros(c, dtype=np.float64)
    for r in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(c):
            gh = g[r, j] * gamma[j]
            m1 += gh
            m2 += gh * xhat[r, j]
            gg[j] += g[r, j] * xhat[r, j]
            gb[j] += g[r, j]
        m1 /= c
        m2 /= c
        s = inv[r]
        for j in range(c):
            gx[r, j] = s * (g[r, j] * gamma[j] - m1 - xhat[r, j] * m2)
    return gx, gg, gb


def _ln_forward_numpy(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = xc * inv
    return xhat * gamma + beta, xhat, inv[:, 0]


def _ln_backward_numpy(xhat, inv, gamma, g):
    gh = g * gamma
    gx = inv[:, None] * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def layer_norm_forward(x2, gamma, beta, eps):
    """``x2`` is [rows, C]; returns ``(y, xhat, inv_std)``."""
    x2 = np.ascontiguousarray(x2)
    gamma = np.ascontiguousarray(gamma, dtype=x2.dtype)
    beta = np.ascontiguousarray(beta, dtype=x2.dtype)
    if _BACKEND == "numba":
        return _ln_forward_numba(x2, gamma, beta, float(eps))
    return _ln_forward_numpy(x2, gamma, beta, eps)


def layer_norm_backward(xhat, inv, gamma, g2):
    """Return ``(dx, dgamma, dbeta)`` for 2-D views."""
    gamma = np.ascontiguousarray(gamma, dtype=xhat.dtype)
    g2 = np.ascontiguousarray(g2, dtype=xhat.dtype)
    if _BACKEND == "numba":
        return _ln_backward_numba(xhat, inv, gamma, g2)
    return _ln_backward_numpy(xhat, inv, gamma, g2)
