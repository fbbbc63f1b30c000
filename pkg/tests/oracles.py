"""Independent slow reference implementations used as test oracles."""
import math
from collections import deque

import numpy as np


def conv2d_loops(x, k, b, stride, pad):
    n, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    y = np.zeros((n, ho, wo, cout))
    for i in range(n):
        for r in range(ho):
            for c in range(wo):
                for o in range(cout):
                    acc = 0.0 if b is None else b[o]
                    for a in range(kh):
                        for d in range(kw):
                            for ci in range(cin):
                                acc += xp[i, r * stride + a, c * stride + d, ci] * k[a, d, ci, o]
                    y[i, r, c, o] = acc
    return y


def depthwise_loops(x, k, b, stride, pad):
    n, h, w, ch = x.shape
    kh, kw, _ = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    y = np.zeros((n, ho, wo, ch))
    for i in range(n):
        for r in range(ho):
            for c in range(wo):
                for q in range(ch):
                    acc = 0.0 if b is None else b[q]
                    for a in range(kh):
                        for d in range(kw):
                            acc += xp[i, r * stride + a, c * stride + d, q] * k[a, d, q]
                    y[i, r, c, q] = acc
    return y


def flood_fill_labels(mask):
    """BFS 8-connected labelling; components get ids in raster order of first pixel."""
    h, w = mask.shape
    lab = np.zeros((h, w), dtype=np.int64)
    n = 0
    for r in range(h):
        for c in range(w):
            if mask[r, c] and lab[r, c] == 0:
                n += 1
                lab[r, c] = n
                dq = deque([(r, c)])
                while dq:
                    y, x = dq.popleft()
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            yy, xx = y + dy, x + dx
                            if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and lab[yy, xx] == 0:
                                lab[yy, xx] = n
                                dq.append((yy, xx))
    return lab, n


def global_hist_eq(img, bins=256):
    """Plain histogram equalisation: v -> CDF(bin(v)) on quantised bins."""
    q = np.clip(np.floor(np.asarray(img, dtype=np.float64) * bins), 0, bins - 1).astype(int)
    counts = [0] * bins
    for v in q.ravel():
        counts[v] += 1
    cdf, run = [0.0] * bins, 0
    for i in range(bins):
        run += counts[i]
        cdf[i] = run / q.size
    out = np.empty(q.shape)
    for idx, v in np.ndenumerate(q):
        out[idx] = cdf[v]
    return out


def adam_reference(theta0, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-loop Adam over a flat list of floats."""
    theta = [float(t) for t in np.ravel(theta0)]
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    traj = []
    for t in range(1, steps + 1):
        g = [float(x) for x in np.ravel(grad_fn(np.array(theta).reshape(np.shape(theta0)), t))]
        for i in range(len(theta)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            theta[i] -= lr * mh / (math.sqrt(vh) + eps)
        traj.append(list(theta))
    return np.array(traj)


def auc_brute(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    acc = 0.0
    for p in pos:
        for q in neg:
            acc += 1.0 if p > q else 0.5 if p == q else 0.0
    return acc / (len(pos) * len(neg))


def roc_brute(scores, labels):
    """(fpr, tpr) at each threshold in [+inf, distinct scores desc..., -inf]."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    P, N = int((y == 1).sum()), int((y == 0).sum())
    thr = [math.inf] + sorted(set(s.tolist()), reverse=True)[:-1] + [-math.inf]
    pts = []
    for t in thr:
        pred = (s >= t) if math.isfinite(t) else np.full(s.shape, t < 0)
        pts.append((float((pred & (y == 0)).sum()) / N, float((pred & (y == 1)).sum()) / P))
    return pts, thr


def resize_reference(img, oh, ow):
    """Per-pixel half-pixel-centre bilinear with edge clamping."""
    h, w = img.shape
    out = np.zeros((oh, ow))
    for r in range(oh):
        sy = min(max((r + 0.5) * h / oh - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy)); y1 = min(y0 + 1, h - 1); fy = sy - y0
        for c in range(ow):
            sx = min(max((c + 0.5) * w / ow - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx)); x1 = min(x0 + 1, w - 1); fx = sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[r, c] = top * (1 - fy) + bot * fy
    return out


def numeric_grad(f, x, eps=1e-4):
    """Central differences of scalar ``f`` w.r.t. array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, n, floor=1e-3):
    """max |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0
