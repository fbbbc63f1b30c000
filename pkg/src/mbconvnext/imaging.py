"""Slice preprocessing: window selection, rotation, resizing, CLAHE, lung ROI."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import kernels
from .errors import EmptySelection

ROI_SIZE = 250
ROI_HALF_WIDTH = 125


@dataclass(frozen=True)
class ClaheParams:
    tiles: tuple = (8, 8)
    clip_limit: float = 2.0
    bins: int = 256


@dataclass
class Region:
    label: int
    area: int
    bbox: tuple  # (row0, col0, row1, col1), half-open
    centroid: tuple  # (row, col)


@dataclass
class RoiResult:
    image: np.ndarray
    boxes: list = field(default_factory=list)
    fallback_used: str = "none"  # none | single_component | whole_image


def select_slices(volume, lo=0.2, hi=0.8):
    """Axial slices with index in ``[floor(lo*nz), ceil(hi*nz))``, in order."""
    if not 0.0 <= lo < hi <= 1.0:
        raise ValueError(f"need 0 <= lo < hi <= 1, got {lo}, {hi}")
    vox = volume.voxels if hasattr(volume, "voxels") else np.asarray(volume)
    nz = vox.shape[2]
    a, b = slice_window(nz, lo, hi)
    if b <= a:
        raise EmptySelection(f"no slices in [{a}, {b}) for nz={nz}")
    return [np.ascontiguousarray(vox[:, :, z]) for z in range(a, b)]


def slice_window(nz, lo=0.2, hi=0.8):
    """Half-open index range; fractions are taken at their decimal value."""
    a = math.floor(Fraction(str(lo)) * nz)
    b = min(nz, math.ceil(Fraction(str(hi)) * nz))
    return a, b


def orient(img, quarter_turns):
    """Rotate counter-clockwise by ``90 * quarter_turns`` degrees."""
    if quarter_turns not in (0, 1, 2, 3):
        raise ValueError("quarter_turns must be 0..3")
    return np.ascontiguousarray(np.rot90(img, quarter_turns))


def _axis_weights(n_in, n_out):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img, out_h, out_w):
    """Half-pixel-centre bilinear resize with border clamping."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    img = np.asarray(img)
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    r0, r1, fr = _axis_weights(h, out_h)
    c0, c1, fc = _axis_weights(w, out_w)
    x = img.astype(np.float64)
    rows = x[r0] * (1.0 - fr)[:, None] + x[r1] * fr[:, None]
    out = rows[:, c0] * (1.0 - fc)[None, :] + rows[:, c1] * fc[None, :]
    # convex combinations can drift one ulp outside the input range
    out = np.clip(out, x.min(), x.max())
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float64)


def normalize_minmax(img):
    x = np.asarray(img, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros(x.shape, dtype=np.float32)
    return ((x - lo) / (hi - lo)).astype(np.float32)


# ---------------------------------------------------------------------------
# CLAHE
# ---------------------------------------------------------------------------

def quantize(img, bins=256):
    q = np.floor(np.asarray(img, dtype=np.float64) * bins)
    return np.clip(q, 0, bins - 1).astype(np.uint8 if bins <= 256 else np.int64)


def clip_histogram(hist, limit):
    """Clip at ``limit`` and spread the excess evenly (remainder from bin 0 up)."""
    hist = np.asarray(hist, dtype=np.int64)
    nb = hist.size
    excess = int(np.maximum(hist - limit, 0).sum())
    out = np.minimum(hist, limit)
    out += excess // nb
    out[: excess % nb] += 1
    return out


def tile_edges(n, tiles):
    tiles = max(1, min(tiles, n))
    return np.array([k * n // tiles for k in range(tiles + 1)], dtype=np.int64)


def tile_mappings(q, params: ClaheParams):
    """Return ``(maps[tr, tc, bins], row_edges, col_edges)``."""
    h, w = q.shape
    re = tile_edges(h, params.tiles[0])
    ce = tile_edges(w, params.tiles[1])
    nb = params.bins
    maps = np.empty((len(re) - 1, len(ce) - 1, nb), dtype=np.float64)
    for i in range(len(re) - 1):
        for j in range(len(ce) - 1):
            tile = q[re[i]:re[i + 1], ce[j]:ce[j + 1]]
            npx = tile.size
            hist = np.bincount(tile.ravel(), minlength=nb)
            limit = math.ceil(params.clip_limit * npx / nb)
            maps[i, j] = np.cumsum(clip_histogram(hist, limit)) / npx
    return maps, re, ce


def _interp_index(n, edges):
    """Per-pixel neighbouring tile indices and weight along one axis."""
    centers = (edges[:-1] + edges[1:]) / 2.0 - 0.5
    pos = np.arange(n, dtype=np.float64)
    k = len(centers)
    i1 = np.searchsorted(centers, pos, side="right")
    i0 = np.clip(i1 - 1, 0, k - 1)
    i1 = np.clip(i1, 0, k - 1)
    f = np.zeros(n)
    inner = i0 != i1
    f[inner] = (pos[inner] - centers[i0[inner]]) / (centers[i1[inner]] - centers[i0[inner]])
    return i0, i1, f


def clahe(img, params: ClaheParams | None = None):
    """Contrast-limited adaptive histogram equalisation of an image in [0, 1]."""
    params = params or ClaheParams()
    if params.bins != 256:
        raise ValueError("only 256 bins are supported")
    q = quantize(img, params.bins)
    maps, re, ce = tile_mappings(q, params)
    r0, r1, fy = _interp_index(q.shape[0], re)
    c0, c1, fx = _interp_index(q.shape[1], ce)
    out = kernels.clahe_blend(q, maps, r0, r1, fy, c0, c1, fx)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Mask, components, ROI
# ---------------------------------------------------------------------------

def connected_components(mask):
    """8-connected regions sorted by area (desc), ties by bbox origin."""
    labels, n = kernels.label8(np.asarray(mask) != 0)
    return labels, region_stats(labels, n)


def region_stats(labels, n):
    if n == 0:
        return []
    flat = labels.ravel()
    rows, cols = np.indices(labels.shape)
    area = np.bincount(flat, minlength=n + 1)
    sr = np.bincount(flat, weights=rows.ravel(), minlength=n + 1)
    sc = np.bincount(flat, weights=cols.ravel(), minlength=n + 1)
    big = labels.size
    r0 = np.full(n + 1, big)
    c0 = np.full(n + 1, big)
    r1 = np.full(n + 1, -1)
    c1 = np.full(n + 1, -1)
    np.minimum.at(r0, flat, rows.ravel())
    np.minimum.at(c0, flat, cols.ravel())
    np.maximum.at(r1, flat, rows.ravel())
    np.maximum.at(c1, flat, cols.ravel())
    regions = [
        Region(int(k), int(area[k]), (int(r0[k]), int(c0[k]), int(r1[k]) + 1, int(c1[k]) + 1),
               (sr[k] / area[k], sc[k] / area[k]))
        for k in range(1, n + 1)
    ]
    regions.sort(key=lambda g: (-g.area, g.bbox[0], g.bbox[1]))
    return regions


def lung_mask(img, threshold=0.4):
    """Dark pixels, minus any 8-connected component touching the border."""
    fg = np.asarray(img) < threshold
    labels, n = kernels.label8(fg)
    if n == 0:
        return fg.astype(np.uint8)
    edge = np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]])
    drop = np.zeros(n + 1, dtype=bool)
    drop[np.unique(edge)] = True
    drop[0] = True
    return (~drop[labels]).astype(np.uint8)


def _crop_resize(img, box):
    r0, c0, r1, c1 = box
    return resize_bilinear(img[r0:r1, c0:c1], ROI_SIZE, ROI_HALF_WIDTH)


def extract_lung_roi(img, mask):
    """Crop the two largest mask components, resize each to 250x125, concat left|right."""
    img = np.asarray(img, dtype=np.float32)
    if img.shape != np.asarray(mask).shape:
        raise ValueError("image and mask must have equal shape")
    _, regions = connected_components(mask)
    if len(regions) >= 2:
        pair = sorted(regions[:2], key=lambda g: g.centroid[1])
        boxes = [g.bbox for g in pair]
        halves = [_crop_resize(img, b) for b in boxes]
        return RoiResult(np.concatenate(halves, axis=1), boxes, "none")
    if len(regions) == 1:
        r0, c0, r1, c1 = regions[0].bbox
        mid = max(c0 + 1, (c0 + c1) // 2)
        left = (r0, c0, r1, mid)
        right = (r0, mid, r1, c1) if c1 > mid else (r0, c0, r1, c1)
        halves = [_crop_resize(img, left), _crop_resize(img, right)]
        return RoiResult(np.concatenate(halves, axis=1), [regions[0].bbox], "single_component")
    return RoiResult(resize_bilinear(img, ROI_SIZE, ROI_SIZE), [], "whole_image")


# ---------------------------------------------------------------------------
# Full per-slice pipeline
# ---------------------------------------------------------------------------

@dataclass
class PreprocessConfig:
    slice_lo: float = 0.2
    slice_hi: float = 0.8
    quarter_turns: int = 1
    resize: int = 512
    normalize: str = "slice"  # slice | volume
    clahe_tiles: list = field(default_factory=lambda: [8, 8])
    clahe_clip: float = 2.0
    mask_threshold: float = 0.4
    order: list = field(default_factory=lambda: ["resize", "normalize", "clahe"])

    def clahe_params(self):
        return ClaheParams(tuple(self.clahe_tiles), float(self.clahe_clip))


def preprocess_slice(raw, cfg: PreprocessConfig, vrange=None) -> RoiResult:
    """orient -> (resize, normalize, clahe in ``cfg.order``) -> mask -> ROI."""
    img = orient(np.asarray(raw, dtype=np.float64), cfg.quarter_turns)
    for step in cfg.order:
        if step == "resize":
            img = resize_bilinear(img, cfg.resize, cfg.resize)
        elif step == "normalize":
            if cfg.normalize == "volume" and vrange is not None:
                lo, hi = vrange
                img = np.zeros_like(img, dtype=np.float32) if hi == lo else \
                    np.clip((img - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)
            else:
                img = normalize_minmax(img)
        elif step == "clahe":
            img = clahe(img, cfg.clahe_params())
        else:
            raise ValueError(f"unknown preprocessing step {step!r}")
    mask = lung_mask(img, cfg.mask_threshold)
    return extract_lung_roi(img, mask)


def preprocess_volume(volume, cfg: PreprocessConfig):
    """Yield ``(slice_index, RoiResult)`` for every selected slice."""
    vox = volume.voxels
    a, b = slice_window(vox.shape[2], cfg.slice_lo, cfg.slice_hi)
    if b <= a:
        raise EmptySelection(f"no slices selected from nz={vox.shape[2]}")
    vrange = (float(vox.min()), float(vox.max()))
    for z in range(a, b):
        yield z, preprocess_slice(vox[:, :, z], cfg, vrange)
