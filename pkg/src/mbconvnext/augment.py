"""Seeded augmentation, class balancing and stratified splitting."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .dataio import SliceDataset
from .errors import ClassTooSmall, EmptyClass
from .synth import stream_seed


@dataclass(frozen=True)
class TransformSpec:
    rotate_deg: float = 0.0
    flip_h: bool = False
    flip_v: bool = False
    shift_frac: tuple = (0.0, 0.0)  # (dx, dy) as fractions of width/height
    gamma: float = 1.0
    noise_sigma: float = 0.0


@dataclass
class AugmentPolicy:
    rotate_deg: tuple = (-15.0, 15.0)
    shift_frac: tuple = (-0.1, 0.1)
    gamma: tuple = (0.8, 1.2)
    noise_sigma: tuple = (0.0, 0.02)
    p_flip_h: float = 0.5
    p_flip_v: float = 0.5
    target_per_class: int = 2500
    seed: int = 0


@dataclass
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 0


def _bilinear_fill0(img, src_r, src_c):
    """Sample ``img`` at fractional coords; neighbours outside the image read 0."""
    h, w = img.shape
    r0 = np.floor(src_r).astype(np.intp)
    c0 = np.floor(src_c).astype(np.intp)
    fr = src_r - r0
    fc = src_c - c0
    out = np.zeros(src_r.shape)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = np.zeros(src_r.shape)
            vals[ok] = img[rr[ok], cc[ok]]
            out += wr * wc * vals
    return out


def rotate(img, deg):
    """Rotate about the image centre (counter-clockwise), bilinear, zero fill."""
    if deg == 0.0:
        return np.asarray(img, dtype=np.float64).copy()
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = np.deg2rad(deg)
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    y, x = rr - cy, cc - cx
    # inverse map: output pixel -> source location
    src_c = np.cos(t) * x - np.sin(t) * y + cx
    src_r = np.sin(t) * x + np.cos(t) * y + cy
    return _bilinear_fill0(np.asarray(img, dtype=np.float64), src_r, src_c)


def shift(img, dx, dy):
    """Translate by ``dx`` columns and ``dy`` rows (fractional), zero fill."""
    if dx == 0.0 and dy == 0.0:
        return np.asarray(img, dtype=np.float64).copy()
    h, w = img.shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    return _bilinear_fill0(np.asarray(img, dtype=np.float64), rr - dy, cc - dx)


def apply_transform(img, spec: TransformSpec, noise_seed=0):
    """rotate -> flips -> shift -> gamma -> noise -> clamp to [0, 1]."""
    x = rotate(np.asarray(img, dtype=np.float64), spec.rotate_deg)
    if spec.flip_h:
        x = x[:, ::-1]
    if spec.flip_v:
        x = x[::-1, :]
    h, w = x.shape
    x = shift(x, spec.shift_frac[0] * w, spec.shift_frac[1] * h)
    x = np.clip(x, 0.0, 1.0)
    if spec.gamma != 1.0:
        x = x ** spec.gamma
    if spec.noise_sigma > 0.0:
        x = x + np.random.default_rng(noise_seed).normal(0.0, spec.noise_sigma, size=x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def _draw(rng, lo_hi):
    lo, hi = lo_hi
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def sample_spec(policy: AugmentPolicy, rng) -> TransformSpec:
    """Draw every field uniformly within the policy ranges (fixed draw order)."""
    rot = _draw(rng, policy.rotate_deg)
    fh = bool(rng.random() < policy.p_flip_h)
    fv = bool(rng.random() < policy.p_flip_v)
    dx = _draw(rng, policy.shift_frac)
    dy = _draw(rng, policy.shift_frac)
    gamma = _draw(rng, policy.gamma)
    sigma = _draw(rng, policy.noise_sigma)
    return TransformSpec(rot, fh, fv, (dx, dy), gamma, sigma)


def augment_item(img, aug_id, policy: AugmentPolicy):
    """Transform one image with the stream keyed by ``(seed, aug_id)``."""
    rng = np.random.default_rng(stream_seed("augment", policy.seed, aug_id))
    spec = sample_spec(policy, rng)
    return apply_transform(img, spec, noise_seed=int(rng.integers(2**63))), spec


def balance_augment(train: SliceDataset, policy: AugmentPolicy) -> SliceDataset:
    """Top every class up to ``target_per_class`` with augmented copies.

    Originals are kept in order; per class they are cycled round-robin in id
    order, and the k-th copy of original ``x`` is ``"x#aug<k>"``.
    """
    counts = train.counts()
    for c in (0, 1):
        if counts[c] == 0:
            raise EmptyClass(f"class {c} has no samples")
        if counts[c] > policy.target_per_class:
            raise ValueError(f"class {c} has {counts[c]} samples > target {policy.target_per_class}")
    new_imgs, new_labels, new_ids = [], [], []
    for c in (0, 1):
        members = sorted((train.ids[i], i) for i in np.flatnonzero(train.labels == c))
        need = policy.target_per_class - counts[c]
        for j in range(need):
            sid, i = members[j % len(members)]
            aug_id = f"{sid}#aug{j // len(members)}"
            img, _ = augment_item(train.images[i], aug_id, policy)
            new_imgs.append(img)
            new_labels.append(c)
            new_ids.append(aug_id)
    if not new_ids:
        return SliceDataset(train.images.copy(), train.labels.copy(), list(train.ids))
    return SliceDataset(
        np.concatenate([train.images, np.stack(new_imgs)]),
        np.concatenate([train.labels, np.array(new_labels, dtype=np.int64)]),
        list(train.ids) + new_ids,
    )


def n_train(n, fraction):
    """``round(fraction * n)`` with halves rounded up, on the decimal fraction."""
    return math.floor(Fraction(str(fraction)) * n + Fraction(1, 2))


def stratified_split(items: SliceDataset, spec: SplitSpec):
    """Per-class seeded shuffle; the first ``round(f * n_c)`` of each go to train."""
    if not 0.0 < spec.train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(stream_seed("split", spec.seed))
    tr, va = [], []
    for c in (0, 1):
        idx = np.flatnonzero(items.labels == c)
        if len(idx) < 2:
            raise ClassTooSmall(f"class {c} has {len(idx)} items; need at least 2")
        idx = idx[rng.permutation(len(idx))]
        k = n_train(len(idx), spec.train_fraction)
        tr.extend(idx[:k].tolist())
        va.extend(idx[k:].tolist())
    return items.subset(sorted(tr)), items.subset(sorted(va))
