"""Synthetic chest-CT phantoms: a bright body disk, two dark lungs, and for
positive cases textured mid-intensity blobs inside the lungs.

Volumes are laid out ``[x, y, z]`` so that ``orient(vox[:, :, z], 1)`` gives the
upright slice.  Intensities are HU-like and stored as int16 with a -1024
intercept.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio, imaging
from .dataio import Volume


@dataclass
class PhantomSpec:
    dims: tuple = (128, 128, 40)
    background_hu: float = -1000.0
    body_hu: tuple = (20.0, 60.0)
    lung_hu: tuple = (-880.0, -820.0)
    lesion_hu: tuple = (-520.0, -320.0)
    lesion_count: tuple = (1, 4)
    lesion_radius: tuple = (0.05, 0.09)  # fraction of the slice width
    lesion_texture_hu: float = 30.0  # per-pixel mottling inside lesions
    noise_hu: float = 12.0
    body_radius: tuple = (0.40, 0.45)
    lung_axes: tuple = ((0.12, 0.15), (0.24, 0.29))  # (semi-axis x, semi-axis y) ranges
    lung_offset: tuple = (0.19, 0.23)
    seed: int = 0


def stream_seed(*parts) -> int:
    """Stable 64-bit seed derived from arbitrary string-able parts."""
    h = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


def _value_noise(rng, h, w, cells=6):
    grid = rng.random((cells + 1, cells + 1))
    return imaging.resize_bilinear(grid, h, w)


def _u(rng, lo_hi):
    lo, hi = lo_hi
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def phantom_slice(spec: PhantomSpec, rng, geometry, zfrac, n_lesions):
    """One upright HU slice; ``geometry`` is shared by all slices of a volume."""
    w, h = spec.dims[0], spec.dims[1]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    img = np.full((h, w), spec.background_hu)
    g = geometry
    body = ((xx - cx) / (g["body_r"] * w)) ** 2 + ((yy - cy) / (g["body_r"] * 0.85 * h)) ** 2 <= 1.0
    img[body] = g["body_hu"]
    scale = 0.8 + 0.2 * np.sin(np.pi * zfrac)
    lungs = []
    for side in (-1, 1):
        lx = cx + side * g["lung_off"] * w
        ax, ay = g["lung_ax"][side] * w * scale, g["lung_ay"][side] * h * scale
        inside = ((xx - lx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
        img[inside] = g["lung_hu"]
        lungs.append((lx, cy, ax, ay))
    for _ in range(n_lesions):
        lx, ly, ax, ay = lungs[int(rng.integers(2))]
        r = _u(rng, spec.lesion_radius) * w
        # centre inside the lung ellipse shrunk by the blob radius plus a pixel
        ia, ib = max(ax - r - 1.0, 0.5), max(ay - r - 1.0, 0.5)
        t = rng.uniform(0, 2 * np.pi)
        rho = np.sqrt(rng.uniform(0, 1))
        bx, by = lx + ia * rho * np.cos(t), ly + ib * rho * np.sin(t)
        d = np.sqrt((xx - bx) ** 2 + (yy - by) ** 2) / r
        weight = np.clip(1.2 * (1.0 - d), 0.0, 1.0) * (0.55 + 0.45 * _value_noise(rng, h, w))
        hu = _u(rng, spec.lesion_hu)
        mottle = spec.lesion_texture_hu * rng.standard_normal(img.shape)
        img = img + weight * (hu - g["lung_hu"] + mottle)
    img = img + rng.normal(0.0, spec.noise_hu, size=img.shape)
    return img


def _geometry(spec, rng):
    return {
        "body_r": _u(rng, spec.body_radius),
        "body_hu": _u(rng, spec.body_hu),
        "lung_hu": _u(rng, spec.lung_hu),
        "lung_off": _u(rng, spec.lung_offset),
        "lung_ax": {s: _u(rng, spec.lung_axes[0]) for s in (-1, 1)},
        "lung_ay": {s: _u(rng, spec.lung_axes[1]) for s in (-1, 1)},
    }


@dataclass
class Phantom:
    volume: Volume
    label: int
    lesion_counts: list = field(default_factory=list)


def generate_phantom(spec: PhantomSpec, positive: bool, seed=None) -> Phantom:
    """Deterministic phantom volume (float HU voxels) plus per-slice lesion counts."""
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(stream_seed("phantom", seed, int(positive)))
    nx, ny, nz = spec.dims
    geom = _geometry(spec, rng)
    vox = np.empty((nx, ny, nz))
    counts = []
    lo, hi = spec.lesion_count
    for z in range(nz):
        n = int(rng.integers(lo, hi + 1)) if positive else 0
        sl = phantom_slice(spec, rng, geom, (z + 0.5) / nz, n)
        vox[:, :, z] = np.rot90(sl, -1)
        counts.append(n)
    stored = np.clip(np.round(vox + 1024.0), -32768, 32767).astype(np.int16)
    vox = stored.astype(np.float64) - 1024.0
    return Phantom(Volume(vox, ""), int(positive), counts)


def write_phantom(ph: Phantom, path):
    stored = np.round(ph.volume.voxels + 1024.0).astype(np.int16)
    dataio.write_nifti(path, stored, scl_slope=1.0, scl_inter=-1024.0)


def volume_ids(n_pos, n_neg):
    return [(f"vol{i:04d}", 1 if i < n_pos else 0) for i in range(n_pos + n_neg)]


def generate_corpus(n_pos, n_neg, seed, out_dir, spec: PhantomSpec | None = None):
    """Write ``<id>.nii`` phantoms and ``labels.csv`` (``volume_id,label``)."""
    spec = spec or PhantomSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for vid, label in volume_ids(n_pos, n_neg):
        ph = generate_phantom(spec, bool(label), stream_seed(seed, vid))
        write_phantom(ph, out / f"{vid}.nii")
        rows.append((vid, label))
    with open(out / "labels.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["volume_id", "label"])
        wr.writerows(rows)
    return rows


def phantom_slices(n_pos, n_neg, seed, spec: PhantomSpec | None = None, cfg=None):
    """Preprocess phantoms in memory; yields ``(roi_image, volume_label, lesion_count, id, fallback)``."""
    spec = spec or PhantomSpec()
    cfg = cfg or imaging.PreprocessConfig()
    for vid, label in volume_ids(n_pos, n_neg):
        ph = generate_phantom(spec, bool(label), stream_seed(seed, vid))
        for z, roi in imaging.preprocess_volume(ph.volume, cfg):
            yield roi.image, label, ph.lesion_counts[z], f"{vid}_z{z:03d}", roi.fallback_used


def generate_labeled_dataset(n_pos, n_neg, seed, out_dir, spec=None, cfg=None):
    """Phantoms -> full preprocessing -> ``.slc`` dataset; returns the manifest."""
    items = [(img, lab, sid) for img, lab, _, sid, _ in phantom_slices(n_pos, n_neg, seed, spec, cfg)]
    return dataio.write_slice_dataset(items, out_dir)


def lesion_parity_dataset(n_volumes, seed, spec: PhantomSpec | None = None, cfg=None):
    """Auxiliary task: label is the per-slice lesion count mod 2.

    Every volume is generated with lesions (``spec.lesion_count`` should
    straddle odd and even counts, e.g. (1, 2)); negatives of the main task
    never appear, so the labels carry no presence signal.
    """
    spec = spec or PhantomSpec(lesion_count=(1, 2))
    items = [(img, n % 2, f"aux_{sid}") for img, _, n, sid, _ in phantom_slices(n_volumes, 0, seed, spec, cfg)]
    return dataio.SliceDataset.from_items(items)
