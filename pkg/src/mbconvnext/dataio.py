"""NIfTI-1 volume reading/writing, slice datasets and model checkpoints.

All binary formats are little-endian.

``.slc``   ``b"CTSL"``, u32 version (1), u32 height, u32 width, then
           height*width float32, row-major.
``.ckpt``  ``b"CTCK"``, u32 version (1), u32 parameter count, then per
           parameter: u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
           float32 data; finally u32 length + UTF-8 JSON metadata.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    ConfigMismatch,
    CorruptEntry,
    DimensionMismatch,
    MissingManifest,
    TruncatedPayload,
    UnsupportedDatatype,
)

# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

NIFTI_HEADER_SIZE = 348
NIFTI_DTYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype("uint8"): 2, np.dtype("int16"): 4, np.dtype("float32"): 16}


@dataclass
class Volume:
    voxels: np.ndarray  # [nx, ny, nz], float
    source_path: str = ""

    @property
    def dims(self):
        return tuple(int(d) for d in self.voxels.shape)


def read_nifti(path) -> Volume:
    """Read an uncompressed single-file NIfTI-1 volume (``.nii``)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < NIFTI_HEADER_SIZE:
        raise TruncatedPayload(f"{path}: {len(raw)} bytes is shorter than a NIfTI-1 header")
    if raw[344:348] != b"n+1\x00":
        raise BadMagic(f"{path}: magic {raw[344:348]!r} is not n+1")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == NIFTI_HEADER_SIZE:
            raise UnsupportedDatatype(f"{path}: big-endian NIfTI files are not supported")
        raise BadMagic(f"{path}: sizeof_hdr={sizeof_hdr}")
    dim = struct.unpack_from("<8h", raw, 40)
    datatype, bitpix = struct.unpack_from("<hh", raw, 70)
    vox_offset, scl_slope, scl_inter = struct.unpack_from("<fff", raw, 108)
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {datatype}")
    dt = NIFTI_DTYPES[datatype]
    if bitpix != dt.itemsize * 8:
        raise UnsupportedDatatype(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")
    if dim[0] != 3:
        raise UnsupportedDatatype(f"{path}: dim[0]={dim[0]}, only 3-D volumes are supported")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise UnsupportedDatatype(f"{path}: non-positive dims {dim[1:4]}")
    offset = int(vox_offset)
    count = nx * ny * nz
    need = count * dt.itemsize
    if len(raw) - offset < need:
        raise TruncatedPayload(f"{path}: need {need} data bytes, have {max(0, len(raw) - offset)}")
    data = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
    vox = data.reshape((nx, ny, nz), order="F").astype(np.float64)
    if scl_slope != 0.0 and np.isfinite(scl_slope):
        vox = vox * float(scl_slope) + float(scl_inter)
    if not np.isfinite(vox).all():
        raise UnsupportedDatatype(f"{path}: non-finite voxel values")
    return Volume(vox, str(path))


def write_nifti(path, voxels, scl_slope=1.0, scl_inter=0.0, pixdim=(1.0, 1.0, 1.0)):
    """Write a 3-D array (uint8, int16 or float32) as a single-file NIfTI-1."""
    arr = np.asarray(voxels)
    if arr.ndim != 3:
        raise DimensionMismatch("NIfTI writer expects a 3-D array")
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise UnsupportedDatatype(f"cannot store dtype {arr.dtype}")
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *arr.shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, code, arr.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *pixdim, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<fff", hdr, 108, 352.0, scl_slope, scl_inter)
    struct.pack_into("<h", hdr, 252, 0)  # qform_code
    hdr[344:348] = b"n+1\x00"
    payload = np.asarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00\x00\x00\x00")  # empty extension block
        fh.write(payload)


# ---------------------------------------------------------------------------
# Slice datasets
# ---------------------------------------------------------------------------

SLC_MAGIC = b"CTSL"
SLC_VERSION = 1
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass
class SliceDataset:
    images: np.ndarray  # [N, H, W] float32
    labels: np.ndarray  # [N] int64
    ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    def counts(self):
        return {0: int((self.labels == 0).sum()), 1: int((self.labels == 1).sum())}

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return SliceDataset(self.images[idx], self.labels[idx], [self.ids[i] for i in idx])

    @classmethod
    def empty(cls, h=250, w=250):
        return cls(np.zeros((0, h, w), np.float32), np.zeros(0, np.int64), [])

    @classmethod
    def from_items(cls, items, h=250, w=250):
        """Build from ``(image, label, id)`` triples."""
        items = list(items)
        if not items:
            return cls.empty(h, w)
        imgs = np.stack([np.asarray(it[0], dtype=np.float32) for it in items])
        labels = np.array([int(it[1]) for it in items], dtype=np.int64)
        return cls(imgs, labels, [str(it[2]) for it in items])


@dataclass
class DatasetManifest:
    entries: list
    counts_per_class: dict
    format_version: int = MANIFEST_VERSION

    def to_json(self):
        return {
            "format_version": self.format_version,
            "counts_per_class": {str(k): int(v) for k, v in sorted(self.counts_per_class.items())},
            "entries": self.entries,
        }


def encode_slice(img) -> bytes:
    img = np.asarray(img, dtype="<f4")
    h, w = img.shape
    return SLC_MAGIC + struct.pack("<III", SLC_VERSION, h, w) + img.tobytes(order="C")


def decode_slice(buf: bytes, where="") -> np.ndarray:
    if len(buf) < 16 or buf[:4] != SLC_MAGIC:
        raise CorruptEntry(f"{where}: not a slice file")
    version, h, w = struct.unpack_from("<III", buf, 4)
    if version != SLC_VERSION:
        raise CorruptEntry(f"{where}: slice version {version}")
    if len(buf) != 16 + 4 * h * w:
        raise CorruptEntry(f"{where}: size {len(buf)} != {16 + 4 * h * w}")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)


def write_slice_dataset(slices, out_dir, size=(250, 250)) -> DatasetManifest:
    """Write ``(image, label, id)`` triples as ``.slc`` files plus ``manifest.json``."""
    out = Path(out_dir)
    if isinstance(slices, SliceDataset):
        slices = zip(slices.images, slices.labels, slices.ids)
    slices = list(slices)
    seen = set()
    for img, label, sid in slices:
        a = np.asarray(img)
        if a.shape != tuple(size):
            raise DimensionMismatch(f"slice {sid}: shape {a.shape} != {tuple(size)}")
        if not np.isfinite(a).all() or a.min() < 0.0 or a.max() > 1.0:
            raise DimensionMismatch(f"slice {sid}: values outside [0, 1]")
        if int(label) not in (0, 1):
            raise DimensionMismatch(f"slice {sid}: label {label}")
        if sid in seen:
            raise DimensionMismatch(f"duplicate slice id {sid!r}")
        seen.add(sid)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    counts = {0: 0, 1: 0}
    for i, (img, label, sid) in enumerate(slices):
        blob = encode_slice(img)
        fname = f"{i:06d}.slc"
        (out / fname).write_bytes(blob)
        h, w = np.asarray(img).shape
        entries.append({
            "id": str(sid), "label": int(label), "file": fname, "height": int(h), "width": int(w),
            "sha256": hashlib.sha256(blob).hexdigest(),
        })
        counts[int(label)] += 1
    manifest = DatasetManifest(entries, counts)
    text = json.dumps(manifest.to_json(), indent=1, sort_keys=True)
    (out / MANIFEST_NAME).write_text(text + "\n", encoding="utf-8")
    return manifest


def read_manifest(ds_dir) -> DatasetManifest:
    p = Path(ds_dir) / MANIFEST_NAME
    if not p.is_file():
        raise MissingManifest(f"no {MANIFEST_NAME} in {ds_dir}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MissingManifest(f"{p}: unreadable manifest ({exc})") from exc
    if doc.get("format_version") != MANIFEST_VERSION:
        raise MissingManifest(f"{p}: unsupported format_version {doc.get('format_version')!r}")
    counts = {int(k): int(v) for k, v in doc.get("counts_per_class", {}).items()}
    return DatasetManifest(doc["entries"], counts, MANIFEST_VERSION)


def read_slice_dataset(ds_dir) -> SliceDataset:
    ds_dir = Path(ds_dir)
    man = read_manifest(ds_dir)
    imgs, labels, ids = [], [], []
    for e in man.entries:
        f = ds_dir / e["file"]
        if not f.is_file():
            raise CorruptEntry(f"{e['id']}: missing file {f}")
        blob = f.read_bytes()
        if "sha256" in e and hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise CorruptEntry(f"{e['id']}: checksum mismatch")
        img = decode_slice(blob, str(f))
        if img.shape != (e["height"], e["width"]):
            raise CorruptEntry(f"{e['id']}: dims {img.shape} != manifest")
        if e["label"] not in (0, 1):
            raise CorruptEntry(f"{e['id']}: label {e['label']!r}")
        imgs.append(img)
        labels.append(e["label"])
        ids.append(e["id"])
    recount = {0: labels.count(0), 1: labels.count(1)}
    if recount != {0: man.counts_per_class.get(0, 0), 1: man.counts_per_class.get(1, 0)}:
        raise CorruptEntry(f"{ds_dir}: counts_per_class disagree with entries")
    if not imgs:
        return SliceDataset.empty()
    return SliceDataset(np.stack(imgs), np.array(labels, dtype=np.int64), ids)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"CTCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict
    meta: dict


def save_checkpoint(model, meta, path):
    for name, arr in model.params.items():
        if not np.isfinite(arr).all():
            raise ValueError(f"parameter {name} is not finite")
    meta = dict(meta)
    meta.setdefault("config", model.config.to_dict())
    meta.setdefault("config_hash", model.config.digest())
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(model.params))]
    for name, arr in model.params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.asarray(arr, dtype="<f4").tobytes(order="C"))
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(text)) + text)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise BadMagic(f"{path}: not a checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise UnsupportedDatatype(f"{path}: checkpoint version {version}")
    pos = 12
    params = {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if name in params:
                raise CorruptEntry(f"{path}: duplicate parameter {name}")
            if pos + 4 * n > len(buf):
                raise TruncatedPayload(f"{path}: parameter {name} truncated")
            params[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
        (ln,) = struct.unpack_from("<I", buf, pos)
        meta = json.loads(buf[pos + 4:pos + 4 + ln].decode("utf-8"))
    except struct.error as exc:
        raise TruncatedPayload(f"{path}: {exc}") from exc
    return Checkpoint(params, meta)


def restore_into(model, ckpt: Checkpoint):
    """Copy checkpoint parameters into ``model`` after checking names and shapes."""
    if set(ckpt.params) != set(model.params):
        missing = set(model.params) ^ set(ckpt.params)
        raise ConfigMismatch(f"parameter names differ: {sorted(missing)[:5]}")
    for name, arr in ckpt.params.items():
        if arr.shape != model.params[name].shape:
            raise ConfigMismatch(f"{name}: checkpoint {arr.shape} vs model {model.params[name].shape}")
    for name, arr in ckpt.params.items():
        model.params[name] = arr.astype(model.params[name].dtype, copy=True)
    return model
