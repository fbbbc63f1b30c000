"""Command-line entry point: synth, preprocess, split, augment, train, evaluate.

Exit codes: 0 success, 2 input/config error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
import tempfile
from pathlib import Path

from . import augment, config as C, dataio, imaging, metrics, synth, train
from . import model as M
from .errors import ConfigMismatch, InvalidConfig, MBError, NonFiniteError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(MBError):
    pass


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


class Paths:
    """Config paths resolved against the directory holding the config file."""

    def __init__(self, cfg: C.RunConfig, base: Path):
        p = cfg.paths

        def r(s):
            q = Path(s)
            return q if q.is_absolute() else base / q

        self.volumes = r(p.volumes)
        self.labels = r(p.labels) if p.labels else self.volumes / "labels.csv"
        self.dataset = r(p.dataset)
        self.split_train = r(p.split_train)
        self.train = r(p.train)
        self.val = r(p.val)
        self.run = r(p.run)
        self.report = r(p.report) if p.report else self.run / "report"
        self.checkpoint = r(p.checkpoint) if p.checkpoint else self.run / "best_auc.ckpt"


def _atomic_dir(target: Path, build):
    """Run ``build(tmp_dir)`` and move the result into place; nothing is left on failure."""
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        out = build(tmp)
        if target.exists():
            shutil.rmtree(target)
        tmp.rename(target)
        return out
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)


def read_labels(path: Path) -> dict:
    if not path.is_file():
        raise InputError(f"labels file not found: {path}")
    out = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None or not {"volume_id", "label"} <= set(rd.fieldnames):
            raise InputError(f"{path}: header must be volume_id,label")
        for row in rd:
            if row["label"] not in ("0", "1"):
                raise InputError(f"{path}: label for {row['volume_id']} must be 0 or 1")
            out[row["volume_id"]] = int(row["label"])
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: C.RunConfig, paths: Paths, args):
    s = cfg.synth
    spec = synth.PhantomSpec(dims=tuple(s.dims), lesion_hu=tuple(s.lesion_hu),
                             lesion_radius=tuple(s.lesion_radius), seed=cfg.seed)
    try:
        _atomic_dir(paths.volumes, lambda d: synth.generate_corpus(s.n_pos, s.n_neg, cfg.seed, d, spec))
    except OSError as exc:
        raise InputError(f"cannot write {paths.volumes}: {exc}") from exc
    print(f"wrote {s.n_pos + s.n_neg} volumes to {paths.volumes}")


def cmd_preprocess(cfg: C.RunConfig, paths: Paths, args):
    if not paths.volumes.is_dir():
        raise InputError(f"input directory not found: {paths.volumes}")
    files = sorted(paths.volumes.glob("*.nii"))
    if not files:
        raise InputError(f"no .nii files in {paths.volumes}")
    labels = read_labels(paths.labels)
    missing = [f.stem for f in files if f.stem not in labels]
    if missing:
        raise InputError(f"no label for volumes {missing[:5]} in {paths.labels}")
    items, log = [], []
    n_fallback = 0
    for f in files:
        vol = dataio.read_nifti(f)
        for z, roi in imaging.preprocess_volume(vol, cfg.preprocess):
            sid = f"{f.stem}_z{z:03d}"
            items.append((roi.image, labels[f.stem], sid))
            log.append(json.dumps({"id": sid, "source": f.name, "z": z, "fallback": roi.fallback_used,
                                   "boxes": [list(b) for b in roi.boxes]}, sort_keys=True))
            if roi.fallback_used != "none":
                n_fallback += 1
                print(f"warning: {sid}: ROI fallback {roi.fallback_used}", file=sys.stderr)

    def build(d):
        man = dataio.write_slice_dataset(items, d)
        (d / "provenance.log").write_text("\n".join(log) + "\n", encoding="utf-8")
        return man

    man = _atomic_dir(paths.dataset, build)
    print(f"wrote {len(man.entries)} slices {man.counts_per_class} ({n_fallback} fallbacks) to {paths.dataset}")


def _read_ds(path: Path):
    try:
        return dataio.read_slice_dataset(path)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc


def cmd_split(cfg: C.RunConfig, paths: Paths, args):
    ds = _read_ds(paths.dataset)
    tr, va = augment.stratified_split(ds, cfg.split)
    _atomic_dir(paths.split_train, lambda d: dataio.write_slice_dataset(tr, d))
    _atomic_dir(paths.val, lambda d: dataio.write_slice_dataset(va, d))
    print(f"train {tr.counts()} -> {paths.split_train}; val {va.counts()} -> {paths.val}")


def cmd_augment(cfg: C.RunConfig, paths: Paths, args):
    tr = _read_ds(paths.split_train)
    out = augment.balance_augment(tr, cfg.augment)
    _atomic_dir(paths.train, lambda d: dataio.write_slice_dataset(out, d))
    print(f"augmented train {out.counts()} -> {paths.train}")


def cmd_train(cfg: C.RunConfig, paths: Paths, args):
    tr = _read_ds(paths.train)
    va = _read_ds(paths.val)
    t = cfg.training
    model = M.build_model(cfg.model, init_seed=t.init_seed)
    paths.run.mkdir(parents=True, exist_ok=True)
    C.save(cfg, paths.run / "config.yaml")
    hist = train.train_two_phase(
        model, tr, va, (t.phase1, t.phase2), t.callbacks, paths.run,
        seed=cfg.seed, log=print, class_weights=tuple(t.class_weights),
    )
    best = hist.record(hist.best_val_auc_epoch)
    print(f"final: epochs {len(hist)} best_val_auc {best.val_auc:.4f} (epoch {best.epoch}) "
          f"last val_loss {hist.records[-1].val_loss:.4f}")


def load_model_for(cfg: C.RunConfig, ckpt_path: Path) -> M.Model:
    if not ckpt_path.is_file():
        raise InputError(f"checkpoint not found: {ckpt_path}")
    ckpt = dataio.load_checkpoint(ckpt_path)
    if ckpt.meta.get("config_hash") != cfg.model.digest():
        raise ConfigMismatch(f"{ckpt_path}: model config differs from the run config")
    model = M.build_model(cfg.model, init_seed=cfg.training.init_seed)
    return dataio.restore_into(model, ckpt)


def cmd_evaluate(cfg: C.RunConfig, paths: Paths, args):
    ckpt = Path(args.checkpoint) if args.checkpoint else paths.checkpoint
    data = Path(args.data) if args.data else paths.val
    out = Path(args.out) if args.out else paths.report
    model = load_model_for(cfg, ckpt)
    ds = _read_ds(data)
    probs = M.predict(model, ds.images, cfg.training.phase1.batch_size)
    hist_path = paths.run / "history.csv"
    hist = train.read_history_csv(hist_path) if hist_path.is_file() else None
    rep = metrics.export_report(hist, probs, ds.labels, out)
    print(f"auc {rep.auc:.4f} accuracy {rep.accuracy:.4f} precision {rep.precision:.4f} "
          f"recall {rep.recall:.4f} f1 {rep.f1:.4f} -> {out}")


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "split": cmd_split,
    "augment": cmd_augment,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="mbconvnext", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--seed", type=int, default=None, help="override every seed")
        if name == "evaluate":
            sp.add_argument("--checkpoint", default=None)
            sp.add_argument("--data", default=None, help="dataset directory (default: val)")
            sp.add_argument("--out", default=None, help="report directory")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise InputError(f"config not found: {cfg_path}")
        cfg = C.load(cfg_path)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        paths = Paths(cfg, cfg_path.resolve().parent)
        COMMANDS[args.command](cfg, paths, args)
    except NonFiniteError as exc:
        _err(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except (MBError, InvalidConfig, OSError) as exc:
        _err(str(exc))
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
