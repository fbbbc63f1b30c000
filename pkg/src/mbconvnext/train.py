"""Two-phase training: Adam, BCE, epoch loop, plateau LR and early stopping."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from . import model as M
from . import tensor as T
from .dataio import SliceDataset, save_checkpoint
from .errors import InvalidConfig, ShapeMismatch
from .synth import stream_seed


@dataclass
class PhaseConfig:
    epochs: int
    learning_rate: float
    batch_size: int = 32
    phase: int = 1

    def validate(self):
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if not self.learning_rate >= 0.0:
            raise InvalidConfig("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.phase not in (1, 2):
            raise InvalidConfig("phase must be 1 or 2")
        return self


def default_phases():
    return PhaseConfig(12, 1e-3, 32, 1), PhaseConfig(8, 1e-6, 32, 2)


@dataclass
class CallbackConfig:
    early_stop_patience: int = 5
    plateau_factor: float = 0.5
    plateau_patience: int = 2
    min_lr: float = 1e-9
    min_delta: float = 1e-4
    enabled: bool = True

    def validate(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise InvalidConfig("plateau_factor must be in (0, 1)")
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise InvalidConfig("patiences must be >= 1")
        if self.min_lr < 0 or self.min_delta < 0:
            raise InvalidConfig("min_lr and min_delta must be >= 0")
        return self


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class OptimizerState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = ADAM_EPS


def init_optimizer(params: dict, names=None) -> OptimizerState:
    names = list(params) if names is None else list(names)
    return OptimizerState(
        {k: np.zeros_like(params[k]) for k in names},
        {k: np.zeros_like(params[k]) for k in names},
    )


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float, trainable=None):
    """In-place bias-corrected Adam on the parameters named in ``grads``.

    Names absent from ``grads`` (or flagged False in ``trainable``) are not
    touched.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        if trainable is not None and not trainable[name]:
            continue
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        g = g.astype(p.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# callbacks
# ---------------------------------------------------------------------------

def _improved(value, best, min_delta):
    return best is None or value < best - min_delta


class Plateau:
    """Stateful reduce-on-plateau; the wait counter resets after a reduction."""

    def __init__(self, cfg: CallbackConfig):
        self.cfg = cfg
        self.best = None
        self.wait = 0

    def step(self, val_loss, lr):
        if _improved(val_loss, self.best, self.cfg.min_delta):
            self.best = val_loss
            self.wait = 0
            return lr
        self.wait += 1
        if self.wait >= self.cfg.plateau_patience:
            self.wait = 0
            return max(self.cfg.min_lr, lr * self.cfg.plateau_factor)
        return lr


def _val_losses(history):
    if isinstance(history, TrainHistory):
        return [r.val_loss for r in history.records]
    return [r if isinstance(r, (int, float)) else r.val_loss for r in history]


def reduce_on_plateau(history, cfg: CallbackConfig, current_lr):
    """LR after the latest epoch, replaying the plateau rule over ``history``."""
    losses = _val_losses(history)
    if not losses:
        raise ValueError("history is empty")
    pl = Plateau(cfg)
    for v in losses[:-1]:
        pl.step(v, 1.0)
    return pl.step(losses[-1], current_lr)


def early_stop(history, cfg: CallbackConfig) -> bool:
    """True once val_loss went ``early_stop_patience`` epochs without improving."""
    losses = _val_losses(history)
    if not losses:
        raise ValueError("history is empty")
    best, wait = None, 0
    for v in losses:
        if _improved(v, best, cfg.min_delta):
            best, wait = v, 0
        else:
            wait += 1
    return wait >= cfg.early_stop_patience


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    phase: int
    train_loss: float
    train_auc: float
    val_loss: float
    val_auc: float
    lr: float
    wall_time: float = 0.0


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_val_loss_epoch: int | None = None
    best_val_auc_epoch: int | None = None
    early_stopped: list = field(default_factory=list)  # phases that stopped early

    def __len__(self):
        return len(self.records)

    def phase_records(self, phase):
        return [r for r in self.records if r.phase == phase]

    def record(self, epoch):
        return next(r for r in self.records if r.epoch == epoch)


HISTORY_FIELDS = ("epoch", "phase", "train_loss", "train_auc", "val_loss", "val_auc", "lr")


def write_history_csv(history: TrainHistory, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(HISTORY_FIELDS)
        for r in history.records:
            wr.writerow([r.epoch, r.phase] + [repr(float(getattr(r, k))) for k in HISTORY_FIELDS[2:]])


def read_history_csv(path) -> TrainHistory:
    h = TrainHistory()
    with open(path) as fh:
        for row in csv.DictReader(fh):
            h.records.append(EpochRecord(
                int(row["epoch"]), int(row["phase"]),
                *(float(row[k]) for k in HISTORY_FIELDS[2:]),
            ))
    return h


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    loss: float
    auc: float
    n_batches: int


def train_step(model: M.Model, images, labels, lr, opt_state, dropout_seed, class_weights=(1.0, 1.0)):
    """One forward/backward/Adam update; returns (loss, train-mode probs)."""
    res = M.forward(model, images, train_mode=True, dropout_seed=dropout_seed)
    loss = T.bce_loss(res.probs, labels, class_weights)
    names = [k for k in model.params if model.trainable[k]]
    grads = T.backward(loss, [res.leaves[k] for k in names])
    adam_step(model.params, dict(zip(names, grads)), opt_state, lr, model.trainable)
    return float(loss.data), res.probs.data


def run_epoch(model: M.Model, data: SliceDataset, phase_cfg: PhaseConfig, opt_state, rng,
              lr=None, class_weights=(1.0, 1.0)) -> EpochMetrics:
    """Shuffle, then train on batches of ``batch_size`` (last partial batch kept)."""
    n = len(data)
    if n == 0:
        raise ValueError("empty training set")
    lr = phase_cfg.learning_rate if lr is None else lr
    perm = rng.permutation(n)
    bs = phase_cfg.batch_size
    total, probs, labels = 0.0, [], []
    nb = 0
    for i in range(0, n, bs):
        idx = perm[i:i + bs]
        y = data.labels[idx]
        seed = int(rng.integers(2**63))
        loss, p = train_step(model, data.images[idx], y, lr, opt_state, seed, class_weights)
        total += loss * len(idx)
        probs.append(p)
        labels.append(y)
        nb += 1
    return EpochMetrics(total / n, metrics.safe_auc(np.concatenate(probs), np.concatenate(labels)), nb)


def evaluate(model: M.Model, data: SliceDataset, batch_size=32):
    """Eval-mode (loss, auc, probs)."""
    p = M.predict(model, data.images, batch_size)
    return metrics.bce(p, data.labels, T.P_CLAMP), metrics.safe_auc(p, data.labels), p


def _snapshot(model):
    return {k: v.copy() for k, v in model.params.items()}


def train_two_phase(model: M.Model, train_set: SliceDataset, val_set: SliceDataset,
                    cfgs=None, callbacks: CallbackConfig | None = None, out_dir=None,
                    seed=0, log=None, class_weights=(1.0, 1.0)) -> TrainHistory:
    """Phase 1 trains the head; phase 2 also unfreezes the upper backbone half.

    Each phase starts from fresh optimizer state at its own learning rate.
    After every epoch the validation set is scored; ``best_loss.ckpt`` and
    ``best_auc.ckpt`` are written on improvement and ``history.csv`` is
    rewritten.  ``callbacks=None`` or ``enabled=False`` disables plateau and
    early stopping.  On early stop the best-val-loss weights are restored and
    the phase ends.  ``final.ckpt`` holds the weights at the end of training.
    """
    cfgs = cfgs or default_phases()
    for c in cfgs:
        c.validate()
    cb = callbacks if callbacks is not None and callbacks.enabled else None
    if cb is not None:
        cb.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    hist = TrainHistory()
    best_loss, best_auc = math.inf, -math.inf
    best_loss_params = _snapshot(model)
    epoch = 0

    def meta(rec):
        return {"epoch": rec.epoch, "phase": rec.phase, "val_loss": rec.val_loss,
                "val_auc": rec.val_auc, "seed": int(seed)}

    for pc in cfgs:
        M.set_phase_trainability(model, pc.phase)
        opt = init_optimizer(model.params, [k for k in model.params if model.trainable[k]])
        lr = pc.learning_rate
        plateau = Plateau(cb) if cb else None
        phase_losses = []
        for _ in range(pc.epochs):
            epoch += 1
            t0 = time.perf_counter()
            rng = np.random.default_rng(stream_seed("epoch", seed, epoch))
            tm = run_epoch(model, train_set, pc, opt, rng, lr, class_weights)
            vl, va, _ = evaluate(model, val_set, pc.batch_size)
            rec = EpochRecord(epoch, pc.phase, tm.loss, tm.auc, vl, va, lr, time.perf_counter() - t0)
            hist.records.append(rec)
            if vl < best_loss:
                best_loss = vl
                hist.best_val_loss_epoch = epoch
                best_loss_params = _snapshot(model)
                if out is not None:
                    save_checkpoint(model, meta(rec), out / "best_loss.ckpt")
            if va > best_auc:
                best_auc = va
                hist.best_val_auc_epoch = epoch
                if out is not None:
                    save_checkpoint(model, meta(rec), out / "best_auc.ckpt")
            if out is not None:
                write_history_csv(hist, out / "history.csv")
            if log is not None:
                log(f"epoch {epoch} phase {pc.phase} train_loss {tm.loss:.4f} train_auc {tm.auc:.4f} "
                    f"val_loss {vl:.4f} val_auc {va:.4f} lr {lr:.3g} ({rec.wall_time:.1f}s)")
            phase_losses.append(vl)
            if cb is not None:
                if early_stop(phase_losses, cb):
                    for k, v in best_loss_params.items():
                        model.params[k][...] = v
                    hist.early_stopped.append(pc.phase)
                    break
                lr = plateau.step(vl, lr)
    if out is not None:
        last = hist.records[-1]
        save_checkpoint(model, meta(last), out / "final.ckpt")
    return hist


# ---------------------------------------------------------------------------
# auxiliary pretraining
# ---------------------------------------------------------------------------

def pretrain(model: M.Model, data: SliceDataset, epochs, lr=1e-3, batch_size=32, seed=0, log=None):
    """Train every parameter on ``data`` (e.g. an auxiliary task) with Adam."""
    for k in model.trainable:
        model.trainable[k] = True
    opt = init_optimizer(model.params)
    pc = PhaseConfig(epochs, lr, batch_size, 1)
    out = []
    for e in range(epochs):
        rng = np.random.default_rng(stream_seed("pretrain", seed, e))
        m = run_epoch(model, data, pc, opt, rng, lr)
        out.append(m)
        if log is not None:
            log(f"pretrain epoch {e + 1} loss {m.loss:.4f} auc {m.auc:.4f}")
    return out


def transfer_backbone(src: M.Model, dst: M.Model):
    """Copy backbone parameters of ``src`` into ``dst`` (head left as is)."""
    for k in dst.backbone_names():
        if src.params[k].shape != dst.params[k].shape:
            raise ShapeMismatch(f"{k}: {src.params[k].shape} vs {dst.params[k].shape}")
        dst.params[k] = src.params[k].astype(dst.params[k].dtype, copy=True)
    return dst
