"""Mini ConvNeXt backbone with the three-branch pooling head.

Parameter names are dotted paths (``stages.1.blocks.0.dw.w``).  Backbone
parameters live under ``stem.``, ``stages.`` and ``final_norm.``; everything
under ``head.`` is the classification head.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import InvalidConfig, ShapeMismatch


@dataclass
class ModelConfig:
    input_size: tuple = (250, 250, 1)
    input_mean: float = 0.33  # inputs are standardised before the stem
    input_std: float = 0.28
    stem_kernel: int = 4
    stages: list = field(default_factory=lambda: [[2, 24], [2, 48]])
    kernel_size: int = 7
    mlp_ratio: int = 4
    layer_scale_init: float = 1e-6
    head_width: int = 64
    dropout: float = 0.3
    gate_mode: str = "gate"  # "gate": g * v ; "replace": g alone
    ln_eps: float = 1e-6

    def validate(self):
        if not self.stages:
            raise InvalidConfig("model needs at least one stage")
        for st in self.stages:
            if len(st) != 2 or int(st[0]) < 1 or int(st[1]) < 1:
                raise InvalidConfig(f"bad stage spec {st!r}")
        if len(self.input_size) != 3 or min(self.input_size) < 1:
            raise InvalidConfig("input_size must be (H, W, C) positive")
        if self.stem_kernel < 1 or self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidConfig("stem_kernel >= 1 and odd kernel_size required")
        if not self.input_std > 0.0:
            raise InvalidConfig("input_std must be positive")
        if self.head_width < 1 or self.mlp_ratio < 1:
            raise InvalidConfig("head_width and mlp_ratio must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must be in [0, 1)")
        if self.gate_mode not in ("gate", "replace"):
            raise InvalidConfig(f"unknown gate_mode {self.gate_mode!r}")

    @property
    def total_blocks(self) -> int:
        return sum(int(b) for b, _ in self.stages)

    @property
    def feature_width(self) -> int:
        return int(self.stages[-1][1])

    def feature_hw(self):
        h, w, _ = self.input_size
        h, w = h // self.stem_kernel, w // self.stem_kernel
        for _ in self.stages[1:]:
            h, w = h // 2, w // 2
        return h, w

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["stages"] = [list(map(int, s)) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "input_size" in d:
            d["input_size"] = tuple(d["input_size"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered ``name -> shape`` for every parameter of ``cfg``."""
    cfg.validate()
    cin = int(cfg.input_size[2])
    k = cfg.stem_kernel
    c = int(cfg.stages[0][1])
    shapes = {
        "stem.conv.w": (k, k, cin, c),
        "stem.conv.b": (c,),
        "stem.norm.g": (c,),
        "stem.norm.b": (c,),
    }
    for s, (nblocks, width) in enumerate(cfg.stages):
        width = int(width)
        if s > 0:
            p = f"stages.{s}.down."
            shapes[p + "norm.g"] = (c,)
            shapes[p + "norm.b"] = (c,)
            shapes[p + "conv.w"] = (2, 2, c, width)
            shapes[p + "conv.b"] = (width,)
        c = width
        hidden = cfg.mlp_ratio * c
        for i in range(int(nblocks)):
            p = f"stages.{s}.blocks.{i}."
            shapes[p + "dw.w"] = (cfg.kernel_size, cfg.kernel_size, c)
            shapes[p + "dw.b"] = (c,)
            shapes[p + "norm.g"] = (c,)
            shapes[p + "norm.b"] = (c,)
            shapes[p + "pw1.w"] = (c, hidden)
            shapes[p + "pw1.b"] = (hidden,)
            shapes[p + "pw2.w"] = (hidden, c)
            shapes[p + "pw2.b"] = (c,)
            shapes[p + "scale"] = (c,)
    shapes["final_norm.g"] = (c,)
    shapes["final_norm.b"] = (c,)
    f3 = 3 * c
    shapes.update({
        "head.attn.w": (1, 1, c, c),
        "head.attn.b": (c,),
        "head.gate.w": (f3, f3),
        "head.gate.b": (f3,),
        "head.fc1.w": (f3, cfg.head_width),
        "head.fc1.b": (cfg.head_width,),
        "head.norm.g": (cfg.head_width,),
        "head.norm.b": (cfg.head_width,),
        "head.fc2.w": (cfg.head_width, 1),
        "head.fc2.b": (1,),
    })
    return shapes


def _fan_in(name, shape):
    if name.endswith("dw.w"):
        return shape[0] * shape[1]
    return int(np.prod(shape[:-1]))


def _trunc_normal(rng, shape, std):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Model:
    """Parameter store plus config and per-parameter trainable flags."""

    def __init__(self, config: ModelConfig, params: dict, trainable: dict | None = None):
        self.config = config
        self.params = params
        self.trainable = trainable if trainable is not None else {k: True for k in params}
        if set(self.trainable) != set(self.params):
            raise InvalidConfig("trainable keys must match parameter keys")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()}, dict(self.trainable))

    def backbone_names(self):
        return [k for k in self.params if not k.startswith("head.")]

    def head_names(self):
        return [k for k in self.params if k.startswith("head.")]


def build_model(config: ModelConfig | None = None, init_seed: int = 0, dtype=np.float32) -> Model:
    """Deterministically initialise a model.

    Conv and dense weights are truncated normal (cut at 2 std) with
    ``std = sqrt(2 / fan_in)``; biases 0; layer scale ``layer_scale_init``;
    norm gains 1 and shifts 0.
    """
    config = config or ModelConfig()
    shapes = param_shapes(config)
    rng = np.random.default_rng(init_seed)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".w"):
            arr = _trunc_normal(rng, shape, np.sqrt(2.0 / _fan_in(name, shape)))
        elif name.endswith("norm.g"):
            arr = np.ones(shape)
        elif name.endswith(".scale"):
            arr = np.full(shape, config.layer_scale_init)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    return Model(config, params)


def block_index(name: str, config: ModelConfig):
    """Global block index of a block parameter, else None."""
    parts = name.split(".")
    if len(parts) > 3 and parts[0] == "stages" and parts[2] == "blocks":
        s, i = int(parts[1]), int(parts[3])
        return sum(int(b) for b, _ in config.stages[:s]) + i
    return None


def set_phase_trainability(model: Model, phase: int) -> dict:
    """Freeze/unfreeze parameters for a training phase and return the map.

    Phase 1 trains the head only.  Phase 2 also trains blocks with global
    index >= total_blocks // 2, any downsample feeding a stage whose first
    block is in that half, and the final backbone norm.
    """
    if phase not in (1, 2):
        raise ValueError("phase must be 1 or 2")
    cfg = model.config
    cut = cfg.total_blocks // 2
    first_block = np.cumsum([0] + [int(b) for b, _ in cfg.stages])[:-1]
    for name in model.params:
        if name.startswith("head."):
            on = True
        elif phase == 1:
            on = False
        elif name.startswith("final_norm."):
            on = True
        elif ".down." in name:
            on = first_block[int(name.split(".")[1])] >= cut
        else:
            bi = block_index(name, cfg)
            on = bi is not None and bi >= cut
        model.trainable[name] = on
    return dict(model.trainable)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def attention_pool(F, w, b):
    """Sigmoid mask from a 1x1 conv of F, multiplied into F, then averaged."""
    A = T.sigmoid(T.conv2d(F, w, b))
    return T.global_pool(T.mul(A, F), "avg")


def feature_select(v, W, b, mode="gate"):
    g = T.sigmoid(T.dense(v, W, b))
    if mode == "replace":
        return g
    return T.mul(g, v)


def _block(x, P, p, eps, pad):
    y = T.depthwise_conv2d(x, P[p + "dw.w"], P[p + "dw.b"], stride=1, pad=pad)
    y = T.layer_norm(y, P[p + "norm.g"], P[p + "norm.b"], eps)
    y = T.gelu(T.dense(y, P[p + "pw1.w"], P[p + "pw1.b"]))
    y = T.dense(y, P[p + "pw2.w"], P[p + "pw2.b"])
    y = T.mul(y, P[p + "scale"])
    return T.add(x, y)


class ForwardResult:
    __slots__ = ("probs", "features", "leaves")

    def __init__(self, probs, features, leaves):
        self.probs = probs
        self.features = features
        self.leaves = leaves


def forward(model: Model, batch, train_mode=False, dropout_seed=0, grad_all=False) -> ForwardResult:
    """Run the network on ``batch`` [N,H,W,Cin].

    Returns probabilities [N], the backbone feature map and the parameter leaf
    tensors (trainable ones carry ``requires_grad``; with ``grad_all`` every
    parameter does).
    """
    cfg = model.config
    x = np.asarray(batch)
    if x.ndim == 3:
        x = x[..., None]
    if tuple(x.shape[1:]) != tuple(cfg.input_size):
        raise ShapeMismatch(f"batch shape {x.shape[1:]} != model input {tuple(cfg.input_size)}")
    x = (x.astype(model.dtype, copy=False) - model.dtype.type(cfg.input_mean)) / model.dtype.type(cfg.input_std)
    x = T.Tensor(x)
    P = {
        k: T.Tensor(v, requires_grad=grad_all or model.trainable[k], name=k)
        for k, v in model.params.items()
    }
    eps = cfg.ln_eps
    pad = cfg.kernel_size // 2

    h = T.conv2d(x, P["stem.conv.w"], P["stem.conv.b"], stride=cfg.stem_kernel)
    h = T.layer_norm(h, P["stem.norm.g"], P["stem.norm.b"], eps)
    for s, (nblocks, _) in enumerate(cfg.stages):
        if s > 0:
            p = f"stages.{s}.down."
            h = T.layer_norm(h, P[p + "norm.g"], P[p + "norm.b"], eps)
            h = T.conv2d(h, P[p + "conv.w"], P[p + "conv.b"], stride=2)
        for i in range(int(nblocks)):
            h = _block(h, P, f"stages.{s}.blocks.{i}.", eps, pad)
    F = T.layer_norm(h, P["final_norm.g"], P["final_norm.b"], eps)

    gap = T.global_pool(F, "avg")
    gmp = T.global_pool(F, "max")
    att = attention_pool(F, P["head.attn.w"], P["head.attn.b"])
    v = T.concat([gap, gmp, att])
    v = feature_select(v, P["head.gate.w"], P["head.gate.b"], cfg.gate_mode)
    z = T.gelu(T.dense(v, P["head.fc1.w"], P["head.fc1.b"]))
    z = T.layer_norm(z, P["head.norm.g"], P["head.norm.b"], eps)
    z = T.dropout(z, cfg.dropout, train_mode, dropout_seed)
    logit = T.dense(z, P["head.fc2.w"], P["head.fc2.b"])
    probs = T.sigmoid(T.reshape(logit, (logit.shape[0],)))
    return ForwardResult(probs, F, P)


def predict(model: Model, images, batch_size=32) -> np.ndarray:
    """Eval-mode probabilities for ``images`` [N,H,W] or [N,H,W,C]."""
    images = np.asarray(images)
    out = []
    for i in range(0, len(images), batch_size):
        out.append(forward(model, images[i:i + batch_size]).probs.data)
    if not out:
        return np.zeros(0, dtype=model.dtype)
    return np.concatenate(out)
