"""Low-rank adapters on the attention q/v maps and the pretrain -> finetune workflow."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .errors import CheckpointError, ConfigError, ContractError
from .model import EpochLog, TrainConfig, VadModel, frames_to_float, run_epochs
from .nnkernel import Adam, Dense, Layer, Param
from .seeding import substream

log = logging.getLogger(__name__)

ADAPTER_TARGETS = ("q", "v")


class LoraDense(Layer):
    """``y = W0 x + b0 + (alpha / r) * B (A x)`` with ``W0``, ``b0`` frozen.

    ``B`` starts at zero, so a fresh adapter reproduces the base map exactly.
    """

    kind = "lora_dense"

    def __init__(self, base: Dense, rank: int, alpha: float, rng: np.random.Generator):
        if rank < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {rank}")
        self.base = base
        self.rank, self.alpha = rank, alpha
        self.scale = alpha / rank
        dt = base.weight.value.dtype
        self.A = Param((0.02 * rng.standard_normal((rank, base.d_in))).astype(dt))
        self.B = Param(np.zeros((base.d_out, rank), dtype=dt))
        base.set_trainable(False)

    @property
    def d_in(self):
        return self.base.d_in

    @property
    def d_out(self):
        return self.base.d_out

    def named_params(self, prefix=""):
        yield from self.base.named_params(prefix + "base.")
        yield prefix + "A", self.A
        yield prefix + "B", self.B

    def forward(self, x):
        self._x = x
        self._ax = x @ self.A.value.T
        return self.base.forward(x) + self.scale * (self._ax @ self.B.value.T)

    def backward(self, dy):
        dx = self.base.backward(dy)
        dy2 = dy.reshape(-1, self.d_out)
        ax2 = self._ax.reshape(-1, self.rank)
        self.B.grad += self.scale * (dy2.T @ ax2)
        d_ax = self.scale * (dy @ self.B.value)
        self.A.grad += d_ax.reshape(-1, self.rank).T @ self._x.reshape(-1, self.d_in)
        return dx + d_ax @ self.A.value

    def delta(self) -> np.ndarray:
        return self.scale * (self.B.value @ self.A.value)

    def merged(self) -> Dense:
        out = copy.deepcopy(self.base)
        out.weight.value = (self.base.weight.value + self.delta()).astype(self.base.weight.value.dtype)
        out.weight.grad = np.zeros_like(out.weight.value)
        return out


@dataclass(frozen=True)
class FreezePolicy:
    """What stays trainable after wrapping; encoder-only by default."""

    train_decoder: bool = False
    train_memory: bool = False
    train_period_head: bool = False


def is_adapted(model: VadModel) -> bool:
    return any(isinstance(getattr(model.attn, t), LoraDense) for t in ADAPTER_TARGETS)


def apply_freeze_policy(model: VadModel, policy: FreezePolicy = FreezePolicy()) -> VadModel:
    model.set_trainable(False)
    for layer in (model.proj, model.pos, model.ln1, model.ln2):
        layer.set_trainable(True)
    for t in ADAPTER_TARGETS:
        ad = getattr(model.attn, t)
        if isinstance(ad, LoraDense):
            ad.A.trainable = ad.B.trainable = True
    if policy.train_decoder:
        model.dec_in.set_trainable(True)
        model.decoder.set_trainable(True)
    if policy.train_memory and model.cfg.use_memory:
        model.memory.set_trainable(True)
    if policy.train_period_head:
        model.period_head.set_trainable(True)
    model.backprop_stem = any(p.trainable for p in model.stem.params())
    return model


def wrap(model: VadModel, rank: int = 4, alpha: float = 8.0, policy: FreezePolicy = FreezePolicy(),
         seed: int | None = None) -> VadModel:
    """Deep-copy ``model``, put adapters on attention q and v, apply ``policy``."""
    if not isinstance(getattr(model, "attn", None), Layer):
        raise ContractError("model has no attention block to adapt")
    if is_adapted(model):
        raise ContractError("model already carries adapters")
    out = copy.deepcopy(model)
    rng = substream(model.cfg.seed if seed is None else seed, "adapter_init")
    for t in ADAPTER_TARGETS:
        base = getattr(out.attn, t)
        if not isinstance(base, Dense):
            raise ContractError(f"attention.{t} is not a dense projection")
        setattr(out.attn, t, LoraDense(base, rank, alpha, rng))
    out.adapter = {"rank": rank, "alpha": alpha}
    return apply_freeze_policy(out, policy)


def count_params(model: Layer, trainable_only: bool = False) -> int:
    return sum(p.size for p in model.params() if p.trainable or not trainable_only)


def adapter_param_count(model: VadModel) -> int:
    return sum(getattr(model.attn, t).A.size + getattr(model.attn, t).B.size
               for t in ADAPTER_TARGETS if isinstance(getattr(model.attn, t), LoraDense))


def merge(model: VadModel) -> VadModel:
    """Fold every adapter into its base weight; returns a plain (unadapted) model."""
    out = copy.deepcopy(model)
    for t in ADAPTER_TARGETS:
        ad = getattr(out.attn, t)
        if isinstance(ad, LoraDense):
            setattr(out.attn, t, ad.merged())
    out.__dict__.pop("adapter", None)
    out.set_trainable(True)
    out.backprop_stem = True
    return out


def save_adapter(model: VadModel, path) -> None:
    """Write only the trainable tensors (adapters, embeddings, layernorms)."""
    if not is_adapted(model):
        raise ContractError("save_adapter: model carries no adapters")
    named = [(n, p) for n, p in model.named_params() if p.trainable]
    checkpoint.save(path, named, {"kind": "VadAdapter", "adapter": model.adapter, "config": model.cfg.to_dict()})


def load_adapter(base: VadModel, path) -> VadModel:
    meta, arrays, _ = checkpoint.load(path)
    if meta.get("kind") != "VadAdapter":
        raise CheckpointError(f"{path}: not an adapter checkpoint")
    if TrainConfig.from_dict(meta["config"]).to_dict() != base.cfg.to_dict():
        raise CheckpointError(f"{path}: adapter was trained on a different architecture")
    model = wrap(base, meta["adapter"]["rank"], meta["adapter"]["alpha"])
    own = dict(model.named_params())
    for name, arr in arrays.items():
        if name not in own or own[name].value.shape != arr.shape:
            raise CheckpointError(f"{path}: tensor {name} does not fit the base model")
        own[name].value[...] = arr
        own[name].trainable = True
    return model


@dataclass
class FinetuneResult:
    mode: str
    seconds: float
    steps: int
    trainable_params: int
    total_params: int
    logs: list = field(default_factory=list)

    def row(self) -> dict:
        return {"mode": self.mode, "seconds": round(self.seconds, 3), "steps": self.steps,
                "trainable_params": self.trainable_params, "total_params": self.total_params}


def few_shot_split(manifest, fraction: float) -> slice:
    if not 0 < fraction <= 1:
        raise ConfigError(f"few_shot_fraction must be in (0, 1], got {fraction}")
    return slice(0, max(1, math.ceil(fraction * manifest.n_train)))


def finetune(pretrained: VadModel, frames: np.ndarray, manifest, mode: str = "peft", few_shot_fraction: float = 0.2,
             epochs: int = 1, lr: float | None = None, max_steps: int | None = None, rank: int = 4,
             alpha: float = 8.0, policy: FreezePolicy = FreezePolicy(), out_dir=None) -> tuple[VadModel, FinetuneResult]:
    """Adapt a pretrained model to a new scenario using a prefix of its train split.

    ``mode="full"`` trains every parameter of a copy; ``mode="peft"`` wraps
    the copy with adapters and trains only the freeze policy's set.
    """
    cfg = pretrained.cfg
    if frames.shape[1] != cfg.frame_size or manifest.t_max != cfg.t_max:
        raise CheckpointError("pretrained model does not match the finetune dataset (frame_size / t_max)")
    if mode == "full":
        model = copy.deepcopy(pretrained)
        model.set_trainable(True)
        model.backprop_stem = True
    elif mode == "peft":
        model = wrap(pretrained, rank, alpha, policy)
    else:
        raise ConfigError(f"finetune mode must be 'full' or 'peft', got {mode!r}")
    sl = few_shot_split(manifest, few_shot_fraction)
    if sl.stop < cfg.clip_len:
        raise ConfigError(f"few-shot split of {sl.stop} frames is shorter than clip_len {cfg.clip_len}")
    opt = Adam([p for p in model.params() if p.trainable], lr=lr or cfg.lr)
    t0 = time.perf_counter()
    logs: list[EpochLog] = []
    if epochs > 0 and (max_steps is None or max_steps > 0):
        logs = run_epochs(model, frames_to_float(frames[sl], cfg.dtype), manifest.phase_labels[sl], cfg, opt,
                          epochs, out_dir=None, tag=f"finetune-{mode}", max_steps=max_steps)
    seconds = time.perf_counter() - t0
    result = FinetuneResult(mode, seconds, opt.t, count_params(model, True), count_params(model), logs)
    log.info("finetune %s: %d steps, %.2fs, %d/%d trainable", mode, opt.t, seconds,
             result.trainable_params, result.total_params)
    return model, result
