"""Clip autoencoder with a period classifier feeding the periodic memory.

Pipeline for a clip of ``T`` frames::

    frames --conv stem--> per-frame codes --project, pair--> tokens (T' x C)
           --+position, layernorm, residual attention, layernorm--> F
    F --mean over T', dense, softmax--> P_s, t_p
    F, t_p, P_s --periodic memory--> F_out
    F_out --dense, transposed convs, sigmoid--> reconstruction (T x H x W)
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .errors import CheckpointError, ConfigError, ContractError, NonFiniteError
from .memory import COLUMN, PeriodicMemory
from .nnkernel import (Adam, Conv2d, ConvTranspose2d, Dense, Embedding, Layer, LayerNorm, ReLU, SelfAttention,
                       Sequential, Sigmoid, softmax, softmax_backward)
from .seeding import substream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    clip_len: int = 16
    frame_size: int = 64
    t_max: int = 20
    memory_slots: int = 200
    channels: int = 64
    batch_size: int = 8
    lr: float = 1e-4
    epochs: int = 50
    lambda_period: float = 1.0
    seed: int = 0
    temporal_downsample: int = 2
    stem_channels: tuple = (8, 16)
    use_memory: bool = True
    memory_axis: str = COLUMN
    use_boost: bool = True
    dtype: str = "float32"

    def validate(self) -> "TrainConfig":
        for name in ("clip_len", "frame_size", "t_max", "memory_slots", "channels", "batch_size", "epochs",
                     "temporal_downsample"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr <= 0 or self.lambda_period < 0:
            raise ConfigError("lr must be positive and lambda_period non-negative")
        if self.t_max < 2:
            raise ConfigError(f"t_max must be >= 2, got {self.t_max}")
        if self.channels % self.temporal_downsample:
            raise ConfigError(f"channels {self.channels} not divisible by temporal_downsample {self.temporal_downsample}")
        if self.clip_len % self.temporal_downsample:
            raise ConfigError(f"clip_len {self.clip_len} not divisible by temporal_downsample {self.temporal_downsample}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.memory_axis not in ("column", "row"):
            raise ConfigError(f"memory_axis must be column or row, got {self.memory_axis!r}")
        # the stride-4 stem and decoder only round-trip sizes divisible by 4 at every level
        levels = len(self.stem_channels)
        if self.frame_size % 4**levels:
            raise ConfigError(f"frame_size {self.frame_size} must be a multiple of {4**levels} "
                              f"for {levels} stride-4 convs")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stem_channels"] = list(self.stem_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "stem_channels" in d:
            d["stem_channels"] = tuple(int(c) for c in d["stem_channels"])
        return cls(**d)


@dataclass
class PhasePrediction:
    p_s: np.ndarray  # (B, t_max)
    t_p: np.ndarray  # (B,)
    logits: np.ndarray


def phase_from_logits(logits: np.ndarray) -> PhasePrediction:
    logits = np.atleast_2d(logits)
    p_s = softmax(logits.astype(np.float64), axis=-1).astype(logits.dtype)
    # np.argmax returns the lowest index among ties
    return PhasePrediction(p_s, np.argmax(p_s, axis=-1), logits)


class VadModel(Layer):
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg.validate()
        dt = np.dtype(cfg.dtype)
        rng = substream(cfg.seed, "init")
        c = cfg.channels
        stem = []
        c_in, s = 1, cfg.frame_size
        for c_out in cfg.stem_channels:
            stem += [Conv2d(c_in, c_out, 4, 4, rng, dt), ReLU()]
            c_in, s = c_out, (s - 4) // 4 + 1
        self.code_shape = (s, s, c_in)
        self.code_dim = s * s * c_in
        ds = cfg.temporal_downsample
        self.t_tokens = cfg.clip_len // ds
        self.stem = Sequential(*stem)
        # per-frame patch embedding shared across time; a token concatenates its ds frame embeddings
        self.proj = Dense(self.code_dim, c // ds, rng, dt)
        self.pos = Embedding(self.t_tokens, c, rng, dt)
        self.ln1 = LayerNorm(c, dt)
        self.attn = SelfAttention(c, rng, dt)
        self.ln2 = LayerNorm(c, dt)
        self.period_head = Dense(c, cfg.t_max, rng, dt)
        self.memory = PeriodicMemory(cfg.memory_slots, c, cfg.t_max, rng, dt, axis=cfg.memory_axis,
                                     use_boost=cfg.use_boost)
        self.dec_in = Dense(c, ds * self.code_dim, rng, dt)
        self.dec_act = ReLU()
        dec = []
        chans = list(cfg.stem_channels)[::-1] + [1]
        for i in range(len(cfg.stem_channels)):
            dec.append(ConvTranspose2d(chans[i], chans[i + 1], 4, 4, rng, dt))
            dec.append(ReLU() if i < len(cfg.stem_channels) - 1 else Sigmoid())
        self.decoder = Sequential(*dec)
        self.backprop_stem = True

    # -- encoder ------------------------------------------------------------

    def _check_clips(self, clips):
        cfg = self.cfg
        if clips.ndim != 4 or clips.shape[1:] != (cfg.clip_len, cfg.frame_size, cfg.frame_size):
            raise ContractError(
                f"expected clips (B, {cfg.clip_len}, {cfg.frame_size}, {cfg.frame_size}), got {clips.shape}")

    def encode(self, clips: np.ndarray) -> np.ndarray:
        """``(B, T, H, W)`` in ``[0, 1]`` -> features ``(B, T', C)``."""
        self._check_clips(clips)
        b, t, h, w = clips.shape
        x = clips.astype(self.cfg.dtype, copy=False).reshape(b * t, h, w, 1)
        codes = self.stem(x).reshape(b, t, self.code_dim)
        tokens = self.proj(codes).reshape(b, self.t_tokens, self.cfg.channels)
        z = self.ln1(self.pos(tokens))
        return self.ln2(z + self.attn(z))

    def _encode_backward(self, d_f):
        d_h = self.ln2.backward(d_f)
        d_z = d_h + self.attn.backward(d_h)
        b = d_z.shape[0]
        d_tokens = self.pos.backward(self.ln1.backward(d_z)).reshape(b, self.cfg.clip_len, -1)
        d_codes = self.proj.backward(d_tokens)
        if self.backprop_stem:
            self.stem.backward(d_codes.reshape(b * self.cfg.clip_len, *self.code_shape))

    def classify_period(self, feats: np.ndarray) -> PhasePrediction:
        self._pooled_n = feats.shape[1]
        return phase_from_logits(self.period_head(feats.mean(axis=1)))

    def decode(self, f_out: np.ndarray) -> np.ndarray:
        b = f_out.shape[0]
        h = self.dec_act(self.dec_in(f_out))
        y = self.decoder(h.reshape(b * self.cfg.clip_len, *self.code_shape))
        return y.reshape(b, self.cfg.clip_len, self.cfg.frame_size, self.cfg.frame_size)

    def forward(self, clips):
        """Returns ``(recon, phase)``; the addressing trace is left on ``self.memory.trace``."""
        feats = self.encode(clips)
        phase = self.classify_period(feats)
        self._phase = phase
        if self.cfg.use_memory:
            f_out = self.memory.forward(feats, phase.t_p, phase.p_s)
        else:
            f_out = feats
        return self.decode(f_out), phase

    def backward(self, d_recon, d_logits=None):
        b = d_recon.shape[0]
        d = self.decoder.backward(d_recon.reshape(b * self.cfg.clip_len, *d_recon.shape[2:], 1))
        d = self.dec_in.backward(self.dec_act.backward(d.reshape(b, self.t_tokens, -1)))
        if self.cfg.use_memory:
            d_f = self.memory.backward(d)
            if self.cfg.use_boost:
                # boost factor is 1 + P_s[t_p]; t_p itself is piecewise constant
                tr = self.memory.trace
                bi = np.arange(b)
                d_ps = np.zeros_like(self._phase.p_s)
                d_ps[bi, tr.t_p] = self.memory.d_boost_factor
                d_boost_logits = softmax_backward(self._phase.p_s, d_ps)
                d_logits = d_boost_logits if d_logits is None else d_logits + d_boost_logits
        else:
            d_f = d
        if d_logits is not None:
            d_pooled = self.period_head.backward(d_logits)
            d_f = d_f + d_pooled[:, None, :] / self._pooled_n
        self._encode_backward(d_f)

    def named_params(self, prefix=""):
        for name in ("stem", "proj", "pos", "ln1", "attn", "ln2", "period_head", "memory", "dec_in", "decoder"):
            if name == "memory" and not self.cfg.use_memory:
                continue
            yield from getattr(self, name).named_params(f"{prefix}{name}.")

    # -- persistence ----------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None):
        meta = {"kind": "VadModel", "config": self.cfg.to_dict()}
        meta.update(extra_meta or {})
        checkpoint.save(path, self.named_params(), meta)

    def load_state(self, arrays: dict, flags: dict | None = None, strict: bool = True):
        own = dict(self.named_params())
        if strict and set(own) != set(arrays):
            raise CheckpointError(f"architecture mismatch: missing {sorted(set(own) - set(arrays))}, "
                                  f"unexpected {sorted(set(arrays) - set(own))}")
        for name, p in own.items():
            if name not in arrays:
                continue
            if arrays[name].shape != p.value.shape:
                raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {p.value.shape}")
            p.value[...] = arrays[name]
            if flags is not None:
                p.trainable = flags[name]

    @classmethod
    def load(cls, path, dtype: str | None = None) -> "VadModel":
        meta, arrays, flags = checkpoint.load(path)
        if meta.get("kind") != "VadModel":
            raise CheckpointError(f"{path}: not a VadModel checkpoint")
        cfg = TrainConfig.from_dict(meta["config"])
        if dtype is not None:
            cfg = replace(cfg, dtype=dtype)
        model = cls(cfg)
        model.load_state(arrays, flags)
        return model


def loss(recon, clips, phase: PhasePrediction, phase_label, lambda_period: float):
    """Returns ``(total, recon_term, period_term, d_recon, d_logits)``.

    ``recon_term`` is the pixel MSE and ``period_term`` the mean
    cross-entropy of ``P_s`` at ``phase_label``.
    """
    if recon.shape != clips.shape:
        raise ContractError(f"loss: recon {recon.shape} vs clips {clips.shape}")
    labels = np.atleast_1d(np.asarray(phase_label, dtype=np.int64))
    t_max = phase.p_s.shape[-1]
    if (labels < 0).any() or (labels >= t_max).any():
        raise ContractError(f"loss: phase label {phase_label} outside [0, {t_max})")
    diff = recon - clips
    recon_term = float(np.mean(diff.astype(np.float64) ** 2))
    b = len(labels)
    p = phase.p_s.astype(np.float64)
    picked = p[np.arange(b), labels]
    period_term = float(np.mean(-np.log(np.maximum(picked, 1e-300))))
    total = recon_term + lambda_period * period_term
    d_recon = (2.0 / diff.size) * diff
    onehot = np.zeros_like(p)
    onehot[np.arange(b), labels] = 1.0
    d_logits = (lambda_period / b) * (p - onehot)
    return total, recon_term, period_term, d_recon.astype(recon.dtype), d_logits.astype(recon.dtype)


# -- data -------------------------------------------------------------------


def frames_to_float(frames: np.ndarray, dtype="float32") -> np.ndarray:
    return frames.astype(dtype) / np.asarray(255.0, dtype=dtype)


def clip_starts(n_frames: int, clip_len: int) -> np.ndarray:
    if n_frames < clip_len:
        raise ContractError(f"split of {n_frames} frames is shorter than clip_len {clip_len}")
    return np.arange(n_frames - clip_len + 1)


def gather_clips(frames: np.ndarray, starts, clip_len: int) -> np.ndarray:
    idx = np.asarray(starts)[:, None] + np.arange(clip_len)[None, :]
    return frames[idx]


def reconstruct(model: VadModel, clips: np.ndarray):
    """Inference on a ``(B, T, H, W)`` batch; returns ``(recon, phase, trace)``."""
    recon, phase = model.forward(clips)
    return recon, phase, model.memory.trace if model.cfg.use_memory else None


def predict_clips(model: VadModel, frames: np.ndarray, starts, batch: int = 64):
    """Per-clip per-frame MSE ``(n_clips, T)`` and predicted phases ``(n_clips,)``."""
    cfg = model.cfg
    errs, phases = [], []
    for i in range(0, len(starts), batch):
        clips = gather_clips(frames, starts[i : i + batch], cfg.clip_len)
        recon, phase = model.forward(clips)
        errs.append(((recon.astype(np.float64) - clips) ** 2).mean(axis=(2, 3)))
        phases.append(phase.t_p)
    return np.concatenate(errs), np.concatenate(phases)


# -- training ---------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    recon_term: float
    period_term: float
    total: float
    seconds: float


def write_log_csv(rows: list[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["epoch", "recon_term", "period_term", "total"])
        for r in rows:
            out.writerow([r.epoch, repr(r.recon_term), repr(r.period_term), repr(r.total)])


def run_epochs(model: VadModel, frames_f: np.ndarray, phase_labels: np.ndarray, cfg: TrainConfig,
               opt: Adam, epochs: int, out_dir=None, tag: str = "train", max_steps: int | None = None,
               start_epoch: int = 0) -> list[EpochLog]:
    """Shared loop for training and finetuning; ``frames_f`` is one contiguous normal split."""
    starts = clip_starts(len(frames_f), cfg.clip_len)
    centre = cfg.clip_len // 2
    logs = []
    steps = 0
    for epoch in range(start_epoch, start_epoch + epochs):
        t0 = time.perf_counter()
        order = substream(cfg.seed, "sampling", epoch).permutation(starts)
        sums = np.zeros(3)
        nb = 0
        for i in range(0, len(order), cfg.batch_size):
            if max_steps is not None and steps >= max_steps:
                break
            sel = order[i : i + cfg.batch_size]
            clips = gather_clips(frames_f, sel, cfg.clip_len)
            labels = phase_labels[sel + centre]
            model.zero_grad()
            recon, phase = model.forward(clips)
            total, rt, pt, d_recon, d_logits = loss(recon, clips, phase, labels, cfg.lambda_period)
            if not np.isfinite(total):
                raise NonFiniteError(f"{tag}: non-finite loss at epoch {epoch + 1}, batch {nb} "
                                     f"(recon={rt}, period={pt})")
            model.backward(d_recon, d_logits)
            opt.step()
            sums += (rt, pt, total)
            nb += 1
            steps += 1
        if nb == 0:
            break
        rt, pt, total = sums / nb
        row = EpochLog(epoch + 1, float(rt), float(pt), float(total), time.perf_counter() - t0)
        logs.append(row)
        log.info("%s epoch %d: recon %.5f period %.4f total %.5f (%.1fs)", tag, row.epoch, rt, pt, total, row.seconds)
        if out_dir is not None:
            model.save(Path(out_dir) / "model.ckpt", {"epoch": row.epoch})
            write_log_csv(logs, Path(out_dir) / f"{tag}_log.csv")
    return logs


def train(frames: np.ndarray, manifest, cfg: TrainConfig, out_dir=None) -> tuple[VadModel, list[EpochLog]]:
    """Fit a fresh model on the train split of one scenario."""
    cfg.validate()
    if manifest.n_train < cfg.clip_len:
        raise ContractError(f"train split ({manifest.n_train} frames) shorter than clip_len {cfg.clip_len}")
    if manifest.t_max != cfg.t_max:
        raise ConfigError(f"dataset t_max {manifest.t_max} != model t_max {cfg.t_max}")
    if frames.shape[1] != cfg.frame_size:
        raise ConfigError(f"dataset frame_size {frames.shape[1]} != model frame_size {cfg.frame_size}")
    model = VadModel(cfg)
    tr = manifest.train_slice
    opt = Adam(model.params(), lr=cfg.lr)
    logs = run_epochs(model, frames_to_float(frames[tr], cfg.dtype), manifest.phase_labels[tr], cfg, opt,
                      cfg.epochs, out_dir)
    return model, logs


def grad_check_model(model: VadModel, clips: np.ndarray, labels, eps: float = 1e-5,
                     lambda_period: float = 1.0) -> float:
    """Central-difference check of :meth:`VadModel.backward` over every trainable scalar.

    Uses the training loss itself; run it on a 64-bit model.
    """

    def evaluate():
        recon, phase = model.forward(clips)
        out = loss(recon, clips, phase, labels, lambda_period)
        if not np.isfinite(out[0]):
            raise NonFiniteError(f"grad_check_model: non-finite loss {out[0]}")
        return out

    model.zero_grad()
    _, _, _, d_recon, d_logits = evaluate()
    model.backward(d_recon, d_logits)
    worst = 0.0
    for _, p in model.named_params():
        if not p.trainable:
            continue
        flat, g = p.value.reshape(-1), p.grad.copy().reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp = evaluate()[0]
            flat[i] = old - eps
            lm = evaluate()[0]
            flat[i] = old
            num = (lp - lm) / (2 * eps)
            worst = max(worst, abs(num - g[i]) / max(abs(num) + abs(g[i]), 1e-6))
    return worst
