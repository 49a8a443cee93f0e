"""Phase-conditioned memory: address, boost one slot column, normalize, retrieve.

The pipeline for one clip with features ``f_in`` (``T x C``) and bank
``mem`` (``M x C``)::

    w      = f_in @ mem.T                         # T x M
    slot   = floor(t_p * M / t_max)
    w'     = w with column ``slot`` times (1 + P_s[t_p])
    w_hat  = softmax of w' over the T rows, per column
    f_out  = w_hat @ mem                          # T x C

All functions accept a leading batch axis.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .nnkernel import DEFAULT_DTYPE, Layer, Param, softmax, softmax_backward

COLUMN, ROW = "column", "row"


def address(f_in: np.ndarray, mem: np.ndarray) -> np.ndarray:
    if f_in.shape[-1] != mem.shape[-1]:
        raise ContractError(f"address: feature channels {f_in.shape[-1]} != memory channels {mem.shape[-1]}")
    return f_in @ mem.T


def map_phase(t_p, t_max: int, m: int):
    """Scale phase classes ``[0, t_max)`` onto slot indices ``[0, m)``."""
    t = np.asarray(t_p)
    if np.any(t < 0) or np.any(t >= t_max):
        raise ContractError(f"map_phase: phase {t_p} outside [0, {t_max})")
    out = (t.astype(np.int64) * m) // t_max
    return int(out) if out.ndim == 0 else out


def boost(w: np.ndarray, slot, factor) -> np.ndarray:
    """Multiply column ``slot`` of ``w`` (per batch item) by ``factor``.

    Every other entry is copied through untouched.
    """
    w = np.asarray(w)
    m = w.shape[-1]
    slot = np.asarray(slot)
    factor = np.asarray(factor, dtype=w.dtype if w.dtype.kind == "f" else np.float64)
    if np.any(slot < 0) or np.any(slot >= m):
        raise ContractError(f"boost: column {slot} outside [0, {m})")
    if np.any(factor < 1):
        raise ContractError(f"boost: factor {factor} < 1")
    out = w.astype(np.result_type(w, factor), copy=True)
    if w.ndim == 2:
        out[:, int(slot)] *= factor
    else:
        b = np.arange(w.shape[0])
        out[b, :, slot] *= factor.reshape(-1, 1) if factor.ndim else factor
    return out


def normalize(w: np.ndarray, axis: str = COLUMN) -> np.ndarray:
    """Softmax over time rows (``column``) or over slots (``row``)."""
    if axis == COLUMN:
        return softmax(w, axis=-2)
    if axis == ROW:
        return softmax(w, axis=-1)
    raise ContractError(f"normalize: unknown axis {axis!r}")


def retrieve(w_hat: np.ndarray, mem: np.ndarray) -> np.ndarray:
    if w_hat.shape[-1] != mem.shape[0]:
        raise ContractError(f"retrieve: weights have {w_hat.shape[-1]} slots, memory has {mem.shape[0]}")
    return w_hat @ mem


@dataclass
class AddressingTrace:
    w: np.ndarray
    w_boosted: np.ndarray
    w_hat: np.ndarray
    t_p: np.ndarray
    slot: np.ndarray
    boost_factor: np.ndarray
    f_in: np.ndarray


class PeriodicMemory(Layer):
    """Learnable ``M x C`` bank addressed by encoder features and phase."""

    kind = "memory"

    def __init__(self, m: int, c: int, t_max: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE,
                 axis: str = COLUMN, use_boost: bool = True):
        if m < 1 or c < 1 or t_max < 2:
            raise ContractError(f"memory: need M>=1, C>=1, t_max>=2; got M={m}, C={c}, t_max={t_max}")
        if axis not in (COLUMN, ROW):
            raise ContractError(f"memory: unknown axis {axis!r}")
        self.m, self.c, self.t_max = m, c, t_max
        self.axis, self.use_boost = axis, use_boost
        bound = 1.0 / np.sqrt(c)
        self.bank = Param(rng.uniform(-bound, bound, (m, c)).astype(dtype))
        self.trace: AddressingTrace | None = None

    def forward(self, f_in, t_p=None, p_s=None):
        """``f_in`` is ``(B, T, C)``; ``t_p`` ``(B,)`` ints; ``p_s`` ``(B, t_max)``."""
        if f_in.ndim != 3 or f_in.shape[-1] != self.c:
            raise ContractError(f"memory: expected (B, T, {self.c}), got {f_in.shape}")
        mem = self.bank.value
        w = address(f_in, mem)
        bsz = f_in.shape[0]
        if self.use_boost and t_p is not None:
            t_p = np.asarray(t_p, dtype=np.int64).reshape(bsz)
            slot = map_phase(t_p, self.t_max, self.m)
            slot = np.asarray(slot).reshape(bsz)
            factor = 1.0 + np.asarray(p_s)[np.arange(bsz), t_p].astype(w.dtype)
            w_b = boost(w, slot, factor)
        else:
            t_p = np.zeros(bsz, dtype=np.int64) if t_p is None else np.asarray(t_p).reshape(bsz)
            slot = np.zeros(bsz, dtype=np.int64)
            factor = np.ones(bsz, dtype=w.dtype)
            w_b = w
        w_hat = normalize(w_b, self.axis)
        self.trace = AddressingTrace(w, w_b, w_hat, t_p, slot, factor, f_in)
        return retrieve(w_hat, mem)

    def backward(self, dy):
        tr = self.trace
        mem = self.bank.value
        # f_out = w_hat @ mem
        self.bank.grad += np.einsum("btm,btc->mc", tr.w_hat, dy)
        dw_hat = dy @ mem.T
        dw_b = softmax_backward(tr.w_hat, dw_hat, axis=-2 if self.axis == COLUMN else -1)
        dw = dw_b
        b = np.arange(dw.shape[0])
        # gradient w.r.t. each clip's boost factor, for callers that differentiate P_s
        self.d_boost_factor = (dw_b[b, :, tr.slot] * tr.w[b, :, tr.slot]).sum(axis=1)
        if self.use_boost:
            dw = dw_b.copy()
            dw[b, :, tr.slot] *= tr.boost_factor.reshape(-1, 1)
        # w = f_in @ mem.T
        self.bank.grad += np.einsum("btm,btc->mc", dw, tr.f_in)
        return dw @ mem


def memory_forward(f_in, memory: PeriodicMemory, t_p, p_s):
    """Single-clip convenience wrapper: ``f_in`` is ``T x C``."""
    out = memory.forward(f_in[None], np.atleast_1d(t_p), np.atleast_2d(p_s))
    tr = memory.trace
    return out[0], AddressingTrace(tr.w[0], tr.w_boosted[0], tr.w_hat[0], int(tr.t_p[0]), int(tr.slot[0]),
                                   float(tr.boost_factor[0]), tr.f_in[0])


def memory_backward(memory: PeriodicMemory, d_out):
    """Returns ``(d_f_in, d_bank)`` for the last :func:`memory_forward` call."""
    before = memory.bank.grad.copy()
    d_in = memory.backward(d_out[None])[0]
    return d_in, memory.bank.grad - before


def dump_trace_csv(traces: list[AddressingTrace], path) -> None:
    """One row per (clip, time step): the boosted column and the winning slot."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["clip", "row", "t_p", "slot", "boost_factor", "w", "w_boosted", "w_hat", "argmax_slot", "w_hat_max"])
        clip = 0
        for tr in traces:
            for b in range(tr.w.shape[0]):
                s = int(tr.slot[b])
                for t in range(tr.w.shape[1]):
                    j = int(np.argmax(tr.w_hat[b, t]))
                    out.writerow([clip, t, int(tr.t_p[b]), s, f"{float(tr.boost_factor[b]):.6g}",
                                  f"{float(tr.w[b, t, s]):.6g}", f"{float(tr.w_boosted[b, t, s]):.6g}",
                                  f"{float(tr.w_hat[b, t, s]):.6g}", j, f"{float(tr.w_hat[b, t, j]):.6g}"])
                clip += 1
