"""Sliding-window check of predicted cycle phases against an ideal ramp."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def _check_n(n: int, length: int | None = None):
    if n < 3 or n % 2 == 0:
        raise ContractError(f"window size must be odd and >= 3, got {n}")
    if length is not None and n > length:
        raise ContractError(f"window size {n} exceeds series length {length}")


def window(series, t: int, n: int = 5) -> np.ndarray:
    """Phases of the ``n`` frames centred on ``t``; indices clamp at the ends."""
    series = np.asarray(series)
    _check_n(n, len(series))
    if not 0 <= t < len(series):
        raise ContractError(f"target frame {t} outside [0, {len(series)})")
    h = (n - 1) // 2
    idx = np.clip(np.arange(t - h, t + h + 1), 0, len(series) - 1)
    return series[idx]


def reference(t_p_center: int, n: int, t_max: int, phase_rate: float = 1.0) -> np.ndarray:
    """``round(t_p_center + i * phase_rate) mod t_max`` for ``i`` in ``[-h, h]``."""
    _check_n(n)
    if phase_rate <= 0:
        raise ContractError(f"phase_rate must be positive, got {phase_rate}")
    h = (n - 1) // 2
    i = np.arange(-h, h + 1)
    return np.rint(t_p_center + i * phase_rate).astype(np.int64) % t_max


def phase_distance(a, b, t_max: int, circular: bool = True) -> np.ndarray:
    d = np.abs(np.asarray(a, dtype=np.int64) - np.asarray(b, dtype=np.int64))
    if circular:
        d = np.minimum(d, t_max - d)
    return d


def period_error(t_p_window, b, t_max: int, circular: bool = True) -> float:
    t_p_window, b = np.asarray(t_p_window), np.asarray(b)
    if t_p_window.shape != b.shape:
        raise ContractError(f"period_error: window length {t_p_window.shape} != reference length {b.shape}")
    return float(phase_distance(t_p_window, b, t_max, circular).mean())


def period_error_series(series, t_max: int, n: int = 5, phase_rate: float = 1.0, circular: bool = True) -> np.ndarray:
    """Per-frame error of the window around each frame (clamped at the edges)."""
    series = np.asarray(series, dtype=np.int64)
    if ((series < 0) | (series >= t_max)).any():
        raise ContractError(f"phase series has values outside [0, {t_max})")
    _check_n(n, len(series))
    h = (n - 1) // 2
    idx = np.clip(np.arange(len(series))[:, None] + np.arange(-h, h + 1)[None, :], 0, len(series) - 1)
    wins = series[idx]
    refs = np.rint(series[:, None] + np.arange(-h, h + 1)[None, :] * phase_rate).astype(np.int64) % t_max
    return phase_distance(wins, refs, t_max, circular).mean(axis=1)
