"""Frame-level anomaly scores, scenario-wide normalization and AUC."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, UndefinedAUCError
from .model import VadModel, clip_starts, frames_to_float, predict_clips
from .perioddet import period_error_series

REPORT_VERSION = 1


def recon_error(clip: np.ndarray, recon: np.ndarray) -> np.ndarray:
    """Mean squared pixel error per frame; works on ``(T, H, W)`` or ``(B, T, H, W)``."""
    clip, recon = np.asarray(clip, dtype=np.float64), np.asarray(recon, dtype=np.float64)
    if clip.shape != recon.shape:
        raise ContractError(f"recon_error: clip {clip.shape} vs recon {recon.shape}")
    return ((clip - recon) ** 2).mean(axis=(-2, -1))


def overlap_average(clip_errors: np.ndarray, starts, n_frames: int) -> np.ndarray:
    """Average each frame's error over every clip that covers it."""
    clip_errors = np.asarray(clip_errors, dtype=np.float64)
    t = clip_errors.shape[1]
    total = np.zeros(n_frames)
    count = np.zeros(n_frames)
    for k in range(t):
        idx = np.asarray(starts) + k
        np.add.at(total, idx, clip_errors[:, k])
        np.add.at(count, idx, 1)
    if (count == 0).any():
        raise ContractError("overlap_average: some frames are not covered by any clip")
    return total / count


def frame_phases(clip_phases, starts, clip_len: int, n_frames: int) -> np.ndarray:
    """Phase of each frame = phase of the clip centred on it (nearest clip at the ends)."""
    starts = np.asarray(starts)
    pos = np.clip(np.arange(n_frames) - clip_len // 2 - starts[0], 0, len(starts) - 1)
    return np.asarray(clip_phases)[pos]


def minmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ContractError("cannot normalize an empty series")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def normalize_scores(raw) -> np.ndarray:
    """Min-max over the whole test set of one scenario; constant input maps to zeros."""
    return minmax(raw)


def fuse(recon_series, period_series, lambda_fuse: float = 0.5) -> np.ndarray:
    recon_series, period_series = np.asarray(recon_series), np.asarray(period_series)
    if recon_series.shape != period_series.shape:
        raise ContractError(f"fuse: lengths {recon_series.shape} and {period_series.shape} differ")
    if not 0 <= lambda_fuse <= 1:
        raise ContractError(f"lambda_fuse must be in [0, 1], got {lambda_fuse}")
    return (1 - lambda_fuse) * minmax(recon_series) + lambda_fuse * minmax(period_series)


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic; ties between classes count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ContractError(f"auc: {scores.shape} scores vs {labels.shape} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ContractError("auc: labels must be 0/1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(f"AUC undefined with {n_pos} positive and {n_neg} negative frames")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalConfig:
    window_n: int = 5
    lambda_fuse: float = 0.5
    circular: bool = True
    phase_rate: float = 0.0  # 0 means t_max / period_len
    batch: int = 64


@dataclass
class AnomalyReport:
    scenario_id: str
    frame_index: list
    recon_error: list
    period_error: list
    raw_score: list
    norm_score: list
    label: list
    family: list
    auc: float
    auc_per_family: dict
    config: dict = field(default_factory=dict)
    version: int = REPORT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "AnomalyReport":
        d = json.loads(text)
        if d.get("version") != REPORT_VERSION:
            raise ContractError(f"unsupported report version {d.get('version')}")
        return cls(**d)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json() + "\n")
        with open(out / "scores.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_index", "recon_error", "period_error", "raw_score", "norm_score", "label"])
            for row in zip(self.frame_index, self.recon_error, self.period_error, self.raw_score,
                           self.norm_score, self.label):
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), repr(row[4]), row[5]])

    def subset_auc(self, family: str, lambda_fuse: float | None = None) -> float:
        """AUC on normal frames plus frames of one anomaly family.

        With ``lambda_fuse`` the score is re-fused from the stored component
        series (normalization still spans the whole test set).
        """
        fam = np.asarray(self.family, dtype=object)
        keep = (fam == family) | (np.asarray(self.label) == 0)
        score = np.asarray(self.norm_score) if lambda_fuse is None else normalize_scores(
            fuse(self.recon_error, self.period_error, lambda_fuse))
        return auc(score[keep], np.asarray(self.label)[keep])


@dataclass
class ScoredSeries:
    """Raw per-frame outputs of a model over a test split, before fusion."""

    recon: np.ndarray
    phases: np.ndarray
    period: np.ndarray


def score_split(model: VadModel, frames_f: np.ndarray, t_max: int, period_len: int, cfg: EvalConfig) -> ScoredSeries:
    clip_len = model.cfg.clip_len
    starts = clip_starts(len(frames_f), clip_len)
    errs, clip_phase = predict_clips(model, frames_f, starts, cfg.batch)
    recon = overlap_average(errs, starts, len(frames_f))
    phases = frame_phases(clip_phase, starts, clip_len, len(frames_f))
    rate = cfg.phase_rate or t_max / period_len
    period = period_error_series(phases, t_max, cfg.window_n, rate, cfg.circular)
    return ScoredSeries(recon, phases, period)


def build_report(series: ScoredSeries, manifest, cfg: EvalConfig, extra_config: dict | None = None) -> AnomalyReport:
    ts = manifest.test_slice
    labels = manifest.labels[ts].astype(int)
    families = manifest.family_labels()[ts]
    raw = fuse(series.recon, series.period, cfg.lambda_fuse)
    norm = normalize_scores(raw)
    total = auc(norm, labels)
    per_family = {}
    for fam in sorted(set(families) - {""}):
        keep = (families == fam) | (labels == 0)
        per_family[fam] = auc(norm[keep], labels[keep])
    conf = asdict(cfg)
    conf.update(extra_config or {})
    return AnomalyReport(
        scenario_id=manifest.scenario_id,
        frame_index=list(range(ts.start, ts.stop)),
        recon_error=[float(v) for v in series.recon],
        period_error=[float(v) for v in series.period],
        raw_score=[float(v) for v in raw],
        norm_score=[float(v) for v in norm],
        label=[int(v) for v in labels],
        family=[str(f) for f in families],
        auc=total,
        auc_per_family=per_family,
        config=conf,
    )


def evaluate(model: VadModel, frames: np.ndarray, manifest, cfg: EvalConfig | None = None) -> AnomalyReport:
    """Score the test split of one scenario and compute frame-level AUC."""
    cfg = cfg or EvalConfig()
    labels = manifest.labels[manifest.test_slice]
    if labels.size == 0:
        raise ContractError("evaluate: empty test split")
    if labels.min() == labels.max():
        raise UndefinedAUCError(f"test split labels are all {int(labels[0])}; AUC is undefined")
    frames_f = frames_to_float(frames[manifest.test_slice], model.cfg.dtype)
    series = score_split(model, frames_f, manifest.t_max, manifest.period_len, cfg)
    return build_report(series, manifest, cfg, {"model": model.cfg.to_dict()})
