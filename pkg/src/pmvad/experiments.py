"""Experiment recipes shared by the CLI, ``scripts/`` and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .lora import FreezePolicy, count_params, finetune
from .model import TrainConfig, VadModel, frames_to_float, train
from .presets import get_preset
from .scoring import AnomalyReport, EvalConfig, build_report, evaluate, score_split
from .synthgen import build_scenario


def scenario(preset: str, seed: int):
    p = get_preset(preset, seed)
    frames, man = build_scenario(p.scenario, p.anomalies, p.nuisances, scenario_id=f"{p.name}-s{seed}")
    return frames, man


def preset_train_config(preset: str, seed: int, **overrides) -> TrainConfig:
    p = get_preset(preset)
    kw = {"t_max": p.scenario.t_max, "frame_size": p.scenario.frame_size}
    kw.update(p.train)
    kw.update(overrides)
    return TrainConfig(seed=seed, **kw)


def train_and_evaluate(preset: str, seed: int, eval_cfg: EvalConfig | None = None, **overrides):
    frames, man = scenario(preset, seed)
    model, logs = train(frames, man, preset_train_config(preset, seed, **overrides))
    report = evaluate(model, frames, man, eval_cfg or EvalConfig())
    return model, logs, report, (frames, man)


ABLATION_ROWS = ((True, True), (False, True), (True, False), (False, False))


def ablation(preset: str, seed: int, family: str = "logic", eval_cfg: EvalConfig | None = None,
             frames=None, manifest=None, **overrides) -> list[dict]:
    """Memory on/off x window on/off; 'window off' means fusion weight 0.

    Returns four rows with overall AUC and the AUC on normal + ``family`` frames.
    """
    eval_cfg = eval_cfg or EvalConfig()
    if frames is None:
        frames, manifest = scenario(preset, seed)
    reports = {}
    for use_memory in (True, False):
        cfg = preset_train_config(preset, seed, use_memory=use_memory, **overrides)
        model, _ = train(frames, manifest, cfg)
        series = score_split(model, frames_to_float(frames[manifest.test_slice], cfg.dtype), manifest.t_max,
                             manifest.period_len, eval_cfg)
        for window in (True, False):
            ec = eval_cfg if window else replace(eval_cfg, lambda_fuse=0.0)
            reports[use_memory, window] = build_report(series, manifest, ec)
    rows = []
    for use_memory, window in ABLATION_ROWS:
        r = reports[use_memory, window]
        fam_auc = r.subset_auc(family) if family in r.auc_per_family else float("nan")
        rows.append({"memory": use_memory, "window": window, "auc": r.auc, f"auc_{family}": fam_auc})
    return rows


def lambda_sweep(report: AnomalyReport, lambdas=(0.0, 0.25, 0.5, 0.75, 1.0)) -> list[dict]:
    from .scoring import auc, fuse, normalize_scores

    out = []
    for lam in lambdas:
        score = normalize_scores(fuse(report.recon_error, report.period_error, lam))
        out.append({"lambda_fuse": lam, "auc": auc(score, np.asarray(report.label))})
    return out


def segment_mean(report: AnomalyReport, segments, lambda_fuse: float | None = None) -> float:
    """Mean normalized score over test-relative ``(start, end, start, end, ...)`` ranges."""
    from .scoring import fuse, normalize_scores

    score = np.asarray(report.norm_score) if lambda_fuse is None else normalize_scores(
        fuse(report.recon_error, report.period_error, lambda_fuse))
    idx = np.concatenate([np.arange(segments[i], segments[i + 1]) for i in range(0, len(segments), 2)])
    return float(score[idx].mean())


@dataclass
class TransferRow:
    mode: str
    auc: float
    seconds: float
    steps: int
    trainable_params: int
    total_params: int


def transfer(pretrained: VadModel, frames, manifest, few_shot_fraction: float = 0.2, epochs: int = 3,
             max_steps: int | None = None, lr: float | None = None, rank: int = 4, alpha: float = 8.0,
             policy: FreezePolicy = FreezePolicy(), eval_cfg: EvalConfig | None = None):
    """Pretrained-only vs full finetune vs adapter finetune on a shifted scenario."""
    eval_cfg = eval_cfg or EvalConfig()
    rows = [TransferRow("pretrained", evaluate(pretrained, frames, manifest, eval_cfg).auc, 0.0, 0,
                        0, count_params(pretrained))]
    models = {}
    for mode in ("full", "peft"):
        model, res = finetune(pretrained, frames, manifest, mode, few_shot_fraction, epochs=epochs, lr=lr,
                              max_steps=max_steps, rank=rank, alpha=alpha, policy=policy)
        models[mode] = model
        rows.append(TransferRow(mode, evaluate(model, frames, manifest, eval_cfg).auc, res.seconds, res.steps,
                                res.trainable_params, res.total_params))
    return rows, models


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
