"""Flat ``key = value`` run configuration shared by every CLI command.

Resolution order, later wins: field defaults, the named preset, the config
file, then ``--set key=value`` / dedicated flags. Unknown keys are errors.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .lora import FreezePolicy
from .model import TrainConfig
from .presets import get_preset
from .scoring import EvalConfig
from .synthgen import AnomalySpec, NuisanceSpec, ScenarioSpec


@dataclass(frozen=True)
class RunConfig:
    preset: str = "oscillator-64"
    seed: int = 0
    # scenario
    device_kind: str = "oscillator"
    period_len: int = 20
    num_cycles_train: int = 80
    num_cycles_test: int = 20
    frame_size: int = 64
    domain_style: str = "synthetic"
    t_max: int = 20
    # model / training
    clip_len: int = 16
    memory_slots: int = 200
    channels: int = 64
    batch_size: int = 8
    lr: float = 1e-4
    epochs: int = 50
    lambda_period: float = 1.0
    temporal_downsample: int = 2
    stem_channels: tuple = (8, 16)
    use_memory: bool = True
    memory_axis: str = "column"
    use_boost: bool = True
    dtype: str = "float32"
    # evaluation
    window_n: int = 5
    lambda_fuse: float = 0.5
    circular: bool = True
    phase_rate: float = 0.0
    # finetuning
    few_shot_fraction: float = 0.2
    adapter_rank: int = 4
    adapter_alpha: float = 8.0
    finetune_epochs: int = 3
    finetune_steps: int = 0  # 0 = no cap
    finetune_lr: float = 0.0  # 0 = reuse lr
    train_decoder: bool = False

    def scenario_spec(self) -> ScenarioSpec:
        return ScenarioSpec(self.device_kind, self.period_len, self.num_cycles_train, self.num_cycles_test,
                            self.frame_size, self.domain_style, self.seed, self.t_max).validate()

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names}).validate()

    def eval_config(self) -> EvalConfig:
        return EvalConfig(self.window_n, self.lambda_fuse, self.circular, self.phase_rate)

    def freeze_policy(self) -> FreezePolicy:
        return FreezePolicy(train_decoder=self.train_decoder)

    def schedule(self) -> tuple[tuple, tuple]:
        """Anomalies and nuisances: the preset's, or a generic one for ``preset = none``."""
        if self.preset != "none":
            p = get_preset(self.preset)
            if p.scenario.n_train != self.scenario_spec().n_train or p.scenario.n_frames != self.scenario_spec().n_frames:
                raise ConfigError(f"preset {self.preset!r} schedule needs {p.scenario.num_cycles_train}+"
                                  f"{p.scenario.num_cycles_test} cycles of {p.scenario.period_len} frames")
            return p.anomalies, p.nuisances
        return default_schedule(self.scenario_spec())

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {format_value(v)}")
        return "\n".join(lines) + "\n"

    def write(self, directory) -> Path:
        path = Path(directory) / "config.txt"
        path.write_text(self.to_text())
        return path


def default_schedule(spec: ScenarioSpec):
    """One anomaly per family spread over the test split, plus one nuisance."""
    p = spec.period_len
    b, n_test = spec.n_train, spec.num_cycles_test * p
    slots = max(1, spec.num_cycles_test // 5)
    anomalies, cursor = [], b + p
    for fam in ("appearance", "position", "motion", "logic"):
        end = min(cursor + slots * p, spec.n_frames)
        if end - cursor >= 2:
            anomalies.append(AnomalySpec(fam, cursor, end))
        cursor = end + p
    nuisances = ()
    if cursor + p <= b + n_test:
        nuisances = (NuisanceSpec("lighting_ramp", cursor, min(cursor + p, spec.n_frames)),)
    return tuple(a for a in anomalies if a.end_frame <= spec.n_frames), nuisances


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(name: str, text: str, like):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            v = float(text)
            if not math.isfinite(v):
                raise ValueError(text)
            return v
        if isinstance(like, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None
    return text


def parse_pairs(lines, source: str) -> dict:
    defaults = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for i, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{i}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{i}: unknown config key {key!r}")
        out[key] = parse_value(key, val, getattr(defaults, key))
    return out


def preset_values(name: str) -> dict:
    if name == "none":
        return {}
    p = get_preset(name)
    s = p.scenario
    vals = {"device_kind": s.device_kind, "period_len": s.period_len, "num_cycles_train": s.num_cycles_train,
            "num_cycles_test": s.num_cycles_test, "frame_size": s.frame_size, "domain_style": s.domain_style,
            "t_max": s.t_max}
    vals.update(p.train)
    return vals


def resolve(config_file=None, overrides: dict | None = None) -> RunConfig:
    file_vals = {}
    if config_file is not None:
        path = Path(config_file)
        try:
            file_vals = parse_pairs(path.read_text().splitlines(), str(path))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
    overrides = dict(overrides or {})
    preset = overrides.get("preset", file_vals.get("preset", RunConfig.preset))
    cfg = replace(RunConfig(), preset=preset, **preset_values(preset))
    cfg = replace(cfg, **file_vals)
    cfg = replace(cfg, **overrides)
    cfg.scenario_spec()
    cfg.train_config()
    return cfg


def parse_overrides(items) -> dict:
    return parse_pairs(list(items or []), "--set")
