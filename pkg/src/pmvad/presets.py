"""Named scenario + training presets used by the CLI, scripts and acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import ConfigError
from .synthgen import AnomalySpec, NuisanceSpec, ScenarioSpec


@dataclass(frozen=True)
class Preset:
    name: str
    scenario: ScenarioSpec
    anomalies: tuple = ()
    nuisances: tuple = ()
    train: dict = field(default_factory=dict)
    # test-relative frame range holding only nuisances (for robustness checks)
    nuisance_segment: tuple = ()
    twin: str = ""


def _a(base, family, start, end, magnitude=1.0, variant=""):
    return AnomalySpec(family, base + start, base + end, magnitude, variant)


def _n(base, kind, start, end, magnitude=0.5):
    return NuisanceSpec(kind, base + start, base + end, magnitude)


def _oscillator(style: str, name: str, twin: str = "") -> Preset:
    spec = ScenarioSpec("oscillator", period_len=20, num_cycles_train=80, num_cycles_test=20, frame_size=64,
                        domain_style=style, t_max=20)
    b = spec.n_train
    anomalies = (
        _a(b, "motion", 40, 60, 1.0, "freeze"),
        _a(b, "logic", 100, 140),
        _a(b, "motion", 220, 250, 0.5, "speed"),
        _a(b, "logic", 340, 380),
    )
    nuisances = (
        _n(0, "lighting_ramp", 300, 340),
        _n(0, "camera_jitter", 600, 640),
        _n(0, "lighting_ramp", 900, 940),
        _n(0, "camera_jitter", 1200, 1240),
        _n(b, "lighting_ramp", 160, 200),
        _n(b, "camera_jitter", 280, 320),
    )
    return Preset(name, spec, anomalies, nuisances, nuisance_segment=(160, 200, 280, 320), twin=twin,
                  train={"epochs": 6, "lr": 2e-3})


def _sorter() -> Preset:
    spec = ScenarioSpec("sorter", period_len=24, num_cycles_train=60, num_cycles_test=20, frame_size=64,
                        domain_style="synthetic", t_max=24)
    b = spec.n_train
    # logic intervals cover only the swapped B/C sub-actions; sub-action A renders normally
    logic = [_a(b, "logic", c * 24 + 8, c * 24 + 24) for c in (2, 3, 9, 10, 16, 17)]
    anomalies = (
        *logic[:2],
        _a(b, "appearance", 144, 168, 0.8),
        *logic[2:4],
        _a(b, "position", 312, 336, 0.6),
        *logic[4:],
    )
    nuisances = (
        _n(0, "lighting_ramp", 240, 288),
        _n(0, "camera_jitter", 720, 768),
    )
    return Preset("sorter-64", spec, anomalies, nuisances, train={"epochs": 6, "lr": 2e-3, "t_max": 24})


PRESETS = {
    "oscillator-64": _oscillator("synthetic", "oscillator-64"),
    "sorter-64": _sorter(),
    "shift-pair": _oscillator("synthetic", "shift-pair", twin="shift-pair-realish"),
    "shift-pair-realish": _oscillator("realish", "shift-pair-realish"),
}


def get_preset(name: str, seed: int | None = None) -> Preset:
    try:
        p = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if seed is not None:
        p = replace(p, scenario=replace(p.scenario, rng_seed=seed))
    return p
