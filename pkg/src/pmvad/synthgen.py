"""Procedural periodic "device" scenes with labeled anomalies and nuisances.

Each device is a 2-D renderer driven by a cycle phase ``phi`` in ``[0, 1)``.
Normal footage uses ``phi(f) = (f mod period_len) / period_len``, so it is
exactly periodic. Anomalies re-render a frame interval with an altered phase
trajectory (motion, logic) or altered device attributes (appearance,
position); nuisances post-process pixels and never touch labels.

Frames are a ``(N, H, W)`` uint8 array; frames ``[0, n_train)`` form the
train split and the rest the test split.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, pnm
from .errors import ChecksumError, ConfigError, DatasetError, MalformedManifestError
from .seeding import substream

SCHEMA_VERSION = 1

DEVICE_KINDS = ("oscillator", "conveyor", "rotator", "sorter")
DOMAIN_STYLES = ("synthetic", "realish")
ANOMALY_FAMILIES = ("appearance", "position", "motion", "logic")
ANOMALY_VARIANTS = {
    "appearance": ("intensity",),
    "position": ("shift",),
    "motion": ("speed", "freeze"),
    "logic": ("swap",),
}
NUISANCE_KINDS = ("lighting_ramp", "camera_jitter")

BACKGROUND = 30.0
DEVICE_LEVEL = 200.0
STATIC_LEVEL = 90.0
MAX_SHIFT_FRAC = 0.125  # position anomaly shift at magnitude 1, as a fraction of frame size
N_SUBACTIONS = 3


@dataclass(frozen=True)
class ScenarioSpec:
    device_kind: str = "oscillator"
    period_len: int = 20
    num_cycles_train: int = 80
    num_cycles_test: int = 20
    frame_size: int = 64
    domain_style: str = "synthetic"
    rng_seed: int = 0
    t_max: int = 20

    def validate(self) -> "ScenarioSpec":
        if self.device_kind not in DEVICE_KINDS:
            raise ConfigError(f"device_kind must be one of {DEVICE_KINDS}, got {self.device_kind!r}")
        if self.domain_style not in DOMAIN_STYLES:
            raise ConfigError(f"domain_style must be one of {DOMAIN_STYLES}, got {self.domain_style!r}")
        if self.period_len < 4:
            raise ConfigError(f"period_len must be >= 4, got {self.period_len}")
        if self.frame_size < 16:
            raise ConfigError(f"frame_size must be >= 16, got {self.frame_size}")
        if self.num_cycles_train < 1 or self.num_cycles_test < 1:
            raise ConfigError("cycle counts must be >= 1")
        if self.t_max < 2:
            raise ConfigError(f"t_max must be >= 2, got {self.t_max}")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ConfigError(f"rng_seed must fit in 64 bits, got {self.rng_seed}")
        return self

    @property
    def n_train(self) -> int:
        return self.num_cycles_train * self.period_len

    @property
    def n_frames(self) -> int:
        return (self.num_cycles_train + self.num_cycles_test) * self.period_len


@dataclass(frozen=True)
class AnomalySpec:
    family: str
    start_frame: int
    end_frame: int
    magnitude: float = 1.0
    variant: str = ""

    def resolved_variant(self) -> str:
        return self.variant or ANOMALY_VARIANTS[self.family][0]


@dataclass(frozen=True)
class NuisanceSpec:
    kind: str
    start_frame: int
    end_frame: int
    magnitude: float = 0.5


@dataclass
class DatasetManifest:
    scenario_id: str
    spec: ScenarioSpec
    labels: np.ndarray
    phase_labels: np.ndarray
    anomalies: list = field(default_factory=list)
    nuisances: list = field(default_factory=list)

    @property
    def period_len(self) -> int:
        return self.spec.period_len

    @property
    def t_max(self) -> int:
        return self.spec.t_max

    @property
    def n_frames(self) -> int:
        return len(self.labels)

    @property
    def n_train(self) -> int:
        return self.spec.n_train

    @property
    def train_slice(self) -> slice:
        return slice(0, self.n_train)

    @property
    def test_slice(self) -> slice:
        return slice(self.n_train, self.n_frames)

    def frame_file(self, f: int) -> str:
        return f"frames/{f:06d}.pgm"

    def family_labels(self) -> np.ndarray:
        """Per-frame anomaly family name, ``""`` for normal frames (last injection wins)."""
        out = np.full(self.n_frames, "", dtype=object)
        for a in self.anomalies:
            out[a.start_frame : a.end_frame] = a.family
        return out

    def copy(self) -> "DatasetManifest":
        return DatasetManifest(self.scenario_id, self.spec, self.labels.copy(), self.phase_labels.copy(),
                               list(self.anomalies), list(self.nuisances))

    def to_dict(self, checksums: list[str] | None = None) -> dict:
        n = self.n_frames
        d = {
            "schema_version": SCHEMA_VERSION,
            "scenario_id": self.scenario_id,
            "num_frames": n,
            "frame_size": self.spec.frame_size,
            "channels": 1,
            "period_len": self.period_len,
            "t_max": self.t_max,
            "split": {
                "train": [self.frame_file(f) for f in range(self.n_train)],
                "test": [self.frame_file(f) for f in range(self.n_train, n)],
            },
            "labels": [int(v) for v in self.labels],
            "phase_labels": [int(v) for v in self.phase_labels],
            "anomalies": [asdict(a) for a in self.anomalies],
            "nuisances": [asdict(a) for a in self.nuisances],
            "provenance": {"spec": asdict(self.spec), "seed": int(self.spec.rng_seed), "generator": f"pmvad {__version__}"},
        }
        if checksums is not None:
            d["sha256"] = checksums
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        try:
            if d.get("schema_version") != SCHEMA_VERSION:
                raise MalformedManifestError(f"unsupported schema_version {d.get('schema_version')!r}")
            spec = ScenarioSpec(**d["provenance"]["spec"]).validate()
            labels = np.asarray(d["labels"], dtype=np.int8)
            phases = np.asarray(d["phase_labels"], dtype=np.int64)
            n = int(d["num_frames"])
            files = list(d["split"]["train"]) + list(d["split"]["test"])
            anomalies = [AnomalySpec(**a) for a in d.get("anomalies", [])]
            nuisances = [NuisanceSpec(**a) for a in d.get("nuisances", [])]
            scenario_id = str(d["scenario_id"])
        except MalformedManifestError:
            raise
        except (KeyError, TypeError, ValueError, ConfigError) as exc:
            raise MalformedManifestError(f"manifest: {exc}") from exc
        if len(labels) != n or len(phases) != n or len(files) != n:
            raise MalformedManifestError(
                f"manifest: num_frames={n} but {len(labels)} labels, {len(phases)} phase labels, {len(files)} frame refs")
        if n != spec.n_frames or len(d["split"]["train"]) != spec.n_train:
            raise MalformedManifestError(f"manifest: frame counts disagree with provenance spec ({spec.n_frames})")
        if not np.isin(labels, (0, 1)).all():
            raise MalformedManifestError("manifest: labels must be 0/1")
        if labels[: spec.n_train].any():
            raise MalformedManifestError("manifest: train split carries abnormal labels")
        if (phases < 0).any() or (phases >= spec.t_max).any():
            raise MalformedManifestError(f"manifest: phase labels outside [0, {spec.t_max})")
        return cls(scenario_id, spec, labels, phases, anomalies, nuisances)


# --- rendering -------------------------------------------------------------


class _Canvas:
    def __init__(self, size: int):
        self.size = size
        yy, xx = np.mgrid[0:size, 0:size]
        self.yy, self.xx = yy + 0.5, xx + 0.5

    def rect(self, img, cy, cx, h, w, val):
        m = (np.abs(self.yy - cy) <= h / 2) & (np.abs(self.xx - cx) <= w / 2)
        img[m] = val

    def disk(self, img, cy, cx, r, val):
        img[(self.yy - cy) ** 2 + (self.xx - cx) ** 2 <= r * r] = val

    def segment(self, img, p0, p1, thickness, val):
        (y0, x0), (y1, x1) = p0, p1
        dy, dx = y1 - y0, x1 - x0
        L2 = dy * dy + dx * dx
        t = np.clip(((self.yy - y0) * dy + (self.xx - x0) * dx) / max(L2, 1e-12), 0, 1)
        d2 = (self.yy - (y0 + t * dy)) ** 2 + (self.xx - (x0 + t * dx)) ** 2
        img[d2 <= (thickness / 2) ** 2] = val


def _draw_static(kind, cv: _Canvas, img):
    s = cv.size
    if kind == "oscillator":
        cv.rect(img, 0.82 * s, 0.5 * s, 0.05 * s, 0.9 * s, STATIC_LEVEL)
    elif kind == "conveyor":
        cv.rect(img, 0.72 * s, 0.5 * s, 0.14 * s, s, STATIC_LEVEL)
    elif kind == "rotator":
        cv.disk(img, 0.5 * s, 0.5 * s, 0.08 * s, STATIC_LEVEL)
    elif kind == "sorter":
        cv.rect(img, 0.22 * s, 0.5 * s, 0.04 * s, 0.95 * s, STATIC_LEVEL)
        for k in range(N_SUBACTIONS):
            cx = (0.2 + 0.3 * k) * s
            cv.rect(img, 0.9 * s, cx, 0.12 * s, 0.16 * s, STATIC_LEVEL)


def _draw_device(kind, cv: _Canvas, img, phi, dy=0.0, dx=0.0, level=DEVICE_LEVEL):
    s = cv.size
    two_pi = 2 * math.pi
    if kind == "oscillator":
        cx = 0.5 * s + 0.3 * s * math.sin(two_pi * phi) + dx
        # height tracks the cosine so a single frame pins down the phase
        h = (0.45 + 0.12 * math.cos(two_pi * phi)) * s
        cv.rect(img, 0.8 * s - h / 2 + dy, cx, h, 0.12 * s, level)
    elif kind == "conveyor":
        span = 1.25 * s
        cx = -0.125 * s + span * phi + dx
        cv.rect(img, 0.56 * s + dy, cx, 0.18 * s, 0.18 * s, level)
        for k in range(4):
            x = ((k + phi) * 0.25 * s) % s
            cv.rect(img, 0.72 * s + dy, x + dx, 0.1 * s, 0.04 * s, level * 0.6)
    elif kind == "rotator":
        ang = two_pi * phi
        c = (0.5 * s + dy, 0.5 * s + dx)
        tip = (c[0] - 0.38 * s * math.cos(ang), c[1] + 0.38 * s * math.sin(ang))
        cv.segment(img, c, tip, max(2.0, 0.07 * s), level)
        cv.disk(img, tip[0], tip[1], 0.06 * s, level)
    elif kind == "sorter":
        k = min(int(phi * N_SUBACTIONS), N_SUBACTIONS - 1)
        u = phi * N_SUBACTIONS - k
        lane_x = (0.2 + 0.3 * k) * s
        start_x = 0.02 * s
        if u < 0.5:
            y, x = 0.15 * s, start_x + (lane_x - start_x) * (u / 0.5)
        else:
            y, x = 0.15 * s + 0.65 * s * ((u - 0.5) / 0.5), lane_x
        cv.rect(img, y + dy, x + dx, 0.1 * s, 0.1 * s, level)
        # gate arm points at the active lane
        cv.segment(img, (0.3 * s + dy, 0.5 * s + dx), (0.3 * s + dy, lane_x + dx), max(2.0, 0.03 * s), level * 0.8)
    else:  # pragma: no cover - guarded by ScenarioSpec.validate
        raise ConfigError(kind)


class Renderer:
    """Renders frames of one scenario; all randomness is keyed by the spec seed."""

    def __init__(self, spec: ScenarioSpec):
        self.spec = spec.validate()
        s = spec.frame_size
        self.cv = _Canvas(s)
        bg = np.full((s, s), BACKGROUND)
        if spec.domain_style == "realish":
            rng = substream(spec.rng_seed, "texture")
            coarse = rng.normal(0.0, 14.0, (s // 8 + 2, s // 8 + 2))
            # bilinear upsample of a coarse grid gives a smooth fixed texture
            ys = np.linspace(0, coarse.shape[0] - 1.001, s)
            xs = np.linspace(0, coarse.shape[1] - 1.001, s)
            y0, x0 = ys.astype(int), xs.astype(int)
            fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
            c = coarse
            tex = (c[y0][:, x0] * (1 - fy) * (1 - fx) + c[y0 + 1][:, x0] * fy * (1 - fx)
                   + c[y0][:, x0 + 1] * (1 - fy) * fx + c[y0 + 1][:, x0 + 1] * fy * fx)
            fine = rng.normal(0.0, 5.0, (s, s))
            bg = bg + 15.0 + tex + fine
            r2 = ((self.cv.yy - s / 2) ** 2 + (self.cv.xx - s / 2) ** 2) / (s / 2) ** 2
            self.vignette = 1.0 - 0.3 * np.clip(r2, 0, 2) / 2
        else:
            self.vignette = None
        _draw_static(spec.device_kind, self.cv, bg)
        self.background = bg
        self.bbox = self._device_bbox()

    def _device_bbox(self):
        s = self.spec.frame_size
        m = np.zeros((s, s), dtype=bool)
        shift = MAX_SHIFT_FRAC * s
        for phi in np.linspace(0, 1, 97, endpoint=False):
            for dy, dx in ((0, 0), (-shift, -shift), (shift, shift), (-shift, shift), (shift, -shift)):
                img = np.zeros((s, s))
                _draw_device(self.spec.device_kind, self.cv, img, phi, dy, dx, 1.0)
                m |= img > 0
        ys, xs = np.nonzero(m)
        return (max(ys.min() - 1, 0), min(ys.max() + 2, s), max(xs.min() - 1, 0), min(xs.max() + 2, s))

    def render(self, phi: float, dy: float = 0.0, dx: float = 0.0, level: float = DEVICE_LEVEL) -> np.ndarray:
        phi = float(phi) % 1.0
        img = self.background.copy()
        _draw_device(self.spec.device_kind, self.cv, img, phi, dy, dx, level)
        if self.spec.domain_style == "realish":
            img = img * self.vignette
            # noise keyed by the rendered phase: periodic, and frozen frames stay identical
            key = int(round(phi * 2**20)) % 2**20
            img = img + substream(self.spec.rng_seed, "pixel_noise", key).normal(0.0, 4.0, img.shape)
        return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def clean_phase(f, period_len: int) -> np.ndarray:
    return (np.asarray(f) % period_len) / period_len


def phase_label_of(phi, t_max: int) -> np.ndarray:
    return np.floor(np.asarray(phi) * t_max + 1e-9).astype(np.int64) % t_max


def generate_scenario(spec: ScenarioSpec, scenario_id: str | None = None) -> tuple[np.ndarray, DatasetManifest]:
    spec.validate()
    r = Renderer(spec)
    p = spec.period_len
    cycle = np.stack([r.render(k / p) for k in range(p)])
    reps = spec.num_cycles_train + spec.num_cycles_test
    frames = np.tile(cycle, (reps, 1, 1))
    f = np.arange(spec.n_frames)
    phases = (f % p) * spec.t_max // p
    sid = scenario_id or f"{spec.device_kind}-{spec.frame_size}-{spec.domain_style}-s{spec.rng_seed}"
    manifest = DatasetManifest(sid, spec, np.zeros(spec.n_frames, dtype=np.int8), phases.astype(np.int64))
    return frames, manifest


def _check_interval(start, end, lo, hi, what):
    if not (lo <= start < end <= hi):
        raise ConfigError(f"{what}: interval [{start}, {end}) must satisfy {lo} <= start < end <= {hi}")


def swap_subactions(phi, order=(0, 2, 1)) -> np.ndarray:
    """Re-map a phase so sub-action slots play in ``order`` instead of 0, 1, 2."""
    phi = np.asarray(phi, dtype=np.float64)
    k = np.minimum((phi * N_SUBACTIONS).astype(int), N_SUBACTIONS - 1)
    u = phi * N_SUBACTIONS - k
    return (np.asarray(order)[k] + u) / N_SUBACTIONS


def anomalous_trajectory(a: AnomalySpec, period_len: int) -> np.ndarray:
    """Rendered phases for frames ``a.start_frame .. a.end_frame - 1``."""
    f = np.arange(a.start_frame, a.end_frame)
    phi = clean_phase(f, period_len)
    if a.family == "motion":
        if a.resolved_variant() == "freeze":
            return np.full(len(f), phi[0])
        return (phi[0] + (f - a.start_frame) * (1.0 + a.magnitude) / period_len) % 1.0
    if a.family == "logic":
        return swap_subactions(phi)
    return phi


def inject_anomaly(frames: np.ndarray, manifest: DatasetManifest, a: AnomalySpec) -> tuple[np.ndarray, DatasetManifest]:
    """Re-render ``[start_frame, end_frame)`` with anomaly ``a`` and label it 1.

    Frames in the interval are rendered from scratch, so a nuisance applied
    there earlier is dropped; inject anomalies before nuisances.
    """
    if a.family not in ANOMALY_FAMILIES:
        raise ConfigError(f"unknown anomaly family {a.family!r}")
    if a.resolved_variant() not in ANOMALY_VARIANTS[a.family]:
        raise ConfigError(f"unknown {a.family} variant {a.variant!r}")
    if not 0 < a.magnitude <= 1:
        raise ConfigError(f"anomaly magnitude must be in (0, 1], got {a.magnitude}")
    if a.start_frame < manifest.n_train:
        raise ConfigError(f"anomaly at frame {a.start_frame} falls in the train split; training data is anomaly-free")
    _check_interval(a.start_frame, a.end_frame, manifest.n_train, manifest.n_frames, "anomaly")

    spec = manifest.spec
    r = Renderer(spec)
    out = frames.copy()
    man = manifest.copy()
    phis = anomalous_trajectory(a, spec.period_len)
    s = spec.frame_size
    y0, y1, x0, x1 = r.bbox
    for i, f in enumerate(range(a.start_frame, a.end_frame)):
        if a.family == "appearance":
            img = r.render(phis[i], level=DEVICE_LEVEL * (1.0 - 0.6 * a.magnitude))
        elif a.family == "position":
            shift = max(1.0, round(MAX_SHIFT_FRAC * s * a.magnitude))
            img = r.render(phis[i], dy=-shift, dx=shift)
        else:
            img = r.render(phis[i])
        if a.family in ("appearance", "position"):
            patch = out[f].copy()
            patch[y0:y1, x0:x1] = img[y0:y1, x0:x1]
            img = patch
        out[f] = img
    man.labels[a.start_frame : a.end_frame] = 1
    man.phase_labels[a.start_frame : a.end_frame] = phase_label_of(phis, spec.t_max)
    man.anomalies.append(a)
    return out, man


def apply_nuisance(frames: np.ndarray, manifest: DatasetManifest, n: NuisanceSpec) -> np.ndarray:
    """Lighting ramp or camera jitter on ``[start_frame, end_frame)``.

    Labels and phase labels are not touched. The caller records ``n`` in
    ``manifest.nuisances`` if provenance matters (``build_scenario`` does).
    """
    if n.kind not in NUISANCE_KINDS:
        raise ConfigError(f"unknown nuisance kind {n.kind!r}")
    if not 0 <= n.magnitude <= 1:
        raise ConfigError(f"nuisance magnitude must be in [0, 1], got {n.magnitude}")
    _check_interval(n.start_frame, n.end_frame, 0, len(frames), "nuisance")
    out = frames.copy()
    length = n.end_frame - n.start_frame
    if n.kind == "lighting_ramp":
        for i in range(length):
            f = n.start_frame + i
            offset = n.magnitude * 80.0 * (i + 1) / length
            out[f] = np.clip(np.rint(frames[f].astype(np.float64) + offset), 0, 255).astype(np.uint8)
        return out
    j = math.ceil(n.magnitude * 4)
    if j == 0:
        return out
    rng = substream(manifest.spec.rng_seed, "camera_jitter", n.start_frame, n.end_frame)
    offsets = rng.integers(-j, j + 1, size=(length, 2))
    for i in range(length):
        f = n.start_frame + i
        dy, dx = (int(v) for v in offsets[i])
        padded = np.pad(frames[f], j, mode="edge")
        out[f] = padded[j - dy : j - dy + frames.shape[1], j - dx : j - dx + frames.shape[2]]
    return out


def build_scenario(spec: ScenarioSpec, anomalies=(), nuisances=(), scenario_id: str | None = None):
    """Generate, inject every anomaly, then apply every nuisance."""
    frames, man = generate_scenario(spec, scenario_id)
    for a in anomalies:
        frames, man = inject_anomaly(frames, man, a)
    for n in nuisances:
        frames = apply_nuisance(frames, man, n)
        man.nuisances.append(n)
    return frames, man


# --- storage ---------------------------------------------------------------


def write_dataset(frames: np.ndarray, manifest: DatasetManifest, directory) -> Path:
    d = Path(directory)
    if len(frames) != manifest.n_frames:
        raise MalformedManifestError(f"{len(frames)} frames but manifest describes {manifest.n_frames}")
    (d / "frames").mkdir(parents=True, exist_ok=True)
    sums = []
    for f in range(len(frames)):
        blob = pnm.write(d / manifest.frame_file(f), frames[f])
        sums.append(hashlib.sha256(blob).hexdigest())
    (d / "manifest.json").write_text(json.dumps(manifest.to_dict(sums), indent=1) + "\n")
    return d


def read_dataset(directory) -> tuple[np.ndarray, DatasetManifest]:
    d = Path(directory)
    try:
        raw = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"missing manifest {d / 'manifest.json'}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedManifestError(f"manifest is not valid JSON: {exc}") from exc
    man = DatasetManifest.from_dict(raw)
    refs = raw["split"]["train"] + raw["split"]["test"]
    sums = raw.get("sha256")
    if sums is not None and len(sums) != len(refs):
        raise MalformedManifestError(f"{len(sums)} checksums for {len(refs)} frames")
    s = man.spec.frame_size
    frames = np.empty((len(refs), s, s), dtype=np.uint8)
    for f, ref in enumerate(refs):
        path = d / ref
        try:
            blob = path.read_bytes()
        except FileNotFoundError as exc:
            raise DatasetError(f"missing frame file {path}") from exc
        img = pnm.decode(blob, str(path))
        if img.shape != (s, s):
            raise DatasetError(f"{path}: shape {img.shape}, expected {(s, s)}")
        if sums is not None and hashlib.sha256(blob).hexdigest() != sums[f]:
            raise ChecksumError(f"{path}: checksum mismatch")
        frames[f] = img
    return frames, man


def with_seed(spec: ScenarioSpec, seed: int) -> ScenarioSpec:
    return replace(spec, rng_seed=seed)
