import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmvad import pnm
from pmvad.errors import ConfigError, DatasetError, MalformedManifestError, ChecksumError
from pmvad.synthgen import (AnomalySpec, DatasetManifest, NuisanceSpec, Renderer, ScenarioSpec, apply_nuisance,
                            build_scenario, generate_scenario, inject_anomaly, read_dataset, swap_subactions,
                            write_dataset)


def spec(kind="oscillator", p=20, train=2, test=1, size=32, style="synthetic", seed=0, t_max=20):
    return ScenarioSpec(kind, p, train, test, size, style, seed, t_max)


def test_oscillator_frame_count_and_periodicity():
    frames, man = generate_scenario(spec(train=2, test=1, size=64))
    assert frames.shape == (60, 64, 64) and man.n_train == 40
    for f in range(40):
        np.testing.assert_array_equal(frames[f], frames[f + 20])


@pytest.mark.parametrize("kind", ["oscillator", "conveyor", "rotator", "sorter"])
@pytest.mark.parametrize("style", ["synthetic", "realish"])
def test_every_device_is_periodic_and_moves(kind, style):
    frames, _ = generate_scenario(spec(kind, p=12, train=2, test=1, style=style))
    np.testing.assert_array_equal(frames[:12], frames[12:24])
    assert len({frames[f].tobytes() for f in range(12)}) > 1


def test_same_seed_same_bytes_and_manifest():
    a = generate_scenario(spec(style="realish", seed=5))
    b = generate_scenario(spec(style="realish", seed=5))
    np.testing.assert_array_equal(a[0], b[0])
    assert a[1].to_dict() == b[1].to_dict()


def test_realish_differs_from_synthetic():
    a, _ = generate_scenario(spec(style="synthetic"))
    b, _ = generate_scenario(spec(style="realish"))
    assert np.abs(a.astype(int) - b).mean() > 3


def test_conveyor_phase_label_formula():
    _, man = generate_scenario(spec("conveyor", p=16, size=64, t_max=20))
    f = np.arange(16)
    np.testing.assert_array_equal(man.phase_labels[:16], f * 20 // 16)
    np.testing.assert_array_equal(man.phase_labels[16:32], man.phase_labels[:16])


@settings(max_examples=25)
@given(st.integers(4, 40), st.integers(2, 60))
def test_phase_labels_for_normal_frames(p, t_max):
    _, man = generate_scenario(spec(p=p, t_max=t_max, size=16, train=1, test=1))
    f = np.arange(man.n_frames)
    np.testing.assert_array_equal(man.phase_labels, (f % p) * t_max // p)  # exact integer floor


def _scene(kind="oscillator", **kw):
    return generate_scenario(spec(kind, train=2, test=2, size=48, **kw))


def test_appearance_anomaly_is_local():
    frames, man = _scene()
    a = AnomalySpec("appearance", 45, 55, 1.0)
    out, man2 = inject_anomaly(frames, man, a)
    inside, outside = np.arange(45, 55), np.r_[0:45, 55:80]
    assert any(not np.array_equal(out[f], frames[f]) for f in inside)
    np.testing.assert_array_equal(out[outside], frames[outside])
    y0, y1, x0, x1 = Renderer(man.spec).bbox
    mask = np.ones(frames.shape[1:], bool)
    mask[y0:y1, x0:x1] = False
    np.testing.assert_array_equal(out[inside][:, mask], frames[inside][:, mask])
    assert man2.labels[inside].all() and not man2.labels[outside].any()


def test_position_anomaly_stays_in_device_region():
    frames, man = _scene("conveyor")
    out, _ = inject_anomaly(frames, man, AnomalySpec("position", 41, 49, 0.6))
    y0, y1, x0, x1 = Renderer(man.spec).bbox
    diff = out != frames
    assert diff[41:49].any()
    diff[:, y0:y1, x0:x1] = False
    assert not diff.any()


def test_motion_freeze_repeats_first_frame():
    frames, man = _scene()
    out, man2 = inject_anomaly(frames, man, AnomalySpec("motion", 50, 60, 1.0, "freeze"))
    for f in range(50, 60):
        np.testing.assert_array_equal(out[f], out[50])
    assert (man2.phase_labels[50:60] == man2.phase_labels[50]).all()


def test_motion_speed_advances_phase_faster():
    frames, man = _scene()
    _, man2 = inject_anomaly(frames, man, AnomalySpec("motion", 40, 50, 1.0, "speed"))
    np.testing.assert_array_equal(man2.phase_labels[40:50], (np.arange(10) * 2 * 20 // 20) % 20)


def test_logic_anomaly_swaps_subactions_on_sorter():
    s = spec("sorter", p=24, train=1, test=1, size=48, t_max=24)
    frames, man = generate_scenario(s)
    out, man2 = inject_anomaly(frames, man, AnomalySpec("logic", 24, 48))
    phases = man2.phase_labels[24:48]
    assert (np.diff(phases) < 0).any()  # non-monotonic within the cycle
    # A stays, then C, then B: the swapped interval renders normal frames from other slots
    np.testing.assert_array_equal(out[24:32], frames[0:8])
    np.testing.assert_array_equal(out[32:40], frames[16:24])
    np.testing.assert_array_equal(out[40:48], frames[8:16])


def test_swap_subactions_order():
    np.testing.assert_allclose(swap_subactions([0.1, 0.4, 0.8]), [0.1, 0.4 + 1 / 3, 0.8 - 1 / 3])


def test_anomaly_in_train_split_rejected():
    frames, man = _scene()
    with pytest.raises(ConfigError, match="train split"):
        inject_anomaly(frames, man, AnomalySpec("appearance", 10, 20))


def test_train_split_stays_clean():
    frames, man = build_scenario(spec(train=2, test=2), [AnomalySpec("logic", 40, 60)],
                                 [NuisanceSpec("lighting_ramp", 0, 20, 1.0)])
    assert not man.labels[: man.n_train].any()


def test_lighting_zero_magnitude_is_identity():
    frames, man = _scene()
    np.testing.assert_array_equal(apply_nuisance(frames, man, NuisanceSpec("lighting_ramp", 0, 30, 0.0)), frames)


def test_lighting_ramp_mean_strictly_increases():
    frames, man = generate_scenario(spec(train=2, test=2, size=48, p=20))
    frames[:] = frames[0]  # remove device motion so only the ramp moves the mean
    out = apply_nuisance(frames, man, NuisanceSpec("lighting_ramp", 40, 60, 0.5))
    means = out[40:60].mean(axis=(1, 2))
    assert (np.diff(means) > 0).all()


@given(st.floats(0.05, 1.0))
@settings(max_examples=15)
def test_camera_jitter_is_bounded_translation(mag):
    frames, man = _scene()
    out = apply_nuisance(frames, man, NuisanceSpec("camera_jitter", 40, 50, mag))
    j = math.ceil(4 * mag)
    for f in range(40, 50):
        ok = False
        padded = np.pad(frames[f], j, mode="edge")
        for dy in range(-j, j + 1):
            for dx in range(-j, j + 1):
                if np.array_equal(out[f], padded[j - dy : j - dy + 48, j - dx : j - dx + 48]):
                    ok = True
        assert ok
    np.testing.assert_array_equal(out[:40], frames[:40])


def test_nuisances_leave_labels_alone():
    _, man0 = build_scenario(spec(train=2, test=2), [AnomalySpec("motion", 50, 60, 1.0, "freeze")])
    _, man1 = build_scenario(spec(train=2, test=2), [AnomalySpec("motion", 50, 60, 1.0, "freeze")],
                             [NuisanceSpec("camera_jitter", 45, 70, 1.0), NuisanceSpec("lighting_ramp", 0, 80, 1.0)])
    np.testing.assert_array_equal(man0.labels, man1.labels)
    np.testing.assert_array_equal(man0.phase_labels, man1.phase_labels)


def test_dataset_round_trip(tmp_path):
    frames, man = build_scenario(spec(train=1, test=1, size=16), [AnomalySpec("appearance", 25, 30)])
    write_dataset(frames, man, tmp_path)
    frames2, man2 = read_dataset(tmp_path)
    np.testing.assert_array_equal(frames, frames2)
    assert man2.to_dict() == man.to_dict()


def test_manifest_label_length_mismatch(tmp_path):
    frames, man = generate_scenario(spec(train=1, test=1, size=16))
    write_dataset(frames, man, tmp_path)
    d = json.loads((tmp_path / "manifest.json").read_text())
    d["labels"] = d["labels"][:-1]
    (tmp_path / "manifest.json").write_text(json.dumps(d))
    with pytest.raises(MalformedManifestError):
        read_dataset(tmp_path)


def test_truncated_frame_names_the_file(tmp_path):
    frames, man = generate_scenario(spec(train=1, test=1, size=16))
    write_dataset(frames, man, tmp_path)
    victim = tmp_path / "frames" / "000007.pgm"
    victim.write_bytes(victim.read_bytes()[:-10])
    with pytest.raises(DatasetError, match="000007.pgm"):
        read_dataset(tmp_path)


def test_checksum_mismatch_detected(tmp_path):
    frames, man = generate_scenario(spec(train=1, test=1, size=16))
    write_dataset(frames, man, tmp_path)
    victim = tmp_path / "frames" / "000003.pgm"
    img = pnm.read(victim)
    img[0, 0] ^= 1
    pnm.write(victim, img)
    with pytest.raises(ChecksumError):
        read_dataset(tmp_path)


def test_manifest_rejects_abnormal_train_labels():
    _, man = generate_scenario(spec(train=1, test=1, size=16))
    d = man.to_dict()
    d["labels"][0] = 1
    with pytest.raises(MalformedManifestError):
        DatasetManifest.from_dict(d)


@pytest.mark.parametrize("bad", [dict(period_len=3), dict(device_kind="crane"), dict(domain_style="photo"),
                                 dict(frame_size=0)])
def test_spec_validation(bad):
    kw = dict(device_kind="oscillator", period_len=20, num_cycles_train=1, num_cycles_test=1, frame_size=16,
              domain_style="synthetic", rng_seed=0, t_max=20)
    kw.update(bad)
    with pytest.raises(ConfigError):
        ScenarioSpec(**kw).validate()
