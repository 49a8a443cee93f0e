import json

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from pmvad.errors import ContractError, UndefinedAUCError
from pmvad.scoring import (AnomalyReport, auc, build_report, frame_phases, fuse, minmax, normalize_scores,
                           overlap_average, recon_error)


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def test_auc_examples():
    s = [0.9, 0.8, 0.2, 0.1]
    assert auc(s, [1, 1, 0, 0]) == 1.0
    assert auc(s, [0, 0, 1, 1]) == 0.0
    assert auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5


def test_auc_equals_pairwise_oracle_on_100_tied_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 80))
        scores = rng.integers(0, 6, n) / 5.0  # coarse grid -> many ties
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        assert auc(scores, labels) == brute_auc(scores, labels)


@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 1)), min_size=2, max_size=60)
       .filter(lambda xs: len({l for _, l in xs}) == 2))
def test_auc_property_oracle(pairs):
    scores = [s / 3 for s, _ in pairs]
    labels = [l for _, l in pairs]
    assert auc(scores, labels) == brute_auc(scores, labels)


@given(arrays(np.float64, 30, elements=st.integers(-40, 40).map(lambda v: v / 8)), st.integers(0, 2**31 - 1))
def test_auc_invariant_under_increasing_transform(scores, seed):
    labels = np.random.default_rng(seed).integers(0, 2, 30)
    labels[:2] = [0, 1]
    assert auc(np.exp(scores) * 3 + 1, labels) == pytest.approx(auc(scores, labels), abs=1e-12)


def test_auc_single_class_is_undefined():
    with pytest.raises(UndefinedAUCError):
        auc([0.1, 0.2], [0, 0])


def test_minmax_examples():
    np.testing.assert_array_equal(normalize_scores([2, 4, 6]), [0, 0.5, 1])
    np.testing.assert_array_equal(normalize_scores([5, 5]), [0, 0])


def test_normalization_is_whole_set():
    a, b = np.array([1.0, 3.0]), np.array([2.0, 9.0])
    joint = normalize_scores(np.concatenate([a, b]))
    np.testing.assert_array_equal(joint, (np.r_[a, b] - 1) / 8)
    assert not np.array_equal(joint[:2], normalize_scores(a))


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e6, 1e6)))
def test_normalize_bounds_and_idempotence(x):
    y = normalize_scores(x)
    assert (y >= 0).all() and (y <= 1).all()
    np.testing.assert_allclose(normalize_scores(y), y, atol=1e-12)


def test_fuse_examples():
    r, p = np.array([0.0, 2.0, 4.0]), np.array([3.0, 1.0, 5.0])
    np.testing.assert_array_equal(fuse(r, p, 0.0), minmax(r))
    np.testing.assert_array_equal(fuse(r, p, 1.0), minmax(p))
    np.testing.assert_array_equal(fuse([0, 1], [1, 0], 0.5), [0.5, 0.5])


@given(arrays(np.float64, 10, elements=st.floats(0, 10)), arrays(np.float64, 10, elements=st.floats(0, 10)),
       st.integers(0, 9), st.floats(0, 1))
def test_fuse_monotone_in_each_entry_for_fixed_range(r, p, i, lam):
    # raise one recon entry without moving min or max
    lo, hi = r.min(), r.max()
    bumped = r.copy()
    bumped[i] = min(hi, r[i] + 1)
    assume(bumped.min() == lo and bumped.max() == hi)
    assert fuse(bumped, p, lam)[i] >= fuse(r, p, lam)[i] - 1e-12


def test_fuse_validation():
    with pytest.raises(ContractError):
        fuse([0, 1], [0, 1, 2])
    with pytest.raises(ContractError):
        fuse([0, 1], [0, 1], 1.5)


def test_recon_error_examples():
    clip = np.zeros((3, 4, 4))
    assert not recon_error(clip, clip).any()
    off = clip.copy()
    off[1] += 0.1
    np.testing.assert_allclose(recon_error(clip, off), [0, 0.01, 0], atol=1e-15)
    with pytest.raises(ContractError):
        recon_error(clip, np.zeros((3, 4, 5)))


def test_overlap_average_means_shared_frames():
    # clip 0 covers frames 0-1, clip 1 covers frames 1-2; they disagree on frame 1
    errs = np.array([[1.0, 2.0], [4.0, 8.0]])
    np.testing.assert_array_equal(overlap_average(errs, [0, 1], 3), [1.0, 3.0, 8.0])


def test_frame_phases_use_centred_clip():
    starts = np.arange(5)  # clip_len 4, 8 frames
    phases = frame_phases([10, 11, 12, 13, 14], starts, 4, 8)
    np.testing.assert_array_equal(phases, [10, 10, 10, 11, 12, 13, 14, 14])


class _Man:
    scenario_id = "x"
    test_slice = slice(2, 8)
    labels = np.array([0, 0, 0, 1, 1, 0, 0, 0])

    def family_labels(self):
        return np.array(["", "", "", "logic", "logic", "", "", ""], dtype=object)


class _Series:
    recon = np.array([0.1, 0.9, 0.8, 0.1, 0.2, 0.1])
    period = np.array([0.0, 0.4, 0.4, 0.0, 0.0, 0.0])


def test_report_json_round_trip_and_files(tmp_path):
    from pmvad.scoring import EvalConfig

    rep = build_report(_Series, _Man(), EvalConfig())
    assert rep.auc == 1.0 and rep.auc_per_family == {"logic": 1.0}
    assert rep.frame_index == [2, 3, 4, 5, 6, 7]
    again = AnomalyReport.from_json(rep.to_json())
    assert again == rep
    rep.write(tmp_path)
    header = (tmp_path / "scores.csv").read_text().splitlines()[0]
    assert header == "frame_index,recon_error,period_error,raw_score,norm_score,label"
    assert json.loads((tmp_path / "report.json").read_text())["auc"] == 1.0
    assert rep.subset_auc("logic", 0.0) == 1.0
