import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pmvad.errors import ContractError
from pmvad.memory import (PeriodicMemory, address, boost, dump_trace_csv, map_phase, memory_backward,
                          memory_forward, normalize, retrieve)
from pmvad.nnkernel import Layer, grad_check

finite = st.floats(-50, 50, allow_nan=False)


# address -------------------------------------------------------------------

def test_address_identity():
    np.testing.assert_array_equal(address(np.eye(2), np.eye(2)), np.eye(2))


def test_address_hand_dot_products():
    np.testing.assert_array_equal(address(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0], [5.0, 6.0]])),
                                  [[11.0, 17.0]])


def test_address_zero_input():
    assert not address(np.zeros((3, 4)), np.ones((5, 4))).any()


def test_address_channel_mismatch():
    with pytest.raises(ContractError):
        address(np.zeros((2, 3)), np.zeros((4, 2)))


# map_phase -------------------------------------------------------------------

@pytest.mark.parametrize("t_p,t_max,m,expected", [(0, 20, 200, 0), (199, 200, 2000, 1990), (7, 20, 20, 7)])
def test_map_phase_examples(t_p, t_max, m, expected):
    assert map_phase(t_p, t_max, m) == expected


@given(st.integers(2, 300), st.integers(1, 3000), st.data())
def test_map_phase_floor_formula_and_range(t_max, m, data):
    t_p = data.draw(st.integers(0, t_max - 1))
    slot = map_phase(t_p, t_max, m)
    assert slot == (t_p * m) // t_max
    assert 0 <= slot < m


@pytest.mark.parametrize("t_p", [-1, 20])
def test_map_phase_out_of_range(t_p):
    with pytest.raises(ContractError):
        map_phase(t_p, 20, 200)


# boost ---------------------------------------------------------------------

def test_boost_neutral_factor():
    w = np.array([[0.2, -0.3], [1.0, 4.0]])
    np.testing.assert_array_equal(boost(w, 1, 1.0), w)


def test_boost_single_multiplication():
    np.testing.assert_allclose(boost(np.array([[0.2, 0.3]]), 1, 1.5), [[0.2, 0.45]], rtol=0, atol=1e-15)


def test_boost_keeps_sign_of_negative_entries():
    out = boost(np.array([[-0.4, 1.0]]), 0, 1.5)
    assert out[0, 0] == pytest.approx(-0.6)


def test_boost_rejects_bad_column_and_factor():
    with pytest.raises(ContractError):
        boost(np.zeros((2, 3)), 3, 1.2)
    with pytest.raises(ContractError):
        boost(np.zeros((2, 3)), 0, 0.9)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)), elements=finite), st.data())
def test_boost_locality(w, data):
    slot = data.draw(st.integers(0, w.shape[1] - 1))
    factor = data.draw(st.floats(1.0, 2.0))
    out = boost(w, slot, factor)
    others = np.delete(np.arange(w.shape[1]), slot)
    np.testing.assert_array_equal(out[:, others], w[:, others])
    np.testing.assert_array_equal(out[:, slot], w[:, slot] * factor)


def test_boost_batched_per_item_columns():
    w = np.ones((2, 3, 4))
    out = boost(w, np.array([1, 3]), np.array([1.5, 2.0]))
    assert out[0, :, 1].tolist() == [1.5] * 3 and out[1, :, 3].tolist() == [2.0] * 3
    assert out.sum() == pytest.approx(24 - 6 + 4.5 + 6)


# normalize -------------------------------------------------------------------

def test_normalize_constant_column_is_uniform():
    np.testing.assert_allclose(normalize(np.full((4, 3), 2.5)), 0.25)


def test_normalize_hand_softmax():
    np.testing.assert_allclose(normalize(np.array([[0.0], [np.log(3.0)]])), [[0.25], [0.75]], atol=1e-15)


def test_normalize_row_mode_sums_over_slots(rng):
    w_hat = normalize(rng.standard_normal((3, 7)), axis="row")
    np.testing.assert_allclose(w_hat.sum(axis=1), 1.0, atol=1e-12)


def test_normalize_column_law_on_1000_draws():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        t, m = rng.integers(1, 17), rng.integers(1, 65)
        w = rng.normal(0, rng.uniform(0.1, 20), (t, m))
        assert np.abs(normalize(w).sum(axis=0) - 1).max() <= 1e-9


def test_normalize_unknown_axis():
    with pytest.raises(ContractError):
        normalize(np.zeros((2, 2)), axis="diagonal")


@given(arrays(np.float64, st.tuples(st.integers(2, 6), st.integers(1, 6)),
              elements=st.integers(-200, 200).map(lambda v: v / 8), unique=True), st.data(), st.floats(1.01, 2.0))
def test_boost_sharpens_the_column_argmax(w, data, factor):
    slot = data.draw(st.integers(0, w.shape[1] - 1))
    col = w[:, slot]
    plain = normalize(w)
    boosted = normalize(boost(w, slot, factor))
    top = int(np.argmax(col))
    assert int(np.argmax(boosted[:, slot])) == top
    assert boosted[top, slot] >= plain[top, slot] - 1e-15


# retrieve ------------------------------------------------------------------

def test_retrieve_one_hot_selects_slot(rng):
    mem = rng.standard_normal((5, 3))
    w_hat = np.zeros((2, 5))
    w_hat[:, 3] = 1
    np.testing.assert_array_equal(retrieve(w_hat, mem), mem[[3, 3]])


def test_retrieve_weighted_average():
    np.testing.assert_array_equal(retrieve(np.array([[0.5, 0.5]]), np.array([[1.0, 1.0], [3.0, 3.0]])), [[2.0, 2.0]])


def test_retrieve_zero_weights(rng):
    assert not retrieve(np.zeros((2, 4)), rng.standard_normal((4, 3))).any()


def test_retrieve_mismatch():
    with pytest.raises(ContractError):
        retrieve(np.zeros((2, 4)), np.zeros((3, 2)))


# composition ---------------------------------------------------------------

def _memory(m, c, t_max=8, seed=0, **kw):
    return PeriodicMemory(m, c, t_max, np.random.default_rng(seed), np.float64, **kw)


def test_degenerate_single_row_single_slot_returns_bank(rng):
    mem = _memory(1, 3)
    p_s = np.full(8, 1 / 8)
    out, trace = memory_forward(rng.standard_normal((1, 3)), mem, 2, p_s)
    np.testing.assert_array_equal(trace.w_hat, [[1.0]])
    np.testing.assert_array_equal(out, mem.bank.value)


def test_forward_trace_is_consistent(rng):
    mem = _memory(16, 4)
    p_s = rng.dirichlet(np.ones(8))
    f_in = rng.standard_normal((3, 4))
    out, tr = memory_forward(f_in, mem, 5, p_s)
    assert tr.t_p == 5 and tr.slot == map_phase(5, 8, 16) == 10
    assert tr.boost_factor == pytest.approx(1 + p_s[5])
    np.testing.assert_allclose(tr.w, f_in @ mem.bank.value.T)
    np.testing.assert_allclose(tr.w_boosted, boost(tr.w, 10, 1 + p_s[5]))
    np.testing.assert_allclose(tr.w_hat.sum(axis=0), 1.0)
    np.testing.assert_allclose(out, tr.w_hat @ mem.bank.value)


class _Fixed(Layer):
    """Memory with phase inputs pinned so only (f_in, bank) vary."""

    def __init__(self, mem, t_p, p_s):
        self.mem, self.t_p, self.p_s = mem, t_p, p_s

    def forward(self, x):
        return self.mem.forward(x, self.t_p, self.p_s)

    def backward(self, dy):
        return self.mem.backward(dy)


@pytest.mark.parametrize("axis", ["column", "row"])
def test_memory_backward_matches_finite_differences(axis):
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        mem = _memory(5, 4, seed=seed, axis=axis)
        frag = _Fixed(mem, np.array([3, 6]), rng.dirichlet(np.ones(8), size=2))
        worst = max(worst, grad_check(frag, rng.standard_normal((2, 3, 4)), include_input=True))
    assert worst < 1e-4


def test_memory_backward_wrapper_returns_both_grads(rng):
    mem = _memory(5, 4)
    f_in = rng.standard_normal((3, 4))
    out, _ = memory_forward(f_in, mem, 1, rng.dirichlet(np.ones(8)))
    d_in, d_bank = memory_backward(mem, np.ones_like(out))
    assert d_in.shape == f_in.shape and d_bank.shape == mem.bank.value.shape


def test_bank_init_bounds():
    mem = _memory(50, 16)
    assert np.abs(mem.bank.value).max() <= 1 / 4


def test_memory_rejects_bad_shapes():
    with pytest.raises(ContractError):
        _memory(0, 4)
    with pytest.raises(ContractError):
        _memory(4, 4).forward(np.zeros((3, 4)))


def test_dump_trace_csv(tmp_path, rng):
    mem = _memory(6, 4)
    mem.forward(rng.standard_normal((2, 3, 4)), np.array([1, 7]), rng.dirichlet(np.ones(8), 2))
    path = tmp_path / "trace.csv"
    dump_trace_csv([mem.trace], path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 6
    assert {r["slot"] for r in rows} == {str(map_phase(1, 8, 6)), str(map_phase(7, 8, 6))}
