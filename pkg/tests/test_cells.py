import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgrnlab.cells import (
    backward_window,
    cwlstm_forward,
    forward_batch,
    forward_window,
    gru_step,
    loss_and_grad,
    lstm_step,
    mgrn_step,
)
from mgrnlab.params import DimPlan, GroupingScheme, ModelSpec, init_params, zeros
from mgrnlab.tensor import RngStream, ShapeError

from gradcheck import check_gradients, random_instance
from reference import final_state, predict

ARCHS = ("gru", "lstm", "mgrn", "cwlstm")


def gru_params(M, N, value=0.0):
    p = {}
    for g in "rzh":
        p[f"W_{g}"] = np.full((N, M), value)
        p[f"U_{g}"] = np.zeros((N, N))
        p[f"b_{g}"] = np.zeros(N)
    return p


def lstm_params(M, N, value=0.0):
    p = {}
    for g in "ifoc":
        p[f"W_{g}"] = np.full((N, M), value)
        p[f"U_{g}"] = np.zeros((N, N))
        p[f"b_{g}"] = np.zeros(N)
    return p


# --------------------------------------------------------------------------- steps

def test_gru_step_examples():
    assert gru_step(gru_params(1, 1), [0.3], [1.0]).tolist() == [0.5]
    p = gru_params(1, 1)
    p["b_z"][:] = -1e3
    assert gru_step(p, [5.0], [0.7]).tolist() == [0.7]
    h = gru_step(gru_params(1, 1, 1.0), [1.0], [0.0])
    # z = sigma(1) = 0.731059, candidate tanh(1) = 0.761594
    assert h[0] == pytest.approx(0.5567699411459397, rel=1e-14)


def test_lstm_step_examples():
    h, c = lstm_step(lstm_params(1, 1), [0.4], [0.0], [0.0])
    assert h.tolist() == [0.0] and c.tolist() == [0.0]
    p = lstm_params(1, 1)
    p["b_f"][:] = 1e3
    _, c = lstm_step(p, [0.0], [0.0], [2.0])
    # i = 0.5 and candidate tanh(0) = 0 add nothing
    assert c.tolist() == [2.0]
    # all W = 1: i = f = o = sigma(1), candidate tanh(1)
    h, c = lstm_step(lstm_params(1, 1, 1.0), [1.0], [0.0], [0.0])
    assert c[0] == pytest.approx(0.5567699411459397, rel=1e-14)
    assert h[0] == pytest.approx(0.36960635293570576, rel=1e-14)


def test_steps_check_shapes():
    with pytest.raises(ShapeError):
        gru_step(gru_params(2, 3), [1.0], np.zeros(3))
    with pytest.raises(ShapeError):
        lstm_step(lstm_params(2, 3), [1.0, 2.0], np.zeros(3), np.zeros(2))


def test_steps_accept_batches(rng):
    p = {k: rng.normal(size=v.shape) for k, v in gru_params(3, 2).items()}
    X, H = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    batch = gru_step(p, X, H)
    for i in range(4):
        np.testing.assert_allclose(batch[i], gru_step(p, X[i], H[i]), rtol=1e-14)


def _mgrn_ones():
    g = GroupingScheme(((0,), (1,)))
    spec = ModelSpec.mgrn(g, DimPlan(1, 1))
    p = zeros(spec)
    for name, arr in p.items():
        if arr.ndim == 2:
            arr[...] = 1.0
    return spec, p


def test_mgrn_step_hand_example():
    spec, p = _mgrn_ones()
    hm, H, cands = mgrn_step(spec, p, np.array([1.0, 1.0]), [np.zeros(1), np.zeros(1)], np.zeros(1))
    for c in cands:
        assert c[0] == pytest.approx(math.tanh(1), rel=1e-14)
    # tanh(2 tanh 1) = 0.9092517, sigma(2) = 0.8807971
    assert H[0] == pytest.approx(0.800866217603005, rel=1e-12)


def test_mgrn_step_closed_update_gate_freezes_joint(rng):
    spec = ModelSpec.mgrn(GroupingScheme(((0, 2), (1,))), DimPlan(2, 2))
    p, _ = init_params(spec, RngStream(3))
    p["mgrn.joint.b_z"] = -1e3
    H0 = rng.normal(size=4)
    _, H, _ = mgrn_step(spec, p, rng.normal(size=3), [rng.normal(size=2)] * 2, H0)
    np.testing.assert_array_equal(H, H0)


def test_mgrn_group_locality(rng):
    spec = ModelSpec.mgrn(GroupingScheme(((0, 3), (1,), (2, 4))), DimPlan(2, 2))
    p, _ = init_params(spec, RngStream(4))
    x = rng.normal(size=5)
    prev = [rng.normal(size=2) for _ in range(3)]
    a, _, _ = mgrn_step(spec, p, x, prev, np.zeros(4))
    x2 = x.copy()
    x2[[0, 3]] += 1.0
    b, _, _ = mgrn_step(spec, p, x2, prev, np.zeros(4))
    assert not np.array_equal(a[0], b[0])
    for k in (1, 2):
        assert a[k].tobytes() == b[k].tobytes()


def test_mgrn_marginals_equal_standalone_gru(rng):
    groups = ((0, 3), (1, 2, 4), (5,))
    spec = ModelSpec.mgrn(GroupingScheme(groups), DimPlan(3, 2))
    p, _ = init_params(spec, RngStream(8))
    x = rng.normal(size=6)
    prev = [rng.normal(size=3) for _ in groups]
    hm, _, _ = mgrn_step(spec, p, x, prev, np.zeros(6))
    for k, g in enumerate(groups):
        alone = gru_step(p.block(f"mgrn.group{k}"), x[list(g)], prev[k])
        np.testing.assert_allclose(hm[k], alone, rtol=0, atol=1e-15)


def test_mgrn_joint_uses_candidates_not_states(rng):
    spec = ModelSpec.mgrn(GroupingScheme(((0,), (1,))), DimPlan(2, 1))
    p, _ = init_params(spec, RngStream(2))
    x = rng.normal(size=2)
    prev = [rng.normal(size=2) for _ in range(2)]
    hm, H, cands = mgrn_step(spec, p, x, prev, np.zeros(2))
    pre = p["mgrn.joint.b_c"] + sum(p[f"mgrn.joint.group{k}.U_c"] @ cands[k] for k in range(2))
    z = 1 / (1 + np.exp(-(p["mgrn.joint.W_z"] @ x + p["mgrn.joint.b_z"])))
    np.testing.assert_allclose(H, z * np.tanh(pre), rtol=1e-14)
    assert not np.allclose(hm[0], cands[0])


# --------------------------------------------------------------------------- windows

def test_cwlstm_zero_params_give_zero_state():
    spec = ModelSpec.cwlstm(GroupingScheme(((0, 1), (2,))), DimPlan(2, 2))
    out = cwlstm_forward(spec, zeros(spec), np.ones((5, 3)))
    assert out.tolist() == [0.0] * 4


def test_cwlstm_single_step_fwd_equals_bwd(rng):
    spec = ModelSpec.cwlstm(GroupingScheme(((0, 1), (2,))), DimPlan(2, 2), lookback=1)
    p, _ = init_params(spec, RngStream(1))
    for k in range(2):
        for name, arr in p.block(f"cwlstm.group{k}.fwd").items():
            p[f"cwlstm.group{k}.bwd.{name}"] = arr
    x = rng.normal(size=(1, 3))
    direct = []
    for k, g in enumerate(((0, 1), (2,))):
        for d in ("fwd", "bwd"):
            h, _ = lstm_step(p.block(f"cwlstm.group{k}.{d}"), x[0, list(g)], np.zeros(2), np.zeros(2))
            direct.append(h)
    assert direct[0].tobytes() == direct[1].tobytes()
    assert direct[2].tobytes() == direct[3].tobytes()
    np.testing.assert_allclose(cwlstm_forward(spec, p, x), final_state(spec, p, x), rtol=1e-13)


@pytest.mark.parametrize("arch", ARCHS)
def test_forward_matches_unrolled_reference(arch, rng):
    for _ in range(5):
        spec, p, window, _ = random_instance(arch, rng)
        ref = predict(spec, p, window)
        assert forward_window(spec, p, window) == pytest.approx(ref, rel=1e-12, abs=1e-13)


def test_cwlstm_small_reference_case(rng):
    spec = ModelSpec.cwlstm(GroupingScheme(((0, 2), (1, 3))), DimPlan(2, 1), lookback=3)
    p, _ = init_params(spec, RngStream(21))
    p.flat[:] += 0.2 * rng.normal(size=p.size)
    window = rng.normal(size=(3, 4))
    np.testing.assert_allclose(cwlstm_forward(spec, p, window), final_state(spec, p, window), rtol=1e-12)


@pytest.mark.parametrize("arch", ARCHS)
def test_forward_batch_rows_match_single_windows(arch, rng):
    spec, p, _, _ = random_instance(arch, rng)
    X = rng.normal(size=(6, spec.lookback, spec.n_inputs))
    batch = forward_batch(spec, p, X)
    for i in range(6):
        assert batch[i] == pytest.approx(forward_window(spec, p, X[i]), rel=1e-13, abs=1e-14)
    assert forward_batch(spec, p, X).tobytes() == batch.tobytes()


@pytest.mark.parametrize("arch", ARCHS)
def test_zero_head_predicts_bias(arch, rng):
    spec, p, window, _ = random_instance(arch, rng)
    p["head.w"] = 0.0
    p["head.b"] = [3.25]
    assert forward_window(spec, p, window) == 3.25


def test_gru_single_step_window_reduces_to_step(rng):
    spec = ModelSpec.gru(3, 4, lookback=1)
    p, _ = init_params(spec, RngStream(9))
    p["head.b"] = [0.1]
    x = rng.normal(size=(1, 3))
    h = gru_step(p.block("gru"), x[0], np.zeros(4))
    assert forward_window(spec, p, x) == pytest.approx(p["head.w"][0] @ h + 0.1, rel=1e-14)


def test_window_shape_errors():
    spec = ModelSpec.gru(3, 2)
    p = zeros(spec)
    with pytest.raises(ShapeError):
        forward_window(spec, p, np.zeros((4, 3)))
    with pytest.raises(ShapeError):
        forward_window(spec, p, np.zeros((5, 2)))
    with pytest.raises(ShapeError):
        loss_and_grad(spec, p, np.zeros((2, 5, 3)), [1.0])


# --------------------------------------------------------------------------- gradients

@pytest.mark.parametrize("arch", ARCHS)
def test_gradients_match_finite_differences(arch, rng):
    for _ in range(3):
        n, failures = check_gradients(*random_instance(arch, rng))
        assert n > 0 and failures == []


@pytest.mark.parametrize("arch", ARCHS)
def test_backward_examples(arch, rng):
    spec, p, window, _ = random_instance(arch, rng)
    pred = forward_window(spec, p, window)
    g = backward_window(spec, p, window, pred)
    assert not g.flat.any()
    g = backward_window(spec, p, window, pred - 1.5)
    assert g["head.b"][0] == pytest.approx(3.0, rel=1e-12)


def test_batch_gradient_is_mean_of_window_gradients(rng):
    spec, p, _, _ = random_instance("mgrn", rng)
    X = rng.normal(size=(4, spec.lookback, spec.n_inputs))
    y = rng.normal(size=4)
    loss, g = loss_and_grad(spec, p, X, y)
    per = sum(backward_window(spec, p, X[i], y[i]).flat for i in range(4)) / 4
    np.testing.assert_allclose(g.flat, per, rtol=1e-10, atol=1e-14)
    assert loss == pytest.approx(np.mean((forward_batch(spec, p, X) - y) ** 2), rel=1e-13)


# --------------------------------------------------------------------------- invariants

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 20))
def test_gru_state_is_convex_combination_and_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    p = {k: rng.normal(size=v.shape) for k, v in gru_params(3, 4).items()}
    h = np.zeros(4)
    for _ in range(6):
        x = scale * rng.normal(size=3)
        r = 1 / (1 + np.exp(-(p["W_r"] @ x + p["U_r"] @ h + p["b_r"])))
        cand = np.tanh(p["W_h"] @ x + r * (p["U_h"] @ h) + p["b_h"])
        new = gru_step(p, x, h)
        lo, hi = np.minimum(h, cand), np.maximum(h, cand)
        assert np.all((new >= lo - 1e-15) & (new <= hi + 1e-15))
        # tanh saturates to exactly 1.0 in float64 for large arguments
        assert np.all(np.abs(new) <= 1)
        h = new


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 20))
def test_mgrn_states_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    spec = ModelSpec.mgrn(GroupingScheme(((0, 1), (2,), (3,))), DimPlan(2, 2))
    p, _ = init_params(spec, RngStream(seed))
    p.flat[:] += rng.normal(size=p.size)
    hm, H = [np.zeros(2)] * 3, np.zeros(4)
    for _ in range(6):
        prevH = H
        hm, H, _ = mgrn_step(spec, p, scale * rng.normal(size=4), hm, H)
        assert all(np.all(np.abs(h) <= 1) for h in hm)
        assert np.all(np.abs(H) <= 1) and np.all(np.abs(H - prevH) <= 2)
