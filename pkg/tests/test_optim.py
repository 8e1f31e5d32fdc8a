import math

import numpy as np
import pytest
import torch

from mtplm import optim
from mtplm.optim import AdafactorState, ScheduleConfig, adafactor_update, learning_rate


def test_schedule_examples():
    assert all(learning_rate(s) == 1e-2 for s in (1, 2, 5000, 9999, 10_000))
    assert learning_rate(40_000) == 5e-3
    assert learning_rate(1_000_000) == 1e-3


def test_schedule_shape():
    cfg = ScheduleConfig()
    assert cfg.base_learning_rate == pytest.approx(1 / math.sqrt(cfg.warmup_steps))
    values = [learning_rate(s) for s in range(1, 50_000, 37)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert learning_rate(10_001) == pytest.approx(learning_rate(10_000), rel=1e-4)
    with pytest.raises(ValueError):
        learning_rate(0)


# -- straight-line reference recurrences -----------------------------------

def ref_unfactored(p, grads, lr_fn):
    v = [0.0] * len(p)
    p = list(p)
    for t, g in enumerate(grads, start=1):
        b2 = 1.0 - t ** -0.8
        v = [b2 * vi + (1.0 - b2) * (gi * gi + 1e-30) for vi, gi in zip(v, g)]
        u = [gi / math.sqrt(vi) for gi, vi in zip(g, v)]
        rms = math.sqrt(sum(x * x for x in u) / len(u))
        scale = max(1.0, rms / 1.0)
        p = [pi - lr_fn(t) * ui / scale for pi, ui in zip(p, u)]
    return p


def ref_factored(p, grads, lr_fn):
    rows, cols = len(p), len(p[0])
    r = [0.0] * rows
    c = [0.0] * cols
    p = [list(row) for row in p]
    for t, g in enumerate(grads, start=1):
        b2 = 1.0 - t ** -0.8
        g2 = [[g[i][j] * g[i][j] + 1e-30 for j in range(cols)] for i in range(rows)]
        r = [b2 * r[i] + (1.0 - b2) * (sum(g2[i]) / cols) for i in range(rows)]
        c = [b2 * c[j] + (1.0 - b2) * (sum(g2[i][j] for i in range(rows)) / rows) for j in range(cols)]
        rmean = sum(r) / rows
        u = [[g[i][j] / math.sqrt(r[i] * c[j] / rmean) for j in range(cols)] for i in range(rows)]
        rms = math.sqrt(sum(x * x for row in u for x in row) / (rows * cols))
        scale = max(1.0, rms)
        p = [[p[i][j] - lr_fn(t) * u[i][j] / scale for j in range(cols)] for i in range(rows)]
    return p


def run_impl(p0, grads, lr_fn):
    params = {"w": torch.tensor(p0, dtype=torch.float64)}
    state = AdafactorState.zeros_like(params)
    for t, g in enumerate(grads, start=1):
        params, state = adafactor_update(params, {"w": torch.tensor(g, dtype=torch.float64)}, state, lr_fn(t))
    return params["w"], state


def lr_fn(t):
    return learning_rate(t, ScheduleConfig(1e-2, 10))


def test_scalar_first_step():
    params = {"w": torch.tensor(1.0, dtype=torch.float64)}
    out, _ = adafactor_update(params, {"w": torch.tensor(0.1, dtype=torch.float64)},
                              AdafactorState.zeros_like(params), 1e-2)
    assert abs(out["w"].item() - ref_unfactored([1.0], [[0.1]], lambda t: 1e-2)[0]) <= 1e-12


@pytest.mark.parametrize("shape", [(), (7,), (4, 6)])
def test_matches_reference_100_steps(shape):
    rng = np.random.default_rng(sum(shape) + 1)
    p0 = rng.normal(size=shape)
    grads = [rng.normal(size=shape) * rng.uniform(0.01, 3.0) for _ in range(100)]
    out, _ = run_impl(p0.tolist(), [g.tolist() for g in grads], lr_fn)
    if len(shape) == 2:
        ref = np.array(ref_factored(p0.tolist(), [g.tolist() for g in grads], lr_fn))
    else:
        ref = np.array(ref_unfactored(np.atleast_1d(p0).tolist(),
                                      [np.atleast_1d(g).tolist() for g in grads], lr_fn)).reshape(shape)
    assert np.max(np.abs(out.numpy() - ref)) <= 1e-12


def test_zero_grad_leaves_params_and_decays_slots():
    params = {"w": torch.randn(3, 4, dtype=torch.float64), "b": torch.randn(4, dtype=torch.float64)}
    state = AdafactorState.zeros_like(params)
    grads = {n: torch.randn_like(p) for n, p in params.items()}
    params, state = adafactor_update(params, grads, state, 1e-2)
    zeros = {n: torch.zeros_like(p) for n, p in params.items()}
    new, new_state = adafactor_update(params, zeros, state, 1e-2)
    for n in params:
        assert torch.equal(new[n], params[n])
    b2 = 1.0 - 2 ** -0.8
    torch.testing.assert_close(new_state.slots["b"]["v"], b2 * state.slots["b"]["v"] + (1 - b2) * 1e-30)
    torch.testing.assert_close(new_state.slots["w"]["row"], b2 * state.slots["w"]["row"] + (1 - b2) * 1e-30)


def test_deterministic_and_pure():
    params = {"w": torch.randn(3, 4, dtype=torch.float64)}
    grads = {"w": torch.randn(3, 4, dtype=torch.float64)}
    state = AdafactorState.zeros_like(params)
    snapshot = params["w"].clone()
    a = adafactor_update(params, grads, state, 1e-2)
    b = adafactor_update(params, grads, state, 1e-2)
    assert torch.equal(a[0]["w"], b[0]["w"]) and torch.equal(params["w"], snapshot)
    assert state.step == 0 and a[1].step == 1


def test_scale_covariant_direction_at_step_one():
    g = torch.randn(5, 3, dtype=torch.float64)
    params = {"w": torch.zeros(5, 3, dtype=torch.float64)}
    updates = []
    for c in (1e-3, 1.0, 1e4):
        new, _ = adafactor_update(params, {"w": c * g}, AdafactorState.zeros_like(params), 1.0)
        updates.append(-new["w"])
    for u in updates:
        assert torch.equal(torch.sign(u), torch.sign(g))
        assert u.pow(2).mean().sqrt().item() <= 1.0 + 1e-12
        torch.testing.assert_close(u, updates[0], rtol=1e-9, atol=0)


def test_factored_equals_unfactored_for_rank_one():
    a = torch.rand(4, dtype=torch.float64) + 0.1
    b = torch.rand(6, dtype=torch.float64) + 0.1
    row = torch.zeros(4, dtype=torch.float64)
    col = torch.zeros(6, dtype=torch.float64)
    full = torch.zeros(4, 6, dtype=torch.float64)
    for t, c in enumerate([1.0, 0.3, 2.0, 0.7], start=1):
        g2 = (c * torch.outer(a, b)) ** 2
        b2 = 1.0 - t ** -0.8
        row = b2 * row + (1 - b2) * g2.mean(-1)
        col = b2 * col + (1 - b2) * g2.mean(-2)
        full = b2 * full + (1 - b2) * g2
        torch.testing.assert_close(optim.factored_second_moment(row, col), full, rtol=1e-13, atol=0)


def test_slot_layout():
    params = {"m": torch.zeros(3, 5), "v": torch.zeros(5), "s": torch.zeros(())}
    state = AdafactorState.zeros_like(params)
    assert state.slots["m"]["row"].shape == (3,) and state.slots["m"]["col"].shape == (5,)
    assert set(state.slots["v"]) == {"v"} and set(state.slots["s"]) == {"v"}


def test_non_finite_gradient():
    params = {"w": torch.zeros(2)}
    with pytest.raises(optim.NonFiniteGradient):
        adafactor_update(params, {"w": torch.tensor([1.0, float("nan")])}, AdafactorState.zeros_like(params), 1e-2)
