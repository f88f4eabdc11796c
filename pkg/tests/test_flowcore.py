import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from exprflow.errors import DomainError, NumericError, ShapeError
from exprflow.flowcore import (
    GuidanceConfig,
    TimeDistribution,
    cfg_combine,
    euler_sample,
    interpolate,
    make_flow_sample,
    one_step_estimate,
    rf_loss,
)


def _pair(seed, shape=(3, 4, 4, 3), dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=dtype), torch.randn(shape, generator=g, dtype=dtype)


def test_interpolate_endpoints_bit_exact():
    x0, x1 = _pair(0, dtype=torch.float32)
    assert torch.equal(interpolate(x0, x1, 0.0), x0)
    assert torch.equal(interpolate(x0, x1, 1.0), x1)


def test_interpolate_linear_example():
    out = interpolate(torch.zeros(2, 3), torch.full((2, 3), 2.0), 0.25)
    assert torch.equal(out, torch.full((2, 3), 0.5))


def test_interpolate_errors():
    with pytest.raises(ShapeError):
        interpolate(torch.zeros(2, 3), torch.zeros(3, 2), 0.5)
    with pytest.raises(DomainError):
        interpolate(torch.zeros(2), torch.zeros(2), 1.5)


def test_interpolate_per_sample_t():
    x0, x1 = _pair(1)
    t = torch.tensor([0.1, 0.5, 0.9], dtype=torch.float64)
    out = interpolate(x0, x1, t)
    for i in range(3):
        assert torch.allclose(out[i], (1 - t[i]) * x0[i] + t[i] * x1[i], atol=1e-15)


@pytest.mark.parametrize("t", [0.1, 0.37, 0.5, 0.8])
def test_interpolate_time_derivative_is_velocity(t):
    x0, x1 = _pair(2)
    h = 1e-5
    fd = (interpolate(x0, x1, t + h) - interpolate(x0, x1, t - h)) / (2 * h)
    ref = x1 - x0
    assert torch.max(torch.abs(fd - ref) / torch.abs(ref).clamp_min(1e-3)) < 1e-6


def test_rf_loss_examples():
    x0, x1 = _pair(3)
    assert rf_loss(x1 - x0, x0, x1).item() == 0.0
    assert rf_loss(torch.tensor(0.0), torch.tensor(0.0), torch.tensor(1.0)).item() == 1.0
    with pytest.raises(ShapeError):
        rf_loss(torch.zeros(2, 2), torch.zeros(2, 2), torch.zeros(2))


def test_rf_loss_matches_scalar_loop():
    rng = np.random.default_rng(4)
    v, a, b = (rng.standard_normal((2, 2)) for _ in range(3))
    total = 0.0
    for i in range(2):
        for j in range(2):
            total += (v[i][j] - (b[i][j] - a[i][j])) ** 2
    got = rf_loss(*(torch.from_numpy(x) for x in (v, a, b))).item()
    assert abs(got - total / 4) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_rf_loss_nonnegative_zero_iff_true_velocity(seed, shift):
    x0, x1 = _pair(seed, (2, 3))
    v = x1 - x0 + shift
    loss = rf_loss(v, x0, x1).item()
    assert loss >= 0.0
    assert (loss == 0.0) == torch.equal(v, x1 - x0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.999))
def test_one_step_recovers_target(seed, t):
    x0, x1 = _pair(seed, (2, 5))
    xt = interpolate(x0, x1, t)
    assert torch.allclose(one_step_estimate(xt, x1 - x0, t), x1, atol=1e-12, rtol=0)


def test_one_step_dyadic_exact():
    x0 = torch.tensor([0.0, 1.0, -2.0])
    x1 = torch.tensor([1.0, 0.5, 4.0])
    for t in (0.0, 0.25, 0.5, 0.75):
        assert torch.equal(one_step_estimate(interpolate(x0, x1, t), x1 - x0, t), x1)


def test_one_step_examples():
    xt = torch.tensor([0.5])
    assert one_step_estimate(xt, torch.tensor([2.0]), 0.75).item() == 1.0
    assert torch.equal(one_step_estimate(xt, torch.tensor([7.0]), 1.0), xt)
    assert one_step_estimate(xt, torch.tensor([2.0]), 0.75, form="uncorrected").item() == 2.5
    with pytest.raises(NumericError):
        one_step_estimate(torch.tensor([float("nan")]), torch.tensor([1.0]), 0.5)
    with pytest.raises(NumericError):
        one_step_estimate(torch.tensor([0.0]), torch.tensor([float("nan")]), 0.5)
    with pytest.raises(ShapeError):
        one_step_estimate(torch.zeros(2), torch.zeros(3), 0.5)


def test_cfg_combine_identities():
    vu, vc = _pair(5)
    assert torch.equal(cfg_combine(vu, vc, 1.0), vc)
    assert torch.equal(cfg_combine(vu, vc, 0.0), vu)
    assert cfg_combine(torch.tensor(0.0), torch.tensor(1.0), 5.0).item() == 5.0
    with pytest.raises(ShapeError):
        cfg_combine(torch.zeros(2), torch.zeros(3), 2.0)


def test_guidance_defaults_and_validation():
    g = GuidanceConfig()
    assert (g.scale, g.steps) == (5.0, 50)
    with pytest.raises(DomainError):
        GuidanceConfig(steps=0)
    with pytest.raises(DomainError):
        GuidanceConfig(scale=-1.0)


@pytest.mark.parametrize("steps", [1, 3, 50])
def test_euler_constant_field(steps):
    x0 = torch.tensor([0.3, -1.0], dtype=torch.float64)
    c = torch.tensor([2.0, 0.5], dtype=torch.float64)
    out = euler_sample(lambda x, t, cond: c.expand_as(x), x0, GuidanceConfig(1.0, steps))
    assert torch.allclose(out, x0 + c, atol=1e-12, rtol=0)


def test_euler_straight_line_field():
    x0, x1 = _pair(6, (4, 3))
    out = euler_sample(lambda x, t, cond: x1 - x0, x0, GuidanceConfig(1.0, 50))
    assert torch.max(torch.abs(out - x1)) < 1e-6


def test_euler_linear_decay_matches_analytic():
    out = euler_sample(lambda x, t, cond: -x, torch.tensor([1.0], dtype=torch.float64), GuidanceConfig(1.0, 1000))
    assert abs(out.item() - math.exp(-1)) < 1e-3
    # explicit Euler gives exactly (1 - h)^N for this field
    assert abs(out.item() - (1 - 1e-3) ** 1000) < 1e-12


@pytest.mark.parametrize("scale,per_step", [(1.0, 1), (0.0, 2), (5.0, 2)])
def test_euler_cost_contract(scale, per_step):
    calls = {"cond": 0, "uncond": 0}

    def f(x, t, cond):
        calls["uncond" if cond is None else "cond"] += 1
        return torch.zeros_like(x)

    euler_sample(f, torch.zeros(2), GuidanceConfig(scale, 7), conditions="c")
    assert calls["cond"] + calls["uncond"] == 7 * per_step
    assert calls["uncond"] == (0 if scale == 1.0 else 7)


def test_euler_guided_combination():
    # v_c = 1, v_u = 0 with scale s integrates to x0 + s
    f = lambda x, t, cond: torch.zeros_like(x) if cond is None else torch.ones_like(x)
    out = euler_sample(f, torch.zeros(3, dtype=torch.float64), GuidanceConfig(3.0, 4), conditions=True)
    assert torch.allclose(out, torch.full((3,), 3.0, dtype=torch.float64))


def test_euler_single_step_equals_one_step_estimate():
    x0, x1 = _pair(7, (2, 3))
    f = lambda x, t, cond: torch.sin(x) + t
    out = euler_sample(f, x0, GuidanceConfig(1.0, 1))
    assert torch.equal(out, one_step_estimate(x0, f(x0, 0.0, None), 0.0))


def test_euler_wrong_shape():
    with pytest.raises(ShapeError):
        euler_sample(lambda x, t, c: torch.zeros(5), torch.zeros(2), GuidanceConfig(1.0, 2))
    with pytest.raises(ShapeError):
        euler_sample(lambda x, t, c: torch.zeros(5) if c is None else torch.zeros(2), torch.zeros(2), GuidanceConfig(2.0, 2))


@pytest.mark.parametrize("kind", ["uniform", "logit_normal"])
def test_time_distribution_open_interval(kind):
    t = TimeDistribution(kind, mean=0.0, std=4.0).sample(20_000, torch.Generator().manual_seed(0))
    assert t.shape == (20_000,)
    assert torch.all(t > 0) and torch.all(t < 1)
    with pytest.raises(DomainError):
        TimeDistribution("beta").sample(3)


def test_flow_sample_invariant():
    x1 = torch.randn(4, 2, dtype=torch.float64)
    t = torch.tensor([0.0, 0.2, 0.6, 1.0], dtype=torch.float64)
    s = make_flow_sample(x1, t, torch.Generator().manual_seed(1))
    assert s.x0.shape == s.x1.shape == s.xt.shape
    assert torch.allclose(s.xt, (1 - t[:, None]) * s.x0 + t[:, None] * s.x1, atol=1e-15)
