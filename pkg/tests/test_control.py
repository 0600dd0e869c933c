import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glucoloop import _kernels as K
from glucoloop.control import (ControlConfig, Controller, _Transcription, hcl_step,
                               perfect_step, robust_mpc_step, stage_cost)
from glucoloop.scenarios import get_scenario
from glucoloop.uncertainty import REST_U


@pytest.fixture(scope="module")
def cfg(steady):
    return ControlConfig(basal=steady[1])


@pytest.fixture(scope="module")
def small_cfg(steady):
    # short horizons keep the directional checks quick
    return ControlConfig(Np=90, Nc=40, basal=steady[1])


def rest(n):
    return np.tile(REST_U, (n, 1))


def with_glucose(x0, params, bg):
    x = x0.copy()
    x[K.Q1] = bg * params.VG
    x[K.C] = bg
    return x


@pytest.mark.parametrize("bg,expected", [(7.8, 0.0), (6.8, 2.0), (8.8, 1.0)])
def test_stage_cost_values(bg, expected):
    assert stage_cost(bg, 7.8, 2.0) == pytest.approx(expected)


def test_stage_cost_vectorised_and_gamma_check():
    out = stage_cost(np.array([6.8, 8.8]), 7.8, 3.0)
    np.testing.assert_allclose(out, [3.0, 1.0])
    with pytest.raises(ValueError):
        stage_cost(7.0, 7.8, 0.5)


@pytest.mark.parametrize("kw", [dict(Nc=160), dict(Nc=95), dict(gamma=0.9), dict(beta=-1.0),
                                dict(insulin_min=5.0, insulin_max=1.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ControlConfig(**kw)


def test_robust_rest_returns_basal(params, steady, cfg):
    x0, basal = steady
    d = robust_mpc_step(x0, rest(cfg.Np), rest(cfg.Np), basal, cfg, params)
    assert d.command == pytest.approx(basal, rel=0.02)
    assert not d.fallback


def test_hcl_and_perfect_rest_return_basal(params, steady, cfg):
    x0, basal = steady
    assert hcl_step(x0, basal, cfg, params).command == pytest.approx(basal, rel=0.02)
    assert perfect_step(x0, rest(cfg.Np), basal, cfg, params).command == \
        pytest.approx(basal, rel=0.02)


def test_imminent_meal_raises_insulin(params, steady, small_cfg):
    x0, basal = steady
    tube = get_scenario("scenario1").build_tube(300)
    lo, hi = tube.minute_bounds(20, 20 + small_cfg.Np)
    d = robust_mpc_step(x0, lo, hi, basal, small_cfg, params)
    assert d.command > basal


def test_low_glucose_cuts_insulin(params, steady, small_cfg):
    x0, basal = steady
    x = with_glucose(x0, params, 5.0)
    d = robust_mpc_step(x, rest(small_cfg.Np), rest(small_cfg.Np), basal, small_cfg, params)
    assert d.command < basal


def test_hcl_high_glucose_raises_insulin(params, steady, small_cfg):
    x0, basal = steady
    x = with_glucose(x0, params, 12.0)
    assert hcl_step(x, basal, small_cfg, params).command > basal


def test_hcl_equals_robust_on_rest_tube(params, steady, small_cfg):
    x0, basal = steady
    x = with_glucose(x0, params, 9.5)
    r = robust_mpc_step(x, rest(small_cfg.Np), rest(small_cfg.Np), basal, small_cfg, params)
    h = hcl_step(x, basal, small_cfg, params)
    assert r.command == pytest.approx(h.command, abs=1e-4 * basal)


def test_hcl_ignores_tube(params, steady, small_cfg):
    x0, basal = steady
    x = with_glucose(x0, params, 9.0)
    c = Controller("hcl", small_cfg, params)
    a = c.step(0, x, basal, rest(small_cfg.Np), rest(small_cfg.Np)).command
    tube = get_scenario("scenario1").build_tube(300)
    lo, hi = tube.minute_bounds(0, small_cfg.Np)
    b = Controller("hcl", small_cfg, params).step(0, x, basal, lo, hi).command
    assert a == b


def test_huge_beta_holds_previous_command(params, steady):
    x0, basal = steady
    cfg = ControlConfig(Np=90, Nc=40, basal=basal, beta=1e6)
    x = with_glucose(x0, params, 10.0)
    prev = 1.3 * basal
    d = hcl_step(x, prev, cfg, params)
    assert d.command == pytest.approx(prev, abs=1e-2 * basal)


def test_no_drift_over_repeated_rest_steps(params, steady, small_cfg):
    x0, basal = steady
    c = Controller("robust", small_cfg, params)
    prev = basal
    for i in range(50):
        d = c.step(5 * i, x0, prev, rest(small_cfg.Np), rest(small_cfg.Np))
        assert d.command == pytest.approx(basal, rel=0.02)
        prev = d.command


def test_gamma_deepens_cut_when_low(params, steady):
    # one insulin knot over the whole horizon: BG predicted below target
    x0, basal = steady
    x = with_glucose(x0, params, 6.0)
    cuts = []
    for g in (1.0, 2.0, 4.0):
        cfg = ControlConfig(Np=60, Nc=60, control_knot_period=60, basal=basal, gamma=g)
        cuts.append(basal - hcl_step(x, basal, cfg, params).command)
    assert cuts[0] <= cuts[1] + 1e-6 <= cuts[2] + 2e-6


def test_transcription_holds_knots_and_pads_basal(params, steady, small_cfg):
    x0, basal = steady
    tr = _Transcription(x0, basal, small_cfg, params, rest(small_cfg.Np), rest(small_cfg.Np))
    v = np.arange(1.0, small_cfg.n_insulin_knots + 1)
    ins = tr.insulin_minutes(v)
    assert ins.shape == (small_cfg.Np,)
    np.testing.assert_array_equal(ins[:10], 1.0)
    np.testing.assert_array_equal(ins[small_cfg.Nc:], basal)
    assert tr.u_blocks.shape[0] == 0


@settings(max_examples=15)
@given(bg=st.floats(3.0, 20.0), prev=st.floats(0.0, 250.0))
def test_commands_within_bounds(params, steady, bg, prev):
    x0, basal = steady
    cfg = ControlConfig(Np=60, Nc=20, basal=basal, insulin_max=120.0)
    x = with_glucose(x0, params, bg)
    d = hcl_step(x, prev, cfg, params)
    assert cfg.insulin_min <= d.command <= cfg.insulin_max


def test_invalid_state_rejected(params, steady, cfg):
    x0, basal = steady
    bad = x0.copy()
    bad[0] = np.nan
    with pytest.raises(ValueError):
        hcl_step(bad, basal, cfg, params)
    with pytest.raises(ValueError):
        hcl_step(x0, basal, ControlConfig(), params)   # basal unset


def test_unknown_controller_kind(params, cfg):
    with pytest.raises(ValueError):
        Controller("pid", cfg, params)


def _stencil(fun, z, i, h):
    e = np.zeros_like(z)
    e[i] = h
    return (fun(z - 2 * e) - 8 * fun(z - e) + 8 * fun(z + e) - fun(z + 2 * e)) / (12 * h)


def test_objective_gradients_match_five_point_stencil(params, steady, small_cfg, rng):
    x0, basal = steady
    lo, hi = get_scenario("scenario1").build_tube(300).minute_bounds(20, 20 + small_cfg.Np)
    tr = _Transcription(x0, basal, small_cfg, params, lo, hi)
    worst = 0.0
    for _ in range(20):
        v = basal * rng.uniform(0.5, 3.0, small_cfg.n_insulin_knots)
        w = rng.uniform(tr.w_lo, tr.w_hi)
        _, gv = tr.grad_v(v, w)
        _, gw = tr.grad_w(v, w)
        for g, z, fun in ((gv, v, lambda a: tr.objective(a, w)),
                          (gw, w, lambda a: tr.objective(v, a))):
            ref = np.array([_stencil(fun, z, i, 1e-3 * max(abs(z[i]), 1.0))
                            for i in range(z.size)])
            worst = max(worst, float(np.max(np.abs(g - ref)) / max(np.max(np.abs(ref)), 1e-12)))
    assert worst <= 1e-3
