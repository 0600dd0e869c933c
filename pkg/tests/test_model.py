import math
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import meal_insulin_exercise_bg

from glucoloop import _kernels as K
from glucoloop.errors import ConfigError, IntegrationError, NumericInputError, SolverError
from glucoloop.model import (MGDL_PER_MMOLL, PLANT_SUBSTEP_MIN, REST_INPUT, ClampStats, PatientParams,
                             check_physiologic_feasibility, default_params,
                             dump_patient_params, find_steady_state, glucose, integrate_step,
                             load_patient_params, measure, ode_rhs, simulate, steady_glucose)

BASAL_75KG = 16.014609643825903   # mU/min, verified by open-loop settling below


def test_rest_steady_state_is_equilibrium(params, steady):
    x0, basal = steady
    assert np.max(np.abs(ode_rhs(x0, basal, REST_INPUT, params))) <= 1e-8


def test_steady_state_hits_target_exactly(params, steady):
    x0, _ = steady
    assert glucose(x0, params) == pytest.approx(7.8, abs=1e-12)


def test_steady_state_runtime(params):
    t0 = time.perf_counter()
    find_steady_state(7.8, params)
    assert time.perf_counter() - t0 < 1.0


def test_basal_golden_value(steady):
    assert steady[1] == pytest.approx(BASAL_75KG, rel=1e-9)


def test_basal_settles_open_loop(params, steady):
    x0, basal = steady
    start = x0.copy()
    start[K.Q1] *= 1.3
    start[K.Q3] *= 0.8
    n = 20_000   # the peripheral glucose mode is slow
    traj = simulate(start, np.full(n, basal), np.tile([0.0, 0.0, 8.0], (n, 1)), params)
    assert glucose(traj[-1], params) == pytest.approx(7.8, abs=1e-4)


def test_gut_input_only_enters_first_compartment(params, steady):
    x0, basal = steady
    d0 = ode_rhs(x0, basal, (0.0, 0.0, 8.0), params)
    d1 = ode_rhs(x0, basal, (5.0, 0.0, 8.0), params)
    diff = d1 - d0
    assert diff[K.G1] > 0
    assert diff[K.G2] == 0.0
    assert diff[K.Q1] == 0.0


def test_zero_insulin_drives_glucose_high(params, steady):
    x0, _ = steady
    n = 5000
    traj = simulate(x0, np.zeros(n), np.tile([0.0, 0.0, 8.0], (n, 1)), params)
    g_end = glucose(traj[-1], params)
    assert g_end * MGDL_PER_MMOLL > 300.0
    assert g_end == pytest.approx(steady_glucose(0.0, params), rel=1e-3)
    assert traj[-1, K.Q3] < x0[K.Q3]


def test_rest_uptake_quadratic_near_zero():
    assert abs(0.006 * 64 + 1.2264 * 8 - 10.1958) < 1e-2


def test_non_finite_state_rejected(params):
    x = np.full(14, 1.0)
    x[3] = np.nan
    with pytest.raises(NumericInputError):
        ode_rhs(x, 10.0, REST_INPUT, params)


def test_negative_insulin_rejected(params, steady):
    with pytest.raises(ValueError):
        ode_rhs(steady[0], -1.0, REST_INPUT, params)


def test_measure_noise_free_identity():
    x = np.zeros(14)
    x[K.C] = 7.8
    assert measure(x, 0.0) == 7.8


def test_measure_noise_std(rng):
    x = np.zeros(14)
    x[K.C] = 7.8
    draws = np.array([measure(x, 0.39, rng) for _ in range(10_000)])
    assert np.std(draws) == pytest.approx(0.39, rel=0.05)


def test_measure_clamps_at_zero():
    class Low:
        def standard_normal(self):
            return -100.0
    x = np.zeros(14)
    x[K.C] = 0.1
    assert measure(x, 1.0, Low()) == 0.0


def test_rk4_local_error_second_order(params, steady):
    x0, basal = steady
    u = (3.0, 0.1, 20.0)
    f = ode_rhs(x0, basal, u, params)
    errs = []
    for dt in (0.4, 0.2, 0.1):
        x1 = integrate_step(x0, basal, u, params, dt)
        errs.append(np.linalg.norm(x1 - (x0 + dt * f)))
    # O(dt^2): halving dt cuts the deviation by about four
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.15)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.15)


def test_step_halving_converged(params, steady):
    x0, basal = steady
    g1 = meal_insulin_exercise_bg(params, x0, basal, PLANT_SUBSTEP_MIN)
    g2 = meal_insulin_exercise_bg(params, x0, basal, PLANT_SUBSTEP_MIN / 2)
    assert np.max(np.abs(g1 - g2)) <= 1e-6


def test_divergence_raises_with_time(params, steady):
    x = steady[0].copy()
    x[K.Q1] = 1e10
    with pytest.raises(IntegrationError) as err:
        simulate(x, np.full(3, 10.0), np.tile([0.0, 0.0, 8.0], (3, 1)), params)
    assert err.value.time >= 1


def test_clamp_stats_record_negative_excursions(params, steady):
    x = steady[0].copy()
    x[K.G1] = 0.0
    stats = ClampStats()
    integrate_step(x, 0.0, (0.0, 0.0, 8.0), params, 1.0, stats=stats)
    assert stats.count >= 0


@given(st.floats(0.0, 250.0), st.floats(0.0, 30.0), st.floats(0.0, 1.0),
       st.floats(8.0, 100.0))
def test_states_stay_nonnegative(insulin, dg, mm, o2):
    p = default_params()
    x0, _ = find_steady_state(7.8, p)
    x = integrate_step(x0, insulin, (dg, mm, o2), p, 30.0)
    assert np.all(x >= 0.0)
    assert np.all(np.isfinite(x))


def test_feasibility_default_patient_passes(params):
    assert check_physiologic_feasibility(params).passed


def test_feasibility_zero_sensitivity_fails(params):
    p = params.replace(S_IT=0.0, S_ID=0.0, S_IE=0.0)
    rep = check_physiologic_feasibility(p)
    assert not rep.high_dose_ok
    assert not rep.passed


def test_feasibility_no_egp_fails_zero_insulin(params):
    rep = check_physiologic_feasibility(params.replace(EGP0=0.0))
    assert not rep.zero_insulin_ok


def test_unreachable_target_raises(params):
    with pytest.raises(SolverError):
        find_steady_state(50.0, params.replace(EGP0=0.0))


def test_patient_file_roundtrip(tmp_path, params):
    path = tmp_path / "p.json"
    import json
    path.write_text(json.dumps(dump_patient_params(params)))
    loaded = load_patient_params(path)
    assert np.array_equal(loaded.as_array(), params.as_array())


def test_patient_file_unknown_key(tmp_path):
    path = tmp_path / "p.json"
    path.write_text('{"body_weight_kg": 70, "bogus": 1}')
    with pytest.raises(ConfigError):
        load_patient_params(path)


def test_patient_file_needs_weight(tmp_path):
    path = tmp_path / "p.json"
    path.write_text('{}')
    with pytest.raises(ConfigError):
        load_patient_params(path)


@given(st.floats(50.0, 110.0))
def test_steady_state_any_weight(bw):
    p = PatientParams.from_body_weight(bw)
    x0, basal = find_steady_state(7.8, p)
    assert basal > 0
    assert np.max(np.abs(ode_rhs(x0, basal, REST_INPUT, p))) <= 1e-8
