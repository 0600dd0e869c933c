import json

import numpy as np
import pytest

from glucoloop.errors import ConfigError
from glucoloop.model import GLUCOSE_MMOL_PER_G
from glucoloop.scenarios import (Scenario, expected_inputs, get_scenario, load_scenario,
                                 realize_inputs, sample_events, scenario_library)
from glucoloop.uncertainty import EventSpec, point, uniform


def test_library_names():
    lib = scenario_library()
    for name in ("none", "scenario1", "scenario2", "scenario3", "exercise", "high_carb",
                 "outliers", "synthetic_exercise_light", "synthetic_exercise_moderate",
                 "synthetic_exercise_intense"):
        assert name in lib


def test_scenario1_meal_distribution():
    ev = get_scenario("scenario1").events[0]
    assert ev.kind == "meal"
    assert (ev.amount.kind, ev.amount.a, ev.amount.b) == ("uniform", 42, 78)
    assert (ev.start.a, ev.start.b) == (30, 90)
    assert ev.duration.kind == "point" and ev.duration.mean == 20


def test_high_carb_occurrence_probabilities():
    sc = get_scenario("high_carb")
    assert sc.horizon_min == 1440
    assert [e.occurrence_prob for e in sc.events] == [1, .5, 1, .5, 1, .5]


def test_exercise_legs_share_draws(rng):
    sc = get_scenario("exercise")
    for _ in range(50):
        ev = sample_events(sc, rng)
        assert len(ev) == 2
        a, b = ev
        assert b.start == pytest.approx(a.start + a.duration)
        assert b.duration == a.duration and b.mm == a.mm
        assert 45 <= a.o2 <= 75 and 15 <= b.o2 <= 45


def test_scenario2_draws_from_tails(rng):
    sc = get_scenario("scenario2")
    ev = sc.events[0]
    for _ in range(200):
        (m,) = sample_events(sc, rng)
        z = abs(m.amount_g - ev.amount.a) / ev.amount.b
        assert 3.0 <= z <= 4.0


def test_scenario3_delays_by_an_hour():
    a = sample_events(get_scenario("scenario1"), np.random.default_rng(3))
    b = sample_events(get_scenario("scenario3"), np.random.default_rng(3))
    assert b[0].start == pytest.approx(a[0].start + 60.0)
    assert b[0].amount_g == a[0].amount_g


def test_realized_meal_integrates_to_amount():
    from glucoloop.scenarios import RealizedEvent
    ev = RealizedEvent("meal", 30.4, 20.0, amount_g=55.0)
    u = realize_inputs([ev], 300)
    assert u[:, 0].sum() == pytest.approx(55.0 * GLUCOSE_MMOL_PER_G)
    np.testing.assert_array_equal(u[:, 2], 8.0)


@pytest.mark.parametrize("name", ["scenario1", "scenario3", "exercise", "high_carb"])
def test_expected_inputs_match_monte_carlo_mean(name):
    sc = get_scenario(name)
    n = sc.horizon_min
    rng = np.random.default_rng(0)
    reps = 4000
    acc = np.zeros((n, 3))
    for _ in range(reps):
        acc += realize_inputs(sample_events(sc, rng), n)
    mc = acc / reps
    ex = expected_inputs(sc, n)
    # 30-min block means keep per-minute sampling noise out of the comparison
    blocks = lambda a: a.reshape(-1, 30, 3).mean(axis=1)
    scale = np.maximum(np.abs(ex).max(axis=0), 1e-9)
    assert np.max(np.abs(blocks(mc) - blocks(ex)) / scale) < 0.05


def test_realizations_inside_tube():
    sc = get_scenario("scenario1")
    tube = sc.build_tube(300)
    rng = np.random.default_rng(1)
    for _ in range(10_000 // 10):
        assert np.all(tube.contains(realize_inputs(sample_events(sc, rng), 300)))


def test_json_round_trip(tmp_path):
    sc = get_scenario("exercise").with_overrides(seed=4, noise_var_q=1.0)
    path = tmp_path / "sc.json"
    path.write_text(json.dumps(sc.to_dict()))
    back = load_scenario(path)
    assert back == sc
    assert get_scenario(str(path)) == sc


@pytest.mark.parametrize("kw", [dict(horizon_min=0), dict(horizon_min=302),
                                dict(repetitions=0), dict(plant_sampling="weird"),
                                dict(noise_var_q=-1.0), dict(plant_sampling="normal_tails")])
def test_scenario_validation(kw):
    base = dict(name="x", horizon_min=300,
                events=(EventSpec("meal", uniform(0, 10), point(20), amount=uniform(1, 2)),))
    with pytest.raises(ConfigError):
        Scenario(**{**base, **kw})


def test_unknown_scenario_and_keys(tmp_path):
    with pytest.raises(ConfigError):
        get_scenario("no_such_thing")
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"name": "x", "horizon_min": 300, "colour": "red"}))
    with pytest.raises(ConfigError):
        load_scenario(path)
