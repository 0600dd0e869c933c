import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import INDEX_GRID as GRID, box_guarantee_holds, brute_force_index

from glucoloop.errors import ConfigError, SampleSizeError
from glucoloop.uncertainty import (REST_U, EventSpec, UncertaintyTube, bootstrap_threshold,
                                   box_from_samples, build_sets_from_csv, kmeans_cluster, normal,
                                   order_statistic_index, point, read_event_samples,
                                   tube_from_event_specs, uniform)


def test_order_statistic_matches_brute_force_grid():
    assert len(GRID) >= 200
    mismatches = []
    for S, eps, d, a in GRID:
        want = brute_force_index(S, eps, d, a)
        try:
            got = order_statistic_index(S, eps, d, a)
        except SampleSizeError:
            got = None
        if got != want:
            mismatches.append((S, eps, d, a, got, want))
    assert not mismatches


def test_order_statistic_documented_case():
    assert order_statistic_index(100, 0.2, 3, 0.2) == brute_force_index(100, 0.2, 3, 0.2)


def test_order_statistic_single_sample_boundary():
    assert order_statistic_index(1, 0.999, 1, 0.999999) == 1


def test_strict_rejects_single_sample():
    with pytest.raises(SampleSizeError):
        order_statistic_index(1, 0.999, 1, 0.999999, strict=True)


def test_order_statistic_monotone_on_grid():
    for S in (200, 500):
        for d in (1, 3):
            s_by_alpha = [order_statistic_index(S, 0.2, d, a) for a in (0.01, 0.05, 0.1, 0.2, 0.5)]
            assert all(x >= y for x, y in zip(s_by_alpha, s_by_alpha[1:]))
            s_by_eps = [order_statistic_index(S, e, d, 0.1) for e in (0.1, 0.2, 0.3, 0.5)]
            assert all(x >= y for x, y in zip(s_by_eps, s_by_eps[1:]))


def test_too_few_samples_raise():
    with pytest.raises(SampleSizeError):
        order_statistic_index(5, 0.01, 1, 0.01)


@given(st.integers(1, 400), st.floats(0.01, 0.9), st.integers(1, 5), st.floats(0.01, 0.9))
def test_index_is_minimal(S, eps, d, alpha):
    if eps / d >= 1:
        return
    try:
        s = order_statistic_index(S, eps, d, alpha)
    except SampleSizeError:
        return
    assert 1 <= s <= S
    if s > 1:
        # one fewer would break the tail bound
        from glucoloop.uncertainty import _log_tail
        assert _log_tail(S, s - 1, eps / d) > math.log(alpha / (2 * d))


def test_identical_samples_give_point_box():
    v = np.array([3.0, 7.0, -1.0])
    box = box_from_samples(np.tile(v, (200, 1)), 0.3, 0.2)
    assert np.array_equal(box.lower, v) and np.array_equal(box.upper, v)


def test_box_bounds_are_samples(rng):
    x = rng.uniform(size=500)
    box = box_from_samples(x, 0.1, 0.2)
    assert box.lower[0] in x and box.upper[0] in x
    assert x.min() <= box.lower[0] <= box.upper[0] <= x.max()


def test_box_missing_values_per_coordinate(rng):
    x = rng.uniform(size=(300, 2))
    x[:250, 1] = np.nan
    with pytest.raises(SampleSizeError) as err:
        box_from_samples(x, 0.05, 0.05, names=("a", "b"))
    assert list(err.value.coordinates) == ["b"]


def test_box_coverage_monte_carlo(rng):
    hits = sum(box_guarantee_holds(box_from_samples(rng.uniform(size=500), 0.1, 0.2), 0.1)
               for _ in range(200))
    assert hits / 200 >= 0.8 - 0.05


def test_bootstrap_constant_statistic(rng):
    data = np.full(30, 4.2)
    for q in (0.1, 0.5, 0.9):
        assert bootstrap_threshold(data, np.mean, 200, rng, q) == pytest.approx(4.2)


def test_bootstrap_mean_quantile(rng):
    S = 400
    data = rng.standard_normal(S)
    centred = data - data.mean()
    thr = bootstrap_threshold(centred, np.mean, 2000, rng, 0.9)
    assert thr == pytest.approx(1.2816 / math.sqrt(S), rel=0.1)


def test_bootstrap_needs_resamples(rng):
    with pytest.raises(ValueError):
        bootstrap_threshold(np.ones(5), np.mean, 10, rng)


def test_rest_tube():
    tube = tube_from_event_specs([], 300, 1)
    assert np.all(tube.lower == REST_U) and np.all(tube.upper == REST_U)


def test_normal_meal_window():
    ev = EventSpec("meal", normal(60, 15), point(20), amount=normal(60, 9))
    tube = tube_from_event_specs([ev], 300, 1)
    nz = np.flatnonzero(tube.upper[:, 0] > 0)
    assert (nz[0], nz[-1] + 1) == (15, 125)
    assert np.all(tube.lower[:, 0] == 0)    # no guaranteed window: 105 > 15 + 20


def test_guaranteed_meal_window():
    ev = EventSpec("meal", uniform(30, 40), point(20), amount=uniform(50, 70))
    tube = tube_from_event_specs([ev], 120, 1)
    sure = np.flatnonzero(tube.lower[:, 0] > 0)
    assert (sure[0], sure[-1] + 1) == (40, 50)


def test_optional_event_has_rest_lower_bound():
    ev = EventSpec("meal", uniform(30, 40), point(20), amount=uniform(50, 70),
                   occurrence_prob=0.5)
    tube = tube_from_event_specs([ev], 120, 1)
    assert np.all(tube.lower[:, 0] == 0)


@given(st.floats(0, 200), st.floats(0, 100), st.floats(5, 60), st.floats(0, 30),
       st.floats(10, 100), st.floats(0, 50), st.integers(0, 10 ** 6))
def test_tube_soundness_uniform_meal(s0, sw, d0, dw, a0, aw, seed):
    from glucoloop.scenarios import Scenario, realize_inputs, sample_events
    ev = EventSpec("meal", uniform(s0, s0 + sw), uniform(d0, d0 + dw),
                   amount=uniform(a0, a0 + aw))
    sc = Scenario("t", 420, (ev,))
    tube = sc.build_tube(420)
    rng = np.random.default_rng(seed)
    for _ in range(20):
        u = realize_inputs(sample_events(sc, rng), 420)
        assert tube.contains(u).all()


def test_tube_is_tight_at_peak(rng):
    from glucoloop.scenarios import get_scenario, realize_inputs, sample_events
    sc = get_scenario("scenario1")
    tube = sc.build_tube(300)
    peak = max(realize_inputs(sample_events(sc, rng), 300)[:, 0].max() for _ in range(2000))
    assert peak >= 0.97 * tube.upper[:, 0].max()


def test_tube_json_roundtrip():
    ev = EventSpec("exercise", uniform(60, 90), uniform(20, 40), mm=uniform(0.2, 0.4),
                   o2=uniform(40, 60))
    tube = tube_from_event_specs([ev], 300, 30)
    back = UncertaintyTube.from_json(tube.to_json())
    assert np.array_equal(back.lower, tube.lower) and np.array_equal(back.upper, tube.upper)


def test_coarsen_is_envelope():
    ev = EventSpec("meal", uniform(10, 50), point(20), amount=uniform(40, 60))
    fine = tube_from_event_specs([ev], 120, 1)
    coarse = fine.coarsen(30)
    lo, hi = coarse.minute_bounds(0, 120)
    assert np.all(lo <= fine.lower) and np.all(hi >= fine.upper)


def test_tube_rejects_crossed_bounds():
    with pytest.raises(ConfigError):
        UncertaintyTube(2, 1, [[1, 0, 8], [0, 0, 8]], [[0, 0, 8], [0, 0, 8]])


def _write_samples(path, rows):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["event_kind", "start_min", "duration_min", "cho_g", "mm_frac", "o2_pct"])
        w.writerows(rows)


def test_build_sets_from_csv(tmp_path, rng):
    rows = [["meal", rng.uniform(30, 90), 20, rng.uniform(40, 80), "", ""] for _ in range(500)]
    path = tmp_path / "s.csv"
    _write_samples(path, rows)
    boxes, tube = build_sets_from_csv(path, 0.1, 0.2, 300)
    b = boxes["meal"]
    assert 30 <= b.lower[0] <= b.upper[0] <= 90
    assert tube.upper[:, 0].max() > 0


def test_read_samples_rejects_bad_kind(tmp_path):
    path = tmp_path / "s.csv"
    _write_samples(path, [["snack", 1, 2, 3, "", ""]])
    with pytest.raises(ConfigError):
        read_event_samples(path)


def test_kmeans_each_point_own_cluster(rng):
    x = rng.normal(size=(12, 5))
    res = kmeans_cluster(x, 12, rng)
    assert res.inertia == pytest.approx(0.0, abs=1e-12)
    assert len(set(res.assignments.tolist())) == 12


def test_kmeans_separates_blobs(rng):
    a = rng.normal(0.0, 0.3, size=(50, 4))
    b = rng.normal(8.0, 0.3, size=(50, 4))
    res = kmeans_cluster(np.vstack([a, b]), 2, rng)
    lab = res.assignments
    assert len(set(lab[:50])) == 1 and len(set(lab[50:])) == 1 and lab[0] != lab[50]


@given(st.integers(1, 6), st.integers(0, 1000))
def test_kmeans_inertia_non_increasing(k, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(40, 3))
    res = kmeans_cluster(x, k, r)
    h = res.inertia_history
    assert all(a >= b - 1e-9 for a, b in zip(h, h[1:]))
    assert res.inertia <= h[-1] + 1e-9
