"""Scenario definitions, event realization and expected disturbance profiles."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import norm

from glucoloop.errors import ConfigError
from glucoloop.model import GLUCOSE_MMOL_PER_G, REST_O2
from glucoloop.uncertainty import (Dist, EventSpec, UncertaintyTube, build_sets_from_csv,
                                   normal, point, tube_from_event_specs, uniform)

SAMPLING_MODES = ("as_specified", "normal_tails", "delayed")
TAIL_Z = (3.0, 4.0)
MEAL_DURATION = 20.0


@dataclass(frozen=True)
class Scenario:
    """A stochastic closed-loop experiment.

    ``tube_source`` is ``{"kind": "specs", "k_sigma": 3}`` or
    ``{"kind": "samples", "path": ..., "epsilon": ..., "alpha": ...}``.
    ``plant_sampling`` selects how the plant draws its events: from the
    stated distributions, from the normal tails (|z| in [3, 4]) or shifted by
    ``delay_min``.
    """

    name: str
    horizon_min: int
    events: tuple = ()
    tube_source: dict = field(default_factory=lambda: {"kind": "specs", "k_sigma": 3.0})
    plant_sampling: str = "as_specified"
    delay_min: float = 0.0
    noise_var_q: float = 0.1521
    repetitions: int = 10
    seed: int = 0
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if self.horizon_min <= 0 or self.horizon_min % 5:
            raise ConfigError("horizon_min must be a positive multiple of 5")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.plant_sampling not in SAMPLING_MODES:
            raise ConfigError(f"plant_sampling must be one of {SAMPLING_MODES}")
        if self.plant_sampling == "normal_tails" and not any(
                d is not None and d.kind == "normal"
                for e in self.events for d in (e.start, e.amount, e.mm, e.o2)):
            raise ConfigError("normal_tails sampling needs a normally distributed event field")
        if self.noise_var_q < 0:
            raise ConfigError("noise_var_q must be >= 0")
        if self.events and self.events[0].chained:
            raise ConfigError("the first event cannot be chained")
        kind = self.tube_source.get("kind")
        if kind not in ("specs", "samples"):
            raise ConfigError("tube_source.kind must be 'specs' or 'samples'")

    def with_overrides(self, **kw) -> "Scenario":
        return replace(self, **kw)

    def build_tube(self, horizon: int) -> UncertaintyTube:
        """Per-minute tube over ``horizon`` minutes (rest past the events)."""
        src = self.tube_source
        if src["kind"] == "specs":
            return tube_from_event_specs(self.events, horizon, 1, float(src.get("k_sigma", 3.0)))
        _, tube = build_sets_from_csv(src["path"], float(src["epsilon"]), float(src["alpha"]),
                                      horizon, 1)
        return tube

    def to_dict(self) -> dict:
        return {"name": self.name, "horizon_min": self.horizon_min,
                "events": [e.to_dict() for e in self.events],
                "tube_source": dict(self.tube_source),
                "plant_sampling": self.plant_sampling, "delay_min": self.delay_min,
                "noise_var_q": self.noise_var_q, "repetitions": self.repetitions,
                "seed": self.seed, "description": self.description}

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        known = {"name", "horizon_min", "events", "tube_source", "plant_sampling",
                 "delay_min", "noise_var_q", "repetitions", "seed", "description"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
        try:
            kw = dict(doc)
            kw["events"] = tuple(EventSpec.from_dict(e) for e in doc.get("events", ()))
            kw["horizon_min"] = int(doc["horizon_min"])
            return cls(**kw)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad scenario document: {exc}") from exc


def load_scenario(path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc}") from exc
    return Scenario.from_dict(doc)


# --------------------------------------------------------------------- library

def _meal(start, amount, name, prob=1.0, duration=MEAL_DURATION):
    return EventSpec("meal", start, point(duration), amount=amount, occurrence_prob=prob,
                     name=name)


def _two_leg_exercise():
    moderate = EventSpec("exercise", uniform(40, 80), uniform(24, 36), mm=uniform(0.15, 0.35),
                         o2=uniform(45, 75), name="moderate")
    # starts where the moderate leg ends and keeps its duration and MM
    light = EventSpec("exercise", uniform(64, 116), uniform(24, 36), mm=uniform(0.15, 0.35),
                      o2=uniform(15, 45), chained=True, name="light")
    return moderate, light


def _high_carb_events():
    rows = [("breakfast", 1.0, (40, 60), (6, 10)),
            ("snack1", 0.5, (5, 25), (8, 11)),
            ("lunch", 1.0, (70, 110), (11, 15)),
            ("snack2", 0.5, (5, 25), (15, 18)),
            ("dinner", 1.0, (55, 75), (18, 22)),
            ("snack3", 0.5, (5, 15), (22, 24))]
    # the meal must start early enough to finish inside its time-of-day window
    return tuple(_meal(uniform(h0 * 60, h1 * 60 - MEAL_DURATION), uniform(*cho), name, prob)
                 for name, prob, cho, (h0, h1) in rows)


EXERCISE_INTENSITIES = {"light": ((0.1, 0.25), (15, 45)),
                        "moderate": ((0.2, 0.35), (45, 75)),
                        "intense": ((0.3, 0.5), (75, 100))}


def scenario_library() -> dict[str, Scenario]:
    meal1 = _meal(uniform(30, 90), uniform(42, 78), "meal")
    lib = {
        "none": Scenario("none", 300, (), description="no meals or exercise"),
        "scenario1": Scenario("scenario1", 300, (meal1,),
                              description="one meal drawn from the expected distribution"),
        "scenario2": Scenario("scenario2", 300,
                              (_meal(normal(60, 15), normal(60, 9), "meal"),),
                              plant_sampling="normal_tails",
                              description="one meal drawn from the distribution tails"),
        "scenario3": Scenario("scenario3", 300, (meal1,), plant_sampling="delayed",
                              delay_min=60.0, description="one meal, one hour late"),
        "exercise": Scenario("exercise", 300, _two_leg_exercise(),
                             description="moderate then light exercise"),
        "high_carb": Scenario("high_carb", 1440, _high_carb_events(), repetitions=5,
                              description="one day with six possible high-CHO meals"),
    }
    for level, (mm, o2) in EXERCISE_INTENSITIES.items():
        name = f"synthetic_exercise_{level}"
        ev = EventSpec("exercise", uniform(540, 1080), point(60), mm=uniform(*mm),
                       o2=uniform(*o2), name=level)
        lib[name] = Scenario(name, 1440, (ev,), description=f"one-hour {level} exercise")
    lib["outliers"] = replace(lib["scenario2"], name="outliers")
    return lib


def get_scenario(name_or_path: str) -> Scenario:
    lib = scenario_library()
    if name_or_path in lib:
        return lib[name_or_path]
    if Path(name_or_path).is_file():
        return load_scenario(name_or_path)
    raise ConfigError(f"unknown scenario {name_or_path!r}; choose one of {sorted(lib)} or a JSON file")


# ------------------------------------------------------------------ realization

@dataclass(frozen=True)
class RealizedEvent:
    kind: str
    start: float
    duration: float
    amount_g: float = 0.0
    mm: float = 0.0
    o2: float = REST_O2
    name: str = ""


def _draw(dist: Dist, rng, tails) -> float:
    if tails and dist.kind == "normal":
        return dist.sample(rng, TAIL_Z)
    return dist.sample(rng)


def sample_events(scenario: Scenario, rng: np.random.Generator) -> list[RealizedEvent]:
    """Draw one realization of the scenario's events for the plant.

    Every event consumes the same random draws whether or not it occurs, so
    realizations stay aligned across scenarios that differ only in sampling.
    """
    tails = scenario.plant_sampling == "normal_tails"
    shift = scenario.delay_min if scenario.plant_sampling == "delayed" else 0.0
    out: list[RealizedEvent] = []
    prev, prev_happened = None, False
    for ev in scenario.events:
        happens = rng.random() < ev.occurrence_prob
        start = _draw(ev.start, rng, tails)
        duration = _draw(ev.duration, rng, tails)
        if ev.kind == "meal":
            amount = max(_draw(ev.amount, rng, tails), 0.0)
            real = RealizedEvent("meal", max(start + shift, 0.0), max(duration, 1.0),
                                 amount_g=amount, name=ev.name)
        else:
            mm = min(max(_draw(ev.mm, rng, tails), 0.0), 1.0)
            o2 = min(max(_draw(ev.o2, rng, tails), 0.0), 100.0)
            if ev.chained and prev is not None:
                start, duration, mm = prev.start + prev.duration, prev.duration, prev.mm
            else:
                start, duration = max(start + shift, 0.0), max(duration, 1.0)
            real = RealizedEvent("exercise", start, duration, mm=mm, o2=o2, name=ev.name)
        if ev.chained and not prev_happened:
            happens = False
        prev, prev_happened = real, happens
        if happens:
            out.append(real)
    return out


def _overlap(start: float, duration: float, n: int) -> np.ndarray:
    """Fraction of each minute [m, m+1) covered by [start, start+duration)."""
    m = np.arange(n, dtype=float)
    return np.clip(np.minimum(start + duration, m + 1) - np.maximum(start, m), 0.0, 1.0)


def realize_inputs(events, n_minutes: int) -> np.ndarray:
    """Per-minute (DG, MM, O2) for realized events; O2 blends with rest by coverage."""
    u = np.zeros((n_minutes, 3))
    u[:, 2] = REST_O2
    for ev in events:
        f = _overlap(ev.start, ev.duration, n_minutes)
        if ev.kind == "meal":
            u[:, 0] += f * ev.amount_g * GLUCOSE_MMOL_PER_G / ev.duration
        else:
            u[:, 1] += f * ev.mm
            u[:, 2] += f * (ev.o2 - REST_O2)
    return u


def _nodes(dist: Dist, tails: bool, n: int = 64):
    """Quadrature nodes and weights for the plant's sampling distribution."""
    if dist.kind == "point":
        return np.array([dist.a]), np.array([1.0])
    if dist.kind == "uniform":
        edges = np.linspace(dist.a, dist.b, n + 1)
        return 0.5 * (edges[:-1] + edges[1:]), np.full(n, 1.0 / n)
    if tails:
        z_half = np.linspace(TAIL_Z[0], TAIL_Z[1], n // 2 + 1)
        zm = 0.5 * (z_half[:-1] + z_half[1:])
        z = np.concatenate([-zm[::-1], zm])
    else:
        edges = np.linspace(-4.0, 4.0, 2 * n + 1)
        z = 0.5 * (edges[:-1] + edges[1:])
    w = norm.pdf(z)
    return dist.a + dist.b * z, w / w.sum()


def expected_inputs(scenario: Scenario, n_minutes: int) -> np.ndarray:
    """Per-minute expectation of the plant's (DG, MM, O2) under its sampling law.

    Start and duration are integrated by quadrature; amounts, MM and O2 enter
    linearly and use their means. A chained leg shares its parent's nodes.
    """
    tails = scenario.plant_sampling == "normal_tails"
    shift = scenario.delay_min if scenario.plant_sampling == "delayed" else 0.0
    u = np.zeros((n_minutes, 3))
    u[:, 2] = REST_O2
    events = list(scenario.events)

    def mean_of(d: Dist) -> float:
        if d.kind == "normal" and tails:
            x, w = _nodes(d, True)
            return float(np.dot(x, w))
        return d.mean

    i = 0
    while i < len(events):
        ev = events[i]
        legs = [ev]
        while i + len(legs) < len(events) and events[i + len(legs)].chained:
            legs.append(events[i + len(legs)])
        s_nodes, s_w = _nodes(ev.start, tails)
        d_nodes, d_w = _nodes(ev.duration, tails, 16)
        cover = [np.zeros(n_minutes) for _ in legs]
        inv_d = np.zeros(n_minutes)
        for s, ws in zip(s_nodes, s_w):
            s = max(s + shift, 0.0)
            for d, wd in zip(d_nodes, d_w):
                d = max(d, 1.0)
                for k in range(len(legs)):
                    f = _overlap(s + k * d, d, n_minutes) * ws * wd
                    cover[k] += f
                    if k == 0:
                        inv_d += f / d
        p = 1.0
        for k, leg in enumerate(legs):
            p *= leg.occurrence_prob
            if leg.kind == "meal":
                u[:, 0] += p * mean_of(leg.amount) * GLUCOSE_MMOL_PER_G * inv_d
            else:
                mm = mean_of(legs[0].mm)
                u[:, 1] += p * cover[k] * mm
                u[:, 2] += p * cover[k] * (mean_of(leg.o2) - REST_O2)
        i += len(legs)
    return u
