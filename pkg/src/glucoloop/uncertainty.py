"""Box uncertainty sets and time-varying uncertainty tubes.

Two construction routes feed the controller and the estimator:

* ``box_from_samples`` builds a per-coordinate order-statistic box from i.i.d.
  samples that carries an (epsilon, alpha) probabilistic guarantee.
* ``tube_from_event_specs`` turns meal/exercise event distributions into
  per-step bounds on (DG, MM, O2).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from glucoloop.errors import ConfigError, SampleSizeError
from glucoloop.model import GLUCOSE_MMOL_PER_G, REST_O2

DG, MM, O2 = 0, 1, 2
INPUT_NAMES = ("DG", "MM", "O2")
REST_U = np.array([0.0, 0.0, REST_O2])


# ------------------------------------------------------------ order statistics

def _log_tail(S: int, k: int, p_le: float) -> float:
    """log sum_{j=k}^{S} C(S,j) p^(S-j) (1-p)^j."""
    j = np.arange(k, S + 1)
    terms = (gammaln(S + 1) - gammaln(j + 1) - gammaln(S - j + 1)
             + (S - j) * math.log(p_le) + j * math.log1p(-p_le))
    return float(logsumexp(terms))


def order_statistic_index(S: int, epsilon: float, d: int, alpha: float,
                          strict: bool = False) -> int:
    """Smallest k <= S whose binomial tail is at most alpha / (2 d).

    With ``strict=True`` also require S - s + 1 < s, the condition under
    which the order-statistic box is valid.
    """
    if S < 1 or d < 1:
        raise ValueError("S and d must be positive")
    ratio = epsilon / d
    if not 0.0 < ratio < 1.0:
        raise ValueError("epsilon / d must lie in (0, 1)")
    if not 0.0 < alpha < 1.0 + 1e-12:
        raise ValueError("alpha must lie in (0, 1)")
    log_thr = math.log(alpha / (2 * d))
    # the tail shrinks as k grows: bisection on k
    if _log_tail(S, S, ratio) > log_thr:
        raise SampleSizeError(f"S = {S} samples cannot meet epsilon={epsilon}, alpha={alpha}")
    lo, hi = 1, S
    while lo < hi:
        mid = (lo + hi) // 2
        if _log_tail(S, mid, ratio) <= log_thr:
            hi = mid
        else:
            lo = mid + 1
    s = lo
    if strict and not S - s + 1 < s:
        raise SampleSizeError(f"S = {S} too small: S - s + 1 >= s (s = {s})")
    return s


@dataclass(frozen=True)
class BoxSet:
    lower: np.ndarray
    upper: np.ndarray
    epsilon: float
    alpha: float
    sample_size: tuple
    index: tuple = ()
    names: tuple = ()

    @property
    def dimension(self) -> int:
        return len(self.lower)

    def contains(self, u) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.lower) and np.all(u <= self.upper))

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "lower": [float(v) for v in self.lower],
            "upper": [float(v) for v in self.upper],
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "sample_size": list(self.sample_size),
            "order_statistic_index": list(self.index),
        }


def box_from_samples(samples, epsilon: float, alpha: float,
                     names: Sequence[str] = ()) -> BoxSet:
    """Order-statistic box with NaN entries treated as missing.

    Each coordinate uses its own non-missing count; the upper bound is its
    s-th smallest value and the lower bound the (S - s + 1)-th.
    """
    data = np.asarray(samples, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if np.any(np.isinf(data)):
        raise ValueError("samples must be finite (use NaN for missing values)")
    d = data.shape[1]
    lower, upper, sizes, idx, bad = [], [], [], [], []
    for i in range(d):
        col = np.sort(data[~np.isnan(data[:, i]), i])
        S = col.size
        try:
            if S == 0:
                raise SampleSizeError("no samples")
            s = order_statistic_index(S, epsilon, d, alpha, strict=True)
        except SampleSizeError:
            bad.append(names[i] if names else i)
            continue
        upper.append(col[s - 1])
        lower.append(col[S - s])
        sizes.append(S)
        idx.append(s)
    if bad:
        raise SampleSizeError(f"too few samples for coordinates {bad}", bad)
    return BoxSet(np.array(lower), np.array(upper), epsilon, alpha,
                  tuple(sizes), tuple(idx), tuple(names))


def bootstrap_threshold(samples, statistic: Callable, resamples: int,
                        rng: np.random.Generator, quantile: float = 0.9) -> float:
    """Empirical ``quantile`` of ``statistic`` over with-replacement resamples."""
    data = np.asarray(samples, dtype=float)
    if data.shape[0] == 0:
        raise ValueError("empty sample set")
    if resamples < 100:
        raise ValueError("need at least 100 resamples")
    n = data.shape[0]
    stats = np.empty(resamples)
    for b in range(resamples):
        stats[b] = statistic(data[rng.integers(0, n, size=n)])
    return float(np.quantile(stats, quantile))


# --------------------------------------------------------------- distributions

@dataclass(frozen=True)
class Dist:
    """uniform(a, b), normal(mean=a, sd=b) or point(a)."""

    kind: str
    a: float
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ("uniform", "normal", "point"):
            raise ConfigError(f"unknown distribution {self.kind!r}")
        if self.kind == "uniform" and self.a > self.b:
            raise ConfigError("uniform bounds out of order")
        if self.kind == "normal" and self.b < 0:
            raise ConfigError("normal sd must be >= 0")

    def bounds(self, k_sigma: float = 3.0) -> tuple[float, float]:
        if self.kind == "uniform":
            return self.a, self.b
        if self.kind == "normal":
            return self.a - k_sigma * self.b, self.a + k_sigma * self.b
        return self.a, self.a

    @property
    def mean(self) -> float:
        return 0.5 * (self.a + self.b) if self.kind == "uniform" else self.a

    def sample(self, rng: np.random.Generator, tails: tuple | None = None) -> float:
        """Draw one value; ``tails=(z_lo, z_hi)`` restricts normals to |z| in it."""
        if self.kind == "uniform":
            return float(rng.uniform(self.a, self.b))
        if self.kind == "point":
            return float(self.a)
        if tails is None:
            return float(rng.normal(self.a, self.b))
        from scipy.stats import norm
        z_lo, z_hi = tails
        q = rng.uniform(norm.cdf(z_lo), norm.cdf(z_hi))
        z = float(norm.ppf(q))
        if rng.random() < 0.5:
            z = -z
        return self.a + z * self.b

    def to_dict(self) -> dict:
        if self.kind == "point":
            return {"kind": "point", "value": self.a}
        if self.kind == "uniform":
            return {"kind": "uniform", "lo": self.a, "hi": self.b}
        return {"kind": "normal", "mean": self.a, "sd": self.b}

    @classmethod
    def from_dict(cls, doc) -> "Dist":
        if isinstance(doc, (int, float)):
            return point(doc)
        kind = doc.get("kind")
        if kind == "point":
            return point(doc["value"])
        if kind == "uniform":
            return uniform(doc["lo"], doc["hi"])
        if kind == "normal":
            return normal(doc["mean"], doc["sd"])
        raise ConfigError(f"bad distribution {doc!r}")


def uniform(lo: float, hi: float) -> Dist:
    return Dist("uniform", float(lo), float(hi))


def normal(mean: float, sd: float) -> Dist:
    return Dist("normal", float(mean), float(sd))


def point(value: float) -> Dist:
    return Dist("point", float(value))


@dataclass(frozen=True)
class EventSpec:
    """A possible meal or exercise episode.

    Meals use ``amount`` (CHO in grams). Exercise uses ``mm`` and ``o2``.
    ``chained`` marks an exercise leg that starts when the previous leg ends
    and reuses its duration and MM draw; ``start`` then only describes the
    resulting window for set construction.
    """

    kind: str
    start: Dist
    duration: Dist
    amount: Dist | None = None
    mm: Dist | None = None
    o2: Dist | None = None
    occurrence_prob: float = 1.0
    chained: bool = False
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("meal", "exercise"):
            raise ConfigError(f"unknown event kind {self.kind!r}")
        if not 0.0 <= self.occurrence_prob <= 1.0:
            raise ConfigError("occurrence_prob must lie in [0, 1]")
        if self.kind == "meal" and self.amount is None:
            raise ConfigError("meal events need an amount distribution")
        if self.kind == "exercise" and (self.mm is None or self.o2 is None):
            raise ConfigError("exercise events need mm and o2 distributions")

    def to_dict(self) -> dict:
        doc = {"kind": self.kind, "name": self.name, "start": self.start.to_dict(),
               "duration": self.duration.to_dict(),
               "occurrence_prob": self.occurrence_prob, "chained": self.chained}
        for key in ("amount", "mm", "o2"):
            if getattr(self, key) is not None:
                doc[key] = getattr(self, key).to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc) -> "EventSpec":
        known = {"kind", "name", "start", "duration", "amount", "mm", "o2",
                 "occurrence_prob", "chained"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown event keys {sorted(unknown)}")
        dists = {k: Dist.from_dict(doc[k]) for k in ("start", "duration", "amount", "mm", "o2")
                 if k in doc}
        return cls(kind=doc["kind"], name=doc.get("name", ""),
                   occurrence_prob=float(doc.get("occurrence_prob", 1.0)),
                   chained=bool(doc.get("chained", False)), **dists)


# ------------------------------------------------------------------------ tube

@dataclass
class UncertaintyTube:
    """Per-step box bounds on (DG, MM, O2); step ``i`` covers [i*step, (i+1)*step)."""

    horizon: int
    step: int
    lower: np.ndarray
    upper: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float).reshape(-1, 3)
        self.upper = np.asarray(self.upper, dtype=float).reshape(-1, 3)
        if self.horizon % self.step:
            raise ConfigError("tube step must divide its horizon")
        if self.lower.shape != (self.horizon // self.step, 3) or self.upper.shape != self.lower.shape:
            raise ConfigError("tube bounds do not match horizon / step")
        if np.any(self.lower > self.upper + 1e-12):
            raise ConfigError("tube lower bound above upper bound")

    @classmethod
    def rest(cls, horizon: int, step: int = 1) -> "UncertaintyTube":
        n = horizon // step
        b = np.tile(REST_U, (n, 1))
        return cls(horizon, step, b, b.copy())

    def minute_bounds(self, t0: int, t1: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-minute (lower, upper) over [t0, t1); rest values past the horizon."""
        minutes = np.arange(t0, t1)
        idx = minutes // self.step
        lo = np.tile(REST_U, (len(minutes), 1))
        hi = lo.copy()
        inside = (minutes >= 0) & (idx < len(self.lower))
        lo[inside] = self.lower[idx[inside]]
        hi[inside] = self.upper[idx[inside]]
        return lo, hi

    def collapsed(self) -> "UncertaintyTube":
        """Same grid, every step pinned at rest values."""
        return UncertaintyTube.rest(self.horizon, self.step)

    def contains(self, u_per_minute, tol: float = 1e-9) -> np.ndarray:
        """Boolean per minute: is the realized input inside the tube?"""
        u = np.asarray(u_per_minute, dtype=float)
        lo, hi = self.minute_bounds(0, u.shape[-2])
        return np.all((u >= lo - tol) & (u <= hi + tol), axis=-1)

    def coarsen(self, step: int) -> "UncertaintyTube":
        """Envelope over blocks of ``step`` minutes."""
        if step % self.step or self.horizon % step:
            raise ConfigError("coarse step must be a multiple of the tube step and divide the horizon")
        r = step // self.step
        lo = self.lower.reshape(-1, r, 3).min(axis=1)
        hi = self.upper.reshape(-1, r, 3).max(axis=1)
        return UncertaintyTube(self.horizon, step, lo, hi, dict(self.meta))

    def to_records(self) -> list[dict]:
        out = []
        for i, (lo, hi) in enumerate(zip(self.lower, self.upper)):
            out.append({"t": i * self.step,
                        "DG_lo": lo[0], "DG_hi": hi[0],
                        "MM_lo": lo[1], "MM_hi": hi[1],
                        "O2_lo": lo[2], "O2_hi": hi[2]})
        return out

    def to_json(self) -> str:
        return json.dumps({"horizon": self.horizon, "step": self.step,
                           "meta": self.meta, "bounds": self.to_records()}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "UncertaintyTube":
        doc = json.loads(text)
        recs = doc["bounds"]
        lo = [[r["DG_lo"], r["MM_lo"], r["O2_lo"]] for r in recs]
        hi = [[r["DG_hi"], r["MM_hi"], r["O2_hi"]] for r in recs]
        return cls(int(doc["horizon"]), int(doc["step"]), lo, hi, doc.get("meta", {}))


def _event_windows(ev: EventSpec, k_sigma: float):
    s_lo, s_hi = ev.start.bounds(k_sigma)
    d_lo, d_hi = ev.duration.bounds(k_sigma)
    d_lo = max(d_lo, 0.0)
    return s_lo, s_hi, d_lo, d_hi


def tube_from_event_specs(events: Sequence[EventSpec], horizon: int, step: int = 30,
                          k_sigma: float = 3.0) -> UncertaintyTube:
    """Tube covering every realization of the events (or mu +/- k_sigma sd).

    Minute ``i`` covers [i, i+1). Upper bounds hold wherever an event may
    overlap that minute; lower bounds hold only where an event that surely
    happens covers the whole minute. DG bounds of concurrent meals add up
    (upper) or take the max (lower); MM and O2 take the max. The result is
    aggregated to ``step`` by taking envelopes.
    """
    if step <= 0 or horizon % step:
        raise ConfigError("step must divide horizon")
    minutes = np.arange(horizon, dtype=float)
    lo = np.tile(REST_U, (horizon, 1))
    hi = lo.copy()
    for ev in events:
        s_lo, s_hi, d_lo, d_hi = _event_windows(ev, k_sigma)
        possible = (minutes + 1 > s_lo) & (minutes < s_hi + d_hi)
        sure = (ev.occurrence_prob >= 1.0) & (minutes >= s_hi) & (minutes + 1 <= s_lo + d_lo)
        if ev.kind == "meal":
            a_lo, a_hi = ev.amount.bounds(k_sigma)
            a_lo, a_hi = max(a_lo, 0.0) * GLUCOSE_MMOL_PER_G, max(a_hi, 0.0) * GLUCOSE_MMOL_PER_G
            rate_hi = a_hi / d_lo if d_lo > 0 else np.inf
            rate_lo = a_lo / d_hi if d_hi > 0 else 0.0
            hi[possible, DG] += rate_hi
            lo[sure, DG] = np.maximum(lo[sure, DG], rate_lo)
        else:
            mm_lo, mm_hi = (min(max(v, 0.0), 1.0) for v in ev.mm.bounds(k_sigma))
            o2_lo, o2_hi = (min(max(v, 0.0), 100.0) for v in ev.o2.bounds(k_sigma))
            hi[possible, MM] = np.maximum(hi[possible, MM], mm_hi)
            hi[possible, O2] = np.maximum(hi[possible, O2], o2_hi)
            lo[sure, MM] = np.maximum(lo[sure, MM], mm_lo)
            lo[sure, O2] = np.maximum(lo[sure, O2], o2_lo)
    # a sure event may also be below rest O2; keep lower <= upper
    lo = np.minimum(lo, hi)
    tube = UncertaintyTube(horizon, 1, lo, hi,
                           {"source": "event_specs", "k_sigma": k_sigma,
                            "events": [e.to_dict() for e in events]})
    return tube if step == 1 else tube.coarsen(step)


# ----------------------------------------------------------- event samples I/O

SAMPLE_COLUMNS = ("event_kind", "start_min", "duration_min", "cho_g", "mm_frac", "o2_pct")
MEAL_COORDS = ("start_min", "duration_min", "cho_g")
EXERCISE_COORDS = ("start_min", "duration_min", "mm_frac", "o2_pct")


def read_event_samples(path: str | Path) -> dict[str, np.ndarray]:
    """Parse the event-sample CSV; blanks become NaN. Returns kind -> matrix."""
    rows: dict[str, list] = {"meal": [], "exercise": []}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != set(SAMPLE_COLUMNS):
            raise ConfigError(f"sample CSV must have columns {', '.join(SAMPLE_COLUMNS)}")
        for line_no, row in enumerate(reader, start=2):
            kind = row["event_kind"].strip()
            if kind not in rows:
                raise ConfigError(f"line {line_no}: unknown event_kind {kind!r}")
            cols = MEAL_COORDS if kind == "meal" else EXERCISE_COORDS
            try:
                rows[kind].append([float(row[c]) if row[c].strip() else np.nan for c in cols])
            except ValueError as exc:
                raise ConfigError(f"line {line_no}: {exc}") from exc
    return {k: np.array(v, dtype=float).reshape(-1, len(MEAL_COORDS if k == "meal" else EXERCISE_COORDS))
            for k, v in rows.items() if v}


def events_from_boxes(boxes: dict[str, BoxSet]) -> list[EventSpec]:
    """Uniform event specs spanning each box (what the tube construction consumes)."""
    events = []
    for kind, box in boxes.items():
        b = dict(zip(box.names, zip(box.lower, box.upper)))
        start = uniform(*b["start_min"])
        duration = uniform(*b["duration_min"])
        if kind == "meal":
            events.append(EventSpec("meal", start, duration, amount=uniform(*b["cho_g"]),
                                    name="meal"))
        else:
            events.append(EventSpec("exercise", start, duration, mm=uniform(*b["mm_frac"]),
                                    o2=uniform(*b["o2_pct"]), name="exercise"))
    return events


def build_sets_from_csv(path, epsilon: float, alpha: float, horizon: int = 300,
                        step: int = 1) -> tuple[dict[str, BoxSet], UncertaintyTube]:
    samples = read_event_samples(path)
    if not samples:
        raise SampleSizeError("sample file holds no events")
    boxes = {}
    bad = []
    for kind, data in samples.items():
        names = MEAL_COORDS if kind == "meal" else EXERCISE_COORDS
        try:
            boxes[kind] = box_from_samples(data, epsilon, alpha, names)
        except SampleSizeError as exc:
            bad.extend(f"{kind}.{c}" for c in exc.coordinates)
    if bad:
        raise SampleSizeError(f"insufficient samples for {', '.join(bad)}", bad)
    tube = tube_from_event_specs(events_from_boxes(boxes), horizon, step)
    tube.meta.update({"source": "samples", "epsilon": epsilon, "alpha": alpha,
                      "boxes": {k: b.to_dict() for k, b in boxes.items()}})
    return boxes, tube


# --------------------------------------------------------------------- k-means

@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list
    n_iter: int


def _sq_dist(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def kmeans_cluster(trajectories, k: int, rng: np.random.Generator,
                   max_iter: int = 300) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding on Euclidean trajectory distance.

    Stops when assignments no longer change. An emptied cluster is re-seeded
    at the point farthest from its current centroid.
    """
    x = np.asarray(trajectories, dtype=float)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= number of trajectories")
    if not np.all(np.isfinite(x)):
        raise ValueError("trajectories must be finite")

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centroids[j] = x[idx]
        closest = np.minimum(closest, ((x - centroids[j]) ** 2).sum(axis=1))

    assign = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dist(x, centroids)
        new_assign = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                far = d2[np.arange(n), assign].argmax()
                centroids[j] = x[far]
                assign[far] = j
    d2 = _sq_dist(x, centroids)
    inertia = float(d2[np.arange(n), assign].sum())
    return KMeansResult(assign, centroids, inertia, history, it)
