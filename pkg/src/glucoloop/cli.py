"""Command-line entry point: run, build-sets, feasibility, scenarios-list."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from glucoloop import __version__
from glucoloop.control import CONTROLLER_KINDS, ControlConfig
from glucoloop.errors import ConfigError, GlucoLoopError, SampleSizeError, SolverError
from glucoloop.estimation import MheConfig
from glucoloop.indicators import INDICATOR_COLUMNS, aggregate, compute_indicators
from glucoloop.model import (MGDL_PER_MMOLL, check_physiologic_feasibility, default_params,
                             dump_patient_params, find_steady_state, load_patient_params)
from glucoloop.scenarios import get_scenario, scenario_library
from glucoloop.simulation import ESTIMATOR_KINDS, TARGET_BG, run_batch
from glucoloop.uncertainty import build_sets_from_csv

log = logging.getLogger("glucoloop")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DEFAULT_OUT = "glucoloop_out"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="glucoloop", description="Closed-loop insulin control simulations.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate a batch of seeded repetitions")
    r.add_argument("--config", help="JSON run configuration; flags override it")
    r.add_argument("--patient", help="patient parameter JSON (default: built-in 75 kg)")
    r.add_argument("--scenario", help="library name or scenario JSON file")
    r.add_argument("--controller", choices=CONTROLLER_KINDS)
    r.add_argument("--estimator", choices=ESTIMATOR_KINDS)
    r.add_argument("--reps", type=_positive_int)
    r.add_argument("--seed", type=int)
    r.add_argument("--gamma", type=float, help="hypoglycemia penalty factor (>= 1)")
    r.add_argument("--noise-var", type=float, help="CGM noise variance q in (mmol/L)^2")
    r.add_argument("--out", help=f"output directory (default: $GLUCOLOOP_OUT or ./{DEFAULT_OUT})")
    r.add_argument("--jobs", type=_positive_int, help="parallel repetitions")

    b = sub.add_parser("build-sets", help="uncertainty tube from event samples")
    b.add_argument("--samples", required=True, help="event-sample CSV")
    b.add_argument("--epsilon", type=float, required=True)
    b.add_argument("--alpha", type=float, required=True)
    b.add_argument("--horizon", type=_positive_int, default=300)
    b.add_argument("--out", required=True, help="output JSON path")

    f = sub.add_parser("feasibility", help="steady state and physiologic feasibility")
    f.add_argument("--patient", help="patient parameter JSON")
    f.add_argument("--target-bg", type=float, default=TARGET_BG, help="mmol/L")

    sub.add_parser("scenarios-list", help="list the built-in scenarios")
    return p


# ------------------------------------------------------------------------ run

RUN_KEYS = {"patient", "scenario", "controller", "estimator", "reps", "seed", "gamma",
            "noise_var", "out", "jobs", "control", "mhe"}


def resolve_run_config(args) -> dict:
    cfg = {"patient": None, "scenario": "scenario1", "controller": "robust", "estimator": None,
           "reps": None, "seed": None, "gamma": None, "noise_var": None,
           "out": os.environ.get("GLUCOLOOP_OUT") or DEFAULT_OUT, "jobs": 1,
           "control": {}, "mhe": {}}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(doc) - RUN_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        cfg.update(doc)
    for key in ("patient", "scenario", "controller", "estimator", "reps", "seed", "gamma",
                "noise_var", "out", "jobs"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if cfg["estimator"] is None:
        cfg["estimator"] = "oracle" if cfg["controller"] == "perfect" else "mhe"
    if cfg["controller"] not in CONTROLLER_KINDS:
        raise ConfigError(f"controller must be one of {CONTROLLER_KINDS}")
    if cfg["estimator"] not in ESTIMATOR_KINDS:
        raise ConfigError(f"estimator must be one of {ESTIMATOR_KINDS}")
    if cfg["controller"] == "perfect" and cfg["estimator"] != "oracle":
        raise ConfigError("the perfect controller requires --estimator oracle")
    if cfg["patient"] and not Path(cfg["patient"]).is_file():
        raise ConfigError(f"patient file {cfg['patient']} does not exist")
    return cfg


def _write_csv(path: Path, header: dict, rows, columns):
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)


def _format_table(rows: list[tuple[str, dict]], with_estimation: bool) -> str:
    cols = list(INDICATOR_COLUMNS[:6]) + (list(INDICATOR_COLUMNS[6:]) if with_estimation else [])
    head = f"{'':<10}" + "".join(f"{c:>24}" for c in cols)
    lines = [head]
    for label, stats in rows:
        cells = "".join(f"{stats['mean'][c]:>13.3f} ± {stats['std'][c]:<8.3f}" for c in cols)
        lines.append(f"{label:<10}{cells}")
    return "\n".join(lines)


def cmd_run(args) -> int:
    cfg = resolve_run_config(args)
    params = load_patient_params(cfg["patient"]) if cfg["patient"] else default_params()
    scenario = get_scenario(cfg["scenario"])
    if cfg["noise_var"] is not None:
        scenario = scenario.with_overrides(noise_var_q=float(cfg["noise_var"]))
    seed = scenario.seed if cfg["seed"] is None else int(cfg["seed"])
    reps = scenario.repetitions if cfg["reps"] is None else int(cfg["reps"])
    control_kw = dict(cfg["control"])
    if cfg["gamma"] is not None:
        control_kw["gamma"] = float(cfg["gamma"])
    try:
        control_cfg = ControlConfig(**control_kw)
        mhe_cfg = MheConfig(**{"noise_var_q": max(scenario.noise_var_q, 1e-6), **cfg["mhe"]})
    except TypeError as exc:
        raise ConfigError(f"bad controller/estimator settings: {exc}") from exc

    out = Path(cfg["out"])
    run_dir = out / f"{scenario.name}_{cfg['controller']}_{cfg['estimator']}_seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    _, basal = find_steady_state(TARGET_BG, params)
    resolved = {"version": __version__, "scenario": scenario.to_dict(),
                "controller": cfg["controller"], "estimator": cfg["estimator"],
                "repetitions": reps, "seed": seed, "jobs": cfg["jobs"],
                "patient": dump_patient_params(params), "basal_mU_per_min": basal,
                "control": {k: v for k, v in dataclasses.asdict(control_cfg).items()
                            if k != "basal"},
                "mhe": dataclasses.asdict(mhe_cfg)}
    log.info("running %d repetitions of %s (%s + %s) into %s", reps, scenario.name,
             cfg["controller"], cfg["estimator"], run_dir)
    records = run_batch(scenario, cfg["controller"], cfg["estimator"], params, seed, reps,
                        control_cfg, mhe_cfg, int(cfg["jobs"]))

    inds = []
    failed = []
    for rec in records:
        path = run_dir / f"rep_{rec.repetition:03d}.csv"
        rec.write_csv(path)
        _prepend_header(path, {**resolved, "repetition": rec.repetition, "failed": rec.failed})
        inds.append(compute_indicators(rec))
        if rec.failed:
            failed.append(rec.repetition)
            log.error("repetition %d failed: %s", rec.repetition, rec.failure)
    agg = aggregate(records, inds)
    _write_csv(run_dir / "bands.csv", resolved, agg.bands_rows(),
               ["t", "BG_mean", "BG_sd", "insulin_mean", "insulin_sd"])
    summary = {"config": resolved, "aggregate": agg.as_dict(),
               "repetitions": [{"repetition": r.repetition, "failed": r.failed,
                                "failure": r.failure, **i.as_dict()}
                               for r, i in zip(records, inds)]}
    (run_dir / "indicators.json").write_text(json.dumps(summary, indent=1, default=_jsonable))
    print(_format_table([(cfg["controller"], agg.as_dict())], cfg["estimator"] != "oracle"))
    if failed:
        print(f"failed repetitions: {failed}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _prepend_header(path: Path, header: dict):
    body = path.read_text()
    path.write_text("# " + json.dumps(header, sort_keys=True, default=_jsonable) + "\n" + body)


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj)}")


# ------------------------------------------------------------------ build-sets

def cmd_build_sets(args) -> int:
    try:
        boxes, tube = build_sets_from_csv(args.samples, args.epsilon, args.alpha, args.horizon)
    except SampleSizeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for c in exc.coordinates:
            print(f"  insufficient samples: {c}", file=sys.stderr)
        return EXIT_FAIL
    tube.meta["provenance"] = {"samples": Path(args.samples).name, "epsilon": args.epsilon,
                               "alpha": args.alpha,
                               "S": {k: list(b.sample_size) for k, b in boxes.items()},
                               "s": {k: list(b.index) for k, b in boxes.items()}}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(tube.to_json())
    for kind, box in boxes.items():
        print(f"{kind}: " + ", ".join(f"{n}=[{lo:g}, {hi:g}]"
                                      for n, lo, hi in zip(box.names, box.lower, box.upper)))
    return EXIT_OK


# ----------------------------------------------------------------- feasibility

def cmd_feasibility(args) -> int:
    params = load_patient_params(args.patient) if args.patient else default_params()
    report = check_physiologic_feasibility(params)
    try:
        x0, basal = find_steady_state(args.target_bg, params)
    except SolverError as exc:
        print(f"steady state: FAILED ({exc})")
        return EXIT_FAIL
    g = x0[0] / params.VG
    print(f"basal insulin: {basal:.4f} mU/min ({basal * 60 / 1000:.4f} U/h)")
    print(f"steady-state BG: {g:.4f} mmol/L ({g * MGDL_PER_MMOLL:.1f} mg/dL)")
    print(f"BG at zero insulin: {report.zero_insulin_bg * MGDL_PER_MMOLL:.1f} mg/dL "
          f"({'ok' if report.zero_insulin_ok else 'FAIL'}, needs > 300)")
    print(f"BG at 15 U/h: {report.high_dose_bg * MGDL_PER_MMOLL:.1f} mg/dL "
          f"({'ok' if report.high_dose_ok else 'FAIL'}, needs < 100)")
    print("feasibility: " + ("PASS" if report.passed else "FAIL"))
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_scenarios_list(args) -> int:
    for name, sc in scenario_library().items():
        print(f"{name:<28}{sc.horizon_min:>6} min  {sc.description}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "build-sets": cmd_build_sets, "feasibility": cmd_feasibility,
            "scenarios-list": cmd_scenarios_list}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"glucoloop: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolverError as exc:
        print(f"glucoloop: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except GlucoLoopError as exc:
        print(f"glucoloop: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
