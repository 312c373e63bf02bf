"""Command-line front end: case files in, JSON results and a run manifest out.

Subcommands
    simulate pf|infeas|localize   power-flow family on a case file
    estimate                      WLS / WLAV / prior-augmented estimation
    detect                        time-series anomaly scoring
    synergy                       the full estimator/detector loop
    gen                           synthetic time-series fixtures

Every command writes its primary JSON output plus a ``<out>.manifest.json``
recording command, inputs, config and seed, so runs are reproducible.
Exit codes: 0 success, 1 solver failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import GridSenseError, PowerFlowDivergence
from .network import parse_any_case, NodeBreakerCase

SCHEMA_VERSION = 1


def _manifest(args, command, extra=None) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "argv": sys.argv[1:],
        "tool_version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "seed": getattr(args, "seed", None),
    }
    for key in ("case", "series", "measurements", "out"):
        if getattr(args, key, None):
            doc[key] = str(getattr(args, key))
    if extra:
        doc["config"] = extra
    return doc


def _write_output(args, payload, manifest):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.write_text(text + "\n")
        Path(str(out) + ".manifest.json").write_text(
            json.dumps(manifest, indent=2) + "\n"
        )
    else:
        print(text)


def _load_case(path):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"case file not found: {path}")
    return parse_any_case(p.read_text())


def _load_series(path):
    from .measurements import series_from_jsonl

    p = Path(path)
    if not p.exists():
        raise UsageError(f"series file not found: {path}")
    return series_from_jsonl(p.read_text())


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from . import powerflow as pf

    case = _load_case(args.case)
    if isinstance(case, NodeBreakerCase):
        case = case.base
    if args.load_factor != 1.0:
        case = pf.apply_load_factor(case, args.load_factor)
    extra = {
        "mode": args.mode, "load_factor": args.load_factor,
        "ch": args.ch, "cl": args.cl, "k": args.k, "shrink": args.shrink,
    }
    try:
        if args.mode == "pf":
            res = pf.solve_powerflow(case)
        elif args.mode == "infeas":
            res = pf.solve_infeasibility_quantified(case)
        else:
            cfg = pf.EnforcerConfig(c_h=args.ch, c_l=args.cl, k=args.k,
                                    r=args.shrink)
            res = pf.localize_infeasibility(case, cfg)
    except PowerFlowDivergence as exc:
        print(f"power flow diverged: {exc}", file=sys.stderr)
        return 1
    payload = {
        "schema_version": SCHEMA_VERSION,
        "status": res.status,
        "iterations": res.iterations,
        "support": list(res.support),
        "objective": res.objective,
        "v": {str(b): [v.real, v.imag] for b, v in res.v.items()},
        "n_magnitude": {str(b): abs(n) for b, n in res.n_infeas.items()},
        "rounds": [list(r) for r in res.trace],
    }
    _write_output(args, payload, _manifest(args, "simulate", extra))
    return 0 if res.status == "converged" else 1


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------


def cmd_estimate(args) -> int:
    from . import estimators as est
    from .measurements import _ms_from_doc

    case = _load_case(args.case)
    mpath = Path(args.measurements)
    if not mpath.exists():
        raise UsageError(f"measurements file not found: {args.measurements}")
    ms = _ms_from_doc(json.loads(mpath.read_text()))
    prior = None
    if args.method == "wlav-prior":
        if not args.prior:
            raise UsageError("--method wlav-prior requires --prior")
        from .detection import BusPriorStats, Prior

        doc = json.loads(Path(args.prior).read_text())
        prior = Prior(
            stats={
                int(b): BusPriorStats(s["mu_re"], s["mu_im"], s["delta"])
                for b, s in doc["stats"].items()
            },
            bias=doc.get("bias", 0.0),
        )
    thresholds = json.loads(args.thresholds) if args.thresholds else None
    method = {"wls": est.WLS, "wlav": est.WLAV, "wlav-prior": est.WLAV_PRIOR}[
        args.method
    ]
    try:
        result = est.estimate(case, ms, method=method, prior=prior,
                              w_prior=args.w_prior)
    except GridSenseError as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return 1
    alarms = est.detect_bad_data(result, thresholds=thresholds)
    payload = result.to_report()
    payload["alarms"] = {
        "bad_pmu": list(alarms.bad_pmu),
        "bad_rtu": [list(x) for x in alarms.bad_rtu],
        "suspicious_switches": [list(x) for x in alarms.suspicious_switches],
        "thresholds": alarms.thresholds,
    }
    _write_output(args, payload, _manifest(
        args, "estimate", {"method": args.method, "w_prior": args.w_prior}
    ))
    return 0


# ---------------------------------------------------------------------------
# detect / synergy / gen
# ---------------------------------------------------------------------------


def cmd_detect(args) -> int:
    from .detection import run_detector

    case = _load_case(args.case)
    base = case.base if isinstance(case, NodeBreakerCase) else case
    series = _load_series(args.series)
    sensors = [int(s) for s in args.sensors.split(",")] if args.sensors else None
    if sensors is None:
        # default: every bus that has an adjacent metered line
        metered = set()
        for tick in series.ticks[:1]:
            for r in tick.measurements.rtu_line:
                br = base.branch(r.branch)
                metered.update((br.from_bus, br.to_bus))
        sensors = sorted(metered)
    if not sensors:
        raise UsageError("no sensors: provide --sensors or line meters")
    report = run_detector(series, base, sensors, distance_mode=args.distance,
                          threshold=args.threshold, start=args.start)
    k = args.top_k or len(series.labeled_ticks()) or 10
    top = report.top_k(k)
    labeled = set(series.labeled_ticks())
    payload = {
        "schema_version": SCHEMA_VERSION,
        "distance": args.distance,
        "scores": [[s.t, s.score] for s in report.scores],
        "top_k": list(top),
        "flagged": list(report.flagged),
    }
    if labeled:
        hit = len(set(top) & labeled)
        payload["precision_at_k"] = hit / len(top) if top else None
        payload["k"] = k
    _write_output(args, payload, _manifest(
        args, "detect", {"distance": args.distance, "top_k": k}
    ))
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


def cmd_synergy(args) -> int:
    from .synergy import SynergyConfig, run_synergy, summarize

    case = _load_case(args.case)
    series = _load_series(args.series)
    config = SynergyConfig(
        max_loops=args.loops,
        w_prior=args.w_prior,
        bad_data_threshold=args.bad_data_threshold,
        topo_threshold=args.topo_threshold,
    )
    diagnoses = run_synergy(series, case, config, jobs=args.jobs)
    summary = summarize(diagnoses, series)
    if args.out:
        lines = [json.dumps(d.to_doc()) for d in diagnoses]
        Path(args.out).write_text("\n".join(lines) + "\n")
        Path(str(args.out) + ".summary.json").write_text(
            json.dumps(summary, indent=2) + "\n"
        )
        Path(str(args.out) + ".manifest.json").write_text(
            json.dumps(_manifest(args, "synergy", {
                "loops": args.loops, "w_prior": args.w_prior,
            }), indent=2) + "\n"
        )
    else:
        print(json.dumps(summary, indent=2))
    return 0


def cmd_gen(args) -> int:
    from . import measurements as msm
    from . import powerflow as pf

    case = _load_case(args.case)
    base = case.base if isinstance(case, NodeBreakerCase) else case
    profile = msm.SinusoidProfile(
        amplitude=args.load_amplitude, noise_std=args.load_noise
    ) if args.load_amplitude > 0 else msm.ConstantProfile()
    placement = None
    if args.line_meters:
        ids = [int(x) for x in args.line_meters.split(",")]
        placement = msm.default_placement(base, rtu_line_branches=ids)
    series = msm.generate_timeseries(
        case, n_ticks=args.ticks, topo_change_period=args.period,
        load_profile=profile, sigma=args.sigma, placement=placement,
        seed=args.seed,
    )
    if args.anomalies:
        rng = np.random.default_rng(args.seed + 1)
        doc = json.loads(Path(args.anomalies).read_text())
        for entry in doc:
            spec = msm.AnomalySpec(
                kind=entry["kind"],
                locations=tuple(
                    tuple(l) if isinstance(l, list) else l
                    for l in entry["locations"]
                ),
                magnitude=entry.get("magnitude", 1.0),
            )
            series = msm.inject_anomaly(series, entry["tick"], spec, case, rng)
    out = Path(args.out)
    out.write_text(msm.series_to_jsonl(series))
    Path(str(out) + ".manifest.json").write_text(
        json.dumps(_manifest(args, "gen", {
            "ticks": args.ticks, "period": args.period, "sigma": args.sigma,
        }), indent=2) + "\n"
    )
    if args.csv:
        Path(args.csv).write_text(msm.series_to_csv(series))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gridsense",
        description="circuit-based grid simulation, estimation and detection",
    )
    p.add_argument("--log-level", default=None, help="override GRIDSENSE_LOG")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="power-flow family")
    sim.add_argument("mode", choices=["pf", "infeas", "localize"])
    sim.add_argument("--case", required=True)
    sim.add_argument("--load-factor", type=float, default=1.0)
    sim.add_argument("--ch", type=float, default=10.0)
    sim.add_argument("--cl", type=float, default=0.1)
    sim.add_argument("--k", type=int, default=None)
    sim.add_argument("--shrink", type=float, default=0.75)
    sim.add_argument("--out", default=None)
    sim.set_defaults(func=cmd_simulate)

    es = sub.add_parser("estimate", help="state estimation")
    es.add_argument("--case", required=True)
    es.add_argument("--measurements", required=True)
    es.add_argument("--method", choices=["wls", "wlav", "wlav-prior"],
                    default="wlav")
    es.add_argument("--prior", default=None)
    es.add_argument("--w-prior", type=float, default=1.0)
    es.add_argument("--thresholds", default=None,
                    help='JSON like {"pmu":0.1,"rtu":0.1,"sw_suspect":0.05}')
    es.add_argument("--out", default=None)
    es.set_defaults(func=cmd_estimate)

    de = sub.add_parser("detect", help="time-series anomaly scoring")
    de.add_argument("--case", required=True)
    de.add_argument("--series", required=True)
    de.add_argument("--distance", choices=["global", "local"], default="global")
    de.add_argument("--sensors", default=None, help="comma-separated bus ids")
    de.add_argument("--top-k", type=int, default=None)
    de.add_argument("--start", type=int, default=10,
                    help="first tick to score (earlier ticks are history)")
    de.add_argument("--threshold", type=float, default=None)
    de.add_argument("--csv", default=None)
    de.add_argument("--out", default=None)
    de.set_defaults(func=cmd_detect)

    sy = sub.add_parser("synergy", help="estimator/detector loop")
    sy.add_argument("--case", required=True)
    sy.add_argument("--series", required=True)
    sy.add_argument("--loops", type=int, default=1)
    sy.add_argument("--w-prior", type=float, default=1.0)
    sy.add_argument("--bad-data-threshold", type=float, default=0.05)
    sy.add_argument("--topo-threshold", type=float, default=0.01)
    sy.add_argument("--jobs", type=int, default=1)
    sy.add_argument("--out", default=None)
    sy.set_defaults(func=cmd_synergy)

    ge = sub.add_parser("gen", help="generate a synthetic time series")
    ge.add_argument("--case", required=True)
    ge.add_argument("--ticks", type=int, default=120)
    ge.add_argument("--period", type=int, default=60)
    ge.add_argument("--sigma", type=float, default=0.001)
    ge.add_argument("--seed", type=int, default=0)
    ge.add_argument("--anomalies", default=None, help="JSON spec file")
    ge.add_argument("--load-amplitude", type=float, default=0.03)
    ge.add_argument("--load-noise", type=float, default=0.005)
    ge.add_argument("--line-meters", default=None,
                    help="comma-separated branch ids for RTU line meters")
    ge.add_argument("--csv", default=None)
    ge.add_argument("--out", required=True)
    ge.set_defaults(func=cmd_gen)
    return p


def main(argv=None) -> int:
    import logging
    import os

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    level = args.log_level or os.environ.get("GRIDSENSE_LOG", "WARNING")
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.WARNING))
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (GridSenseError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
