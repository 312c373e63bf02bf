"""Orchestration loop interconnecting the time-series detector's state
priors with the prior-augmented robust estimator.

Phase 1 runs plain robust estimation per tick with bad-data detection and
switch hypothesis tests.  Phase 2 predicts a per-tick state prior from the
history of estimates, applies it only where its epistemic bias passes the
gate (a fraction of the maximum bias seen on the same topology), flags
physics-consistent data falsification where the augmented and plain
solutions diverge while plain residuals stay clean, and corrects topology at
confirmed switches.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .detection import DistanceCache, predict_state_prior
from .errors import GridSenseError
from .estimators import (
    detect_bad_data,
    estimate_wlav,
    estimate_wlav_with_prior,
)
from .circuit import assemble
from .measurements import BAD_DATA, FDIA, LINE_OUTAGE, TOPOLOGY_ERROR
from .network import ACTIVE, INACTIVE, OPEN, GraphSnapshot, NodeBreakerCase

NONE_LABEL = "none"


@dataclass(frozen=True)
class SynergyConfig:
    max_loops: int = 1
    bias_gate_fraction: float = 0.30
    bad_data_threshold: float = 0.05
    topo_threshold: float = 0.01
    w_prior: float = 1.0
    fdia_divergence_factor: float = 5.0
    fdia_divergence_floor: float = 2e-3  # ignore noise-level disagreement
    v_band: tuple = (0.75, 1.25)

    def __post_init__(self):
        if not (0 < self.bias_gate_fraction < 1):
            raise ValueError("bias_gate_fraction must be in (0, 1)")
        if self.max_loops < 1:
            raise ValueError("max_loops must be >= 1")


@dataclass(frozen=True)
class TickDiagnosis:
    tick: int
    plain: object                      # EstimateResult
    augmented: object                  # EstimateResult (plain when no prior)
    alarms: object                     # AlarmSet
    root_cause: tuple                  # (kind, location) pairs
    corrected_topology: dict           # switch id -> corrected status
    prior_applied: bool = False
    prior_bias: float = float("nan")
    prior_delta_median: float = float("nan")
    abnormal_buses: tuple = ()         # solved |V| outside the band
    failed: bool = False

    def to_doc(self) -> dict:
        return {
            "schema_version": 1,
            "tick": self.tick,
            "root_cause": [list(map(_plain, rc)) for rc in self.root_cause],
            "prior_applied": self.prior_applied,
            "prior_bias": self.prior_bias,
            "corrected_topology": {
                str(k): v for k, v in self.corrected_topology.items()
            },
            "abnormal_buses": list(self.abnormal_buses),
            "failed": self.failed,
            "alarms": {
                "bad_pmu": list(self.alarms.bad_pmu),
                "bad_rtu": [list(x) for x in self.alarms.bad_rtu],
                "suspicious_switches": [
                    list(x) for x in self.alarms.suspicious_switches
                ],
            } if self.alarms is not None else None,
        }


def _plain(x):
    return list(x) if isinstance(x, tuple) else x


def _tick_model(case_or_nb, tick, corrected=None):
    """The estimation model a control room would build at this tick: base
    branch statuses from the reported snapshot, switch statuses from the
    status readings (optionally overridden by confirmed corrections)."""
    nb = case_or_nb if isinstance(case_or_nb, NodeBreakerCase) else None
    base = nb.base if nb else case_or_nb
    status = {
        br.id: (ACTIVE if br.id in tick.snapshot.edges else INACTIVE)
        for br in base.branches
    }
    tick_case = base.with_branch_status(status).scaled_loads(tick.load_factors)
    measurements = tick.measurements
    if nb is None:
        return tick_case, measurements
    reported = {s.switch: s.status for s in measurements.switch_status}
    if corrected:
        reported.update(corrected)
        measurements = replace(
            measurements,
            switch_status=tuple(
                replace(s, status=reported[s.switch])
                for s in measurements.switch_status
            ),
        )
    switches = tuple(
        replace(sw, measured_status=reported.get(sw.id, sw.measured_status))
        for sw in nb.switches
    )
    return (
        NodeBreakerCase(tick_case, switches, nb.pseudo_node_map),
        measurements,
    )


def classify_root_cause(result, alarms, config: SynergyConfig,
                        prev_statuses=None, fdia_flag=False,
                        switch_lines=None) -> tuple:
    """Typed, located labels from the sparse error indicators.

    A confirmed switch flip whose reported status never changed is an
    unreported line outage; a flip whose report changed against the physics
    is a false status report (topology error).
    """
    labels = []
    circuit = result.circuit
    seen = set()
    for kind, element, _ in circuit.noise_labels:
        if (kind, element) in seen or kind in ("sw", "vref"):
            continue
        seen.add((kind, element))
        if result.channel_magnitude(kind, element) > config.bad_data_threshold:
            meter = {"pmu_i": "pmu", "pmu_v": "pmu"}.get(kind, kind)
            labels.append((BAD_DATA, (meter, element)))
    for sw_id, measured, inferred in alarms.suspicious_switches:
        prev = (prev_statuses or {}).get(sw_id)
        if prev is not None and measured == prev:
            line = (switch_lines or {}).get(sw_id, sw_id)
            labels.append((LINE_OUTAGE, ("line", line)))
        else:
            labels.append((TOPOLOGY_ERROR, ("switch", sw_id)))
    if fdia_flag:
        labels.append((FDIA, ("all_continuous",)))
    if not labels:
        labels.append((NONE_LABEL, ()))
    return tuple(dict.fromkeys(labels))


def _abnormal_buses(result, bus_ids, band) -> tuple:
    lo, hi = band
    return tuple(
        b for b in bus_ids if not (lo <= abs(result.v[b]) <= hi)
    )


def _phase1_single(case_or_nb, tick, config):
    model, ms = _tick_model(case_or_nb, tick)
    circuit = assemble(model, ms)
    plain = estimate_wlav(circuit)
    alarms = detect_bad_data(
        plain,
        thresholds={
            "pmu": config.bad_data_threshold,
            "rtu": config.bad_data_threshold,
            "sw_suspect": config.topo_threshold,
        },
    )
    return plain, alarms


def run_synergy(series, case_or_nb, config=SynergyConfig(), jobs=1) -> list:
    """Full two-phase loop; returns one TickDiagnosis per tick."""
    if not series.ticks:
        raise GridSenseError("series is empty")
    nb = case_or_nb if isinstance(case_or_nb, NodeBreakerCase) else None
    base = nb.base if nb else case_or_nb
    switch_lines = {sw.id: sw.line for sw in nb.switches} if nb else {}
    physical_buses = [b.id for b in base.buses]

    # ---- phase 1: independent robust estimation per tick ----------------
    plain_results = {}
    alarms_by_tick = {}
    failed = set()
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                tick.t: pool.submit(_phase1_single, case_or_nb, tick, config)
                for tick in series.ticks
            }
            for t, fut in futures.items():
                try:
                    plain_results[t], alarms_by_tick[t] = fut.result()
                except Exception:
                    failed.add(t)
    else:
        for tick in series.ticks:
            try:
                plain_results[tick.t], alarms_by_tick[tick.t] = _phase1_single(
                    case_or_nb, tick, config
                )
            except Exception:
                failed.add(tick.t)

    # reported switch status trace for the outage-vs-false-report call
    prev_statuses = {}
    status_trace = {}
    for tick in series.ticks:
        status_trace[tick.t] = dict(prev_statuses)
        for s in tick.measurements.switch_status:
            prev_statuses[s.switch] = s.status

    # ---- phase 2: prior-augmented pass with bias gating ------------------
    corrected: dict = {t: {} for t in plain_results}
    augmented = dict(plain_results)
    prior_applied = {t: False for t in plain_results}
    prior_bias = {t: float("nan") for t in plain_results}
    prior_delta = {t: float("nan") for t in plain_results}
    fdia_flags = {t: False for t in plain_results}

    cache = DistanceCache(base)
    for _loop in range(config.max_loops):
        # history uses the latest (possibly corrected) estimates, no lookahead
        biases = {}
        priors = {}
        for k, tick in enumerate(series.ticks):
            if tick.t in failed or k == 0:
                continue
            hist_states, hist_topos = [], []
            for prev in series.ticks[:k]:
                if prev.t in failed:
                    continue
                est = augmented[prev.t]
                hist_states.append({b: est.v[b] for b in physical_buses})
                hist_topos.append(_corrected_snapshot(prev, corrected[prev.t],
                                                      switch_lines))
            if not hist_states:
                continue
            target = _corrected_snapshot(tick, corrected[tick.t], switch_lines)
            prior = predict_state_prior(hist_states, hist_topos, target, base,
                                        cache)
            priors[tick.t] = prior
            biases[tick.t] = prior.bias

        max_bias = {}
        for tick in series.ticks:
            if tick.t not in biases:
                continue
            topo = tick.snapshot.topology_id
            max_bias[topo] = max(max_bias.get(topo, 0.0), biases[tick.t])

        for tick in series.ticks:
            t = tick.t
            if t not in priors:
                continue
            topo = tick.snapshot.topology_id
            gate = (
                biases[t] < config.bias_gate_fraction * max_bias[topo]
                or max_bias[topo] == 0.0
            )
            prior_bias[t] = biases[t]
            if not gate or config.w_prior == 0.0:
                continue
            try:
                model, ms = _tick_model(case_or_nb, tick, corrected[t])
                circuit = assemble(model, ms)
                aug = estimate_wlav_with_prior(
                    circuit, priors[t], w_prior=config.w_prior
                )
            except Exception:
                continue
            augmented[t] = aug
            prior_applied[t] = True
            deltas = [priors[t].stats[b].delta for b in physical_buses]
            prior_delta[t] = float(np.median(deltas))
            plain = plain_results[t]
            div = max(
                abs(aug.v[b] - plain.v[b]) for b in physical_buses
            )
            gap_ref = max(prior_delta[t], config.fdia_divergence_floor)
            if (
                div > config.fdia_divergence_factor * gap_ref
                and alarms_by_tick[t].empty
            ):
                fdia_flags[t] = True

        # topology correction at confirmed switches (monotone per loop)
        for tick in series.ticks:
            t = tick.t
            if t in failed:
                continue
            for sw_id, measured, inferred in alarms_by_tick[t].suspicious_switches:
                corrected[t].setdefault(sw_id, inferred)

    # ---- assemble diagnoses ----------------------------------------------
    out = []
    for tick in series.ticks:
        t = tick.t
        if t in failed:
            out.append(TickDiagnosis(
                tick=t, plain=None, augmented=None, alarms=None,
                root_cause=((NONE_LABEL, ()),), corrected_topology={},
                failed=True,
            ))
            continue
        plain = plain_results[t]
        labels = classify_root_cause(
            plain, alarms_by_tick[t], config,
            prev_statuses=status_trace[t], fdia_flag=fdia_flags[t],
            switch_lines=switch_lines,
        )
        out.append(TickDiagnosis(
            tick=t,
            plain=plain,
            augmented=augmented[t],
            alarms=alarms_by_tick[t],
            root_cause=labels,
            corrected_topology=corrected[t],
            prior_applied=prior_applied[t],
            prior_bias=prior_bias[t],
            prior_delta_median=prior_delta[t],
            abnormal_buses=_abnormal_buses(plain, physical_buses,
                                           config.v_band),
        ))
    return out


def _corrected_snapshot(tick, corrections, switch_lines) -> GraphSnapshot:
    """Reported snapshot with confirmed switch corrections applied."""
    if not corrections:
        return tick.snapshot
    edges = set(tick.snapshot.edges)
    for sw_id, status in corrections.items():
        line = switch_lines.get(sw_id)
        if line is None:
            continue
        if status == OPEN:
            edges.discard(line)
        else:
            edges.add(line)
    return GraphSnapshot.from_edges(edges)


def summarize(diagnoses, series) -> dict:
    """Per-anomaly-type precision/recall against the series labels."""
    kinds = (LINE_OUTAGE, BAD_DATA, TOPOLOGY_ERROR, FDIA)
    truth = {k: set() for k in kinds}
    for tick in series.ticks:
        for label in tick.labels:
            truth[label.kind].add(tick.t)
    found = {k: set() for k in kinds}
    for diag in diagnoses:
        for kind, _loc in diag.root_cause:
            if kind in found:
                found[kind].add(diag.tick)
    summary = {"schema_version": 1, "ticks": len(diagnoses), "by_kind": {}}
    for k in kinds:
        tp = len(truth[k] & found[k])
        fp = len(found[k] - truth[k])
        fn = len(truth[k] - found[k])
        summary["by_kind"][k] = {
            "truth": len(truth[k]),
            "found": len(found[k]),
            "precision": tp / (tp + fp) if tp + fp else None,
            "recall": tp / (tp + fn) if tp + fn else None,
        }
    return summary
