"""Meter readings, synthetic measurement generation, time series, and
anomaly injection.

Readings carry net-injection conventions: RTU p/q are the net power injected
at the bus (generation minus load), line flows are measured at ``end_bus``
flowing into the branch.  All stochastic operations take an explicit
numpy Generator so runs are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CaseValidationError, GridSenseError
from .network import (
    ACTIVE,
    CLOSED,
    INACTIVE,
    OPEN,
    GraphSnapshot,
    GridCase,
    NodeBreakerCase,
    extended_admittance,
    admittance_matrix,
)

LINE_OUTAGE = "line_outage"
BAD_DATA = "bad_data"
TOPOLOGY_ERROR = "topology_error"
FDIA = "fdia"
ANOMALY_KINDS = (LINE_OUTAGE, BAD_DATA, TOPOLOGY_ERROR, FDIA)


@dataclass(frozen=True)
class RtuBusReading:
    bus: int
    p: float
    q: float
    v_mag: float
    sigma: float


@dataclass(frozen=True)
class PmuBusReading:
    bus: int
    v_re: float
    v_im: float
    i_re: float
    i_im: float
    sigma: float


@dataclass(frozen=True)
class RtuLineReading:
    branch: int
    end_bus: int
    p_flow: float
    q_flow: float
    v_mag: float
    sigma: float


@dataclass(frozen=True)
class PmuLineReading:
    branch: int
    i_re: float
    i_im: float
    sigma: float


@dataclass(frozen=True)
class SwitchStatusReading:
    switch: int
    status: str


@dataclass(frozen=True)
class MeasurementSet:
    rtu_bus: tuple[RtuBusReading, ...] = ()
    pmu_bus: tuple[PmuBusReading, ...] = ()
    rtu_line: tuple[RtuLineReading, ...] = ()
    pmu_line: tuple[PmuLineReading, ...] = ()
    switch_status: tuple[SwitchStatusReading, ...] = ()

    def __post_init__(self):
        seen = set()
        for r in list(self.rtu_bus) + list(self.pmu_bus):
            if r.bus in seen:
                raise CaseValidationError(
                    f"more than one bus meter at bus {r.bus}", r.bus
                )
            seen.add(r.bus)
        for r in self.continuous_readings():
            if r.sigma <= 0:
                raise CaseValidationError(
                    f"sigma must be positive on {type(r).__name__}", r
                )

    def continuous_readings(self):
        return (
            list(self.rtu_bus) + list(self.pmu_bus)
            + list(self.rtu_line) + list(self.pmu_line)
        )

    def validate_against(self, builder):
        for r in list(self.rtu_bus) + list(self.pmu_bus):
            if r.bus not in builder.node_pos:
                raise CaseValidationError(
                    f"meter references unknown bus {r.bus}", r.bus
                )
        for r in list(self.rtu_line) + list(self.pmu_line):
            if r.branch not in builder.branch_by_id:
                raise CaseValidationError(
                    f"line meter references unknown branch {r.branch}", r.branch
                )
        known_sw = {sw.id for sw in builder.switch_defs}
        for s in self.switch_status:
            if s.switch not in known_sw:
                raise CaseValidationError(
                    f"status reading references unknown switch {s.switch}",
                    s.switch,
                )

    def channels(self) -> tuple:
        """All continuous channel addresses in (kind, element, field) form."""
        out = []
        for r in self.rtu_bus:
            out += [("rtu", r.bus, fld) for fld in ("p", "q", "v_mag")]
        for r in self.pmu_bus:
            out += [("pmu", r.bus, fld) for fld in ("v_re", "v_im", "i_re", "i_im")]
        for r in self.rtu_line:
            out += [("rtu_line", r.branch, fld) for fld in ("p_flow", "q_flow", "v_mag")]
        for r in self.pmu_line:
            out += [("pmu_line", r.branch, fld) for fld in ("i_re", "i_im")]
        return tuple(out)

    def with_channel_offset(self, channel, delta) -> "MeasurementSet":
        kind, element, fld = channel
        def bump(r):
            return replace(r, **{fld: getattr(r, fld) + delta})

        if kind == "rtu":
            return replace(self, rtu_bus=tuple(
                bump(r) if r.bus == element else r for r in self.rtu_bus))
        if kind == "pmu":
            return replace(self, pmu_bus=tuple(
                bump(r) if r.bus == element else r for r in self.pmu_bus))
        if kind == "rtu_line":
            return replace(self, rtu_line=tuple(
                bump(r) if r.branch == element else r for r in self.rtu_line))
        if kind == "pmu_line":
            return replace(self, pmu_line=tuple(
                bump(r) if r.branch == element else r for r in self.pmu_line))
        raise KeyError(channel)

    def with_switch_flips(self, switch_ids) -> "MeasurementSet":
        flip = {OPEN: CLOSED, CLOSED: OPEN}
        todo = set(switch_ids)
        unknown = todo - {s.switch for s in self.switch_status}
        if unknown:
            raise CaseValidationError(f"unknown switches {sorted(unknown)}")
        return replace(self, switch_status=tuple(
            replace(s, status=flip[s.status]) if s.switch in todo else s
            for s in self.switch_status
        ))


@dataclass(frozen=True)
class AnomalySpec:
    """One injected anomaly: what kind, where, how strong.

    ``locations`` are channel triples for bad_data, switch ids for
    topology_error, branch ids for line_outage, and load-bus ids for fdia.
    ``magnitude`` is the p.u. deviation for bad_data and the load scale
    factor for fdia.
    """

    kind: str
    locations: tuple
    magnitude: float = 1.0

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise CaseValidationError(f"unknown anomaly kind {self.kind!r}")
        if not self.locations:
            raise CaseValidationError("anomaly locations must be nonempty")
        if self.magnitude <= 0:
            raise CaseValidationError("anomaly magnitude must be positive")


@dataclass(frozen=True)
class AnomalyLabel:
    tick: int
    kind: str
    locations: tuple
    channels: tuple  # every mutated channel address


@dataclass(frozen=True)
class Tick:
    t: int
    snapshot: GraphSnapshot            # reported topology
    measurements: MeasurementSet
    truth: dict | None = None          # node id -> complex true voltage
    labels: tuple = ()
    load_factors: dict = field(default_factory=dict)
    truth_edges: frozenset = frozenset()  # actual topology (may differ)


@dataclass(frozen=True)
class TimeSeries:
    ticks: tuple[Tick, ...]

    def __post_init__(self):
        ts = [tk.t for tk in self.ticks]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise CaseValidationError("tick times must be strictly increasing")

    def __len__(self):
        return len(self.ticks)

    def tick(self, t: int) -> Tick:
        for tk in self.ticks:
            if tk.t == t:
                return tk
        raise KeyError(t)

    def with_tick(self, new: Tick) -> "TimeSeries":
        return TimeSeries(tuple(new if tk.t == new.t else tk for tk in self.ticks))

    def labeled_ticks(self) -> tuple:
        return tuple(tk.t for tk in self.ticks if tk.labels)


# ---------------------------------------------------------------------------
# placement & generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Placement:
    pmu_buses: tuple = ()
    rtu_buses: tuple = ()
    rtu_line_branches: tuple = ()
    pmu_line_branches: tuple = ()


def default_placement(case: GridCase, rtu_line_branches=()) -> Placement:
    """PMUs on every generation bus, RTUs on every load bus, RTU line meters
    on the caller-given branch subset."""
    pmu = case.generator_buses()
    rtu = tuple(b for b in case.load_buses() if b not in pmu)
    return Placement(
        pmu_buses=pmu, rtu_buses=rtu,
        rtu_line_branches=tuple(rtu_line_branches),
    )


def _truth_system(case_or_nb, statuses=None):
    """(Y, node list) of the network that actually generated the data."""
    if isinstance(case_or_nb, NodeBreakerCase):
        return extended_admittance(case_or_nb, statuses=statuses)
    return admittance_matrix(case_or_nb), case_or_nb.buses


def solve_truth(case_or_nb, warm=None):
    """Power-flow truth for measurement generation.

    For a node-breaker case the extended network is solved: closed switches
    become low-impedance branches and pseudo buses zero-injection nodes, so
    clean data is exactly consistent with the estimator's circuit model.
    """
    from .powerflow import solve_powerflow

    if isinstance(case_or_nb, NodeBreakerCase):
        nb = case_or_nb
        nodes = nb.network_nodes()
        branches = list(nb.network_branches())
        next_id = max(br.id for br in nb.base.branches) + 1
        statuses = nb.true_statuses()
        from .network import Branch

        for k, sw in enumerate(nb.switches):
            if statuses[sw.id] == CLOSED:
                branches.append(Branch(next_id + k, sw.from_bus, sw.to_bus,
                                       0.0, 1.0e-4))
        import warnings as _w
        from .network import IslandWarning

        with _w.catch_warnings():
            _w.simplefilter("ignore", IslandWarning)
            shell = GridCase(nb.base.base_mva, nodes, tuple(branches))
        res = solve_powerflow(shell, init=warm if warm is not None else "flat")
        return res
    return solve_powerflow(case_or_nb, init=warm if warm is not None else "flat")


def generate_measurements(case_or_nb, solution, sigma, placement=None,
                          rng=None) -> MeasurementSet:
    """Exact readings implied by a voltage solution plus Gaussian noise.

    ``solution`` maps node id to complex voltage (a PfResult.v works).
    Injection currents are read off the truth network's admittance, so PV/
    slack reactive outputs need not be supplied separately.
    """
    from .powerflow import PfResult

    if isinstance(solution, PfResult):
        solution = solution.v
    rng = np.random.default_rng(0) if rng is None else rng
    base = case_or_nb.base if isinstance(case_or_nb, NodeBreakerCase) else case_or_nb
    if placement is None:
        placement = default_placement(base)
    y, nodes = _truth_system(case_or_nb)
    pos = {b.id: k for k, b in enumerate(nodes)}
    v = np.array([solution[b.id] for b in nodes])
    inj = y @ v  # net injected current at every node

    def noise():
        return float(rng.normal(0.0, sigma)) if sigma > 0 else 0.0

    if isinstance(case_or_nb, NodeBreakerCase):
        branches = {br.id: br for br in case_or_nb.network_branches()}
    else:
        branches = {br.id: br for br in base.branches}

    rtu = []
    for b in placement.rtu_buses:
        if b not in pos:
            raise CaseValidationError(f"placement references unknown bus {b}", b)
        s = v[pos[b]] * np.conj(inj[pos[b]])
        rtu.append(RtuBusReading(
            bus=b, p=s.real + noise(), q=s.imag + noise(),
            v_mag=abs(v[pos[b]]) + noise(), sigma=max(sigma, 1e-12),
        ))
    pmu = []
    for b in placement.pmu_buses:
        if b not in pos:
            raise CaseValidationError(f"placement references unknown bus {b}", b)
        pmu.append(PmuBusReading(
            bus=b,
            v_re=v[pos[b]].real + noise(), v_im=v[pos[b]].imag + noise(),
            i_re=inj[pos[b]].real + noise(), i_im=inj[pos[b]].imag + noise(),
            sigma=max(sigma, 1e-12),
        ))

    def flow_current(br):
        """Complex current leaving the metered end into the branch."""
        end = br.to_bus if br.from_bus not in pos or _is_pseudo(case_or_nb, br.from_bus) else br.from_bus
        other = br.to_bus if end == br.from_bus else br.from_bus
        if br.status != ACTIVE:
            return end, 1j * br.b_sh / 2.0 * v[pos[end]] * 0.0
        i = br.admittance * (v[pos[end]] - v[pos[other]]) \
            + 1j * br.b_sh / 2.0 * v[pos[end]]
        return end, i

    rtu_line = []
    for bid in placement.rtu_line_branches:
        if bid not in branches:
            raise CaseValidationError(f"placement references unknown branch {bid}", bid)
        br = branches[bid]
        end, i = flow_current(br)
        s = v[pos[end]] * np.conj(i)
        rtu_line.append(RtuLineReading(
            branch=bid, end_bus=end,
            p_flow=s.real + noise(), q_flow=s.imag + noise(),
            v_mag=abs(v[pos[end]]) + noise(), sigma=max(sigma, 1e-12),
        ))
    pmu_line = []
    for bid in placement.pmu_line_branches:
        if bid not in branches:
            raise CaseValidationError(f"placement references unknown branch {bid}", bid)
        br = branches[bid]
        end, i = flow_current(br)
        pmu_line.append(PmuLineReading(
            branch=bid, i_re=i.real + noise(), i_im=i.imag + noise(),
            sigma=max(sigma, 1e-12),
        ))

    switch_status = ()
    if isinstance(case_or_nb, NodeBreakerCase):
        statuses = case_or_nb.true_statuses()
        switch_status = tuple(
            SwitchStatusReading(sw.id, statuses[sw.id])
            for sw in case_or_nb.switches
        )
    return MeasurementSet(
        rtu_bus=tuple(rtu), pmu_bus=tuple(pmu), rtu_line=tuple(rtu_line),
        pmu_line=tuple(pmu_line), switch_status=switch_status,
    )


def _is_pseudo(case_or_nb, bus_id) -> bool:
    if isinstance(case_or_nb, NodeBreakerCase):
        return bus_id in {p for p, _ in case_or_nb.pseudo_node_map}
    return False


# ---------------------------------------------------------------------------
# load profiles & time series
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstantProfile:
    def factors(self, n_ticks, n_buses, rng):
        return np.ones((n_ticks, n_buses))


@dataclass(frozen=True)
class SinusoidProfile:
    """Slow daily-style swing plus small per-tick Gaussian jitter."""

    amplitude: float = 0.03
    period_ticks: int = 300
    noise_std: float = 0.005

    def factors(self, n_ticks, n_buses, rng):
        t = np.arange(n_ticks)[:, None]
        phase = rng.uniform(0, 2 * np.pi, size=n_buses)[None, :]
        base = 1.0 + self.amplitude * np.sin(
            2 * np.pi * t / self.period_ticks + phase
        )
        if self.noise_std > 0:
            base = base + rng.normal(0.0, self.noise_std, size=(n_ticks, n_buses))
        return base


def _connected(case: GridCase) -> bool:
    return not case.islanded_buses


def _swap_topology(case: GridCase, rng, max_tries=40):
    """Swap one random active line for an inactive one, keeping the grid
    connected.  Returns the new case or None when no valid swap exists."""
    import warnings as _w
    from .network import IslandWarning

    active = [br.id for br in case.branches if br.status == ACTIVE]
    inactive = [br.id for br in case.branches if br.status == INACTIVE]
    if not inactive or len(active) < 2:
        return None
    for _ in range(max_tries):
        out = int(rng.choice(active))
        back = int(rng.choice(inactive))
        with _w.catch_warnings():
            _w.simplefilter("ignore", IslandWarning)
            trial = case.with_branch_status({out: INACTIVE, back: ACTIVE})
        if _connected(trial):
            return trial
    return None


def generate_timeseries(
    case_or_nb,
    n_ticks: int,
    topo_change_period: int,
    load_profile=None,
    sigma: float = 0.001,
    placement=None,
    seed: int = 0,
) -> TimeSeries:
    """Synthetic operating history: per-tick loads, scheduled topology swaps,
    power-flow truth, and noisy measurements.

    Every ``topo_change_period`` ticks one active line is swapped against an
    inactive one (connectivity preserving; a warning label is skipped and the
    topology held when no swap exists).  Deterministic for a fixed seed.
    """
    import warnings

    if n_ticks < 1:
        raise ValueError("n_ticks must be >= 1")
    rng = np.random.default_rng(seed)
    nb = case_or_nb if isinstance(case_or_nb, NodeBreakerCase) else None
    base = nb.base if nb else case_or_nb
    if placement is None:
        placement = default_placement(base)
    profile = load_profile or ConstantProfile()
    bus_ids = [b.id for b in base.buses]
    factors = profile.factors(n_ticks, len(bus_ids), rng)

    ticks = []
    current = base
    warm = None
    for t in range(n_ticks):
        if topo_change_period > 0 and t > 0 and t % topo_change_period == 0:
            swapped = _swap_topology(current, rng)
            if swapped is None:
                warnings.warn("no connectivity-preserving swap; topology held")
            else:
                current = swapped
                warm = None
        fac = {b: float(factors[t, k]) for k, b in enumerate(bus_ids)}
        tick_case = current.scaled_loads(fac)
        if nb:
            tick_nb = NodeBreakerCase(
                tick_case,
                tuple(
                    replace(
                        sw,
                        measured_status=(
                            CLOSED
                            if tick_case.branch(sw.line).status == ACTIVE
                            else OPEN
                        ),
                    )
                    for sw in nb.switches
                ),
                nb.pseudo_node_map,
            )
            subject = tick_nb
        else:
            subject = tick_case
        truth = solve_truth(subject, warm=warm)
        warm = truth
        ms = generate_measurements(subject, truth, sigma, placement, rng)
        snap = tick_case.snapshot()
        ticks.append(
            Tick(
                t=t, snapshot=snap, measurements=ms, truth=dict(truth.v),
                labels=(), load_factors=fac, truth_edges=snap.edges,
            )
        )
    return TimeSeries(tuple(ticks))


# ---------------------------------------------------------------------------
# anomaly injection
# ---------------------------------------------------------------------------


def _rebuild_subject(case_or_nb, tick, truth_statuses=None, outage=None):
    """Reconstruct the tick's physical case with optional truth edits."""
    nb = case_or_nb if isinstance(case_or_nb, NodeBreakerCase) else None
    base = nb.base if nb else case_or_nb
    status = {
        br.id: (ACTIVE if br.id in tick.truth_edges else INACTIVE)
        for br in base.branches
    }
    if outage:
        for bid in outage:
            status[bid] = INACTIVE
    tick_case = base.with_branch_status(status).scaled_loads(tick.load_factors)
    if nb:
        return NodeBreakerCase(
            tick_case,
            tuple(
                replace(
                    sw,
                    measured_status=(
                        CLOSED if tick_case.branch(sw.line).status == ACTIVE else OPEN
                    ),
                )
                for sw in nb.switches
            ),
            nb.pseudo_node_map,
        )
    return tick_case


def inject_anomaly(series: TimeSeries, tick_t: int, spec: AnomalySpec,
                   case_or_nb, rng=None) -> TimeSeries:
    """Return a new series with one anomaly injected at the given tick.

    bad_data offsets chosen channels; topology_error flips reported switch
    statuses without touching the physics; line_outage re-solves the truth
    with branches removed while the reported topology goes stale; fdia
    replaces every continuous reading with data consistent with the
    attacker's own power flow at scaled loads, leaving switch data intact.
    """
    rng = np.random.default_rng(1) if rng is None else rng
    tick = series.tick(tick_t)
    base = case_or_nb.base if isinstance(case_or_nb, NodeBreakerCase) else case_or_nb
    sigma = None
    for r in tick.measurements.continuous_readings():
        sigma = r.sigma
        break
    if sigma is None:
        raise GridSenseError("tick has no continuous readings to perturb")

    if spec.kind == BAD_DATA:
        ms = tick.measurements
        for ch in spec.locations:
            ms = ms.with_channel_offset(tuple(ch), spec.magnitude)
        label = AnomalyLabel(tick_t, BAD_DATA, tuple(map(tuple, spec.locations)),
                             tuple(map(tuple, spec.locations)))
        new = replace(tick, measurements=ms, labels=tick.labels + (label,))
        return series.with_tick(new)

    if spec.kind == TOPOLOGY_ERROR:
        ms = tick.measurements.with_switch_flips(spec.locations)
        channels = tuple(("sw", s, "status") for s in spec.locations)
        label = AnomalyLabel(tick_t, TOPOLOGY_ERROR, tuple(spec.locations), channels)
        new = replace(tick, measurements=ms, labels=tick.labels + (label,))
        return series.with_tick(new)

    if spec.kind == LINE_OUTAGE:
        subject = _rebuild_subject(case_or_nb, tick, outage=spec.locations)
        truth = solve_truth(subject)
        placement = _placement_from(tick.measurements)
        ms = generate_measurements(subject, truth, sigma, placement, rng)
        # the outage is unreported: keep the pre-outage switch statuses
        ms = replace(ms, switch_status=tick.measurements.switch_status)
        label = AnomalyLabel(
            tick_t, LINE_OUTAGE, tuple(spec.locations),
            tick.measurements.channels(),
        )
        new = replace(
            tick, measurements=ms, truth=dict(truth.v),
            labels=tick.labels + (label,),
            truth_edges=frozenset(tick.truth_edges) - set(spec.locations),
        )
        return series.with_tick(new)

    if spec.kind == FDIA:
        subject = _rebuild_subject(case_or_nb, tick)
        scale = {b: spec.magnitude for b in spec.locations}
        if isinstance(subject, NodeBreakerCase):
            attacker = NodeBreakerCase(
                subject.base.scaled_loads(scale), subject.switches,
                subject.pseudo_node_map,
            )
        else:
            attacker = subject.scaled_loads(scale)
        try:
            truth_attacker = solve_truth(attacker)
        except Exception as exc:
            raise GridSenseError(
                f"fdia attacker power flow failed: {exc}"
            ) from exc
        placement = _placement_from(tick.measurements)
        ms = generate_measurements(attacker, truth_attacker, sigma, placement, rng)
        ms = replace(ms, switch_status=tick.measurements.switch_status)
        label = AnomalyLabel(
            tick_t, FDIA, tuple(spec.locations), tick.measurements.channels()
        )
        # truth unchanged: the grid did not move, only the data lies
        new = replace(tick, measurements=ms, labels=tick.labels + (label,))
        return series.with_tick(new)

    raise CaseValidationError(f"unknown anomaly kind {spec.kind!r}")


def _placement_from(ms: MeasurementSet) -> Placement:
    return Placement(
        pmu_buses=tuple(r.bus for r in ms.pmu_bus),
        rtu_buses=tuple(r.bus for r in ms.rtu_bus),
        rtu_line_branches=tuple(r.branch for r in ms.rtu_line),
        pmu_line_branches=tuple(r.branch for r in ms.pmu_line),
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _ms_to_doc(ms: MeasurementSet) -> dict:
    return {
        "rtu_bus": [vars(r).copy() for r in ms.rtu_bus],
        "pmu_bus": [vars(r).copy() for r in ms.pmu_bus],
        "rtu_line": [vars(r).copy() for r in ms.rtu_line],
        "pmu_line": [vars(r).copy() for r in ms.pmu_line],
        "switch_status": [vars(r).copy() for r in ms.switch_status],
    }


def _ms_from_doc(doc: dict) -> MeasurementSet:
    return MeasurementSet(
        rtu_bus=tuple(RtuBusReading(**r) for r in doc.get("rtu_bus", [])),
        pmu_bus=tuple(PmuBusReading(**r) for r in doc.get("pmu_bus", [])),
        rtu_line=tuple(RtuLineReading(**r) for r in doc.get("rtu_line", [])),
        pmu_line=tuple(PmuLineReading(**r) for r in doc.get("pmu_line", [])),
        switch_status=tuple(
            SwitchStatusReading(**r) for r in doc.get("switch_status", [])
        ),
    )


def series_to_jsonl(series: TimeSeries) -> str:
    """One JSON document per line, one line per tick."""
    lines = []
    for tk in series.ticks:
        doc = {
            "t": tk.t,
            "edges": sorted(tk.snapshot.edges),
            "truth_edges": sorted(tk.truth_edges),
            "measurements": _ms_to_doc(tk.measurements),
            "truth": (
                {str(b): [v.real, v.imag] for b, v in tk.truth.items()}
                if tk.truth is not None else None
            ),
            "labels": [
                {"tick": l.tick, "kind": l.kind,
                 "locations": [list(x) if isinstance(x, tuple) else x
                               for x in l.locations],
                 "channels": [list(c) for c in l.channels]}
                for l in tk.labels
            ],
            "load_factors": {str(b): f for b, f in tk.load_factors.items()},
        }
        lines.append(json.dumps(doc))
    return "\n".join(lines) + "\n"


def series_from_jsonl(text: str) -> TimeSeries:
    ticks = []
    for line in text.strip().splitlines():
        doc = json.loads(line)
        truth = None
        if doc.get("truth") is not None:
            truth = {int(b): complex(v[0], v[1]) for b, v in doc["truth"].items()}
        labels = tuple(
            AnomalyLabel(
                tick=l["tick"], kind=l["kind"],
                locations=tuple(tuple(x) if isinstance(x, list) else x
                                for x in l["locations"]),
                channels=tuple(tuple(c) for c in l["channels"]),
            )
            for l in doc.get("labels", [])
        )
        ticks.append(Tick(
            t=doc["t"],
            snapshot=GraphSnapshot.from_edges(doc["edges"]),
            measurements=_ms_from_doc(doc["measurements"]),
            truth=truth,
            labels=labels,
            load_factors={int(b): f for b, f in doc.get("load_factors", {}).items()},
            truth_edges=frozenset(doc.get("truth_edges", doc["edges"])),
        ))
    return TimeSeries(tuple(ticks))


def series_to_csv(series: TimeSeries) -> str:
    """tick x channel matrix of the continuous readings."""
    channels = series.ticks[0].measurements.channels()
    header = ["t"] + ["/".join(map(str, ch)) for ch in channels]
    rows = [",".join(header)]
    for tk in series.ticks:
        vals = {ch: None for ch in channels}
        ms = tk.measurements
        for r in ms.rtu_bus:
            for fld in ("p", "q", "v_mag"):
                vals[("rtu", r.bus, fld)] = getattr(r, fld)
        for r in ms.pmu_bus:
            for fld in ("v_re", "v_im", "i_re", "i_im"):
                vals[("pmu", r.bus, fld)] = getattr(r, fld)
        for r in ms.rtu_line:
            for fld in ("p_flow", "q_flow", "v_mag"):
                vals[("rtu_line", r.branch, fld)] = getattr(r, fld)
        for r in ms.pmu_line:
            for fld in ("i_re", "i_im"):
                vals[("pmu_line", r.branch, fld)] = getattr(r, fld)
        rows.append(",".join([str(tk.t)] + [
            ("" if vals[ch] is None else f"{vals[ch]:.12g}") for ch in channels
        ]))
    return "\n".join(rows) + "\n"
