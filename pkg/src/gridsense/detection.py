"""Dynamic-graph anomaly detection: line-outage distribution factors, graph
distances, bias-variance temporal weighting, robust scoring, and state-prior
prediction with bias-based uncertainty.

Sensors are buses; each observes the power flow on its adjacent metered
lines.  History is weighted by how close each past tick's topology is to the
current one, measured by LODF-based flow-redistribution distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import GridSenseError
from .network import GraphSnapshot, GridCase

D_CAP = 10.0          # distance contribution of an islanding outage
ISLAND_EPS = 1e-6     # 1 - ptdf below this means the outage islands the grid
# Bias-variance balance: the weighting problem trades bias sum(w d) against
# variance 0.005 * 0.5 w'w, which is equivalent to scaling distances by
# 1/0.005 with a unit variance coefficient.  Softened here by an empirical
# factor so that near topologies keep a little support mass (see ledger).
DIST_SCALE = 0.5
IQR_FLOOR = 1e-6
PRIOR_DELTA_FLOOR = 1e-4


@dataclass
class LodfTable:
    """Line-outage distribution factors of one topology, built lazily.

    ``column(p)`` returns d[l][p]: the flow change on every line l per unit
    pre-outage flow on outaged line p.  d[p][p] = -1 by convention; islanding
    outages are flagged and their column saturates at D_CAP.
    """

    edges: tuple                  # branch ids in column order
    _ptdf_solver: object = field(repr=False)
    _incidence: sp.csr_matrix = field(repr=False)
    _susceptance: np.ndarray = field(repr=False)
    _pos: dict = field(repr=False)
    _node_pos: dict = field(repr=False)
    _ends: dict = field(repr=False)
    _cache: dict = field(default_factory=dict, repr=False)
    islanding: dict = field(default_factory=dict)

    def column(self, p) -> np.ndarray:
        if p in self._cache:
            return self._cache[p]
        if p not in self._pos:
            raise KeyError(f"line {p} not in this topology")
        i, j = self._ends[p]
        rhs = np.zeros(len(self._node_pos) - 1)
        for node, sign in ((i, 1.0), (j, -1.0)):
            k = self._node_pos[node]
            if k > 0:
                rhs[k - 1] += sign
        theta = self._ptdf_solver(rhs)
        theta_full = np.concatenate([[0.0], theta])
        flows = self._susceptance * (self._incidence @ theta_full)
        ptdf_pp = flows[self._pos[p]]
        denom = 1.0 - ptdf_pp
        col = np.empty(len(self.edges))
        if abs(denom) < ISLAND_EPS:
            self.islanding[p] = True
            col.fill(D_CAP)
        else:
            self.islanding[p] = False
            col = flows / denom
            col = np.clip(col, -D_CAP, D_CAP)
        col[self._pos[p]] = -1.0
        self._cache[p] = col
        return col

    def factor(self, l, p) -> float:
        return float(self.column(p)[self._pos[l]])

    def full_table(self) -> np.ndarray:
        return np.column_stack([self.column(p) for p in self.edges])

    def position(self, l) -> int:
        return self._pos[l]

    def to_csv(self) -> str:
        """Debug dump: full factor table, outage lines as columns."""
        table = self.full_table()
        rows = ["line," + ",".join(f"out_{p}" for p in self.edges)]
        for k, l in enumerate(self.edges):
            rows.append(str(l) + "," + ",".join(
                f"{table[k, j]:.9g}" for j in range(len(self.edges))
            ))
        return "\n".join(rows) + "\n"


def _dc_system(case: GridCase, edges):
    """Reduced susceptance Laplacian of the given active edge set."""
    by_id = {br.id: br for br in case.branches}
    nodes = sorted({by_id[e].from_bus for e in edges}
                   | {by_id[e].to_bus for e in edges})
    node_pos = {n: k for k, n in enumerate(nodes)}
    m = len(edges)
    n = len(nodes)
    rows, cols, vals = [], [], []
    b_vec = np.empty(m)
    ends = {}
    for r, e in enumerate(edges):
        br = by_id[e]
        # unit susceptance when reactance is unusable
        b = 1.0 / abs(br.x) if br.x else 1.0
        b_vec[r] = b
        i, j = node_pos[br.from_bus], node_pos[br.to_bus]
        rows += [r, r]
        cols += [i, j]
        vals += [1.0, -1.0]
        ends[e] = (br.from_bus, br.to_bus)
    a = sp.coo_matrix((vals, (rows, cols)), shape=(m, n)).tocsr()
    lap = (a.T @ sp.diags(b_vec) @ a).tocsc()
    # ground the first node to make the Laplacian invertible
    red = lap[1:, :][:, 1:]
    return a, b_vec, red, node_pos, ends


def _edges_connected(ends: dict, nodes) -> bool:
    adj = {n: [] for n in nodes}
    for i, j in ends.values():
        adj[i].append(j)
        adj[j].append(i)
    start = next(iter(adj))
    seen = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == len(adj)


def compute_lodf(snapshot: GraphSnapshot, case: GridCase) -> LodfTable:
    """DC-model LODF table for the snapshot's active edge set."""
    edges = tuple(sorted(snapshot.edges))
    if not edges:
        raise GridSenseError("empty snapshot")
    a, b_vec, red, node_pos, ends = _dc_system(case, edges)
    if not _edges_connected(ends, node_pos):
        raise GridSenseError("snapshot is disconnected; LODF undefined")
    try:
        lu = splu(red.tocsc())
    except RuntimeError as exc:
        raise GridSenseError(
            f"snapshot Laplacian is singular; LODF undefined: {exc}"
        ) from exc

    def solve(rhs):
        return lu.solve(rhs)

    return LodfTable(
        edges=edges,
        _ptdf_solver=solve,
        _incidence=a,
        _susceptance=b_vec,
        _pos={e: k for k, e in enumerate(edges)},
        _node_pos=node_pos,
        _ends=ends,
    )


@dataclass
class DistanceCache:
    """Memoizes LODF tables per topology id and pairwise distances."""

    case: GridCase
    tables: dict = field(default_factory=dict)
    global_d: dict = field(default_factory=dict)
    local_d: dict = field(default_factory=dict)

    def table(self, snapshot: GraphSnapshot) -> LodfTable:
        key = snapshot.topology_id
        if key not in self.tables:
            self.tables[key] = compute_lodf(snapshot, self.case)
        return self.tables[key]


def _union_snapshot(g_i: GraphSnapshot, g_j: GraphSnapshot) -> GraphSnapshot:
    return GraphSnapshot.from_edges(g_i.edges | g_j.edges)


def _changed_edges(g_i, g_j):
    return sorted((g_i.edges - g_j.edges) | (g_j.edges - g_i.edges))


def graph_distance(g_i: GraphSnapshot, g_j: GraphSnapshot, case: GridCase,
                   cache: DistanceCache | None = None) -> float:
    """Flow-redistribution distance: per changed edge, the mean absolute
    LODF it exerts on the other union-graph edges, summed over changes."""
    if cache is not None:
        key = tuple(sorted((g_i.topology_id, g_j.topology_id)))
        if key in cache.global_d:
            return cache.global_d[key]
    changed = _changed_edges(g_i, g_j)
    if not changed:
        result = 0.0
    else:
        union = _union_snapshot(g_i, g_j)
        table = (cache.table(union) if cache is not None
                 else compute_lodf(union, case))
        m = len(table.edges)
        result = 0.0
        for p in changed:
            col = table.column(p)
            if m > 1:
                x_p = (np.abs(col).sum() - abs(col[table.position(p)])) / (m - 1)
            else:
                x_p = 0.0
            result += float(x_p)
    if cache is not None:
        cache.global_d[key] = result
    return result


def _adjacent_edges(case: GridCase, sensor: int, edges) -> list:
    by_id = {br.id: br for br in case.branches}
    return [e for e in edges if sensor in (by_id[e].from_bus, by_id[e].to_bus)]


def local_graph_distance(g_i: GraphSnapshot, g_j: GraphSnapshot, sensor: int,
                         case: GridCase,
                         cache: DistanceCache | None = None) -> float:
    """Locally-sensitive variant: each change's contribution is scaled by the
    worst LODF it exerts on the sensor's adjacent edges."""
    if cache is not None:
        key = (tuple(sorted((g_i.topology_id, g_j.topology_id))), sensor)
        if key in cache.local_d:
            return cache.local_d[key]
    changed = _changed_edges(g_i, g_j)
    result = 0.0
    if changed:
        union = _union_snapshot(g_i, g_j)
        table = (cache.table(union) if cache is not None
                 else compute_lodf(union, case))
        adj = _adjacent_edges(case, sensor, table.edges)
        m = len(table.edges)
        for p in changed:
            col = table.column(p)
            x_p = ((np.abs(col).sum() - abs(col[table.position(p)])) / (m - 1)
                   if m > 1 else 0.0)
            c_ps = max((abs(col[table.position(l)]) for l in adj), default=0.0)
            result += float(x_p * c_ps)
    if cache is not None:
        cache.local_d[key] = result
    return result


# ---------------------------------------------------------------------------
# temporal weighting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TemporalWeights:
    w: np.ndarray
    lambda_star: float
    d_scaled: np.ndarray


def temporal_weights(d, scale=None) -> TemporalWeights:
    """Closed-form solution of the bias-variance weighting problem.

    Scales distances by DIST_SCALE, then finds the unique water level
    lambda* with sum(max(lambda* - d, 0)) = 1; weights are the clipped gaps.
    The weights live on the simplex and are monotone nonincreasing in d.
    """
    d = np.asarray(d, dtype=float)
    if d.size == 0:
        raise ValueError("need at least one distance")
    if (d < 0).any():
        raise ValueError("distances must be nonnegative")
    ds = (DIST_SCALE if scale is None else scale) * d
    order = np.argsort(ds, kind="stable")
    sorted_d = ds[order]
    csum = np.cumsum(sorted_d)
    lam = None
    for k in range(1, len(ds) + 1):
        cand = (1.0 + csum[k - 1]) / k
        nxt = sorted_d[k] if k < len(ds) else np.inf
        if cand <= nxt + 1e-15:
            lam = cand
            break
    w = np.maximum(lam - ds, 0.0)
    w = w / w.sum()  # exact simplex membership against round-off
    return TemporalWeights(w=w, lambda_star=float(lam), d_scaled=ds)


def weighted_median(values, weights) -> float:
    return weighted_quantile(values, weights, 0.5)


def weighted_quantile(values, weights, q: float) -> float:
    """Weighted quantile on the cumulative-weight staircase.

    The quantile is the first value whose cumulative weight reaches q of the
    total mass; when q lands exactly on a step boundary the two neighboring
    values are interpolated (their midpoint), matching the even-count
    unweighted median convention.
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if values.size == 0:
        raise ValueError("empty sample")
    if values.size == 1:
        return float(values[0])
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order]
    total = w.sum()
    if total <= 0:
        raise ValueError("weights must have positive mass")
    target = q * total
    cw = np.cumsum(w)
    k = int(np.searchsorted(cw, target - 1e-12 * total))
    k = min(k, len(v) - 1)
    if abs(cw[k] - target) <= 1e-12 * total and k + 1 < len(v):
        return float(0.5 * (v[k] + v[k + 1]))
    return float(v[k])


def weighted_iqr(values, weights, floor=IQR_FLOOR) -> float:
    hi = weighted_quantile(values, weights, 0.75)
    lo = weighted_quantile(values, weights, 0.25)
    return max(hi - lo, floor)


def anomaly_metrics(deltas) -> tuple[float, float, float]:
    """(max, mean, population std) of the observed flow changes."""
    deltas = np.asarray(deltas, dtype=float)
    if deltas.size == 0:
        return 0.0, 0.0, 0.0
    return (
        float(deltas.max()),
        float(deltas.mean()),
        float(deltas.std()),
    )


# ---------------------------------------------------------------------------
# sensor features and scoring
# ---------------------------------------------------------------------------

METRICS = ("edge", "ave", "div")


def sensor_features(series, t_index: int, sensor: int, case: GridCase):
    """Per-metric features of a sensor at one tick.

    The sensor observes |P-flow| on its adjacent metered lines; the three
    metrics condense those magnitudes per the detector's design.
    """
    ends = {br.id: (br.from_bus, br.to_bus) for br in case.branches}
    tick = series.ticks[t_index]
    flows = [
        abs(r.p_flow)
        for r in tick.measurements.rtu_line
        if sensor in ends[r.branch]
    ]
    return anomaly_metrics(np.asarray(flows))


def series_features(series, sensors, case: GridCase) -> dict:
    """Precomputed (n_ticks x 3) feature matrix per sensor."""
    ends = {br.id: (br.from_bus, br.to_bus) for br in case.branches}
    out = {s: np.zeros((len(series.ticks), 3)) for s in sensors}
    for t_index, tick in enumerate(series.ticks):
        per_sensor = {s: [] for s in sensors}
        for r in tick.measurements.rtu_line:
            f, t = ends[r.branch]
            for s in (f, t):
                if s in per_sensor:
                    per_sensor[s].append(abs(r.p_flow))
        for s in sensors:
            out[s][t_index] = anomaly_metrics(np.asarray(per_sensor[s]))
    return out


def _tick_distances(series, t_index: int, snapshot, cache, sensor=None,
                    mode="global"):
    d = np.empty(t_index)
    for k in range(t_index):
        snap_k = series.ticks[k].snapshot
        if mode == "local" and sensor is not None:
            d[k] = local_graph_distance(snap_k, snapshot, sensor, cache.case,
                                        cache)
        else:
            d[k] = graph_distance(snap_k, snapshot, cache.case, cache)
    return d


@dataclass(frozen=True)
class TickScore:
    t: int
    score: float              # A(t): max over sensors
    by_sensor: dict           # sensor -> (score, best metric)


@dataclass(frozen=True)
class AnomalyReport:
    scores: tuple[TickScore, ...]
    flagged: tuple = ()

    def score_array(self):
        return np.array([s.score for s in self.scores])

    def top_k(self, k: int) -> tuple:
        ordered = sorted(self.scores, key=lambda s: -s.score)
        return tuple(s.t for s in ordered[:k])

    def to_csv(self) -> str:
        rows = ["tick,score,top_sensor,metric"]
        for s in self.scores:
            if s.by_sensor:
                top = max(s.by_sensor.items(), key=lambda kv: kv[1][0])
                rows.append(f"{s.t},{s.score:.9g},{top[0]},{top[1][1]}")
            else:
                rows.append(f"{s.t},{s.score:.9g},,")
        return "\n".join(rows) + "\n"


def score_tick(series, t_index: int, case: GridCase, sensors,
               distance_mode="global", cache=None,
               uniform_weights=False, features=None) -> TickScore:
    """Anomaly score of one tick against its weighted history.

    Per sensor: weight past ticks by topology distance to the current
    snapshot (or uniformly, for the ablation), learn weighted median/IQR of
    each metric, and score the current value in IQR units.  A(t) is the max
    over sensors and metrics.
    """
    if t_index < 1:
        raise ValueError("scoring needs at least one historical tick")
    cache = cache or DistanceCache(case)
    if features is None:
        features = series_features(series, sensors, case)
    tick = series.ticks[t_index]
    by_sensor = {}
    w_global = None
    for s in sensors:
        if uniform_weights:
            w = np.full(t_index, 1.0 / t_index)
        elif distance_mode == "local":
            d = _tick_distances(series, t_index, tick.snapshot, cache,
                                sensor=s, mode="local")
            w = temporal_weights(d).w
        else:
            if w_global is None:
                d = _tick_distances(series, t_index, tick.snapshot, cache)
                w_global = temporal_weights(d).w
            w = w_global
        feats_now = features[s][t_index]
        best = -np.inf
        best_metric = METRICS[0]
        for m_i, m_name in enumerate(METRICS):
            hist = features[s][:t_index, m_i]
            mu = weighted_median(hist, w)
            iqr = weighted_iqr(hist, w)
            score = (feats_now[m_i] - mu) / iqr
            if score > best:
                best = score
                best_metric = m_name
        by_sensor[s] = (float(best), best_metric)
    overall = max(v[0] for v in by_sensor.values()) if by_sensor else 0.0
    return TickScore(t=tick.t, score=float(overall), by_sensor=by_sensor)


def run_detector(series, case: GridCase, sensors, distance_mode="global",
                 start: int = 1, threshold=None,
                 uniform_weights=False) -> AnomalyReport:
    cache = DistanceCache(case)
    features = series_features(series, sensors, case)
    scores = []
    for t_index in range(start, len(series.ticks)):
        scores.append(
            score_tick(series, t_index, case, sensors, distance_mode, cache,
                       uniform_weights=uniform_weights, features=features)
        )
    flagged = ()
    if threshold is not None:
        flagged = tuple(s.t for s in scores if s.score > threshold)
    return AnomalyReport(scores=tuple(scores), flagged=flagged)


# ---------------------------------------------------------------------------
# state prior prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BusPriorStats:
    mu_re: float
    mu_im: float
    delta: float


@dataclass(frozen=True)
class Prior:
    """Per-bus Gaussian state prior with an epistemic-bias tag."""

    stats: dict                  # bus -> BusPriorStats
    bias: float                  # sum of weight * unscaled distance
    delta_floor: float = PRIOR_DELTA_FLOOR

    def get(self, bus):
        return self.stats.get(bus)


def predict_state_prior(state_history, topo_history, target_snapshot,
                        case: GridCase, cache=None) -> Prior:
    """Weighted median/IQR prediction of each bus state from history.

    ``state_history`` is a sequence of bus->complex maps, ``topo_history``
    the matching snapshots.  Weights follow the temporal weighting of the
    distances to ``target_snapshot``; the bias is the weighted sum of the
    raw (unscaled) distances, quantifying how trustworthy the prior is.
    """
    if len(state_history) != len(topo_history) or not state_history:
        raise ValueError("need matching, nonempty state and topology history")
    cache = cache or DistanceCache(case)
    d = np.array([
        graph_distance(snap, target_snapshot, case, cache)
        for snap in topo_history
    ])
    tw = temporal_weights(d)
    w = tw.w
    bias = float(np.dot(w, d))
    stats = {}
    buses = state_history[-1].keys()
    for b in buses:
        re = np.array([h[b].real for h in state_history])
        im = np.array([h[b].imag for h in state_history])
        delta = max(
            weighted_iqr(re, w), weighted_iqr(im, w), PRIOR_DELTA_FLOOR
        )
        stats[b] = BusPriorStats(
            mu_re=weighted_median(re, w),
            mu_im=weighted_median(im, w),
            delta=delta,
        )
    return Prior(stats=stats, bias=bias)


# ---------------------------------------------------------------------------
# statistical error bound check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorBoundCheck:
    estimate: float
    stderr: float
    lower: float
    upper: float

    @property
    def ok(self) -> bool:
        return (
            self.estimate + 3 * self.stderr >= self.lower
            and self.estimate - 3 * self.stderr <= self.upper
        )


def verify_error_bound(sigma, d_star, weights, trials, c=1.0, shifts=None,
                       rng=None) -> ErrorBoundCheck:
    """Monte Carlo check of the prediction-error bounds.

    Draws x_t ~ N(mu_t, sigma^2) with |mu_t - mu_target| = c * d_star_t
    (or explicit ``shifts``), estimates E[(sum w x - x_target)^2], and
    reports it against sigma^2 <= E <= (1 + max w) sigma^2 + c max d_star.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    w = np.asarray(weights, dtype=float)
    d = np.asarray(d_star, dtype=float)
    if w.shape != d.shape:
        raise ValueError("weights and d_star must align")
    if abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
        raise ValueError("weights must lie on the simplex")
    mu = c * d if shifts is None else np.asarray(shifts, dtype=float)
    xs = rng.normal(mu[None, :], sigma, size=(trials, len(w)))
    target = rng.normal(0.0, sigma, size=trials)
    err = (xs @ w - target) ** 2
    est = float(err.mean())
    stderr = float(err.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    upper = (1.0 + float(w.max())) * sigma**2 + c * float(d.max(initial=0.0))
    return ErrorBoundCheck(
        estimate=est, stderr=stderr, lower=sigma**2, upper=upper
    )
