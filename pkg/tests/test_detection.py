import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridsense import detection as det
from gridsense import measurements as msm
from gridsense.cases import random_dc_mesh, ring_mesh
from gridsense.errors import GridSenseError
from gridsense.network import Branch, Bus, GridCase, GraphSnapshot, PQ, SLACK


def snapshot_of(case):
    return GraphSnapshot.from_edges(br.id for br in case.active_branches())


# ---------------------------------------------------------------------------
# LODF
# ---------------------------------------------------------------------------


def test_lodf_parallel_lines_full_transfer():
    case = GridCase(
        100.0,
        (Bus(1, SLACK, 1.0), Bus(2, PQ)),
        (Branch(1, 1, 2, 0.0, 0.2), Branch(2, 1, 2, 0.0, 0.2)),
    )
    table = det.compute_lodf(snapshot_of(case), case)
    assert abs(table.factor(2, 1) - 1.0) < 1e-12
    assert table.factor(1, 1) == -1.0


def test_lodf_bridge_flags_islanding():
    case = GridCase(
        100.0,
        (Bus(1, SLACK, 1.0), Bus(2, PQ), Bus(3, PQ)),
        (Branch(1, 1, 2, 0.0, 0.2), Branch(2, 2, 3, 0.0, 0.2)),
    )
    table = det.compute_lodf(snapshot_of(case), case)
    table.column(2)
    assert table.islanding[2]
    assert abs(table.factor(1, 2)) == det.D_CAP


def _lodf_resolve_oracle(case, edges, p, rng):
    """Remove line p, re-solve DC flows under a random injection."""
    from scipy.sparse.linalg import spsolve

    def flows(edge_set, inj):
        a, b_vec, red, node_pos, _ = det._dc_system(case, edge_set)
        theta = np.concatenate([[0.0], spsolve(red.tocsc(), inj[1:])])
        return b_vec * (a @ theta)

    by_id = {br.id: br for br in case.branches}
    nodes = sorted({by_id[e].from_bus for e in edges}
                   | {by_id[e].to_bus for e in edges})
    inj = rng.normal(size=len(nodes))
    inj -= inj.mean()
    f0 = flows(edges, inj)
    rest = [e for e in edges if e != p]
    f1 = flows(rest, inj)
    fp = f0[edges.index(p)]
    if abs(fp) < 1e-9:
        return None
    return {e: (f1[k] - f0[edges.index(e)]) / fp for k, e in enumerate(rest)}


def test_lodf_vs_resolve_oracle():
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(4):
        mesh = random_dc_mesh(int(rng.integers(5, 13)), rng)
        edges = sorted(br.id for br in mesh.branches)
        table = det.compute_lodf(GraphSnapshot.from_edges(edges), mesh)
        for p in edges:
            col = table.column(p)
            if table.islanding[p]:
                continue
            oracle = _lodf_resolve_oracle(mesh, edges, p, rng)
            if oracle is None:
                continue
            for e, val in oracle.items():
                if abs(val) < det.D_CAP:
                    assert abs(table.factor(e, p) - val) < 1e-8
                    checked += 1
    assert checked > 100


def test_lodf_disconnected_snapshot_rejected():
    case = GridCase(
        100.0,
        (Bus(1, SLACK, 1.0), Bus(2, PQ), Bus(3, PQ), Bus(4, PQ)),
        (Branch(1, 1, 2, 0.0, 0.2), Branch(2, 3, 4, 0.0, 0.2),
         Branch(3, 2, 3, 0.0, 0.2)),
    )
    with pytest.raises(GridSenseError, match="disconnected"):
        det.compute_lodf(GraphSnapshot.from_edges([1, 2]), case)


# ---------------------------------------------------------------------------
# graph distance
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def mesh6():
    return ring_mesh(6, n_gen=2, chord_every=3, inactive=2, seed=4)


def test_distance_identity(mesh6):
    g = snapshot_of(mesh6)
    assert det.graph_distance(g, g, mesh6) == 0.0


def test_distance_symmetric(mesh6):
    g1 = snapshot_of(mesh6)
    edges = sorted(g1.edges)
    g2 = GraphSnapshot.from_edges(edges[1:])
    a = det.graph_distance(g1, g2, mesh6)
    b = det.graph_distance(g2, g1, mesh6)
    assert a == b
    assert a > 0


def test_distance_single_change_matches_lodf_mean():
    case = GridCase(
        100.0,
        (Bus(1, SLACK, 1.0), Bus(2, PQ), Bus(3, PQ), Bus(4, PQ)),
        tuple(
            Branch(k + 1, f, t, 0.0, x)
            for k, (f, t, x) in enumerate(
                [(1, 2, 0.1), (2, 3, 0.2), (3, 4, 0.1), (4, 1, 0.3)]
            )
        ),
    )
    g_full = GraphSnapshot.from_edges([1, 2, 3, 4])
    g_out = GraphSnapshot.from_edges([1, 2, 3])
    table = det.compute_lodf(g_full, case)
    col = table.column(4)
    x_p = np.mean([abs(col[table.position(e)]) for e in (1, 2, 3)])
    assert abs(det.graph_distance(g_full, g_out, case) - x_p) < 1e-12


def test_local_distance_bounds(mesh6):
    g1 = snapshot_of(mesh6)
    edges = sorted(g1.edges)
    g2 = GraphSnapshot.from_edges(edges[2:])
    d_global = det.graph_distance(g1, g2, mesh6)
    for sensor in (1, 2, 5):
        d_local = det.local_graph_distance(g1, g2, sensor, mesh6)
        assert 0 <= d_local <= det.D_CAP * d_global + 1e-12


def test_local_distance_far_sensor_zero():
    # two disjoint regions tied by one corridor: a change in one region has
    # zero LODF on the far region's single stub line
    buses = tuple([Bus(1, SLACK, 1.0)] + [Bus(i, PQ) for i in range(2, 8)])
    branches = (
        Branch(1, 1, 2, 0.0, 0.1), Branch(2, 2, 3, 0.0, 0.1),
        Branch(3, 1, 3, 0.0, 0.1),
        Branch(4, 3, 4, 0.0, 0.1),   # corridor
        Branch(5, 4, 5, 0.0, 0.1), Branch(6, 5, 6, 0.0, 0.1),
        Branch(7, 4, 7, 0.0, 0.1),
    )
    case = GridCase(100.0, buses, branches)
    g1 = GraphSnapshot.from_edges([1, 2, 3, 4, 5, 6, 7])
    g2 = GraphSnapshot.from_edges([2, 3, 4, 5, 6, 7])  # line 1 changed
    d7 = det.local_graph_distance(g1, g2, 7, case)
    assert d7 < 1e-12  # stub line 7 sees no redistribution from line 1


# ---------------------------------------------------------------------------
# temporal weighting
# ---------------------------------------------------------------------------


def test_weights_uniform_for_equal_distances():
    tw = det.temporal_weights([0.0, 0.0, 0.0, 0.0])
    assert np.allclose(tw.w, 0.25)


def test_weights_full_blocking():
    tw = det.temporal_weights([0.0, 1e6])
    assert np.allclose(tw.w, [1.0, 0.0])


def _enumeration_qp_oracle(d_scaled):
    """Solve the simplex-constrained QP by checking every support set."""
    n = len(d_scaled)
    best = None
    for mask in range(1, 2**n):
        s = [i for i in range(n) if mask >> i & 1]
        lam = (1 + sum(d_scaled[i] for i in s)) / len(s)
        w = np.zeros(n)
        for i in s:
            w[i] = lam - d_scaled[i]
        if (w[s] < -1e-12).any():
            continue
        if any(lam - d_scaled[i] > 1e-12 for i in range(n) if i not in s):
            continue
        val = float(np.dot(d_scaled, w) + 0.5 * w @ w)
        if best is None or val < best[0]:
            best = (val, w)
    return best[1]


@settings(max_examples=150, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=1, max_size=8))
def test_weights_match_enumeration_oracle(d):
    tw = det.temporal_weights(d)
    oracle = _enumeration_qp_oracle(tw.d_scaled)
    assert np.abs(tw.w - oracle).max() < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=12))
def test_weights_invariants(d):
    tw = det.temporal_weights(d)
    assert abs(tw.w.sum() - 1.0) < 1e-12
    assert (tw.w >= 0).all()
    # water-filling identity and monotonicity
    assert np.abs(tw.w - np.maximum(tw.lambda_star - tw.d_scaled, 0)).max() < 1e-9
    order = np.argsort(d)
    assert (np.diff(tw.w[order]) <= 1e-12).all()


# ---------------------------------------------------------------------------
# robust statistics and metrics
# ---------------------------------------------------------------------------


def test_weighted_median_uniform():
    assert det.weighted_median([1, 2, 3], [1, 1, 1]) == 2.0


def test_weighted_median_mass_concentration():
    assert det.weighted_median([1, 100], [0.99, 0.01]) == 1.0


def test_weighted_quantile_vs_cumulative_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 12))
        vals = rng.normal(size=n)
        w = rng.uniform(0.01, 1.0, size=n)
        q = float(rng.uniform(0.05, 0.95))
        got = det.weighted_quantile(vals, w, q)
        order = np.argsort(vals)
        v, ww = vals[order], w[order]
        target = q * ww.sum()
        acc = 0.0
        expect = v[-1]
        for k in range(n):
            acc += ww[k]
            if acc >= target - 1e-12 * ww.sum():
                if abs(acc - target) <= 1e-12 * ww.sum() and k + 1 < n:
                    expect = 0.5 * (v[k] + v[k + 1])
                else:
                    expect = v[k]
                break
        assert got == pytest.approx(expect)


def test_weighted_iqr_floor():
    assert det.weighted_iqr([5.0], [1.0]) == det.IQR_FLOOR
    assert det.weighted_iqr([1.0, 1.0, 1.0], [1, 1, 1]) == det.IQR_FLOOR


def test_anomaly_metrics_examples():
    assert det.anomaly_metrics([1, 2, 3]) == (3.0, 2.0,
                                              pytest.approx(0.8164965809))
    assert det.anomaly_metrics([5]) == (5.0, 5.0, 0.0)
    assert det.anomaly_metrics([0, 0, 0]) == (0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def scored_series():
    case = ring_mesh(20, n_gen=4, chord_every=5, inactive=3, seed=6)
    sensors = [3, 9, 15]
    meters = [br.id for br in case.branches
              if br.from_bus in sensors or br.to_bus in sensors]
    placement = msm.default_placement(case, rtu_line_branches=meters)
    series = msm.generate_timeseries(
        case, n_ticks=120, topo_change_period=40,
        load_profile=msm.SinusoidProfile(amplitude=0.02, noise_std=0.004),
        sigma=0.002, placement=placement, seed=6,
    )
    return case, series, sensors


def test_stationary_tick_scores_low(scored_series):
    case, series, sensors = scored_series
    cache = det.DistanceCache(case)
    feats = det.series_features(series, sensors, case)
    scores = [
        det.score_tick(series, t, case, sensors, cache=cache,
                       features=feats).score
        for t in range(30, 40)
    ]
    assert max(scores) < 3.0


def test_outage_tick_ranks_high(scored_series):
    case, series, sensors = scored_series
    rng = np.random.default_rng(1)
    tick = series.ticks[90]
    meters = {r.branch for r in tick.measurements.rtu_line}
    target = next(e for e in sorted(tick.truth_edges) if e in meters)
    spec = msm.AnomalySpec("line_outage", (target,))
    injected = msm.inject_anomaly(series, 90, spec, case, rng)
    report = det.run_detector(injected, case, sensors, start=20)
    top = report.top_k(3)
    assert 90 in top


def test_single_history_tick_finite(scored_series):
    case, series, sensors = scored_series
    score = det.score_tick(series, 1, case, sensors)
    assert np.isfinite(score.score)


def test_score_invariant_to_sensor_relabeling(scored_series):
    case, series, sensors = scored_series
    a = det.score_tick(series, 50, case, sensors)
    b = det.score_tick(series, 50, case, list(reversed(sensors)))
    assert a.score == b.score


def test_stationary_false_alarm_rate():
    """Single topology, pure noise: < 2% of ticks flagged at 3 IQR units."""
    case = ring_mesh(12, n_gen=3, chord_every=5, seed=8)
    sensors = [4]
    meters = [br.id for br in case.branches
              if br.from_bus in sensors or br.to_bus in sensors]
    placement = msm.default_placement(case, rtu_line_branches=meters)
    series = msm.generate_timeseries(
        case, n_ticks=400, topo_change_period=0, load_profile=None,
        sigma=0.002, placement=placement, seed=8,
    )
    report = det.run_detector(series, case, sensors, start=50, threshold=3.0)
    rate = len(report.flagged) / (len(series.ticks) - 50)
    assert rate < 0.02


# ---------------------------------------------------------------------------
# state prior
# ---------------------------------------------------------------------------


def test_prior_constant_history(scored_series):
    case, series, sensors = scored_series
    snap = series.ticks[0].snapshot
    state = {b.id: 1.0 + 0.1j for b in case.buses}
    prior = det.predict_state_prior([state] * 10, [snap] * 10, snap, case)
    assert prior.bias == 0.0
    stats = prior.get(case.buses[0].id)
    assert stats.mu_re == 1.0 and stats.mu_im == pytest.approx(0.1)
    assert stats.delta == det.PRIOR_DELTA_FLOOR


def test_prior_weight_mass_after_big_change():
    """Post-change ticks carry at least 90% of the weight when the pre/post
    distance is large (bridge outage, islanding-flagged)."""
    case = GridCase(
        100.0,
        (Bus(1, SLACK, 1.0), Bus(2, PQ), Bus(3, PQ), Bus(4, PQ)),
        (Branch(1, 1, 2, 0.0, 0.1), Branch(2, 2, 3, 0.0, 0.1),
         Branch(3, 3, 4, 0.0, 0.1), Branch(4, 4, 1, 0.0, 0.1),
         Branch(5, 1, 3, 0.0, 0.1)),
    )
    g_pre = GraphSnapshot.from_edges([1, 2, 5])   # tree: outages island
    g_post = GraphSnapshot.from_edges([1, 2, 3, 4, 5])
    assert det.graph_distance(g_pre, g_post, case) > 1.0
    states = [{b.id: 1.0 + 0j for b in case.buses}] * 40
    topos = [g_pre] * 10 + [g_post] * 30
    prior = det.predict_state_prior(states, topos, g_post, case)
    d = np.array([det.graph_distance(g, g_post, case) for g in topos])
    w = det.temporal_weights(d).w
    assert w[10:].sum() >= 0.9


def test_prior_bias_zero_same_topology(scored_series):
    case, series, sensors = scored_series
    snap = series.ticks[0].snapshot
    states = [{b.id: 1.0 + 0j for b in case.buses}] * 5
    prior = det.predict_state_prior(states, [snap] * 5, snap, case)
    assert prior.bias == 0.0


# ---------------------------------------------------------------------------
# error bound theorems
# ---------------------------------------------------------------------------


def test_bound_uniform_weights_approaches_sigma_sq():
    chk = det.verify_error_bound(
        1.0, np.zeros(50), np.full(50, 0.02), 100_000,
        rng=np.random.default_rng(0),
    )
    assert chk.ok
    assert abs(chk.estimate - 1.02) < 0.02  # sigma^2 (1 + 1/T)


def test_bound_single_weight_shift_tight():
    s = 0.4
    chk = det.verify_error_bound(
        1.0, [s * s], [1.0], 200_000, shifts=[s],
        rng=np.random.default_rng(1),
    )
    assert chk.ok
    assert abs(chk.estimate - (2.0 + s * s)) < 0.02
    assert chk.upper == pytest.approx(2.0 + s * s)


def test_bound_zero_noise_zero_shift():
    chk = det.verify_error_bound(
        0.0, [0.0, 0.0], [0.5, 0.5], 1000, rng=np.random.default_rng(2)
    )
    assert chk.estimate == 0.0
    assert chk.ok


def test_lodf_csv_dump(mesh6):
    table = det.compute_lodf(snapshot_of(mesh6), mesh6)
    text = table.to_csv()
    lines = text.strip().splitlines()
    assert len(lines) == len(table.edges) + 1
    first = lines[1].split(",")
    # own-outage column carries the -1 convention
    k = list(table.edges).index(int(first[0]))
    assert float(first[1 + k]) == -1.0
