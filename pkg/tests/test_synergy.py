import numpy as np
import pytest

from gridsense import measurements as msm
from gridsense.estimators import rmse
from gridsense.network import extend_to_node_breaker
from gridsense.synergy import SynergyConfig, run_synergy, summarize


@pytest.fixture(scope="module")
def clean_series(c14_with_spares):
    series = msm.generate_timeseries(
        c14_with_spares, n_ticks=60, topo_change_period=20,
        load_profile=msm.SinusoidProfile(), sigma=0.001, seed=21,
    )
    return c14_with_spares, series


def test_clean_series_no_alarms(clean_series):
    case, series = clean_series
    diags = run_synergy(series, case, SynergyConfig())
    ids = [b.id for b in case.buses]
    for d in diags:
        assert not d.failed
        assert d.root_cause == (("none", ()),)
        # plain and augmented agree within a few noise sigmas
        gap = max(abs(d.plain.v[b] - d.augmented.v[b]) for b in ids)
        assert gap < 3 * 0.01


def test_plain_reduction_with_zero_prior_weight(clean_series):
    case, series = clean_series
    cfg = SynergyConfig(max_loops=1, w_prior=0.0)
    diags = run_synergy(series, case, cfg)
    for d in diags:
        assert not d.prior_applied
        for b in d.plain.v:
            assert d.plain.v[b] == d.augmented.v[b]


def test_bias_gate_blocks_first_seen(clean_series):
    case, series = clean_series
    diags = run_synergy(series, case, SynergyConfig())
    seen = set()
    for tick, diag in zip(series.ticks, diags):
        topo = tick.snapshot.topology_id
        if topo not in seen:
            assert not diag.prior_applied, f"prior on first-seen at {diag.tick}"
        seen.add(topo)


def test_fdia_defense_and_flag(c14_with_spares):
    case = c14_with_spares
    series = msm.generate_timeseries(
        case, n_ticks=120, topo_change_period=40,
        load_profile=msm.SinusoidProfile(), sigma=0.001, seed=23,
    )
    rng = np.random.default_rng(5)
    loads = case.load_buses()
    for t in (30, 75):
        series = msm.inject_anomaly(
            series, t, msm.AnomalySpec("fdia", tuple(loads), 0.8), case, rng
        )
    diags = run_synergy(series, case, SynergyConfig())
    ids = [b.id for b in case.buses]
    clean = [rmse(d.plain.v, series.tick(d.tick).truth, ids)
             for d in diags if not series.tick(d.tick).labels]
    med = float(np.median(clean))
    for t in (30, 75):
        d = next(x for x in diags if x.tick == t)
        tick = series.tick(t)
        r_plain = rmse(d.plain.v, tick.truth, ids)
        r_aug = rmse(d.augmented.v, tick.truth, ids)
        assert d.prior_applied
        assert r_plain > 5 * med
        assert r_aug < 0.5 * r_plain
        assert ("fdia", ("all_continuous",)) in d.root_cause
    summary = summarize(diags, series)
    assert summary["by_kind"]["fdia"]["recall"] == 1.0


def test_mixed_anomalies_typed_correctly(c14_with_spares):
    """Two topology errors plus one bad RTU at one tick come back as
    exactly those three root causes."""
    case = c14_with_spares
    nb = extend_to_node_breaker(case, [7, 16, 3, 13])
    placement = msm.default_placement(
        case, rtu_line_branches=tuple(
            br.id for br in case.branches if br.status == "active"
        ),
    )
    series = msm.generate_timeseries(
        nb, n_ticks=30, topo_change_period=100,
        load_profile=msm.SinusoidProfile(), sigma=0.001, seed=31,
        placement=placement,
    )
    rng = np.random.default_rng(2)
    t_attack = 12
    series = msm.inject_anomaly(
        series, t_attack,
        msm.AnomalySpec("topology_error", (1, 2)), nb, rng,
    )
    series = msm.inject_anomaly(
        series, t_attack,
        msm.AnomalySpec("bad_data", (("rtu", 9, "p"),), magnitude=1.0),
        nb, rng,
    )
    diags = run_synergy(series, nb, SynergyConfig())
    d = next(x for x in diags if x.tick == t_attack)
    kinds = sorted(k for k, _ in d.root_cause)
    assert kinds == ["bad_data", "topology_error", "topology_error"]
    locs = {loc for k, loc in d.root_cause if k == "topology_error"}
    assert locs == {("switch", 1), ("switch", 2)}
    assert ("bad_data", ("rtu", 9)) in d.root_cause
    # topology corrections happen exactly at the confirmed switches
    assert set(d.corrected_topology) == {1, 2}


def test_unreported_outage_classified_as_line_outage(c14_with_spares):
    case = c14_with_spares
    nb = extend_to_node_breaker(case, [7, 16, 3])
    placement = msm.default_placement(
        case, rtu_line_branches=tuple(
            br.id for br in case.branches if br.status == "active"
        ),
    )
    series = msm.generate_timeseries(
        nb, n_ticks=20, topo_change_period=100,
        load_profile=msm.SinusoidProfile(), sigma=0.001, seed=33,
        placement=placement,
    )
    rng = np.random.default_rng(3)
    series = msm.inject_anomaly(
        series, 9, msm.AnomalySpec("line_outage", (7,)), nb, rng
    )
    diags = run_synergy(series, nb, SynergyConfig())
    d = next(x for x in diags if x.tick == 9)
    assert ("line_outage", ("line", 7)) in d.root_cause


def test_estimator_failure_marks_tick(clean_series):
    case, series = clean_series
    # sabotage one tick: remove every meter so assembly fails
    from dataclasses import replace

    bad_tick = replace(
        series.ticks[5], measurements=msm.MeasurementSet()
    )
    broken = series.with_tick(bad_tick)
    diags = run_synergy(broken, case, SynergyConfig())
    d = next(x for x in diags if x.tick == 5)
    assert d.failed
    others = [x for x in diags if x.tick != 5]
    assert all(not x.failed for x in others)


def test_summary_shape(clean_series):
    case, series = clean_series
    diags = run_synergy(series, case, SynergyConfig())
    summary = summarize(diags, series)
    assert summary["ticks"] == len(series.ticks)
    assert set(summary["by_kind"]) == {
        "line_outage", "bad_data", "topology_error", "fdia"
    }


def test_config_validation():
    with pytest.raises(ValueError):
        SynergyConfig(bias_gate_fraction=1.5)
    with pytest.raises(ValueError):
        SynergyConfig(max_loops=0)


def test_diagnosis_doc_round_trip(clean_series):
    import json

    case, series = clean_series
    diags = run_synergy(series, case, SynergyConfig())
    doc = diags[3].to_doc()
    text = json.dumps(doc)
    assert json.loads(text)["tick"] == diags[3].tick


def test_parallel_jobs_match_serial(clean_series):
    case, series = clean_series
    short = msm.TimeSeries(series.ticks[:10])
    serial = run_synergy(short, case, SynergyConfig())
    parallel = run_synergy(short, case, SynergyConfig(), jobs=2)
    for a, b in zip(serial, parallel):
        assert a.root_cause == b.root_cause
        assert a.plain.v == b.plain.v
