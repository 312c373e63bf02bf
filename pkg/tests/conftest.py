import warnings

import numpy as np
import pytest

from gridsense import measurements as msm
from gridsense import powerflow as pf
from gridsense.cases import case14, case4, ring_mesh
from gridsense.network import (
    ACTIVE,
    CLOSED,
    INACTIVE,
    OPEN,
    Branch,
    GridCase,
    IslandWarning,
    extend_to_node_breaker,
)

warnings.simplefilter("ignore", IslandWarning)


@pytest.fixture(scope="session")
def c14():
    return case14()


@pytest.fixture(scope="session")
def c14_solution(c14):
    return pf.solve_powerflow(c14)


@pytest.fixture(scope="session")
def c14_stressed(c14):
    return pf.apply_load_factor(c14, 4.5)


@pytest.fixture(scope="session")
def toy4():
    return case4()


@pytest.fixture(scope="session")
def toy4_nb(toy4):
    return extend_to_node_breaker(toy4, [br.id for br in toy4.branches])


@pytest.fixture(scope="session")
def c14_with_spares(c14):
    """case14 plus three inactive chords, usable as swap candidates."""
    extra = (
        Branch(21, 2, 6, 0.05, 0.20, status=INACTIVE),
        Branch(22, 3, 9, 0.05, 0.25, status=INACTIVE),
        Branch(23, 5, 10, 0.04, 0.22, status=INACTIVE),
    )
    return GridCase(c14.base_mva, c14.buses, c14.branches + extra)


def build_nb50(seed=0):
    """A 50-node node-breaker toy: 26-bus mesh with 24 lines split.

    Twenty-two of the splits sit on active lines (closed switches), two on
    out-of-service chords (open switches).
    """
    base = ring_mesh(26, n_gen=4, chord_every=4, load_level=0.25,
                     inactive=4, seed=seed)
    active_ids = [br.id for br in base.branches if br.status == ACTIVE]
    inactive_ids = [br.id for br in base.branches if br.status == INACTIVE]
    split = active_ids[:20] + inactive_ids[:4]
    nb = extend_to_node_breaker(base, split)
    assert len(nb.network_nodes()) == 50
    return nb


@pytest.fixture(scope="session")
def nb50():
    return build_nb50()


def nb50_fixture(seed):
    """One randomized error scenario on the 50-node toy.

    Returns (nb, measurements, truth, injected) where injected records the
    bad RTU channel and the two flipped switches.  Flip targets are chosen
    with a detectability margin: closed switches must carry current on a
    metered line, open switches must see a voltage across.
    """
    rng = np.random.default_rng(seed)
    nb = build_nb50()
    truth = msm.solve_truth(nb)
    metered = tuple(br.id for br in nb.base.branches if br.status == ACTIVE)
    placement = msm.default_placement(nb.base, rtu_line_branches=metered)
    ms = msm.generate_measurements(nb, truth, 0.001, placement, rng)

    statuses = nb.true_statuses()
    line_of = {sw.id: sw.line for sw in nb.switches}
    flow_of = {}
    for sw in nb.switches:
        if statuses[sw.id] == CLOSED and line_of[sw.id] in metered:
            flow_of[sw.id] = abs(
                (truth.v[sw.from_bus] - truth.v[sw.to_bus]) / 1e-4
            )
    closed_ok = sorted(s for s, f in flow_of.items() if f > 0.1)
    open_gap = {
        sw.id: abs(truth.v[sw.from_bus] - truth.v[sw.to_bus])
        for sw in nb.switches
        if statuses[sw.id] == OPEN
    }
    best_open = max(open_gap, key=open_gap.get)
    assert open_gap[best_open] > 0.04, "fixture needs a visible open switch"
    rng.shuffle(closed_ok)
    flips = [closed_ok[0], best_open]
    ms = ms.with_switch_flips(flips)

    rtu_buses = [r.bus for r in ms.rtu_bus]
    bad_bus = int(rng.choice(rtu_buses))
    ms = ms.with_channel_offset(("rtu", bad_bus, "p"), 1.0)
    return nb, ms, truth, {"bad_rtu": bad_bus, "flips": tuple(flips)}
