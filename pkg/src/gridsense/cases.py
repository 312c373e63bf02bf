"""Bundled test cases and synthetic case builders.

``case14`` is the standard IEEE 14-bus system (all branches modeled as plain
lines; the data model carries no transformer taps).  The synthetic builders
produce connected meshes of configurable size for estimation and scaling
studies.
"""

from __future__ import annotations

import numpy as np

from .network import (ACTIVE, INACTIVE, PQ, PV, SLACK, Branch, Bus,
                      GridCase, admittance_matrix)

# id, kind, v_setpoint, p_gen, q_gen, p_load, q_load, g_shunt, b_shunt
_CASE14_BUSES = [
    (1, SLACK, 1.060, 2.324, 0.000, 0.000, 0.000, 0.0, 0.00),
    (2, PV, 1.045, 0.400, 0.424, 0.217, 0.127, 0.0, 0.00),
    (3, PV, 1.010, 0.000, 0.234, 0.942, 0.190, 0.0, 0.00),
    (4, PQ, 1.000, 0.000, 0.000, 0.478, -0.039, 0.0, 0.00),
    (5, PQ, 1.000, 0.000, 0.000, 0.076, 0.016, 0.0, 0.00),
    (6, PV, 1.070, 0.000, 0.122, 0.112, 0.075, 0.0, 0.00),
    (7, PQ, 1.000, 0.000, 0.000, 0.000, 0.000, 0.0, 0.00),
    (8, PV, 1.090, 0.000, 0.174, 0.000, 0.000, 0.0, 0.00),
    (9, PQ, 1.000, 0.000, 0.000, 0.295, 0.166, 0.0, 0.19),
    (10, PQ, 1.000, 0.000, 0.000, 0.090, 0.058, 0.0, 0.00),
    (11, PQ, 1.000, 0.000, 0.000, 0.035, 0.018, 0.0, 0.00),
    (12, PQ, 1.000, 0.000, 0.000, 0.061, 0.016, 0.0, 0.00),
    (13, PQ, 1.000, 0.000, 0.000, 0.135, 0.058, 0.0, 0.00),
    (14, PQ, 1.000, 0.000, 0.000, 0.149, 0.050, 0.0, 0.00),
]

# from, to, r, x, b_sh
_CASE14_BRANCHES = [
    (1, 2, 0.01938, 0.05917, 0.0528),
    (1, 5, 0.05403, 0.22304, 0.0492),
    (2, 3, 0.04699, 0.19797, 0.0438),
    (2, 4, 0.05811, 0.17632, 0.0340),
    (2, 5, 0.05695, 0.17388, 0.0346),
    (3, 4, 0.06701, 0.17103, 0.0128),
    (4, 5, 0.01335, 0.04211, 0.0000),
    (4, 7, 0.00000, 0.20912, 0.0000),
    (4, 9, 0.00000, 0.55618, 0.0000),
    (5, 6, 0.00000, 0.25202, 0.0000),
    (6, 11, 0.09498, 0.19890, 0.0000),
    (6, 12, 0.12291, 0.25581, 0.0000),
    (6, 13, 0.06615, 0.13027, 0.0000),
    (7, 8, 0.00000, 0.17615, 0.0000),
    (7, 9, 0.00000, 0.11001, 0.0000),
    (9, 10, 0.03181, 0.08450, 0.0000),
    (9, 14, 0.12711, 0.27038, 0.0000),
    (10, 11, 0.08205, 0.19207, 0.0000),
    (12, 13, 0.22092, 0.19988, 0.0000),
    (13, 14, 0.17093, 0.34802, 0.0000),
]


def case14() -> GridCase:
    buses = tuple(
        Bus(id=i, kind=k, v_setpoint=v, p_gen=pg, q_gen=qg,
            p_load=pl, q_load=ql, g_shunt=gs, b_shunt=bs)
        for i, k, v, pg, qg, pl, ql, gs, bs in _CASE14_BUSES
    )
    branches = tuple(
        Branch(id=n + 1, from_bus=f, to_bus=t, r=r, x=x, b_sh=b)
        for n, (f, t, r, x, b) in enumerate(_CASE14_BRANCHES)
    )
    return GridCase(base_mva=100.0, buses=buses, branches=branches)


def case4() -> GridCase:
    """Four-bus toy: slack with PMU candidacy at 1, loads at 2 and 3,
    zero-injection bus 4; line 2 is out of service."""
    buses = (
        Bus(1, SLACK, 1.02, p_gen=0.9),
        Bus(2, PQ, p_load=0.45, q_load=0.15),
        Bus(3, PQ, p_load=0.40, q_load=0.10),
        Bus(4, PQ),
    )
    branches = (
        Branch(1, 1, 2, 0.01, 0.06, 0.02),
        Branch(2, 1, 3, 0.02, 0.09, 0.02, status=INACTIVE),
        Branch(3, 1, 4, 0.01, 0.05, 0.01),
        Branch(4, 4, 3, 0.02, 0.08, 0.01),
    )
    return GridCase(base_mva=100.0, buses=buses, branches=branches)


def two_bus(p_load=0.1, q_load=0.0, x=0.1, r=0.0, v_slack=1.0) -> GridCase:
    return GridCase(
        base_mva=100.0,
        buses=(
            Bus(1, SLACK, v_slack),
            Bus(2, PQ, p_load=p_load, q_load=q_load),
        ),
        branches=(Branch(1, 1, 2, r, x),),
    )


def ring_mesh(
    n_bus: int,
    n_gen: int = 4,
    chord_every: int = 5,
    load_level: float = 0.08,
    inactive: int = 0,
    seed: int = 0,
) -> GridCase:
    """Connected ring-plus-chords mesh with generators spread evenly.

    Loading is kept light so power flow converges from a flat start.  When
    ``inactive`` > 0, that many extra chords are added out of service; they
    are swap candidates for topology-change schedules.
    """
    rng = np.random.default_rng(seed)
    if n_bus < 4:
        raise ValueError("ring_mesh needs at least 4 buses")
    gen_ids = set(np.linspace(1, n_bus, num=max(n_gen, 1), endpoint=False, dtype=int))
    buses = []
    total_load = 0.0
    for i in range(1, n_bus + 1):
        if i == 1:
            buses.append(Bus(1, SLACK, 1.02))
        elif i in gen_ids:
            buses.append(Bus(i, PV, 1.02, p_gen=0.0))
        else:
            pl = load_level * (0.5 + rng.random())
            ql = pl * (0.15 + 0.2 * rng.random())
            total_load += pl
            buses.append(Bus(i, PQ, p_load=pl, q_load=ql))
    # split active generation evenly so the slack is not overloaded; the
    # slack's p_gen is its nominal share (used when a duplicate demotes it
    # to a PV bus), the slack role itself ignores it
    pv_ids = [b.id for b in buses if b.kind == PV]
    share = total_load / max(len(pv_ids) + 1, 1)
    buses = [
        Bus(b.id, b.kind, b.v_setpoint, p_gen=share, q_gen=0.0)
        if b.kind in (PV, SLACK) else b
        for b in buses
    ]

    branches = []
    bid = 1
    for i in range(1, n_bus + 1):
        j = i + 1 if i < n_bus else 1
        branches.append(
            Branch(bid, i, j, 0.01 + 0.02 * rng.random(), 0.05 + 0.08 * rng.random(),
                   0.01 * rng.random())
        )
        bid += 1
    for i in range(1, n_bus + 1, chord_every):
        j = (i + n_bus // 2 - 1) % n_bus + 1
        if j in (i, i % n_bus + 1):
            continue
        branches.append(
            Branch(bid, i, j, 0.02 + 0.02 * rng.random(), 0.08 + 0.10 * rng.random())
        )
        bid += 1
    existing = {tuple(sorted((br.from_bus, br.to_bus))) for br in branches}
    added = 0
    tries = 0
    while added < inactive and tries < 200:
        tries += 1
        # spare ties span the ring so they bridge real voltage differences,
        # and are stiff so that energizing one is clearly visible
        i = int(rng.integers(1, n_bus + 1))
        j = (i + n_bus // 2 + int(rng.integers(-2, 3))) % n_bus + 1
        key = tuple(sorted((i, j)))
        if i == j or key in existing:
            continue
        existing.add(key)
        branches.append(
            Branch(bid, i, j, 0.01, 0.03 + 0.03 * rng.random(),
                   status=INACTIVE)
        )
        bid += 1
        added += 1
    return GridCase(base_mva=100.0, buses=tuple(buses), branches=tuple(branches))


def random_dc_mesh(n_nodes: int, rng: np.random.Generator) -> GridCase:
    """Random connected mesh with unit-ish reactances, for DC-model studies."""
    order = rng.permutation(np.arange(1, n_nodes + 1))
    branches = []
    bid = 1
    for k in range(1, n_nodes):
        i, j = int(order[k - 1]), int(order[k])
        branches.append(Branch(bid, i, j, 0.0, float(rng.uniform(0.05, 0.5))))
        bid += 1
    extra = int(rng.integers(n_nodes // 2, n_nodes + 1))
    existing = {tuple(sorted((br.from_bus, br.to_bus))) for br in branches}
    tries = 0
    while extra > 0 and tries < 200:
        tries += 1
        i, j = rng.integers(1, n_nodes + 1, size=2)
        key = tuple(sorted((int(i), int(j))))
        if i == j or key in existing:
            continue
        existing.add(key)
        branches.append(Branch(bid, int(i), int(j), 0.0, float(rng.uniform(0.05, 0.5))))
        bid += 1
        extra -= 1
    buses = tuple(
        Bus(i, SLACK if i == 1 else PQ, 1.0) for i in range(1, n_nodes + 1)
    )
    return GridCase(base_mva=100.0, buses=buses, branches=tuple(branches))


def provision_slack(case: GridCase) -> GridCase:
    """Set the slack bus's nominal p_gen to its actually-solved output.

    The slack role ignores p_gen, so the base case is unchanged electrically;
    but duplicates built from the result are self-sufficient (their demoted
    slack carries the full local balance including losses), which keeps tie
    flows near zero at any tiling depth.
    """
    from dataclasses import replace
    from .powerflow import solve_powerflow

    sol = solve_powerflow(case)
    y = admittance_matrix(case)
    idx = case.bus_index()
    slack = case.slack_bus
    v = np.array([sol.v[b.id] for b in case.buses])
    inj = (y @ v)[idx[slack.id]]
    p_out = (v[idx[slack.id]] * np.conj(inj)).real + slack.p_load
    buses = tuple(
        replace(b, p_gen=float(p_out)) if b.id == slack.id else b
        for b in case.buses
    )
    return GridCase(case.base_mva, buses, case.branches, case.extras)


def duplicate_case(case: GridCase, copies: int, tie_every: int = 10,
                   topology: str = "tree") -> GridCase:
    """Tile a case ``copies`` times, tying every ``tie_every``-th bus to its
    counterpart in an anchor copy.  Only the first copy keeps a slack bus.

    The anchor pattern trades power-flow conditioning against factorization
    fill: "chain" anchors to the previous copy (angle drift grows with the
    tiling), "star" to the first copy (flat diameter, but hub buses densify
    elimination), and "tree" to copy c//2 (log diameter, local separators).
    """
    if copies < 1:
        raise ValueError("copies must be >= 1")
    anchors = {
        "chain": lambda c: c - 1,
        "star": lambda c: 0,
        "tree": lambda c: c // 2,
    }
    if topology not in anchors:
        raise ValueError(f"unknown tie topology {topology!r}")
    anchor_of = anchors[topology]
    n_off = max(b.id for b in case.buses)
    buses = list(case.buses)
    links = [(br.from_bus, br.to_bus, br.r, br.x, br.b_sh, br.status)
             for br in case.branches]
    tie_ids = [b.id for b in case.buses][::max(tie_every, 1)]
    for c in range(1, copies):
        for b in case.buses:
            kind = PV if b.kind == SLACK else b.kind
            buses.append(
                Bus(b.id + c * n_off, kind, b.v_setpoint, b.p_gen, b.q_gen,
                    b.p_load, b.q_load, b.g_shunt, b.b_shunt)
            )
        for br in case.branches:
            links.append((br.from_bus + c * n_off, br.to_bus + c * n_off,
                          br.r, br.x, br.b_sh, br.status))
        anchor = anchor_of(c) * n_off
        for bid in tie_ids:
            links.append((bid + anchor, bid + c * n_off,
                          0.01, 0.08, 0.0, ACTIVE))
    branches = tuple(
        Branch(k + 1, f, t, r, x, b, status)
        for k, (f, t, r, x, b, status) in enumerate(links)
    )
    return GridCase(case.base_mva, tuple(buses), branches)
