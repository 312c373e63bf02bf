"""Grid case model: buses, branches, switches, and admittance assembly.

The native case format is a JSON document (see ``parse_case``).  A bus-branch
case can be extended to a node-breaker case by splitting selected lines with
a pseudo bus and a switch; the extension is loss-free and reversible.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace

import scipy.sparse as sp

from .errors import CaseValidationError

SLACK = "slack"
PV = "pv"
PQ = "pq"
BUS_KINDS = (SLACK, PV, PQ)

ACTIVE = "active"
INACTIVE = "inactive"

OPEN = "open"
CLOSED = "closed"

# Closed switches are stamped as a low-impedance branch of this reactance.
X_SWITCH = 1.0e-4


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str = PQ
    v_setpoint: float = 1.0
    p_gen: float = 0.0
    q_gen: float = 0.0
    p_load: float = 0.0
    q_load: float = 0.0
    g_shunt: float = 0.0
    b_shunt: float = 0.0
    extras: tuple = ()

    def __post_init__(self):
        if self.kind not in BUS_KINDS:
            raise CaseValidationError(
                f"unknown bus kind {self.kind!r} at bus {self.id}", element=self.id
            )

    @property
    def has_injection(self) -> bool:
        return any(
            abs(v) > 0 for v in (self.p_gen, self.q_gen, self.p_load, self.q_load)
        )

    @property
    def is_generator(self) -> bool:
        return self.kind in (SLACK, PV)


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_sh: float = 0.0
    status: str = ACTIVE
    extras: tuple = ()

    def __post_init__(self):
        if self.x == 0.0:
            raise CaseValidationError(
                f"zero reactance on branch {self.id}", element=self.id
            )
        if self.status not in (ACTIVE, INACTIVE):
            raise CaseValidationError(
                f"unknown branch status {self.status!r} on branch {self.id}",
                element=self.id,
            )

    @property
    def admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Switch:
    id: int
    from_bus: int
    to_bus: int
    measured_status: str
    line: int | None = None  # branch this switch was split from, if any

    def __post_init__(self):
        if self.measured_status not in (OPEN, CLOSED):
            raise CaseValidationError(
                f"unknown switch status {self.measured_status!r} on switch {self.id}",
                element=self.id,
            )


class IslandWarning(UserWarning):
    pass


def _connected_from_slack(buses, branches, active_only=True):
    """Bus ids reachable from the slack over (active) branches."""
    adj = {b.id: [] for b in buses}
    for br in branches:
        if active_only and br.status != ACTIVE:
            continue
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    slack = next(b.id for b in buses if b.kind == SLACK)
    seen = {slack}
    stack = [slack]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


@dataclass(frozen=True)
class GridCase:
    """Bus-branch model of a grid, all quantities in p.u. on ``base_mva``."""

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    extras: tuple = ()
    islanded_buses: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        seen = set()
        for i in ids:
            if i in seen:
                raise CaseValidationError(f"duplicate bus id {i}", element=i)
            seen.add(i)
        slacks = [b.id for b in self.buses if b.kind == SLACK]
        if len(slacks) != 1:
            raise CaseValidationError(
                f"expected exactly one slack bus, found {len(slacks)}",
                element=slacks or None,
            )
        bids = set()
        for br in self.branches:
            if br.id in bids:
                raise CaseValidationError(
                    f"duplicate branch id {br.id}", element=br.id
                )
            bids.add(br.id)
            for end in (br.from_bus, br.to_bus):
                if end not in seen:
                    raise CaseValidationError(
                        f"branch {br.id} references unknown bus {end}",
                        element=br.id,
                    )
        reachable = _connected_from_slack(self.buses, self.branches)
        islands = tuple(sorted(set(ids) - reachable))
        object.__setattr__(self, "islanded_buses", islands)
        if islands:
            warnings.warn(
                f"case has islanded buses (not connected to slack): {list(islands)}",
                IslandWarning,
                stacklevel=2,
            )

    # -- lookups -------------------------------------------------------
    def bus_index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    def bus(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    def branch(self, branch_id: int) -> Branch:
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise KeyError(branch_id)

    @property
    def slack_bus(self) -> Bus:
        return next(b for b in self.buses if b.kind == SLACK)

    def active_branches(self) -> tuple[Branch, ...]:
        return tuple(br for br in self.branches if br.status == ACTIVE)

    def generator_buses(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses if b.is_generator)

    def load_buses(self) -> tuple[int, ...]:
        return tuple(
            b.id
            for b in self.buses
            if not b.is_generator and (abs(b.p_load) > 0 or abs(b.q_load) > 0)
        )

    def with_branch_status(self, status_by_id: dict[int, str]) -> "GridCase":
        branches = tuple(
            replace(br, status=status_by_id.get(br.id, br.status))
            for br in self.branches
        )
        return GridCase(self.base_mva, self.buses, branches, self.extras)

    def scaled_loads(self, factors: dict[int, float]) -> "GridCase":
        buses = tuple(
            replace(
                b,
                p_load=b.p_load * factors.get(b.id, 1.0),
                q_load=b.q_load * factors.get(b.id, 1.0),
            )
            for b in self.buses
        )
        return GridCase(self.base_mva, buses, self.branches, self.extras)

    def snapshot(self) -> "GraphSnapshot":
        return GraphSnapshot.from_edges(br.id for br in self.active_branches())


@dataclass(frozen=True)
class NodeBreakerCase:
    """A GridCase plus switch-level detail on selected lines.

    Each selected line (i, j) is split: a pseudo bus p is inserted, a switch
    (i, p) mirrors the line status, and the line is re-terminated as (p, j).
    Pseudo buses carry no injection.  ``strip()`` recovers the original case.
    """

    base: GridCase
    switches: tuple[Switch, ...]
    pseudo_node_map: tuple[tuple[int, int], ...]  # (pseudo bus id, branch id)

    def __post_init__(self):
        known = {b.id for b in self.base.buses} | {p for p, _ in self.pseudo_node_map}
        for sw in self.switches:
            for end in (sw.from_bus, sw.to_bus):
                if end not in known:
                    raise CaseValidationError(
                        f"switch {sw.id} references unknown bus {end}",
                        element=sw.id,
                    )

    def strip(self) -> GridCase:
        return self.base

    def split_lines(self) -> tuple[int, ...]:
        return tuple(br for _, br in self.pseudo_node_map)

    def network_nodes(self) -> tuple[Bus, ...]:
        """Physical buses followed by zero-injection pseudo buses."""
        pseudo = tuple(Bus(id=p, kind=PQ) for p, _ in self.pseudo_node_map)
        return self.base.buses + pseudo

    def network_branches(self) -> tuple[Branch, ...]:
        """Branches with split lines re-terminated at their pseudo bus.

        Split lines are always active here: their connectivity is carried by
        the switch, not by the branch status.
        """
        pseudo_for = {br: p for p, br in self.pseudo_node_map}
        out = []
        for br in self.base.branches:
            if br.id in pseudo_for:
                out.append(
                    replace(br, from_bus=pseudo_for[br.id], status=ACTIVE)
                )
            else:
                out.append(br)
        return tuple(out)

    def switch(self, switch_id: int) -> Switch:
        for sw in self.switches:
            if sw.id == switch_id:
                return sw
        raise KeyError(switch_id)

    def with_switch_status(self, status_by_id: dict[int, str]) -> "NodeBreakerCase":
        switches = tuple(
            replace(sw, measured_status=status_by_id.get(sw.id, sw.measured_status))
            for sw in self.switches
        )
        return NodeBreakerCase(self.base, switches, self.pseudo_node_map)

    def true_statuses(self) -> dict[int, str]:
        """Physical switch status implied by each split line's true status."""
        by_id = {br.id: br for br in self.base.branches}
        return {
            sw.id: (CLOSED if by_id[sw.line].status == ACTIVE else OPEN)
            for sw in self.switches
        }

    def measured_statuses(self) -> dict[int, str]:
        return {sw.id: sw.measured_status for sw in self.switches}


@dataclass(frozen=True)
class GraphSnapshot:
    """Active-edge set of a case at one tick, with a permutation-invariant id."""

    edges: frozenset[int]
    topology_id: str

    @staticmethod
    def from_edges(edges) -> "GraphSnapshot":
        edge_set = frozenset(int(e) for e in edges)
        digest = hashlib.sha1(
            ",".join(str(e) for e in sorted(edge_set)).encode()
        ).hexdigest()[:16]
        return GraphSnapshot(edge_set, digest)


# ---------------------------------------------------------------------------
# parsing / serialization
# ---------------------------------------------------------------------------

_BUS_FIELDS = {
    "id", "kind", "v_setpoint", "p_gen", "q_gen", "p_load", "q_load",
    "g_shunt", "b_shunt",
}
_BRANCH_FIELDS = {"id", "from", "to", "r", "x", "b_sh", "status"}


def _extras(doc: dict, known: set) -> tuple:
    return tuple(sorted((k, json.dumps(v)) for k, v in doc.items() if k not in known))


def parse_case(text: str) -> GridCase:
    """Parse a JSON case document into a validated GridCase.

    Unknown fields are preserved in each element's ``extras`` bag so that
    round-tripping a document does not lose information.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseValidationError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "buses" not in doc or "branches" not in doc:
        raise CaseValidationError("case document must have 'buses' and 'branches'")

    buses = []
    for raw in doc["buses"]:
        if "id" not in raw:
            raise CaseValidationError("bus without id")
        buses.append(
            Bus(
                id=int(raw["id"]),
                kind=raw.get("kind", PQ),
                v_setpoint=float(raw.get("v_setpoint", 1.0)),
                p_gen=float(raw.get("p_gen", 0.0)),
                q_gen=float(raw.get("q_gen", 0.0)),
                p_load=float(raw.get("p_load", 0.0)),
                q_load=float(raw.get("q_load", 0.0)),
                g_shunt=float(raw.get("g_shunt", 0.0)),
                b_shunt=float(raw.get("b_shunt", 0.0)),
                extras=_extras(raw, _BUS_FIELDS),
            )
        )
    branches = []
    for raw in doc["branches"]:
        for key in ("id", "from", "to", "x"):
            if key not in raw:
                raise CaseValidationError(
                    f"branch missing field {key!r}", element=raw.get("id")
                )
        branches.append(
            Branch(
                id=int(raw["id"]),
                from_bus=int(raw["from"]),
                to_bus=int(raw["to"]),
                r=float(raw.get("r", 0.0)),
                x=float(raw["x"]),
                b_sh=float(raw.get("b_sh", 0.0)),
                status=raw.get("status", ACTIVE),
                extras=_extras(raw, _BRANCH_FIELDS),
            )
        )
    case = GridCase(
        base_mva=float(doc.get("base_mva", 100.0)),
        buses=tuple(buses),
        branches=tuple(branches),
        extras=_extras(doc, {"base_mva", "buses", "branches", "switches"}),
    )
    if doc.get("switches"):
        raise CaseValidationError(
            "document carries switches; parse it with parse_node_breaker()"
        )
    return case


def case_to_json(case: GridCase, indent=None) -> str:
    def undump(extras):
        return {k: json.loads(v) for k, v in extras}

    doc = {
        "base_mva": case.base_mva,
        "buses": [
            {
                "id": b.id, "kind": b.kind, "v_setpoint": b.v_setpoint,
                "p_gen": b.p_gen, "q_gen": b.q_gen,
                "p_load": b.p_load, "q_load": b.q_load,
                "g_shunt": b.g_shunt, "b_shunt": b.b_shunt,
                **undump(b.extras),
            }
            for b in case.buses
        ],
        "branches": [
            {
                "id": br.id, "from": br.from_bus, "to": br.to_bus,
                "r": br.r, "x": br.x, "b_sh": br.b_sh, "status": br.status,
                **undump(br.extras),
            }
            for br in case.branches
        ],
        **undump(case.extras),
    }
    return json.dumps(doc, indent=indent)


def parse_node_breaker(text: str) -> NodeBreakerCase:
    """Parse a case document whose ``switches[]`` mark split lines."""
    doc = json.loads(text)
    switches = doc.pop("switches", [])
    case = parse_case(json.dumps(doc))
    nb = extend_to_node_breaker(case, [int(s["line"]) for s in switches])
    status = {}
    by_line = {sw.line: sw.id for sw in nb.switches}
    for s in switches:
        status[by_line[int(s["line"])]] = s.get("measured_status", CLOSED)
    return nb.with_switch_status(status)


def node_breaker_to_json(nb: NodeBreakerCase, indent=None) -> str:
    doc = json.loads(case_to_json(nb.base))
    doc["switches"] = [
        {
            "id": sw.id, "from": sw.from_bus, "to": sw.to_bus,
            "line": sw.line, "measured_status": sw.measured_status,
        }
        for sw in nb.switches
    ]
    return json.dumps(doc, indent=indent)


def parse_any_case(text: str):
    """Dispatch on the presence of switches[]; returns GridCase or NodeBreakerCase."""
    doc = json.loads(text)
    if doc.get("switches"):
        return parse_node_breaker(text)
    return parse_case(text)


# ---------------------------------------------------------------------------
# node-breaker extension
# ---------------------------------------------------------------------------


def extend_to_node_breaker(case: GridCase, lines) -> NodeBreakerCase:
    """Split each selected line with a pseudo bus and a mirroring switch.

    An active line yields a closed switch, an inactive one an open switch.
    Splitting the same line twice is an error (it would corrupt index maps).
    """
    lines = [int(l) for l in lines]
    known = {br.id for br in case.branches}
    for l in lines:
        if l not in known:
            raise CaseValidationError(f"unknown branch id {l}", element=l)
    if len(set(lines)) != len(lines):
        raise CaseValidationError("a line may be split at most once")

    next_bus = max((b.id for b in case.buses), default=0) + 1
    switches = []
    pseudo_map = []
    for k, line_id in enumerate(lines):
        br = case.branch(line_id)
        pseudo = next_bus + k
        status = CLOSED if br.status == ACTIVE else OPEN
        switches.append(
            Switch(
                id=k + 1,
                from_bus=br.from_bus,
                to_bus=pseudo,
                measured_status=status,
                line=line_id,
            )
        )
        pseudo_map.append((pseudo, line_id))
    return NodeBreakerCase(case, tuple(switches), tuple(pseudo_map))


def extend_node_breaker(nb: NodeBreakerCase, lines) -> NodeBreakerCase:
    """Split additional lines of an already-extended case."""
    already = set(nb.split_lines())
    overlap = already & {int(l) for l in lines}
    if overlap:
        raise CaseValidationError(
            f"lines already split: {sorted(overlap)}", element=sorted(overlap)
        )
    fresh = extend_to_node_breaker(nb.base, list(nb.split_lines()) + list(lines))
    # keep prior measured statuses (they may have been edited post-extension)
    status = {sw.line: sw.measured_status for sw in nb.switches}
    keep = {
        sw.id: status[sw.line] for sw in fresh.switches if sw.line in status
    }
    return fresh.with_switch_status(keep)


# ---------------------------------------------------------------------------
# admittance
# ---------------------------------------------------------------------------


def admittance_matrix(case: GridCase, branches=None) -> sp.csr_matrix:
    """Complex bus admittance matrix; inactive branches contribute nothing.

    Off-diagonals are -y_ij, diagonals accumulate series admittances plus
    line-charging and bus shunts.
    """
    idx = case.bus_index()
    n = len(case.buses)
    rows, cols, vals = [], [], []
    use = case.branches if branches is None else branches
    for br in use:
        if br.status != ACTIVE:
            continue
        i, j = idx[br.from_bus], idx[br.to_bus]
        y = br.admittance
        ysh = 1j * br.b_sh / 2.0
        rows += [i, j, i, j]
        cols += [i, j, j, i]
        vals += [y + ysh, y + ysh, -y, -y]
    for b in case.buses:
        if b.g_shunt or b.b_shunt:
            i = idx[b.id]
            rows.append(i)
            cols.append(i)
            vals.append(complex(b.g_shunt, b.b_shunt))
    m = sp.coo_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex).tocsr()
    m.sum_duplicates()
    m.eliminate_zeros()
    return m


def extended_admittance(
    nb: NodeBreakerCase, statuses: dict[int, str] | None = None
) -> tuple[sp.csr_matrix, tuple[Bus, ...]]:
    """Admittance of the extended network with closed switches as x_sw branches.

    ``statuses`` maps switch id to open/closed; defaults to the true statuses
    implied by the split lines.  Open switches contribute nothing; their
    pseudo bus stays connected to the grid through the re-terminated line.
    """
    if statuses is None:
        statuses = nb.true_statuses()
    nodes = nb.network_nodes()
    branches = list(nb.network_branches())
    next_id = max(br.id for br in nb.base.branches) + 1
    for k, sw in enumerate(nb.switches):
        if statuses.get(sw.id, sw.measured_status) == CLOSED:
            branches.append(
                Branch(
                    id=next_id + k,
                    from_bus=sw.from_bus,
                    to_bus=sw.to_bus,
                    r=0.0,
                    x=X_SWITCH,
                )
            )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IslandWarning)
        shell = GridCase(nb.base.base_mva, nodes, tuple(branches))
    return admittance_matrix(shell), nodes
