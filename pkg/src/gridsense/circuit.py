"""Equivalent-circuit assembly: map meters and switches to linear elements
and build the sparse affine KCL system [Y | B] [x; n] = J.

State columns are interleaved (V_re, V_im) per node, physical nodes first,
followed by one complex flow variable per switch.  Every meter contributes
noise columns to B (one scalar channel per axis); zero-injection nodes end
up as hard equality rows with an empty B-row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import CaseValidationError, UnobservableInputError
from .network import (
    ACTIVE,
    CLOSED,
    OPEN,
    X_SWITCH,
    GridCase,
    NodeBreakerCase,
)


@dataclass(frozen=True)
class RtuSensitivity:
    g_rtu: float
    b_rtu: float


def rtu_to_sensitivity(p: float, q: float, v_mag: float) -> RtuSensitivity:
    """Map an (P, Q, |V|) reading to the equivalent local admittance."""
    if v_mag <= 0:
        raise ValueError(f"voltage magnitude must be positive, got {v_mag}")
    return RtuSensitivity(g_rtu=p / v_mag**2, b_rtu=-q / v_mag**2)


@dataclass(frozen=True)
class LinearCircuit:
    """Assembled sparse system with full index bookkeeping."""

    y: sp.csr_matrix            # rows x state columns
    b: sp.csr_matrix            # rows x noise columns
    j: np.ndarray               # right-hand side
    row_labels: tuple           # ("kcl"|"pmu_v"|"line"|"sw"|"vref", element, axis)
    x_labels: tuple             # ("v", node, axis) or ("isw", switch, axis)
    noise_labels: tuple         # (channel kind, element, axis)
    weights: np.ndarray         # one positive weight per noise column
    node_ids: tuple             # state node order (physical then pseudo)
    switches: tuple             # Switch objects stamped into the system

    @property
    def n_rows(self) -> int:
        return self.y.shape[0]

    @property
    def n_state(self) -> int:
        return self.y.shape[1]

    @property
    def n_noise(self) -> int:
        return self.b.shape[1]

    def v_columns(self, node_id: int) -> tuple[int, int]:
        k = self.node_ids.index(node_id)
        return 2 * k, 2 * k + 1

    def split_state(self, x: np.ndarray):
        """State vector -> (complex voltage by node, complex flow by switch)."""
        nv = 2 * len(self.node_ids)
        v = {
            node: complex(x[2 * k], x[2 * k + 1])
            for k, node in enumerate(self.node_ids)
        }
        flows = {}
        for k, sw in enumerate(self.switches):
            flows[sw.id] = complex(x[nv + 2 * k], x[nv + 2 * k + 1])
        return v, flows

    def noise_by_channel(self, n: np.ndarray) -> dict:
        return {label: float(val) for label, val in zip(self.noise_labels, n)}

    def dump_triplets(self) -> str:
        """Debug dump: sparse triplets of [Y | B] in matrix-market style."""
        coo_y = self.y.tocoo()
        coo_b = self.b.tocoo()
        lines = [
            "%%MatrixMarket matrix coordinate real general",
            f"% rows={self.n_rows} state={self.n_state} noise={self.n_noise}",
            f"{self.n_rows} {self.n_state + self.n_noise} "
            f"{coo_y.nnz + coo_b.nnz}",
        ]
        for r, c, v in zip(coo_y.row, coo_y.col, coo_y.data):
            lines.append(f"{r + 1} {c + 1} {v:.17g}")
        for r, c, v in zip(coo_b.row, coo_b.col, coo_b.data):
            lines.append(f"{r + 1} {c + 1 + self.n_state} {v:.17g}")
        return "\n".join(lines) + "\n"

    def dump_index_maps(self) -> str:
        return json.dumps(
            {
                "rows": [list(l) for l in self.row_labels],
                "state": [list(l) for l in self.x_labels],
                "noise": [list(l) for l in self.noise_labels],
                "weights": self.weights.tolist(),
                "rhs": self.j.tolist(),
            }
        )


class CircuitBuilder:
    """Accumulates stamps, then finalizes an immutable LinearCircuit."""

    def __init__(self, case_or_nb):
        if isinstance(case_or_nb, NodeBreakerCase):
            self.nb = case_or_nb
            self.case = case_or_nb.base
            nodes = case_or_nb.network_nodes()
            self.branches = case_or_nb.network_branches()
            self.switch_defs = case_or_nb.switches
            self.pseudo = {p for p, _ in case_or_nb.pseudo_node_map}
        elif isinstance(case_or_nb, GridCase):
            self.nb = None
            self.case = case_or_nb
            nodes = case_or_nb.buses
            self.branches = case_or_nb.branches
            self.switch_defs = ()
            self.pseudo = set()
        else:
            raise TypeError(f"expected GridCase or NodeBreakerCase, got {type(case_or_nb)}")
        self.nodes = nodes
        self.node_ids = tuple(b.id for b in nodes)
        self.node_pos = {b.id: k for k, b in enumerate(nodes)}
        self.branch_by_id = {br.id: br for br in self.branches}
        self.n_v = 2 * len(nodes)
        self.n_state = self.n_v + 2 * len(self.switch_defs)
        self.sw_pos = {sw.id: k for k, sw in enumerate(self.switch_defs)}

        self._rows = []            # row labels, KCL rows first
        self._tri_y = []           # (row, col, val)
        self._tri_b = []
        self._rhs = {}
        self._noise = []           # channel labels in stamp order
        self._weights = []
        self._metered_nodes = set()
        self._has_pmu_v = False
        self._stamped_status = {}  # switch id -> status actually stamped

        for k, node in enumerate(self.node_ids):
            self._rows.append(("kcl", node, "R"))
            self._rows.append(("kcl", node, "I"))
        self._stamp_network()

    # -- primitive accumulation helpers --------------------------------
    def _vcol(self, node, axis):
        return 2 * self.node_pos[node] + (0 if axis == "R" else 1)

    def _swcol(self, sw_id, axis):
        return self.n_v + 2 * self.sw_pos[sw_id] + (0 if axis == "R" else 1)

    def _kcl_row(self, node, axis):
        return 2 * self.node_pos[node] + (0 if axis == "R" else 1)

    def _new_row(self, label) -> int:
        self._rows.append(label)
        return len(self._rows) - 1

    def _new_noise(self, channel, weight) -> int:
        if weight <= 0:
            raise ValueError(f"weight for {channel} must be positive")
        self._noise.append(channel)
        self._weights.append(float(weight))
        return len(self._noise) - 1

    def _add_y(self, row, col, val):
        if val != 0.0:
            self._tri_y.append((row, col, float(val)))

    def _add_b(self, row, col, val):
        self._tri_b.append((row, col, float(val)))

    def _add_rhs(self, row, val):
        self._rhs[row] = self._rhs.get(row, 0.0) + float(val)

    def _stamp_admittance_pair(self, row_r, row_i, node_i, node_j, g, b, bsh2=0.0):
        """Current y (V_i - V_j) + j*bsh2*V_i into the given row pair."""
        ir, ii = self._vcol(node_i, "R"), self._vcol(node_i, "I")
        self._add_y(row_r, ir, g)
        self._add_y(row_r, ii, -b - bsh2)
        self._add_y(row_i, ir, b + bsh2)
        self._add_y(row_i, ii, g)
        if node_j is not None:
            jr, ji = self._vcol(node_j, "R"), self._vcol(node_j, "I")
            self._add_y(row_r, jr, -g)
            self._add_y(row_r, ji, b)
            self._add_y(row_i, jr, -b)
            self._add_y(row_i, ji, -g)

    # -- network --------------------------------------------------------
    def _stamp_network(self):
        for br in self.branches:
            if br.status != ACTIVE:
                continue
            y = br.admittance
            bsh2 = br.b_sh / 2.0
            fr, fi = self._kcl_row(br.from_bus, "R"), self._kcl_row(br.from_bus, "I")
            tr, ti = self._kcl_row(br.to_bus, "R"), self._kcl_row(br.to_bus, "I")
            self._stamp_admittance_pair(fr, fi, br.from_bus, br.to_bus, y.real, y.imag, bsh2)
            self._stamp_admittance_pair(tr, ti, br.to_bus, br.from_bus, y.real, y.imag, bsh2)
        for node in self.nodes:
            if node.g_shunt or node.b_shunt:
                rr, ri = self._kcl_row(node.id, "R"), self._kcl_row(node.id, "I")
                self._stamp_admittance_pair(
                    rr, ri, node.id, None, node.g_shunt, node.b_shunt
                )

    # -- meters ----------------------------------------------------------
    def stamp_rtu(self, reading, weight):
        """Bus RTU: injection mapped to local admittance plus noise on KCL rows."""
        bus = reading.bus
        if bus not in self.node_pos:
            raise CaseValidationError(f"RTU references unknown bus {bus}", bus)
        sens = rtu_to_sensitivity(reading.p, reading.q, reading.v_mag)
        rr, ri = self._kcl_row(bus, "R"), self._kcl_row(bus, "I")
        # minus the injected current (leaving current convention)
        self._stamp_admittance_pair(rr, ri, bus, None, -sens.g_rtu, -sens.b_rtu)
        for axis, row in (("R", rr), ("I", ri)):
            col = self._new_noise(("rtu", bus, axis), weight)
            self._add_b(row, col, -1.0)
        self._metered_nodes.add(bus)

    def stamp_pmu(self, reading, weight):
        """Bus PMU: measured injection current on KCL rows plus voltage rows."""
        bus = reading.bus
        if bus not in self.node_pos:
            raise CaseValidationError(f"PMU references unknown bus {bus}", bus)
        rr, ri = self._kcl_row(bus, "R"), self._kcl_row(bus, "I")
        for axis, row, meas in (("R", rr, reading.i_re), ("I", ri, reading.i_im)):
            col = self._new_noise(("pmu_i", bus, axis), weight)
            self._add_b(row, col, -1.0)
            self._add_rhs(row, meas)
        for axis, meas in (("R", reading.v_re), ("I", reading.v_im)):
            row = self._new_row(("pmu_v", bus, axis))
            self._add_y(row, self._vcol(bus, axis), 1.0)
            col = self._new_noise(("pmu_v", bus, axis), weight)
            self._add_b(row, col, -1.0)
            self._add_rhs(row, meas)
        self._metered_nodes.add(bus)
        self._has_pmu_v = True

    def stamp_line_meter(self, reading, weight):
        """RTU line meter: control-circuit row pair tying the model's branch
        flow at the metered end to the sensitivity-mapped reading."""
        br = self.branch_by_id.get(reading.branch)
        if br is None:
            raise CaseValidationError(
                f"line meter references unknown branch {reading.branch}",
                reading.branch,
            )
        i = reading.end_bus
        j = br.to_bus if i == br.from_bus else br.from_bus
        if i not in (br.from_bus, br.to_bus):
            raise CaseValidationError(
                f"line meter end bus {i} not on branch {br.id}", br.id
            )
        row_r = self._new_row(("line", br.id, "R"))
        row_i = self._new_row(("line", br.id, "I"))
        if br.status == ACTIVE:
            y = br.admittance
            self._stamp_admittance_pair(
                row_r, row_i, i, j, y.real, y.imag, br.b_sh / 2.0
            )
        sens = rtu_to_sensitivity(reading.p_flow, reading.q_flow, reading.v_mag)
        self._stamp_admittance_pair(row_r, row_i, i, None, -sens.g_rtu, -sens.b_rtu)
        for axis, row in (("R", row_r), ("I", row_i)):
            col = self._new_noise(("rtu_line", br.id, axis), weight)
            self._add_b(row, col, -1.0)

    def stamp_pmu_line(self, reading, weight):
        """PMU line meter: branch flow at the from end pinned to the phasor."""
        br = self.branch_by_id.get(reading.branch)
        if br is None:
            raise CaseValidationError(
                f"PMU line meter references unknown branch {reading.branch}",
                reading.branch,
            )
        row_r = self._new_row(("pmu_line", br.id, "R"))
        row_i = self._new_row(("pmu_line", br.id, "I"))
        if br.status == ACTIVE:
            y = br.admittance
            self._stamp_admittance_pair(
                row_r, row_i, br.from_bus, br.to_bus, y.real, y.imag, br.b_sh / 2.0
            )
        for axis, row, meas in (("R", row_r, reading.i_re), ("I", row_i, reading.i_im)):
            col = self._new_noise(("pmu_line", br.id, axis), weight)
            self._add_b(row, col, -1.0)
            self._add_rhs(row, meas)

    def stamp_switch(self, switch, measured_status, weight):
        """Switch flow variable, its KCL coupling, and the status model rows.

        Open: I_sw = n_sw on both axes.  Closed: a low-impedance branch
        (reactance X_SWITCH) with noise, I = -j (V_i - V_j)/x_sw + n_sw.
        """
        if switch.id not in self.sw_pos:
            raise CaseValidationError(f"unknown switch {switch.id}", switch.id)
        i, j = switch.from_bus, switch.to_bus
        cr, ci = self._swcol(switch.id, "R"), self._swcol(switch.id, "I")
        self._add_y(self._kcl_row(i, "R"), cr, 1.0)
        self._add_y(self._kcl_row(i, "I"), ci, 1.0)
        self._add_y(self._kcl_row(j, "R"), cr, -1.0)
        self._add_y(self._kcl_row(j, "I"), ci, -1.0)

        row_r = self._new_row(("sw", switch.id, "R"))
        row_i = self._new_row(("sw", switch.id, "I"))
        self._add_y(row_r, cr, 1.0)
        self._add_y(row_i, ci, 1.0)
        if measured_status == CLOSED:
            k = 1.0 / X_SWITCH
            # I^R = k (V_i^I - V_j^I);  I^I = -k (V_i^R - V_j^R)
            self._add_y(row_r, self._vcol(i, "I"), -k)
            self._add_y(row_r, self._vcol(j, "I"), k)
            self._add_y(row_i, self._vcol(i, "R"), k)
            self._add_y(row_i, self._vcol(j, "R"), -k)
        elif measured_status != OPEN:
            raise CaseValidationError(
                f"unknown switch status {measured_status!r}", switch.id
            )
        for axis, row in (("R", row_r), ("I", row_i)):
            col = self._new_noise(("sw", switch.id, axis), weight)
            self._add_b(row, col, -1.0)
        self._stamped_status[switch.id] = measured_status

    def stamp_voltage_reference(self, bus, v_re, v_im, weight=1.0):
        """Pseudo PMU voltage rows pinning the angle reference at a bus."""
        for axis, meas in (("R", v_re), ("I", v_im)):
            row = self._new_row(("vref", bus, axis))
            self._add_y(row, self._vcol(bus, axis), 1.0)
            col = self._new_noise(("vref", bus, axis), weight)
            self._add_b(row, col, -1.0)
            self._add_rhs(row, meas)
        self._has_pmu_v = True

    # -- finalize ---------------------------------------------------------
    def check_observability(self):
        for node in self.nodes:
            if node.id in self.pseudo:
                continue
            if node.has_injection and node.id not in self._metered_nodes:
                raise UnobservableInputError(node.id)

    def build(self) -> LinearCircuit:
        m = len(self._rows)
        rows_y = [t[0] for t in self._tri_y]
        cols_y = [t[1] for t in self._tri_y]
        vals_y = [t[2] for t in self._tri_y]
        y = sp.coo_matrix(
            (vals_y, (rows_y, cols_y)), shape=(m, self.n_state)
        ).tocsr()
        y.sum_duplicates()
        y.eliminate_zeros()
        nb_cols = len(self._noise)
        if self._tri_b:
            rows_b = [t[0] for t in self._tri_b]
            cols_b = [t[1] for t in self._tri_b]
            vals_b = [t[2] for t in self._tri_b]
            b = sp.coo_matrix(
                (vals_b, (rows_b, cols_b)), shape=(m, nb_cols)
            ).tocsr()
        else:
            b = sp.csr_matrix((m, nb_cols))
        j = np.zeros(m)
        for row, val in self._rhs.items():
            j[row] = val
        from dataclasses import replace as _replace

        switches = tuple(
            _replace(
                sw,
                measured_status=self._stamped_status.get(
                    sw.id, sw.measured_status
                ),
            )
            for sw in self.switch_defs
        )
        return LinearCircuit(
            y=y,
            b=b,
            j=j,
            row_labels=tuple(self._rows),
            x_labels=tuple(
                [("v", n, ax) for n in self.node_ids for ax in ("R", "I")]
                + [("isw", s.id, ax) for s in self.switch_defs for ax in ("R", "I")]
            ),
            noise_labels=tuple(self._noise),
            weights=np.asarray(self._weights, dtype=float),
            node_ids=self.node_ids,
            switches=switches,
        )


def assemble(case_or_nb, measurements, weights=None) -> LinearCircuit:
    """Build the full estimation circuit from a case and a measurement set.

    ``weights`` maps meter channels to positive weights; when omitted the
    standard weight policy is applied.
    """
    builder = CircuitBuilder(case_or_nb)
    if weights is None:
        from .estimators import default_weights

        weights = default_weights(measurements, n_nodes=len(builder.nodes))

    measurements.validate_against(builder)

    for reading in measurements.rtu_bus:
        builder.stamp_rtu(reading, weights[("rtu", reading.bus, "R")])
    for reading in measurements.pmu_bus:
        builder.stamp_pmu(reading, weights[("pmu_i", reading.bus, "R")])
    for reading in measurements.rtu_line:
        builder.stamp_line_meter(reading, weights[("rtu_line", reading.branch, "R")])
    for reading in measurements.pmu_line:
        builder.stamp_pmu_line(reading, weights[("pmu_line", reading.branch, "R")])

    status_by_id = {s.switch: s.status for s in measurements.switch_status}
    for sw in builder.switch_defs:
        status = status_by_id.get(sw.id, sw.measured_status)
        builder.stamp_switch(sw, status, weights[("sw", sw.id, "R")])

    if not builder._has_pmu_v:
        slack = builder.case.slack_bus
        builder.stamp_voltage_reference(slack.id, slack.v_setpoint, 0.0)

    builder.check_observability()
    return builder.build()
