"""Steady-state simulation: Newton power flow, infeasibility-quantified
simulation, and sparse localization of blackout sources.

All solvers share one rectangular current-balance engine.  The slack bus is
held at its setpoint; PV buses are parametrized by angle (magnitude enforced
by construction) with reactive injection as a free auxiliary variable, so the
residual vector consists purely of complex KCL mismatches at non-slack buses.
Compensation currents n live on exactly those rows: given a state x, the
balance constraint F(x) + n = 0 determines n = -F(x), which turns the
quantified-infeasibility problem into a damped least-squares solve and the
sparse variants into L1-regularized sequels of the same linearization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import IslandedCaseError, PowerFlowDivergence
from .network import PQ, PV, SLACK, GridCase, admittance_matrix
from .errors import SingularSystemError
from .optim import MAX_ITER, PdipProblem, _factor_solve, pdip_solve, sparse_solve

SUPPORT_THRESHOLD = 1e-3  # p.u. compensation magnitude that counts as "on"


@dataclass(frozen=True)
class EnforcerConfig:
    """Knobs of the bus-wise sparsity enforcer loop."""

    c_h: float = 10.0
    c_l: float = 0.1
    k: int | None = None  # sparsity goal; default round(n_buses * r)
    r: float = 0.75

    def __post_init__(self):
        if not (self.c_h > self.c_l > 0):
            raise ValueError("need c_h > c_l > 0")
        if not (0 < self.r < 1):
            raise ValueError("shrinkage rate must be in (0, 1)")
        if self.k is not None and self.k < 0:
            raise ValueError("sparsity goal must be >= 0")


@dataclass(frozen=True)
class PfResult:
    v: dict                       # node id -> complex voltage
    q_gen: dict                   # pv bus id -> solved reactive injection
    n_infeas: dict                # bus id -> complex compensation current
    lam: dict                     # bus id -> complex KCL multiplier
    objective: float
    iterations: int
    status: str                   # "converged" | "max_iter" | "diverged"
    support: tuple = ()
    residual: float = 0.0
    trace: tuple = ()             # localization rounds: (k, |support|)

    def n_magnitudes(self) -> dict:
        return {b: abs(n) for b, n in self.n_infeas.items()}

    def v_array(self, bus_ids) -> np.ndarray:
        return np.array([self.v[b] for b in bus_ids])


class _Engine:
    """Index maps, residuals and sparse Jacobians for one case."""

    def __init__(self, case: GridCase):
        if case.islanded_buses:
            raise IslandedCaseError(case.islanded_buses)
        self.case = case
        self.buses = case.buses
        self.idx = case.bus_index()
        self.ybus = admittance_matrix(case).tocsr()
        self.kind = np.array([b.kind for b in self.buses])
        self.vset = np.array([b.v_setpoint for b in self.buses])
        self.pg = np.array([b.p_gen for b in self.buses])
        self.qg0 = np.array([b.q_gen for b in self.buses])
        self.pl = np.array([b.p_load for b in self.buses])
        self.ql = np.array([b.q_load for b in self.buses])
        self.slack = int(np.where(self.kind == SLACK)[0][0])
        self.pq = np.where(self.kind == PQ)[0]
        self.pv = np.where(self.kind == PV)[0]
        self.nons = np.array(sorted(list(self.pq) + list(self.pv)))
        self.row_of = {int(b): r for r, b in enumerate(self.nons)}
        # unknown layout: (vr, vi) per pq bus, then theta per pv, then q per pv
        self.col_v = {int(b): 2 * k for k, b in enumerate(self.pq)}
        off = 2 * len(self.pq)
        self.col_th = {int(b): off + k for k, b in enumerate(self.pv)}
        off += len(self.pv)
        self.col_q = {int(b): off + k for k, b in enumerate(self.pv)}
        self.n_x = off + len(self.pv)
        self.n_rows = 2 * len(self.nons)

    def dc_angles(self) -> np.ndarray:
        """Linearized (DC) angle profile: one sparse solve of the
        susceptance Laplacian against net active injections.  Seeds Newton
        with the right large-scale angle drift at negligible cost."""
        n = len(self.buses)
        idx = self.idx
        rows, cols, vals = [], [], []
        for br in self.case.active_branches():
            b = 1.0 / abs(br.x)
            i, j = idx[br.from_bus], idx[br.to_bus]
            rows += [i, j, i, j]
            cols += [i, j, j, i]
            vals += [b, b, -b, -b]
        lap = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsc()
        keep = np.array([k for k in range(n) if k != self.slack])
        p_net = (self.pg - self.pl)[keep]
        theta = np.zeros(n)
        try:
            theta[keep] = sp.linalg.spsolve(lap[keep][:, keep], p_net)
        except RuntimeError:
            return np.zeros(n)
        if not np.isfinite(theta).all():
            return np.zeros(n)
        return theta

    def x0(self) -> np.ndarray:
        x = np.zeros(self.n_x)
        theta = self.dc_angles()
        for b, c in self.col_v.items():
            x[c] = np.cos(theta[b])
            x[c + 1] = np.sin(theta[b])
        for b, c in self.col_th.items():
            x[c] = theta[b]
        for b, c in self.col_q.items():
            x[c] = self.qg0[b]
        return x

    def x_from_state(self, v: dict, q_gen: dict) -> np.ndarray:
        x = np.zeros(self.n_x)
        ids = [b.id for b in self.buses]
        for b, c in self.col_v.items():
            vb = v[ids[b]]
            x[c], x[c + 1] = vb.real, vb.imag
        for b, c in self.col_th.items():
            x[c] = np.angle(v[ids[b]])
        for b, c in self.col_q.items():
            x[c] = q_gen.get(ids[b], self.qg0[b])

        return x

    def voltages(self, x: np.ndarray) -> np.ndarray:
        v = self.vset.astype(complex).copy()
        for b, c in self.col_v.items():
            v[b] = x[c] + 1j * x[c + 1]
        for b, c in self.col_th.items():
            v[b] = self.vset[b] * np.exp(1j * x[c])
        return v

    def injections(self, x: np.ndarray) -> np.ndarray:
        s = (self.pg - self.pl) + 1j * (self.qg0 - self.ql)
        s = s.astype(complex)
        for b, c in self.col_q.items():
            s[b] = (self.pg[b] - self.pl[b]) + 1j * (x[c] - self.ql[b])
        return s

    def residual(self, x: np.ndarray) -> np.ndarray:
        v = self.voltages(x)
        s = self.injections(x)
        mism = self.ybus @ v - np.conj(s) * v / (np.abs(v) ** 2)
        out = np.empty(self.n_rows)
        out[0::2] = mism[self.nons].real
        out[1::2] = mism[self.nons].imag
        return out

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        v = self.voltages(x)
        s = self.injections(x)
        rows, cols, vals = [], [], []
        coo = self.ybus.tocoo()
        slack = self.slack
        for b, j, y in zip(coo.row, coo.col, coo.data):
            if b == slack or b not in self.row_of:
                continue
            r = 2 * self.row_of[b]
            if j in self.col_v:
                c = self.col_v[j]
                g, bb = y.real, y.imag
                rows += [r, r, r + 1, r + 1]
                cols += [c, c + 1, c, c + 1]
                vals += [g, -bb, bb, g]
            elif j in self.col_th:
                dv = y * (1j * v[j])  # dV_j / dtheta_j = j V_j
                c = self.col_th[j]
                rows += [r, r + 1]
                cols += [c, c]
                vals += [dv.real, dv.imag]
        for b in self.nons:
            b = int(b)
            r = 2 * self.row_of[b]
            u, w = v[b].real, v[b].imag
            m2 = u * u + w * w
            p, q = s[b].real, s[b].imag
            # derivative of the injected current conj(S) V / |V|^2
            tr = (p * u + q * w) / m2
            ti = (p * w - q * u) / m2
            d = np.array(
                [
                    [p / m2 - 2 * u * tr / m2, q / m2 - 2 * w * tr / m2],
                    [-q / m2 - 2 * u * ti / m2, p / m2 - 2 * w * ti / m2],
                ]
            )
            if b in self.col_v:
                c = self.col_v[b]
                rows += [r, r, r + 1, r + 1]
                cols += [c, c + 1, c, c + 1]
                vals += [-d[0, 0], -d[0, 1], -d[1, 0], -d[1, 1]]
            elif b in self.col_th:
                c = self.col_th[b]
                du, dw = -w, u  # dV/dtheta in rectangular parts
                rows += [r, r + 1]
                cols += [c, c]
                vals += [
                    -(d[0, 0] * du + d[0, 1] * dw),
                    -(d[1, 0] * du + d[1, 1] * dw),
                ]
            if b in self.col_q:
                c = self.col_q[b]
                rows += [r, r + 1]
                cols += [c, c]
                vals += [-w / m2, u / m2]
        return sp.coo_matrix(
            (vals, (rows, cols)), shape=(self.n_rows, self.n_x)
        ).tocsr()

    def result(self, x, n_axis, lam_axis, objective, iterations, status,
               trace=()) -> PfResult:
        v = self.voltages(x)
        ids = [b.id for b in self.buses]
        vd = {ids[k]: complex(v[k]) for k in range(len(ids))}
        qd = {ids[b]: float(x[c]) for b, c in self.col_q.items()}
        nd, ld = {}, {}
        for r, b in enumerate(self.nons):
            nd[ids[int(b)]] = complex(n_axis[2 * r], n_axis[2 * r + 1])
            ld[ids[int(b)]] = complex(lam_axis[2 * r], lam_axis[2 * r + 1])
        nd[ids[self.slack]] = 0j
        ld[ids[self.slack]] = 0j
        support = tuple(
            sorted(b for b, nv in nd.items() if abs(nv) > SUPPORT_THRESHOLD)
        )
        resid = float(np.abs(self.residual(x) + n_axis).max(initial=0.0))
        return PfResult(
            v=vd, q_gen=qd, n_infeas=nd, lam=ld, objective=objective,
            iterations=iterations, status=status, support=support,
            residual=resid, trace=tuple(trace),
        )


def apply_load_factor(case: GridCase, load_factor: float) -> GridCase:
    """Stress a case: scale every load and every generator active setpoint.

    Scaling generation along with demand reproduces the standard blackout
    stress convention; the slack still picks up losses and imbalance.
    """
    from dataclasses import replace

    buses = tuple(
        replace(
            b,
            p_load=b.p_load * load_factor,
            q_load=b.q_load * load_factor,
            p_gen=b.p_gen * load_factor if b.kind != SLACK else b.p_gen,
        )
        for b in case.buses
    )
    return GridCase(case.base_mva, buses, case.branches, case.extras)


def solve_powerflow(case: GridCase, init="flat", tol=1e-8, max_iter=40) -> PfResult:
    """Newton-Raphson on rectangular current balance.

    ``init`` is "flat" or a prior PfResult/voltage mapping for warm starts.
    Divergence raises PowerFlowDivergence: for a collapsed system this is the
    expected outcome, not a bug, and callers are expected to fall back to the
    infeasibility-quantified solvers.
    """
    eng = _Engine(case)
    if init == "flat":
        x = eng.x0()
    elif isinstance(init, PfResult):
        x = eng.x_from_state(init.v, init.q_gen)
    elif isinstance(init, dict):
        x = eng.x_from_state(init, {})
    else:
        raise ValueError("init must be 'flat', a PfResult, or a voltage map")

    f = eng.residual(x)
    total_it = 0

    def newton_rounds(x, f):
        nonlocal total_it
        for _ in range(max_iter):
            total_it += 1
            norm = np.abs(f).max(initial=0.0)
            if norm < tol:
                return x, f, True
            jac = eng.jacobian(x)
            try:
                dx = _factor_solve(jac.tocsc(), -f)
            except (SingularSystemError, RuntimeError) as exc:
                raise PowerFlowDivergence(
                    total_it, norm, f"Jacobian singular: {exc}"
                )
            if not np.isfinite(dx).all():
                raise PowerFlowDivergence(total_it, norm)
            sumsq = float(f @ f)
            alpha = 1.0
            for _ in range(10):
                x_new = x + alpha * dx
                f_new = eng.residual(x_new)
                if np.isfinite(f_new).all() and float(f_new @ f_new) < sumsq:
                    break
                alpha *= 0.5
            else:
                return x, f, False  # line search stalled
            x, f = x_new, f_new
        return x, f, np.abs(f).max(initial=0.0) < tol

    # plain Newton with a damped-engine rescue between rounds: the rescue
    # pulls stalled iterates (long feeder chains, large angle drift) back
    # into Newton's quadratic basin
    for _round in range(3):
        x, f, done = newton_rounds(x, f)
        if done:
            zeros = np.zeros(eng.n_rows)
            return eng.result(x, zeros, zeros, 0.0, total_it, "converged")
        x, f, extra, _grad = _lm_quadratic(eng, x)
        total_it += extra
        if np.abs(f).max(initial=0.0) < tol:
            zeros = np.zeros(eng.n_rows)
            return eng.result(x, zeros, zeros, 0.0, total_it, "converged")
    raise PowerFlowDivergence(total_it, float(np.abs(f).max(initial=0.0)))


def _lm_quadratic(eng: _Engine, x0: np.ndarray, max_iter=400):
    """Levenberg-damped Newton on the stationarity of min 0.5 ||F(x)||^2.

    Each trial step solves the sparse saddle system
        [lm*I  J'] [dx]     [ 0]
        [J    -I ] [lam] = [-f]
    exactly; rejected steps raise the damping.  Returns (x, f, iters, grad).
    """
    x = x0.copy()
    f = eng.residual(x)
    lm = 1e-3
    eye = sp.identity(eng.n_rows, format="csr")
    ident = sp.identity(eng.n_x, format="csr")
    stall = 0
    grad = np.inf
    for it in range(1, max_iter + 1):
        jac = eng.jacobian(x)
        grad = float(np.abs(jac.T @ f).max(initial=0.0))
        cost = 0.5 * float(f @ f)
        if grad < 1e-9:
            return x, f, it, grad
        accepted = False
        while lm <= 1e12:
            kkt = sp.bmat([[ident * lm, jac.T], [jac, -eye]], format="csc")
            try:
                sol = sparse_solve(kkt, np.concatenate([np.zeros(eng.n_x), -f]))
            except Exception:
                lm *= 10
                continue
            dx = sol[: eng.n_x]
            f_new = eng.residual(x + dx)
            if np.isfinite(f_new).all() and 0.5 * float(f_new @ f_new) < cost:
                drop = cost - 0.5 * float(f_new @ f_new)
                x, f = x + dx, f_new
                lm = max(lm * 0.3, 1e-10)
                stall = stall + 1 if drop < 1e-15 * (1 + cost) else 0
                accepted = True
                break
            lm *= 10
        if not accepted or stall >= 3:
            return x, f, it, grad
    return x, f, max_iter, grad


def solve_infeasibility_quantified(case: GridCase, warm=None) -> PfResult:
    """Minimum-energy compensation: min 0.5||n||^2 s.t. balance + n = 0.

    Eliminating n = -F(x) via the balance constraint reduces the KKT
    stationarity system to damped Newton in the state alone; the multipliers
    follow algebraically (lambda = -n at the optimum).
    """
    eng = _Engine(case)
    x0 = eng.x_from_state(warm.v, warm.q_gen) if isinstance(warm, PfResult) else eng.x0()
    x, f, iters, grad = _lm_quadratic(eng, x0)
    n_axis = -f
    lam_axis = -n_axis
    status = "converged" if grad < 1e-6 * (1 + np.abs(f).max(initial=0.0)) else MAX_ITER
    return eng.result(
        x, n_axis, lam_axis, 0.5 * float(f @ f), iters, status
    )


def _solve_sparse(case, c_axis, warm, max_outer=200, lm0=1e-4,
                  inner_tol=1e-8) -> PfResult:
    """Sequential linearization for min 0.5||n||^2 + c'|n| s.t. balance+n=0.

    Outer: linearize the balance at x; inner: convex L1+L2 program via the
    interior-point engine.  A Levenberg damping term on dx globalizes the
    loop against the merit function, which is exactly evaluable because the
    balance constraint pins n = -F(x).  Convergence is declared on the
    predicted-decrease of the subproblem plus first-order checks on the
    returned multipliers (shrinkage identity and dual stationarity).
    """
    eng = _Engine(case)
    if warm is None:
        warm = solve_infeasibility_quantified(case)
    x = eng.x_from_state(warm.v, warm.q_gen)
    c_axis = np.asarray(c_axis, dtype=float)
    if len(c_axis) != eng.n_rows:
        raise ValueError("one enforcer weight per KCL axis row is required")

    def merit(fv):
        return 0.5 * float(fv @ fv) + float(c_axis @ np.abs(fv))

    f = eng.residual(x)
    lm = lm0
    lam_axis = np.zeros(eng.n_rows)
    eye = sp.identity(eng.n_rows, format="csr")
    n_cols = np.arange(eng.n_x, eng.n_x + eng.n_rows)
    it = 0
    converged = False
    for it in range(1, max_outer + 1):
        jac = eng.jacobian(x)
        a = sp.hstack([jac, eye], format="csr")
        h = np.concatenate([np.full(eng.n_x, lm), np.ones(eng.n_rows)])
        sol = pdip_solve(
            PdipProblem(a, -f, n_cols, c_axis, h_diag=h,
                        tol_primal=1e-9, tol_comp=inner_tol)
        )
        lam_axis = sol.lam
        m0 = merit(f)
        pred = m0 - (0.5 * float(sol.n @ sol.n) + float(c_axis @ np.abs(sol.n)))
        dx = sol.z[: eng.n_x]
        f_new = eng.residual(x + dx)
        m1 = merit(f_new) if np.isfinite(f_new).all() else np.inf
        if m1 >= m0 - 1e-15 and np.isfinite(f_new).all():
            # second-order correction: retry against the curvature-corrected
            # constraint offset; cures rejection cycles near voltage collapse
            sol2 = pdip_solve(
                PdipProblem(a, -(f_new - jac @ dx), n_cols, c_axis,
                            h_diag=h, tol_primal=1e-9, tol_comp=inner_tol)
            )
            dx2 = sol2.z[: eng.n_x]
            f2 = eng.residual(x + dx2)
            if np.isfinite(f2).all() and merit(f2) < m1:
                dx, f_new, m1 = dx2, f2, merit(f2)
                lam_axis = sol2.lam
        ratio = (m0 - m1) / max(pred, 1e-300)
        if m1 < m0 - 1e-15:
            x, f = x + dx, f_new
            if ratio > 0.5:
                lm = max(lm / 3.0, 1e-10)
            elif ratio < 0.05:
                lm = min(lm * 5.0, 1e9)
        else:
            lm = min(lm * 5.0, 1e9)
            if lm >= 1e9:
                break
        # fixpoint of the linearization: the subproblem reproduces n = -F(x)
        # (then its multipliers are consistent with the final state)
        if (
            pred <= 1e-9 * (1.0 + m0)
            and np.abs(sol.n + f).max(initial=0.0) < 1e-6
        ):
            converged = True
            break

    # refine the multipliers at the final state: one tightly-converged
    # subproblem with negligible damping, so lambda matches n = -F(x)
    jac = eng.jacobian(x)
    a = sp.hstack([jac, eye], format="csr")
    h = np.concatenate([np.full(eng.n_x, 1e-8), np.ones(eng.n_rows)])
    fin = pdip_solve(
        PdipProblem(a, -f, n_cols, c_axis, h_diag=h,
                    tol_primal=1e-11, tol_comp=1e-11, max_iter=300)
    )
    if np.abs(fin.n + f).max(initial=0.0) < 1e-5:
        lam_axis = fin.lam

    n_axis = -f
    # first-order quality of the final multipliers: dual stationarity plus
    # the shrinkage identity |n| = max(|lambda| - c, 0) per axis
    dual_res = float(np.abs(jac.T @ lam_axis).max(initial=0.0))
    ident = float(
        np.abs(
            np.abs(n_axis) - np.maximum(np.abs(lam_axis) - c_axis, 0.0)
        ).max(initial=0.0)
    )
    scale = 1.0 + float(c_axis.max(initial=0.0))
    if converged or (dual_res < 1e-5 * scale and ident < 1e-5 * scale):
        status = "converged"
    else:
        status = MAX_ITER
    obj = 0.5 * float(n_axis @ n_axis) + float(c_axis @ np.abs(n_axis))
    return eng.result(x, n_axis, lam_axis, obj, it, status)


def _axis_weights(eng: _Engine, c_by_bus: dict) -> np.ndarray:
    c_axis = np.zeros(eng.n_rows)
    ids = [b.id for b in eng.buses]
    for r, b in enumerate(eng.nons):
        c = float(c_by_bus[ids[int(b)]])
        c_axis[2 * r] = c
        c_axis[2 * r + 1] = c
    return c_axis


def solve_sparse_l1(case: GridCase, c: float, warm=None) -> PfResult:
    """Scalar L1-regularized variant; c = 0 reduces to the quadratic solver.

    At convergence the shrinkage identity |n_i| = max(|lambda_i| - c, 0)
    holds per axis: the regularization threshold blocks sub-c multipliers
    from surfacing as compensation.
    """
    if c < 0:
        raise ValueError("regularization weight must be nonnegative")
    if c == 0.0:
        return solve_infeasibility_quantified(case, warm=warm)
    eng = _Engine(case)
    c_axis = np.full(eng.n_rows, float(c))
    return _solve_sparse(case, c_axis, warm)


def assign_buswise_enforcers(n_mag_by_bus: dict, k: int, c_h: float,
                             c_l: float) -> dict:
    """Top-k magnitude buses get the easy threshold c_l, the rest get c_h.

    Ties break toward the lower bus id.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    order = sorted(n_mag_by_bus.items(), key=lambda kv: (-kv[1], kv[0]))
    major = {b for b, _ in order[:k]}
    return {b: (c_l if b in major else c_h) for b in n_mag_by_bus}


def solve_sparse_buswise(case: GridCase, config: EnforcerConfig,
                         warm: PfResult) -> PfResult:
    """One bus-wise enforcer round: weights from the warm solution's
    magnitudes, then the L1+L2 solve."""
    eng = _Engine(case)
    ids = [b.id for b in eng.buses]
    mags = {ids[int(b)]: abs(warm.n_infeas[ids[int(b)]]) for b in eng.nons}
    k = config.k if config.k is not None else int(round(len(mags) * config.r))
    c_by_bus = assign_buswise_enforcers(mags, k, config.c_h, config.c_l)
    return _solve_sparse(case, _axis_weights(eng, c_by_bus), warm)


def localize_infeasibility(case: GridCase, config=EnforcerConfig(),
                           max_rounds=40) -> PfResult:
    """Shrinking-k enforcer loop for dominant-source localization.

    Starts dense (quadratic solve), then repeatedly reassigns enforcers to
    the current top-k magnitudes while shrinking k, until the support is
    stable across rounds or the goal collapses below one bus.
    """
    from dataclasses import replace as _replace

    dense = solve_infeasibility_quantified(case)
    trace = [(None, len(dense.support))]
    current = dense
    k = config.k if config.k is not None else int(round(len(dense.n_infeas) * config.r))
    prev_support = None
    rounds = 0
    while k >= 1 and rounds < max_rounds:
        rounds += 1
        step_cfg = _replace(config, k=k)
        current = solve_sparse_buswise(case, step_cfg, warm=current)
        trace.append((k, len(current.support)))
        if prev_support is not None and current.support == prev_support:
            break
        prev_support = current.support
        k = int(k * config.r)
    return PfResult(
        v=current.v, q_gen=current.q_gen, n_infeas=current.n_infeas,
        lam=current.lam, objective=current.objective,
        iterations=current.iterations, status=current.status,
        support=current.support, residual=current.residual,
        trace=tuple(trace),
    )
