"""Shared numerical kernels: sparse linear solve, equality-constrained QP,
and a primal-dual interior-point engine for L1-regularized problems.

The PDIP engine solves

    min  0.5 z' H z + g' z + c' t
    s.t. A z = b,   |z_k| <= t_j  for bound-coupled columns k,

with H diagonal PSD.  Newton steps on the perturbed KKT conditions are taken
with full primal steps; the inequality multipliers and the bound variables t
are step-limited (the circuit-style heuristic), which keeps every iterate
dual-feasible with mu_up + mu_lo == c holding exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import SingularSystemError, SolverFailure

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
NUMERICAL_FAILURE = "numerical_failure"


def sparse_solve(a, b: np.ndarray) -> np.ndarray:
    """Solve a sparse square system with LU; verifies the residual contract."""
    a = sp.csc_matrix(a)
    b = np.asarray(b, dtype=float)
    if a.shape[0] != a.shape[1]:
        raise SingularSystemError(
            f"matrix is not square: {a.shape}", {"shape": a.shape}
        )
    try:
        lu = splu(a)
        x = lu.solve(b)
    except RuntimeError as exc:  # SuperLU signals singularity this way
        raise SingularSystemError(
            f"singular factorization: {exc}", {"shape": a.shape, "nnz": a.nnz}
        ) from exc
    resid = np.abs(a @ x - b).max(initial=0.0)
    if not np.isfinite(x).all() or resid > 1e-9 * (1.0 + np.abs(b).max(initial=0.0)):
        # one round of iterative refinement before giving up
        x = x + lu.solve(b - a @ x)
        resid = np.abs(a @ x - b).max(initial=0.0)
        if not np.isfinite(x).all() or resid > 1e-9 * (1.0 + np.abs(b).max(initial=0.0)):
            raise SingularSystemError(
                f"solve residual {resid:.3e} exceeds tolerance",
                {"residual": resid},
            )
    return x


def solve_eq_qp(h_diag, a, b, j):
    """Closed-form equality-constrained QP via one sparse KKT factorization.

    Minimizes 0.5 n' W n subject to Y x + B n = J, where ``a`` is Y, ``b`` is
    B and ``h_diag`` the diagonal of W.  Returns (x, n, lambda).  No
    iterations are involved; the whole problem is one block solve of

        [Y  B  0 ] [x]   [J]
        [0  0  Y'] [n] = [0]
        [0  W  B'] [l]   [0]
    """
    y = sp.csr_matrix(a)
    bn = sp.csr_matrix(b)
    j = np.asarray(j, dtype=float)
    m, nx = y.shape
    nn = bn.shape[1]
    if bn.shape[0] != m:
        raise ValueError("Y and B row counts differ")
    w = sp.diags(np.asarray(h_diag, dtype=float), shape=(nn, nn))
    if nn == 0:
        x = sparse_solve(y, j)
        return x, np.zeros(0), np.zeros(m)
    zxx = sp.csr_matrix((nx, nx))
    znx = sp.csr_matrix((nn, nx))
    kkt = sp.bmat(
        [
            [y, bn, None],
            [zxx, None, y.T],
            [znx, w, bn.T],
        ],
        format="csc",
    )
    rhs = np.concatenate([j, np.zeros(nx + nn)])
    try:
        sol = sparse_solve(kkt, rhs)
    except SingularSystemError as exc:
        raise SingularSystemError(
            "KKT system singular: circuit may be unobservable or lack a "
            "voltage reference",
            exc.diagnostics,
        ) from exc
    return sol[:nx], sol[nx:nx + nn], sol[nx + nn:]


def _factor_solve(a, rhs: np.ndarray) -> np.ndarray:
    """Internal LU solve with one refinement pass; tolerates the
    ill-conditioning of late interior-point iterations."""
    lu = splu(sp.csc_matrix(a))
    x = lu.solve(rhs)
    x = x + lu.solve(rhs - a @ x)
    if not np.isfinite(x).all():
        raise SingularSystemError("non-finite KKT solution", {"nnz": a.nnz})
    return x


@dataclass
class PdipProblem:
    """L1/LP problem description for :func:`pdip_solve`.

    ``n_cols`` lists the columns of z that are bound-coupled (|z_k| <= t);
    ``c`` carries one positive weight per such column.  Columns whose weight
    is zero are silently dropped from the bound set (their t would be free).
    """

    a: sp.spmatrix
    b: np.ndarray
    n_cols: np.ndarray
    c: np.ndarray
    h_diag: np.ndarray | None = None
    g: np.ndarray | None = None
    z0: np.ndarray | None = None
    tol_primal: float = 1e-6
    tol_comp: float = 1e-6
    max_iter: int = 200
    step_limit: float | None = None  # default 0.1 * max(c)

    def __post_init__(self):
        self.a = sp.csr_matrix(self.a)
        self.b = np.asarray(self.b, dtype=float)
        self.n_cols = np.asarray(self.n_cols, dtype=int)
        self.c = np.asarray(self.c, dtype=float)
        if (self.c < 0).any():
            raise ValueError("bound weights must be nonnegative")
        keep = self.c > 0
        self.n_cols = self.n_cols[keep]
        self.c = self.c[keep]
        counts = np.bincount(self.n_cols, minlength=self.a.shape[1])
        if (counts > 1).any():
            raise ValueError("each column may couple to at most one bound")


@dataclass
class PdipSolution:
    z: np.ndarray
    n: np.ndarray
    t: np.ndarray
    lam: np.ndarray
    mu_upper: np.ndarray
    mu_lower: np.ndarray
    objective: float
    iterations: int
    duality_gap: float
    status: str
    trace: list = field(default_factory=list)

    def trace_csv(self) -> str:
        rows = ["iter,gap,primal_res,dual_res"]
        rows += [f"{it},{g:.9e},{p_:.9e},{d:.9e}" for it, g, p_, d in self.trace]
        return "\n".join(rows) + "\n"


def pdip_solve(p: PdipProblem, trace: bool = False) -> PdipSolution:
    """Primal-dual interior-point solve with variable-limiting heuristics."""
    a = p.a
    m, nz = a.shape
    k = len(p.n_cols)
    h = np.zeros(nz) if p.h_diag is None else np.asarray(p.h_diag, dtype=float)
    g = np.zeros(nz) if p.g is None else np.asarray(p.g, dtype=float)
    H = sp.diags(h)
    sel = sp.csr_matrix(
        (np.ones(k), (np.arange(k), p.n_cols)), shape=(k, nz)
    )
    c = p.c
    d_lim = p.step_limit if p.step_limit is not None else 0.1 * (c.max() if k else 1.0)

    def objective(z, t):
        return float(0.5 * z @ (h * z) + g @ z + (c @ t if k else 0.0))

    # ---- interior start: ridge-regularized WLS, t strictly above |n| ----
    if p.z0 is not None:
        z = np.asarray(p.z0, dtype=float).copy()
    else:
        reg = sp.diags(np.maximum(h, 1.0))
        kkt0 = sp.bmat([[reg, a.T], [a, None]], format="csc")
        try:
            sol0 = _factor_solve(kkt0, np.concatenate([-g, p.b]))
        except (SingularSystemError, RuntimeError) as exc:
            raise SolverFailure(
                "could not construct a feasible interior start: " + str(exc),
                status=NUMERICAL_FAILURE,
                diagnostics=exc.diagnostics,
            ) from exc
        z = sol0[:nz]
    lam = np.zeros(m)
    n = sel @ z
    t = 2.0 * np.abs(n) + 1e-3
    mu_up = c / 2.0
    mu_lo = c / 2.0

    if k == 0:
        # no bound-coupled channels: the problem is an equality QP
        kkt = sp.bmat([[H, a.T], [a, None]], format="csc")
        sol = _factor_solve(kkt, np.concatenate([-g, p.b]))
        z = sol[:nz]
        lam = sol[nz:]
        return PdipSolution(
            z=z, n=n, t=t, lam=lam, mu_upper=mu_up, mu_lower=mu_lo,
            objective=objective(z, t), iterations=1, duality_gap=0.0,
            status=OPTIMAL,
        )

    eps_min = min(1e-10, 0.01 * p.tol_comp)
    gap = float(mu_up @ (t - n) + mu_lo @ (t + n))
    eps = max(0.1 * gap / (2 * k), eps_min)
    history = []
    b_scale = 1.0 + np.abs(p.b).max(initial=0.0)
    c_scale = 1.0 + c.max()

    # Newton-system structure, fixed across iterations.  When every bound
    # column owns exactly one constraint row (circuits always do), the row
    # block eliminates onto an SPD normal matrix - much cheaper to factor at
    # scale than the saddle form, which is kept for small/general problems.
    free = np.setdiff1d(np.arange(nz), p.n_cols)
    spd = None
    vals_sq = None
    h_free = None
    if m + nz > 3000:
        a_b0 = a[:, p.n_cols].tocsc()
        col_nnz = np.diff(a_b0.indptr)
        if (col_nnz == 1).all():
            rows_of_col = a_b0.indices.copy()
            if len(np.unique(rows_of_col)) == len(rows_of_col):
                soft = rows_of_col
                hard = np.setdiff1d(np.arange(m), soft)
                a_free = a.tocsc()[:, free].tocsr()
                spd = (soft, hard, a_free[soft], a_free[hard])
                vals_sq = a_b0.data ** 2
                if h[free].any():
                    h_free = sp.diags(h[free])

    for it in range(1, p.max_iter + 1):
        n = sel @ z
        r1 = a @ z - p.b
        r2 = H @ z + g + a.T @ lam + sel.T @ (mu_up - mu_lo)
        r4 = mu_up * (n - t) + eps
        r5 = mu_lo * (-n - t) + eps
        gap = float(mu_up @ (t - n) + mu_lo @ (t + n))
        pri = float(np.abs(r1).max(initial=0.0))
        dua = float(np.abs(r2).max(initial=0.0))
        if trace:
            history.append((it, gap, pri, dua))
        if (
            pri <= p.tol_primal * b_scale
            and gap / (2 * k) <= p.tol_comp
            and dua <= 1e-2 * c_scale
        ):
            return PdipSolution(
                z=z, n=n, t=t, lam=lam, mu_upper=mu_up, mu_lower=mu_lo,
                objective=objective(z, t), iterations=it, duality_gap=gap,
                status=OPTIMAL, trace=history,
            )

        tn = t - n
        tp = t + n
        pq_p = mu_up / tn
        pq_q = mu_lo / tp
        dmat = 4.0 * pq_p * pq_q / (pq_p + pq_q)
        hd_b = h[p.n_cols] + dmat
        a_b = a[:, p.n_cols]

        # factor once per iteration; the predictor and corrector right-hand
        # sides reuse the same condensed system.  When every bound column
        # owns one constraint row the row block eliminates too, leaving an
        # SPD normal matrix over the free columns (plus a small border of
        # hard, channel-free constraint rows)
        try:
            if spd is not None:
                soft, hard, a_fs, a_fh = spd
                ds = vals_sq / hd_b
                m_mat = (a_fs.T @ sp.diags(1.0 / ds) @ a_fs).tocsr()
                if h_free is not None:
                    m_mat = m_mat + h_free
                if len(hard):
                    kkt = sp.bmat(
                        [[m_mat, a_fh.T], [a_fh, None]], format="csc"
                    )
                else:
                    kkt = m_mat.tocsc()
            else:
                a_f = a[:, free]
                h_f = sp.diags(h[free]) if len(free) else sp.csr_matrix((0, 0))
                schur = (a_b @ sp.diags(1.0 / hd_b) @ a_b.T).tocsr()
                kkt = sp.bmat([[h_f, a_f.T], [a_f, -schur]], format="csc")
            lu = splu(kkt)
        except (SingularSystemError, RuntimeError):
            return PdipSolution(
                z=z, n=n, t=t, lam=lam, mu_upper=mu_up, mu_lower=mu_lo,
                objective=objective(z, t), iterations=it, duality_gap=gap,
                status=NUMERICAL_FAILURE, trace=history,
            )

        def lin_solve(rhs):
            out = lu.solve(rhs)
            out = out + lu.solve(rhs - kkt @ out)
            return out

        def direction(r4v, r5v):
            rho = -r4v / tn - r5v / tp
            kvec = r4v / tn - r5v / tp + (pq_p - pq_q) * rho / (pq_p + pq_q)
            rhs_full = -(r2 + sel.T @ kvec)
            rb = rhs_full[p.n_cols]
            rhs_c = -r1 - a_b @ (rb / hd_b)
            dz = np.empty(nz)
            if spd is not None:
                rhs_x = rhs_full[free] + a_fs.T @ (rhs_c[soft] / ds)
                if len(hard):
                    sol = lin_solve(np.concatenate([rhs_x, rhs_c[hard]]))
                else:
                    sol = lin_solve(rhs_x)
                nf = len(free)
                dz[free] = sol[:nf]
                dlam = np.empty(m)
                dlam[hard] = sol[nf:]
                dlam[soft] = (a_fs @ sol[:nf] - rhs_c[soft]) / ds
            else:
                sol = lin_solve(np.concatenate([rhs_full[free], rhs_c]))
                nf = len(free)
                dz[free] = sol[:nf]
                dlam = sol[nf:]
            dz[p.n_cols] = (rb - a_b.T @ dlam) / hd_b
            dn = sel @ dz
            dt = ((pq_p - pq_q) * dn - rho) / (pq_p + pq_q)
            dmu_up = r4v / tn + pq_p * (dn - dt)
            return dz, dlam, dn, dt, dmu_up

        def boundary_alpha(dn, dt):
            alpha = 1.0
            for gval, gstep in ((tn, dt - dn), (tp, dt + dn)):
                shrink = gstep < 0
                if shrink.any():
                    alpha = min(
                        alpha,
                        float((0.9995 * gval[shrink] / -gstep[shrink]).min()),
                    )
            return max(min(alpha, 1.0), 1e-12)

        try:
            # predictor: pure Newton on the unperturbed complementarity
            r4a = mu_up * (n - t)
            r5a = mu_lo * (-n - t)
            dz_a, _, dn_a, dt_a, dmu_a = direction(r4a, r5a)
            alpha_a = boundary_alpha(dn_a, dt_a)
            mu_up_a = np.clip(mu_up + alpha_a * dmu_a, 0.0, c)
            mu_lo_a = c - mu_up_a
            gap_aff = float(
                mu_up_a @ (tn + alpha_a * (dt_a - dn_a))
                + mu_lo_a @ (tp + alpha_a * (dt_a + dn_a))
            )
            sigma = min(max((gap_aff / gap) ** 3, 1e-4), 0.9)
            eps = max(sigma * gap / (2 * k), eps_min)
            # corrector: centered target plus the affine product terms
            r4c = r4a + eps + dmu_a * (dn_a - dt_a)
            r5c = r5a + eps - dmu_a * (-dn_a - dt_a)
            dz, dlam, dn, dt, dmu_up = direction(r4c, r5c)
        except (SingularSystemError, RuntimeError):
            return PdipSolution(
                z=z, n=n, t=t, lam=lam, mu_upper=mu_up, mu_lower=mu_lo,
                objective=objective(z, t), iterations=it, duality_gap=gap,
                status=NUMERICAL_FAILURE, trace=history,
            )
        alpha = boundary_alpha(dn, dt)

        # variable limiting: headroom toward the [0, c] box, hard cap d_lim;
        # applied symmetrically so mu_up + mu_lo stays equal to c exactly.
        # A whisker of headroom is held back so the pair stays strictly
        # interior (a multiplier exactly on the box makes the KKT singular).
        dmu = alpha * dmu_up
        dirs = np.where(dmu >= 0, 1.0, -1.0)
        head = np.where(dirs > 0, c - mu_up, mu_up)
        step = dirs * np.minimum(np.abs(dmu), np.minimum(d_lim, 0.9995 * head))
        mu_up = mu_up + step
        mu_lo = mu_lo - step

        z = z + alpha * dz
        lam = lam + alpha * dlam
        t = t + alpha * dt
        n = sel @ z
        viol = np.abs(n) >= t
        t[viol] = 2.0 * np.abs(n[viol]) + 1e-12
        t = np.maximum(t, 1e-12)

        gap = float(mu_up @ (t - n) + mu_lo @ (t + n))
        eps = max(0.1 * gap / (2 * k), eps_min)
        if not np.isfinite(z).all() or not np.isfinite(gap):
            return PdipSolution(
                z=z, n=n, t=t, lam=lam, mu_upper=mu_up, mu_lower=mu_lo,
                objective=float("nan"), iterations=it, duality_gap=gap,
                status=NUMERICAL_FAILURE, trace=history,
            )

    return PdipSolution(
        z=z, n=sel @ z, t=t, lam=lam, mu_upper=mu_up, mu_lower=mu_lo,
        objective=objective(z, t), iterations=p.max_iter, duality_gap=gap,
        status=MAX_ITER, trace=history,
    )
