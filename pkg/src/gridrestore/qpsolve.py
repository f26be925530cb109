"""Convex QP solver used for every dispatch subproblem.

Problems have the form::

    minimize    0.5 x'Px + q'x + const
    subject to  A x  = b
                G x <= h
                lb <= x <= ub

and are solved by a primal-dual interior-point method with a Mehrotra
predictor-corrector step on the sparse augmented KKT system.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 200
DEFAULT_REG = 1e-8

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
ITERATION_LIMIT = "iteration-limit"

_KKT_DUAL_REG = 1e-11
_KKT_PRIMAL_REG = 1e-11
# KKT systems up to this size are factorized densely (sparse overhead dominates below it).
_DENSE_MAX = 900


@dataclass
class QPInstance:
    """Sparse convex QP with named variable blocks.

    ``index`` maps a block name to an integer array of variable positions;
    its shape mirrors the block layout (e.g. buses x steps).
    """

    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    const: float = 0.0
    index: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.q.shape[0]

    def check(self) -> None:
        n = self.n
        if self.P.shape != (n, n):
            raise ValueError(f"P has shape {self.P.shape}, expected {(n, n)}")
        if self.A.shape[1] != n or self.A.shape[0] != self.b.shape[0]:
            raise ValueError("equality block dimensions are inconsistent")
        if self.G.shape[1] != n or self.G.shape[0] != self.h.shape[0]:
            raise ValueError("inequality block dimensions are inconsistent")
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise ValueError("bound vectors must have one entry per variable")
        if np.any(self.lb > self.ub):
            raise ValueError("lower bound exceeds upper bound")
        asym = abs(self.P - self.P.T)
        if asym.nnz and asym.max() > 1e-12:
            raise ValueError("P is not symmetric")

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.const)

    def dump(self, path) -> None:
        """Write the instance as plain-text matrices (debugging aid)."""
        with open(path, "w") as fh:
            fh.write(f"# n={self.n} meq={self.A.shape[0]} mineq={self.G.shape[0]}\n")
            for name, mat in (("P", self.P), ("A", self.A), ("G", self.G)):
                coo = sp.coo_matrix(mat)
                fh.write(f"{name} {coo.nnz}\n")
                for i, j, v in zip(coo.row, coo.col, coo.data):
                    fh.write(f"{i} {j} {v!r}\n")
            for name, vec in (("q", self.q), ("b", self.b), ("h", self.h),
                              ("lb", self.lb), ("ub", self.ub)):
                fh.write(f"{name} " + " ".join(repr(float(v)) for v in vec) + "\n")
            fh.write(f"const {self.const!r}\n")


@dataclass
class QPSolution:
    x: np.ndarray
    y: np.ndarray          # equality duals
    z: np.ndarray          # inequality duals (>= 0)
    z_lb: np.ndarray       # lower-bound duals (>= 0)
    z_ub: np.ndarray       # upper-bound duals (>= 0)
    objective: float
    status: str
    iterations: int

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def kkt_residuals(instance: QPInstance, x, y=None, z=None, z_lb=None, z_ub=None):
    """Return the (stationarity, primal, complementarity) infinity norms at a point.

    Missing dual vectors are taken as zero, so with only ``x`` the
    stationarity residual is the norm of the objective gradient.
    """
    x = np.asarray(x, dtype=float)
    n = instance.n
    if x.shape != (n,):
        raise ValueError(f"point has shape {x.shape}, expected ({n},)")
    meq, mineq = instance.A.shape[0], instance.G.shape[0]
    y = np.zeros(meq) if y is None else np.asarray(y, dtype=float)
    z = np.zeros(mineq) if z is None else np.asarray(z, dtype=float)
    z_lb = np.zeros(n) if z_lb is None else np.asarray(z_lb, dtype=float)
    z_ub = np.zeros(n) if z_ub is None else np.asarray(z_ub, dtype=float)
    if y.shape != (meq,) or z.shape != (mineq,) or z_lb.shape != (n,) or z_ub.shape != (n,):
        raise ValueError("dual vector dimensions do not match the instance")

    grad = instance.P @ x + instance.q
    stat = grad + instance.A.T @ y + instance.G.T @ z - z_lb + z_ub
    stationarity = _inf_norm(stat)

    viol = [instance.A @ x - instance.b,
            np.maximum(instance.G @ x - instance.h, 0.0),
            np.maximum(instance.lb - x, 0.0),
            np.maximum(x - instance.ub, 0.0)]
    primal = max(_inf_norm(v) for v in viol)

    slack_g = instance.h - instance.G @ x
    slack_l = np.where(np.isfinite(instance.lb), x - instance.lb, 0.0)
    slack_u = np.where(np.isfinite(instance.ub), instance.ub - x, 0.0)
    comp = max(_inf_norm(z * slack_g), _inf_norm(z_lb * slack_l), _inf_norm(z_ub * slack_u))
    return stationarity, primal, comp


def _inf_norm(v) -> float:
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


def regularized(instance: QPInstance, reg: float = DEFAULT_REG) -> QPInstance:
    """Copy with ``reg`` added to the zero diagonal entries of P (makes the QP strictly convex)."""
    diag = instance.P.diagonal()
    add = np.where(diag == 0.0, reg, 0.0)
    return QPInstance(P=sp.csc_matrix(instance.P + sp.diags(add)), q=instance.q, A=instance.A,
                      b=instance.b, G=instance.G, h=instance.h, lb=instance.lb, ub=instance.ub,
                      const=instance.const, index=instance.index)


def solve_qp(instance: QPInstance, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER, reg: float = DEFAULT_REG) -> QPSolution:
    """Solve a convex QP; deterministic for a given instance.

    With ``reg > 0`` the regularized instance is solved and the KKT check is
    made against it; the reported objective is that of the original instance.
    """
    return PreparedQP(instance, reg).solve(tol=tol, max_iter=max_iter)


class PreparedQP:
    """A QP whose constraint data is preprocessed once.

    ``solve`` accepts a replacement objective (P, q, const) so that a
    sequence of problems sharing constraints, as in multiplier iterations,
    skips the substitution and row-filtering work.
    """

    def __init__(self, instance: QPInstance, reg: float = DEFAULT_REG):
        instance.check()
        self.instance = instance
        self.reg = reg
        n = instance.n
        lb, ub = instance.lb, instance.ub
        self.dense = n + instance.A.shape[0] <= _DENSE_MAX

        # Fixed variables are substituted out; the IPM needs a strict interior.
        fixed = np.isfinite(lb) & np.isfinite(ub) & (ub - lb <= 1e-12)
        self.fixed = fixed
        self.free = free = np.flatnonzero(~fixed)
        self.x_fixed = x_fixed = np.where(fixed, lb, 0.0)
        if self.dense:
            A, G = instance.A.toarray(), instance.G.toarray()
        else:
            A, G = sp.csr_matrix(instance.A), sp.csr_matrix(instance.G)
        Af, Gf = A[:, free], G[:, free]
        b_red = instance.b - A @ x_fixed
        h_red = instance.h - G @ x_fixed

        # Rows emptied by the substitution are either trivially met or infeasible.
        if self.dense:
            eq_rows = np.any(Af != 0, axis=1)
            in_rows = np.any(Gf != 0, axis=1)
        else:
            eq_rows = np.diff(Af.indptr) > 0
            in_rows = np.diff(Gf.indptr) > 0
        self.empty_eq = np.abs(b_red[~eq_rows])
        self.empty_in = h_red[~in_rows]
        self.eq_idx = eq_idx = np.flatnonzero(eq_rows)
        self.in_idx = in_idx = np.flatnonzero(in_rows)
        self.Af, self.b_red = Af[eq_idx], b_red[eq_idx]
        Gf, h_red = Gf[in_idx], h_red[in_idx]

        lbf, ubf = lb[free], ub[free]
        self.has_l = has_l = np.flatnonzero(np.isfinite(lbf))
        self.has_u = has_u = np.flatnonzero(np.isfinite(ubf))
        nf = free.size
        if self.dense:
            eye = np.eye(nf)
            self.Gall = np.vstack([Gf, eye[has_u], -eye[has_l]])
        else:
            eye = sp.identity(nf, format="csr")
            self.Gall = sp.vstack([Gf, eye[has_u], -eye[has_l]], format="csr")
        self.hall = np.concatenate([h_red, ubf[has_u], -lbf[has_l]])

    def solve(self, P=None, q=None, const=None, tol: float = DEFAULT_TOL,
              max_iter: int = DEFAULT_MAX_ITER) -> QPSolution:
        base = self.instance
        if P is None and q is None and const is None:
            original = base
        else:
            original = QPInstance(P=base.P if P is None else sp.csc_matrix(P),
                                  q=base.q if q is None else np.asarray(q, dtype=float),
                                  A=base.A, b=base.b, G=base.G, h=base.h, lb=base.lb,
                                  ub=base.ub, const=base.const if const is None else float(const),
                                  index=base.index)
            _check_objective(original)
        instance = regularized(original, self.reg) if self.reg > 0 else original
        if np.any(self.empty_eq > tol) or np.any(self.empty_in < -tol):
            return _infeasible(instance, self.x_fixed)

        free, x_fixed = self.free, self.x_fixed
        Pm = instance.P.toarray() if self.dense else sp.csc_matrix(instance.P)
        Pff = Pm[np.ix_(free, free)] if self.dense else Pm[free][:, free]
        q_red = instance.q[free] + (Pm[free] @ x_fixed)

        if free.size == 0:
            xs, ys = np.zeros(0), np.zeros(self.eq_idx.size)
            zs, it, status = np.zeros(self.hall.size), 0, OPTIMAL
        else:
            xs, ys, zs, it, status = _ipm(Pff, q_red, self.Af, self.b_red, self.Gall, self.hall,
                                          tol, max_iter)

        n = instance.n
        x = x_fixed.copy()
        x[free] = xs
        y = np.zeros(instance.A.shape[0])
        y[self.eq_idx] = ys
        z = np.zeros(instance.G.shape[0])
        mg = self.in_idx.size
        has_u, has_l = self.has_u, self.has_l
        z[self.in_idx] = zs[:mg]
        z_ub = np.zeros(n)
        z_lb = np.zeros(n)
        z_ub[free[has_u]] = zs[mg:mg + has_u.size]
        z_lb[free[has_l]] = zs[mg + has_u.size:]

        # Bound duals of substituted variables close stationarity exactly.
        if np.any(self.fixed):
            g = instance.P @ x + instance.q + instance.A.T @ y + instance.G.T @ z
            fx = np.flatnonzero(self.fixed)
            z_lb[fx] = np.maximum(g[fx], 0.0)
            z_ub[fx] = np.maximum(-g[fx], 0.0)

        if status == OPTIMAL:
            res = kkt_residuals(instance, x, y, z, z_lb, z_ub)
            if max(res) > tol:
                logger.debug("QP residuals %s above tol after recovery", res)
                status = ITERATION_LIMIT
        return QPSolution(x=x, y=y, z=z, z_lb=z_lb, z_ub=z_ub,
                          objective=original.objective(x), status=status, iterations=it)


def _check_objective(instance: QPInstance) -> None:
    n = instance.n
    if instance.P.shape != (n, n):
        raise ValueError(f"P has shape {instance.P.shape}, expected {(n, n)}")
    offdiag = instance.P - sp.diags(instance.P.diagonal())
    if offdiag.count_nonzero():
        asym = abs(instance.P - instance.P.T)
        if asym.nnz and asym.max() > 1e-12:
            raise ValueError("P is not symmetric")


def _infeasible(instance: QPInstance, x0: np.ndarray) -> QPSolution:
    n = instance.n
    return QPSolution(x=x0, y=np.zeros(instance.A.shape[0]), z=np.zeros(instance.G.shape[0]),
                      z_lb=np.zeros(n), z_ub=np.zeros(n), objective=float("nan"),
                      status=INFEASIBLE, iterations=0)


def _ipm(P, q, A, b, G, h, tol, max_iter):
    n, meq, m = q.size, b.size, h.size
    if n + meq <= _DENSE_MAX:
        Pd, Ad, Gd = (M.toarray() if sp.issparse(M) else np.asarray(M) for M in (P, A, G))
        reg = np.zeros((n + meq, n + meq))
        reg[:n, :n] += _KKT_PRIMAL_REG * np.eye(n)
        reg[n:, n:] -= _KKT_DUAL_REG * np.eye(meq)
        K0 = np.block([[Pd, Ad.T], [Ad, np.zeros((meq, meq))]]) + reg
        P, A, G = Pd, Ad, Gd
        At, Gt = Ad.T, Gd.T

        def factor(d):
            K = K0.copy()
            K[:n, :n] += (Gt * d) @ Gd
            lu = sla.lu_factor(K, check_finite=False)
            if np.any(np.diag(lu[0]) == 0):
                raise RuntimeError("singular KKT matrix")
            return lu

        def solve(lu, r1, r2):
            sol = sla.lu_solve(lu, np.concatenate([r1, r2]), check_finite=False)
            return sol[:n], sol[n:]
    else:
        P = sp.csc_matrix(P)
        At = sp.csr_matrix(A.T)
        Gt = sp.csr_matrix(G.T)
        reg_p = sp.identity(n, format="csc") * _KKT_PRIMAL_REG
        reg_d = sp.identity(meq, format="csc") * _KKT_DUAL_REG

        def factor(d):
            H = P + Gt @ sp.diags(d) @ G + reg_p
            K = sp.bmat([[H, At], [A, -reg_d]], format="csc")
            return spla.splu(K, permc_spec="COLAMD")

        def solve(lu, r1, r2):
            sol = lu.solve(np.concatenate([r1, r2]))
            return sol[:n], sol[n:]

    # Starting point: least-squares-ish primal, slacks pushed into the interior.
    lu = factor(np.ones(m))
    x, y = solve(lu, -q, b)
    s = h - G @ x
    z = np.ones(m)
    shift = max(1.0, -1.5 * s.min()) if m else 1.0
    s = np.maximum(s, 0.0) + shift if m else s
    if m:
        z = np.full(m, max(1.0, _inf_norm(q) / max(1.0, np.sqrt(m))))

    scale_d = 1.0 + _inf_norm(q)
    status = ITERATION_LIMIT
    it = 0
    for it in range(1, max_iter + 1):
        rd = P @ x + q + At @ y + Gt @ z
        rp = A @ x - b
        rg = G @ x + s - h
        mu = float(s @ z) / m if m else 0.0
        if (_inf_norm(rd) <= 0.1 * tol and _inf_norm(rp) <= 0.1 * tol
                and _inf_norm(rg) <= 0.1 * tol and (m == 0 or np.max(s * z) <= 0.1 * tol)):
            status = OPTIMAL
            break
        if m and (np.max(z) > 1e12 * scale_d or not np.all(np.isfinite(x))):
            status = INFEASIBLE
            break

        d = z / s
        try:
            lu = factor(d)
        except RuntimeError:
            status = INFEASIBLE
            break

        def direction(rc):
            r1 = -rd - Gt @ (d * rg - rc / s)
            dx, dy = solve(lu, r1, -rp)
            dz = d * (G @ dx + rg) - rc / s
            ds = -(rc + s * dz) / z
            return dx, dy, dz, ds

        # Predictor.
        rc = s * z
        dx, dy, dz, ds = direction(rc)
        a_aff = min(_step(s, ds), _step(z, dz))
        mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / m if m else 0.0
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # Corrector.
        rc = s * z + ds * dz - sigma * mu
        dx, dy, dz, ds = direction(rc)
        alpha = min(1.0, 0.99 * min(_step(s, ds), _step(z, dz)))
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
        if m:
            s = np.maximum(s, 1e-300)
            z = np.maximum(z, 1e-300)
    else:
        it = max_iter

    if status == ITERATION_LIMIT:
        rp_n = max(_inf_norm(A @ x - b), _inf_norm(np.maximum(G @ x - h, 0.0)))
        if rp_n > 1e3 * tol and (m and np.max(z) > 1e6 * scale_d):
            status = INFEASIBLE
    return x, y, z, it, status


def _step(v, dv) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))
