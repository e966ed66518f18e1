"""Dense convex quadratic programming.

Solves  min_z  0.5 z' P z + f' z   s.t.  G z <= h,  E z = b

with a Mehrotra predictor-corrector primal-dual interior-point method on
the dense KKT system. Problems without inequalities short-circuit to a
single symmetric KKT solve, which is exact to working precision; that path
is what the unconstrained estimator relies on.

The solver is a pure function of its inputs: identical problems and
configuration produce bitwise-identical solutions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import ConfigError

__all__ = ["QpProblem", "QpSolution", "SolverConfig", "solve"]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QpProblem:
    P: np.ndarray
    f: np.ndarray
    G: np.ndarray
    h: np.ndarray
    E: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        f = np.atleast_1d(np.asarray(self.f, dtype=float))
        d = f.shape[0]
        G = np.asarray(self.G, dtype=float).reshape(-1, d)
        h = np.atleast_1d(np.asarray(self.h, dtype=float)).reshape(-1)
        E = np.asarray(self.E, dtype=float).reshape(-1, d)
        b = np.atleast_1d(np.asarray(self.b, dtype=float)).reshape(-1)
        if P.shape != (d, d):
            raise ConfigError(f"P has shape {P.shape}, expected ({d}, {d})")
        if not np.allclose(P, P.T, atol=1e-9, rtol=1e-9):
            raise ConfigError("P must be symmetric")
        if G.shape[0] != h.shape[0]:
            raise ConfigError("G and h row counts differ")
        if E.shape[0] != b.shape[0]:
            raise ConfigError("E and b row counts differ")
        for name, arr in (("P", P), ("f", f), ("G", G), ("h", h), ("E", E), ("b", b)):
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} contains non-finite entries")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.f.shape[0]

    @property
    def n_in(self) -> int:
        return self.G.shape[0]

    @property
    def n_eq(self) -> int:
        return self.E.shape[0]

    @classmethod
    def unconstrained(cls, P, f) -> "QpProblem":
        d = np.atleast_1d(np.asarray(f)).shape[0]
        return cls(P, f, np.zeros((0, d)), np.zeros(0), np.zeros((0, d)), np.zeros(0))

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.P @ z + self.f @ z)


@dataclass(frozen=True)
class QpSolution:
    z_star: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    status: str  # "optimal" | "max-iter" | "infeasible"
    kkt_residual: float
    iterations: int = 0
    regularized: bool = False

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-8
    max_iter: int = 100
    # Step shrink factor keeping iterates strictly interior.
    step_frac: float = 0.99
    # Dual divergence threshold used for infeasibility detection.
    divergence: float = 1e12
    hessian_reg: float = 1e-9


class _KktFactor:
    """LU factorization of [[M11, E'], [E, 0]] reused across solves.

    Falls back to a lightly regularized system when the KKT matrix is
    singular (zero-curvature directions appear in some eliminated-variable
    stackings); rank-deficient equality rows are a caller error and
    reported as such.
    """

    def __init__(self, M11, E, reg: float):
        d = M11.shape[0]
        ne = E.shape[0]
        K = np.zeros((d + ne, d + ne))
        K[:d, :d] = M11
        K[:d, d:] = E.T
        K[d:, :d] = E
        self._d = d
        self._ne = ne
        self._E = E
        self._K = K
        self._reg = reg
        self.regularized = False
        with np.errstate(all="ignore"):
            self._lu = lu_factor(K, check_finite=False)

    def _regularize(self):
        if self._ne and np.linalg.matrix_rank(self._E) < self._ne:
            raise ConfigError("equality constraint rows are linearly dependent")
        logger.warning("singular KKT system; retrying with %.1e regularization", self._reg)
        d, ne = self._d, self._ne
        K = self._K.copy()
        K[np.arange(d), np.arange(d)] += self._reg
        K[np.arange(d, d + ne), np.arange(d, d + ne)] -= self._reg
        self._lu = lu_factor(K, check_finite=False)
        self.regularized = True

    def solve(self, rhs_top, rhs_bot):
        rhs = np.concatenate([rhs_top, rhs_bot])
        with np.errstate(all="ignore"):
            sol = lu_solve(self._lu, rhs, check_finite=False)
        if not np.all(np.isfinite(sol)):
            # Singular factorization surfaces as non-finite output.
            self._regularize()
            sol = lu_solve(self._lu, rhs, check_finite=False)
        return sol[: self._d], sol[self._d :]


def _kkt_solve(M11, E, rhs_top, rhs_bot, reg: float):
    fac = _KktFactor(M11, E, reg)
    x, y = fac.solve(rhs_top, rhs_bot)
    return x, y, fac.regularized


def _residuals(qp: QpProblem, z, lam, nu):
    r_dual = qp.P @ z + qp.f + qp.G.T @ lam + qp.E.T @ nu
    r_in = qp.G @ z - qp.h if qp.n_in else np.zeros(0)
    r_eq = qp.E @ z - qp.b if qp.n_eq else np.zeros(0)
    return r_dual, r_in, r_eq


def kkt_residual(qp: QpProblem, z, lam, nu) -> float:
    """Worst-case KKT violation: stationarity scaled by 1 + ||f||_inf,
    primal feasibility, complementarity, and dual feasibility, all as
    absolute numbers comparable against the solver tolerance."""
    r_dual, r_in, r_eq = _residuals(qp, z, lam, nu)
    scale = 1.0 + float(np.max(np.abs(qp.f))) if qp.f.size else 1.0
    parts = [float(np.max(np.abs(r_dual))) / scale if r_dual.size else 0.0]
    if qp.n_in:
        parts.append(float(np.max(r_in)))  # one-sided: G z <= h
        parts.append(float(np.max(np.abs(lam * r_in))))
        parts.append(float(max(0.0, -lam.min())))
    if qp.n_eq:
        parts.append(float(np.max(np.abs(r_eq))))
    return float(max(parts))


def _solve_equality_qp(qp: QpProblem, cfg: SolverConfig) -> QpSolution:
    z, nu, reg = _kkt_solve(qp.P, qp.E, -qp.f, qp.b, cfg.hessian_reg)
    res = kkt_residual(qp, z, np.zeros(0), nu)
    return QpSolution(z, np.zeros(0), nu, "optimal", res, iterations=1, regularized=reg)


def _max_step(v, dv, frac):
    """Largest alpha in (0, frac] keeping v + alpha dv > 0."""
    neg = dv < 0
    if not np.any(neg):
        return frac
    return min(frac, float(np.min(-v[neg] / dv[neg])) * frac)


def solve(qp: QpProblem, cfg: SolverConfig | None = None) -> QpSolution:
    """Solve a dense convex QP to the configured KKT tolerance."""
    cfg = cfg or SolverConfig()
    if qp.n_in == 0:
        return _solve_equality_qp(qp, cfg)

    d, n_in, n_eq = qp.dim, qp.n_in, qp.n_eq
    G, h, E, b, P, f = qp.G, qp.h, qp.E, qp.b, qp.P, qp.f

    # Interior starting point: equality-consistent z from a damped KKT
    # solve, slacks shifted to be safely positive.
    z, _, _ = _kkt_solve(P + np.eye(d), E, -f, b, cfg.hessian_reg)
    s_raw = h - G @ z
    shift = max(0.0, -float(s_raw.min())) + 1.0
    s = s_raw + shift
    lam = np.ones(n_in)
    nu = np.zeros(n_eq)

    regularized = False
    status = "max-iter"
    iterations = cfg.max_iter

    for it in range(1, cfg.max_iter + 1):
        r_dual, r_in, r_eq = _residuals(qp, z, lam, nu)
        r_pri = r_in + s  # G z + s - h
        mu = float(s @ lam) / n_in

        if kkt_residual(qp, z, lam, nu) <= cfg.tol:
            status = "optimal"
            iterations = it - 1
            break

        if float(np.max(lam)) > cfg.divergence or not np.isfinite(mu):
            status = "infeasible"
            iterations = it - 1
            break

        D = lam / s
        M11 = P + (G.T * D) @ G
        lam_s = lam * s
        factor = _KktFactor(M11, E, cfg.hessian_reg)

        # Affine predictor.
        rc = lam_s
        top = -r_dual - G.T @ ((lam * r_pri - rc) / s)
        dz_a, _ = factor.solve(top, -r_eq)
        dlam_a = (lam * (G @ dz_a + r_pri) - rc) / s
        ds_a = -r_pri - G @ dz_a
        a_p = _max_step(s, ds_a, 1.0)
        a_d = _max_step(lam, dlam_a, 1.0)
        mu_aff = float((s + a_p * ds_a) @ (lam + a_d * dlam_a)) / n_in
        sigma = (max(mu_aff, 0.0) / mu) ** 3 if mu > 0 else 0.0

        # Corrector with centering.
        rc = lam_s - sigma * mu + dlam_a * ds_a
        top = -r_dual - G.T @ ((lam * r_pri - rc) / s)
        dz, dnu = factor.solve(top, -r_eq)
        dlam = (lam * (G @ dz + r_pri) - rc) / s
        ds = -r_pri - G @ dz
        regularized = regularized or factor.regularized

        a_p = _max_step(s, ds, cfg.step_frac)
        a_d = _max_step(lam, dlam, cfg.step_frac)
        z = z + a_p * dz
        s = s + a_p * ds
        lam = lam + a_d * dlam
        nu = nu + a_d * dnu

    res = kkt_residual(qp, z, lam, nu)
    lam = np.maximum(lam, 0.0)
    return QpSolution(z, lam, nu, status, res, iterations=iterations, regularized=regularized)
