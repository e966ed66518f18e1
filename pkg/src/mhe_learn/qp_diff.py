"""Differentiation of the QP solution map via the KKT implicit function theorem.

Given a solved QP and per-parameter derivatives of its data, the primal
solution's sensitivity dz*/dtheta_j solves the linear system obtained by
differentiating the KKT conditions restricted to the active inequality
set:

    [ P   G_a'  E' ] [dz  ]     [ dP z + df + dG_a' lam_a + dE' nu ]
    [ G_a 0     0  ] [dlam] = - [ dG_a z - dh_a                    ]
    [ E   0     0  ] [dnu ]     [ dE z - db                        ]

One factorization serves all parameters (forward mode; q is small). This
is valid at solutions where strict complementarity holds; weakly active
constraints are dropped and flagged so the caller can treat the result as
a subgradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .qp import QpProblem, QpSolution

__all__ = ["QpDataSens", "QpSolutionSens", "differentiate", "DiffConfig"]

ACTIVITY_DUAL = 1e-6
ACTIVITY_SLACK = 1e-6
KKT_REG = 1e-10


@dataclass(frozen=True)
class DiffConfig:
    dual_threshold: float = ACTIVITY_DUAL
    slack_threshold: float = ACTIVITY_SLACK
    regularization: float = KKT_REG


class QpDataSens:
    """Per-parameter derivatives of QP data; any block may be omitted (zero).

    Arrays are stacked over the leading parameter axis: dP has shape
    (q, d, d), df (q, d), dG (q, n_in, d), dh (q, n_in), dE (q, n_eq, d),
    db (q, n_eq).
    """

    def __init__(self, q, dim, n_in=0, n_eq=0, dP=None, df=None, dG=None, dh=None,
                 dE=None, db=None):
        self.q = q
        self.dP = self._fill(dP, (q, dim, dim))
        self.df = self._fill(df, (q, dim))
        self.dG = self._fill(dG, (q, n_in, dim))
        self.dh = self._fill(dh, (q, n_in))
        self.dE = self._fill(dE, (q, n_eq, dim))
        self.db = self._fill(db, (q, n_eq))

    @staticmethod
    def _fill(arr, shape):
        if arr is None:
            return np.zeros(shape)
        arr = np.asarray(arr, dtype=float)
        if arr.shape != shape:
            raise ValueError(f"sensitivity block has shape {arr.shape}, expected {shape}")
        return arr


@dataclass(frozen=True)
class QpSolutionSens:
    dz: np.ndarray  # (q, d)
    dlam_active: np.ndarray  # (q, n_active)
    dnu: np.ndarray  # (q, n_eq)
    active_set: np.ndarray  # indices into the inequality rows
    degenerate: bool = False
    weak_activity: bool = False


def classify_active_set(qp: QpProblem, sol: QpSolution, cfg: DiffConfig):
    """Split inequalities into strictly active rows and note weak activity.

    A row is active when its multiplier is clearly positive and its slack
    is numerically zero. Rows where both the multiplier and the slack are
    small sit at a kink of the solution map: they are dropped and reported
    so gradients there can be treated as subgradients.
    """
    if qp.n_in == 0:
        return np.zeros(0, dtype=int), False
    slack = qp.h - qp.G @ sol.z_star
    strong = (sol.lam > cfg.dual_threshold) & (np.abs(slack) < cfg.slack_threshold)
    weak = (sol.lam <= cfg.dual_threshold) & (np.abs(slack) < cfg.slack_threshold)
    return np.flatnonzero(strong), bool(np.any(weak))


def differentiate(qp: QpProblem, sol: QpSolution, sens: QpDataSens,
                  cfg: DiffConfig | None = None) -> QpSolutionSens:
    """Forward-mode sensitivities of the primal-dual solution.

    Requires sol.status == "optimal". The KKT matrix is refactorized
    exactly at (z*, lam, nu); a singular system (active-set degeneracy) is
    regularized and the result flagged.
    """
    cfg = cfg or DiffConfig()
    if not sol.optimal:
        raise ValueError(f"cannot differentiate a solution with status '{sol.status}'")

    active, weak = classify_active_set(qp, sol, cfg)
    G_a = qp.G[active]
    lam_a = sol.lam[active]
    d, na, ne = qp.dim, len(active), qp.n_eq
    z, nu = sol.z_star, sol.nu

    K = np.zeros((d + na + ne, d + na + ne))
    K[:d, :d] = qp.P
    K[:d, d:d + na] = G_a.T
    K[:d, d + na:] = qp.E.T
    K[d:d + na, :d] = G_a
    K[d + na:, :d] = qp.E

    rhs = np.empty((d + na + ne, sens.q))
    for j in range(sens.q):
        dG_a = sens.dG[j][active]
        dh_a = sens.dh[j][active]
        rhs[:d, j] = sens.dP[j] @ z + sens.df[j] + dG_a.T @ lam_a + sens.dE[j].T @ nu
        rhs[d:d + na, j] = dG_a @ z - dh_a
        rhs[d + na:, j] = sens.dE[j] @ z - sens.db[j]

    degenerate = False
    with np.errstate(all="ignore"):
        lu = lu_factor(K, check_finite=False)
        out = lu_solve(lu, -rhs, check_finite=False)
    if not np.all(np.isfinite(out)):
        degenerate = True
        K[np.arange(K.shape[0]), np.arange(K.shape[0])] += cfg.regularization
        lu = lu_factor(K, check_finite=False)
        out = lu_solve(lu, -rhs, check_finite=False)

    return QpSolutionSens(
        dz=out[:d].T.copy(),
        dlam_active=out[d:d + na].T.copy(),
        dnu=out[d + na:].T.copy(),
        active_set=active,
        degenerate=degenerate,
        weak_activity=weak,
    )
