"""Constrained moving horizon estimation with exact parameter sensitivities.

At each time k the estimator solves a window QP over the states
x_{t0..k}, disturbances w_{t0..k-1} and measurement noises v_{t0..k},
where t0 = max(0, k - N):

    min  || S0 (x_t0 - prior_mean) ||^2
         + sum_i || Q^{-1/2} w_i ||^2  +  sum_i || R^{-1/2} v_i ||^2
    s.t. x_{i+1} = A x_i + B u_i + w_i
         y_i     = C x_i + v_i
         x_i in X,  w_i in W,  v_i in V          (per configuration)

with S0 the inverse square root of the prior covariance. For k <= N this
is the growing full-information problem anchored at the initial-state
prior. For k > N the prior is advanced one step per sample: the
covariance follows the prediction-form Riccati recursion and the prior
mean is the one-step prediction through the model from the estimate made
N+1 samples ago. That handover keeps the window exactly equivalent to the
full-information problem in the unconstrained case, so the horizon-1
estimator reproduces the Kalman filter to working precision.

The estimate's total derivative with respect to the uncertain parameters
combines three paths: the explicit dependence of the window data on theta
(A, B, C entries in the equality rows), the prior weighting path through
the Riccati recursion and the matrix square root, and the prior mean path
through past estimates. All three are folded into a single QP
differentiation pass by seeding the data sensitivities with the carried
derivative state, so one KKT solve per parameter yields the full total
derivative.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EstimationError
from .linalg import inv_sqrtm_with_sens, riccati_step_with_sens
from .model import LtiModel, Polytope
from .qp import QpProblem, SolverConfig, solve
from .qp_diff import DiffConfig, QpDataSens, differentiate

__all__ = [
    "MheConfig",
    "MheWindow",
    "SensitivityState",
    "MheStepResult",
    "WindowLayout",
    "build_qp",
    "MovingHorizonEstimator",
    "run_trajectory",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MheConfig:
    """Estimator configuration.

    prior_update selects the handover of the prior mean across windows:
    "predicted" (default) propagates the estimate made at the window start
    through the model, which is exact in the unconstrained case;
    "smoothed" reuses the second window state of the previous solve.
    """

    horizon: int = 10
    solver: SolverConfig = field(default_factory=SolverConfig)
    diff: DiffConfig = field(default_factory=DiffConfig)
    enable_state_constraints: bool = True
    enable_disturbance_constraints: bool = True
    enable_noise_constraints: bool = False
    prior_update: str = "predicted"
    compute_sensitivities: bool = True
    eps_feas: float = 1e-7
    max_widenings: int = 10

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if self.prior_update not in ("predicted", "smoothed"):
            raise ConfigError(f"unknown prior_update '{self.prior_update}'")


@dataclass(frozen=True)
class WindowLayout:
    """Index bookkeeping for the stacked window decision vector."""

    L: int
    n: int
    m: int
    p: int

    @property
    def dim(self) -> int:
        return (self.L + 1) * self.n + self.L * self.n + (self.L + 1) * self.p

    @property
    def n_eq(self) -> int:
        return self.L * self.n + (self.L + 1) * self.p

    def x_slice(self, i: int) -> slice:
        return slice(i * self.n, (i + 1) * self.n)

    def w_slice(self, i: int) -> slice:
        off = (self.L + 1) * self.n
        return slice(off + i * self.n, off + (i + 1) * self.n)

    def v_slice(self, i: int) -> slice:
        off = (self.L + 1) * self.n + self.L * self.n
        return slice(off + i * self.p, off + (i + 1) * self.p)


@dataclass(frozen=True)
class MheWindow:
    """Inputs of one window solve.

    y_buf holds the L+1 measurements for times t0..k, u_buf the L inputs
    for times t0..k-1. prior_cov is carried alongside its inverse square
    root because the covariance recursion advances on the covariance
    itself.
    """

    k: int
    y_buf: np.ndarray  # (L+1, p)
    u_buf: np.ndarray  # (L, m)
    prior_mean: np.ndarray  # (n,)
    prior_inv_sqrt: np.ndarray  # (n, n)
    prior_cov: np.ndarray  # (n, n)
    prior_cost: float

    @property
    def L(self) -> int:
        return self.u_buf.shape[0]

    @property
    def t0(self) -> int:
        return self.k - self.L


@dataclass(frozen=True)
class SensitivityState:
    """Derivative state carried across windows: the prior paths of the
    total-derivative chain rule."""

    d_prior_mean: np.ndarray  # (q, n)
    d_prior_inv_sqrt: np.ndarray  # (q, n, n)
    d_P: np.ndarray  # (q, n, n)

    @classmethod
    def zero(cls, q: int, n: int) -> "SensitivityState":
        return cls(np.zeros((q, n)), np.zeros((q, n, n)), np.zeros((q, n, n)))


@dataclass(frozen=True)
class MheStepResult:
    k: int
    x_hat: np.ndarray
    dx_hat: np.ndarray  # (q, n) total derivative
    x_hats: np.ndarray  # (L+1, n) all window states
    w_hats: np.ndarray  # (L, n)
    v_hats: np.ndarray  # (L+1, p)
    V_star: float
    dw_last: np.ndarray | None  # (q, n) total derivative of w_{k-1|k}
    solver_status: str = "optimal"
    kkt_residual: float = 0.0
    degenerate: bool = False
    weak_activity: bool = False
    widened: bool = False

    @property
    def w_hat(self) -> np.ndarray | None:
        return self.w_hats[-1] if len(self.w_hats) else None


def build_qp(window: MheWindow, theta, model: LtiModel, cfg: MheConfig,
             sens_state: SensitivityState | None = None,
             noise_set: Polytope | None = None):
    """Assemble the window QP and its data sensitivities.

    Passing sens_state seeds the prior blocks with the carried derivative
    state so the subsequent differentiation yields total derivatives;
    leaving it None gives the partial derivative of the window map alone.
    Returns (QpProblem, QpDataSens, WindowLayout).
    """
    n, m, p, q = model.n, model.m, model.p, model.q
    L = window.L
    if window.y_buf.shape != (L + 1, p):
        raise ConfigError(
            f"measurement buffer has shape {window.y_buf.shape}, expected {(L + 1, p)}"
        )
    lay = WindowLayout(L, n, m, p)
    A, B, C = model.matrices(theta)
    dA, dB, dC = model.matrix_derivs()
    sens_state = sens_state or SensitivityState.zero(q, n)

    S0 = window.prior_inv_sqrt
    P_inv = S0 @ S0
    Q_inv = _spd_inv(model.Q)
    R_inv = _spd_inv(model.R)

    d = lay.dim
    P_qp = np.zeros((d, d))
    f = np.zeros(d)
    P_qp[lay.x_slice(0), lay.x_slice(0)] = 2.0 * P_inv
    f[lay.x_slice(0)] = -2.0 * P_inv @ window.prior_mean
    for i in range(L):
        P_qp[lay.w_slice(i), lay.w_slice(i)] = 2.0 * Q_inv
    for i in range(L + 1):
        P_qp[lay.v_slice(i), lay.v_slice(i)] = 2.0 * R_inv

    E = np.zeros((lay.n_eq, d))
    b = np.zeros(lay.n_eq)
    for i in range(L):
        rows = slice(i * n, (i + 1) * n)
        E[rows, lay.x_slice(i + 1)] = np.eye(n)
        E[rows, lay.x_slice(i)] = -A
        E[rows, lay.w_slice(i)] = -np.eye(n)
        b[rows] = B @ window.u_buf[i]
    meas0 = L * n
    for i in range(L + 1):
        rows = slice(meas0 + i * p, meas0 + (i + 1) * p)
        E[rows, lay.x_slice(i)] = C
        E[rows, lay.v_slice(i)] = np.eye(p)
        b[rows] = window.y_buf[i]

    G_blocks, h_blocks = [], []

    def add_rows(poly: Polytope, sl: slice):
        if poly.n_rows == 0:
            return
        Gi = np.zeros((poly.n_rows, d))
        Gi[:, sl] = poly.H
        G_blocks.append(Gi)
        h_blocks.append(poly.h)

    if cfg.enable_state_constraints:
        for i in range(L + 1):
            add_rows(model.X, lay.x_slice(i))
        if window.t0 == 0:
            add_rows(model.x0_prior.support, lay.x_slice(0))
    if cfg.enable_disturbance_constraints:
        for i in range(L):
            add_rows(model.W, lay.w_slice(i))
    if cfg.enable_noise_constraints:
        vset = noise_set if noise_set is not None else model.V
        for i in range(L + 1):
            add_rows(vset, lay.v_slice(i))

    G = np.vstack(G_blocks) if G_blocks else np.zeros((0, d))
    h = np.concatenate(h_blocks) if h_blocks else np.zeros(0)
    qp = QpProblem(P_qp, f, G, h, E, b)

    dP = np.zeros((q, d, d))
    df = np.zeros((q, d))
    dE = np.zeros((q, lay.n_eq, d))
    db = np.zeros((q, lay.n_eq))
    for j in range(q):
        dS = sens_state.d_prior_inv_sqrt[j]
        dP_inv = dS @ S0 + S0 @ dS
        dP[j][lay.x_slice(0), lay.x_slice(0)] = 2.0 * dP_inv
        df[j][lay.x_slice(0)] = -2.0 * (
            dP_inv @ window.prior_mean + P_inv @ sens_state.d_prior_mean[j]
        )
        for i in range(L):
            rows = slice(i * n, (i + 1) * n)
            dE[j][rows, lay.x_slice(i)] = -dA[j]
            db[j][rows] = dB[j] @ window.u_buf[i]
        for i in range(L + 1):
            rows = slice(meas0 + i * p, meas0 + (i + 1) * p)
            dE[j][rows, lay.x_slice(i)] = dC[j]

    sens = QpDataSens(q, d, qp.n_in, lay.n_eq, dP=dP, df=df, dE=dE, db=db)
    return qp, sens, lay


def _spd_inv(M: np.ndarray) -> np.ndarray:
    Mi = np.linalg.inv(M)
    return 0.5 * (Mi + Mi.T)


def _window_cost(window: MheWindow, z, lay: WindowLayout, P_inv, Q_inv, R_inv) -> float:
    r = z[lay.x_slice(0)] - window.prior_mean
    cost = float(r @ P_inv @ r)
    for i in range(lay.L):
        w = z[lay.w_slice(i)]
        cost += float(w @ Q_inv @ w)
    for i in range(lay.L + 1):
        v = z[lay.v_slice(i)]
        cost += float(v @ R_inv @ v)
    return cost


class MovingHorizonEstimator:
    """Online estimator: feed it measurements, read back estimates with
    sensitivities.

    Usage:
        est = MovingHorizonEstimator(model, theta, cfg)
        r0 = est.start(y0)
        r1 = est.step(u0, y1)
        ...
    """

    def __init__(self, model: LtiModel, theta, cfg: MheConfig | None = None,
                 check_observability: bool = True):
        self.model = model
        self.theta = np.atleast_1d(np.asarray(theta, dtype=float))
        self.cfg = cfg or MheConfig()
        if check_observability:
            model.check_observability(self.theta)
        self.A, self.B, self.C = model.matrices(self.theta)
        self.dA, self.dB, self.dC = model.matrix_derivs()
        self._Q_inv = _spd_inv(model.Q)
        self._R_inv = _spd_inv(model.R)

        n, q = model.n, model.q
        x0 = model.x0_prior
        self._P = x0.cov.copy()
        self._dP = np.zeros((q, n, n))
        sq = inv_sqrtm_with_sens(self._P, self._dP)
        self._S = sq.inv_sqrt
        self._dS = sq.sensitivities
        self._prior_mean = x0.mean.copy()
        self._d_prior_mean = np.zeros((q, n))
        self._prior_cost = 0.0
        self._y_buf: deque = deque()
        self._u_buf: deque = deque()
        # Per-step (x_hat, dx_hat, V_star) kept for the prior handover.
        self._history: deque = deque()
        self.k = -1

    @property
    def window(self) -> MheWindow:
        return MheWindow(
            k=self.k,
            y_buf=np.array(self._y_buf, dtype=float).reshape(len(self._y_buf), self.model.p),
            u_buf=np.array(self._u_buf, dtype=float).reshape(len(self._u_buf), self.model.m),
            prior_mean=self._prior_mean.copy(),
            prior_inv_sqrt=self._S.copy(),
            prior_cov=self._P.copy(),
            prior_cost=self._prior_cost,
        )

    @property
    def sensitivity_state(self) -> SensitivityState:
        return SensitivityState(
            d_prior_mean=self._d_prior_mean.copy(),
            d_prior_inv_sqrt=self._dS.copy(),
            d_P=self._dP.copy(),
        )

    def start(self, y0) -> MheStepResult:
        """Process the time-0 measurement against the initial prior."""
        if self.k >= 0:
            raise EstimationError("estimator already started")
        self.k = 0
        self._y_buf.append(np.asarray(y0, dtype=float))
        return self._process()

    def step(self, u, y) -> MheStepResult:
        """Advance one sample: input u applied since the last measurement,
        then measurement y."""
        if self.k < 0:
            raise EstimationError("call start() with the time-0 measurement first")
        self.k += 1
        self._u_buf.append(np.asarray(u, dtype=float))
        self._y_buf.append(np.asarray(y, dtype=float))
        if len(self._u_buf) > self.cfg.horizon:
            self._u_buf.popleft()
            self._y_buf.popleft()
        return self._process()

    def _process(self) -> MheStepResult:
        window = self.window
        sens_state = self.sensitivity_state
        qp, qp_sens, lay = build_qp(window, self.theta, self.model, self.cfg, sens_state)

        sol = solve(qp, self.cfg.solver)
        widened = False
        if sol.status == "infeasible":
            qp, qp_sens, lay, sol = self._widen_and_resolve(window, sens_state)
            widened = True
        if sol.status != "optimal":
            raise EstimationError(
                f"window QP at k={self.k} ended with status '{sol.status}' "
                f"(kkt residual {sol.kkt_residual:.2e})"
            )

        q, n = self.model.q, self.model.n
        if self.cfg.compute_sensitivities:
            diff = differentiate(qp, sol, qp_sens, self.cfg.diff)
            dz = diff.dz
            degenerate, weak = diff.degenerate, diff.weak_activity
        else:
            dz = np.zeros((q, lay.dim))
            degenerate = weak = False

        z = sol.z_star
        L = lay.L
        x_hats = np.stack([z[lay.x_slice(i)] for i in range(L + 1)])
        w_hats = (
            np.stack([z[lay.w_slice(i)] for i in range(L)]) if L else np.zeros((0, n))
        )
        v_hats = np.stack([z[lay.v_slice(i)] for i in range(L + 1)])
        P_inv = window.prior_inv_sqrt @ window.prior_inv_sqrt
        V_star = window.prior_cost + _window_cost(window, z, lay, P_inv, self._Q_inv, self._R_inv)

        result = MheStepResult(
            k=self.k,
            x_hat=x_hats[-1].copy(),
            dx_hat=dz[:, lay.x_slice(L)].copy(),
            x_hats=x_hats,
            w_hats=w_hats,
            v_hats=v_hats,
            V_star=V_star,
            dw_last=dz[:, lay.w_slice(L - 1)].copy() if L else None,
            solver_status=sol.status,
            kkt_residual=sol.kkt_residual,
            degenerate=degenerate,
            weak_activity=weak,
            widened=widened,
        )
        self._history.append((result.x_hat, result.dx_hat, result.V_star))

        if self.k >= self.cfg.horizon:
            self._advance_prior(z, dz, lay)
        return result

    def _advance_prior(self, z, dz, lay: WindowLayout) -> None:
        """Roll the prior one step for the next window."""
        self._P, self._dP = riccati_step_with_sens(
            self._P, self._dP, self.A, self.C, self.model.Q, self.model.R,
            self.dA, self.dC,
        )
        sq = inv_sqrtm_with_sens(self._P, self._dP)
        self._S, self._dS = sq.inv_sqrt, sq.sensitivities

        if self.cfg.prior_update == "predicted":
            x_t0, dx_t0, _ = self._history[0]
            u_t0 = self._u_buf[0]
            self._prior_mean = self.A @ x_t0 + self.B @ u_t0
            for j in range(self.model.q):
                self._d_prior_mean[j] = (
                    self.dA[j] @ x_t0 + self.A @ dx_t0[j] + self.dB[j] @ u_t0
                )
        else:  # smoothed
            self._prior_mean = z[lay.x_slice(1)].copy()
            self._d_prior_mean = dz[:, lay.x_slice(1)].copy()

        self._prior_cost = self._history[1][2]
        self._history.popleft()

    def _widen_and_resolve(self, window, sens_state):
        """Recover from infeasibility by doubling the noise set."""
        if not self.cfg.enable_noise_constraints or self.model.V.n_rows == 0:
            raise EstimationError(
                f"window QP at k={self.k} is infeasible and the noise set "
                "cannot be widened"
            )
        vset = self.model.V
        for attempt in range(1, self.cfg.max_widenings + 1):
            vset = Polytope(vset.H, 2.0 * vset.h)
            logger.warning(
                "window QP infeasible at k=%d; widening noise set (attempt %d)",
                self.k, attempt,
            )
            qp, qp_sens, lay = build_qp(
                window, self.theta, self.model, self.cfg, sens_state, noise_set=vset
            )
            sol = solve(qp, self.cfg.solver)
            if sol.status == "optimal":
                return qp, qp_sens, lay, sol
        raise EstimationError(
            f"window QP at k={self.k} remained infeasible after "
            f"{self.cfg.max_widenings} noise-set widenings"
        )


def run_trajectory(model: LtiModel, theta, y_seq, u_seq,
                   cfg: MheConfig | None = None,
                   check_observability: bool = True):
    """Estimate a whole measurement record.

    y_seq has T+1 rows (including the time-0 measurement), u_seq has
    T rows. Returns (list of MheStepResult, estimator) so callers can
    continue stepping or inspect the carried state.
    """
    y_seq = np.atleast_2d(np.asarray(y_seq, dtype=float))
    u_seq = np.asarray(u_seq, dtype=float).reshape(-1, model.m)
    if len(y_seq) != len(u_seq) + 1:
        raise ConfigError(
            f"need len(y_seq) == len(u_seq) + 1, got {len(y_seq)} and {len(u_seq)}"
        )
    est = MovingHorizonEstimator(model, theta, cfg, check_observability=check_observability)
    results = [est.start(y_seq[0])]
    for k in range(len(u_seq)):
        results.append(est.step(u_seq[k], y_seq[k + 1]))
    return results, est
