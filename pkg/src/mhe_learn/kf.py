"""Kalman filter baseline with forward-mode parameter sensitivities.

The filter runs the textbook predict/update recursion at the current
parameter estimate and simultaneously propagates dx/dtheta_j and
dP/dtheta_j by differentiating every line with the product rule. With the
simple covariance update (I - K C) P^- it matches the prediction-form
Riccati recursion used by the moving horizon estimator term for term, so
the unconstrained estimator with horizon 1 reproduces it exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .model import LtiModel

__all__ = ["KfStepResult", "KalmanFilter", "run_kf_trajectory"]


@dataclass(frozen=True)
class KfStepResult:
    """Posterior estimate after one measurement, with sensitivities.

    w_hat is the disturbance implied by consecutive posteriors,
    w_hat(k-1) = x(k) - A x(k-1) - B u(k-1); it feeds the regularized
    output-error loss the same way the window estimator's last disturbance
    does.
    """

    k: int
    x_hat: np.ndarray
    dx_hat: np.ndarray  # (q, n)
    w_hat: np.ndarray | None = None
    dw_hat: np.ndarray | None = None


class KalmanFilter:
    """Stateful filter over an LtiModel at a fixed parameter estimate."""

    def __init__(self, model: LtiModel, theta, check_observability: bool = True):
        self.model = model
        self.theta = np.atleast_1d(np.asarray(theta, dtype=float))
        self.A, self.B, self.C = model.matrices(self.theta)
        self.dA, self.dB, self.dC = model.matrix_derivs()
        if check_observability:
            model.check_observability(self.theta)
        n, q = model.n, model.q
        self.x = model.x0_prior.mean.copy()
        self.P = model.x0_prior.cov.copy()
        self.dx = np.zeros((q, n))
        self.dP = np.zeros((q, n, n))
        self.k = -1  # index of the last absorbed measurement

    def predict(self, u) -> None:
        """Time update through the dynamics with input u."""
        u = np.asarray(u, dtype=float)
        A, B = self.A, self.B
        dx_new = np.empty_like(self.dx)
        dP_new = np.empty_like(self.dP)
        for j in range(self.model.q):
            dx_new[j] = self.dA[j] @ self.x + A @ self.dx[j] + self.dB[j] @ u
            dPj = self.dA[j] @ self.P @ A.T + A @ self.dP[j] @ A.T + A @ self.P @ self.dA[j].T
            dP_new[j] = 0.5 * (dPj + dPj.T)
        self.x = A @ self.x + B @ u
        P = A @ self.P @ A.T + self.model.Q
        self.P = 0.5 * (P + P.T)
        self.dx = dx_new
        self.dP = dP_new

    def update(self, y) -> None:
        """Measurement update with observation y."""
        y = np.asarray(y, dtype=float)
        C, R = self.C, self.model.R
        P = self.P
        S = R + C @ P @ C.T
        try:
            S_inv = np.linalg.inv(S)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("innovation covariance is singular") from exc
        K = P @ C.T @ S_inv
        innov = y - C @ self.x

        dx_new = np.empty_like(self.dx)
        dP_new = np.empty_like(self.dP)
        for j in range(self.model.q):
            dCj = self.dC[j]
            dS = dCj @ P @ C.T + C @ self.dP[j] @ C.T + C @ P @ dCj.T
            dK = (self.dP[j] @ C.T + P @ dCj.T) @ S_inv - K @ dS @ S_inv
            dinnov = -dCj @ self.x - C @ self.dx[j]
            dx_new[j] = self.dx[j] + dK @ innov + K @ dinnov
            dPj = -(dK @ C + K @ dCj) @ P + (np.eye(self.model.n) - K @ C) @ self.dP[j]
            dP_new[j] = 0.5 * (dPj + dPj.T)

        self.x = self.x + K @ innov
        P_new = (np.eye(self.model.n) - K @ C) @ P
        self.P = 0.5 * (P_new + P_new.T)
        self.dx = dx_new
        self.dP = dP_new
        self.k += 1

    def step(self, u, y) -> KfStepResult:
        """Predict with u, then update with y; returns the new posterior."""
        x_prev = self.x.copy()
        dx_prev = self.dx.copy()
        u = np.asarray(u, dtype=float)
        self.predict(u)
        self.update(y)
        w_hat = self.x - self.A @ x_prev - self.B @ u
        dw = np.empty_like(self.dx)
        for j in range(self.model.q):
            dw[j] = (
                self.dx[j]
                - self.dA[j] @ x_prev
                - self.A @ dx_prev[j]
                - self.dB[j] @ u
            )
        return KfStepResult(self.k, self.x.copy(), self.dx.copy(), w_hat, dw)

    def start(self, y0) -> KfStepResult:
        """Absorb the time-0 measurement into the initial prior."""
        self.update(y0)
        return KfStepResult(self.k, self.x.copy(), self.dx.copy())


def run_kf_trajectory(model: LtiModel, theta, y_seq, u_seq,
                      check_observability: bool = True) -> list[KfStepResult]:
    """Filter a whole measurement record.

    y_seq has T+1 rows (including the time-0 measurement), u_seq has T rows.
    """
    y_seq = np.atleast_2d(np.asarray(y_seq, dtype=float))
    u_seq = np.asarray(u_seq, dtype=float).reshape(-1, model.m)
    if len(y_seq) != len(u_seq) + 1:
        raise ValueError(
            f"need len(y_seq) == len(u_seq) + 1, got {len(y_seq)} and {len(u_seq)}"
        )
    kf = KalmanFilter(model, theta, check_observability=check_observability)
    results = [kf.start(y_seq[0])]
    for k in range(len(u_seq)):
        results.append(kf.step(u_seq[k], y_seq[k + 1]))
    return results
