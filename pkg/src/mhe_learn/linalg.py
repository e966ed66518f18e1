"""Dense linear-algebra kernels with forward-mode parameter sensitivities.

Everything here operates on plain numpy arrays. The sensitivity convention
is shared package-wide: a quantity M(theta) carries a list (or stacked
array) of q partial derivatives dM[j] = dM/dtheta_j, propagated exactly by
the product rule. Derivative seeds come from the affine matrix families in
:mod:`mhe_learn.model`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

__all__ = [
    "SqrtmResult",
    "inv_sqrtm_with_sens",
    "riccati_step_with_sens",
    "observability_margin",
]

_SPD_EIG_FLOOR = 1e-12
_SYMMETRY_WARN_TOL = 1e-9


@dataclass(frozen=True)
class SqrtmResult:
    """Inverse matrix square root P^{-1/2} and its parameter sensitivities.

    inv_sqrt is symmetric and satisfies inv_sqrt @ P @ inv_sqrt = I.
    sensitivities[j] is the exact derivative of inv_sqrt along dP[j].
    """

    inv_sqrt: np.ndarray
    sensitivities: np.ndarray  # shape (q, n, n)


def _check_symmetric(name: str, M: np.ndarray) -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise NumericalError(f"{name} must be square, got shape {M.shape}")
    if not np.allclose(M, M.T, atol=1e-10, rtol=1e-10):
        raise NumericalError(f"{name} is not symmetric")


def inv_sqrtm_with_sens(P: np.ndarray, dP=None) -> SqrtmResult:
    """Compute X = P^{-1/2} for SPD P together with dX/dtheta_j.

    The square root S = P^{1/2} comes from the eigendecomposition. Its
    differential solves the Sylvester equation S dS + dS S = dP, which is
    diagonal in the eigenbasis of P (divisors sqrt(e_i) + sqrt(e_k), always
    positive for SPD input). Finally dX = -X dS X.
    """
    P = np.asarray(P, dtype=float)
    _check_symmetric("P", P)
    n = P.shape[0]
    if dP is None:
        dP = np.zeros((0, n, n))
    else:
        dP = np.asarray(dP, dtype=float).reshape(-1, n, n)
    for j in range(dP.shape[0]):
        _check_symmetric(f"dP[{j}]", dP[j])

    eigval, V = np.linalg.eigh(P)
    if eigval.min() <= _SPD_EIG_FLOOR:
        raise NumericalError(
            f"matrix is not positive definite (min eigenvalue {eigval.min():.3e})"
        )
    sqrt_e = np.sqrt(eigval)
    X = (V / sqrt_e) @ V.T
    X = 0.5 * (X + X.T)

    # Sylvester divisors in the eigenbasis; SPD input keeps them > 0.
    denom = sqrt_e[:, None] + sqrt_e[None, :]
    sens = np.empty_like(dP)
    for j in range(dP.shape[0]):
        dP_eig = V.T @ dP[j] @ V
        dS = V @ (dP_eig / denom) @ V.T
        dX = -X @ dS @ X
        sens[j] = 0.5 * (dX + dX.T)
    return SqrtmResult(inv_sqrt=X, sensitivities=sens)


def riccati_step_with_sens(P, dP, A, C, Q, R, dA=None, dC=None):
    """One step of the prediction-form Riccati recursion with sensitivities.

    P_next = Q + A P A' - A P C' (R + C P C')^{-1} C P A'

    dP_next[j] follows by the product rule with d(S^{-1}) = -S^{-1} dS S^{-1},
    seeded with dA[j], dC[j] (zero when omitted) and the incoming dP[j].
    Both outputs are symmetrized; positive definiteness of P_next is
    enforced because downstream prior weighting inverts it.
    """
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    q = 0 if dP is None else np.asarray(dP).reshape(-1, n, n).shape[0]
    dP = np.zeros((q, n, n)) if dP is None else np.asarray(dP, dtype=float).reshape(q, n, n)
    dA = np.zeros((q,) + A.shape) if dA is None else np.asarray(dA, dtype=float)
    dC = np.zeros((q,) + C.shape) if dC is None else np.asarray(dC, dtype=float)

    asym = np.max(np.abs(P - P.T)) if n else 0.0
    if asym > _SYMMETRY_WARN_TOL:
        import logging

        logging.getLogger(__name__).warning(
            "Riccati input lost symmetry by %.3e; symmetrizing", asym
        )
    P = 0.5 * (P + P.T)

    S = R + C @ P @ C.T
    try:
        S_inv = np.linalg.inv(S)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance R + C P C' is singular") from exc
    M = A @ P @ C.T
    P_next = Q + A @ P @ A.T - M @ S_inv @ M.T
    P_next = 0.5 * (P_next + P_next.T)

    eigmin = np.linalg.eigvalsh(P_next).min()
    if eigmin <= 0.0:
        raise NumericalError(
            f"Riccati step lost positive definiteness (min eigenvalue {eigmin:.3e})"
        )

    dP_next = np.empty((q, n, n))
    for j in range(q):
        dS = dC[j] @ P @ C.T + C @ dP[j] @ C.T + C @ P @ dC[j].T
        dM = dA[j] @ P @ C.T + A @ dP[j] @ C.T + A @ P @ dC[j].T
        dGain = dM @ S_inv @ M.T + M @ S_inv @ dM.T - M @ S_inv @ dS @ S_inv @ M.T
        dPn = dA[j] @ P @ A.T + A @ dP[j] @ A.T + A @ P @ dA[j].T - dGain
        dP_next[j] = 0.5 * (dPn + dPn.T)
    return P_next, dP_next


def observability_margin(A: np.ndarray, C: np.ndarray) -> float:
    """Smallest-to-largest singular value ratio of the stacked observability matrix.

    A ratio below ~1e-8 indicates a numerically unobservable pair.
    """
    n = A.shape[0]
    blocks = [C]
    for _ in range(n - 1):
        blocks.append(blocks[-1] @ A)
    sv = np.linalg.svd(np.vstack(blocks), compute_uv=False)
    if len(sv) < n or sv[0] == 0.0:
        return 0.0
    return float(sv[n - 1] / sv[0])
