"""Parameterized LTI plant model: matrix families, constraint sets, noise.

The uncertain parameter theta enters the system matrices through affine
families M(theta) = M0 + sum_j theta_j Mj, which keeps every sensitivity
exact (dM/dtheta_j = Mj). Constraint sets are polytopes H x <= h; noise
and initial-state distributions are Gaussians truncated to a polytope and
sampled by rejection.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, SamplingError
from .linalg import observability_margin

__all__ = [
    "ParamBox",
    "AffineMatrixFamily",
    "Polytope",
    "TruncatedGaussian",
    "LtiModel",
    "load_model",
]

logger = logging.getLogger(__name__)

OBSERVABILITY_RTOL = 1e-8
REJECTION_CAP = 10_000

# Observability warnings fire once per model name to avoid flooding runs
# that rebuild estimators every rollout.
_warned_unobservable: set = set()


@dataclass(frozen=True)
class ParamBox:
    """Compact box of admissible parameter vectors, used by projected SGD."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape:
            raise ConfigError("parameter box bounds must have equal length")
        if not np.all(lower <= upper):
            raise ConfigError("parameter box must satisfy lower <= upper")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def q(self) -> int:
        return self.lower.shape[0]

    def project(self, theta: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(theta, dtype=float), self.lower, self.upper)

    def contains(self, theta: np.ndarray, tol: float = 0.0) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower - tol) and np.all(theta <= self.upper + tol))


@dataclass(frozen=True)
class AffineMatrixFamily:
    """Matrix-valued affine map theta -> base + sum_j theta_j coeffs[j].

    ``coeffs`` may be empty for a constant family; then the derivative with
    respect to every parameter is zero.
    """

    base: np.ndarray
    coeffs: tuple = ()

    def __post_init__(self):
        base = np.asarray(self.base, dtype=float)
        coeffs = tuple(np.asarray(c, dtype=float) for c in self.coeffs)
        for c in coeffs:
            if c.shape != base.shape:
                raise ConfigError(
                    f"family coefficient shape {c.shape} != base shape {base.shape}"
                )
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def shape(self):
        return self.base.shape

    def eval(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if self.coeffs and len(theta) != len(self.coeffs):
            raise ConfigError(
                f"parameter length {len(theta)} != family coefficient count {len(self.coeffs)}"
            )
        M = self.base.copy()
        for t, c in zip(theta, self.coeffs):
            M += t * c
        return M

    def deriv(self, j: int, q: int) -> np.ndarray:
        """d eval / d theta_j; exact because the map is affine."""
        if self.coeffs:
            return self.coeffs[j]
        if not 0 <= j < q:
            raise ConfigError(f"parameter index {j} out of range for q={q}")
        return np.zeros_like(self.base)

    def derivs(self, q: int) -> np.ndarray:
        return np.stack([self.deriv(j, q) for j in range(q)]) if q else np.zeros((0,) + self.shape)


@dataclass(frozen=True)
class Polytope:
    """Half-space set {x | H x <= h}. Zero rows represent the whole space."""

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        h = np.atleast_1d(np.asarray(self.h, dtype=float))
        if H.size == 0:
            H = H.reshape(0, H.shape[1] if H.ndim == 2 else 0)
            h = h.reshape(0)
        if H.shape[0] != h.shape[0]:
            raise ConfigError(f"polytope has {H.shape[0]} rows but {h.shape[0]} offsets")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)

    @classmethod
    def unconstrained(cls, dim: int) -> "Polytope":
        return cls(np.zeros((0, dim)), np.zeros(0))

    @classmethod
    def box(cls, lower, upper) -> "Polytope":
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        dim = lower.shape[0]
        eye = np.eye(dim)
        return cls(np.vstack([eye, -eye]), np.concatenate([upper, -lower]))

    @property
    def n_rows(self) -> int:
        return self.H.shape[0]

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    def contains(self, x, tol: float = 0.0) -> bool:
        if self.n_rows == 0:
            return True
        return bool(np.all(self.H @ np.asarray(x, dtype=float) <= self.h + tol))


@dataclass(frozen=True)
class TruncatedGaussian:
    """Gaussian N(mean, cov) restricted to a polytope support.

    Sampling is exact rejection: draw from the untruncated Gaussian and
    accept if inside the support. The normalization constant is never
    needed.
    """

    mean: np.ndarray
    cov: np.ndarray
    support: Polytope

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ConfigError("covariance shape does not match mean length")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ConfigError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0.0:
            raise ConfigError("covariance must be positive definite")
        if self.support.n_rows and self.support.dim != mean.shape[0]:
            raise ConfigError("support dimension does not match mean length")
        if not self.support.contains(mean):
            raise ConfigError("support must contain the mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", np.linalg.cholesky(cov))

    def sample(self, rng: np.random.Generator, max_draws: int = REJECTION_CAP) -> np.ndarray:
        chol = getattr(self, "_chol")
        for _ in range(max_draws):
            x = self.mean + chol @ rng.standard_normal(self.mean.shape[0])
            if self.support.contains(x):
                return x
        raise SamplingError(
            f"rejection sampling exceeded {max_draws} draws for truncated Gaussian "
            f"(mean {self.mean}, support rows {self.support.n_rows}); "
            "support and covariance are likely mismatched"
        )


@dataclass(frozen=True)
class LtiModel:
    """Discrete-time LTI plant with parameter-dependent A, B, C.

    x(k+1) = A(theta) x(k) + B(theta) u(k) + w(k),  w ~ N_W(0, Q)
    y(k)   = C(theta) x(k) + v(k),                  v ~ N_V(0, R)

    with polytopic state constraints X and initial state drawn from the
    truncated Gaussian ``x0_prior``.
    """

    A_fam: AffineMatrixFamily
    B_fam: AffineMatrixFamily
    C_fam: AffineMatrixFamily
    Q: np.ndarray
    R: np.ndarray
    x0_prior: TruncatedGaussian
    W: Polytope
    V: Polytope
    X: Polytope
    q: int
    theta_box: ParamBox | None = None
    name: str = "model"
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = self.A_fam.shape[0]
        m = self.B_fam.shape[1]
        p = self.C_fam.shape[0]
        checks = [
            (self.A_fam.shape, (n, n), "A"),
            (self.B_fam.shape, (n, m), "B"),
            (self.C_fam.shape, (p, n), "C"),
            (np.asarray(self.Q).shape, (n, n), "Q"),
            (np.asarray(self.R).shape, (p, p), "R"),
        ]
        for got, want, label in checks:
            if got != want:
                raise ConfigError(f"{label} has shape {got}, expected {want}")
        for fam, label in ((self.A_fam, "A"), (self.B_fam, "B"), (self.C_fam, "C")):
            if fam.coeffs and len(fam.coeffs) != self.q:
                raise ConfigError(f"{label} family has {len(fam.coeffs)} coefficients, q={self.q}")
        for poly, dim, label in ((self.W, n, "W"), (self.V, p, "V"), (self.X, n, "X")):
            if poly.n_rows and poly.dim != dim:
                raise ConfigError(f"{label} polytope dimension {poly.dim}, expected {dim}")
        if self.x0_prior.mean.shape[0] != n:
            raise ConfigError("initial-state prior dimension does not match n")
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        theta0 = np.asarray(self.extras.get("theta_init", np.zeros(self.q)), dtype=float)
        self.check_observability(theta0)

    @property
    def n(self) -> int:
        return self.A_fam.shape[0]

    @property
    def m(self) -> int:
        return self.B_fam.shape[1]

    @property
    def p(self) -> int:
        return self.C_fam.shape[0]

    def matrices(self, theta):
        """A, B, C evaluated at theta."""
        return self.A_fam.eval(theta), self.B_fam.eval(theta), self.C_fam.eval(theta)

    def matrix_derivs(self):
        """Stacked dA, dB, dC over all q parameters."""
        return (
            self.A_fam.derivs(self.q),
            self.B_fam.derivs(self.q),
            self.C_fam.derivs(self.q),
        )

    def check_observability(self, theta, warn: bool = True) -> bool:
        """Numerical observability of (C(theta), A(theta)).

        Returns True when the observability matrix has full rank within the
        singular-value threshold. Failure only warns: a parameter estimate
        wandering through a degenerate point mid-learning is survivable.
        """
        margin = observability_margin(self.A_fam.eval(theta), self.C_fam.eval(theta))
        ok = margin > OBSERVABILITY_RTOL
        if not ok and warn and self.name not in _warned_unobservable:
            _warned_unobservable.add(self.name)
            logger.warning(
                "model '%s' is numerically unobservable at theta=%s "
                "(singular value ratio %.2e)",
                self.name,
                np.asarray(theta).tolist(),
                margin,
            )
        return ok


def _as_matrix(obj, label: str) -> np.ndarray:
    try:
        M = np.array(obj, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot parse matrix literal for {label}") from exc
    if M.ndim != 2:
        raise ConfigError(f"{label} must be a 2-d row-major array, got ndim={M.ndim}")
    return M


def _family_from_json(block, label: str) -> AffineMatrixFamily:
    if "base" not in block:
        raise ConfigError(f"family {label} is missing its 'base' matrix")
    base = _as_matrix(block["base"], f"{label}.base")
    coeffs = tuple(_as_matrix(c, f"{label}.coeffs") for c in block.get("coeffs", []))
    return AffineMatrixFamily(base, coeffs)


def _polytope_from_json(block, dim: int, label: str) -> Polytope:
    if block is None:
        return Polytope.unconstrained(dim)
    H = np.array(block.get("H", []), dtype=float)
    h = np.array(block.get("h", []), dtype=float)
    if H.size == 0:
        return Polytope.unconstrained(dim)
    return Polytope(_as_matrix(H, f"{label}.H"), h)


def load_model(path) -> LtiModel:
    """Build an LtiModel from a JSON document.

    The document declares dimensions, the affine families for A, B, C as
    dense row-major matrix literals, noise covariances, the polytopes W, V,
    X, and an initial-state block {mean, cov, support}. Extra sections
    (simulation / estimator / learner defaults) are kept in ``extras`` for
    the CLI.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read model file {path}: {exc}") from exc

    try:
        dims = doc["dims"]
        n, m, p, q = (int(dims[k]) for k in ("n", "m", "p", "q"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("model file must declare dims {n, m, p, q}") from exc

    A_fam = _family_from_json(doc["A"], "A")
    B_fam = _family_from_json(doc["B"], "B")
    C_fam = _family_from_json(doc["C"], "C")
    Q = _as_matrix(doc["Q"], "Q")
    R = _as_matrix(doc["R"], "R")

    x0 = doc["x0"]
    x0_prior = TruncatedGaussian(
        mean=np.array(x0["mean"], dtype=float),
        cov=_as_matrix(x0["cov"], "x0.cov"),
        support=_polytope_from_json(x0.get("support"), n, "x0.support"),
    )

    theta_box = None
    if "theta_box" in doc:
        theta_box = ParamBox(
            np.array(doc["theta_box"]["lower"], dtype=float),
            np.array(doc["theta_box"]["upper"], dtype=float),
        )

    extras = {
        key: doc[key]
        for key in ("simulation", "mhe", "learner", "theta_true", "theta_init")
        if key in doc
    }

    model = LtiModel(
        A_fam=A_fam,
        B_fam=B_fam,
        C_fam=C_fam,
        Q=Q,
        R=R,
        x0_prior=x0_prior,
        W=_polytope_from_json(doc.get("W"), n, "W"),
        V=_polytope_from_json(doc.get("V"), p, "V"),
        X=_polytope_from_json(doc.get("X"), n, "X"),
        q=q,
        theta_box=theta_box,
        name=doc.get("name", path.stem),
        extras=extras,
    )
    if (model.n, model.m, model.p) != (n, m, p):
        raise ConfigError(
            f"declared dims (n={n}, m={m}, p={p}) do not match matrix shapes "
            f"(n={model.n}, m={model.m}, p={model.p})"
        )
    return model
