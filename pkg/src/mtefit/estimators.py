"""Conventional and efficient estimation of the basis-model coefficients.

Both estimators regress the outcome on the basis evaluated at plug-in
propensities. The conventional estimator is the plain least-squares solve of
the normal equations; the efficient one adds the derivative cross-moment to
the design matrix, which makes it the closed-form zero of the estimating
equation built from the coefficient influence function and thereby
first-order robust to propensity-estimation error.

Covariance conventions follow the influence-function calculus: the per
observation contribution is g - psi, where g is the least-squares moment
r * (y - r'gamma) and psi is the first-stage term r * (a - pi) * (dr'gamma),
the basis scaled by the treatment residual times the fitted effect-curve
level. The orientation of the derivative cross-moment (basis times residual
times derivative-basis transposed) is the one validated by finite-difference
perturbation of the estimand on discrete distributions; it is what makes the
closed form first-order insensitive to propensity error. Plain least-squares
standard errors, which ignore the first stage, are available behind a flag
for comparison output only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import MteModelSpec, build_dr_dp, build_r
from .numerics import solve, solve_flagged


@dataclass
class Dataset:
    """Observed sample: outcome, binary treatment, covariates, instrument."""

    y: np.ndarray
    a: np.ndarray
    x: np.ndarray
    z: np.ndarray
    x_discrete: tuple[bool, ...] = ()

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.a = np.asarray(self.a)
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if self.x.shape[0] == 1 and self.y.shape[0] > 1:
            self.x = self.x.T
        self.z = np.asarray(self.z, dtype=float)
        n = self.y.shape[0]
        if not (self.a.shape[0] == n and self.x.shape[0] == n and self.z.shape[0] == n):
            raise ValueError("y, a, x, z must have equal lengths")
        if not np.all(np.isin(self.a, (0, 1))):
            raise ValueError("treatment must be binary 0/1")
        for name, arr in (("y", self.y), ("x", self.x), ("z", self.z)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains missing or non-finite values")
        if not self.x_discrete:
            self.x_discrete = tuple(False for _ in range(self.x.shape[1]))
        if len(self.x_discrete) != self.x.shape[1]:
            raise ValueError("x_discrete must flag every covariate column")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def covariate_dim(self) -> int:
        return self.x.shape[1]

    def default_spec(self, poly_order: int = 1, interactions: bool = False) -> MteModelSpec:
        return MteModelSpec(poly_order, interactions, self.covariate_dim)


@dataclass
class GammaEstimate:
    """Coefficient vector with its influence-function covariance."""

    gamma: np.ndarray
    covariance: np.ndarray
    kind: str  # "conventional" | "efficient"
    spec: MteModelSpec
    pinv_fallback: bool = False
    naive_covariance: np.ndarray | None = None

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def _propensities(fit) -> np.ndarray:
    return np.asarray(fit.fitted if hasattr(fit, "fitted") else fit, dtype=float)


def moment_matrices(data: Dataset, pi: np.ndarray, spec: MteModelSpec):
    """Sample moments of the basis: (omega, gamma_mat, upsilon, r_mat, dr_mat).

    omega is the basis second moment E[r r'], gamma_mat the derivative
    cross-moment E[r (a - pi) dr'], upsilon the basis-outcome moment E[r y];
    all are plain means over observations.
    """
    r_mat = build_r(data.x, pi, spec)
    dr_mat = build_dr_dp(data.x, pi, spec)
    n = data.n
    omega = r_mat.T @ r_mat / n
    upsilon = r_mat.T @ data.y / n
    resid_a = np.asarray(data.a, dtype=float) - pi
    gamma_mat = (r_mat * resid_a[:, None]).T @ dr_mat / n
    return omega, gamma_mat, upsilon, r_mat, dr_mat


def _influence_pieces(data, pi, gamma, r_mat, dr_mat):
    """g and psi rows: least-squares moment and the first-stage term."""
    resid = data.y - r_mat @ gamma
    deriv_level = dr_mat @ gamma
    a_gap = np.asarray(data.a, dtype=float) - pi
    g = r_mat * resid[:, None]
    psi = r_mat * (a_gap * deriv_level)[:, None]
    return g, psi


def conventional_gamma(
    data: Dataset, fit, spec: MteModelSpec, include_naive: bool = False
) -> GammaEstimate:
    """Least-squares coefficients at plug-in propensities.

    Standard errors correct for first-stage propensity estimation through
    the influence-function sandwich; set ``include_naive`` to also carry the
    uncorrected least-squares covariance, for comparison output only.
    """
    pi = _propensities(fit)
    omega, _, upsilon, r_mat, dr_mat = moment_matrices(data, pi, spec)
    gamma, used_pinv = solve_flagged(omega, upsilon)
    g, psi = _influence_pieces(data, pi, gamma, r_mat, dr_mat)
    n = data.n
    corrected = g - psi
    phi_hat = corrected.T @ corrected / n
    bread = np.linalg.pinv(omega) if used_pinv else None
    if bread is None:
        inner = solve(omega, phi_hat)
        covariance = solve(omega, inner.T).T / n
    else:
        covariance = bread @ phi_hat @ bread.T / n
    covariance = 0.5 * (covariance + covariance.T)
    naive = None
    if include_naive:
        plain = g.T @ g / n
        inner = solve(omega, plain)
        naive = 0.5 / n * (solve(omega, inner.T).T + solve(omega, inner.T))
    return GammaEstimate(gamma, covariance, "conventional", spec, used_pinv, naive)


def efficient_gamma(data: Dataset, fit, spec: MteModelSpec) -> GammaEstimate:
    """Closed-form influence-function estimator of the coefficients.

    Solves (omega + gamma_mat) gamma = upsilon; its covariance is the sample
    variance of the coefficient influence function divided by n.
    """
    pi = _propensities(fit)
    omega, gamma_mat, upsilon, r_mat, dr_mat = moment_matrices(data, pi, spec)
    gamma, used_pinv = solve_flagged(omega + gamma_mat, upsilon)
    phi = eif_gamma(data.y, data.a, data.x, pi, gamma, spec, omega=omega)
    centered = phi - phi.mean(axis=0)
    covariance = centered.T @ centered / data.n**2
    covariance = 0.5 * (covariance + covariance.T)
    return GammaEstimate(gamma, covariance, "efficient", spec, used_pinv)


def eif_gamma(y, a, x, pi, gamma, spec: MteModelSpec, omega_inv=None, omega=None):
    """Influence function of the coefficient vector at given propensities.

    phi(o) = omega^{-1} r [ (y - r'gamma) - (a - pi) (dr'gamma) ]; finite
    difference perturbation of the estimand reproduces it (see the tests).
    Accepts stacked arrays and returns one row per observation (a single
    vector for scalar input). Supply either ``omega_inv`` or ``omega``.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    a = np.atleast_1d(np.asarray(a, dtype=float))
    pi = np.atleast_1d(np.asarray(pi, dtype=float))
    single = np.ndim(x) <= 1
    r_mat = np.atleast_2d(build_r(x, pi, spec))
    dr_mat = np.atleast_2d(build_dr_dp(x, pi, spec))
    rows = r_mat * (y - r_mat @ gamma - (a - pi) * (dr_mat @ gamma))[:, None]
    if omega_inv is not None:
        phi = rows @ np.asarray(omega_inv).T
    elif omega is not None:
        phi = solve(np.asarray(omega), rows.T).T
    else:
        raise ValueError("supply omega_inv or omega")
    return phi[0] if single else phi


def fsif_term(a, x, pi, gamma, spec: MteModelSpec):
    """First-stage term psi(o) = r (a - pi) (dr'gamma).

    This is the negative of the first-stage influence function of the
    least-squares moment, so the corrected moment rows are g - psi.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    pi = np.atleast_1d(np.asarray(pi, dtype=float))
    single = np.ndim(x) <= 1
    r_mat = np.atleast_2d(build_r(x, pi, spec))
    dr_mat = np.atleast_2d(build_dr_dp(x, pi, spec))
    rows = r_mat * ((a - pi) * (dr_mat @ gamma))[:, None]
    return rows[0] if single else rows
