"""Target estimands as weighted averages of the fitted coefficients.

Point estimates for the average effect (overall, on the treated, on the
untreated), the selection-on-gains contrast, and the instrumental-variable
estimand are inner products weight'gamma_hat, where gamma_hat is always the
conventional least-squares coefficient vector. Conventional weights are the
plug-in sample averages of the corresponding basis weight vectors; efficient
weights add the derivative cross-moment corrections, which makes the
resulting estimates first-order insensitive to propensity-estimation error.

Standard errors come from each estimand's influence function evaluated at
plug-in quantities; by construction the influence function of an estimand
averages to zero at its own efficient estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import (
    MteModelSpec,
    build_dr_dp,
    build_r,
    build_r_ate,
    build_r_att,
    build_r_atu,
)
from .estimators import Dataset, GammaEstimate, moment_matrices, _influence_pieces
from .numerics import PINV_CUTOFF, solve

CI_MULTIPLIER = 1.959964

ESTIMAND_KINDS = ("ATE", "ATT", "ATU", "ASG", "IV")
METHODS = ("conventional", "efficient")


@dataclass
class TargetEstimate:
    """One estimand: point value, influence-function SE, 95% interval."""

    kind: str
    point: float
    se: float
    ci_lower: float
    ci_upper: float
    method: str

    @classmethod
    def from_point_se(cls, kind, point, se, method):
        half = CI_MULTIPLIER * se
        return cls(kind, float(point), float(se), float(point - half), float(point + half), method)


@dataclass
class MteCurve:
    """Treatment-effect curve over the latent-resistance grid, with bands."""

    v_grid: np.ndarray
    estimate: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray


def _check_kind(kind: str, allowed=("ATE", "ATT", "ATU", "ASG")):
    if kind not in allowed:
        raise ValueError(f"unknown estimand kind {kind!r}; expected one of {allowed}")


def _check_method(method: str):
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def _group_share(data: Dataset, kind: str) -> float:
    """Treated share, rejecting estimands whose conditioning group is empty."""
    share = float(np.mean(data.a))
    if share == 0.0 and kind in ("ATT", "ASG"):
        raise ValueError("undefined conditional estimand: no treated observations")
    if share == 1.0 and kind in ("ATU", "ASG"):
        raise ValueError("undefined conditional estimand: no untreated observations")
    return share


def conventional_weight(kind: str, data: Dataset, fit, spec: MteModelSpec) -> np.ndarray:
    """Plug-in weight vector for one estimand."""
    _check_kind(kind)
    pi = np.asarray(fit.fitted, dtype=float)
    if kind == "ATE":
        return build_r_ate(data.x, spec).mean(axis=0)
    share = _group_share(data, kind)
    if kind == "ATT":
        return build_r_att(data.x, pi, spec).mean(axis=0) / share
    if kind == "ATU":
        return build_r_atu(data.x, pi, spec).mean(axis=0) / (1.0 - share)
    return conventional_weight("ATT", data, fit, spec) - conventional_weight(
        "ATU", data, fit, spec
    )


def efficient_weight(
    kind: str, data: Dataset, fit, spec: MteModelSpec, omega_inv, gamma_mat
) -> np.ndarray:
    """Corrected weight vector for one estimand.

    The correction subtracts weight'omega^{-1}gamma_mat and, for the treated
    and untreated averages, adds the mean derivative-times-treatment-residual
    term scaled by the group share.
    """
    _check_kind(kind)
    if kind == "ASG":
        return efficient_weight("ATT", data, fit, spec, omega_inv, gamma_mat) - efficient_weight(
            "ATU", data, fit, spec, omega_inv, gamma_mat
        )
    pi = np.asarray(fit.fitted, dtype=float)
    base = conventional_weight(kind, data, fit, spec)
    corrected = base - np.asarray(gamma_mat).T @ (np.asarray(omega_inv) @ base)
    if kind == "ATE":
        return corrected
    a_gap = np.asarray(data.a, dtype=float) - pi
    deriv_mean = (build_dr_dp(data.x, pi, spec) * a_gap[:, None]).mean(axis=0)
    share = _group_share(data, kind)
    if kind == "ATT":
        return corrected + deriv_mean / share
    return corrected - deriv_mean / (1.0 - share)


def _correction_rows(data, pi, gamma, omega, r_mat, dr_mat):
    """Per-observation coefficient-influence rows contracted later with weights."""
    g, psi = _influence_pieces(data, pi, gamma, r_mat, dr_mat)
    return solve(omega, (g - psi).T).T


def _target_eif(kind, data, fit, spec, gamma, theta, moments):
    """Influence-function rows of one estimand at plug-in quantities."""
    omega, gamma_mat, _, r_mat, dr_mat = moments
    pi = np.asarray(fit.fitted, dtype=float)
    a = np.asarray(data.a, dtype=float)
    phi_rows = _correction_rows(data, pi, gamma, omega, r_mat, dr_mat)

    if kind == "ATE":
        r_ate = build_r_ate(data.x, spec)
        w = r_ate.mean(axis=0)
        return r_ate @ gamma - theta + phi_rows @ w

    if kind in ("ATT", "ATU"):
        share = _group_share(data, kind)
        if kind == "ATT":
            group = a
            inv_share = 1.0 / share
            r_t = build_r_att(data.x, pi, spec)
            deriv_sign = 1.0
        else:
            group = 1.0 - a
            inv_share = 1.0 / (1.0 - share)
            r_t = build_r_atu(data.x, pi, spec)
            deriv_sign = -1.0
        w = r_t.mean(axis=0)
        deriv_rows = deriv_sign * dr_mat * (a - pi)[:, None]
        return (
            -theta * inv_share * group
            + inv_share * (r_t @ gamma)
            + inv_share * (deriv_rows @ gamma)
            + inv_share * (phi_rows @ w)
        )

    if kind == "IV":
        z_gap = data.z - data.z.mean()
        a_bar = a.mean()
        cov_az = float(np.mean((a - a_bar) * z_gap))
        mean_rz = (r_mat * z_gap[:, None]).mean(axis=0)
        mean_r = r_mat.mean(axis=0)
        return (
            (r_mat * z_gap[:, None]) @ gamma
            + (dr_mat * ((a - pi) * z_gap)[:, None]) @ gamma
            - z_gap * (mean_r @ gamma)
            + phi_rows @ mean_rz
            - (a - a_bar) * z_gap * theta
        ) / cov_az

    raise ValueError(f"unknown estimand kind {kind!r}")


def estimate_target(
    kind: str,
    data: Dataset,
    fit,
    spec: MteModelSpec,
    gamma_hat: GammaEstimate | np.ndarray,
    method: str = "efficient",
) -> TargetEstimate:
    """Point estimate, SE and 95% CI for one estimand.

    ``gamma_hat`` is the conventional least-squares coefficient estimate;
    both weighting methods multiply it, per the estimator construction.
    """
    _check_kind(kind)
    _check_method(method)
    gamma = gamma_hat.gamma if isinstance(gamma_hat, GammaEstimate) else np.asarray(gamma_hat)
    pi = np.asarray(fit.fitted, dtype=float)
    moments = moment_matrices(data, pi, spec)
    omega, gamma_mat = moments[0], moments[1]

    if kind == "ASG":
        # The contrast is literally the difference, so the identity
        # ASG = ATT - ATU holds exactly, point and influence rows alike.
        sub = {
            k: estimate_target(k, data, fit, spec, gamma_hat, method) for k in ("ATT", "ATU")
        }
        point = sub["ATT"].point - sub["ATU"].point
        rows = _target_eif("ATT", data, fit, spec, gamma, sub["ATT"].point, moments) - _target_eif(
            "ATU", data, fit, spec, gamma, sub["ATU"].point, moments
        )
    else:
        if method == "conventional":
            weight = conventional_weight(kind, data, fit, spec)
        else:
            omega_inv = np.linalg.pinv(omega, rcond=PINV_CUTOFF)
            weight = efficient_weight(kind, data, fit, spec, omega_inv, gamma_mat)
        point = float(weight @ gamma)
        rows = _target_eif(kind, data, fit, spec, gamma, point, moments)
    se = float(np.sqrt(rows.var() / data.n))
    if not np.isfinite(se):
        raise ValueError(f"degenerate weights: no finite standard error for {kind}")
    return TargetEstimate.from_point_se(kind, point, se, method)


def estimate_iv(
    data: Dataset,
    fit,
    spec: MteModelSpec,
    gamma_hat: GammaEstimate | np.ndarray,
    method: str = "efficient",
) -> TargetEstimate:
    """Instrumental-variable estimand from the fitted coefficients.

    The efficient version adds the derivative-residual term and subtracts
    the cross-moment correction; the conventional one is the plain plug-in
    ratio. Raises for an irrelevant instrument (zero covariance with
    treatment).
    """
    _check_method(method)
    gamma = gamma_hat.gamma if isinstance(gamma_hat, GammaEstimate) else np.asarray(gamma_hat)
    pi = np.asarray(fit.fitted, dtype=float)
    a = np.asarray(data.a, dtype=float)
    z_gap = data.z - data.z.mean()
    cov_az = float(np.mean((a - a.mean()) * z_gap))
    if abs(cov_az) < 1e-12:
        raise ValueError("irrelevant instrument: cov(A, Z) is numerically zero")

    moments = moment_matrices(data, pi, spec)
    omega, gamma_mat, _, r_mat, dr_mat = moments
    mean_rz = (r_mat * z_gap[:, None]).mean(axis=0)
    point = float(mean_rz @ gamma) / cov_az
    if method == "efficient":
        deriv = (dr_mat * ((a - pi) * z_gap)[:, None]).mean(axis=0)
        correction = gamma_mat.T @ solve(omega, mean_rz)
        point += float((deriv - correction) @ gamma) / cov_az

    rows = _target_eif("IV", data, fit, spec, gamma, point, moments)
    se = float(np.sqrt(rows.var() / data.n))
    return TargetEstimate.from_point_se("IV", point, se, method)


def mte_curve(
    gamma_est: GammaEstimate,
    data: Dataset,
    fit,
    spec: MteModelSpec,
    grid,
    covariate_mask=None,
) -> MteCurve:
    """Treatment-effect curve averaged over the sample covariates.

    Each grid point evaluates mean_i dr(x_i, v)'gamma with a delta-method
    band from the coefficient covariance. The grid must lie inside the
    observed propensity support. ``covariate_mask`` restricts the averaging
    to a subgroup.
    """
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    pi = np.asarray(fit.fitted, dtype=float)
    lo, hi = float(pi.min()), float(pi.max())
    if np.any(grid < lo) or np.any(grid > hi):
        raise ValueError(
            f"no common support: grid outside observed propensity range [{lo:.4g}, {hi:.4g}]"
        )
    x = data.x if covariate_mask is None else data.x[np.asarray(covariate_mask)]
    if x.shape[0] == 0:
        raise ValueError("covariate mask selects no observations")

    estimates = np.empty(grid.shape)
    ses = np.empty(grid.shape)
    for i, v in enumerate(grid):
        w = build_dr_dp(x, np.full(x.shape[0], v), spec).mean(axis=0)
        estimates[i] = w @ gamma_est.gamma
        ses[i] = np.sqrt(max(float(w @ gamma_est.covariance @ w), 0.0))
    half = CI_MULTIPLIER * ses
    return MteCurve(grid, estimates, estimates - half, estimates + half)


def observational_association(data: Dataset) -> float:
    """Raw difference of outcome means between treated and untreated."""
    a = np.asarray(data.a, dtype=bool)
    if not a.any() or a.all():
        raise ValueError("empty treatment group: association undefined")
    return float(data.y[a].mean() - data.y[~a].mean())
