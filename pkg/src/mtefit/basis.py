"""Regression basis in covariates and the treatment propensity.

The conditional-mean model is linear in a known basis built from the
covariate vector x and the propensity p: intercept, x, p, x*p, the higher
propensity powers p^2 ... p^(S+1), and optionally the interaction blocks
x*p^2 ... x*p^(S+1). Coefficient indices are stable across the polynomial
order S because higher powers and interaction blocks are appended after the
shared leading layout.

Index map for covariate dimension d, polynomial order S:

    0                intercept
    1 .. d           x
    1 + d            p
    2 + d .. 1 + 2d  x * p
    2 + 2d .. 1+2d+S p^2, ..., p^(S+1)
    then, if interactions: d columns per power, x*p^2, ..., x*p^(S+1)

Target-weight vectors (for the population, treated and untreated averages)
live in the same coordinate system, so treated + untreated weights add up to
the population weight exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MteModelSpec:
    """Shape of the outcome-mean basis: polynomial order, interactions, covariate dim."""

    poly_order: int = 1
    interactions: bool = False
    covariate_dim: int = 1

    def __post_init__(self):
        if self.poly_order < 1:
            raise ValueError("poly_order must be >= 1")
        if self.covariate_dim < 0:
            raise ValueError("covariate_dim must be >= 0")

    @property
    def basis_dim(self) -> int:
        d, s = self.covariate_dim, self.poly_order
        return 2 + 2 * d + s + (d * s if self.interactions else 0)


def basis_labels(spec: MteModelSpec) -> list[str]:
    """Column names matching the canonical index map."""
    d, s = spec.covariate_dim, spec.poly_order
    labels = ["const"]
    labels += [f"x{j + 1}" for j in range(d)]
    labels.append("p")
    labels += [f"p*x{j + 1}" for j in range(d)]
    labels += [f"p^{k}" for k in range(2, s + 2)]
    if spec.interactions:
        for k in range(2, s + 2):
            labels += [f"p^{k}*x{j + 1}" for j in range(d)]
    return labels


def _prepare(x, p, spec: MteModelSpec, check_p: bool = True):
    """Normalize shapes to (n, d) and (n,); remember whether input was a single row."""
    x = np.asarray(x, dtype=float)
    single_x = x.ndim <= 1
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        # A 1-D x is one observation's covariate vector.
        x = x.reshape(1, -1)
    if x.shape[1] != spec.covariate_dim:
        raise ValueError(
            f"covariate dimension mismatch: expected {spec.covariate_dim}, got {x.shape[1]}"
        )

    if p is None:
        return x, None, single_x

    p = np.asarray(p, dtype=float)
    single_p = p.ndim == 0
    p = np.atleast_1d(p)
    if check_p and (np.any(p < 0.0) or np.any(p > 1.0) or not np.all(np.isfinite(p))):
        raise ValueError("propensity out of range [0, 1]")
    if x.shape[0] == 1 and p.shape[0] > 1:
        x = np.broadcast_to(x, (p.shape[0], x.shape[1]))
    elif p.shape[0] == 1 and x.shape[0] > 1:
        p = np.broadcast_to(p, (x.shape[0],))
    elif x.shape[0] != p.shape[0]:
        raise ValueError("x and p must have matching lengths")
    return x, p, single_x and single_p


def _finish(out: np.ndarray, single: bool) -> np.ndarray:
    return out[0] if single else out


def build_r(x, p, spec: MteModelSpec) -> np.ndarray:
    """Basis vector r(x, p); accepts a single observation or stacked arrays."""
    x, p, single = _prepare(x, p, spec)
    pc = p[:, None]
    cols = [np.ones_like(pc), x, pc, x * pc]
    powers = [pc**k for k in range(2, spec.poly_order + 2)]
    cols += powers
    if spec.interactions:
        cols += [x * pw for pw in powers]
    return _finish(np.concatenate(cols, axis=1), single)


def build_dr_dp(x, p, spec: MteModelSpec) -> np.ndarray:
    """Elementwise derivative of ``build_r`` in the propensity argument.

    Leading entries (intercept and x block) are zero, which keeps the vector
    in the same coordinate system as r itself.
    """
    x, p, single = _prepare(x, p, spec)
    pc = p[:, None]
    n = pc.shape[0]
    cols = [np.zeros((n, 1)), np.zeros_like(x), np.ones((n, 1)), x * np.ones_like(pc)]
    dpowers = [k * pc ** (k - 1) for k in range(2, spec.poly_order + 2)]
    cols += dpowers
    if spec.interactions:
        cols += [x * dp for dp in dpowers]
    return _finish(np.concatenate(cols, axis=1), single)


def build_r_ate(x, spec: MteModelSpec) -> np.ndarray:
    """Population-average weight vector: propensity-free, so only x enters."""
    x, _, single = _prepare(x, None, spec)
    n, d = x.shape
    s = spec.poly_order
    cols = [np.zeros((n, 1)), np.zeros((n, d)), np.ones((n, 1)), x, np.ones((n, s))]
    if spec.interactions:
        cols += [x] * s
    return _finish(np.concatenate(cols, axis=1), single)


def build_r_att(x, p, spec: MteModelSpec) -> np.ndarray:
    """Treated-average weight vector; vanishes at p = 0, equals the ATE weight at p = 1."""
    x, p, single = _prepare(x, p, spec)
    pc = p[:, None]
    n, d = x.shape
    cols = [np.zeros((n, 1)), np.zeros((n, d)), pc, x * pc]
    powers = [pc**k for k in range(2, spec.poly_order + 2)]
    cols += powers
    if spec.interactions:
        cols += [x * pw for pw in powers]
    return _finish(np.concatenate(cols, axis=1), single)


def build_r_atu(x, p, spec: MteModelSpec) -> np.ndarray:
    """Untreated-average weight vector: the exact complement of the treated one."""
    x_arr, p_arr, single = _prepare(x, p, spec)
    out = build_r_ate(x_arr, spec) - build_r_att(x_arr, p_arr, spec)
    return _finish(np.atleast_2d(out), single)


def build_dr_att_dp(x, p, spec: MteModelSpec) -> np.ndarray:
    """Propensity derivative of the treated weight (equals that of r itself)."""
    return build_dr_dp(x, p, spec)


def build_dr_atu_dp(x, p, spec: MteModelSpec) -> np.ndarray:
    """Propensity derivative of the untreated weight."""
    return -build_dr_dp(x, p, spec)
