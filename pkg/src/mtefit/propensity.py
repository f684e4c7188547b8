"""Nonparametric propensity scores by mixed-kernel Nadaraya-Watson regression.

The treatment indicator is regressed on the covariates and the instrument
with a product kernel: Gaussian on continuous regressors, Aitchison-Aitken
on discrete ones. Bandwidths are chosen in scale-factor form so they carry
across sample sizes: least-squares cross-validation (on leave-one-out
predictions) is run on a handful of random subsamples, the resulting
dimensionless constants are averaged, and the full-sample bandwidths are
obtained by the usual rate n^(-1/(4+q)) for continuous regressors and
n^(-2/(4+q)) for discrete ones, q being the number of continuous regressors.

Fitted values at the training points include the own observation (the
leave-one-out device is confined to the cross-validation criterion), so with
a purely discrete design and zero smoothing the fit reproduces cell means
exactly, and predicting at a training point reproduces its fitted value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.optimize import minimize

from .numerics import SeededRng

_GAUSSIAN = "gaussian"
_AITCHISON_AITKEN = "aitchison_aitken"

# Search box for the continuous scale factor during cross-validation. Once
# the kernel spans the data range the LSCV landscape turns into a flat
# plateau with no interior minimum; a subsample whose optimum reaches the top
# grid point is treated as uninformative and falls back to the reference
# constant, because a near-constant fit would make the downstream basis
# moments numerically rank deficient.
_SF_GRID = (0.25, 0.6, 1.4, 3.2, 7.5)
_LOG_SF_BOUNDS = (np.log(0.05), np.log(20.0))
_NM_MAXFEV = 36
_SF_FLAT_THRESHOLD = _SF_GRID[-1]
_SF_REFERENCE = 1.06


@dataclass(frozen=True)
class KernelConfig:
    """Kernel families, CV subsampling plan, bandwidth floor and clamp."""

    continuous_kernel: str = _GAUSSIAN
    discrete_kernel: str = _AITCHISON_AITKEN
    cv_subsample_size: int = 1000
    cv_subsample_count: int = 3
    bandwidth_floor: float = 0.005
    clamp: float = 1e-3

    def __post_init__(self):
        if self.continuous_kernel != _GAUSSIAN:
            raise ValueError(f"unsupported continuous kernel: {self.continuous_kernel}")
        if self.discrete_kernel != _AITCHISON_AITKEN:
            raise ValueError(f"unsupported discrete kernel: {self.discrete_kernel}")
        if not 0.0 < self.clamp < 0.5:
            raise ValueError("clamp must lie strictly between 0 and 0.5")
        if self.cv_subsample_size < 2 or self.cv_subsample_count < 1:
            raise ValueError("cross-validation plan must be non-degenerate")


@dataclass
class PropensityFit:
    """Fitted propensities plus the bandwidth metadata needed to predict.

    ``constants`` are the dimensionless scale factors (one per regressor, in
    the order covariate columns then instrument); ``bandwidths`` are the
    full-sample values actually used: h for continuous regressors, lambda
    for discrete ones.
    """

    fitted: np.ndarray
    bandwidths: np.ndarray
    constants: np.ndarray
    regressor_discrete: tuple[bool, ...]
    category_counts: np.ndarray
    config: KernelConfig = field(default_factory=KernelConfig)


def _regressor_arrays(data):
    """Split (covariates, instrument) into continuous and discrete blocks."""
    flags = list(data.x_discrete) + [False]  # instrument is continuous
    columns = [data.x[:, j] for j in range(data.x.shape[1])] + [data.z]
    cont = [c for c, f in zip(columns, flags) if not f]
    disc = [c for c, f in zip(columns, flags) if f]
    c_mat = np.column_stack(cont) if cont else np.empty((data.n, 0))
    d_mat = (
        np.column_stack([d.astype(np.int64) for d in disc])
        if disc
        else np.empty((data.n, 0), dtype=np.int64)
    )
    return c_mat, d_mat, np.array(flags, dtype=bool)


@njit(cache=True, fastmath=True)
def _nw_kernel_regression(c_train, d_train, y_train, h, lam, n_cat, c_query, d_query, loo):
    """Product-kernel NW predictions; ``loo`` drops the matching index pair."""
    n_query = c_query.shape[0]
    n_train = c_train.shape[0]
    qc = c_train.shape[1]
    qd = d_train.shape[1]
    y_mean = 0.0
    for j in range(n_train):
        y_mean += y_train[j]
    y_mean /= n_train
    out = np.empty(n_query)
    for i in range(n_query):
        num = 0.0
        den = 0.0
        for j in range(n_train):
            if loo and j == i:
                continue
            w = 1.0
            for q in range(qc):
                u = (c_query[i, q] - c_train[j, q]) / h[q]
                w *= np.exp(-0.5 * u * u)
            for q in range(qd):
                if d_query[i, q] == d_train[j, q]:
                    w *= 1.0 - lam[q]
                else:
                    w *= lam[q] / (n_cat[q] - 1.0)
            num += w * y_train[j]
            den += w
        out[i] = num / den if den > 0.0 else y_mean
    return out


@njit(cache=True, fastmath=True)
def _loo_cv_sse(c_train, d_train, y_train, h, lam, n_cat):
    """Mean squared leave-one-out prediction error, the LSCV criterion."""
    pred = _nw_kernel_regression(
        c_train, d_train, y_train, h, lam, n_cat, c_train, d_train, True
    )
    n = y_train.shape[0]
    sse = 0.0
    for i in range(n):
        e = y_train[i] - pred[i]
        sse += e * e
    return sse / n


def _rate_exponents(q_continuous: int) -> tuple[float, float]:
    q = max(q_continuous, 1)
    return -1.0 / (4.0 + q), -2.0 / (4.0 + q)


def _scaled_bandwidths(constants, sigma, n, n_cat, flags):
    """Turn scale factors into usable bandwidths at sample size n."""
    rate_h, rate_l = _rate_exponents(int(np.sum(~flags)))
    bw = np.empty(len(constants))
    ci = 0
    di = 0
    for j, disc in enumerate(flags):
        if disc:
            lam_max = (n_cat[di] - 1.0) / n_cat[di]
            bw[j] = min(max(constants[j] * n**rate_l, 0.0), lam_max)
            di += 1
        else:
            bw[j] = max(constants[j] * sigma[ci] * n**rate_h, 1e-12)
            ci += 1
    return bw


def _split_by_flag(values, flags):
    cont = np.array([v for v, f in zip(values, flags) if not f])
    disc = np.array([v for v, f in zip(values, flags) if f])
    return cont, disc


def _interleave(cont, disc, flags):
    out = np.empty(len(flags))
    ci = di = 0
    for j, f in enumerate(flags):
        if f:
            out[j] = disc[di]
            di += 1
        else:
            out[j] = cont[ci]
            ci += 1
    return out


def _cv_constants(c_sub, d_sub, a_sub, n_cat, flags):
    """LSCV over (continuous scale factors, discrete lambdas) on one subsample.

    Coarse coordinate sweep from a neutral start, then a bounded Nelder-Mead
    polish. Returns scale factors in regressor order.
    """
    m = len(a_sub)
    qc = c_sub.shape[1]
    qd = d_sub.shape[1]
    rate_h, rate_l = _rate_exponents(qc)
    sigma = c_sub.std(axis=0)
    sigma = np.where(sigma > 0, sigma, 1.0)
    h_unit = m**rate_h
    lam_unit = m**rate_l
    lam_caps = (n_cat - 1.0) / n_cat if qd else np.empty(0)

    def objective(params):
        sf = np.exp(params[:qc])
        lam = np.clip(params[qc:], 0.0, lam_caps) if qd else np.empty(0)
        h = np.maximum(sf * sigma * h_unit, 1e-12)
        return _loo_cv_sse(c_sub, d_sub, a_sub, h, lam, n_cat.astype(float))

    params = np.concatenate([np.zeros(qc), np.full(qd, 0.1)])
    best = objective(params)
    for axis in range(qc + qd):
        grid = (
            np.log(np.array(_SF_GRID))
            if axis < qc
            else np.linspace(0.0, lam_caps[axis - qc], 5)
        )
        for value in grid:
            trial = params.copy()
            trial[axis] = value
            score = objective(trial)
            if score < best:
                best = score
                params = trial

    bounds = [(_LOG_SF_BOUNDS[0], _LOG_SF_BOUNDS[1])] * qc + [
        (0.0, lam_caps[j]) for j in range(qd)
    ]
    result = minimize(
        objective,
        params,
        method="Nelder-Mead",
        bounds=bounds,
        options={"maxfev": _NM_MAXFEV, "xatol": 2e-3, "fatol": 1e-10},
    )
    # strict improvement only: on a flat plateau, stay at the grid point
    params = result.x if result.fun < best else params

    sf_cont = np.exp(params[:qc])
    sf_cont = np.where(sf_cont >= _SF_FLAT_THRESHOLD, _SF_REFERENCE, sf_cont)
    lam = np.clip(params[qc:], 0.0, lam_caps) if qd else np.empty(0)
    sf_disc = lam / lam_unit
    return _interleave(sf_cont, sf_disc, flags)


def fit_propensity(
    data,
    config: KernelConfig | None = None,
    rng: SeededRng | None = None,
    constants: np.ndarray | None = None,
) -> PropensityFit:
    """Fit P(A=1 | covariates, instrument) by product-kernel regression.

    Bandwidth constants come from averaged subsample cross-validation unless
    ``constants`` overrides them (used by the bandwidth sweep and by tests).
    Fitted values are clamped to [clamp, 1-clamp].

    Raises:
        ValueError: for non-binary treatment, an all-treated or all-untreated
            sample ("degenerate treatment"), or fewer than 50 observations.
    """
    config = config or KernelConfig()
    n = data.n
    if n < 50:
        raise ValueError(f"need at least 50 observations to fit, got {n}")
    a = np.asarray(data.a, dtype=float)
    if not np.all(np.isin(a, (0.0, 1.0))):
        raise ValueError("treatment must be binary 0/1")
    if a.min() == a.max():
        raise ValueError("degenerate treatment: all observations share one arm")

    c_mat, d_mat, flags = _regressor_arrays(data)
    n_cat = (
        np.array([len(np.unique(d_mat[:, j])) for j in range(d_mat.shape[1])])
        if d_mat.shape[1]
        else np.empty(0)
    )
    n_cat = np.maximum(n_cat, 2)

    if constants is None:
        if rng is None:
            raise ValueError("rng is required when bandwidth constants come from CV")
        m = min(config.cv_subsample_size, n)
        draws = []
        for _ in range(config.cv_subsample_count):
            idx = rng.generator.choice(n, size=m, replace=False)
            rng.position += m
            draws.append(
                _cv_constants(
                    np.ascontiguousarray(c_mat[idx]),
                    np.ascontiguousarray(d_mat[idx]),
                    a[idx],
                    n_cat,
                    flags,
                )
            )
        constants = np.mean(draws, axis=0)
    constants = np.asarray(constants, dtype=float).copy()
    constants[~flags] = np.maximum(constants[~flags], config.bandwidth_floor)

    sigma = c_mat.std(axis=0)
    sigma = np.where(sigma > 0, sigma, 1.0)
    bandwidths = _scaled_bandwidths(constants, sigma, n, n_cat, flags)
    h, lam = _split_by_flag(bandwidths, flags)
    fitted = _nw_kernel_regression(
        c_mat, d_mat, a, h, lam, n_cat.astype(float), c_mat, d_mat, False
    )
    fitted = np.clip(fitted, config.clamp, 1.0 - config.clamp)
    return PropensityFit(
        fitted=fitted,
        bandwidths=bandwidths,
        constants=constants,
        regressor_discrete=tuple(bool(f) for f in flags),
        category_counts=n_cat,
        config=config,
    )


def fixed_fit(fitted: np.ndarray, config: KernelConfig | None = None, clamp: bool = True) -> PropensityFit:
    """Wrap externally supplied propensities (e.g. the known truth) as a fit.

    Diagnostic device: it bypasses estimation entirely, so downstream results
    describe the oracle pipeline, not the data-driven one.
    """
    config = config or KernelConfig()
    fitted = np.asarray(fitted, dtype=float)
    if clamp:
        fitted = np.clip(fitted, config.clamp, 1.0 - config.clamp)
    return PropensityFit(
        fitted=fitted,
        bandwidths=np.empty(0),
        constants=np.empty(0),
        regressor_discrete=(),
        category_counts=np.empty(0),
        config=config,
    )


def predict_propensity(fit: PropensityFit, data, x, z) -> float | np.ndarray:
    """Evaluate the fitted kernel weights at query points; clamped like the fit.

    ``data`` must be the training dataset the fit was produced from.
    """
    if not len(fit.regressor_discrete):
        raise ValueError("prediction requires a kernel-based fit, not a fixed one")
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    x = np.atleast_2d(x)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if x.shape[1] != data.x.shape[1]:
        raise ValueError(
            f"query covariate dimension mismatch: expected {data.x.shape[1]}, got {x.shape[1]}"
        )
    if x.shape[0] != z.shape[0]:
        raise ValueError("query x and z lengths differ")

    c_train, d_train, flags = _regressor_arrays(data)
    columns = [x[:, j] for j in range(x.shape[1])] + [z]
    c_query = np.column_stack([c for c, f in zip(columns, flags) if not f])
    d_query = (
        np.column_stack([c.astype(np.int64) for c, f in zip(columns, flags) if f])
        if flags.any()
        else np.empty((len(z), 0), dtype=np.int64)
    )
    h, lam = _split_by_flag(fit.bandwidths, flags)
    pred = _nw_kernel_regression(
        c_train,
        d_train,
        np.asarray(data.a, dtype=float),
        h,
        lam,
        fit.category_counts.astype(float),
        c_query,
        d_query,
        False,
    )
    pred = np.clip(pred, fit.config.clamp, 1.0 - fit.config.clamp)
    return float(pred[0]) if single else pred


def bandwidth_sweep(
    data,
    config: KernelConfig,
    offsets,
    rng: SeededRng,
) -> list[PropensityFit]:
    """Refit at shifted continuous bandwidth constants h = max(floor, h0 + 0.5*kappa).

    Cross-validation runs once to obtain the baseline constants h0; each
    offset then reuses them, so kappa = 0 reproduces ``fit_propensity``
    exactly.
    """
    base = fit_propensity(data, config, rng)
    flags = np.array(base.regressor_discrete, dtype=bool)
    fits = []
    for kappa in offsets:
        constants = base.constants.copy()
        constants[~flags] = np.maximum(
            config.bandwidth_floor, constants[~flags] + 0.5 * float(kappa)
        )
        fits.append(fit_propensity(data, config, rng=None, constants=constants))
    return fits
