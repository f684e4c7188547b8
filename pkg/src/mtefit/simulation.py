"""Seeded data-generating process and the Monte Carlo experiment harness.

The design draws a binary covariate and a standard-normal instrument,
selects treatment by comparing a normal-CDF index against a uniform latent
resistance, and builds potential outcomes that are linear in the covariate
and the latent resistance with correlated noise. Instrument strength is a
single dial (eta_bar); every replication owns an independent substream
derived from the master seed, so results are bit-reproducible and adding a
replication never disturbs another.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .basis import MteModelSpec, build_dr_dp
from .estimators import Dataset, conventional_gamma, efficient_gamma
from .numerics import RankDeficientSystemError, SeededRng, draw_bernoulli, draw_normal, draw_uniform, std_normal_cdf
from .propensity import KernelConfig, bandwidth_sweep, fit_propensity, fixed_fit
from .targets import CI_MULTIPLIER, estimate_target

_REPLICATION_FAILURES = (np.linalg.LinAlgError, RankDeficientSystemError)

TARGET_KINDS = ("ATE", "ATT", "ATU", "ASG")
METHODS = ("conventional", "efficient")

# Fixed substream offsets per variable, so diagnostics cannot shift streams.
_STREAM_X, _STREAM_Z, _STREAM_V, _STREAM_W, _STREAM_CV = 0, 1, 2, 3, 9


@dataclass(frozen=True)
class DgpConfig:
    """Simulation design: sample size, instrument strength, seed.

    The outcome coefficients default to the standard design (binary
    covariate, selection on an index with coefficients (0, -0.2, eta_bar,
    -0.2 eta_bar), noise variance 0.2 with correlation 0.2). They are
    overridable only to build diagnostic variants such as the
    homogeneous-effect design; leave them alone to reproduce the published
    experiments.
    """

    n: int
    eta_bar: float
    seed: int = 0
    alpha0: float = 0.3
    alpha1: float = 0.5
    beta0: float = 0.1
    beta1: float = 0.2
    zeta0: float = -0.3
    zeta1: float = 0.3
    noise_variance: float = 0.2
    noise_correlation: float = 0.2

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if not self.eta_bar > 0:
            raise ValueError("eta_bar must be positive")

    def homogeneous(self) -> "DgpConfig":
        """Variant with no selection-relevant effect heterogeneity."""
        return replace(self, zeta1=self.zeta0, beta1=self.beta0)


@dataclass
class DgpTruth:
    """Hidden generation record kept for oracle use only."""

    v: np.ndarray
    pi: np.ndarray
    y0: np.ndarray
    y1: np.ndarray


def selection_index(x, z, eta_bar: float):
    """Index q(x,z)'eta with eta = (0, -0.2, eta_bar, -0.2 eta_bar)."""
    return -0.2 * x + eta_bar * z - 0.2 * eta_bar * x * z


def true_propensity(x, z, eta_bar: float):
    return std_normal_cdf(selection_index(x, z, eta_bar))


def true_gamma(config: DgpConfig) -> np.ndarray:
    """Coefficient vector implied by the design (order-1 basis, one covariate)."""
    dzeta = config.zeta1 - config.zeta0
    return np.array(
        [
            config.alpha0,
            config.beta0,
            config.alpha1 - config.alpha0 - 0.5 * dzeta,
            config.beta1 - config.beta0,
            0.5 * dzeta,
        ]
    )


def mte_truth(v, config: DgpConfig, x_mean: float = 0.5):
    """True effect curve at latent resistance v, averaged over the covariate."""
    dzeta = config.zeta1 - config.zeta0
    return (
        config.alpha1
        - config.alpha0
        - 0.5 * dzeta
        + (config.beta1 - config.beta0) * x_mean
        + dzeta * np.asarray(v, dtype=float)
    )


def treated_share_analytic(eta_bar: float) -> float:
    """Closed-form P(A=1): stratum shares of the normal-index threshold rule."""
    return 0.5 * (0.5 + std_normal_cdf(-0.2 / np.sqrt(1.0 + 0.64 * eta_bar**2)))


def dgp_generate(config: DgpConfig, rng: SeededRng | None = None) -> tuple[Dataset, DgpTruth]:
    """Draw one sample plus its hidden truth record.

    Each variable draws from its own fixed substream of the replicate seed.
    """
    rng = rng or SeededRng(config.seed)
    n = config.n
    x = draw_bernoulli(rng.substream(_STREAM_X), 0.5, size=n).astype(float)
    z = draw_normal(rng.substream(_STREAM_Z), size=n)
    v = draw_uniform(rng.substream(_STREAM_V), size=n)
    w_stream = rng.substream(_STREAM_W)
    e0 = draw_normal(w_stream, size=n)
    e1 = draw_normal(w_stream, size=n)
    sd = np.sqrt(config.noise_variance)
    rho = config.noise_correlation
    w0 = sd * e0
    w1 = sd * (rho * e0 + np.sqrt(1.0 - rho**2) * e1)

    # the noise pair (variance 0.2) enters the outcomes scaled by sqrt(0.2)
    # again, so the effective outcome-noise variance is 0.04
    scale = np.sqrt(config.noise_variance)
    y0 = config.alpha0 + config.beta0 * x + config.zeta0 * (v - 0.5) + scale * w0
    y1 = config.alpha1 + config.beta1 * x + config.zeta1 * (v - 0.5) + scale * w1
    pi = true_propensity(x, z, config.eta_bar)
    a = (pi > v).astype(np.int64)
    y = np.where(a == 1, y1, y0)

    data = Dataset(y=y, a=a, x=x[:, None], z=z, x_discrete=(True,))
    return data, DgpTruth(v=v, pi=pi, y0=y0, y1=y1)


@dataclass
class TargetTruth:
    """Oracle values of the four target estimands."""

    ate: float
    att: float
    atu: float
    asg: float

    def value(self, kind: str) -> float:
        return {"ATE": self.ate, "ATT": self.att, "ATU": self.atu, "ASG": self.asg}[kind]


def true_targets(
    eta_bar: float,
    oracle_n: int = 1_000_000,
    seed: int = 0,
    config: DgpConfig | None = None,
) -> TargetTruth:
    """Monte Carlo oracle for the target estimands at one instrument strength.

    Uses the hidden truth record of a large draw: means of y1 - y0 overall
    and within each treatment arm. The overall mean has a closed form, which
    the tests cross-check.
    """
    if oracle_n < 1_000_000:
        raise ValueError("oracle_n must be at least 1e6 for stable truth values")
    base = config or DgpConfig(n=oracle_n, eta_bar=eta_bar, seed=seed)
    cfg = replace(base, n=oracle_n, eta_bar=eta_bar, seed=seed)
    data, truth = dgp_generate(cfg)
    effect = truth.y1 - truth.y0
    treated = data.a == 1
    ate = float(effect.mean())
    att = float(effect[treated].mean())
    atu = float(effect[~treated].mean())
    return TargetTruth(ate=ate, att=att, atu=atu, asg=att - atu)


@dataclass(frozen=True)
class ExperimentConfig:
    """Estimation options shared by every replication."""

    kernel: KernelConfig = field(default_factory=KernelConfig)
    model: MteModelSpec = field(default_factory=lambda: MteModelSpec(1, False, 1))
    known_propensity: bool = False  # diagnostic: bypasses propensity fitting
    oracle_n: int = 1_000_000
    dgp: DgpConfig | None = None  # template for non-default designs


@dataclass
class ReplicationOutcome:
    gamma: dict
    targets: dict
    target_ses: dict


@dataclass
class EtaCell:
    """Aggregates for one instrument-strength grid point."""

    eta_bar: float
    truth: TargetTruth
    gamma_true: np.ndarray
    gamma_bias: dict
    gamma_rmse: dict
    gamma_rmse_aggregate: dict
    target_bias: dict
    target_rmse: dict
    target_coverage: dict
    n_failed: int
    n_completed: int


@dataclass
class ExperimentResult:
    """Results of the full replication grid, deterministic given the seed."""

    eta_grid: tuple
    reps: int
    n: int
    master_seed: int
    known_propensity: bool
    cells: list


def _replicate(eta_bar, n, rep_rng, config: ExperimentConfig) -> ReplicationOutcome:
    template = config.dgp or DgpConfig(n=n, eta_bar=eta_bar)
    cfg = replace(template, n=n, eta_bar=eta_bar)
    data, truth = dgp_generate(cfg, rng=rep_rng)
    if config.known_propensity:
        fit = fixed_fit(truth.pi, config.kernel, clamp=False)
    else:
        fit = fit_propensity(data, config.kernel, rep_rng.substream(_STREAM_CV))
    spec = config.model
    conv = conventional_gamma(data, fit, spec)
    eff = efficient_gamma(data, fit, spec)
    gammas = {"conventional": conv.gamma, "efficient": eff.gamma}
    points = {m: {} for m in METHODS}
    ses = {m: {} for m in METHODS}
    for method in METHODS:
        for kind in TARGET_KINDS:
            est = estimate_target(kind, data, fit, spec, conv, method=method)
            points[method][kind] = est.point
            ses[method][kind] = est.se
    return ReplicationOutcome(gamma=gammas, targets=points, target_ses=ses)


def _aggregate_cell(eta_bar, outcomes, truth, gamma_true, n_failed) -> EtaCell:
    gamma_bias, gamma_rmse, gamma_agg = {}, {}, {}
    target_bias = {m: {} for m in METHODS}
    target_rmse = {m: {} for m in METHODS}
    target_cover = {m: {} for m in METHODS}
    for method in METHODS:
        g = np.array([o.gamma[method] for o in outcomes])
        err = g - gamma_true
        gamma_bias[method] = err.mean(axis=0)
        gamma_rmse[method] = np.sqrt((err**2).mean(axis=0))
        gamma_agg[method] = float(np.sqrt((err**2).sum(axis=1).mean()))
        for kind in TARGET_KINDS:
            pts = np.array([o.targets[method][kind] for o in outcomes])
            se = np.array([o.target_ses[method][kind] for o in outcomes])
            err_t = pts - truth.value(kind)
            target_bias[method][kind] = float(err_t.mean())
            target_rmse[method][kind] = float(np.sqrt((err_t**2).mean()))
            covered = np.abs(err_t) <= CI_MULTIPLIER * se
            target_cover[method][kind] = float(covered.mean())
    return EtaCell(
        eta_bar=eta_bar,
        truth=truth,
        gamma_true=gamma_true,
        gamma_bias=gamma_bias,
        gamma_rmse=gamma_rmse,
        gamma_rmse_aggregate=gamma_agg,
        target_bias=target_bias,
        target_rmse=target_rmse,
        target_coverage=target_cover,
        n_failed=n_failed,
        n_completed=len(outcomes),
    )


def run_experiment(
    eta_grid,
    reps: int,
    n: int,
    master_seed: int,
    config: ExperimentConfig | None = None,
) -> ExperimentResult:
    """Replicate the full pipeline over an instrument-strength grid.

    Replication failures from singular systems are counted per cell, never
    silently dropped.
    """
    if reps < 2:
        raise ValueError("need at least 2 replications")
    config = config or ExperimentConfig()
    master = SeededRng(master_seed)
    cells = []
    for e_idx, eta_bar in enumerate(eta_grid):
        template = config.dgp or DgpConfig(n=n, eta_bar=eta_bar)
        truth = true_targets(
            eta_bar,
            oracle_n=config.oracle_n,
            seed=master_seed,
            config=replace(template, eta_bar=eta_bar),
        )
        gamma_true = true_gamma(replace(template, eta_bar=eta_bar))
        outcomes = []
        n_failed = 0
        for rep in range(reps):
            rep_rng = master.substream(e_idx, rep)
            try:
                outcomes.append(_replicate(eta_bar, n, rep_rng, config))
            except _REPLICATION_FAILURES:
                n_failed += 1
        cells.append(_aggregate_cell(eta_bar, outcomes, truth, gamma_true, n_failed))
    return ExperimentResult(
        eta_grid=tuple(eta_grid),
        reps=reps,
        n=n,
        master_seed=master_seed,
        known_propensity=config.known_propensity,
        cells=cells,
    )


@dataclass
class MteRmseProfile:
    """Per-grid-point RMSE of the effect-curve estimate, by method."""

    v_grid: np.ndarray
    rmse: dict
    bias: dict
    skipped: np.ndarray  # per grid point: replications without support
    eta_bar: float


def mte_rmse_profile(
    v_grid,
    reps: int,
    n: int,
    eta_bar: float,
    master_seed: int,
    config: ExperimentConfig | None = None,
) -> MteRmseProfile:
    """Accuracy profile of the effect curve over the latent-resistance grid.

    Grid points outside a replication's propensity support are skipped for
    that replication and counted.
    """
    config = config or ExperimentConfig()
    v_grid = np.asarray(v_grid, dtype=float)
    template = config.dgp or DgpConfig(n=n, eta_bar=eta_bar)
    truth_curve = mte_truth(v_grid, replace(template, eta_bar=eta_bar))
    master = SeededRng(master_seed)
    errors = {m: [[] for _ in v_grid] for m in METHODS}
    skipped = np.zeros(len(v_grid), dtype=int)
    for rep in range(reps):
        rep_rng = master.substream(0, rep)
        cfg = replace(template, n=n, eta_bar=eta_bar)
        data, truth = dgp_generate(cfg, rng=rep_rng)
        if config.known_propensity:
            fit = fixed_fit(truth.pi, config.kernel, clamp=False)
        else:
            fit = fit_propensity(data, config.kernel, rep_rng.substream(_STREAM_CV))
        spec = config.model
        gammas = {
            "conventional": conventional_gamma(data, fit, spec).gamma,
            "efficient": efficient_gamma(data, fit, spec).gamma,
        }
        pi = fit.fitted
        lo, hi = pi.min(), pi.max()
        for i, v in enumerate(v_grid):
            if v < lo or v > hi:
                skipped[i] += 1
                continue
            w = build_dr_dp(data.x, np.full(n, v), spec).mean(axis=0)
            for method in METHODS:
                errors[method][i].append(float(w @ gammas[method]) - truth_curve[i])
    rmse = {
        m: np.array([np.sqrt(np.mean(np.square(e))) if e else np.nan for e in errors[m]])
        for m in METHODS
    }
    bias = {
        m: np.array([np.mean(e) if e else np.nan for e in errors[m]]) for m in METHODS
    }
    return MteRmseProfile(v_grid=v_grid, rmse=rmse, bias=bias, skipped=skipped, eta_bar=eta_bar)


@dataclass
class BandwidthBiasResult:
    """Bias of coefficients and targets as the bandwidth constant is shifted."""

    kappas: tuple
    constants: np.ndarray  # mean effective continuous constant per kappa
    gamma_bias: dict  # method -> (n_kappa, basis_dim)
    target_bias: dict  # method -> kind -> (n_kappa,)
    eta_bar: float
    n_failed: int


def bandwidth_bias_sweep(
    kappas,
    reps: int,
    n: int,
    eta_bar: float,
    master_seed: int,
    config: ExperimentConfig | None = None,
) -> BandwidthBiasResult:
    """Rerun the pipeline at shifted bandwidth constants and tabulate bias.

    Cross-validation runs once per replication; every kappa reuses its
    constants, so the kappa = 0 column matches the unshifted pipeline.
    """
    config = config or ExperimentConfig()
    kappas = tuple(float(k) for k in kappas)
    template = config.dgp or DgpConfig(n=n, eta_bar=eta_bar)
    truth = true_targets(eta_bar, oracle_n=config.oracle_n, seed=master_seed,
                         config=replace(template, eta_bar=eta_bar))
    gamma_true = true_gamma(replace(template, eta_bar=eta_bar))
    spec = config.model
    master = SeededRng(master_seed)

    gamma_err = {m: [[] for _ in kappas] for m in METHODS}
    target_err = {m: {k: [[] for _ in kappas] for k in TARGET_KINDS} for m in METHODS}
    constants = [[] for _ in kappas]
    n_failed = 0
    for rep in range(reps):
        rep_rng = master.substream(0, rep)
        cfg = replace(template, n=n, eta_bar=eta_bar)
        data, _ = dgp_generate(cfg, rng=rep_rng)
        try:
            fits = bandwidth_sweep(data, config.kernel, kappas, rep_rng.substream(_STREAM_CV))
            for ki, fit in enumerate(fits):
                flags = np.array(fit.regressor_discrete, dtype=bool)
                constants[ki].append(float(fit.constants[~flags].mean()))
                conv = conventional_gamma(data, fit, spec)
                eff = efficient_gamma(data, fit, spec)
                gamma_err["conventional"][ki].append(conv.gamma - gamma_true)
                gamma_err["efficient"][ki].append(eff.gamma - gamma_true)
                for method in METHODS:
                    for kind in TARGET_KINDS:
                        est = estimate_target(kind, data, fit, spec, conv, method=method)
                        target_err[method][kind][ki].append(est.point - truth.value(kind))
        except _REPLICATION_FAILURES:
            n_failed += 1
    gamma_bias = {
        m: np.array([np.mean(cell, axis=0) for cell in gamma_err[m]]) for m in METHODS
    }
    target_bias = {
        m: {k: np.array([np.mean(cell) for cell in target_err[m][k]]) for k in TARGET_KINDS}
        for m in METHODS
    }
    return BandwidthBiasResult(
        kappas=kappas,
        constants=np.array([np.mean(c) for c in constants]),
        gamma_bias=gamma_bias,
        target_bias=target_bias,
        eta_bar=eta_bar,
        n_failed=n_failed,
    )
