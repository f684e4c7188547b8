import numpy as np
import pytest

from mtefit.basis import MteModelSpec, build_dr_dp, build_r
from mtefit.estimators import (
    Dataset,
    conventional_gamma,
    efficient_gamma,
    eif_gamma,
    fsif_term,
    moment_matrices,
)
from mtefit.numerics import SeededRng
from mtefit.propensity import KernelConfig, fit_propensity, fixed_fit
from mtefit.simulation import DgpConfig, dgp_generate, true_gamma

SPEC = MteModelSpec(1, False, 1)
GAMMA_TRUE = np.array([0.3, 0.1, -0.1, 0.1, 0.3])


def _hand_dataset():
    y = np.array([0.9, 1.4, 0.3, 2.0, 1.1, 0.6])
    a = np.array([1, 0, 0, 1, 1, 0])
    x = np.array([1.0, 0.0, 1.0, 0.0, 1.0, 0.0])[:, None]
    z = np.array([0.3, -0.5, 1.2, 0.8, -1.1, 0.1])
    pi = np.array([0.55, 0.35, 0.60, 0.70, 0.45, 0.40])
    return Dataset(y=y, a=a, x=x, z=z, x_discrete=(True,)), pi


# ---------------------------------------------------------------------------
# Dataset validation
# ---------------------------------------------------------------------------

def test_dataset_rejects_bad_inputs():
    with pytest.raises(ValueError, match="equal lengths"):
        Dataset(y=np.zeros(3), a=np.zeros(2, dtype=int), x=np.zeros((3, 1)), z=np.zeros(3))
    with pytest.raises(ValueError, match="binary"):
        Dataset(y=np.zeros(3), a=np.array([0, 1, 2]), x=np.zeros((3, 1)), z=np.zeros(3))
    with pytest.raises(ValueError, match="missing or non-finite"):
        Dataset(y=np.array([0.0, np.nan, 1.0]), a=np.array([0, 1, 0]),
                x=np.zeros((3, 1)), z=np.zeros(3))


# ---------------------------------------------------------------------------
# conventional estimator
# ---------------------------------------------------------------------------

def test_constant_propensity_projects_onto_mean():
    # with a constant propensity and no covariates the basis spans only the
    # constant direction, so fitted values collapse to the outcome mean
    rng = np.random.default_rng(0)
    n = 200
    y = rng.normal(1.7, 0.3, size=n)
    data = Dataset(y=y, a=rng.integers(0, 2, size=n), x=np.empty((n, 0)), z=rng.normal(size=n))
    spec = MteModelSpec(1, False, 0)
    est = conventional_gamma(data, fixed_fit(np.full(n, 0.5), clamp=False), spec)
    assert est.pinv_fallback
    fitted = build_r(np.empty(0), 0.5, spec) @ est.gamma
    assert fitted == pytest.approx(y.mean(), abs=1e-10)


def test_hand_dataset_matches_normal_equations_oracle():
    data, pi = _hand_dataset()
    est = conventional_gamma(data, fixed_fit(pi, clamp=False), SPEC)
    # oracle: brute-force normal equations on the explicit design matrix
    design = np.column_stack(
        [np.ones(6), data.x[:, 0], pi, data.x[:, 0] * pi, pi**2]
    )
    oracle = np.linalg.solve(design.T @ design, design.T @ data.y)
    np.testing.assert_allclose(est.gamma, oracle, atol=1e-10)


def test_known_propensity_recovers_design_coefficients():
    data, truth = dgp_generate(DgpConfig(n=200_000, eta_bar=0.6, seed=0))
    est = conventional_gamma(data, fixed_fit(truth.pi, clamp=False), SPEC)
    np.testing.assert_allclose(est.gamma, GAMMA_TRUE, atol=0.02)


def test_naive_covariance_flag():
    data, truth = dgp_generate(DgpConfig(n=5000, eta_bar=0.6, seed=3))
    fit = fixed_fit(truth.pi, clamp=False)
    assert conventional_gamma(data, fit, SPEC).naive_covariance is None
    est = conventional_gamma(data, fit, SPEC, include_naive=True)
    assert est.naive_covariance.shape == est.covariance.shape


# ---------------------------------------------------------------------------
# efficient estimator
# ---------------------------------------------------------------------------

def test_no_treatment_residual_collapses_to_ols():
    # propensity identical to the treatment indicator: the cross-moment is
    # exactly zero and both estimators coincide bitwise
    data, _ = dgp_generate(DgpConfig(n=800, eta_bar=0.6, seed=4))
    fit = fixed_fit(data.a.astype(float), clamp=False)
    _, gamma_mat, _, _, _ = moment_matrices(data, fit.fitted, SPEC)
    assert not gamma_mat.any()
    conv = conventional_gamma(data, fit, SPEC)
    eff = efficient_gamma(data, fit, SPEC)
    np.testing.assert_array_equal(conv.gamma, eff.gamma)


def test_estimating_equation_zero_at_solution():
    data, truth = dgp_generate(DgpConfig(n=3000, eta_bar=0.4, seed=5))
    fit = fixed_fit(truth.pi, clamp=False)
    omega, gamma_mat, upsilon, _, _ = moment_matrices(data, fit.fitted, SPEC)
    gamma_t = efficient_gamma(data, fit, SPEC).gamma
    residual = upsilon - (omega + gamma_mat) @ gamma_t
    assert np.max(np.abs(residual)) <= 1e-10


def test_mean_eif_zero_at_efficient_solution():
    data, truth = dgp_generate(DgpConfig(n=3000, eta_bar=0.4, seed=6))
    fit = fixed_fit(truth.pi, clamp=False)
    omega = moment_matrices(data, fit.fitted, SPEC)[0]
    gamma_t = efficient_gamma(data, fit, SPEC).gamma
    phi = eif_gamma(data.y, data.a, data.x, fit.fitted, gamma_t, SPEC, omega=omega)
    assert np.max(np.abs(phi.mean(axis=0))) <= 1e-10


def test_covariances_symmetric_psd():
    data, truth = dgp_generate(DgpConfig(n=4000, eta_bar=0.4, seed=7))
    fit = fixed_fit(truth.pi, clamp=False)
    for est in (conventional_gamma(data, fit, SPEC), efficient_gamma(data, fit, SPEC)):
        np.testing.assert_array_equal(est.covariance, est.covariance.T)
        assert np.linalg.eigvalsh(est.covariance).min() >= -1e-10


def test_variance_estimates_agree_at_true_propensity():
    data, truth = dgp_generate(DgpConfig(n=100_000, eta_bar=0.5, seed=8))
    fit = fixed_fit(truth.pi, clamp=False)
    conv = conventional_gamma(data, fit, SPEC)
    eff = efficient_gamma(data, fit, SPEC)
    scale = np.abs(conv.covariance).max()
    denom = 0.5 * (np.abs(conv.covariance) + np.abs(eff.covariance)) + 1e-4 * scale
    assert np.max(np.abs(conv.covariance - eff.covariance) / denom) <= 0.10


def test_root_n_consistency_both_estimators():
    sizes = (1_000, 10_000, 100_000)
    reps = 20
    rmse = {"conventional": [], "efficient": []}
    for n in sizes:
        errs = {"conventional": [], "efficient": []}
        for rep in range(reps):
            rng = SeededRng(1234).substream(n, rep)
            data, truth = dgp_generate(DgpConfig(n=n, eta_bar=0.6), rng=rng)
            fit = fixed_fit(truth.pi, clamp=False)
            errs["conventional"].append(
                np.sum((conventional_gamma(data, fit, SPEC).gamma - GAMMA_TRUE) ** 2)
            )
            errs["efficient"].append(
                np.sum((efficient_gamma(data, fit, SPEC).gamma - GAMMA_TRUE) ** 2)
            )
        for kind in rmse:
            rmse[kind].append(np.sqrt(np.mean(errs[kind])))
    for kind, values in rmse.items():
        slope = np.polyfit(np.log(sizes), np.log(values), 1)[0]
        assert slope == pytest.approx(-0.5, abs=0.1), kind


def test_efficient_beats_conventional_under_weak_instrument():
    # desk-scale version of the replication comparison; the acceptance suite
    # runs the full-scale one
    config = KernelConfig(cv_subsample_size=500, cv_subsample_count=2)
    errs = {"conventional": [], "efficient": []}
    for rep in range(20):
        rng = SeededRng(2718).substream(rep)
        data, _ = dgp_generate(DgpConfig(n=2000, eta_bar=0.2), rng=rng)
        fit = fit_propensity(data, config, rng.substream(9))
        errs["conventional"].append(
            np.sum((conventional_gamma(data, fit, SPEC).gamma - GAMMA_TRUE) ** 2)
        )
        errs["efficient"].append(
            np.sum((efficient_gamma(data, fit, SPEC).gamma - GAMMA_TRUE) ** 2)
        )
    assert np.mean(errs["efficient"]) < np.mean(errs["conventional"])


# ---------------------------------------------------------------------------
# influence function pieces
# ---------------------------------------------------------------------------

def test_eif_vanishes_at_noiseless_observation():
    omega_inv = np.eye(SPEC.basis_dim)
    gamma = GAMMA_TRUE
    x, pi = np.array([1.0]), 0.4
    y = float(build_r(x, pi, SPEC) @ gamma)
    phi = eif_gamma(y, pi, x, pi, gamma, SPEC, omega_inv=omega_inv)
    np.testing.assert_allclose(phi, 0.0, atol=1e-14)


def test_eif_linear_in_outcome():
    omega_inv = np.linalg.inv(np.eye(SPEC.basis_dim) * 2.0)
    gamma = GAMMA_TRUE
    x, pi, a, y, c = np.array([1.0]), 0.4, 1.0, 0.9, 3.5
    base = eif_gamma(y, a, x, pi, gamma, SPEC, omega_inv=omega_inv)
    scaled = eif_gamma(c * y, a, x, pi, gamma, SPEC, omega_inv=omega_inv)
    expected_shift = omega_inv @ build_r(x, pi, SPEC) * (c - 1.0) * y
    np.testing.assert_allclose(scaled - base, expected_shift, atol=1e-12)


def test_fsif_trivial_zeros():
    x, pi = np.array([0.0]), 0.3
    assert not fsif_term(pi, x, pi, GAMMA_TRUE, SPEC).any()
    assert not fsif_term(1.0, x, pi, np.zeros(SPEC.basis_dim), SPEC).any()


def test_fsif_componentwise_oracle():
    # independent elementwise construction of r (a - pi) (dr'gamma)
    rng = np.random.default_rng(11)
    x = rng.normal(size=(15, 1))
    pi = rng.uniform(0.1, 0.9, size=15)
    a = rng.integers(0, 2, size=15)
    rows = fsif_term(a, x, pi, GAMMA_TRUE, SPEC)
    for i in range(15):
        r = build_r(x[i], pi[i], SPEC)
        dr = build_dr_dp(x[i], pi[i], SPEC)
        expected = r * (a[i] - pi[i]) * float(dr @ GAMMA_TRUE)
        np.testing.assert_allclose(rows[i], expected, atol=1e-14)


# ---------------------------------------------------------------------------
# perturbation oracle: finite-t mixture derivative of the estimand
# ---------------------------------------------------------------------------

def _discrete_population():
    """Cells (x, z) with masses and propensities; outcome means lie in the
    model span so the coefficient functional is exactly identified."""
    raw = [
        (0.0, -1.0, 0.10, 0.30, 0.9),
        (0.0, 0.7, 0.12, 0.60, -0.4),
        (0.0, 1.5, 0.08, 0.80, 0.5),
        (0.0, -2.0, 0.10, 0.15, -0.8),
        (1.0, -0.4, 0.10, 0.45, 0.7),
        (1.0, 1.2, 0.15, 0.70, -0.2),
        (1.0, 2.0, 0.10, 0.85, 0.3),
        (1.0, 0.1, 0.13, 0.50, 1.0),
        (1.0, -1.5, 0.07, 0.25, -0.6),
        (0.0, 0.2, 0.05, 0.55, 0.1),
    ]
    cells = []
    for x, z, m, p, gap in raw:
        ybar = float(build_r(np.array([x]), p, SPEC) @ GAMMA_TRUE)
        cells.append((x, z, m, p, ybar - p * gap, ybar + (1 - p) * gap))
    return cells


def _gamma_functional(cells, masses_a):
    k = SPEC.basis_dim
    omega = np.zeros((k, k))
    moment = np.zeros(k)
    for ci, (x, _, _, _, y0, y1) in enumerate(cells):
        m1, m0 = masses_a[ci][1], masses_a[ci][0]
        mass = m0 + m1
        if mass <= 0:
            continue
        pi = m1 / mass
        r = build_r(np.array([x]), pi, SPEC)
        omega += mass * np.outer(r, r)
        moment += (m1 * y1 + m0 * y0) * r
    return np.linalg.solve(omega, moment), omega


def test_eif_matches_mixture_perturbation_oracle():
    cells = _discrete_population()
    base = {ci: {1: m * p, 0: m * (1 - p)} for ci, (_, _, m, p, _, _) in enumerate(cells)}
    gamma0, omega0 = _gamma_functional(cells, base)
    np.testing.assert_allclose(gamma0, GAMMA_TRUE, atol=1e-10)
    omega_inv = np.linalg.inv(omega0)

    t = 1e-6
    worst = 0.0
    for ci, (x, _, _, p, y0c, y1c) in enumerate(cells):
        for a_tilde in (0, 1):
            y_tilde = y1c if a_tilde else y0c

            def perturbed(tt):
                mix = {c: {aa: (1 - tt) * v for aa, v in d.items()} for c, d in base.items()}
                mix[ci][a_tilde] += tt
                return mix

            fd = (_gamma_functional(cells, perturbed(t))[0]
                  - _gamma_functional(cells, perturbed(-t))[0]) / (2 * t)
            phi = eif_gamma(y_tilde, a_tilde, np.array([x]), p, gamma0, SPEC,
                            omega_inv=omega_inv)
            worst = max(worst, float(np.max(np.abs(fd - phi))))
    assert worst <= 1e-6


def test_fsif_is_negative_first_stage_derivative():
    # perturb only the plug-in propensity at one support cell and difference
    # the least-squares moment: the first-stage influence is -fsif_term
    cells = _discrete_population()
    base = {ci: {1: m * p, 0: m * (1 - p)} for ci, (_, _, m, p, _, _) in enumerate(cells)}
    gamma0, _ = _gamma_functional(cells, base)

    def ols_moment(pi_by_cell):
        k = SPEC.basis_dim
        total = np.zeros(k)
        for ci, (x, _, m, p, y0, y1) in enumerate(cells):
            r = build_r(np.array([x]), pi_by_cell[ci], SPEC)
            ybar = p * y1 + (1 - p) * y0
            total += m * r * (ybar - float(r @ gamma0))
        return total

    pis = [c[3] for c in cells]
    t = 1e-6
    for ci, (x, _, m, p, y0c, y1c) in enumerate(cells):
        for a_tilde in (0, 1):
            # mixture with mass t at (a_tilde, cell ci) shifts that cell's
            # propensity by t (a - pi) / mass to first order
            up = list(pis)
            down = list(pis)
            shift = (a_tilde - p) / m
            up[ci] = p + t * shift
            down[ci] = p - t * shift
            fd = (ols_moment(up) - ols_moment(down)) / (2 * t)
            psi = fsif_term(a_tilde, np.array([x]), p, gamma0, SPEC)
            np.testing.assert_allclose(fd, -psi, atol=1e-6)
