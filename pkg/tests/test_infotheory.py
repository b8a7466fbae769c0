import itertools
import math
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corexae.infotheory import (
    DiscreteJoint,
    EnumerationGuardError,
    GaussianJoint,
    GaussianMixture1D,
    MIEntry,
    MIReport,
    NotPositiveDefiniteError,
    discrete_conditional_tc,
    discrete_corex_objective,
    discrete_mi_decomposition_check,
    discrete_mi_objective,
    discrete_tc,
    estimate_mi_input,
    estimate_mi_latent,
    fit_aggregated_marginal,
    gaussian_conditional_tc,
    gaussian_tc,
    joint_from_encoder,
    marginal_tightness,
    random_factorized_joint,
    random_joint,
    tabular_bound,
    true_posteriors,
)
from corexae.rng import Rng

LN2 = math.log(2)


# --- brute-force oracle: entropies by explicit enumeration of outcomes --------

def brute_entropy(table, axes):
    acc = defaultdict(float)
    for idx in itertools.product(*[range(s) for s in table.shape]):
        acc[tuple(idx[a] for a in axes)] += table[idx]
    return -sum(p * math.log(p) for p in acc.values() if p > 0)


def brute_tc(table, axes):
    return sum(brute_entropy(table, (a,)) for a in axes) - brute_entropy(table, axes)


def brute_conditional_tc(table, xs, zs):
    hz = brute_entropy(table, zs)
    return sum(brute_entropy(table, (a,) + zs) - hz for a in xs) - (brute_entropy(table, xs + zs) - hz)


def table_from(outcomes):
    """Joint table from a list of (probability, state tuple)."""
    n = len(outcomes[0][1])
    t = np.zeros((2,) * n)
    for p, s in outcomes:
        t[s] += p
    return t


def test_tc_examples():
    indep = DiscreteJoint(np.full((2, 2, 2), 1 / 8), 3)
    assert discrete_tc(indep) == pytest.approx(0.0, abs=1e-15)
    copy2 = DiscreteJoint(table_from([(0.5, (0, 0)), (0.5, (1, 1))]), 2)
    assert discrete_tc(copy2) == pytest.approx(LN2, abs=1e-15)
    copy3 = DiscreteJoint(table_from([(0.5, (0, 0, 0)), (0.5, (1, 1, 1))]), 3)
    assert discrete_tc(copy3) == pytest.approx(2 * LN2, abs=1e-15)


def test_conditional_tc_examples():
    # x deterministic given z: x1 = x2 = z
    det = DiscreteJoint(table_from([(0.5, (0, 0, 0)), (0.5, (1, 1, 1))]), 2)
    assert discrete_conditional_tc(det) == pytest.approx(0.0, abs=1e-15)
    # z independent of a copied pair
    pair = table_from([(0.5, (0, 0)), (0.5, (1, 1))])
    noise = DiscreteJoint(pair[..., None] * np.array([0.3, 0.7]), 2)
    assert discrete_conditional_tc(noise) == pytest.approx(discrete_tc(noise), abs=1e-15)
    xor = DiscreteJoint(table_from([(0.25, (a, b, a ^ b)) for a in (0, 1) for b in (0, 1)]), 2)
    assert discrete_conditional_tc(xor) == pytest.approx(LN2, abs=1e-15)


def test_xor_informativeness_is_negative():
    """Conditioning can create dependence: TC(x;z) < 0 for the xor triple."""
    xor = DiscreteJoint(table_from([(0.25, (a, b, a ^ b)) for a in (0, 1) for b in (0, 1)]), 2)
    tc_xz, _, _ = discrete_corex_objective(xor)
    assert tc_xz == pytest.approx(-LN2, abs=1e-15)


def test_corex_objective_examples():
    copy = DiscreteJoint(table_from([(0.5, (0, 0, 0)), (0.5, (1, 1, 1))]), 2)
    assert discrete_corex_objective(copy)[2] == pytest.approx(LN2, abs=1e-15)
    pair = table_from([(0.5, (0, 0)), (0.5, (1, 1))])
    z_tab = np.array([[0.1, 0.2], [0.3, 0.4]])  # correlated z pair, independent of x
    j = DiscreteJoint(pair[:, :, None, None] * z_tab, 2)
    tc_xz, tc_z, obj = discrete_corex_objective(j)
    assert tc_xz == pytest.approx(0.0, abs=1e-15)
    assert obj == pytest.approx(-tc_z, abs=1e-15)
    # z = (x1, x1): redundant pair of latents
    red = DiscreteJoint(table_from([(0.5, (0, 0, 0, 0)), (0.5, (1, 1, 1, 1))]), 2)
    assert discrete_corex_objective(red)[1] == pytest.approx(LN2, abs=1e-15)


def test_mi_decomposition_examples():
    copy = DiscreteJoint(table_from([(0.5, (0, 0, 0)), (0.5, (1, 1, 1))]), 2)
    assert discrete_mi_decomposition_check(copy) < 1e-10
    z = copy.z_axes
    rhs = sum(copy.mutual_information((a,), z) for a in copy.x_axes) - copy.mutual_information(copy.x_axes, z)
    assert rhs == pytest.approx(LN2, abs=1e-15)
    rng = Rng(2)
    for t in range(20):
        assert discrete_mi_decomposition_check(random_joint(rng.split(t), [2, 2], [2])) < 1e-10


def test_fault_injection_breaks_identity():
    j = random_joint(Rng(0), [2, 3], [2])
    assert discrete_mi_decomposition_check(j, _sign=-1.0) > 1e-3


def test_factorized_encoder_mi_form():
    rng = Rng(4)
    for t in range(30):
        px, encs = random_factorized_joint(rng.split(t), [2, 2, 3], [2, 3])
        j = joint_from_encoder(px, encs)
        assert abs(discrete_corex_objective(j)[2] - discrete_mi_objective(j)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(2, 3), min_size=2, max_size=3), st.lists(st.integers(2, 3), min_size=1, max_size=2))
def test_against_brute_force_and_invariants(seed, xc, zc):
    j = random_joint(Rng(seed), xc, zc)
    xs, zs = j.x_axes, j.z_axes
    assert discrete_tc(j) == pytest.approx(brute_tc(j.table, xs), abs=1e-12)
    assert discrete_conditional_tc(j) == pytest.approx(brute_conditional_tc(j.table, xs, zs), abs=1e-12)
    assert discrete_tc(j) >= -1e-12 and discrete_conditional_tc(j) >= -1e-12
    tc_xz = discrete_corex_objective(j)[0]
    assert tc_xz <= discrete_tc(j) + 1e-12
    assert discrete_mi_decomposition_check(j) < 1e-10


def test_joint_validation_and_guard():
    with pytest.raises(ValueError):
        DiscreteJoint(np.array([0.5, 0.6]), 1)
    with pytest.raises(EnumerationGuardError):
        DiscreteJoint(np.zeros((2,) * 21), 10)


def test_tabular_bound_below_objective_and_tight():
    rng = Rng(6)
    for t in range(25):
        r = rng.split(t)
        px, encs = random_factorized_joint(r, [2, 2, 2], [2, 3])
        exact = discrete_corex_objective(joint_from_encoder(px, encs))[2]
        decs = [(lambda q: q / q.sum(-1, keepdims=True))(r.split(10 + i).uniform(0.05, 1, (2, 3, 2))) for i in range(3)]
        pri = [np.array([0.3, 0.7]), np.array([0.2, 0.5, 0.3])]
        assert tabular_bound(px, encs, decs, pri) <= exact + 1e-9
        tdec, tpri = true_posteriors(px, encs)
        assert tabular_bound(px, encs, tdec, tpri) == pytest.approx(exact, abs=1e-10)


# --- Gaussians -----------------------------------------------------------------

def test_gaussian_tc_examples():
    assert gaussian_tc(GaussianJoint(np.diag([1.0, 4.0, 0.3]))) == 0.0
    assert gaussian_tc(GaussianJoint(np.array([[1.0, 0.5], [0.5, 1.0]]))) == pytest.approx(0.143841, abs=1e-6)
    eq = np.full((3, 3), 0.5) + 0.5 * np.eye(3)
    assert gaussian_tc(GaussianJoint(eq)) == pytest.approx(-0.5 * math.log(0.5), abs=1e-12)


def test_gaussian_tc_scale_invariance():
    rng = Rng(1)
    for t in range(20):
        A = rng.normal((4, 4))
        cov = A @ A.T + 0.2 * np.eye(4)
        s = np.diag(rng.uniform(0.1, 5.0, 4))
        assert gaussian_tc(GaussianJoint(s @ cov @ s)) == pytest.approx(gaussian_tc(GaussianJoint(cov)), abs=1e-10)


def test_gaussian_errors():
    with pytest.raises(NotPositiveDefiniteError):
        GaussianJoint(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        GaussianJoint(np.array([[1.0, 0.2], [0.1, 1.0]]))


def test_gaussian_conditional_tc_factor_model():
    """x = w s + noise: conditioning on the single factor removes all dependence."""
    w = np.array([1.0, -0.5, 2.0])
    cov = np.zeros((4, 4))
    cov[:3, :3] = np.outer(w, w) + np.diag([0.3, 0.2, 0.5])
    cov[:3, 3] = cov[3, :3] = w
    cov[3, 3] = 1.0
    assert gaussian_conditional_tc(cov, [0, 1, 2], [3]) == pytest.approx(0.0, abs=1e-12)
    assert gaussian_tc(GaussianJoint(cov[:3, :3])) > 0.1


# --- mixtures and estimators ----------------------------------------------------

def test_single_point_mixture_is_posterior():
    mix = fit_aggregated_marginal(np.array([[0.4]]), np.array([[math.log(0.25)]]), 0)
    z = np.linspace(-3, 3, 11)
    expect = -0.5 * (math.log(2 * math.pi * 0.25) + (z - 0.4) ** 2 / 0.25)
    assert np.allclose(mix.log_pdf(z), expect, atol=1e-12)


def test_mixture_total_variance_and_sampling():
    r = Rng(3)
    means, variances = r.normal(50) * 2, r.uniform(0.1, 1.5, 50)
    mix = GaussianMixture1D(means, variances)
    assert mix.variance == pytest.approx(variances.mean() + means.var(), abs=1e-12)
    draws = mix.sample(r.split(1), 100_000)
    assert abs(draws.var() / mix.variance - 1) < 0.02
    assert GaussianMixture1D([-1.0, 1.0], [0.01, 0.01]).variance == pytest.approx(1.01)


def test_mixture_integrates_to_one():
    mix = GaussianMixture1D(Rng(5).normal(30), Rng(6).uniform(0.05, 1.0, 30))
    z = np.linspace(-10, 10, 20001)
    assert abs(np.trapezoid(mix.pdf(z), z) - 1.0) < 1e-3


def test_fit_subsample_requires_rng():
    with pytest.raises(ValueError):
        fit_aggregated_marginal(np.zeros((10, 1)), np.zeros((10, 1)), 0, n=5)
    with pytest.raises(ValueError):
        fit_aggregated_marginal(np.zeros((0, 1)), np.zeros((0, 1)), 0)


def test_mi_constant_encoder_is_zero():
    means, lv = np.full((400, 1), 0.3), np.full((400, 1), -0.5)
    mix = fit_aggregated_marginal(means, lv, 0)
    e = estimate_mi_latent(means, lv, 0, mix, Rng(0), n_points=200, n_draws=64)
    assert abs(e.value) <= 3 * e.std_err + 1e-12


def quadrature_mi_two_points():
    """I(x; z) for x = +-1 equiprobable, z | x ~ N(x, 0.01), by 1-D quadrature."""
    s2 = 0.01
    z = np.linspace(-2.0, 2.0, 400_001)

    def pdf(m):
        return np.exp(-0.5 * (z - m) ** 2 / s2) / math.sqrt(2 * math.pi * s2)

    mix = 0.5 * (pdf(1.0) + pdf(-1.0))
    p = pdf(1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        integrand = np.where(p > 0, p * (np.log(p) - np.log(mix)), 0.0)
    return float(np.trapezoid(integrand, z))


def test_mi_two_point_quadrature_oracle():
    means = np.array([[1.0], [-1.0]] * 200)
    lv = np.full((400, 1), math.log(0.01))
    mix = fit_aggregated_marginal(means, lv, 0)
    e = estimate_mi_latent(means, lv, 0, mix, Rng(1), n_points=None, n_draws=256)
    oracle = quadrature_mi_two_points()
    assert oracle == pytest.approx(LN2, abs=1e-6)
    assert abs(e.value - oracle) <= 3 * e.std_err + 1e-9


def test_mixture_estimate_below_standard_normal_bound():
    r = Rng(9)
    means = r.normal((500, 2)) * np.array([1.5, 0.3])
    lv = np.log(r.uniform(0.05, 0.5, (500, 2)))
    for d in range(2):
        mix = fit_aggregated_marginal(means, lv, d)
        e = estimate_mi_latent(means, lv, d, mix, r.split(d), n_points=500, n_draws=128)
        s = estimate_mi_latent(means, lv, d, None, r.split(d))
        assert e.value <= s.value + 3 * e.std_err
        t = marginal_tightness(means, lv, d, mix, r.split(10 + d), n_points=500, n_draws=128)
        assert t.gap >= -3 * t.gap_se


def test_mi_input_examples():
    x = np.array([[0.0], [1.0]] * 50)

    def copy_z(xx, rng, n):
        xr = np.tile(xx, (n, 1))
        return xr.copy(), xr

    perfect = lambda z, xr: np.where(z == xr, 0.0, -np.inf)
    uniform = lambda z, xr: np.full(xr.shape, -LN2)
    e = estimate_mi_input(copy_z, perfect, x, 0, LN2, Rng(0), n_draws=4)
    assert e.value == pytest.approx(LN2, abs=1e-15) and e.estimator == "bound"
    assert estimate_mi_input(copy_z, uniform, x, 0, LN2, Rng(0), n_draws=4).value == pytest.approx(0.0, abs=1e-15)
    c = estimate_mi_input(copy_z, uniform, x, 0, None, Rng(0), n_draws=4)
    assert c.estimator == "bound-up-to-constant"


def test_mi_report_csv_round_trip_and_sort():
    rep = MIReport([MIEntry(0, "mc-mixture", 0.5, 0.01, 10), MIEntry(1, "mc-mixture", 1.5, 0.02, 10),
                    MIEntry(2, "exact", 0.9, 0.0, 1)])
    assert rep.ranks() == [1, 2, 0]
    back = MIReport.from_csv(rep.to_csv())
    assert back.to_csv() == rep.to_csv()
    assert rep.to_csv().splitlines()[0] == "dim,estimator,value_nats,std_err,samples"
