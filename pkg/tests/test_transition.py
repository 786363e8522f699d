import math

import numpy as np
import numpy.testing as npt
import pytest
import sympy

from momentfilter.momentspace import MomentSet, build_gram, graded_lex_indices
from momentfilter.quadrature import cholesky_pd
from momentfilter.transition import (
    SdeModel,
    TransitionConfig,
    apply_generator,
    conditional_mean_cov,
    conditional_moments,
    em_conditional_moments,
    gaussian_moment_set,
    gaussian_moments,
    state_symbols,
    tme_conditional_moment,
)


def ou_model(ell=1.0, sigma=0.5):
    (x1,) = state_symbols(1)
    b = math.sqrt(2.0 * sigma**2 / ell)
    return SdeModel(
        d=1,
        dw=1,
        drift=lambda x: -x / ell,
        dispersion=lambda x: np.full(x.shape[:1] + (1, 1), b),
        drift_sym=(-x1 / ell,),
        dispersion_sym=((sympy.Float(b),),),
        name="ou",
    )


def cubic_model(theta=3.0):
    (x1,) = state_symbols(1)
    return SdeModel(
        d=1,
        dw=1,
        drift=lambda x: x * (1.0 - theta * x**2),
        dispersion=lambda x: np.ones(x.shape[:1] + (1, 1)),
        drift_sym=(x1 * (1 - theta * x1**2),),
        dispersion_sym=((sympy.Integer(1),),),
        name="cubic",
    )


def linear_2d_model():
    x1, x2 = state_symbols(2)

    def drift(x):
        return np.stack([-x[:, 0] + 0.5 * x[:, 1], -0.8 * x[:, 1]], axis=1)

    def dispersion(x):
        out = np.zeros(x.shape[:1] + (2, 2))
        out[:, 0, 0] = 1.0
        out[:, 1, 1] = 0.7
        return out

    return SdeModel(
        d=2,
        dw=2,
        drift=drift,
        dispersion=dispersion,
        drift_sym=(-x1 + sympy.Rational(1, 2) * x2, -sympy.Float(0.8) * x2),
        dispersion_sym=((sympy.Integer(1), sympy.Integer(0)), (sympy.Integer(0), sympy.Float(0.7))),
        name="linear2d",
    )


# ---------------------------------------------------------------- gaussian moments


def test_gaussian_moments_standard_normal():
    vals = gaussian_moments(0.0, 1.0, 6)
    npt.assert_allclose(vals, [1, 0, 1, 0, 3, 0, 15], atol=1e-14)


def test_gaussian_moments_dirac():
    mu = np.array([1.5, -2.0])
    vals = gaussian_moments(mu, np.zeros((2, 2)), 3)
    for idx, v in zip(graded_lex_indices(2, 3), vals):
        assert v == pytest.approx(mu[0] ** idx[0] * mu[1] ** idx[1])


def test_gaussian_moments_independent_22():
    vals = gaussian_moments(np.zeros(2), np.eye(2), 4)
    indices = graded_lex_indices(2, 4)
    assert vals[indices.index((2, 2))] == pytest.approx(1.0)
    assert vals[indices.index((4, 0))] == pytest.approx(3.0)


def test_gaussian_moments_rejects_asymmetric():
    with pytest.raises(ValueError):
        gaussian_moments(np.zeros(2), np.array([[1.0, 0.3], [0.2, 1.0]]), 2)


def test_gaussian_moments_monte_carlo_oracle():
    # correlated trivariate case, 10^7 samples accumulated in chunks
    rng = np.random.default_rng(42)
    mu = np.array([0.3, -0.5, 0.1])
    A = np.array([[1.0, 0.0, 0.0], [0.4, 0.8, 0.0], [-0.2, 0.3, 0.6]])
    Sigma = A @ A.T
    targets = [(2, 0, 0), (1, 1, 0), (2, 2, 0), (1, 1, 1), (3, 0, 1), (0, 2, 4)]
    indices = graded_lex_indices(3, 6)
    vals = gaussian_moments(mu, Sigma, 6)
    sums = np.zeros(len(targets))
    sq_sums = np.zeros(len(targets))
    n_total = 10_000_000
    chunk = 1_000_000
    for _ in range(n_total // chunk):
        x = mu + rng.standard_normal((chunk, 3)) @ A.T
        for t, idx in enumerate(targets):
            mono = x[:, 0] ** idx[0] * x[:, 1] ** idx[1] * x[:, 2] ** idx[2]
            sums[t] += mono.sum()
            sq_sums[t] += (mono**2).sum()
    for t, idx in enumerate(targets):
        mean = sums[t] / n_total
        se = math.sqrt(max(sq_sums[t] / n_total - mean**2, 0.0) / n_total)
        exact = vals[indices.index(idx)]
        assert abs(mean - exact) < 3 * se + 1e-12, (idx, mean, exact, se)


def test_gaussian_moment_set_feeds_cholesky():
    M = gaussian_moment_set([0.2, -0.1], [[1.0, 0.3], [0.3, 0.5]], order=3)
    cholesky_pd(build_gram(M.restandardized()))  # must not raise


# ---------------------------------------------------------------- EM moments


def test_em_degree_one_is_euler_mean():
    model = ou_model()
    vals = em_conditional_moments(model, [1.0], 0.1, 1)
    assert vals[1] == pytest.approx(0.9, abs=1e-14)


def test_em_degree_two():
    model = ou_model()
    x, dt = 0.7, 0.05
    vals = em_conditional_moments(model, [x], dt, 2)
    mean = x - x * dt
    b2 = 2 * 0.5**2
    assert vals[2] == pytest.approx(mean**2 + b2 * dt, rel=1e-12)


def test_em_moments_give_psd_gram():
    model = cubic_model()
    for x in (-1.2, 0.0, 0.9):
        vals = em_conditional_moments(model, [x], 0.01, 9)
        M = MomentSet.from_values(1, 5, vals).restandardized()
        cholesky_pd(build_gram(M))  # Gaussian moments are always valid


# ---------------------------------------------------------------- generator


def test_generator_constant_is_zero():
    model = ou_model()
    val = apply_generator(model, lambda x: 7.0, [0.3])
    assert val == pytest.approx(0.0, abs=1e-8)


def test_generator_ou_linear():
    model = ou_model(ell=2.0, sigma=0.5)
    for x in (-1.0, 0.4, 2.0):
        got = apply_generator(
            model, lambda v: v[0], [x], grad=lambda v: np.array([1.0]),
            hess=lambda v: np.zeros((1, 1)),
        )
        assert got == pytest.approx(-x / 2.0, rel=1e-12)


def test_generator_ou_quadratic():
    ell, sigma = 1.5, 0.5
    model = ou_model(ell=ell, sigma=sigma)
    for x in (-0.8, 0.0, 1.2):
        got = apply_generator(
            model, lambda v: v[0] ** 2, [x], grad=lambda v: np.array([2 * v[0]]),
            hess=lambda v: np.array([[2.0]]),
        )
        expected = -2 * x**2 / ell + 2 * sigma**2 / ell
        assert got == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_generator_fd_matches_analytic_on_cubic_drift():
    model = cubic_model()
    monomials = {
        (1,): (lambda v: v[0], lambda v: np.array([1.0]), lambda v: np.zeros((1, 1))),
        (2,): (lambda v: v[0] ** 2, lambda v: np.array([2 * v[0]]), lambda v: np.array([[2.0]])),
        (3,): (
            lambda v: v[0] ** 3,
            lambda v: np.array([3 * v[0] ** 2]),
            lambda v: np.array([[6 * v[0]]]),
        ),
    }
    for x in (-1.5, -0.3, 0.0, 0.7, 1.4):
        for g, grad, hess in monomials.values():
            exact = apply_generator(model, g, [x], grad=grad, hess=hess)
            fd = apply_generator(model, g, [x])
            assert fd == pytest.approx(exact, rel=1e-6, abs=1e-6)


def test_generator_2d_mixed_partials():
    model = linear_2d_model()
    # g = x1 * x2: grad = (x2, x1), hess = [[0,1],[1,0]]; b b^T diagonal
    x = np.array([0.6, -1.1])
    exact = apply_generator(
        model,
        lambda v: v[0] * v[1],
        x,
        grad=lambda v: np.array([v[1], v[0]]),
        hess=lambda v: np.array([[0.0, 1.0], [1.0, 0.0]]),
    )
    a = model.drift(x[None])[0]
    assert exact == pytest.approx(x[1] * a[0] + x[0] * a[1], rel=1e-12)
    fd = apply_generator(model, lambda v: v[0] * v[1], x)
    assert fd == pytest.approx(exact, rel=1e-6, abs=1e-6)


# ---------------------------------------------------------------- TME


def test_tme_dt_zero_is_identity():
    model = ou_model()
    assert tme_conditional_moment(model, [1.3], 0.0, (5,), 4) == pytest.approx(1.3**5)


def test_tme_ou_order_two_mean():
    model = ou_model(ell=1.0)
    x, dt = 0.8, 0.1
    got = tme_conditional_moment(model, [x], dt, (1,), 2)
    assert got == pytest.approx(x * (1 - dt + dt**2 / 2), rel=1e-12)


def test_tme_truncated_exponential_identity():
    # linear SDE: TME mean is exactly the degree-J Taylor series of exp(-dt/ell)
    ell = 1.3
    model = ou_model(ell=ell)
    x, dt = -0.6, 0.07
    for J in (1, 2, 3, 5, 8):
        got = tme_conditional_moment(model, [x], dt, (1,), J)
        series = sum((-dt / ell) ** j / math.factorial(j) for j in range(J + 1))
        assert got == pytest.approx(x * series, rel=1e-12)


def test_tme_large_order_matches_exact_mean():
    model = ou_model()
    x, dt = 1.1, 0.1
    got = tme_conditional_moment(model, [x], dt, (1,), 12)
    assert got == pytest.approx(x * math.exp(-dt), rel=1e-10)


def test_tme_order_one_degree_one_equals_em():
    model = cubic_model()
    for x in (-0.9, 0.2, 1.1):
        tme = tme_conditional_moment(model, [x], 0.05, (1,), 1)
        em = em_conditional_moments(model, [x], 0.05, 1)[1]
        assert tme == em


def test_tme_fd_mode_matches_analytic():
    # Single generator applications are good to ~1e-6 (see the cubic-drift
    # test above); the J=2 term differentiates an already-FD field whose
    # round-off noise (~eps^(1/2)) caps the nested Hessian near 1e-4 relative.
    model = cubic_model()
    for x in (-0.7, 0.4):
        a = tme_conditional_moment(model, [x], 0.02, (2,), 2, "analytic")
        b = tme_conditional_moment(model, [x], 0.02, (2,), 2, "fd")
        assert b == pytest.approx(a, rel=2e-3, abs=2e-3)


def test_tme_requires_symbolic_for_analytic():
    bare = SdeModel(
        d=1, dw=1, drift=lambda x: -x, dispersion=lambda x: np.ones(x.shape[:1] + (1, 1))
    )
    with pytest.raises(ValueError):
        tme_conditional_moment(bare, [0.5], 0.1, (1,), 2, "analytic")
    # fd mode works without symbolic expressions
    val = tme_conditional_moment(bare, [0.5], 0.1, (1,), 1, "fd")
    assert val == pytest.approx(0.5 * (1 - 0.1), rel=1e-8)


# ---------------------------------------------------------------- batch dispatch


def test_conditional_moments_batch_matches_pointwise():
    model = cubic_model()
    nodes = np.array([[-1.0], [0.1], [0.8]])
    cfg_tme = TransitionConfig(scheme="tme", tme_order=3)
    out = conditional_moments(model, nodes, 0.05, 5, cfg_tme)
    for r, idx in enumerate(graded_lex_indices(1, 5)):
        for i, x in enumerate(nodes):
            assert out[i, r] == pytest.approx(
                tme_conditional_moment(model, x, 0.05, idx, 3), rel=1e-12
            )
    cfg_em = TransitionConfig(scheme="em")
    out_em = conditional_moments(model, nodes, 0.05, 5, cfg_em)
    for i, x in enumerate(nodes):
        npt.assert_allclose(out_em[i], em_conditional_moments(model, x, 0.05, 5), rtol=1e-12)


def test_conditional_moments_discrete_bypass():
    def fn(nodes, dt, max_degree):
        out = np.zeros((nodes.shape[0], max_degree + 1))
        out[:, 0] = 1.0
        for n in range(1, max_degree + 1):
            out[:, n] = (2.0 * nodes[:, 0]) ** n
        return out

    model = SdeModel(
        d=1, dw=1, drift=lambda x: x, dispersion=lambda x: np.ones(x.shape[:1] + (1, 1)),
        conditional_moments_fn=fn,
    )
    out = conditional_moments(model, np.array([[1.5]]), 0.1, 3, TransitionConfig())
    npt.assert_allclose(out[0], [1.0, 3.0, 9.0, 27.0])


def test_conditional_mean_cov_em():
    model = linear_2d_model()
    nodes = np.array([[1.0, 1.0], [0.2, -0.4]])
    mean, cov = conditional_mean_cov(model, nodes, 0.1, TransitionConfig(scheme="em"))
    a = model.drift(nodes)
    npt.assert_allclose(mean, nodes + 0.1 * a, rtol=1e-14)
    npt.assert_allclose(cov[0], np.diag([0.1, 0.049]), atol=1e-14)


def test_conditional_mean_cov_tme_ou():
    model = ou_model()
    nodes = np.array([[0.5], [-1.0]])
    dt = 0.1
    mean, cov = conditional_mean_cov(model, nodes, dt, TransitionConfig(scheme="tme", tme_order=6))
    npt.assert_allclose(mean[:, 0], nodes[:, 0] * math.exp(-dt), rtol=1e-7)
    exact_var = 0.25 * (1 - math.exp(-2 * dt))
    npt.assert_allclose(cov[:, 0, 0], exact_var, rtol=1e-6)


def test_transition_config_validation():
    with pytest.raises(ValueError):
        TransitionConfig(scheme="milstein")
    with pytest.raises(ValueError):
        TransitionConfig(tme_order=0)
    with pytest.raises(ValueError):
        TransitionConfig(derivative_mode="autodiff")
    with pytest.raises(ValueError):
        TransitionConfig(fd_step=-1e-6)
