import math

import numpy as np
import numpy.testing as npt
import pytest

from momentfilter.baselines import kalman_ou
from momentfilter.filtering import (
    NLL_SENTINEL,
    FilterConfig,
    MeasurementModel,
    nll_objective,
    predict_moments,
    run_moment_filter,
    update_moments,
)
from momentfilter.models import gaussian_measurement, make_benes_bernoulli, make_ou
from momentfilter.momentspace import MomentSet
from momentfilter.quadrature import moment_quadrature
from momentfilter.transition import (
    SdeModel,
    TransitionConfig,
    gaussian_moment_set,
    gaussian_moments,
)

EM = FilterConfig(transition=TransitionConfig(scheme="em"))


def mixture_set(order):
    vals = 0.5 * (
        gaussian_moments(-0.5, 0.05, 2 * order - 1)
        + gaussian_moments(0.5, 0.05, 2 * order - 1)
    )
    return MomentSet.from_values(1, order, vals).restandardized()


# ------------------------------------------------------------------- predict


def test_predict_dirac_prior_single_node():
    # order 1 carries one node; EM degree-1 moment is x + a(x) dt exactly
    ou = make_ou()
    prior = MomentSet.from_values(1, 1, [1.0, 0.7])
    pred = predict_moments(prior, ou.sde, 0.1, EM)
    assert pred.mean()[0] == pytest.approx(0.7 * 0.9, abs=1e-14)


def test_predict_em_matches_linear_kalman_prediction():
    ou = make_ou()
    m0, p0, dt = 0.3, 0.2, 0.1
    prior = gaussian_moment_set(m0, p0, order=5).restandardized()
    pred = predict_moments(prior, ou.sde, dt, EM)
    F_em = 1.0 - dt  # Euler mean factor for drift -x
    Q_em = (2 * 0.5**2) * dt  # b^2 dt
    assert pred.mean()[0] == pytest.approx(F_em * m0, abs=1e-8)
    assert pred.variance()[0] == pytest.approx(F_em**2 * p0 + Q_em, abs=1e-8)


def test_predict_dt_zero_is_identity():
    prior = mixture_set(4)
    for config in (EM, FilterConfig()):
        pred = predict_moments(prior, make_ou().sde, 0.0, config)
        npt.assert_allclose(pred.to_raw().values, prior.to_raw().values, atol=1e-10)


# -------------------------------------------------------------------- update


def test_update_constant_likelihood_is_identity():
    prior = mixture_set(4)
    c = 0.37
    meas = MeasurementModel(log_density=lambda y, nodes: np.full(nodes.shape[0], math.log(c)))
    post, h = update_moments(prior, 0.0, meas, FilterConfig())
    assert h == pytest.approx(c, rel=1e-12)
    npt.assert_allclose(post.to_raw().values, prior.to_raw().values, rtol=1e-10, atol=1e-12)


def test_update_gaussian_conjugate():
    # the N=8 rule on an N(0,1) prior is 8-point Gauss-Hermite, and the
    # reweighted variance it produces is 0.502211... (the likelihood is not
    # a polynomial); the exact conjugate value 0.5 is approached as N grows
    prior = gaussian_moment_set(0.0, 1.0, order=8).restandardized()
    post, h = update_moments(prior, 0.0, gaussian_measurement(1.0), FilterConfig())
    assert post.mean()[0] == pytest.approx(0.0, abs=1e-6)
    assert post.variance()[0] == pytest.approx(0.5, abs=3e-3)
    # predictive density of y = 0 under N(0, 1 + 1)
    assert h == pytest.approx(1.0 / math.sqrt(4.0 * math.pi), rel=1e-3)

    prior12 = gaussian_moment_set(0.0, 1.0, order=12).restandardized()
    post12, _ = update_moments(prior12, 0.0, gaussian_measurement(1.0), FilterConfig())
    assert post12.variance()[0] == pytest.approx(0.5, abs=1e-3)


def test_update_likelihood_scaling_invariance():
    prior = mixture_set(5)
    base = gaussian_measurement(1.0)
    c = 7.3
    scaled = MeasurementModel(
        log_density=lambda y, nodes: base.log_density(y, nodes) + math.log(c)
    )
    post1, h1 = update_moments(prior, 0.4, base, FilterConfig())
    post2, h2 = update_moments(prior, 0.4, scaled, FilterConfig())
    assert h2 == pytest.approx(c * h1, rel=1e-12)
    npt.assert_allclose(post2.values, post1.values, rtol=1e-12, atol=1e-14)


def test_update_matches_raw_change_of_measure():
    # the standardized-frame computation must agree with the plain
    # reweighting m_n = sum w l^n p / sum w p done in raw coordinates
    prior = mixture_set(4)
    meas = gaussian_measurement(0.8)
    y = 0.3
    rule = moment_quadrature(prior)
    lik = np.exp(meas.log_density(y, rule.nodes))
    wl = rule.weights * lik
    raw = np.array(
        [(wl @ rule.nodes[:, 0] ** n) / wl.sum() for n in range(2 * prior.order)]
    )
    post, _ = update_moments(prior, y, meas, FilterConfig())
    npt.assert_allclose(post.to_raw().values, raw, rtol=1e-9, atol=1e-12)


def test_update_zero_density_everywhere_diverges():
    prior = mixture_set(3)
    meas = MeasurementModel(log_density=lambda y, nodes: np.full(nodes.shape[0], -np.inf))
    from momentfilter.errors import NonPositiveNormalizerError

    with pytest.raises(NonPositiveNormalizerError):
        update_moments(prior, 0.0, meas, FilterConfig())


# ------------------------------------------------------------------ full runs


def test_empty_measurement_sequence():
    ou = make_ou()
    traj = run_moment_filter(ou.sde, ou.meas, [], np.array([]), ou.init_moments(4))
    assert traj.steps == ()
    assert traj.nll == 0.0
    assert not traj.diverged


def test_ou_filter_tracks_exact_kalman():
    # the error budget here is TME truncation (order 6) plus roundoff; the
    # quadrature itself is exact for the polynomial conditional moments
    ou = make_ou()
    rng = np.random.default_rng(np.random.SeedSequence((7, 0)))
    from momentfilter.models import simulate

    times = ou.default_times(100)
    _, ys = simulate(ou, times, rng)
    config = FilterConfig(transition=TransitionConfig(scheme="tme", tme_order=6))
    traj = run_moment_filter(ou.sde, ou.meas, ys, times, ou.init_moments(11), config)
    assert not traj.diverged
    exact = kalman_ou(1.0, 0.5, 0.1, ys)
    mean_err = np.abs(traj.means()[:, 0] - exact.means)
    assert mean_err.max() <= 1e-5
    assert abs(traj.nll - exact.nll) <= 1e-4 * len(ys)


def test_updated_zeroth_moment_is_one():
    model = make_benes_bernoulli()
    rng = np.random.default_rng(11)
    from momentfilter.models import simulate

    times = model.default_times(20)
    _, ys = simulate(model, times, rng)
    traj = run_moment_filter(model.sde, model.meas, ys, times, model.init_moments(4))
    assert not traj.diverged
    for step in traj.steps:
        assert step.updated.values[0] == pytest.approx(1.0, abs=1e-10)
        assert step.updated.to_raw().values[0] == pytest.approx(1.0, abs=1e-10)
        assert step.likelihood_increment > 0


def test_bernoulli_positive_observation_pulls_mean_up():
    model = make_benes_bernoulli()
    prior = model.init_moments(6)
    post, _ = update_moments(prior, 1.0, model.meas, FilterConfig())
    assert post.mean()[0] > prior.mean()[0]


def test_midrun_divergence_keeps_prefix_intact():
    calls = {"n": 0}

    def cond_fn(nodes, dt, max_degree):
        calls["n"] += 1
        if calls["n"] >= 3:  # third predict emits a Dirac: singular Gram next
            out = np.zeros((nodes.shape[0], max_degree + 1))
            out[:, 0] = 1.0
            return out
        return np.stack(
            [gaussian_moments(x, 0.04, max_degree) for x in nodes[:, 0]]
        )

    model = SdeModel(
        d=1,
        dw=1,
        drift=lambda x: -x,
        dispersion=lambda x: np.ones(x.shape[:1] + (1, 1)),
        conditional_moments_fn=cond_fn,
    )
    meas = gaussian_measurement(1.0)
    M0 = gaussian_moment_set(0.0, 1.0, order=3).restandardized()
    times = np.array([0.1, 0.2, 0.3, 0.4])
    traj = run_moment_filter(model, meas, np.zeros(4), times, M0)
    assert traj.diverged_at == 3
    assert len(traj.steps) == 3
    assert traj.steps[-1].diverged
    assert traj.steps[-1].reason == "gram not positive definite"
    assert traj.steps[-1].updated is None
    for step in traj.steps[:2]:
        assert not step.diverged
        assert np.isfinite(step.updated.values).all()
    assert math.isfinite(traj.nll)
    means = traj.means()
    assert np.isfinite(means[:2]).all() and np.isnan(means[2]).all()

    calls["n"] = 0
    assert nll_objective(model, meas, np.zeros(4), times, M0) == NLL_SENTINEL


def test_nll_objective_matches_trajectory_when_clean():
    ou = make_ou()
    rng = np.random.default_rng(2)
    from momentfilter.models import simulate

    times = ou.default_times(10)
    _, ys = simulate(ou, times, rng)
    M0 = ou.init_moments(5)
    traj = run_moment_filter(ou.sde, ou.meas, ys, times, M0)
    assert nll_objective(ou.sde, ou.meas, ys, times, M0) == traj.nll


def test_filter_determinism():
    ou = make_ou()
    rng = np.random.default_rng(13)
    from momentfilter.models import simulate

    times = ou.default_times(15)
    _, ys = simulate(ou, times, rng)
    t1 = run_moment_filter(ou.sde, ou.meas, ys, times, ou.init_moments(6))
    t2 = run_moment_filter(ou.sde, ou.meas, ys, times, ou.init_moments(6))
    assert t1.nll == t2.nll
    assert np.array_equal(t1.means(), t2.means())
    assert np.array_equal(t1.variances(), t2.variances())


def test_times_validation():
    ou = make_ou()
    M0 = ou.init_moments(3)
    with pytest.raises(ValueError):
        run_moment_filter(ou.sde, ou.meas, [0.0], np.array([0.2, 0.1]), M0)
    with pytest.raises(ValueError):
        run_moment_filter(ou.sde, ou.meas, [0.0, 0.0], np.array([0.1, 0.1]), M0)
    with pytest.raises(ValueError):
        run_moment_filter(ou.sde, ou.meas, [0.0], np.array([0.1]), M0,
                          FilterConfig(t0=0.5))
    with pytest.raises(ValueError):
        FilterConfig(repair="median")
