import json
import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from momentfilter.momentspace import (
    MomentSet,
    build_gram,
    build_hankels,
    count_indices,
    graded_lex_indices,
    multi_index_rank,
    standardize,
)


def gauss_raw_moments(mean, std, max_degree):
    """Raw moments of N(mean, std^2) by Gauss-Hermite integration (oracle)."""
    xi, w = np.polynomial.hermite_e.hermegauss(64)
    w = w / w.sum()
    x = mean + std * xi
    return np.array([(w * x**n).sum() for n in range(max_degree + 1)])


# ---------------------------------------------------------------- ordering


def test_graded_lex_d2():
    assert graded_lex_indices(2, 3) == (
        (0, 0), (0, 1), (1, 0), (0, 2), (1, 1), (2, 0), (0, 3), (1, 2), (2, 1), (3, 0),
    )


def test_graded_lex_d1():
    assert graded_lex_indices(1, 3) == ((0,), (1,), (2,), (3,))


def test_graded_lex_d3_degree_one_block():
    assert graded_lex_indices(3, 1) == ((0, 0, 0), (0, 0, 1), (0, 1, 0), (1, 0, 0))


@given(d=st.integers(1, 4), max_degree=st.integers(0, 9))
def test_index_count(d, max_degree):
    indices = graded_lex_indices(d, max_degree)
    assert len(indices) == count_indices(d, max_degree)
    assert len(indices) == math.comb(max_degree + d, max_degree)
    assert indices[0] == (0,) * d


@given(d=st.integers(1, 4), max_degree=st.integers(0, 9))
def test_rank_matches_enumeration(d, max_degree):
    for r, idx in enumerate(graded_lex_indices(d, max_degree)):
        assert multi_index_rank(idx) == r


def test_ordering_is_by_degree_then_lex():
    indices = graded_lex_indices(3, 5)
    degrees = [sum(i) for i in indices]
    assert degrees == sorted(degrees)
    for a, b in zip(indices, indices[1:]):
        if sum(a) == sum(b):
            assert a < b


# ---------------------------------------------------------------- MomentSet basics


def std_normal_set(order):
    """MomentSet of the 1-d standard normal from the double-factorial formula."""
    degs = np.arange(2 * order - 1 + 1)
    vals = np.array([0.0 if n % 2 else math.prod(range(1, n, 2)) or 1.0 for n in degs])
    vals[0] = 1.0
    return MomentSet.from_values(1, order, vals)


def test_momentset_validation():
    with pytest.raises(ValueError):
        MomentSet.from_values(1, 2, [2.0, 0, 1, 0])  # zeroth moment not 1
    with pytest.raises(ValueError):
        MomentSet.from_values(1, 2, [1.0, 0, 1])  # wrong length
    with pytest.raises(ValueError):
        MomentSet.from_values(1, 2, [1.0, 0, np.nan, 0])
    with pytest.raises(ValueError):
        MomentSet.from_values(1, 2, [1.0, 0, 1, 0], scale=-1.0)


def test_get_and_mean_variance():
    raw = gauss_raw_moments(2.0, 3.0, 3)
    M = MomentSet.from_values(1, 2, raw)
    assert M.get((1,)) == pytest.approx(2.0)
    npt.assert_allclose(M.mean(), [2.0], rtol=1e-12)
    npt.assert_allclose(M.variance(), [9.0], rtol=1e-10)


def test_mean_variance_in_standardized_frame():
    raw = gauss_raw_moments(-1.0, 2.0, 5)
    M = MomentSet.from_values(1, 3, raw)
    S = M.standardize_to([-1.0], [2.0])
    npt.assert_allclose(S.mean(), [-1.0], atol=1e-12)
    npt.assert_allclose(S.variance(), [4.0], rtol=1e-10)


# ---------------------------------------------------------------- standardization


def test_standardize_identity():
    M = std_normal_set(3)
    S = standardize(M, 0.0, 1.0)
    npt.assert_allclose(S.values, M.values, atol=1e-14)


def test_standardize_first_central_moment_zero():
    raw = gauss_raw_moments(1.7, 1.3, 5)
    M = MomentSet.from_values(1, 3, raw)
    S = standardize(M, 1.7, 1.0)
    assert S.get((1,)) == pytest.approx(0.0, abs=1e-12)
    assert S.get((2,)) == pytest.approx(1.3**2, rel=1e-10)


def test_standardize_gaussian_to_standard_normal():
    # Brute-force oracle: expand E[((X-2)/2)^n] by binomial sums of raw moments.
    raw = gauss_raw_moments(2.0, 2.0, 7)
    brute = np.array([
        sum(math.comb(n, k) * (-2.0) ** (n - k) * raw[k] for k in range(n + 1)) / 2.0**n
        for n in range(8)
    ])
    M = MomentSet.from_values(1, 4, raw)
    S = standardize(M, 2.0, 2.0)
    npt.assert_allclose(S.values, brute, atol=1e-9)
    npt.assert_allclose(S.values, std_normal_set(4).values, atol=1e-8)


def test_standardize_rejects_bad_sigma():
    M = std_normal_set(2)
    with pytest.raises(ValueError):
        standardize(M, 0.0, 0.0)
    with pytest.raises(ValueError):
        standardize(M, 0.0, -2.0)
    with pytest.raises(ValueError):
        standardize(M.standardize_to([1.0], [2.0]), 0.0, 1.0)  # not raw


def test_affine_transform_matches_brute_force_2d():
    rng = np.random.default_rng(7)
    d, order = 2, 3
    max_degree = 2 * order - 1
    indices = graded_lex_indices(d, max_degree)
    vals = rng.normal(size=len(indices))
    vals[0] = 1.0
    M = MomentSet.from_values(d, order, vals)
    mu = np.array([0.4, -1.2])
    sigma = np.array([1.5, 0.7])
    S = standardize(M, mu, sigma)

    def brute(target):
        total = 0.0
        for k1 in range(target[0] + 1):
            for k2 in range(target[1] + 1):
                c = (
                    math.comb(target[0], k1) * math.comb(target[1], k2)
                    * (-mu[0]) ** (target[0] - k1) * (-mu[1]) ** (target[1] - k2)
                )
                total += c * M.get((k1, k2))
        return total / sigma[0] ** target[0] / sigma[1] ** target[1]

    for idx in indices:
        assert S.get(idx) == pytest.approx(brute(idx), rel=1e-10, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    d=st.integers(1, 3),
    order=st.integers(1, 4),
    seed=st.integers(0, 2**32 - 1),
)
def test_standardize_round_trip(d, order, seed):
    # moments of a genuine product mixture, standardized near its own
    # mean/std -- the frames the filter actually uses
    rng = np.random.default_rng(seed)
    max_degree = 2 * order - 1
    per_axis = []
    for _ in range(d):
        m1 = gauss_raw_moments(rng.uniform(-1, 1), rng.uniform(0.5, 1.5), max_degree)
        m2 = gauss_raw_moments(rng.uniform(-1, 1), rng.uniform(0.5, 1.5), max_degree)
        per_axis.append(0.5 * (m1 + m2))
    indices = graded_lex_indices(d, max_degree)
    vals = np.array([math.prod(per_axis[i][n] for i, n in enumerate(idx)) for idx in indices])
    M = MomentSet.from_values(d, order, vals)
    sigma = np.sqrt(M.variance()) if order >= 2 else np.ones(d)
    S = standardize(M, M.mean(), sigma)
    back = S.to_raw()
    tol = 1e-12 * max(1.0, np.abs(M.values).max())
    npt.assert_allclose(back.values, M.values, rtol=1e-12, atol=tol)


def test_restandardized_recenters():
    raw = gauss_raw_moments(3.0, 0.5, 5)
    M = MomentSet.from_values(1, 3, raw)
    S = M.restandardized()
    npt.assert_allclose(S.center, [3.0], rtol=1e-12)
    npt.assert_allclose(S.scale, [0.5], rtol=1e-9)
    assert S.get((1,)) == pytest.approx(0.0, abs=1e-10)
    assert S.get((2,)) == pytest.approx(1.0, rel=1e-9)
    # same law, different frame
    npt.assert_allclose(S.mean(), M.mean(), rtol=1e-10)
    npt.assert_allclose(S.variance(), M.variance(), rtol=1e-8)


# ---------------------------------------------------------------- Gram / Hankel


def test_gram_layout_d2():
    d, order = 2, 2
    indices = graded_lex_indices(d, 2 * order - 1)
    # distinct primes make placement errors visible
    primes = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29]
    vals = np.array(primes[: len(indices)], dtype=float)
    vals[0] = 1.0
    M = MomentSet.from_values(d, order, vals)
    m = {idx: M.get(idx) for idx in indices}
    G = build_gram(M)
    expected = np.array([
        [m[(0, 0)], m[(0, 1)], m[(1, 0)]],
        [m[(0, 1)], m[(0, 2)], m[(1, 1)]],
        [m[(1, 0)], m[(1, 1)], m[(2, 0)]],
    ])
    npt.assert_array_equal(G, expected)


def test_hankel_layout_d2():
    d, order = 2, 2
    indices = graded_lex_indices(d, 2 * order - 1)
    vals = np.arange(1.0, len(indices) + 1)
    vals[0] = 1.0
    M = MomentSet.from_values(d, order, vals)
    m = {idx: M.get(idx) for idx in indices}
    H = build_hankels(M)
    expected_1 = np.array([
        [m[(1, 0)], m[(1, 1)], m[(2, 0)]],
        [m[(1, 1)], m[(1, 2)], m[(2, 1)]],
        [m[(2, 0)], m[(2, 1)], m[(3, 0)]],
    ])
    expected_2 = np.array([
        [m[(0, 1)], m[(0, 2)], m[(1, 1)]],
        [m[(0, 2)], m[(0, 3)], m[(1, 2)]],
        [m[(1, 1)], m[(1, 2)], m[(2, 1)]],
    ])
    assert H.shape == (2, 3, 3)
    npt.assert_array_equal(H[0], expected_1)
    npt.assert_array_equal(H[1], expected_2)


def test_gram_dirac_n1():
    M = MomentSet.from_values(1, 1, [1.0, 4.2])  # Dirac at 4.2
    npt.assert_array_equal(build_gram(M), [[1.0]])
    npt.assert_array_equal(build_hankels(M)[0], [[4.2]])


def test_gram_standard_normal_n2():
    M = std_normal_set(2)
    npt.assert_array_equal(build_gram(M), np.eye(2))
    npt.assert_array_equal(build_hankels(M)[0], [[0.0, 1.0], [1.0, 0.0]])


def test_gram_psd_for_genuine_distribution():
    # mixture of two Gaussians: PSD Gram guaranteed
    raw = 0.5 * gauss_raw_moments(-1.0, 0.6, 9) + 0.5 * gauss_raw_moments(1.5, 0.9, 9)
    M = MomentSet.from_values(1, 5, raw)
    G = build_gram(M)
    npt.assert_allclose(G, G.T, atol=0)
    eigvals = np.linalg.eigvalsh(G)
    assert eigvals.min() > 0


def test_gram_symmetry_d3():
    rng = np.random.default_rng(11)
    vals = rng.normal(size=count_indices(3, 5))
    vals[0] = 1.0
    M = MomentSet.from_values(3, 3, vals)
    G = build_gram(M)
    H = build_hankels(M)
    npt.assert_array_equal(G, G.T)
    for axis in range(3):
        npt.assert_array_equal(H[axis], H[axis].T)


# ---------------------------------------------------------------- serialization


def test_json_round_trip():
    raw = gauss_raw_moments(0.3, 1.1, 5)
    M = MomentSet.from_values(1, 3, raw, center=0.0, scale=1.0)
    S = M.restandardized()
    back = MomentSet.from_json(S.to_json())
    npt.assert_array_equal(back.values, S.values)
    npt.assert_array_equal(back.center, S.center)
    npt.assert_array_equal(back.scale, S.scale)
    assert back.d == S.d and back.order == S.order


def test_json_rejects_missing_and_duplicate_indices():
    M = std_normal_set(2)
    data = M.to_json_dict()
    missing = dict(data, moments=data["moments"][:-1])
    with pytest.raises(ValueError):
        MomentSet.from_json_dict(missing)
    dup = dict(data, moments=data["moments"] + [data["moments"][-1]])
    with pytest.raises(ValueError):
        MomentSet.from_json_dict(dup)
    bad = json.loads(M.to_json())
    del bad["scale"]
    with pytest.raises(ValueError):
        MomentSet.from_json_dict(bad)
