import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from spvb.spatial import (
    NeighborGeometry,
    SpatialDataset,
    SpatialError,
    _neighbors_brute,
    _neighbors_tree,
    build_neighbor_graph,
    cond_residuals,
    exp_correlation,
    location_order,
    max_distance,
    nngp_covariance,
    nngp_factors,
    nngp_logdensity,
    nngp_precision,
    pairwise_distances,
    prior_quadratic,
    reverse_scatter,
)


def brute_neighbors(coords, order, m):
    """Exhaustive scan: m nearest earlier locations, ties by smaller position."""
    sc = coords[order]
    out = []
    for i in range(len(sc)):
        d = np.linalg.norm(sc[:i] - sc[i], axis=1)
        idx = sorted(range(i), key=lambda j: (d[j], j))[:m]
        out.append(idx)
    return out


# --- containers -----------------------------------------------------------


def test_dataset_validates_shapes_and_finiteness():
    with pytest.raises(SpatialError):
        SpatialDataset(np.zeros((3, 3)), np.ones((3, 1)), np.zeros(3))
    with pytest.raises(SpatialError, match="row mismatch"):
        SpatialDataset(np.zeros((3, 2)), np.ones((2, 1)), np.zeros(3))
    with pytest.raises(SpatialError, match="non-finite"):
        SpatialDataset(np.zeros((2, 2)), np.ones((2, 1)), np.array([0.0, np.nan]))
    with pytest.raises(SpatialError):
        SpatialDataset(np.zeros((0, 2)), np.ones((0, 1)), np.zeros(0))


def test_dataset_promotes_vector_covariate():
    ds = SpatialDataset(np.zeros((4, 2)), np.ones(4), np.arange(4.0))
    assert ds.X.shape == (4, 1)
    assert ds.n == 4 and ds.p == 1


# --- correlation ----------------------------------------------------------


def test_exp_correlation_values():
    assert exp_correlation(0.0, 2.7) == 1.0
    assert exp_correlation(math.log(2), 1.0) == pytest.approx(0.5, abs=1e-15)
    assert exp_correlation(1.0, 1.0) == pytest.approx(0.367879441171, abs=1e-12)


def test_max_distance_matches_exhaustive(rng):
    pts = rng.uniform(0, 5, (200, 2))
    assert max_distance(pts) == pytest.approx(pairwise_distances(pts).max(), rel=1e-15)


def test_max_distance_hull_path_matches_exhaustive(rng):
    pts = rng.uniform(0, 5, (2500, 2))
    best = max(pairwise_distances(pts[i : i + 500], pts).max() for i in range(0, 2500, 500))
    assert max_distance(pts) == pytest.approx(best, rel=1e-15)


def test_max_distance_collinear_large():
    pts = np.column_stack([np.linspace(0, 7, 2500), np.zeros(2500)])
    assert max_distance(pts) == pytest.approx(7.0)


# --- ordering and graph ---------------------------------------------------


def test_location_order_policies():
    c = np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_array_equal(location_order(c), [2, 1, 0, 3])
    np.testing.assert_array_equal(location_order(c, "given"), [0, 1, 2, 3])
    np.testing.assert_array_equal(location_order(c, np.array([3, 2, 1, 0])), [3, 2, 1, 0])
    with pytest.raises(SpatialError):
        location_order(c, np.array([0, 0, 1, 2]))
    with pytest.raises(SpatialError):
        location_order(c, "random")


def test_graph_single_location():
    g = build_neighbor_graph(np.zeros((1, 2)), 15)
    assert g.neighbor_lists() == [[]]


def test_graph_collinear_three_points():
    c = np.array([[2.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    g = build_neighbor_graph(c, 1)
    np.testing.assert_array_equal(g.order, [1, 2, 0])
    assert g.neighbor_lists() == [[], [0], [1]]


def test_graph_matches_exhaustive_scan(rng):
    c = rng.uniform(0, 1, (50, 2))
    g = build_neighbor_graph(c, 5)
    assert g.neighbor_lists() == brute_neighbors(c, g.order, 5)


def test_graph_clamps_m_with_warning():
    c = np.random.default_rng(0).uniform(size=(4, 2))
    with pytest.warns(UserWarning, match="clamping"):
        g = build_neighbor_graph(c, 10)
    assert g.m == 3


def test_graph_ties_broken_by_smaller_position():
    # a point equidistant from two earlier points keeps the earlier one
    c = np.array([[0.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    g = build_neighbor_graph(c, 1, ordering="given")
    assert g.neighbor_lists()[2] == [0]


@given(
    n=st.integers(2, 60),
    m=st.integers(1, 8),
    seed=st.integers(0, 10_000),
    grid=st.booleans(),
)
def test_graph_invariants_property(n, m, seed, grid):
    r = np.random.default_rng(seed)
    c = r.integers(0, 4, (n, 2)).astype(float) if grid else r.uniform(0, 1, (n, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g = build_neighbor_graph(c, m)
    for i, row in enumerate(g.neighbor_lists()):
        assert all(j < i for j in row)
    assert g.neighbor_lists() == brute_neighbors(c, g.order, g.m)


@given(n=st.integers(10, 400), m=st.integers(1, 10), seed=st.integers(0, 10_000), grid=st.booleans())
def test_kdtree_search_equals_brute_force(n, m, seed, grid):
    r = np.random.default_rng(seed)
    c = r.integers(0, 6, (n, 2)).astype(float) if grid else r.uniform(0, 1, (n, 2))
    sc = c[location_order(c)]
    m = min(m, n - 1)
    np.testing.assert_array_equal(_neighbors_tree(sc, m), _neighbors_brute(sc, m))


def test_graph_is_deterministic(rng):
    c = rng.uniform(size=(300, 2))
    g1, g2 = build_neighbor_graph(c, 7), build_neighbor_graph(c.copy(), 7)
    np.testing.assert_array_equal(g1.nbr, g2.nbr)
    np.testing.assert_array_equal(g1.order, g2.order)


def test_truncate_nests_graph(rng):
    g = build_neighbor_graph(rng.uniform(size=(40, 2)), 6)
    t = g.truncate(3)
    np.testing.assert_array_equal(t.nbr, g.nbr[:, :3])
    assert np.all(t.counts == np.minimum(g.counts, 3))


def test_graph_rejects_bad_m():
    with pytest.raises(SpatialError):
        build_neighbor_graph(np.zeros((3, 2)), 0)


# --- factors --------------------------------------------------------------


def test_factors_no_neighbor_and_single_neighbor():
    c = np.array([[0.0, 0.0], [0.7, 0.0]])
    g = build_neighbor_graph(c, 1)
    f = nngp_factors(c, g, 1.3)
    assert f.F[0] == 1.0 and f.b_row(0).size == 0
    assert f.b_row(1)[0] == pytest.approx(math.exp(-1.3 * 0.7), abs=1e-15)
    assert f.F[1] == pytest.approx(1 - math.exp(-2 * 1.3 * 0.7), abs=1e-15)


@given(n=st.integers(2, 40), m=st.integers(1, 6), phi=st.floats(0.2, 5.0), seed=st.integers(0, 999))
def test_factor_bounds_property(n, m, phi, seed):
    c = np.random.default_rng(seed).uniform(0, 3, (n, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g = build_neighbor_graph(c, m)
    f = nngp_factors(c, g, phi)
    assert f.F[0] == 1.0
    assert np.all(f.F > 0) and np.all(f.F <= 1.0)


def test_f_monotone_in_neighbor_count(rng):
    c = rng.uniform(0, 2, (60, 2))
    prev = None
    for m in range(1, 8):
        g = build_neighbor_graph(c, m)
        F = nngp_factors(c, g, 1.5).F
        if prev is not None:
            assert np.all(F <= prev + 1e-12)
        prev = F


def test_duplicate_locations_use_jitter():
    c = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [2.0, 1.0]])
    g = build_neighbor_graph(c, 3)
    f = nngp_factors(c, g, 1.0)
    assert np.all(np.isfinite(f.b)) and np.all(f.F > 0)


def test_factors_reject_bad_phi(rng):
    c = rng.uniform(size=(5, 2))
    geom = NeighborGeometry.build(c, build_neighbor_graph(c, 2))
    for bad in (0.0, -1.0, np.inf):
        with pytest.raises(SpatialError):
            geom.factors(bad)


# --- dense oracles --------------------------------------------------------


def dense_exp_cov(coords, phi, sigma2):
    return sigma2 * np.exp(-phi * pairwise_distances(coords))


def test_full_conditioning_logdensity_matches_dense_mvn(rng):
    c = rng.uniform(0, 1, (40, 2))
    g = build_neighbor_graph(c, 39)
    f = nngp_factors(c, g, 2.0)
    w = rng.standard_normal(40)
    C = dense_exp_cov(c[g.order], 2.0, 3.0)
    ref = stats.multivariate_normal(np.zeros(40), C).logpdf(w)
    assert nngp_logdensity(w, f, 3.0) == pytest.approx(ref, abs=1e-8)


def test_full_conditioning_quadratic_matches_dense_inverse(rng):
    c = rng.uniform(0, 1, (40, 2))
    g = build_neighbor_graph(c, 39)
    f = nngp_factors(c, g, 1.2)
    w = rng.standard_normal(40)
    C = dense_exp_cov(c[g.order], 1.2, 1.0)
    assert prior_quadratic(w, f) == pytest.approx(w @ np.linalg.solve(C, w), abs=1e-8)


def test_prior_quadratic_trivial_cases():
    c = np.array([[0.0, 0.0], [0.4, 0.3]])
    g = build_neighbor_graph(c, 1)
    f = nngp_factors(c, g, 1.0)
    assert prior_quadratic(np.zeros(2), f) == 0.0
    b21 = f.b_row(1)[0]
    assert prior_quadratic(np.array([1.0, b21]), f) == pytest.approx(1.0, abs=1e-14)


@given(n=st.integers(2, 60), m=st.integers(1, 10), phi=st.floats(0.3, 4.0), seed=st.integers(0, 999))
def test_logdet_identity_property(n, m, phi, seed):
    r = np.random.default_rng(seed)
    c = r.uniform(0, 2, (n, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g = build_neighbor_graph(c, m)
    f = nngp_factors(c, g, phi)
    sign, ld = np.linalg.slogdet(nngp_covariance(f, 2.5))
    assert sign > 0
    assert ld == pytest.approx(float(np.sum(np.log(2.5 * f.F))), abs=1e-7)
    w = r.standard_normal(n)
    assert prior_quadratic(w, f) > 0


def test_precision_inverts_covariance(rng):
    c = rng.uniform(0, 2, (30, 2))
    f = nngp_factors(c, build_neighbor_graph(c, 4), 1.0)
    P = nngp_precision(f, 2.0).toarray()
    np.testing.assert_allclose(P @ nngp_covariance(f, 2.0), np.eye(30), atol=1e-9)


def test_reverse_scatter_is_transpose_of_residual_map(rng):
    c = rng.uniform(size=(25, 2))
    f = nngp_factors(c, build_neighbor_graph(c, 3), 1.0)
    # cond_residuals(v) = (I - B) v, reverse_scatter(r) = B^T r
    E = np.eye(25)
    IB = np.column_stack([cond_residuals(E[:, k], f) for k in range(25)])
    Bt = np.column_stack([reverse_scatter(E[:, k], f.nbr, f.b) for k in range(25)])
    np.testing.assert_allclose(Bt, (np.eye(25) - IB).T, atol=1e-15)
