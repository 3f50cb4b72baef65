import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from rcmlab.env import (Bernoulli, Constant, Mixture, build_box, field_from_function,
                        sample_field, walk_rng)
from rcmlab.kernelstats import (GridTooCoarse, InsufficientSamples, _Graph, a_star,
                                c_iso, c_vol, c_vol_from_distances, check_nash_inequalities,
                                connected_subsets, diffusive_bound_check, heat_kernel,
                                heat_lower_bound_curve, kernel_constants, nash_curves,
                                poisson_mix, threshold_times, transition_matrix)
from rcmlab.walk import induced_kernel


def kernel_of(law, side=7, seed=0, dim=2, alpha=0.5):
    return induced_kernel(sample_field(build_box(dim, side), law, seed), alpha)


def mixed_kernel(seed, side=7):
    for s in range(seed, seed + 50):
        try:
            return induced_kernel(sample_field(build_box(2, side), Mixture(0.7, 0.2, 0.5), s), 0.5)
        except ValueError:
            continue
    raise RuntimeError("no usable kernel")


def test_poissonization_matches_expm():
    k = mixed_kernel(1)
    W = k.matrix().toarray()
    for t in (0.0, 0.7, 5.0, 40.0):
        exact = scipy.linalg.expm(t * (W - np.eye(k.n)))
        got = transition_matrix(k, t)
        tv = 0.5 * np.abs(exact - got).sum(axis=1).max()
        assert tv <= 0.01
        assert np.abs(exact - got).max() <= 1e-10


def test_heat_kernel_point_mass_and_two_step_return():
    k = kernel_of(Constant(1.0))
    hk = heat_kernel(k, 10, 0.0)
    assert hk.at(10) == 1.0 and hk.prob.sum() == 1.0
    f = sample_field(build_box(1, 4), Constant(1.0), 0)
    assert heat_kernel(f, 0, 2).at(0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        heat_kernel(f, 0, 1.5)


def test_exact_vs_monte_carlo():
    k = mixed_kernel(3, side=10)
    t = 2.5
    ex = heat_kernel(k, int(k.sites[0]), t)
    mc = heat_kernel(k, int(k.sites[0]), t, "monte-carlo", 50_000, walk_rng(0))
    se = np.sqrt(ex.prob * (1 - ex.prob) / 50_000) + 1e-12
    assert np.all(np.abs(mc.prob - ex.prob) <= 5 * se + 1e-4)
    fx = sample_field(build_box(2, 10), Bernoulli(0.8), 2)
    ex = heat_kernel(fx, 0, 6)
    mc = heat_kernel(fx, 0, 6, "monte-carlo", 50_000, walk_rng(1))
    se = np.sqrt(ex.prob * (1 - ex.prob) / 50_000)
    assert np.all(np.abs(mc.prob - ex.prob) <= 5 * se + 1e-4)
    with pytest.raises(ValueError):
        heat_kernel(k, int(k.sites[0]), 1.0, "monte-carlo", 0, walk_rng(0))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 30.0))
def test_heat_kernel_rows_symmetry_cauchy_schwarz(seed, t):
    k = mixed_kernel(seed)
    P = transition_matrix(k, t)
    assert np.all(np.abs(P.sum(axis=1) - 1) <= 1e-10)
    assert np.abs(P - P.T).max() <= 1e-10
    d = np.diag(P)
    assert np.all(P**2 <= np.outer(d, d) + 1e-12)


def test_return_curve_constant_field_exact_and_mc():
    f = sample_field(build_box(2, 40), Constant(1.0), 0)
    ex = heat_lower_bound_curve(f, [2, 5, 10], 0, method="exact")
    # simple walk: n P(S_2n = 0) tends to 1/pi for d = 2
    assert np.all(ex.value > 0) and abs(ex.value[-1] - 1 / math.pi) < 0.05
    mc = heat_lower_bound_curve(f, [2, 5, 10], 100_000, walk_rng(0))
    assert np.all(np.abs(mc.value - ex.value) <= 4 * mc.stderr)
    assert not mc.indistinguishable.any()


def test_return_curve_rejects():
    lat = build_box(2, 6)
    iso = field_from_function(lat, lambda a, b, i: 0.0 if (a == (0, 0) or b == (0, 0)) else 1.0)
    with pytest.raises(ValueError):
        heat_lower_bound_curve(iso, [1], 100, walk_rng(0))
    f = sample_field(build_box(2, 64), Constant(1.0), 0)
    with pytest.raises(InsufficientSamples):
        heat_lower_bound_curve(f, [200], 3, walk_rng(0))


def test_c_vol_examples():
    assert c_vol_from_distances([0], [0.5, 1.0], 4.0, 2)[0] == pytest.approx(0.25 * 4)
    assert c_vol_from_distances([0], [1.0], 4.0, 2)[0] == pytest.approx(4.0)
    k = kernel_of(Constant(1.0), side=4, dim=1)
    v = c_vol(k, 0, [1.0])[0]
    assert v == pytest.approx(2 * (1 + 2 / math.e + math.exp(-2)))


def test_c_vol_grid_refinement():
    k = mixed_kernel(5, side=12)
    x = int(k.sites[0])
    for a in (0.05, 0.5, 3.0):
        lo = c_vol(k, x, [a], grid=64)[0]
        hi = c_vol(k, x, [a], grid=256)[0]
        assert abs(lo - hi) <= 0.01 * hi


def test_a_star():
    assert a_star(kernel_of(Constant(1.0), side=6)) == pytest.approx(0.25)
    k = mixed_kernel(2)
    m = k.matrix().toarray()
    np.fill_diagonal(m, 0)
    v = a_star(k)
    # graph of entries >= a_star is connected, entries > a_star is not
    from scipy.sparse.csgraph import connected_components
    assert connected_components(m >= v, directed=False)[0] == 1
    assert connected_components(m > v, directed=False)[0] > 1


def random_graph(rng, n, p):
    A = np.triu(rng.random((n, n)) < p, 1)
    return A | A.T


def brute_connected_sets(A, cap):
    n = A.shape[0]
    out = set()
    for mask in range(1, 1 << n):
        members = [i for i in range(n) if mask >> i & 1]
        if len(members) > cap:
            continue
        seen = {members[0]}
        stack = [members[0]]
        while stack:
            v = stack.pop()
            for w in members:
                if A[v, w] and w not in seen:
                    seen.add(w)
                    stack.append(w)
        if len(seen) == len(members):
            out.add(mask)
    return out


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.floats(0.1, 0.9), st.integers(1, 9), st.integers(0, 2**32))
def test_esu_matches_brute_force(n, p, cap, seed):
    A = random_graph(np.random.default_rng(seed), n, p)
    adj = [int(sum(1 << j for j in np.flatnonzero(A[i]))) for i in range(n)]
    got = list(connected_subsets(adj, cap))
    assert len(got) == len(set(got))
    assert set(got) == brute_connected_sets(A, cap)


def test_c_iso_single_sites_by_hand():
    k = kernel_of(Constant(1.0), side=6)
    r = c_iso(k, 0, 1, nu=0.25, size_cap=1)
    # Q({x}, .) = 1 and pi({x}) = 4, so the ratio is 1 / 4^{1/2}
    assert r.value == pytest.approx(0.5)
    assert r.best_set.size == 1


def test_c_iso_infeasible_and_caps():
    k = kernel_of(Constant(1.0), side=4)
    with pytest.raises(ValueError):
        c_iso(k, 0, 10**6, nu=0.45, size_cap=2)
    with pytest.raises(ValueError):
        c_iso(k, 0, 1, size_cap=13)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_heuristic_never_below_exact(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 11))
    A = random_graph(rng, n, 0.5)
    A[np.arange(n - 1), np.arange(1, n)] = A[np.arange(1, n), np.arange(n - 1)] = True
    W = np.where(A, rng.uniform(0.05, 0.25, (n, n)), 0.0)
    W = np.triu(W, 1) + np.triu(W, 1).T
    import scipy.sparse as sp
    g = _Graph(sp.csr_matrix(W), 4.0, 2, np.arange(n))
    ex = c_iso(g, 0, 2, 0.25, n // 2, "brute-force")
    he = c_iso(g, 0, 2, 0.25, n // 2, "heuristic", np.random.default_rng(seed), restarts=10, sweeps=30)
    assert he.value >= ex.value - 1e-12


def test_nash_curves_basic_properties():
    k = kernel_of(Constant(1.0), side=6)
    grid = np.linspace(0, 15, 151)
    c = nash_curves(k, 0, grid)
    assert c.M[0] == 0 and c.Q[0] == pytest.approx(math.log(4))
    assert np.all(np.diff(c.M) > 0)
    assert np.all(np.diff(c.M, 2) <= 1e-10)
    assert np.all(c.M <= c.max_distance)
    assert np.all(np.diff(c.Q) >= -1e-8)


def test_nash_inequalities_constant_and_random():
    grid = np.linspace(0.05, 15, 150)
    k = kernel_of(Constant(1.0), side=6)
    rep = check_nash_inequalities(nash_curves(k, 0, grid), kernel_constants(k, 0))
    assert rep.slack2.min() >= -1e-6 and rep.passed2
    assert rep.passed1
    for s in range(5):
        k = mixed_kernel(10 * s)
        x = int(k.sites[0])
        rep = check_nash_inequalities(nash_curves(k, x, grid), kernel_constants(k, x))
        assert rep.passed2


def test_grid_too_coarse():
    k = kernel_of(Constant(1.0), side=6)
    with pytest.raises(GridTooCoarse):
        check_nash_inequalities(nash_curves(k, 0, [0.0, 3.0, 6.0, 9.0]), kernel_constants(k, 0))


def test_nash_monte_carlo_agrees():
    k = mixed_kernel(4)
    x = int(k.sites[0])
    grid = [0.5, 2.0, 6.0]
    ex = nash_curves(k, x, grid)
    mc = nash_curves(k, x, grid, "monte-carlo", 20_000, walk_rng(2))
    assert not mc.biased
    assert np.all(np.abs(mc.M - ex.M) <= 4 * mc.M_se)
    assert np.all(np.abs(mc.Q - ex.Q) <= 4 * mc.Q_se)


def test_diffusive_bounds():
    k = kernel_of(Constant(1.0), side=64)
    with pytest.raises(ValueError):
        diffusive_bound_check(k, [0], [4.0], 1000, walk_rng(0), scale=8)
    db = diffusive_bound_check(k, [0], [32.0, 64.0], 20_000, walk_rng(0), scale=8)
    # Gaussian limit with covariance t/2: E|Y_t| = sqrt(pi t) / 2
    assert np.all(np.abs(db.euclid_ratio[0] - math.sqrt(math.pi) / 2) <= 0.03)
    assert db.suprema()["graph_ratio"][0] > 0


def test_threshold_times():
    t, T = threshold_times(5.0, 0.25, 2.0, 0.25, 1.0, 2)
    assert t == pytest.approx(2.0 * math.log(5.0) ** 2)
    assert T == pytest.approx(max(0.25 ** -2 / 2, t * math.log(t)))
