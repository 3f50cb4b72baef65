import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from rcmlab.env import (Bernoulli, Constant, HeavyTail, Mixture, UniformOpen, build_box,
                        derived_seed, edge_uniforms, field_from_function, load_field,
                        parse_law, sample_field, save_field, shift_field)


@pytest.mark.parametrize("dim,side,boundary,sites,edges", [
    (1, 4, "periodic", 4, 4),
    (2, 3, "periodic", 9, 18),
    (2, 3, "free", 9, 12),
    (3, 4, "periodic", 64, 192),
    (3, 3, "free", 27, 54),
])
def test_box_counts(dim, side, boundary, sites, edges):
    lat = build_box(dim, side, boundary)
    assert (lat.n_sites, lat.n_edges) == (sites, edges)


def test_free_box_edge_count_enumeration():
    # 2 L (L - 1) edges by direct enumeration of horizontal and vertical pairs
    L = 5
    lat = build_box(2, L, "free")
    pairs = {(a, b) for a in range(L * L) for b in range(L * L)
             if a < b and abs(a % L - b % L) + abs(a // L - b // L) == 1}
    got = {tuple(sorted(p)) for p in zip(lat.edge_tail.tolist(), lat.edge_head.tolist())}
    assert got == pairs


def test_two_site_torus_has_distinct_edges():
    lat = build_box(1, 2)
    assert lat.n_edges == 2
    assert lat.neighbors[0].tolist() == [1, 1]
    assert lat.port_edge[0, 0] != lat.port_edge[0, 1]


def test_coords_roundtrip_and_wrap():
    lat = build_box(2, 5)
    c = lat.coords()
    assert np.array_equal(lat.index(c), np.arange(25))
    assert lat.index([5, -1]) == lat.index([0, 4])
    free = build_box(2, 5, "free")
    assert free.index([5, 0]) == -1


def test_invalid_box():
    with pytest.raises(ValueError):
        build_box(0, 4)
    with pytest.raises(ValueError):
        build_box(2, 1)
    with pytest.raises(ValueError):
        build_box(2, 4, "mirror")


def test_constant_and_bernoulli_one():
    lat = build_box(2, 8)
    assert np.all(sample_field(lat, Constant(1.0), 3).weights == 1.0)
    assert np.all(sample_field(lat, Bernoulli(1.0), 3).weights == 1.0)


def test_bernoulli_open_fraction_within_3_sigma():
    lat = build_box(2, 64)
    w = sample_field(lat, Bernoulli(0.75), 11).weights
    n = w.size
    assert abs((w > 0).mean() - 0.75) <= 3 * np.sqrt(0.75 * 0.25 / n)


@pytest.mark.parametrize("law", [UniformOpen(), HeavyTail(0.5), HeavyTail(3.0),
                                 Mixture(0.6, 0.4, 0.3)])
def test_continuous_laws_ks(law):
    u = edge_uniforms(5, 100_000)
    x = law.transform(u)
    assert stats.kstest(x, law.cdf).pvalue > 1e-3


def test_mixture_masses():
    law = Mixture(0.85, 0.05, 0.5)
    w = law.transform(edge_uniforms(2, 200_000))
    n = w.size
    for frac, p in [((w >= 0.5).mean(), 0.85), (((w > 0) & (w < 0.5)).mean(), 0.05),
                    ((w == 0).mean(), 0.10)]:
        assert abs(frac - p) <= 4 * np.sqrt(p * (1 - p) / n)


def test_laws_stay_in_unit_interval():
    u = np.array([0.0, 1e-300, 0.5, np.nextafter(1.0, 0.0)])
    for law in (Constant(0.3), Bernoulli(0.2), UniformOpen(), HeavyTail(0.1),
                Mixture(0.5, 0.5, 0.5)):
        x = law.transform(u)
        assert np.all((x >= 0) & (x <= 1))


@pytest.mark.parametrize("text,cls", [("constant(0.3)", Constant), ("bernoulli(0.75)", Bernoulli),
                                      ("uniform", UniformOpen), ("heavytail(0.5)", HeavyTail),
                                      ("mixture(0.85,0.05,0.5)", Mixture)])
def test_parse_law_roundtrip(text, cls):
    law = parse_law(text)
    assert isinstance(law, cls)
    assert parse_law(law.describe()) == law


@pytest.mark.parametrize("bad", ["gauss(1)", "bernoulli(1.5)", "constant(0)", "mixture(0.9,0.2,0.5)",
                                 "bernoulli", "heavytail(-1)"])
def test_parse_law_rejects(bad):
    with pytest.raises(ValueError):
        parse_law(bad)


def test_determinism_and_partial_streams():
    a = edge_uniforms(42, 1000)
    assert np.array_equal(a, edge_uniforms(42, 1000))
    assert np.array_equal(a[37:611], edge_uniforms(42, 1000, 37, 611))
    assert not np.array_equal(a, edge_uniforms(43, 1000))


def test_field_validation():
    lat = build_box(1, 4)
    with pytest.raises(ValueError):
        field_from_function(lat, lambda a, b, i: 1.5)
    with pytest.raises(ValueError):
        field_from_function(lat, lambda a, b, i: np.nan)
    f = sample_field(lat, UniformOpen(), 0)
    with pytest.raises(ValueError):
        f.weights[0] = 0.3


def test_shift_identity_inverse_and_marked_edge():
    lat = build_box(2, 6)
    f = sample_field(lat, UniformOpen(), 9)
    assert np.array_equal(shift_field(f, (0, 0)).weights, f.weights)
    assert np.array_equal(shift_field(shift_field(f, (2, -3)), (-2, 3)).weights, f.weights)
    # single mark on the edge (0,0)-(1,0)
    mark = field_from_function(lat, lambda a, b, i: 1.0 if (a, i) == ((0, 0), 0) else 0.0)
    g = shift_field(mark, (1, 0))
    e = lat.edge_index([-1, 0], 0)
    assert np.flatnonzero(g.weights).tolist() == [e]
    assert lat.edge_head[e] == lat.index([0, 0])


def test_shift_rejects_free_box():
    f = sample_field(build_box(2, 4, "free"), UniformOpen(), 0)
    with pytest.raises(ValueError):
        shift_field(f, (1, 0))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(2, 5), st.lists(st.integers(-7, 7), min_size=3, max_size=3),
       st.lists(st.integers(-7, 7), min_size=3, max_size=3), st.integers(0, 2**32))
def test_shift_group_action(dim, side, z1, z2, seed):
    lat = build_box(dim, side)
    f = sample_field(lat, UniformOpen(), seed)
    z1, z2 = np.array(z1[:dim]), np.array(z2[:dim])
    lhs = shift_field(shift_field(f, z1), z2).weights
    assert np.array_equal(lhs, shift_field(f, z1 + z2).weights)
    # weights are carried with their edge: port weights move with the sites
    g = shift_field(f, z1)
    src = lat.index(lat.coords() + z1)
    assert np.array_equal(g.port_weights, f.port_weights[src])


@pytest.mark.parametrize("suffix", [".csv", ".bin"])
def test_save_load_roundtrip(tmp_path, suffix):
    f = sample_field(build_box(2, 5, "free"), Mixture(0.7, 0.2, 0.5), 4)
    g = load_field(save_field(f, tmp_path / f"field{suffix}"))
    assert np.array_equal(f.weights, g.weights)
    assert g.lattice == f.lattice and g.seed == 4 and g.law == f.law


def test_port_weights_symmetric():
    f = sample_field(build_box(2, 4), UniformOpen(), 1)
    lat = f.lattice
    for x in range(lat.n_sites):
        for k in range(lat.n_ports):
            y = lat.neighbors[x, k]
            assert f.port_weights[x, k] == f.port_weights[y, k ^ 1]


def test_derived_seed():
    assert derived_seed(17, 0) == 17
    assert derived_seed(17, 1) != derived_seed(17, 2)
    assert derived_seed(17, 1) == derived_seed(17, 1)
