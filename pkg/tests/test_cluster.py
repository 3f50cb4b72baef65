import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rcmlab.cluster import (CLOSED, UNREACHABLE, chemical_distance, diameter_tail,
                            good_block_event, hole_components, label_clusters,
                            sample_with_origin, HoleComponent)
from rcmlab.env import (Bernoulli, Constant, Mixture, UniformOpen, build_box,
                        field_from_function, sample_field)


def union_find_labels(lat, keep):
    """Independent oracle: plain union-find over kept edges."""
    parent = list(range(lat.n_sites))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for e in np.flatnonzero(keep):
        a, b = find(int(lat.edge_tail[e])), find(int(lat.edge_head[e]))
        if a != b:
            parent[max(a, b)] = min(a, b)
    touched = np.zeros(lat.n_sites, bool)
    touched[lat.edge_tail[keep]] = True
    touched[lat.edge_head[keep]] = True
    groups = {}
    for s in range(lat.n_sites):
        if touched[s]:
            groups.setdefault(find(s), []).append(s)
    return sorted(groups.values(), key=lambda g: g[0])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(2, 6), st.sampled_from(["periodic", "free"]),
       st.floats(0.2, 0.9), st.integers(0, 2**32))
def test_labels_match_union_find(dim, side, boundary, p, seed):
    lat = build_box(dim, side, boundary)
    f = sample_field(lat, Bernoulli(p), seed)
    lab = label_clusters(f, 0.0)
    groups = union_find_labels(lat, f.weights > 0)
    assert lab.n_components == len(groups)
    for k, g in enumerate(groups):
        assert np.all(lab.labels[g] == k)
    assert lab.sizes.tolist() == [len(g) for g in groups]
    assert int((lab.labels == CLOSED).sum()) == lat.n_sites - sum(map(len, groups))


def test_constant_field_single_component():
    lab = label_clusters(sample_field(build_box(2, 7), Constant(1.0), 0), 0.0)
    assert lab.n_components == 1 and lab.largest_size == 49
    lab = label_clusters(sample_field(build_box(2, 7), Bernoulli(1.0), 0), 0.5)
    assert lab.n_components == 1 and lab.largest_size == 49


def test_cut_row_gives_two_components():
    # 4x4 free box; every vertical bond between rows 0 and 1 is closed
    lat = build_box(2, 4, "free")
    f = field_from_function(lat, lambda a, b, i: 0.0 if (i == 1 and a[1] == 0) else 1.0)
    lab = label_clusters(f, 0.0)
    assert lab.n_components == 2
    assert lab.sizes.tolist() == [4, 12]
    assert lab.largest == 1 and not lab.tie


def test_tie_breaks_to_lowest_site():
    lat = build_box(1, 4, "free")
    f = field_from_function(lat, lambda a, b, i: 0.0 if a == (1,) else 1.0)
    lab = label_clusters(f, 0.0)
    assert lab.sizes.tolist() == [2, 2]
    assert lab.tie and lab.largest == 0


def test_threshold_range():
    f = sample_field(build_box(1, 4), UniformOpen(), 0)
    with pytest.raises(ValueError):
        label_clusters(f, 1.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(2, 6), st.integers(0, 2**32),
       st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_threshold_monotonicity(dim, side, seed, a, b):
    lo, hi = sorted((a, b))
    f = sample_field(build_box(dim, side), UniformOpen(), seed)
    la, lb = label_clusters(f, lo), label_clusters(f, hi)
    assert lb.largest_size <= la.largest_size
    # raising the threshold never merges: each high component sits in one low component
    for k in range(lb.n_components):
        assert np.unique(la.labels[lb.labels == k]).size == 1


def test_no_holes_on_constant_field():
    f = sample_field(build_box(2, 6), Constant(1.0), 0)
    assert hole_components(f, 0.5) == []


def test_pendant_weak_edge_is_one_hole():
    lat = build_box(2, 5, "free")
    # site (4,4) hangs off (3,4) by a weak edge; every edge into (4,4) but that one is closed
    def w(a, b, i):
        if b == (4, 4) or a == (4, 4):
            return 0.25 if (a, b) == ((3, 4), (4, 4)) else 0.0
        return 1.0
    f = field_from_function(lat, w)
    holes = hole_components(f, 0.5)
    assert len(holes) == 1
    h = holes[0]
    assert h.size == 1 and h.diameter == 0 and h.anchor == lat.index([4, 4])
    assert h.boundary.tolist() == [lat.index([3, 4])]


def test_hole_diameter_of_a_line():
    lat = build_box(1, 10)
    # strong edges 0..5, weak edges elsewhere: hole sites 7, 8, 9 joined weakly
    f = field_from_function(lat, lambda a, b, i: 1.0 if a[0] < 6 else 0.2)
    holes = hole_components(f, 0.5)
    assert len(holes) == 1
    assert holes[0].sites.tolist() == [7, 8, 9] and holes[0].diameter == 2


def test_hole_needs_strong_cluster():
    f = sample_field(build_box(2, 4), Constant(0.3), 0)
    with pytest.raises(ValueError):
        hole_components(f, 0.5)


def _sample(diam, origin):
    return [HoleComponent(origin, np.array([origin]), diam, np.array([1]))]


def test_tail_counting():
    samples = [[] for _ in range(99)] + [_sample(3, 0)]
    tail = diameter_tail(samples, "origin")
    assert tail.tail_prob[3] == pytest.approx(0.01)
    assert tail.tail_prob[0] == pytest.approx(0.01)
    empty = diameter_tail([[] for _ in range(100)], "origin")
    assert np.all(empty.tail_prob[1:] == 0)


def test_tail_needs_100_samples():
    with pytest.raises(ValueError):
        diameter_tail([[]] * 99)


def test_site_mode_and_fit(tmp_path):
    lat = build_box(2, 32)
    law = Mixture(0.85, 0.05, 0.5)
    samples = [hole_components(sample_field(lat, law, s), 0.5) for s in range(100)]
    tail = diameter_tail(samples, "site", lat.n_sites)
    assert np.all(np.diff(tail.tail_prob) <= 0)
    slope, _, r2 = tail.fit_log_tail()
    assert slope < 0
    text = tail.save_csv(tmp_path / "t.csv").read_text().splitlines()
    assert text[0] == "n,tail_prob,count" and len(text) == tail.n.size + 1


def test_good_block_trivial_cases():
    lat = build_box(2, 13, "free")
    ones = sample_field(lat, Constant(1.0), 0)
    assert good_block_event(ones, 4, (1, 1), 1.0) == (True, True)
    zero = field_from_function(lat, lambda a, b, i: 0.0)
    assert good_block_event(zero, 4, (1, 1), 0.5) == (False, False)
    weak = sample_field(lat, Constant(0.3), 0)
    assert good_block_event(weak, 4, (1, 1), 0.5) == (True, False)
    with pytest.raises(ValueError):
        good_block_event(ones, 4, (0, 0), 0.5)
    with pytest.raises(ValueError):
        good_block_event(sample_field(build_box(2, 13), Constant(1.0), 0), 4, (1, 1), 0.5)


def test_good_block_two_clusters_fail():
    # a closed line through the block splits it into two clusters reaching the boundary
    lat = build_box(2, 13, "free")
    f = field_from_function(lat, lambda a, b, i: 0.0 if (i == 0 and a[0] == 5) else 1.0)
    assert good_block_event(f, 4, (1, 1), 0.5) == (False, False)


def test_good_block_probability_increases():
    freq = []
    for L in (2, 4, 8):
        lat = build_box(2, 3 * L + 1, "free")
        hits = sum(good_block_event(sample_field(lat, Bernoulli(0.7), s), L, (1, 1), 0.5)[0]
                   for s in range(300))
        freq.append(hits / 300)
    assert freq[0] < freq[1] < freq[2]


def test_chemical_distance_examples():
    lat = build_box(2, 5, "free")
    f = sample_field(lat, Constant(1.0), 0)
    lab = label_clusters(f, 0.5)
    assert chemical_distance(lab, 7, 7) == 0
    assert chemical_distance(lab, 7, 8) == 1
    # wall at x = 2 for y <= 3 forces a detour through the top row
    wall = field_from_function(lat, lambda a, b, i: 0.1 if (i == 0 and a[0] in (1, 2) and a[1] <= 3) else 1.0)
    lab = label_clusters(wall, 0.5)
    x, y = lat.index([1, 0]), lat.index([3, 0])
    assert chemical_distance(lab, x, y) == 2 + 4 + 4
    iso = field_from_function(lat, lambda a, b, i: 0.0 if (a == (0, 0) or b == (0, 0)) else 1.0)
    assert chemical_distance(label_clusters(iso, 0.5), 0, 6) == UNREACHABLE


def test_sample_with_origin_conditions():
    lat = build_box(2, 8)
    for s in range(20):
        f = sample_with_origin(lat, Bernoulli(0.6), s, 0.0)
        assert label_clusters(f, 0.0).in_largest[0]
    with pytest.raises(RuntimeError):
        sample_with_origin(lat, Constant(0.3), 0, 0.5, max_attempts=5)
