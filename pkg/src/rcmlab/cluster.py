"""Percolation structure: component labels, strong cluster, holes, good blocks."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .env import BoxLattice, ConductanceField

CLOSED = -1
UNREACHABLE = -1


def open_edge_mask(field: ConductanceField, threshold: float) -> np.ndarray:
    """Edges kept at ``threshold``: omega > 0 for threshold 0, omega >= threshold otherwise."""
    w = field.weights
    return w > 0.0 if threshold == 0 else w >= threshold


def site_graph(lattice: BoxLattice, edge_mask: np.ndarray) -> sp.csr_matrix:
    """Symmetric 0/1 site adjacency built from the selected edges."""
    t = lattice.edge_tail[edge_mask]
    h = lattice.edge_head[edge_mask]
    n = lattice.n_sites
    rows = np.concatenate([t, h])
    cols = np.concatenate([h, t])
    a = sp.csr_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(n, n))
    a.sum_duplicates()
    a.data[:] = 1
    return a


@dataclass(frozen=True, eq=False)
class ClusterLabeling:
    lattice: BoxLattice
    threshold: float
    labels: np.ndarray  # component id per site, CLOSED if no kept edge touches it
    sizes: np.ndarray
    largest: int  # id of the largest component, -1 if every site is closed
    tie: bool  # several components share the largest size
    open_edges: np.ndarray

    @property
    def n_components(self) -> int:
        return self.sizes.size

    @property
    def in_largest(self) -> np.ndarray:
        if self.largest < 0:
            return np.zeros(self.labels.size, dtype=bool)
        return self.labels == self.largest

    @property
    def largest_size(self) -> int:
        return int(self.sizes[self.largest]) if self.largest >= 0 else 0

    def graph(self) -> sp.csr_matrix:
        return site_graph(self.lattice, self.open_edges)

    def save_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            fh.write("site_index,component_id\n")
            for s, c in enumerate(self.labels):
                fh.write(f"{s},{int(c)}\n")
        return path


def label_clusters(field: ConductanceField, threshold: float) -> ClusterLabeling:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0,1], got {threshold}")
    lat = field.lattice
    mask = open_edge_mask(field, threshold)
    adj = site_graph(lat, mask)
    _, raw = csgraph.connected_components(adj, directed=False)
    touched = np.diff(adj.indptr) > 0
    labels = np.full(lat.n_sites, CLOSED, dtype=np.int64)
    # renumber components in order of their lowest site so ids are canonical
    _, first, inv = np.unique(raw[touched], return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    labels[touched] = order[inv]
    sizes = np.bincount(labels[touched], minlength=first.size).astype(np.int64)
    if sizes.size == 0:
        largest, tie = -1, False
    else:
        largest = int(np.argmax(sizes))  # lowest id, hence lowest site, among ties
        tie = bool(np.count_nonzero(sizes == sizes[largest]) > 1)
    return ClusterLabeling(lat, float(threshold), labels, sizes, largest, tie, mask)


# ---------------------------------------------------------------- holes


@dataclass(frozen=True, eq=False)
class HoleComponent:
    anchor: int  # lowest site index of the hole
    sites: np.ndarray
    diameter: int  # l-infinity diameter in lattice units
    boundary: np.ndarray  # strong-cluster sites joined to the hole by an open edge

    @property
    def size(self) -> int:
        return self.sites.size


def _unwrapped_diameter(lattice: BoxLattice, sites: np.ndarray, adj: sp.csr_matrix) -> int:
    """BFS-unwrap a connected site set and return its l-infinity diameter."""
    if sites.size == 1:
        return 0
    coords = lattice.coords(sites)
    pos = {int(s): i for i, s in enumerate(sites)}
    unwrapped = np.zeros_like(coords)
    seen = np.zeros(sites.size, dtype=bool)
    seen[0] = True
    queue = deque([0])
    L = lattice.side
    while queue:
        i = queue.popleft()
        s = int(sites[i])
        for nb in adj.indices[adj.indptr[s] : adj.indptr[s + 1]]:
            j = pos.get(int(nb))
            if j is None:
                continue
            step = coords[j] - coords[i]
            if lattice.periodic:
                step = lattice.centered(step)
            guess = unwrapped[i] + step
            if not seen[j]:
                seen[j] = True
                unwrapped[j] = guess
                queue.append(j)
            elif np.any(unwrapped[j] != guess) and L > 2:
                raise ValueError("hole wraps around the torus; enlarge the box")
    return int((unwrapped.max(axis=0) - unwrapped.min(axis=0)).max())


def hole_components(field: ConductanceField, alpha: float,
                    labels0: ClusterLabeling | None = None,
                    labels_alpha: ClusterLabeling | None = None) -> list[HoleComponent]:
    """Connected pieces of (largest open cluster) minus (largest alpha-cluster)."""
    lab0 = labels0 if labels0 is not None else label_clusters(field, 0.0)
    laba = labels_alpha if labels_alpha is not None else label_clusters(field, alpha)
    if laba.largest < 0:
        raise ValueError(f"no edge reaches alpha={alpha}; the strong cluster is empty")
    strong = laba.in_largest
    in_hole = lab0.in_largest & ~strong
    if not in_hole.any():
        return []
    lat = field.lattice
    adj0 = lab0.graph()
    sub = adj0[in_hole][:, in_hole]
    hole_sites = np.flatnonzero(in_hole)
    _, comp = csgraph.connected_components(sub, directed=False)
    order = np.argsort(comp, kind="stable")
    splits = np.flatnonzero(np.diff(comp[order])) + 1
    holes = []
    for group in np.split(order, splits):
        sites = np.sort(hole_sites[group])
        nbrs = np.unique(adj0[sites].indices)
        boundary = nbrs[strong[nbrs]]
        holes.append(HoleComponent(int(sites[0]), sites,
                                   _unwrapped_diameter(lat, sites, adj0), boundary))
    holes.sort(key=lambda h: h.anchor)
    return holes


def hole_index(n_sites: int, holes: list[HoleComponent]) -> np.ndarray:
    """Per-site position in ``holes``, -1 for sites outside every hole."""
    idx = np.full(n_sites, -1, dtype=np.int64)
    for k, h in enumerate(holes):
        idx[h.sites] = k
    return idx


@dataclass(frozen=True)
class DiameterTail:
    n: np.ndarray
    tail_prob: np.ndarray
    count: np.ndarray
    n_samples: int
    mode: str

    def save_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            fh.write("n,tail_prob,count\n")
            for n, p, c in zip(self.n, self.tail_prob, self.count):
                fh.write(f"{int(n)},{float(p)!r},{int(c)}\n")
        return path

    def fit_log_tail(self, n_min: int = 0):
        """Least-squares line through (n, log tail) over the observed range.

        Returns ``(slope, intercept, r_squared)``; the decay rate estimate is ``-slope``.
        """
        keep = (self.tail_prob > 0) & (self.n >= n_min)
        x = self.n[keep].astype(float)
        if x.size < 2:
            raise ValueError("need at least two positive tail values to fit")
        y = np.log(self.tail_prob[keep])
        slope, intercept = np.polyfit(x, y, 1)
        resid = y - (slope * x + intercept)
        ss_tot = float(((y - y.mean()) ** 2).sum())
        r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
        return float(slope), float(intercept), r2


MIN_TAIL_SAMPLES = 100


def diameter_tail(samples: list[list[HoleComponent]], mode: str = "origin",
                  n_sites: int | None = None, origin: int = 0) -> DiameterTail:
    """Empirical P(diam F(0) >= n) for n = 0, 1, ...

    ``mode="origin"`` counts, per sample, the hole containing ``origin``.
    ``mode="site"`` averages the same event over every site of each sample, which
    by translation invariance of the torus estimates the same probability with
    far smaller variance; it needs ``n_sites``.
    """
    if len(samples) < MIN_TAIL_SAMPLES:
        raise ValueError(
            f"diameter_tail needs >= {MIN_TAIL_SAMPLES} samples, got {len(samples)}"
        )
    diams: list[int] = []
    weights: list[int] = []
    if mode == "origin":
        denom = len(samples)
        for holes in samples:
            for h in holes:
                if np.any(h.sites == origin):
                    diams.append(h.diameter)
                    weights.append(1)
                    break
    elif mode == "site":
        if n_sites is None:
            raise ValueError("site mode needs n_sites")
        denom = len(samples) * n_sites
        for holes in samples:
            for h in holes:
                diams.append(h.diameter)
                weights.append(h.size)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    top = max(diams, default=0)
    hist = np.bincount(np.asarray(diams, dtype=np.int64), weights=weights,
                       minlength=top + 1) if diams else np.zeros(1)
    count = np.cumsum(hist[::-1])[::-1].astype(np.int64)
    n = np.arange(count.size)
    return DiameterTail(n, count / denom, count, len(samples), mode)


# ---------------------------------------------------------------- good blocks


def _box_sites(lattice: BoxLattice, lo, hi) -> np.ndarray:
    """Sites of the axis box lo <= x <= hi (inclusive), free boundary."""
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lattice.dim)
    return lattice.index(grid)


def _restricted_adj(field: ConductanceField, mask: np.ndarray, inside: np.ndarray):
    """Adjacency of kept edges with both endpoints in ``inside`` (boolean per site)."""
    lat = field.lattice
    keep = mask & inside[lat.edge_tail] & inside[lat.edge_head]
    return site_graph(lat, keep)


def _crossing(field, lo, hi, axis, occupied) -> bool:
    """Is the face x_axis = lo[axis] joined to x_axis = hi[axis] inside the box?"""
    lat = field.lattice
    sites = _box_sites(lat, lo, hi)
    inside = np.zeros(lat.n_sites, dtype=bool)
    inside[sites] = True
    adj = _restricted_adj(field, occupied, inside)
    _, comp = csgraph.connected_components(adj, directed=False)
    c = lat.coords(sites)
    a = set(comp[sites[c[:, axis] == lo[axis]]].tolist())
    b = set(comp[sites[c[:, axis] == hi[axis]]].tolist())
    return bool(a & b)


def good_block_event(field: ConductanceField, L: int, x, alpha: float) -> tuple[bool, bool]:
    """Indicators of G_L(x) and G_{L,alpha}(x) for the block B_L(Lx) = Lx + [0,L]^d.

    The enlarged box is Lx + [-L, 2L]^d; occupied means omega > 0.
    """
    lat = field.lattice
    d = lat.dim
    x = np.asarray(x, dtype=np.int64).reshape(d)
    base = L * x
    lo_big, hi_big = base - L, base + 2 * L
    if lat.periodic or np.any(lo_big < 0) or np.any(hi_big > lat.side - 1):
        raise ValueError(
            f"enlarged block {lo_big.tolist()}..{hi_big.tolist()} does not fit a free box of side {lat.side}"
        )
    occupied = field.weights > 0
    # (1) each neighboring block is crossed in the direction towards B_L(Lx)
    for i in range(d):
        for sgn in (1, -1):
            lo = base.copy()
            lo[i] += sgn * L
            if not _crossing(field, lo, lo + L, i, occupied):
                return False, False
    # (2) at most one occupied cluster of the big box meets both B_L(Lx) and its boundary
    big = _box_sites(lat, lo_big, hi_big)
    inside = np.zeros(lat.n_sites, dtype=bool)
    inside[big] = True
    adj = _restricted_adj(field, occupied, inside)
    _, comp = csgraph.connected_components(adj, directed=False)
    c = lat.coords(big)
    on_boundary = np.any((c == lo_big) | (c == hi_big), axis=1)
    in_block = np.all((c >= base) & (c <= base + L), axis=1)
    has_edge = np.diff(adj.indptr)[big] > 0
    meet_block = set(comp[big[in_block & has_edge]].tolist())
    meet_bdry = set(comp[big[on_boundary & has_edge]].tolist())
    g = len(meet_block & meet_bdry) <= 1
    if not g:
        return False, False
    inner = inside[lat.edge_tail] & inside[lat.edge_head]
    w = field.weights[inner]
    weak = np.any((w > 0) & (w < alpha))
    return True, bool(not weak)


# ---------------------------------------------------------------- distances


def chemical_distances(labeling: ClusterLabeling, x: int) -> np.ndarray:
    """Graph distance from ``x`` through kept edges; UNREACHABLE where there is no path."""
    dist = csgraph.shortest_path(labeling.graph(), unweighted=True, directed=False, indices=int(x))
    out = np.full(dist.shape, UNREACHABLE, dtype=np.int64)
    ok = np.isfinite(dist)
    out[ok] = dist[ok].astype(np.int64)
    return out


def chemical_distance(labeling: ClusterLabeling, x: int, y: int) -> int:
    """BFS distance within the kept edges, UNREACHABLE for different components."""
    x, y = int(x), int(y)
    if x == y:
        return 0
    lx, ly = labeling.labels[x], labeling.labels[y]
    if lx == CLOSED or lx != ly:
        return UNREACHABLE
    return int(chemical_distances(labeling, x)[y])


def sample_with_origin(lattice: BoxLattice, law, seed: int, threshold: float = 0.0,
                       origin: int = 0, max_attempts: int = 1000) -> ConductanceField:
    """Sample fields from derived seeds until ``origin`` lies in the largest kept cluster.

    This realizes the conditioning on {0 in the cluster} by rejection.
    """
    from .env import derived_seed, sample_field

    for attempt in range(max_attempts):
        field = sample_field(lattice, law, derived_seed(seed, attempt))
        lab = label_clusters(field, threshold)
        if lab.in_largest[origin]:
            return field
    raise RuntimeError(f"origin never joined the cluster in {max_attempts} attempts")
