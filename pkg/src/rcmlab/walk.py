"""Samplers for the lazy walk X, the induced kernel on the strong cluster, the
Poissonized walk Y and the jump (Markov) distance."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse import csgraph

from ._linalg import block_pcg
from .cluster import (UNREACHABLE, ClusterLabeling, HoleComponent, chemical_distances,
                      hole_components, label_clusters)
from .env import ConductanceField

DENSE_HOLE_LIMIT = 1000
KERNEL_FLOOR = 1e-15


# ---------------------------------------------------------------- the walk X


def step_X(field: ConductanceField, x: int, rng: np.random.Generator) -> int:
    """One step of X: to neighbor y with probability omega_xy / 2d, else stay."""
    lat = field.lattice
    r = rng.random() * lat.n_ports
    k = int(r)
    if r - k < field.port_weights[x, k]:
        return int(lat.neighbors[x, k])
    return int(x)


@dataclass
class XEnsemble:
    """Positions of many independent X walks, with unwrapped displacements."""

    sites: np.ndarray  # (m,) current site
    disp: np.ndarray  # (m, d) displacement from the start in Z^d
    steps: int = 0


def advance_X(field: ConductanceField, ens: XEnsemble, n_steps: int,
              rng: np.random.Generator) -> XEnsemble:
    """Advance every walker of ``ens`` by ``n_steps`` X-steps in place."""
    lat = field.lattice
    W = field.port_weights
    nbr = lat.neighbors
    vec = lat.port_vectors
    two_d = lat.n_ports
    m = ens.sites.size
    for _ in range(n_steps):
        r = rng.random(m) * two_d
        k = r.astype(np.int64)
        move = (r - k) < W[ens.sites, k]
        ens.sites = np.where(move, nbr[ens.sites, k], ens.sites)
        ens.disp += vec[k] * move[:, None]
    ens.steps += n_steps
    return ens


def simulate_X(field: ConductanceField, starts, n_steps: int, rng: np.random.Generator,
               record=None):
    """Run walks from ``starts``; return ``(steps, sites, disp)`` at each recorded step.

    ``record`` is a sorted list of step counts (defaults to ``[n_steps]``).
    ``sites`` has shape (len(record), m) and ``disp`` (len(record), m, d).
    """
    starts = np.asarray(starts, dtype=np.int64)
    record = [n_steps] if record is None else sorted(int(r) for r in record)
    if record and record[-1] > n_steps:
        raise ValueError("record step beyond n_steps")
    ens = XEnsemble(starts.copy(), np.zeros((starts.size, field.dim), dtype=np.int64))
    out_sites, out_disp = [], []
    for target in record:
        advance_X(field, ens, target - ens.steps, rng)
        out_sites.append(ens.sites.copy())
        out_disp.append(ens.disp.copy())
    return np.array(record), np.array(out_sites), np.array(out_disp)


@dataclass
class WalkPath:
    start: int
    sites: np.ndarray
    times: np.ndarray | None = None  # jump times for Y; None for discrete X
    disp: np.ndarray | None = None  # unwrapped displacement after each entry
    seed: int | None = None

    def save_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            fh.write("step_or_time,site_index\n")
            stamps = self.times if self.times is not None else np.arange(self.sites.size)
            for t, s in zip(stamps, self.sites):
                fh.write(f"{t!r},{int(s)}\n")
        return path


def sample_X_path(field: ConductanceField, x0: int, n_steps: int, rng) -> WalkPath:
    _, sites, disp = simulate_X(field, [x0], n_steps, rng, record=range(n_steps + 1))
    return WalkPath(int(x0), sites[:, 0], None, disp[:, 0])


# ---------------------------------------------------------------- induced kernel


@dataclass(frozen=True, eq=False)
class InducedKernel:
    """Jump law of X observed on the strong cluster at successive visit times.

    Entries are stored per (x, y, displacement) so that walks can be unwrapped
    exactly; ``matrix`` sums over displacements to give w_hat.
    """

    field: ConductanceField
    alpha: float
    sites: np.ndarray  # strong-cluster sites, sorted
    local: np.ndarray  # site -> row index, -1 off the strong cluster
    indptr: np.ndarray
    target: np.ndarray  # global site index of each entry
    prob: np.ndarray
    disp: np.ndarray  # (n_entries, d) displacement in Z^d
    expected_time: np.ndarray  # E_x T_1 per row
    floored_mass: float
    holes: list = dc_field(default_factory=list)

    @property
    def n(self) -> int:
        return self.sites.size

    @property
    def dim(self) -> int:
        return self.field.dim

    def rows_of(self, x: int) -> slice:
        i = int(self.local[x])
        if i < 0:
            raise ValueError(f"site {x} is not in the strong cluster")
        return slice(self.indptr[i], self.indptr[i + 1])

    def row(self, x: int) -> dict:
        s = self.rows_of(x)
        out: dict[int, float] = {}
        for y, p in zip(self.target[s], self.prob[s]):
            out[int(y)] = out.get(int(y), 0.0) + float(p)
        return out

    def matrix(self) -> sp.csr_matrix:
        """w_hat as an n x n sparse matrix on local indices."""
        rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
        m = sp.csr_matrix((self.prob, (rows, self.local[self.target])), shape=(self.n, self.n))
        m.sum_duplicates()
        return m

    def row_sums(self) -> np.ndarray:
        return np.add.reduceat(self.prob, self.indptr[:-1]) if self.prob.size else np.zeros(self.n)

    def symmetry_defect(self) -> float:
        m = self.matrix()
        diff = m - m.T
        return float(np.abs(diff.data).max(initial=0.0))

    def mean_displacement(self) -> np.ndarray:
        """(n, d) expected displacement of one jump from each site."""
        rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
        out = np.zeros((self.n, self.dim))
        np.add.at(out, rows, self.prob[:, None] * self.disp)
        return out

    def save_csv(self, path) -> Path:
        path = Path(path)
        m = self.matrix().tocoo()
        order = np.lexsort((self.sites[m.col], self.sites[m.row]))
        with open(path, "w") as fh:
            fh.write("x,y,w\n")
            for i in order:
                fh.write(f"{int(self.sites[m.row[i]])},{int(self.sites[m.col[i]])},{float(m.data[i])!r}\n")
        return path


def _hole_coords(field: ConductanceField, hole: HoleComponent) -> np.ndarray:
    """Unwrapped coordinates of the hole sites, relative to the anchor."""
    lat = field.lattice
    sites = hole.sites
    pos = {int(s): i for i, s in enumerate(sites)}
    out = np.zeros((sites.size, lat.dim), dtype=np.int64)
    seen = np.zeros(sites.size, dtype=bool)
    seen[0] = True
    stack = [0]
    W = field.port_weights
    while stack:
        i = stack.pop()
        s = int(sites[i])
        for k in range(lat.n_ports):
            if W[s, k] <= 0:
                continue
            j = pos.get(int(lat.neighbors[s, k]))
            if j is not None and not seen[j]:
                seen[j] = True
                out[j] = out[i] + lat.port_vectors[k]
                stack.append(j)
    return out


def _solve_hole(field: ConductanceField, hole: HoleComponent, strong: np.ndarray):
    """Exit law of X started on each hole site.

    Returns ``(exit_target, exit_offset, A, tau, coords)`` where exit port ``j`` leads to
    strong site ``exit_target[j]`` with displacement ``exit_offset[j]`` measured from
    the hole anchor, ``A[h, j]`` is the probability of leaving through port ``j`` when
    started at hole site ``h`` and ``tau[h]`` the expected number of steps to leave.
    """
    lat = field.lattice
    two_d = lat.n_ports
    sites = hole.sites
    m = sites.size
    loc = {int(s): i for i, s in enumerate(sites)}
    coords = _hole_coords(field, hole)
    W = field.port_weights[sites]
    nbr = lat.neighbors[sites]
    rows, cols, vals = [], [], []
    ex_row, ex_target, ex_offset, ex_val = [], [], [], []
    for i in range(m):
        for k in range(two_d):
            w = W[i, k]
            if w <= 0:
                continue
            y = int(nbr[i, k])
            if strong[y]:
                ex_row.append(i)
                ex_target.append(y)
                ex_offset.append(coords[i] + lat.port_vectors[k])
                ex_val.append(w / two_d)
            else:
                rows.append(i)
                cols.append(loc[y])
                vals.append(-w / two_d)
    # I - P_HH: the lazy self-step stays in the hole, so the diagonal is s/2d
    diag = W.sum(axis=1) / two_d
    K = sp.csr_matrix((np.concatenate([vals, diag]),
                       (np.concatenate([rows, np.arange(m)]).astype(np.int64),
                        np.concatenate([cols, np.arange(m)]).astype(np.int64))), shape=(m, m))
    n_exit = len(ex_target)
    E = np.zeros((m, n_exit + 1))
    E[ex_row, np.arange(n_exit)] = ex_val
    E[:, n_exit] = 1.0  # expected exit time
    if m <= DENSE_HOLE_LIMIT:
        S = scipy.linalg.solve(K.toarray(), E, assume_a="pos")
    else:
        S = block_pcg(K, E, tol=1e-15, maxiter=50 * m).x
    return (np.asarray(ex_target, dtype=np.int64),
            np.asarray(ex_offset, dtype=np.int64).reshape(n_exit, lat.dim),
            S[:, :n_exit], S[:, n_exit], coords)


def induced_kernel(field: ConductanceField, alpha: float,
                   labels0: ClusterLabeling | None = None,
                   labels_alpha: ClusterLabeling | None = None,
                   floor: float = KERNEL_FLOOR) -> InducedKernel:
    """Exact w_hat_xy = P_x(X_{T_1} = y) on the largest alpha-cluster.

    One X-step, lazy self-step included, is composed with the exit law of every
    hole the step may enter.  Entries below ``floor`` are dropped and the row is
    renormalized; the dropped mass is reported.
    """
    lat = field.lattice
    lab0 = labels0 if labels0 is not None else label_clusters(field, 0.0)
    laba = labels_alpha if labels_alpha is not None else label_clusters(field, alpha)
    holes = hole_components(field, alpha, lab0, laba)
    strong = laba.in_largest
    sites = np.flatnonzero(strong)
    local = np.full(lat.n_sites, -1, dtype=np.int64)
    local[sites] = np.arange(sites.size)
    two_d = lat.n_ports
    d = lat.dim
    W = field.port_weights
    nbr = lat.neighbors
    vec = lat.port_vectors

    if not lat.periodic:
        for h in holes:
            c = lat.coords(h.sites)
            if np.any((c == 0) | (c == lat.side - 1)):
                raise ValueError(
                    f"hole anchored at site {h.anchor} touches the box boundary; "
                    "enlarge the box or use periodic boundary"
                )

    # direct steps between strong sites and the lazy self-step
    pw = W[sites]
    tgt = nbr[sites]
    to_strong = (pw > 0) & strong[np.maximum(tgt, 0)] & (tgt >= 0)
    r_i, k_i = np.nonzero(to_strong)
    chunks_row = [r_i, np.arange(sites.size)]
    chunks_tgt = [tgt[r_i, k_i], sites]
    chunks_p = [pw[r_i, k_i] / two_d, 1.0 - pw.sum(axis=1) / two_d]
    chunks_disp = [vec[k_i], np.zeros((sites.size, d), dtype=np.int64)]
    extra_time = np.zeros(sites.size)

    hidx = np.full(lat.n_sites, -1, dtype=np.int64)
    for j, h in enumerate(holes):
        hidx[h.sites] = j
    to_hole = (pw > 0) & (tgt >= 0) & (hidx[np.maximum(tgt, 0)] >= 0)
    hr, hk = np.nonzero(to_hole)
    by_hole: dict[int, list] = {}
    for r, k in zip(hr, hk):
        by_hole.setdefault(int(hidx[tgt[r, k]]), []).append((r, k))
    for j, entries in sorted(by_hole.items()):
        hole = holes[j]
        ex_tgt, ex_off, A, tau, coords = _solve_hole(field, hole, strong)
        hloc = {int(s): i for i, s in enumerate(hole.sites)}
        for r, k in entries:
            i = hloc[int(tgt[r, k])]
            p_in = pw[r, k] / two_d
            # displacement x -> entry site -> (anchor frame) -> exit target
            offset = vec[k] - coords[i]
            chunks_row.append(np.full(ex_tgt.size, r))
            chunks_tgt.append(ex_tgt)
            chunks_p.append(p_in * A[i])
            chunks_disp.append(offset + ex_off)
            extra_time[r] += p_in * tau[i]

    rows = np.concatenate(chunks_row)
    tgts = np.concatenate(chunks_tgt).astype(np.int64)
    probs = np.concatenate(chunks_p)
    disps = np.concatenate(chunks_disp).astype(np.int64).reshape(-1, d)

    # merge identical (row, target, displacement) entries
    key = np.column_stack([rows, tgts, disps])
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    merged = np.bincount(inv, weights=probs, minlength=uniq.shape[0])
    keep = merged > floor
    keep_p = np.where(keep, merged, 0.0)
    row_of = uniq[:, 0]
    kept_sum = np.bincount(row_of, weights=keep_p, minlength=sites.size)
    floored = float(merged[~keep].clip(min=0).sum())
    uniq, merged = uniq[keep], merged[keep] / kept_sum[uniq[keep][:, 0]]
    counts = np.bincount(uniq[:, 0], minlength=sites.size)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    return InducedKernel(field, float(alpha), sites, local, indptr, uniq[:, 1].copy(),
                         merged, uniq[:, 2:].copy(), 1.0 + extra_time, floored, holes)


def first_visit_mc(field: ConductanceField, strong: np.ndarray, x0: int, n_trials: int,
                   rng: np.random.Generator, max_steps: int = 10**7):
    """Monte Carlo sample of (X_{T_1}, displacement) for walks started at ``x0``."""
    ens = XEnsemble(np.full(n_trials, x0, dtype=np.int64),
                    np.zeros((n_trials, field.dim), dtype=np.int64))
    done = np.zeros(n_trials, dtype=bool)
    out_sites = np.empty(n_trials, dtype=np.int64)
    out_disp = np.zeros((n_trials, field.dim), dtype=np.int64)
    for _ in range(max_steps):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        sub = XEnsemble(ens.sites[idx], ens.disp[idx])
        advance_X(field, sub, 1, rng)
        ens.sites[idx], ens.disp[idx] = sub.sites, sub.disp
        hit = strong[sub.sites]
        out_sites[idx[hit]] = sub.sites[hit]
        out_disp[idx[hit]] = sub.disp[hit]
        done[idx[hit]] = True
    if not done.all():
        raise RuntimeError("some walks did not return to the strong set")
    return out_sites, out_disp


# ---------------------------------------------------------------- the walk Y


class _RowSampler:
    """Vectorized draws from the rows of an InducedKernel."""

    def __init__(self, kernel: InducedKernel):
        self.kernel = kernel
        rows = np.repeat(np.arange(kernel.n), np.diff(kernel.indptr))
        cum = np.cumsum(kernel.prob)
        start = np.concatenate([[0.0], cum])[kernel.indptr[:-1]]
        local = cum - start[rows]
        # key = row + within-row cumulative mass, so one searchsorted serves all rows
        self.key = rows + np.minimum(local, 1.0)
        self.key[kernel.indptr[1:][np.diff(kernel.indptr) > 0] - 1] = (
            np.arange(kernel.n)[np.diff(kernel.indptr) > 0] + 1.0)

    def draw(self, rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(rows.size)
        j = np.searchsorted(self.key, rows + u, side="right")
        hi = self.kernel.indptr[rows + 1] - 1
        return np.minimum(j, hi)


def sample_Y(kernel: InducedKernel, x0: int, horizon: float, rng: np.random.Generator) -> WalkPath:
    """Y on [0, horizon]: unit-rate Poisson jump times, targets drawn from w_hat."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    times = [0.0]
    t = rng.exponential()
    while t <= horizon:
        times.append(t)
        t += rng.exponential()
    n_jumps = len(times) - 1
    sampler = _RowSampler(kernel)
    sites = np.empty(n_jumps + 1, dtype=np.int64)
    disp = np.zeros((n_jumps + 1, kernel.dim), dtype=np.int64)
    sites[0] = x0
    kernel.rows_of(x0)
    for j in range(1, n_jumps + 1):
        e = sampler.draw(np.array([kernel.local[sites[j - 1]]]), rng)[0]
        sites[j] = kernel.target[e]
        disp[j] = disp[j - 1] + kernel.disp[e]
    return WalkPath(int(x0), sites, np.asarray(times), disp)


def sample_Y_at(kernel: InducedKernel, starts, times, rng: np.random.Generator):
    """Positions of independent Y walks at the sorted ``times``.

    Returns ``(sites, disp, n_jumps)`` with shapes (T, m), (T, m, d), (T, m).
    """
    starts = np.asarray(starts, dtype=np.int64)
    times = np.asarray(times, dtype=float)
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValueError("times must be nonnegative and sorted")
    rows = kernel.local[starts]
    if np.any(rows < 0):
        raise ValueError("start outside the strong cluster")
    sampler = _RowSampler(kernel)
    m = starts.size
    disp = np.zeros((m, kernel.dim), dtype=np.int64)
    jumps = np.zeros(m, dtype=np.int64)
    out_s, out_d, out_n = [], [], []
    prev = 0.0
    for t in times:
        todo = rng.poisson(t - prev, size=m)
        prev = t
        jumps += todo
        while True:
            idx = np.flatnonzero(todo > 0)
            if idx.size == 0:
                break
            e = sampler.draw(rows[idx], rng)
            rows[idx] = kernel.local[kernel.target[e]]
            disp[idx] += kernel.disp[e]
            todo[idx] -= 1
        out_s.append(kernel.sites[rows])
        out_d.append(disp.copy())
        out_n.append(jumps.copy())
    return np.array(out_s), np.array(out_d), np.array(out_n)


# ---------------------------------------------------------------- distances


def jump_graph(kernel: InducedKernel) -> sp.csr_matrix:
    m = kernel.matrix().tolil()
    m.setdiag(0)
    m = m.tocsr()
    m.eliminate_zeros()
    m.data[:] = 1.0
    return m


def markov_distances(kernel: InducedKernel, x: int, graph=None) -> np.ndarray:
    """Minimal number of Y-jumps from ``x`` to every strong site (global indexing)."""
    g = jump_graph(kernel) if graph is None else graph
    i = kernel.local[x]
    if i < 0:
        raise ValueError(f"site {x} is not in the strong cluster")
    dist = csgraph.shortest_path(g, unweighted=True, directed=False, indices=int(i))
    out = np.full(kernel.field.lattice.n_sites, UNREACHABLE, dtype=np.int64)
    ok = np.isfinite(dist)
    out[kernel.sites[ok]] = dist[ok].astype(np.int64)
    return out


def markov_distance(kernel: InducedKernel, x: int, y: int) -> int:
    if int(x) == int(y):
        return 0
    if kernel.local[y] < 0:
        return UNREACHABLE
    return int(markov_distances(kernel, x)[y])


@dataclass
class DistanceComparison:
    radii: np.ndarray
    min_ratio: np.ndarray  # min d(0,x)/|x| per radius
    min_chemical_ratio: np.ndarray
    violation_freq: np.ndarray  # fraction of pairs with d(0,x) <= rho |x|
    n_pairs: np.ndarray
    rho: float
    markov_le_chemical: bool


def distance_comparison(samples, radii, rho: float, origin: int | None = None) -> DistanceComparison:
    """Compare jump distance with |x| (sup norm) over an ensemble.

    ``samples`` is a list of ``(kernel, labeling_alpha)`` pairs.  Only sites in the
    central half-box, |x - origin| <= side/4, are used.
    """
    radii = np.asarray(sorted(set(int(r) for r in radii)), dtype=np.int64)
    lo = np.full(radii.size, np.inf)
    lo_chem = np.full(radii.size, np.inf)
    viol = np.zeros(radii.size)
    npairs = np.zeros(radii.size, dtype=np.int64)
    consistent = True
    for kernel, lab in samples:
        lat = kernel.field.lattice
        o = origin
        if o is None:
            o = 0 if lat.periodic else int(lat.index(np.full(lat.dim, lat.side // 2)))
        if kernel.local[o] < 0:
            continue
        c = lat.coords() - lat.coords(o)
        if lat.periodic:
            c = lat.centered(c)
        norm = np.abs(c).max(axis=1)
        dk = markov_distances(kernel, o)
        dc = chemical_distances(lab, o)
        both = (dk >= 0) & (dc >= 0)
        if np.any(dk[both] > dc[both]):
            consistent = False
        usable = (dk >= 0) & (norm <= lat.side // 4)
        for j, r in enumerate(radii):
            sel = usable & (norm == r)
            if not sel.any():
                continue
            ratio = dk[sel] / r
            lo[j] = min(lo[j], ratio.min())
            chem = dc[sel]
            if np.any(chem >= 0):
                lo_chem[j] = min(lo_chem[j], (chem[chem >= 0] / r).min())
            viol[j] += np.count_nonzero(dk[sel] <= rho * r)
            npairs[j] += sel.sum()
    empty = radii[npairs == 0]
    if empty.size:
        raise ValueError(f"no sampled pairs at |x| in {empty.tolist()}")
    return DistanceComparison(radii, lo, lo_chem, viol / npairs, npairs, float(rho), consistent)
