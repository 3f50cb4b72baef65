"""Heat kernel, volume and isoperimetry constants, and the Nash functionals.

Everything here is stated for the continuous-time walk Y on the strong cluster:
unit-rate Poisson clock, jumps drawn from w_hat, reference measure pi = 2d at
every site, so that ``q_t(x, y) = P^x(Y_t = y) / 2d``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.stats import poisson

from .env import ConductanceField
from .walk import InducedKernel, jump_graph, markov_distances, sample_Y_at, simulate_X

EXACT_SIZE_CAP = 2000
BRUTE_FORCE_CAP = 12


class GridTooCoarse(ValueError):
    pass


class InsufficientSamples(ValueError):
    pass


def reference_measure(kernel: InducedKernel) -> float:
    return 2.0 * kernel.dim


# ---------------------------------------------------------------- heat kernel


def poisson_mix(P: sp.spmatrix, v0: np.ndarray, times) -> np.ndarray:
    """Rows ``sum_n Poisson(n; t) v0 P^n`` for each t (uniformization of e^{t(P - I)})."""
    times = np.asarray(times, dtype=float)
    if np.any(times < 0):
        raise ValueError("times must be nonnegative")
    v = np.asarray(v0, dtype=float)
    t_max = float(times.max(initial=0.0))
    n_max = int(math.ceil(t_max + 12.0 * math.sqrt(t_max) + 30))
    out = np.zeros((times.size,) + v.shape)
    PT = P.T.tocsr()
    for n in range(n_max + 1):
        w = poisson.pmf(n, times)
        w[times == 0] = 1.0 if n == 0 else 0.0
        out += w.reshape((-1,) + (1,) * v.ndim) * v
        v = PT @ v
    return out


def step_matrix(field: ConductanceField) -> sp.csr_matrix:
    """One-step transition matrix of the lazy walk X on the whole box."""
    lat = field.lattice
    W = field.port_weights
    nbr = lat.neighbors
    rows, cols, vals = [], [], []
    n = lat.n_sites
    for k in range(lat.n_ports):
        ok = (W[:, k] > 0) & (nbr[:, k] >= 0)
        rows.append(np.flatnonzero(ok))
        cols.append(nbr[ok, k])
        vals.append(W[ok, k] / lat.n_ports)
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(1.0 - W.sum(axis=1) / lat.n_ports)
    m = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    m.sum_duplicates()
    return m


@dataclass
class HeatKernel:
    sites: np.ndarray  # global site index of each entry of ``prob``
    prob: np.ndarray  # P^x(chain at time t = site)
    stderr: np.ndarray | None
    t: float
    method: str
    pi: float

    @property
    def q(self) -> np.ndarray:
        return self.prob / self.pi

    def at(self, site: int) -> float:
        j = np.searchsorted(self.sites, site)
        if j < self.sites.size and self.sites[j] == site:
            return float(self.prob[j])
        return 0.0


def heat_kernel(obj, x: int, t: float, method: str = "exact", samples: int = 0,
                rng: np.random.Generator | None = None) -> HeatKernel:
    """Law of the walk at time ``t`` started from ``x``.

    ``obj`` is an InducedKernel (continuous time Y) or a ConductanceField (the
    discrete lazy walk X, integer ``t``).
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    if isinstance(obj, ConductanceField):
        lat = obj.lattice
        pi = float(lat.n_ports)
        sites = np.arange(lat.n_sites)
        steps = int(t)
        if steps != t:
            raise ValueError("the discrete walk needs an integer number of steps")
        if method == "exact":
            if lat.n_sites > EXACT_SIZE_CAP:
                raise ValueError(f"exact method limited to {EXACT_SIZE_CAP} sites")
            P = step_matrix(obj).T.tocsr()
            v = np.zeros(lat.n_sites)
            v[x] = 1.0
            for _ in range(steps):
                v = P @ v
            return HeatKernel(sites, v, None, float(t), "exact", pi)
        _check_mc(samples, rng)
        _, s, _ = simulate_X(obj, np.full(samples, x), steps, rng)
        p = np.bincount(s[0], minlength=lat.n_sites) / samples
        return HeatKernel(sites, p, np.sqrt(p * (1 - p) / samples), float(t), "monte-carlo", pi)
    kernel: InducedKernel = obj
    pi = reference_measure(kernel)
    if method == "exact":
        if kernel.n > EXACT_SIZE_CAP:
            raise ValueError(f"exact method limited to {EXACT_SIZE_CAP} sites")
        v = np.zeros(kernel.n)
        v[kernel.local[x]] = 1.0
        p = poisson_mix(kernel.matrix(), v, [t])[0]
        return HeatKernel(kernel.sites, p, None, float(t), "exact", pi)
    _check_mc(samples, rng)
    s, _, _ = sample_Y_at(kernel, np.full(samples, x), [t], rng)
    p = np.bincount(kernel.local[s[0]], minlength=kernel.n) / samples
    return HeatKernel(kernel.sites, p, np.sqrt(p * (1 - p) / samples), float(t), "monte-carlo", pi)


def _check_mc(samples, rng):
    if samples <= 0 or rng is None:
        raise ValueError("the monte-carlo method needs samples > 0 and an rng")


def transition_matrix(kernel: InducedKernel, t: float) -> np.ndarray:
    """Dense P_t = e^{t(w_hat - I)} for small kernels."""
    if kernel.n > EXACT_SIZE_CAP:
        raise ValueError(f"exact method limited to {EXACT_SIZE_CAP} sites")
    return poisson_mix(kernel.matrix(), np.eye(kernel.n), [t])[0]


@dataclass
class ReturnCurve:
    n: np.ndarray
    value: np.ndarray  # n^{d/2} P_0(X_{2n} = 0)
    stderr: np.ndarray
    samples: int
    method: str
    indistinguishable: np.ndarray  # value - 3 stderr <= 0

    def to_json(self) -> str:
        return json.dumps({k: (v.tolist() if isinstance(v, np.ndarray) else v)
                           for k, v in self.__dict__.items()})


def heat_lower_bound_curve(field: ConductanceField, n_list, samples: int,
                           rng: np.random.Generator | None = None, origin: int = 0,
                           method: str = "monte-carlo", cluster: np.ndarray | None = None,
                           batch: int = 250_000) -> ReturnCurve:
    """n^{d/2} P_{omega,0}(X_{2n} = 0), returns counted in Z^d (unwrapped)."""
    from .cluster import label_clusters

    if cluster is None:
        cluster = label_clusters(field, 0.0).in_largest
    if not cluster[origin]:
        raise ValueError("the origin is not in the open cluster")
    n_list = np.asarray(sorted(int(n) for n in n_list))
    d = field.dim
    if method == "exact":
        lat = field.lattice
        P = step_matrix(field).T.tocsr()
        v = np.zeros(lat.n_sites)
        v[origin] = 1.0
        vals, done = [], 0
        for n in n_list:
            for _ in range(2 * n - done):
                v = P @ v
            done = 2 * n
            vals.append(v[origin])
        vals = np.asarray(vals) * n_list**(d / 2)
        return ReturnCurve(n_list, vals, np.zeros_like(vals), 0, "exact", vals <= 0)
    _check_mc(samples, rng)
    hits = np.zeros(n_list.size)
    left = samples
    while left > 0:
        m = min(batch, left)
        left -= m
        _, _, disp = simulate_X(field, np.full(m, origin), 2 * int(n_list[-1]), rng,
                                record=2 * n_list)
        hits += np.all(disp == 0, axis=2).sum(axis=1)
    if np.any(hits == 0):
        raise InsufficientSamples(
            f"no return observed at n = {n_list[hits == 0].tolist()} with {samples} samples"
        )
    p = hits / samples
    scale = n_list**(d / 2)
    se = np.sqrt(p * (1 - p) / samples) * scale
    val = p * scale
    return ReturnCurve(n_list, val, se, samples, "monte-carlo", val - 3 * se <= 0)


# ---------------------------------------------------------------- constants


def distance_profile(kernel: InducedKernel, x: int) -> np.ndarray:
    """Jump distances d(x, y) for every strong site y (local order)."""
    d = markov_distances(kernel, x)[kernel.sites]
    return d[d >= 0]


def _vol_sum(dist: np.ndarray, pi: float, dim: float, s: np.ndarray) -> np.ndarray:
    counts = np.bincount(dist)
    r = np.arange(counts.size)
    return s**dim * (pi * counts[None, :] * np.exp(-np.outer(s, r))).sum(axis=1)


def c_vol_from_distances(dist, a_list, pi: float, dim: float, grid: int = 64,
                         polish: bool = True) -> np.ndarray:
    """sup over 0 < s <= a of s^dim sum_y pi e^{-s d(x,y)}, on a geometric grid.

    The grid starts well below the scale 1/max distance where the supremum of a
    finite sum sits, and a golden-section step refines the best grid point.
    """
    dist = np.asarray(dist, dtype=np.int64)
    dmax = max(int(dist.max(initial=0)), 1)
    out = []
    for a in np.atleast_1d(np.asarray(a_list, dtype=float)):
        if not a > 0:
            raise ValueError("a must be positive")
        if math.isinf(a):
            out.append(math.inf if dim > 0 else float(pi * dist.size))
            continue
        lo = min(a, dim / dmax) * 1e-2
        s = np.geomspace(lo, a, max(int(grid), 64))
        f = _vol_sum(dist, pi, dim, s)
        j = int(np.argmax(f))
        best = float(f[j])
        if polish and 0 < j < s.size - 1:
            left, right = s[j - 1], s[j + 1]
            g = (math.sqrt(5) - 1) / 2
            c, e = right - g * (right - left), left + g * (right - left)
            fc, fe = _vol_sum(dist, pi, dim, np.array([c, e]))
            for _ in range(60):
                if fc > fe:
                    right, e, fe = e, c, fc
                    c = right - g * (right - left)
                    fc = _vol_sum(dist, pi, dim, np.array([c]))[0]
                else:
                    left, c, fc = c, e, fe
                    e = left + g * (right - left)
                    fe = _vol_sum(dist, pi, dim, np.array([e]))[0]
            best = max(best, float(fc), float(fe))
        out.append(best)
    return np.asarray(out)


def c_vol(kernel: InducedKernel, x: int, a_list, grid: int = 64, dim: float | None = None) -> np.ndarray:
    dim = kernel.dim if dim is None else dim
    return c_vol_from_distances(distance_profile(kernel, x), a_list,
                                reference_measure(kernel), dim, grid)


def a_star(kernel: InducedKernel) -> float:
    """Largest eps such that the off-diagonal entries >= eps still connect the cluster.

    It is the smallest edge of a maximum spanning tree of w_hat.
    """
    m = kernel.matrix().tolil()
    m.setdiag(0)
    m = m.tocsr()
    m.eliminate_zeros()
    if kernel.n <= 1:
        return 1.0
    # minimum spanning tree of (2 - w) is a maximum spanning tree of w
    inv = m.copy()
    inv.data = 2.0 - inv.data
    tree = csgraph.minimum_spanning_tree(inv)
    if tree.nnz < kernel.n - 1:
        raise ValueError("w_hat graph is disconnected")
    tree = tree.tocoo()
    # read the original entries back; 2 - (2 - w) need not round to w
    return float(np.asarray(m[tree.row, tree.col]).min())


@dataclass
class _Graph:
    weights: sp.csr_matrix  # off-diagonal a_xy
    pi: float
    dim: float
    sites: np.ndarray


def _as_graph(obj) -> _Graph:
    if isinstance(obj, InducedKernel):
        m = obj.matrix().tolil()
        m.setdiag(0)
        m = m.tocsr()
        m.eliminate_zeros()
        return _Graph(m, reference_measure(obj), obj.dim, obj.sites)
    return obj


def connected_subsets(adj: list[int], size_cap: int, allowed: int | None = None):
    """Yield every connected vertex set (as a bitmask) with at most ``size_cap`` vertices.

    ``adj[v]`` is the neighbor bitmask of ``v``; ``allowed`` restricts the vertex set.
    Each set is produced once, grown from its lowest vertex by exclusive extension.
    """
    n = len(adj)
    allowed = (1 << n) - 1 if allowed is None else allowed

    def extend(sub: int, ext: int, nbhd: int, v: int, size: int):
        yield sub
        if size == size_cap:
            return
        while ext:
            w = ext & -ext
            ext ^= w
            wi = w.bit_length() - 1
            new = adj[wi] & allowed & ~nbhd & ~((1 << (v + 1)) - 1)
            yield from extend(sub | w, ext | new, nbhd | adj[wi], v, size + 1)

    for v in range(n):
        if not (allowed >> v) & 1:
            continue
        bit = 1 << v
        ext = adj[v] & allowed & ~((1 << (v + 1)) - 1)
        yield from extend(bit, ext, adj[v] | bit, v, 1)


@dataclass
class IsoResult:
    value: float
    best_set: np.ndarray  # global site indices of the minimizing set
    method: str
    size_cap: int
    n: int
    nu: float
    evaluated: int
    ball_is_whole_graph: bool = False


def _iso_setup(obj, x, n, nu):
    g = _as_graph(obj)
    ncount = g.sites.size
    xi = int(np.searchsorted(g.sites, x))
    if xi >= ncount or g.sites[xi] != x:
        raise ValueError(f"site {x} is not in the graph")
    dist = csgraph.shortest_path(g.weights, unweighted=True, directed=False, indices=xi)
    ball = np.flatnonzero(dist <= 2 * n)
    dense = g.weights.toarray()
    need = float(n) ** nu
    half = g.pi * ncount / 2.0
    return g, dense, ball, need, half, ball.size == ncount


def _iso_value(dense, members: np.ndarray, pi, dim):
    inside = np.zeros(dense.shape[0], dtype=bool)
    inside[members] = True
    q = dense[np.ix_(inside, ~inside)].sum()
    return q / (pi * members.size) ** ((dim - 1) / dim)


def c_iso(obj, x: int, n: int, nu: float = 0.25, size_cap: int = 8,
          method: str = "brute-force", rng: np.random.Generator | None = None,
          restarts: int = 50, sweeps: int = 200) -> IsoResult:
    """inf of Q(Lambda, Lambda^c) / pi(Lambda)^{(d-1)/d} over connected Lambda inside
    the jump ball B_{2n}(x) with n^nu <= pi(Lambda) <= pi(V)/2 and |Lambda| <= size_cap.

    The upper volume bound keeps a finite graph from choosing Lambda = V.
    """
    g, dense, ball, need, half, whole = _iso_setup(obj, x, n, nu)
    cap = int(size_cap)
    if method == "brute-force":
        if cap > BRUTE_FORCE_CAP:
            raise ValueError(f"brute force enumeration is capped at {BRUTE_FORCE_CAP} sites")
        nb = dense > 0
        adj = [int(sum(1 << int(j) for j in np.flatnonzero(nb[i]))) for i in range(dense.shape[0])]
        allowed = sum(1 << int(i) for i in ball)
        best, best_set, count = math.inf, None, 0
        for mask in connected_subsets(adj, cap, allowed):
            members = np.array([i for i in range(dense.shape[0]) if (mask >> i) & 1])
            vol = g.pi * members.size
            if vol < need or vol > half:
                continue
            count += 1
            v = _iso_value(dense, members, g.pi, g.dim)
            if v < best:
                best, best_set = v, members
        if best_set is None:
            raise ValueError("no connected set satisfies the volume constraints")
        return IsoResult(float(best), g.sites[best_set], method, cap, n, nu, count, whole)
    if method != "heuristic":
        raise ValueError(f"unknown method {method!r}")
    return _iso_local_search(g, dense, ball, need, half, cap, rng or np.random.default_rng(0),
                             restarts, sweeps, n, nu, whole)


def _is_connected(dense, members: np.ndarray) -> bool:
    if members.size <= 1:
        return True
    # frontier search on the dense block; sets here are small, so this beats csgraph
    sub = dense[np.ix_(members, members)] > 0
    seen = np.zeros(members.size, dtype=bool)
    seen[0] = True
    front = seen.copy()
    while front.any():
        front = sub[front].any(axis=0) & ~seen
        seen |= front
    return bool(seen.all())


def _iso_local_search(g, dense, ball, need, half, cap, rng, restarts, sweeps, n, nu, whole):
    """Randomized local search over feasible connected sets; an upper estimate of the inf."""
    in_ball = np.zeros(dense.shape[0], dtype=bool)
    in_ball[ball] = True
    nb = dense > 0
    lo_size = max(1, int(math.ceil(need / g.pi - 1e-12)))
    hi_size = min(cap, int(math.floor(half / g.pi + 1e-12)))
    if lo_size > hi_size:
        raise ValueError("no connected set satisfies the volume constraints")
    best, best_set, count = math.inf, None, 0

    def feasible(s):
        return lo_size <= s.size <= hi_size and _is_connected(dense, s)

    for _ in range(restarts):
        # grow a random connected seed set inside the ball
        cur = {int(rng.choice(ball))}
        target = int(rng.integers(lo_size, hi_size + 1))
        while len(cur) < target:
            front = np.flatnonzero(nb[list(cur)].any(axis=0) & in_ball)
            front = [f for f in front if f not in cur]
            if not front:
                break
            cur.add(int(rng.choice(front)))
        s = np.array(sorted(cur))
        if not feasible(s):
            continue
        val = _iso_value(dense, s, g.pi, g.dim)
        count += 1
        for _ in range(sweeps):
            cand = set(cur)
            if rng.random() < 0.5 and len(cand) < hi_size:
                front = np.flatnonzero(nb[list(cand)].any(axis=0) & in_ball)
                front = [f for f in front if f not in cand]
                if not front:
                    continue
                cand.add(int(rng.choice(front)))
            elif len(cand) > lo_size:
                cand.discard(int(rng.choice(list(cand))))
            else:
                continue
            cs = np.array(sorted(cand))
            if not feasible(cs):
                continue
            v = _iso_value(dense, cs, g.pi, g.dim)
            count += 1
            if v <= val:
                cur, val = cand, v
        if val < best:
            best, best_set = val, np.array(sorted(cur))
    if best_set is None:
        raise ValueError("local search found no feasible set")
    return IsoResult(float(best), g.sites[best_set], "heuristic", cap, n, nu, count, whole)


@dataclass
class KernelConstants:
    x: int
    distances: np.ndarray  # jump distances from x to every strong site
    pi: float
    dim: float
    a_star: float
    nu: float = 0.25
    c_iso: float | None = None
    c_iso_method: str | None = None
    size_cap: int | None = None

    def c_vol(self, a, grid: int = 64) -> np.ndarray:
        return c_vol_from_distances(self.distances, a, self.pi, self.dim, grid)


def kernel_constants(kernel: InducedKernel, x: int, nu: float = 0.25, iso_n: int | None = None,
                     size_cap: int = 8, iso_method: str | None = None, rng=None) -> KernelConstants:
    kc = KernelConstants(int(x), distance_profile(kernel, x), reference_measure(kernel),
                         kernel.dim, a_star(kernel), nu)
    if iso_method is not None:
        r = c_iso(kernel, x, iso_n or 1, nu, size_cap, iso_method, rng)
        kc.c_iso, kc.c_iso_method, kc.size_cap = r.value, iso_method, size_cap
    return kc


def threshold_times(c_iso_value: float, a_star_value: float, c1: float, nu: float, A: float,
                    dim: int):
    """The annotation thresholds t(x) and T(x) for configured c1, nu and A."""
    t = c1 * math.log(max(c_iso_value, c1)) ** (1.0 / (1.0 - 2.0 * nu))
    T = max((A * a_star_value) ** (-4.0 / dim) / dim, t * math.log(t) if t > 1 else 0.0)
    return t, T


# ---------------------------------------------------------------- Nash functionals


@dataclass
class NashCurves:
    x: int
    t: np.ndarray
    M: np.ndarray
    Q: np.ndarray
    method: str
    M_se: np.ndarray | None = None
    Q_se: np.ndarray | None = None
    biased: bool = False
    dM: np.ndarray | None = None
    dQ: np.ndarray | None = None
    derivative_error: np.ndarray | None = None
    max_distance: int = 0
    meta: dict = dc_field(default_factory=dict)


def _entropy_terms(p: np.ndarray, pi: float) -> np.ndarray:
    """-p log(p / pi) with the 0 log 0 = 0 convention."""
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = -p[pos] * np.log(p[pos] / pi)
    return out


def _exact_MQ(kernel: InducedKernel, x: int, times: np.ndarray, dist: np.ndarray):
    v = np.zeros(kernel.n)
    v[kernel.local[x]] = 1.0
    P = poisson_mix(kernel.matrix(), v, times)
    pi = reference_measure(kernel)
    return P @ dist, _entropy_terms(P, pi).sum(axis=1)


def nash_curves(kernel: InducedKernel, x: int, time_grid, method: str = "exact",
                samples: int = 0, rng=None) -> NashCurves:
    """M(x,t) = E d(x, Y_t) and Q(x,t) = -E log q_t(x, Y_t), with centered differences.

    Exact curves also carry derivatives from a halved grid; the difference between
    the two derivative estimates is the reported differencing error.
    """
    t = np.asarray(time_grid, dtype=float)
    if np.any(t < 0):
        raise ValueError("negative times")
    if t.size < 3 or np.any(np.diff(t) <= 0):
        raise ValueError("the time grid must be strictly increasing with >= 3 points")
    dist_all = markov_distances(kernel, x)
    dist = dist_all[kernel.sites].astype(float)
    if np.any(dist < 0):
        raise ValueError("w_hat graph is disconnected")
    if method == "exact":
        if kernel.n > EXACT_SIZE_CAP:
            raise ValueError(f"exact method limited to {EXACT_SIZE_CAP} sites")
        fine = np.sort(np.concatenate([t, (t[:-1] + t[1:]) / 2]))
        Mf, Qf = _exact_MQ(kernel, x, fine, dist)
        coarse = np.isin(fine, t)
        M, Q = Mf[coarse], Qf[coarse]
        dM_c, dQ_c = np.gradient(M, t), np.gradient(Q, t)
        dM_f, dQ_f = np.gradient(Mf, fine)[coarse], np.gradient(Qf, fine)[coarse]
        # first-order error of Q' - M'^2 carried by the two derivative estimates
        err = np.abs(dQ_c - dQ_f) + 2.0 * np.abs(dM_f) * np.abs(dM_c - dM_f)
        return NashCurves(int(x), t, M, Q, "exact", dM=dM_f, dQ=dQ_f,
                          derivative_error=err, max_distance=int(dist.max()),
                          meta={"dM_coarse": dM_c, "dQ_coarse": dQ_c})
    _check_mc(samples, rng)
    s, _, _ = sample_Y_at(kernel, np.full(samples, x), t, rng)
    dvals = dist_all[s]
    M = dvals.mean(axis=1)
    M_se = dvals.std(axis=1, ddof=1) / math.sqrt(samples)
    pi = reference_measure(kernel)
    if kernel.n <= EXACT_SIZE_CAP:
        v = np.zeros(kernel.n)
        v[kernel.local[x]] = 1.0
        P = poisson_mix(kernel.matrix(), v, t)
        lq = -np.log(np.take_along_axis(P, kernel.local[s], axis=1) / pi)
        biased = False
    else:
        lq = np.empty(s.shape)
        for j in range(t.size):
            counts = np.bincount(kernel.local[s[j]], minlength=kernel.n) / samples
            lq[j] = -np.log(counts[kernel.local[s[j]]] / pi)
        biased = True
    Q = lq.mean(axis=1)
    Q_se = lq.std(axis=1, ddof=1) / math.sqrt(samples)
    return NashCurves(int(x), t, M, Q, "monte-carlo", M_se, Q_se, biased,
                      np.gradient(M, t), np.gradient(Q, t), None, int(dist.max()))


@dataclass
class NashReport:
    t: np.ndarray
    slack1: np.ndarray  # M^d - exp(-1 - C_vol(x, 1/M) + Q)
    slack2: np.ndarray  # Q' - M'^2
    derivative_error: np.ndarray
    ratio: np.ndarray  # M / sqrt(t)
    a_prime_fit: tuple  # (c2, c3) fitted reporting constants
    tol: float

    @property
    def passed1(self) -> bool:
        return bool(np.all(self.slack1[np.isfinite(self.slack1)] >= -self.tol))

    @property
    def passed2(self) -> bool:
        return bool(np.all(self.slack2 >= -self.tol))

    def to_json(self) -> str:
        return json.dumps({
            "grid": self.t.tolist(), "slack1": self.slack1.tolist(), "slack2": self.slack2.tolist(),
            "derivative_error": self.derivative_error.tolist(), "ratio": self.ratio.tolist(),
            "a_prime_fit": list(self.a_prime_fit), "passed1": self.passed1,
            "passed2": self.passed2,
        })


def check_nash_inequalities(curves: NashCurves, constants: KernelConstants,
                            tol: float = 1e-6, A: float = 1.0, max_rel_error: float = 0.1) -> NashReport:
    """Slacks of M^d >= exp(-1 - C_vol(x, 1/M) + Q) and of M'^2 <= Q' on the grid."""
    if curves.dM is None or curves.dQ is None:
        raise ValueError("curves carry no derivatives")
    err = curves.derivative_error
    if err is not None:
        scale = np.abs(curves.dQ) + np.abs(curves.dM) ** 2
        bad = err > max_rel_error * scale + tol
        if np.any(bad):
            raise GridTooCoarse(
                f"derivative estimates move under grid halving at t = {curves.t[bad][:5].tolist()}"
            )
    else:
        err = np.zeros_like(curves.t)
    M, Q, d = curves.M, curves.Q, constants.dim
    s1 = np.full(M.shape, np.inf)
    pos = M > 0
    if np.any(pos):
        cv = constants.c_vol(1.0 / M[pos])
        s1[pos] = M[pos] ** d - np.exp(-1.0 - cv + Q[pos])
    s1[~pos] = 0.0  # M = 0 only at t = 0, where C_vol(x, inf) is infinite
    s2 = curves.dQ - curves.dM**2
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(curves.t > 0, M / np.sqrt(curves.t), np.nan)
    fit = (math.nan, math.nan)
    ok = curves.t > 0
    if ok.sum() >= 2:
        cvt = constants.c_vol(1.0 / np.sqrt(curves.t[ok]))
        X = np.column_stack([np.ones(ok.sum()), math.log(A) + cvt])
        coef, *_ = np.linalg.lstsq(X, ratio[ok], rcond=None)
        fit = (float(coef[0]), float(coef[1]))
    return NashReport(curves.t, s1, s2, err, ratio, fit, tol)


@dataclass
class DiffusiveBounds:
    t: np.ndarray
    sites: np.ndarray
    graph_ratio: np.ndarray  # (sites, t) E d(x, Y_t) / sqrt(t)
    graph_ratio_se: np.ndarray
    euclid_ratio: np.ndarray  # E |Y_t - x| / sqrt(t)
    euclid_ratio_se: np.ndarray
    return_scaled: np.ndarray  # t^{d/2} P_x(Y_t = x)
    return_scaled_se: np.ndarray

    def suprema(self) -> dict:
        out = {}
        for name in ("graph_ratio", "euclid_ratio", "return_scaled"):
            v = getattr(self, name)
            j = np.unravel_index(np.argmax(v), v.shape)
            out[name] = (float(v[j]), float(getattr(self, name + "_se")[j]))
        return out


def diffusive_bound_check(kernel: InducedKernel, sites, t_range, samples: int, rng,
                          scale: int | None = None) -> DiffusiveBounds:
    """E d(x,Y_t)/sqrt t, E|Y_t - x|/sqrt t and t^{d/2} P_x(Y_t = x) for t in [n, n^2]."""
    n = kernel.field.lattice.side if scale is None else int(scale)
    t = np.asarray(sorted(t_range), dtype=float)
    if np.any(t < n) or np.any(t > n * n):
        raise ValueError(f"times must lie in [{n}, {n * n}]")
    if samples < 100:
        raise InsufficientSamples("diffusive bounds need at least 100 samples per site")
    sites = np.asarray(sites, dtype=np.int64)
    g = jump_graph(kernel)
    k = t.size
    shape = (sites.size, k)
    gr, gse, er, ese, rs, rse = (np.zeros(shape) for _ in range(6))
    d = kernel.dim
    for i, x in enumerate(sites):
        dist = markov_distances(kernel, int(x), g)
        s, disp, _ = sample_Y_at(kernel, np.full(samples, x), t, rng)
        dv = dist[s].astype(float)
        eu = np.linalg.norm(disp, axis=2)
        ret = np.all(disp == 0, axis=2).astype(float)
        rt = np.sqrt(t)[:, None]
        gr[i], gse[i] = (dv / rt).mean(1), (dv / rt).std(1, ddof=1) / math.sqrt(samples)
        er[i], ese[i] = (eu / rt).mean(1), (eu / rt).std(1, ddof=1) / math.sqrt(samples)
        sc = (t**(d / 2))[:, None]
        rs[i], rse[i] = (ret * sc).mean(1), (ret * sc).std(1, ddof=1) / math.sqrt(samples)
    return DiffusiveBounds(t, sites, gr, gse, er, ese, rs, rse)

