"""The harmonic corrector on periodic boxes and its diagnostics.

On the torus the corrector is the minimizer of the Dirichlet energy
``sum_b omega_b |e_b + chi(y) - chi(x)|^2`` over the largest open cluster.  Its
normal equations are ``A chi = b`` with ``A`` the weighted graph Laplacian (as a
positive operator) and ``b(x) = sum_y omega_xy (y - x)``; they say exactly that
``phi(x) = x + chi(x)`` is harmonic for the lazy walk.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ._linalg import NotConverged, block_pcg
from .cluster import ClusterLabeling, HoleComponent, hole_components, label_clusters
from .env import ConductanceField, shift_field


@dataclass(frozen=True, eq=False)
class CorrectorField:
    field: ConductanceField
    chi: np.ndarray  # (N, d); NaN off the cluster
    cluster: np.ndarray  # boolean mask of sites where chi is defined
    tolerance: float
    residual: float  # achieved max |L phi|
    iterations: int
    origin: int = 0

    @property
    def dim(self) -> int:
        return self.field.dim

    def save_csv(self, path) -> Path:
        path = Path(path)
        d = self.dim
        with open(path, "w") as fh:
            fh.write("site_index," + ",".join(f"chi_{i + 1}" for i in range(d)) + "\n")
            for s in np.flatnonzero(self.cluster):
                fh.write(f"{s}," + ",".join(repr(float(v)) for v in self.chi[s]) + "\n")
        return path


def laplacian_system(field: ConductanceField, cluster: np.ndarray):
    """Positive Laplacian ``A`` and right-hand side ``b`` restricted to ``cluster``.

    Returns ``(A, b, sites)`` with ``A`` indexed by position in ``sites``.
    """
    lat = field.lattice
    sites = np.flatnonzero(cluster)
    loc = np.full(lat.n_sites, -1, dtype=np.int64)
    loc[sites] = np.arange(sites.size)
    t, h, w = lat.edge_tail, lat.edge_head, field.weights
    keep = (w > 0) & cluster[t] & cluster[h]
    t, h, w, i = loc[t[keep]], loc[h[keep]], w[keep], lat.edge_direction[keep]
    n = sites.size
    deg = np.bincount(t, weights=w, minlength=n) + np.bincount(h, weights=w, minlength=n)
    A = sp.csr_matrix((np.concatenate([-w, -w, deg]),
                       (np.concatenate([t, h, np.arange(n)]),
                        np.concatenate([h, t, np.arange(n)]))), shape=(n, n))
    b = np.zeros((n, lat.dim))
    np.add.at(b, (t, i), w)
    np.add.at(b, (h, i), -w)
    return A, b, sites


def solve_corrector_periodic(field: ConductanceField, tolerance: float = 1e-8,
                             maxiter: int = 200_000, x0=None, origin: int = 0,
                             labels0: ClusterLabeling | None = None) -> CorrectorField:
    """Solve for chi on the largest open cluster, stopping when max |L phi| <= tolerance."""
    lat = field.lattice
    if not lat.periodic:
        raise ValueError("the corrector is defined on the periodic box")
    lab = labels0 if labels0 is not None else label_clusters(field, 0.0)
    cluster = lab.in_largest
    if not cluster[origin]:
        raise ValueError(f"origin {origin} is not in the largest open cluster")
    others = np.delete(lab.sizes, lab.largest)
    if others.size and others.max() * 2 > lab.largest_size:
        warnings.warn("several open components carry comparable weight; "
                      "the corrector is solved on the largest only", RuntimeWarning)
    A, b, sites = laplacian_system(field, cluster)
    two_d = lat.n_ports
    guess = None
    if x0 is not None:
        guess = np.asarray(x0, dtype=float)[sites]
    res = block_pcg(A, b, tol=tolerance * two_d, maxiter=maxiter, x0=guess,
                    deflate_constants=True)
    if not res.converged:
        raise NotConverged(
            f"corrector solve stopped after {res.iterations} iterations with "
            f"max |L phi| = {np.abs(res.residual).max() / two_d:.3e}"
        )
    chi = np.full((lat.n_sites, lat.dim), np.nan)
    x = res.x.reshape(sites.size, lat.dim)
    chi[sites] = x - x[np.searchsorted(sites, origin)]
    achieved = float(np.abs(b - A @ chi[sites]).max(initial=0.0)) / two_d
    return CorrectorField(field, chi, cluster, float(tolerance), achieved, res.iterations, origin)


def corrector_1d_exact(field: ConductanceField) -> CorrectorField:
    """chi(x) = (1/C) sum_{n<x} (1/omega_n - C), with C the mean of 1/omega."""
    lat = field.lattice
    if lat.dim != 1 or not lat.periodic:
        raise ValueError("the closed form needs a 1-d periodic field")
    w = field.weights
    if np.any(w <= 0):
        raise ValueError("the closed form needs every conductance > 0")
    inv = 1.0 / w
    C = inv.mean()
    summand = inv / C - 1.0
    chi = np.concatenate([[0.0], np.cumsum(summand)[:-1]])[:, None]
    return CorrectorField(field, chi, np.ones(lat.n_sites, dtype=bool), 0.0,
                          float(_generator_residual(field, chi, np.ones(lat.n_sites, bool)).max()), 0)


def _generator_residual(field: ConductanceField, chi: np.ndarray, cluster: np.ndarray) -> np.ndarray:
    """Per-site max_i |(L phi)_i| on the cluster, with phi = x + chi."""
    lat = field.lattice
    W = field.port_weights
    nbr = lat.neighbors
    sites = np.flatnonzero(cluster)
    inc = np.zeros((sites.size, lat.dim))
    for k, v in enumerate(lat.port_vectors):
        y = nbr[sites, k]
        w = W[sites, k]
        ok = w > 0
        diff = np.zeros((sites.size, lat.dim))
        diff[ok] = v + chi[y[ok]] - chi[sites[ok]]
        inc += w[:, None] * diff
    return np.abs(inc / lat.n_ports).max(axis=1)


def harmonic_residual(field: ConductanceField, corrector: CorrectorField, alpha=None, kernel=None):
    """Max and mean of |L phi| over the cluster.

    With ``alpha`` (or a prebuilt induced ``kernel``) the residual uses the walk
    observed on the strong cluster: ``sum_y w_hat_xy (phi(y) - phi(x))``.
    """
    chi = corrector.chi
    if alpha is None and kernel is None:
        r = _generator_residual(field, chi, corrector.cluster)
        return {"max": float(r.max(initial=0.0)), "mean": float(r.mean()) if r.size else 0.0}
    if kernel is None:
        from .walk import induced_kernel

        kernel = induced_kernel(field, alpha)
    rows = np.repeat(np.arange(kernel.n), np.diff(kernel.indptr))
    src = kernel.sites[rows]
    inc = kernel.prob[:, None] * (kernel.disp + chi[kernel.target] - chi[src])
    out = np.zeros((kernel.n, field.dim))
    np.add.at(out, rows, inc)
    r = np.abs(out).max(axis=1)
    # optional stopping: the strong-cluster residual is bounded by E_x T_1 times the plain one
    return {"max": float(r.max(initial=0.0)), "mean": float(r.mean()) if r.size else 0.0,
            "bound": float((kernel.expected_time * corrector.residual).max(initial=0.0))}


def dirichlet_energy(field: ConductanceField, chi: np.ndarray, cluster: np.ndarray) -> float:
    lat = field.lattice
    t, h, w = lat.edge_tail, lat.edge_head, field.weights
    keep = (w > 0) & cluster[t] & cluster[h]
    e = np.zeros((keep.sum(), lat.dim))
    e[np.arange(e.shape[0]), lat.edge_direction[keep]] = 1.0
    grad = e + chi[h[keep]] - chi[t[keep]]
    return float((w[keep] * (grad**2).sum(axis=1)).sum())


def cocycle_check(field: ConductanceField, corrector: CorrectorField, pairs,
                  tolerance: float | None = None) -> float:
    """Max over pairs (x, y) of |chi(w, x) - chi(w, y) - chi(tau_y w, x - y)|."""
    lat = field.lattice
    tol = corrector.tolerance if tolerance is None else tolerance
    cache: dict[int, CorrectorField] = {}
    worst = 0.0
    coords = lat.coords()
    for x, y in pairs:
        x, y = int(x), int(y)
        if not (corrector.cluster[x] and corrector.cluster[y]):
            raise ValueError(f"pair ({x}, {y}) leaves the cluster")
        if y == 0 and corrector.origin == 0:
            continue  # tau_0 is the identity
        if y not in cache:
            cache[y] = solve_corrector_periodic(shift_field(field, coords[y]), tol)
        rel = int(lat.index(coords[x] - coords[y]))
        lhs = corrector.chi[x] - corrector.chi[y]
        worst = max(worst, float(np.abs(lhs - cache[y].chi[rel]).max()))
    return worst


@dataclass
class SublinearityStats:
    n: np.ndarray
    R: np.ndarray
    R_over_n: np.ndarray
    maximizer: np.ndarray  # site achieving R_n (lowest index among ties)
    epsilons: np.ndarray
    density: np.ndarray  # (len(epsilons), len(n))
    energy: float
    scale_gap: np.ndarray  # R_n - (eps n + delta R_{3n})
    eps_delta: tuple

    def to_json(self) -> str:
        return json.dumps({
            "n": self.n.tolist(), "R": self.R.tolist(), "R_over_n": self.R_over_n.tolist(),
            "maximizer": self.maximizer.tolist(), "epsilons": self.epsilons.tolist(),
            "density": self.density.tolist(), "energy": self.energy,
            "scale_gap": self.scale_gap.tolist(), "eps_delta": list(self.eps_delta),
        })


def sublinearity_stats(corrector: CorrectorField, labeling_alpha: ClusterLabeling | None,
                       epsilon_list=(0.05, 0.1), eps_delta=(0.1, 0.5)) -> SublinearityStats:
    """R_n = max |chi| over strong-cluster sites with |x| <= n, densities and energy.

    |x| is the sup norm of centered coordinates, |chi| the Euclidean norm.
    """
    field = corrector.field
    lat = field.lattice
    mask = corrector.cluster.copy()
    if labeling_alpha is not None:
        mask &= labeling_alpha.in_largest
    c = lat.centered(lat.coords() - lat.coords(corrector.origin))
    norm = np.abs(c).max(axis=1)
    size = np.where(mask, np.linalg.norm(np.nan_to_num(corrector.chi), axis=1), 0.0)
    n_max = lat.side // 2
    ns = np.arange(1, n_max + 1)
    R = np.zeros(ns.size)
    arg = np.full(ns.size, -1, dtype=np.int64)
    best, best_site = 0.0, -1
    sites_by_shell = [np.flatnonzero(mask & (norm == r)) for r in range(n_max + 1)]
    for r in range(n_max + 1):
        s = sites_by_shell[r]
        if s.size:
            j = s[np.argmax(size[s])]
            if size[j] > best or (size[j] == best and (best_site < 0 or j < best_site)):
                best, best_site = float(size[j]), int(j)
        if r >= 1:
            R[r - 1], arg[r - 1] = best, best_site
    eps = np.asarray(epsilon_list, dtype=float)
    dens = np.zeros((eps.size, ns.size))
    for j, n in enumerate(ns):
        inside = mask & (norm <= n)
        vals = size[inside]
        dens[:, j] = (vals[None, :] >= eps[:, None] * n).sum(axis=1) / float(n) ** lat.dim
    e, dlt = eps_delta
    R3 = R[np.minimum(3 * ns, n_max) - 1]
    energy_sites = corrector.cluster
    energy = _site_energy(field, corrector.chi, energy_sites)
    return SublinearityStats(ns, R, R / ns, arg, eps, dens, energy,
                             R - (e * ns + dlt * R3), (e, dlt))


def _site_energy(field, chi, cluster) -> float:
    """(1/|C|) sum_{x in C} sum_y omega_xy |chi(y) - chi(x)|^2."""
    lat = field.lattice
    t, h, w = lat.edge_tail, lat.edge_head, field.weights
    keep = (w > 0) & cluster[t] & cluster[h]
    g = chi[h[keep]] - chi[t[keep]]
    return float(2.0 * (w[keep] * (g**2).sum(axis=1)).sum() / max(cluster.sum(), 1))


@dataclass
class HoleBound:
    value: float  # max over holes of max_F |chi| - max_boundary |chi| - slack
    anchor: int  # worst hole, -1 if there are none
    per_hole: list


def hole_max_principle(field: ConductanceField, corrector: CorrectorField, alpha: float,
                       holes: list[HoleComponent] | None = None) -> HoleBound:
    """Check |chi| inside each hole against its boundary values.

    Optional stopping at the exit time gives chi(h) = E[chi(exit) + exit - h], so
    |chi(h)| <= max over the boundary of |chi| + max |exit - h|; the last term is the
    slack, measured in unwrapped coordinates.
    """
    from .walk import _hole_coords

    if holes is None:
        holes = hole_components(field, alpha)
    lat = field.lattice
    strong_mask = label_clusters(field, alpha).in_largest
    per = []
    worst, worst_anchor = -np.inf, -1
    for h in holes:
        coords = _hole_coords(field, h)
        W = field.port_weights[h.sites]
        exits, bsites = [], []
        for i in range(h.size):
            for k in range(lat.n_ports):
                if W[i, k] > 0 and strong_mask[lat.neighbors[h.sites[i], k]]:
                    exits.append(coords[i] + lat.port_vectors[k])
                    bsites.append(lat.neighbors[h.sites[i], k])
        if not exits:
            continue
        exits = np.asarray(exits, dtype=float)
        slack = float(np.linalg.norm(coords[:, None, :] - exits[None, :, :], axis=2).max())
        inner = float(np.linalg.norm(corrector.chi[h.sites], axis=1).max())
        outer = float(np.linalg.norm(corrector.chi[np.asarray(bsites)], axis=1).max())
        v = inner - outer - slack
        per.append((h.anchor, v))
        if v > worst:
            worst, worst_anchor = v, h.anchor
    if not per:
        return HoleBound(0.0, -1, [])
    return HoleBound(float(worst), int(worst_anchor), per)
