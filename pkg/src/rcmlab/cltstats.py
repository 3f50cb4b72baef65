"""Quenched CLT statistics: rescaled paths, the martingale phi(X_n), the diffusion
matrix, isotropy and normality checks, and the zero-mean shift identity."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .cluster import ClusterLabeling, label_clusters
from .corrector import CorrectorField
from .env import ConductanceField
from .walk import WalkPath, simulate_X


@dataclass
class PathEnsemble:
    """Walks of X recorded at the integer steps needed by the rescaled paths."""

    field: ConductanceField
    n: int
    steps: np.ndarray  # recorded step counts, sorted
    sites: np.ndarray  # (len(steps), m)
    disp: np.ndarray  # (len(steps), m, d) unwrapped displacement
    starts: np.ndarray
    mode: str = "fixed-environment"
    seed: int | None = None
    env_ids: list = dc_field(default_factory=list)

    @property
    def size(self) -> int:
        return self.starts.size

    def at(self, step: int):
        j = int(np.searchsorted(self.steps, step))
        if j >= self.steps.size or self.steps[j] != step:
            raise ValueError(f"step {step} was not recorded")
        return self.sites[j], self.disp[j]

    def rescaled(self, t: float) -> np.ndarray:
        """B_n(t) for every walk, shape (m, d)."""
        k = math.floor(t * self.n)
        frac = t * self.n - k
        _, a = self.at(k)
        if frac == 0:
            return a / math.sqrt(self.n)
        _, b = self.at(k + 1)
        return (a + frac * (b - a)) / math.sqrt(self.n)

    def manifest(self) -> str:
        return json.dumps({"environments": self.env_ids, "seeds": self.seed, "n": self.n,
                           "mode": self.mode, "walks": int(self.size)})


def needed_steps(n: int, t_grid) -> list[int]:
    out = {0}
    for t in t_grid:
        k = math.floor(t * n)
        out.add(k)
        if t * n != k:
            out.add(k + 1)
    return sorted(out)


def generate_ensemble(field: ConductanceField, n: int, n_walks: int, t_grid,
                      rng: np.random.Generator, start="origin", cluster=None,
                      extra_steps=(), seed=None) -> PathEnsemble:
    """Run ``n_walks`` independent X walks in one environment.

    ``start`` is ``"origin"`` (site 0), ``"uniform"`` (uniform on the cluster, the
    stationary start) or an explicit array of sites.
    """
    if n_walks <= 0:
        raise ValueError("need at least one walk")
    if cluster is None:
        cluster = label_clusters(field, 0.0).in_largest
    if isinstance(start, str):
        if start == "origin":
            starts = np.zeros(n_walks, dtype=np.int64)
        elif start == "uniform":
            starts = rng.choice(np.flatnonzero(cluster), size=n_walks)
        else:
            raise ValueError(f"unknown start {start!r}")
    else:
        starts = np.asarray(start, dtype=np.int64)
    if not np.all(cluster[starts]):
        raise ValueError("every start must lie in the open cluster")
    rec = sorted(set(needed_steps(n, t_grid)) | {int(s) for s in extra_steps})
    steps, sites, disp = simulate_X(field, starts, rec[-1], rng, record=rec)
    return PathEnsemble(field, int(n), steps, sites, disp, starts, seed=seed)


def rescale_path(path, n: int, t_grid) -> np.ndarray:
    """Piecewise-linear rescaled path X_{floor(tn)} + (tn - floor(tn)) increment, over sqrt n.

    ``path`` is a WalkPath or an array of unwrapped positions, one row per step.
    """
    pos = path.disp if isinstance(path, WalkPath) else np.asarray(path)
    if pos.ndim == 1:
        pos = pos[:, None]
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    k = np.floor(t_grid * n).astype(np.int64)
    frac = t_grid * n - k
    need = np.where(frac > 0, k + 1, k)
    if need.max(initial=0) >= pos.shape[0]:
        raise ValueError(f"path too short: need {need.max() + 1} positions, have {pos.shape[0]}")
    nxt = np.minimum(k + 1, pos.shape[0] - 1)
    vals = pos[k] + frac[:, None] * (pos[nxt] - pos[k])
    return vals / math.sqrt(n)


def _phi_offset(corrector: CorrectorField, starts: np.ndarray) -> np.ndarray:
    lat = corrector.field.lattice
    return lat.centered(lat.coords(starts) - lat.coords(corrector.origin))


def martingale_path(path, corrector: CorrectorField) -> np.ndarray:
    """M_k = phi(X_k) in unwrapped coordinates, for a WalkPath (rows = steps)."""
    chi = corrector.chi[path.sites]
    if np.any(np.isnan(chi)):
        raise ValueError("the path leaves the region where the corrector is defined")
    start = _phi_offset(corrector, np.array([path.start]))[0]
    return start + path.disp + chi


def martingale_values(ens: PathEnsemble, corrector: CorrectorField, step: int) -> np.ndarray:
    """M_step - M_0 for every walk of the ensemble."""
    sites, disp = ens.at(step)
    chi = corrector.chi[sites]
    if np.any(np.isnan(chi)):
        raise ValueError("a walk left the region where the corrector is defined")
    return disp + chi - corrector.chi[ens.starts]


@dataclass
class DiffusionEstimate:
    D: np.ndarray
    sigma2: float
    stderr: np.ndarray
    n_samples: int
    method: str


def _port_increments(corrector: CorrectorField):
    """Per cluster site and port: transition probability and phi increment."""
    field = corrector.field
    lat = field.lattice
    sites = np.flatnonzero(corrector.cluster)
    W = field.port_weights[sites]
    nbr = lat.neighbors[sites]
    p = W / lat.n_ports
    chi = np.nan_to_num(corrector.chi)
    inc = lat.port_vectors[None, :, :] + chi[np.maximum(nbr, 0)] - chi[sites][:, None, :]
    inc[p == 0] = 0.0
    return sites, p, inc


def diffusion_estimate(ensemble: PathEnsemble | None, corrector: CorrectorField,
                       method: str = "exact") -> DiffusionEstimate:
    """D_ij = E (e_i . M_1)(e_j . M_1).

    ``exact`` averages over the uniform (stationary) measure on the torus cluster;
    ``monte-carlo`` uses Cov(M_n)/n from an ensemble, which should start uniformly
    for the two to agree.
    """
    if not corrector.cluster.any():
        raise ValueError("empty cluster")
    if method == "exact":
        sites, p, inc = _port_increments(corrector)
        D = np.einsum("sk,ski,skj->ij", p, inc, inc) / sites.size
        D = (D + D.T) / 2
        return DiffusionEstimate(D, float(np.trace(D)), np.zeros_like(D), int(sites.size), "exact")
    if ensemble is None:
        raise ValueError("the monte-carlo estimate needs an ensemble")
    if ensemble.field is not corrector.field:
        raise ValueError("ensemble and corrector belong to different environments")
    M = martingale_values(ensemble, corrector, ensemble.n)
    prod = M[:, :, None] * M[:, None, :] / ensemble.n
    D = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / math.sqrt(M.shape[0])
    return DiffusionEstimate(D, float(np.trace(D)), se, int(M.shape[0]), "monte-carlo")


@dataclass
class IsotropyReport:
    cov: np.ndarray
    offdiag_z: np.ndarray  # z-score of each off-diagonal covariance
    diag_z: float  # z-score of the largest diagonal difference
    diag_rel_diff: float  # (max - min) / mean of the diagonal
    skew: np.ndarray
    skew_z: np.ndarray
    kurt: np.ndarray  # excess kurtosis
    kurt_z: np.ndarray
    directions: np.ndarray
    dir_var_z: np.ndarray
    dir_skew_z: np.ndarray
    dir_kurt_z: np.ndarray
    n_samples: int

    def worst_z(self) -> float:
        zs = [np.abs(self.offdiag_z).max(initial=0.0), abs(self.diag_z),
              np.abs(self.skew_z).max(), np.abs(self.kurt_z).max(),
              np.abs(self.dir_var_z).max(), np.abs(self.dir_skew_z).max(),
              np.abs(self.dir_kurt_z).max()]
        return float(max(zs))

    def rows(self):
        """(statistic, value, std_error, n_samples) tuples for CSV export."""
        out = []
        d = self.cov.shape[0]
        for i in range(d):
            out.append((f"var_{i + 1}", float(self.cov[i, i]), math.nan, self.n_samples))
            out.append((f"skew_{i + 1}", float(self.skew[i]), math.sqrt(6 / self.n_samples), self.n_samples))
            out.append((f"kurt_{i + 1}", float(self.kurt[i]), math.sqrt(24 / self.n_samples), self.n_samples))
        for i in range(d):
            for j in range(i + 1, d):
                z = self.offdiag_z[i, j]
                se = abs(self.cov[i, j] / z) if z else math.nan
                out.append((f"cov_{i + 1}{j + 1}", float(self.cov[i, j]), se, self.n_samples))
        return out


def _moments(x: np.ndarray):
    n = x.shape[0]
    c = x - x.mean(axis=0)
    m2 = (c**2).mean(axis=0)
    skew = (c**3).mean(axis=0) / m2**1.5
    kurt = (c**4).mean(axis=0) / m2**2 - 3.0
    return skew, skew / math.sqrt(6.0 / n), kurt, kurt / math.sqrt(24.0 / n)


def isotropy_normality_test(ensemble, corrector: CorrectorField | None = None, t: float = 1.0,
                            rng: np.random.Generator | None = None, n_directions: int = 3,
                            min_samples: int = 1000) -> IsotropyReport:
    """Covariance, diagonal-equality, skewness and kurtosis checks of B_n(t).

    ``ensemble`` is a PathEnsemble or an (m, d) array of samples (calibration input).
    The corrector is not needed for the walk itself; it is accepted so callers can
    pass the same arguments as to the martingale statistics.
    """
    B = ensemble.rescaled(t) if isinstance(ensemble, PathEnsemble) else np.asarray(ensemble, float)
    m, d = B.shape
    if m < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {m}")
    c = B - B.mean(axis=0)
    cov = c.T @ c / (m - 1)
    offz = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            if i != j:
                prod = c[:, i] * c[:, j]
                offz[i, j] = prod.mean() / (prod.std(ddof=1) / math.sqrt(m))
    diag = np.diag(cov)
    i_hi, i_lo = int(np.argmax(diag)), int(np.argmin(diag))
    if i_hi != i_lo:
        diff = c[:, i_hi] ** 2 - c[:, i_lo] ** 2
        diag_z = float(diff.mean() / (diff.std(ddof=1) / math.sqrt(m)))
    else:
        diag_z = 0.0
    rel = float((diag.max() - diag.min()) / diag.mean())
    skew, skz, kurt, kuz = _moments(B)
    rng = rng if rng is not None else np.random.default_rng(12345)
    dirs = rng.normal(size=(n_directions, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    proj = B @ dirs.T
    pc = proj - proj.mean(axis=0)
    # isotropy predicts variance = mean diagonal along every direction
    target = diag.mean()
    sq = pc**2
    dvz = (sq.mean(axis=0) - target) / (sq.std(axis=0, ddof=1) / math.sqrt(m))
    _, dsz, _, dkz = _moments(proj)
    return IsotropyReport(cov, offz, diag_z, rel, skew, skz, kurt, kuz, dirs, dvz, dsz, dkz, m)


@dataclass
class VarianceIdentity:
    step_var: float  # E|X_1|^2
    martingale_var: float  # E|M_1|^2
    corrector_var: float  # E|chi(X_1) - chi(X_0)|^2
    inner: float  # E X_1 . (chi(X_1) - chi(X_0))
    defect: float  # |E|X_1|^2 - E|M_1|^2 - E|chi|^2|
    inner_defect: float  # |inner + corrector_var|
    strict: bool  # E|M_1|^2 < E|X_1|^2


def variance_identity_check(field: ConductanceField, corrector: CorrectorField) -> VarianceIdentity:
    """Exact stationary sums of the quadratic decomposition of the first step."""
    if corrector.field is not field and not np.array_equal(corrector.field.weights, field.weights):
        raise ValueError("corrector was solved on a different field")
    sites, p, inc = _port_increments(corrector)
    lat = field.lattice
    n = sites.size
    step = lat.port_vectors[None, :, :].astype(float)
    dchi = inc - step
    dchi[p == 0] = 0.0
    ex = float((p * (step**2).sum(axis=2)).sum() / n)
    em = float((p * (inc**2).sum(axis=2)).sum() / n)
    ec = float((p * (dchi**2).sum(axis=2)).sum() / n)
    inner = float((p * (step * dchi).sum(axis=2)).sum() / n)
    return VarianceIdentity(ex, em, ec, inner, abs(ex - em - ec), abs(inner + ec), em < ex)


def first_step_variance(field: ConductanceField, cluster: np.ndarray) -> float:
    """E|X_1 - X_0|^2 under the uniform measure on ``cluster``."""
    W = field.port_weights[cluster]
    return float(W.sum() / field.lattice.n_ports / cluster.sum())


@dataclass
class ZeroMeanResult:
    mean: np.ndarray
    stderr: np.ndarray
    psi: np.ndarray  # (used, d)
    n_used: int
    n_skipped: int  # axis left the box before meeting the strong cluster
    n_unconditioned: int  # origin not in the strong cluster


def first_axis_hit(labeling_alpha: ClusterLabeling, axis: int, origin: int = 0) -> int:
    """First site x_1 = k e_axis, k >= 1, of the strong cluster; -1 if the axis wraps first."""
    lat = labeling_alpha.lattice
    strong = labeling_alpha.in_largest
    base = lat.coords(origin)
    for k in range(1, lat.side):
        c = base.copy()
        c[axis] += k
        s = int(lat.index(c))
        if s < 0:
            return -1
        if strong[s]:
            return s
    return -1


def axis_shift_zero_mean(fields, solver, axis: int = 0, alpha: float = 1.0,
                         tolerance: float = 1e-8) -> ZeroMeanResult:
    """Sample mean of Psi = chi(omega, x_1(omega)) over independent environments."""
    psis = []
    skipped = uncond = 0
    dim = 1
    for field in fields:
        dim = field.dim
        lab0 = label_clusters(field, 0.0)
        laba = lab0 if alpha == 0 else label_clusters(field, alpha)
        if not (laba.in_largest[0] and lab0.in_largest[0]):
            uncond += 1
            continue
        x1 = first_axis_hit(laba, axis)
        if x1 < 0:
            skipped += 1
            continue
        corr = solver(field, tolerance, labels0=lab0)
        psis.append(corr.chi[x1] - corr.chi[0])
    psi = np.asarray(psis, dtype=float).reshape(-1, dim)
    m = psi.shape[0]
    mean = psi.mean(axis=0) if m else np.full(psi.shape[1], np.nan)
    se = psi.std(axis=0, ddof=1) / math.sqrt(m) if m > 1 else np.full(psi.shape[1], np.nan)
    return ZeroMeanResult(mean, se, psi, m, skipped, uncond)


def shift_orbit(corrector: CorrectorField, labeling_alpha: ClusterLabeling, axis: int = 0):
    """Psi along the induced shift: Psi(sigma^k omega) for the strong points of the axis.

    Returns ``(points, psi, partial)`` where ``partial[k] = chi(x_{k+1})`` in unwrapped
    form; over a full loop of the torus the partial sums return to zero.
    """
    lat = corrector.field.lattice
    strong = labeling_alpha.in_largest & corrector.cluster
    pts = []
    for k in range(lat.side):
        c = np.zeros(lat.dim, dtype=np.int64)
        c[axis] = k
        s = int(lat.index(c))
        if strong[s]:
            pts.append(s)
    if not pts or pts[0] != corrector.origin:
        raise ValueError("the origin must lie in the strong cluster")
    nxt = pts[1:] + pts[:1]
    psi = corrector.chi[nxt] - corrector.chi[pts]
    return np.asarray(pts), psi, np.cumsum(psi, axis=0)


def lindeberg_profile(path: WalkPath, corrector: CorrectorField, n: int, eps_list=(0.1,)):
    """Time averages of f_K(tau_{X_k} omega) = E_{omega,X_k} |M_1 - M_0|^2 1{|M_1 - M_0| >= K}
    along one trajectory, for K = 0 and K = eps sqrt(n)."""
    sites, p, inc = _port_increments(corrector)
    norm = np.linalg.norm(inc, axis=2)
    loc = np.full(corrector.field.lattice.n_sites, -1, dtype=np.int64)
    loc[sites] = np.arange(sites.size)
    rows = loc[path.sites]
    if np.any(rows < 0):
        raise ValueError("the path leaves the cluster")
    out = {}
    for K in [0.0] + [e * math.sqrt(n) for e in eps_list]:
        f = (p * norm**2 * (norm >= K)).sum(axis=1)
        out[float(K)] = float(f[rows].mean())
    return out
