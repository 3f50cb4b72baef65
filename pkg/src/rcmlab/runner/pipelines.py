"""One pipeline per experiment.

Each pipeline maps (config, seed) to a dict with three parts:

* ``deterministic``: values that depend only on the field (bit-reproducible),
* ``statistical``: Monte Carlo values as ``{"value": ..., "stderr": ...}``,
* ``checks``: named invariant checks, True when they hold.

``artifacts`` holds CSV/JSON text keyed by file name; the runner writes them.
"""

from __future__ import annotations

import math

import numpy as np

from ..cltstats import (diffusion_estimate, first_step_variance, generate_ensemble,
                        isotropy_normality_test, variance_identity_check)
from ..cluster import (diameter_tail, good_block_event, hole_components, label_clusters,
                       sample_with_origin)
from ..corrector import (cocycle_check, corrector_1d_exact, harmonic_residual,
                         hole_max_principle, solve_corrector_periodic, sublinearity_stats)
from ..env import build_box, sample_field, save_field, walk_rng
from ..kernelstats import (EXACT_SIZE_CAP, check_nash_inequalities, heat_lower_bound_curve,
                           kernel_constants, nash_curves)
from ..walk import distance_comparison, induced_kernel

STREAM_WALKS = 1
STREAM_PAIRS = 2
STREAM_DIRECTIONS = 3


def _lattice(cfg):
    return build_box(cfg.dim, cfg.side, cfg.boundary)


def _floats(a) -> list:
    return [float(v) for v in np.ravel(a)]


def _stat(value, stderr):
    return {"value": _floats(value), "stderr": _floats(stderr)}


def run_percolation(cfg, seed: int) -> dict:
    lat = _lattice(cfg)
    field = sample_field(lat, cfg.law_object(), seed)
    lab0 = label_clusters(field, 0.0)
    laba = label_clusters(field, cfg.alpha)
    holes = hole_components(field, cfg.alpha, lab0, laba)
    strong = laba.in_largest
    open_sites = int((lab0.labels >= 0).sum())
    det = {
        "largest_open": lab0.largest_size,
        "largest_strong": laba.largest_size,
        "components_open": lab0.n_components,
        "tie_open": lab0.tie,
        "tie_strong": laba.tie,
        "hole_count": len(holes),
        "hole_sizes": [h.size for h in holes],
        "hole_diameters": [h.diameter for h in holes],
    }
    checks = {
        "sizes_sum": int(lab0.sizes.sum()) == open_sites,
        "threshold_monotone": laba.largest_size <= lab0.largest_size,
        "holes_disjoint": all(not strong[h.sites].any() for h in holes),
        "holes_attached": all(h.boundary.size > 0 for h in holes),
    }
    k = cfg.params["block_size"]
    if k > 0:
        # the enlarged box [k(x-1), k(x+2)] must fit inside [0, side-1]
        x_max = (lat.side - 1) // k - 2
        center = np.full(lat.dim, (1 + x_max) // 2)
        g, ga = good_block_event(field, k, center, cfg.alpha)
        g0, _ = good_block_event(field, k, center, 0.0)
        det["good_block"] = [bool(g), bool(ga)]
        checks["good_block_alpha_zero"] = bool(g0) == bool(g)
        checks["good_block_nested"] = (not ga) or g
    return {"deterministic": det, "statistical": {}, "checks": checks, "holes": holes,
            "field": field, "artifacts": {}}


def finish_percolation(cfg, per_seed: list[dict]) -> dict:
    """Diameter tail across seeds, when there are enough samples."""
    if len(per_seed) < 100:
        return {"deterministic": {"diameter_tail": "skipped: fewer than 100 samples"},
                "artifacts": {}, "checks": {}}
    lat = _lattice(cfg)
    tail = diameter_tail([r["holes"] for r in per_seed], cfg.params["tail_mode"], lat.n_sites)
    rows = ["n,tail_prob,count"] + [f"{int(n)},{float(p)!r},{int(c)}"
                                   for n, p, c in zip(tail.n, tail.tail_prob, tail.count)]
    out = {"diameter_tail": {"n": tail.n.tolist(), "tail_prob": _floats(tail.tail_prob),
                             "count": tail.count.tolist()}}
    try:
        slope, icpt, r2 = tail.fit_log_tail()
        out["tail_fit"] = {"slope": slope, "intercept": icpt, "r_squared": r2}
    except ValueError:
        out["tail_fit"] = None
    return {"deterministic": out, "artifacts": {"diameter_tail.csv": "\n".join(rows) + "\n"},
            "checks": {"tail_monotone": bool(np.all(np.diff(tail.tail_prob) <= 0))}}


def run_corrector(cfg, seed: int) -> dict:
    lat = _lattice(cfg)
    p = cfg.params
    tol = p["tolerance"]
    field = sample_with_origin(lat, cfg.law_object(), seed, 0.0)
    lab0 = label_clusters(field, 0.0)
    corr = solve_corrector_periodic(field, tol, labels0=lab0)
    res = harmonic_residual(field, corr)
    det = {"iterations": corr.iterations, "residual": res, "field_seed": field.seed,
           "max_abs_chi": float(np.nanmax(np.abs(corr.chi)))}
    checks = {"residual": res["max"] <= tol}
    if lat.dim == 1 and np.all(field.weights > 0):
        exact = corrector_1d_exact(field)
        det["closed_form_gap"] = float(np.abs(corr.chi - exact.chi).max())
    laba = label_clusters(field, cfg.alpha) if cfg.alpha > 0 else lab0
    if cfg.alpha > 0 and laba.largest >= 0:
        kern = induced_kernel(field, cfg.alpha, lab0, laba)
        ra = harmonic_residual(field, corr, kernel=kern)
        det["residual_alpha"] = ra
        checks["residual_alpha"] = ra["max"] <= 10 * max(ra["bound"], tol)
        hb = hole_max_principle(field, corr, cfg.alpha, kern.holes)
        det["hole_max_principle"] = {"value": hb.value, "anchor": hb.anchor}
        checks["hole_max_principle"] = hb.value <= 1e-9
    sub = sublinearity_stats(corr, laba, p["epsilons"], tuple(p["eps_delta"]))
    det["R_over_n_half"] = float(sub.R_over_n[-1])
    det["density_half"] = _floats(sub.density[:, -1])
    det["energy"] = sub.energy
    vi = variance_identity_check(field, corr)
    det["variance_identity"] = {"step": vi.step_var, "martingale": vi.martingale_var,
                                "corrector": vi.corrector_var, "defect": vi.defect}
    checks["variance_identity"] = vi.defect <= 10 * tol
    n_pairs = p["cocycle_pairs"]
    if n_pairs:
        rng = walk_rng(seed, STREAM_PAIRS)
        sites = np.flatnonzero(corr.cluster)
        pairs = rng.choice(sites, size=(n_pairs, 2))
        det["cocycle_defect"] = cocycle_check(field, corr, pairs)
        checks["cocycle"] = det["cocycle_defect"] <= 10 * tol
    return {"deterministic": det, "statistical": {}, "checks": checks, "field": field,
            "artifacts": {f"sublinearity_{seed}.json": sub.to_json()}}


def run_clt(cfg, seed: int) -> dict:
    lat = _lattice(cfg)
    p = cfg.params
    field = sample_with_origin(lat, cfg.law_object(), seed, 0.0)
    lab0 = label_clusters(field, 0.0)
    corr = solve_corrector_periodic(field, p["tolerance"], labels0=lab0)
    D = diffusion_estimate(None, corr)
    step_var = first_step_variance(field, corr.cluster)
    rng = walk_rng(seed, STREAM_WALKS)
    ens = generate_ensemble(field, p["steps"], p["walks"], [p["t"]], rng, cluster=corr.cluster)
    B = ens.rescaled(p["t"]) / math.sqrt(p["t"])
    m = B.shape[0]
    c = B - B.mean(axis=0)
    sq = c**2
    stat = {"var": _stat(sq.mean(axis=0) * m / max(m - 1, 1),
                         sq.std(axis=0, ddof=1) / math.sqrt(m) if m > 1 else np.zeros(lat.dim))}
    iu = np.triu_indices(lat.dim, 1)
    if m > 1 and iu[0].size:
        prod = c[:, iu[0]] * c[:, iu[1]]
        stat["offdiag_cov"] = _stat(prod.mean(axis=0), prod.std(axis=0, ddof=1) / math.sqrt(m))
    if m >= 1000:
        rep = isotropy_normality_test(B, rng=walk_rng(seed, STREAM_DIRECTIONS))
        stat["skewness"] = _stat(rep.skew, np.full(lat.dim, math.sqrt(6 / m)))
        stat["excess_kurtosis"] = _stat(rep.kurt, np.full(lat.dim, math.sqrt(24 / m)))
    det = {"D": D.D.tolist(), "sigma2": D.sigma2, "step_var": step_var,
           "iterations": corr.iterations}
    checks = {"sigma2_below_step_var": 0 < D.sigma2 < step_var,
              "D_symmetric": bool(np.abs(D.D - D.D.T).max() <= 1e-12),
              "residual": corr.residual <= p["tolerance"]}
    return {"deterministic": det, "statistical": stat, "checks": checks, "field": field,
            "artifacts": {}}


def run_heatkernel(cfg, seed: int) -> dict:
    lat = _lattice(cfg)
    p = cfg.params
    field = sample_with_origin(lat, cfg.law_object(), seed, 0.0)
    curve = heat_lower_bound_curve(field, p["n_list"], p["samples"], walk_rng(seed, STREAM_WALKS))
    stat = {"scaled_return": _stat(curve.value, curve.stderr)}
    checks = {"positive_3se": not bool(curve.indistinguishable.any())}
    return {"deterministic": {"n": curve.n.tolist()}, "statistical": stat, "checks": checks,
            "field": field, "artifacts": {f"return_curve_{seed}.json": curve.to_json()}}


def run_nash(cfg, seed: int) -> dict:
    lat = _lattice(cfg)
    p = cfg.params
    field = sample_field(lat, cfg.law_object(), seed)
    kern = induced_kernel(field, cfg.alpha)
    if kern.n > EXACT_SIZE_CAP:
        raise ValueError(f"strong cluster has {kern.n} sites, above the exact cap {EXACT_SIZE_CAP}")
    x = int(kern.sites[0])
    grid = np.linspace(p["t_min"], p["t_max"], p["t_points"])
    curves = nash_curves(kern, x, grid)
    const = kernel_constants(kern, x, p["nu"])
    rep = check_nash_inequalities(curves, const, p["tolerance"])
    det = {"x": x, "sites": int(kern.n), "a_star": const.a_star,
           "min_slack1": float(rep.slack1.min()), "min_slack2": float(rep.slack2.min()),
           "max_derivative_error": float(rep.derivative_error.max()),
           "a_prime_fit": list(rep.a_prime_fit)}
    checks = {"nash1": rep.passed1, "nash2": rep.passed2,
              "Q_above_log_astar": bool(np.all(curves.Q >= math.log(const.a_star) - 1e-12))}
    return {"deterministic": det, "statistical": {}, "checks": checks, "field": field,
            "artifacts": {f"nash_{seed}.json": rep.to_json()}}


def run_distances(cfg, seed: int) -> dict:
    lat = _lattice(cfg)
    p = cfg.params
    origin = 0 if lat.periodic else int(lat.index(np.full(lat.dim, lat.side // 2)))
    field = sample_with_origin(lat, cfg.law_object(), seed, cfg.alpha, origin)
    lab0 = label_clusters(field, 0.0)
    laba = label_clusters(field, cfg.alpha)
    kern = induced_kernel(field, cfg.alpha, lab0, laba)
    cmp_ = distance_comparison([(kern, laba)], p["radii"], p["rho"], origin)
    det = {"radii": cmp_.radii.tolist(), "min_ratio": _floats(cmp_.min_ratio),
           "min_chemical_ratio": _floats(cmp_.min_chemical_ratio),
           "violation_freq": _floats(cmp_.violation_freq), "n_pairs": cmp_.n_pairs.tolist()}
    checks = {"markov_le_chemical": cmp_.markov_le_chemical}
    return {"deterministic": det, "statistical": {}, "checks": checks, "field": field,
            "artifacts": {}}


PIPELINES = {
    "percolation": run_percolation,
    "corrector": run_corrector,
    "clt": run_clt,
    "heatkernel": run_heatkernel,
    "nash": run_nash,
    "distances": run_distances,
}

FINISHERS = {"percolation": finish_percolation}


def field_artifact(field, out_dir, seed):
    return save_field(field, out_dir / f"field_{seed}.bin")
