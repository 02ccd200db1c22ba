"""Metaball-Imaging: fit a Metaball to a surface point cloud.

The pipeline is preprocess -> :func:`run_ga` (coarse global contour) ->
:func:`run_gs` (gradient refinement with the piecewise loss, anomaly
cleanup between two descent phases).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import Metaball, evaluate, field_values

log = logging.getLogger(__name__)

HULL_TOL = 1e-9
MAX_REJECTIONS = 10_000


class DegenerateHullError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class PointHull:
    points: np.ndarray
    centroid_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.centroid_offset = np.asarray(self.centroid_offset, dtype=float)
        _check_volumetric(self.points)
        self._lp_matrix = np.vstack([self.points.T, np.ones(len(self.points))])
        self.lo = self.points.min(axis=0)
        self.hi = self.points.max(axis=0)

    @property
    def m(self) -> int:
        return len(self.points)

    @property
    def bounding_radius(self) -> float:
        return float(np.sqrt((self.points ** 2).sum(axis=1).max()))


def _check_volumetric(points: np.ndarray):
    if len(points) < 4:
        raise DegenerateHullError(f"need at least 4 points, got {len(points)}")
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[-1] <= 1e-9 * max(s[0], 1e-300):
        raise DegenerateHullError("points are coplanar; a volumetric hull is required")


def preprocess(raw_points, region=None) -> PointHull:
    """Region-of-interest filter then translation of the centroid to the origin.

    ``region`` is an optional ``(lo, hi)`` pair of 3-vectors.
    """
    pts = np.asarray(raw_points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise DegenerateHullError("no points")
    if region is not None:
        lo, hi = (np.asarray(v, float) for v in region)
        pts = pts[np.all((pts >= lo) & (pts <= hi), axis=1)]
    if len(pts) < 4:
        raise DegenerateHullError(f"only {len(pts)} points survive the region filter")
    offset = pts.mean(axis=0)
    return PointHull(pts - offset, offset)


def phase1_feasible(A: np.ndarray, b: np.ndarray, tol: float = HULL_TOL,
                    max_iter: int = 10_000) -> bool:
    """Is {a >= 0 : A a = b} non-empty?  Revised phase-1 simplex.

    Artificial variables start in the basis; their sum is driven to zero
    with Dantzig pricing, switching to Bland's rule after a run of
    degenerate pivots.
    """
    A = np.array(A, dtype=float)
    b = np.array(b, dtype=float)
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0
    rows, cols = A.shape
    basis = np.arange(cols, cols + rows)
    binv = np.eye(rows)
    x_b = b.copy()
    cost_b = np.ones(rows)
    degenerate = 0
    for _ in range(max_iter):
        y = cost_b @ binv
        reduced = -(y @ A)
        # artificials never re-enter: their reduced cost is 1 - y_i >= 0 at optimum
        if degenerate > 50:
            cand = np.nonzero(reduced < -tol)[0]
            if len(cand) == 0:
                break
            j = int(cand[0])
        else:
            j = int(np.argmin(reduced))
            if reduced[j] >= -tol:
                break
        d = binv @ A[:, j]
        pos = d > tol
        if not pos.any():
            # unbounded direction cannot occur in phase 1 (objective >= 0)
            break
        ratios = np.full(rows, np.inf)
        ratios[pos] = x_b[pos] / d[pos]
        r = int(np.argmin(ratios))
        theta = ratios[r]
        degenerate = degenerate + 1 if theta <= tol else 0
        x_b = x_b - theta * d
        x_b[r] = theta
        piv = d[r]
        row = binv[r] / piv
        binv = binv - np.outer(d, row)
        binv[r] = row
        basis[r] = j
        cost_b[r] = 0.0
    return float(cost_b @ x_b) <= tol * max(1.0, float(np.abs(b).max()))


def point_in_hull(hull: PointHull, p) -> bool:
    """Convex-combination test as an LP feasibility problem.

    Minimise sum(a) subject to [H^T; 1] a = [p; 1], a >= 0.  The point is
    inside exactly when this is feasible.
    """
    p = np.asarray(p, dtype=float)
    if np.any(p < hull.lo - HULL_TOL) or np.any(p > hull.hi + HULL_TOL):
        return False
    return phase1_feasible(hull._lp_matrix, np.append(p, 1.0))


# --- genes -----------------------------------------------------------------

@dataclass
class GaConfig:
    generations: int = 100
    population: int = 1200
    genes: int = 100
    mutation_coeff: float = 0.6
    crossover_coeff: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if min(self.generations, self.population, self.genes) < 1:
            raise ValueError("generations, population and genes must be >= 1")
        if self.genes < 4:
            raise ValueError("at least 4 genes are needed for one control point")
        if not 0.0 <= self.mutation_coeff <= 1.0:
            raise ValueError("mutation_coeff must lie in [0, 1]")
        if not 0.0 < self.crossover_coeff < 1.0:
            raise ValueError("crossover_coeff must lie in (0, 1)")


@dataclass
class GsConfig:
    epochs: int = 100_000
    learning_rate: float = 1e-3
    anomaly_tolerance: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class Individual:
    genes: np.ndarray
    fitness: float = np.inf

    @property
    def n_points(self) -> int:
        return len(self.genes) // 4

    def to_metaball(self) -> Metaball:
        q = np.asarray(self.genes[: 4 * self.n_points]).reshape(-1, 4)
        return Metaball(q[:, 1:], q[:, 0])


def encode(mb: Metaball) -> np.ndarray:
    return np.column_stack([mb.weights, mb.centers]).ravel()


def _population_fitness(pop: np.ndarray, hull_pts: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Sum of squared level residuals for each row of ``pop`` (N, n, 4)."""
    out = np.empty(len(pop))
    for s in range(0, len(pop), chunk):
        block = pop[s:s + chunk]
        d = hull_pts[None, :, None, :] - block[:, None, :, 1:]
        r2 = np.einsum("abcd,abcd->abc", d, d)
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(r2 > 0, block[:, None, :, 0] / np.where(r2 > 0, r2, 1.0), np.inf).sum(axis=2)
            res = ((f - 1.0) ** 2).sum(axis=1)
        out[s:s + chunk] = np.where(np.isnan(res), np.inf, res)
    return out


def fitness(individual: Individual, hull: PointHull) -> float:
    n = individual.n_points
    if n < 1:
        raise ValueError("individual encodes no control point")
    q = np.asarray(individual.genes[: 4 * n], float).reshape(1, n, 4)
    return float(_population_fitness(q, hull.points)[0])


def _sample_inside(hull: PointHull, count: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((count, 3))
    got = 0
    misses = 0
    while got < count:
        p = rng.uniform(hull.lo, hull.hi)
        if point_in_hull(hull, p):
            out[got] = p
            got += 1
            misses = 0
        else:
            misses += 1
            if misses >= MAX_REJECTIONS:
                raise DegenerateHullError(
                    f"no feasible control point after {MAX_REJECTIONS} rejection samples")
    return out


@dataclass
class GaResult:
    best: Metaball
    best_fitness: float
    history: list[float]


def run_ga(hull: PointHull, cfg: GaConfig) -> GaResult:
    """Genetic search for the principal outer contour.

    Elitist: the fittest ``population`` individuals of parents plus
    offspring survive, so the best fitness never increases.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    n_cp = cfg.genes // 4
    r_h = hull.bounding_radius
    pos = _sample_inside(hull, cfg.population * n_cp, rng).reshape(cfg.population, n_cp, 3)
    k = r_h * r_h * (1.0 - rng.random((cfg.population, n_cp)))
    pop = np.concatenate([k[..., None], pos], axis=2)
    fit = _population_fitness(pop, hull.points)

    cut = int(cfg.crossover_coeff * cfg.genes) // 4
    sigma_pos = 0.05 * r_h
    history = []
    for _ in range(cfg.generations):
        kids = pop.copy()
        mutate = rng.random(kids.shape) < cfg.mutation_coeff
        noise = rng.standard_normal(kids.shape)
        scale = np.empty(kids.shape)
        scale[..., 0] = 0.05 * np.abs(kids[..., 0])
        scale[..., 1:] = sigma_pos
        kids = np.where(mutate, kids + noise * scale, kids)

        order = rng.permutation(len(kids))
        a, b = order[0::2], order[1::2]
        a = a[: len(b)]
        if 0 < cut < n_cp:
            tail_a = kids[a, cut:].copy()
            kids[a, cut:] = kids[b, cut:]
            kids[b, cut:] = tail_a

        kid_fit = _population_fitness(kids, hull.points)
        pool = np.concatenate([pop, kids])
        pool_fit = np.concatenate([fit, kid_fit])
        keep = np.argsort(pool_fit, kind="stable")[: cfg.population]
        pop, fit = pool[keep], pool_fit[keep]
        history.append(float(fit[0]))

    best = Individual(pop[0].ravel(), float(fit[0]))
    return GaResult(best.to_metaball(), best.fitness, history)


# --- gradient search -------------------------------------------------------

def loss_terms(f: np.ndarray) -> np.ndarray:
    """Piecewise per-point loss; continuous at f = 1 and f = 2."""
    f = np.asarray(f, dtype=float)
    with np.errstate(divide="ignore"):
        low = (f - 1.0) ** 2 + 1.0 / f - 1.0
    return np.where(f >= 2.0, (f - 1.0) ** 2, np.where(f >= 1.0, np.abs(f - 1.0), low))


def loss_derivative(f: np.ndarray, flat_tol: float = 1e-12) -> np.ndarray:
    """d loss / d f.  At the kink f = 1 the zero subgradient is used."""
    f = np.asarray(f, dtype=float)
    with np.errstate(divide="ignore"):
        low = 2.0 * (f - 1.0) - 1.0 / (f * f)
    d = np.where(f >= 2.0, 2.0 * (f - 1.0), np.where(f >= 1.0, 1.0, low))
    return np.where(np.abs(f - 1.0) <= flat_tol, 0.0, d)


def _hull_values(k: np.ndarray, c: np.ndarray, pts: np.ndarray):
    d = pts[:, None, :] - c[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", d, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / r2
        return d, inv, inv @ k


def gs_loss(mb: Metaball, hull: PointHull) -> float:
    f = field_values(mb, hull.points)
    return float(loss_terms(f).sum())


def gs_loss_gradient(mb: Metaball, hull: PointHull):
    """Gradient of the summed loss w.r.t. weights (n,) and centers (n, 3)."""
    return _loss_grad(mb.weights, mb.centers, hull.points)[1:]


def _loss_grad(k, c, pts):
    d, inv, f = _hull_values(k, c, pts)
    dl = loss_derivative(f)
    gk = inv.T @ dl
    # d(1/r^2)/dc = 2 (x - c) / r^4
    w = (dl[:, None] * inv * inv) * (2.0 * k[None, :])
    gc = np.einsum("ij,ijk->jk", w, d)
    return float(loss_terms(f).sum()), gk, gc


def anomaly_detect(mb: Metaball, hull: PointHull, tolerance: float = 0.0) -> Metaball:
    """Zero the weight of control points outside the hull or with k <= 0."""
    bad = np.array([
        k <= tolerance or not point_in_hull(hull, c)
        for c, k in zip(mb.centers, mb.weights)
    ])
    if bad.all():
        raise ValueError("every control point is anomalous")
    if not bad.any():
        return mb
    k = mb.weights.copy()
    k[bad] = 0.0
    log.info("anomaly detection cleared %d of %d control points", bad.sum(), len(k))
    return mb.with_weights(k)


def _descend(k, c, pts, cfg: GsConfig, frozen: np.ndarray):
    m = len(pts)
    eta = cfg.learning_rate
    best = (np.inf, k.copy(), c.copy())
    prev = np.inf
    rising = 0
    for _ in range(cfg.epochs):
        loss, gk, gc = _loss_grad(k, c, pts)
        if not np.isfinite(loss):
            raise DivergenceError("loss became non-finite; reduce the learning rate")
        if loss < best[0]:
            best = (loss, k.copy(), c.copy())
        rising = rising + 1 if loss > prev else 0
        if rising >= 100:
            raise DivergenceError("loss grew for 100 consecutive epochs; reduce the learning rate")
        prev = loss
        gk[frozen] = 0.0
        gc[frozen] = 0.0
        # the step uses the per-point mean so eta does not depend on hull size
        k = k - (eta / m) * gk
        c = c - (eta / m) * gc
    loss = _loss_grad(k, c, pts)[0]
    if loss < best[0]:
        best = (loss, k, c)
    return best


def run_gs(mb0: Metaball, hull: PointHull, cfg: GsConfig) -> Metaball:
    """Two full-batch descent phases separated by anomaly detection.

    Each phase keeps its lowest-loss iterate.  If the result is worse than
    the warm start, the warm start is returned.
    """
    pts = hull.points
    loss0 = gs_loss(mb0, hull)
    frozen = np.zeros(mb0.n, dtype=bool)
    _, k, c = _descend(mb0.weights.copy(), mb0.centers.copy(), pts, cfg, frozen)
    cleaned = anomaly_detect(Metaball(c, k, mb0.sphero_radius), hull, cfg.anomaly_tolerance)
    frozen = cleaned.weights == 0.0
    loss, k, c = _descend(cleaned.weights.copy(), cleaned.centers.copy(), pts, cfg, frozen)
    if loss > loss0:
        log.warning("gradient search did not improve on the warm start (%.6g > %.6g)", loss, loss0)
        return mb0
    return Metaball(c, k, mb0.sphero_radius, mb0.surface_level)


@dataclass
class FitResult:
    metaball: Metaball
    hull: PointHull
    ga: GaResult
    loss: float
    residuals: np.ndarray
    cleared: int


def fit(raw_points, ga_cfg: GaConfig, gs_cfg: GsConfig, region=None) -> FitResult:
    """preprocess -> GA -> GS; the returned Metaball is in the hull frame."""
    hull = preprocess(raw_points, region)
    ga = run_ga(hull, ga_cfg)
    mb = run_gs(ga.best, hull, gs_cfg)
    cleared = int((mb.weights <= 0).sum())
    keep = mb.weights > 0
    mb = Metaball(mb.centers[keep], mb.weights[keep], mb.sphero_radius)
    res = evaluate(mb, hull.points) - 1.0
    return FitResult(mb, hull, ga, gs_loss(mb, hull), res, cleared)
