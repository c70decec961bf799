"""Gaussian-process distance field (GPDF).

A GP occupancy field is regressed on surface points with the Matern nu=1/2
kernel ``k(d) = exp(-d / l)`` (unit signal variance).  Because that kernel is
an invertible function of the Euclidean distance, the posterior occupancy can
be mapped back through ``r(o) = -l * ln(o)`` to a distance-like field: exact
for a single support point, an underestimate of the true distance elsewhere.

The raw field is sharpened by sphere-marching-style refinement: repeatedly
project the query along the normalized field gradient by the current estimate
and accumulate the travelled distance.  The refined value approaches the true
surface distance and the final gradient direction approaches the surface
normal of the projected point.

Fields are dimension-generic: m=3 for object surfaces, m=n_joints when the
support points are joint configurations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import cdist

DEFAULT_LENGTHSCALE = 0.3
DEFAULT_NOISE_VAR = 1e-4
DEFAULT_REFINE_ITERS = 5
OCCUPANCY_FLOOR = 1e-12
_JITTER = 1e-8
_MAX_JITTER_ATTEMPTS = 3
_GRAD_TOL = 1e-9
_CHUNK = 512


class FitError(RuntimeError):
    """Raised when the kernel system cannot be factorized."""


@dataclass
class PointCloud:
    """Surface points (n, 3) with optional unit normals and per-point
    uncertainty (occupancy variance)."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    uncertainty: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.normals is not None:
            self.normals = np.atleast_2d(np.asarray(self.normals, dtype=float))
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("normals must be unit vectors")
        if self.uncertainty is not None:
            self.uncertainty = np.asarray(self.uncertainty, dtype=float).reshape(-1)

    def __len__(self):
        return self.points.shape[0]

    def transformed(self, pose) -> "PointCloud":
        normals = None if self.normals is None else self.normals @ pose.rotation.T
        return PointCloud(pose.apply(self.points), normals, self.uncertainty)


@dataclass(frozen=True)
class GPDFModel:
    """Fitted distance field: immutable after fit, queries are read-only."""

    support_points: np.ndarray
    alpha: np.ndarray
    lengthscale: float
    noise_var: float
    chol: tuple  # cho_factor of (K + noise_var I [+ jitter I])

    @property
    def dim(self) -> int:
        return self.support_points.shape[1]


class RefineResult(NamedTuple):
    distance: np.ndarray
    normal: np.ndarray
    point: np.ndarray       # final marched position
    degenerate: np.ndarray  # True where the gradient vanished mid-march


def _kernel(model: GPDFModel, queries: np.ndarray) -> np.ndarray:
    return np.exp(-cdist(queries, model.support_points) / model.lengthscale)


def fit_points(support: np.ndarray, lengthscale: float = DEFAULT_LENGTHSCALE,
               noise_var: float = DEFAULT_NOISE_VAR) -> GPDFModel:
    """Fit a distance field on raw support points (n, m)."""
    support = np.atleast_2d(np.asarray(support, dtype=float))
    if support.size == 0:
        raise FitError("cannot fit a distance field on an empty point set")
    if noise_var < 0:
        raise ValueError("noise_var must be >= 0")
    n = support.shape[0]
    gram = np.exp(-cdist(support, support) / lengthscale)
    system = gram + noise_var * np.eye(n)
    jitter = 0.0
    for attempt in range(_MAX_JITTER_ATTEMPTS + 1):
        try:
            chol = cho_factor(system + jitter * np.eye(n), lower=True)
            break
        except np.linalg.LinAlgError:
            jitter += _JITTER
    else:
        raise FitError(
            f"kernel system not positive definite after {_MAX_JITTER_ATTEMPTS} "
            f"jitter attempts (n={n}, l={lengthscale})")
    alpha = cho_solve(chol, np.ones(n))
    return GPDFModel(support, alpha, float(lengthscale), float(noise_var), chol)


def fit(surface: PointCloud, lengthscale: float = DEFAULT_LENGTHSCALE,
        noise_var: float = DEFAULT_NOISE_VAR) -> GPDFModel:
    """Fit a distance field on a surface point cloud."""
    return fit_points(surface.points, lengthscale, noise_var)


def _as_batch(model: GPDFModel, x: np.ndarray):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.dim:
        raise ValueError(f"query dimension {x.shape[1]} != model dimension {model.dim}")
    return x, single


def occupancy(model: GPDFModel, x: np.ndarray) -> np.ndarray:
    """Posterior occupancy: 1 on the surface, decaying with distance."""
    x, single = _as_batch(model, x)
    out = np.empty(x.shape[0])
    for i in range(0, x.shape[0], _CHUNK):
        out[i:i + _CHUNK] = _kernel(model, x[i:i + _CHUNK]) @ model.alpha
    return out[0] if single else out


def distance(model: GPDFModel, x: np.ndarray) -> np.ndarray:
    """Raw distance estimate ``-l * ln(occupancy)``, occupancy clamped to
    [OCCUPANCY_FLOOR, 1] before inversion."""
    occ = np.clip(occupancy(model, x), OCCUPANCY_FLOOR, 1.0)
    return -model.lengthscale * np.log(occ)


def distance_and_gradient(model: GPDFModel, x: np.ndarray):
    """Raw distance and its analytic gradient in one kernel evaluation.

    The gradient is zeroed where the occupancy is outside the clamp range
    (the clamped field is constant there) and where a query coincides with a
    support point (no defined direction).
    """
    x, single = _as_batch(model, x)
    dist = np.empty(x.shape[0])
    grad = np.empty_like(x)
    for i in range(0, x.shape[0], _CHUNK):
        xq = x[i:i + _CHUNK]
        d = cdist(xq, model.support_points)
        k = np.exp(-d / model.lengthscale)
        occ = k @ model.alpha
        occ_c = np.clip(occ, OCCUPANCY_FLOOR, 1.0)
        dist[i:i + _CHUNK] = -model.lengthscale * np.log(occ_c)
        # grad r = (1/occ) * sum_i alpha_i exp(-d_i/l) (x - X_i) / d_i
        safe_d = np.where(d < 1e-12, 1.0, d)
        w = model.alpha * k / safe_d
        w[d < 1e-12] = 0.0
        diff = xq[:, None, :] - model.support_points[None, :, :]
        g = np.einsum("qn,qnm->qm", w, diff) / occ_c[:, None]
        g[(occ < OCCUPANCY_FLOOR) | (occ > 1.0)] = 0.0
        grad[i:i + _CHUNK] = g
    if single:
        return dist[0], grad[0]
    return dist, grad


def gradient(model: GPDFModel, x: np.ndarray) -> np.ndarray:
    """Analytic gradient of the raw distance field."""
    return distance_and_gradient(model, x)[1]


def variance(model: GPDFModel, x: np.ndarray) -> np.ndarray:
    """Posterior occupancy variance: 0 at noiseless support points, rising to
    the unit prior far from the surface."""
    x, single = _as_batch(model, x)
    out = np.empty(x.shape[0])
    for i in range(0, x.shape[0], _CHUNK):
        k = _kernel(model, x[i:i + _CHUNK])
        out[i:i + _CHUNK] = 1.0 - np.einsum("qn,nq->q", k, cho_solve(model.chol, k.T))
    out = np.maximum(out, 0.0)
    return out[0] if single else out


def refine_distance(model: GPDFModel, x: np.ndarray,
                    iters: int = DEFAULT_REFINE_ITERS) -> RefineResult:
    """Refined distance by iterative projection toward the surface.

    Each iteration moves the query by the current raw estimate along the
    negative normalized gradient and accumulates the travelled distance; the
    residual raw estimate at the final position is added.  ``iters=0`` is the
    raw field.  The returned normal is the final normalized gradient (zero,
    with the degenerate flag set, where the gradient vanished).
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    x, single = _as_batch(model, x)
    q = x.shape[0]
    cur = x.copy()
    total = np.zeros(q)
    normal = np.zeros_like(cur)
    degenerate = np.zeros(q, dtype=bool)
    active = np.ones(q, dtype=bool)
    for _ in range(iters):
        if not active.any():
            break
        d, g = distance_and_gradient(model, cur[active])
        gn = np.linalg.norm(g, axis=1)
        idx = np.flatnonzero(active)
        total[idx] += d
        bad = gn < _GRAD_TOL
        degenerate[idx[bad]] = True
        active[idx[bad]] = False
        ok = idx[~bad]
        cur[ok] -= (d[~bad] / gn[~bad])[:, None] * g[~bad]
    if active.any():
        d, g = distance_and_gradient(model, cur[active])
        gn = np.linalg.norm(g, axis=1)
        idx = np.flatnonzero(active)
        total[idx] += d
        bad = gn < _GRAD_TOL
        degenerate[idx[bad]] = True
        normal[idx[~bad]] = g[~bad] / gn[~bad][:, None]
    if single:
        return RefineResult(total[0], normal[0], cur[0], degenerate[0])
    return RefineResult(total, normal, cur, degenerate)


def expanded_bounds(points: np.ndarray, expand: float = 2.0):
    """Axis-aligned bounds scaled about the cloud midpoint."""
    points = np.atleast_2d(points)
    lo, hi = points.min(axis=0), points.max(axis=0)
    mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    return mid - expand * half, mid + expand * half


def complete_shape(model: GPDFModel, box, grid=(8, 8, 8), var_threshold: float = 0.99,
                   iters: int = DEFAULT_REFINE_ITERS, merge_radius: float = 1e-3) -> PointCloud:
    """Resample the full surface by projecting a grid of seeds onto it.

    ``box`` is (lower corner, upper corner); ``grid`` the node count per axis
    (>= 2 each).  Every node is marched onto the surface; projections with a
    vanishing gradient, occupancy variance above ``var_threshold`` (nodes the
    field knows nothing about), or a duplicate within ``merge_radius`` are
    dropped.  Uncertainty of the output is the occupancy variance at the
    projected points.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    grid = tuple(int(g) for g in grid)
    if any(g < 2 for g in grid):
        raise ValueError("grid counts must be >= 2 per axis")
    axes = [np.linspace(lo[i], hi[i], grid[i]) for i in range(model.dim)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, model.dim)
    res = refine_distance(model, nodes, iters=iters)
    keep = ~res.degenerate
    pts, normals = res.point[keep], res.normal[keep]
    var = variance(model, pts)
    ok = var <= var_threshold
    pts, normals, var = pts[ok], normals[ok], var[ok]
    if merge_radius > 0 and len(pts) > 1:
        from scipy.spatial import cKDTree
        tree = cKDTree(pts)
        taken = np.zeros(len(pts), dtype=bool)
        selected = []
        for i in range(len(pts)):
            if taken[i]:
                continue
            selected.append(i)
            taken[tree.query_ball_point(pts[i], merge_radius)] = True
        pts, normals, var = pts[selected], normals[selected], var[selected]
    return PointCloud(pts, normals, var)


def solve_residual(model: GPDFModel) -> float:
    """Relative residual of (K + noise_var I) alpha = 1 (audit helper)."""
    n = model.support_points.shape[0]
    gram = np.exp(-cdist(model.support_points, model.support_points) / model.lengthscale)
    lhs = (gram + model.noise_var * np.eye(n)) @ model.alpha
    return float(np.linalg.norm(lhs - 1.0) / np.sqrt(n))
