"""Gaussian mixtures on the rigid-transform manifold.

A component is a mean pose plus a 6x6 covariance living in the tangent space
at that mean; its density at a pose x is

    ((2 pi)^6 |S|)^(-1/2) exp(-1/2 * v^T S^-1 v),   v = log_at(mean, x).

Because log_at is left-invariant, so is the density: transforming the mixture
means and the query by the same rigid motion leaves probabilities unchanged,
which is what lets a fitted grasp distribution follow a moving object by a
plain left-multiplication of its means.

Fitting is expectation-maximization with k-means++ initialization in the
tangent space at the data's Riemannian mean; model order can be chosen by the
Bayesian information criterion.  Gradients with respect to the query pose are
tangent vectors under right-multiplicative perturbation ``x . exp(h e_j)`` and
use the numerical right-Jacobian inverse; the log-probability gradient is the
responsibility-weighted form, computed with log-sum-exp so it stays finite far
from every component.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from dyngrasp import se3
from dyngrasp.se3 import Pose

COV_REG = 1e-6
MEAN_TOL = 1e-9
MEAN_MAX_ITER = 100
EM_TOL = 1e-8
EM_MAX_ITER = 200
_LOG_2PI = float(np.log(2.0 * np.pi))


class MeanConvergenceError(RuntimeError):
    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


@dataclass(frozen=True)
class RiemannianGaussian:
    mean: Pose
    cov: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (6, 6):
            raise ValueError(f"covariance must be 6x6, got {cov.shape}")
        if np.max(np.abs(cov - cov.T)) > 1e-9:
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True)
class RiemannianMixture:
    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(w) != len(self.components):
            raise ValueError("one weight per component required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be a probability vector")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", tuple(self.components))

    def __len__(self):
        return len(self.components)


def _chol(cov):
    return cho_factor(cov, lower=True)


def _logpdf_batch(g: RiemannianGaussian, rotations, translations,
                  safe: bool = False) -> np.ndarray:
    v = se3.log_at_batch(g.mean, rotations, translations, safe=safe)
    chol = _chol(g.cov)
    logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
    quad = np.einsum("nd,nd->n", v, cho_solve(chol, v.T).T)
    return -0.5 * (6.0 * _LOG_2PI + logdet + quad)


def logpdf(g: RiemannianGaussian, x: Pose) -> float:
    return float(_logpdf_batch(g, x.rotation[None], x.translation[None])[0])


def pdf(g: RiemannianGaussian, x: Pose) -> float:
    """Component density at a pose; strictly positive."""
    return float(np.exp(logpdf(g, x)))


def riemannian_mean(poses, weights=None, tol: float = MEAN_TOL,
                    max_iter: int = MEAN_MAX_ITER, start: Pose = None) -> Pose:
    """Weighted mean on the manifold by fixed-point iteration: pull the data
    into the tangent space at the current estimate, average, retract."""
    if len(poses) == 0:
        raise ValueError("at least one pose required")
    rs, ts = se3.stack_poses(poses)
    if weights is None:
        w = np.full(len(poses), 1.0 / len(poses))
    else:
        w = np.asarray(weights, dtype=float)
        w = w / w.sum()
    mu = start if start is not None else poses[0]
    for _ in range(max_iter):
        u = w @ se3.log_at_batch(mu, rs, ts, safe=True)
        if np.linalg.norm(u) < tol:
            return mu
        mu = se3.exp_at(mu, u)
    raise MeanConvergenceError(
        f"mean iteration did not reach |u| < {tol} in {max_iter} steps",
        last_iterate=mu)


def tangent_covariance(poses, weights=None, mu: Pose = None,
                       reg: float = COV_REG) -> np.ndarray:
    """Weighted scatter of tangent coordinates at ``mu`` plus a diagonal
    regularization floor; always SPD."""
    if mu is None:
        mu = riemannian_mean(poses, weights)
    rs, ts = se3.stack_poses(poses)
    v = se3.log_at_batch(mu, rs, ts, safe=True)
    if weights is None:
        w = np.full(len(poses), 1.0 / len(poses))
    else:
        w = np.asarray(weights, dtype=float)
        w = w / w.sum()
    cov = (v * w[:, None]).T @ v + reg * np.eye(6)
    return 0.5 * (cov + cov.T)


def _kmeanspp_init(v: np.ndarray, k: int, rng) -> np.ndarray:
    """k-means++ seeding on tangent coordinates; returns chosen row indices."""
    n = v.shape[0]
    centers = [int(rng.integers(n))]
    for _ in range(k - 1):
        d2 = np.min(
            [np.sum((v - v[c]) ** 2, axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(int(rng.integers(n)))
            continue
        centers.append(int(rng.choice(n, p=d2 / total)))
    return np.asarray(centers)


def _fit_em(poses, k: int, seed: int = 0, tol: float = EM_TOL,
            max_iter: int = EM_MAX_ITER, reg: float = COV_REG):
    """EM fit returning (mixture, per-iteration log-likelihood trace)."""
    n = len(poses)
    if n < k:
        raise ValueError(f"need at least k={k} poses, got {n}")
    rng = np.random.default_rng(seed)
    rs, ts = se3.stack_poses(poses)

    mu0 = riemannian_mean(poses)
    v0 = se3.log_at_batch(mu0, rs, ts, safe=True)
    centers = _kmeanspp_init(v0, k, rng)
    assign = np.argmin(
        np.stack([np.sum((v0 - v0[c]) ** 2, axis=1) for c in centers]), axis=0)

    comps = []
    weights = np.empty(k)
    for i in range(k):
        members = [poses[j] for j in np.flatnonzero(assign == i)]
        if not members:
            members = [poses[centers[i]]]
        mean = riemannian_mean(members, start=poses[centers[i]])
        comps.append(RiemannianGaussian(mean, tangent_covariance(members, mu=mean, reg=reg)))
        weights[i] = max(len(members), 1) / n
    weights /= weights.sum()

    trace = []
    prev = -np.inf
    for _ in range(max_iter):
        # E-step
        logp = np.stack([_logpdf_batch(c, rs, ts, safe=True) for c in comps], axis=1)
        logp += np.log(weights)[None, :]
        norm = logsumexp(logp, axis=1)
        loglik = float(norm.sum())
        trace.append(loglik)
        resp = np.exp(logp - norm[:, None])
        # M-step
        mass = resp.sum(axis=0)
        lowest = int(np.argmin(norm))
        new_comps = []
        for i in range(k):
            if mass[i] < 1e-12:
                # dead component: reseed it at the worst-explained pose
                new_comps.append(RiemannianGaussian(poses[lowest], comps[i].cov))
                mass[i] = 1.0
                continue
            w = resp[:, i] / mass[i]
            mean = riemannian_mean(poses, weights=w, start=comps[i].mean)
            new_comps.append(RiemannianGaussian(
                mean, tangent_covariance(poses, weights=w, mu=mean, reg=reg)))
        comps = new_comps
        weights = mass / mass.sum()
        if loglik - prev < tol and np.isfinite(prev):
            break
        prev = loglik
    return RiemannianMixture(weights, tuple(comps)), trace


def fit_em(poses, k: int, seed: int = 0, tol: float = EM_TOL,
           max_iter: int = EM_MAX_ITER, reg: float = COV_REG) -> RiemannianMixture:
    """Riemannian EM: E-step responsibilities from component densities,
    M-step per-cluster manifold mean and tangent covariance.  Deterministic
    given the seed."""
    return _fit_em(poses, k, seed, tol, max_iter, reg)[0]


def n_free_parameters(k: int) -> int:
    # k-1 weights, 6 mean coordinates and 21 covariance entries per component
    return k * (1 + 6 + 21) - 1


def bic(loglik: float, k: int, n: int) -> float:
    return -2.0 * loglik + n_free_parameters(k) * np.log(n)


def select_k_bic(poses, k_range, seed: int = 0, reg: float = COV_REG,
                 max_iter: int = EM_MAX_ITER):
    """Fit every k in ``k_range`` and return ``(k, mixture)`` minimizing the
    Bayesian information criterion.  Component counts whose fit fails are
    skipped; if all fail the last error is raised."""
    k_range = list(k_range)
    if not k_range:
        raise ValueError("k_range must be nonempty")
    best = None
    last_error = None
    for k in k_range:
        try:
            mixture, trace = _fit_em(poses, k, seed=seed, reg=reg, max_iter=max_iter)
        except (MeanConvergenceError, ValueError, np.linalg.LinAlgError) as e:
            last_error = e
            continue
        score = bic(trace[-1], k, len(poses))
        if best is None or score < best[0]:
            best = (score, k, mixture)
    if best is None:
        raise RuntimeError(f"every component count failed; last error: {last_error}")
    return best[1], best[2]


# --- mixture queries ---------------------------------------------------------

def _component_logps(m: RiemannianMixture, x: Pose, safe: bool = False) -> np.ndarray:
    return np.array([np.log(w)
                     + float(_logpdf_batch(c, x.rotation[None], x.translation[None],
                                           safe=safe)[0])
                     for w, c in zip(m.weights, m.components)])


def mixture_logpdf(m: RiemannianMixture, x: Pose, safe: bool = False) -> float:
    return float(logsumexp(_component_logps(m, x, safe=safe)))


def mixture_logpdf_batch(m: RiemannianMixture, rotations, translations,
                         safe: bool = False) -> np.ndarray:
    """Mixture log density for stacked poses (n,3,3)/(n,3)."""
    logp = np.stack([np.log(w) + _logpdf_batch(c, rotations, translations, safe=safe)
                     for w, c in zip(m.weights, m.components)], axis=1)
    return logsumexp(logp, axis=1)


def mixture_prob(m: RiemannianMixture, x: Pose, safe: bool = False) -> float:
    return float(np.exp(mixture_logpdf(m, x, safe=safe)))


def _component_pulls(m: RiemannianMixture, x: Pose, safe: bool = False) -> np.ndarray:
    """Per-component ascent directions -J^T S^-1 v as rows (k, 6)."""
    pulls = np.empty((len(m), 6))
    for i, c in enumerate(m.components):
        v = se3.log_at(c.mean, x, safe=safe)
        j = se3.right_jacobian_inv(c.mean, x, safe=safe)
        pulls[i] = -j.T @ cho_solve(_chol(c.cov), v)
    return pulls


def mixture_grad(m: RiemannianMixture, x: Pose, safe: bool = False) -> np.ndarray:
    """Tangent-space gradient of the mixture density at x (right-perturbation
    coordinates); vanishes at an isolated component mean."""
    logps = _component_logps(m, x, safe=safe)
    return np.exp(logps) @ _component_pulls(m, x, safe=safe)


def mixture_log_grad(m: RiemannianMixture, x: Pose, safe: bool = False) -> np.ndarray:
    """Gradient of log density: responsibility-weighted component pulls.
    Computed in log space, so it stays finite and informative even where the
    density itself underflows."""
    logps = _component_logps(m, x, safe=safe)
    resp = np.exp(logps - logsumexp(logps))
    return resp @ _component_pulls(m, x, safe=safe)


def transform(m: RiemannianMixture, g: Pose) -> RiemannianMixture:
    """Left-translate every component mean by ``g``; covariances and weights
    are unchanged (the metric is left-invariant)."""
    return RiemannianMixture(
        m.weights.copy(),
        tuple(RiemannianGaussian(g @ c.mean, c.cov) for c in m.components))


# --- serialization -----------------------------------------------------------

def mixture_to_jsonable(m: RiemannianMixture) -> dict:
    return {"weights": [float(w) for w in m.weights],
            "components": [{"pose": [float(v) for v in c.mean.flat12()],
                            "cov": [float(v) for v in c.cov.ravel()]}
                           for c in m.components]}


def mixture_from_jsonable(data: dict) -> RiemannianMixture:
    comps = tuple(RiemannianGaussian(Pose.from_flat12(c["pose"]),
                                     np.asarray(c["cov"], dtype=float).reshape(6, 6))
                  for c in data["components"])
    return RiemannianMixture(np.asarray(data["weights"], dtype=float), comps)
