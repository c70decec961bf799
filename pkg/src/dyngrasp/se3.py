"""Rigid-transform (SE(3)) primitives and tangent-space calculus.

Conventions used throughout the package:

- A pose is a rotation matrix ``R`` (3x3) plus a translation ``t`` (3,),
  i.e. the homogeneous transform ``[[R, t], [0, 1]]``.
- A tangent vector is a plain float64 array of length 6 ordered
  ``(tx, ty, tz, wx, wy, wz)``: translational part first (meters),
  rotational part last (radians).
- ``log_at(mu, x)`` / ``exp_at(mu, v)`` are the manifold maps anchored at
  ``mu``: ``log_at(mu, x) = vee(log_group(mu^-1 x))`` and
  ``exp_at(mu, v) = mu @ exp_group(v)``.  They are left-invariant:
  ``log_at(g mu, g x) == log_at(mu, x)`` for any rigid ``g``.

Batched variants operate on stacked arrays ``(n, 3, 3)`` / ``(n, 3)`` and are
what the mixture-model and field code calls in hot paths.

Serialized form of a pose is 12 numbers: the 3x4 matrix ``[R | t]`` flattened
row-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Small-angle series switch for exp/log coefficient formulas.
SMALL_ANGLE = 1e-8
# Rotations with angle >= pi - BRANCH_MARGIN are rejected: the log is not
# unique there.
BRANCH_MARGIN = 1e-6
# Central-difference step for the numerical right-Jacobian inverse.
JACOBIAN_FD_STEP = 1e-5

_POSE_ATOL = 1e-6


class MalformedAlgebraError(ValueError):
    """Input matrix is not in the image of the hat operator."""


class BranchAmbiguityError(ValueError):
    """Rotation angle at or near pi: principal-branch log is ill-defined."""


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: 3x3 rotation matrix and 3-vector translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=_POSE_ATOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _POSE_ATOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def _unsafe(cls, rotation: np.ndarray, translation: np.ndarray) -> "Pose":
        """Wrap arrays that are valid by construction (internal hot paths);
        public constructors keep the orthonormality check."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "rotation", rotation)
        object.__setattr__(obj, "translation", translation)
        return obj

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose._unsafe(rt, -rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose._unsafe(self.rotation @ other.rotation,
                            self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a batch (n, 3)."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def flat12(self) -> np.ndarray:
        """Row-major [R | t] as 12 numbers (the serialized form)."""
        return np.hstack([self.rotation, self.translation[:, None]]).ravel()

    @staticmethod
    def from_flat12(values) -> "Pose":
        m = np.asarray(values, dtype=float).reshape(3, 4)
        return Pose(m[:, :3], m[:, 3])

    def __repr__(self):
        return f"Pose(t={np.round(self.translation, 4)}, R angle={rotation_angle(self.rotation):.4f})"


def skew(w: np.ndarray) -> np.ndarray:
    """3x3 skew-symmetric matrix of a 3-vector (cross-product operator)."""
    w = np.asarray(w, dtype=float).reshape(3)
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def rotation_angle(r: np.ndarray) -> float:
    """Principal rotation angle of a rotation matrix, in [0, pi]."""
    return float(np.arccos(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)))


def hat(v: np.ndarray) -> np.ndarray:
    """Map a 6-vector twist to its 4x4 matrix form.

    Top-left block is the skew matrix of the rotational part, top-right
    column is the translational part, bottom row is zero.
    """
    v = np.asarray(v, dtype=float).reshape(6)
    m = np.zeros((4, 4))
    m[:3, :3] = skew(v[3:])
    m[:3, 3] = v[:3]
    return m


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`hat`. Raises ``MalformedAlgebraError`` if the input
    does not have a skew top-left block and zero bottom row (tol 1e-9)."""
    m = np.asarray(m, dtype=float)
    if m.shape != (4, 4):
        raise MalformedAlgebraError(f"expected 4x4 matrix, got {m.shape}")
    s = m[:3, :3]
    if np.max(np.abs(s + s.T)) > 1e-9 or np.max(np.abs(m[3])) > 1e-9:
        raise MalformedAlgebraError("matrix is not in the image of hat")
    return np.array([m[0, 3], m[1, 3], m[2, 3], s[2, 1], s[0, 2], s[1, 0]])


# ---------------------------------------------------------------------------
# Batched core.  Shapes: rotations (n, 3, 3), translations (n, 3),
# twists (n, 6).  Scalar wrappers below reshape through these.
# ---------------------------------------------------------------------------

def _skew_batch(w: np.ndarray) -> np.ndarray:
    n = w.shape[0]
    s = np.zeros((n, 3, 3))
    s[:, 0, 1] = -w[:, 2]
    s[:, 0, 2] = w[:, 1]
    s[:, 1, 0] = w[:, 2]
    s[:, 1, 2] = -w[:, 0]
    s[:, 2, 0] = -w[:, 1]
    s[:, 2, 1] = w[:, 0]
    return s


def _exp_coeffs(theta: np.ndarray):
    """Rodrigues/V-matrix coefficients A=sin/th, B=(1-cos)/th^2, C=(th-sin)/th^3
    with series fallbacks below the small-angle switch."""
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)  # avoid 0/0; masked out below
    th2 = th * th
    a = np.where(small, 1.0 - theta * theta / 6.0, np.sin(th) / th)
    b = np.where(small, 0.5 - theta * theta / 24.0, (1.0 - np.cos(th)) / th2)
    c = np.where(small, 1.0 / 6.0 - theta * theta / 120.0, (th - np.sin(th)) / (th2 * th))
    return a, b, c


def so3_exp_batch(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(-1, 3)
    theta = np.linalg.norm(w, axis=1)
    a, b, _ = _exp_coeffs(theta)
    s = _skew_batch(w)
    s2 = s @ s
    return np.eye(3) + a[:, None, None] * s + b[:, None, None] * s2


def so3_log_batch(r: np.ndarray, safe: bool = False) -> np.ndarray:
    """Rotation log.  ``safe=False`` raises within BRANCH_MARGIN of pi (the
    principal branch is ambiguous there); ``safe=True`` instead returns one of
    the two antipodal rotation vectors, which fitting and control loops need
    when fed arbitrary pose sets."""
    r = np.asarray(r, dtype=float).reshape(-1, 3, 3)
    tr = np.trace(r, axis1=1, axis2=2)
    theta = np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))
    near_pi = theta >= np.pi - BRANCH_MARGIN
    if np.any(near_pi) and not safe:
        raise BranchAmbiguityError(
            f"rotation angle {theta.max():.6f} rad within {BRANCH_MARGIN} of pi")
    # w = theta/(2 sin theta) * vee(R - R^T); series for small theta.
    small = theta < SMALL_ANGLE
    th = np.where(small | near_pi, 1.0, theta)
    scale = np.where(small, 0.5 + theta * theta / 12.0, th / (2.0 * np.sin(th)))
    d = r - np.transpose(r, (0, 2, 1))
    w = scale[:, None] * np.stack([d[:, 2, 1], d[:, 0, 2], d[:, 1, 0]], axis=1)
    if np.any(near_pi):
        from scipy.spatial.transform import Rotation
        w[near_pi] = Rotation.from_matrix(r[near_pi]).as_rotvec()
    return w


def se3_exp_batch(v: np.ndarray):
    v = np.asarray(v, dtype=float).reshape(-1, 6)
    rho, w = v[:, :3], v[:, 3:]
    theta = np.linalg.norm(w, axis=1)
    a, b, c = _exp_coeffs(theta)
    s = _skew_batch(w)
    s2 = s @ s
    r = np.eye(3) + a[:, None, None] * s + b[:, None, None] * s2
    vmat = np.eye(3) + b[:, None, None] * s + c[:, None, None] * s2
    t = np.einsum("nij,nj->ni", vmat, rho)
    return r, t


def se3_log_batch(r: np.ndarray, t: np.ndarray, safe: bool = False) -> np.ndarray:
    r = np.asarray(r, dtype=float).reshape(-1, 3, 3)
    t = np.asarray(t, dtype=float).reshape(-1, 3)
    w = so3_log_batch(r, safe=safe)
    theta = np.linalg.norm(w, axis=1)
    # V^-1 = I - s/2 + D s^2,  D = (1 - A/(2B)) / theta^2, series ~ 1/12.
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    a = np.sin(th) / th
    b = (1.0 - np.cos(th)) / (th * th)
    d = np.where(small, 1.0 / 12.0 + theta * theta / 720.0,
                 (1.0 - a / (2.0 * b)) / (th * th))
    s = _skew_batch(w)
    s2 = s @ s
    vinv = np.eye(3) - 0.5 * s + d[:, None, None] * s2
    rho = np.einsum("nij,nj->ni", vinv, t)
    return np.hstack([rho, w])


def log_at_batch(mu: Pose, rotations: np.ndarray, translations: np.ndarray,
                 safe: bool = False) -> np.ndarray:
    """Tangent coordinates at ``mu`` of a batch of poses."""
    rt = mu.rotation.T
    r_rel = np.einsum("ij,njk->nik", rt, rotations)
    t_rel = (translations - mu.translation) @ rt.T
    return se3_log_batch(r_rel, t_rel, safe=safe)


def exp_at_batch(mu: Pose, v: np.ndarray):
    """Poses obtained by perturbing ``mu`` with a batch of tangent vectors."""
    r, t = se3_exp_batch(v)
    r_out = np.einsum("ij,njk->nik", mu.rotation, r)
    t_out = t @ mu.rotation.T + mu.translation
    return r_out, t_out


def stack_poses(poses) -> tuple[np.ndarray, np.ndarray]:
    """Stack a sequence of Pose into (n,3,3) rotations and (n,3) translations."""
    rs = np.stack([p.rotation for p in poses])
    ts = np.stack([p.translation for p in poses])
    return rs, ts


def unstack_poses(rotations: np.ndarray, translations: np.ndarray) -> list:
    return [Pose._unsafe(r, t) for r, t in zip(rotations, translations)]


# ---------------------------------------------------------------------------
# Scalar API
# ---------------------------------------------------------------------------

def exp_group(v: np.ndarray) -> Pose:
    """Group exponential: closed-form Rodrigues rotation plus V-matrix
    translation. ``exp_group(0)`` is the identity."""
    r, t = se3_exp_batch(np.asarray(v, dtype=float).reshape(1, 6))
    return Pose._unsafe(r[0], t[0])


def log_group(pose: Pose, safe: bool = False) -> np.ndarray:
    """Group logarithm, principal branch. Raises ``BranchAmbiguityError``
    when the rotation angle is within ``BRANCH_MARGIN`` of pi (``safe=True``
    returns one of the antipodal branch values instead)."""
    return se3_log_batch(pose.rotation[None], pose.translation[None], safe=safe)[0]


def log_at(mu: Pose, x: Pose, safe: bool = False) -> np.ndarray:
    """``vee(log_group(mu^-1 x))``: tangent coordinates of ``x`` at ``mu``."""
    return log_at_batch(mu, x.rotation[None], x.translation[None], safe=safe)[0]


def exp_at(mu: Pose, v: np.ndarray) -> Pose:
    """``mu @ exp_group(v)``: retraction of a tangent vector at ``mu``."""
    r, t = exp_at_batch(mu, np.asarray(v, dtype=float).reshape(1, 6))
    return Pose._unsafe(r[0], t[0])


def right_jacobian_inv(mu: Pose, x: Pose, step: float = JACOBIAN_FD_STEP,
                       safe: bool = False) -> np.ndarray:
    """6x6 matrix mapping tangent perturbations of ``x`` to perturbations of
    ``log_at(mu, x)``, by central finite differences.

    Column j is ``(log_at(mu, x . exp(h e_j)) - log_at(mu, x . exp(-h e_j))) / 2h``.
    Equals the identity at ``x == mu``.
    """
    deltas = np.vstack([np.eye(6) * step, -np.eye(6) * step])
    r, t = exp_at_batch(x, deltas)
    logs = log_at_batch(mu, r, t, safe=safe)
    return (logs[:6] - logs[6:]).T / (2.0 * step)


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation distance in meters, rotation geodesic angle in radians)."""
    dt = float(np.linalg.norm(a.translation - b.translation))
    dr = rotation_angle(a.rotation.T @ b.rotation)
    return dt, dr
