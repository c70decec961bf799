import numpy as np
import pytest

from dyngrasp.se3 import Pose


def random_pose(rng, max_angle=2.5, max_trans=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    from scipy.spatial.transform import Rotation
    r = Rotation.from_rotvec(axis * angle).as_matrix()
    t = rng.uniform(-max_trans, max_trans, size=3)
    return Pose(r, t)


def sphere_cloud(rng, n, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Uniform sample of a sphere surface, with outward normals."""
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + radius * v, v


def box_cloud(rng, n, half_extents=(0.5, 0.3, 0.2)):
    """Uniform sample of an axis-aligned box surface, with outward normals."""
    h = np.asarray(half_extents, dtype=float)
    areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
    probs = areas / areas.sum()
    face_axis = rng.choice(3, size=n, p=probs)
    face_sign = rng.choice([-1.0, 1.0], size=n)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
    normals = np.zeros((n, 3))
    for i in range(n):
        pts[i, face_axis[i]] = face_sign[i] * h[face_axis[i]]
        normals[i, face_axis[i]] = face_sign[i]
    return pts, normals


def box_sdf(points, half_extents):
    """Analytic signed distance to an axis-aligned box at the origin."""
    points = np.atleast_2d(points)
    q = np.abs(points) - np.asarray(half_extents)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(np.max(q, axis=1), 0.0)
    return outside + inside


def wrap_angle(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def planar_ik_solutions(target, l1=1.0, l2=1.0, limits=(-np.pi, np.pi),
                        tol_pos=1e-6, tol_rot=1e-6):
    """Closed-form IK of the 2-link planar arm: all (q1, q2) reaching the
    target pose, or [] if infeasible (off-plane, out of annulus, yaw
    mismatch, or limit violation)."""
    from scipy.spatial.transform import Rotation
    x, y, z = target.translation
    if abs(z) > tol_pos:
        return []
    rv = Rotation.from_matrix(target.rotation).as_rotvec()
    if np.hypot(rv[0], rv[1]) > tol_rot:
        return []
    psi = np.arctan2(target.rotation[1, 0], target.rotation[0, 0])
    r2 = x * x + y * y
    c2 = (r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    if abs(c2) > 1.0 + 1e-9:
        return []
    c2 = np.clip(c2, -1.0, 1.0)
    sols = []
    for sign in (1.0, -1.0):
        q2 = sign * np.arccos(c2)
        q1 = wrap_angle(np.arctan2(y, x)
                        - np.arctan2(l2 * np.sin(q2), l1 + l2 * np.cos(q2)))
        if abs(wrap_angle(q1 + q2 - psi)) > tol_rot:
            continue
        if not (limits[0] <= q1 <= limits[1] and limits[0] <= q2 <= limits[1]):
            continue
        if any(np.allclose((q1, q2), s, atol=1e-9) for s in sols):
            continue
        sols.append((q1, q2))
    return sols


@pytest.fixture
def rng():
    return np.random.default_rng(20240613)
