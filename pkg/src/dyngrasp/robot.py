"""Serial-chain kinematics, differential IK, and reachability modeling.

Chains are revolute-only: joint i contributes ``origin_i @ Rot(axis_i, q_i)``
and the end effector adds a fixed tool offset.  The geometric Jacobian stacks
linear rows (velocity of the end-effector point) over angular rows, matching
the project's translation-first tangent ordering.  IK is damped least squares
on the Log-based pose error, clamped to joint limits every step; diverse
solutions come from seeded multi-start.

Reachability is learned offline: forward kinematics of uniform joint samples
(self-colliding and below-table poses dropped) are fitted with a pose mixture,
and a pose counts as reachable when its mixture density clears the threshold
set by a quantile of the training densities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from dyngrasp import rmm, se3
from dyngrasp.rmm import RiemannianMixture
from dyngrasp.se3 import Pose

IK_LAMBDA = 0.05
IK_TOL_POS = 1e-3
IK_TOL_ROT = 1e-2
IK_DEDUP_TOL = 1e-3
IK_REFINE_ITERS = 3
TABLE_CLEARANCE = 0.1
REACH_QUANTILE = 0.99


@dataclass(frozen=True, eq=False)
class Joint:
    axis: np.ndarray        # unit rotation axis in the frame after `origin`
    origin: Pose            # transform from the parent frame
    limits: tuple           # (lo, hi) radians

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=float).reshape(3)
        if abs(np.linalg.norm(a) - 1.0) > 1e-9:
            raise ValueError("joint axis must be unit length")
        lo, hi = self.limits
        if not lo < hi:
            raise ValueError("joint limits must satisfy lo < hi")
        object.__setattr__(self, "axis", a)
        object.__setattr__(self, "limits", (float(lo), float(hi)))
        # cached Rodrigues terms: R(angle) = I + sin K + (1 - cos) K^2
        k = se3.skew(a)
        object.__setattr__(self, "_skew", k)
        object.__setattr__(self, "_skew2", k @ k)


@dataclass(frozen=True, eq=False)
class Capsule:
    link: int               # index of the joint frame it is attached to
    p0: np.ndarray
    p1: np.ndarray
    radius: float
    body: Optional[int] = None  # body-chain index for adjacency; defaults to link

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("capsule radius must be positive")
        object.__setattr__(self, "p0", np.asarray(self.p0, dtype=float).reshape(3))
        object.__setattr__(self, "p1", np.asarray(self.p1, dtype=float).reshape(3))
        if self.body is None:
            object.__setattr__(self, "body", self.link)


@dataclass(frozen=True)
class RobotModel:
    joints: tuple
    tool_offset: Pose = field(default_factory=Pose.identity)
    link_capsules: tuple = ()
    base_pose: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "link_capsules", tuple(self.link_capsules))

    @property
    def dof(self) -> int:
        return len(self.joints)

    def limits_arrays(self):
        lo = np.array([j.limits[0] for j in self.joints])
        hi = np.array([j.limits[1] for j in self.joints])
        return lo, hi

    def clamp(self, q: np.ndarray) -> np.ndarray:
        """Clip to joint limits; joints whose range spans the full circle wrap
        instead (clipping a periodic joint at +-pi would pin it there)."""
        lo, hi = self.limits_arrays()
        full = (hi - lo) >= 2.0 * np.pi - 1e-9
        wrapped = lo + np.mod(q - lo, hi - lo)
        return np.where(full, wrapped, np.clip(q, lo, hi))


def joint_frames(model: RobotModel, q: np.ndarray):
    """World pose of each joint frame (after its rotation), base first."""
    q = np.asarray(q, dtype=float).reshape(-1)
    if len(q) != model.dof:
        raise ValueError(f"expected {model.dof} joint values, got {len(q)}")
    frames = []
    r = model.base_pose.rotation
    t = model.base_pose.translation
    for joint, angle in zip(model.joints, q):
        t = r @ joint.origin.translation + t
        r = r @ joint.origin.rotation
        rot = (np.eye(3) + np.sin(angle) * joint._skew
               + (1.0 - np.cos(angle)) * joint._skew2)
        r = r @ rot
        frames.append(Pose._unsafe(r, t))
    return frames


def fk(model: RobotModel, q: np.ndarray) -> Pose:
    """End-effector pose: product of joint transforms times the tool offset."""
    frames = joint_frames(model, q)
    last = frames[-1] if frames else model.base_pose
    return last @ model.tool_offset


def jacobian(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Geometric Jacobian, 6 x dof: linear rows (end-effector point velocity)
    stacked over angular rows."""
    frames = joint_frames(model, q)
    p_e = (frames[-1] @ model.tool_offset).translation
    jac = np.zeros((6, model.dof))
    for i, (joint, frame) in enumerate(zip(model.joints, frames)):
        z = frame.rotation @ joint.axis
        jac[:3, i] = np.cross(z, p_e - frame.translation)
        jac[3:, i] = z
    return jac


def manipulability(model: RobotModel, q: np.ndarray) -> float:
    """sqrt(det(J J^T)) distance-from-singularity measure.  Arms with fewer
    than six joints use the position rows (the full Gram matrix of a 6 x n
    Jacobian with n < 6 is identically singular); the smaller Gram factor is
    used so the determinant is meaningful for any row/column ratio."""
    jac = jacobian(model, q)
    if model.dof < 6:
        jac = jac[:3]
    rows, cols = jac.shape
    gram = jac @ jac.T if cols >= rows else jac.T @ jac
    return float(np.sqrt(max(np.linalg.det(gram), 0.0)))


def pose_error(current: Pose, target: Pose) -> np.ndarray:
    """World-frame Log-based pose error (translation diff, rotation vector);
    zero exactly at a pose match, well-defined through the pi rotation."""
    dt = target.translation - current.translation
    dr = Rotation.from_matrix(target.rotation @ current.rotation.T).as_rotvec()
    return np.concatenate([dt, dr])


def ik_damped(model: RobotModel, target: Pose, q0: np.ndarray,
              iters: int = 100, lam: float = IK_LAMBDA,
              max_step: float = 0.5, position_only: bool = False) -> np.ndarray:
    """Damped-least-squares IK: q += J^T (J J^T + lam^2 I)^-1 err, with the
    per-joint step capped at ``max_step`` rad and joint limits clamped every
    iteration.  Returns the best iterate by error norm (the residual stays
    meaningful for unreachable targets).

    ``position_only`` drops the orientation rows; use it for arms with fewer
    joints than the pose task needs (a planar 2-link arm can generically reach
    a position with two elbow branches but a full pose with at most one)."""
    def error_at(q):
        err = pose_error(fk(model, q), target)
        if position_only:
            err[3:] = 0.0
        return err

    q = model.clamp(np.asarray(q0, dtype=float).copy())
    damping = lam ** 2 * np.eye(6)
    err = error_at(q)
    best_q, best_err = q.copy(), np.linalg.norm(err)
    for _ in range(iters):
        jac = jacobian(model, q)
        step = jac.T @ np.linalg.solve(jac @ jac.T + damping, err)
        biggest = np.max(np.abs(step))
        if biggest > max_step:
            step *= max_step / biggest  # cap magnitude, keep direction
        # backtrack if the full step overshoots
        n = np.linalg.norm(err)
        for _ in range(5):
            q_new = model.clamp(q + step)
            err_new = error_at(q_new)
            if np.linalg.norm(err_new) <= n or np.allclose(q_new, q):
                break
            step *= 0.5
        q, err = q_new, err_new
        n = np.linalg.norm(err)
        if n < best_err:
            best_q, best_err = q.copy(), n
    return best_q


def ik_multistart(model: RobotModel, target: Pose, n_starts: int = 20,
                  refine_iters: int = IK_REFINE_ITERS, seed: int = 0,
                  tol_pos: float = IK_TOL_POS, tol_rot: float = IK_TOL_ROT,
                  dedup_tol: float = IK_DEDUP_TOL,
                  position_only: bool = False) -> list:
    """Diverse IK solutions: seeded uniform starts within limits refined by
    ik_damped; keeps converged (pose error within tolerance), deduplicated
    (inf-norm), collision-free solutions.  May return []."""
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = model.limits_arrays()
    solutions = []
    for _ in range(n_starts):
        q0 = rng.uniform(lo, hi)
        q = ik_damped(model, target, q0, iters=refine_iters,
                      position_only=position_only)
        err = pose_error(fk(model, q), target)
        if np.linalg.norm(err[:3]) > tol_pos:
            continue
        if not position_only and np.linalg.norm(err[3:]) > tol_rot:
            continue
        if any(np.max(np.abs(q - s)) < dedup_tol for s in solutions):
            continue
        if self_collision(model, q):
            continue
        solutions.append(q)
    return solutions


def _segment_distance(p1, q1, p2, q2) -> float:
    """Minimum distance between segments [p1,q1] and [p2,q2]."""
    d1, d2 = q1 - p1, q2 - p2
    r = p1 - p2
    a, e, f = d1 @ d1, d2 @ d2, d2 @ r
    if a <= 1e-12 and e <= 1e-12:
        return float(np.linalg.norm(r))
    if a <= 1e-12:
        s, t = 0.0, np.clip(f / e, 0.0, 1.0)
    else:
        c = d1 @ r
        if e <= 1e-12:
            t, s = 0.0, np.clip(-c / a, 0.0, 1.0)
        else:
            b = d1 @ d2
            denom = a * e - b * b
            s = np.clip((b * f - c * e) / denom, 0.0, 1.0) if denom > 1e-12 else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t, s = 0.0, np.clip(-c / a, 0.0, 1.0)
            elif t > 1.0:
                t, s = 1.0, np.clip((b - c) / a, 0.0, 1.0)
    closest1 = p1 + s * d1
    closest2 = p2 + t * d2
    return float(np.linalg.norm(closest1 - closest2))


def self_collision(model: RobotModel, q: np.ndarray) -> bool:
    """True iff any two capsules on non-adjacent bodies come closer than the
    sum of their radii.  Capsules on the same or neighboring bodies are exempt
    (consecutive segments touch by construction); chains with co-located joint
    pairs use the explicit body index for adjacency."""
    if not model.link_capsules:
        return False
    frames = joint_frames(model, q)
    world = [(c.body, frames[c.link].apply(c.p0), frames[c.link].apply(c.p1), c.radius)
             for c in model.link_capsules]
    for i in range(len(world)):
        for j in range(i + 1, len(world)):
            bi, p0i, p1i, ri = world[i]
            bj, p0j, p1j, rj = world[j]
            if abs(bi - bj) <= 1:
                continue
            if _segment_distance(p0i, p1i, p0j, p1j) < ri + rj:
                return True
    return False


def reachability_dataset(model: RobotModel, n_samples: int,
                         table_height: float = -np.inf, seed: int = 0) -> list:
    """FK poses of uniform joint samples, dropping self-collisions and
    end effectors below ``table_height + 0.1`` m.  Deterministic given seed."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = model.limits_arrays()
    poses = []
    for _ in range(n_samples):
        q = rng.uniform(lo, hi)
        if self_collision(model, q):
            continue
        pose = fk(model, q)
        if pose.translation[2] < table_height + TABLE_CLEARANCE:
            continue
        poses.append(pose)
    return poses


@dataclass(frozen=True)
class ReachabilityModel:
    """Reachable-space mixture plus the density threshold at the configured
    quantile of the training poses."""

    mixture: RiemannianMixture
    log_threshold: float
    quantile: float = REACH_QUANTILE

    def log_density(self, pose: Pose) -> float:
        return rmm.mixture_logpdf(self.mixture, pose, safe=True)

    def is_reachable(self, pose: Pose) -> bool:
        return self.log_density(pose) >= self.log_threshold


def density_log_threshold(mixture: RiemannianMixture, poses,
                          quantile: float = REACH_QUANTILE) -> float:
    """Log-density level such that ``quantile`` of the training poses lie at
    or above it."""
    rs, ts = se3.stack_poses(poses)
    logp = rmm.mixture_logpdf_batch(mixture, rs, ts, safe=True)
    return float(np.quantile(logp, 1.0 - quantile))


def fit_reachability(model: RobotModel, n_samples: int,
                     table_height: float = -np.inf, seed: int = 0,
                     k_range=(1, 2, 4, 8, 16, 32, 64),
                     quantile: float = REACH_QUANTILE,
                     em_max_iter: int = 50) -> ReachabilityModel:
    """Offline reachability: sample, fit by BIC over ``k_range``, and place
    the unreachability threshold at the density quantile."""
    poses = reachability_dataset(model, n_samples, table_height, seed)
    if not poses:
        raise ValueError("no feasible poses sampled; cannot fit reachability")
    k_range = [k for k in k_range if k <= len(poses)]
    _, mixture = rmm.select_k_bic(poses, k_range, seed=seed, max_iter=em_max_iter)
    return ReachabilityModel(mixture, density_log_threshold(mixture, poses, quantile),
                             quantile)


def filter_reachable(reach: ReachabilityModel, grasps: list) -> list:
    """Keep grasps whose pose density clears the reachability threshold."""
    return [g for g in grasps if reach.is_reachable(g.pose)]


# --- bundled models -----------------------------------------------------------

def planar_chain(lengths, limits=(-np.pi, np.pi), radius: float = 0.05) -> RobotModel:
    """Planar revolute chain in the xy-plane, links along +x, joints about z."""
    joints = []
    capsules = []
    prev = 0.0
    for i, length in enumerate(lengths):
        joints.append(Joint(np.array([0.0, 0.0, 1.0]),
                            Pose(np.eye(3), [prev, 0.0, 0.0]), limits))
        capsules.append(Capsule(i, np.zeros(3), np.array([length, 0.0, 0.0]), radius))
        prev = length
    return RobotModel(tuple(joints), Pose(np.eye(3), [lengths[-1], 0.0, 0.0]),
                      tuple(capsules))


def planar_2link(l1: float = 1.0, l2: float = 1.0) -> RobotModel:
    """Two-link planar arm; its closed-form IK makes it the analytic test rig.
    The two capsules are adjacent, so it never self-collides."""
    return planar_chain([l1, l2])


def spatial_7dof() -> RobotModel:
    """Seven-joint spatial arm with alternating z/y axes and desk-scale link
    lengths (reach ~1.3 m), with capsules on the long links."""
    z, y = np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0])
    deg = np.pi / 180.0
    spec = [
        (z, [0.0, 0.0, 0.34], 170 * deg),
        (y, [0.0, 0.0, 0.0], 120 * deg),
        (z, [0.0, 0.0, 0.40], 170 * deg),
        (y, [0.0, 0.0, 0.0], 120 * deg),
        (z, [0.0, 0.0, 0.40], 170 * deg),
        (y, [0.0, 0.0, 0.0], 120 * deg),
        (z, [0.0, 0.0, 0.126], 175 * deg),
    ]
    joints = tuple(Joint(axis, Pose(np.eye(3), t), (-lim, lim)) for axis, t, lim in spec)
    # joints come in co-located z/y pairs, so the moving bodies are the
    # segments after joints 2, 4, 6: number them 0..2 for adjacency
    capsules = (
        Capsule(1, [0.0, 0.0, 0.0], [0.0, 0.0, 0.40], 0.07, body=0),
        Capsule(3, [0.0, 0.0, 0.0], [0.0, 0.0, 0.40], 0.06, body=1),
        Capsule(5, [0.0, 0.0, 0.0], [0.0, 0.0, 0.226], 0.05, body=2),
    )
    return RobotModel(joints, Pose(np.eye(3), [0.0, 0.0, 0.1]), capsules)


# --- serialization --------------------------------------------------------------

def robot_to_jsonable(model: RobotModel) -> dict:
    return {
        "joints": [{"axis": [float(v) for v in j.axis],
                    "origin": [float(v) for v in j.origin.flat12()],
                    "limits": [j.limits[0], j.limits[1]]} for j in model.joints],
        "tool_offset": [float(v) for v in model.tool_offset.flat12()],
        "base_pose": [float(v) for v in model.base_pose.flat12()],
        "capsules": [{"link": c.link, "p0": [float(v) for v in c.p0],
                      "p1": [float(v) for v in c.p1], "radius": float(c.radius),
                      "body": c.body}
                     for c in model.link_capsules],
    }


def robot_from_jsonable(data: dict) -> RobotModel:
    joints = tuple(Joint(np.asarray(j["axis"]), Pose.from_flat12(j["origin"]),
                         tuple(j["limits"])) for j in data["joints"])
    capsules = tuple(Capsule(c["link"], c["p0"], c["p1"], c["radius"],
                             c.get("body"))
                     for c in data.get("capsules", []))
    return RobotModel(joints, Pose.from_flat12(data["tool_offset"]), capsules,
                      Pose.from_flat12(data["base_pose"]))


def save_robot_json(path, model: RobotModel) -> None:
    with open(path, "w") as f:
        json.dump(robot_to_jsonable(model), f, indent=1, sort_keys=True)


def load_robot_json(path) -> RobotModel:
    with open(path) as f:
        return robot_from_jsonable(json.load(f))


def reachability_to_jsonable(reach: ReachabilityModel) -> dict:
    return {"mixture": rmm.mixture_to_jsonable(reach.mixture),
            "log_threshold": float(reach.log_threshold),
            "quantile": float(reach.quantile)}


def reachability_from_jsonable(data: dict) -> ReachabilityModel:
    return ReachabilityModel(rmm.mixture_from_jsonable(data["mixture"]),
                             float(data["log_threshold"]), float(data["quantile"]))


def save_reachability_json(path, reach: ReachabilityModel) -> None:
    with open(path, "w") as f:
        json.dump(reachability_to_jsonable(reach), f, indent=1, sort_keys=True)


def load_reachability_json(path) -> ReachabilityModel:
    with open(path) as f:
        return reachability_from_jsonable(json.load(f))
