"""Reactive controllers that chase an implicit grasp target.

Task-space variant: gradient ascent on the log density of a pose mixture
fitted to the accepted grasps, pushed through the damped Jacobian
pseudo-inverse.  The log gradient keeps a useful direction even where the
density underflows, and a probe-based escape kicks the state off the
between-mode stationary points where the raw gradient vanishes.

Joint-space variant: the accepted grasps are converted to joint solutions by
multi-start IK and a distance field is fitted over them; descending
``-d(q) grad d(q)`` gives a potential controller whose equilibria are exactly
the stored solutions.

Both controllers are immutable snapshots: retargeting for a moving object
builds and returns a new controller, so a concurrent control loop never
observes a half-updated target.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from dyngrasp import gpdf, rmm, robot, se3
from dyngrasp.gpdf import GPDFModel
from dyngrasp.rmm import RiemannianMixture
from dyngrasp.robot import ReachabilityModel, RobotModel
from dyngrasp.se3 import Pose

STEP_GAIN = 1.0
VELOCITY_CLIP = 1.0
PROBE_RADIUS = 0.05
DISTURBANCE_SCALE = 0.02
STUCK_GRAD_TOL = 1e-2
JOINT_LENGTHSCALE = 0.5


class NoFeasibleGraspError(RuntimeError):
    """Every grasp target became unreachable after a retarget."""


@dataclass(frozen=True)
class TaskController:
    grasp_mixture: RiemannianMixture
    step_gain: float = STEP_GAIN
    disturbance_scale: float = DISTURBANCE_SCALE
    probe_radius: float = PROBE_RADIUS
    velocity_clip: float = VELOCITY_CLIP
    lam: float = robot.IK_LAMBDA
    stuck_grad_tol: float = STUCK_GRAD_TOL
    reach: Optional[ReachabilityModel] = None

    def __post_init__(self):
        if self.step_gain <= 0:
            raise ValueError("step_gain must be positive")


@dataclass(frozen=True)
class JointController:
    field: GPDFModel
    solutions: tuple          # joint vectors, the field's zero set
    lengthscale: float = JOINT_LENGTHSCALE
    velocity_clip: float = VELOCITY_CLIP
    # context for retargeting (optional for a static target)
    robot_model: Optional[RobotModel] = None
    grasps: tuple = ()
    reach: Optional[ReachabilityModel] = None
    ik_seed: int = 0
    ik_starts: int = 16
    ik_refine_iters: int = 60


def body_to_world_twist(pose: Pose, v: np.ndarray) -> np.ndarray:
    """Rotate a right-perturbation (body) tangent into world coordinates."""
    out = np.empty(6)
    out[:3] = pose.rotation @ v[:3]
    out[3:] = pose.rotation @ v[3:]
    return out


def damped_pinv(jac: np.ndarray, lam: float) -> np.ndarray:
    return jac.T @ np.linalg.inv(jac @ jac.T + lam ** 2 * np.eye(jac.shape[0]))


def task_step(c: TaskController, model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Joint velocity ascending the grasp-mixture log density at the current
    end-effector pose, clipped per joint."""
    x = robot.fk(model, q)
    grad = rmm.mixture_log_grad(c.grasp_mixture, x, safe=True)
    world = body_to_world_twist(x, grad)
    qdot = c.step_gain * damped_pinv(robot.jacobian(model, q), c.lam) @ world
    return np.clip(qdot, -c.velocity_clip, c.velocity_clip)


def escape_if_stuck(c: TaskController, x: Pose, rng) -> Optional[np.ndarray]:
    """Detect a between-mode stationary point and propose a kick.

    Probes 12 poses at ``probe_radius`` along the +-tangent axes.  The state
    is stuck when the log gradient has (numerically) vanished while some probe
    still sees a higher density: that is a stationary point that is not a
    mode.  Returns a tangent disturbance of magnitude ``disturbance_scale``
    aimed at the best probe (with a random lateral component), or None.
    """
    grad = rmm.mixture_log_grad(c.grasp_mixture, x, safe=True)
    if np.linalg.norm(grad) >= c.stuck_grad_tol:
        return None
    directions = np.vstack([np.eye(6), -np.eye(6)])
    base = rmm.mixture_logpdf(c.grasp_mixture, x, safe=True)
    scores = np.array([rmm.mixture_logpdf(c.grasp_mixture,
                                          se3.exp_at(x, c.probe_radius * d), safe=True)
                       for d in directions])
    best = int(np.argmax(scores))
    if scores[best] <= base:
        return None  # all probes lower: x is a mode, not a trap
    direction = 0.8 * directions[best] + 0.2 * rng.normal(size=6)
    direction /= np.linalg.norm(direction)
    return c.disturbance_scale * direction


def build_joint_field(solutions, lengthscale: float = JOINT_LENGTHSCALE,
                      noise_var: float = 0.0,
                      **controller_kwargs) -> JointController:
    """Fit a joint-space distance field with the IK solutions as its zero
    level; the result is a multi-equilibrium potential."""
    if len(solutions) == 0:
        raise ValueError("at least one IK solution required")
    support = np.atleast_2d(np.asarray(solutions, dtype=float))
    field = gpdf.fit_points(support, lengthscale, noise_var)
    return JointController(field, tuple(map(np.asarray, solutions)),
                           lengthscale, **controller_kwargs)


def joint_step(jc: JointController, q: np.ndarray) -> np.ndarray:
    """Joint velocity ``-d(q) * grad d(q)`` from the refined field, clipped
    per joint; exactly zero at every stored solution.

    The refined field's gradient at the query is the unit vector from the
    projected point back to the query (its Eikonal property), so the descent
    direction is the normalized march displacement."""
    q = np.asarray(q, dtype=float)
    res = gpdf.refine_distance(jc.field, q)
    disp = q - res.point
    norm = np.linalg.norm(disp)
    if norm < 1e-12:
        return np.zeros(jc.field.dim)
    qdot = -res.distance * disp / norm
    return np.clip(qdot, -jc.velocity_clip, jc.velocity_clip)


def solve_grasp_solutions(robot_model: RobotModel, grasps, seed: int = 0,
                          n_starts: int = 16, refine_iters: int = 60) -> list:
    """Joint solutions for a set of grasp poses: per-grasp multi-start IK
    with seeds derived from the grasp index (so a retarget re-solve with the
    same seed transitions smoothly), deduplicated across grasps."""
    solutions = []
    for i, g in enumerate(grasps):
        sols = robot.ik_multistart(robot_model, g.pose, n_starts=n_starts,
                                   refine_iters=refine_iters, seed=seed + i)
        solutions.extend(sols)
    dedup = []
    for s in solutions:
        if not any(np.max(np.abs(s - t)) < robot.IK_DEDUP_TOL for t in dedup):
            dedup.append(s)
    return dedup


def retarget(controller, object_motion: Pose):
    """Re-aim a controller after the object moved by ``object_motion``.

    Task variant: left-translate the mixture means, drop components that fell
    out of reach, renormalize.  Joint variant: transform the grasp poses,
    re-solve IK with the identical seeds, refit the field.  Returns a new
    controller; raises ``NoFeasibleGraspError`` when nothing remains.
    """
    if isinstance(controller, TaskController):
        moved = rmm.transform(controller.grasp_mixture, object_motion)
        if controller.reach is not None:
            keep = [i for i, comp in enumerate(moved.components)
                    if controller.reach.is_reachable(comp.mean)]
            if not keep:
                raise NoFeasibleGraspError("no mixture component is reachable")
            weights = moved.weights[keep]
            moved = RiemannianMixture(weights / weights.sum(),
                                      tuple(moved.components[i] for i in keep))
        return replace(controller, grasp_mixture=moved)

    if isinstance(controller, JointController):
        if controller.robot_model is None:
            raise ValueError("joint controller was built without a robot model")
        grasps = tuple(g.transformed(object_motion) for g in controller.grasps)
        if controller.reach is not None:
            grasps = tuple(robot.filter_reachable(controller.reach, list(grasps)))
        solutions = solve_grasp_solutions(controller.robot_model, grasps,
                                          controller.ik_seed, controller.ik_starts,
                                          controller.ik_refine_iters)
        if not solutions:
            raise NoFeasibleGraspError("no IK solution for any transformed grasp")
        field = gpdf.fit_points(np.atleast_2d(np.asarray(solutions)),
                                controller.lengthscale, 0.0)
        return replace(controller, field=field, solutions=tuple(solutions),
                       grasps=grasps)

    raise TypeError(f"unknown controller type {type(controller)!r}")


def make_task_controller(grasps, reach: Optional[ReachabilityModel] = None,
                         max_components: int = 8, seed: int = 0,
                         reg: float = 0.02, **kwargs) -> TaskController:
    """Fit the grasp mixture for control: at most ``max_components``
    components over the accepted grasp poses (one per grasp when few).

    ``reg`` floors the component covariances and thereby sets the gradient
    scale near a mode; discrete Euler ascent is stable when
    ``dt * step_gain / reg < 2``, so the default suits control rates around
    dt = 0.02 s (tighter floors turn the mode into a limit cycle)."""
    if len(grasps) == 0:
        raise NoFeasibleGraspError("no grasps to control toward")
    poses = [g.pose for g in grasps]
    k = min(max_components, len(poses))
    mixture = rmm.fit_em(poses, k, seed=seed, reg=reg)
    return TaskController(mixture, reach=reach, **kwargs)
