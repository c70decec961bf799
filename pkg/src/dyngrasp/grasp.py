"""Antipodal grasp sampling on a distance field, with post-filtering.

Candidate contacts are surface points of the completed cloud.  The opposing
contact is found by marching along the inward normal and locating where the
field gradient flips from pointing against the march direction to along it
(the exit surface), bisected to sub-millimeter precision.  Contact pairs give
the closing axis; discrete rolls of the approach axis about it give full
poses.  Filtering keeps poses whose gripper clearance points stay outside the
surface and whose contact normals oppose (cosine near -1, the jaw-gripper
force-closure indicator).

The whole pipeline runs in a canonical frame derived from the input cloud
(centroid plus principal axes with a deterministic sign convention), so its
output is equivariant to rigid transforms of the input: moving the cloud moves
the grasps with it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from dyngrasp import gpdf
from dyngrasp.gpdf import GPDFModel, PointCloud
from dyngrasp.se3 import Pose

FORCE_CLOSURE_THRESHOLD = -0.95
COLLISION_MARGIN = 3e-3
N_ROLLS = 8
_MARCH_START = 1e-3
_MARCH_STEP = 2e-3
_BISECT_TOL = 1e-4
_MIN_WIDTH = 2e-3


class DegenerateNormalError(RuntimeError):
    """Field gradient vanished at a contact; no normal to compare."""


@dataclass(frozen=True)
class GripperSpec:
    """Parallel-jaw gripper geometry in its own frame."""

    max_width: float
    finger_clearance_points: np.ndarray  # (k, 3)
    approach_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    closing_axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "finger_clearance_points",
                           np.atleast_2d(np.asarray(self.finger_clearance_points, dtype=float)))
        a = np.asarray(self.approach_axis, dtype=float).reshape(3)
        c = np.asarray(self.closing_axis, dtype=float).reshape(3)
        if self.max_width <= 0:
            raise ValueError("max_width must be positive")
        if (abs(np.linalg.norm(a) - 1) > 1e-9 or abs(np.linalg.norm(c) - 1) > 1e-9
                or abs(np.dot(a, c)) > 1e-9):
            raise ValueError("approach and closing axes must be orthonormal")
        object.__setattr__(self, "approach_axis", a)
        object.__setattr__(self, "closing_axis", c)


def parallel_jaw(max_width: float = 0.1, finger_length: float = 0.06,
                 points_per_finger: int = 5) -> GripperSpec:
    """Two-finger gripper: approach along +z (fingertips lead, contacts at the
    origin plane), fingers closing along x.  Clearance points sample the open
    fingers at +-max_width/2 and the palm bar behind them."""
    zs = np.linspace(-finger_length, 0.0, points_per_finger)
    half = max_width / 2.0
    fingers = [(s * half, 0.0, z) for s in (-1.0, 1.0) for z in zs]
    palm = [(x, 0.0, -finger_length) for x in np.linspace(-half, half, 5)]
    return GripperSpec(max_width, np.array(fingers + palm))


@dataclass
class GraspPose:
    """A candidate grasp: gripper pose, jaw width, contact pair, quality.

    ``quality`` is the cosine similarity of the contact normals (near -1 for
    an antipodal pair).
    """

    pose: Pose
    width: float
    contact_a: np.ndarray
    contact_b: np.ndarray
    quality: float

    def __post_init__(self):
        self.contact_a = np.asarray(self.contact_a, dtype=float).reshape(3)
        self.contact_b = np.asarray(self.contact_b, dtype=float).reshape(3)
        gap = np.linalg.norm(self.contact_a - self.contact_b)
        if abs(gap - self.width) > 1e-6:
            raise ValueError(f"contact separation {gap} != width {self.width}")

    def transformed(self, g: Pose) -> "GraspPose":
        return GraspPose(g @ self.pose, self.width,
                         g.apply(self.contact_a), g.apply(self.contact_b), self.quality)


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs for the sample+filter pipeline."""

    n: int = 20
    seed: int = 0
    lengthscale: float = gpdf.DEFAULT_LENGTHSCALE
    noise_var: float = gpdf.DEFAULT_NOISE_VAR
    grid: tuple = (8, 8, 8)
    expand: float = 2.0
    margin: float = COLLISION_MARGIN
    score_threshold: float = FORCE_CLOSURE_THRESHOLD
    n_rolls: int = N_ROLLS
    complete: bool = True


class PipelineResult(NamedTuple):
    grasps: list          # accepted GraspPose in the input frame
    completed: PointCloud  # completed cloud in the input frame
    model: GPDFModel       # field fitted in the canonical frame
    frame: Pose            # canonical -> input-frame transform


def canonical_frame(points: np.ndarray) -> Pose:
    """Centroid + principal-axes frame of a cloud (canonical -> world).

    Axis signs are fixed by the sign of the third moment of the projections,
    which is invariant under rigid motion of the cloud, so the same physical
    cloud always yields the same canonical coordinates.  (Exactly symmetric
    clouds with vanishing third moments keep the solver's arbitrary sign.)
    """
    points = np.atleast_2d(points)
    c = points.mean(axis=0)
    centered = points - c
    _, vecs = np.linalg.eigh(centered.T @ centered / len(points))
    v = vecs[:, ::-1].copy()  # descending eigenvalue order
    for j in range(2):
        if np.sum((centered @ v[:, j]) ** 3) < 0:
            v[:, j] = -v[:, j]
    v[:, 2] = np.cross(v[:, 0], v[:, 1])
    return Pose(v, c)


def _perpendicular(b: np.ndarray) -> np.ndarray:
    e = np.zeros(3)
    e[np.argmin(np.abs(b))] = 1.0
    p = e - np.dot(e, b) * b
    return p / np.linalg.norm(p)


def _pose_from_contacts(closing_world: np.ndarray, approach_world: np.ndarray,
                        midpoint: np.ndarray, gripper: GripperSpec) -> Pose:
    y_w = np.cross(approach_world, closing_world)
    m_w = np.stack([closing_world, y_w, approach_world], axis=1)
    y_g = np.cross(gripper.approach_axis, gripper.closing_axis)
    m_g = np.stack([gripper.closing_axis, y_g, gripper.approach_axis], axis=1)
    return Pose(m_w @ m_g.T, midpoint)


def _opposing_contact(model: GPDFModel, start: np.ndarray, direction: np.ndarray,
                      max_depth: float):
    """March along `direction` from just inside the surface and bisect the
    point where the field gradient flips to point along the march (the exit
    surface).  Returns the exit point or None."""
    ts = np.arange(_MARCH_START, max_depth + _MARCH_STEP, _MARCH_STEP)
    pts = start[None, :] + ts[:, None] * direction[None, :]
    _, grads = gpdf.distance_and_gradient(model, pts)
    h = np.einsum("qm,m->q", grads, direction)
    sign = np.where(h > 0, 1.0, -1.0)
    sign[np.abs(h) < 1e-12] = -1.0  # clamped interior counts as inside
    crossings = np.flatnonzero((sign[:-1] < 0) & (sign[1:] > 0))
    if len(crossings) == 0:
        return None
    lo, hi = ts[crossings[0]], ts[crossings[0] + 1]
    while hi - lo > _BISECT_TOL:
        mid = 0.5 * (lo + hi)
        g = gpdf.gradient(model, start + mid * direction)
        if np.dot(g, direction) > 0:
            hi = mid
        else:
            lo = mid
    # return the outside end of the bracket so the subsequent surface
    # projection starts where the gradient is defined
    return start + hi * direction


def sample_antipodal(model: GPDFModel, completed: PointCloud, gripper: GripperSpec,
                     n: int, seed: int = 0, n_rolls: int = N_ROLLS) -> list:
    """Sample up to ``n`` contact pairs from the completed cloud and emit one
    candidate GraspPose per (pair, approach roll).  Deterministic given seed.
    Contact pairs wider than the gripper are skipped; may return []."""
    if completed.normals is None:
        raise ValueError("completed cloud must carry normals")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    n_pts = len(completed)
    idx = rng.permutation(n_pts)[:min(n, n_pts)]
    grasps = []
    for i in idx:
        a0 = completed.points[i]
        inward = -completed.normals[i]
        exit_pt = _opposing_contact(model, a0, inward, gripper.max_width * 1.5)
        if exit_pt is None:
            continue
        ra = gpdf.refine_distance(model, a0)
        rb = gpdf.refine_distance(model, exit_pt)
        if ra.degenerate or rb.degenerate:
            continue
        contact_a, contact_b = ra.point, rb.point
        width = float(np.linalg.norm(contact_a - contact_b))
        if not (_MIN_WIDTH <= width <= gripper.max_width):
            continue
        closing = (contact_a - contact_b) / width
        quality = float(np.dot(ra.normal, rb.normal))
        p0 = _perpendicular(closing)
        q0 = np.cross(closing, p0)
        midpoint = 0.5 * (contact_a + contact_b)
        for k in range(n_rolls):
            phi = 2.0 * np.pi * k / n_rolls
            approach = np.cos(phi) * p0 + np.sin(phi) * q0
            pose = _pose_from_contacts(closing, approach, midpoint, gripper)
            grasps.append(GraspPose(pose, width, contact_a, contact_b, quality))
    return grasps


def validate_collision(model: GPDFModel, grasp: GraspPose, gripper: GripperSpec,
                       margin: float = COLLISION_MARGIN) -> bool:
    """True iff every gripper clearance point keeps a refined distance to the
    surface above ``margin``."""
    world_pts = grasp.pose.apply(gripper.finger_clearance_points)
    res = gpdf.refine_distance(model, world_pts)
    return bool(np.all(res.distance > margin))


def force_closure_score(model: GPDFModel, grasp: GraspPose) -> float:
    """Cosine similarity of the refined surface normals at the two contacts;
    close to -1 for an antipodal (force-closure) pair."""
    res = gpdf.refine_distance(model, np.stack([grasp.contact_a, grasp.contact_b]))
    if res.degenerate.any():
        raise DegenerateNormalError("field gradient vanished at a contact point")
    return float(np.dot(res.normal[0], res.normal[1]))


def filter_grasps(model: GPDFModel, grasps: list, gripper: GripperSpec,
                  margin: float = COLLISION_MARGIN,
                  score_threshold: float = FORCE_CLOSURE_THRESHOLD) -> list:
    """Keep grasps that pass the collision check and whose force-closure score
    is below the acceptance threshold."""
    kept = []
    for g in grasps:
        try:
            score = force_closure_score(model, g)
        except DegenerateNormalError:
            continue
        if score < score_threshold and validate_collision(model, g, gripper, margin):
            kept.append(replace_quality(g, score))
    return kept


def replace_quality(grasp: GraspPose, quality: float) -> GraspPose:
    return GraspPose(grasp.pose, grasp.width, grasp.contact_a, grasp.contact_b, quality)


def sample_pipeline(cloud: PointCloud, gripper: GripperSpec,
                    config: SamplerConfig = SamplerConfig()) -> PipelineResult:
    """Full sample+filter pipeline: canonicalize, fit, complete, sample,
    filter, and map results back to the input frame."""
    frame = canonical_frame(cloud.points)
    cloud_c = cloud.transformed(frame.inverse())
    model = gpdf.fit(cloud_c, config.lengthscale, config.noise_var)
    if config.complete:
        box = gpdf.expanded_bounds(cloud_c.points, config.expand)
        completed_c = gpdf.complete_shape(model, box, config.grid)
    else:
        res = gpdf.refine_distance(model, cloud_c.points)
        keep = ~res.degenerate
        completed_c = PointCloud(res.point[keep], res.normal[keep],
                                 gpdf.variance(model, res.point[keep]))
    candidates = sample_antipodal(model, completed_c, gripper,
                                  config.n, config.seed, config.n_rolls)
    accepted_c = filter_grasps(model, candidates, gripper,
                               config.margin, config.score_threshold)
    grasps = [g.transformed(frame) for g in accepted_c]
    return PipelineResult(grasps, completed_c.transformed(frame), model, frame)


def check_equivariance(cloud: PointCloud, g: Pose, gripper: GripperSpec,
                       config: SamplerConfig = SamplerConfig()):
    """Run the pipeline on ``cloud`` and on ``g . cloud`` and report the worst
    pose discrepancy between ``g . f(cloud)`` and ``f(g . cloud)`` after
    optimal matching: (max translation deviation, max rotation deviation)."""
    from scipy.optimize import linear_sum_assignment

    from dyngrasp.se3 import pose_distance

    a = [gp.transformed(g) for gp in sample_pipeline(cloud, gripper, config).grasps]
    b = sample_pipeline(cloud.transformed(g), gripper, config).grasps
    if not a and not b:
        return 0.0, 0.0
    if not a or not b:
        return np.inf, np.inf
    cost = np.zeros((len(a), len(b)))
    dts = np.zeros_like(cost)
    drs = np.zeros_like(cost)
    for i, ga in enumerate(a):
        for j, gb in enumerate(b):
            dt, dr = pose_distance(ga.pose, gb.pose)
            dts[i, j], drs[i, j] = dt, dr
            cost[i, j] = dt + dr
    rows, cols = linear_sum_assignment(cost)
    return float(dts[rows, cols].max()), float(drs[rows, cols].max())


# --- serialization -----------------------------------------------------------

def gripper_to_jsonable(g: GripperSpec) -> dict:
    return {"max_width": float(g.max_width),
            "finger_clearance_points": [[float(v) for v in p]
                                        for p in g.finger_clearance_points],
            "approach_axis": [float(v) for v in g.approach_axis],
            "closing_axis": [float(v) for v in g.closing_axis]}


def gripper_from_jsonable(data: dict) -> GripperSpec:
    return GripperSpec(data["max_width"],
                       np.asarray(data["finger_clearance_points"], dtype=float),
                       np.asarray(data["approach_axis"], dtype=float),
                       np.asarray(data["closing_axis"], dtype=float))


def grasps_to_jsonable(grasps: list) -> list:
    return [{"pose": [float(v) for v in g.pose.flat12()],
             "width": float(g.width),
             "contacts": [[float(v) for v in g.contact_a],
                          [float(v) for v in g.contact_b]],
             "quality": float(g.quality)} for g in grasps]


def grasps_from_jsonable(data: list) -> list:
    return [GraspPose(Pose.from_flat12(d["pose"]), d["width"],
                      np.asarray(d["contacts"][0]), np.asarray(d["contacts"][1]),
                      d["quality"]) for d in data]


def write_grasps_csv(path, grasps: list) -> None:
    import csv
    header = ([f"pose{i}" for i in range(12)] + ["width"]
              + [f"a{c}" for c in "xyz"] + [f"b{c}" for c in "xyz"] + ["quality"])
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for g in grasps:
            row = (list(g.pose.flat12()) + [g.width] + list(g.contact_a)
                   + list(g.contact_b) + [g.quality])
            w.writerow([repr(float(v)) for v in row])


def read_grasps_csv(path) -> list:
    import csv
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        out = []
        for row in reader:
            if not row:
                continue
            vals = [float(v) for v in row]
            out.append(GraspPose(Pose.from_flat12(vals[:12]), vals[12],
                                 np.asarray(vals[13:16]), np.asarray(vals[16:19]),
                                 vals[19]))
    return out
