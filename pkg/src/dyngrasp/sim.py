"""Closed-loop scenarios: a moving object, a periodic grasp refresh, and one
of the two reactive controllers, with per-step logging and summary metrics.

The object's shape is fitted once in its own frame; the sampled grasps ride
along with the tracked object pose, so a refresh is a rigid retarget (plus an
IK re-solve with identical seeds for the joint controller).  Everything is
seeded: the same scenario file produces byte-identical logs.
"""

from __future__ import annotations

import csv
import json
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from dyngrasp import control, gpdf, grasp, io, rmm, robot, se3
from dyngrasp.control import NoFeasibleGraspError
from dyngrasp.se3 import Pose

LATCH_POS = 5e-3
LATCH_ROT = 0.05
LATCH_STEPS = 5
REFRESH_PERIOD = 0.5
DEFAULT_ROTATION_RATE = 0.2


@dataclass
class Trajectory:
    kind: str                      # circular | linear | sinusoidal | static
    start: np.ndarray              # circle center, or start position
    radius: float = 0.0
    angular_rate: float = 0.0      # rad/s around the circle
    direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    amplitude: float = 0.0
    period: float = 1.0
    rotation_rate: float = DEFAULT_ROTATION_RATE
    rotation_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        if self.kind not in ("circular", "linear", "sinusoidal", "static"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.period <= 0:
            raise ValueError("period must be positive")
        self.start = np.asarray(self.start, dtype=float).reshape(3)
        self.direction = np.asarray(self.direction, dtype=float).reshape(3)
        self.rotation_axis = np.asarray(self.rotation_axis, dtype=float).reshape(3)

    def to_jsonable(self):
        return {"kind": self.kind, "start": list(map(float, self.start)),
                "radius": float(self.radius), "angular_rate": float(self.angular_rate),
                "direction": list(map(float, self.direction)),
                "amplitude": float(self.amplitude), "period": float(self.period),
                "rotation_rate": float(self.rotation_rate),
                "rotation_axis": list(map(float, self.rotation_axis))}

    @staticmethod
    def from_jsonable(data):
        return Trajectory(data["kind"], data["start"], data.get("radius", 0.0),
                          data.get("angular_rate", 0.0),
                          data.get("direction", [0.0, 1.0, 0.0]),
                          data.get("amplitude", 0.0), data.get("period", 1.0),
                          data.get("rotation_rate", DEFAULT_ROTATION_RATE),
                          data.get("rotation_axis", [0.0, 0.0, 1.0]))


def trajectory_pose(traj: Trajectory, time: float) -> Pose:
    """Closed-form object pose: translation along the named path plus a
    constant-rate rotation about the fixed axis."""
    if time < 0:
        raise ValueError("time must be >= 0")
    axis = traj.rotation_axis / np.linalg.norm(traj.rotation_axis)
    rot = se3.so3_exp_batch((axis * traj.rotation_rate * time)[None])[0]
    if traj.kind == "static":
        pos = traj.start
    elif traj.kind == "circular":
        a = traj.angular_rate * time
        pos = traj.start + traj.radius * np.array([np.cos(a), np.sin(a), 0.0])
    elif traj.kind == "linear":
        pos = traj.start + traj.direction * time
    else:  # sinusoidal
        d = traj.direction / np.linalg.norm(traj.direction)
        pos = traj.start + traj.amplitude * np.sin(2.0 * np.pi * time / traj.period) * d
    return Pose._unsafe(rot, np.asarray(pos, dtype=float))


@dataclass
class ScenarioConfig:
    object_cloud: str
    robot_model: str
    trajectory: Trajectory
    controller: str = "task"           # task | joint | both
    dt: float = 0.02
    duration: float = 8.0
    seeds: dict = field(default_factory=lambda: {"sampler": 0, "ik": 0, "controller": 0})
    grasp_refresh_period: float = REFRESH_PERIOD
    latch_pos: float = LATCH_POS
    latch_rot: float = LATCH_ROT
    latch_steps: int = LATCH_STEPS
    limits_enforced: bool = True
    start_q: Optional[list] = None
    max_control_grasps: int = 6
    sampler: dict = field(default_factory=dict)
    controller_params: dict = field(default_factory=dict)
    gripper_max_width: float = 0.1
    name: str = "scenario"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.duration < 0:
            raise ValueError("duration must be >= 0")
        if self.controller not in ("task", "joint", "both"):
            raise ValueError(f"unknown controller {self.controller!r}")

    def to_jsonable(self):
        return {"object_cloud": self.object_cloud, "robot_model": self.robot_model,
                "trajectory": self.trajectory.to_jsonable(),
                "controller": self.controller, "dt": self.dt,
                "duration": self.duration, "seeds": self.seeds,
                "grasp_refresh_period": self.grasp_refresh_period,
                "latch_pos": self.latch_pos, "latch_rot": self.latch_rot,
                "latch_steps": self.latch_steps,
                "limits_enforced": self.limits_enforced,
                "start_q": self.start_q,
                "max_control_grasps": self.max_control_grasps,
                "sampler": self.sampler,
                "controller_params": self.controller_params,
                "gripper_max_width": self.gripper_max_width, "name": self.name}

    @staticmethod
    def from_jsonable(data):
        fields = dict(data)
        fields["trajectory"] = Trajectory.from_jsonable(data["trajectory"])
        return ScenarioConfig(**fields)


def load_scenario(path) -> ScenarioConfig:
    with open(path) as f:
        data = json.load(f)
    cfg = ScenarioConfig.from_jsonable(data)
    base = Path(path).parent
    cfg.object_cloud = str((base / cfg.object_cloud).resolve())
    cfg.robot_model = str((base / cfg.robot_model).resolve())
    return cfg


def save_scenario(path, cfg: ScenarioConfig) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_jsonable(), f, indent=1, sort_keys=True)


@dataclass
class ScenarioMetrics:
    self_collision_pct: float = 0.0
    joint_limit_violation_pct: float = 0.0
    mean_manipulability: float = 0.0
    mean_gripper_object_distance_cm: float = 0.0        # surface distance
    mean_gripper_object_origin_distance_cm: float = 0.0  # frame-origin distance
    grasp_latched: bool = False
    steps: int = 0
    failed: bool = False
    failure: str = ""
    per_step_log: list = field(default_factory=list)

    def to_jsonable(self):
        return {k: getattr(self, k) for k in
                ("self_collision_pct", "joint_limit_violation_pct",
                 "mean_manipulability", "mean_gripper_object_distance_cm",
                 "mean_gripper_object_origin_distance_cm", "grasp_latched",
                 "steps", "failed", "failure")}


def metrics_from_log(log: list) -> ScenarioMetrics:
    """Aggregate metrics are a pure function of the per-step log."""
    m = ScenarioMetrics(per_step_log=log, steps=len(log))
    if not log:
        return m
    m.self_collision_pct = 100.0 * np.mean([row["self_collision"] for row in log])
    m.joint_limit_violation_pct = 100.0 * np.mean([row["limit_violation"] for row in log])
    m.mean_manipulability = float(np.mean([row["manipulability"] for row in log]))
    m.mean_gripper_object_distance_cm = 100.0 * float(
        np.mean([row["surface_distance"] for row in log]))
    m.mean_gripper_object_origin_distance_cm = 100.0 * float(
        np.mean([row["origin_distance"] for row in log]))
    m.grasp_latched = bool(any(row["latched"] for row in log))
    return m


def _select_control_grasps(grasps, limit):
    ranked = sorted(range(len(grasps)), key=lambda i: (grasps[i].quality, i))
    return [grasps[i] for i in ranked[:limit]]


def _grasp_pose_error(x: Pose, grasps):
    best = (np.inf, np.inf)
    for g in grasps:
        dt, dr = se3.pose_distance(x, g.pose)
        if dt + dr < best[0] + best[1]:
            best = (dt, dr)
    return best


class _ObjectField:
    """Distance queries against the object's field at its current pose."""

    def __init__(self, model, frame):
        self.model = model      # fitted in the canonical frame
        self.frame = frame      # canonical -> object frame

    def surface_distance(self, point_world, object_pose: Pose) -> float:
        local = self.frame.inverse().apply(object_pose.inverse().apply(point_world))
        return float(gpdf.refine_distance(self.model, local).distance)


def run_scenario(cfg: ScenarioConfig, out_dir=None) -> ScenarioMetrics:
    """Simulate one scenario; optionally write the per-step CSV and summary
    JSON into ``out_dir``.  Pipeline failures mark the metrics as failed and
    preserve the partial log."""
    if cfg.controller == "both":
        raise ValueError("run_scenario runs one controller; use compare_controllers")
    log: list = []
    try:
        metrics = _run(cfg, log)
    except Exception as e:  # scenario failed: keep the partial log
        metrics = metrics_from_log(log)
        metrics.failed = True
        metrics.failure = f"{type(e).__name__}: {e}"
        metrics.per_step_log = log
        if not isinstance(e, (NoFeasibleGraspError, gpdf.FitError, ValueError,
                              OSError, KeyError)):
            metrics.failure += "\n" + traceback.format_exc(limit=3)
    if out_dir is not None:
        write_outputs(out_dir, cfg, metrics)
    return metrics


def _run(cfg: ScenarioConfig, log: list) -> ScenarioMetrics:
    cloud = io.read_cloud(cfg.object_cloud)
    arm = robot.load_robot_json(cfg.robot_model)
    gripper = grasp.parallel_jaw(max_width=cfg.gripper_max_width)
    sampler = grasp.SamplerConfig(seed=cfg.seeds.get("sampler", 0),
                                  **cfg.sampler)
    result = grasp.sample_pipeline(cloud, gripper, sampler)
    if not result.grasps:
        raise NoFeasibleGraspError("the sampler produced no accepted grasps")
    obj_grasps = _select_control_grasps(result.grasps, cfg.max_control_grasps)
    obj_field = _ObjectField(result.model, result.frame)

    obj_pose = trajectory_pose(cfg.trajectory, 0.0)
    world_grasps = [g.transformed(obj_pose) for g in obj_grasps]
    ik_seed = cfg.seeds.get("ik", 0)
    params = dict(cfg.controller_params)
    if cfg.controller == "task":
        controller = control.make_task_controller(
            world_grasps, seed=cfg.seeds.get("controller", 0), **params)
    else:
        ik_starts = params.pop("ik_starts", 8)
        ik_refine_iters = params.pop("ik_refine_iters", 60)
        solutions = control.solve_grasp_solutions(arm, world_grasps,
                                                  seed=ik_seed, n_starts=ik_starts,
                                                  refine_iters=ik_refine_iters)
        if not solutions:
            raise NoFeasibleGraspError("no IK solution for any initial grasp")
        controller = control.build_joint_field(
            solutions, robot_model=arm, grasps=tuple(world_grasps),
            ik_seed=ik_seed, ik_starts=ik_starts, ik_refine_iters=ik_refine_iters,
            **params)

    q = np.asarray(cfg.start_q, dtype=float) if cfg.start_q is not None \
        else arm.clamp(np.full(arm.dof, 0.3))
    rng_ctrl = np.random.default_rng(cfg.seeds.get("controller", 0))
    steps = int(round(cfg.duration / cfg.dt))
    last_refresh_pose = obj_pose
    next_refresh = cfg.grasp_refresh_period
    latch_counter = 0
    lo, hi = arm.limits_arrays()

    for i in range(steps):
        t = i * cfg.dt
        obj_pose = trajectory_pose(cfg.trajectory, t)
        if t >= next_refresh:
            delta = obj_pose @ last_refresh_pose.inverse()
            moved = (np.linalg.norm(delta.translation) > 1e-12
                     or se3.rotation_angle(delta.rotation) > 1e-12)
            if moved:
                controller = control.retarget(controller, delta)
                world_grasps = [g.transformed(delta) for g in world_grasps]
                last_refresh_pose = obj_pose
            next_refresh += cfg.grasp_refresh_period

        if isinstance(controller, control.TaskController):
            qdot = control.task_step(controller, arm, q)
            if np.linalg.norm(qdot) * cfg.dt < 1e-5:
                kick = control.escape_if_stuck(controller, robot.fk(arm, q), rng_ctrl)
                if kick is not None:
                    world = control.body_to_world_twist(robot.fk(arm, q), kick)
                    extra = control.damped_pinv(robot.jacobian(arm, q),
                                                controller.lam) @ world / cfg.dt
                    qdot = np.clip(qdot + extra, -controller.velocity_clip,
                                   controller.velocity_clip)
        else:
            qdot = control.joint_step(controller, q)

        q_raw = q + cfg.dt * qdot
        if cfg.limits_enforced:
            q = arm.clamp(q_raw)
            violation = False
        else:
            q = q_raw
            violation = bool(np.any(q < lo) or np.any(q > hi))

        ee = robot.fk(arm, q)
        surf = obj_field.surface_distance(ee.translation, obj_pose)
        origin_d = float(np.linalg.norm(ee.translation - obj_pose.translation))
        err_t, err_r = _grasp_pose_error(ee, world_grasps)
        latch_counter = latch_counter + 1 \
            if (err_t < cfg.latch_pos and err_r < cfg.latch_rot) else 0
        log.append({
            "time": t, "q": q.tolist(),
            "ee_pose": ee.flat12().tolist(),
            "object_pose": obj_pose.flat12().tolist(),
            "surface_distance": surf, "origin_distance": origin_d,
            "manipulability": robot.manipulability(arm, q),
            "self_collision": bool(robot.self_collision(arm, q)),
            "limit_violation": violation,
            "grasp_error_pos": err_t, "grasp_error_rot": err_r,
            "latched": latch_counter >= cfg.latch_steps,
        })
    return metrics_from_log(log)


def write_outputs(out_dir, cfg: ScenarioConfig, metrics: ScenarioMetrics) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{cfg.name}_{cfg.controller}"
    with open(out / f"{stem}_steps.csv", "w", newline="") as f:
        w = csv.writer(f)
        dof = len(metrics.per_step_log[0]["q"]) if metrics.per_step_log else 0
        header = (["time"] + [f"q{i}" for i in range(dof)]
                  + [f"ee{i}" for i in range(12)] + [f"obj{i}" for i in range(12)]
                  + ["surface_distance", "origin_distance", "manipulability",
                     "self_collision", "limit_violation", "latched"])
        w.writerow(header)
        for row in metrics.per_step_log:
            w.writerow([repr(float(row["time"]))]
                       + [repr(float(v)) for v in row["q"]]
                       + [repr(float(v)) for v in row["ee_pose"]]
                       + [repr(float(v)) for v in row["object_pose"]]
                       + [repr(float(row["surface_distance"])),
                          repr(float(row["origin_distance"])),
                          repr(float(row["manipulability"])),
                          int(row["self_collision"]), int(row["limit_violation"]),
                          int(row["latched"])])
    with open(out / f"{stem}_summary.json", "w") as f:
        json.dump({"scenario": cfg.name, "controller": cfg.controller,
                   "metrics": metrics.to_jsonable()}, f, indent=1, sort_keys=True)


def compare_controllers(cfg_a: ScenarioConfig, cfg_b: ScenarioConfig,
                        out_dir=None) -> dict:
    """Run two scenarios that differ only in the controller and tabulate the
    metrics side by side with deltas."""
    a_dict, b_dict = cfg_a.to_jsonable(), cfg_b.to_jsonable()
    a_dict.pop("controller"), b_dict.pop("controller")
    a_dict.pop("name"), b_dict.pop("name")
    if a_dict != b_dict:
        raise ValueError("configs must be identical except for the controller")
    rows = []
    results = {}
    for cfg in (cfg_a, cfg_b):
        m = run_scenario(cfg, out_dir=out_dir)
        results[cfg.controller] = m
        rows.append({"trajectory": cfg.trajectory.kind, "method": cfg.controller,
                     **m.to_jsonable()})
    keys = ("self_collision_pct", "joint_limit_violation_pct",
            "mean_manipulability", "mean_gripper_object_distance_cm")
    deltas = {k: rows[0][k] - rows[1][k] for k in keys}
    table = {"rows": rows, "delta_first_minus_second": deltas}
    if out_dir is not None:
        with open(Path(out_dir) / f"{cfg_a.name}_comparison.json", "w") as f:
            json.dump(table, f, indent=1, sort_keys=True)
    return table


def format_comparison(table: dict) -> str:
    cols = ["trajectory", "method", "self_collision_pct",
            "joint_limit_violation_pct", "mean_manipulability",
            "mean_gripper_object_distance_cm"]
    lines = ["  ".join(f"{c:>28}" for c in cols)]
    for row in table["rows"]:
        lines.append("  ".join(
            f"{row[c]:>28.4f}" if isinstance(row[c], float) else f"{str(row[c]):>28}"
            for c in cols))
    return "\n".join(lines)


def write_example_scenario(out_dir, controller: str = "task",
                           trajectory: str = "static", duration: float = 6.0,
                           name: Optional[str] = None, **overrides) -> str:
    """Generate a self-contained scenario (sphere cloud + bundled 7-joint arm
    + config JSON) under ``out_dir`` and return the config path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(42)
    v = rng.normal(size=(400, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    cloud = gpdf.PointCloud(0.04 * v, v)
    io.write_cloud_csv(out / "sphere.csv", cloud)
    robot.save_robot_json(out / "robot.json", robot.spatial_7dof())
    center = np.array([0.55, 0.0, 0.45])
    trajectories = {
        "static": Trajectory("static", center, rotation_rate=0.0),
        "circular": Trajectory("circular", center, radius=0.12, angular_rate=0.3),
        "linear": Trajectory("linear", center - [0.0, 0.12, 0.0],
                             direction=[0.0, 0.03, 0.0]),
        "sinusoidal": Trajectory("sinusoidal", center, amplitude=0.12, period=8.0),
    }
    cfg = ScenarioConfig(
        object_cloud="sphere.csv", robot_model="robot.json",
        trajectory=trajectories[trajectory], controller=controller,
        duration=duration, name=name or f"{trajectory}_sphere",
        start_q=[0.0, 0.6, 0.0, -1.2, 0.0, 0.6, 0.0],
        sampler={"n": 10, "grid": (8, 8, 8)})
    for k, val in overrides.items():
        setattr(cfg, k, val)
    path = out / f"{cfg.name}_{controller}.json"
    save_scenario(path, cfg)
    return str(path)
