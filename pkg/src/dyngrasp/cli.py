"""Command-line front end.

Subcommands mirror the pipeline stages: ``reconstruct`` (fit + complete a
shape), ``sample-grasps`` (sample + filter, optional reachability filter),
``fit-reachability`` (offline reachable-space mixture), ``simulate`` (closed
loop scenarios).  All randomness flows from --seed flags; identical inputs
and seeds give byte-identical outputs.  Diagnostics go to stderr so the data
outputs stay machine-parseable.

Exit codes: 0 success, 2 input parse failure, 3 fit/empty-data failure,
4 scenario failure.  RG_THREADS caps numerical thread pools.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dyngrasp import gpdf, grasp, io, robot, sim

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_FIT = 3
EXIT_SCENARIO = 4


@dataclass
class CommandResult:
    exit_code: int
    artifacts_written: list = field(default_factory=list)


def _diag(msg: str) -> None:
    print(msg, file=sys.stderr)


def _apply_thread_cap() -> None:
    cap = os.environ.get("RG_THREADS")
    if not cap:
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(int(cap))
    except (ImportError, ValueError) as e:
        _diag(f"RG_THREADS ignored: {e}")


def _parse_grid(text: str):
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"grid must look like 8x8x8, got {text!r}")
    return tuple(int(p) for p in parts)


def cmd_reconstruct(cloud_path, out, lengthscale=gpdf.DEFAULT_LENGTHSCALE,
                    noise_var=gpdf.DEFAULT_NOISE_VAR, grid=(8, 8, 8),
                    expand=2.0, sdf_grid_out=None) -> CommandResult:
    """Fit a distance field to a partial cloud and write the completed
    surface (with normals and uncertainty); optionally dump the raw SDF grid."""
    try:
        cloud = io.read_cloud(cloud_path)
    except (OSError, ValueError) as e:
        _diag(f"reconstruct: cannot read {cloud_path}: {e}")
        return CommandResult(EXIT_PARSE)
    try:
        model = gpdf.fit(cloud, lengthscale, noise_var)
        box = gpdf.expanded_bounds(cloud.points, expand)
        completed = gpdf.complete_shape(model, box, grid)
    except gpdf.FitError as e:
        _diag(f"reconstruct: fit failed: {e}")
        return CommandResult(EXIT_FIT)
    artifacts = []
    io.write_cloud(out, completed)
    artifacts.append(str(out))
    if sdf_grid_out:
        io.write_sdf_grid_csv(sdf_grid_out, model, box, grid)
        artifacts.append(str(sdf_grid_out))
    _diag(f"reconstruct: {len(completed)} surface points -> {out}")
    return CommandResult(EXIT_OK, artifacts)


def cmd_sample_grasps(cloud_path, out, gripper_path=None, n=20, seed=0,
                      reach_model_path=None, lengthscale=gpdf.DEFAULT_LENGTHSCALE,
                      noise_var=gpdf.DEFAULT_NOISE_VAR, grid=(8, 8, 8)) -> CommandResult:
    """Sample and filter antipodal grasps; apply the reachability filter when
    a reachability model is given.  An empty result is not an error."""
    try:
        cloud = io.read_cloud(cloud_path)
        if gripper_path is not None:
            with open(gripper_path) as f:
                gripper = grasp.gripper_from_jsonable(json.load(f))
        else:
            gripper = grasp.parallel_jaw()
        reach = robot.load_reachability_json(reach_model_path) \
            if reach_model_path else None
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        _diag(f"sample-grasps: cannot read inputs: {e}")
        return CommandResult(EXIT_PARSE)
    try:
        cfg = grasp.SamplerConfig(n=n, seed=seed, lengthscale=lengthscale,
                                  noise_var=noise_var, grid=grid)
        result = grasp.sample_pipeline(cloud, gripper, cfg)
    except gpdf.FitError as e:
        _diag(f"sample-grasps: fit failed: {e}")
        return CommandResult(EXIT_FIT)
    grasps = result.grasps
    if reach is not None:
        grasps = robot.filter_reachable(reach, grasps)
    if not grasps:
        _diag("sample-grasps: warning: no grasp passed the filters")
    with open(out, "w") as f:
        json.dump(grasp.grasps_to_jsonable(grasps), f, indent=1, sort_keys=True)
    _diag(f"sample-grasps: {len(grasps)} accepted grasps -> {out}")
    return CommandResult(EXIT_OK, [str(out)])


def cmd_fit_reachability(robot_path, out, n=200000, seed=0,
                         quantile=robot.REACH_QUANTILE, table_height=-np.inf,
                         k_range=(1, 2, 4, 8, 16, 32, 64)) -> CommandResult:
    """Sample the arm's reachable space, fit the pose mixture by BIC, and
    write it with the density threshold at the requested quantile."""
    try:
        arm = robot.load_robot_json(robot_path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        _diag(f"fit-reachability: cannot read {robot_path}: {e}")
        return CommandResult(EXIT_PARSE)
    if n < 1:
        _diag("fit-reachability: need at least one sample")
        return CommandResult(EXIT_FIT)
    try:
        reach = robot.fit_reachability(arm, n, table_height=table_height,
                                       seed=seed, k_range=k_range,
                                       quantile=quantile)
    except (ValueError, RuntimeError) as e:
        _diag(f"fit-reachability: fit failed: {e}")
        return CommandResult(EXIT_FIT)
    robot.save_reachability_json(out, reach)
    _diag(f"fit-reachability: k={len(reach.mixture)} components, "
          f"log-threshold {reach.log_threshold:.3f} -> {out}")
    return CommandResult(EXIT_OK, [str(out)])


def cmd_simulate(scenario_path, out_dir) -> CommandResult:
    """Run a scenario (or a task/joint pair when controller is "both") and
    write per-step CSV and summary JSON; prints the summary table."""
    try:
        cfg = sim.load_scenario(scenario_path)
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
        _diag(f"simulate: cannot parse {scenario_path}: {e}")
        return CommandResult(EXIT_PARSE)
    out = Path(out_dir)
    artifacts = []
    if cfg.controller == "both":
        cfg_task = sim.ScenarioConfig.from_jsonable(cfg.to_jsonable())
        cfg_task.controller = "task"
        cfg_task.object_cloud, cfg_task.robot_model = cfg.object_cloud, cfg.robot_model
        cfg_joint = sim.ScenarioConfig.from_jsonable(cfg.to_jsonable())
        cfg_joint.controller = "joint"
        cfg_joint.object_cloud, cfg_joint.robot_model = cfg.object_cloud, cfg.robot_model
        table = sim.compare_controllers(cfg_task, cfg_joint, out_dir=out)
        print(sim.format_comparison(table))
        artifacts += [str(out / f"{cfg.name}_{c}_{k}")
                      for c in ("task", "joint")
                      for k in ("steps.csv", "summary.json")]
        artifacts.append(str(out / f"{cfg_task.name}_comparison.json"))
        failed = any(row["failed"] for row in table["rows"])
    else:
        metrics = sim.run_scenario(cfg, out_dir=out)
        for key, value in metrics.to_jsonable().items():
            print(f"{key}: {value}")
        artifacts += [str(out / f"{cfg.name}_{cfg.controller}_steps.csv"),
                      str(out / f"{cfg.name}_{cfg.controller}_summary.json")]
        failed = metrics.failed
        if failed:
            _diag(f"simulate: scenario failed: {metrics.failure}")
    return CommandResult(EXIT_SCENARIO if failed else EXIT_OK, artifacts)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dyngrasp",
                                description="distance-field grasping pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("reconstruct", help="complete a partial point cloud")
    r.add_argument("cloud")
    r.add_argument("--out", required=True)
    r.add_argument("--lengthscale", type=float, default=gpdf.DEFAULT_LENGTHSCALE)
    r.add_argument("--noise-var", type=float, default=gpdf.DEFAULT_NOISE_VAR)
    r.add_argument("--grid", type=_parse_grid, default=(8, 8, 8))
    r.add_argument("--expand", type=float, default=2.0)
    r.add_argument("--sdf-grid", dest="sdf_grid", default=None,
                   help="also dump x,y,z,distance,variance CSV")

    g = sub.add_parser("sample-grasps", help="sample and filter grasps")
    g.add_argument("cloud")
    g.add_argument("--gripper", default=None, help="gripper spec JSON")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--reach-model", default=None)
    g.add_argument("--lengthscale", type=float, default=gpdf.DEFAULT_LENGTHSCALE)
    g.add_argument("--noise-var", type=float, default=gpdf.DEFAULT_NOISE_VAR)
    g.add_argument("--grid", type=_parse_grid, default=(8, 8, 8))

    f = sub.add_parser("fit-reachability", help="fit the reachable-space mixture")
    f.add_argument("robot")
    f.add_argument("--out", required=True)
    f.add_argument("--n", type=int, default=200000)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--quantile", type=float, default=robot.REACH_QUANTILE)
    f.add_argument("--table-height", type=float, default=-np.inf)
    f.add_argument("--k-range", type=lambda s: tuple(int(v) for v in s.split(",")),
                   default=(1, 2, 4, 8, 16, 32, 64))

    s = sub.add_parser("simulate", help="run a scenario file")
    s.add_argument("scenario")
    s.add_argument("--out", required=True, help="output directory")
    return p


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    if args.command == "reconstruct":
        result = cmd_reconstruct(args.cloud, args.out, args.lengthscale,
                                 args.noise_var, args.grid, args.expand,
                                 args.sdf_grid)
    elif args.command == "sample-grasps":
        result = cmd_sample_grasps(args.cloud, args.out, args.gripper, args.n,
                                   args.seed, args.reach_model,
                                   args.lengthscale, args.noise_var, args.grid)
    elif args.command == "fit-reachability":
        result = cmd_fit_reachability(args.robot, args.out, args.n, args.seed,
                                      args.quantile, args.table_height,
                                      args.k_range)
    else:
        result = cmd_simulate(args.scenario, args.out)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
