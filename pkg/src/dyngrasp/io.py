"""File formats: ASCII PLY and CSV point clouds, SDF grid dumps.

Floats are written with ``repr`` so identical inputs produce byte-identical
files.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from dyngrasp.gpdf import GPDFModel, PointCloud, distance, variance


def _fmt(x) -> str:
    return repr(float(x))


def write_cloud_csv(path, cloud: PointCloud) -> None:
    cols = ["x", "y", "z"]
    data = [cloud.points]
    if cloud.normals is not None:
        cols += ["nx", "ny", "nz"]
        data.append(cloud.normals)
    if cloud.uncertainty is not None:
        cols.append("uncertainty")
        data.append(cloud.uncertainty[:, None])
    rows = np.hstack(data)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_cloud_csv(path) -> PointCloud:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = [h.strip().lower() for h in next(reader)]
        rows = [[float(v) for v in row] for row in reader if row]
    if header[:3] != ["x", "y", "z"]:
        raise ValueError(f"{path}: expected header starting with x,y,z, got {header}")
    arr = np.asarray(rows, dtype=float)
    points = arr[:, :3]
    normals = None
    uncertainty = None
    if "nx" in header:
        i = header.index("nx")
        normals = arr[:, i:i + 3]
    if "uncertainty" in header:
        uncertainty = arr[:, header.index("uncertainty")]
    return PointCloud(points, normals, uncertainty)


def write_cloud_ply(path, cloud: PointCloud) -> None:
    props = ["x", "y", "z"]
    data = [cloud.points]
    if cloud.normals is not None:
        props += ["nx", "ny", "nz"]
        data.append(cloud.normals)
    if cloud.uncertainty is not None:
        props.append("uncertainty")
        data.append(cloud.uncertainty[:, None])
    rows = np.hstack(data)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    lines += [f"property float {p}" for p in props]
    lines.append("end_header")
    for row in rows:
        lines.append(" ".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_cloud_ply(path) -> PointCloud:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    props: list[str] = []
    n = None
    body_at = None
    for i, line in enumerate(text[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "element":
            if tok[1] != "vertex":
                raise ValueError(f"{path}: only vertex elements are supported")
            n = int(tok[2])
        elif tok[0] == "property":
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_at = i + 1
            break
    if n is None or body_at is None:
        raise ValueError(f"{path}: malformed PLY header")
    rows = [[float(v) for v in line.split()] for line in text[body_at:body_at + n]]
    arr = np.asarray(rows, dtype=float)
    if arr.shape != (n, len(props)):
        raise ValueError(f"{path}: vertex data does not match header")
    cols = {p: arr[:, i] for i, p in enumerate(props)}
    points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    normals = None
    if "nx" in cols:
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
    uncertainty = cols.get("uncertainty")
    return PointCloud(points, normals, uncertainty)


def read_cloud(path) -> PointCloud:
    """Dispatch on extension: .ply or .csv."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_cloud_ply(path)
    if suffix == ".csv":
        return read_cloud_csv(path)
    raise ValueError(f"{path}: unsupported point-cloud format {suffix!r}")


def write_cloud(path, cloud: PointCloud) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        write_cloud_ply(path, cloud)
    elif suffix == ".csv":
        write_cloud_csv(path, cloud)
    else:
        raise ValueError(f"{path}: unsupported point-cloud format {suffix!r}")


def write_sdf_grid_csv(path, model: GPDFModel, box, grid) -> None:
    """Dump raw distance and occupancy variance on a regular grid."""
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    axes = [np.linspace(lo[i], hi[i], int(grid[i])) for i in range(3)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    d = distance(model, nodes)
    v = variance(model, nodes)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "z", "distance", "variance"])
        for node, dd, vv in zip(nodes, d, v):
            w.writerow([_fmt(node[0]), _fmt(node[1]), _fmt(node[2]), _fmt(dd), _fmt(vv)])
