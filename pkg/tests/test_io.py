import numpy as np
import pytest

from dyngrasp import io
from dyngrasp.gpdf import PointCloud, fit_points

from conftest import sphere_cloud


def make_cloud(rng, with_normals=True, with_uncertainty=True):
    pts, normals = sphere_cloud(rng, 50, radius=0.1)
    return PointCloud(pts, normals if with_normals else None,
                      rng.uniform(0, 1, 50) if with_uncertainty else None)


@pytest.mark.parametrize("fmt", ["csv", "ply"])
@pytest.mark.parametrize("normals,uncertainty", [(True, True), (True, False),
                                                 (False, False)])
def test_cloud_roundtrip(tmp_path, rng, fmt, normals, uncertainty):
    cloud = make_cloud(rng, normals, uncertainty)
    path = tmp_path / f"cloud.{fmt}"
    io.write_cloud(path, cloud)
    back = io.read_cloud(path)
    assert np.allclose(back.points, cloud.points)
    if normals:
        assert np.allclose(back.normals, cloud.normals)
    else:
        assert back.normals is None
    if uncertainty:
        assert np.allclose(back.uncertainty, cloud.uncertainty)


def test_cloud_write_is_deterministic(tmp_path, rng):
    cloud = make_cloud(rng)
    a, b = tmp_path / "a.ply", tmp_path / "b.ply"
    io.write_cloud(a, cloud)
    io.write_cloud(b, cloud)
    assert a.read_bytes() == b.read_bytes()


def test_read_cloud_rejects_unknown_extension(tmp_path):
    p = tmp_path / "cloud.xyz"
    p.write_text("whatever")
    with pytest.raises(ValueError):
        io.read_cloud(p)


def test_read_csv_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        io.read_cloud_csv(p)


def test_read_ply_rejects_non_ply(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text("off\n")
    with pytest.raises(ValueError):
        io.read_cloud_ply(p)


def test_sdf_grid_dump_values(tmp_path, rng):
    pts, _ = sphere_cloud(rng, 200, radius=0.1)
    model = fit_points(pts)
    path = tmp_path / "sdf.csv"
    io.write_sdf_grid_csv(path, model, (np.full(3, -0.2), np.full(3, 0.2)), (4, 4, 4))
    lines = path.read_text().splitlines()
    assert lines[0] == "x,y,z,distance,variance"
    assert len(lines) == 1 + 4 ** 3
    row = [float(v) for v in lines[1].split(",")]
    assert len(row) == 5 and row[4] >= 0.0
