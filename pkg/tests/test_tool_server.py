import json

import numpy as np
import pytest

pytest.importorskip("mcp")

from agriradar import tool_server  # noqa: E402
from agriradar.formats import write_point_cloud, write_tensor  # noqa: E402
from agriradar.scene_sim import SemanticPointCloud  # noqa: E402
from agriradar.sparse_grid import SparseVoxelTensor  # noqa: E402


def test_evaluate_clouds(tmp_path, rng):
    cloud = SemanticPointCloud(rng.uniform(0, 10, (20, 3)), rng.integers(1, 5, 20))
    path = write_point_cloud(tmp_path / "c.txt", cloud)
    table = tool_server.evaluate_clouds(str(path), str(path), [0.5])
    assert "tau=0.5m" in table


def test_evaluate_clouds_reports_errors(tmp_path):
    assert tool_server.evaluate_clouds(str(tmp_path / "a.txt"), str(tmp_path / "b.txt")).startswith("ERROR")


def test_describe_tensor(tmp_path, small_grid):
    tensor = SparseVoxelTensor.from_keys(small_grid, np.array([1, 5, 9]), np.ones((3, 2)))
    info = json.loads(tool_server.describe_tensor(str(write_tensor(tmp_path / "t.svxt", tensor))))
    assert info["rows"] == 3 and info["channels"] == 2


def test_radar_resolution_defaults():
    info = json.loads(tool_server.radar_resolution())
    assert info["cube_dims"] == [166, 94, 177]
    assert info["range_resolution_m"] > 0
    assert info["azimuth_resolution_deg"] > 0


def test_radar_resolution_bad_config(tmp_path):
    assert tool_server.radar_resolution(str(tmp_path / "none.yaml")).startswith("ERROR")


def test_help_lists_tools():
    text = tool_server.help()
    for name in ("evaluate_clouds", "describe_tensor", "radar_resolution"):
        assert name in text
