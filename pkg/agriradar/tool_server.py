"""MCP server exposing evaluation and file inspection tools to agents (stdio only)."""

import argparse
import json
import math
from typing import Optional

from mcp.server.fastmcp import FastMCP

from .config import load_config
from .errors import AgriRadarError
from .formats import describe_file, read_point_cloud
from .metrics import DEFAULT_TAUS
from .metrics import evaluate_clouds as _evaluate_clouds
from .metrics import format_table
from .radar import angular_resolution, range_resolution

mcp = FastMCP("agriradar")


@mcp.tool()
def evaluate_clouds(pred_path: str, gt_path: str, taus: Optional[list[float]] = None) -> str:
    """Score a predicted point-cloud file against a ground-truth file.

    Both files use the text format ``x y z label`` (one point per line).
    Returns a table of TP/FP/FN, Chamfer distance, precision, recall, IoU,
    per-class IoU and mIoU at each threshold (meters, default 0.25 and 0.5).
    """
    try:
        records = _evaluate_clouds(read_point_cloud(pred_path), read_point_cloud(gt_path),
                                   tuple(taus) if taus else DEFAULT_TAUS)
    except AgriRadarError as e:
        return f"ERROR: {e}"
    return format_table(records)


@mcp.tool()
def describe_tensor(path: str) -> str:
    """Summarize the header of a sparse voxel tensor (.svxt) or spherical cube (.scub) file."""
    try:
        return json.dumps(describe_file(path), indent=2)
    except AgriRadarError as e:
        return f"ERROR: {e}"


@mcp.tool()
def radar_resolution(config_path: Optional[str] = None) -> str:
    """Range and angular resolution of the radar described by a config file (defaults if omitted)."""
    try:
        radar = load_config(config_path).radar
    except AgriRadarError as e:
        return f"ERROR: {e}"
    return json.dumps({
        "range_resolution_m": range_resolution(radar),
        "azimuth_resolution_deg": math.degrees(angular_resolution(radar, "azimuth")),
        "elevation_resolution_deg": math.degrees(angular_resolution(radar, "elevation")),
        "cube_dims": list(radar.dims),
    }, indent=2)


@mcp.tool()
def help() -> str:
    """Show the available tools and file formats."""
    return """=== agriradar tools ===

TOOLS:
  evaluate_clouds(pred_path, gt_path, taus) - Metric table for two point-cloud files.
  describe_tensor(path)                     - Header summary of a .svxt or .scub file.
  radar_resolution(config_path)             - Range/angular resolution for a config.
  help()                                    - This help text.

FILES:
  *.txt   point clouds, "# x y z label" header, labels 0 free 1 ground 2 tree 3 pole 4 wire
  *.svxt  sparse voxel tensors (RCC, RPC, Stage-I input, targets)
  *.scub  spherical radar cubes (range x elevation x azimuth power)
"""


def main():
    """Entry point for the MCP server."""
    parser = argparse.ArgumentParser(description="agriradar MCP tool server (stdio)")
    parser.parse_args()
    mcp.run(transport="stdio")


if __name__ == "__main__":
    main()
