"""
SVG renderings of run outputs; uses the Agg backend so no display is needed
"""
import json
import logging
import os
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .experiment import load_manifest  # noqa: E402
from .observability import load_trajectory  # noqa: E402
from .utils import FormatError, PathLike  # noqa: E402

logger = logging.getLogger(__name__)


def _require_columns(frame: pd.DataFrame, columns: List[str], source: str) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise FormatError("%s is missing column(s): %s" % (source, ", ".join(missing)))


def plot_error_vs_time(kf_csv: PathLike, out_path: PathLike, title: str = "") -> None:
    frame = pd.read_csv(kf_csv)
    _require_columns(frame, ["time", "trace_sigma", "recon_mse"], str(kf_csv))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(frame["time"], frame["trace_sigma"], label="trace of error covariance")
    if frame["recon_mse"].notna().any():
        ax.semilogy(frame["time"], frame["recon_mse"], label="reconstruction MSE")
    ax.set_xlabel("time")
    ax.set_ylabel("error")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_sampling_rate(sweep_csv: PathLike, out_path: PathLike, tail: int = 20) -> None:
    """
    Steady error against sampling rate (1 / sampling_dt) on log axes, one line per remaining
    sweep axis combination
    """
    frame = pd.read_csv(sweep_csv)
    _require_columns(frame, ["point", "sampling_dt", "step", "recon_mse"], str(sweep_csv))
    steady = frame.groupby("point", sort=False).tail(tail).groupby("point", sort=False)
    rows = steady.agg(sampling_dt=("sampling_dt", "first"), recon_mse=("recon_mse", "mean"))
    others = [c for c in frame.columns if c not in ("point", "sampling_dt", "step", "time", "trace_sigma", "recon_mse")]
    if others:
        labels = frame.groupby("point", sort=False)[others].first().astype(str).agg(", ".join, axis=1)
    else:
        labels = pd.Series("", index=rows.index)
    rows = rows.assign(label=labels)

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, group in rows.groupby("label", sort=False):
        group = group.sort_values("sampling_dt", ascending=False)
        ax.loglog(1.0 / group["sampling_dt"], group["recon_mse"], marker="o", label=label or None)
    ax.set_xlabel("sampling rate (1 / sampling_dt)")
    ax.set_ylabel("steady reconstruction MSE")
    if others:
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_trajectory(point_dir: PathLike, out_path: PathLike) -> None:
    """
    Sensor paths over the grid (valid cells shaded for masked grids), one arrow per move
    """
    traj = load_trajectory(os.path.join(point_dir, "trajectory.json"))
    with open(os.path.join(point_dir, "geometry.json"), encoding="utf-8") as f:
        geometry = json.load(f)
    if "shape" not in geometry:
        raise FormatError("geometry.json has no grid shape")
    rows, cols = geometry["shape"]
    if "cells" in geometry:
        cells = np.asarray(geometry["cells"], dtype=int).reshape(-1, 2)
    else:
        cells = np.column_stack(np.divmod(np.arange(rows * cols), cols))

    fig, ax = plt.subplots(figsize=(6, 6 * max(rows, 1) / max(cols, 1) + 1))
    valid = np.zeros((rows, cols))
    valid[cells[:, 0], cells[:, 1]] = 1
    ax.imshow(valid, cmap="Blues", vmin=0, vmax=2, origin="upper", aspect="auto")
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for sensor in range(traj.k):
        path = cells[traj.sensor_path(sensor)]
        color = colors[sensor % len(colors)]
        ax.plot(path[:, 1], path[:, 0], "o", color=color, label="sensor %d" % sensor)
        for t in range(traj.period_l):
            start, end = path[t], path[(t + 1) % traj.period_l]
            if np.array_equal(start, end):
                continue
            ax.annotate(
                "",
                xy=(end[1], end[0]),
                xytext=(start[1], start[0]),
                arrowprops={"arrowstyle": "->", "color": color},
            )
    ax.set_xlabel("column")
    ax.set_ylabel("row")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def emit_plots(run_dir: PathLike) -> List[str]:
    """
    Render every plot the run's files support.

    Returns:
        paths of the written SVG files

    Raises:
        FormatError: a CSV lacks a required column
    """
    manifest = load_manifest(run_dir)
    written = []
    for point in manifest["points"]:
        if point.get("status") != "ok":
            continue
        point_dir = os.path.join(run_dir, point["dir"])
        kf_csv = os.path.join(point_dir, "kf_run.csv")
        if os.path.exists(kf_csv):
            out = os.path.join(point_dir, "error_vs_time.svg")
            plot_error_vs_time(kf_csv, out, title=point["key"])
            written.append(out)
        if os.path.exists(os.path.join(point_dir, "trajectory.json")):
            out = os.path.join(point_dir, "trajectory.svg")
            plot_trajectory(point_dir, out)
            written.append(out)

    sweep_csv = os.path.join(run_dir, "sweep.csv")
    if os.path.exists(sweep_csv) and "sampling_dt" in manifest["config"].get("sweep", {}):
        out = os.path.join(run_dir, "sampling_rate.svg")
        plot_sampling_rate(sweep_csv, out)
        written.append(out)
    logger.info("wrote %d plots under %s", len(written), run_dir)
    return written
