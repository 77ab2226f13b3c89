"""CSV exports (pandas) and optional static figures (matplotlib) for a SimulationLog."""
import json
import logging
import os

import numpy as np
import pandas as pd

from error_bound import error_traces

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ["t", "time", "robot_id", "x", "y", "psi", "v", "a_or_v_cmd", "delta",
                      "min_neighbor_dist", "nmpc_status", "stage_cost"]
TIMING_COLUMNS = ["robot_id", "nmpc_avg", "nmpc_max", "ca_avg", "ca_max", "centralized_avg",
                  "centralized_max", "total_avg"]
COST_COLUMNS = ["robot_id", "closed_loop_cost"]
PAIR_COLUMNS = ["t", "robot_i", "robot_j", "distance", "ca_objective", "ca_infeasible"]
ERROR_COLUMNS = ["t", "robot_i", "robot_j", "dist_pi", "dist_pj", "true_dist", "e_predict", "bound",
                 "bound_formula", "trivial_bound", "c_i", "c_j", "alpha_i", "alpha_j", "ratio_i", "ratio_j"]


def _frame(rows, columns):
    return pd.DataFrame(rows).reindex(columns=columns)


def trajectory_table(log):
    return _frame(log.trajectory_rows, TRAJECTORY_COLUMNS)


def timing_table(log):
    """Per-robot average and worst solve times, one row per robot plus a total row"""
    timings = pd.DataFrame(log.timing_rows, columns=["t", "robot_id", "kind", "seconds"])
    steps = max(log.steps_completed, 1)
    # Several CA solves of one robot in one step count as one CA step
    per_step = timings.groupby(["t", "robot_id", "kind"], as_index=False)["seconds"].sum()

    rows = []
    robot_ids = sorted({row["robot_id"] for row in log.trajectory_rows})
    for robot_id in robot_ids:
        mine = per_step[per_step["robot_id"] == robot_id]
        nmpc = mine[mine["kind"] == "nmpc"]["seconds"]
        ca = mine[mine["kind"] == "ca"]["seconds"]
        rows.append({
            "robot_id": robot_id,
            "nmpc_avg": nmpc.mean() if len(nmpc) else np.nan,
            "nmpc_max": nmpc.max() if len(nmpc) else np.nan,
            "ca_avg": ca.sum() / steps if log.mode == "distributed" else np.nan,
            "ca_max": ca.max() if len(ca) else (0.0 if log.mode == "distributed" else np.nan),
        })
    table = pd.DataFrame(rows)

    central = per_step[per_step["kind"] == "centralized"]["seconds"]
    if log.mode == "centralized":
        total = {"robot_id": "total", "centralized_avg": central.mean() if len(central) else np.nan,
                 "centralized_max": central.max() if len(central) else np.nan}
        total["total_avg"] = total["centralized_avg"]
    else:
        table["total_avg"] = table["nmpc_avg"] + table["ca_avg"]
        total = {"robot_id": "total", "total_avg": table["total_avg"].mean()}
    table = pd.concat([table, pd.DataFrame([total])], ignore_index=True)
    return table.reindex(columns=TIMING_COLUMNS)


def cost_table(log):
    """Closed-loop cost per robot, with the team total and the per-robot average"""
    trajectories = trajectory_table(log)
    sums = trajectories.groupby("robot_id")["stage_cost"].sum(min_count=0)
    table = pd.DataFrame({"robot_id": sums.index, "closed_loop_cost": sums.values})
    extra = pd.DataFrame([{"robot_id": "total", "closed_loop_cost": float(sums.sum())},
                          {"robot_id": "avg", "closed_loop_cost": float(sums.mean())}])
    return pd.concat([table, extra], ignore_index=True).reindex(columns=COST_COLUMNS)


def total_closed_loop_cost(log):
    return float(trajectory_table(log)["stage_cost"].sum())


def _save(frame, out_dir, name, written):
    path = os.path.join(out_dir, name)
    frame.to_csv(path, index=False)
    written[name] = path


def export_outputs(log, out_dir, figures=False):
    """Write every CSV for a run into out_dir; returns {file name: path}"""
    if not log.trajectory_rows:
        raise ValueError("Nothing to export: the simulation log is empty")
    os.makedirs(out_dir, exist_ok=True)
    written = {}

    trajectories = trajectory_table(log)
    _save(trajectories, out_dir, "trajectories.csv", written)
    _save(timing_table(log), out_dir, "timings.csv", written)
    _save(cost_table(log), out_dir, "costs.csv", written)
    if log.error_rows:
        _save(_frame(log.error_rows, ERROR_COLUMNS), out_dir, "error_trace.csv", written)

    # Plot-ready slices
    _save(trajectories[["t", "time", "robot_id", "x", "y", "psi", "v"]], out_dir, "plot_states.csv", written)
    _save(trajectories[["t", "time", "robot_id", "a_or_v_cmd", "delta"]], out_dir, "plot_inputs.csv", written)
    _save(_frame(log.pair_rows, PAIR_COLUMNS), out_dir, "plot_pair_distances.csv", written)
    if log.error_rows:
        errors = _frame(log.error_rows, ERROR_COLUMNS)
        _save(errors[["t", "robot_i", "robot_j", "e_predict", "bound", "trivial_bound"]], out_dir,
              "plot_error_bound.csv", written)
        _save(errors[["t", "robot_i", "robot_j", "ratio_i", "ratio_j"]], out_dir, "plot_alpha_ratio.csv", written)

    failed_path = os.path.join(out_dir, "failed_solves.json")
    with open(failed_path, 'w') as f:
        json.dump({"failed_solves": log.failures}, f, indent=2, default=str)
    written["failed_solves.json"] = failed_path

    if figures:
        written.update(render_figures(log, out_dir))

    logger.info(f"Wrote {len(written)} files to '{out_dir}'")
    return written


def render_figures(log, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = {}
    trajectories = trajectory_table(log)

    fig, ax = plt.subplots(figsize=(12, 6))
    for robot_id, path in trajectories.groupby("robot_id"):
        ax.plot(path["x"], path["y"], label=f"robot {robot_id}")
    ax.set_title(f"Paths ({log.scenario}, {log.mode})", pad=20)
    ax.set_xlabel('x (m)')
    ax.set_ylabel('y (m)')
    ax.grid(True, linestyle='--', alpha=0.7)
    ax.legend()
    plt.tight_layout()
    written["paths.png"] = os.path.join(out_dir, "paths.png")
    fig.savefig(written["paths.png"])
    plt.close(fig)

    columns = [c for c in ("y", "psi", "v", "a_or_v_cmd", "delta") if trajectories[c].notna().any()]
    fig, axes = plt.subplots(len(columns), 1, figsize=(10, 2.5 * len(columns)), sharex=True)
    for ax, column in zip(np.atleast_1d(axes), columns):
        for robot_id, path in trajectories.groupby("robot_id"):
            ax.plot(path["time"], path[column], label=f"robot {robot_id}")
        ax.set_ylabel(column)
        ax.grid(True, linestyle='--', alpha=0.7)
    np.atleast_1d(axes)[-1].set_xlabel('time (s)')
    plt.tight_layout()
    written["states.png"] = os.path.join(out_dir, "states.png")
    fig.savefig(written["states.png"])
    plt.close(fig)

    if log.error_rows:
        fig, ax = plt.subplots(figsize=(10, 6))
        for (i, j), trace in error_traces(log.error_rows).items():
            time = trace.column("t") * log.dt
            ax.plot(time, trace.column("e_predict"), label=f"prediction error {i}-{j}")
            ax.plot(time, trace.column("bound"), linestyle='--', label=f"bound {i}-{j}")
        ax.set_xlabel('time (s)')
        ax.set_ylabel('distance error (m)')
        ax.grid(True, linestyle='--', alpha=0.7)
        ax.legend()
        plt.tight_layout()
        written["error_bound.png"] = os.path.join(out_dir, "error_bound.png")
        fig.savefig(written["error_bound.png"])
        plt.close(fig)

    return written
