"""Plot a run directory written by ``xtune run``.

Standalone: needs only numpy and matplotlib. Usage::

    python plot_run.py <run-dir> [<out-dir>]

Reads ``trace.csv`` (and ``summary.json`` if present) and writes PNG figures.
"""

import csv
import json
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def load_trace(run_dir):
    with open(Path(run_dir) / "trace.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError("empty trace")
    cols = {}
    for key in rows[0]:
        if key in ("status", "update_flag"):
            cols[key] = np.array([r[key] for r in rows])
        else:
            cols[key] = np.array([float(r[key]) for r in rows])
    return cols


def _update_marks(ax, tr):
    for t in tr["t"][tr["update_flag"] == "accepted"]:
        ax.axvline(t, color="tab:green", lw=0.6, alpha=0.6)
    for t in tr["t"][tr["update_flag"] == "rejected"]:
        ax.axvline(t, color="tab:red", lw=0.6, ls=":", alpha=0.6)


def plot_tracking(tr, v_ref, out):
    fig, axes = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    axes[0].plot(tr["t"], tr["vx"] - v_ref, lw=0.9)
    axes[0].set_ylabel("velocity error [m/s]")
    axes[1].plot(tr["t"], tr["w"], lw=0.9, color="tab:orange")
    axes[1].set_ylabel("lateral deviation w [m]")
    axes[1].set_xlabel("t [s]")
    for ax in axes:
        _update_marks(ax, tr)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)


def plot_weights(tr, out):
    names = sorted((k for k in tr if k.startswith("theta_")), key=lambda k: int(k.split("_")[1]))
    fig, ax = plt.subplots(figsize=(8, 3))
    for k in names:
        ax.step(tr["t"], tr[k], where="post", label=k)
    ax.set_yscale("log")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("tuned weight")
    ax.legend(loc="best")
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)


def plot_windows(summary, out):
    v = summary.get("window_v_inf", [])
    w = summary.get("window_w_inf", [])
    k = np.arange(len(v))
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.bar(k - 0.2, v, width=0.4, label="|v err|_inf [m/s]")
    ax.bar(k + 0.2, w, width=0.4, label="|w|_inf [m]")
    ax.set_xlabel("window")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)


def plot_path(tr, out):
    fig, ax = plt.subplots(figsize=(9, 2.5))
    ax.plot(tr["X"], tr["Y"], lw=0.9)
    ax.set_xlabel("X [m]")
    ax.set_ylabel("Y [m]")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)


def main(run_dir, out_dir=None, v_ref=None):
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    tr = load_trace(run_dir)
    summary = {}
    if (run_dir / "summary.json").is_file():
        summary = json.loads((run_dir / "summary.json").read_text())
    if v_ref is None:
        v_ref = summary.get("v_ref", 80.0 / 3.6)
    written = []
    for name, fn, args in (("tracking.png", plot_tracking, (tr, v_ref)),
                           ("weights.png", plot_weights, (tr,)),
                           ("path.png", plot_path, (tr,)),
                           ("windows.png", plot_windows, (summary,))):
        fn(*args, out_dir / name)
        written.append(out_dir / name)
    return written


if __name__ == "__main__":
    if len(sys.argv) < 2:
        sys.exit(__doc__)
    for p in main(*sys.argv[1:3]):
        print(p)
