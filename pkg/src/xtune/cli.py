"""Command line interface.

    xtune run --config default.ini --tuner ukf --seed 3 --out runs/ukf
    xtune report runs/ukf
    xtune compare runs/none runs/ukf runs/spsa runs/ukf_spsa
    xtune plot runs/ukf

Exit codes: 0 success, 1 configuration or input error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import shutil
import sys
from pathlib import Path

from . import plot_template
from .config import TUNER_KINDS, ConfigError, load_config
from .harness import load_summary, read_trace, run_closed_loop, write_run

log = logging.getLogger("xtune")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; map that to the config code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xtune", description="Online NMPC weight tuning on a simulated vehicle.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one closed-loop scenario")
    run.add_argument("--config", type=Path, default=None,
                     help="INI config file (default: the shipped default.ini)")
    run.add_argument("--tuner", choices=TUNER_KINDS, default=None,
                     help="override the tuner kind from the config")
    run.add_argument("--seed", type=int, default=None, help="override the seed")
    run.add_argument("--snr-db", type=float, default=None, help="output noise level on h")
    run.add_argument("--out", type=Path, required=True, help="output directory")

    rep = sub.add_parser("report", help="print the summary of a run directory")
    rep.add_argument("run_dir", type=Path)

    cmp_ = sub.add_parser("compare", help="tabulate summaries of several runs")
    cmp_.add_argument("run_dirs", type=Path, nargs="+")
    cmp_.add_argument("--csv", action="store_true", help="comma-separated output")

    plot = sub.add_parser("plot", help="write plot data, a plotting script and PNG figures")
    plot.add_argument("run_dir", type=Path)
    plot.add_argument("--out", type=Path, default=None, help="figure directory (default: run dir)")
    plot.add_argument("--no-render", action="store_true", help="only write data and script")
    return p


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.tuner is not None:
        cfg = cfg.with_tuner(kind=args.tuner)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.snr_db is not None:
        cfg = cfg.replace(snr_db=args.snr_db)

    def progress(u):
        log.info("update %d at t=%.1fs: %s -> %s (%s)", u["update"], u["t"],
                 _vec(u["theta_before"]), _vec(u["theta_after"]),
                 "aborted" if u["aborted"] else "accepted" if u["accepted"] else "rejected")

    runlog = run_closed_loop(cfg, progress=progress)
    out = write_run(runlog, args.out)
    print(f"wrote {out}")
    if runlog.summary is not None:
        _print_summary(runlog.summary.to_dict())
    if runlog.aborted:
        log.error("run aborted: %s", runlog.aborted)
        return EXIT_RUNTIME
    return EXIT_OK


def _vec(v) -> str:
    return "(" + ", ".join(f"{x:.3g}" for x in v) + ")"


def _print_summary(s: dict) -> None:
    print(f"tuner          {s['tuner_kind']}")
    print(f"steps          {s['steps']}  runtime {s['runtime_s']:.1f} s")
    print("window |v_err|  " + " ".join(f"{x:.3f}" for x in s["window_v_inf"]))
    print("window |w|      " + " ".join(f"{x:.3f}" for x in s["window_w_inf"]))
    print("maneuver peak w " + " ".join(f"{x:.3f}" for x in s["maneuver_peak_w"]))
    print(f"velocity error reduction {s['v_reduction_pct']:.1f} %")
    print(f"path peak reduction      {s['maneuver_w_reduction_pct']:.1f} %")
    print(f"final weights  {_vec(s['final_theta'])}  updates {s['updates']} "
          f"(accepted {s['accepted_updates']})")
    if s.get("aborted"):
        print(f"aborted        {s['aborted']}")


def _cmd_report(args) -> int:
    _print_summary(load_summary(args.run_dir))
    return EXIT_OK


COMPARE_COLUMNS = ("run", "tuner", "v_first", "v_last", "v_red_%", "peak_first", "peak_last",
                   "peak_red_%", "final_theta", "updates", "runtime_s")


def compare_rows(run_dirs) -> list[dict]:
    rows = []
    for d in run_dirs:
        s = load_summary(d)
        v, pk = s["window_v_inf"], s["maneuver_peak_w"]
        rows.append({"run": str(d), "tuner": s["tuner_kind"],
                     "v_first": v[0] if v else float("nan"), "v_last": v[-1] if v else float("nan"),
                     "v_red_%": s["v_reduction_pct"],
                     "peak_first": pk[0] if pk else float("nan"),
                     "peak_last": pk[-1] if pk else float("nan"),
                     "peak_red_%": s["maneuver_w_reduction_pct"],
                     "final_theta": _vec(s["final_theta"]), "updates": s["updates"],
                     "runtime_s": s["runtime_s"]})
    return rows


def _cell(x) -> str:
    return f"{x:.3f}" if isinstance(x, float) else str(x)


def _cmd_compare(args) -> int:
    rows = compare_rows(args.run_dirs)
    if args.csv:
        buf = io.StringIO()
        wr = csv.DictWriter(buf, fieldnames=COMPARE_COLUMNS, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: _cell(v) for k, v in r.items()})
        sys.stdout.write(buf.getvalue())
        return EXIT_OK
    table = [list(COMPARE_COLUMNS)] + [[_cell(r[c]) for c in COMPARE_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(COMPARE_COLUMNS))]
    for row in table:
        print("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return EXIT_OK


def write_plot_data(run_dir: Path, out_dir: Path) -> list[Path]:
    """Per-step and per-window data files plus a standalone plotting script."""
    rows = read_trace(run_dir / "trace.csv")
    summary = load_summary(run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    theta_cols = [k for k in rows[0] if k.startswith("theta_")]
    step_file = out_dir / "plot_steps.csv"
    with open(step_file, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t", "vx", "w", "delta", "tr", "j_opt", *theta_cols, "update_flag"])
        for r in rows:
            wr.writerow([r["t"], r["vx"], r["w"], r["delta"], r["tr"], r["j_opt"],
                         *(r[c] for c in theta_cols), r["update_flag"]])
    win_file = out_dir / "plot_windows.csv"
    with open(win_file, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["window", "v_inf", "w_inf"])
        for i, (v, w) in enumerate(zip(summary["window_v_inf"], summary["window_w_inf"])):
            wr.writerow([i, repr(v), repr(w)])
    script = out_dir / "plot_run.py"
    shutil.copyfile(plot_template.__file__, script)
    return [step_file, win_file, script]


def _cmd_plot(args) -> int:
    out = args.out or args.run_dir
    files = write_plot_data(args.run_dir, out)
    if not args.no_render:
        files += plot_template.main(args.run_dir, out)
    for f in files:
        print(f)
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "report": _cmd_report, "compare": _cmd_compare, "plot": _cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, NotADirectoryError, KeyError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure of the simulation itself
        log.exception("runtime failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
