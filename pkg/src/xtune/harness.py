"""Closed-loop experiment runner, summary metrics and output files.

One run drives the surrogate vehicle around the double-lane-change course
with the NMPC, and every ``N`` steps hands the last window to the configured
tuner. Random streams are derived from ``(seed, kind, update, rollout)`` so
that a run is fully determined by its config and seed.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from .config import ScenarioConfig
from .dynamics import PlantState
from .nmpc import WEIGHT_NAMES, NmpcController, NmpcWeights, SolverFailure, VehicleModel
from .path import CartesianPose, PathError, ReferencePath, build_dlc_path, maneuver_index
from .simulate import LoopState, PerformanceWindow, StepRecord, closed_loop_step, xdt_rollout
from .tuner import OnlineTuner, ParamVector, performance_metric

log = logging.getLogger(__name__)

# stream kinds for make_rng
REAL, ROLLOUT, NOISE, SPSA = 1, 2, 3, 4

TRACE_FIELDS = ("t", "X", "Y", "psi", "vx", "vy", "r", "s", "w", "theta", "delta", "tr",
                "j_opt", "sqp_iters", "qp_iters", "solve_time", "status")


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the stream ``key`` under the master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def inject_measurement_noise(h, snr_db: float, rng, groups: int = 3) -> np.ndarray:
    """Add Gaussian noise at ``snr_db`` to each of ``groups`` equal channel blocks.

    The noise variance of a block is its mean square divided by
    ``10**(snr_db/10)``; all-zero blocks stay noise free. ``snr_db = inf``
    returns ``h`` unchanged.
    """
    h = np.array(h, dtype=float)
    if math.isnan(snr_db):
        raise ValueError("snr_db must not be NaN")
    if math.isinf(snr_db) and snr_db > 0:
        return h
    if h.size % groups:
        raise ValueError(f"length {h.size} does not split into {groups} groups")
    out = h.copy()
    for blk in np.split(np.arange(h.size), groups):
        power = float(np.mean(h[blk] ** 2))
        if power == 0.0:
            continue
        std = math.sqrt(power / 10.0 ** (snr_db / 10.0))
        out[blk] += std * rng.standard_normal(blk.size)
    return out


def empirical_snr_db(clean, noisy) -> float:
    clean = np.asarray(clean, dtype=float)
    noise = np.asarray(noisy, dtype=float) - clean
    return 10.0 * math.log10(np.mean(clean ** 2) / np.mean(noise ** 2))


@dataclass
class TraceRow:
    rec: StepRecord
    theta: tuple
    update_flag: str = "none"


@dataclass
class SummaryReport:
    tuner_kind: str
    steps: int
    window_v_inf: list
    window_w_inf: list
    maneuver_peak_w: list
    v_reduction_pct: float
    w_reduction_pct: float
    maneuver_w_reduction_pct: float
    final_theta: list
    updates: int
    accepted_updates: int
    runtime_s: float
    status_counts: dict
    aborted: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunLog:
    config: ScenarioConfig
    rows: list = field(default_factory=list)
    updates: list = field(default_factory=list)
    param_names: tuple = ()
    runtime_s: float = 0.0
    aborted: str = ""
    summary: SummaryReport | None = None


def _reduction(first: float, last: float) -> float:
    if first == 0.0:
        return 0.0
    return 100.0 * (1.0 - last / first)


def summarize(runlog: RunLog) -> SummaryReport:
    """Per-window infinity norms, per-maneuver peaks and first-vs-last reductions.

    Only complete windows are scored. Reductions with a zero first value are
    reported as 0.
    """
    rows = runlog.rows
    if not rows:
        raise ValueError("empty run log")
    cfg = runlog.config
    N = cfg.N
    v = np.array([r.rec.v_err for r in rows])
    w = np.array([r.rec.vehicle.w for r in rows])
    s = np.array([r.rec.vehicle.s for r in rows])
    n_win = len(rows) // N
    v_inf = [float(np.abs(v[i * N:(i + 1) * N]).max()) for i in range(n_win)]
    w_inf = [float(np.abs(w[i * N:(i + 1) * N]).max()) for i in range(n_win)]
    man = maneuver_index(s, cfg.dlc)
    peaks = [float(np.abs(w[man == m]).max()) for m in range(cfg.dlc.repeats) if np.any(man == m)]
    statuses: dict = {}
    for r in rows:
        statuses[r.rec.status] = statuses.get(r.rec.status, 0) + 1
    return SummaryReport(
        tuner_kind=cfg.tuner.kind, steps=len(rows), window_v_inf=v_inf, window_w_inf=w_inf,
        maneuver_peak_w=peaks,
        v_reduction_pct=_reduction(v_inf[0], v_inf[-1]) if v_inf else 0.0,
        w_reduction_pct=_reduction(w_inf[0], w_inf[-1]) if w_inf else 0.0,
        maneuver_w_reduction_pct=_reduction(peaks[0], peaks[-1]) if peaks else 0.0,
        final_theta=list(rows[-1].theta),
        updates=len(runlog.updates),
        accepted_updates=sum(1 for u in runlog.updates if u.get("accepted")),
        runtime_s=runlog.runtime_s, status_counts=statuses, aborted=runlog.aborted)


def initial_state(path: ReferencePath, speed: float) -> PlantState:
    pt = path.query(0.0)
    return PlantState(CartesianPose(pt.X_c, pt.Y_c, pt.psi_c), (speed, 0.0, 0.0), 0.0, 0.0)


def _weights_with(base: NmpcWeights, names, values) -> NmpcWeights:
    return base.with_entries(names, [float(x) for x in values])


def _energy_rows(rows, idx):
    return np.array([r.rec.energy for r in rows])[:, idx]


def _post_deploy(update: dict, before, after, idx, floor) -> None:
    """Second energy check: incumbent weighting on the windows before and after deployment."""
    theta = np.maximum(np.asarray(update["theta_before"]), floor)
    v_before = float(np.mean(np.sum(_energy_rows(before, idx) ** 2 * theta, axis=1)))
    if after:
        v_after = float(np.mean(np.sum(_energy_rows(after, idx) ** 2 * theta, axis=1)))
        flag = v_after <= v_before
    else:
        v_after, flag = None, None
    update["post_deploy"] = {"v_before": v_before, "v_after": v_after, "rows_after": len(after),
                             "non_increasing": flag}


def run_closed_loop(cfg: ScenarioConfig, progress=None) -> RunLog:
    """Run one scenario end to end.

    Starts at the path origin at the entry speed with unit weights, updates
    the tuned weights every ``N`` steps (unless the tuner kind is ``none``)
    and stops at the end of the path. A diverging plant or a persistent NMPC
    failure ends the run early with ``aborted`` set.
    """
    t_start = time.perf_counter()
    path = build_dlc_path(cfg.dlc, cfg.sample_spacing)
    model = VehicleModel(cfg.model, path, cfg.Ts)
    tcfg = cfg.tuner
    names = tuple(tcfg.params)
    weights = NmpcWeights()
    theta = ParamVector(weights.as_vector()[[WEIGHT_NAMES.index(n) for n in names]],
                        np.full(len(names), tcfg.low), np.full(len(names), tcfg.high), names)
    tuner = OnlineTuner(tcfg, cfg.N, theta) if tcfg.kind != "none" else None
    controller = NmpcController(model, weights, cfg.nmpc)
    ls = LoopState(initial_state(path, cfg.dlc.entry_speed), np.zeros(2), 0.0, 0.0, controller)
    real_rng = make_rng(cfg.seed, REAL)
    params = cfg.plant.nominal
    runlog = RunLog(config=cfg, param_names=names)
    end_s = path.total_length - 1.0
    snapshot = ls.snapshot()
    window_start = 0
    pending_flag = "none"
    last_update = None
    step = 0
    while True:
        try:
            rec = closed_loop_step(ls, path, cfg.plant, params, cfg.Ts, real_rng)
        except (SolverFailure, dyn.DivergenceError, PathError) as exc:
            runlog.aborted = f"{type(exc).__name__} at t={ls.t:.2f}s: {exc}"
            log.error("run aborted: %s", runlog.aborted)
            break
        runlog.rows.append(TraceRow(rec, tuple(float(x) for x in theta.values), pending_flag))
        pending_flag = "none"
        step += 1
        if rec.vehicle.s >= end_s:
            break
        if step - window_start < cfg.N:
            continue
        window_rows = runlog.rows[window_start:step]
        if last_update is not None:
            _post_deploy(last_update, prev_rows, window_rows, tuner.idx, tcfg.energy_floor)
        if tuner is not None:
            k = tuner.updates
            real = PerformanceWindow.from_rows([r.rec for r in window_rows])
            h = performance_metric(real, tcfg.j_threshold, N=cfg.N)
            h = inject_measurement_noise(h, cfg.snr_db, make_rng(cfg.seed, NOISE, k))
            base_w = controller.weights
            snap = snapshot

            def rollout(values, j, k=k, snap=snap, base_w=base_w):
                key = (ROLLOUT, k) if tcfg.common_random_numbers else (ROLLOUT, k, j)
                return xdt_rollout(snap.plant, _weights_with(base_w, names, values), path,
                                   cfg.plant, cfg.N, cfg.Ts, make_rng(cfg.seed, *key),
                                   snap.controller, u_prev=snap.u_prev, randomize=tcfg.randomize,
                                   t0=snap.t, s_guess=snap.s_guess)

            theta, urec = tuner.update(h, real, rollout, make_rng(cfg.seed, SPSA, k))
            urec["t"] = round(ls.t, 10)
            urec["step"] = step
            runlog.updates.append(urec)
            pending_flag = ("aborted" if urec["aborted"] else
                            "accepted" if urec["accepted"] else "rejected")
            controller.weights = _weights_with(controller.weights, names, theta.values)
            last_update = urec
            prev_rows = window_rows
            if progress:
                progress(urec)
        window_start = step
        snapshot = ls.snapshot()
    if last_update is not None:
        _post_deploy(last_update, prev_rows, runlog.rows[window_start:], tuner.idx,
                     tcfg.energy_floor)
    runlog.runtime_s = time.perf_counter() - t_start
    runlog.summary = summarize(runlog) if runlog.rows else None
    return runlog


# -- output files ---------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_trace(runlog: RunLog, filename) -> None:
    p = len(runlog.param_names)
    header = list(TRACE_FIELDS) + [f"theta_{i}" for i in range(p)] + ["update_flag"]
    with open(filename, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in runlog.rows:
            r = row.rec
            c = r.plant.cart
            x = r.vehicle
            wr.writerow([_fmt(v) for v in (
                r.t, c.X, c.Y, c.psi, x.vx, x.vy, x.r, x.s, x.w, x.theta, r.u.delta, r.u.tr,
                r.j_opt, r.sqp_iters, r.qp_iters, r.solve_time, r.status, *row.theta,
                row.update_flag)])


def read_trace(filename) -> list[dict]:
    with open(filename, newline="") as fh:
        return list(csv.DictReader(fh))


def write_run(runlog: RunLog, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trace(runlog, out / "trace.csv")
    (out / "updates.json").write_text(json.dumps(_json_safe(runlog.updates), indent=1) + "\n")
    summary = runlog.summary.to_dict() if runlog.summary else {"aborted": runlog.aborted}
    summary["param_names"] = list(runlog.param_names)
    summary["seed"] = runlog.config.seed
    summary["snr_db"] = runlog.config.snr_db if math.isfinite(runlog.config.snr_db) else None
    summary["window_seconds"] = runlog.config.window_seconds
    (out / "summary.json").write_text(json.dumps(_json_safe(summary), indent=1) + "\n")
    return out


def load_summary(run_dir) -> dict:
    path = Path(run_dir) / "summary.json"
    if not path.is_file():
        raise FileNotFoundError(f"no summary.json in {run_dir}")
    return json.loads(path.read_text())
