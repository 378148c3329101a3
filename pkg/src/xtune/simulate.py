"""Closed-loop stepping shared by the "real" vehicle loop and xDT rollouts.

Both loops run the exact same :func:`closed_loop_step`, so a rollout from a
recorded snapshot with the deployed weights and an unperturbed plant replays
the recorded window.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .dynamics import ControlInput, PlantConfig, PlantState, SingleTrackParams, VehicleState
from .nmpc import NmpcController, NmpcWeights, SolverFailure
from .path import (CurvilinearPose, PathError, ReferencePath, cart_to_curvilinear,
                   curvilinear_to_cart)

log = logging.getLogger(__name__)

ENERGY_DIM = 10  # state errors (6), inputs (2), input rates as penalized by S (2)


@dataclass
class PerformanceWindow:
    """Raw tracking data of ``N`` consecutive control steps."""

    v_err: np.ndarray
    w_dev: np.ndarray
    j_opt: np.ndarray
    energy_states: np.ndarray | None = None
    solve_time: np.ndarray | None = None
    failed: bool = False
    reason: str = ""

    def __post_init__(self):
        self.v_err = np.asarray(self.v_err, dtype=float)
        self.w_dev = np.asarray(self.w_dev, dtype=float)
        self.j_opt = np.asarray(self.j_opt, dtype=float)
        if not (self.v_err.shape == self.w_dev.shape == self.j_opt.shape):
            raise ValueError("window channels must have equal length")

    @property
    def N(self) -> int:
        return int(self.v_err.size)

    @classmethod
    def failure(cls, reason: str) -> "PerformanceWindow":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), failed=True, reason=reason)

    @classmethod
    def from_rows(cls, rows) -> "PerformanceWindow":
        return cls(v_err=[r.v_err for r in rows], w_dev=[r.vehicle.w for r in rows],
                   j_opt=[r.j_opt for r in rows],
                   energy_states=np.array([r.energy for r in rows]).reshape(-1, ENERGY_DIM),
                   solve_time=np.array([r.solve_time for r in rows]))


@dataclass
class StepRecord:
    t: float
    plant: PlantState
    vehicle: VehicleState
    u: ControlInput
    v_err: float
    j_opt: float
    sqp_iters: int
    qp_iters: int
    solve_time: float
    status: str
    energy: np.ndarray = field(repr=False, default=None)


@dataclass
class LoopState:
    """Everything needed to resume a closed loop at a control instant."""

    plant: PlantState
    u_prev: np.ndarray
    s_guess: float
    t: float
    controller: NmpcController

    def snapshot(self) -> "LoopState":
        return LoopState(self.plant, np.array(self.u_prev), self.s_guess, self.t,
                         self.controller.clone())


def measure(ps: PlantState, path: ReferencePath, s_guess=None) -> VehicleState:
    c = cart_to_curvilinear(ps.cart, path, s_guess=s_guess)
    return VehicleState(ps.vel[0], ps.vel[1], ps.vel[2], c.s, c.w, c.theta)


def plant_from_vehicle(x: VehicleState, u_prev, path: ReferencePath) -> PlantState:
    x = VehicleState(*np.asarray(x, dtype=float))
    cart = curvilinear_to_cart(CurvilinearPose(x.s, x.w, x.theta), path)
    return PlantState(cart, (x.vx, x.vy, x.r), float(u_prev[0]), float(u_prev[1]))


def closed_loop_step(ls: LoopState, path: ReferencePath, plant_cfg: PlantConfig,
                     params: SingleTrackParams, Ts: float, rng) -> StepRecord:
    """Measure, solve, actuate; advances ``ls`` in place and returns the step record."""
    x = measure(ls.plant, path, ls.s_guess)
    u, sol = ls.controller.step(x, ls.u_prev)
    u_arr = np.array(u)
    vref = float(path.v_ref_at(x.s))
    e = np.array(x, dtype=float)
    e[dyn.VX] -= vref
    e[dyn.S] = 0.0
    rate = (u_arr - ls.u_prev) / Ts * ls.controller.cfg.rate_scale
    rec = StepRecord(t=ls.t, plant=ls.plant, vehicle=x, u=u, v_err=x.vx - vref, j_opt=sol.j_opt,
                     sqp_iters=sol.sqp_iters, qp_iters=sol.qp_iters, solve_time=sol.solve_time,
                     status=sol.status, energy=np.concatenate([e, u_arr, rate]))
    ls.plant = dyn.plant_step(ls.plant, u_arr, Ts, plant_cfg, rng, params=params)
    ls.u_prev = u_arr
    ls.s_guess = x.s
    ls.t = ls.t + Ts
    return rec


def xdt_rollout(x_init, weights: NmpcWeights, path: ReferencePath, cfg: PlantConfig, N: int,
                dt: float, rng, controller: NmpcController, u_prev=(0.0, 0.0),
                randomize: bool = True, t0: float = 0.0, s_guess=None) -> PerformanceWindow:
    """Closed-loop xDT rollout of ``N`` steps with NMPC(``weights``).

    ``x_init`` is either a :class:`PlantState` snapshot or the curvilinear
    :class:`VehicleState` recorded ``N`` steps ago (actuators then start at
    ``u_prev``). ``controller`` supplies the model and the warm start; it is
    cloned, never mutated. The plant parameters are drawn from
    ``cfg.randomization`` when ``randomize`` is set. Failures (solver, plant
    divergence, leaving the path) return a window with ``failed=True``.
    ``s_guess`` seeds the first path projection (a global search otherwise).
    """
    u_prev = np.asarray(u_prev, dtype=float)
    if isinstance(x_init, PlantState):
        ps = x_init
    else:
        ps = plant_from_vehicle(x_init, u_prev, path)
    params = dyn.randomize_plant(cfg, rng) if randomize else cfg.nominal
    ls = LoopState(ps, u_prev, s_guess, t0, controller.clone(weights=weights))
    rows = []
    try:
        for _ in range(N):
            rows.append(closed_loop_step(ls, path, cfg, params, dt, rng))
    except (SolverFailure, dyn.DivergenceError, PathError, FloatingPointError) as exc:
        log.info("rollout failed after %d steps: %s", len(rows), exc)
        return PerformanceWindow.failure(f"{type(exc).__name__}: {exc}")
    return PerformanceWindow.from_rows(rows)
