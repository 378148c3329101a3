"""Path-following NMPC: multiple-shooting SQP over the RK4-discretized model.

The augmented state is ``(x, u)``; decision variables are the input rates.
At stage ``k`` the applied input is ``v_k = u_{k-1} + Ts * udot_k`` and the
state advances by one RK4 step under ``v_k``. Each SQP iteration linearizes
every shooting interval (central differences, all stages in one batch),
condenses the multiple-shooting QP onto the rate increments and solves it
with the active-set method in :mod:`xtune.qp`. Full steps are taken, capped
in infinity norm.
"""

from __future__ import annotations

import copy
import dataclasses
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import dynamics as dyn
from .dynamics import ControlInput, SingleTrackParams, VehicleState
from .path import PathError, ReferencePath
from .qp import QPError, qp_solve

NX, NU = 6, 2
WEIGHT_NAMES = ("q_vx", "q_vy", "q_r", "q_s", "q_w", "q_theta",
                "r_delta", "r_tr", "s_delta", "s_tr")


class SolverFailure(RuntimeError):
    """Raised after too many consecutive failed NMPC solves."""


@dataclass(frozen=True)
class NmpcWeights:
    q: tuple = (1.0,) * 6
    r: tuple = (1.0, 1.0)
    s_rate: tuple = (1.0, 1.0)

    def __post_init__(self):
        q, r, s = (tuple(float(v) for v in a) for a in (self.q, self.r, self.s_rate))
        if len(q) != 6 or len(r) != 2 or len(s) != 2:
            raise ValueError("weights need 6 state, 2 input and 2 rate entries")
        if min(q) < 0 or min(r) <= 0 or min(s) <= 0:
            raise ValueError(f"need q >= 0, r > 0, s > 0; got {q}, {r}, {s}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "s_rate", s)

    def as_vector(self) -> np.ndarray:
        return np.array(self.q + self.r + self.s_rate)

    @classmethod
    def from_vector(cls, v) -> "NmpcWeights":
        v = [float(a) for a in v]
        return cls(tuple(v[:6]), tuple(v[6:8]), tuple(v[8:10]))

    def with_entries(self, names, values) -> "NmpcWeights":
        v = self.as_vector()
        for name, val in zip(names, values):
            v[WEIGHT_NAMES.index(name)] = val
        return NmpcWeights.from_vector(v)

    def scaled(self, factor: float) -> "NmpcWeights":
        return NmpcWeights.from_vector(factor * self.as_vector())


@dataclass(frozen=True)
class OcpConfig:
    N_H: int = 30
    Ts: float = 0.04
    x_min: tuple = (1.0, -np.inf, -np.inf, -np.inf, -np.inf, -np.inf)
    x_max: tuple = (60.0, np.inf, np.inf, np.inf, np.inf, np.inf)
    track_limits: bool = True
    u_min: tuple = (-0.5, -1.0)
    u_max: tuple = (0.5, 1.0)
    udot_min: tuple = (-0.5, -2.0)
    udot_max: tuple = (0.5, 2.0)
    terminal_scale: float = 10.0
    rate_cost_per_sample: tuple = (False, True)
    sqp_max_iters: int = 20
    sqp_tol: float = 1e-6
    qp_tol: float = 1e-9
    step_cap: float = 1.0
    fd_step: float = 1e-6
    max_failures: int = 5
    path_margin: float = 100.0

    def __post_init__(self):
        if self.N_H < 1:
            raise ValueError("N_H must be >= 1")
        if not self.Ts > 0:
            raise ValueError("Ts must be positive")
        for lo, hi in ((self.x_min, self.x_max), (self.u_min, self.u_max),
                       (self.udot_min, self.udot_max)):
            if any(a > b for a, b in zip(lo, hi)):
                raise ValueError(f"empty box {lo} / {hi}")
        if min(self.sqp_tol, self.qp_tol, self.step_cap, self.fd_step) <= 0:
            raise ValueError("tolerances must be positive")

    def replace(self, **kw) -> "OcpConfig":
        return dataclasses.replace(self, **kw)

    @property
    def rate_scale(self) -> np.ndarray:
        """Per-input factor turning a rate into the quantity ``S`` penalizes.

        Inputs flagged in ``rate_cost_per_sample`` have their rate term on the
        per-sample increment ``Ts * udot``; the others on ``udot`` in 1/s.
        """
        return np.where(np.asarray(self.rate_cost_per_sample, dtype=bool), self.Ts, 1.0)


class StageReference(NamedTuple):
    """Per-stage state reference; ``free`` marks components without a target."""
    x_ref: np.ndarray    # (N+1, 6)
    free: np.ndarray     # (6,) bool


@dataclass
class OcpSolution:
    states: np.ndarray      # (N+1, 8): x and the input held entering each node
    rates: np.ndarray       # (N, 2)
    j_opt: float
    sqp_iters: int
    qp_iters: int
    solve_time: float
    status: str             # converged | max_iters | infeasible
    active: np.ndarray | None = None

    @property
    def inputs(self) -> np.ndarray:
        return self.states[1:, NX:]

    @property
    def first_input(self) -> np.ndarray:
        return self.states[1, NX:]

    @property
    def ok(self) -> bool:
        return self.status == "converged"


class VehicleModel:
    """RK4-discretized single-track model attached to a reference path."""

    def __init__(self, params: SingleTrackParams, path: ReferencePath, Ts: float):
        self.params = params
        self.path = path
        self.Ts = Ts

    def discrete(self, x, v):
        return dyn.prediction_step(x, v, self.params, self.path, self.Ts)

    def reference(self, states) -> StageReference:
        x_ref = np.zeros((states.shape[0], NX))
        x_ref[:, dyn.VX] = self.path.v_ref_at(states[:, dyn.S])
        free = np.zeros(NX, dtype=bool)
        free[dyn.S] = True
        return StageReference(x_ref, free)

    def state_bounds(self, states, cfg: OcpConfig):
        lo = np.tile(np.asarray(cfg.x_min, dtype=float), (states.shape[0], 1))
        hi = np.tile(np.asarray(cfg.x_max, dtype=float), (states.shape[0], 1))
        if cfg.track_limits:
            wl, wr = self.path.limits_at(states[:, dyn.S])
            lo[:, dyn.W] = np.maximum(lo[:, dyn.W], -wr)
            hi[:, dyn.W] = np.minimum(hi[:, dyn.W], wl)
        return lo, hi

    def check_window(self, states, cfg: OcpConfig):
        s = states[:, dyn.S]
        if np.any(s < -cfg.path_margin) or np.any(s > self.path.total_length + cfg.path_margin):
            raise PathError("predicted arc length left the path window")


class LinearModel:
    """``x+ = A x + B v`` with a constant reference; used for oracle checks."""

    def __init__(self, A, B, x_ref=None):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.x_ref = np.zeros(NX) if x_ref is None else np.asarray(x_ref, dtype=float)

    def discrete(self, x, v):
        return np.asarray(x) @ self.A.T + np.asarray(v) @ self.B.T

    def reference(self, states):
        return StageReference(np.tile(self.x_ref, (states.shape[0], 1)), np.zeros(NX, dtype=bool))

    def state_bounds(self, states, cfg):
        n = states.shape[0]
        return (np.tile(np.asarray(cfg.x_min, dtype=float), (n, 1)),
                np.tile(np.asarray(cfg.x_max, dtype=float), (n, 1)))

    def check_window(self, states, cfg):
        pass


def augment_dynamics(x, u, udot, Ts, model):
    """One augmented stage: returns ``(x_next, u_next)`` with ``u_next = u + Ts*udot``."""
    u_next = np.asarray(u, dtype=float) + Ts * np.asarray(udot, dtype=float)
    return model.discrete(np.asarray(x, dtype=float), u_next), u_next


def stage_cost(x_err, u, udot, weights: NmpcWeights) -> float:
    x_err, u, udot = (np.asarray(a, dtype=float) for a in (x_err, u, udot))
    return float(x_err @ (np.asarray(weights.q) * x_err) + u @ (np.asarray(weights.r) * u)
                 + udot @ (np.asarray(weights.s_rate) * udot))


def _errors(states, ref: StageReference):
    e = states[:, :NX] - ref.x_ref
    e[:, ref.free] = 0.0
    return e


def ocp_cost(x_states, inputs, rates, ref: StageReference, weights: NmpcWeights, cfg: OcpConfig):
    """NLP objective for node states ``(N+1, 6)``, applied inputs ``(N, 2)`` and rates ``(N, 2)``."""
    e = _errors(np.asarray(x_states, dtype=float), ref)
    q = np.asarray(weights.q)
    r = np.asarray(weights.r)
    s = np.asarray(weights.s_rate)
    rates = cfg.rate_scale * np.asarray(rates, dtype=float)
    stage = np.sum(e[:-1] ** 2 * q) + np.sum(inputs ** 2 * r) + np.sum(rates ** 2 * s)
    return float(stage + cfg.terminal_scale * np.sum(e[-1] ** 2 * q))


def _rollout(model, x0, u_prev, rates, Ts):
    N = rates.shape[0]
    X = np.empty((N + 1, NX))
    X[0] = x0
    V = u_prev + Ts * np.cumsum(rates, axis=0)
    for k in range(N):
        X[k + 1] = model.discrete(X[k], V[k])
    return X, V


def _linearize(model, X, V, h):
    """Batch central-difference Jacobians of every shooting interval."""
    N = V.shape[0]
    z = np.concatenate([X[:N], V], axis=1)                     # (N, 8)
    step = h * np.maximum(1.0, np.abs(z))                       # (N, 8)
    eye = np.eye(NX + NU)
    pert = np.concatenate([np.zeros((1, NX + NU)), eye, -eye])  # (17, 8)
    Z = z[:, None, :] + pert[None, :, :] * step[:, None, :]     # (N, 17, 8)
    F = model.discrete(Z[..., :NX], Z[..., NX:])                 # (N, 17, 6)
    F0 = F[:, 0]
    jac = (F[:, 1:9] - F[:, 9:17]) / (2.0 * step[:, :, None])   # (N, 8, 6)
    jac = np.transpose(jac, (0, 2, 1))                           # (N, 6, 8)
    return F0, jac[:, :, :NX], jac[:, :, NX:]


@dataclass
class _QPData:
    H: np.ndarray
    g: np.ndarray
    A: np.ndarray
    b: np.ndarray
    Mx: np.ndarray   # (N+1, 6, 2N) state sensitivities
    cx: np.ndarray   # (N+1, 6) state offsets from defects


def build_qp(model, X, U, u_prev, weights: NmpcWeights, cfg: OcpConfig):
    """Condensed Gauss-Newton QP in the rate increments at iterate ``(X, U)``.

    Returns the QP data and the linearization products. The QP objective is
    ``0.5 d'Hd + g'd``; its value plus the current cost is the Gauss-Newton
    model of the NLP objective.
    """
    N, Ts = U.shape[0], cfg.Ts
    V = u_prev + Ts * np.cumsum(U, axis=0)
    F0, A, B = _linearize(model, X, V, cfg.fd_step)
    defect = F0 - X[1:]
    nd = NU * N
    # dV_k = Ts * sum_{i<=k} d_i  ->  T has Ts*I blocks on and below the diagonal
    T = np.kron(np.tril(np.ones((N, N))), Ts * np.eye(NU))      # (2N, 2N)
    Mx = np.zeros((N + 1, NX, nd))
    cx = np.zeros((N + 1, NX))
    for k in range(N):
        Mx[k + 1] = A[k] @ Mx[k] + B[k] @ T[NU * k:NU * k + NU]
        cx[k + 1] = A[k] @ cx[k] + defect[k]
    ref = model.reference(X)
    e = _errors(X, ref)
    qw = np.asarray(weights.q, dtype=float).copy()
    qw[ref.free] = 0.0
    stage_w = np.tile(qw, (N + 1, 1))
    stage_w[0] = 0.0           # x0 is fixed
    stage_w[N] *= cfg.terminal_scale
    Mw = Mx * stage_w[:, :, None]
    H = np.einsum("kia,kib->ab", Mx, Mw)
    g = np.einsum("kia,ki->a", Mw, e + cx)
    rw = np.tile(np.asarray(weights.r, dtype=float), N)
    sw = np.tile(np.asarray(weights.s_rate, dtype=float) * cfg.rate_scale ** 2, N)
    H += T.T @ (rw[:, None] * T) + np.diag(sw)
    g += T.T @ (rw * V.ravel()) + sw * U.ravel()
    H = 2.0 * H
    g = 2.0 * g
    # inequality rows A d >= b
    rows, rhs = [], []
    rate_lo = np.tile(np.asarray(cfg.udot_min, dtype=float), N) - U.ravel()
    rate_hi = np.tile(np.asarray(cfg.udot_max, dtype=float), N) - U.ravel()
    eye = np.eye(nd)
    for M, lo, hi in ((eye, rate_lo, rate_hi),
                      (T, np.tile(np.asarray(cfg.u_min, dtype=float), N) - V.ravel(),
                       np.tile(np.asarray(cfg.u_max, dtype=float), N) - V.ravel())):
        fl, fh = np.isfinite(lo), np.isfinite(hi)
        rows += [M[fl], -M[fh]]
        rhs += [lo[fl], -hi[fh]]
    xlo, xhi = model.state_bounds(X, cfg)
    base = X + cx
    for k in range(1, N + 1):
        for i in range(NX):
            if np.isfinite(xlo[k, i]):
                rows.append(Mx[k, i][None])
                rhs.append(np.array([xlo[k, i] - base[k, i]]))
            if np.isfinite(xhi[k, i]):
                rows.append(-Mx[k, i][None])
                rhs.append(np.array([base[k, i] - xhi[k, i]]))
    Ain = np.concatenate(rows) if rows else np.zeros((0, nd))
    bin_ = np.concatenate(rhs) if rhs else np.zeros(0)
    return _QPData(H, g, Ain, bin_, Mx, cx), V, ref


def solve_sqp(x0, u_prev, weights: NmpcWeights, cfg: OcpConfig, model, warm_start=None,
              warm_active=None) -> OcpSolution:
    """Solve the path-following OCP from augmented state ``(x0, u_prev)``.

    ``warm_start`` is an optional ``(X, U)`` pair of node states ``(N+1, 6)``
    and rates ``(N, 2)``; ``X[0]`` is overwritten by ``x0``.
    """
    t0 = time.perf_counter()
    N, Ts = cfg.N_H, cfg.Ts
    x0 = np.asarray(x0, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    if not np.all(np.isfinite(x0)) or not np.all(np.isfinite(u_prev)):
        raise ValueError("initial state must be finite")
    if warm_start is None:
        U = np.zeros((N, NU))
        X, _ = _rollout(model, x0, u_prev, U, Ts)
    else:
        X = np.array(warm_start[0], dtype=float)
        U = np.array(warm_start[1], dtype=float)
        X[0] = x0
    status = "max_iters"
    qp_iters = 0
    it = 0
    active = warm_active
    for it in range(1, cfg.sqp_max_iters + 1):
        model.check_window(X, cfg)
        try:
            qp, V, ref = build_qp(model, X, U, u_prev, weights, cfg)
            res = qp_solve(qp.H, qp.g, A_in=qp.A, b_in=qp.b, warm_active=active, tol=cfg.qp_tol)
        except (QPError, dyn.DivergenceError, np.linalg.LinAlgError):
            status = "infeasible"
            break
        qp_iters += res.iterations
        if res.status != "optimal":
            status = "infeasible"
            break
        active = res.active
        d = res.x
        dX = qp.Mx @ d + qp.cx                     # (N+1, 6)
        # step norm in physical units: node states and applied-input increments
        size = max(Ts * np.abs(d).max(initial=0.0), np.abs(dX).max(initial=0.0))
        if size > cfg.step_cap:
            d = d * (cfg.step_cap / size)
            dX = qp.Mx @ d + qp.cx * (cfg.step_cap / size)
        U = U + d.reshape(N, NU)
        X = X + dX
        X[0] = x0
        if size < cfg.sqp_tol:
            status = "converged"
            break
    V = u_prev + Ts * np.cumsum(U, axis=0)
    ref = model.reference(X)
    j = ocp_cost(X, V, U, ref, weights, cfg)
    states = np.concatenate([X, np.vstack([u_prev, V])], axis=1)
    return OcpSolution(states=states, rates=U, j_opt=j, sqp_iters=it, qp_iters=qp_iters,
                       solve_time=time.perf_counter() - t0, status=status, active=active)


def shift_warm_start(sol: OcpSolution, model, x0, u_prev, Ts):
    """Shift rates by one stage (last repeated as zero) and re-simulate from ``x0``."""
    U = np.vstack([sol.rates[1:], np.zeros((1, NU))])
    X, _ = _rollout(model, np.asarray(x0, dtype=float), np.asarray(u_prev, dtype=float), U, Ts)
    return X, U


class NmpcController:
    """Receding-horizon wrapper holding weights and the warm start."""

    def __init__(self, model, weights: NmpcWeights, cfg: OcpConfig):
        self.model = model
        self.weights = weights
        self.cfg = cfg
        self.last: OcpSolution | None = None
        self.failures = 0

    def clone(self, weights: NmpcWeights | None = None, model=None) -> "NmpcController":
        c = copy.copy(self)
        c.last = copy.deepcopy(self.last)
        if weights is not None:
            c.weights = weights
        if model is not None:
            c.model = model
        return c

    def reset(self):
        self.last = None
        self.failures = 0

    def step(self, measurement, u_prev):
        return nmpc_step(self, measurement, u_prev)


def nmpc_step(controller: NmpcController, measurement, u_prev):
    """Solve once and return the input to apply and the solution.

    On a failed solve the previous input is reused; after
    ``cfg.max_failures`` consecutive failures :class:`SolverFailure` is raised.
    """
    cfg = controller.cfg
    x0 = np.asarray(measurement, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    warm = None
    if controller.last is not None and controller.last.status != "infeasible":
        warm = shift_warm_start(controller.last, controller.model, x0, u_prev, cfg.Ts)
    sol = solve_sqp(x0, u_prev, controller.weights, cfg, controller.model, warm_start=warm)
    if sol.status == "infeasible":
        controller.failures += 1
        if controller.failures >= cfg.max_failures:
            raise SolverFailure(f"{controller.failures} consecutive NMPC failures")
        controller.last = None
        return ControlInput(*u_prev), sol
    controller.failures = 0
    controller.last = sol
    u = np.clip(u_prev + cfg.Ts * sol.rates[0], cfg.u_min, cfg.u_max)
    return ControlInput(float(u[0]), float(u[1])), sol
