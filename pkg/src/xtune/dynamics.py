"""Single-track vehicle model and the higher-fidelity surrogate plant.

The prediction model is the curvilinear single-track model with linear
tires used inside the NMPC. The plant ("xDT") integrates the same body
dynamics in Cartesian coordinates with saturating tires, first-order
actuator lag, parameter randomization and additive process noise.

All derivative functions broadcast over leading dimensions: ``x`` has shape
``(..., 6)`` and ``u`` shape ``(..., 2)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .path import CartesianPose, wrap_angle

# state / input layout
VX, VY, R, S, W, TH = range(6)
STATE_NAMES = ("vx", "vy", "r", "s", "w", "theta")
INPUT_NAMES = ("delta", "tr")


class DivergenceError(RuntimeError):
    """Non-finite state produced by an integrator."""


class GeometryError(ValueError):
    """Curvilinear projection is singular (kappa * w == 1)."""


class VehicleState(NamedTuple):
    vx: float
    vy: float
    r: float
    s: float
    w: float
    theta: float


class ControlInput(NamedTuple):
    delta: float
    tr: float


@dataclass(frozen=True)
class SingleTrackParams:
    M: float = 1500.0
    I_z: float = 2500.0
    L_f: float = 1.2
    L_r: float = 1.4
    C_af: float = 1.0e5
    C_ar: float = 1.0e5
    F_max: float = 6000.0
    drive_split: float = 0.0
    c_r0: float = 150.0
    c_r2: float = 0.4
    v_eps: float = 0.5

    def __post_init__(self):
        for name in ("M", "I_z", "L_f", "L_r", "C_af", "C_ar", "F_max", "v_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.drive_split <= 1.0:
            raise ValueError("drive_split must lie in [0, 1]")
        if self.c_r0 < 0 or self.c_r2 < 0:
            raise ValueError("resistance coefficients must be non-negative")

    def replace(self, **kw) -> "SingleTrackParams":
        return dataclasses.replace(self, **kw)


RANDOMIZED = ("M", "I_z", "C_af", "C_ar", "F_max")


@dataclass(frozen=True)
class PlantConfig:
    """Surrogate plant: nominal parameters plus the fidelity upgrades.

    ``randomization`` maps parameter names (a subset of ``M, I_z, C_af, C_ar,
    F_max``) to relative standard deviations. ``process_noise_std`` holds
    per-step standard deviations for ``(X, Y, psi, vx, vy, r)``.
    """

    nominal: SingleTrackParams = field(default_factory=SingleTrackParams)
    tire_model: str = "linear"
    tire_B: tuple = (10.0, 10.0)
    tire_C: tuple = (1.9, 1.9)
    tire_D: tuple = (8000.0, 8000.0)
    tau_delta: float = 0.0
    tau_tr: float = 0.0
    randomization: dict = field(default_factory=dict)
    process_noise_std: tuple = (0.0,) * 6
    substeps: int = 4

    def __post_init__(self):
        if self.tire_model not in ("linear", "nonlinear"):
            raise ValueError(f"unknown tire model {self.tire_model!r}")
        if self.tau_delta < 0 or self.tau_tr < 0:
            raise ValueError("actuator time constants must be >= 0")
        for k, v in self.randomization.items():
            if k not in RANDOMIZED:
                raise ValueError(f"cannot randomize {k!r}")
            if not 0 <= v < 1.0 / 3.0:
                raise ValueError(f"relative std for {k} must be in [0, 1/3)")
        if len(self.process_noise_std) != 6 or min(self.process_noise_std) < 0:
            raise ValueError("process_noise_std needs 6 non-negative entries")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    def replace(self, **kw) -> "PlantConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class PlantState:
    cart: CartesianPose
    vel: tuple
    act_delta: float
    act_tr: float

    def as_array(self) -> np.ndarray:
        return np.array([*self.cart, *self.vel, self.act_delta, self.act_tr], dtype=float)

    @classmethod
    def from_array(cls, a) -> "PlantState":
        a = [float(v) for v in a]
        return cls(CartesianPose(a[0], a[1], float(wrap_angle(a[2]))), tuple(a[3:6]), a[6], a[7])


def throttle_to_forces(tr, p: SingleTrackParams):
    fx = np.asarray(tr, dtype=float) * p.F_max
    return p.drive_split * fx, (1.0 - p.drive_split) * fx


def linear_tire_forces(x, delta, p: SingleTrackParams):
    x = np.asarray(x, dtype=float)
    vx, vy, r = x[..., VX], x[..., VY], x[..., R]
    alpha_f, alpha_r = slip_angles(vx, vy, r, delta, p)
    return p.C_af * alpha_f, p.C_ar * alpha_r


def slip_angles(vx, vy, r, delta, p: SingleTrackParams):
    vxe = np.maximum(vx, p.v_eps)
    alpha_f = delta - np.arctan((vy + p.L_f * r) / vxe)
    alpha_r = -np.arctan((vy - p.L_r * r) / vxe)
    return alpha_f, alpha_r


def saturating_tire_force(alpha, B, C, D):
    """``D sin(C atan(B alpha))``; reduces to slope ``B C D`` at small slip."""
    return D * np.sin(C * np.arctan(B * alpha))


def body_accelerations(vx, vy, r, delta, fxf, fxr, fyf, fyr, p: SingleTrackParams):
    cd, sd = np.cos(delta), np.sin(delta)
    f_res = p.c_r0 + p.c_r2 * vx * vx
    dvx = (fxf * cd + fxr - fyf * sd - f_res + p.M * r * vy) / p.M
    dvy = (fxf * sd + fyr + fyf * cd - p.M * r * vx) / p.M
    dr = (p.L_f * (fyf * cd + fxf * sd) - p.L_r * fyr) / p.I_z
    return dvx, dvy, dr


def single_track_derivatives(x, u, p: SingleTrackParams, kappa_c):
    """Time derivative of the curvilinear single-track state."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    vx, vy, r, w, th = x[..., VX], x[..., VY], x[..., R], x[..., W], x[..., TH]
    delta, tr = u[..., 0], u[..., 1]
    fyf, fyr = linear_tire_forces(x, delta, p)
    fxf, fxr = throttle_to_forces(tr, p)
    dvx, dvy, dr = body_accelerations(vx, vy, r, delta, fxf, fxr, fyf, fyr, p)
    denom = 1.0 - kappa_c * w
    if np.any(denom == 0.0):
        raise GeometryError("singular curvilinear projection (kappa * w == 1)")
    ds = (vx * np.cos(th) - vy * np.sin(th)) / denom
    dw = vx * np.sin(th) + vy * np.cos(th)
    dth = r - kappa_c * ds
    return np.stack(np.broadcast_arrays(dvx, dvy, dr, ds, dw, dth), axis=-1)


def rk4_step(fn, x, u, dt):
    """Classical RK4 with the input held constant over the step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = fn(x, u)
    k2 = fn(x + 0.5 * dt * k1, u)
    k3 = fn(x + 0.5 * dt * k2, u)
    k4 = fn(x + dt * k3, u)
    out = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise DivergenceError("RK4 produced a non-finite state")
    return out


def prediction_step(x, u, p: SingleTrackParams, path, dt):
    """One RK4 step of the prediction model, curvature frozen at the initial s."""
    kappa = path.kappa_at(np.asarray(x)[..., S])
    return rk4_step(lambda xx, uu: single_track_derivatives(xx, uu, p, kappa), x, u, dt)


def _plant_derivatives(z, u_cmd, p: SingleTrackParams, cfg: PlantConfig):
    # z = (X, Y, psi, vx, vy, r, act_delta, act_tr)
    psi, vx, vy, r, ad, at = z[2], z[3], z[4], z[5], z[6], z[7]
    if cfg.tire_model == "linear":
        alpha_f, alpha_r = slip_angles(vx, vy, r, ad, p)
        fyf, fyr = p.C_af * alpha_f, p.C_ar * alpha_r
    else:
        alpha_f, alpha_r = slip_angles(vx, vy, r, ad, p)
        fyf = saturating_tire_force(alpha_f, cfg.tire_B[0], cfg.tire_C[0], cfg.tire_D[0])
        fyr = saturating_tire_force(alpha_r, cfg.tire_B[1], cfg.tire_C[1], cfg.tire_D[1])
    fxf, fxr = throttle_to_forces(at, p)
    dvx, dvy, dr = body_accelerations(vx, vy, r, ad, fxf, fxr, fyf, fyr, p)
    cp, sp = np.cos(psi), np.sin(psi)
    dad = 0.0 if cfg.tau_delta == 0 else (u_cmd[0] - ad) / cfg.tau_delta
    dat = 0.0 if cfg.tau_tr == 0 else (u_cmd[1] - at) / cfg.tau_tr
    return np.array([vx * cp - vy * sp, vx * sp + vy * cp, r, dvx, dvy, dr, dad, dat])


def plant_step(ps: PlantState, u_cmd, dt: float, cfg: PlantConfig, rng=None,
               params: SingleTrackParams | None = None) -> PlantState:
    """Advance the surrogate plant by ``dt`` under a zero-order-held command.

    ``params`` overrides ``cfg.nominal`` (used for randomized draws).
    Zero time constants make the actuators track the command instantly.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    p = cfg.nominal if params is None else params
    u_cmd = np.asarray(u_cmd, dtype=float)
    z = ps.as_array()
    if cfg.tau_delta == 0:
        z[6] = u_cmd[0]
    if cfg.tau_tr == 0:
        z[7] = u_cmd[1]
    h = dt / cfg.substeps
    for _ in range(cfg.substeps):
        z = rk4_step(lambda zz, uu: _plant_derivatives(zz, uu, p, cfg), z, u_cmd, h)
    std = np.asarray(cfg.process_noise_std, dtype=float)
    if np.any(std > 0):
        if rng is None:
            raise ValueError("process noise configured but no rng given")
        z[:6] += std * rng.standard_normal(6)
    z[3] = max(z[3], 0.0)
    if not np.all(np.isfinite(z)):
        raise DivergenceError("plant state is not finite")
    return PlantState.from_array(z)


def _truncated_normal(rng, std, size=None, limit=3.0):
    eps = rng.normal(0.0, 1.0, size)
    bad = np.abs(eps) > limit
    while np.any(bad):
        eps = np.where(bad, rng.normal(0.0, 1.0, np.shape(eps)), eps)
        bad = np.abs(eps) > limit
    return std * eps


def randomize_plant(cfg: PlantConfig, rng) -> SingleTrackParams:
    """Draw plant parameters ``nominal * (1 + eps)`` with eps ~ N(0, std^2) truncated at 3 sigma.

    One normal draw is consumed per randomizable parameter in a fixed order,
    even for zero std, so streams stay aligned across configurations.
    """
    p = cfg.nominal
    updates = {}
    for name in RANDOMIZED:
        std = float(cfg.randomization.get(name, 0.0))
        eps = float(_truncated_normal(rng, 1.0))
        if std > 0:
            updates[name] = getattr(p, name) * (1.0 + std * eps)
    return p.replace(**updates) if updates else p


def equilibrium_throttle(vx: float, p: SingleTrackParams) -> float:
    """Throttle that balances resistance at constant speed on a straight line."""
    return (p.c_r0 + p.c_r2 * vx * vx) / p.F_max
