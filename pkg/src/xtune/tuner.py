"""Online NMPC weight adaptation from closed-loop xDT rollouts.

Three estimators share the same performance vector:

* an unscented Kalman filter over the weight vector, whose sigma points are
  propagated through full closed-loop rollouts;
* SPSA with averaged symmetric perturbation pairs;
* the average of both steps.

Everything here is pure numpy on small matrices; rollouts are injected as
callables so the estimators can be tested on synthetic maps.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

from .simulate import PerformanceWindow

log = logging.getLogger(__name__)

PSD_TOL = 1e-10


class UpdateAborted(RuntimeError):
    """Too many failed rollouts or a numerically unusable update; belief unchanged."""


@dataclass(frozen=True)
class ParamVector:
    """Tunable weights with elementwise bounds."""

    values: np.ndarray
    low: np.ndarray
    high: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        v, lo, hi = (np.array(a, dtype=float).reshape(-1) for a in (self.values, self.low, self.high))
        if not (v.shape == lo.shape == hi.shape):
            raise ValueError("values and bounds must have the same length")
        if np.any(lo <= 0):
            raise ValueError("lower bounds must be strictly positive")
        if np.any(lo > hi):
            raise ValueError("lower bound above upper bound")
        if np.any(v < lo) or np.any(v > hi):
            raise ValueError(f"values {v} outside bounds [{lo}, {hi}]")
        for name, a in (("values", v), ("low", lo), ("high", hi)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.names and len(self.names) != v.size:
            raise ValueError("one name per parameter")

    @property
    def p(self) -> int:
        return self.values.size

    def clip(self, values) -> np.ndarray:
        return np.clip(np.asarray(values, dtype=float), self.low, self.high)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(self.clip(values), self.low, self.high, self.names)


@dataclass(frozen=True)
class GaussianBelief:
    mean: ParamVector
    cov: np.ndarray

    def __post_init__(self):
        P = np.array(self.cov, dtype=float)
        if P.shape != (self.mean.p, self.mean.p):
            raise ValueError("covariance shape does not match the mean")
        if np.abs(P - P.T).max(initial=0.0) > 1e-12 * max(1.0, np.abs(P).max(initial=0.0)):
            raise ValueError("covariance must be symmetric")
        P.setflags(write=False)
        object.__setattr__(self, "cov", P)


@dataclass
class NoiseModel:
    C_theta: np.ndarray
    C_n: np.ndarray   # diagonal of the output-noise covariance

    def __post_init__(self):
        self.C_theta = np.atleast_2d(np.asarray(self.C_theta, dtype=float))
        self.C_n = np.asarray(self.C_n, dtype=float).reshape(-1)
        if np.any(self.C_n < 0):
            raise ValueError("output-noise variances must be non-negative")
        if np.linalg.eigvalsh(self.C_theta).min() < -PSD_TOL:
            raise ValueError("process-noise covariance must be PSD")


@dataclass
class SigmaSet:
    points: np.ndarray   # (2p+1, p)
    weights: np.ndarray  # (2p+1,)
    c_used: float
    degenerate: bool = False


@dataclass
class EnergyReport:
    v_candidate: float
    v_current: float
    accepted: bool


# -- performance metric ---------------------------------------------------

def cost_activation(j_opt, j_threshold):
    """``max(J, J_min) - J_min``: zero below the allowed cost level."""
    if np.any(np.asarray(j_threshold) < 0):
        raise ValueError("threshold must be non-negative")
    return np.maximum(j_opt, j_threshold) - j_threshold


def performance_metric(window: PerformanceWindow, j_threshold=None, N: int | None = None) -> np.ndarray:
    """Stack ``[10 v_err; 10 w; J]`` (``J`` optionally through the activation)."""
    if window.failed:
        raise ValueError(f"cannot score a failed window ({window.reason})")
    if N is not None and window.N != N:
        raise ValueError(f"incomplete window: {window.N} of {N} samples")
    j = window.j_opt if j_threshold is None else cost_activation(window.j_opt, j_threshold)
    return np.concatenate([10.0 * window.v_err, 10.0 * window.w_dev, j])


# -- unscented transform ----------------------------------------------------

def compute_weights(p: int, lam: float) -> np.ndarray:
    if p + lam <= 0:
        raise ValueError("p + lambda must be positive")
    w = np.full(2 * p + 1, 1.0 / (2.0 * (p + lam)))
    w[0] = lam / (p + lam)
    return w


def regularize_step(theta, A, low, high, c0: float):
    """Largest common scale ``c <= c0`` keeping ``theta +- c A[:, j]`` inside the bounds.

    A single scalar shrinks every column, so the sigma set keeps the shape of
    the Gaussian. Returns ``(c, degenerate)``; ``degenerate`` flags a mean on
    the boundary (``c == 0`` with a non-zero factor).
    """
    theta = np.asarray(theta, dtype=float)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    room = np.minimum(np.asarray(high, dtype=float) - theta, theta - np.asarray(low, dtype=float))
    if np.any(room < 0):
        raise ValueError("theta outside bounds")
    mag = np.abs(A)
    with np.errstate(divide="ignore", invalid="ignore"):
        lim = np.where(mag > 0, room[:, None] / mag, np.inf)
    c = float(min(c0, lim.min(initial=np.inf)))
    degenerate = c == 0.0 and np.any(mag > 0)
    if degenerate:
        log.warning("sigma points degenerate: mean on the parameter boundary")
    return c, degenerate


def _cholesky_repaired(P):
    P = 0.5 * (P + P.T)
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        pass
    evals, evecs = np.linalg.eigh(P)
    if evals.min() < -1e-6 * max(1.0, abs(evals).max()):
        raise np.linalg.LinAlgError(f"covariance is indefinite (min eigenvalue {evals.min():.3g})")
    evals = np.maximum(evals, 1e-10)
    P = (evecs * evals) @ evecs.T
    return np.linalg.cholesky(0.5 * (P + P.T))


def sample_sigma_points(belief: GaussianBelief, lam: float) -> SigmaSet:
    theta = belief.mean.values
    p = theta.size
    if np.all(belief.cov == 0):
        A = np.zeros((p, p))
    else:
        A = _cholesky_repaired(np.asarray(belief.cov))
    c, degenerate = regularize_step(theta, A, belief.mean.low, belief.mean.high, math.sqrt(p + lam))
    pts = np.vstack([theta, theta + c * A.T, theta - c * A.T])
    # round-off can leave a point a hair outside the box
    pts = belief.mean.clip(pts)
    return SigmaSet(points=pts, weights=compute_weights(p, lam), c_used=c, degenerate=degenerate)


def unscented_transform(sigma: SigmaSet, rollout_fn: Callable, C_theta):
    """Propagate sigma points through ``rollout_fn``.

    ``rollout_fn(theta) -> h`` returns a performance vector or ``None`` for a
    failed rollout. Failed points reuse the center point's output; more than
    ``ceil(p/2)`` failures (or a failed center) abort the update.

    Returns ``(theta_bar, P_pred, Y, y_bar, failures)``.
    """
    W = sigma.weights
    pts = sigma.points
    p = pts.shape[1]
    theta_bar = W @ pts
    D = pts - theta_bar
    P_pred = np.asarray(C_theta, dtype=float) + (D * W[:, None]).T @ D
    outs = [rollout_fn(pt) for pt in pts]
    failures = [j for j, y in enumerate(outs) if y is None]
    if 0 in failures or len(failures) > math.ceil(p / 2):
        raise UpdateAborted(f"{len(failures)} failed rollouts (indices {failures})")
    for j in failures:
        log.warning("sigma rollout %d failed; reusing the center output", j)
        outs[j] = outs[0]
    Y = np.vstack([np.asarray(y, dtype=float) for y in outs])
    y_bar = W @ Y
    return theta_bar, 0.5 * (P_pred + P_pred.T), Y, y_bar, failures


def measurement_update(sigma: SigmaSet, Y, theta_bar, y_bar, P_pred, C_n, cond_max=1e12):
    """Kalman gain and posterior covariance.

    ``C_n`` is the diagonal of the output-noise covariance. Returns
    ``(K, P_post, P_y)``.
    """
    W = sigma.weights
    Dt = sigma.points - theta_bar
    Dy = np.asarray(Y, dtype=float) - y_bar
    P_ty = (Dt * W[:, None]).T @ Dy
    P_y = np.diag(np.asarray(C_n, dtype=float)) + (Dy * W[:, None]).T @ Dy
    P_y = 0.5 * (P_y + P_y.T)
    try:
        cf = sla.cho_factor(P_y)
    except np.linalg.LinAlgError as exc:
        raise UpdateAborted("output covariance is not positive definite") from exc
    d = np.diag(cf[0])
    if (d.max() / d.min()) ** 2 > cond_max:
        raise UpdateAborted("output covariance is ill-conditioned")
    K = sla.cho_solve(cf, P_ty.T).T
    P_post = P_pred - K @ P_y @ K.T
    return K, 0.5 * (P_post + P_post.T), P_y


def update_output_noise(C_n, real_h, gamma: float = 0.3) -> np.ndarray:
    """Blend the measured slack ``0 - h`` into the diagonal output noise."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    real_h = np.asarray(real_h, dtype=float)
    return (1.0 - gamma) * np.asarray(C_n, dtype=float) + gamma * real_h ** 2


def energy_check(theta_candidate, theta_current, state_window, candidate_window=None,
                 floor: float = 1e-6) -> EnergyReport:
    """Compare ``sum x' diag(theta) x`` over a window for two weight vectors.

    ``state_window`` rows hold the coordinates each weight acts on. When
    ``candidate_window`` is given, the candidate is scored on it (the window
    the candidate would have produced) and the incumbent on ``state_window``.
    Weights are floored at ``floor`` so ``diag(theta)`` is positive definite.
    """
    cur_x = np.atleast_2d(np.asarray(state_window, dtype=float))
    cand_x = cur_x if candidate_window is None else np.atleast_2d(np.asarray(candidate_window, dtype=float))
    if cur_x.size == 0 or cand_x.size == 0:
        raise ValueError("empty state window")
    tc = np.maximum(np.asarray(theta_candidate, dtype=float), floor)
    tk = np.maximum(np.asarray(theta_current, dtype=float), floor)
    v_cand = float(np.sum(cand_x ** 2 * tc))
    v_cur = float(np.sum(cur_x ** 2 * tk))
    return EnergyReport(v_cand, v_cur, v_cand <= v_cur)


def ukf_step(belief: GaussianBelief, noise: NoiseModel, real_h, rollout_fn, lam: float = 1.0):
    """Sigma sampling, propagation and measurement update for one window.

    Returns ``(delta, P_post, info)`` where ``delta = K (0 - real_h)`` is the
    unclipped parameter step.
    """
    sigma = sample_sigma_points(belief, lam)
    theta_bar, P_pred, Y, y_bar, failures = unscented_transform(sigma, rollout_fn, noise.C_theta)
    K, P_post, P_y = measurement_update(sigma, Y, theta_bar, y_bar, P_pred, noise.C_n)
    delta = K @ (0.0 - np.asarray(real_h, dtype=float))
    info = {"c_k": sigma.c_used, "K_fro": float(np.linalg.norm(K)), "rollout_failures": failures,
            "degenerate": sigma.degenerate, "sigma_points": sigma.points.tolist(),
            "y_bar_norm": float(np.linalg.norm(y_bar))}
    return delta, P_post, info


def ukf_update(belief: GaussianBelief, noise: NoiseModel, real_h, rollout_fn, lam: float = 1.0,
               energy_fn: Callable | None = None):
    """One UKF parameter update with the zero-reference innovation.

    ``energy_fn(candidate_values) -> EnergyReport`` gates the mean update; the
    covariance is updated either way. Returns ``(new_belief, report, info)``
    (``report`` is ``None`` without a gate).
    """
    delta, P_post, info = ukf_step(belief, noise, real_h, rollout_fn, lam)
    candidate = belief.mean.clip(belief.mean.values + delta)
    report = energy_fn(candidate) if energy_fn is not None else None
    values = candidate if report is None or report.accepted else belief.mean.values
    info["delta"] = delta.tolist()
    return GaussianBelief(belief.mean.with_values(values), P_post), report, info


# -- SPSA ---------------------------------------------------------------------

def spsa_loss(h, N: int, normalize: bool = False) -> float:
    """Squared 2-norms of the velocity block and the path block of ``h``.

    The cost block is excluded. With ``normalize`` the sum is divided by ``N``.
    """
    h = np.asarray(h, dtype=float)
    if h.size != 3 * N:
        raise ValueError(f"performance vector has {h.size} entries, expected {3 * N}")
    val = float(h[:N] @ h[:N] + h[N:2 * N] @ h[N:2 * N])
    return val / N if normalize else val


def spsa_gradient_from_deltas(theta, loss_fn, c_k: float, deltas, bounds=None):
    """Average of two-sided simultaneous-perturbation estimates over ``deltas``.

    ``loss_fn`` may return ``None`` for a failed evaluation; such pairs are
    skipped. Returns ``(g_hat, info)``.
    """
    if not c_k > 0:
        raise ValueError("c_k must be positive")
    theta = np.asarray(theta, dtype=float)
    grads = []
    clipped = 0
    failed = 0
    for delta in np.atleast_2d(np.asarray(deltas, dtype=float)):
        plus = theta + c_k * delta
        minus = theta - c_k * delta
        if bounds is not None:
            lo, hi = bounds
            cp, cm = np.clip(plus, lo, hi), np.clip(minus, lo, hi)
            if np.any(cp != plus) or np.any(cm != minus):
                clipped += 1
            plus, minus = cp, cm
        lp, lm = loss_fn(plus), loss_fn(minus)
        if lp is None or lm is None:
            failed += 1
            continue
        grads.append((lp - lm) / (2.0 * c_k) / delta)
    if not grads:
        raise UpdateAborted("all SPSA evaluations failed")
    return np.mean(grads, axis=0), {"pairs": len(grads), "clipped": clipped, "failed": failed}


def draw_deltas(rng, p: int, num_pairs: int, magnitudes: Sequence[float] = (1.0, 2.0)):
    """Bernoulli +-1 signs scaled by magnitudes cycling over the pairs."""
    signs = rng.choice(np.array([-1.0, 1.0]), size=(num_pairs, p))
    mags = np.array([magnitudes[i % len(magnitudes)] for i in range(num_pairs)], dtype=float)
    return signs * mags[:, None]


def spsa_gradient(theta, loss_fn, c_k: float, rng, num_pairs: int = 1,
                  magnitudes: Sequence[float] = (1.0,), bounds=None):
    deltas = draw_deltas(rng, np.asarray(theta).size, num_pairs, magnitudes)
    return spsa_gradient_from_deltas(theta, loss_fn, c_k, deltas, bounds)


def spsa_update(theta, g_hat, a_k: float, bounds) -> np.ndarray:
    lo, hi = bounds
    return np.clip(np.asarray(theta, dtype=float) - a_k * np.asarray(g_hat, dtype=float), lo, hi)


def combined_step(delta_ukf, delta_spsa, bounds, theta) -> np.ndarray:
    """Average the two steps; a missing step (``None``) falls back to the other."""
    if delta_ukf is None and delta_spsa is None:
        raise UpdateAborted("both estimators aborted")
    if delta_ukf is None or delta_spsa is None:
        log.warning("combined step falls back to a single estimator")
        step = delta_spsa if delta_ukf is None else delta_ukf
    else:
        step = 0.5 * (np.asarray(delta_ukf, dtype=float) + np.asarray(delta_spsa, dtype=float))
    lo, hi = bounds
    return np.clip(np.asarray(theta, dtype=float) + step, lo, hi)


# -- coordinator ----------------------------------------------------------------

def energy_indices(names) -> np.ndarray:
    """Columns of the logged energy vector each tuned weight acts on."""
    from .nmpc import WEIGHT_NAMES
    return np.array([WEIGHT_NAMES.index(n) for n in names], dtype=int)


class OnlineTuner:
    """Owns the belief and noise model and produces one update per window.

    ``rollout(theta_values, index)`` must return a
    :class:`~xtune.simulate.PerformanceWindow` for a closed-loop xDT rollout
    with the tuned weights set to ``theta_values``; ``index`` identifies the
    rollout within the update so the caller can pick random streams.
    """

    def __init__(self, cfg, N: int, theta0: ParamVector):
        self.cfg = cfg
        self.N = N
        p = theta0.p
        self.belief = GaussianBelief(theta0, cfg.p0 * np.eye(p))
        self.noise = NoiseModel(C_theta=cfg.c_theta_std ** 2 * np.eye(p),
                                C_n=np.full(3 * N, float(cfg.cn0)))
        self.idx = energy_indices(theta0.names)
        self.updates = 0

    @property
    def theta(self) -> ParamVector:
        return self.belief.mean

    def metric(self, window: PerformanceWindow) -> np.ndarray:
        return performance_metric(window, self.cfg.j_threshold, N=self.N)

    def _energy(self, window):
        return np.asarray(window.energy_states)[:, self.idx]

    def _ukf_part(self, real_h, rollout, windows):
        sigma = sample_sigma_points(self.belief, self.cfg.lam)
        counter = itertools.count()

        def fn(theta):
            j = next(counter)
            win = rollout(theta, j)
            windows[j] = win
            return None if win.failed else self.metric(win)

        theta_bar, P_pred, Y, y_bar, failures = unscented_transform(sigma, fn, self.noise.C_theta)
        K, P_post, _ = measurement_update(sigma, Y, theta_bar, y_bar, P_pred, self.noise.C_n)
        delta = K @ (0.0 - real_h)
        info = {"c_k": sigma.c_used, "degenerate": bool(sigma.degenerate),
                "K_fro": float(np.linalg.norm(K)), "rollout_failures": failures,
                "sigma_points": sigma.points.tolist(), "delta_ukf": delta.tolist()}
        return delta, P_post, info

    def _spsa_part(self, rollout, rng, offset, windows):
        cfg = self.cfg
        theta = self.theta.values
        deltas = draw_deltas(rng, theta.size, cfg.num_pairs, cfg.spsa_magnitudes)
        counter = itertools.count(offset)

        def loss(th):
            j = next(counter)
            win = rollout(th, j)
            windows[j] = win
            if win.failed:
                return None
            return spsa_loss(self.metric(win), self.N, normalize=cfg.spsa_normalize)

        g, info = spsa_gradient_from_deltas(theta, loss, cfg.spsa_c, deltas,
                                            bounds=(self.theta.low, self.theta.high))
        delta = -cfg.spsa_a * g
        info.update({"deltas": deltas.tolist(), "gradient": g.tolist(), "delta_spsa": delta.tolist()})
        return delta, info

    def update(self, real_h, real_window: PerformanceWindow, rollout, rng) -> tuple[ParamVector, dict]:
        """Run one update; returns the deployed parameters and the log record."""
        cfg = self.cfg
        k = self.updates
        self.updates += 1
        theta = self.theta
        real_h = np.asarray(real_h, dtype=float)
        rec = {"update": k, "kind": cfg.kind, "theta_before": theta.values.tolist(),
               "real_h_norm": float(np.linalg.norm(real_h)), "aborted": False}
        windows: dict = {}
        delta_ukf = delta_spsa = None
        P_post = None
        if cfg.kind in ("ukf", "ukf_spsa"):
            try:
                delta_ukf, P_post, info = self._ukf_part(real_h, rollout, windows)
                rec.update(info)
            except UpdateAborted as exc:
                log.warning("UKF part of update %d aborted: %s", k, exc)
                rec["ukf_error"] = str(exc)
        if cfg.kind in ("spsa", "ukf_spsa"):
            try:
                delta_spsa, info = self._spsa_part(rollout, rng, 100, windows)
                rec["spsa"] = info
            except UpdateAborted as exc:
                log.warning("SPSA part of update %d aborted: %s", k, exc)
                rec["spsa_error"] = str(exc)
        bounds = (theta.low, theta.high)
        try:
            if cfg.kind == "ukf_spsa":
                candidate = combined_step(delta_ukf, delta_spsa, bounds, theta.values)
            else:
                step = delta_ukf if cfg.kind == "ukf" else delta_spsa
                if step is None:
                    raise UpdateAborted("estimator aborted")
                candidate = theta.clip(theta.values + step)
        except UpdateAborted as exc:
            rec.update({"aborted": True, "reason": str(exc), "candidate": None, "accepted": False,
                        "theta_after": theta.values.tolist(), "energy": None})
            self._covariance(P_post, real_h)
            rec["cov_after"] = self.belief.cov.tolist()
            return theta, rec

        report, mode = self._gate(candidate, real_window, rollout, windows)
        accepted = report is None or report.accepted
        values = candidate if accepted else theta.values
        self.belief = GaussianBelief(theta.with_values(values), self.belief.cov)
        self._covariance(P_post, real_h)
        rec.update({"candidate": candidate.tolist(), "accepted": bool(accepted),
                    "theta_after": self.theta.values.tolist(),
                    "energy": None if report is None else {
                        "mode": mode, "v_candidate": report.v_candidate,
                        "v_current": report.v_current, "accepted": bool(report.accepted)},
                    "cov_after": self.belief.cov.tolist(),
                    "C_n_mean": [float(np.mean(b)) for b in np.split(self.noise.C_n, 3)]})
        return self.theta, rec

    def _covariance(self, P_post, real_h):
        if P_post is None:
            return
        self.belief = GaussianBelief(self.belief.mean, P_post)
        self.noise.C_n = update_output_noise(self.noise.C_n, real_h, self.cfg.gamma)

    def _gate(self, candidate, real_window, rollout, windows):
        cfg = self.cfg
        theta = self.theta.values
        floor = cfg.energy_floor
        if cfg.energy_gate == "off":
            return None, "off"
        if cfg.energy_gate == "window":
            return energy_check(candidate, theta, self._energy(real_window), floor=floor), "window"
        # "simulated": incumbent weighting on the candidate's and the incumbent's
        # own rollouts from the same initial state and random draws
        if np.array_equal(candidate, theta):
            return EnergyReport(0.0, 0.0, True), "simulated"
        # sigma point 0 is the incumbent itself
        current = windows.get(0)
        if current is None or current.failed:
            current = rollout(theta.copy(), 200)
        cand = rollout(candidate.copy(), 201)
        if current.failed or cand.failed:
            log.warning("energy gate rollout failed; candidate rejected")
            return EnergyReport(math.inf, math.nan, False), "simulated"
        return energy_check(theta, theta, self._energy(current), self._energy(cand),
                            floor=floor), "simulated"
