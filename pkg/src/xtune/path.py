"""Reference paths in arc-length parameterization.

A :class:`ReferencePath` stores center-line samples ``(s, X_c, Y_c, psi_c,
kappa_c, w_l, w_r)`` plus a reference speed per sample. Helpers build the
ISO 3888-1 double-lane-change layout and convert poses between the Cartesian
and the path-attached (curvilinear) frame.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import brentq

CSV_HEADER = ("s", "X_c", "Y_c", "psi_c", "kappa_c", "w_l", "w_r", "v_ref")


class PathError(ValueError):
    """Invalid path geometry or an arc length outside the path."""


class OutOfCorridorError(PathError):
    """A pose cannot be projected unambiguously onto the path."""


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(out == -np.pi, np.pi, out)
    return out if out.ndim else float(out)


class PathPoint(NamedTuple):
    s: float
    X_c: float
    Y_c: float
    psi_c: float
    kappa_c: float
    w_l: float
    w_r: float


class CartesianPose(NamedTuple):
    X: float
    Y: float
    psi: float


class CurvilinearPose(NamedTuple):
    s: float
    w: float
    theta: float


@dataclass(frozen=True)
class DlcGeometry:
    """Double-lane-change layout.

    ``section_lengths`` are the arc lengths of entry lane, lane change,
    side lane, lane change back and exit lane. The default stretches the
    standard layout so that four maneuvers at 80 km/h last about 42 s; use
    :meth:`iso_standard` for the cone-course dimensions.
    """

    section_lengths: tuple = (40.0, 60.0, 30.0, 60.0, 40.0)
    lane_offset: float = 3.5
    entry_speed: float = 80.0 / 3.6
    repeats: int = 4
    w_l: float = 1.5
    w_r: float = 1.5

    @classmethod
    def iso_standard(cls, **kw) -> "DlcGeometry":
        return cls(section_lengths=(15.0, 30.0, 25.0, 25.0, 15.0), **kw)

    @property
    def maneuver_length(self) -> float:
        return float(sum(self.section_lengths))

    def validate(self):
        if len(self.section_lengths) != 5:
            raise PathError("a double lane change needs exactly 5 sections")
        if any(not (l > 0) for l in self.section_lengths):
            raise PathError(f"section lengths must be positive: {self.section_lengths}")
        if self.repeats < 1:
            raise PathError("repeats must be >= 1")
        if not (self.entry_speed > 0):
            raise PathError("entry_speed must be positive")
        if not (self.w_l > 0 and self.w_r > 0):
            raise PathError("track half-widths must be positive")


@dataclass(frozen=True, eq=False)
class ReferencePath:
    """Immutable sampled center-line.

    Heading is stored unwrapped (continuous); :meth:`query` renormalizes.
    """

    s: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    psi: np.ndarray
    kappa: np.ndarray
    w_l: np.ndarray
    w_r: np.ndarray
    v_ref: np.ndarray
    _tangent: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        arrays = {}
        for name in ("s", "X", "Y", "psi", "kappa", "w_l", "w_r", "v_ref"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            arrays[name] = a
            object.__setattr__(self, name, a)
        n = arrays["s"].size
        if n < 2:
            raise PathError("a path needs at least two samples")
        if any(a.shape != (n,) for a in arrays.values()):
            raise PathError("all path arrays must have the same 1-D length")
        if np.any(np.diff(self.s) <= 0):
            raise PathError("arc length must be strictly increasing")
        if np.any(np.abs(np.diff(self.psi)) > np.pi):
            raise PathError("heading must be unwrapped")
        if np.any(self.w_l <= 0) or np.any(self.w_r <= 0):
            raise PathError("track half-widths must be positive")
        if np.any(self.v_ref <= 0):
            raise PathError("reference speed must be positive")
        tan = np.stack([np.cos(self.psi), np.sin(self.psi)], axis=1)
        tan.setflags(write=False)
        object.__setattr__(self, "_tangent", tan)

    @classmethod
    def from_samples(cls, s, X, Y, psi, kappa, w_l, w_r, v_ref) -> "ReferencePath":
        return cls(s=s, X=X, Y=Y, psi=np.unwrap(np.asarray(psi, dtype=float)),
                   kappa=kappa, w_l=w_l, w_r=w_r, v_ref=v_ref)

    @property
    def total_length(self) -> float:
        return float(self.s[-1])

    def __len__(self):
        return self.s.size

    @property
    def points(self) -> list:
        return [PathPoint(*row) for row in zip(self.s, self.X, self.Y, wrap_angle(self.psi),
                                               self.kappa, self.w_l, self.w_r)]

    # vectorized lookups, clamped at the ends (straight continuation of end values)
    def kappa_at(self, s):
        return np.interp(s, self.s, self.kappa)

    def v_ref_at(self, s):
        return np.interp(s, self.s, self.v_ref)

    def limits_at(self, s):
        return np.interp(s, self.s, self.w_l), np.interp(s, self.s, self.w_r)

    def _check_s(self, s):
        if not (0.0 <= s <= self.total_length):
            raise PathError(f"arc length {s} outside [0, {self.total_length}]")

    def _segment(self, s):
        i = int(np.searchsorted(self.s, s, side="right")) - 1
        return min(max(i, 0), self.s.size - 2)

    def _frame(self, i, s):
        """Interpolated center point and (unwrapped) heading on segment ``i``."""
        t = (s - self.s[i]) / (self.s[i + 1] - self.s[i])
        xc = self.X[i] + t * (self.X[i + 1] - self.X[i])
        yc = self.Y[i] + t * (self.Y[i + 1] - self.Y[i])
        pc = self.psi[i] + t * (self.psi[i + 1] - self.psi[i])
        return xc, yc, pc

    def query(self, s: float) -> PathPoint:
        self._check_s(s)
        i = self._segment(s)
        t = (s - self.s[i]) / (self.s[i + 1] - self.s[i])
        xc, yc, pc = self._frame(i, s)

        def lin(a):
            return float(a[i] + t * (a[i + 1] - a[i]))

        return PathPoint(float(s), float(xc), float(yc), float(wrap_angle(pc)),
                         lin(self.kappa), lin(self.w_l), lin(self.w_r))

    def to_csv(self, filename):
        with open(filename, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(CSV_HEADER)
            for row in zip(self.s, self.X, self.Y, wrap_angle(self.psi), self.kappa,
                           self.w_l, self.w_r, self.v_ref):
                wr.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, filename) -> "ReferencePath":
        with open(filename, newline="") as fh:
            rd = csv.reader(fh)
            header = tuple(next(rd))
            if header != CSV_HEADER:
                raise PathError(f"unexpected path CSV header {header}")
            cols = np.array([[float(v) for v in row] for row in rd], dtype=float)
        if cols.ndim != 2 or cols.shape[0] < 2:
            raise PathError(f"{filename}: need at least two rows")
        return cls.from_samples(*cols.T)


def curvature_from_waypoints(xy) -> tuple:
    """Heading and signed curvature of a polyline by finite differences.

    Derivatives with respect to cumulative chord length use second-order
    central differences inside and one-sided second-order stencils at the
    ends (``numpy.gradient`` with non-uniform spacing).
    """
    xy = np.asarray(xy, dtype=float)
    if xy.ndim != 2 or xy.shape[1] != 2 or xy.shape[0] < 3:
        raise PathError("need at least 3 (x, y) samples")
    ds = np.hypot(*np.diff(xy, axis=0).T)
    if np.any(ds <= 0):
        raise PathError("duplicate consecutive waypoints")
    s = np.concatenate([[0.0], np.cumsum(ds)])
    dx = np.gradient(xy[:, 0], s, edge_order=2)
    dy = np.gradient(xy[:, 1], s, edge_order=2)
    ddx = np.gradient(dx, s, edge_order=2)
    ddy = np.gradient(dy, s, edge_order=2)
    psi = np.unwrap(np.arctan2(dy, dx))
    kappa = (dx * ddy - dy * ddx) / np.power(dx * dx + dy * dy, 1.5)
    return psi, kappa


def _transition_amplitude(length, offset):
    """Peak heading of a lane change ``psi(u) = a (1 - cos 2 pi u) / 2`` that
    shifts laterally by ``offset`` over arc length ``length``."""
    if offset == 0.0:
        return 0.0
    nodes, wts = np.polynomial.legendre.leggauss(64)
    u = 0.5 * (nodes + 1.0)

    def lateral(a):
        return 0.5 * length * np.dot(wts, np.sin(0.5 * a * (1.0 - np.cos(2.0 * np.pi * u)))) - abs(offset)

    if abs(offset) >= length:
        raise PathError(f"lane offset {offset} not reachable within {length} m")
    a = brentq(lateral, 0.0, np.pi / 2, xtol=1e-15, rtol=1e-15)
    return math.copysign(a, offset)


def _heading_profile(geom: DlcGeometry):
    """Return a callable ``(s) -> (psi, kappa)`` over the full repeated layout."""
    L = geom.section_lengths
    a_out = _transition_amplitude(L[1], geom.lane_offset)
    a_back = _transition_amplitude(L[3], -geom.lane_offset)
    edges = np.cumsum((0.0,) + tuple(L))

    def profile(s):
        s = np.asarray(s, dtype=float)
        local = np.mod(s, edges[-1])
        # the final endpoint belongs to the last maneuver
        local = np.where((s >= edges[-1] * geom.repeats) & (s > 0), edges[-1], local)
        psi = np.zeros_like(local)
        kappa = np.zeros_like(local)
        for k, amp in ((1, a_out), (3, a_back)):
            inside = (local >= edges[k]) & (local <= edges[k + 1])
            u = (local[inside] - edges[k]) / L[k]
            psi[inside] = 0.5 * amp * (1.0 - np.cos(2.0 * np.pi * u))
            kappa[inside] = amp * np.pi / L[k] * np.sin(2.0 * np.pi * u)
        return psi, kappa

    return profile


def build_dlc_path(geom: DlcGeometry, sample_spacing: float = 0.25) -> ReferencePath:
    """Sample a repeated double lane change with continuous curvature.

    Each lane change uses a raised-cosine heading profile, so curvature is a
    full sine period that vanishes at both ends of the section. Positions are
    integrated from the heading with Gauss-Legendre quadrature per sample
    interval, so the section lengths are exact arc lengths.
    """
    geom.validate()
    if not (sample_spacing > 0) or sample_spacing > 0.25 * min(geom.section_lengths):
        raise PathError(f"sample spacing {sample_spacing} too coarse for this layout")
    total = geom.maneuver_length * geom.repeats
    n = int(math.ceil(total / sample_spacing - 1e-9))
    s = np.linspace(0.0, total, n + 1)
    profile = _heading_profile(geom)
    psi, kappa = profile(s)

    nodes, wts = np.polynomial.legendre.leggauss(6)
    h = np.diff(s)
    mid = 0.5 * (s[:-1] + s[1:])
    sq = mid[:, None] + 0.5 * h[:, None] * nodes[None, :]
    psi_q, _ = profile(sq)
    dX = 0.5 * h * (np.cos(psi_q) @ wts)
    dY = 0.5 * h * (np.sin(psi_q) @ wts)
    X = np.concatenate([[0.0], np.cumsum(dX)])
    Y = np.concatenate([[0.0], np.cumsum(dY)])
    ones = np.ones_like(s)
    return ReferencePath(s=s, X=X, Y=Y, psi=psi, kappa=kappa, w_l=geom.w_l * ones,
                         w_r=geom.w_r * ones, v_ref=geom.entry_speed * ones)


def straight_path(length: float, sample_spacing: float = 0.5, v_ref: float = 20.0,
                  heading: float = 0.0, width: float = 2.0) -> ReferencePath:
    """Straight center-line starting at the origin."""
    n = int(math.ceil(length / sample_spacing - 1e-9))
    s = np.linspace(0.0, length, n + 1)
    ones = np.ones_like(s)
    return ReferencePath(s=s, X=s * math.cos(heading), Y=s * math.sin(heading), psi=heading * ones,
                         kappa=0.0 * ones, w_l=width * ones, w_r=width * ones, v_ref=v_ref * ones)


def _project_on_segment(path: ReferencePath, i: int, X: float, Y: float):
    """Arc length on segment ``i`` where the interpolated normal passes through (X, Y).

    Solves ``(P - C(s)) . t(s) = 0`` with Newton's method, starting from the
    chord projection, so the result inverts :func:`curvilinear_to_cart`
    exactly (up to round-off) rather than only to chord accuracy.
    """
    s0, s1 = path.s[i], path.s[i + 1]
    ds = s1 - s0
    cx, cy = path.X[i + 1] - path.X[i], path.Y[i + 1] - path.Y[i]
    px, py = X - path.X[i], Y - path.Y[i]
    t = (px * cx + py * cy) / (cx * cx + cy * cy)
    t = min(max(t, 0.0), 1.0)
    dpsi = path.psi[i + 1] - path.psi[i]
    for _ in range(8):
        pc = path.psi[i] + t * dpsi
        ct, st = math.cos(pc), math.sin(pc)
        rx, ry = px - t * cx, py - t * cy
        f = rx * ct + ry * st
        df = -(cx * ct + cy * st) + (-rx * st + ry * ct) * dpsi
        if df == 0.0:
            break
        step = f / df
        t_new = min(max(t - step, 0.0), 1.0)
        if abs(t_new - t) < 1e-15:
            t = t_new
            break
        t = t_new
    return s0 + t * ds


def cart_to_curvilinear(pose, path: ReferencePath, s_guess: float | None = None,
                        corridor: float = 10.0, search_radius: float = 25.0) -> CurvilinearPose:
    """Project a Cartesian pose onto the path.

    ``s_guess`` warm-starts a local search over segments within
    ``search_radius`` of the previous arc length; without it (or when the
    local search fails) all segments are scanned.
    """
    X, Y, psi = (float(v) for v in pose)
    P = np.array([X, Y])
    if s_guess is not None:
        lo = np.searchsorted(path.s, s_guess - search_radius)
        hi = np.searchsorted(path.s, s_guess + search_radius)
        idx = np.arange(max(lo - 1, 0), min(hi, path.s.size - 1))
        res = _closest_segments(path, P, idx)
        if res is not None and res[1] <= corridor:
            i = res[0]
            # a local minimum at the window edge may not be the true one
            if idx.size and idx[0] < i < idx[-1] or i in (0, path.s.size - 2):
                return _finish_projection(path, i, X, Y, psi)
    res = _closest_segments(path, P, np.arange(path.s.size - 1), check_ambiguity=True)
    if res is None or res[1] > corridor:
        raise OutOfCorridorError(f"pose ({X:.3f}, {Y:.3f}) is outside the {corridor} m corridor")
    return _finish_projection(path, res[0], X, Y, psi)


def _closest_segments(path, P, idx, check_ambiguity=False):
    if idx.size == 0:
        return None
    A = np.stack([path.X[idx], path.Y[idx]], axis=1)
    B = np.stack([path.X[idx + 1], path.Y[idx + 1]], axis=1)
    d = B - A
    t = np.clip(np.einsum("ij,ij->i", P - A, d) / np.einsum("ij,ij->i", d, d), 0.0, 1.0)
    dist = np.hypot(*(A + t[:, None] * d - P).T)
    k = int(np.argmin(dist))
    if check_ambiguity:
        near = idx[np.abs(dist - dist[k]) <= 1e-9 * max(1.0, dist[k])]
        # ties between adjacent segments share a vertex and are harmless
        if near.size > 1 and np.any(np.abs(near - idx[k]) > 1):
            raise OutOfCorridorError("projection is ambiguous between non-adjacent segments")
    return int(idx[k]), float(dist[k])


def _finish_projection(path, i, X, Y, psi):
    s = _project_on_segment(path, i, X, Y)
    xc, yc, pc = path._frame(i, s)
    w = (Y - yc) * math.cos(pc) - (X - xc) * math.sin(pc)
    return CurvilinearPose(float(s), float(w), float(wrap_angle(psi - pc)))


def curvilinear_to_cart(curv, path: ReferencePath) -> CartesianPose:
    s, w, theta = (float(v) for v in curv)
    path._check_s(s)
    i = path._segment(s)
    xc, yc, pc = path._frame(i, s)
    return CartesianPose(float(xc - w * math.sin(pc)), float(yc + w * math.cos(pc)),
                         float(wrap_angle(theta + pc)))


def query(path: ReferencePath, s: float) -> PathPoint:
    return path.query(s)


def save_path(path: ReferencePath, filename) -> Path:
    path.to_csv(filename)
    return Path(filename)


def maneuver_index(s: Sequence[float] | np.ndarray, geom: DlcGeometry) -> np.ndarray:
    """Zero-based maneuver number for each arc length."""
    s = np.asarray(s, dtype=float)
    return np.clip((s // geom.maneuver_length).astype(int), 0, geom.repeats - 1)
