"""Dense strictly convex QP solver (dual active-set method of Goldfarb and Idnani).

Solves::

    min 0.5 x'Hx + g'x   s.t.  A_eq x = b_eq,  A_in x >= b_in

The dual method starts at the unconstrained minimizer and adds violated
constraints one at a time, so no feasible starting point is needed and
infeasibility is detected when a violated constraint cannot be satisfied.
A warm active set only changes the order in which violated constraints are
picked; the returned solution is the same.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla


class QPError(RuntimeError):
    pass


@dataclass
class QPResult:
    x: np.ndarray
    obj: float
    status: str  # "optimal" | "infeasible" | "max_iters"
    iterations: int
    active: np.ndarray  # indices into the stacked [eq; in] constraint rows
    dual_eq: np.ndarray
    dual_in: np.ndarray

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def box_to_inequalities(lb, ub):
    """Rows of ``A x >= b`` for finite entries of ``lb <= x <= ub``."""
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    n = lb.size
    eye = np.eye(n)
    lo = np.isfinite(lb)
    hi = np.isfinite(ub)
    A = np.vstack([eye[lo], -eye[hi]])
    b = np.concatenate([lb[lo], -ub[hi]])
    return A, b


def qp_solve(H, g, A_eq=None, b_eq=None, A_in=None, b_in=None, warm_active=None,
             tol=1e-9, max_iter=None) -> QPResult:
    """Solve a strictly convex QP.

    Parameters
    ----------
    H : (n, n) symmetric positive definite matrix.
    g : (n,) linear term.
    A_eq, b_eq : equality rows, optional.
    A_in, b_in : inequality rows ``A_in x >= b_in``, optional.
    warm_active : indices (into the inequality rows) tried first.
    tol : feasibility tolerance on constraint violation.
    max_iter : cycling guard on active-set changes.

    Returns
    -------
    QPResult
        ``status`` is ``"infeasible"`` when the constraints admit no point,
        ``"max_iters"`` when the cycling guard trips.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = g.size
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.atleast_1d(np.asarray(b_eq, dtype=float))
    A_in = np.zeros((0, n)) if A_in is None else np.atleast_2d(np.asarray(A_in, dtype=float))
    b_in = np.zeros(0) if b_in is None else np.atleast_1d(np.asarray(b_in, dtype=float))
    me, mi = A_eq.shape[0], A_in.shape[0]
    if max_iter is None:
        max_iter = 10 * (n + me + mi) + 50

    try:
        L = np.linalg.cholesky(0.5 * (H + H.T))
    except np.linalg.LinAlgError as exc:
        raise QPError("Hessian is not positive definite") from exc
    Linv = sla.solve_triangular(L, np.eye(n), lower=True)

    # row norms for scale-aware violation tests
    nrm_eq = np.maximum(np.linalg.norm(A_eq, axis=1), 1e-300)
    nrm_in = np.maximum(np.linalg.norm(A_in, axis=1), 1e-300)

    x = -Linv.T @ (Linv @ g)
    active: list[int] = []   # stacked index: eq rows 0..me-1, ineq rows me..me+mi-1
    u = np.zeros(0)          # multipliers of the active rows
    J = Linv.T.copy()
    Rm = np.zeros((0, 0))

    def row(k):
        return A_eq[k] if k < me else A_in[k - me]

    def refactor():
        nonlocal J, Rm
        if not active:
            J, Rm = Linv.T.copy(), np.zeros((0, 0))
            return
        N = np.stack([row(k) for k in active], axis=1)
        Q, Rfull = np.linalg.qr(Linv @ N, mode="complete")
        J = Linv.T @ Q
        Rm = Rfull[: len(active), :]

    priority = np.zeros(mi, dtype=bool)
    if warm_active is not None:
        wa = np.asarray(list(warm_active), dtype=int)
        wa = wa[(wa >= 0) & (wa < mi)]
        priority[wa] = True

    iters = 0
    status = "optimal"
    pending_eq = list(range(me))
    while True:
        # pick the next constraint to add
        if pending_eq:
            p = pending_eq[0]
        else:
            if mi == 0:
                break
            viol = (A_in @ x - b_in) / nrm_in
            viol[[k - me for k in active if k >= me]] = np.inf
            cand = viol < -tol
            if not np.any(cand):
                break
            pool = cand & priority
            if np.any(pool):
                pick = np.where(pool, viol, np.inf)
            else:
                pick = np.where(cand, viol, np.inf)
            p = me + int(np.argmin(pick))
        n_p = row(p)
        b_p = b_eq[p] if p < me else b_in[p - me]
        u_plus = np.append(u, 0.0)
        while True:
            iters += 1
            if iters > max_iter:
                status = "max_iters"
                break
            q = len(active)
            d = J.T @ n_p
            z = J[:, q:] @ d[q:]
            r = sla.solve_triangular(Rm, d[:q], lower=False) if q else np.zeros(0)
            # partial (dual) step length
            t1, drop = np.inf, -1
            for j in range(q):
                if active[j] >= me and r[j] > 0:
                    ratio = u_plus[j] / r[j]
                    if ratio < t1:
                        t1, drop = ratio, j
            # full (primal) step length
            zn = float(z @ n_p)
            if np.linalg.norm(z) <= 1e-12 * max(1.0, np.linalg.norm(n_p)) or zn <= 0:
                t2 = np.inf
            else:
                t2 = (b_p - float(n_p @ x)) / zn
                if p < me and t2 < 0:
                    # equalities may need a negative multiplier
                    n_p, b_p = -n_p, -b_p
                    continue
            t = min(t1, t2)
            if not np.isfinite(t):
                status = "infeasible"
                break
            if not np.isfinite(t2):
                u_plus[:q] -= t * r
                u_plus[q] += t
                del active[drop]
                u_plus = np.delete(u_plus, drop)
                refactor()
                continue
            x = x + t * z
            u_plus[:q] -= t * r
            u_plus[q] += t
            if t == t2:
                active.append(p)
                u = u_plus
                refactor()
                if p < me:
                    pending_eq.pop(0)
                break
            del active[drop]
            u_plus = np.delete(u_plus, drop)
            refactor()
        if status != "optimal":
            break

    dual_eq = np.zeros(me)
    dual_in = np.zeros(mi)
    for k, mult in zip(active, u):
        if k >= me:
            dual_in[k - me] = mult
    if me:
        # equality rows may have been added with flipped orientation, so
        # recover their multipliers from stationarity: Hx + g = A_eq' y + A_in' lam
        resid = H @ x + g - A_in.T @ dual_in
        dual_eq = np.linalg.lstsq(A_eq.T, resid, rcond=None)[0]
    obj = float(0.5 * x @ H @ x + g @ x)
    act_in = np.array(sorted(k - me for k in active if k >= me), dtype=int)
    return QPResult(x=x, obj=obj, status=status, iterations=iters, active=act_in,
                    dual_eq=dual_eq, dual_in=dual_in)


def kkt_residual(H, g, A_eq, b_eq, A_in, b_in, res: QPResult) -> float:
    """Max of stationarity, primal feasibility and complementarity violations."""
    n = len(g)
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(A_eq)
    A_in = np.zeros((0, n)) if A_in is None else np.atleast_2d(A_in)
    b_eq = np.zeros(0) if b_eq is None else np.atleast_1d(b_eq)
    b_in = np.zeros(0) if b_in is None else np.atleast_1d(b_in)
    x = res.x
    stat = H @ x + g - A_eq.T @ res.dual_eq - A_in.T @ res.dual_in
    slack = A_in @ x - b_in
    parts = [np.abs(stat).max(initial=0.0), np.abs(A_eq @ x - b_eq).max(initial=0.0),
             np.maximum(-slack, 0).max(initial=0.0), np.maximum(-res.dual_in, 0).max(initial=0.0),
             np.abs(res.dual_in * slack).max(initial=0.0)]
    return float(max(parts))
