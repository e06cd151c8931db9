"""Dense strictly convex QP solver (dual active set) with KKT diagnostics.

Solves

    min  0.5 x'Px + q'x
    s.t. A x  = b
         G x <= h

for positive definite ``P``. The dual method starts from the
unconstrained minimum and adds violated constraints one at a time, so no
feasible starting point is needed and infeasibility is detected when a
violated constraint cannot be satisfied by any step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from coopsim.core import ValidationError

OPTIMAL, INFEASIBLE, MAX_ITER = "optimal", "infeasible", "max_iter"


@dataclass(frozen=True, eq=False)
class KKTResiduals:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    @property
    def max(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)


@dataclass(frozen=True, eq=False)
class QPResult:
    x: np.ndarray
    objective: float
    status: str
    y_eq: np.ndarray  # multipliers of A x = b (Lagrangian sign: + y'(Ax - b))
    z_ineq: np.ndarray  # multipliers of G x <= h, nonnegative at optimum
    active: tuple[int, ...]  # indices into G of active inequalities
    iterations: int
    kkt: KKTResiduals = field(default=KKTResiduals(np.inf, np.inf, np.inf, np.inf))

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def _as_problem(P, q, A, b, G, h):
    P = np.atleast_2d(np.asarray(P, dtype=float))
    q = np.asarray(q, dtype=float).reshape(-1)
    n = len(q)
    if P.shape != (n, n):
        raise ValidationError(f"P has shape {P.shape}, expected ({n}, {n})")
    A = np.zeros((0, n)) if A is None else np.asarray(A, dtype=float).reshape(-1, n)
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float).reshape(-1)
    G = np.zeros((0, n)) if G is None else np.asarray(G, dtype=float).reshape(-1, n)
    h = np.zeros(0) if h is None else np.asarray(h, dtype=float).reshape(-1)
    if len(A) != len(b) or len(G) != len(h):
        raise ValidationError("constraint matrices and right-hand sides disagree in length")
    for name, arr in (("P", P), ("q", q), ("A", A), ("b", b), ("G", G), ("h", h)):
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{name} contains non-finite entries")
    return 0.5 * (P + P.T), q, A, b, G, h


def kkt_residuals(P, q, A, b, G, h, x, y_eq, z_ineq) -> KKTResiduals:
    """Infinity-norm residuals of the four KKT conditions."""
    P, q, A, b, G, h = _as_problem(P, q, A, b, G, h)
    x = np.asarray(x, dtype=float)
    grad = P @ x + q + A.T @ y_eq + G.T @ z_ineq
    slack = G @ x - h
    prim = max(np.abs(A @ x - b).max(initial=0.0), np.maximum(slack, 0.0).max(initial=0.0))
    return KKTResiduals(
        stationarity=float(np.abs(grad).max(initial=0.0)),
        primal=float(prim),
        dual=float(np.maximum(-z_ineq, 0.0).max(initial=0.0)),
        complementarity=float(np.abs(z_ineq * slack).max(initial=0.0)),
    )


def solve_qp(P, q, A=None, b=None, G=None, h=None, *, max_iter: int = 2000, tol: float = 1e-10) -> QPResult:
    """Dual active-set solve followed by a Newton polish on the final active set."""
    P, q, A, b, G, h = _as_problem(P, q, A, b, G, h)
    n, me, mi = len(q), len(A), len(G)
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise ValidationError("P must be positive definite") from None
    # J J' = P^-1, kept as J = L^-T Q with J' N_active = [R; 0]; normals use the ">= 0" convention
    J = np.linalg.inv(L).T
    R = np.zeros((n, n))
    N_all = np.vstack([A, -G])
    c_all = np.concatenate([b, -h])
    is_eq = np.arange(me + mi) < me
    eq_sign = np.ones(me)

    x = -np.linalg.solve(P, q)
    active: list[int] = []
    u = np.zeros(0)
    scale = 1.0 + np.abs(N_all).max(initial=0.0) * (1.0 + np.abs(c_all).max(initial=0.0))
    it = 0

    def normal(i: int) -> np.ndarray:
        return N_all[i] * (eq_sign[i] if i < me else 1.0)

    def rhs(i: int) -> float:
        return c_all[i] * (eq_sign[i] if i < me else 1.0)

    status = OPTIMAL
    while True:
        it += 1
        if it > max_iter:
            status = MAX_ITER
            break
        # pick the next constraint: unsatisfied equalities first, then the most violated inequality
        p = -1
        for i in range(me):
            if i not in active:
                s = A[i] @ x - b[i]
                eq_sign[i] = -1.0 if s > 0 else 1.0
                p = i
                break
        if p < 0 and mi:
            s_in = N_all[me:] @ x - c_all[me:]
            s_in[[a - me for a in active if a >= me]] = np.inf
            j = int(np.argmin(s_in))
            if s_in[j] < -tol * scale:
                p = me + j
        if p < 0:
            break
        n_p = normal(p)
        u_plus = np.append(u, 0.0)
        while True:
            k = len(active)
            d = J.T @ n_p
            z = J[:, k:] @ d[k:]
            r = _back_substitute(R[:k, :k], d[:k])
            # partial step: largest move before an active inequality multiplier hits zero
            t1, drop = np.inf, -1
            for idx, i in enumerate(active):
                if not is_eq[i] and r[idx] > 1e-14:
                    ratio = u_plus[idx] / r[idx]
                    if ratio < t1:
                        t1, drop = ratio, idx
            zn = float(z @ n_p)
            s_p = float(n_p @ x - rhs(p))
            t2 = np.inf if zn <= 1e-14 * max(1.0, float(n_p @ n_p)) else -s_p / zn
            t = min(t1, t2)
            if not np.isfinite(t):
                status = INFEASIBLE
                break
            if np.isfinite(t2):
                x = x + t * z
            u_plus = u_plus + t * np.append(-r, 1.0)
            if t2 <= t1:
                _add_column(J, R, d, k)
                active.append(p)
                u = u_plus
                break
            # drop the blocking constraint and retry the same p
            _drop_column(J, R, drop, k)
            active.pop(drop)
            u_plus = np.delete(u_plus, drop)
        if status != OPTIMAL:
            break

    x, u = _polish(P, q, N_all, c_all, me, eq_sign, active, x, u)
    y_eq = np.zeros(me)
    z_in = np.zeros(mi)
    for idx, i in enumerate(active):
        if i < me:
            y_eq[i] = -u[idx] * eq_sign[i]
        else:
            z_in[i - me] = u[idx]
    kkt = kkt_residuals(P, q, A, b, G, h, x, y_eq, z_in)
    if status == OPTIMAL and kkt.primal > 1e-6 * max(1.0, scale):
        status = INFEASIBLE
    obj = float(0.5 * x @ P @ x + q @ x)
    return QPResult(x, obj, status, y_eq, z_in, tuple(sorted(i - me for i in active if i >= me)), it, kkt)


def _givens(a: float, b: float) -> tuple[float, float]:
    rho = np.hypot(a, b)
    if rho == 0.0:
        return 1.0, 0.0
    return a / rho, b / rho


def _back_substitute(R: np.ndarray, d: np.ndarray) -> np.ndarray:
    k = len(d)
    out = np.zeros(k)
    for i in range(k - 1, -1, -1):
        out[i] = (d[i] - R[i, i + 1 : k] @ out[i + 1 : k]) / R[i, i]
    return out


def _add_column(J: np.ndarray, R: np.ndarray, d: np.ndarray, k: int) -> None:
    """Reflect the trailing columns of J so that J'n vanishes below entry k, then append it to R."""
    tail = d[k:]
    norm = np.linalg.norm(tail)
    v = tail.copy()
    v[0] += norm if tail[0] >= 0 else -norm
    vv = float(v @ v)
    if vv > 0.0 and len(tail) > 1:
        J[:, k:] -= np.outer(J[:, k:] @ v, (2.0 / vv) * v)
        top = -norm if tail[0] >= 0 else norm
    else:
        top = tail[0]
    R[:k, k] = d[:k]
    R[k, k] = top


def _drop_column(J: np.ndarray, R: np.ndarray, idx: int, k: int) -> None:
    """Remove column ``idx`` of the k active columns and restore triangularity."""
    R[:k, idx : k - 1] = R[:k, idx + 1 : k]
    R[:, k - 1] = 0.0
    for i in range(idx, k - 1):
        c, s = _givens(R[i, i], R[i + 1, i])
        if s == 0.0:
            continue
        ri, ri1 = R[i, i : k - 1].copy(), R[i + 1, i : k - 1].copy()
        R[i, i : k - 1] = c * ri + s * ri1
        R[i + 1, i : k - 1] = -s * ri + c * ri1
        a, b = J[:, i].copy(), J[:, i + 1].copy()
        J[:, i] = c * a + s * b
        J[:, i + 1] = -s * a + c * b
    R[k - 1, :] = 0.0


def _polish(P, q, N_all, c_all, me, eq_sign, active, x, u):
    """Re-solve the equality-constrained KKT system of the final active set."""
    if not active:
        return -np.linalg.solve(P, q), u
    N = np.array([N_all[i] * (eq_sign[i] if i < me else 1.0) for i in active])
    c = np.array([c_all[i] * (eq_sign[i] if i < me else 1.0) for i in active])
    n, k = P.shape[0], len(active)
    K = np.block([[P, -N.T], [N, np.zeros((k, k))]])
    try:
        sol = np.linalg.solve(K, np.concatenate([-q, c]))
    except np.linalg.LinAlgError:
        return x, u
    xp, up = sol[:n], sol[n:]
    if not np.all(np.isfinite(sol)):
        return x, u
    # keep the polished point only if it does not degrade the active-set solution
    if np.abs(xp - x).max() > 1e-6 * (1.0 + np.abs(x).max()):
        return x, u
    return xp, up
