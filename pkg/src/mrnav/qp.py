"""Dense dual active-set QP solver (Goldfarb-Idnani).

Solves   min 0.5 x^T H x + g^T x   s.t.   C x >= d

for a symmetric positive definite H. The method starts from the
unconstrained minimiser and adds the most violated constraint at each
outer iteration, dropping constraints whose multipliers would turn
negative. It suits MPC subproblems where few of the many inequality rows
end up active.

A guessed active set (typically the one returned by the previous solve)
can be supplied; it is accepted only if the resulting KKT point is primal
and dual feasible, otherwise the full dual method runs from scratch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class QPError(RuntimeError):
    def __init__(self, msg, iterations=0, active=()):
        super().__init__(msg)
        self.iterations = iterations
        self.active = tuple(active)


class QPInfeasible(QPError):
    pass


@dataclass
class QPResult:
    x: np.ndarray
    multipliers: np.ndarray  # one per row of C, zero for inactive rows
    active: list
    iterations: int


def factor_inverse(H: np.ndarray) -> np.ndarray:
    """Inverse of an SPD matrix through its Cholesky factor."""
    L = np.linalg.cholesky(H)
    Linv = np.linalg.solve(L, np.eye(len(H)))
    return Linv.T @ Linv


def _try_guess(Hinv, g, C, d, guess, tol):
    W = sorted(set(int(i) for i in guess if 0 <= i < len(d)))
    if not W:
        return None
    N = C[W]
    HN = Hinv @ N.T
    try:
        lam = np.linalg.solve(N @ HN, d[W] + N @ (Hinv @ g))
    except np.linalg.LinAlgError:
        return None
    if np.any(lam < -tol):
        return None
    x = HN @ lam - Hinv @ g
    scale = np.maximum(1.0, np.abs(d))
    if np.any(C @ x - d < -tol * scale):
        return None
    mult = np.zeros(len(d))
    mult[W] = np.maximum(lam, 0.0)
    return QPResult(x=x, multipliers=mult, active=W, iterations=0)


def solve_qp(H, g, C, d, Hinv=None, guess=None, tol=1e-9, max_iter=500) -> QPResult:
    g = np.asarray(g, dtype=float)
    C = np.asarray(C, dtype=float).reshape(-1, len(g))
    d = np.asarray(d, dtype=float)
    if Hinv is None:
        try:
            Hinv = factor_inverse(np.asarray(H, dtype=float))
        except np.linalg.LinAlgError as e:
            raise QPError(f"Hessian is not positive definite: {e}") from e

    if guess is not None and len(guess):
        res = _try_guess(Hinv, g, C, d, guess, tol)
        if res is not None:
            return res

    nx = len(g)
    x = -Hinv @ g
    cap = min(nx, len(d)) + 1
    active: list[int] = []
    lam = np.zeros(cap)
    HN = np.zeros((nx, cap))  # Hinv @ C[active].T
    M = np.zeros((cap, cap))  # C[active] @ Hinv @ C[active].T
    scale = np.maximum(1.0, np.abs(d))

    def drop(k):
        m = len(active)
        del active[k]
        HN[:, k:m - 1] = HN[:, k + 1:m].copy()
        M[k:m - 1, :m] = M[k + 1:m, :m].copy()
        M[:m - 1, k:m - 1] = M[:m - 1, k + 1:m].copy()
        lam[k:m - 1] = lam[k + 1:m].copy()

    it = 0
    while True:
        slack = C @ x - d
        p = int(np.argmin(slack / scale))
        if slack[p] >= -tol * scale[p]:
            break
        n_p = C[p]
        hn = Hinv @ n_p
        lam_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                raise QPError("active-set iteration limit reached", it, active)
            m = len(active)
            if m:
                NAhn = C[active] @ hn
                try:
                    r = np.linalg.solve(M[:m, :m], NAhn)
                except np.linalg.LinAlgError as e:
                    raise QPError(f"singular active-set system: {e}", it, active) from e
                z = hn - HN[:, :m] @ r
                pos = r > 1e-12
                if np.any(pos):
                    ratios = np.where(pos, lam[:m] / np.where(pos, r, 1.0), np.inf)
                    k_drop = int(np.argmin(ratios))
                    t1 = float(ratios[k_drop])
                else:
                    k_drop, t1 = -1, np.inf
            else:
                NAhn = np.zeros(0)
                r = np.zeros(0)
                z = hn
                k_drop, t1 = -1, np.inf
            zn = float(z @ n_p)
            viol = float(n_p @ x - d[p])
            t2 = -viol / zn if zn > 1e-12 * max(1.0, float(n_p @ hn)) else np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                raise QPInfeasible("constraints are infeasible", it, active)
            if not np.isfinite(t2):
                lam[:m] -= t1 * r
                lam_p += t1
                drop(k_drop)
                continue
            t = min(t1, t2)
            x = x + t * z
            lam[:m] -= t * r
            lam_p += t
            if t2 <= t1:
                HN[:, m] = hn
                M[:m, m] = NAhn
                M[m, :m] = NAhn
                M[m, m] = float(n_p @ hn)
                lam[m] = lam_p
                active.append(p)
                break
            drop(k_drop)

    mult = np.zeros(len(d))
    mult[active] = lam[:len(active)]
    return QPResult(x=x, multipliers=mult, active=list(active), iterations=it)
