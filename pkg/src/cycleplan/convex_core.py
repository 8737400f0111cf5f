"""Small dense convex programs: quadratic objective, affine equalities,
convex quadratic and linear inequalities.

    minimise    1/2 x'Px + q'x + c
    subject to  A x = b
                x'Q_k x + l_k'x <= r_k
                G x <= h

``solve`` eliminates the equalities through a null-space basis, then runs an
infeasible-start primal-dual interior point method (slack form, Mehrotra
predictor-corrector) on the reduced problem. If it does not converge, a
phase-1 problem (minimise the largest constraint violation) decides between
``Infeasible`` and ``MaxIter``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla


_PROX = 1e-10
_GROW = 2.0


class IllConditioned(RuntimeError):
    """Newton system could not be factorised even after regularisation."""


class ProvablyInfeasible(ValueError):
    pass


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"
    DEGENERATE = "Degenerate"


@dataclass(eq=False)
class QuadConstraint:
    """x[idx]' Q x[idx] + l'x <= r.

    With ``idx`` None, Q is the full n x n matrix; it is compressed to its
    nonzero rows and columns on construction so long horizons stay cheap.
    """

    Q: np.ndarray
    l: np.ndarray
    r: float
    idx: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.asarray(self.Q, float)
        self.l = np.asarray(self.l, float).reshape(-1)
        self.r = float(self.r)
        if self.idx is None:
            self.Q = self.Q.reshape(len(self.l), len(self.l))
            nz = np.flatnonzero(np.any(self.Q != 0, axis=0) | np.any(self.Q != 0, axis=1))
            self.idx = nz
            self.Q = self.Q[np.ix_(nz, nz)]
        else:
            self.idx = np.asarray(self.idx, int).reshape(-1)
            self.Q = self.Q.reshape(len(self.idx), len(self.idx))

    def value(self, x) -> float:
        x = np.asarray(x, float)
        xs = x[self.idx]
        return float(xs @ self.Q @ xs + self.l @ x - self.r)

    def dense(self) -> np.ndarray:
        n = len(self.l)
        M = np.zeros((n, n))
        M[np.ix_(self.idx, self.idx)] = self.Q
        return M


@dataclass(eq=False)
class ConvexProgram:
    n: int
    P: np.ndarray
    q: np.ndarray
    c: float = 0.0
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    quad: list[QuadConstraint] = field(default_factory=list)
    G: np.ndarray | None = None
    h: np.ndarray | None = None

    def __post_init__(self):
        n = self.n
        self.P = np.asarray(self.P, float).reshape(n, n)
        self.q = np.asarray(self.q, float).reshape(n)
        self.A = np.zeros((0, n)) if self.A is None else np.asarray(self.A, float).reshape(-1, n)
        self.b = np.zeros(0) if self.b is None else np.asarray(self.b, float).reshape(-1)
        self.G = np.zeros((0, n)) if self.G is None else np.asarray(self.G, float).reshape(-1, n)
        self.h = np.zeros(0) if self.h is None else np.asarray(self.h, float).reshape(-1)
        if len(self.A) != len(self.b) or len(self.G) != len(self.h):
            raise ValueError("row counts of A/b or G/h differ")

    # -- convenience builders -------------------------------------------
    def add_eq(self, a, b: float) -> None:
        self.A = np.vstack([self.A, np.asarray(a, float).reshape(1, self.n)])
        self.b = np.append(self.b, float(b))

    def add_lin(self, a, b: float) -> None:
        self.G = np.vstack([self.G, np.asarray(a, float).reshape(1, self.n)])
        self.h = np.append(self.h, float(b))

    def add_quad(self, Q, l, r: float, idx=None) -> None:
        self.quad.append(QuadConstraint(Q, l, r, idx))

    # -- evaluation -------------------------------------------------------
    def objective(self, x) -> float:
        x = np.asarray(x, float)
        return float(0.5 * x @ self.P @ x + self.q @ x + self.c)

    def eq_residual(self, x) -> float:
        if len(self.b) == 0:
            return 0.0
        return float(np.abs(self.A @ x - self.b).max())

    def ineq_values(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        vq = [qc.value(x) for qc in self.quad]
        vl = (self.G @ x - self.h).tolist() if len(self.h) else []
        return np.array(vq + vl, float)

    def max_violation(self, x) -> float:
        v = self.ineq_values(x)
        return float(max(0.0, v.max())) if v.size else 0.0

    def validate(self, clip: float = 1e-9) -> None:
        """Symmetrise P and every Q; clip tiny negative eigenvalues, reject others."""
        self.P = _psd(self.P, clip, "P")
        for k, qc in enumerate(self.quad):
            qc.Q = _psd(qc.Q, clip, f"Q[{k}]")


def _psd(M, clip, name):
    M = 0.5 * (M + M.T)
    if not M.any():
        return M
    w, V = np.linalg.eigh(M)
    if w.min() < -clip * max(1.0, abs(w).max()):
        raise ValueError(f"{name} is not positive semidefinite (min eigenvalue {w.min():.3g})")
    if w.min() < 0:
        M = (V * np.maximum(w, 0.0)) @ V.T
    return M


@dataclass(eq=False)
class Solution:
    status: Status
    x: np.ndarray
    objective_value: float
    kkt_residuals: dict
    iterations: int = 0
    duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    slacks: np.ndarray = field(default_factory=lambda: np.zeros(0))
    regularized: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


# --------------------------------------------------------------------------
# presolve

def presolve(p: ConvexProgram, tol: float = 1e-12) -> ConvexProgram:
    """Normalise rows, turn opposite inequality pairs into equalities and drop
    dependent equality rows. The feasible set and objective are unchanged."""
    n = p.n
    G, hv = p.G.copy(), p.h.copy()
    A, b = p.A.copy(), p.b.copy()

    # linear inequalities: unit rows, drop empty rows
    if len(hv):
        nrm = np.linalg.norm(G, axis=1)
        empty = nrm <= tol
        if np.any(hv[empty] < -1e-9):
            raise ProvablyInfeasible("0 <= b with b < 0 in a linear inequality")
        G, hv, nrm = G[~empty], hv[~empty], nrm[~empty]
        G = G / nrm[:, None]
        hv = hv / nrm

    # opposite pairs a'x <= b, -a'x <= -b  ->  a'x = b
    if len(hv) > 1:
        S = G @ G.T
        used = np.zeros(len(hv), bool)
        new_eq = []
        ii, jj = np.nonzero(np.triu(S <= -1.0 + 1e-12, 1))
        for i, j in zip(ii, jj):
            if used[i] or used[j]:
                continue
            if np.abs(G[i] + G[j]).max() > 1e-12:
                continue
            slack = hv[i] + hv[j]  # width of the slab
            if slack < -1e-9:
                raise ProvablyInfeasible("opposite inequalities leave an empty slab")
            if slack <= 1e-12:
                new_eq.append((G[i], 0.5 * (hv[i] - hv[j])))
                used[i] = used[j] = True
        if new_eq:
            A = np.vstack([A] + [e[0][None, :] for e in new_eq])
            b = np.concatenate([b, [e[1] for e in new_eq]])
            G, hv = G[~used], hv[~used]

    # equalities: unit rows, remove dependent ones, check consistency
    if len(b):
        nrm = np.linalg.norm(A, axis=1)
        empty = nrm <= tol
        if np.any(np.abs(b[empty]) > 1e-9):
            raise ProvablyInfeasible("0 = b with b != 0")
        A, b, nrm = A[~empty], b[~empty], nrm[~empty]
        A = A / nrm[:, None]
        b = b / nrm
    if len(b):
        _, R, piv = sla.qr(A.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        rank = int(np.sum(diag > 1e-10 * max(1.0, diag[0] if diag.size else 0.0)))
        keep = np.sort(piv[:rank])
        if rank < len(b):
            x_ls = np.linalg.lstsq(A[keep], b[keep], rcond=None)[0]
            if np.abs(A @ x_ls - b).max() > 1e-9 * (1.0 + np.abs(b).max()):
                raise ProvablyInfeasible("inconsistent equality constraints")
            A, b = A[keep], b[keep]

    return ConvexProgram(
        n=n, P=p.P, q=p.q, c=p.c, A=A, b=b,
        quad=[QuadConstraint(qc.Q, qc.l, qc.r, qc.idx) for qc in p.quad], G=G, h=hv,
    )


# --------------------------------------------------------------------------
# reduced problem and interior point core

@dataclass(eq=False)
class _Reduced:
    P: np.ndarray
    q: np.ndarray
    F: np.ndarray  # (k, rank, d); row i's quadratic form is F[i]' F[i]
    L: np.ndarray  # (k, d)
    r: np.ndarray  # (k,)
    G: np.ndarray  # (p, d)
    h: np.ndarray  # (p,)

    @property
    def d(self):
        return len(self.q)

    @property
    def m(self):
        return len(self.r) + len(self.h)

    def g_and_jac(self, w):
        if len(self.r):
            Fw = np.einsum("krd,d->kr", self.F, w)
            gq = np.einsum("kr,kr->k", Fw, Fw) + self.L @ w - self.r
            Jq = 2.0 * np.einsum("kr,krd->kd", Fw, self.F) + self.L
        else:
            gq = np.zeros(0)
            Jq = np.zeros((0, self.d))
        gl = self.G @ w - self.h
        return np.concatenate([gq, gl]), np.vstack([Jq, self.G])

    def objective(self, w):
        return 0.5 * w @ self.P @ w + self.q @ w


def _factor(M, counter, shifts=(1e-10, 1e-8, 1e-6)):
    """Cholesky factor of the Jacobi-scaled matrix, as (factor, scaling).

    Active constraints make some diagonal entries many orders larger than
    others; scaling to a unit diagonal first keeps the factorisation stable.
    Falls back to small diagonal shifts (counted in ``counter``).
    """
    dg = np.diag(M).copy()
    dg[dg <= 0] = 1.0
    sc = 1.0 / np.sqrt(dg)
    Ms = M * sc[:, None] * sc[None, :]
    try:
        return sla.cho_factor(Ms, lower=False, check_finite=False), sc, None
    except (np.linalg.LinAlgError, ValueError):
        pass
    for eps in shifts:
        counter[0] += 1
        try:
            return sla.cho_factor(Ms + eps * np.eye(len(Ms)), lower=False, check_finite=False), sc, M
        except (np.linalg.LinAlgError, ValueError):
            continue
    raise IllConditioned("Newton system is not positive definite")


def _chosolve(fac, rhs, refine: int = 5):
    """Solve with the factor; a regularised factor is corrected by iterative
    refinement against the original matrix."""
    cf, sc, M = fac
    x = sc * sla.cho_solve(cf, sc * rhs, check_finite=False)
    if M is None:
        return x
    for _ in range(refine):
        r = rhs - M @ x
        if np.abs(r).max() <= 1e-14 * (1.0 + np.abs(rhs).max()):
            break
        x = x + sc * sla.cho_solve(cf, sc * r, check_finite=False)
    return x


def _max_step(v, dv):
    neg = dv < 0
    if not neg.any():
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _ipm(red: _Reduced, tol: float, max_iter: int, w0=None, obj_scale: float = 1.0):
    """Returns (converged, w, s, z, iterations, regularisations, diverged).

    ``obj_scale`` undoes the internal objective scaling for the gap test so the
    stopping rule holds in the caller's units.
    """
    d, m = red.d, red.m
    w = np.zeros(d) if w0 is None else np.asarray(w0, float).copy()
    counter = [0]
    if m == 0:
        # unconstrained quadratic
        try:
            cf = _factor(red.P, counter)
        except IllConditioned:
            return False, w, np.zeros(0), np.zeros(0), 0, counter[0], True
        w = -_chosolve(cf, red.q)
        ok = np.abs(red.P @ w + red.q).max() <= tol * (1 + np.abs(red.q).max())
        return bool(ok), w, np.zeros(0), np.zeros(0), 1, counter[0], not ok
    g, J = red.g_and_jac(w)
    s = np.maximum(-g, 1.0)
    z = np.ones(m)
    qscale = 1.0 + float(np.abs(red.q).max())
    nq = len(red.r)
    stall = 0
    for it in range(1, max_iter + 1):
        rd = red.P @ w + red.q + J.T @ z
        rp = g + s
        gap = float(s @ z)
        mu = gap / m
        obj = red.objective(w)
        # dual residual relative to the largest term of the stationarity sum
        dscale = max(qscale, float(np.abs(red.P @ w).max()), float((np.abs(J).T @ z).max()))
        if (np.abs(rp).max() <= tol and np.abs(rd).max() <= tol * dscale
                and gap * obj_scale <= tol * (1.0 + abs(obj) * obj_scale)):
            return True, w, s, z, it, counter[0], False
        if not np.isfinite(obj) or np.abs(w).max() > 1e12 or z.max() > 1e14:
            return False, w, s, z, it, counter[0], True

        H = red.P.copy()
        if nq:
            Fz = (red.F * np.sqrt(z[:nq])[:, None, None]).reshape(-1, d)
            H += 2.0 * Fz.T @ Fz
        D = z / s
        M = H + J.T @ (D[:, None] * J)
        aug = None
        try:
            cf = _factor(M, counter, shifts=())
        except IllConditioned:
            # near-parallel active rows make the normal matrix singular; the
            # augmented system keeps them apart. The primal proximal term bounds
            # steps along flat directions; the dual-block shift only makes
            # dependent active rows factorable and is refined away below.
            counter[0] += 1
            K = np.block([[H + _PROX * np.eye(d), J.T], [J, -np.diag(s / z)]])
            shift = _PROX * (np.arange(len(K)) >= d)
            aug = (sla.lu_factor(K - np.diag(shift), check_finite=False), K)

        def direction(rc):
            if aug is not None:
                lu, K = aug
                rhs = np.concatenate([-rd, -rp + rc / z])
                sol = sla.lu_solve(lu, rhs, check_finite=False)
                for _ in range(5):
                    sol = sol + sla.lu_solve(lu, rhs - K @ sol, check_finite=False)
                dw, dz = sol[:d], sol[d:]
                ds = -rp - J @ dw
                # on nearly active rows the complementarity equation fixes ds to
                # full relative precision, the primal row only to absolute precision
                act = z > s
                ds[act] = -(rc[act] + s[act] * dz[act]) / z[act]
                return dw, ds, dz
            rhs = -rd - J.T @ (D * rp - rc / s)
            dw = _chosolve(cf, rhs)
            Jdw = J @ dw
            ds = -rp - Jdw
            dz = D * (Jdw + rp) - rc / s
            return dw, ds, dz

        dw_a, ds_a, dz_a = direction(s * z)
        a_aff = min(_max_step(s, ds_a), _max_step(z, dz_a))
        mu_aff = float((s + a_aff * ds_a) @ (z + a_aff * dz_a)) / m
        sigma = min(1.0, (mu_aff / mu) ** 3) if mu > 0 else 0.0
        dw, ds, dz = direction(s * z + ds_a * dz_a - sigma * mu)
        alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        rp_norm = float(np.abs(rp).max())
        while True:
            w_t = w + alpha * dw
            s_t = np.maximum(s + alpha * ds, 1e-300)
            g_t, J_t = red.g_and_jac(w_t)
            if nq:
                # curvature moves quadratic rows off their linear prediction; a
                # row that is strictly satisfied takes its exact slack
                sat = g_t[:nq] < 0
                s_t[:nq][sat] = -g_t[:nq][sat]
            # backtrack while that curvature makes the primal residual grow
            if (not nq or alpha < 1e-12
                    or np.abs(g_t + s_t).max() <= _GROW * max(rp_norm, mu, tol)):
                break
            alpha *= 0.5
        if alpha < 1e-12:
            stall += 1
            if stall > 3:
                return False, w, s, z, it, counter[0], False
        w, s, g, J = w_t, s_t, g_t, J_t
        z = np.maximum(z + alpha * dz, 1e-300)
    return False, w, s, z, max_iter, counter[0], False


def _phase1(red: _Reduced, tol: float, max_iter: int) -> float:
    """min t s.t. every (normalised) constraint <= t, t >= -1. Returns t*."""
    d, nq, nl = red.d, len(red.r), len(red.h)
    F = np.zeros(red.F.shape[:2] + (d + 1,))
    F[:, :, :d] = red.F
    L = np.hstack([red.L, -np.ones((nq, 1))]) if nq else np.zeros((0, d + 1))
    G = np.vstack([np.hstack([red.G, -np.ones((nl, 1))]), np.eye(1, d + 1, d) * -1.0])
    h = np.concatenate([red.h, [1.0]])
    P = np.zeros((d + 1, d + 1))
    P[:d, :d] = 1e-8 * np.eye(d)
    q = np.zeros(d + 1)
    q[d] = 1.0
    ph = _Reduced(P, q, F, L, red.r.copy(), G, h)
    w0 = np.zeros(d + 1)
    g0, _ = red.g_and_jac(np.zeros(d))
    w0[d] = max(0.0, float(g0.max()) if g0.size else 0.0) + 1.0
    ok, w, *_ = _ipm(ph, tol, max_iter, w0)
    g, _ = red.g_and_jac(w[:d])
    return float(g.max()) if g.size else -1.0


def _reduction(A, b, n):
    """x = xp + Z w with w a subset of the original variables.

    Basic columns come from a column-pivoted QR of A, so variables that no
    equality touches stay untouched coordinates of w (keeps the Newton matrix
    close to diagonal-dominant and well scaled).
    """
    m = len(b)
    if m == 0:
        return np.zeros(n), np.eye(n)
    _, _, piv = sla.qr(A, mode="economic", pivoting=True)
    basic, free = np.sort(piv[:m]), np.sort(piv[m:])
    lu = sla.lu_factor(A[:, basic], check_finite=False)
    xp = np.zeros(n)
    xp[basic] = sla.lu_solve(lu, b, check_finite=False)
    Z = np.zeros((n, len(free)))
    Z[free, np.arange(len(free))] = 1.0
    if len(free):
        Z[basic] = -sla.lu_solve(lu, A[:, free], check_finite=False)
    # one step of refinement on the particular solution
    xp[basic] += sla.lu_solve(lu, b - A @ xp, check_finite=False)
    return xp, Z


def _reduce_quads(quad, xp, Z):
    """Quadratic rows in the reduced variables as low-rank factors F'F plus
    linear and constant parts."""
    d = Z.shape[1]
    factors, L, r = [], np.zeros((len(quad), d)), np.zeros(len(quad))
    for i, qc in enumerate(quad):
        Zi, xi = Z[qc.idx], xp[qc.idx]
        Qx = qc.Q @ xi
        L[i] = 2.0 * Qx @ Zi + qc.l @ Z
        r[i] = qc.r - Qx @ xi - qc.l @ xp
        if not len(qc.idx):
            factors.append(np.zeros((0, d)))
            continue
        ev, V = np.linalg.eigh(qc.Q)
        keep = ev > 1e-14 * max(1.0, ev.max(initial=0.0))
        factors.append((np.sqrt(ev[keep])[:, None] * V[:, keep].T) @ Zi)
    rank = max(1, max(len(f) for f in factors))
    F = np.zeros((len(quad), rank, d))
    for i, f in enumerate(factors):
        F[i, : len(f)] = f
    return F, L, r


def solve(p: ConvexProgram, tol: float = 1e-8, max_iter: int = 100, *, validate: bool = True) -> Solution:
    if not (1e-12 <= tol <= 1e-2):
        raise ValueError("tol must lie in [1e-12, 1e-2]")
    if validate:
        p.validate()
    n = p.n
    try:
        pp = presolve(p)
    except ProvablyInfeasible as exc:
        return Solution(Status.INFEASIBLE, np.full(n, np.nan), math.nan,
                        {"primal_eq": math.inf, "primal_ineq": math.inf, "duality_gap": math.nan,
                         "reason": str(exc)})

    xp, Z = _reduction(pp.A, pp.b, n)
    d = Z.shape[1]

    Pr = Z.T @ pp.P @ Z
    qr_ = Z.T @ (pp.P @ xp + pp.q)
    scale = max(1.0, float(np.abs(Pr).max()) if d else 0.0, float(np.abs(qr_).max()) if d else 0.0)

    k = len(pp.quad)
    if k:
        F, L, r = _reduce_quads(pp.quad, xp, Z)
        # rows with a large gradient scale are normalised; small ones left alone.
        # The largest entry of a PSD matrix sits on its diagonal.
        qmax = np.einsum("krd,krd->kd", F, F).max(axis=1, initial=0.0)
        csc = np.maximum(1.0, np.maximum(qmax, np.abs(L).max(axis=1, initial=0.0)))
    else:
        F = np.zeros((0, 1, d))
        L = np.zeros((0, d))
        r = np.zeros(0)
        csc = np.ones(0)
    Gr = pp.G @ Z
    hr = pp.h - pp.G @ xp

    # constant constraints (zero gradient in the reduced space) are checked then dropped
    const_q = np.array([not F[i].any() and not L[i].any() for i in range(k)], bool)
    const_l = ~np.any(np.abs(Gr) > 0, axis=1) if len(hr) else np.zeros(0, bool)
    bad = (np.any(-r[const_q] > 1e-9 * np.maximum(1.0, np.abs(r[const_q])))
           or np.any(-hr[const_l] > 1e-9))
    red = _Reduced(Pr / scale, qr_ / scale, F[~const_q] / np.sqrt(csc[~const_q])[:, None, None],
                   L[~const_q] / csc[~const_q, None], r[~const_q] / csc[~const_q],
                   Gr[~const_l], hr[~const_l])

    if bad:
        status = Status.INFEASIBLE
        w, s, z, iters, nreg = np.zeros(d), np.zeros(red.m), np.zeros(red.m), 0, 0
    elif d == 0:
        w, s, z, iters, nreg = np.zeros(0), np.zeros(red.m), np.zeros(red.m), 0, 0
        status = Status.OPTIMAL
    else:
        ok, w, s, z, iters, nreg, diverged = _ipm(red, tol, max_iter, obj_scale=scale)
        if ok:
            status = Status.OPTIMAL
        else:
            t_star = _phase1(red, tol, max_iter)
            if t_star > 10 * tol:
                status = Status.INFEASIBLE
            elif diverged:
                status = Status.DEGENERATE
            else:
                status = Status.MAX_ITER

    x = xp + Z @ w
    g_orig = p.ineq_values(x)
    duals = np.zeros(len(p.quad) + len(p.h))
    if status is Status.OPTIMAL and red.m:
        # map multipliers of the reduced rows back to quadratic rows; linear rows
        # were re-normalised by presolve so only their count is reported
        zq = np.zeros(k)
        zq[~const_q] = z[: int((~const_q).sum())] * scale / csc[~const_q]
        duals[:k] = zq
    res = {
        "primal_eq": p.eq_residual(x),
        "primal_ineq": float(max(0.0, g_orig.max())) if g_orig.size else 0.0,
        "duality_gap": float(s @ z) * scale if s.size else 0.0,
    }
    return Solution(status, x, p.objective(x), res, iters, duals, -g_orig, nreg)


# --------------------------------------------------------------------------
# debug dump

def dump_program(p: ConvexProgram) -> str:
    """Plain-text dump: a header line per block followed by whitespace-separated rows."""
    out = [f"# convex program n={p.n}", f"c {p.c!r}"]

    def block(name, M):
        M = np.atleast_2d(M)
        out.append(f"{name} {M.shape[0]} {M.shape[1]}")
        out.extend(" ".join(repr(float(v)) for v in row) for row in M)

    block("P", p.P)
    block("q", p.q[None, :])
    block("A", p.A if len(p.b) else np.zeros((0, p.n)))
    block("b", p.b[None, :])
    for k, qc in enumerate(p.quad):
        out.append(f"quad {k} r {qc.r!r}")
        block("Q", qc.dense())
        block("l", qc.l[None, :])
    block("G", p.G if len(p.h) else np.zeros((0, p.n)))
    block("h", p.h[None, :])
    return "\n".join(out) + "\n"
