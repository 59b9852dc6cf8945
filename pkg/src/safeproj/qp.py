"""Euclidean projection onto {u : Au = b, Gu <= h} with an implicit backward pass.

The forward solve is a primal-dual interior-point method (Mehrotra
predictor-corrector) on the QP ``min 1/2 u'Qu + c'u``; the projection is the
special case ``Q = I, c = -u_hat``.  The backward pass differentiates the KKT
conditions at the solution with respect to ``u_hat`` only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.optimize import linprog

from . import autodiff as ad

logger = logging.getLogger(__name__)

ACTIVE_TOL = 1e-7
BACKWARD_REG = 1e-10
MAX_ITER = 100
POLISH_MU = 1e-6


class InfeasibleSetError(ValueError):
    """The constraint set is empty.

    ``certificate`` holds the phase-1 result: the minimal uniform violation
    ``max_violation`` and Farkas multipliers ``y`` (inequalities, >= 0) and
    ``z`` (equalities) with G'y + A'z ~ 0 and h'y + b'z < 0.
    """

    def __init__(self, message: str, certificate: Optional[dict] = None):
        super().__init__(message)
        self.certificate = certificate or {}


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, residuals: dict):
        super().__init__(message)
        self.residuals = residuals


class DegenerateGradientError(RuntimeError):
    pass


def _as_matrix(M, n: int) -> np.ndarray:
    if M is None:
        return np.zeros((0, n))
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if M.size == 0:
        return np.zeros((0, n))
    return M


def _as_vector(v, m: int) -> np.ndarray:
    if v is None:
        return np.zeros(m)
    return np.asarray(v, dtype=np.float64).reshape(-1)


class LinearConstraintSet:
    """Polyhedron {u in R^n : A u = b, G u <= h}.

    Redundant equality rows are dropped on construction and nonemptiness is
    verified: first by checking the supplied ``witnesses`` (any feasible point
    proves nonemptiness), then, failing that, by a phase-1 LP.  Pass
    ``check=False`` only for sets rebuilt from data already checked once.
    """

    __slots__ = ("A", "b", "G", "h", "n", "witness")

    def __init__(self, n: int, A=None, b=None, G=None, h=None, *,
                 check: bool = True, witnesses: Sequence = (), feas_tol: float = 1e-8):
        A = _as_matrix(A, n)
        G = _as_matrix(G, n)
        if A.shape[1] != n or G.shape[1] != n:
            raise ValueError(f"constraint matrices must have {n} columns, got A{A.shape} G{G.shape}")
        b = _as_vector(b, A.shape[0])
        h = _as_vector(h, G.shape[0])
        if b.shape[0] != A.shape[0] or h.shape[0] != G.shape[0]:
            raise ValueError("right-hand sides do not match constraint rows")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))
                and np.all(np.isfinite(G)) and np.all(np.isfinite(h))):
            raise ValueError("constraint data must be finite")
        if A.shape[0] and check:
            A, b = _reduce_equalities(A, b, feas_tol)
        self.n = int(n)
        self.A, self.b, self.G, self.h = A, b, G, h
        for arr in (self.A, self.b, self.G, self.h):
            arr.setflags(write=False)
        self.witness = None
        if check:
            self.witness = self._find_witness(witnesses, feas_tol)

    @property
    def n_eq(self) -> int:
        return self.A.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.G.shape[0]

    def violation(self, u) -> float:
        """Largest constraint violation of u (0 when feasible)."""
        u = np.asarray(u, dtype=np.float64)
        v = 0.0
        if self.n_ineq:
            v = max(v, float(np.max(self.G @ u - self.h)))
        if self.n_eq:
            v = max(v, float(np.max(np.abs(self.A @ u - self.b))))
        return v

    def contains(self, u, tol: float = 1e-6) -> bool:
        return self.violation(u) <= tol

    def _find_witness(self, witnesses, tol):
        for w in witnesses:
            w = np.asarray(w, dtype=np.float64).reshape(-1)
            if w.shape == (self.n,) and self.violation(w) <= tol:
                return w
        return phase1(self, tol)

    def __repr__(self):
        return f"LinearConstraintSet(n={self.n}, n_eq={self.n_eq}, n_ineq={self.n_ineq})"


def _reduce_equalities(A, b, tol):
    """Keep a maximal independent subset of rows; reject inconsistent systems."""
    _, R, piv = scipy.linalg.qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0:
        return A, b
    rank = int(np.sum(diag > 1e-10 * max(diag[0], 1.0)))
    if rank == A.shape[0]:
        return A, b
    keep = np.sort(piv[:rank])
    x, *_ = np.linalg.lstsq(A[keep], b[keep], rcond=None)
    resid = np.abs(A @ x - b)
    if np.max(resid) > max(tol, 1e-9 * (1.0 + np.max(np.abs(b)))):
        raise InfeasibleSetError(
            "equality constraints are inconsistent",
            {"max_violation": float(np.max(resid)), "y": np.zeros(0), "z": None})
    return A[keep], b[keep]


def phase1(C: LinearConstraintSet, tol: float = 1e-8) -> np.ndarray:
    """Return a point of C or raise InfeasibleSetError with a certificate.

    Solves min t s.t. Gu - t <= h, Au = b, t >= -1.
    """
    n, m = C.n, C.n_ineq
    if m == 0:
        if C.n_eq == 0:
            return np.zeros(n)
        x, *_ = np.linalg.lstsq(C.A, C.b, rcond=None)
        return x
    cost = np.zeros(n + 1)
    cost[-1] = 1.0
    A_ub = np.hstack([C.G, -np.ones((m, 1))])
    A_eq = np.hstack([C.A, np.zeros((C.n_eq, 1))]) if C.n_eq else None
    bounds = [(None, None)] * n + [(-1.0, None)]
    res = linprog(cost, A_ub=A_ub, b_ub=C.h, A_eq=A_eq, b_eq=C.b if C.n_eq else None,
                  bounds=bounds, method="highs")
    if res.status != 0:
        raise InfeasibleSetError(f"phase-1 LP failed: {res.message}", {"status": res.status})
    t = float(res.x[-1])
    if t <= tol:
        return np.asarray(res.x[:n])
    y = -np.asarray(res.ineqlin.marginals)
    z = -np.asarray(res.eqlin.marginals) if C.n_eq else np.zeros(0)
    raise InfeasibleSetError(
        f"constraint set is empty (minimal violation {t:.3e})",
        {"max_violation": t, "y": y, "z": z})


# ------------------------------------------------------------------ the solver

@dataclass(frozen=True)
class QPResult:
    x: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    iterations: int
    dual_residual: float
    primal_residual: float
    gap: float


def _max_step(v, dv):
    """Largest step keeping v + a dv nonnegative (inf when dv >= 0)."""
    neg = dv < 0
    if not neg.any():
        return np.inf
    return float((-v[neg] / dv[neg]).min())


def solve_qp(Q, c, C: LinearConstraintSet, tol: float = 1e-8,
             max_iter: int = MAX_ITER) -> QPResult:
    """Primal-dual interior point for min 1/2 x'Qx + c'x over C.

    ``Q`` may be None (linear program) or the string "identity".
    """
    n = C.n
    c = np.asarray(c, dtype=np.float64).reshape(n)
    G, h, A, b = C.G, C.h, C.A, C.b
    m, p = G.shape[0], A.shape[0]
    if Q is None:
        Qm = np.zeros((n, n))
    elif isinstance(Q, str):
        Qm = np.eye(n)
    else:
        Qm = np.asarray(Q, dtype=np.float64)

    if m == 0:
        return _solve_equality_only(Qm, c, A, b)

    GT = G.T
    x, z, nu = _initial_point(Qm, c, G, h, A, b)
    # shift slacks and multipliers into the positive orthant
    a_p = float(np.max(z))
    s = -z if a_p < 0 else -z + (1.0 + a_p)
    a_d = float(np.max(-z))
    lam = z if a_d < 0 else z + (1.0 + a_d)

    for it in range(max_iter + 1):
        r_d = Qm @ x + c + GT @ lam
        if p:
            r_d = r_d + A.T @ nu
            r_p = A @ x - b
        else:
            r_p = np.zeros(0)
        slack = h - G @ x
        r_g = s - slack
        mu = float(s @ lam) / m
        res_d = float(np.max(np.abs(r_d)))
        res_p = max(float(np.max(-slack)), float(np.max(np.abs(r_p))) if p else 0.0, 0.0)
        comp = float(np.max(np.abs(lam * slack)))
        if res_d <= tol and res_p <= tol and comp <= tol:
            return QPResult(x, lam, nu, it, res_d, res_p, comp)
        if mu < POLISH_MU:
            polished = _polish(Qm, c, C, lam > s, tol, it)
            if polished is not None:
                return polished
        if it == max_iter:
            break

        D = lam / s
        M = Qm + (GT * D) @ G
        try:
            L = np.linalg.cholesky(M)
            solve_M = lambda rhs: scipy.linalg.cho_solve((L, True), rhs, check_finite=False)
        except np.linalg.LinAlgError:
            Mreg = M + 1e-12 * (1.0 + np.trace(M) / n) * np.eye(n)
            lu = scipy.linalg.lu_factor(Mreg, check_finite=False)
            solve_M = lambda rhs: scipy.linalg.lu_solve(lu, rhs, check_finite=False)
        if p:
            MinvAT = solve_M(A.T)
            S = A @ MinvAT
            S_fac = scipy.linalg.cho_factor(S, check_finite=False)

        def newton(r_c):
            rhs = -r_d - GT @ (D * r_g - r_c / s)
            if p:
                Minv_rhs = solve_M(rhs)
                dnu = scipy.linalg.cho_solve(S_fac, A @ Minv_rhs + r_p, check_finite=False)
                dx = Minv_rhs - MinvAT @ dnu
            else:
                dx = solve_M(rhs)
                dnu = np.zeros(0)
            dlam = D * (G @ dx + r_g) - r_c / s
            ds = -(r_c + s * dlam) / lam
            return dx, dnu, dlam, ds

        # predictor
        r_c = s * lam
        dx, dnu, dlam, ds = newton(r_c)
        sl, dsl = np.concatenate((s, lam)), np.concatenate((ds, dlam))
        a_aff = min(1.0, _max_step(sl, dsl))
        mu_aff = float((s + a_aff * ds) @ (lam + a_aff * dlam)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        r_c = s * lam + ds * dlam - sigma * mu
        dx, dnu, dlam, ds = newton(r_c)
        alpha = min(1.0, 0.99 * _max_step(sl, np.concatenate((ds, dlam))))
        x = x + alpha * dx
        s = s + alpha * ds
        lam = lam + alpha * dlam
        if p:
            nu = nu + alpha * dnu
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(lam))):
            break

    raise NonConvergenceError(
        f"interior point did not converge in {max_iter} iterations",
        {"dual_residual": res_d, "primal_residual": res_p, "gap": comp})


def _polish(Q, c, C, guess, tol, it):
    """Solve the equality-constrained QP on a guessed active set.

    Returns a QPResult when the candidate satisfies every KKT condition to
    ``tol``; None otherwise (rank-deficient active set, wrong guess).
    """
    n, p = C.n, C.n_eq
    Ga = C.G[guess]
    Ca = np.vstack([C.A, Ga])
    k = Ca.shape[0]
    rhs_b = np.concatenate([C.b, C.h[guess]])
    K = np.zeros((n + k, n + k))
    K[:n, :n] = Q
    K[:n, n:] = Ca.T
    K[n:, :n] = Ca
    rhs = np.concatenate([-c, rhs_b])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        # singular for degenerate active sets or LPs; a least-squares
        # solution is still accepted if it satisfies the KKT conditions
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    if not np.all(np.isfinite(sol)):
        return None
    x, y = sol[:n], sol[n:]
    nu, lam_a = y[:p], y[p:]
    if lam_a.size and np.min(lam_a) < -tol:
        return None
    lam = np.zeros(C.n_ineq)
    lam[guess] = np.maximum(lam_a, 0.0)
    r_d = Q @ x + c + C.G.T @ lam + (C.A.T @ nu if p else 0.0)
    slack = C.h - C.G @ x
    res_d = float(np.max(np.abs(r_d)))
    res_p = max(float(np.max(-slack)), float(np.max(np.abs(C.A @ x - C.b))) if p else 0.0, 0.0)
    comp = float(np.max(np.abs(lam * slack)))
    if res_d <= tol and res_p <= tol and comp <= tol:
        return QPResult(x, lam, nu, it, res_d, res_p, comp)
    return None



def _initial_point(Q, c, G, h, A, b):
    """Minimiser of 1/2 x'Qx + c'x + 1/2 ||Gx - h||^2 subject to Ax = b.

    Returns x, the constraint residual z = Gx - h, and the equality multiplier.
    """
    n, p = Q.shape[0], A.shape[0]
    M = Q + G.T @ G
    rhs = -c + G.T @ h
    if p:
        K = np.block([[M, A.T], [A, np.zeros((p, p))]])
        sol = np.linalg.lstsq(K, np.concatenate([rhs, b]), rcond=None)[0]
        x, nu = sol[:n], sol[n:]
    else:
        try:
            x = scipy.linalg.solve(M, rhs, assume_a="pos", check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            x = np.linalg.lstsq(M, rhs, rcond=None)[0]
        nu = np.zeros(0)
    return x, G @ x - h, nu


def _solve_equality_only(Q, c, A, b):
    n, p = Q.shape[0], A.shape[0]
    K = np.block([[Q, A.T], [A, np.zeros((p, p))]]) if p else Q
    rhs = np.concatenate([-c, b]) if p else -c
    sol = np.linalg.solve(K, rhs)
    x, nu = sol[:n], sol[n:]
    r_d = Q @ x + c + (A.T @ nu if p else 0.0)
    r_p = A @ x - b if p else np.zeros(0)
    return QPResult(x, np.zeros(0), nu, 1, float(np.max(np.abs(r_d))) if n else 0.0,
                    float(np.max(np.abs(r_p))) if p else 0.0, 0.0)


# ------------------------------------------------------------------ projection

@dataclass(frozen=True)
class ProjectionSolution:
    u_star: np.ndarray
    lambda_star: np.ndarray
    nu_star: np.ndarray
    iterations: int
    primal_residual: float
    dual_residual: float
    gap: float


def project(u_hat, C: LinearConstraintSet, tol: float = 1e-8,
            active_guess=None) -> ProjectionSolution:
    """Closest point of C to u_hat in the Euclidean norm.

    ``active_guess`` is an optional boolean mask over the inequality rows,
    typically the active set of a previous, nearby projection. When the
    equality-constrained problem on that set already satisfies every KKT
    condition it is returned directly; otherwise the interior point runs.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    u_hat = np.asarray(u_hat, dtype=np.float64).reshape(-1)
    if u_hat.shape[0] != C.n:
        raise ValueError(f"u_hat has dimension {u_hat.shape[0]}, set has {C.n}")
    if C.violation(u_hat) <= 0.0:
        return ProjectionSolution(u_hat.copy(), np.zeros(C.n_ineq), np.zeros(C.n_eq),
                                  0, 0.0, 0.0, 0.0)
    res = None
    if active_guess is not None and C.n_ineq:
        guess = np.asarray(active_guess, dtype=bool).reshape(C.n_ineq)
        res = _polish(np.eye(C.n), -u_hat, C, guess, tol, 0)
    if res is None:
        res = solve_qp("identity", -u_hat, C, tol=tol)
    return ProjectionSolution(res.x, res.lam, res.nu, res.iterations,
                              res.primal_residual, res.dual_residual, res.gap)


def kkt_residuals(sol: ProjectionSolution, u_hat, C: LinearConstraintSet) -> dict:
    u = sol.u_star
    stat = u - np.asarray(u_hat, dtype=np.float64)
    if C.n_eq:
        stat = stat + C.A.T @ sol.nu_star
    if C.n_ineq:
        stat = stat + C.G.T @ sol.lambda_star
    slack = C.G @ u - C.h if C.n_ineq else np.zeros(0)
    return {
        "stationarity": float(np.max(np.abs(stat))) if stat.size else 0.0,
        "equality": float(np.max(np.abs(C.A @ u - C.b))) if C.n_eq else 0.0,
        "inequality": float(np.max(slack)) if slack.size else 0.0,
        "complementarity": float(np.max(np.abs(sol.lambda_star * slack))) if slack.size else 0.0,
        "dual_feasibility": float(-np.min(sol.lambda_star)) if slack.size else 0.0,
    }


def active_rows(sol: ProjectionSolution, C: LinearConstraintSet) -> np.ndarray:
    """Rows with a positive multiplier.

    A weakly active row (zero slack, zero multiplier) is left out, so at a
    point of the boundary reached from inside the derivative is the interior
    one and gradients can move u_hat back into the set.
    """
    if C.n_ineq == 0:
        return np.zeros(0, dtype=bool)
    return sol.lambda_star > ACTIVE_TOL


def project_backward(sol: ProjectionSolution, C: LinearConstraintSet, grad_out) -> np.ndarray:
    """Vector-Jacobian product grad_out' (du*/du_hat) from the KKT differentials."""
    g = np.asarray(grad_out, dtype=np.float64).reshape(-1)
    n = C.n
    act = active_rows(sol, C)
    Ca = np.vstack([C.A, C.G[act]]) if C.n_ineq else C.A
    k = Ca.shape[0]
    if k == 0:
        return g.copy()
    K = np.empty((n + k, n + k))
    K[:n, :n] = np.eye(n) * (1.0 + BACKWARD_REG)
    K[:n, n:] = Ca.T
    K[n:, :n] = Ca
    K[n:, n:] = -BACKWARD_REG * np.eye(k)
    rhs = np.concatenate([g, np.zeros(k)])
    try:
        # K is symmetric, so the transposed system is the same one
        z = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGradientError(f"singular KKT system ({k} active rows)") from exc
    if not np.all(np.isfinite(z)):
        raise DegenerateGradientError(f"non-finite KKT solution ({k} active rows)")
    return z[:n]


def active_nullspace_backward(sol: ProjectionSolution, C: LinearConstraintSet,
                              grad_out) -> np.ndarray:
    """Fallback VJP: remove the components of grad_out normal to the active rows."""
    g = np.asarray(grad_out, dtype=np.float64).reshape(-1)
    act = active_rows(sol, C)
    Ca = np.vstack([C.A, C.G[act]]) if C.n_ineq else C.A
    if Ca.shape[0] == 0:
        return g.copy()
    coef, *_ = np.linalg.lstsq(Ca.T, g, rcond=None)
    return g - Ca.T @ coef


def _safe_backward(sol, C, g):
    try:
        return project_backward(sol, C, g)
    except DegenerateGradientError:
        logger.warning("degenerate KKT system in projection backward; using active-set fallback")
        return active_nullspace_backward(sol, C, g)


def project_node(u_hat: ad.Node, sets, tol: float = 1e-8) -> ad.Node:
    """Projection as an autodiff node.

    ``u_hat`` is (n,) or (B, n) with each row an independent problem.  ``sets``
    is one LinearConstraintSet shared by all rows or a sequence of B sets.
    """
    u_hat = u_hat if isinstance(u_hat, ad.Node) else ad.constant(u_hat)
    U = u_hat.value
    batched = U.ndim == 2
    rows = U if batched else U[None, :]
    if isinstance(sets, LinearConstraintSet):
        sets = [sets] * rows.shape[0]
    if len(sets) != rows.shape[0]:
        raise ValueError(f"{len(sets)} constraint sets for {rows.shape[0]} rows")
    sols = [project(r, C, tol) for r, C in zip(rows, sets)]
    out = np.stack([s.u_star for s in sols])

    def vjp(g):
        g2 = g if batched else g[None, :]
        back = np.stack([_safe_backward(s, C, gi) for s, C, gi in zip(sols, sets, g2)])
        return (back if batched else back[0],)

    node = ad.custom_node(out if batched else out[0], [u_hat], vjp)
    return node


def as_layer(C: LinearConstraintSet, tol: float = 1e-8):
    """Factory for a differentiable projection onto a fixed set."""
    def layer(u_hat):
        return project_node(u_hat, C, tol)
    return layer
