"""Gradient checks of the projection backward pass against finite differences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .qp import LinearConstraintSet, ProjectionSolution, project, project_backward


@dataclass
class GradCheckReport:
    instances: int
    max_rel_error: float
    median_rel_error: float
    tolerance: float
    step: float
    worst_instance: int
    errors: List[float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "instances": self.instances,
            "max_rel_error": self.max_rel_error,
            "median_rel_error": self.median_rel_error,
            "tolerance": self.tolerance,
            "step": self.step,
            "worst_instance": self.worst_instance,
            "passed": self.passed,
        }


def random_instance(rng: np.random.Generator, n: int, n_ineq: int, n_eq: int,
                    margin: float = 1e-3, max_tries: int = 1000
                    ) -> Tuple[LinearConstraintSet, np.ndarray, ProjectionSolution]:
    """Random projection whose solution is strictly complementary with
    independent active rows, so the map u_hat -> u* is smooth there."""
    for _ in range(max_tries):
        u0 = rng.normal(size=n)
        G = rng.normal(size=(n_ineq, n))
        h = G @ u0 + rng.uniform(0.0, 1.0, size=n_ineq)
        A = rng.normal(size=(n_eq, n))
        C = LinearConstraintSet(n, A=A, b=A @ u0, G=G, h=h)
        u_hat = 2.0 * rng.normal(size=n)
        sol = project(u_hat, C, tol=1e-10)
        slack = C.h - C.G @ sol.u_star
        act = sol.lambda_star > margin
        if not act.any() or not np.all(act | (slack > margin)):
            continue
        Ca = np.vstack([C.A, C.G[act]])
        if Ca.shape[0] <= n and np.linalg.matrix_rank(Ca) == Ca.shape[0]:
            return C, u_hat, sol
    raise RuntimeError("no nondegenerate instance found")


def implicit_jacobian(sol: ProjectionSolution, C: LinearConstraintSet) -> np.ndarray:
    return np.stack([project_backward(sol, C, e) for e in np.eye(C.n)])


def fd_jacobian(u_hat: np.ndarray, C: LinearConstraintSet, h: float) -> np.ndarray:
    cols = []
    for i in range(C.n):
        e = np.zeros(C.n)
        e[i] = h
        up = project(u_hat + e, C, tol=1e-10).u_star
        um = project(u_hat - e, C, tol=1e-10).u_star
        cols.append((up - um) / (2 * h))
    return np.stack(cols, axis=1)


def gradcheck(instances: int = 100, seed: int = 0, step: float = 1e-5, tol: float = 1e-3,
              max_n: int = 8, max_ineq: int = 14, max_eq: int = 2) -> GradCheckReport:
    """Compare the implicit Jacobian with central differences on random instances.

    The Jacobian is an orthogonal projector, so errors are relative to
    max(max|J|, 1).
    """
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(instances):
        n = int(rng.integers(2, max_n + 1))
        C, u_hat, sol = random_instance(rng, n, int(rng.integers(1, max_ineq + 1)),
                                        int(rng.integers(0, max_eq)))
        J = implicit_jacobian(sol, C)
        F = fd_jacobian(u_hat, C, step)
        errs.append(float(np.max(np.abs(J - F)) / max(np.max(np.abs(F)), 1.0)))
    arr = np.array(errs)
    return GradCheckReport(instances, float(arr.max()), float(np.median(arr)), tol, step,
                           int(arr.argmax()), errs)
