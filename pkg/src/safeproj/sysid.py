"""Identification of the approximate models that define the constraint sets.

Two models are fitted here:

* :class:`LinearDynamics` - a one-step linear thermal model
  ``x' = A x + B_u u + B_d w`` estimated by ordinary least squares;
* :class:`SensitivityModel` - a linearization ``v ~ v_bar + R (p - p_bar) +
  B (q - q_bar)`` of the AC power-flow map, with the sensitivities obtained by
  central differences of a nonlinear solver around the flat-voltage point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

LINEARIZATION_DELTA = 1e-4


class IdentifiabilityError(ValueError):
    """The regressor matrix is rank deficient; ``direction`` spans its null space."""

    def __init__(self, message: str, direction: np.ndarray, names: Sequence[str]):
        super().__init__(message)
        self.direction = direction
        self.names = list(names)


class LinearizationError(RuntimeError):
    def __init__(self, message: str, bus: int):
        super().__init__(message)
        self.bus = bus


# ------------------------------------------------------------------ thermal

@dataclass
class LinearDynamics:
    """x_{k+1} = A x_k + B_u u_k + B_d w_k at a fixed step of ``dt`` minutes."""

    A: np.ndarray
    B_u: np.ndarray
    B_d: np.ndarray
    dt: float = 15.0
    train_rmse: float = float("nan")
    test_rmse: float = float("nan")
    max_abs_residual: float = float("nan")

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        nx = self.A.shape[0]
        self.B_u = np.asarray(self.B_u, dtype=np.float64).reshape(nx, -1)
        self.B_d = np.asarray(self.B_d, dtype=np.float64).reshape(nx, -1)
        if self.A.shape != (nx, nx):
            raise ValueError(f"A must be square, got {self.A.shape}")
        rho = self.spectral_radius
        if rho >= 1.0:
            logger.warning("identified thermal model is not stable (spectral radius %.4f)", rho)

    @property
    def nx(self) -> int:
        return self.A.shape[0]

    @property
    def nu(self) -> int:
        return self.B_u.shape[1]

    @property
    def nw(self) -> int:
        return self.B_d.shape[1]

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))

    def step(self, x, u, w) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(self.nx)
        return (self.A @ x + self.B_u @ np.asarray(u, dtype=np.float64).reshape(self.nu)
                + self.B_d @ np.asarray(w, dtype=np.float64).reshape(self.nw))

    def rollout(self, x0, U, W) -> np.ndarray:
        """States x_1..x_T for plans U (T, nu) and disturbances W (T, nw)."""
        U = np.asarray(U, dtype=np.float64).reshape(-1, self.nu)
        W = np.asarray(W, dtype=np.float64).reshape(-1, self.nw)
        x = np.asarray(x0, dtype=np.float64).reshape(self.nx)
        out = np.empty((U.shape[0], self.nx))
        for i in range(U.shape[0]):
            x = self.A @ x + self.B_u @ U[i] + self.B_d @ W[i]
            out[i] = x
        return out

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "B_u": self.B_u.tolist(), "B_d": self.B_d.tolist(),
                "dt": self.dt, "train_rmse": self.train_rmse, "test_rmse": self.test_rmse,
                "max_abs_residual": self.max_abs_residual}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearDynamics":
        return cls(np.array(d["A"]), np.array(d["B_u"]), np.array(d["B_d"]), float(d["dt"]),
                   float(d.get("train_rmse", "nan")), float(d.get("test_rmse", "nan")),
                   float(d.get("max_abs_residual", "nan")))


def _regressor_names(nx, nu, nw):
    return ([f"x{i}" for i in range(nx)] + [f"u{i}" for i in range(nu)]
            + [f"w{i}" for i in range(nw)])


def fit_thermal(X, U, W, X_next, dt: float = 15.0, holdout: float = 0.0,
                rank_tol: float = 1e-10) -> LinearDynamics:
    """Least-squares one-step model from transitions (x, u, w) -> x_next.

    The last ``holdout`` fraction of samples (in order) is withheld and used
    for the reported ``test_rmse`` and ``max_abs_residual``; with no holdout
    those are computed on the training set.
    """
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(X.shape[0], -1)
    N, nx = X.shape
    U = np.asarray(U, dtype=np.float64).reshape(N, -1)
    W = np.asarray(W, dtype=np.float64).reshape(N, -1)
    Y = np.asarray(X_next, dtype=np.float64).reshape(N, nx)
    nu, nw = U.shape[1], W.shape[1]
    Phi = np.hstack([X, U, W])
    n_par = Phi.shape[1]

    n_test = int(round(holdout * N))
    n_train = N - n_test
    if n_train < 10 * n_par:
        raise ValueError(f"need at least {10 * n_par} training samples for {n_par} "
                         f"regressors, got {n_train}")
    Ptr, Ytr = Phi[:n_train], Y[:n_train]

    # rank check on the column-scaled regressors so units do not matter
    scale = np.linalg.norm(Ptr, axis=0)
    scale[scale == 0] = 1.0
    _, sv, Vt = np.linalg.svd(Ptr / scale, full_matrices=False)
    if sv[-1] <= rank_tol * sv[0]:
        d = Vt[-1] / scale
        d = d / np.max(np.abs(d))
        names = _regressor_names(nx, nu, nw)
        combo = " + ".join(f"{c:.3g}*{nm}" for c, nm in zip(d, names) if abs(c) > 1e-6)
        raise IdentifiabilityError(f"regressors are collinear along {combo}", d, names)

    theta, *_ = np.linalg.lstsq(Ptr, Ytr, rcond=None)
    M = theta.T  # (nx, n_par)
    A, B_u, B_d = M[:, :nx], M[:, nx:nx + nu], M[:, nx + nu:]
    res_tr = Ytr - Ptr @ theta
    train_rmse = float(np.sqrt(np.mean(res_tr ** 2)))
    if n_test:
        res_te = Y[n_train:] - Phi[n_train:] @ theta
    else:
        res_te = res_tr
    return LinearDynamics(A, B_u, B_d, dt, train_rmse,
                          float(np.sqrt(np.mean(res_te ** 2))),
                          float(np.max(np.abs(res_te))))


# --------------------------------------------------------------------- grid

@dataclass
class SensitivityModel:
    """Linearized bus-voltage magnitudes around a reference operating point."""

    v_bar: np.ndarray
    H: np.ndarray  # (N, 2N) = [R, B]
    p_bar: np.ndarray
    q_bar: np.ndarray
    eps_v: float = 0.0

    def __post_init__(self):
        self.v_bar = np.asarray(self.v_bar, dtype=np.float64)
        self.H = np.asarray(self.H, dtype=np.float64)
        self.p_bar = np.asarray(self.p_bar, dtype=np.float64)
        self.q_bar = np.asarray(self.q_bar, dtype=np.float64)
        N = self.v_bar.shape[0]
        if self.H.shape != (N, 2 * N):
            raise ValueError(f"H must be ({N}, {2 * N}), got {self.H.shape}")
        if not np.all(np.isfinite(self.H)):
            raise ValueError("sensitivity matrix has non-finite entries")

    @property
    def n_bus(self) -> int:
        return self.v_bar.shape[0]

    @property
    def R(self) -> np.ndarray:
        return self.H[:, :self.n_bus]

    @property
    def B(self) -> np.ndarray:
        return self.H[:, self.n_bus:]

    def predict(self, p, q) -> np.ndarray:
        return self.v_bar + self.R @ (np.asarray(p) - self.p_bar) + self.B @ (np.asarray(q) - self.q_bar)

    def with_margin(self, eps_v: float) -> "SensitivityModel":
        return SensitivityModel(self.v_bar, self.H, self.p_bar, self.q_bar, float(eps_v))

    def to_dict(self) -> dict:
        return {"v_bar": self.v_bar.tolist(), "H": self.H.tolist(), "p_bar": self.p_bar.tolist(),
                "q_bar": self.q_bar.tolist(), "eps_v": self.eps_v}

    @classmethod
    def from_dict(cls, d: dict) -> "SensitivityModel":
        return cls(np.array(d["v_bar"]), np.array(d["H"]), np.array(d["p_bar"]),
                   np.array(d["q_bar"]), float(d["eps_v"]))


def linearize_grid(pf_oracle: Callable[[np.ndarray, np.ndarray], np.ndarray], n_bus: int,
                   p_ref=None, q_ref=None, delta: float = LINEARIZATION_DELTA) -> SensitivityModel:
    """Central-difference sensitivities of the AC voltage magnitudes.

    ``pf_oracle(p, q)`` returns the voltage magnitude at every non-slack bus
    for the given net injections (p.u.).  The reference defaults to zero
    injection, whose solution is the flat profile v = 1.
    """
    p_ref = np.zeros(n_bus) if p_ref is None else np.asarray(p_ref, dtype=np.float64)
    q_ref = np.zeros(n_bus) if q_ref is None else np.asarray(q_ref, dtype=np.float64)
    try:
        v_ref = np.asarray(pf_oracle(p_ref, q_ref), dtype=np.float64)
    except Exception as exc:  # noqa: BLE001 - any solver failure is reported the same way
        raise LinearizationError(f"power flow failed at the reference point: {exc}", -1) from exc
    H = np.empty((n_bus, 2 * n_bus))
    for col in range(2 * n_bus):
        bus = col % n_bus
        vals = []
        for sgn in (1.0, -1.0):
            p, q = p_ref.copy(), q_ref.copy()
            (p if col < n_bus else q)[bus] += sgn * delta
            try:
                vals.append(np.asarray(pf_oracle(p, q), dtype=np.float64))
            except Exception as exc:  # noqa: BLE001
                kind = "p" if col < n_bus else "q"
                raise LinearizationError(
                    f"power flow did not converge perturbing {kind} at bus {bus}: {exc}", bus) from exc
        H[:, col] = (vals[0] - vals[1]) / (2 * delta)
    if np.allclose(p_ref, 0) and np.allclose(q_ref, 0):
        v_bar = np.ones(n_bus)
    else:
        v_bar = v_ref
    return SensitivityModel(v_bar, H, p_ref, q_ref, 0.0)
