"""LTI process models and steady-state Kalman filter quantities.

Each sensor runs a local Kalman filter that is assumed to be in steady state.
The remote estimator's error covariance after ``t`` consecutive packet losses
is ``h^t(P_bar)``, so the reward only ever needs the traces of that sequence,
which are precomputed into a lookup table.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, ModelValidationError

TOL_PSD = 1e-9
TOL_RICCATI = 1e-10
MAX_ITER_RICCATI = 1_000_000


def _as_matrix(x, name):
    m = np.atleast_2d(np.asarray(x, dtype=float))
    if m.ndim != 2:
        raise ModelValidationError(f"{name} must be a matrix, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise ModelValidationError(f"{name} has non-finite entries")
    return m


def symmetrize(M):
    return 0.5 * (M + M.T)


def spectral_norm(A, tol=1e-12, max_iter=10_000):
    """Largest singular value of ``A`` by power iteration on ``A^T A``.

    The iteration stops once the relative change of the Rayleigh quotient
    drops below ``tol``; ``max_iter`` is only a safety cap.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    M = A.T @ A
    n = M.shape[0]
    if not np.any(M):
        return 0.0
    # Deterministic start with weight on every coordinate.
    x = np.linspace(1.0, 2.0, n)
    x /= np.linalg.norm(x)
    lam = float(x @ M @ x)
    for _ in range(max_iter):
        y = M @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            # Start vector landed in the null space; fall back to the basis.
            return float(np.sqrt(np.max(np.diag(M))))
        x = y / ny
        lam_new = float(x @ M @ x)
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-300):
            lam = lam_new
            break
        lam = lam_new
    return float(np.sqrt(max(lam, 0.0)))


@dataclass(frozen=True)
class LtiSystem:
    """One process/sensor pair ``x+ = A x + w``, ``y = C x + v``.

    ``W`` and ``V`` are the process and measurement noise covariances.
    Detectability of ``(A, C)`` and stabilizability of ``(A, sqrt(W))`` are
    assumed, not verified.
    """

    A: np.ndarray
    C: np.ndarray
    W: np.ndarray
    V: np.ndarray
    allow_stable: bool = False

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        C = _as_matrix(self.C, "C")
        W = _as_matrix(self.W, "W")
        V = _as_matrix(self.V, "V")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ModelValidationError(f"A must be square, got {A.shape}")
        if C.shape[1] != n:
            raise ModelValidationError(f"C must have {n} columns, got {C.shape}")
        m = C.shape[0]
        if W.shape != (n, n):
            raise ModelValidationError(f"W must be {n}x{n}, got {W.shape}")
        if V.shape != (m, m):
            raise ModelValidationError(f"V must be {m}x{m}, got {V.shape}")
        for name, M in (("W", W), ("V", V)):
            if not np.allclose(M, M.T, atol=1e-12):
                raise ModelValidationError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(W).min() < -TOL_PSD:
            raise ModelValidationError("W must be positive semidefinite")
        if np.linalg.eigvalsh(V).min() <= 0.0:
            raise ModelValidationError("V must be positive definite")
        if not self.allow_stable and spectral_norm(A) < 1.0 - 1e-12:
            raise ModelValidationError(
                "spectral norm of A is below 1; pass allow_stable=True "
                "(--allow-stable) to run anyway"
            )
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "V", V)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.C.shape[0]

    @property
    def a_norm(self):
        return spectral_norm(self.A)

    def h(self, X):
        return symmetrize(self.A @ X @ self.A.T + self.W)

    def g_tilde(self, X):
        C = self.C
        S = C @ X @ C.T + self.V
        try:
            K = np.linalg.solve(S, C @ X)
        except np.linalg.LinAlgError as exc:
            raise ModelValidationError("innovation covariance is singular") from exc
        return symmetrize(X - X @ C.T @ K)

    def g(self, X):
        return self.g_tilde(self.h(X))


def riccati_maps(sys: LtiSystem, X):
    """Return ``(h(X), g(X))`` for the prediction map and the full Riccati map."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    hX = sys.h(X)
    return hX, sys.g_tilde(hX)


@dataclass
class SteadyState:
    """Steady error covariance and the traces ``Tr h^t(P_bar)``.

    ``trace_table[t]`` holds ``Tr h^t(P_bar)`` for ``t = 0..L+1``. Traces past
    the table are produced on demand by :meth:`trace` and cached.
    """

    system: LtiSystem
    p_bar: np.ndarray
    trace_table: np.ndarray
    iterations: int = 0
    _powers: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self._powers:
            P = self.p_bar
            self._powers = [P]
            for _ in range(len(self.trace_table) - 1):
                P = self.system.h(P)
                self._powers.append(P)
        self._traces = [float(t) for t in self.trace_table]

    def covariance(self, t):
        """``h^t(P_bar)``."""
        while len(self._powers) <= t:
            self._powers.append(self.system.h(self._powers[-1]))
        return self._powers[t]

    def trace(self, t):
        while len(self._traces) <= t:
            self._traces.append(float(np.trace(self.covariance(len(self._traces)))))
        return self._traces[t]

    def traces(self, upto):
        """Array of traces for ``t = 0..upto`` inclusive."""
        self.trace(upto)
        return np.array(self._traces[: upto + 1])


def steady_state(sys: LtiSystem, L=1, tol_riccati=TOL_RICCATI, max_iter=MAX_ITER_RICCATI):
    """Solve ``g(X) = X`` by fixed-point iteration from ``X0 = W``.

    Args:
        sys: the process/sensor pair.
        L: truncation bound; the trace table covers ``t = 0..L+1``.
        tol_riccati: stop once successive iterates differ by less than this
            in the max-abs norm.
        max_iter: iteration budget.

    Raises:
        ConvergenceError: if the budget is exhausted.
    """
    if tol_riccati <= 0:
        raise ValueError("tol_riccati must be positive")
    X = sys.W.copy()
    for k in range(1, max_iter + 1):
        X_next = sys.g(X)
        if np.max(np.abs(X_next - X)) < tol_riccati:
            X = X_next
            break
        X = X_next
    else:
        raise ConvergenceError(
            f"Riccati iteration did not converge in {max_iter} steps",
            iterations=max_iter,
            residual=float(np.max(np.abs(sys.g(X) - X))),
        )
    powers = [X]
    for _ in range(L + 1):
        powers.append(sys.h(powers[-1]))
    table = np.array([np.trace(P) for P in powers])
    return SteadyState(sys, X, table, iterations=k, _powers=powers)
