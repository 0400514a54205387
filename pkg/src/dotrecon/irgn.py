"""Modified iteratively regularized Gauss-Newton (IRGN).

Each iteration solves

    (J^T J + alpha_k L) p_k = -(J^T r_k + alpha_k L (q_k - q_ref))

for the search direction, picks a step ``s_k`` by backtracking until one of
the strong Wolfe conditions holds on the Tikhonov cost

    Phi(q) = 1/2 ||F(q) - g||^2 + alpha_k/2 (q - q_ref)^T L (q - q_ref),

and stops at the first ``K`` with ``||F(q_K) - g||^2 <= rho * xi``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

__all__ = [
    "IrgnError",
    "IndefiniteSystemError",
    "IrgnConfig",
    "IrgnResult",
    "alpha_sequence",
    "search_direction",
    "wolfe_backtrack",
    "run_irgn",
]

log = logging.getLogger(__name__)


class IrgnError(RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration


class IndefiniteSystemError(IrgnError):
    pass


@dataclass(frozen=True)
class IrgnConfig:
    alpha0: float = 1e-2
    decay: float = 1.5
    rho: float = 1.5
    s_min: float = 1e-3
    gamma1: float = 1e-4
    gamma2: float = 0.9
    max_iterations: int = 200
    max_backtracks: int = 20
    use_discrepancy: bool = True

    def __post_init__(self):
        if self.alpha0 <= 0:
            raise ValueError("alpha0 must be positive")
        if self.decay < 1:
            raise ValueError("decay must be >= 1")
        if self.rho <= 1:
            raise ValueError("rho must exceed 1")
        if not 0 < self.s_min < 1:
            raise ValueError("s_min must lie in (0, 1)")
        if not 0 < self.gamma1 < self.gamma2 < 1:
            raise ValueError("need 0 < gamma1 < gamma2 < 1")

    def alpha(self, k: int) -> float:
        return self.alpha0 / self.decay ** k


def alpha_sequence(cfg: IrgnConfig) -> Iterator[float]:
    """``alpha_k = alpha0 / decay**k``: non-increasing, ratio bounded by ``decay``."""
    k = 0
    while True:
        yield cfg.alpha(k)
        k += 1


def _dense(L):
    return L.toarray() if sp.issparse(L) else np.asarray(L, dtype=float)


def search_direction(J, r, L, alpha: float, q) -> np.ndarray:
    """Solve ``(J^T J + alpha L) p = -(J^T r + alpha L q)`` by Cholesky.

    ``q`` is the deviation from the reference model that ``L`` penalizes.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    J = np.asarray(J, dtype=float)
    Ld = _dense(L)
    H = J.T @ J + alpha * Ld
    rhs = -(J.T @ np.asarray(r, dtype=float) + alpha * (Ld @ np.asarray(q, dtype=float)))
    try:
        c = sla.cho_factor(H, lower=True, check_finite=True)
    except (sla.LinAlgError, ValueError) as exc:
        raise IndefiniteSystemError(f"Gauss-Newton matrix is not positive definite: {exc}") from exc
    p = sla.cho_solve(c, rhs)
    scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
    if np.linalg.norm(H @ p - rhs) > 1e-10 * scale:
        # one step of iterative refinement for badly scaled systems
        p += sla.cho_solve(c, rhs - H @ p)
    return p


def wolfe_backtrack(cost: Callable, grad: Callable, q, p, gamma1: float = 1e-4,
                    gamma2: float = 0.9, max_backtracks: int = 20, s_min: float = 1e-3,
                    cost0: float = None, grad0=None) -> float:
    """First ``s`` in ``1, 1/2, 1/4, ...`` (all ``> s_min``) satisfying

        cost(q + s p) <= cost(q) + gamma1 * s * grad(q)^T p          or
        |grad(q + s p)^T p| <= gamma2 * |grad(q)^T p|,

    else the last trial. Non-descent directions return the smallest trial.
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    trials = [1.0]
    while len(trials) <= max_backtracks and trials[-1] * 0.5 > s_min:
        trials.append(trials[-1] * 0.5)
    f0 = cost(q) if cost0 is None else cost0
    d0 = float(np.dot(grad(q) if grad0 is None else grad0, p))
    if not d0 < 0:
        log.debug("non-descent direction (slope %.3e); using smallest step", d0)
        return trials[-1]
    for s in trials:
        trial = q + s * p
        f = cost(trial)
        if not np.isfinite(f):
            continue
        if f <= f0 + gamma1 * s * d0:
            return s
        if abs(float(np.dot(grad(trial), p))) <= abs(gamma2 * d0):
            return s
    return trials[-1]


@dataclass
class IrgnResult:
    q: np.ndarray
    iterations: int
    residual_norms: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    discrepancy_reached: bool = False
    reason: str = ""
    xi: float = 0.0
    rho: float = 0.0

    @property
    def final_residual_sq(self) -> float:
        return self.residual_norms[-1] ** 2


def run_irgn(forward: Callable, jacobian: Callable, data, xi: float, cfg: IrgnConfig, q0,
             laplacian, q_ref=None, project: Optional[Callable] = None,
             gradient: Optional[Callable] = None, callback: Optional[Callable] = None) -> IrgnResult:
    """Run IRGN from ``q0``.

    Parameters
    ----------
    forward : callable
        ``q -> F(q)``, the flattened measurement vector.
    jacobian : callable
        ``q -> J`` (dense, rows matching ``forward``).
    data : array
        Noisy measurements ``g``.
    xi : float
        Noise bound used by the stopping rule.
    laplacian : matrix
        Penalty operator ``L``.
    q_ref : array, optional
        Reference model penalized by ``L``; zero by default.
    project : callable, optional
        Projection onto the admissible box, applied after each update.
    gradient : callable, optional
        ``(q, residual) -> J(q)^T residual``; defaults to ``jacobian(q).T @ r``.
    """
    if xi < 0:
        raise ValueError("xi must be non-negative")
    g = np.asarray(data, dtype=float)
    q = np.array(q0, dtype=float)
    q_ref = np.zeros_like(q) if q_ref is None else np.asarray(q_ref, dtype=float)
    project = project or (lambda x: x)
    Ld = _dense(laplacian)

    def residual(x):
        return np.asarray(forward(x), dtype=float) - g

    def misfit_grad(x, r):
        if gradient is not None:
            return gradient(x, r)
        return np.asarray(jacobian(x)).T @ r

    res = IrgnResult(q=q, iterations=0, xi=xi, rho=cfg.rho)
    try:
        r = residual(q)
    except Exception as exc:
        raise IrgnError(f"forward failure: {exc}", 0) from exc

    for k in range(cfg.max_iterations + 1):
        res_sq = float(r @ r)
        res.residual_norms.append(np.sqrt(res_sq))
        if cfg.use_discrepancy and res_sq <= cfg.rho * xi:
            res.discrepancy_reached = True
            res.reason = "discrepancy"
            break
        if k == cfg.max_iterations:
            res.reason = "max_iterations"
            break
        alpha = cfg.alpha(k)
        try:
            J = np.asarray(jacobian(q), dtype=float)
        except Exception as exc:
            raise IrgnError(f"jacobian failure: {exc}", k) from exc
        dev = q - q_ref
        p = search_direction(J, r, Ld, alpha, dev)

        cache = {}

        def cost(x):
            key = x.tobytes()
            if key not in cache:
                try:
                    rx = residual(x)
                except Exception:
                    cache[key] = (np.inf, None)
                else:
                    d = x - q_ref
                    cache[key] = (0.5 * rx @ rx + 0.5 * alpha * d @ (Ld @ d), rx)
            return cache[key][0]

        def grad(x):
            cost(x)
            rx = cache[x.tobytes()][1]
            return misfit_grad(x, rx) + alpha * (Ld @ (x - q_ref))

        cost0 = 0.5 * res_sq + 0.5 * alpha * dev @ (Ld @ dev)
        grad0 = J.T @ r + alpha * (Ld @ dev)
        s = wolfe_backtrack(cost, grad, q, p, cfg.gamma1, cfg.gamma2, cfg.max_backtracks,
                            cfg.s_min, cost0=cost0, grad0=grad0)
        q = project(q + s * p)
        try:
            r = residual(q)
        except Exception as exc:
            raise IrgnError(f"forward failure: {exc}", k + 1) from exc
        res.alphas.append(alpha)
        res.steps.append(s)
        res.iterations = k + 1
        if callback is not None:
            callback(k + 1, q, np.sqrt(float(r @ r)))
        log.debug("IRGN it %d: alpha=%.3e s=%.3g |r|=%.4e", k + 1, alpha, s, np.sqrt(r @ r))
    res.q = q
    return res
