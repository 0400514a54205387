"""Posterior evaluation and the pilot adaptive Metropolis sampler.

The posterior over the free parameter vector ``q`` is

    log pi(q | g) = -1/2 (g - F(q))^T C^{-1} (g - F(q)) - alpha R(q)   for q in A,

and ``-inf`` outside the admissible set ``A`` (positive entries within the
box bounds). The sampler is a random-walk Metropolis chain with Gaussian
proposals whose covariance is rescaled by ``1 +- eps`` every ``m``
iterations during a pilot phase of ``M`` adaptions and frozen afterwards.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

__all__ = [
    "Schedule",
    "FULL_SCHEDULE",
    "FAST_SCHEDULE",
    "DEBUG_SCHEDULE",
    "PosteriorSpec",
    "log_posterior",
    "acceptance_prob",
    "pam_adapt",
    "Chain",
    "run_pilot_metropolis",
    "posterior_mean",
    "DiagnosticsReport",
    "integrated_autocorrelation",
    "geweke_z",
    "diagnostics",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    """``M`` adaptions, one every ``m`` iterations, burn-in ``B``, total ``N``."""

    m: int
    M: int
    B: int
    N: int

    def __post_init__(self):
        if min(self.m, self.M) < 1:
            raise ValueError("m and M must be positive")
        if not 1 < self.m * self.M < self.B < self.N:
            raise ValueError(f"need 1 < m*M < B < N, got {self}")

    @property
    def pilot(self) -> int:
        return self.m * self.M


FULL_SCHEDULE = Schedule(50, 600, 100_000, 150_000)
FAST_SCHEDULE = Schedule(25, 100, 10_000, 25_000)
DEBUG_SCHEDULE = Schedule(10, 20, 500, 1_500)


# -- posterior ---------------------------------------------------------------

@dataclass
class PosteriorSpec:
    """Gaussian likelihood with diagonal covariance and a regularizing prior.

    ``forward`` maps a free parameter vector to the flattened measurements,
    ``regularizer`` maps it to a non-negative penalty ``R(q)``.
    """

    forward: Callable
    data: np.ndarray
    sigma: np.ndarray
    regularizer: Callable
    alpha: float
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        self.sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), self.data.shape).copy()
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not np.all(self.sigma > 0):
            raise ValueError("noise standard deviations must be positive")

    def in_support(self, q) -> bool:
        q = np.asarray(q)
        if not np.all(q > 0):
            return False
        if self.lower is not None and np.any(q < self.lower):
            return False
        if self.upper is not None and np.any(q > self.upper):
            return False
        return True


def log_posterior(q, spec: PosteriorSpec) -> float:
    """Unnormalized log posterior; ``-inf`` outside the support."""
    q = np.asarray(q, dtype=float)
    if not spec.in_support(q):
        return -np.inf
    try:
        pred = np.asarray(spec.forward(q), dtype=float)
        reg = float(spec.regularizer(q))
    except Exception as exc:  # forward failure counts as zero density
        log.warning("posterior evaluation failed: %s", exc)
        return -np.inf
    w = (spec.data - pred) / spec.sigma
    return -0.5 * float(w @ w) - spec.alpha * reg


def acceptance_prob(log_px: float, log_py: float, log_q_xy: float = 0.0,
                    log_q_yx: float = 0.0) -> float:
    """Metropolis-Hastings acceptance ``min(1, pi(y) q(y,x) / (pi(x) q(x,y)))``.

    The proposal terms cancel for symmetric proposals (the default).
    """
    if log_py == -np.inf:
        return 0.0
    if log_px == -np.inf:
        return 1.0
    d = (log_py + log_q_yx) - (log_px + log_q_xy)
    return 1.0 if d >= 0 else float(np.exp(d))


def pam_adapt(C, a_bar: float, a_o: float, eps: float):
    """Scale the proposal covariance by ``1 + eps``, ``1`` or ``1 - eps``
    depending on whether the epoch acceptance ratio is above, at or below
    the target."""
    if a_bar > a_o:
        return (1.0 + eps) * C
    if a_bar < a_o:
        return (1.0 - eps) * C
    return C


# -- chain -------------------------------------------------------------------

@dataclass
class Chain:
    """Samples of a pilot adaptive Metropolis run.

    ``samples[j]`` is the state after iteration ``sample_index[j]``; the
    initial state (iteration 0) is always stored, then every ``thin``-th
    iteration. ``accepted[i-1]`` is the acceptance flag of iteration ``i``.
    ``epoch_covariances[j]`` is the proposal covariance in force after
    epoch ``j`` (``j = 0`` is the initial covariance).
    """

    samples: np.ndarray
    sample_index: np.ndarray
    accepted: np.ndarray
    log_target: np.ndarray
    schedule: Schedule
    epoch_covariances: list
    epoch_acceptance: np.ndarray
    seed: int
    thin: int = 1
    a_o: float = 0.234
    eps: float = 0.05
    mean_after_burn_in: Optional[np.ndarray] = None

    @property
    def N(self) -> int:
        return self.schedule.N

    @property
    def B(self) -> int:
        return self.schedule.B

    def post_burn_in_samples(self) -> np.ndarray:
        return self.samples[self.sample_index > self.B]

    def to_csv(self, path, thin: int = 1) -> None:
        """Write ``iteration,accepted,x0,x1,...`` for every ``thin``-th stored
        sample, plus a ``.json`` sidecar with the schedule, the full
        acceptance record and the post-burn-in mean."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            d = self.samples.shape[1]
            w.writerow(["iteration", "accepted"] + [f"x{i}" for i in range(d)])
            for j in range(0, len(self.sample_index), thin):
                i = int(self.sample_index[j])
                flag = int(self.accepted[i - 1]) if i > 0 else 0
                w.writerow([i, flag] + [repr(float(v)) for v in self.samples[j]])
        side = {
            "schedule": [self.schedule.m, self.schedule.M, self.schedule.B, self.schedule.N],
            "seed": self.seed,
            "thin": self.thin * thin,
            "a_o": self.a_o,
            "eps": self.eps,
            "accepted": "".join("1" if a else "0" for a in self.accepted),
            "epoch_acceptance": [float(a) for a in self.epoch_acceptance],
            "mean_after_burn_in": (None if self.mean_after_burn_in is None
                                   else [float(v) for v in self.mean_after_burn_in]),
        }
        path.with_suffix(".json").write_text(json.dumps(side))

    @classmethod
    def from_csv(cls, path) -> "Chain":
        """Read a chain written by :meth:`to_csv`. Covariance snapshots and
        the log-target trace are not persisted and come back empty."""
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        accepted = np.frombuffer(side["accepted"].encode(), dtype=np.uint8) == ord("1")
        mean = side.get("mean_after_burn_in")
        return cls(data[:, 2:], data[:, 0].astype(np.int64), accepted, np.empty(0),
                   Schedule(*side["schedule"]), [], np.asarray(side["epoch_acceptance"]),
                   side["seed"], side["thin"], side["a_o"], side["eps"],
                   None if mean is None else np.asarray(mean))


def _proposal_factor(C):
    C = np.asarray(C, dtype=float)
    if C.ndim == 1:
        if not np.all(C > 0):
            raise ValueError("proposal covariance must be positive definite")
        return np.sqrt(C)
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError as exc:
        raise ValueError("proposal covariance must be positive definite") from exc


def run_pilot_metropolis(log_target: Callable, x0, C0, schedule: Schedule,
                         a_o: float = 0.234, eps: float = 0.05, seed: int = 0,
                         thin: int = 1, progress: Optional[Callable] = None) -> Chain:
    """Pilot adaptive Metropolis.

    Iteration ``i`` proposes ``y ~ N(x_{i-1}, C_j)`` and accepts it when
    ``u <= alpha(x_{i-1}, y)`` with ``u ~ U(0, 1)``. After iteration
    ``j*m`` for ``j = 1..M`` the covariance is updated with
    :func:`pam_adapt` from the acceptance ratio of iterations
    ``(j-1)*m + 1 .. j*m``; it is frozen after iteration ``m*M``.

    ``C0`` is a covariance matrix or, for a diagonal covariance, the vector
    of its diagonal.
    """
    if not 0 < a_o < 1:
        raise ValueError("a_o must lie in (0, 1)")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    rng = np.random.default_rng(seed)
    x = np.array(x0, dtype=float)
    d = x.size
    C = np.array(C0, dtype=float)
    if C.shape not in ((d,), (d, d)):
        raise ValueError("C0 must be (d,) or (d, d)")
    factor = _proposal_factor(C)
    diag = C.ndim == 1

    lp = float(log_target(x))
    if not np.isfinite(lp):
        raise ValueError("starting state has zero posterior density")

    N, m, M, B = schedule.N, schedule.m, schedule.M, schedule.B
    n_store = 1 + N // thin
    samples = np.empty((n_store, d))
    sample_index = np.empty(n_store, dtype=np.int64)
    samples[0], sample_index[0] = x, 0
    stored = 1
    accepted = np.zeros(N, dtype=bool)
    log_trace = np.empty(N + 1)
    log_trace[0] = lp
    covs = [C.copy()]
    epoch_acc = np.empty(N // m)
    running = np.zeros(d)
    dead_epochs = 0
    warned = False

    for i in range(1, N + 1):
        z = rng.standard_normal(d)
        u = rng.random()
        y = x + (factor * z if diag else factor @ z)
        lp_y = float(log_target(y))
        if u <= acceptance_prob(lp, lp_y) and lp_y > -np.inf:
            x, lp = y, lp_y
            accepted[i - 1] = True
        log_trace[i] = lp
        if i > B:
            running += x
        if i % thin == 0:
            samples[stored], sample_index[stored] = x, i
            stored += 1
        if i % m == 0:
            j = i // m
            a_bar = float(accepted[i - m:i].mean())
            epoch_acc[j - 1] = a_bar
            dead_epochs = dead_epochs + 1 if a_bar == 0 else 0
            if dead_epochs >= 10 and not warned:
                log.warning("no proposal accepted in 10 consecutive epochs (iteration %d); "
                            "the proposal covariance is probably too large", i)
                warned = True
            if j <= M:
                C = pam_adapt(C, a_bar, a_o, eps)
                factor = _proposal_factor(C)
            covs.append(C.copy())
            if progress is not None:
                progress(i, x, lp, a_bar)

    return Chain(samples[:stored], sample_index[:stored], accepted, log_trace, schedule,
                 covs, epoch_acc, seed, thin, a_o, eps, running / (N - B))


def posterior_mean(chain: Chain) -> np.ndarray:
    """Sample mean over iterations ``B+1 .. N``."""
    if chain.N <= chain.B:
        raise ValueError("chain has no samples after burn-in")
    if chain.mean_after_burn_in is not None:
        return chain.mean_after_burn_in.copy()
    return chain.post_burn_in_samples().mean(axis=0)


# -- diagnostics -----------------------------------------------------------------

def _autocorr(x):
    x = np.asarray(x, dtype=float) - np.mean(x)
    n = len(x)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acf = np.fft.irfft(f * np.conj(f), size)[:n]
    if acf[0] <= 0:
        return None
    return acf / acf[0]


def integrated_autocorrelation(x, c: float = 5.0) -> float:
    """Integrated autocorrelation time with Sokal's automatic window.

    Returns ``nan`` for a constant series.
    """
    rho = _autocorr(x)
    if rho is None:
        return np.nan
    tau = 2.0 * np.cumsum(rho) - 1.0
    window = np.arange(len(tau)) >= c * tau
    M = int(np.argmax(window)) if window.any() else len(tau) - 1
    return float(tau[M])


def geweke_z(x, first: float = 0.1, last: float = 0.5) -> float:
    """Geweke z-score comparing the means of the first and last segments.

    Segment variances are corrected for autocorrelation with the integrated
    autocorrelation time.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    a = x[: int(first * n)]
    b = x[n - int(last * n):]
    va = np.var(a, ddof=1) * max(integrated_autocorrelation(a), 1.0) / len(a)
    vb = np.var(b, ddof=1) * max(integrated_autocorrelation(b), 1.0) / len(b)
    if not va + vb > 0:
        return np.nan
    return float((a.mean() - b.mean()) / np.sqrt(va + vb))


@dataclass
class DiagnosticsReport:
    iat: np.ndarray
    geweke: np.ndarray
    acceptance_post_pilot: float
    acceptance_trace: np.ndarray
    window: int
    degenerate: bool
    thin: int = 1
    notes: list = field(default_factory=list)

    def summary(self) -> str:
        iat = self.iat[np.isfinite(self.iat)]
        gz = self.geweke[np.isfinite(self.geweke)]
        lines = [
            f"post-pilot acceptance ratio : {self.acceptance_post_pilot:.4f}",
            f"acceptance window (iters)   : {self.window}",
            f"degenerate chain            : {self.degenerate}",
            f"thinning of stored samples  : {self.thin}",
        ]
        if iat.size:
            lines.append(f"IAT (stored samples) median : {np.median(iat):.2f}  max: {iat.max():.2f}")
        if gz.size:
            lines.append(f"|Geweke z| < 2 fraction     : {np.mean(np.abs(gz) < 2):.3f}")
        lines += self.notes
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["coordinate", "iat", "geweke_z"])
            for i, (t, z) in enumerate(zip(self.iat, self.geweke)):
                w.writerow([i, repr(float(t)), repr(float(z))])


def diagnostics(chain: Chain, window: Optional[int] = None, max_coordinates: Optional[int] = None) -> DiagnosticsReport:
    """Autocorrelation, Geweke scores and acceptance trace after burn-in."""
    if chain.N - chain.B < 1000:
        raise ValueError("need at least 1000 iterations after burn-in")
    window = window or chain.schedule.m
    post = chain.post_burn_in_samples()
    coords = range(post.shape[1]) if max_coordinates is None else range(min(max_coordinates, post.shape[1]))
    iat = np.array([integrated_autocorrelation(post[:, i]) for i in coords])
    gz = np.array([geweke_z(post[:, i]) for i in coords])
    acc_pp = float(chain.accepted[chain.schedule.pilot:].mean())
    n_win = len(chain.accepted) // window
    trace = chain.accepted[: n_win * window].reshape(n_win, window).mean(axis=1)
    degenerate = bool(acc_pp == 0.0 or np.all(np.ptp(post, axis=0) == 0))
    notes = []
    if degenerate:
        notes.append("chain never moved after the pilot phase")
    return DiagnosticsReport(iat, gz, acc_pp, trace, window, degenerate, chain.thin, notes)
