"""Expected and sample-based TD(0) runs used to confirm stability verdicts."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import SingularIterationMatrixError, ValidationError
from .linalg import WeightedSpace
from .mdp import Mdp, build_policy_matrix, validate_policy
from .stability import iteration_matrix, stability_report, td_fixed_point

logger = logging.getLogger(__name__)

CONVERGED = "converged"
DIVERGED = "diverged"
UNDECIDED = "undecided"


@dataclass(frozen=True)
class Tolerances:
    """Classification thresholds for a TD run.

    A run has converged once ``||theta - theta*|| <= atol + rtol * ||theta*||``
    and has diverged once ``||theta|| > divergence * (1 + ||theta_0||)``.
    """

    rtol: float = 1e-8
    atol: float = 0.0
    divergence: float = 1e6
    log_every: int = 100

    def __post_init__(self):
        if self.rtol < 0 or self.atol < 0 or self.rtol + self.atol == 0:
            raise ValidationError("need a positive convergence tolerance")
        if self.divergence <= 0 or self.log_every < 1:
            raise ValidationError("divergence threshold and logging interval must be positive")


@dataclass
class TdRunResult:
    final_theta: np.ndarray
    theta_trajectory: np.ndarray  # ||theta_k - theta*|| at each logged step
    outcome: str
    steps_taken: int
    log_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    theta_norms: np.ndarray = field(default_factory=lambda: np.zeros(0))
    theta_star: np.ndarray | None = None

    @property
    def converged(self) -> bool:
        return self.outcome == CONVERGED

    @property
    def diverged(self) -> bool:
        return self.outcome == DIVERGED

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "residual_norm", "theta_norm"])
            for k, res, nrm in zip(self.log_steps, self.theta_trajectory, self.theta_norms):
                w.writerow([int(k), repr(float(res)), repr(float(nrm))])


class _Monitor:
    """Logs residuals and classifies the run."""

    def __init__(self, theta0, theta_star, tol: Tolerances, residual_fn=None):
        self.tol = tol
        self.theta_star = theta_star
        self.limit = tol.divergence * (1.0 + np.linalg.norm(theta0))
        self.target = (None if theta_star is None
                       else tol.atol + tol.rtol * np.linalg.norm(theta_star))
        self.residual_fn = residual_fn
        self.steps, self.residuals, self.norms = [], [], []

    def residual(self, theta) -> float:
        if self.theta_star is not None:
            return float(np.linalg.norm(theta - self.theta_star))
        return float(self.residual_fn(theta)) if self.residual_fn else float("nan")

    def record(self, k: int, theta) -> str | None:
        nrm = float(np.linalg.norm(theta))
        res = self.residual(theta) if np.isfinite(nrm) else float("inf")
        self.steps.append(k)
        self.residuals.append(res)
        self.norms.append(nrm)
        if not np.isfinite(nrm) or nrm > self.limit:
            return DIVERGED
        if self.target is not None and res <= self.target:
            return CONVERGED
        if self.theta_star is None and self.residual_fn is not None:
            if res <= self.tol.atol + self.tol.rtol * max(nrm, 1.0):
                return CONVERGED
        return None

    def result(self, theta, outcome, k) -> TdRunResult:
        return TdRunResult(np.asarray(theta, dtype=float), np.asarray(self.residuals),
                           outcome, int(k), np.asarray(self.steps, dtype=int),
                           np.asarray(self.norms), self.theta_star)


def _affine_power(m: np.ndarray, c: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """``(M^k, c_k)`` such that ``k`` steps of ``x <- M x + c`` equal ``x <- M^k x + c_k``."""
    mk, ck = np.eye(m.shape[0]), np.zeros_like(c)
    base_m, base_c = m, c
    with np.errstate(over="ignore", invalid="ignore"):
        while k:
            if k & 1:
                mk, ck = base_m @ mk, base_m @ ck + base_c
            base_m, base_c = base_m @ base_m, base_m @ base_c + base_c
            k >>= 1
    return mk, ck


def expected_td0(rep, pm, space: WeightedSpace, r, gamma: float, eta: float,
                 theta0=None, max_steps: int = 1_000_000,
                 tolerances: Tolerances = Tolerances()) -> TdRunResult:
    """Iterate ``theta <- theta - eta (A_Phi theta - Phi^T Xi r)``.

    Between two logged steps the ``log_every`` updates are applied as one
    affine map (same iterates up to rounding).
    """
    if eta < 0:
        raise ValidationError("eta must be nonnegative")
    im = iteration_matrix(rep, pm, space, gamma)
    a = im.a_phi
    phi = rep.phi if hasattr(rep, "phi") else np.asarray(rep, dtype=float).reshape(pm.n, -1)
    r = np.asarray(r, dtype=float).reshape(-1)
    b = phi.T @ (space.xi * r)
    d = a.shape[0]
    theta = np.zeros(d) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    if theta.shape != (d,):
        raise ValidationError(f"theta0 must have {d} entries")
    try:
        theta_star = np.linalg.solve(a, b) if np.linalg.cond(a) < 1e14 else None
    except np.linalg.LinAlgError:
        theta_star = None
    monitor = _Monitor(theta, theta_star, tolerances,
                       residual_fn=lambda t: np.linalg.norm(a @ t - b))
    if eta == 0.0:
        monitor.record(0, theta)
        return monitor.result(theta, UNDECIDED, 0)
    verdict = monitor.record(0, theta)
    if verdict is not None:
        return monitor.result(theta, verdict, 0)
    m = np.eye(d) - eta * a
    c = eta * b
    block = tolerances.log_every
    jump_m, jump_c = _affine_power(m, c, block)
    k = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while k < max_steps:
            if k + block <= max_steps:
                theta = jump_m @ theta + jump_c
                k += block
            else:
                for _ in range(max_steps - k):
                    theta = m @ theta + c
                k = max_steps
            verdict = monitor.record(k, theta)
            if verdict is not None:
                return monitor.result(theta, verdict, k)
    return monitor.result(theta, UNDECIDED, k)


# ---------------------------------------------------------------- stochastic runs

def decaying_schedule(eta0: float, tau: float = 1e4) -> Callable[[int], float]:
    """``eta_k = eta0 / (1 + k / tau)``."""
    if eta0 <= 0 or tau <= 0:
        raise ValidationError("eta0 and tau must be positive")
    return lambda k: eta0 / (1.0 + k / tau)


def constant_schedule(eta: float) -> Callable[[int], float]:
    if eta <= 0:
        raise ValidationError("eta must be positive")
    return lambda k: eta


class XiSampler:
    """Draws state-action indices i.i.d. from a distribution over pairs."""

    def __init__(self, xi, n_actions: int):
        self.xi = np.asarray(xi, dtype=float)
        self.n_actions = n_actions
        self._cdf = np.cumsum(self.xi / self.xi.sum())

    def __call__(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        h = np.minimum(np.searchsorted(self._cdf, rng.random(size), side="right"),
                       self.xi.size - 1)
        return h // self.n_actions, h % self.n_actions


def _inverse_cdf(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = (u[:, None] >= cdf_rows).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def default_eta0(rep, pm, space, gamma) -> float:
    """``max_step_size`` of the expected dynamics if stable, else 0.1.

    Capped at ``1 / max_h ||phi(h)||^2`` so that a single sampled update never
    overshoots along its own feature direction.
    """
    report = stability_report(iteration_matrix(rep, pm, space, gamma))
    eta0 = report.max_step_size if report.stable else 0.1
    phi = rep.phi if hasattr(rep, "phi") else np.asarray(rep, dtype=float)
    return float(min(eta0, 1.0 / np.max(np.sum(phi ** 2, axis=1))))


def stochastic_td0(mdp: Mdp, eval_policy, behavior_sampler, rep, eta_schedule=None,
                   steps: int = 100_000, rng_seed: int | None = 0,
                   tolerances: Tolerances = Tolerances(), theta0=None,
                   gamma: float | None = None, chunk: int = 10_000) -> TdRunResult:
    """Per-sample TD(0) on ``(s, a, r, s', a')`` with ``(s, a)`` from the sampler.

    ``behavior_sampler(rng, size)`` returns arrays of states and actions. When it
    exposes ``xi`` the residual is measured against the expected fixed point.
    """
    gamma = mdp.discount if gamma is None else float(gamma)
    pi = validate_policy(eval_policy, mdp.n_states, mdp.n_actions)
    phi = rep.phi if hasattr(rep, "phi") else np.asarray(rep, dtype=float)
    if phi.shape[0] != mdp.n:
        raise ValidationError("representation rows must match state-action pairs")
    d = phi.shape[1]
    theta_star = None
    xi = getattr(behavior_sampler, "xi", None)
    pm = build_policy_matrix(mdp, pi)
    if xi is not None:
        space = WeightedSpace(xi / xi.sum())
        try:
            theta_star = td_fixed_point(rep, pm, space, mdp.reward, gamma)
        except SingularIterationMatrixError:
            theta_star = None
        if eta_schedule is None:
            eta_schedule = decaying_schedule(default_eta0(rep, pm, space, gamma))
    if eta_schedule is None:
        eta_schedule = decaying_schedule(0.1)
    elif not callable(eta_schedule):
        eta_schedule = constant_schedule(float(eta_schedule))

    theta = np.zeros(d) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    monitor = _Monitor(theta, theta_star, tolerances)
    rng = np.random.default_rng(rng_seed)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    pi_cdf = np.cumsum(pi, axis=1)
    n_a = mdp.n_actions
    verdict = monitor.record(0, theta)
    k = 0
    while k < steps and verdict is None:
        size = min(chunk, steps - k)
        s, a = behavior_sampler(rng, size)
        s_next = _inverse_cdf(p_cdf[s, a], rng.random(size))
        a_next = _inverse_cdf(pi_cdf[s_next], rng.random(size))
        h, h_next = s * n_a + a, s_next * n_a + a_next
        feats, feats_next = phi[h], phi[h_next]
        rewards = mdp.reward[h]
        etas = np.array([eta_schedule(k + i) for i in range(size)])
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(size):
                f = feats[i]
                delta = f @ theta - rewards[i] - gamma * (feats_next[i] @ theta)
                theta = theta - etas[i] * delta * f
                step = k + i + 1
                if step % tolerances.log_every == 0 or step == steps:
                    verdict = monitor.record(step, theta)
                    if verdict is not None:
                        k = step
                        break
            else:
                k += size
    return monitor.result(theta, verdict or UNDECIDED, k)
