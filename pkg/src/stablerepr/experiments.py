"""Sweep and learnability drivers shared by the command line and the tests."""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import StableReprError, ValidationError
from .linalg import WeightedSpace, subspace_distance
from .mdp import (Mdp, PolicyMatrix, Trajectory, build_policy_matrix, empirical_model_from_counts,
                  epsilon_greedy, expected_counts, expected_visitation, floor_distribution,
                  fourroom, sample_trajectories, sample_transition_counts,
                  stationary_distribution, uniform_policy, value_iteration_optimal,
                  visitation_distribution)
from .representations import CATALOG, Method, RepresentationFactory, TruncationWarning
from .stability import (epsilon_invariance, evaluate_quality, iteration_matrix,
                        positive_definite_check, stability_report)

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ("method", "d", "effective_d", "stable", "min_real_part", "epsilon", "is_pd",
                 "policy_accuracy", "opt_proj_err", "bellman_err", "status")
LEARNABILITY_COLUMNS = ("method", "d", "n_samples", "seed", "subspace_distance", "status")
XI_CHOICES = ("empirical", "exact", "stationary", "uniform")


@dataclass
class Problem:
    """A policy-evaluation instance: MDP, evaluated policy, its chain and weights."""

    mdp: Mdp
    policy: np.ndarray
    pm: PolicyMatrix
    xi: np.ndarray
    gamma: float
    buffer: list[Trajectory] = field(default_factory=list, repr=False)
    xi_source: str = "empirical"

    @property
    def space(self) -> WeightedSpace:
        return WeightedSpace(self.xi)

    def factory(self) -> RepresentationFactory:
        return RepresentationFactory(self.pm, self.space, self.mdp.reward, self.gamma)


def default_policy(mdp: Mdp, epsilon: float = 0.1) -> np.ndarray:
    """Epsilon-greedy around the optimal policy (the evaluated policy)."""
    opt = value_iteration_optimal(mdp)
    return epsilon_greedy(opt.q, epsilon, mdp.n_states, mdp.n_actions)


def build_problem(mdp: Mdp | None = None, policy=None, xi="empirical", gamma=None,
                  seed: int = 0, n_trajectories: int = 1000, length: int = 50) -> Problem:
    """Assemble a :class:`Problem`; ``xi`` is a source name or an explicit vector.

    Behavior data come from uniform-policy rollouts out of ``initial_dist``.
    """
    mdp = fourroom() if mdp is None else mdp
    gamma = mdp.discount if gamma is None else float(gamma)
    if not 0.0 <= gamma < 1.0:
        raise ValidationError("gamma must lie in [0, 1)")
    if gamma != mdp.discount:
        mdp = Mdp(mdp.transition, mdp.reward, mdp.initial_dist, gamma, mdp.name)
    policy = default_policy(mdp) if policy is None else policy
    pm = build_policy_matrix(mdp, policy)
    behavior = uniform_policy(mdp.n_states, mdp.n_actions)
    buffer = sample_trajectories(mdp, behavior, length, n_trajectories, seed)
    if isinstance(xi, str):
        source = xi
        if xi == "empirical":
            weights = visitation_distribution(buffer, mdp.n_states, mdp.n_actions)
        elif xi == "exact":
            weights = expected_visitation(mdp, behavior, length)
        elif xi == "stationary":
            weights = floor_distribution(stationary_distribution(pm))
        elif xi == "uniform":
            weights = np.full(mdp.n, 1.0 / mdp.n)
        else:
            raise ValidationError(f"unknown xi source {xi!r}; choose from {XI_CHOICES}")
    else:
        source = "file"
        weights = np.asarray(xi, dtype=float).reshape(-1)
        if weights.size != mdp.n:
            raise ValidationError(f"xi has {weights.size} entries, expected {mdp.n}")
        weights = floor_distribution(weights)
    return Problem(mdp, pm.policy, PolicyMatrix(pm.p_pi, pm.policy, weights), weights, gamma,
                   buffer, source)


def _warm(factory: RepresentationFactory, methods, d_max: int):
    """Compute shared decompositions once so worker threads only read caches."""
    for m in methods:
        try:
            if m in (Method.EIG_SYMM, Method.SAFE_EIG_SYMM, Method.PROTO_VALUE):
                factory.k_eig
                factory.is_on_policy
            elif m is Method.SVD:
                factory.svd_p
            elif m is Method.SVD_SR:
                factory.svd_sr
            elif m is Method.SCHUR:
                factory.schur
            elif m in (Method.KRYLOV, Method.ORTHOG_KRYLOV):
                factory.krylov_rank(d_max)
        except StableReprError:
            pass


def sweep_cell(problem: Problem, factory: RepresentationFactory, method: Method, d: int) -> dict:
    row = {"method": method.value, "d": d}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", TruncationWarning)
        try:
            rep = factory.build(method, d)
        except ValidationError as exc:
            row["status"] = "not_applicable"
            logger.info("%s d=%d skipped: %s", method.value, d, exc)
            return row
    truncated = any(issubclass(w.category, TruncationWarning) for w in caught)
    pm, space = problem.pm, problem.space
    report = stability_report(iteration_matrix(rep, pm, space, problem.gamma))
    is_pd, _ = positive_definite_check(rep, pm, space, problem.gamma)
    quality = evaluate_quality(rep, pm, space, problem.mdp, gamma=problem.gamma)
    row.update(effective_d=rep.effective_d, stable=report.stable,
               min_real_part=report.min_real_part,
               epsilon=epsilon_invariance(rep, pm, space), is_pd=is_pd,
               policy_accuracy=quality.policy_accuracy,
               opt_proj_err=quality.optimal_projection_error,
               bellman_err=quality.bellman_projection_error,
               status=("marginal" if report.marginal else "truncated" if truncated else "ok"))
    return row


def sweep(problem: Problem, methods=CATALOG, d_values=range(1, 41), jobs: int = 1) -> list[dict]:
    """One row per ``(method, d)`` in the given order."""
    methods = [Method.parse(m) for m in methods]
    d_values = [int(d) for d in d_values]
    if not d_values:
        raise ValidationError("the d grid is empty")
    for d in d_values:
        if not 1 <= d <= problem.pm.n:
            raise ValidationError(f"d={d} outside [1, {problem.pm.n}]")
    factory = problem.factory()
    _warm(factory, methods, max(d_values))
    cells = [(m, d) for m in methods for d in d_values]
    if jobs <= 1:
        return [sweep_cell(problem, factory, m, d) for m, d in cells]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda c: sweep_cell(problem, factory, *c), cells))


def _learnability_method_rows(reference: RepresentationFactory, estimate: RepresentationFactory,
                              methods, d, n_samples, seed, space) -> list[dict]:
    rows = []
    for m in methods:
        row = {"method": m.value, "d": d, "n_samples": n_samples, "seed": seed}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            try:
                exact = reference.build(m, d).phi
                est = estimate.build(m, d).phi
            except ValidationError as exc:
                row["status"] = "not_applicable"
                logger.info("%s skipped: %s", m.value, exc)
                rows.append(row)
                continue
        row["subspace_distance"] = subspace_distance(est, exact, space)
        row["status"] = "ok"
        rows.append(row)
    return rows


def learnability(problem: Problem, methods=CATALOG, d: int = 10,
                 samples=(500, 5000, 50000), seeds=range(5), jobs: int = 1) -> list[dict]:
    """Subspace distance between representations built from sampled and exact models.

    Transitions are drawn i.i.d. with ``(s, a) ~ xi`` of ``problem``; the entry
    ``"exact"`` in ``samples`` injects the expected counts instead.
    """
    methods = [Method.parse(m) for m in methods]
    space = problem.space
    reference = problem.factory()
    _warm(reference, methods, d)
    tasks = []
    for n_samples in samples:
        if n_samples == "exact":
            tasks.append(("exact", None))
            continue
        n_samples = int(n_samples)
        if n_samples < 1:
            raise ValidationError("sample counts must be positive")
        tasks.extend((n_samples, int(s)) for s in seeds)

    def run(task):
        n_samples, seed = task
        if n_samples == "exact":
            counts = expected_counts(problem.mdp, problem.xi)
        else:
            counts = sample_transition_counts(problem.mdp, problem.xi, n_samples, seed)
        pm_hat, xi_hat = empirical_model_from_counts(counts, problem.policy)
        est = RepresentationFactory(pm_hat, WeightedSpace(xi_hat), problem.mdp.reward,
                                    problem.gamma)
        return _learnability_method_rows(reference, est, methods, d, n_samples,
                                         "" if seed is None else seed, space)

    if jobs <= 1:
        chunks = [run(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(run, tasks))
    return [row for chunk in chunks for row in chunk]


def mean_distances(rows: list[dict]) -> dict[str, dict]:
    """``{method: {n_samples: mean distance over seeds}}``."""
    acc: dict[str, dict] = {}
    for r in rows:
        if r.get("status") != "ok":
            continue
        acc.setdefault(r["method"], {}).setdefault(r["n_samples"], []).append(
            r["subspace_distance"])
    return {m: {k: float(np.mean(v)) for k, v in per.items()} for m, per in acc.items()}
