"""Finite MDPs, policy-induced chains on state-action pairs, sampling and model estimation.

State-action pairs are flattened row-major: ``h = s * n_actions + a``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConvergenceError, NumericalError, ValidationError

logger = logging.getLogger(__name__)

XI_FLOOR = 1e-8
_ROW_TOL = 1e-12


@dataclass(frozen=True)
class Mdp:
    """Tabular MDP ``(S, A, P, r, rho, gamma)``.

    ``transition`` has shape ``(n_states, n_actions, n_states)`` and ``reward``
    is the flat vector over state-action pairs.
    """

    transition: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    discount: float
    name: str = "mdp"

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=float)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValidationError(f"transition must be (S, A, S), got {p.shape}")
        n_s, n_a, _ = p.shape
        r = np.asarray(self.reward, dtype=float).reshape(-1)
        rho = np.asarray(self.initial_dist, dtype=float).reshape(-1)
        if r.size != n_s * n_a:
            raise ValidationError(f"reward has {r.size} entries, expected {n_s * n_a}")
        if rho.size != n_s:
            raise ValidationError(f"initial_dist has {rho.size} entries, expected {n_s}")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=2) - 1.0)) > _ROW_TOL:
            raise ValidationError("every (state, action) row of transition must be a distribution")
        if np.any(rho < 0) or abs(rho.sum() - 1.0) > _ROW_TOL:
            raise ValidationError("initial_dist must be a probability vector")
        if not 0.0 <= self.discount < 1.0:
            raise ValidationError(f"discount must lie in [0, 1), got {self.discount}")
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_dist", rho)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n(self) -> int:
        """Number of state-action pairs."""
        return self.n_states * self.n_actions

    def flat_transition(self) -> np.ndarray:
        """``P(s'|s,a)`` as an ``(n, n_states)`` matrix."""
        return self.transition.reshape(self.n, self.n_states)


@dataclass(frozen=True)
class PolicyMatrix:
    """Transition matrix of the chain on state-action pairs induced by ``policy``.

    ``xi`` is optional; analysis routines take the data distribution through a
    ``WeightedSpace`` instead.
    """

    p_pi: np.ndarray
    policy: np.ndarray
    xi: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.p_pi.shape[0]

    def with_xi(self, xi) -> "PolicyMatrix":
        return PolicyMatrix(self.p_pi, self.policy, floor_distribution(xi))


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    seed: int | None = None
    episode_id: int = 0

    def __len__(self):
        return len(self.states)

    def __iter__(self) -> Iterator[tuple[int, int, float, int]]:
        for t in range(len(self.states)):
            yield (int(self.states[t]), int(self.actions[t]),
                   float(self.rewards[t]), int(self.next_states[t]))


def floor_distribution(xi, floor: float = XI_FLOOR) -> np.ndarray:
    """Normalize ``xi`` and lift every entry to at least ``floor``.

    Mass for the lifted entries is taken proportionally from the others, so the
    result sums to one, has every entry ``>= floor`` and the map is idempotent.
    """
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if np.any(xi < 0) or not np.isfinite(xi).all():
        raise ValidationError("distribution entries must be finite and nonnegative")
    total = xi.sum()
    if total <= 0:
        raise ValidationError("distribution has no mass")
    if floor * xi.size >= 1.0:
        raise ValidationError("floor too large for the vector length")
    if abs(total - 1.0) <= 1e-12 and xi.min() >= floor:
        return xi.copy()  # already a floored distribution: keep it bit-for-bit
    out = xi / total
    low = out < floor
    for _ in range(xi.size):
        if not low.any():
            break
        free = out[~low].sum()
        out = np.where(low, floor, out * (1.0 - floor * low.sum()) / free)
        new_low = low | (out < floor)
        if (new_low == low).all():
            break
        low = new_low
    return out


def validate_policy(policy, n_states: int, n_actions: int) -> np.ndarray:
    pi = np.asarray(policy, dtype=float)
    if pi.shape != (n_states, n_actions):
        raise ValidationError(f"policy shape {pi.shape} does not match MDP ({n_states}, {n_actions})")
    if np.any(pi < 0) or np.max(np.abs(pi.sum(axis=1) - 1.0)) > 1e-10:
        raise ValidationError("policy rows must be probability distributions")
    return pi


def compose_with_policy(next_state: np.ndarray, policy: np.ndarray) -> np.ndarray:
    """Turn ``(n, S)`` next-state probabilities into an ``(n, n)`` matrix over pairs."""
    n_s, n_a = policy.shape
    return (next_state[:, :, None] * policy[None, :, :]).reshape(next_state.shape[0], n_s * n_a)


def build_policy_matrix(mdp: Mdp, policy) -> PolicyMatrix:
    """``P^pi[(s,a),(s',a')] = P(s'|s,a) * pi(a'|s')``."""
    pi = validate_policy(policy, mdp.n_states, mdp.n_actions)
    return PolicyMatrix(compose_with_policy(mdp.flat_transition(), pi), pi)


def compute_value_function(pm: PolicyMatrix, reward, discount: float) -> np.ndarray:
    """Solve ``(I - gamma P^pi) Q = r``."""
    if not 0.0 <= discount < 1.0:
        raise ValidationError("discount must lie in [0, 1)")
    r = np.asarray(reward, dtype=float).reshape(-1)
    if r.size != pm.n:
        raise ValidationError("reward length does not match the policy matrix")
    m = np.eye(pm.n) - discount * pm.p_pi
    try:
        q = np.linalg.solve(m, r)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"value solve failed (cond ~ {np.linalg.cond(m):.3g})") from exc
    return q


def greedy_action_sets(q, n_states: int, n_actions: int, rtol: float = 1e-9) -> np.ndarray:
    """Boolean ``(S, A)`` mask of actions within ``rtol`` (relative) of the best."""
    q = np.asarray(q, dtype=float).reshape(n_states, n_actions)
    best = q.max(axis=1, keepdims=True)
    tol = rtol * np.maximum(1.0, np.abs(q).max())
    return q >= best - tol


def greedy_actions(q, n_states: int, n_actions: int) -> np.ndarray:
    # lowest index among near-ties keeps the policy deterministic across platforms
    return np.argmax(greedy_action_sets(q, n_states, n_actions), axis=1)


@dataclass
class ValueIterationResult:
    q: np.ndarray
    policy: np.ndarray
    greedy: np.ndarray
    residual: float
    iterations: int


def bellman_optimality_backup(mdp: Mdp, q: np.ndarray) -> np.ndarray:
    v = q.reshape(mdp.n_states, mdp.n_actions).max(axis=1)
    return mdp.reward + mdp.discount * (mdp.flat_transition() @ v)


def value_iteration_optimal(mdp: Mdp, tolerance: float = 1e-10,
                            max_iterations: int = 1_000_000) -> ValueIterationResult:
    if tolerance <= 0:
        raise ValidationError("tolerance must be positive")
    q = np.zeros(mdp.n)
    for it in range(1, max_iterations + 1):
        q_new = bellman_optimality_backup(mdp, q)
        # residual of the returned iterate, not of q_new
        residual = float(np.max(np.abs(q_new - q)))
        if residual < tolerance:
            break
        q = q_new
    else:  # pragma: no cover - contraction makes this unreachable for gamma < 1
        raise ConvergenceError("value iteration did not converge", partial=q)
    greedy = greedy_actions(q, mdp.n_states, mdp.n_actions)
    policy = np.zeros((mdp.n_states, mdp.n_actions))
    policy[np.arange(mdp.n_states), greedy] = 1.0
    return ValueIterationResult(q, policy, greedy, residual, it)


def epsilon_greedy(q, epsilon: float, n_states: int | None = None,
                   n_actions: int | None = None) -> np.ndarray:
    """Epsilon-greedy policy over ``q``.

    ``q`` is either an ``(S, A)`` array or a flat vector with explicit sizes.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValidationError("epsilon must lie in [0, 1]")
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        if n_states is None or n_actions is None:
            raise ValidationError("flat q needs n_states and n_actions")
        q = q.reshape(n_states, n_actions)
    n_s, n_a = q.shape
    if n_a == 0:
        raise ValidationError("empty action set")
    policy = np.full((n_s, n_a), epsilon / n_a)
    policy[np.arange(n_s), greedy_actions(q, n_s, n_a)] += 1.0 - epsilon
    return policy


def uniform_policy(n_states: int, n_actions: int) -> np.ndarray:
    return np.full((n_states, n_actions), 1.0 / n_actions)


def stationary_distribution(pm: PolicyMatrix | np.ndarray, max_iterations: int = 100_000,
                            tol: float = 1e-13, damping: float = 0.999) -> np.ndarray:
    """Left Perron vector of the chain by power iteration.

    Switches to the lazy chain ``damping * P + (1 - damping) * I`` (same
    stationary law, aperiodic) when plain iteration stops making progress.
    """
    p = pm.p_pi if isinstance(pm, PolicyMatrix) else np.asarray(pm, dtype=float)
    n = p.shape[0]
    x = np.full(n, 1.0 / n)
    chain = p
    damped = False
    last_check = np.inf
    for it in range(1, max_iterations + 1):
        x_new = x @ chain
        x_new /= x_new.sum()
        step = np.max(np.abs(x_new - x))
        x = x_new
        if step < tol:
            break
        if it % 1000 == 0:
            if not damped and step > 0.5 * last_check:
                logger.debug("power iteration stalled at %d (step %.3g); damping", it, step)
                chain = damping * p + (1.0 - damping) * np.eye(n)
                damped = True
            last_check = step
    else:
        raise ConvergenceError(
            f"stationary distribution did not converge in {max_iterations} iterations",
            partial=x)
    x = np.clip(x, 0.0, None)
    return x / x.sum()


def _sample_rows(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling; ``cdf`` rows correspond to ``u`` entries."""
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def sample_trajectories(mdp: Mdp, behavior_policy, length: int, count: int,
                        rng_seed: int | None = 0) -> list[Trajectory]:
    """Roll out ``count`` trajectories of ``length`` steps from ``initial_dist``."""
    if length < 1:
        raise ValidationError("length must be at least 1")
    pi = validate_policy(behavior_policy, mdp.n_states, mdp.n_actions)
    rng = np.random.default_rng(rng_seed)
    pi_cdf = np.cumsum(pi, axis=1)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    s = rng.choice(mdp.n_states, size=count, p=mdp.initial_dist)
    states = np.empty((count, length), dtype=np.int64)
    actions = np.empty_like(states)
    next_states = np.empty_like(states)
    for t in range(length):
        a = _sample_rows(pi_cdf[s], rng.random(count))
        s_next = _sample_rows(p_cdf[s, a], rng.random(count))
        states[:, t], actions[:, t], next_states[:, t] = s, a, s_next
        s = s_next
    rewards = mdp.reward[states * mdp.n_actions + actions]
    return [Trajectory(states[i], actions[i], rewards[i], next_states[i], rng_seed, i)
            for i in range(count)]


def transition_counts(trajectories: Sequence[Trajectory], n_states: int,
                      n_actions: int) -> np.ndarray:
    counts = np.zeros((n_states, n_actions, n_states))
    for traj in trajectories:
        np.add.at(counts, (traj.states, traj.actions, traj.next_states), 1.0)
    return counts


def empirical_model_from_counts(counts, policy, floor: float = XI_FLOOR
                                ) -> tuple[PolicyMatrix, np.ndarray]:
    """Empirical ``(P_hat, xi_hat)`` from (possibly fractional) transition counts.

    Unvisited pairs ``(s, a)`` return to ``s`` and then pick ``a'`` from the
    evaluated policy.
    """
    counts = np.asarray(counts, dtype=float)
    n_s, n_a, _ = counts.shape
    pi = validate_policy(policy, n_s, n_a)
    visits = counts.sum(axis=2)
    if visits.sum() <= 0:
        raise ValidationError("no transitions observed")
    model = np.zeros_like(counts)
    seen = visits > 0
    model[seen] = counts[seen] / visits[seen][:, None]
    unseen_s, unseen_a = np.nonzero(~seen)
    model[unseen_s, unseen_a, unseen_s] = 1.0
    p_hat = compose_with_policy(model.reshape(n_s * n_a, n_s), pi)
    xi_hat = floor_distribution(visits.reshape(-1), floor)
    return PolicyMatrix(p_hat, pi, xi_hat), xi_hat


def empirical_model(trajectories: Sequence[Trajectory], n_states: int, n_actions: int,
                    policy, floor: float = XI_FLOOR) -> tuple[PolicyMatrix, np.ndarray]:
    if not trajectories:
        raise ValidationError("trajectories must be nonempty")
    counts = transition_counts(trajectories, n_states, n_actions)
    return empirical_model_from_counts(counts, policy, floor)


def visitation_distribution(trajectories: Sequence[Trajectory], n_states: int,
                            n_actions: int, floor: float = XI_FLOOR) -> np.ndarray:
    counts = transition_counts(trajectories, n_states, n_actions).sum(axis=2)
    return floor_distribution(counts.reshape(-1), floor)


def expected_visitation(mdp: Mdp, behavior_policy, length: int,
                        floor: float = XI_FLOOR) -> np.ndarray:
    """Exact state-action visitation of ``length``-step rollouts from ``initial_dist``.

    The limit of :func:`visitation_distribution` as the number of rollouts grows.
    """
    if length < 1:
        raise ValidationError("length must be at least 1")
    pm = build_policy_matrix(mdp, behavior_policy)
    x = (mdp.initial_dist[:, None] * pm.policy).reshape(-1)
    total = np.zeros(mdp.n)
    for _ in range(length):
        total += x
        x = x @ pm.p_pi
    return floor_distribution(total / length, floor)


def sample_transition_counts(mdp: Mdp, xi, count: int, rng_seed: int | None = 0
                             ) -> np.ndarray:
    """Counts of ``count`` i.i.d. transitions with ``(s, a) ~ xi`` and ``s' ~ P``."""
    if count < 1:
        raise ValidationError("count must be positive")
    xi = np.asarray(xi, dtype=float).reshape(-1)
    rng = np.random.default_rng(rng_seed)
    h = rng.choice(mdp.n, size=count, p=xi / xi.sum())
    cdf = np.cumsum(mdp.flat_transition(), axis=1)
    s_next = _sample_rows(cdf[h], rng.random(count))
    counts = np.zeros((mdp.n_states, mdp.n_actions, mdp.n_states))
    np.add.at(counts, (h // mdp.n_actions, h % mdp.n_actions, s_next), 1.0)
    return counts


def expected_counts(mdp: Mdp, xi, total: float = 1.0) -> np.ndarray:
    """Fractional transition counts ``total * xi(s,a) P(s'|s,a)``."""
    xi = np.asarray(xi, dtype=float).reshape(mdp.n_states, mdp.n_actions)
    return total * xi[:, :, None] * mdp.transition


# --- four-room domain -----------------------------------------------------

FOURROOM_LAYOUT = """\
wwwwwwwwwwwww
w     w     w
w     w     w
w           w
w     w     w
w     w     w
ww wwww     w
w     www www
w     w     w
w     w     w
w           w
w     w     w
wwwwwwwwwwwww"""

FOURROOM_GOAL = (1, 11)
FOURROOM_START = (9, 3)
# up, right, down, left
ACTION_DELTAS = ((-1, 0), (0, 1), (1, 0), (0, -1))


def fourroom_cells() -> list[tuple[int, int]]:
    """Free cells of the layout in row-major order; the index is the state id."""
    rows = FOURROOM_LAYOUT.splitlines()
    return [(i, j) for i, row in enumerate(rows) for j, ch in enumerate(row) if ch == " "]


def fourroom(discount: float = 0.99) -> Mdp:
    cells = fourroom_cells()
    index = {c: k for k, c in enumerate(cells)}
    n_s, n_a = len(cells), len(ACTION_DELTAS)
    transition = np.zeros((n_s, n_a, n_s))
    for k, (i, j) in enumerate(cells):
        for a, (di, dj) in enumerate(ACTION_DELTAS):
            transition[k, a, index.get((i + di, j + dj), k)] = 1.0
    reward = np.zeros((n_s, n_a))
    reward[index[FOURROOM_GOAL], :] = 1.0
    rho = np.zeros(n_s)
    rho[index[FOURROOM_START]] = 1.0
    return Mdp(transition, reward.reshape(-1), rho, discount, name="fourroom")


@dataclass
class FourRoomTask:
    """The policy-evaluation problem on the four-room domain.

    Holds the MDP, the evaluated policy (epsilon-greedy around the optimal
    one), its chain on state-action pairs and the behavior data distribution.
    """

    mdp: Mdp
    policy: np.ndarray
    pm: PolicyMatrix
    xi: np.ndarray
    buffer: list[Trajectory] = field(repr=False, default_factory=list)


XI_SOURCES = ("empirical", "exact")


def fourroom_task(discount: float = 0.99, epsilon: float = 0.1, n_trajectories: int = 1000,
                  length: int = 50, seed: int = 0, xi_source: str = "empirical"
                  ) -> FourRoomTask:
    """Evaluate epsilon-greedy(optimal) from uniform-policy rollouts out of the start cell.

    ``xi_source="empirical"`` weights by the floored visitation of the sampled
    buffer; ``"exact"`` uses the expected visitation of the same rollout scheme.
    """
    if xi_source not in XI_SOURCES:
        raise ValidationError(f"xi_source must be one of {XI_SOURCES}")
    mdp = fourroom(discount)
    opt = value_iteration_optimal(mdp)
    policy = epsilon_greedy(opt.q, epsilon, mdp.n_states, mdp.n_actions)
    pm = build_policy_matrix(mdp, policy)
    buffer = sample_trajectories(mdp, uniform_policy(mdp.n_states, mdp.n_actions),
                                 length, n_trajectories, seed)
    if xi_source == "exact":
        xi = expected_visitation(mdp, uniform_policy(mdp.n_states, mdp.n_actions), length)
    else:
        xi = visitation_distribution(buffer, mdp.n_states, mdp.n_actions)
    return FourRoomTask(mdp, policy, PolicyMatrix(pm.p_pi, policy, xi), xi, buffer)
