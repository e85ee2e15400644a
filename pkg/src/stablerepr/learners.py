"""Learning representations: exact orthogonal iteration and two linear-network
learners trained by stochastic gradient descent.

The network is ``f(h) = W2 W1 e_h`` on one-hot state-action inputs, so its
hidden layer ``phi(h) = W1[:, h]`` is a learned ``d``-dimensional feature map.
"""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import RankDeficiencyError, TrainingBlowUpError, ValidationError
from .linalg import WeightedSpace, orthogonalize
from .mdp import PolicyMatrix, Trajectory, validate_policy
from .representations import Method, Representation, RepresentationFactory

logger = logging.getLogger(__name__)

BLOWUP_NORM = 1e8


class RankWarning(RuntimeWarning):
    """Learned features are rank deficient in the weighted metric."""


# ---------------------------------------------------------------- orthogonal iteration

def orthogonal_iteration(pm: PolicyMatrix, space: WeightedSpace, d: int, iters: int = 1000,
                         phi0=None, rng_seed: int | None = 0, reference=None
                         ) -> Representation:
    """``Phi_k = Orthog(P Phi_{k-1})`` in the Xi metric.

    With ``reference`` given, the subspace distance to it after every iteration
    is stored in ``provenance["distances"]``. Columns that collapse into the
    span of earlier ones are replaced by random directions (counted in
    ``provenance["rerandomized"]``).
    """
    from .linalg import subspace_distance

    n = pm.n
    if not 1 <= d <= n:
        raise ValidationError(f"d must lie in [1, {n}]")
    if iters < 0:
        raise ValidationError("iters must be nonnegative")
    rng = np.random.default_rng(rng_seed)
    phi = rng.standard_normal((n, d)) if phi0 is None else np.asarray(phi0, dtype=float)
    if phi.shape != (n, d):
        raise ValidationError(f"phi0 must be {n} x {d}")
    rerandomized = 0

    def orthog(cols):
        nonlocal rerandomized
        for _ in range(10 * d):
            try:
                return orthogonalize(cols, space).columns
            except RankDeficiencyError as exc:
                cols = cols.copy()
                cols[:, exc.column] = rng.standard_normal(n)
                rerandomized += 1
        raise RankDeficiencyError("could not restore full rank during orthogonal iteration")

    q = orthog(phi)
    distances = []
    for _ in range(iters):
        q = orthog(pm.p_pi @ q)
        if reference is not None:
            distances.append(subspace_distance(q, reference, space))
    prov = {"learner": "orthogonal_iteration", "iters": iters, "rerandomized": rerandomized,
            "rng_seed": rng_seed}
    if reference is not None:
        prov["distances"] = distances
    return Representation(q, Method.CUSTOM, True, d, prov)


# ---------------------------------------------------------------- network and optimizers

@dataclass
class LinearPredictorNet:
    w1: np.ndarray  # d x n
    w2: np.ndarray  # out x d

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=float)
        self.w2 = np.asarray(self.w2, dtype=float)
        if self.w1.ndim != 2 or self.w2.ndim != 2 or self.w2.shape[1] != self.w1.shape[0]:
            raise ValidationError(f"incompatible shapes w1 {self.w1.shape}, w2 {self.w2.shape}")

    @classmethod
    def initialize(cls, n: int, d: int, out_dim: int | None = None,
                   rng: np.random.Generator | int | None = 0) -> "LinearPredictorNet":
        """Entries uniform in ``[-1/sqrt(n), 1/sqrt(n)]``."""
        rng = np.random.default_rng(rng)
        out_dim = d if out_dim is None else out_dim
        scale = 1.0 / np.sqrt(n)
        return cls(rng.uniform(-scale, scale, (d, n)), rng.uniform(-scale, scale, (out_dim, d)))

    @property
    def d(self) -> int:
        return self.w1.shape[0]

    @property
    def n(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    def features(self, h=None) -> np.ndarray:
        """Hidden activations, one row per state-action pair."""
        return self.w1.T if h is None else self.w1[:, h].T

    def predict(self, h=None) -> np.ndarray:
        return self.features(h) @ self.w2.T

    def copy(self) -> "LinearPredictorNet":
        return LinearPredictorNet(self.w1.copy(), self.w2.copy())

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.w2]

    def norm(self) -> float:
        return float(max(np.abs(self.w1).max(), np.abs(self.w2).max()))

    def renormalize(self, xi) -> None:
        """Scale features to ``E_xi[phi_i^2] = 1``; W2 compensates so ``f`` is unchanged."""
        scale = np.sqrt(self.w1 ** 2 @ np.asarray(xi, dtype=float))
        scale = np.where(scale > 0, scale, 1.0)
        self.w1 /= scale[:, None]
        self.w2 *= scale[None, :]


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"  # "sgd" or "adam"
    step_size: float = 4.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValidationError(f"optimizer must be 'sgd' or 'adam', got {self.kind!r}")
        if self.step_size <= 0:
            raise ValidationError("step size must be positive")


def sgd(step_size: float) -> OptimizerConfig:
    return OptimizerConfig("sgd", step_size)


def adam(step_size: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
         eps: float = 1e-8) -> OptimizerConfig:
    return OptimizerConfig("adam", step_size, beta1, beta2, eps)


class Optimizer:
    """Plain SGD or Adam (bias-corrected first and second moments)."""

    def __init__(self, config: OptimizerConfig, params: Sequence[np.ndarray]):
        self.config = config
        self.t = 0
        if config.kind == "adam":
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        c = self.config
        self.t += 1
        if c.kind == "sgd":
            for p, g in zip(params, grads):
                p -= c.step_size * g
            return
        b1t = 1.0 - c.beta1 ** self.t
        b2t = 1.0 - c.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= c.step_size * (m / b1t) / (np.sqrt(v / b2t) + c.eps)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 100_000
    minibatch: int = 32
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    target_refresh_interval: int | None = 10_000
    rng_seed: int | None = 0
    log_every: int = 100
    full_batch: bool = False  # exact expectation over xi instead of minibatches

    def __post_init__(self):
        if self.steps < 0:
            raise ValidationError("steps must be nonnegative")
        if self.minibatch < 1:
            raise ValidationError("minibatch must be at least 1")
        if self.target_refresh_interval is not None and self.target_refresh_interval < 1:
            raise ValidationError("target refresh interval must be positive")
        if self.log_every < 1:
            raise ValidationError("log_every must be positive")

    def to_json(self) -> dict:
        return asdict(self)


def schur_config(**overrides) -> TrainConfig:
    """Defaults for the feature-predictive learner (SGD, step 4, refresh 10k)."""
    base = dict(steps=100_000, minibatch=32, optimizer=sgd(4.0), target_refresh_interval=10_000)
    base.update(overrides)
    return TrainConfig(**base)


def krylov_config(**overrides) -> TrainConfig:
    """Defaults for the reward-predictive learner (Adam, lr 1e-3)."""
    base = dict(steps=100_000, minibatch=32, optimizer=adam(1e-3), target_refresh_interval=None)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------- losses

def regression_loss_and_grad(net: LinearPredictorNet, h: np.ndarray, targets: np.ndarray,
                             weights=None) -> tuple[float, list[np.ndarray]]:
    """Weighted mean squared error of ``f(h)`` against ``targets`` and its gradient.

    The squared error is averaged over output units; ``weights`` default to
    ``1 / batch`` (a minibatch mean). Both learners use this loss: they only
    differ in how targets are formed.
    """
    h = np.asarray(h, dtype=np.int64)
    w = np.full(h.size, 1.0 / h.size) if weights is None else np.asarray(weights, dtype=float)
    feats = net.w1[:, h]                       # d x B
    err = (net.w2 @ feats).T - targets         # B x out
    out = net.out_dim
    loss = float(np.sum(w * np.sum(err ** 2, axis=1)) / out)
    g_out = (2.0 / out) * w[:, None] * err     # B x out
    g_w2 = g_out.T @ feats.T
    g_feats = net.w2.T @ g_out.T               # d x B
    g_w1 = np.zeros_like(net.w1)
    np.add.at(g_w1.T, h, g_feats.T)
    return loss, [g_w1, g_w2]


@dataclass
class TransitionBuffer:
    """Flat arrays of transitions ``(s, a, s')`` collected by a behavior policy."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    n_states: int
    n_actions: int

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], n_states: int,
                          n_actions: int) -> "TransitionBuffer":
        if not trajectories:
            raise ValidationError("empty trajectory list")
        cat = lambda name: np.concatenate([getattr(t, name) for t in trajectories])
        return cls(cat("states"), cat("actions"), cat("next_states"), n_states, n_actions)

    def __len__(self):
        return self.states.size

    @property
    def pairs(self) -> np.ndarray:
        return self.states * self.n_actions + self.actions


def expected_next_features(net: LinearPredictorNet, policy: np.ndarray) -> np.ndarray:
    """``E_{a' ~ pi}[phi(s', a')]`` for every state ``s'`` (rows)."""
    n_s, n_a = policy.shape
    return np.einsum("sa,sad->sd", policy, net.features().reshape(n_s, n_a, -1))


def schur_predictive_loss(net: LinearPredictorNet, target: LinearPredictorNet, h, s_next,
                          policy) -> tuple[float, list[np.ndarray]]:
    """Minibatch loss ``||f(s,a) - E_{a'}[phi_target(s',a')]||^2`` (mean over outputs)."""
    targets = expected_next_features(target, policy)[np.asarray(s_next)]
    return regression_loss_and_grad(net, h, targets)


def krylov_targets(pm: PolicyMatrix, r, d: int) -> np.ndarray:
    """Rows of ``[r, P r, ..., P^{d-1} r]``: expected rewards ``d`` steps ahead."""
    r = np.asarray(r, dtype=float).reshape(-1)
    cols = [r]
    for _ in range(d - 1):
        cols.append(pm.p_pi @ cols[-1])
    return np.column_stack(cols)


def monte_carlo_krylov_targets(mdp, policy, h, d: int, n_rollouts: int,
                               rng: np.random.Generator) -> np.ndarray:
    """Average rewards along ``n_rollouts`` policy rollouts of ``d`` steps from each ``h``."""
    pi = validate_policy(policy, mdp.n_states, mdp.n_actions)
    n_a = mdp.n_actions
    h = np.repeat(np.asarray(h, dtype=np.int64), n_rollouts)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    pi_cdf = np.cumsum(pi, axis=1)
    out = np.empty((h.size, d))
    cur = h
    for i in range(d):
        out[:, i] = mdp.reward[cur]
        s, a = cur // n_a, cur % n_a
        s_next = np.minimum((rng.random(h.size)[:, None] >= p_cdf[s, a]).sum(1), mdp.n_states - 1)
        a_next = np.minimum((rng.random(h.size)[:, None] >= pi_cdf[s_next]).sum(1), n_a - 1)
        cur = s_next * n_a + a_next
    return out.reshape(-1, n_rollouts, d).mean(axis=1)


# ---------------------------------------------------------------- training loops

@dataclass
class TrainResult:
    net: LinearPredictorNet
    rep: Representation
    raw: Representation
    steps: np.ndarray
    losses: np.ndarray
    config: TrainConfig
    step: int

    def __iter__(self):
        yield self.net
        yield self.rep

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for k, v in zip(self.steps, self.losses):
                w.writerow([int(k), repr(float(v))])

    def write_checkpoint(self, path) -> None:
        save_checkpoint(path, self.net, self.config, self.step)


def save_checkpoint(path, net: LinearPredictorNet, config: TrainConfig, step: int) -> None:
    with open(path, "w") as fh:
        json.dump({"w1": net.w1.tolist(), "w2": net.w2.tolist(), "config": config.to_json(),
                   "step": int(step)}, fh)


def load_checkpoint(path) -> tuple[LinearPredictorNet, dict, int]:
    with open(path) as fh:
        data = json.load(fh)
    return LinearPredictorNet(data["w1"], data["w2"]), data.get("config", {}), int(data["step"])


def _check_blowup(net: LinearPredictorNet, step: int, history):
    if not np.all(np.isfinite(net.w1)) or not np.all(np.isfinite(net.w2)) \
            or net.norm() > BLOWUP_NORM:
        raise TrainingBlowUpError(f"parameters exceeded {BLOWUP_NORM:g} at step {step}",
                                  step, history)


def extract_representation(net: LinearPredictorNet, space: WeightedSpace | None = None,
                           rtol: float = 1e-10) -> Representation:
    """Hidden-layer features as a representation; rank deficiency is flagged."""
    phi = net.features().copy()
    prov = {"learner": "linear_predictor", "d": net.d}
    if space is not None:
        w = space.whiten_vectors(phi)
    else:
        w = phi
    s = np.linalg.svd(w, compute_uv=False)
    rank = int(np.sum(s > rtol * max(s[0], np.finfo(float).tiny))) if s.size and s[0] > 0 else 0
    prov["rank"] = rank
    prov["rank_deficient"] = rank < net.d
    if rank < net.d:
        warnings.warn(f"learned features have rank {rank} < d={net.d}", RankWarning,
                      stacklevel=2)
    return Representation(phi, Method.CUSTOM, False, net.d, prov)


def orthogonal_span(rep: Representation, space: WeightedSpace,
                    rtol: float = 1e-10) -> Representation:
    """Xi-orthonormal basis of the column space, dropping null directions."""
    w = space.whiten_vectors(rep.phi)
    u, s, _ = np.linalg.svd(w, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        raise RankDeficiencyError("representation is identically zero", column=0)
    rank = int(np.sum(s > rtol * s[0]))
    if rank == rep.effective_d:
        q = orthogonalize(rep.phi, space).columns
    else:
        q = space.unwhiten_vectors(u[:, :rank])
    prov = dict(rep.provenance, orthogonalized_from=rep.method.value, rank=rank)
    return Representation(q, rep.method, True, rep.requested_d, prov, rep.factors)


def train_schur_predictive(data, d: int, config: TrainConfig = None, *, policy=None,
                           xi=None, net: LinearPredictorNet | None = None) -> TrainResult:
    """Two-timescale learner predicting next-step target features.

    ``data`` is either a :class:`TransitionBuffer` (minibatches of stored
    transitions; ``policy`` is the evaluated policy, ``xi`` the distribution
    used for renormalization and for the analysis basis) or a
    :class:`PolicyMatrix` with ``xi`` (exact expectation over ``P``).
    """
    config = schur_config() if config is None else config
    if d < 1:
        raise ValidationError("d must be positive")
    rng = np.random.default_rng(config.rng_seed)
    exact = isinstance(data, PolicyMatrix)
    n = data.n if exact else data.n_states * data.n_actions
    if xi is None:
        if exact and data.xi is not None:
            xi = data.xi
        else:
            raise ValidationError("a data distribution xi is required")
    xi = np.asarray(xi, dtype=float)
    space = WeightedSpace(xi)
    if not exact:
        if policy is None:
            raise ValidationError("the evaluated policy is required with a transition buffer")
        policy = validate_policy(policy, data.n_states, data.n_actions)
        pairs, s_next_all = data.pairs, data.next_states
    if net is None:
        net = LinearPredictorNet.initialize(n, d, d, rng)
    opt = Optimizer(config.optimizer, net.params())
    steps, losses = [], []

    def refresh():
        net.renormalize(xi)
        tgt = net.copy()
        if exact:
            return data.p_pi @ tgt.features()
        return expected_next_features(tgt, policy)

    table = refresh()
    for k in range(config.steps):
        if config.target_refresh_interval and k and k % config.target_refresh_interval == 0:
            table = refresh()
        if config.full_batch:
            h = np.arange(n)
            loss, grads = regression_loss_and_grad(
                net, h, table if exact else _full_batch_targets(table, data, n), xi)
        elif exact:
            h = rng.choice(n, size=config.minibatch, p=xi / xi.sum())
            loss, grads = regression_loss_and_grad(net, h, table[h])
        else:
            idx = rng.integers(0, len(data), size=config.minibatch)
            loss, grads = regression_loss_and_grad(net, pairs[idx], table[s_next_all[idx]])
        if k % config.log_every == 0:
            steps.append(k)
            losses.append(loss)
        opt.step(net.params(), grads)
        _check_blowup(net, k + 1, list(zip(steps, losses)))
    raw = extract_representation(net, space)
    raw.provenance.update(learner="schur_predictive", steps=config.steps)
    return TrainResult(net, orthogonal_span(raw, space), raw, np.asarray(steps),
                       np.asarray(losses), config, config.steps)


def _full_batch_targets(table, buffer: TransitionBuffer, n: int) -> np.ndarray:
    """Empirical ``E[target | h]`` from the buffer (pairs never seen keep zero)."""
    sums = np.zeros((n, table.shape[1]))
    np.add.at(sums, buffer.pairs, table[buffer.next_states])
    counts = np.bincount(buffer.pairs, minlength=n).astype(float)
    return sums / np.maximum(counts, 1.0)[:, None]


def train_krylov_predictive(data, d: int, config: TrainConfig = None, *, reward=None,
                            xi=None, mdp=None, policy=None, n_rollouts: int = 1,
                            net: LinearPredictorNet | None = None) -> TrainResult:
    """Learner predicting the expected rewards of the next ``d`` steps.

    With ``data`` a :class:`PolicyMatrix` the targets are exact rows of
    ``[r, P r, ..., P^{d-1} r]``. With a :class:`TransitionBuffer` the starting
    pairs come from the buffer and targets are Monte Carlo averages over
    ``n_rollouts`` rollouts of ``policy`` in ``mdp``.
    """
    config = krylov_config() if config is None else config
    if d < 1:
        raise ValidationError("d must be positive")
    rng = np.random.default_rng(config.rng_seed)
    exact = isinstance(data, PolicyMatrix)
    if exact:
        if reward is None:
            raise ValidationError("reward vector required for exact targets")
        n = data.n
        targets = krylov_targets(data, reward, d)
        if xi is None:
            xi = data.xi
    else:
        if mdp is None or policy is None:
            raise ValidationError("rollout targets need the mdp and the evaluated policy")
        n = mdp.n
        pairs = data.pairs
    if xi is None:
        raise ValidationError("a data distribution xi is required")
    xi = np.asarray(xi, dtype=float)
    space = WeightedSpace(xi)
    if net is None:
        net = LinearPredictorNet.initialize(n, d, d, rng)
    opt = Optimizer(config.optimizer, net.params())
    steps, losses = [], []
    all_h = np.arange(n)
    for k in range(config.steps):
        if exact and config.full_batch:
            loss, grads = regression_loss_and_grad(net, all_h, targets, xi)
        elif exact:
            h = rng.choice(n, size=config.minibatch, p=xi / xi.sum())
            loss, grads = regression_loss_and_grad(net, h, targets[h])
        else:
            h = pairs[rng.integers(0, len(data), size=config.minibatch)]
            y = monte_carlo_krylov_targets(mdp, policy, h, d, n_rollouts, rng)
            loss, grads = regression_loss_and_grad(net, h, y)
        if k % config.log_every == 0:
            steps.append(k)
            losses.append(loss)
        opt.step(net.params(), grads)
        _check_blowup(net, k + 1, list(zip(steps, losses)))
    raw = extract_representation(net, space)
    raw.provenance.update(learner="krylov_predictive", steps=config.steps)
    return TrainResult(net, orthogonal_span(raw, space), raw, np.asarray(steps),
                       np.asarray(losses), config, config.steps)


def exact_krylov_reference(pm: PolicyMatrix, space: WeightedSpace, r, d: int) -> Representation:
    return RepresentationFactory(pm, space, r).build(Method.ORTHOG_KRYLOV, d)
