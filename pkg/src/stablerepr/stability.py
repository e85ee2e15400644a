"""Stability certificates and quality metrics for linear TD(0) representations."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import SingularIterationMatrixError, ValidationError
from .linalg import (Spectrum, WeightedSpace, general_eigenvalues, make_spectrum,
                     orthogonal_factor, weighted_condition_number, weighted_norm)
from .mdp import Mdp, PolicyMatrix, compute_value_function, greedy_action_sets
from .representations import (Method, Representation, RepresentationFactory,
                              safe_threshold_index)

STABILITY_MARGIN = 1e-9
DIAGONALIZABLE_COND_CAP = 1e10


def _phi(rep) -> np.ndarray:
    phi = rep.phi if isinstance(rep, Representation) else np.asarray(rep, dtype=float)
    return phi[:, None] if phi.ndim == 1 else phi


def _check(phi: np.ndarray, pm: PolicyMatrix, space: WeightedSpace):
    if phi.shape[0] != pm.n or space.n != pm.n:
        raise ValidationError(f"dimension mismatch: phi {phi.shape}, P {pm.p_pi.shape}, xi {space.n}")


@dataclass(frozen=True)
class IterationMatrix:
    a_phi: np.ndarray
    gamma: float
    source: dict = field(default_factory=dict)


def iteration_matrix(rep, pm: PolicyMatrix, space: WeightedSpace, gamma: float) -> IterationMatrix:
    """``A_Phi = Phi^T Xi (I - gamma P^pi) Phi``."""
    phi = _phi(rep)
    _check(phi, pm, space)
    xphi = space.xi[:, None] * phi
    a = xphi.T @ phi - gamma * (xphi.T @ (pm.p_pi @ phi))
    method = rep.method.value if isinstance(rep, Representation) else "Custom"
    return IterationMatrix(a, float(gamma), {"method": method, "d": phi.shape[1]})


@dataclass(frozen=True)
class StabilityReport:
    spectrum: Spectrum
    min_real_part: float
    stable: bool
    marginal: bool
    max_step_size: float | None
    margin: float
    step_radius: float | None = None

    def to_json(self) -> dict:
        return {"spectrum": self.spectrum.to_json(), "min_real_part": self.min_real_part,
                "stable": self.stable, "marginal": self.marginal,
                "max_step_size": self.max_step_size, "margin": self.margin,
                "step_radius": self.step_radius}


def stability_report(im: IterationMatrix | np.ndarray, margin: float = STABILITY_MARGIN
                     ) -> StabilityReport:
    a = im.a_phi if isinstance(im, IterationMatrix) else np.asarray(im, dtype=float)
    spec = general_eigenvalues(a)
    lam = spec.eigenvalues
    min_re = float(lam.real.min())
    stable = min_re > margin
    marginal = -margin < min_re <= margin
    eta = radius = None
    if stable:
        eta = float(np.min(lam.real / np.abs(lam) ** 2))
        m = np.eye(a.shape[0]) - 0.99 * eta * a
        radius = general_eigenvalues(m).radius
    return StabilityReport(spec, min_re, stable, marginal, eta, margin, radius)


def is_stable(rep, pm, space, gamma, margin: float = STABILITY_MARGIN) -> bool:
    return stability_report(iteration_matrix(rep, pm, space, gamma), margin).stable


@dataclass(frozen=True)
class InducedSpectrumResult:
    """Spectrum of the induced transition ``Pi P Pi`` restricted to ``Span(Phi)``.

    The remaining ``n - d`` eigenvalues of the full ``n x n`` matrix are zero.
    """

    spectrum: Spectrum
    stable: bool
    threshold: float
    orthogonalized: bool
    agrees_with_iteration_matrix: bool
    raw_parametrization_stable: bool | None = None


def _induced_core(q: np.ndarray, pm: PolicyMatrix, space: WeightedSpace) -> np.ndarray:
    """``Q^T Xi P Q`` for Xi-orthonormal ``Q``; shares the nonzero spectrum of ``Pi P Pi``."""
    return (space.xi[:, None] * q).T @ (pm.p_pi @ q)


def induced_spectrum_check(rep, pm: PolicyMatrix, space: WeightedSpace, gamma: float,
                           margin: float = STABILITY_MARGIN) -> InducedSpectrumResult:
    phi = _phi(rep)
    _check(phi, pm, space)
    orthogonal = isinstance(rep, Representation) and rep.is_orthogonal
    q = phi if orthogonal else orthogonal_factor(phi, space)[0]
    spec = general_eigenvalues(_induced_core(q, pm, space))
    threshold = np.inf if gamma == 0 else 1.0 / gamma
    stable = spec.max_real < threshold - margin * (1.0 if gamma == 0 else threshold)
    via_a = is_stable(q, pm, space, gamma, margin)
    raw = None if orthogonal else is_stable(phi, pm, space, gamma, margin)
    return InducedSpectrumResult(spec, bool(stable), threshold, not orthogonal,
                                 bool(stable) == via_a, raw)


def svd_sr_spectrum_check(rep: Representation, pm: PolicyMatrix, space: WeightedSpace,
                          gamma: float, margin: float = STABILITY_MARGIN
                          ) -> tuple[Spectrum, bool]:
    """Nonzero spectrum of the rank-d successor approximation ``U Sigma V^T Xi``.

    Uses ``Spec(U S V^T Xi) \\ {0} = Spec(S V^T Xi U)``; the remaining
    ``n - d`` eigenvalues are exactly zero.
    """
    if "singular_values" not in rep.factors or "right_vectors" not in rep.factors:
        raise ValidationError("representation carries no SVD factors (build it with SVD_SR)")
    u, s, v = rep.phi, rep.factors["singular_values"], rep.factors["right_vectors"]
    core = s[:, None] * ((space.xi[:, None] * v).T @ u)
    spec = general_eigenvalues(core)
    return spec, bool(spec.min_real > margin)


def epsilon_invariance(rep, pm: PolicyMatrix, space: WeightedSpace) -> float:
    """``max_{v in Span} ||Pi P v - P v||_Xi / ||v||_Xi``."""
    phi = _phi(rep)
    _check(phi, pm, space)
    q = orthogonal_factor(phi, space)[0]
    qw = space.whiten_vectors(q)
    leak = space.whiten_vectors(pm.p_pi @ q)
    leak -= qw @ (qw.T @ leak)
    return float(np.linalg.norm(leak, 2))


@dataclass(frozen=True)
class KrylovEpsilon:
    epsilon: float
    exact_invariance: bool
    dimension: int


def krylov_epsilon(pm: PolicyMatrix, space: WeightedSpace, r, d: int) -> KrylovEpsilon:
    """Leakage of the one direction of ``K_d`` orthogonal to ``K_{d-1}``."""
    factory = RepresentationFactory(pm, space, r)
    cols = factory.krylov_columns(d)
    rank = factory.krylov_rank(d)
    if rank < d:
        return KrylovEpsilon(0.0, True, rank)
    q = orthogonal_factor(cols, space)[0]
    v = q[:, -1]  # (I - Pi_{d-1}) P^{d-1} r, normalized
    if d == pm.n:
        return KrylovEpsilon(0.0, True, d)
    qw = space.whiten_vectors(q)
    pv = space.whiten_vectors(pm.p_pi @ v)
    leak = pv - qw @ (qw.T @ pv)
    return KrylovEpsilon(float(np.linalg.norm(leak) / weighted_norm(v, space)), False, d)


@dataclass(frozen=True)
class InvarianceReport:
    epsilon: float | None
    bound: float | None
    diagonalizable: bool
    kappa: float | None
    note: str = ""


def invariance_stability_bound(pm: PolicyMatrix, space: WeightedSpace, gamma: float,
                               cond_cap: float = DIAGONALIZABLE_COND_CAP) -> InvarianceReport:
    """Largest epsilon-invariance certified stable by Bauer-Fike, ``(1-g)/(g kappa)``."""
    pw = space.whiten_operator(pm.p_pi)
    _, vw = np.linalg.eig(pw)
    vw = vw / np.linalg.norm(vw, axis=0)
    s = np.linalg.svd(vw, compute_uv=False)
    cond = np.inf if s[-1] == 0 else s[0] / s[-1]
    if not np.isfinite(cond) or cond > cond_cap:
        return InvarianceReport(None, None, False, None,
                                f"eigenbasis condition {cond:.3g} exceeds cap; treated as defective")
    eigenbasis = space.unwhiten_vectors(vw) * space.sqrt_xi[None, :]
    kappa = weighted_condition_number(eigenbasis, space)
    bound = np.inf if gamma == 0 else (1.0 - gamma) / (gamma * kappa)
    return InvarianceReport(None, float(bound), True, float(kappa))


def positive_definite_check(rep, pm: PolicyMatrix, space: WeightedSpace,
                            gamma: float) -> tuple[bool, float]:
    a = iteration_matrix(rep, pm, space, gamma).a_phi
    min_eig = float(np.linalg.eigvalsh(0.5 * (a + a.T))[0])
    return min_eig > 0.0, min_eig


def unsafe_top_basis_check(pm: PolicyMatrix, space: WeightedSpace, gamma: float) -> bool | None:
    """Whether ``[u_1, ..., u_{d*-1}]`` (eigenvalues of K at or above ``1/gamma``)
    has an iteration matrix with every eigenvalue in the open left half-plane.

    ``None`` when no eigenvalue of K reaches the threshold.
    """
    lam, u = RepresentationFactory(pm, space, None, gamma).k_eig
    start = safe_threshold_index(lam, gamma)
    count = lam.size if start is None else start
    if count == 0:
        return None
    spec = general_eigenvalues(iteration_matrix(u[:, :count], pm, space, gamma).a_phi)
    return bool(spec.max_real < 0.0)


def td_fixed_point(rep, pm: PolicyMatrix, space: WeightedSpace, r, gamma: float) -> np.ndarray:
    """``theta = A_Phi^{-1} Phi^T Xi r`` computed through ``Phi = Q R``.

    ``Phi theta = Q A_Q^{-1} Q^T Xi r`` depends only on the span, which keeps the
    value estimate accurate for ill-conditioned parametrizations.
    """
    phi = _phi(rep)
    _check(phi, pm, space)
    r = np.asarray(r, dtype=float).reshape(-1)
    q, rr = orthogonal_factor(phi, space)
    a_q = iteration_matrix(q, pm, space, gamma).a_phi
    s = np.linalg.svd(a_q, compute_uv=False)
    if s[-1] <= 1e-13 * max(s[0], 1.0):
        raise SingularIterationMatrixError(
            f"iteration matrix is singular (sigma_min={s[-1]:.3g}); TD fixed point does not exist")
    y = np.linalg.solve(a_q, q.T @ (space.xi * r))
    return sla.solve_triangular(rr, y)


@dataclass(frozen=True)
class QualityMetrics:
    policy_accuracy: float
    optimal_projection_error: float
    bellman_projection_error: float
    fixed_point_exists: bool

    def to_json(self) -> dict:
        return {"policy_accuracy": self.policy_accuracy,
                "optimal_projection_error": self.optimal_projection_error,
                "bellman_projection_error": self.bellman_projection_error,
                "fixed_point_exists": self.fixed_point_exists}


def policy_accuracy(q_hat, q_true, n_states: int, n_actions: int) -> float:
    """Fraction of states whose greedy action sets under both estimates intersect."""
    a = greedy_action_sets(q_hat, n_states, n_actions)
    b = greedy_action_sets(q_true, n_states, n_actions)
    return float(np.mean(np.any(a & b, axis=1)))


def evaluate_quality(rep, pm: PolicyMatrix, space: WeightedSpace, mdp: Mdp, policy=None,
                     gamma: float | None = None, q_true: np.ndarray | None = None
                     ) -> QualityMetrics:
    gamma = mdp.discount if gamma is None else gamma
    phi = _phi(rep)
    _check(phi, pm, space)
    if q_true is None:
        q_true = compute_value_function(pm, mdp.reward, gamma)
    q, rr = orthogonal_factor(phi, space)
    qw = space.whiten_vectors(q)
    tw = space.whiten_vectors(q_true)
    opt_err = float(np.linalg.norm(tw - qw @ (qw.T @ tw)))
    try:
        theta = td_fixed_point(q, pm, space, mdp.reward, gamma)
    except SingularIterationMatrixError:
        return QualityMetrics(float("nan"), opt_err, float("nan"), False)
    q_hat = q @ theta
    bell = weighted_norm(q_true - q_hat, space)
    acc = policy_accuracy(q_hat, q_true, mdp.n_states, mdp.n_actions)
    return QualityMetrics(acc, opt_err, bell, True)


def analyze(rep, pm: PolicyMatrix, space: WeightedSpace, gamma: float, reward=None,
            mdp: Mdp | None = None, margin: float = STABILITY_MARGIN) -> dict:
    """Every diagnostic of one representation as a JSON-ready dict."""
    im = iteration_matrix(rep, pm, space, gamma)
    report = stability_report(im, margin)
    out = {"d": int(_phi(rep).shape[1]), "gamma": gamma, **report.to_json()}
    out["iteration_matrix"] = im.a_phi.tolist()
    out["epsilon_invariance"] = epsilon_invariance(rep, pm, space)
    induced = induced_spectrum_check(rep, pm, space, gamma, margin)
    out["induced_spectrum"] = induced.spectrum.to_json()
    out["induced_stable"] = induced.stable
    is_pd, min_sym = positive_definite_check(rep, pm, space, gamma)
    out["is_pd"], out["min_sym_eig"] = is_pd, min_sym
    bound = invariance_stability_bound(pm, space, gamma)
    out["invariance_bound"] = bound.bound
    out["eigenbasis_kappa"] = bound.kappa
    out["diagonalizable"] = bound.diagonalizable
    if mdp is not None:
        out.update(evaluate_quality(rep, pm, space, mdp, gamma=gamma).to_json())
        reward = mdp.reward
    if reward is not None:
        try:
            out["theta_td"] = td_fixed_point(rep, pm, space, reward, gamma).tolist()
        except SingularIterationMatrixError:
            out["theta_td"] = None
    return out
