"""Representations built from the transition matrix, the data distribution and rewards.

Each builder returns a :class:`Representation`; :class:`RepresentationFactory`
caches the underlying full decompositions so that sweeps over ``d`` only slice.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np

from .errors import NumericalError, RankDeficiencyError, ValidationError
from .linalg import (RealSchur, WeightedSpace, first_dependent_column, orthogonalize,
                     real_schur, self_adjoint_eig, weighted_svd)
from .mdp import PolicyMatrix, floor_distribution, stationary_distribution

logger = logging.getLogger(__name__)


class Method(str, Enum):
    EIG_SYMM = "EigSymm"
    SAFE_EIG_SYMM = "SafeEigSymm"
    PROTO_VALUE = "ProtoValue"
    SVD = "SVD"
    SVD_SR = "SVD_SR"
    SCHUR = "Schur"
    KRYLOV = "Krylov"
    ORTHOG_KRYLOV = "OrthogKrylov"
    CUSTOM = "Custom"

    @classmethod
    def parse(cls, name) -> "Method":
        if isinstance(name, cls):
            return name
        for m in cls:
            if m.value.lower() == str(name).lower():
                return m
        raise ValidationError(f"unknown method {name!r}; choose from {[m.value for m in cls]}")


# the catalog of Table-1 style constructions, in sweep order
CATALOG = (Method.PROTO_VALUE, Method.EIG_SYMM, Method.SAFE_EIG_SYMM, Method.SVD,
           Method.SVD_SR, Method.SCHUR, Method.KRYLOV, Method.ORTHOG_KRYLOV)


class TruncationWarning(RuntimeWarning):
    """Requested ``d`` exceeds the number of available independent directions."""


@dataclass
class Representation:
    phi: np.ndarray
    method: Method
    is_orthogonal: bool
    requested_d: int
    provenance: dict = field(default_factory=dict)
    factors: dict = field(default_factory=dict, repr=False)

    @property
    def effective_d(self) -> int:
        return self.phi.shape[1]

    @property
    def n(self) -> int:
        return self.phi.shape[0]

    def gram(self, space: WeightedSpace) -> np.ndarray:
        return self.phi.T @ (space.xi[:, None] * self.phi)

    def check(self, space: WeightedSpace, tol: float = 1e-8) -> None:
        bad = first_dependent_column(self.phi, space)
        if bad is not None:
            raise RankDeficiencyError(f"representation column {bad} is dependent", column=bad)
        if self.is_orthogonal:
            err = np.abs(self.gram(space) - np.eye(self.effective_d)).max()
            if err > tol:
                raise ValidationError(f"orthogonal flag set but Gram error is {err:.3g}")


def custom_representation(phi, provenance: dict | None = None,
                          is_orthogonal: bool = False) -> Representation:
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    if phi.ndim != 2 or 0 in phi.shape:
        raise ValidationError(f"representation must be a nonempty n x d matrix, got {phi.shape}")
    return Representation(phi, Method.CUSTOM, is_orthogonal, phi.shape[1], dict(provenance or {}))


def orthogonalized(rep: Representation, space: WeightedSpace) -> Representation:
    """Xi-orthonormal representation with the same span (flag recorded in provenance)."""
    if rep.is_orthogonal:
        return rep
    q = orthogonalize(rep.phi, space).columns
    prov = dict(rep.provenance, orthogonalized_from=rep.method.value)
    return Representation(q, rep.method, True, rep.requested_d, prov, rep.factors)


def symmetrized_transition(pm: PolicyMatrix, space: WeightedSpace) -> np.ndarray:
    """``K = (P + Xi^{-1} P^T Xi) / 2``, self-adjoint in Xi."""
    return 0.5 * (pm.p_pi + space.adjoint(pm.p_pi))


def successor_representation(pm: PolicyMatrix, gamma: float) -> np.ndarray:
    if not 0.0 <= gamma < 1.0:
        raise ValidationError("gamma must lie in [0, 1)")
    n = pm.n
    try:
        return np.linalg.solve(np.eye(n) - gamma * pm.p_pi, np.eye(n))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("successor representation solve failed") from exc


def safe_threshold_index(eigenvalues: np.ndarray, gamma: float) -> int | None:
    """0-based index of the first (descending) eigenvalue strictly below ``1/gamma``."""
    limit = np.inf if gamma == 0 else 1.0 / gamma
    below = np.nonzero(eigenvalues < limit)[0]
    return int(below[0]) if below.size else None


def _check_d(d: int, n: int):
    if not isinstance(d, (int, np.integer)) or not 1 <= d <= n:
        raise ValidationError(f"d must be an integer in [1, {n}], got {d!r}")


def _truncate(method: Method, requested: int, available: int) -> int:
    if available < requested:
        warnings.warn(f"{method.value}: only {available} independent directions, "
                      f"requested d={requested}", TruncationWarning, stacklevel=3)
    return min(requested, available)


class RepresentationFactory:
    """Lazily computed decompositions of one ``(P^pi, Xi, r, gamma)`` instance."""

    def __init__(self, pm: PolicyMatrix, space: WeightedSpace, reward=None,
                 gamma: float = 0.99):
        if pm.n != space.n:
            raise ValidationError("policy matrix and space dimensions differ")
        self.pm = pm
        self.space = space
        self.reward = None if reward is None else np.asarray(reward, dtype=float).reshape(-1)
        self.gamma = float(gamma)

    @cached_property
    def k_eig(self) -> tuple[np.ndarray, np.ndarray]:
        k = symmetrized_transition(self.pm, self.space)
        return self_adjoint_eig(k, self.space, symmetrize=True)

    @cached_property
    def svd_p(self):
        return weighted_svd(self.pm.p_pi, self.space)

    @cached_property
    def svd_sr(self):
        return weighted_svd(successor_representation(self.pm, self.gamma), self.space)

    @cached_property
    def schur(self) -> RealSchur:
        return real_schur(self.pm.p_pi, self.space)

    @cached_property
    def is_on_policy(self) -> bool:
        stat = floor_distribution(stationary_distribution(self.pm))
        return bool(np.max(np.abs(stat - self.space.xi)) <= 1e-6)

    def krylov_columns(self, d: int) -> np.ndarray:
        if self.reward is None:
            raise ValidationError("Krylov representations need a reward vector")
        if not np.any(self.reward):
            raise ValidationError("Krylov space of the zero reward vector is empty")
        cached = getattr(self, "_krylov", None)
        if cached is None or cached.shape[1] < d:
            cols = [self.reward]
            for _ in range(d - 1):
                cols.append(self.pm.p_pi @ cols[-1])
            cached = np.column_stack(cols)
            self._krylov = cached
            self._krylov_rank = None
        return cached[:, :d]

    def krylov_rank(self, d: int) -> int:
        """Number of leading Krylov columns (of the first ``d``) that are independent."""
        cols = self.krylov_columns(d)
        checked = getattr(self, "_krylov_rank", None)
        if checked is None or checked[0] < d:
            bad = first_dependent_column(cols, self.space)
            checked = self._krylov_rank = (d, d if bad is None else bad)
        return min(checked[1], d)

    def build(self, method, d: int) -> Representation:
        method = Method.parse(method)
        n = self.pm.n
        _check_d(d, n)
        prov = {"d": int(d), "gamma": self.gamma}
        if method in (Method.EIG_SYMM, Method.PROTO_VALUE):
            if method is Method.PROTO_VALUE and not self.is_on_policy:
                raise ValidationError("ProtoValue needs on-policy data: xi differs from the "
                                      "stationary distribution of P^pi")
            lam, u = self.k_eig
            return Representation(u[:, :d].copy(), method, True, d, prov,
                                  {"eigenvalues": lam[:d].copy()})
        if method is Method.SAFE_EIG_SYMM:
            lam, u = self.k_eig
            start = safe_threshold_index(lam, self.gamma)
            if start is None:
                raise ValidationError("no eigenvalue of K lies below 1/gamma")
            take = min(d, n - start)
            if take < d:
                warnings.warn(f"SafeEigSymm: only {take} safe eigenvectors, requested d={d}",
                              TruncationWarning, stacklevel=2)
            prov["d_star"] = start + 1
            return Representation(u[:, start:start + take].copy(), method, True, d, prov,
                                  {"eigenvalues": lam[start:start + take].copy()})
        if method in (Method.SVD, Method.SVD_SR):
            u, s, v = self.svd_p if method is Method.SVD else self.svd_sr
            return Representation(u[:, :d].copy(), method, True, d, prov,
                                  {"singular_values": s[:d].copy(), "right_vectors": v[:, :d].copy()})
        if method is Method.SCHUR:
            schur = self.schur
            d_eff = schur.aligned_dimension(d)
            if d_eff != d:
                logger.debug("Schur: d=%d splits a complex pair, using %d", d, d_eff)
            prov["aligned_d"] = d_eff
            return Representation(schur.basis[:, :d_eff].copy(), method, True, d, prov,
                                  {"schur_eigenvalues": schur.eigenvalues()[:d_eff]})
        if method in (Method.KRYLOV, Method.ORTHOG_KRYLOV):
            d_eff = _truncate(method, d, self.krylov_rank(d))
            cols = self.krylov_columns(d)[:, :d_eff].copy()
            if method is Method.KRYLOV:
                return Representation(cols, method, False, d, prov)
            return Representation(orthogonalize(cols, self.space).columns, method, True, d, prov)
        raise ValidationError(f"{method.value} is not constructible from (P, Xi, r)")


def spectral_family(pm: PolicyMatrix, space: WeightedSpace, d: int,
                    variant=Method.EIG_SYMM, gamma: float = 0.99) -> Representation:
    variant = Method.parse(variant)
    if variant not in (Method.EIG_SYMM, Method.SAFE_EIG_SYMM, Method.PROTO_VALUE):
        raise ValidationError(f"{variant.value} is not a spectral variant")
    return RepresentationFactory(pm, space, None, gamma).build(variant, d)


def svd_family(pm: PolicyMatrix, space: WeightedSpace, d: int, gamma: float = 0.99,
               variant=Method.SVD) -> Representation:
    variant = Method.parse(variant)
    if variant not in (Method.SVD, Method.SVD_SR):
        raise ValidationError(f"{variant.value} is not an SVD variant")
    return RepresentationFactory(pm, space, None, gamma).build(variant, d)


def schur_representation(pm: PolicyMatrix, space: WeightedSpace, d: int) -> Representation:
    return RepresentationFactory(pm, space).build(Method.SCHUR, d)


def krylov_family(pm: PolicyMatrix, space: WeightedSpace, r, d: int,
                  variant=Method.ORTHOG_KRYLOV) -> Representation:
    variant = Method.parse(variant)
    if variant not in (Method.KRYLOV, Method.ORTHOG_KRYLOV):
        raise ValidationError(f"{variant.value} is not a Krylov variant")
    return RepresentationFactory(pm, space, r).build(variant, d)
