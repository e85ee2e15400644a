"""Linear algebra in the inner product ``<v, w>_Xi = v^T Xi w``.

Every weighted decomposition is computed by whitening: a matrix ``A`` acting on
``(R^n, Xi)`` is represented by ``Xi^{1/2} A Xi^{-1/2}`` acting on Euclidean
``R^n``, and vectors by ``Xi^{1/2} v``.  The dense kernels underneath are
LAPACK's (via scipy): balanced Hessenberg/Francis QR for spectra, ``dgees``
plus ``dtrexc`` reordering for ordered real Schur forms.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .errors import ConvergenceError, RankDeficiencyError, ValidationError

RANK_RTOL = 1e-10


@dataclass(frozen=True)
class WeightedSpace:
    """``R^n`` with the inner product induced by a positive distribution ``xi``."""

    xi: np.ndarray
    sqrt_xi: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float).reshape(-1)
        if np.any(xi <= 0) or not np.isfinite(xi).all():
            raise ValidationError("weights must be finite and strictly positive")
        if abs(xi.sum() - 1.0) > 1e-10:
            raise ValidationError(f"weights must sum to one (got {xi.sum():.12g})")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "sqrt_xi", np.sqrt(xi))

    @classmethod
    def uniform(cls, n: int) -> "WeightedSpace":
        return cls(np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.xi.size

    def whiten_vectors(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        return self.sqrt_xi * v if v.ndim == 1 else self.sqrt_xi[:, None] * v

    def unwhiten_vectors(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        return v / self.sqrt_xi if v.ndim == 1 else v / self.sqrt_xi[:, None]

    def whiten_operator(self, a: np.ndarray) -> np.ndarray:
        return self.sqrt_xi[:, None] * np.asarray(a) / self.sqrt_xi[None, :]

    def unwhiten_operator(self, a: np.ndarray) -> np.ndarray:
        return np.asarray(a) * self.sqrt_xi[None, :] / self.sqrt_xi[:, None]

    def adjoint(self, a: np.ndarray) -> np.ndarray:
        """``A* = Xi^{-1} A^T Xi``."""
        return np.asarray(a).T * self.xi[None, :] / self.xi[:, None]


def _check_dim(space: WeightedSpace, *arrays):
    for a in arrays:
        if np.shape(a)[0] != space.n:
            raise ValidationError(f"leading dimension {np.shape(a)[0]} != space dimension {space.n}")


def weighted_inner(v, w, space: WeightedSpace) -> float:
    v, w = np.asarray(v, dtype=float), np.asarray(w, dtype=float)
    if v.shape != w.shape or v.ndim != 1:
        raise ValidationError("inner product needs two vectors of equal length")
    _check_dim(space, v)
    return float(np.dot(v * space.xi, w))


def weighted_norm(v, space: WeightedSpace) -> float:
    v = np.asarray(v, dtype=float)
    _check_dim(space, v)
    return float(np.linalg.norm(space.whiten_vectors(v)))


def weighted_operator_norm(a, space: WeightedSpace) -> float:
    return float(np.linalg.norm(space.whiten_operator(a), 2))


@dataclass(frozen=True)
class OrthogonalBasis:
    columns: np.ndarray
    space: WeightedSpace

    @property
    def d(self) -> int:
        return self.columns.shape[1]

    def gram(self) -> np.ndarray:
        return self.columns.T @ (self.space.xi[:, None] * self.columns)


def _as_columns(columns) -> np.ndarray:
    phi = np.asarray(columns, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    if phi.ndim != 2 or phi.shape[1] == 0 or phi.shape[0] == 0:
        raise ValidationError(f"expected a nonempty n x d matrix, got shape {phi.shape}")
    if not np.isfinite(phi).all():
        raise ValidationError("basis has non-finite entries")
    return phi


def first_dependent_column(columns, space: WeightedSpace, rtol: float = RANK_RTOL) -> int | None:
    """Index of the first column making the prefix rank deficient, or ``None``.

    The test is ``sigma_min < rtol * sigma_max`` on Xi-weighted singular values
    of each prefix; columns are compared on unit-norm scale.
    """
    w = space.whiten_vectors(_as_columns(columns))
    norms = np.linalg.norm(w, axis=0)
    if norms.max() == 0:
        return 0
    if np.any(norms <= rtol * norms.max()):
        return int(np.argmax(norms <= rtol * norms.max()))
    w = w / norms
    sv = np.linalg.svd(w, compute_uv=False)
    if sv[-1] >= rtol * sv[0]:
        return None
    r = np.linalg.qr(w, mode="r")
    for j in range(1, w.shape[1] + 1):
        s = np.linalg.svd(r[:j, :j], compute_uv=False)
        if s[-1] < rtol * s[0]:
            return j - 1
    return w.shape[1] - 1  # pragma: no cover


def orthogonalize(columns, space: WeightedSpace, rtol: float = RANK_RTOL) -> OrthogonalBasis:
    """Gram-Schmidt-equivalent Xi-orthonormal basis: leading ``k`` output columns
    span the leading ``k`` input columns for every ``k``."""
    phi = _as_columns(columns)
    _check_dim(space, phi)
    bad = first_dependent_column(phi, space, rtol)
    if bad is not None:
        raise RankDeficiencyError(f"column {bad} is linearly dependent on the preceding columns",
                                  column=bad)
    q, r = np.linalg.qr(space.whiten_vectors(phi))
    q = q * np.sign(np.diag(r))[None, :]
    return OrthogonalBasis(space.unwhiten_vectors(q), space)


def orthogonal_factor(columns, space: WeightedSpace, rtol: float = RANK_RTOL
                      ) -> tuple[np.ndarray, np.ndarray]:
    """``Phi = Q R`` with ``Q^T Xi Q = I`` and ``R`` upper triangular."""
    phi = _as_columns(columns)
    _check_dim(space, phi)
    bad = first_dependent_column(phi, space, rtol)
    if bad is not None:
        raise RankDeficiencyError(f"column {bad} is linearly dependent on the preceding columns",
                                  column=bad)
    q, r = np.linalg.qr(space.whiten_vectors(phi))
    sign = np.sign(np.diag(r))
    return space.unwhiten_vectors(q * sign[None, :]), sign[:, None] * r


def whitened_basis(columns, space: WeightedSpace) -> np.ndarray:
    """Euclidean-orthonormal basis of ``Xi^{1/2} Span(columns)``."""
    return space.whiten_vectors(orthogonalize(columns, space).columns)


def projection_operator(basis, space: WeightedSpace) -> np.ndarray:
    """``Pi = Phi (Phi^T Xi Phi)^{-1} Phi^T Xi``, the Xi-orthogonal projector."""
    qw = whitened_basis(basis, space)
    return space.unwhiten_operator(qw @ qw.T)


def subspace_distance(phi_a, phi_b, space: WeightedSpace) -> float:
    """``|| Xi^{1/2} (Pi_a - Pi_b) Xi^{-1/2} ||_F``."""
    qa = whitened_basis(phi_a, space)
    qb = whitened_basis(phi_b, space)
    return float(np.linalg.norm(qa @ qa.T - qb @ qb.T))


# --- spectra ---------------------------------------------------------------

def order_eigenvalues(values) -> np.ndarray:
    """Permutation sorting by descending magnitude, then descending real part,
    then descending imaginary part (so ``a + bi`` precedes ``a - bi``)."""
    values = np.asarray(values, dtype=complex)
    mag = np.round(np.abs(values), 12)
    re = np.round(values.real, 12)
    return np.lexsort((-values.imag, -re, -mag))


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray
    ordering: str = "magnitude-desc"

    def __len__(self):
        return self.eigenvalues.size

    def __iter__(self):
        return iter(self.eigenvalues)

    @property
    def radius(self) -> float:
        return float(np.max(np.abs(self.eigenvalues))) if self.eigenvalues.size else 0.0

    @property
    def min_real(self) -> float:
        return float(self.eigenvalues.real.min())

    @property
    def max_real(self) -> float:
        return float(self.eigenvalues.real.max())

    def to_json(self) -> list[dict[str, float]]:
        return [{"re": float(z.real), "im": float(z.imag)} for z in self.eigenvalues]


def make_spectrum(values) -> Spectrum:
    values = np.asarray(values, dtype=complex)
    return Spectrum(values[order_eigenvalues(values)])


def general_eigenvalues(a) -> Spectrum:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"expected a square matrix, got {a.shape}")
    if not np.isfinite(a).all():
        raise ValidationError("matrix has non-finite entries")
    if a.shape[0] == 0:
        return Spectrum(np.zeros(0, dtype=complex))
    try:
        values = sla.eigvals(a, check_finite=False)
    except sla.LinAlgError as exc:
        raise ConvergenceError(f"QR iteration failed to converge: {exc}") from exc
    return make_spectrum(values)


def spectral_radius(a) -> float:
    return general_eigenvalues(a).radius


def self_adjoint_eig(a, space: WeightedSpace, symmetrize: bool = False,
                     tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a Xi-self-adjoint operator, eigenvalues descending.

    Returns ``(lam, U)`` with ``A U = U diag(lam)`` and ``U^T Xi U = I``.
    """
    a = np.asarray(a, dtype=float)
    _check_dim(space, a)
    aw = space.whiten_operator(a)
    asym = np.linalg.norm(aw - aw.T)
    if asym > tol * max(1.0, np.linalg.norm(aw)) and not symmetrize:
        raise ValidationError(f"operator is not self-adjoint in Xi (asymmetry {asym:.3g})")
    lam, w = np.linalg.eigh(0.5 * (aw + aw.T))
    order = np.argsort(-lam, kind="stable")
    return lam[order], space.unwhiten_vectors(w[:, order])


def weighted_svd(a, space: WeightedSpace, d: int | None = None
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-``d`` factors of ``A = U Sigma V^T Xi`` with Xi-orthonormal ``U, V``."""
    a = np.asarray(a, dtype=float)
    _check_dim(space, a)
    n = a.shape[0]
    d = n if d is None else d
    if not 1 <= d <= n:
        raise ValidationError(f"d must lie in [1, {n}]")
    uw, s, vwt = np.linalg.svd(space.whiten_operator(a))
    return space.unwhiten_vectors(uw[:, :d]), s[:d], space.unwhiten_vectors(vwt[:d].T)


def weighted_condition_number(a, space: WeightedSpace) -> float:
    """``||A||_Xi ||A^{-1}||_Xi``; works for complex eigenbases too."""
    aw = space.sqrt_xi[:, None] * np.asarray(a) / space.sqrt_xi[None, :]
    s = np.linalg.svd(aw, compute_uv=False)
    if s[-1] <= np.finfo(float).eps * s[0] * aw.shape[0]:
        raise ValidationError("matrix is numerically singular")
    return float(s[0] / s[-1])


@dataclass(frozen=True)
class RealSchur:
    """``A = U R U^T Xi`` with ``U^T Xi U = I`` and ``R`` quasi-upper-triangular.

    ``block_starts`` lists the first index of each 1x1 / 2x2 diagonal block.
    Leading columns of ``basis`` span invariant subspaces for every
    block-aligned prefix.
    """

    basis: np.ndarray
    quasi_triangular: np.ndarray
    block_starts: tuple[int, ...]
    space: WeightedSpace

    def eigenvalues(self) -> np.ndarray:
        return _block_eigenvalues(self.quasi_triangular, self.block_starts)

    def aligned_dimension(self, d: int) -> int:
        """Smallest block-aligned prefix length ``>= d``."""
        n = self.quasi_triangular.shape[0]
        for start in self.block_starts:
            if start >= d:
                return start
        return n

    def is_aligned(self, d: int) -> bool:
        n = self.quasi_triangular.shape[0]
        return d == n or d in self.block_starts


def _blocks(t: np.ndarray) -> list[int]:
    n = t.shape[0]
    starts, i = [], 0
    while i < n:
        starts.append(i)
        i += 2 if i + 1 < n and t[i + 1, i] != 0.0 else 1
    return starts


def _block_eigenvalues(t: np.ndarray, starts) -> np.ndarray:
    n = t.shape[0]
    out = []
    bounds = list(starts) + [n]
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if hi - lo == 1:
            out.append(complex(t[lo, lo]))
        else:
            out.extend(np.linalg.eigvals(t[lo:hi, lo:hi]).astype(complex))
    return np.asarray(out, dtype=complex)


def _block_key(t, lo, hi):
    if hi - lo == 1:
        z = complex(t[lo, lo])
    else:
        ev = np.linalg.eigvals(t[lo:hi, lo:hi])
        z = ev[np.argmax(ev.imag)]
    return (-round(abs(z), 12), -round(z.real, 12), -z.imag)


def real_schur(a, space: WeightedSpace | None = None) -> RealSchur:
    """Real Schur form ordered by descending eigenvalue magnitude."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"expected a square matrix, got {a.shape}")
    if not np.isfinite(a).all():
        raise ValidationError("matrix has non-finite entries")
    space = space or WeightedSpace.uniform(a.shape[0])
    _check_dim(space, a)
    n = a.shape[0]
    try:
        t, z = sla.schur(space.whiten_operator(a), output="real")
    except sla.LinAlgError as exc:
        raise ConvergenceError(f"Schur QR iteration failed: {exc}") from exc
    t = np.asarray(t, order="F")
    z = np.asarray(z, order="F")
    pos = 0
    while pos < n:
        starts = [s for s in _blocks(t) if s >= pos]
        bounds = starts + [n]
        keys = [_block_key(t, lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
        src = starts[min(range(len(keys)), key=keys.__getitem__)]
        if src != pos:
            t, z, info = lapack.dtrexc(t, z, src + 1, pos + 1)
            if info != 0:
                raise ConvergenceError(f"Schur reordering failed (dtrexc info={info})")
        pos += 2 if pos + 1 < n and t[pos + 1, pos] != 0.0 else 1
    starts = _blocks(t)
    # keep only the subdiagonal entries that belong to 2x2 blocks
    sub = np.zeros(max(n - 1, 0))
    for s in starts:
        if s + 1 < n and s + 1 not in starts:
            sub[s] = t[s + 1, s]
    t = np.triu(t) + np.diag(sub, -1)
    return RealSchur(space.unwhiten_vectors(z), t, tuple(starts), space)
