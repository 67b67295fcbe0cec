"""Gaussian hypothesis pairs, subset restriction and divergence measures.

A selection ``A`` picks rows/columns of the full model; nothing here ever
materializes the binary selection matrix.  Quadratic forms and log
determinants go through Cholesky factors; no public function forms an
explicit inverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import DimensionError, FactorizationError, ParameterError

SYMMETRY_RTOL = 1e-12


# ---------------------------------------------------------------------------
# selections


@dataclass(frozen=True, eq=False)
class Selection:
    """Ordered set of distinct sensor indices over ``{0, ..., ground_size-1}``.

    The order records insertion history (e.g. greedy steps); equality and
    hashing use set semantics.
    """

    indices: tuple[int, ...]
    ground_size: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if self.ground_size < 1:
            raise DimensionError(f"ground set size must be >= 1, got {self.ground_size}")
        if len(set(idx)) != len(idx):
            raise DimensionError(f"duplicate indices in selection {idx}")
        bad = [i for i in idx if i < 0 or i >= self.ground_size]
        if bad:
            raise DimensionError(f"indices {bad} out of range for ground set of size {self.ground_size}")

    @classmethod
    def empty(cls, ground_size: int) -> "Selection":
        return cls((), ground_size)

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, item):
        return item in self.indices

    def __eq__(self, other):
        if not isinstance(other, Selection):
            return NotImplemented
        return self.ground_size == other.ground_size and frozenset(self.indices) == frozenset(other.indices)

    def __hash__(self):
        return hash((frozenset(self.indices), self.ground_size))

    def __repr__(self):
        return f"Selection({list(self.indices)}, M={self.ground_size})"

    def add(self, i: int) -> "Selection":
        return Selection(self.indices + (int(i),), self.ground_size)

    def as_set(self) -> frozenset:
        return frozenset(self.indices)

    def sorted(self) -> list[int]:
        return sorted(self.indices)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.intp)


def as_indices(A, m: int) -> np.ndarray:
    """Validate ``A`` (a :class:`Selection` or iterable of ints) against ``m``."""
    if isinstance(A, Selection):
        if A.ground_size != m:
            raise DimensionError(f"selection built for M={A.ground_size}, model has M={m}")
        return A.as_array()
    return Selection(tuple(A), m).as_array()


# ---------------------------------------------------------------------------
# factorization helpers


def cholesky_lower(mat: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor; raises :class:`FactorizationError` with the pivot."""
    mat = np.asarray(mat, dtype=float)
    if mat.shape[0] == 0:
        return np.zeros((0, 0))
    c, info = lapack.dpotrf(mat, lower=1, clean=1)
    if info > 0:
        raise FactorizationError(
            f"{what} is not positive definite (leading minor {info} fails)", pivot=info - 1
        )
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return c


def logdet_from_cholesky(chol: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def logdet_pd(mat: np.ndarray, what: str = "matrix") -> float:
    return logdet_from_cholesky(cholesky_lower(mat, what))


def _whiten(chol: np.ndarray, vec: np.ndarray) -> np.ndarray:
    if chol.shape[0] == 0:
        return np.zeros_like(vec)
    return solve_triangular(chol, vec, lower=True, check_finite=False)


def _check_square_symmetric(mat: np.ndarray, name: str) -> np.ndarray:
    mat = np.array(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {mat.shape}")
    scale = float(np.max(np.abs(mat))) if mat.size else 0.0
    if mat.size and np.max(np.abs(mat - mat.T)) > SYMMETRY_RTOL * scale:
        raise ParameterError(f"{name} is not symmetric")
    return mat


# ---------------------------------------------------------------------------
# Gaussian pair


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GaussianPair:
    """Two Gaussian hypotheses ``H0: N(theta0, sigma0)`` and ``H1: N(theta1, sigma1)``."""

    theta0: np.ndarray
    theta1: np.ndarray
    sigma0: np.ndarray
    sigma1: np.ndarray
    prior0: float = 0.5

    def __post_init__(self):
        s0 = _check_square_symmetric(self.sigma0, "sigma0")
        s1 = _check_square_symmetric(self.sigma1, "sigma1")
        t0 = np.array(self.theta0, dtype=float).reshape(-1)
        t1 = np.array(self.theta1, dtype=float).reshape(-1)
        m = s0.shape[0]
        if m < 1:
            raise DimensionError("model dimension must be >= 1")
        if s1.shape != (m, m) or t0.shape != (m,) or t1.shape != (m,):
            raise DimensionError(
                f"inconsistent shapes: theta0 {t0.shape}, theta1 {t1.shape}, "
                f"sigma0 {s0.shape}, sigma1 {s1.shape}"
            )
        if not 0.0 < float(self.prior0) < 1.0:
            raise ParameterError(f"prior0 must lie in (0, 1), got {self.prior0}")
        cholesky_lower(s0, "sigma0")
        cholesky_lower(s1, "sigma1")
        object.__setattr__(self, "theta0", _frozen(t0))
        object.__setattr__(self, "theta1", _frozen(t1))
        object.__setattr__(self, "sigma0", _frozen(s0))
        object.__setattr__(self, "sigma1", _frozen(s1))
        object.__setattr__(self, "prior0", float(self.prior0))

    @classmethod
    def mean_shift(cls, theta, sigma, prior0: float = 0.5, theta0=None) -> "GaussianPair":
        """Common covariance; ``theta`` is the H1 mean (H0 mean defaults to zero)."""
        theta = np.asarray(theta, dtype=float)
        t0 = np.zeros_like(theta) if theta0 is None else theta0
        return cls(t0, theta, sigma, sigma, prior0)

    @classmethod
    def covariance_shift(cls, sigma0, sigma1, theta=None, prior0: float = 0.5) -> "GaussianPair":
        m = np.asarray(sigma0).shape[0]
        theta = np.zeros(m) if theta is None else theta
        return cls(theta, theta, sigma0, sigma1, prior0)

    @property
    def m(self) -> int:
        return self.sigma0.shape[0]

    @cached_property
    def theta(self) -> np.ndarray:
        """Mean difference ``theta1 - theta0``."""
        return _frozen(self.theta1 - self.theta0)

    @cached_property
    def common_covariance(self) -> bool:
        scale = max(float(np.max(np.abs(self.sigma0))), float(np.max(np.abs(self.sigma1))))
        return bool(np.max(np.abs(self.sigma0 - self.sigma1)) <= SYMMETRY_RTOL * scale)

    @cached_property
    def sigma_avg(self) -> np.ndarray:
        return _frozen(0.5 * (self.sigma0 + self.sigma1))

    def swapped(self) -> "GaussianPair":
        return GaussianPair(self.theta1, self.theta0, self.sigma1, self.sigma0, 1.0 - self.prior0)


@dataclass(frozen=True)
class Restricted:
    theta0: np.ndarray
    theta1: np.ndarray
    sigma0: np.ndarray
    sigma1: np.ndarray


def restrict(pair: GaussianPair, A) -> Restricted:
    """Sub-vectors and sub-matrices indexed by ``A`` in insertion order."""
    idx = as_indices(A, pair.m)
    ix = np.ix_(idx, idx)
    return Restricted(pair.theta0[idx], pair.theta1[idx], pair.sigma0[ix], pair.sigma1[ix])


# ---------------------------------------------------------------------------
# divergences


def _require_common(pair: GaussianPair):
    if not pair.common_covariance:
        raise ParameterError("SNR requires a common covariance (sigma0 == sigma1)")


def snr(pair: GaussianPair, A) -> float:
    """Signal-to-noise ratio ``theta_A^T Sigma_A^{-1} theta_A`` with ``theta = theta1 - theta0``."""
    _require_common(pair)
    idx = as_indices(A, pair.m)
    if idx.size == 0:
        return 0.0
    chol = cholesky_lower(pair.sigma0[np.ix_(idx, idx)], "Sigma_A")
    w = _whiten(chol, pair.theta[idx])
    return float(w @ w)


def bhattacharyya(pair: GaussianPair, A) -> float:
    idx = as_indices(A, pair.m)
    if idx.size == 0:
        return 0.0
    ix = np.ix_(idx, idx)
    chol = cholesky_lower(pair.sigma_avg[ix], "averaged covariance")
    w = _whiten(chol, pair.theta[idx])
    ld0 = logdet_pd(pair.sigma0[ix], "Sigma0_A")
    ld1 = logdet_pd(pair.sigma1[ix], "Sigma1_A")
    return float(0.125 * (w @ w) + 0.5 * (logdet_from_cholesky(chol) - 0.5 * (ld0 + ld1)))


def kl_divergence(pair: GaussianPair, A) -> float:
    """``K(H1 || H0)`` between the restricted hypotheses."""
    idx = as_indices(A, pair.m)
    if idx.size == 0:
        return 0.0
    ix = np.ix_(idx, idx)
    l0 = cholesky_lower(pair.sigma0[ix], "Sigma0_A")
    l1 = cholesky_lower(pair.sigma1[ix], "Sigma1_A")
    trace = float(np.sum(_whiten(l0, l1) ** 2))
    w = _whiten(l0, pair.theta[idx])
    return 0.5 * (trace + float(w @ w) - idx.size + logdet_from_cholesky(l0) - logdet_from_cholesky(l1))


def j_divergence(pair: GaussianPair, A) -> float:
    return kl_divergence(pair, A) + kl_divergence(pair.swapped(), A)


# ---------------------------------------------------------------------------
# batched evaluation over many equal-size subsets (exhaustive search, probes)


def _gather(mat: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return mat[idx[:, :, None], idx[:, None, :]]


def _batch_cholesky(stack: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(stack)
    except np.linalg.LinAlgError:
        for row, mat in enumerate(stack):
            try:
                cholesky_lower(mat, what)
            except FactorizationError as exc:
                raise FactorizationError(f"{exc} (batch row {row})", pivot=exc.pivot) from None
        raise


def _batch_whiten(chol: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    # chol (n, k, k) lower; rhs (n, k) or (n, k, p)
    vec = rhs.ndim == 2
    out = np.linalg.solve(chol, rhs[..., None] if vec else rhs)
    return out[..., 0] if vec else out


def _batch_logdet(chol: np.ndarray) -> np.ndarray:
    return 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)


def _as_batch(idx) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 2:
        raise DimensionError("batched index array must be 2-D (n_subsets, k)")
    return idx


def snr_batch(pair: GaussianPair, idx) -> np.ndarray:
    _require_common(pair)
    idx = _as_batch(idx)
    if idx.shape[1] == 0:
        return np.zeros(idx.shape[0])
    chol = _batch_cholesky(_gather(pair.sigma0, idx), "Sigma_A")
    w = _batch_whiten(chol, pair.theta[idx])
    return np.sum(w * w, axis=1)


def kl_batch(pair: GaussianPair, idx) -> np.ndarray:
    idx = _as_batch(idx)
    n, k = idx.shape
    if k == 0:
        return np.zeros(n)
    l0 = _batch_cholesky(_gather(pair.sigma0, idx), "Sigma0_A")
    l1 = _batch_cholesky(_gather(pair.sigma1, idx), "Sigma1_A")
    trace = np.sum(_batch_whiten(l0, l1) ** 2, axis=(1, 2))
    w = _batch_whiten(l0, pair.theta[idx])
    return 0.5 * (trace + np.sum(w * w, axis=1) - k + _batch_logdet(l0) - _batch_logdet(l1))


def bhattacharyya_batch(pair: GaussianPair, idx) -> np.ndarray:
    idx = _as_batch(idx)
    if idx.shape[1] == 0:
        return np.zeros(idx.shape[0])
    la = _batch_cholesky(_gather(pair.sigma_avg, idx), "averaged covariance")
    l0 = _batch_cholesky(_gather(pair.sigma0, idx), "Sigma0_A")
    l1 = _batch_cholesky(_gather(pair.sigma1, idx), "Sigma1_A")
    w = _batch_whiten(la, pair.theta[idx])
    return 0.125 * np.sum(w * w, axis=1) + 0.5 * (
        _batch_logdet(la) - 0.5 * (_batch_logdet(l0) + _batch_logdet(l1))
    )


def j_batch(pair: GaussianPair, idx) -> np.ndarray:
    return kl_batch(pair, idx) + kl_batch(pair.swapped(), idx)


# ---------------------------------------------------------------------------
# spectral shift


@dataclass(frozen=True, eq=False)
class ShiftDecomposition:
    """``Sigma = a I + S`` with ``a = beta * lambda_min`` so that ``S`` stays PD."""

    a: float
    beta: float
    s_matrix: np.ndarray
    lambda_min: float
    lambda_max: float
    kappa: float

    @property
    def m(self) -> int:
        return self.s_matrix.shape[0]

    @cached_property
    def s_cholesky(self) -> np.ndarray:
        return cholesky_lower(self.s_matrix, "S")

    @cached_property
    def log_det_s_inv(self) -> float:
        """``log det(S^{-1})``, the constant term of the surrogate."""
        return -logdet_from_cholesky(self.s_cholesky)

    def solve_s(self, vec: np.ndarray) -> np.ndarray:
        """``S^{-1} vec`` via the Cholesky factor of ``S``."""
        c = self.s_cholesky
        return solve_triangular(c.T, solve_triangular(c, vec, lower=True), lower=False)

    def sigma(self) -> np.ndarray:
        return self.s_matrix + self.a * np.eye(self.m)


def shift_decompose(sigma, beta: float = 0.5) -> ShiftDecomposition:
    if not 0.0 < beta < 1.0:
        raise ParameterError(f"beta must lie in (0, 1), got {beta}")
    sigma = _check_square_symmetric(sigma, "sigma")
    cholesky_lower(sigma, "sigma")
    eig = np.linalg.eigvalsh(sigma)
    lmin, lmax = float(eig[0]), float(eig[-1])
    if lmin <= 0.0:
        raise FactorizationError("sigma has a non-positive eigenvalue", pivot=None)
    a = beta * lmin
    s = sigma - a * np.eye(sigma.shape[0])
    s = 0.5 * (s + s.T)
    cholesky_lower(s, "S = sigma - aI")
    return ShiftDecomposition(a=a, beta=float(beta), s_matrix=_frozen(s), lambda_min=lmin,
                              lambda_max=lmax, kappa=lmax / lmin)
