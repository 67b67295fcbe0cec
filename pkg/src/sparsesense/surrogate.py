"""Schur-complement surrogates and difference-of-submodular decompositions.

With ``Sigma = a I + S`` the log-det surrogate of the SNR is

    f(A) = log det M_A = log det S^{-1} + log det(I + S_A / a) + log s(A),

where ``M_A`` is the bordered matrix ``[[S^{-1} + diag(1_A)/a, S^{-1} theta],
[theta' S^{-1}, theta' S^{-1} theta]]``.  Since ``Sigma_A = a (I + S_A / a)``,
one Cholesky factor of ``I + S_A / a`` yields both the determinant and the
SNR, and adding one sensor extends the factor by a row (``O(|A|^2)`` work).

The literal value of ``f`` on singletons can be negative, so ``f`` with
``f(empty) = 0`` is in general neither monotone nor submodular.  Handles
therefore subtract an offset on non-empty sets.  The default ``"floor"``
offset is ``c* = min_{u != v} f(u) + f(v) - f(u, v)``, the largest constant
that keeps the normalized function monotone and submodular (for ``M = 1`` it
is ``f({0})``).  The offset is modular-neutral: it never changes which set of
a given size is best.  ``offset=0.0`` gives the literal convention.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionError, EvaluationError, NumericalError, ParameterError
from .linmodel import (
    GaussianPair,
    Selection,
    ShiftDecomposition,
    _batch_cholesky,
    _batch_logdet,
    _batch_whiten,
    _gather,
    as_indices,
    cholesky_lower,
    logdet_from_cholesky,
    shift_decompose,
)
from .setfunc import (
    GAIN_ATOL,
    GreedyStep,
    GreedyTrace,
    LinearCombination,
    LogdetFunction,
    ModularFunction,
    SetFunction,
    _check_k,
)


# ---------------------------------------------------------------------------
# recursive evaluation


class _SchurChain:
    """Factor ``L`` of ``I + S_A / a`` and whitened columns ``U = L^{-1} T_A``.

    ``T`` holds one or more right-hand sides (the mean difference, or the
    columns of a matrix square root).  ``U`` gives ``T_A' Sigma_A^{-1} T_A``
    column-wise as ``sum(U**2, 0) / a``.
    """

    def __init__(self, s_scaled: np.ndarray, cols: np.ndarray, idx=(), chol=None, white=None, logdet=0.0):
        self.s_scaled = s_scaled
        self.cols = cols
        self.idx = tuple(idx)
        self.chol = np.zeros((0, 0)) if chol is None else chol
        self.white = np.zeros((0, cols.shape[1])) if white is None else white
        self.logdet = float(logdet)

    @property
    def quad(self) -> np.ndarray:
        return np.sum(self.white * self.white, axis=0)

    def probe(self, cands: np.ndarray):
        """Schur scalars, new log-dets, new quadratic forms, new rows, and op count."""
        k = len(self.idx)
        diag = 1.0 + self.s_scaled[cands, cands]
        if k:
            x = solve_triangular(self.chol, self.s_scaled[np.ix_(self.idx, cands)], lower=True,
                                 check_finite=False)
            schur = diag - np.sum(x * x, axis=0)
            rows = self.cols[cands] - x.T @ self.white
        else:
            x = np.zeros((0, cands.size))
            schur = diag
            rows = self.cols[cands].copy()
        with np.errstate(divide="ignore", invalid="ignore"):
            rows /= np.sqrt(schur)[:, None]
            logdet = self.logdet + np.log(schur)
        quad = self.quad[None, :] + rows * rows
        ops = cands.size * (k * (k + 1) // 2 + k * self.cols.shape[1])
        return schur, logdet, quad, x, rows, ops

    def extended(self, j: int) -> "_SchurChain":
        schur, logdet, _, x, rows, _ = self.probe(np.array([j]))
        if not schur[0] > 0.0:
            raise NumericalError(f"non-positive Schur complement {schur[0]:.3e} adding index {j}")
        k = len(self.idx)
        chol = np.zeros((k + 1, k + 1))
        chol[:k, :k] = self.chol
        chol[k, :k] = x[:, 0]
        chol[k, k] = math.sqrt(schur[0])
        white = np.vstack([self.white, rows])
        return _SchurChain(self.s_scaled, self.cols, self.idx + (j,), chol, white, logdet[0])


@dataclass(frozen=True)
class SurrogateProbe:
    values: np.ndarray
    snr: np.ndarray
    schur: np.ndarray
    ops: int


@dataclass(frozen=True)
class SurrogateState:
    """Incremental state of the log-det surrogate along a chain of selections.

    ``value`` is the surrogate at the current selection minus ``offset``
    (0 on the empty set); ``running_logdet`` is ``log det(I + S_A / a)``.
    States are immutable: :func:`commit` returns a new one.
    """

    decomp: ShiftDecomposition
    theta: np.ndarray
    offset: float = 0.0
    _chain: _SchurChain = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).reshape(-1)
        if theta.size != self.decomp.m:
            raise DimensionError(f"theta has length {theta.size}, decomposition has M={self.decomp.m}")
        object.__setattr__(self, "theta", theta)
        if self._chain is None:
            object.__setattr__(self, "_chain", _SchurChain(self.decomp.s_matrix / self.decomp.a, theta[:, None]))

    @property
    def selection(self) -> Selection:
        return Selection(self._chain.idx, self.decomp.m)

    @property
    def chol_factor(self) -> np.ndarray:
        return self._chain.chol

    @property
    def running_logdet(self) -> float:
        return self._chain.logdet

    @property
    def snr_value(self) -> float:
        return float(self._chain.quad[0] / self.decomp.a)

    @property
    def value(self) -> float:
        if not self._chain.idx:
            return 0.0
        return _raw_value(self.decomp, self.running_logdet, self.snr_value) - self.offset

    def probe(self, candidates) -> SurrogateProbe:
        """Surrogate and SNR values of ``selection + {c}`` for each candidate; state untouched."""
        cands = np.asarray(candidates, dtype=np.intp).reshape(-1)
        taken = np.isin(cands, self._chain.idx)
        if taken.any():
            raise ParameterError(f"index {int(cands[taken][0])} is already selected")
        schur, logdet, quad, _, _, ops = self._chain.probe(cands)
        snr = quad[:, 0] / self.decomp.a
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = _raw_value(self.decomp, logdet, snr) - self.offset
        return SurrogateProbe(vals, snr, schur, ops)


def _raw_value(decomp, logdet, snr):
    return decomp.log_det_s_inv + logdet + np.log(snr)


def initial_state(decomp: ShiftDecomposition, theta, offset: float = 0.0) -> SurrogateState:
    return SurrogateState(decomp, theta, offset)


def advance(state: SurrogateState, i: int) -> tuple[float, float]:
    """``(f(A + {i}), s(A + {i}))`` without changing ``state``."""
    res = state.probe([i])
    if not res.schur[0] > 0.0:
        raise NumericalError(f"non-positive Schur complement {res.schur[0]:.3e} adding index {i}")
    return float(res.values[0]), float(res.snr[0])


def commit(state: SurrogateState, i: int) -> SurrogateState:
    """New state with ``i`` appended to the selection."""
    i = int(i)
    if not 0 <= i < state.decomp.m:
        raise DimensionError(f"index {i} outside ground set of size {state.decomp.m}")
    if i in state._chain.idx:
        raise ParameterError(f"index {i} is already selected")
    return SurrogateState(state.decomp, state.theta, state.offset, state._chain.extended(i))


# ---------------------------------------------------------------------------
# set-function handles


def _pair_floor(sigma: np.ndarray, decomp: ShiftDecomposition, t: np.ndarray) -> float:
    """``min_{u != v} f(u) + f(v) - f(u, v)`` for the surrogate with mean difference ``t``.

    In closed form ``f(u) = C - log a + log t_u^2`` and
    ``f(u, v) = C - 2 log a + log N_uv`` with
    ``N_uv = t_u^2 Sigma_vv + t_v^2 Sigma_uu - 2 Sigma_uv t_u t_v``.
    """
    const = decomp.log_det_s_inv
    t2 = t * t
    if t.size == 1:
        return const - math.log(decomp.a) + math.log(t2[0]) if t2[0] > 0 else const
    d = np.diag(sigma)
    num = np.outer(t2, d) + np.outer(d, t2) - 2.0 * sigma * np.outer(t, t)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.log(np.outer(t2, t2)) - np.log(num)
    np.fill_diagonal(terms, np.inf)
    terms[~np.isfinite(terms)] = np.inf
    best = float(terms.min())
    return const + best if math.isfinite(best) else const


class _SurrogateBase(SetFunction):
    """Sum over columns ``t`` of ``T`` of the log-det surrogate built on ``sigma``."""

    def __init__(self, sigma, cols, decomp: ShiftDecomposition, offset, name):
        sigma = np.asarray(sigma, dtype=float)
        super().__init__(sigma.shape[0], name)
        if decomp.m != self.ground_size:
            raise DimensionError(f"decomposition has M={decomp.m}, covariance has M={self.ground_size}")
        self.sigma = sigma
        self.decomp = decomp
        self._cols = cols
        self._s_scaled = decomp.s_matrix / decomp.a
        if offset == "floor":
            offset = sum(_pair_floor(sigma, decomp, cols[:, c]) for c in range(cols.shape[1]))
        self.offset = float(offset)
        self._local = threading.local()

    def _check(self, quad, idx_hint):
        bad = np.flatnonzero(~(quad > 0.0))
        if bad.size:
            raise EvaluationError(f"{self.name}: quadratic form vanishes at column {int(bad[0])}",
                                  index=idx_hint)

    def _combine(self, logdet, quad):
        ncol = self._cols.shape[1]
        return ncol * (self.decomp.log_det_s_inv + logdet) \
            + np.sum(np.log(quad / self.decomp.a), axis=-1)

    def raw(self, A) -> float:
        """The un-normalized surrogate (the literal log det of the bordered matrices)."""
        idx = [int(i) for i in as_indices(A, self.ground_size)]
        if not idx:
            raise ParameterError("the surrogate is defined through the empty-set convention only")
        chol = cholesky_lower(np.eye(len(idx)) + self._s_scaled[np.ix_(idx, idx)], self.name)
        white = solve_triangular(chol, self._cols[idx], lower=True)
        quad = np.sum(white * white, axis=0)
        self._check(quad, idx[-1])
        return float(self._combine(logdet_from_cholesky(chol), quad))

    def evaluate(self, indices):
        if not indices:
            return 0.0
        return self.raw(list(indices)) - self.offset

    def batch(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        n, k = idx.shape
        if k == 0:
            return np.zeros(n)
        stack = np.eye(k) + _gather(self._s_scaled, idx)
        chol = _batch_cholesky(stack, self.name)
        white = _batch_whiten(chol, self._cols[idx])
        quad = np.sum(white * white, axis=1)
        bad = np.flatnonzero(~np.all(quad > 0.0, axis=1))
        if bad.size:
            raise EvaluationError(f"{self.name}: quadratic form vanishes", index=int(idx[bad[0], -1]))
        return self._combine(_batch_logdet(chol), quad) - self.offset

    def _chain_for(self, base: tuple) -> _SchurChain:
        key, chain = getattr(self._local, "cache", (None, None))
        if key != base:
            if key is not None and len(base) == len(key) + 1 and base[:-1] == key:
                chain = chain.extended(base[-1])
            else:
                chain = _SchurChain(self._s_scaled, self._cols)
                for j in base:
                    chain = chain.extended(j)
            self._local.cache = (base, chain)
        return chain

    def probe(self, base, candidates):
        base = tuple(int(i) for i in base)
        cands = np.asarray(candidates, dtype=np.intp).reshape(-1)
        try:
            chain = self._chain_for(base)
        except NumericalError as exc:
            raise EvaluationError(f"{self.name}: {exc}", index=base[-1]) from exc
        schur, logdet, quad, _, _, _ = chain.probe(cands)
        bad = np.flatnonzero(~(schur > 0.0) | ~np.all(quad > 0.0, axis=1))
        if bad.size:
            c = int(cands[bad[0]])
            raise EvaluationError(f"{self.name}: degenerate update adding candidate {c}", index=c)
        return self._combine(logdet, quad) - self.offset


class LogdetSurrogate(_SurrogateBase):
    """Log-det SNR surrogate ``f(A) = log det M_A`` (minus :attr:`offset` on non-empty sets)."""

    def __init__(self, pair: GaussianPair, decomp: ShiftDecomposition | None = None, offset="floor"):
        if not pair.common_covariance:
            raise ParameterError("the log-det surrogate needs a common-covariance pair")
        decomp = decomp if decomp is not None else shift_decompose(pair.sigma0)
        self.pair = pair
        super().__init__(pair.sigma0, pair.theta[:, None].copy(), decomp, offset, "logdet_surrogate")

    def state(self) -> SurrogateState:
        return SurrogateState(self.decomp, self.pair.theta, self.offset)

    def gamma(self, A) -> float:
        """``det(S^{-1} + diag(1_A) / a) = det(S^{-1}) det(I + S_A / a)``."""
        idx = [int(i) for i in as_indices(A, self.ground_size)]
        ld = 0.0
        if idx:
            ld = logdet_from_cholesky(cholesky_lower(np.eye(len(idx)) + self._s_scaled[np.ix_(idx, idx)]))
        return float(np.exp(self.decomp.log_det_s_inv + ld))


def logdet_surrogate(pair: GaussianPair, decomp: ShiftDecomposition | None = None,
                     offset="floor") -> LogdetSurrogate:
    return LogdetSurrogate(pair, decomp, offset)


def symmetric_sqrt(mat) -> np.ndarray:
    """Symmetric positive square root via eigendecomposition."""
    w, v = np.linalg.eigh(np.asarray(mat, dtype=float))
    if w.min() <= 0:
        raise ParameterError("matrix square root needs a positive definite matrix")
    return (v * np.sqrt(w)) @ v.T


class TraceSurrogate(_SurrogateBase):
    """Submodular stand-in for ``tr(Sigma_A^{-1} Psi_A)``.

    Sum over the columns ``psi_i`` of ``Psi^{1/2}`` of the log-det surrogate
    with ``theta`` replaced by ``psi_i``; every column shares one factor.
    """

    def __init__(self, sigma, psi, decomp: ShiftDecomposition | None = None, offset="floor"):
        sigma = np.asarray(sigma, dtype=float)
        psi = np.asarray(psi, dtype=float)
        if sigma.shape != psi.shape:
            raise DimensionError(f"sigma {sigma.shape} and psi {psi.shape} differ in shape")
        decomp = decomp if decomp is not None else shift_decompose(sigma)
        self.psi = psi
        super().__init__(sigma, symmetric_sqrt(psi), decomp, offset, "trace_surrogate")

    @property
    def psi_root(self) -> np.ndarray:
        return self._cols


def trace_surrogate(sigma, psi, decomp: ShiftDecomposition | None = None, offset="floor") -> TraceSurrogate:
    return TraceSurrogate(sigma, psi, decomp, offset)


class TraceFunction(SetFunction):
    """``q(A) = tr(Sigma_A^{-1} Psi_A)`` (0 on the empty set); not submodular in general."""

    def __init__(self, sigma, psi):
        sigma = np.asarray(sigma, dtype=float)
        super().__init__(sigma.shape[0], "trace")
        self.sigma = sigma
        self.psi = np.asarray(psi, dtype=float)

    def evaluate(self, indices):
        if not indices:
            return 0.0
        idx = list(indices)
        chol = cholesky_lower(self.sigma[np.ix_(idx, idx)], "sigma")
        w = solve_triangular(chol, cholesky_lower(self.psi[np.ix_(idx, idx)], "psi"), lower=True)
        return float(np.sum(w * w))

    def batch(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        if idx.shape[1] == 0:
            return np.zeros(idx.shape[0])
        cs = _batch_cholesky(_gather(self.sigma, idx), "sigma")
        cp = _batch_cholesky(_gather(self.psi, idx), "psi")
        w = _batch_whiten(cs, cp)
        return np.sum(w * w, axis=(1, 2))


# ---------------------------------------------------------------------------
# dual greedy over the surrogate


@dataclass
class DualGreedyResult:
    """Greedy on the surrogate and, from the same recursions, greedy on the SNR."""

    surrogate: Selection
    snr_chain: Selection
    surrogate_trace: GreedyTrace
    snr_trace: GreedyTrace
    surrogate_snr: float
    chain_snr: float
    ops: int

    @property
    def best(self) -> Selection:
        return self.snr_chain if self.chain_snr > self.surrogate_snr else self.surrogate


def _pick_first(values: np.ndarray, cands: np.ndarray) -> int:
    best = values.max()
    near = np.flatnonzero(values >= best - GAIN_ATOL)
    return int(near[np.argmin(cands[near])])


def surrogate_greedy(f: LogdetSurrogate, k: int) -> DualGreedyResult:
    """Greedy maximization of the log-det surrogate.

    Each probe of the recursion also yields ``s(A + {c})``, so a second chain
    that is greedy on the SNR itself runs alongside at no extra factorization
    cost.  Both selections are returned.
    """
    m = f.ground_size
    _check_k(k, m)
    chains = {"surrogate": f.state(), "snr": f.state()}
    traces = {"surrogate": GreedyTrace(), "snr": GreedyTrace()}
    ops = 0
    for _ in range(k):
        for kind, state in chains.items():
            cands = np.setdiff1d(np.arange(m), state.selection.as_array())
            res = state.probe(cands)
            ops += res.ops
            if not np.all(res.schur > 0.0):
                c = int(cands[np.flatnonzero(~(res.schur > 0.0))[0]])
                raise EvaluationError(f"degenerate Schur complement adding candidate {c}", index=c)
            if kind == "surrogate":
                if not np.all(np.isfinite(res.values)):
                    c = int(cands[np.flatnonzero(~np.isfinite(res.values))[0]])
                    raise EvaluationError(f"surrogate is -inf adding candidate {c}", index=c)
                pos = _pick_first(res.values, cands)
                value, before = float(res.values[pos]), state.value
            else:
                pos = _pick_first(res.snr, cands)
                value, before = float(res.snr[pos]), state.snr_value
            chosen = int(cands[pos])
            traces[kind].steps.append(GreedyStep(chosen, value, value - before, int(cands.size)))
            chains[kind] = commit(state, chosen)
    for kind in chains:
        traces[kind].final = chains[kind].selection
    return DualGreedyResult(
        traces["surrogate"].final, traces["snr"].final, traces["surrogate"], traces["snr"],
        chains["surrogate"].snr_value, chains["snr"].snr_value, ops,
    )


# ---------------------------------------------------------------------------
# difference-of-submodular decompositions


@dataclass
class DsDecomposition:
    """``objective = g - h`` with ``g``, ``h`` normalized set functions."""

    g: SetFunction
    h: SetFunction
    label: str

    def __post_init__(self):
        if self.g.ground_size != self.h.ground_size:
            raise DimensionError("g and h must share the ground set")

    @property
    def ground_size(self) -> int:
        return self.g.ground_size

    def objective(self, A) -> float:
        return self.g(A) - self.h(A)

    def objective_function(self) -> SetFunction:
        return LinearCombination([(1.0, self.g), (-1.0, self.h)], name=self.label)


def _require_common_mean(pair: GaussianPair):
    if np.any(pair.theta != 0.0):
        raise ParameterError("covariance decompositions assume equal means")


def bhattacharyya_decomposition(pair: GaussianPair) -> DsDecomposition:
    """``g = 1/2 log det Sigma_bar_A``, ``h = 1/4 (log det Sigma_0,A + log det Sigma_1,A)``."""
    _require_common_mean(pair)
    g = LogdetFunction(pair.sigma_avg, 0.5, "half_logdet_avg")
    h = LinearCombination([(0.25, LogdetFunction(pair.sigma0)), (0.25, LogdetFunction(pair.sigma1))],
                          name="quarter_logdet_sum")
    return DsDecomposition(g, h, "bhattacharyya")


def kl_sub_decomposition(pair: GaussianPair, decomp: ShiftDecomposition | None = None) -> DsDecomposition:
    """Surrogate KL: ``g = 1/2 log det Sigma_0,A + 1/2 q_sub``, ``h = 1/2 log det Sigma_1,A``."""
    _require_common_mean(pair)
    q = TraceSurrogate(pair.sigma0, pair.sigma1, decomp)
    g = LinearCombination([(0.5, LogdetFunction(pair.sigma0)), (0.5, q)], name="kl_sub_g")
    h = LogdetFunction(pair.sigma1, 0.5, "half_logdet1")
    return DsDecomposition(g, h, "kl_sub")


def kl_decomposition(pair: GaussianPair) -> DsDecomposition:
    """Exact KL split with the trace term carried by ``h`` (``h`` is not submodular).

    ``g = 1/2 log det Sigma_0,A`` and ``h = 1/2 log det Sigma_1,A - 1/2 (q(A) - |A|)``,
    so ``g - h`` is the KL divergence itself.
    """
    _require_common_mean(pair)
    g = LogdetFunction(pair.sigma0, 0.5, "half_logdet0")
    h = LinearCombination([
        (0.5, LogdetFunction(pair.sigma1)),
        (-0.5, TraceFunction(pair.sigma0, pair.sigma1)),
        (0.5, ModularFunction(np.ones(pair.m), "cardinality")),
    ], name="kl_h")
    return DsDecomposition(g, h, "kl")


def jdiv_sub(pair: GaussianPair, decomp0: ShiftDecomposition | None = None,
             decomp1: ShiftDecomposition | None = None) -> SetFunction:
    """``1/2 (q_sub(Sigma_0, Sigma_1) + q_sub(Sigma_1, Sigma_0))``."""
    _require_common_mean(pair)
    return LinearCombination([
        (0.5, TraceSurrogate(pair.sigma0, pair.sigma1, decomp0)),
        (0.5, TraceSurrogate(pair.sigma1, pair.sigma0, decomp1)),
    ], name="jdiv_sub")
