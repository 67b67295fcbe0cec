"""Set functions, greedy maximization and approximate-submodularity tools.

A :class:`SetFunction` maps subsets of ``{0, ..., M-1}`` to reals.  The greedy
routines only ever ask for ``probe(base, candidates)``, the values
``f(base + {c})`` for a batch of candidates, so handles that can update a
factorization incrementally (see :mod:`sparsesense.surrogate`) plug in
without the optimizer knowing.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ComplexityError, DimensionError, EvaluationError, ParameterError
from .linmodel import (
    GaussianPair,
    Selection,
    ShiftDecomposition,
    as_indices,
    bhattacharyya,
    bhattacharyya_batch,
    cholesky_lower,
    j_batch,
    j_divergence,
    kl_batch,
    kl_divergence,
    logdet_from_cholesky,
    snr,
    snr_batch,
)

GAIN_ATOL = 1e-12
MAX_SWEEP_GROUND = 15


class SetFunction:
    """Base class for set functions over a ground set of size ``ground_size``.

    Subclasses implement :meth:`evaluate` on a tuple of indices and may
    override :meth:`batch` (many equal-size subsets at once) or :meth:`probe`
    (one base set, many single-element extensions) for speed.
    ``evaluate(())`` is expected to be 0 for normalized functions.
    """

    def __init__(self, ground_size: int, name: str = "f"):
        if ground_size < 1:
            raise DimensionError("ground set size must be >= 1")
        self.ground_size = int(ground_size)
        self.name = name

    def evaluate(self, indices: tuple) -> float:
        raise NotImplementedError

    def __call__(self, A) -> float:
        return float(self.evaluate(tuple(int(i) for i in as_indices(A, self.ground_size))))

    def batch(self, idx: np.ndarray) -> np.ndarray:
        """Values for each row of the ``(n, k)`` index array ``idx``."""
        return np.array([self.evaluate(tuple(int(i) for i in row)) for row in idx], dtype=float)

    def probe(self, base: tuple, candidates) -> np.ndarray:
        """``f(base + {c})`` for each candidate ``c``."""
        candidates = np.asarray(candidates, dtype=np.intp)
        if candidates.size == 0:
            return np.zeros(0)
        rows = np.empty((candidates.size, len(base) + 1), dtype=np.intp)
        rows[:, : len(base)] = base
        rows[:, -1] = candidates
        try:
            vals = self.batch(rows)
        except Exception:
            return _probe_one_by_one(self, base, candidates)
        if not np.all(np.isfinite(vals)):
            return _probe_one_by_one(self, base, candidates)
        return vals

    def __repr__(self):
        return f"<{type(self).__name__} {self.name!r} M={self.ground_size}>"


def _probe_one_by_one(f: SetFunction, base: tuple, candidates) -> np.ndarray:
    out = np.empty(len(candidates))
    for n, c in enumerate(candidates):
        try:
            v = float(f.evaluate(base + (int(c),)))
        except Exception as exc:
            raise EvaluationError(f"{f.name}: evaluation failed for candidate {int(c)}: {exc}",
                                  index=int(c)) from exc
        if not math.isfinite(v):
            raise EvaluationError(f"{f.name}: non-finite value for candidate {int(c)}", index=int(c))
        out[n] = v
    return out


class CallableFunction(SetFunction):
    """Wrap a plain callable ``fn(indices_tuple) -> float``."""

    def __init__(self, fn: Callable[[tuple], float], ground_size: int, name: str = "f"):
        super().__init__(ground_size, name)
        self._fn = fn

    def evaluate(self, indices):
        return float(self._fn(tuple(indices)))


class ModularFunction(SetFunction):
    """``f(A) = constant + sum_{i in A} weights[i]`` (``constant`` only for non-empty A)."""

    def __init__(self, weights, name: str = "modular", constant: float = 0.0):
        w = np.asarray(weights, dtype=float).reshape(-1)
        super().__init__(w.size, name)
        self.weights = w
        self.constant = float(constant)

    def evaluate(self, indices):
        if not indices:
            return 0.0
        return self.constant + float(np.sum(self.weights[list(indices)]))

    def batch(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        if idx.shape[1] == 0:
            return np.zeros(idx.shape[0])
        return self.constant + self.weights[idx].sum(axis=1)

    def probe(self, base, candidates):
        candidates = np.asarray(candidates, dtype=np.intp)
        return self.constant + float(np.sum(self.weights[list(base)])) + self.weights[candidates]


class LinearCombination(SetFunction):
    """``sum_k coef_k * f_k``; probes delegate to the terms."""

    def __init__(self, terms: Sequence[tuple[float, SetFunction]], name: str = "combination"):
        terms = [(float(c), f) for c, f in terms]
        sizes = {f.ground_size for _, f in terms}
        if len(sizes) != 1:
            raise DimensionError(f"terms have different ground sizes {sorted(sizes)}")
        super().__init__(sizes.pop(), name)
        self.terms = terms

    def evaluate(self, indices):
        return float(sum(c * f.evaluate(indices) for c, f in self.terms))

    def batch(self, idx):
        return sum(c * f.batch(idx) for c, f in self.terms)

    def probe(self, base, candidates):
        return sum(c * f.probe(base, candidates) for c, f in self.terms)


class CountingFunction(SetFunction):
    """Delegate to ``inner`` and count subset evaluations in :attr:`count`."""

    def __init__(self, inner: SetFunction):
        super().__init__(inner.ground_size, inner.name)
        self.inner = inner
        self.count = 0
        self._lock = threading.Lock()

    def _add(self, n: int):
        with self._lock:
            self.count += int(n)

    def evaluate(self, indices):
        self._add(1)
        return self.inner.evaluate(indices)

    def batch(self, idx):
        self._add(len(idx))
        return self.inner.batch(idx)

    def probe(self, base, candidates):
        self._add(len(candidates))
        return self.inner.probe(base, candidates)


# ---------------------------------------------------------------------------
# divergence-based handles


class _PairFunction(SetFunction):
    _scalar = None
    _batched = None

    def __init__(self, pair: GaussianPair, name: str):
        super().__init__(pair.m, name)
        self.pair = pair

    def evaluate(self, indices):
        return type(self)._scalar(self.pair, list(indices))

    def batch(self, idx):
        return type(self)._batched(self.pair, idx)


class SNRFunction(_PairFunction):
    _scalar = staticmethod(snr)
    _batched = staticmethod(snr_batch)

    def __init__(self, pair: GaussianPair):
        super().__init__(pair, "snr")
        if not pair.common_covariance:
            raise ParameterError("SNR set function needs a common-covariance pair")


class KLFunction(_PairFunction):
    _scalar = staticmethod(kl_divergence)
    _batched = staticmethod(kl_batch)

    def __init__(self, pair):
        super().__init__(pair, "kl")


class JFunction(_PairFunction):
    _scalar = staticmethod(j_divergence)
    _batched = staticmethod(j_batch)

    def __init__(self, pair):
        super().__init__(pair, "jdiv")


class BhattacharyyaFunction(_PairFunction):
    _scalar = staticmethod(bhattacharyya)
    _batched = staticmethod(bhattacharyya_batch)

    def __init__(self, pair):
        super().__init__(pair, "bhattacharyya")


class LogdetFunction(SetFunction):
    """``scale * log det(sigma_A)`` with ``log det`` over the empty set taken as 0.

    Probes extend a cached Cholesky factor of the base set by one row per
    candidate, so a greedy step costs ``O(k^2)`` per candidate.
    """

    def __init__(self, sigma, scale: float = 1.0, name: str = "logdet"):
        sigma = np.asarray(sigma, dtype=float)
        super().__init__(sigma.shape[0], name)
        self.sigma = sigma
        self.scale = float(scale)
        self._local = threading.local()

    def evaluate(self, indices):
        if not indices:
            return 0.0
        idx = list(indices)
        return self.scale * logdet_from_cholesky(cholesky_lower(self.sigma[np.ix_(idx, idx)], self.name))

    def _factor(self, base: tuple) -> np.ndarray:
        key, chol = getattr(self._local, "cache", (None, None))
        if key == base:
            return chol
        if key is not None and len(base) == len(key) + 1 and base[:-1] == key:
            chol = _append_cholesky(chol, self.sigma, key, base[-1])
        else:
            idx = list(base)
            chol = cholesky_lower(self.sigma[np.ix_(idx, idx)], self.name)
        self._local.cache = (base, chol)
        return chol

    def probe(self, base, candidates):
        base = tuple(int(i) for i in base)
        candidates = np.asarray(candidates, dtype=np.intp)
        chol = self._factor(base)
        ld = logdet_from_cholesky(chol) if base else 0.0
        cross = self.sigma[np.ix_(list(base), candidates)]
        x = solve_triangular(chol, cross, lower=True) if base else np.zeros((0, candidates.size))
        schur = self.sigma[candidates, candidates] - np.sum(x * x, axis=0)
        bad = np.flatnonzero(schur <= 0.0)
        if bad.size:
            c = int(candidates[bad[0]])
            raise EvaluationError(f"{self.name}: submatrix loses positive definiteness adding {c}", index=c)
        return self.scale * (ld + np.log(schur))


def _append_cholesky(chol: np.ndarray, mat: np.ndarray, base: tuple, new: int) -> np.ndarray:
    k = len(base)
    out = np.zeros((k + 1, k + 1))
    out[:k, :k] = chol
    if k:
        row = solve_triangular(chol, mat[list(base), new], lower=True)
        out[k, :k] = row
        d2 = mat[new, new] - row @ row
    else:
        d2 = mat[new, new]
    if d2 <= 0.0:
        raise EvaluationError(f"factor update lost positive definiteness at index {new}", index=new)
    out[k, k] = math.sqrt(d2)
    return out


# ---------------------------------------------------------------------------
# greedy


@dataclass
class GreedyStep:
    index: int
    value: float
    gain: float
    evals: int


@dataclass
class GreedyTrace:
    steps: list[GreedyStep] = field(default_factory=list)
    final: Selection | None = None

    @property
    def evaluations(self) -> int:
        return sum(s.evals for s in self.steps)

    @property
    def values(self) -> list[float]:
        return [s.value for s in self.steps]

    def to_dict(self) -> dict:
        return {
            "steps": [{"index": s.index, "value": s.value, "gain": s.gain, "evals": s.evals}
                      for s in self.steps],
            "final": list(self.final.indices) if self.final is not None else [],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _check_k(k: int, m: int, low: int = 1):
    if not isinstance(k, (int, np.integer)) or not low <= k <= m:
        raise ParameterError(f"K must be an integer in [{low}, {m}], got {k!r}")


def _pick(gains: np.ndarray, candidates: np.ndarray) -> int:
    """Position of the smallest-index candidate within ``GAIN_ATOL`` of the best gain."""
    if np.any(np.isnan(gains)):
        bad = int(candidates[np.flatnonzero(np.isnan(gains))[0]])
        raise EvaluationError(f"NaN gain for candidate {bad}", index=bad)
    best = gains.max()
    near = np.flatnonzero(gains >= best - GAIN_ATOL)
    return int(near[np.argmin(candidates[near])])


def greedy_maximize(f: SetFunction, k: int) -> tuple[Selection, GreedyTrace]:
    """Plain greedy: add the candidate maximizing ``f(A + {a})`` K times.

    Ties within ``GAIN_ATOL`` go to the smallest index.
    """
    m = f.ground_size
    _check_k(k, m)
    selected: list[int] = []
    remaining = np.arange(m)
    current = float(f.evaluate(()))
    trace = GreedyTrace()
    for _ in range(k):
        vals = f.probe(tuple(selected), remaining)
        gains = vals - current
        pos = _pick(gains, remaining)
        chosen = int(remaining[pos])
        selected.append(chosen)
        trace.steps.append(GreedyStep(chosen, float(vals[pos]), float(gains[pos]), int(remaining.size)))
        current = float(vals[pos])
        remaining = np.delete(remaining, pos)
    trace.final = Selection(tuple(selected), m)
    return trace.final, trace


def lazy_greedy_maximize(f: SetFunction, k: int) -> tuple[Selection, GreedyTrace]:
    """Lazy (accelerated) greedy for submodular ``f``.

    Stale gains are upper bounds only when ``f`` is submodular; on other
    functions the result is unspecified.  Tie-breaking matches
    :func:`greedy_maximize`: every candidate whose bound could still be within
    ``GAIN_ATOL`` of the best gain is refreshed before committing.
    """
    m = f.ground_size
    _check_k(k, m)
    selected: list[int] = []
    current = float(f.evaluate(()))
    init = f.probe((), np.arange(m)) - current
    # entries: (-bound, index, step at which the bound was computed)
    heap = [(-float(g), i, 0) for i, g in enumerate(init)]
    heapq.heapify(heap)
    trace = GreedyTrace()
    first_evals = m
    for step in range(k):
        evals = first_evals
        first_evals = 0
        base = tuple(selected)
        best = -math.inf
        ties: list[tuple[float, int]] = []
        while heap:
            neg, idx, stamp = heap[0]
            bound = -neg
            if ties and bound < best - GAIN_ATOL:
                break
            heapq.heappop(heap)
            if stamp == step:
                best = max(best, bound)
                ties.append((bound, idx))
                continue
            g = float(f.probe(base, np.array([idx]))[0]) - current
            evals += 1
            if math.isnan(g):
                raise EvaluationError(f"NaN gain for candidate {idx}", index=idx)
            heapq.heappush(heap, (-g, idx, step))
        keep = [(g, i) for g, i in ties if g >= best - GAIN_ATOL]
        gain, chosen = min(keep, key=lambda t: t[1])
        for g, i in ties:
            if i != chosen:
                heapq.heappush(heap, (-g, i, step))
        selected.append(chosen)
        current += gain
        trace.steps.append(GreedyStep(chosen, current, gain, evals))
    trace.final = Selection(tuple(selected), m)
    return trace.final, trace


@dataclass
class ThresholdResult:
    selection: Selection
    value: float
    feasible: bool
    trace: GreedyTrace


def greedy_until_threshold(f: SetFunction, lam: float, max_k: int) -> ThresholdResult:
    """Greedy heuristic for ``min |A| s.t. f(A) >= lam``.

    Returns the shortest greedy prefix meeting the threshold, or the
    ``max_k`` prefix with ``feasible=False``.
    """
    if not math.isfinite(lam):
        raise ParameterError("threshold must be finite")
    m = f.ground_size
    _check_k(max_k, m, low=0)
    current = float(f.evaluate(()))
    if current >= lam:
        return ThresholdResult(Selection.empty(m), current, True, GreedyTrace(final=Selection.empty(m)))
    selected: list[int] = []
    remaining = np.arange(m)
    trace = GreedyTrace()
    for _ in range(max_k):
        vals = f.probe(tuple(selected), remaining)
        pos = _pick(vals - current, remaining)
        chosen = int(remaining[pos])
        selected.append(chosen)
        trace.steps.append(GreedyStep(chosen, float(vals[pos]), float(vals[pos] - current), int(remaining.size)))
        current = float(vals[pos])
        remaining = np.delete(remaining, pos)
        if current >= lam:
            break
    trace.final = Selection(tuple(selected), m)
    return ThresholdResult(trace.final, current, current >= lam, trace)


# ---------------------------------------------------------------------------
# approximate submodularity


@dataclass(frozen=True)
class EpsilonCertificate:
    """Bound ``epsilon <= 4 C1 (a + kappa lambda_max / beta)`` with ``C1 = ||S^{-1} theta||^2``."""

    epsilon: float
    c1: float
    a: float
    beta: float
    kappa: float
    lambda_max: float

    def to_dict(self) -> dict:
        return dict(epsilon=self.epsilon, c1=self.c1, a=self.a, beta=self.beta,
                    kappa=self.kappa, lambda_max=self.lambda_max)


def epsilon_bound(decomp: ShiftDecomposition, theta) -> EpsilonCertificate:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.size != decomp.m:
        raise DimensionError(f"theta has length {theta.size}, decomposition has M={decomp.m}")
    v = decomp.solve_s(theta)
    c1 = float(v @ v)
    eps = 4.0 * c1 * (decomp.a + decomp.kappa * decomp.lambda_max / decomp.beta)
    return EpsilonCertificate(eps, c1, decomp.a, decomp.beta, decomp.kappa, decomp.lambda_max)


GREEDY_FACTOR = 1.0 - math.exp(-1.0)


def near_optimality_gap(f_greedy: float, k: int, epsilon: float) -> float:
    """Certified upper bound on the optimum: ``(f_greedy + K eps) / (1 - 1/e)``."""
    return (f_greedy + k * epsilon) / GREEDY_FACTOR


def subset_table(f: SetFunction, max_ground: int = MAX_SWEEP_GROUND) -> np.ndarray:
    """``f`` on every subset, indexed by bitmask (bit ``i`` set iff ``i`` selected)."""
    m = f.ground_size
    if m > max_ground:
        raise ComplexityError(f"exhaustive sweep over 2^{m} subsets refused (limit M <= {max_ground})")
    table = np.empty(1 << m)
    table[0] = f.evaluate(())
    weights = 1 << np.arange(m)
    for k in range(1, m + 1):
        idx = np.array(list(itertools.combinations(range(m), k)), dtype=np.intp)
        table[weights[idx].sum(axis=1)] = f.batch(idx)
    return table


def _gain_tables(table: np.ndarray, m: int):
    cube = table.reshape((2,) * m)
    for v in range(m):
        axis = m - 1 - v  # C-order: axis 0 carries the highest bit
        yield v, np.take(cube, 1, axis=axis) - np.take(cube, 0, axis=axis)


def empirical_epsilon(f: SetFunction, max_ground: int = MAX_SWEEP_GROUND) -> float:
    """Smallest ``eps >= 0`` with ``f(A+v)-f(A) >= f(B+v)-f(B) - eps`` for all ``A <= B``, ``v not in B``."""
    m = f.ground_size
    table = subset_table(f, max_ground)
    worst = 0.0
    for _, gains in _gain_tables(table, m):
        # smallest gain over all subsets of each B, compared against the gain at B
        low = gains
        for ax in range(gains.ndim):
            low = np.minimum.accumulate(low, axis=ax)
        worst = max(worst, float(np.max(gains - low)))
    return worst


def min_marginal_gain(f: SetFunction, max_ground: int = MAX_SWEEP_GROUND) -> float:
    """Smallest ``f(A+v) - f(A)`` over all ``A`` and ``v not in A``."""
    m = f.ground_size
    table = subset_table(f, max_ground)
    return min(float(g.min()) for _, g in _gain_tables(table, m))
