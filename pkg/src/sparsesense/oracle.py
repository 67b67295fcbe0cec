"""Ground truth: exhaustive search, detection error probabilities, and the 3-sensor counterexample."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import comb
from scipy.stats import norm

from .errors import ComplexityError, ParameterError
from .linmodel import GaussianPair, Selection, cholesky_lower, logdet_from_cholesky, restrict, snr
from .setfunc import SNRFunction, SetFunction, _check_k, greedy_maximize

EXHAUSTIVE_GUARD = 10**7
_CHUNK = 4096


def _exhaustive(f: SetFunction, k: int, sign: float, guard: int):
    m = f.ground_size
    _check_k(k, m)
    total = comb(m, k, exact=True)
    if total > guard:
        raise ComplexityError(f"C({m},{k}) = {total} subsets exceeds the guard of {guard}")
    combos = itertools.combinations(range(m), k)
    best_val, best_set = -math.inf, None
    while True:
        block = np.array(list(itertools.islice(combos, _CHUNK)), dtype=np.intp).reshape(-1, k)
        if block.shape[0] == 0:
            break
        vals = sign * f.batch(block)
        pos = int(np.argmax(vals))  # first maximizer = lexicographically smallest
        if vals[pos] > best_val:
            best_val, best_set = float(vals[pos]), block[pos]
    return Selection(tuple(int(i) for i in best_set), m), sign * best_val


def exhaustive_best(f: SetFunction, k: int, guard: int = EXHAUSTIVE_GUARD) -> tuple[Selection, float]:
    """Maximizer of ``f`` over all ``K``-subsets; ties go to the lexicographically smallest."""
    return _exhaustive(f, k, 1.0, guard)


def exhaustive_worst(f: SetFunction, k: int, guard: int = EXHAUSTIVE_GUARD) -> tuple[Selection, float]:
    """Minimizer of ``f`` over all ``K``-subsets; ties go to the lexicographically smallest."""
    return _exhaustive(f, k, -1.0, guard)


# ---------------------------------------------------------------------------
# detection errors


def pe_from_distance(d: float, prior0: float) -> float:
    """Bayes error of a Gaussian mean-shift LRT with Mahalanobis distance ``d``."""
    if not 0.0 < prior0 < 1.0:
        raise ParameterError(f"prior0 must lie in (0, 1), got {prior0}")
    if d <= 0.0:
        return min(prior0, 1.0 - prior0)
    if math.isinf(d):
        return 0.0
    ln_eta = math.log(prior0 / (1.0 - prior0))
    return float(prior0 * norm.sf(ln_eta / d + d / 2) + (1.0 - prior0) * norm.sf(d / 2 - ln_eta / d))


def pe_mean_shift(pair: GaussianPair, A, prior0: float | None = None) -> float:
    """Closed-form error probability ``p0 Q(ln(eta)/d + d/2) + p1 Q(d/2 - ln(eta)/d)``, ``d = sqrt(s(A))``."""
    prior0 = pair.prior0 if prior0 is None else prior0
    return pe_from_distance(math.sqrt(max(snr(pair, A), 0.0)), prior0)


def pm_mean_shift(pair: GaussianPair, A, pfa: float) -> float:
    """Miss probability of the Neyman-Pearson test at false-alarm rate ``pfa``."""
    if not 0.0 < pfa < 1.0:
        raise ParameterError(f"pfa must lie in (0, 1), got {pfa}")
    d = math.sqrt(max(snr(pair, A), 0.0))
    return float(norm.cdf(norm.isf(pfa) - d))


@dataclass(frozen=True)
class ErrorReport:
    pe: float
    pm: float
    pfa_target: float
    trials: int
    ci95_halfwidth: float
    pfa: float = math.nan
    pmiss: float = math.nan

    def to_json(self) -> str:
        return json.dumps(asdict(self))


_MC_CHUNK = 1 << 16


def _standard_normals(seed: int, stream: int, n: int, k: int) -> np.ndarray:
    """``(n, k)`` standard normals by Box-Muller on Philox uniforms.

    Chunk ``c`` of ``stream`` uses the Philox counter ``(0, 0, c, stream)``
    under key ``seed``, so the draws for a chunk do not depend on how many
    chunks come before it.
    """
    out = np.empty((n, k))
    for c, start in enumerate(range(0, n, _MC_CHUNK)):
        rows = min(_MC_CHUNK, n - start)
        gen = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, c, stream]))
        cnt = rows * k
        half = (cnt + 1) // 2
        u1 = 1.0 - gen.random(half)  # (0, 1]
        u2 = gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:cnt]
        out[start:start + rows] = z.reshape(rows, k)
    return out


def _llr(x: np.ndarray, r, chol0, chol1) -> np.ndarray:
    """``log p1(x) - log p0(x)`` row-wise."""
    w0 = solve_triangular(chol0, (x - r.theta0).T, lower=True)
    w1 = solve_triangular(chol1, (x - r.theta1).T, lower=True)
    return 0.5 * (np.sum(w0 * w0, axis=0) - np.sum(w1 * w1, axis=0)) \
        + 0.5 * (logdet_from_cholesky(chol0) - logdet_from_cholesky(chol1))


def monte_carlo_errors(pair: GaussianPair, A, trials: int = 10_000, seed: int = 0,
                       pfa_target: float = 0.1, prior0: float | None = None) -> ErrorReport:
    """Empirical LRT error probabilities on the sensors in ``A``.

    ``trials`` samples are drawn under each hypothesis.  ``pe`` uses the
    Bayes threshold ``ln(p0 / p1)``; ``pm`` uses the empirical
    ``1 - pfa_target`` quantile of the statistic under H0 as threshold.
    """
    if trials < 1000:
        raise ParameterError("monte carlo needs at least 1000 trials")
    if not 0.0 < pfa_target < 1.0:
        raise ParameterError(f"pfa_target must lie in (0, 1), got {pfa_target}")
    prior0 = pair.prior0 if prior0 is None else prior0
    r = restrict(pair, A)
    k = r.theta0.size
    if k == 0:
        raise ParameterError("monte carlo errors need a non-empty selection")
    chol0 = cholesky_lower(r.sigma0, "Sigma0_A")
    chol1 = cholesky_lower(r.sigma1, "Sigma1_A")
    x0 = r.theta0 + _standard_normals(seed, 0, trials, k) @ chol0.T
    x1 = r.theta1 + _standard_normals(seed, 1, trials, k) @ chol1.T
    l0 = _llr(x0, r, chol0, chol1)
    l1 = _llr(x1, r, chol0, chol1)
    tau = math.log(prior0 / (1.0 - prior0))
    fa = np.count_nonzero(l0 > tau) / trials
    miss = np.count_nonzero(l1 <= tau) / trials
    pe = prior0 * fa + (1.0 - prior0) * miss
    thresh = np.quantile(l0, 1.0 - pfa_target)
    pm = np.count_nonzero(l1 <= thresh) / trials
    ci = 1.96 * math.sqrt(pe * (1.0 - pe) / trials)
    return ErrorReport(float(pe), float(pm), float(pfa_target), int(trials), ci, float(fa), float(miss))


# ---------------------------------------------------------------------------
# counterexample


@dataclass(frozen=True)
class CounterexampleReport:
    rho: float
    greedy_value: float
    optimal_value: float
    ratio: float
    surrogate_expected_value: float
    surrogate_ratio: float
    greedy_selection: tuple
    optimal_selection: tuple
    enumerated_surrogate_value: float

    def to_dict(self) -> dict:
        return asdict(self)


def _tie_branches(f: SetFunction, k: int, tol: float):
    """All greedy outcomes of ``f`` under every tie-breaking, with their probabilities."""
    out = []

    def walk(base: tuple, prob: float):
        if len(base) == k:
            out.append((base, prob))
            return
        cands = np.setdiff1d(np.arange(f.ground_size), base)
        vals = f.probe(base, cands)
        ties = cands[vals >= vals.max() - tol]
        for c in ties:
            walk(base + (int(c),), prob / ties.size)

    walk((), 1.0)
    return out


def counterexample_analysis(rho: float, tie_tol: float = 1e-9) -> CounterexampleReport:
    """Greedy versus optimum on the 3-sensor instance, in closed form and by computation.

    Closed forms: greedy on the SNR reaches ``2 - rho^2``, the optimum is
    ``2 + 2 rho`` and the log-det surrogate, averaged over uniform
    tie-breaking, reaches ``2/3 (2 + 2 rho) + (2 - rho^2) / 3``.
    ``enumerated_surrogate_value`` repeats the last figure by walking every
    tie branch of the surrogate's greedy.
    """
    if not 0.0 <= rho < 1.0:
        raise ParameterError(f"rho must lie in [0, 1), got {rho}")
    from .scenarios import counterexample3
    from .surrogate import logdet_surrogate

    pair = counterexample3(rho)
    greedy = 2.0 - rho * rho
    optimum = 2.0 + 2.0 * rho
    expected = 2.0 / 3.0 * optimum + greedy / 3.0
    g_sel, _ = greedy_maximize(SNRFunction(pair), 2)
    o_sel, _ = exhaustive_best(SNRFunction(pair), 2)
    branches = _tie_branches(logdet_surrogate(pair), 2, tie_tol)
    enumerated = sum(p * snr(pair, list(b)) for b, p in branches)
    return CounterexampleReport(
        rho=float(rho), greedy_value=greedy, optimal_value=optimum, ratio=greedy / optimum,
        surrogate_expected_value=expected, surrogate_ratio=expected / optimum,
        greedy_selection=tuple(g_sel.indices), optimal_selection=tuple(o_sel.indices),
        enumerated_surrogate_value=float(enumerated),
    )
