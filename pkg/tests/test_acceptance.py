"""End-to-end acceptance criteria, one test each, at the stated tolerances and time budgets.

Every test prints a single ``[criterion N] PASS|FAIL ...`` line.
"""

import math
import time

import numpy as np
import pytest
from scipy.stats import norm

from sparsesense.linmodel import GaussianPair, kl_divergence, snr
from sparsesense.oracle import counterexample_analysis, exhaustive_best, monte_carlo_errors, pe_mean_shift
from sparsesense.scenarios import ScenarioSpec, block_precision_pair, random_pd, random_unit_mean
from sparsesense.setfunc import (
    GREEDY_FACTOR,
    KLFunction,
    SNRFunction,
    empirical_epsilon,
    greedy_maximize,
    min_marginal_gain,
)
from sparsesense.supsub import supsub_maximize
from sparsesense.surrogate import (
    advance,
    bhattacharyya_decomposition,
    commit,
    kl_sub_decomposition,
    logdet_surrogate,
)

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    return emit


def dense_surrogate(sigma, a, theta, A):
    """log det of the bordered matrix [[S^-1 + diag(1_A)/a, S^-1 t], [t' S^-1, t' S^-1 t]]."""
    m = sigma.shape[0]
    s_inv = np.linalg.inv(sigma - a * np.eye(m))
    mat = np.zeros((m + 1, m + 1))
    mat[:m, :m] = s_inv
    mat[A, A] += 1.0 / a
    mat[:m, m] = mat[m, :m] = s_inv @ theta
    mat[m, m] = theta @ s_inv @ theta
    return np.linalg.slogdet(mat)[1]


def random_mean_pair(rng, m):
    return GaussianPair.mean_shift(random_unit_mean(m, rng), random_pd(m, rng))


def test_criterion_1_counterexample(report):
    start = time.perf_counter()
    worst = 0.0
    rows = []
    for rho in (0.9, 0.99, 0.999):
        r = counterexample_analysis(rho)
        g, o = 2 - rho**2, 2 + 2 * rho
        e = 2 / 3 * o + g / 3
        worst = max(worst, abs(r.greedy_value - g), abs(r.optimal_value - o), abs(r.ratio - g / o),
                    abs(r.surrogate_expected_value - e), abs(r.surrogate_ratio - e / o),
                    abs(r.enumerated_surrogate_value - e))
        rows.append((rho, r.ratio, r.surrogate_ratio))
    r99 = counterexample_analysis(0.99)
    ratios = [x[1] for x in rows]
    surr = [x[2] for x in rows]
    elapsed = time.perf_counter() - start
    ok = (worst <= 1e-9 and abs(r99.ratio - 0.2563) < 5e-5 and abs(r99.surrogate_ratio - 0.752) < 5e-4
          and all(abs(b - 0.25) < abs(a - 0.25) for a, b in zip(ratios, ratios[1:]))
          and all(abs(b - 0.75) < abs(a - 0.75) for a, b in zip(surr, surr[1:])) and elapsed < 1.0)
    report(1, ok, f"ratio(0.99)={r99.ratio:.4f} surrogate_ratio(0.99)={r99.surrogate_ratio:.4f} "
                  f"max closed-form err={worst:.1e} ({elapsed:.2f}s)")
    assert ok


def test_criterion_2_surrogate_submodular(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    eps, gain = -math.inf, math.inf
    for _ in range(100):
        f = logdet_surrogate(random_mean_pair(rng, int(rng.integers(4, 9))))
        eps = max(eps, empirical_epsilon(f))
        gain = min(gain, min_marginal_gain(f))
    elapsed = time.perf_counter() - start
    ok = eps <= 1e-9 and gain >= -1e-9 and elapsed < 60
    report(2, ok, f"max empirical eps={eps:.2e}, min marginal gain={gain:.3e} ({elapsed:.1f}s)")
    assert ok


def test_criterion_3_recursion(report):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    steps = 0
    for _ in range(1000):
        m = int(rng.integers(1, 31))
        pair = random_mean_pair(rng, m)
        f = logdet_surrogate(pair, offset=0.0)
        state = f.state()
        for i in rng.permutation(m)[: int(rng.integers(1, m + 1))]:
            val, _ = advance(state, i)
            state = commit(state, i)
            dense = dense_surrogate(pair.sigma0, f.decomp.a, pair.theta, list(state.selection.indices))
            worst = max(worst, abs(val - dense) / max(1.0, abs(dense)))
            steps += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-8 and elapsed < 60
    report(3, ok, f"max relative error {worst:.2e} over {steps} steps of 1000 chains ({elapsed:.1f}s)")
    assert ok


def test_criterion_4_near_optimality(report):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    hits = total = 0
    worst = math.inf
    for _ in range(100):
        f = logdet_surrogate(random_mean_pair(rng, 12))
        for k in (2, 4, 6):
            _, opt = exhaustive_best(f, k)
            val = f(greedy_maximize(f, k)[0])
            worst = min(worst, val / opt)
            hits += val >= GREEDY_FACTOR * opt - 1e-12
            total += 1
    elapsed = time.perf_counter() - start
    ok = hits == total and elapsed < 120
    report(4, ok, f"{hits}/{total} cells at >= (1-1/e) of optimum, worst ratio {worst:.4f} ({elapsed:.1f}s)")
    assert ok


def test_criterion_5_error_ordering(report):
    from sparsesense.cli import ExperimentConfig, run_selection

    start = time.perf_counter()
    cfg = ExperimentConfig.from_dict({"scenario": {"kind": "array_sources", "m": 15, "prior0": 0.3, "seed": 5},
                                      "methods": ["exhaustive", "surrogate", "greedy_snr"],
                                      "k_values": list(range(2, 11)), "trials": 100, "threads": 4})
    rows = run_selection(cfg)
    assert all(r["error"] == "" for r in rows)
    pe = {}
    for r in rows:
        pe.setdefault((r["method"], r["K"]), {})[r["trial"]] = r["pe"]
    chain = ["exhaustive_worst", "surrogate", "greedy_snr", "exhaustive"]
    bad = []
    for k in cfg.k_values:
        for hi, lo in zip(chain, chain[1:]):
            d = np.array([pe[hi, k][t] - pe[lo, k][t] for t in range(cfg.trials)])
            ci = 1.96 * d.std(ddof=1) / math.sqrt(d.size)
            if d.mean() < -ci:
                bad.append((k, hi, lo))
    elapsed = time.perf_counter() - start
    ok = not bad and elapsed < 300
    report(5, ok, f"ordering worst >= surrogate >= greedy_snr >= exhaustive violated at {bad or 'no K'} "
                  f"({elapsed:.1f}s)")
    assert ok


def test_criterion_6_block_precision(report):
    start = time.perf_counter()
    pair = block_precision_pair(200, 0.18)
    full = snr(pair, list(range(200)))
    surr_sel, _ = greedy_maximize(logdet_surrogate(pair), 100)
    snr_sel, _ = greedy_maximize(SNRFunction(pair), 100)
    s_surr, s_greedy = snr(pair, list(surr_sel)), snr(pair, list(snr_sel))
    elapsed = time.perf_counter() - start
    ok = s_surr >= full * (1 - 1e-9) and s_greedy < s_surr and elapsed < 120
    report(6, ok, f"full-set SNR {full:.3f}; at K=100 surrogate {s_surr:.3f}, greedy-SNR {s_greedy:.3f} "
                  f"({elapsed:.1f}s)")
    assert ok


def test_criterion_7_supsub(report):
    start = time.perf_counter()
    spec = ScenarioSpec("random_pd", 15, seed=7, hypothesis="cov_shift")
    k = 5
    converged = monotone = close = 0
    for trial in range(100):
        pair = spec.instance(trial)
        res = supsub_maximize(bhattacharyya_decomposition(pair), k)
        objs = [e["objective"] for e in res.log]
        converged += res.converged and res.iterations <= 50
        monotone += all(b >= a - 1e-9 for a, b in zip(objs, objs[1:]))
        sel = supsub_maximize(kl_sub_decomposition(pair), k).selection
        _, opt = exhaustive_best(KLFunction(pair), k)
        close += kl_divergence(pair, list(sel)) >= 0.95 * opt
    elapsed = time.perf_counter() - start
    ok = converged >= 95 and monotone == 100 and close >= 80 and elapsed < 300
    report(7, ok, f"Bhattacharyya SupSub converged {converged}/100, monotone {monotone}/100; "
                  f"KL surrogate SupSub within 5% of exhaustive KL in {close}/100 ({elapsed:.1f}s)")
    assert ok


def test_criterion_8_detection_errors(report):
    start = time.perf_counter()
    rng = np.random.default_rng(8)
    worst = 0.0
    for i in range(20):
        m = int(rng.integers(2, 9))
        pair = GaussianPair.mean_shift(random_unit_mean(m, rng), random_pd(m, rng), float(rng.uniform(0.2, 0.8)))
        A = sorted(rng.choice(m, int(rng.integers(1, m + 1)), replace=False).tolist())
        rep = monte_carlo_errors(pair, A, 10**5, seed=i)
        worst = max(worst, abs(rep.pe - pe_mean_shift(pair, A)) / rep.ci95_halfwidth)
    q1 = GaussianPair.mean_shift(np.array([2.0]), np.eye(1), 0.5)
    closed = pe_mean_shift(q1, [0])
    mc = monte_carlo_errors(q1, [0], 10**5, seed=99)
    elapsed = time.perf_counter() - start
    ok = (worst <= 3 and abs(closed - norm.sf(1)) < 1e-15 and abs(closed - 0.158655) < 1e-6
          and abs(mc.pe - closed) <= mc.ci95_halfwidth and elapsed < 60)
    report(8, ok, f"max |MC - closed|/ci95 = {worst:.2f} over 20 instances; Q(1)={closed:.6f}, "
                  f"MC {mc.pe:.5f} +/- {mc.ci95_halfwidth:.5f} ({elapsed:.1f}s)")
    assert ok


def test_criterion_9_kl_snr(report):
    start = time.perf_counter()
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        m = int(rng.integers(1, 13))
        pair = GaussianPair.mean_shift(rng.standard_normal(m), random_pd(m, rng))
        A = rng.choice(m, int(rng.integers(1, m + 1)), replace=False).tolist()
        s = snr(pair, A)
        worst = max(worst, abs(kl_divergence(pair, A) - s / 2) / (s / 2))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 1.0
    report(9, ok, f"max relative |KL - SNR/2| = {worst:.1e} ({elapsed:.2f}s)")
    assert ok
