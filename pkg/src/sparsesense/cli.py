"""Command-line front end and experiment orchestration.

Subcommands::

    sparsesense select     --config cfg.json [--out DIR]   one instance, one method
    sparsesense experiment --config cfg.json --out DIR      trials x methods x K grid
    sparsesense bound      --config cfg.json               epsilon certificate and gap table
    sparsesense generate   --config cfg.json --out DIR      write instance matrices as CSV

Exit codes: 0 success, 2 configuration error, 3 numerical failure in every cell.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import comb

from .errors import ConfigError
from .io import save_pair
from .linmodel import GaussianPair, Selection, kl_divergence, shift_decompose, snr
from .oracle import (
    EXHAUSTIVE_GUARD,
    exhaustive_best,
    exhaustive_worst,
    monte_carlo_errors,
    pe_mean_shift,
    pm_mean_shift,
)
from .scenarios import ScenarioSpec
from .setfunc import (
    GREEDY_FACTOR,
    CountingFunction,
    KLFunction,
    SNRFunction,
    epsilon_bound,
    greedy_maximize,
    near_optimality_gap,
)
from .supsub import supsub_maximize
from .surrogate import (
    DsDecomposition,
    bhattacharyya_decomposition,
    jdiv_sub,
    kl_decomposition,
    kl_sub_decomposition,
    logdet_surrogate,
    surrogate_greedy,
)

CONFIG_VERSION = 1
COLUMNS = ("trial", "method", "K", "objective", "snr", "pe", "pm", "runtime_ns", "evals", "error")
METHODS = ("greedy_snr", "surrogate", "kl_greedy", "supsub_kl", "supsub_surrogate", "supsub_bhatt",
           "jdiv_greedy", "exhaustive")
MEAN_SHIFT_ONLY = {"greedy_snr", "surrogate"}
COV_SHIFT_ONLY = {"supsub_kl", "supsub_surrogate", "supsub_bhatt", "jdiv_greedy"}
HIST_BINS = 20

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


@dataclass
class ExperimentConfig:
    scenario: ScenarioSpec
    methods: list
    k_values: list
    trials: int = 100
    seed: int = 0
    pfa: float = 0.1
    mc_trials: int = 10_000
    threads: int = 1
    supsub_policy: str = "both"
    baseline: str | None = None
    output_dir: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("methods must be non-empty")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; expected a subset of {METHODS}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods must not repeat")
        if not self.k_values:
            raise ConfigError("k_values must be non-empty")
        m = self.scenario.m
        for k in self.k_values:
            if not isinstance(k, int) or not 1 <= k <= m:
                raise ConfigError(f"K={k!r} outside [1, {m}]")
        if "exhaustive" in self.methods:
            worst = max(comb(m, k, exact=True) for k in self.k_values)
            if worst > EXHAUSTIVE_GUARD:
                raise ConfigError(f"exhaustive search over {worst} subsets exceeds the guard {EXHAUSTIVE_GUARD}")
        if not isinstance(self.trials, int) or self.trials < 1:
            raise ConfigError("trials must be a positive integer")
        if not 0.0 < self.pfa < 1.0:
            raise ConfigError("pfa must lie in (0, 1)")
        if self.mc_trials < 1000:
            raise ConfigError("mc_trials must be >= 1000")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if str(self.supsub_policy) not in ("1", "2", "both"):
            raise ConfigError("supsub_policy must be 1, 2 or 'both'")

    @classmethod
    def from_dict(cls, data: dict, seed: int | None = None, threads: int | None = None) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        data = dict(data)
        version = data.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r}")
        if "scenario" not in data:
            raise ConfigError("config needs a 'scenario'")
        scen = dict(data.pop("scenario"))
        if seed is not None:
            data["seed"] = seed
            scen["seed"] = seed
        else:
            scen.setdefault("seed", data.get("seed", 0))
        if threads is not None:
            data["threads"] = threads
        if "method" in data and "methods" not in data:
            data["methods"] = [data.pop("method")]
        if "K" in data and "k_values" not in data:
            data["k_values"] = [data.pop("K")]
        known = {f for f in cls.__dataclass_fields__ if f not in ("scenario", "extra")}
        extra = {k: data.pop(k) for k in list(data) if k not in known}
        try:
            return cls(scenario=ScenarioSpec.from_dict(scen), extra=extra, **data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# one cell


@dataclass
class CellResult:
    method: str
    selection: Selection | None
    evals: int
    runtime_ns: int
    detail: dict = field(default_factory=dict)


def _counted_dec(dec: DsDecomposition) -> tuple[DsDecomposition, list]:
    g, h = CountingFunction(dec.g), CountingFunction(dec.h)
    return DsDecomposition(g, h, dec.label), [g, h]


def _applicable(method: str, pair: GaussianPair) -> str | None:
    common = pair.common_covariance
    if method in MEAN_SHIFT_ONLY and not common:
        return f"{method} needs a common-covariance (mean shift) scenario"
    if method in COV_SHIFT_ONLY and np.any(pair.theta != 0.0):
        return f"{method} needs an equal-means (covariance shift) scenario"
    return None


def objective_function(pair: GaussianPair):
    """SNR for common-covariance pairs, KL divergence otherwise."""
    return SNRFunction(pair) if pair.common_covariance else KLFunction(pair)


def run_method(method: str, pair: GaussianPair, k: int, policy="both") -> list[CellResult]:
    """Run one method; ``exhaustive`` yields a best and a worst result."""
    start = time.perf_counter_ns()
    if method == "greedy_snr":
        f = CountingFunction(SNRFunction(pair))
        sel, trace = greedy_maximize(f, k)
        out = [CellResult(method, sel, f.count, 0, {"trace": trace.to_dict()})]
    elif method == "surrogate":
        res = surrogate_greedy(logdet_surrogate(pair), k)
        evals = res.surrogate_trace.evaluations + res.snr_trace.evaluations
        detail = {"surrogate": list(res.surrogate.indices), "snr_chain": list(res.snr_chain.indices),
                  "surrogate_snr": res.surrogate_snr, "snr_chain_snr": res.chain_snr,
                  "best": list(res.best.indices), "ops": res.ops}
        out = [CellResult(method, res.surrogate, evals, 0, detail)]
    elif method == "kl_greedy":
        f = CountingFunction(KLFunction(pair))
        sel, trace = greedy_maximize(f, k)
        out = [CellResult(method, sel, f.count, 0, {"trace": trace.to_dict()})]
    elif method == "jdiv_greedy":
        f = CountingFunction(jdiv_sub(pair))
        sel, trace = greedy_maximize(f, k)
        out = [CellResult(method, sel, f.count, 0, {"trace": trace.to_dict()})]
    elif method in ("supsub_kl", "supsub_surrogate", "supsub_bhatt"):
        build = {"supsub_kl": kl_decomposition, "supsub_surrogate": kl_sub_decomposition,
                 "supsub_bhatt": bhattacharyya_decomposition}[method]
        dec, counters = _counted_dec(build(pair))
        res = supsub_maximize(dec, k, policy)
        detail = {"iterations": res.iterations, "converged": res.converged, "log": res.log}
        out = [CellResult(method, res.selection, sum(c.count for c in counters), 0, detail)]
    elif method == "exhaustive":
        f = objective_function(pair)
        best, _ = exhaustive_best(f, k)
        mid = time.perf_counter_ns()
        worst, _ = exhaustive_worst(f, k)
        n = comb(pair.m, k, exact=True)
        out = [CellResult("exhaustive", best, n, mid - start),
               CellResult("exhaustive_worst", worst, n, time.perf_counter_ns() - mid)]
        return out
    else:  # pragma: no cover - guarded by config validation
        raise ConfigError(f"unknown method {method}")
    out[0].runtime_ns = time.perf_counter_ns() - start
    return out


def _mc_seed(seed: int, trial: int, k: int) -> int:
    # shared by every method of a (trial, K) cell: common random numbers
    words = np.random.SeedSequence([seed, trial, k]).generate_state(2, dtype=np.uint64)
    return int(words[0]) << 64 | int(words[1])


def evaluate_selection(pair: GaussianPair, sel: Selection, pfa: float, mc_trials: int, mc_seed: int) -> dict:
    """Objective, SNR and detection errors of a selection."""
    idx = list(sel.indices)
    if pair.common_covariance:
        s = snr(pair, idx)
        return {"objective": s, "snr": s, "pe": pe_mean_shift(pair, idx), "pm": pm_mean_shift(pair, idx, pfa)}
    rep = monte_carlo_errors(pair, idx, mc_trials, mc_seed, pfa)
    return {"objective": kl_divergence(pair, idx), "snr": math.nan, "pe": rep.pe, "pm": rep.pm}


def _row(trial, method, k, values=None, runtime_ns=0, evals=0, error=""):
    values = values or {}
    return {"trial": trial, "method": method, "K": k,
            "objective": values.get("objective", math.nan), "snr": values.get("snr", math.nan),
            "pe": values.get("pe", math.nan), "pm": values.get("pm", math.nan),
            "runtime_ns": runtime_ns, "evals": evals, "error": error}


def run_trial(cfg: ExperimentConfig, trial: int) -> list[dict]:
    rows = []
    try:
        pair = cfg.scenario.instance(trial)
    except Exception as exc:
        msg = f"instance generation failed: {exc}"
        for k in cfg.k_values:
            for method in cfg.methods:
                rows.append(_row(trial, method, k, error=msg))
        return rows
    for k in cfg.k_values:
        seed = _mc_seed(cfg.seed, trial, k)
        for method in cfg.methods:
            reason = _applicable(method, pair)
            if reason:
                rows.append(_row(trial, method, k, error=reason))
                continue
            try:
                cells = run_method(method, pair, k, cfg.supsub_policy)
            except Exception as exc:
                rows.append(_row(trial, method, k, error=f"{type(exc).__name__}: {exc}"))
                continue
            for cell in cells:
                try:
                    vals = evaluate_selection(pair, cell.selection, cfg.pfa, cfg.mc_trials, seed)
                    rows.append(_row(trial, cell.method, k, vals, cell.runtime_ns, cell.evals))
                except Exception as exc:
                    rows.append(_row(trial, cell.method, k, runtime_ns=cell.runtime_ns, evals=cell.evals,
                                     error=f"{type(exc).__name__}: {exc}"))
    return rows


def run_selection(cfg: ExperimentConfig) -> list[dict]:
    """All records of the experiment grid, ordered by trial."""
    trials = range(cfg.trials)
    if cfg.threads == 1:
        chunks = [run_trial(cfg, t) for t in trials]
    else:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            chunks = list(pool.map(lambda t: run_trial(cfg, t), trials))
    return [row for chunk in chunks for row in chunk]


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_records(rows, path_or_file) -> None:
    own = not hasattr(path_or_file, "write")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in COLUMNS])
    finally:
        if own:
            fh.close()


def read_records(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {"trial": int(r["trial"]), "method": r["method"], "K": int(r["K"]),
                   "runtime_ns": int(r["runtime_ns"]), "evals": int(r["evals"]), "error": r["error"]}
            for c in ("objective", "snr", "pe", "pm"):
                row[c] = float(r[c]) if r[c] != "" else math.nan
            out.append(row)
    return out


def _ci95(values: np.ndarray) -> float:
    if values.size < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / math.sqrt(values.size))


def summarize(records, baseline: str | None = None, metric: str = "objective") -> dict:
    """Per-(method, K) means with 95% half-widths and a ratio-to-baseline histogram.

    The histogram pools every K; ratios are ``metric(method) / metric(baseline)``
    on matching (trial, K), binned into 20 equal bins over the observed range.
    """
    records = list(records)
    if not records:
        raise ConfigError("no records to summarize")
    ok = [r for r in records if not r["error"]]
    groups: dict = {}
    for r in ok:
        groups.setdefault((r["method"], r["K"]), []).append(r)
    table = []
    for (method, k), rows in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        entry = {"method": method, "K": k, "n": len(rows)}
        for c in ("objective", "snr", "pe", "pm", "runtime_ns", "evals"):
            vals = np.array([r[c] for r in rows], dtype=float)
            vals = vals[~np.isnan(vals)]
            entry[f"{c}_mean"] = float(vals.mean()) if vals.size else math.nan
            entry[f"{c}_ci95"] = _ci95(vals) if vals.size else math.nan
        table.append(entry)
    result = {"table": table, "histogram": []}
    if baseline is None:
        return result
    base = {(r["trial"], r["K"]): r[metric] for r in ok if r["method"] == baseline}
    if not base:
        raise ConfigError(f"baseline method {baseline!r} not present in records")
    ratios: dict = {}
    for r in ok:
        if r["method"] == baseline:
            continue
        ref = base.get((r["trial"], r["K"]))
        if ref is None or ref == 0 or math.isnan(ref) or math.isnan(r[metric]):
            continue
        ratios.setdefault(r["method"], []).append(r[metric] / ref)
    if ratios:
        pooled = np.concatenate([np.asarray(v) for v in ratios.values()])
        lo, hi = float(pooled.min()), float(pooled.max())
        if hi == lo:
            hi = lo + 1e-12
        edges = np.linspace(lo, hi, HIST_BINS + 1)
        for method in sorted(ratios):
            counts, _ = np.histogram(ratios[method], bins=edges)
            for b in range(HIST_BINS):
                result["histogram"].append({"method": method, "bin_lo": float(edges[b]),
                                            "bin_hi": float(edges[b + 1]), "count": int(counts[b])})
    return result


def _write_dicts(rows, path, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def bound_report(pair: GaussianPair, beta: float = 0.5, k_values=None) -> dict:
    """Epsilon certificate for the SNR and the near-optimality table of greedy per K."""
    decomp = shift_decompose(pair.sigma0, beta)
    cert = epsilon_bound(decomp, pair.theta)
    k_values = list(range(1, pair.m + 1)) if k_values is None else list(k_values)
    _, trace = greedy_maximize(SNRFunction(pair), max(k_values))
    rows = []
    for k in k_values:
        val = trace.steps[k - 1].value
        upper = near_optimality_gap(val, k, cert.epsilon)
        frac = GREEDY_FACTOR if cert.epsilon == 0 or upper == 0 else val / upper
        rows.append({"K": k, "greedy_value": val, "k_epsilon": k * cert.epsilon,
                     "opt_upper_bound": upper, "guaranteed_fraction": frac})
    return {"certificate": cert.to_dict(), "rows": rows}


# ---------------------------------------------------------------------------
# entry point


def _load_config(args) -> dict:
    if not args.config:
        raise ConfigError("--config is required")
    try:
        with open(args.config) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def _out_dir(args, cfg: ExperimentConfig | None, required: bool) -> Path | None:
    out = args.out or (cfg.output_dir if cfg else None)
    if out is None:
        if required:
            raise ConfigError("--out is required")
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def cmd_select(args) -> int:
    cfg = ExperimentConfig.from_dict(_load_config(args), args.seed, args.threads)
    if len(cfg.methods) != 1 or len(cfg.k_values) != 1:
        raise ConfigError("select takes exactly one method and one K")
    trial = int(cfg.extra.get("trial", 0))
    pair = cfg.scenario.instance(trial)
    method, k = cfg.methods[0], cfg.k_values[0]
    reason = _applicable(method, pair)
    if reason:
        raise ConfigError(reason)
    seed = _mc_seed(cfg.seed, trial, k)
    try:
        cells = run_method(method, pair, k, cfg.supsub_policy)
    except Exception as exc:
        print(json.dumps({"method": method, "K": k, "error": f"{type(exc).__name__}: {exc}"}))
        return EXIT_NUMERICAL
    report = {"method": method, "K": k, "trial": trial, "results": []}
    for cell in cells:
        entry = {"method": cell.method, "selection": list(cell.selection.indices), "evals": cell.evals,
                 "runtime_ns": cell.runtime_ns,
                 **evaluate_selection(pair, cell.selection, cfg.pfa, cfg.mc_trials, seed), **cell.detail}
        if method == "surrogate":
            alt = evaluate_selection(pair, Selection(tuple(cell.detail["snr_chain"]), pair.m),
                                     cfg.pfa, cfg.mc_trials, seed)
            entry["snr_chain_pe"] = alt["pe"]
            entry["best_pe"] = min(alt["pe"], entry["pe"])
        report["results"].append(entry)
    text = json.dumps(report, indent=2, default=_json_default)
    out = _out_dir(args, cfg, required=False)
    if out:
        (out / "selection.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = ExperimentConfig.from_dict(_load_config(args), args.seed, args.threads)
    out = _out_dir(args, cfg, required=True)
    rows = run_selection(cfg)
    write_records(rows, out / "records.csv")
    ok = [r for r in rows if not r["error"]]
    if ok:
        baseline = cfg.baseline
        if baseline is not None and not any(r["method"] == baseline for r in ok):
            raise ConfigError(f"baseline method {baseline!r} produced no records")
        summary = summarize(rows, baseline)
        cols = ["method", "K", "n"] + [f"{c}_{s}" for c in ("objective", "snr", "pe", "pm", "runtime_ns", "evals")
                                       for s in ("mean", "ci95")]
        _write_dicts(summary["table"], out / "summary.csv", cols)
        if summary["histogram"]:
            _write_dicts(summary["histogram"], out / "histogram.csv", ["method", "bin_lo", "bin_hi", "count"])
    failed = len(rows) - len(ok)
    print(f"{len(rows)} records, {failed} failed -> {out / 'records.csv'}")
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_bound(args) -> int:
    data = _load_config(args)
    cfg = ExperimentConfig.from_dict({"methods": ["greedy_snr"], **data}, args.seed, args.threads)
    pair = cfg.scenario.instance(int(cfg.extra.get("trial", 0)))
    if not pair.common_covariance:
        raise ConfigError("bound needs a common-covariance scenario")
    rep = bound_report(pair, float(cfg.extra.get("beta", 0.5)), cfg.k_values)
    buf = _io.StringIO()
    cert = rep["certificate"]
    buf.write(f"epsilon = {cert['epsilon']:.6g}  (C1 = {cert['c1']:.6g}, a = {cert['a']:.6g}, "
              f"beta = {cert['beta']:.3g}, kappa = {cert['kappa']:.6g}, lambda_max = {cert['lambda_max']:.6g})\n")
    buf.write(f"{'K':>4} {'greedy':>12} {'K*eps':>12} {'OPT<=':>12} {'fraction':>9}\n")
    for r in rep["rows"]:
        buf.write(f"{r['K']:>4} {r['greedy_value']:>12.6g} {r['k_epsilon']:>12.6g} "
                  f"{r['opt_upper_bound']:>12.6g} {r['guaranteed_fraction']:>9.4f}\n")
    print(buf.getvalue(), end="")
    out = _out_dir(args, cfg, required=False)
    if out:
        (out / "bound.json").write_text(json.dumps(rep, indent=2) + "\n")
    return EXIT_OK


def cmd_generate(args) -> int:
    data = _load_config(args)
    cfg = ExperimentConfig.from_dict({"methods": ["greedy_snr"], "k_values": [1], **data},
                                     args.seed, args.threads)
    out = _out_dir(args, cfg, required=True)
    n = int(cfg.extra.get("instances", 1))
    for t in range(n):
        path = save_pair(cfg.scenario.instance(t), out, stem=f"trial{t}_" if n > 1 else "")
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsesense", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, helptext in [
        ("select", cmd_select, "run one method on one instance"),
        ("experiment", cmd_experiment, "run a trials x methods x K grid"),
        ("bound", cmd_bound, "print the epsilon certificate and near-optimality table"),
        ("generate", cmd_generate, "write scenario matrices as CSV"),
    ]:
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--threads", type=int, help="worker threads for trials")
        sp.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
