"""Seeded generators for the covariance and mean families used in experiments."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, toeplitz

from .errors import ConfigError, FactorizationError, ParameterError
from .linmodel import GaussianPair, cholesky_lower

DEFAULT_PRIOR0 = 0.3
TOEPLITZ_DECAY = 0.9
TOEPLITZ_MAX_DRAWS = 1000
ARRAY_NOISE = 0.01

KINDS = ("toeplitz_random", "uniform_corr", "block_precision", "counterexample3", "array_sources",
         "random_pd", "custom_file")
HYPOTHESES = ("mean_shift", "cov_shift")


def _is_pd(mat) -> bool:
    try:
        cholesky_lower(mat)
    except FactorizationError:
        return False
    return True


def uniform_corr(m: int, rho: float) -> np.ndarray:
    """Unit diagonal with constant off-diagonal ``rho``."""
    if m < 1:
        raise ParameterError("m must be >= 1")
    low = -1.0 / (m - 1) if m > 1 else -np.inf
    if not low < rho < 1.0:
        raise ParameterError(f"rho={rho} outside the positive definite range ({low:.4g}, 1)")
    out = np.full((m, m), float(rho))
    np.fill_diagonal(out, 1.0)
    return out


def block_precision(m: int, rho: float) -> np.ndarray:
    """Precision matrix ``blockdiag(T, I)`` with ``T = toeplitz(rho^k)`` of size ``m // 2``."""
    if m < 1:
        raise ParameterError("m must be >= 1")
    if abs(rho) >= 1.0:
        raise ParameterError(f"|rho| must be < 1, got {rho}")
    half = m // 2
    out = np.eye(m)
    out[:half, :half] = toeplitz(float(rho) ** np.arange(half))
    return out


def block_precision_pair(m: int, rho: float, theta=None, prior0: float = DEFAULT_PRIOR0) -> GaussianPair:
    prec = block_precision(m, rho)
    sigma = cho_solve((cholesky_lower(prec, "precision"), True), np.eye(m))
    sigma = 0.5 * (sigma + sigma.T)
    theta = np.ones(m) if theta is None else np.asarray(theta, dtype=float)
    return GaussianPair.mean_shift(theta, sigma, prior0)


def counterexample3(rho: float, prior0: float = DEFAULT_PRIOR0) -> GaussianPair:
    """Three-sensor instance where greedy on the SNR does poorly as ``rho -> 1``.

    ``Sigma^{-1} = [[1, rho, 0], [rho, 1, 0], [0, 0, 1]]``, ``theta_0 = 0``, ``theta_1 = 1``.
    """
    if not 0.0 <= rho < 1.0:
        raise ParameterError(f"rho must lie in [0, 1), got {rho}")
    c = 1.0 - rho * rho
    sigma = np.array([[1.0, -rho, 0.0], [-rho, 1.0, 0.0], [0.0, 0.0, c]]) / c
    return GaussianPair.mean_shift(np.ones(3), sigma, prior0)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def toeplitz_random_cov(m: int, seed, max_draws: int = TOEPLITZ_MAX_DRAWS) -> np.ndarray:
    """Symmetric Toeplitz with ``r_0 = 1``, ``r_k = U(-0.5, 0.5) * 0.9^k``, redrawn until PD."""
    if m < 1:
        raise ParameterError("m must be >= 1")
    rng = _rng(seed)
    decay = TOEPLITZ_DECAY ** np.arange(1, m)
    for _ in range(max_draws):
        row = np.concatenate([[1.0], rng.uniform(-0.5, 0.5, m - 1) * decay])
        mat = toeplitz(row)
        if _is_pd(mat):
            return mat
    raise FactorizationError(f"no positive definite Toeplitz draw in {max_draws} attempts (m={m})")


def array_sources_cov(m: int, seed, noise: float = ARRAY_NOISE) -> np.ndarray:
    """``sum_k v_k v_k' + noise I`` for ``m`` unit-power sources on a half-wavelength linear array.

    ``v_k[n] = cos(pi n sin(phi_k))`` normalized to unit norm, ``phi_k ~ U(-pi/2, pi/2)``.
    """
    if m < 1:
        raise ParameterError("m must be >= 1")
    rng = _rng(seed)
    angles = rng.uniform(-np.pi / 2, np.pi / 2, m)
    steer = np.cos(np.pi * np.outer(np.arange(m), np.sin(angles)))
    steer /= np.linalg.norm(steer, axis=0)
    return steer @ steer.T + noise * np.eye(m)


def random_pd(m: int, seed, dof: int | None = None) -> np.ndarray:
    """Normalized Wishart draw ``X X' / dof`` with ``dof = 2m`` by default."""
    rng = _rng(seed)
    dof = 2 * m if dof is None else dof
    x = rng.standard_normal((m, dof))
    return x @ x.T / dof


def random_unit_mean(m: int, seed) -> np.ndarray:
    """Standard normal vector scaled to unit norm."""
    rng = _rng(seed)
    while True:
        v = rng.standard_normal(m)
        n = np.linalg.norm(v)
        if n > 0.0:
            return v / n


@dataclass
class ScenarioSpec:
    """Description of a family of problem instances; ``instance(trial)`` draws one.

    ``hypothesis`` selects a mean shift (common covariance, random unit means)
    or a covariance shift (two independent covariances of the same family,
    equal means).
    """

    kind: str
    m: int
    rho: float | None = None
    seed: int = 0
    prior0: float = DEFAULT_PRIOR0
    hypothesis: str = "mean_shift"
    path: str | None = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown scenario kind {self.kind!r}; expected one of {KINDS}")
        if self.hypothesis not in HYPOTHESES:
            raise ConfigError(f"unknown hypothesis {self.hypothesis!r}; expected one of {HYPOTHESES}")
        if self.kind == "counterexample3":
            self.m = 3
        if not isinstance(self.m, int) or self.m < 1:
            raise ConfigError(f"m must be a positive integer, got {self.m!r}")
        if self.kind in ("uniform_corr", "block_precision", "counterexample3") and self.rho is None:
            raise ConfigError(f"scenario {self.kind} needs rho")
        if self.kind == "custom_file" and not self.path:
            raise ConfigError("custom_file scenario needs a descriptor path")
        if not 0.0 < self.prior0 < 1.0:
            raise ConfigError(f"prior0 must lie in (0, 1), got {self.prior0}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSpec":
        known = {"kind", "m", "rho", "seed", "prior0", "hypothesis", "path", "options"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown scenario keys {sorted(extra)}")
        if "kind" not in data:
            raise ConfigError("scenario needs a 'kind'")
        if "m" not in data and data["kind"] != "counterexample3":
            raise ConfigError("scenario needs 'm'")
        return cls(**{"m": 3, **data})

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None and v != {}}

    def _seeds(self, trial: int):
        return np.random.SeedSequence([self.seed, trial]).spawn(4)

    def _covariance(self, seed) -> np.ndarray:
        if self.kind == "toeplitz_random":
            return toeplitz_random_cov(self.m, seed, self.options.get("max_draws", TOEPLITZ_MAX_DRAWS))
        if self.kind == "array_sources":
            return array_sources_cov(self.m, seed, self.options.get("noise", ARRAY_NOISE))
        if self.kind == "random_pd":
            return random_pd(self.m, seed, self.options.get("dof"))
        if self.kind == "uniform_corr":
            return uniform_corr(self.m, self.rho)
        raise ConfigError(f"scenario {self.kind} has no random covariance")

    def instance(self, trial: int = 0) -> GaussianPair:
        """The problem instance of trial ``trial`` (pure in ``(self, trial)``)."""
        if self.kind == "counterexample3":
            return counterexample3(self.rho, self.prior0)
        if self.kind == "block_precision":
            return block_precision_pair(self.m, self.rho, prior0=self.prior0)
        if self.kind == "custom_file":
            from .io import load_pair

            pair = load_pair(Path(self.path))
            return GaussianPair(pair.theta0, pair.theta1, pair.sigma0, pair.sigma1, self.prior0)
        s_cov0, s_cov1, s_mean0, s_mean1 = self._seeds(trial)
        if self.hypothesis == "cov_shift":
            if self.kind == "uniform_corr":
                raise ConfigError("uniform_corr is deterministic and cannot generate two covariances")
            return GaussianPair.covariance_shift(self._covariance(s_cov0), self._covariance(s_cov1),
                                                 prior0=self.prior0)
        theta0 = random_unit_mean(self.m, s_mean0)
        theta1 = random_unit_mean(self.m, s_mean1)
        cov = self._covariance(s_cov0)
        return GaussianPair(theta0, theta1, cov, cov, self.prior0)


def load_spec(path) -> ScenarioSpec:
    with open(path) as fh:
        return ScenarioSpec.from_dict(json.load(fh))
