"""CSV matrix files and the JSON model descriptor.

Matrices are stored row-major without a header using ``%.17g`` so that a
round trip is lossless.  Vectors are stored as a single row.  A descriptor
ties four such files together::

    {"m": 3, "theta0": "theta0.csv", "theta1": "theta1.csv",
     "sigma0": "sigma0.csv", "sigma1": "sigma1.csv", "prior0": 0.3}

Relative paths resolve against the descriptor's directory.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError
from .linmodel import GaussianPair

FLOAT_FMT = "%.17g"


def write_matrix_csv(path, arr) -> None:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    np.savetxt(path, arr, fmt=FLOAT_FMT, delimiter=",")


def read_matrix_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def read_vector_csv(path) -> np.ndarray:
    return read_matrix_csv(path).reshape(-1)


def save_pair(pair: GaussianPair, directory, stem: str = "") -> Path:
    """Write the four arrays and a descriptor; returns the descriptor path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {}
    for key in ("theta0", "theta1", "sigma0", "sigma1"):
        fname = f"{stem}{key}.csv"
        write_matrix_csv(directory / fname, getattr(pair, key))
        names[key] = fname
    desc = {"m": pair.m, **names, "prior0": pair.prior0}
    out = directory / f"{stem}descriptor.json"
    out.write_text(json.dumps(desc, indent=2) + "\n")
    return out


def load_pair(descriptor) -> GaussianPair:
    descriptor = Path(descriptor)
    try:
        desc = json.loads(descriptor.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read descriptor {descriptor}: {exc}") from exc
    missing = [k for k in ("m", "theta0", "theta1", "sigma0", "sigma1") if k not in desc]
    if missing:
        raise ConfigError(f"descriptor {descriptor} lacks {missing}")
    base = descriptor.parent
    arrays = {}
    for key in ("theta0", "theta1", "sigma0", "sigma1"):
        p = Path(desc[key])
        p = p if p.is_absolute() else base / p
        arrays[key] = read_vector_csv(p) if key.startswith("theta") else read_matrix_csv(p)
    pair = GaussianPair(prior0=float(desc.get("prior0", 0.5)), **arrays)
    if pair.m != int(desc["m"]):
        raise DimensionError(f"descriptor says m={desc['m']} but arrays have m={pair.m}")
    return pair
