"""Observation matrices with optional ground truth, plus the on-disk bundle format.

A bundle is a directory holding ``meta.json`` and raw little-endian float64
files ``x.f64`` (and ``n.f64`` when noise is known), both row-major n x d.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ArgumentError, DataError, FormatError
from .scm import Dag, Permutation, first_violation

_LE = np.dtype("<f8")


@dataclass(frozen=True, eq=False)
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z) * self.std + self.mean

    def to_json(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(np.asarray(obj["mean"], dtype=np.float64), np.asarray(obj["std"], dtype=np.float64))

    @classmethod
    def identity(cls, d):
        return cls(np.zeros(d), np.ones(d))


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    noise: Optional[np.ndarray] = None
    dag: Optional[Dag] = None
    perm: Optional[Permutation] = None
    meta: dict = field(default_factory=dict)
    standardization: Optional[Standardization] = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise ArgumentError(f"observations must be n x d, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("observations contain NaN or Inf")
        object.__setattr__(self, "x", x)
        if self.noise is not None:
            nz = np.asarray(self.noise, dtype=np.float64)
            if nz.shape != x.shape:
                raise ArgumentError(f"noise shape {nz.shape} != observation shape {x.shape}")
            object.__setattr__(self, "noise", nz)
        if self.dag is not None and self.perm is not None:
            bad = first_violation(self.dag, self.perm)
            if bad is not None:
                raise DataError(f"stored ordering violates edge {bad}")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def standardized(self) -> "Dataset":
        """Column-standardize; composes with any earlier record."""
        if self.n < 2:
            raise ArgumentError("standardizing needs at least 2 rows")
        mu = self.x.mean(axis=0)
        sd = self.x.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        z = (self.x - mu) / sd
        # one more pass removes the O(eps) residual left by the first
        mu2, sd2 = z.mean(axis=0), z.std(axis=0)
        z = (z - mu2) / sd2
        rec = Standardization(mu + mu2 * sd, sd * sd2)
        if self.standardization is not None:
            prev = self.standardization
            rec = Standardization(prev.mean + prev.std * rec.mean, prev.std * rec.std)
        return replace(self, x=z, standardization=rec)

    def original_units(self) -> np.ndarray:
        if self.standardization is None:
            return self.x
        return self.standardization.invert(self.x)

    def split(self, fractions=(0.8, 0.1, 0.1), seed: int = 0):
        """Row split into consecutive shuffled blocks (train/val/test)."""
        rng = np.random.default_rng(seed)
        idx = rng.permutation(self.n)
        cuts = np.floor(np.cumsum(fractions)[:-1] * self.n).astype(int)
        return [self.rows(part) for part in np.split(idx, cuts)]

    def rows(self, idx) -> "Dataset":
        nz = None if self.noise is None else self.noise[idx]
        return replace(self, x=self.x[idx], noise=nz)


# ------------------------------------------------------------------ bundles


def save_bundle(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "n": ds.n,
        "d": ds.d,
        "meta": ds.meta,
        "standardization": None if ds.standardization is None else ds.standardization.to_json(),
        "adjacency": None if ds.dag is None else ds.dag.adj.astype(int).tolist(),
        "to": None if ds.perm is None else ds.perm.map.tolist(),
        "has_noise": ds.noise is not None,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    ds.x.astype(_LE).tofile(path / "x.f64")
    if ds.noise is not None:
        ds.noise.astype(_LE).tofile(path / "n.f64")
    return path


def _read_matrix(file: Path, n: int, d: int) -> np.ndarray:
    raw = np.fromfile(file, dtype=_LE)
    if raw.size != n * d:
        raise FormatError(f"{file}: expected {n * d} float64 values, found {raw.size}")
    return raw.reshape(n, d).astype(np.float64)


def load_bundle(path) -> Dataset:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError as err:
        raise DataError(f"no meta.json in bundle {path}") from err
    except json.JSONDecodeError as err:
        raise FormatError(f"{path / 'meta.json'}: {err}") from err
    n, d = meta["n"], meta["d"]
    x = _read_matrix(path / "x.f64", n, d)
    noise = _read_matrix(path / "n.f64", n, d) if meta.get("has_noise") else None
    dag = None if meta.get("adjacency") is None else Dag(np.asarray(meta["adjacency"], dtype=bool))
    perm = None if meta.get("to") is None else Permutation(meta["to"])
    st = None if meta.get("standardization") is None else Standardization.from_json(meta["standardization"])
    return Dataset(x=x, noise=noise, dag=dag, perm=perm, meta=meta.get("meta", {}), standardization=st)


def bundle_digest(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    for name in ("meta.json", "x.f64", "n.f64"):
        f = path / name
        if f.exists():
            h.update(name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def write_manifest(entries: list[dict], path) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"bundles": entries}, indent=1, sort_keys=True))
    return path


def read_manifest(path) -> list[dict]:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except FileNotFoundError as err:
        raise DataError(f"manifest not found: {path}") from err
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: {err}") from err
    if "bundles" not in obj:
        raise FormatError(f"{path}: missing 'bundles' list")
    return obj["bundles"]
