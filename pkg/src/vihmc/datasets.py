"""In-memory datasets and their on-disk form (CSV matrices + JSON manifest)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

FORMAT_VERSION = 1


@dataclass
class FunctionDataset:
    """Pointwise regression data: ``y[i] = f(x[i]) + noise``."""

    x: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)
    kind = "function"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if self.x.shape[0] == 0:
            raise ConfigurationError("dataset is empty")
        if self.x.shape[0] != self.y.shape[0]:
            raise ConfigurationError(f"{self.x.shape[0]} inputs but {self.y.shape[0]} targets")

    @property
    def n_data(self) -> int:
        return self.x.shape[0]

    @property
    def inputs(self):
        return self.x

    @property
    def targets(self) -> np.ndarray:
        return self.y

    def subset(self, idx) -> FunctionDataset:
        return FunctionDataset(self.x[idx], self.y[idx], dict(self.meta))

    def matrices(self) -> dict[str, np.ndarray]:
        return {"x": self.x, "y": self.y}


@dataclass
class OperatorDataset:
    """Operator data: input functions ``u`` at fixed sensors, outputs ``v`` at shared queries.

    ``u`` is (N, n_sensors), ``queries`` is (Q, d_query) and ``v`` is (N, Q).
    """

    u: np.ndarray
    queries: np.ndarray
    v: np.ndarray
    meta: dict = field(default_factory=dict)
    kind = "operator"

    def __post_init__(self):
        self.u = np.atleast_2d(np.asarray(self.u, dtype=np.float64))
        self.queries = np.asarray(self.queries, dtype=np.float64)
        if self.queries.ndim == 1:
            self.queries = self.queries[:, None]
        self.v = np.atleast_2d(np.asarray(self.v, dtype=np.float64))
        if self.u.shape[0] == 0:
            raise ConfigurationError("dataset is empty")
        if self.v.shape != (self.u.shape[0], self.queries.shape[0]):
            raise ConfigurationError(
                f"targets {self.v.shape} do not match {self.u.shape[0]} functions x {self.queries.shape[0]} queries"
            )

    @property
    def n_data(self) -> int:
        return self.u.shape[0]

    @property
    def inputs(self):
        return (self.u, self.queries)

    @property
    def targets(self) -> np.ndarray:
        return self.v

    def subset(self, idx) -> OperatorDataset:
        return OperatorDataset(self.u[idx], self.queries, self.v[idx], dict(self.meta))

    def matrices(self) -> dict[str, np.ndarray]:
        return {"u": self.u, "queries": self.queries, "v": self.v}


Dataset = FunctionDataset | OperatorDataset


def _fmt_csv(a: np.ndarray) -> str:
    a = np.atleast_2d(a)
    # %.17g round-trips every float64 exactly
    return "\n".join(",".join(f"{v:.17g}" for v in row) for row in a) + "\n"


def _read_csv(path: Path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2))


def content_hash(matrices: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(matrices):
        a = np.ascontiguousarray(matrices[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_dataset(ds: Dataset, path) -> Path:
    """Write ``ds`` as a directory of CSV matrices plus ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    mats = ds.matrices()
    for name, a in mats.items():
        (path / f"{name}.csv").write_text(_fmt_csv(a))
    manifest = {
        "format": "vihmc-dataset",
        "version": FORMAT_VERSION,
        "kind": ds.kind,
        "shapes": {k: list(v.shape) for k, v in mats.items()},
        "content_hash": content_hash(mats),
        "meta": ds.meta,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != "vihmc-dataset":
        raise ConfigurationError(f"{path} is not a dataset directory")
    if manifest["version"] > FORMAT_VERSION:
        raise ConfigurationError(f"dataset format version {manifest['version']} is newer than supported")
    mats = {k: _read_csv(path / f"{k}.csv").reshape(s) for k, s in manifest["shapes"].items()}
    if content_hash(mats) != manifest["content_hash"]:
        raise ConfigurationError(f"content hash mismatch in {path}")
    if manifest["kind"] == "function":
        return FunctionDataset(mats["x"], mats["y"], manifest["meta"])
    return OperatorDataset(mats["u"], mats["queries"], mats["v"], manifest["meta"])
