"""Desk-scale datasets: two-moons, Gaussian blobs in a box, and CSV files."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.datasets import make_blobs, make_moons

from hfat.errors import ContractError, FormatError


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "moons"
    n_samples: int = 3000
    n_classes: int = 2
    noise: float = 0.2
    dim: int = 2
    test_fraction: float = 1 / 3
    seed: int = 0
    bounds: tuple[float, float] | None = None
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("moons", "blobs", "csv"):
            raise ContractError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "csv" and not self.path:
            raise ContractError("csv datasets need a path")
        if not 0 < self.test_fraction < 1:
            raise ContractError("test_fraction must lie in (0, 1)")
        if self.bounds is not None:
            object.__setattr__(self, "bounds", (float(self.bounds[0]), float(self.bounds[1])))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = list(self.bounds) if self.bounds is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DatasetSpec:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown dataset fields: {sorted(unknown)}")
        d = dict(d)
        if d.get("bounds") is not None:
            d["bounds"] = tuple(d["bounds"])
        return cls(**d)


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    bounds: tuple[float, float] | None = None
    name: str = "dataset"
    n_classes: int = field(default=0)

    def __post_init__(self):
        if not self.n_classes:
            self.n_classes = int(max(self.y_train.max(), self.y_test.max())) + 1

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]


def _split(x: np.ndarray, y: np.ndarray, spec: DatasetSpec, name: str) -> Dataset:
    n = len(y)
    n_test = int(round(n * spec.test_fraction))
    perm = np.random.default_rng([spec.seed, 1]).permutation(n)
    test, train = perm[:n_test], perm[n_test:]
    return Dataset(x[train], y[train], x[test], y[test], spec.bounds, name, spec.n_classes)


def make_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "moons":
        x, y = make_moons(n_samples=spec.n_samples, noise=spec.noise, random_state=spec.seed)
        name = f"moons-n{spec.n_samples}-s{spec.seed}"
    elif spec.kind == "blobs":
        lo, hi = spec.bounds if spec.bounds is not None else (0.0, 1.0)
        span = hi - lo
        rng = np.random.default_rng([spec.seed, 0])
        centers = lo + span * rng.uniform(0.2, 0.8, size=(spec.n_classes, spec.dim))
        x, y = make_blobs(
            n_samples=spec.n_samples,
            centers=centers,
            cluster_std=spec.noise * span,
            random_state=spec.seed,
        )
        if spec.bounds is not None:
            x = np.clip(x, lo, hi)
        name = f"blobs{spec.n_classes}-d{spec.dim}-n{spec.n_samples}-s{spec.seed}"
    else:
        return load_csv(spec.path, bounds=spec.bounds)
    return _split(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64), spec, name)


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{i}" for i in range(ds.dim)] + ["label", "split"])
    for split, xs, ys in (("train", ds.x_train, ds.y_train), ("test", ds.x_test, ds.y_test)):
        for row, label in zip(xs, ys):
            w.writerow([f"{v:.17g}" for v in row] + [int(label), split])
    return buf.getvalue()


def parse_csv(text: str, bounds=None, name: str = "csv") -> Dataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("line 1: empty dataset file") from None
    if len(header) < 3 or header[-2:] != ["label", "split"]:
        raise FormatError("line 1: header must end with 'label,split'")
    dim = len(header) - 2
    parts: dict[str, tuple[list, list]] = {"train": ([], []), "test": ([], [])}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != dim + 2:
            raise FormatError(f"line {lineno}: expected {dim + 2} fields, got {len(row)}")
        try:
            feats = [float(v) for v in row[:dim]]
            label = int(row[dim])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        if not np.all(np.isfinite(feats)) or label < 0:
            raise FormatError(f"line {lineno}: non-finite feature or negative label")
        split = row[dim + 1]
        if split not in parts:
            raise FormatError(f"line {lineno}: split must be 'train' or 'test', got {split!r}")
        parts[split][0].append(feats)
        parts[split][1].append(label)
    if not parts["train"][0] or not parts["test"][0]:
        raise FormatError("dataset needs at least one train and one test row")

    def arrays(split):
        xs, ys = parts[split]
        return np.array(xs, dtype=np.float64).reshape(-1, dim), np.array(ys, dtype=np.int64)

    x_tr, y_tr = arrays("train")
    x_te, y_te = arrays("test")
    return Dataset(x_tr, y_tr, x_te, y_te, bounds, name)


def load_csv(path, bounds=None) -> Dataset:
    path = Path(path)
    return parse_csv(path.read_text(), bounds=bounds, name=path.stem)
