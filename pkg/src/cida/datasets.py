"""Synthetic continuously indexed benchmarks, index normalization and CSV I/O.

Target-domain labels are generated (evaluation needs them) but training code
only sees them through :meth:`Dataset.source`, never for target rows.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

SPLITS = ("source", "target")
UNLABELED = -1


class DataFormatError(ValueError):
    """Malformed dataset file."""


class Sample(NamedTuple):
    x: np.ndarray
    u: np.ndarray
    y: int | None
    split: str


@dataclass
class Dataset:
    """Rows of features ``x``, raw domain indices ``u``, labels and split tags.

    ``y`` uses ``-1`` for a missing label.  ``is_source`` is the split mask.
    """

    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    is_source: np.ndarray
    name: str = "dataset"
    n_classes: int = 2

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        if self.u.ndim == 1:
            self.u = self.u[:, None]
        self.y = np.asarray(self.y, dtype=np.int64)
        self.is_source = np.asarray(self.is_source, dtype=bool)
        n = len(self.x)
        if not (len(self.u) == len(self.y) == len(self.is_source) == n):
            raise ValueError("x, u, y and split must have the same number of rows")
        if n and (self.y.max() >= self.n_classes or self.y.min() < UNLABELED):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.x)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.sample(i)

    def sample(self, i: int) -> Sample:
        y = int(self.y[i])
        return Sample(self.x[i], self.u[i], None if y == UNLABELED else y, self.split_of(i))

    def split_of(self, i: int) -> str:
        return "source" if self.is_source[i] else "target"

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def d_u(self) -> int:
        return self.u.shape[1]

    @property
    def index_range(self) -> tuple[np.ndarray, np.ndarray]:
        return self.u.min(axis=0), self.u.max(axis=0)

    def split_indices(self, split: str) -> np.ndarray:
        if split == "source":
            return np.flatnonzero(self.is_source)
        if split == "target":
            return np.flatnonzero(~self.is_source)
        if split == "both":
            return np.arange(len(self))
        raise ValueError(f"unknown split '{split}'")

    def domains(self) -> list[tuple[float, ...]]:
        """Distinct index levels in order of first appearance."""
        seen = {}
        for row in map(tuple, self.u):
            seen.setdefault(row, None)
        return list(seen)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.x[rows], self.u[rows], self.y[rows], self.is_source[rows], self.name, self.n_classes)


# ---------------------------------------------------------------- generators


def _assemble(name, xs, us, ys, src) -> Dataset:
    return Dataset(np.vstack(xs), np.vstack(us), np.concatenate(ys), np.concatenate(src), name, 2)


def _check_n(n_per_domain: int) -> None:
    if n_per_domain < 1:
        raise ValueError("n_per_domain must be at least 1")


CIRCLE_RADIUS = 10.0
CIRCLE_SPREAD = 1.5


def circle_center(k: int) -> np.ndarray:
    angle = math.pi * (k - 1) / 29
    return CIRCLE_RADIUS * np.array([math.cos(angle), math.sin(angle)])


def gen_circle(seed: int = 0, n_per_domain: int = 100) -> Dataset:
    """30 domains on a half circle; label is whether a point lies outside radius 10.

    Domains 1-6 are source.
    """
    _check_n(n_per_domain)
    rng = np.random.default_rng(seed)
    xs, us, ys, src = [], [], [], []
    for k in range(1, 31):
        x = circle_center(k) + rng.normal(0.0, CIRCLE_SPREAD, size=(n_per_domain, 2))
        xs.append(x)
        us.append(np.full((n_per_domain, 1), float(k)))
        ys.append((np.linalg.norm(x, axis=1) > CIRCLE_RADIUS).astype(np.int64))
        src.append(np.full(n_per_domain, k <= 6))
    return _assemble("circle", xs, us, ys, src)


def sine_interval(k: int) -> tuple[float, float]:
    return (k - 1) * math.pi / 3, k * math.pi / 3


def gen_sine(seed: int = 0, n_per_domain: int = 100) -> Dataset:
    """12 domains, each covering a sixth of a sine period; label is ``x2 > sin(x1)``.

    Domains 1-5 are source.
    """
    _check_n(n_per_domain)
    rng = np.random.default_rng(seed)
    xs, us, ys, src = [], [], [], []
    for k in range(1, 13):
        lo, hi = sine_interval(k)
        x1 = rng.uniform(lo, hi, size=n_per_domain)
        x2 = rng.uniform(-2.0, 2.0, size=n_per_domain)
        xs.append(np.column_stack([x1, x2]))
        us.append(np.full((n_per_domain, 1), float(k)))
        ys.append((x2 > np.sin(x1)).astype(np.int64))
        src.append(np.full(n_per_domain, k <= 5))
    return _assemble("sine", xs, us, ys, src)


CIRCLE2D_SCALES = (0.8, 1.0, 1.2)


def circle2d_center(j: int, s: float) -> np.ndarray:
    angle = math.pi * (j - 1) / 14
    return CIRCLE_RADIUS * s * np.array([math.cos(angle), math.sin(angle)])


def gen_circle_2d(seed: int = 0, n_per_domain: int = 100) -> Dataset:
    """45 domains indexed by (angle step, radius scale); source is angle steps 1-3."""
    _check_n(n_per_domain)
    rng = np.random.default_rng(seed)
    xs, us, ys, src = [], [], [], []
    for j in range(1, 16):
        for s in CIRCLE2D_SCALES:
            x = circle2d_center(j, s) + rng.normal(0.0, CIRCLE_SPREAD, size=(n_per_domain, 2))
            xs.append(x)
            us.append(np.tile([float(j), s], (n_per_domain, 1)))
            ys.append((np.linalg.norm(x, axis=1) > CIRCLE_RADIUS * s).astype(np.int64))
            src.append(np.full(n_per_domain, j <= 3))
    return _assemble("circle2d", xs, us, ys, src)


GENERATORS = {"circle": gen_circle, "sine": gen_sine, "circle2d": gen_circle_2d}


def generate(name: str, seed: int = 0, n_per_domain: int = 100) -> Dataset:
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown dataset '{name}' (choose from {sorted(GENERATORS)})") from None
    return gen(seed, n_per_domain)


def true_label(name: str, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Closed-form labelling rule of each generator."""
    x = np.atleast_2d(x)
    u = np.atleast_2d(u)
    if name == "circle":
        return (np.linalg.norm(x, axis=1) > CIRCLE_RADIUS).astype(np.int64)
    if name == "sine":
        return (x[:, 1] > np.sin(x[:, 0])).astype(np.int64)
    if name == "circle2d":
        return (np.linalg.norm(x, axis=1) > CIRCLE_RADIUS * u[:, 1]).astype(np.int64)
    raise ValueError(f"unknown dataset '{name}'")


# ------------------------------------------------------------- normalization


@dataclass(frozen=True)
class IndexNormalization:
    """Per-dimension affine map of raw indices onto [0, 1]."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValueError("min and max must have the same length")
        for a, b in zip(self.lo, self.hi):
            if not a < b:
                raise ValueError(f"degenerate index dimension: min {a} >= max {b}")

    @classmethod
    def fit(cls, u) -> "IndexNormalization":
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        lo, hi = u.min(axis=0), u.max(axis=0)
        return cls(tuple(float(v) for v in lo), tuple(float(v) for v in hi))

    @property
    def d_u(self) -> int:
        return len(self.lo)

    def transform(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if u.ndim == 1:
            u = u.reshape(-1, self.d_u)
        if u.shape[1] != self.d_u:
            raise ValueError(f"index has {u.shape[1]} dims, normalization has {self.d_u}")
        lo, hi = np.array(self.lo), np.array(self.hi)
        return (u - lo) / (hi - lo)

    def inverse(self, u_norm) -> np.ndarray:
        lo, hi = np.array(self.lo), np.array(self.hi)
        return np.asarray(u_norm) * (hi - lo) + lo

    def to_text(self) -> str:
        return " ".join(f"{a!r}:{b!r}" for a, b in zip(self.lo, self.hi))

    @classmethod
    def from_text(cls, text: str) -> "IndexNormalization":
        pairs = [p.split(":") for p in text.split()]
        if not pairs or any(len(p) != 2 for p in pairs):
            raise ValueError(f"bad normalization '{text}'")
        return cls(tuple(float(a) for a, _ in pairs), tuple(float(b) for _, b in pairs))


def normalize_index(dataset: Dataset, norm: IndexNormalization | None = None):
    """Return ``(normalization, dataset with normalized u)``, fitting over all rows by default."""
    norm = IndexNormalization.fit(dataset.u) if norm is None else norm
    view = Dataset(dataset.x, norm.transform(dataset.u), dataset.y, dataset.is_source, dataset.name, dataset.n_classes)
    return norm, view


# ----------------------------------------------------------------------- CSV


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_csv(dataset: Dataset, path) -> None:
    header = [f"x{i + 1}" for i in range(dataset.d_x)] + [f"u{i + 1}" for i in range(dataset.d_u)] + ["y", "split"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            y = "" if dataset.y[i] == UNLABELED else str(int(dataset.y[i]))
            w.writerow(
                [_fmt(v) for v in dataset.x[i]] + [_fmt(v) for v in dataset.u[i]] + [y, dataset.split_of(i)]
            )


def _parse_header(header: list[str]) -> tuple[int, int]:
    if len(header) < 4 or header[-2:] != ["y", "split"]:
        raise DataFormatError("header must be x1..xd,u1..ud,y,split")
    cols = header[:-2]
    d_x = sum(1 for c in cols if c.startswith("x"))
    d_u = len(cols) - d_x
    expected = [f"x{i + 1}" for i in range(d_x)] + [f"u{i + 1}" for i in range(d_u)]
    if d_x == 0 or d_u == 0 or cols != expected:
        raise DataFormatError(f"header mismatch: {','.join(header)}")
    return d_x, d_u


def read_csv(path, name: str | None = None, n_classes: int | None = None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: header missing (empty file)")
    d_x, d_u = _parse_header(rows[0])
    xs, us, ys, src = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d_x + d_u + 2:
            raise DataFormatError(f"line {lineno}: expected {d_x + d_u + 2} fields, got {len(row)}")
        try:
            vals = [float(v) for v in row[: d_x + d_u]]
            y = UNLABELED if row[-2] == "" else int(row[-2])
        except ValueError as exc:
            raise DataFormatError(f"line {lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise DataFormatError(f"line {lineno}: non-finite value")
        if row[-1] not in SPLITS:
            raise DataFormatError(f"line {lineno}: unknown split tag '{row[-1]}'")
        if y < UNLABELED:
            raise DataFormatError(f"line {lineno}: negative label")
        xs.append(vals[:d_x])
        us.append(vals[d_x:])
        ys.append(y)
        src.append(row[-1] == "source")
    y_arr = np.array(ys, dtype=np.int64)
    if n_classes is None:
        n_classes = max(2, int(y_arr.max()) + 1 if len(y_arr) else 2)
    if name is None:
        name = str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return Dataset(
        np.array(xs, dtype=np.float64).reshape(-1, d_x),
        np.array(us, dtype=np.float64).reshape(-1, d_u),
        y_arr,
        np.array(src, dtype=bool),
        name,
        n_classes,
    )
