"""Per-domain accuracy, independence probe, boundary export and the experiment runner."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .datasets import UNLABELED, Dataset, generate, read_csv
from .models import decide, softmax_rows
from .trainer import Checkpoint, ExperimentConfig, save_checkpoint, train, write_history


class StageError(RuntimeError):
    """A run_experiment stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def _check_dims(ckpt: Checkpoint, x: np.ndarray, u: np.ndarray) -> None:
    if x.shape[1] != ckpt.d_x or u.shape[1] != ckpt.d_u:
        raise ValueError(
            f"checkpoint expects d_x={ckpt.d_x}, d_u={ckpt.d_u}; data has d_x={x.shape[1]}, d_u={u.shape[1]}"
        )


def encode_rows(ckpt: Checkpoint, x, u) -> np.ndarray:
    """Frozen encodings z for raw ``x`` and raw indices ``u``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    u = np.asarray(u, dtype=np.float64).reshape(len(x), -1)
    _check_dims(ckpt, x, u)
    with ad.no_grad():
        return ckpt.to_models().encoder(x, ckpt.normalization.transform(u)).data


def class_logits(ckpt: Checkpoint, x, u) -> np.ndarray:
    models = ckpt.to_models()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    u = np.asarray(u, dtype=np.float64).reshape(len(x), -1)
    _check_dims(ckpt, x, u)
    with ad.no_grad():
        return models.predictor(models.encoder(x, ckpt.normalization.transform(u))).data


# ------------------------------------------------------------------ accuracy


class DomainRow(NamedTuple):
    u: tuple[float, ...]
    split: str
    n: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.n


@dataclass
class DomainAccuracyTable:
    rows: list[DomainRow]

    def _mean(self, split: str) -> float | None:
        n = sum(r.n for r in self.rows if r.split == split)
        if n == 0:
            return None
        return sum(r.correct for r in self.rows if r.split == split) / n

    @property
    def source_mean(self) -> float | None:
        return self._mean("source")

    @property
    def target_mean(self) -> float | None:
        return self._mean("target")

    def to_csv(self) -> str:
        d_u = len(self.rows[0].u) if self.rows else 1
        lines = [",".join([f"u{i + 1}" for i in range(d_u)] + ["split", "n", "correct", "accuracy"])]
        for r in self.rows:
            lines.append(",".join([_fmt(v) for v in r.u] + [r.split, str(r.n), str(r.correct), _fmt(r.accuracy)]))
        for split in ("source", "target"):
            mean = self._mean(split)
            if mean is not None:
                n = sum(r.n for r in self.rows if r.split == split)
                c = sum(r.correct for r in self.rows if r.split == split)
                lines.append(",".join([""] * d_u + [f"{split}-all", str(n), str(c), _fmt(mean)]))
        return "\n".join(lines) + "\n"


def accuracy_table(pred, y, u, is_source) -> DomainAccuracyTable:
    """Group labeled rows by exact index value; unlabeled rows are skipped."""
    pred, y = np.asarray(pred), np.asarray(y)
    u = np.asarray(u, dtype=np.float64).reshape(len(y), -1)
    is_source = np.asarray(is_source, dtype=bool)
    labeled = y != UNLABELED
    groups: dict[tuple, list[int]] = {}
    for i in np.flatnonzero(labeled):
        groups.setdefault((tuple(u[i]), bool(is_source[i])), []).append(i)
    rows = []
    for (key, src), idx in sorted(groups.items(), key=lambda kv: (not kv[0][1], kv[0][0])):
        idx = np.array(idx)
        rows.append(DomainRow(key, "source" if src else "target", len(idx), int((pred[idx] == y[idx]).sum())))
    return DomainAccuracyTable(rows)


def evaluate(ckpt: Checkpoint, dataset: Dataset) -> DomainAccuracyTable:
    """Frozen encode, predict and argmax per row, grouped by index level."""
    _check_dims(ckpt, dataset.x, dataset.u)
    if dataset.n_classes > ckpt.n_classes:
        raise ValueError(f"dataset has {dataset.n_classes} classes, checkpoint predicts {ckpt.n_classes}")
    pred = decide(class_logits(ckpt, dataset.x, dataset.u))
    return accuracy_table(pred, dataset.y, dataset.u, dataset.is_source)


# ------------------------------------------------------------------ boundary


class GridSpec(NamedTuple):
    x1_min: float
    x1_max: float
    x2_min: float
    x2_max: float
    resolution: int

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        parts = text.split(":")
        if len(parts) != 5:
            raise ValueError(f"grid must be X1MIN:X1MAX:X2MIN:X2MAX:RES, got '{text}'")
        try:
            spec = cls(*(float(p) for p in parts[:4]), int(parts[4]))
        except ValueError:
            raise ValueError(f"grid must be X1MIN:X1MAX:X2MIN:X2MAX:RES, got '{text}'") from None
        if spec.resolution < 1 or spec.x1_min > spec.x1_max or spec.x2_min > spec.x2_max:
            raise ValueError(f"empty grid '{text}'")
        return spec

    def points(self) -> np.ndarray:
        g1 = np.linspace(self.x1_min, self.x1_max, self.resolution)
        g2 = np.linspace(self.x2_min, self.x2_max, self.resolution)
        a, b = np.meshgrid(g1, g2, indexing="ij")
        return np.column_stack([a.ravel(), b.ravel()])


def export_boundary(ckpt: Checkpoint, grid: GridSpec, u_value) -> str:
    """CSV of predictions over a regular grid at one fixed raw index value."""
    if ckpt.d_x != 2:
        raise ValueError(f"boundary export needs d_x = 2, checkpoint has d_x = {ckpt.d_x}")
    u_row = np.atleast_1d(np.asarray(u_value, dtype=np.float64))
    if u_row.shape != (ckpt.d_u,):
        raise ValueError(f"index value must have {ckpt.d_u} components")
    pts = grid.points()
    logits = class_logits(ckpt, pts, np.tile(u_row, (len(pts), 1)))
    pred = decide(logits)
    prob1 = softmax_rows(logits)[:, 1]
    u_cols = ["u"] if ckpt.d_u == 1 else [f"u{i + 1}" for i in range(ckpt.d_u)]
    u_txt = [_fmt(v) for v in u_row]
    lines = [",".join(["x1", "x2", *u_cols, "pred", "prob1"])]
    for (a, b), p, q in zip(pts, pred, prob1):
        lines.append(",".join([_fmt(a), _fmt(b), *u_txt, str(int(p)), _fmt(q)]))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------- probe


@dataclass(frozen=True)
class ProbeReport:
    r2: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.r2))

    def to_csv(self) -> str:
        lines = ["dim,r2"] + [f"u{i + 1},{_fmt(v)}" for i, v in enumerate(self.r2)]
        return "\n".join(lines + [f"mean,{_fmt(self.mean)}"]) + "\n"


def probe_r2(z, u, ridge: float = 1e-6) -> ProbeReport:
    """R² of a ridge least-squares fit (with intercept) from ``z`` to each column of ``u``."""
    z = np.asarray(z, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64).reshape(len(z), -1)
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    n, d_z = z.shape
    if n < d_z + 1:
        raise ValueError(f"probe needs at least d_z + 1 = {d_z + 1} samples, got {n}")
    zc = z - z.mean(axis=0)
    uc = u - u.mean(axis=0)
    sst = (uc**2).sum(axis=0)
    if (sst <= 0).any():
        raise ValueError("index is constant in at least one dimension; R² undefined")
    gram = zc.T @ zc
    if ridge == 0 and np.linalg.matrix_rank(gram) < d_z:
        raise np.linalg.LinAlgError("rank-deficient encodings; use ridge > 0")
    beta = np.linalg.solve(gram + ridge * np.eye(d_z), zc.T @ uc)
    sse = ((uc - zc @ beta) ** 2).sum(axis=0)
    return ProbeReport(tuple(float(v) for v in 1.0 - sse / sst))


def probe_independence(ckpt: Checkpoint, dataset: Dataset, ridge: float = 1e-6) -> ProbeReport:
    """How well a linear probe recovers the normalized index from frozen encodings."""
    z = encode_rows(ckpt, dataset.x, dataset.u)
    return probe_r2(z, ckpt.normalization.transform(dataset.u), ridge)


# ---------------------------------------------------------------- experiment


@dataclass
class RunBundle:
    directory: Path
    checkpoint: Checkpoint
    table: DomainAccuracyTable
    probe: ProbeReport


BOUNDARY_RESOLUTION = 50


def run_dir(config: ExperimentConfig) -> Path:
    return Path(config.out_dir) / f"{config.dataset_name}-{config.method}-seed{config.seed}"


def load_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Training and evaluation sets; a CSV path is used for both, a generator gets an offset eval seed."""
    if config.dataset_path:
        data = read_csv(config.dataset_path, name=config.dataset_name)
        return data, data
    train_set = generate(config.dataset_name, config.seed, config.n_per_domain)
    eval_set = generate(config.dataset_name, config.seed + 1000, config.n_eval_per_domain)
    return train_set, eval_set


def boundary_grid(dataset: Dataset, resolution: int = BOUNDARY_RESOLUTION) -> GridSpec:
    lo = np.floor(dataset.x.min(axis=0)) - 1.0
    hi = np.ceil(dataset.x.max(axis=0)) + 1.0
    return GridSpec(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]), resolution)


def boundary_filename(u_value) -> str:
    return "boundary_u" + "_".join(f"{v:g}" for v in u_value) + ".csv"


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def run_experiment(config_path, progress: bool = False) -> RunBundle:
    """Load/generate data, train, evaluate and write one seed-named output directory."""
    stage = "config"
    try:
        config = ExperimentConfig.from_file(config_path)
        stage = "data"
        train_set, eval_set = load_datasets(config)
        stage = "train"
        result = train(config, train_set, progress=progress)
        ckpt = result.checkpoint
        stage = "evaluate"
        table = evaluate(ckpt, eval_set)
        stage = "probe"
        probe = probe_independence(ckpt, eval_set)
        stage = "write"
        out = run_dir(config)
        os.makedirs(out, exist_ok=True)
        _write(out / "config.txt", config.to_text())
        save_checkpoint(ckpt, out / "checkpoint.txt")
        write_history(result.history, out / "history.csv")
        _write(out / "accuracy.csv", table.to_csv())
        _write(out / "probe.csv", probe.to_csv())
        if eval_set.d_x == 2:
            stage = "boundary"
            grid = boundary_grid(eval_set)
            for level in eval_set.domains():
                _write(out / boundary_filename(level), export_boundary(ckpt, grid, level))
    except Exception as exc:
        raise StageError(stage, exc) from exc
    return RunBundle(out, ckpt, table, probe)
