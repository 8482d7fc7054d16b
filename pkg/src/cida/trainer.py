"""Alternating minimax training, batch sampling and checkpoint persistence."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, NonFiniteError, Tensor
from .datasets import Dataset, IndexNormalization
from .losses import domain_loss, prediction_loss
from .models import (
    VAR_FLOOR,
    Discriminator,
    Encoder,
    ModelBundle,
    Predictor,
    build_models,
    head_width,
    mlp_init,
    standardization,
)

logger = logging.getLogger(__name__)

METHODS = {
    "source-only": None,
    "cida": "point",
    "pcida": "gaussian",
    "pcida-gmm": "gmm",
    "categorical-baseline": "categorical",
}

CKPT_MAGIC = "CIDA-CKPT"
CKPT_VERSION = "v1"
HISTORY_EVERY = 100


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class ExperimentConfig:
    dataset_name: str = "circle"
    dataset_path: str = ""
    method: str = "cida"
    lambda_d: float = 2.0
    lr: float = 1e-4
    iterations: int = 20000
    batch_source: int = 32
    batch_target: int = 32
    seed: int = 0
    d_z: int = 20
    gmm_k: int = 3
    bins: int = 5
    var_floor: float = VAR_FLOOR
    index_normalization: str = "auto"
    n_per_domain: int = 100
    n_eval_per_domain: int = 1000
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method '{self.method}' (choose from {sorted(METHODS)})")
        if self.lambda_d < 0:
            raise ConfigError("lambda_d must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_source < 1 or self.batch_target < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.d_z < 1 or self.gmm_k < 1 or self.bins < 2:
            raise ConfigError("d_z and gmm_k must be >= 1, bins >= 2")
        if self.var_floor <= 0:
            raise ConfigError("var_floor must be > 0")
        if self.n_per_domain < 1 or self.n_eval_per_domain < 1:
            raise ConfigError("per-domain sample counts must be >= 1")
        self.normalization()

    def normalization(self) -> IndexNormalization | None:
        if self.index_normalization.strip() in ("", "auto"):
            return None
        try:
            return IndexNormalization.from_text(self.index_normalization.replace(",", " "))
        except ValueError as exc:
            raise ConfigError(f"index_normalization: {exc}") from None

    @property
    def disc_kind(self) -> str | None:
        return METHODS[self.method]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        """Parse flat ``key = value`` lines; unknown keys are errors."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key '{key}'")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key '{key}'")
            kind = types[key]
            try:
                values[key] = int(val) if kind == "int" else float(val) if kind == "float" else val
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value for {key}: '{val}'") from None
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())


# ------------------------------------------------------------------ batches


class Batch(NamedTuple):
    rows: np.ndarray
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray | None


def sample_batch(dataset: Dataset, split: str, n: int, rng: np.random.Generator, u_norm=None) -> Batch:
    """Draw ``n`` rows uniformly with replacement from a split.

    Only source batches carry labels; batches touching target rows never do.
    ``u_norm`` optionally supplies normalized indices for every row.
    """
    pool = dataset.split_indices(split)
    if len(pool) == 0:
        raise ValueError(f"split '{split}' is empty")
    rows = pool[rng.integers(0, len(pool), size=n)]
    u = dataset.u if u_norm is None else u_norm
    y = dataset.y[rows] if split == "source" else None
    return Batch(rows, dataset.x[rows], u[rows], y)


def sample_both(dataset: Dataset, n_source: int, n_target: int, rng: np.random.Generator, u_norm=None) -> Batch:
    """Unlabeled batch of ``n_source`` source rows followed by ``n_target`` target rows."""
    src = sample_batch(dataset, "source", n_source, rng, u_norm)
    tgt = sample_batch(dataset, "target", n_target, rng, u_norm)
    return Batch(
        np.concatenate([src.rows, tgt.rows]), np.concatenate([src.x, tgt.x]), np.concatenate([src.u, tgt.u]), None
    )


def category_bins(dataset: Dataset, bins: int) -> np.ndarray:
    """Per-row bin labels: source rows are bin 0, targets split by index quantiles.

    Multi-dimensional indices are binned on their first dimension.
    """
    labels = np.zeros(len(dataset), dtype=np.int64)
    tgt = dataset.split_indices("target")
    if len(tgt) == 0 or bins < 2:
        return labels
    key = dataset.u[tgt, 0]
    edges = np.quantile(key, np.linspace(0.0, 1.0, bins)[1:-1])
    labels[tgt] = 1 + np.searchsorted(edges, key, side="right")
    return labels


# ------------------------------------------------------------------ training


@dataclass
class TrainState:
    models: ModelBundle
    opt_ef: Adam
    opt_d: Adam | None
    bin_labels: np.ndarray | None = None


def make_state(models: ModelBundle, lr: float) -> TrainState:
    ef = models.encoder.net.parameters() + models.predictor.net.parameters()
    opt_d = Adam(models.discriminator.net.parameters(), lr=lr) if models.discriminator else None
    return TrainState(models, Adam(ef, lr=lr), opt_d)


def _set_flag(params, flag: bool) -> None:
    for p in params:
        p.requires_grad = flag


def _zero(params) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def train_iteration(state: TrainState, batch_src: Batch, batch_both: Batch, config: ExperimentConfig):
    """One discriminator step followed by one encoder/predictor step.

    Returns ``(V_p, V_d)`` where ``V_d`` is measured after the discriminator
    update (``None`` for source-only).
    """
    if batch_src.y is None:
        raise ValueError("the source batch must carry labels")
    models = state.models
    enc, pred, disc = models.encoder, models.predictor, models.discriminator
    kind = config.disc_kind if disc is not None else None
    bins_both = None if state.bin_labels is None else state.bin_labels[batch_both.rows]
    ef_params = state.opt_ef.params

    if kind is not None:
        d_params = state.opt_d.params
        with ad.no_grad():
            z_both = enc(batch_both.x, batch_both.u).data
        _set_flag(d_params, True)
        _zero(d_params)
        with ad.Tape() as tape:
            loss_d = domain_loss(kind, disc(Tensor(z_both)), batch_both.u, bins_both)
        tape.backward(loss_d)
        state.opt_d.step()
        _set_flag(d_params, False)

    n_src = len(batch_src.rows)
    n_all = n_src + len(batch_both.rows)
    x_all = np.concatenate([batch_src.x, batch_both.x])
    u_all = np.concatenate([batch_src.u, batch_both.u])
    lam = config.lambda_d if kind is not None else 0.0
    _zero(ef_params)
    v_d = None
    with ad.Tape() as tape:
        z = enc(x_all, u_all)
        v_p = prediction_loss(pred(ad.select_rows(z, np.arange(n_src))), batch_src.y)
        if kind is not None and lam > 0:
            loss_d = domain_loss(kind, disc(ad.select_rows(z, np.arange(n_src, n_all))), batch_both.u, bins_both)
            v_d = float(loss_d.data)
            objective = ad.sub(v_p, ad.multiply(loss_d, lam))
        else:
            objective = v_p
    if kind is not None and v_d is None:
        with ad.no_grad():
            z_both = Tensor(z.data[n_src:])
            v_d = float(domain_loss(kind, disc(z_both), batch_both.u, bins_both).data)
    tape.backward(objective)
    state.opt_ef.step()
    return float(v_p.data), v_d


def grl_iteration(state: TrainState, batch_src: Batch, batch_both: Batch, config: ExperimentConfig):
    """Single-pass alternative to :func:`train_iteration` using gradient reversal."""
    models = state.models
    kind = config.disc_kind
    if kind is None:
        raise ValueError("gradient reversal needs a discriminator")
    bins_both = None if state.bin_labels is None else state.bin_labels[batch_both.rows]
    d_params = state.opt_d.params
    _set_flag(d_params, True)
    _zero(d_params)
    _zero(state.opt_ef.params)
    n_src = len(batch_src.rows)
    n_all = n_src + len(batch_both.rows)
    with ad.Tape() as tape:
        z = models.encoder(np.concatenate([batch_src.x, batch_both.x]), np.concatenate([batch_src.u, batch_both.u]))
        v_p = prediction_loss(models.predictor(ad.select_rows(z, np.arange(n_src))), batch_src.y)
        z_rev = ad.grad_reverse(ad.select_rows(z, np.arange(n_src, n_all)), config.lambda_d)
        loss_d = domain_loss(kind, models.discriminator(z_rev), batch_both.u, bins_both)
        total = ad.add(v_p, loss_d)
    tape.backward(total)
    state.opt_d.step()
    state.opt_ef.step()
    _set_flag(d_params, False)
    return float(v_p.data), float(loss_d.data)


# ---------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    method: str
    manifest: list[list[int]]
    lambda_d: float
    lr: float
    seed: int
    d_z: int
    var_floor: float
    normalization: IndexNormalization
    params: np.ndarray
    final_v_p: float | None = field(default=None, compare=False)
    final_v_d: float | None = field(default=None, compare=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.size != manifest_count(self.manifest):
            raise CheckpointError(
                f"manifest expects {manifest_count(self.manifest)} values, got {self.params.size}"
            )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        same = (
            self.method == other.method
            and self.manifest == other.manifest
            and self.lambda_d == other.lambda_d
            and self.lr == other.lr
            and self.seed == other.seed
            and self.d_z == other.d_z
            and self.var_floor == other.var_floor
            and self.normalization == other.normalization
        )
        return same and self.params.tobytes() == other.params.tobytes()

    @property
    def d_u(self) -> int:
        return self.normalization.d_u

    @property
    def d_x(self) -> int:
        return self.manifest[0][0] - self.d_u

    @property
    def n_classes(self) -> int:
        return self.manifest[1][-1]

    def to_models(self) -> ModelBundle:
        nets = []
        offset = 0
        for sizes in self.manifest:
            net = mlp_init(sizes, "relu", 0)
            for p in net.parameters():
                n = p.data.size
                p.data = self.params[offset : offset + n].reshape(p.data.shape).copy()
                offset += n
            net.set_requires_grad(False)
            nets.append(net)
        enc = Encoder(nets[0], self.d_x, self.d_u)
        pred = Predictor(nets[1])
        disc = None
        kind = METHODS[self.method]
        if kind is not None and len(nets) > 2:
            width = nets[2].out_features
            gmm_k = width // (1 + 2 * self.d_u) if kind == "gmm" else 3
            disc = Discriminator(kind, nets[2], self.d_u, gmm_k, width, self.var_floor)
        return ModelBundle(enc, pred, disc)


def manifest_count(manifest) -> int:
    return sum(a * b + b for sizes in manifest for a, b in zip(sizes[:-1], sizes[1:]))


def flatten_models(models: ModelBundle) -> tuple[list[list[int]], np.ndarray]:
    """Layer manifest and flat parameters; encoder input standardization is folded in."""
    manifest, chunks = [], []
    for net in models.networks():
        manifest.append(list(net.layer_sizes))
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            if net is models.encoder.net and i == 0:
                w_arr, b_arr = models.encoder.folded_first_layer()
            else:
                w_arr, b_arr = w.data, b.data
            chunks += [w_arr.ravel(), b_arr.ravel()]
    return manifest, np.concatenate(chunks)


def make_checkpoint(config: ExperimentConfig, models: ModelBundle, norm: IndexNormalization, v_p=None, v_d=None):
    manifest, params = flatten_models(models)
    return Checkpoint(
        config.method, manifest, config.lambda_d, config.lr, config.seed, config.d_z,
        config.var_floor, norm, params, v_p, v_d,
    )


def checkpoint_text(ckpt: Checkpoint) -> str:
    lines = [
        f"{CKPT_MAGIC} {CKPT_VERSION}",
        ckpt.method,
        ";".join(" ".join(str(s) for s in sizes) for sizes in ckpt.manifest),
        f"{ckpt.lambda_d!r} {ckpt.lr!r} {ckpt.seed} {ckpt.d_z} {ckpt.var_floor!r}",
        ckpt.normalization.to_text(),
    ]
    lines += [f"{v:.17g}" for v in ckpt.params]
    return "\n".join(lines) + "\n"


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "w") as fh:
        fh.write(checkpoint_text(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CheckpointError("line 1: empty checkpoint file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != CKPT_MAGIC:
        raise CheckpointError(f"line 1: not a checkpoint header: '{lines[0]}'")
    if head[1] != CKPT_VERSION:
        raise CheckpointError(f"line 1: unsupported checkpoint version {head[1]} (reader is {CKPT_VERSION})")
    if len(lines) < 5:
        raise CheckpointError(f"line {len(lines) + 1}: truncated header")
    method = lines[1].strip()
    if method not in METHODS:
        raise CheckpointError(f"line 2: unknown method '{method}'")
    try:
        manifest = [[int(s) for s in part.split()] for part in lines[2].split(";")]
    except ValueError:
        raise CheckpointError("line 3: bad layer manifest") from None
    if len(manifest) < 2 or any(len(m) < 2 or min(m) < 1 for m in manifest):
        raise CheckpointError("line 3: bad layer manifest")
    fields4 = lines[3].split()
    if len(fields4) != 5:
        raise CheckpointError("line 4: expected lambda_d lr seed d_z var_floor")
    try:
        lambda_d, lr = float(fields4[0]), float(fields4[1])
        seed, d_z = int(fields4[2]), int(fields4[3])
        var_floor = float(fields4[4])
    except ValueError:
        raise CheckpointError("line 4: could not parse hyperparameters") from None
    try:
        norm = IndexNormalization.from_text(lines[4])
    except ValueError as exc:
        raise CheckpointError(f"line 5: {exc}") from None
    body = [ln for ln in lines[5:]]
    expected = manifest_count(manifest)
    if len(body) != expected:
        raise CheckpointError(f"manifest expects {expected} parameter values, file has {len(body)}")
    values = np.empty(expected)
    for i, ln in enumerate(body):
        try:
            values[i] = float(ln)
        except ValueError:
            raise CheckpointError(f"line {i + 6}: bad parameter value '{ln}'") from None
    return Checkpoint(method, manifest, lambda_d, lr, seed, d_z, var_floor, norm, values)


# ----------------------------------------------------------------- top level


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[tuple[int, float, float | None]]
    models: ModelBundle


def initial_models(config: ExperimentConfig, dataset: Dataset) -> ModelBundle:
    shift, scale = standardization(dataset.x)
    return build_models(
        dataset.d_x, dataset.d_u, dataset.n_classes, config.disc_kind, d_z=config.d_z,
        gmm_k=config.gmm_k, bins=config.bins, var_floor=config.var_floor, seed=config.seed,
        x_shift=shift, x_scale=scale,
    )


def train(config: ExperimentConfig, dataset: Dataset, progress: bool = False) -> TrainResult:
    """Run ``config.iterations`` alternating updates; deterministic in ``config.seed``."""
    if len(dataset.split_indices("source")) == 0:
        raise ValueError("dataset has no source rows")
    if config.method != "source-only" and len(dataset.split_indices("target")) == 0:
        raise ValueError("dataset has no target rows")
    norm = config.normalization() or IndexNormalization.fit(dataset.u)
    if norm.d_u != dataset.d_u:
        raise ConfigError("index_normalization dimension does not match the dataset")
    u_norm = norm.transform(dataset.u)
    models = initial_models(config, dataset)
    state = make_state(models, config.lr)
    if config.disc_kind == "categorical":
        state.bin_labels = category_bins(dataset, config.bins)
    rng = np.random.default_rng([config.seed, 1])
    history = []
    v_p = v_d = None
    for it in range(1, config.iterations + 1):
        b_src = sample_batch(dataset, "source", config.batch_source, rng, u_norm)
        if config.method == "source-only" and len(dataset.split_indices("target")) == 0:
            b_both = sample_batch(dataset, "source", config.batch_source + config.batch_target, rng, u_norm)
        else:
            b_both = sample_both(dataset, config.batch_source, config.batch_target, rng, u_norm)
        try:
            v_p, v_d = train_iteration(state, b_src, b_both, config)
        except (NonFiniteError, ZeroDivisionError) as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}") from exc
        if it % HISTORY_EVERY == 0:
            history.append((it, v_p, v_d))
            if progress:
                logger.info("iter %d  V_p=%.4f  V_d=%s", it, v_p, "-" if v_d is None else f"{v_d:.4f}")
    ckpt = make_checkpoint(config, models, norm, v_p, v_d)
    return TrainResult(ckpt, history, models)


def history_csv(history) -> str:
    out = ["iteration,V_p,V_d"]
    for it, v_p, v_d in history:
        out.append(f"{it},{v_p:.17g}," + ("" if v_d is None else f"{v_d:.17g}"))
    return "\n".join(out) + "\n"


def write_history(history, path) -> None:
    with open(path, "w") as fh:
        fh.write(history_csv(history))
