"""Networks for the three players: encoder, predictor and discriminator heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VAR_FLOOR = 1e-4

DISCRIMINATOR_KINDS = ("point", "gaussian", "gmm", "categorical")


@dataclass
class Mlp:
    layer_sizes: list[int]
    weights: list[Tensor]
    biases: list[Tensor]
    activation: str = "relu"

    def __post_init__(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape}, expected {expected}")

    @property
    def in_features(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_features(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> list[Tensor]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params += [w, b]
        return params

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = np.zeros_like(p.data) if flag else None

    def __call__(self, x) -> Tensor:
        x = ad._as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"expected input of width {self.in_features}, got shape {x.shape}")
        act = ad.relu if self.activation == "relu" else ad.tanh
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.linear(h, w, b)
            if i < last:
                h = act(h)
        return h


def mlp_init(layer_sizes, activation: str = "relu", seed=0) -> Mlp:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise ValueError(f"need at least two positive layer sizes, got {layer_sizes}")
    if activation not in ("relu", "tanh"):
        raise ValueError(f"unknown activation '{activation}'")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(Tensor(rng.uniform(-a, a, size=(fan_in, fan_out)), requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return Mlp(sizes, weights, biases, activation)


@dataclass
class Encoder:
    """Maps ``concat(standardized x, u_normalized)`` to an encoding ``z``.

    ``x_shift``/``x_scale`` are fixed (not trained).  :meth:`folded_first_layer`
    absorbs them into the first layer so a plain MLP reproduces the encoder.
    """

    net: Mlp
    d_x: int
    d_u: int
    x_shift: np.ndarray | None = None
    x_scale: np.ndarray | None = None

    @property
    def d_z(self) -> int:
        return self.net.out_features

    def __post_init__(self):
        if self.net.in_features != self.d_x + self.d_u:
            raise ValueError("encoder input width must equal d_x + d_u")
        self.x_shift = np.zeros(self.d_x) if self.x_shift is None else np.asarray(self.x_shift, dtype=np.float64)
        self.x_scale = np.ones(self.d_x) if self.x_scale is None else np.asarray(self.x_scale, dtype=np.float64)
        if self.x_shift.shape != (self.d_x,) or self.x_scale.shape != (self.d_x,) or (self.x_scale <= 0).any():
            raise ValueError("x standardization must be d_x positive scales and d_x shifts")

    @property
    def standardizes(self) -> bool:
        return bool(self.x_shift.any() or (self.x_scale != 1.0).any())

    def folded_first_layer(self) -> tuple[np.ndarray, np.ndarray]:
        w = self.net.weights[0].data.copy()
        b = self.net.biases[0].data.copy()
        if self.standardizes:
            w_x = w[: self.d_x] / self.x_scale[:, None]
            b = b - (self.x_shift @ w_x)
            w[: self.d_x] = w_x
        return w, b

    def __call__(self, x, u_norm) -> Tensor:
        return encode(self, x, u_norm)


def encode(encoder: Encoder, x, u_norm) -> Tensor:
    x, u_norm = ad._as_tensor(x), ad._as_tensor(u_norm)
    if x.ndim != 2 or x.shape[1] != encoder.d_x:
        raise ValueError(f"x must be B x {encoder.d_x}, got {x.shape}")
    if u_norm.ndim != 2 or u_norm.shape[1] != encoder.d_u or len(u_norm) != len(x):
        raise ValueError(f"u must be {len(x)} x {encoder.d_u}, got {u_norm.shape}")
    if encoder.standardizes:
        x = ad.divide(ad.sub(x, encoder.x_shift), encoder.x_scale)
    return encoder.net(ad.concat([x, u_norm]))


@dataclass
class Predictor:
    net: Mlp

    @property
    def n_classes(self) -> int:
        return self.net.out_features

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("predictor needs at least two classes")

    def __call__(self, z) -> Tensor:
        return self.net(z)


def predict(predictor: Predictor, z) -> Tensor:
    """Class logits for a batch of encodings."""
    return predictor(z)


def decide(logits) -> np.ndarray:
    """Argmax per row; ``np.argmax`` already breaks ties toward the lowest index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(arr, axis=1)


def softmax_rows(logits) -> np.ndarray:
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    shifted = arr - arr.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class GaussianOutput(NamedTuple):
    mu: Tensor
    var: Tensor


class GmmOutput(NamedTuple):
    pi: Tensor
    mu: Tensor
    var: Tensor


def head_width(kind: str, d_u: int, gmm_k: int = 3, bins: int = 5) -> int:
    if kind == "point":
        return d_u
    if kind == "gaussian":
        return 2 * d_u
    if kind == "gmm":
        return gmm_k * (1 + 2 * d_u)
    if kind == "categorical":
        return bins
    raise ValueError(f"unknown discriminator kind '{kind}'")


@dataclass
class Discriminator:
    kind: str
    net: Mlp
    d_u: int
    gmm_k: int = 3
    bins: int = 5
    var_floor: float = VAR_FLOOR

    def __post_init__(self):
        if self.net.out_features != head_width(self.kind, self.d_u, self.gmm_k, self.bins):
            raise ValueError(f"{self.kind} head width mismatch: {self.net.out_features}")
        if self.var_floor <= 0:
            raise ValueError("variance floor must be positive")

    def __call__(self, z):
        return disc_forward(self, z)


def _positive_var(raw: Tensor, floor: float) -> Tensor:
    return ad.add(ad.softplus(raw), floor)


def disc_forward(disc: Discriminator, z):
    """Point -> index estimate; Gaussian -> (mu, var); GMM -> (pi, mu, var); categorical -> logits."""
    out = disc.net(z)
    d = disc.d_u
    if disc.kind in ("point", "categorical"):
        return out
    if disc.kind == "gaussian":
        mu = ad.slice_last(out, 0, d)
        var = _positive_var(ad.slice_last(out, d, 2 * d), disc.var_floor)
        return GaussianOutput(mu, var)
    k = disc.gmm_k
    b = out.shape[0]
    pi = ad.softmax(ad.slice_last(out, 0, k))
    mu = ad.reshape(ad.slice_last(out, k, k + k * d), (b, k, d))
    raw = ad.reshape(ad.slice_last(out, k + k * d, k + 2 * k * d), (b, k, d))
    return GmmOutput(pi, mu, _positive_var(raw, disc.var_floor))


@dataclass
class ModelBundle:
    encoder: Encoder
    predictor: Predictor
    discriminator: Discriminator | None = None
    extras: dict = field(default_factory=dict)

    def networks(self) -> list[Mlp]:
        nets = [self.encoder.net, self.predictor.net]
        if self.discriminator is not None:
            nets.append(self.discriminator.net)
        return nets


def standardization(x) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and standard deviation; constant features get scale 1."""
    x = np.asarray(x, dtype=np.float64)
    shift = x.mean(axis=0)
    scale = x.std(axis=0)
    return shift, np.where(scale > 0, scale, 1.0)


def build_models(
    d_x: int,
    d_u: int,
    n_classes: int,
    disc_kind: str | None,
    d_z: int = 20,
    hidden: int = 100,
    gmm_k: int = 3,
    bins: int = 5,
    var_floor: float = VAR_FLOOR,
    seed: int = 0,
    x_shift=None,
    x_scale=None,
) -> ModelBundle:
    """Toy-scale default architecture with independent per-network seeds.

    Seeds for E and F do not depend on the discriminator kind, so every
    method starting from the same seed shares its encoder/predictor init.
    """
    s_enc, s_pred, s_disc = np.random.SeedSequence(seed).spawn(3)
    enc = Encoder(mlp_init([d_x + d_u, hidden, hidden, d_z], "relu", s_enc), d_x, d_u, x_shift, x_scale)
    pred = Predictor(mlp_init([d_z, hidden, n_classes], "relu", s_pred))
    disc = None
    if disc_kind is not None:
        width = head_width(disc_kind, d_u, gmm_k, bins)
        disc = Discriminator(
            disc_kind, mlp_init([d_z, hidden, hidden, width], "relu", s_disc), d_u, gmm_k, bins, var_floor
        )
    return ModelBundle(enc, pred, disc)
