"""Scalar objectives of the adversarial game.

All losses reduce by the batch mean, so ``lambda_d`` does not depend on the
batch size.  Multi-dimensional indices use diagonal terms summed over the
index dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _labels(labels, n_rows: int, n_classes: int, what: str) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.shape != (n_rows,):
        raise ValueError(f"{what}: expected {n_rows} labels, got shape {lab.shape}")
    if n_rows == 0:
        raise ValueError(f"{what}: empty batch")
    if not np.issubdtype(lab.dtype, np.integer):
        if not np.all(lab == np.round(lab)):
            raise ValueError(f"{what}: labels must be integers")
        lab = lab.astype(np.int64)
    if lab.min() < 0 or lab.max() >= n_classes:
        raise ValueError(f"{what}: label out of range [0, {n_classes})")
    return lab


def cross_entropy(logits, labels, what: str = "cross_entropy") -> Tensor:
    logits = ad._as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError(f"{what}: logits must be B x C")
    b, c = logits.shape
    lab = _labels(labels, b, c, what)
    onehot = np.zeros((b, c))
    onehot[np.arange(b), lab] = 1.0
    picked = ad.tsum(ad.multiply(ad.log_softmax(logits), onehot), axis=1)
    return ad.negate(ad.mean(picked))


def prediction_loss(logits, labels) -> Tensor:
    """Mean cross-entropy of the predictor on a labeled (source) batch."""
    return cross_entropy(logits, labels, "prediction_loss")


def categorical_domain_loss(bin_logits, bin_labels) -> Tensor:
    """Cross-entropy of a discriminator that classifies index bins."""
    return cross_entropy(bin_logits, bin_labels, "categorical_domain_loss")


def _match(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def l2_domain_loss(u_hat, u) -> Tensor:
    u_hat, u = ad._as_tensor(u_hat), ad._as_tensor(u)
    _match(u_hat, u, "l2_domain_loss")
    return ad.mean(ad.tsum(ad.square(ad.sub(u_hat, u)), axis=-1))


def gaussian_nll_loss(mu, var, u) -> Tensor:
    """Gaussian NLL without the ``0.5 * log(2 pi)`` constant."""
    mu, var, u = ad._as_tensor(mu), ad._as_tensor(var), ad._as_tensor(u)
    _match(mu, u, "gaussian_nll_loss")
    _match(var, u, "gaussian_nll_loss")
    if (var.data <= 0).any():
        raise ValueError("gaussian_nll_loss: variance must be positive")
    sq = ad.square(ad.sub(mu, u))
    per_dim = ad.add(ad.divide(sq, ad.multiply(var, 2.0)), ad.multiply(ad.log(var), 0.5))
    return ad.mean(ad.tsum(per_dim, axis=-1))


def gmm_nll_loss(pi, mu, var, u, atol: float = 1e-9) -> Tensor:
    """Full (normalized) NLL of a diagonal Gaussian mixture.

    ``pi`` is B x K, ``mu`` and ``var`` are B x K x d_u and ``u`` is B x d_u.
    """
    pi, mu, var, u = (ad._as_tensor(t) for t in (pi, mu, var, u))
    if pi.ndim != 2 or mu.ndim != 3 or mu.shape[:2] != pi.shape or var.shape != mu.shape:
        raise ValueError(f"gmm_nll_loss: bad shapes pi {pi.shape}, mu {mu.shape}, var {var.shape}")
    if u.shape != (mu.shape[0], mu.shape[2]):
        raise ValueError(f"gmm_nll_loss: u shape {u.shape} does not match mu {mu.shape}")
    if (pi.data < 0).any() or np.abs(pi.data.sum(axis=1) - 1.0).max(initial=0.0) > atol:
        raise ValueError("gmm_nll_loss: mixture weights must be a probability vector per row")
    if (var.data <= 0).any():
        raise ValueError("gmm_nll_loss: variance must be positive")
    b, k, d = mu.shape
    diff = ad.sub(mu, ad.reshape(u, (b, 1, d)))
    quad = ad.divide(ad.square(diff), var)
    per_dim = ad.add(ad.add(quad, ad.log(var)), math.log(2.0 * math.pi))
    log_comp = ad.multiply(ad.tsum(per_dim, axis=-1), -0.5)
    return ad.negate(ad.mean(ad.logsumexp(log_comp, weights=pi)))


@dataclass(frozen=True)
class ValueTerms:
    v_p: float
    v_d: float
    lambda_d: float

    @property
    def encoder_objective(self) -> float:
        return self.v_p - self.lambda_d * self.v_d

    @property
    def discriminator_objective(self) -> float:
        return self.v_d


def value_terms(v_p: float, v_d: float, lambda_d: float) -> ValueTerms:
    """Split the minimax value into the encoder's and discriminator's objectives."""
    if lambda_d < 0:
        raise ValueError("lambda_d must be non-negative")
    return ValueTerms(float(v_p), float(v_d), float(lambda_d))


def domain_loss(disc_kind: str, head_out, u, bin_labels=None) -> Tensor:
    """Dispatch to the domain loss matching a discriminator head."""
    if disc_kind == "point":
        return l2_domain_loss(head_out, u)
    if disc_kind == "gaussian":
        return gaussian_nll_loss(head_out.mu, head_out.var, u)
    if disc_kind == "gmm":
        return gmm_nll_loss(head_out.pi, head_out.mu, head_out.var, u)
    if disc_kind == "categorical":
        return categorical_domain_loss(head_out, bin_labels)
    raise ValueError(f"unknown discriminator kind '{disc_kind}'")


@dataclass(frozen=True)
class GradResult:
    name: str
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} max_rel_err={self.max_rel_error:.3e} tol={self.tol:g}"


def _gmm_from_flat(flat: Tensor, b: int, k: int, d: int):
    # free parameters -> (pi, mu, var) so every probe point is a valid mixture
    logits = ad.reshape(ad.slice_last(flat, 0, b * k), (b, k))
    mu = ad.reshape(ad.slice_last(flat, b * k, b * k + b * k * d), (b, k, d))
    log_var = ad.reshape(ad.slice_last(flat, b * k + b * k * d, b * k + 2 * b * k * d), (b, k, d))
    return ad.softmax(logits), mu, ad.exp(log_var)


def _loss_cases(rng: np.random.Generator, b: int = 4, d: int = 2):
    u = rng.normal(size=(b, d))
    labels = rng.integers(0, 3, size=b)
    yield "l2_domain_loss", b * d, lambda p: l2_domain_loss(ad.reshape(p, (b, d)), u)
    yield "l2_domain_loss[u]", b * d, lambda p: l2_domain_loss(u, ad.reshape(p, (b, d)))

    def gauss(p):
        mu = ad.reshape(ad.slice_last(p, 0, b * d), (b, d))
        var = ad.exp(ad.reshape(ad.slice_last(p, b * d, 2 * b * d), (b, d)))
        return gaussian_nll_loss(mu, var, u)

    yield "gaussian_nll_loss", 2 * b * d, gauss
    for k in (1, 2, 3):
        n = b * k + 2 * b * k * d

        def gmm(p, k=k):
            return gmm_nll_loss(*_gmm_from_flat(p, b, k, d), u)

        yield f"gmm_nll_loss[K={k}]", n, gmm
    yield "cross_entropy", b * 3, lambda p: cross_entropy(ad.reshape(p, (b, 3)), labels)


def loss_gradient_suite(n_points: int = 50, step: float = 1e-6, tol: float = 1e-5, seed: int = 0) -> list[GradResult]:
    """Central-difference check of every composite loss at random smooth points."""
    rng = np.random.default_rng(seed)
    results = []
    for name, size, fn in _loss_cases(rng):
        worst = 0.0
        for _ in range(n_points):
            worst = max(worst, ad.grad_check(fn, rng.normal(scale=0.8, size=size), step))
        results.append(GradResult(name, worst, tol))
    return results
