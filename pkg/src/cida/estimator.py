"""scikit-learn style wrapper around the trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.metrics import accuracy_score
from sklearn.utils.validation import check_array, check_is_fitted

from .datasets import UNLABELED, Dataset
from .evaluation import class_logits, encode_rows
from .models import VAR_FLOOR, softmax_rows
from .trainer import METHODS, ExperimentConfig, train


class CIDAClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Domain-adaptive classifier conditioned on a continuous domain index.

    ``fit(X, y, domain)`` treats rows with ``y == -1`` as unlabeled target
    rows; every other row is a labeled source row.  ``domain`` is the raw
    index, shape ``(n,)`` or ``(n, d_u)``, and must be passed to every
    prediction method as well.
    """

    def __init__(
        self,
        method: str = "cida",
        lambda_d: float = 2.0,
        lr: float = 1e-4,
        iterations: int = 20000,
        batch_source: int = 32,
        batch_target: int = 32,
        d_z: int = 20,
        gmm_k: int = 3,
        bins: int = 5,
        var_floor: float = VAR_FLOOR,
        random_state: int = 0,
    ):
        self.method = method
        self.lambda_d = lambda_d
        self.lr = lr
        self.iterations = iterations
        self.batch_source = batch_source
        self.batch_target = batch_target
        self.d_z = d_z
        self.gmm_k = gmm_k
        self.bins = bins
        self.var_floor = var_floor
        self.random_state = random_state

    def _config(self) -> ExperimentConfig:
        if self.method not in METHODS:
            raise ValueError(f"unknown method '{self.method}'")
        return ExperimentConfig(
            dataset_name="estimator", method=self.method, lambda_d=float(self.lambda_d), lr=float(self.lr),
            iterations=int(self.iterations), batch_source=int(self.batch_source),
            batch_target=int(self.batch_target), seed=int(self.random_state), d_z=int(self.d_z),
            gmm_k=int(self.gmm_k), bins=int(self.bins), var_floor=float(self.var_floor),
        )

    @staticmethod
    def _domain(domain, n: int) -> np.ndarray:
        if domain is None:
            raise ValueError("domain indices are required")
        u = check_array(domain, ensure_2d=False, dtype=np.float64)
        u = u.reshape(-1, 1) if u.ndim == 1 else u
        if len(u) != n:
            raise ValueError(f"domain has {len(u)} rows, X has {n}")
        return u

    def fit(self, X, y, domain=None):
        config = self._config()
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ValueError("y must be a 1-d array with one entry per row of X")
        u = self._domain(domain, len(X))
        labeled = y != UNLABELED
        if not labeled.any():
            raise ValueError("at least one labeled (source) row is required")
        self.classes_, codes = np.unique(y[labeled], return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes among labeled rows")
        y_int = np.full(len(X), UNLABELED, dtype=np.int64)
        y_int[labeled] = codes
        data = Dataset(X, u, y_int, labeled, "estimator", len(self.classes_))
        result = train(config, data)
        self.checkpoint_ = result.checkpoint
        self.history_ = result.history
        self.n_features_in_ = X.shape[1]
        self.n_domain_dims_ = u.shape[1]
        return self

    def _inputs(self, X, domain):
        check_is_fitted(self, "checkpoint_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X, self._domain(domain, len(X))

    def decision_function(self, X, domain=None) -> np.ndarray:
        X, u = self._inputs(X, domain)
        return class_logits(self.checkpoint_, X, u)

    def predict_proba(self, X, domain=None) -> np.ndarray:
        return softmax_rows(self.decision_function(X, domain))

    def predict(self, X, domain=None) -> np.ndarray:
        logits = self.decision_function(X, domain)
        return self.classes_[np.argmax(logits, axis=1)]

    def transform(self, X, domain=None) -> np.ndarray:
        """Encodings z of the fitted encoder."""
        X, u = self._inputs(X, domain)
        return encode_rows(self.checkpoint_, X, u)

    def fit_transform(self, X, y=None, domain=None):
        return self.fit(X, y, domain).transform(X, domain)

    def score(self, X, y, domain=None, sample_weight=None) -> float:
        return accuracy_score(y, self.predict(X, domain), sample_weight=sample_weight)
