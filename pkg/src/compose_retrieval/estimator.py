"""scikit-learn style wrapper around training and retrieval.

Queries are passed as one feature matrix: the reference-image payload columns
followed by the modification-text columns.  Targets ``y`` are image payloads,
so the split point is ``y.shape[1]``.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import ExperimentConfig
from .data import Triplet
from .training import TripletDataset, run_training


class ComposedImageRetriever(BaseEstimator):
    """Train a composed-query retriever on ``(reference ++ text, target)`` pairs.

    After :meth:`fit`, :meth:`transform` maps queries to unit-norm
    embeddings and :meth:`kneighbors` / :meth:`predict` retrieve from a gallery
    (by default the distinct target rows seen during fitting).
    """

    def __init__(
        self,
        n_global=4,
        n_local=8,
        dim=64,
        num_tokens=4,
        hidden=128,
        epochs=15,
        batch_size=64,
        base_lr=2e-3,
        backbone_lr=2e-3,
        tau=0.1,
        lambda_=1.0,
        eta=1.0,
        mu=0.1,
        nu=10.0,
        kappa=0.5,
        weight_decay=0.01,
        random_state=0,
    ):
        self.n_global = n_global
        self.n_local = n_local
        self.dim = dim
        self.num_tokens = num_tokens
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.backbone_lr = backbone_lr
        self.tau = tau
        self.lambda_ = lambda_
        self.eta = eta
        self.mu = mu
        self.nu = nu
        self.kappa = kappa
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _config(self, image_dim: int, text_dim: int) -> ExperimentConfig:
        s = int(self.random_state)
        enc = {"num_tokens": self.num_tokens, "token_dim": self.dim, "hidden": self.hidden, "global_dim": self.dim}
        overrides = {
            "model.P": self.n_global,
            "model.Q": self.n_local,
            "model.D": self.dim,
            "model.init_seed": s,
            "model.image_encoder": {**enc, "input_size": image_dim, "seed": 2 * s},
            "model.text_encoder": {**enc, "input_size": text_dim, "seed": 2 * s + 1},
            "train.epochs": self.epochs,
            "train.batch_size": self.batch_size,
            "train.base_lr": self.base_lr,
            "train.backbone_lr": self.backbone_lr,
            "train.tau": self.tau,
            "train.lambda_": self.lambda_,
            "train.eta": self.eta,
            "train.mu": self.mu,
            "train.nu": self.nu,
            "train.kappa": self.kappa,
            "train.weight_decay": self.weight_decay,
            "train.seed": s,
        }
        return ExperimentConfig().with_overrides(overrides).resolve()

    def _split(self, X):
        return X[:, : self.image_dim_], X[:, self.image_dim_ :]

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        if y.ndim != 2 or X.shape[1] <= y.shape[1]:
            raise ValueError("X must hold reference payload columns followed by at least one text column")
        self.image_dim_ = y.shape[1]
        self.n_features_in_ = X.shape[1]
        ref, text = self._split(X)
        self.config_ = self._config(self.image_dim_, text.shape[1])
        images, inverse = np.unique(np.vstack([ref, y]), axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        n = len(X)
        triplets = [Triplet(int(inverse[i]), text[i], int(inverse[n + i])) for i in range(n)]
        state = run_training(self.config_, TripletDataset(triplets, images))
        self.model_ = state.model.eval()
        self.gallery_ = np.unique(y, axis=0)
        self.n_iter_ = state.step
        return self

    def _tensor(self, a):
        return torch.as_tensor(a, dtype=next(self.model_.parameters()).dtype)

    def transform(self, X):
        """Unit-norm query embeddings, ``(n_samples, dim)``."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        ref, text = self._split(X)
        return self.model_.embed_queries(self._tensor(ref), self._tensor(text)).numpy()

    def embed_images(self, images):
        check_is_fitted(self, "model_")
        images = check_array(images, dtype=np.float64)
        if images.shape[1] != self.image_dim_:
            raise ValueError(f"images have {images.shape[1]} features, expected {self.image_dim_}")
        return self.model_.embed_gallery(self._tensor(images)).numpy()

    def kneighbors(self, X, gallery=None, n_neighbors=10, return_distance=False):
        """Gallery row indices ranked by cosine score; ties go to the lower index."""
        gallery = self.gallery_ if gallery is None else gallery
        scores = self.transform(X) @ self.embed_images(gallery).T
        order = np.argsort(-scores, axis=1, kind="stable")[:, :n_neighbors]
        if return_distance:
            return 1.0 - np.take_along_axis(scores, order, axis=1), order
        return order

    def predict(self, X, gallery=None):
        """Top-ranked gallery image payload for each query."""
        gallery = self.gallery_ if gallery is None else check_array(gallery, dtype=np.float64)
        return gallery[self.kneighbors(X, gallery, n_neighbors=1)[:, 0]]

    def score(self, X, y, gallery=None):
        """Recall@1: fraction of queries whose top hit equals the target row."""
        y = check_array(y, dtype=np.float64)
        return float(np.mean(np.all(self.predict(X, gallery) == y, axis=1)))
