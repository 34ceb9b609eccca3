"""scikit-learn style front end for the registration pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .geometry import PointCloud, evaluate, recall
from .pipeline import (ModelConfig, TrainConfig, init_model, register, train)

__all__ = ["PointCloudRegistrar"]


def _as_cloud(x) -> PointCloud:
    return x if isinstance(x, PointCloud) else PointCloud(np.asarray(x))


class PointCloudRegistrar(BaseEstimator):
    """Hierarchical coarse-to-fine registration as an estimator.

    fit() trains the underlying model on synthetic scene pairs (X is
    ignored, sklearn-style placeholder); predict() maps a list of
    (source, target) cloud pairs to rigid transforms; score() is the
    registration recall at the given thresholds.
    """

    def __init__(self, epochs=40, pretrain_epochs=10, pairs_per_epoch=96,
                 alpha=1.8, candidate_count=8, use_similarity=True,
                 input_points=1024, noise_sigma=0.01, seed=0,
                 eps_trans=0.5, eps_rot=5.0):
        self.epochs = epochs
        self.pretrain_epochs = pretrain_epochs
        self.pairs_per_epoch = pairs_per_epoch
        self.alpha = alpha
        self.candidate_count = candidate_count
        self.use_similarity = use_similarity
        self.input_points = input_points
        self.noise_sigma = noise_sigma
        self.seed = seed
        self.eps_trans = eps_trans
        self.eps_rot = eps_rot

    def fit(self, X=None, y=None):
        keypoints = (max(self.input_points // 4, 16),
                     max(self.input_points // 8, 8),
                     max(self.input_points // 16, 8))
        model = init_model(ModelConfig(
            input_points=self.input_points, alpha=self.alpha,
            candidate_count=self.candidate_count,
            use_similarity=self.use_similarity, seed=self.seed,
            keypoints=keypoints))
        cfg = TrainConfig(epochs=self.epochs,
                          pretrain_epochs=self.pretrain_epochs,
                          pairs_per_epoch=self.pairs_per_epoch,
                          point_count=self.input_points,
                          noise_sigma=self.noise_sigma, seed=self.seed)
        self.model_, self.history_ = train(model, cfg)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit() before using the registrar")

    def predict(self, X):
        """Registration transforms for a list of (source, target) pairs."""
        self._check_fitted()
        return [register(_as_cloud(s), _as_cloud(t), self.model_,
                         seed=self.seed).final
                for s, t in X]

    def score(self, X, y):
        """Recall over pairs X with ground-truth transforms y."""
        self._check_fitted()
        estimates = self.predict(X)
        metrics = [evaluate(est, truth, self.eps_trans, self.eps_rot)
                   for est, truth in zip(estimates, y)]
        return recall(metrics, self.eps_trans, self.eps_rot)
