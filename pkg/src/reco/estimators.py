"""scikit-learn style wrappers around training, refinement and zero-shot prediction."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from reco.evaluation import InferenceMode, predict_classes, refine
from reco.exceptions import ConfigError
from reco.fusion import FusionConfig
from reco.memory import normalize_rows
from reco.retrieval import RetrievalConfig, store_of
from reco.synthworld import TrainDataset
from reco.training import TrainConfig, train_fusion


def _embeddings(X, dim=None, name="X"):
    X = check_array(X, dtype=np.float64, ensure_min_samples=1)
    if dim is not None and X.shape[1] != dim:
        raise ValueError(f"{name} has {X.shape[1]} features, expected {dim}")
    return normalize_rows(X)


class RecoFusion(TransformerMixin, BaseEstimator):
    """Retrieval-fusion refiner for paired image/text embeddings.

    ``fit(X, Y)`` trains both fusion branches on aligned rows of ``X``
    (image side) and ``Y`` (text side) with neighbours drawn from
    ``memory``. ``transform(X)`` refines image embeddings;
    ``transform(X, Y)`` returns both refined sides, like ``CCA``.
    """

    def __init__(self, memory=None, heads=4, layers=1, mlp_ratio=1.0, k=10, k_prime=None,
                 search_mode="uni", fetch_modality="opposite", batch_size=128, epochs=10,
                 base_lr=1e-3, weight_decay=1e-5, branch_mode="both", exclude_self=None, seed=0):
        self.memory = memory
        self.heads = heads
        self.layers = layers
        self.mlp_ratio = mlp_ratio
        self.k = k
        self.k_prime = k_prime
        self.search_mode = search_mode
        self.fetch_modality = fetch_modality
        self.batch_size = batch_size
        self.epochs = epochs
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.branch_mode = branch_mode
        self.exclude_self = exclude_self
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs, base_lr=self.base_lr,
                           weight_decay=self.weight_decay, k=self.k, seed=self.seed,
                           branch_mode=self.branch_mode, search_mode=self.search_mode,
                           fetch_modality=self.fetch_modality, exclude_self=self.exclude_self)

    def fit(self, X, Y):
        if self.memory is None:
            raise ConfigError("RecoFusion needs a memory store or index")
        dim = store_of(self.memory).dim
        X = _embeddings(X, dim)
        Y = _embeddings(Y, dim, "Y")
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"X and Y must have the same number of rows, got {X.shape[0]} and {Y.shape[0]}")
        fusion_cfg = FusionConfig(dim=dim, heads=self.heads, layers=self.layers, mlp_ratio=self.mlp_ratio)
        result = train_fusion(TrainDataset(X, Y), self.memory, self._train_config(), fusion_cfg)
        self.params_ = result.params
        self.inv_tau_ = result.temperature.value
        self.history_ = result.metrics
        self.n_features_in_ = dim
        return self

    def _refine(self, X, modality):
        k_prime = self.k if self.k_prime is None else self.k_prime
        rcfg = RetrievalConfig(k=max(k_prime, 1), search_mode=self.search_mode,
                               fetch_modality=self.fetch_modality)
        return refine(X, modality, self.memory, rcfg, k_prime, self.params_)

    def transform(self, X, Y=None):
        check_is_fitted(self, "params_")
        X_bar = self._refine(_embeddings(X, self.n_features_in_), "image")
        if Y is None:
            return X_bar
        return X_bar, self._refine(_embeddings(Y, self.n_features_in_, "Y"), "text")


class RecoZeroShotClassifier(ClassifierMixin, BaseEstimator):
    """Nearest class embedding by cosine, optionally after refinement.

    ``fit`` takes the class-name embeddings (one row per class), not
    labelled training samples. ``fusion`` is a fitted :class:`RecoFusion`
    and is only needed for modes other than ``"none"``.
    """

    def __init__(self, fusion=None, mode="both", classes=None):
        self.fusion = fusion
        self.mode = mode
        self.classes = classes

    def fit(self, X, y=None):
        X = _embeddings(X)
        mode = InferenceMode.parse(self.mode)
        labels = np.arange(X.shape[0]) if self.classes is None else np.asarray(self.classes)
        if labels.shape[0] != X.shape[0]:
            raise ValueError("classes must name every class embedding")
        if mode is not InferenceMode.NONE:
            if self.fusion is None:
                raise ConfigError(f"mode {mode.value!r} needs a fitted RecoFusion")
            check_is_fitted(self.fusion, "params_")
        if mode.refines_text:
            X = self.fusion._refine(X, "text")
        self.class_embeddings_ = X
        self.classes_ = labels
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "class_embeddings_")
        X = _embeddings(X, self.n_features_in_)
        if InferenceMode.parse(self.mode).refines_image:
            X = self.fusion._refine(X, "image")
        return self.classes_[predict_classes(X, self.class_embeddings_)]
