"""scikit-learn compatible wrapper around the SSFT model and its training recipe."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_array, check_is_fitted

from .data import BandStats, fit_band_stats, normalize
from .model import (
    SsftConfig,
    features,
    init_params,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .training import TrainConfig, evaluate, predict_logits, train_model


def check_cubes(X, num_bands=None):
    """Validate a batch of cubes: finite float array of shape [n, H, W, C]."""
    X = check_array(X, allow_nd=True, dtype=[np.float32, np.float64], ensure_min_samples=1)
    if X.ndim != 4:
        raise ValueError(f"expected cubes shaped [n, H, W, C], got {X.shape}")
    if num_bands is not None and X.shape[-1] != num_bands:
        raise ValueError(f"X has {X.shape[-1]} bands; the estimator was fitted with {num_bands}")
    return X


class SSFTClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Spectral-spatial fusion transformer for patch-wise hyperspectral classification.

    ``X`` is an array of raw cubes [n, H, W, C]. Band statistics are fitted on
    the training cubes and applied to everything the estimator sees.
    ``transform`` returns the mean-pooled embedding from ``feature_tap``.

    With ``task="multilabel"`` ``y`` is an [n, K] indicator matrix and
    predictions threshold the sigmoid at 0.5.
    """

    def __init__(self, embed_dim=64, downsample=8, heads=4, ffn_mult=4, aux_heads=True,
                 lambda_aux=None, disable_branch=None, epochs_max=50, lr=4e-4, weight_decay=1e-2,
                 batch_size=8, step_size=20, gamma=0.1, patience=10, augment=None,
                 task="multiclass", num_classes=None, validation_fraction=0.15,
                 feature_tap="fused", dtype="float32", random_state=0):
        self.embed_dim = embed_dim
        self.downsample = downsample
        self.heads = heads
        self.ffn_mult = ffn_mult
        self.aux_heads = aux_heads
        self.lambda_aux = lambda_aux
        self.disable_branch = disable_branch
        self.epochs_max = epochs_max
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.step_size = step_size
        self.gamma = gamma
        self.patience = patience
        self.augment = augment
        self.task = task
        self.num_classes = num_classes
        self.validation_fraction = validation_fraction
        self.feature_tap = feature_tap
        self.dtype = dtype
        self.random_state = random_state

    @classmethod
    def from_configs(cls, ssft_config, train_config, random_state=0):
        off = [b for b, on in ssft_config.branch_mask.items() if not on]
        return cls(
            embed_dim=ssft_config.embed_dim, downsample=ssft_config.downsample, heads=ssft_config.heads,
            ffn_mult=ssft_config.ffn_mult, aux_heads=ssft_config.aux_heads, lambda_aux=ssft_config.lambda_aux,
            disable_branch=off[0] if off else None, epochs_max=train_config.epochs_max, lr=train_config.lr,
            weight_decay=train_config.weight_decay, batch_size=train_config.batch,
            step_size=train_config.step_size, gamma=train_config.gamma, patience=train_config.patience,
            augment=[a.to_dict() for a in train_config.augment], task=train_config.task,
            num_classes=ssft_config.num_classes, dtype=train_config.dtype, random_state=random_state,
        )

    # ------------------------------------------------------------ config plumbing

    def _model_config(self, num_bands, num_classes):
        if self.disable_branch not in (None, "spectral", "spatial"):
            raise ValueError(f"disable_branch must be None, 'spectral' or 'spatial', got {self.disable_branch!r}")
        return SsftConfig(
            num_bands=num_bands, num_classes=num_classes, embed_dim=self.embed_dim,
            downsample=self.downsample, heads=self.heads, ffn_mult=self.ffn_mult,
            aux_heads=self.aux_heads, lambda_aux=self.lambda_aux,
            branch_mask={"spectral": self.disable_branch != "spectral",
                         "spatial": self.disable_branch != "spatial"},
        )

    def _train_config(self):
        return TrainConfig(
            epochs_max=self.epochs_max, lr=self.lr, weight_decay=self.weight_decay,
            batch=self.batch_size, step_size=self.step_size, gamma=self.gamma,
            patience=self.patience, seeds=[self.random_state], task=self.task,
            augment=list(self.augment or []), dtype=self.dtype,
        )

    def _encode_targets(self, y):
        if self.task == "multilabel":
            y = np.asarray(y)
            if y.ndim != 2:
                raise ValueError("multilabel targets must be an [n, K] indicator matrix")
            return y.astype(np.float64)
        y = np.asarray(y)
        pos = np.searchsorted(self.classes_, y)
        if np.any(pos >= len(self.classes_)) or np.any(self.classes_[np.minimum(pos, len(self.classes_) - 1)] != y):
            raise ValueError("y contains labels unseen at fit time")
        return pos

    # ------------------------------------------------------------ estimator API

    def fit(self, X, y, X_val=None, y_val=None, wavelengths=None, log=None):
        X = check_cubes(X)
        y = np.asarray(y)
        if self.task == "multilabel":
            K = self.num_classes or y.shape[1]
            self.classes_ = np.arange(K)
        elif self.num_classes is not None:
            self.classes_ = np.arange(self.num_classes)
        else:
            self.classes_ = np.unique(y)
        if X_val is None:
            strat = y if self.task == "multiclass" else None
            X, X_val, y, y_val = train_test_split(X, y, test_size=self.validation_fraction,
                                                  random_state=self.random_state, stratify=strat)
        X_val = check_cubes(X_val, X.shape[-1])
        self.n_features_in_ = X.shape[-1]
        self.config_ = self._model_config(X.shape[-1], len(self.classes_))
        tc = self._train_config()
        self.band_stats_ = fit_band_stats(list(X))
        self.params_ = init_params(self.config_, self.random_state, dtype=np.dtype(self.dtype))
        self.history_, self.best_epoch_ = train_model(
            self.params_, self.config_, tc, X, self._encode_targets(y), X_val, self._encode_targets(y_val),
            self.band_stats_, self.random_state, log=log, wavelengths=wavelengths)
        return self

    def _prepare(self, X):
        check_is_fitted(self, "params_")
        X = check_cubes(X, self.n_features_in_)
        return normalize(X, self.band_stats_).astype(self.dtype, copy=False)

    def decision_function(self, X):
        Xn = self._prepare(X)
        return predict_logits(self.params_, self.config_, Xn, self.batch_size)

    def predict_proba(self, X):
        z = self.decision_function(X)
        if self.task == "multilabel":
            return 1.0 / (1.0 + np.exp(-z))
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        z = self.decision_function(X)
        if self.task == "multilabel":
            return (z > 0).astype(int)
        return self.classes_[z.argmax(axis=1)]

    def transform(self, X):
        Xn = self._prepare(X)
        return np.concatenate([features(Xn[i:i + self.batch_size], self.params_, self.config_, self.feature_tap)
                               for i in range(0, len(Xn), self.batch_size)])

    def evaluate(self, X, y, batch_size=None):
        """Accuracy and macro F1 on raw cubes ``X`` with original labels ``y``."""
        Xn = self._prepare(X)
        return evaluate(self.params_, self.config_, Xn, self._encode_targets(y),
                        self.task, batch_size or self.batch_size)

    def n_parameters(self):
        check_is_fitted(self, "config_")
        return param_count(self.config_)

    # ------------------------------------------------------------ persistence

    def save(self, path):
        check_is_fitted(self, "params_")
        extra = {
            "band_stats": self.band_stats_.to_dict(),
            "classes": self.classes_.tolist(),
            "estimator": self.get_params(),
            "best_epoch": self.best_epoch_,
        }
        return save_checkpoint(path, self.params_, self.config_, extra=extra)

    @classmethod
    def load(cls, path):
        params, config, index = load_checkpoint(path)
        est = cls(**index["estimator"]) if "estimator" in index else cls()
        est.params_ = params
        est.config_ = config
        est.classes_ = np.asarray(index.get("classes", range(config.num_classes)))
        est.n_features_in_ = config.num_bands
        est.band_stats_ = BandStats(**index["band_stats"])
        est.best_epoch_ = index.get("best_epoch")
        est.dtype = "float32"
        return est
