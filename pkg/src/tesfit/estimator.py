"""Scikit-learn estimator facade over the training pipeline.

Wraps the full loop (probe init, per-group SGD, text regularization) in
fit/predict so the method composes with pipelines, grid-search helpers,
and the rest of the sklearn ecosystem.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import FeatureDataset
from .losses import Hyperparams
from .model import classifier_logits
from .ndcore import softmax_rows
from .optim import TrainConfig, train
from .pipeline import initialize_model


class TextTunedClassifier(BaseEstimator, ClassifierMixin):
    """Linear classifier over frozen features with text-proxy regularization.

    Parameters
    ----------
    loss : {"ce", "ls", "tls", "tes_m", "tes_c", "tes"}
        Training objective.  The text variants need ``text_proxies``.
    text_proxies : ndarray of shape (d_z, n_classes), optional
        Fixed text-encoder proxy columns, one per class (in the order of
        the sorted class labels seen in fit).
    learning_rate, backbone_learning_rate, head_learning_rate : float
        Initial rates of the cosine schedule per parameter group; the
        backbone and head rates default to ``learning_rate``.
    use_adapter : bool
        Train a small affine feature adapter standing in for a tunable
        backbone.  With False only the classifier (and head) move.
    classifier_init : {"probe", "gaussian"}
        Start from the regularized linear-probe solution (default) or a
        std-0.01 Gaussian draw.

    Attributes
    ----------
    classes_ : ndarray
        Sorted unique labels seen in fit.
    model_ : TesModel
        Trained parameter groups.
    trace_ : TrainingTrace
        Per-step learning rates and gradient norms of the fit.
    """

    def __init__(
        self,
        loss: str = "tes",
        text_proxies=None,
        epochs: int = 100,
        batch_size: int = 256,
        momentum: float = 0.9,
        learning_rate: float = 0.01,
        backbone_learning_rate: float | None = None,
        head_learning_rate: float | None = None,
        weight_decay: float | None = None,
        lambda_v: float = 0.1,
        lambda_t: float = 0.7,
        tau_text: float = 0.03,
        tau_vision: float = 1.0,
        reg_lambda: float = 1.0,
        ls_epsilon: float = 0.1,
        use_adapter: bool = True,
        classifier_init: str = "probe",
        head_init: str = "identity",
        probe_l2: float = 1e-2,
        hidden_dim: int | None = None,
        random_state: int = 0,
    ):
        self.loss = loss
        self.text_proxies = text_proxies
        self.epochs = epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.learning_rate = learning_rate
        self.backbone_learning_rate = backbone_learning_rate
        self.head_learning_rate = head_learning_rate
        self.weight_decay = weight_decay
        self.lambda_v = lambda_v
        self.lambda_t = lambda_t
        self.tau_text = tau_text
        self.tau_vision = tau_vision
        self.reg_lambda = reg_lambda
        self.ls_epsilon = ls_epsilon
        self.use_adapter = use_adapter
        self.classifier_init = classifier_init
        self.head_init = head_init
        self.probe_l2 = probe_l2
        self.hidden_dim = hidden_dim
        self.random_state = random_state

    def _loss_kind(self) -> str:
        kind = str(self.loss).upper()
        if kind not in ("CE", "LS", "TLS", "TES_M", "TES_C", "TES"):
            raise ValueError(f"unknown loss {self.loss!r}")
        return kind

    def fit(self, X, y):
        from .data import TextProxySet

        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least 2 classes")
        names = [str(c) for c in self.classes_]
        ds = FeatureDataset(X, encoded, names, split="train")

        kind = self._loss_kind()
        proxies = None
        d_z = None
        if kind in ("TLS", "TES_M", "TES_C", "TES"):
            if self.text_proxies is None:
                raise ValueError(f"loss {self.loss!r} requires text_proxies")
            z = np.asarray(self.text_proxies, dtype=np.float64)
            if z.ndim != 2 or z.shape[1] != self.classes_.size:
                raise ValueError(
                    f"text_proxies must have one column per class, got {z.shape}"
                )
            proxies = TextProxySet(z, names)
            d_z = z.shape[0]

        hp = Hyperparams(
            lambda_v=self.lambda_v,
            lambda_t=self.lambda_t,
            tau_text=self.tau_text,
            tau_vision=self.tau_vision,
            reg_lambda=self.reg_lambda,
            ls_epsilon=self.ls_epsilon,
        )
        config = TrainConfig(
            eta0_classifier=self.learning_rate,
            eta0_backbone=self.backbone_learning_rate or self.learning_rate,
            eta0_head=self.head_learning_rate or self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.random_state,
            loss_kind=kind,
            hyperparams=hp,
        )
        model = initialize_model(
            ds,
            kind,
            seed=self.random_state,
            d_z=d_z,
            hidden=self.hidden_dim,
            use_adapter=self.use_adapter,
            classifier_init=self.classifier_init,
            head_init=self.head_init,
            probe_mu=self.probe_l2,
        )
        self.model_, self.trace_ = train(config, ds, None, model, proxies)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return classifier_logits(self.model_.features(X), self.model_.classifier)

    def predict_proba(self, X):
        return softmax_rows(self.decision_function(X))

    def predict(self, X):
        idx = np.argmax(self.decision_function(X), axis=1)
        return self.classes_[idx]
