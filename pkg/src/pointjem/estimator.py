"""scikit-learn estimator interface."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .energy import energy as _energy
from .energy import forward_logits
from .optim import SamConfig
from .sampler import SgldConfig
from .trainer import AdamConfig, TrainConfig, Trainer, predict_proba
from .validation import check_clouds, check_labels


class JointEnergyPointClassifier(ClassifierMixin, BaseEstimator):
    """Point cloud classifier that is also an energy-based generator.

    ``X`` is an array of clouds with shape ``(n_clouds, n_points, 3)``.
    Training alternates SGLD sampling of negative clouds with a
    sharpness-aware Adam step on cross-entropy plus the contrastive energy
    term. After fitting, ``sample`` draws new clouds from the learned energy.

    Parameters
    ----------
    point_widths : tuple of int, default=(64, 128, 256, 1024)
        Widths of the per-point MLP; the last is the pooled feature size.
    head_widths : tuple of int, default=()
        Hidden widths of the classifier head before the logit layer.
    activation : {"celu", "relu", "leaky_relu"}, default="celu"
    epochs : int, default=200
    batch_size : int, default=128
    lr : float, default=0.01
        Adam learning rate, multiplied by ``lr_decay`` every ``lr_decay_every`` epochs.
    sgld_steps, sgld_step_size, sgld_noise : default=32, 0.05, 0.01
    reinit_prob : float, default=0.05
        Probability that a chain restarts from the prior instead of the buffer.
    init_mode : {"uniform", "data_gaussian"}, default="uniform"
    buffer_size : int, default=5000
    sam : bool, default=True
    rho : float, default=0.05
    weight_decay : float, default=0.0
    random_state : int, default=0

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
    trainer_ : Trainer
    n_divergences_ : int
        Training steps aborted because a chain or loss went non-finite.
    """

    def __init__(
        self,
        point_widths=(64, 128, 256, 1024),
        head_widths=(),
        activation="celu",
        epochs=200,
        batch_size=128,
        lr=0.01,
        beta1=0.9,
        beta2=0.999,
        lr_decay=0.2,
        lr_decay_every=50,
        sgld_steps=32,
        sgld_step_size=0.05,
        sgld_noise=0.01,
        reinit_prob=0.05,
        clip_bound=1.0,
        init_mode="uniform",
        buffer_size=5000,
        sam=True,
        rho=0.05,
        weight_decay=0.0,
        random_state=0,
    ):
        self.point_widths = point_widths
        self.head_widths = head_widths
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.sgld_steps = sgld_steps
        self.sgld_step_size = sgld_step_size
        self.sgld_noise = sgld_noise
        self.reinit_prob = reinit_prob
        self.clip_bound = clip_bound
        self.init_mode = init_mode
        self.buffer_size = buffer_size
        self.sam = sam
        self.rho = rho
        self.weight_decay = weight_decay
        self.random_state = random_state

    def train_config(self, n_classes: int, n_points: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            n_classes=n_classes,
            n_points=n_points,
            point_widths=tuple(self.point_widths),
            head_widths=tuple(self.head_widths),
            activation=self.activation,
            buffer_size=self.buffer_size,
            sgld=SgldConfig(self.sgld_step_size, self.sgld_noise, self.sgld_steps,
                            self.reinit_prob, self.clip_bound, self.init_mode),
            sam=SamConfig(self.rho, self.weight_decay, bool(self.sam)),
            adam=AdamConfig(self.lr, self.beta1, self.beta2),
            lr_decay=self.lr_decay,
            lr_decay_every=self.lr_decay_every,
            seed=int(self.random_state),
        )

    def fit(self, X, y, on_epoch_end=None):
        X = check_clouds(X)
        y = check_labels(y, len(X))
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_points_ = X.shape[1]
        self.trainer_ = Trainer(self.train_config(len(self.classes_), self.n_points_))
        self.trainer_.class_names = [str(c) for c in self.classes_]
        self.trainer_.fit(X, y_enc, on_epoch_end=on_epoch_end)
        return self

    @property
    def params_(self):
        check_is_fitted(self, "trainer_")
        return self.trainer_.params

    @property
    def n_divergences_(self) -> int:
        check_is_fitted(self, "trainer_")
        return self.trainer_.divergences

    @property
    def records_(self):
        check_is_fitted(self, "trainer_")
        return self.trainer_.records

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "trainer_")
        return forward_logits(self.params_, check_clouds(X, self.n_points_))

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "trainer_")
        return predict_proba(self.params_, check_clouds(X, self.n_points_))

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def energy(self, X) -> np.ndarray:
        """Energy ``-logsumexp(logits)`` of each cloud; lower means more data-like."""
        check_is_fitted(self, "trainer_")
        return _energy(self.params_, check_clouds(X, self.n_points_))

    def sample(self, n_samples: int, confidence_threshold: float = 0.9, target_class=None,
               from_buffer: bool = True, **kw):
        """Draw clouds by SGLD and keep those classified with enough confidence.

        Returns ``(clouds, labels, confidences)``; fewer than ``n_samples``
        clouds come back if the attempt budget runs out.
        """
        check_is_fitted(self, "trainer_")
        target = None
        if target_class is not None:
            hits = np.flatnonzero(self.classes_ == target_class)
            if hits.size == 0:
                raise ValueError(f"unknown class {target_class!r}; classes are {list(self.classes_)}")
            target = int(hits[0])
        res = self.trainer_.generate(n_samples, confidence_threshold, target, from_buffer, **kw)
        if not res.samples:
            return np.empty((0, self.n_points_, 3)), self.classes_[:0], np.empty(0)
        clouds = np.stack([s.cloud for s in res.samples])
        labels = self.classes_[[s.label for s in res.samples]]
        return clouds, labels, np.array([s.confidence for s in res.samples])
