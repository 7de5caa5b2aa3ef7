"""Scikit-learn style wrapper around a refinement chain."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state, check_X_y

from .adversarial import AdversarialConfig
from .data import center_crop, compute_channel_stats, make_dataset, standardize, to_batch
from .exceptions import InvalidInputError
from .nn import softmax
from .refinery import PROVIDERS, ChainConfig, StageConfig, TrainingSchedule, run_chain


class RefineryClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier trained by a ground-truth stage followed by refinement stages.

    Parameters
    ----------
    arch : str, default="smallnet"
        Architecture of every stage.
    refinements : tuple of str, default=("soft_dynamic",)
        Label provider for each stage after the first; each stage's teacher
        is the previous stage.
    loss : str, default="kl_label_to_output"
        Loss used by the refinement stages.
    epochs : int, default=10
        Epochs per stage.  The learning rate is divided by 10 at 70% and 85%
        of training.
    lr : float, default=0.05
    batch_size : int, default=128
    momentum : float, default=0.9
    weight_decay : float, default=5e-4
    adversarial_eta : float or None, default=None
        Enables jittered crops in refinement stages with this step size.
    area_range, ratio_range : tuple of float
        Random crop area fraction and aspect ratio ranges.
    random_state : int, RandomState or None, default=None

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
    model_ : Classifier
        The last stage's network.
    chain_ : RefinementChain
    mean_, std_ : ndarray of shape (n_channels,)
        Per-channel statistics used to standardize inputs.
    """

    def __init__(self, arch="smallnet", refinements=("soft_dynamic",), loss="kl_label_to_output", epochs=10,
                 lr=0.05, batch_size=128, momentum=0.9, weight_decay=5e-4, adversarial_eta=None,
                 area_range=(0.08, 1.0), ratio_range=(3 / 4, 4 / 3), random_state=None):
        self.arch = arch
        self.refinements = refinements
        self.loss = loss
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.adversarial_eta = adversarial_eta
        self.area_range = area_range
        self.ratio_range = ratio_range
        self.random_state = random_state

    def _validate_images(self, X, reset):
        X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=2 if reset else 1)
        if X.ndim != 4:
            raise InvalidInputError(f"expected images of shape (n, H, W, C), got {X.shape}")
        if not reset and X.shape[1:] != self.image_shape_:
            raise InvalidInputError(f"expected images of shape (n, {self.image_shape_}), got {X.shape}")
        return X

    def _chain_config(self, seed):
        starts = sorted({int(self.epochs * f) for f in (0.7, 0.85)} - {0})
        drops = tuple((e, 10.0) for e in starts)
        schedule = TrainingSchedule(self.epochs, self.lr, drops, self.momentum, self.weight_decay,
                                    self.batch_size, seed)
        adv = AdversarialConfig(self.adversarial_eta) if self.adversarial_eta else None
        stages = [StageConfig("stage1", "ground_truth", "cross_entropy_soft", self.arch, schedule)]
        for i, provider in enumerate(self.refinements, 2):
            if provider not in PROVIDERS:
                raise InvalidInputError(f"unknown provider {provider!r}")
            stages.append(StageConfig(f"stage{i}", provider, self.loss, self.arch, schedule, adversarial=adv))
        return ChainConfig(stages, seed=seed, area_range=tuple(self.area_range),
                           ratio_range=tuple(self.ratio_range), topk=(1,))

    def fit(self, X, y):
        """Train the chain on images ``X`` of shape ``(n, H, W, C)`` with values in any fixed range."""
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32, ensure_min_samples=2)
        X = self._validate_images(X, reset=True)
        self.image_shape_ = X.shape[1:]
        encoder = LabelEncoder().fit(y)
        self.classes_ = encoder.classes_
        seed = int(check_random_state(self.random_state).randint(2**31 - 1))
        self.mean_, self.std_ = compute_channel_stats(X)
        names = [str(c) for c in self.classes_]
        train = make_dataset(X, encoder.transform(y), names, "train", mean=self.mean_, std=self.std_)
        self.chain_ = run_chain(self._chain_config(seed), train)
        self.model_ = self.chain_.final
        return self

    def _logits(self, X):
        check_is_fitted(self, "model_")
        X = self._validate_images(X, reset=False)
        images = standardize(X, self.mean_, self.std_)
        size = self.model_.arch.input_size
        return self.model_.predict_logits(to_batch([center_crop(im, size) for im in images]))

    def predict_proba(self, X):
        return softmax(self._logits(X).astype(np.float64))

    def transform(self, X):
        """Refined labels: the final network's class distribution for each image's center crop.

        Columns follow ``classes_``.  These are the soft labels a further
        refinement stage would be trained against (evaluated without crop noise).
        """
        return self.predict_proba(X)

    def fit_transform(self, X, y):
        return self.fit(X, y).transform(X)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self._logits(X), axis=1)]
