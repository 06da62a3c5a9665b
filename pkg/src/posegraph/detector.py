"""scikit-learn style wrapper around one part-detector network."""
import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .convnet import Architecture, forward_full, init_params, predict_logits
from .exceptions import ContractViolation
from .preprocessing import lcn
from .trainer import TrainConfig, train


class PartDetector(ClassifierMixin, BaseEstimator):
    """Binary window classifier for one body joint.

    ``fit`` takes LCN-processed patches of shape (N, P, P, 3) with 0/1 labels;
    ``response_map`` runs the trained network densely over a whole image.
    """

    def __init__(self, conv_maps=(16, 32, 64), conv_sizes=(5, 5, 5), fc_sizes=(512, 256),
                 learning_rate=1e-3, momentum=0.9, rms_decay=0.99, rms_epsilon=1e-8,
                 l2=1e-4, dropout=0.5, batch_size=64, epochs=30, validation_fraction=0.1,
                 random_state=0):
        self.conv_maps = conv_maps
        self.conv_sizes = conv_sizes
        self.fc_sizes = fc_sizes
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.rms_decay = rms_decay
        self.rms_epsilon = rms_epsilon
        self.l2 = l2
        self.dropout = dropout
        self.batch_size = batch_size
        self.epochs = epochs
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _arch(self, patch_size, channels):
        return Architecture(patch_size=patch_size, in_channels=channels,
                            conv_maps=tuple(self.conv_maps), conv_sizes=tuple(self.conv_sizes),
                            fc_sizes=tuple(self.fc_sizes) + (1,))

    def _config(self):
        return TrainConfig(learning_rate=self.learning_rate, momentum=self.momentum,
                           rms_decay=self.rms_decay, rms_epsilon=self.rms_epsilon, l2=self.l2,
                           dropout=self.dropout, batch_size=self.batch_size, epochs=self.epochs,
                           seed=self.random_state, validation_fraction=self.validation_fraction)

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if X.ndim != 4 or X.shape[1] != X.shape[2]:
            raise ContractViolation(f"expected square patches (N, P, P, C), got {X.shape}")
        if not np.all(np.isin(y, (0.0, 1.0))):
            raise ContractViolation("labels must be 0 or 1")
        arch = self._arch(X.shape[1], X.shape[3])
        config = self._config()
        if config.epochs == 0:
            self.params_, self.log_ = init_params(config.seed, arch), []
        else:
            self.params_, self.log_ = train(X, y, config, arch)
        self.classes_ = np.array([0, 1])
        return self

    @classmethod
    def from_params(cls, params, **kwargs):
        a = params.arch
        det = cls(conv_maps=a.conv_maps, conv_sizes=a.conv_sizes, fc_sizes=a.fc_sizes[:-1], **kwargs)
        det.params_, det.log_ = params, []
        det.classes_ = np.array([0, 1])
        return det

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        return predict_logits(self.params_, X)

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.stack([1 - p, p], axis=1)

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)

    def response_map(self, image, scale=1.0, normalized=False):
        """Dense response map; ``image`` is LCN-processed here unless ``normalized``."""
        check_is_fitted(self, "params_")
        x = image if normalized else lcn(image)
        return forward_full(self.params_, x, scale)
