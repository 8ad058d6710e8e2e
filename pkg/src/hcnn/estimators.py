"""scikit-learn style front end for the crack segmentation network."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .metrics import confusion, f_score
from .network import NetworkConfig, build_network
from .tensor import sigmoid_map
from .training import (
    DEFAULT_EPOCHS,
    DEFAULT_LR,
    DEFAULT_MOMENTUM,
    DEFAULT_WEIGHT_DECAY,
    OptimizerState,
    train,
)
from .validation import check_images, check_masks


class HCNNSegmenter(BaseEstimator):
    """Pixel-wise crack segmenter.

    ``X`` is a batch of RGB images ``(n, 3, H, W)`` with values in ``[0, 1]``
    and ``H``, ``W`` multiples of 32; ``y`` the matching binary masks
    ``(n, H, W)`` or ``(n, 1, H, W)``.  Predictions are returned as
    ``(n, H, W)`` arrays.

    Defaults are the reference training settings (learning rate 1e-5,
    momentum 0.9, weight decay 5e-4, 20 epochs).
    """

    def __init__(self, channel_scale=1.0, learning_rate=DEFAULT_LR, momentum=DEFAULT_MOMENTUM,
                 weight_decay=DEFAULT_WEIGHT_DECAY, epochs=DEFAULT_EPOCHS, batch_size=1,
                 threshold=0.5, random_state=None, dtype="float32"):
        self.channel_scale = channel_scale
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.threshold = threshold
        self.random_state = random_state
        self.dtype = dtype

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X.shape[0], X.shape[2:])
        init_seq, order_seq = np.random.SeedSequence(self.random_state).spawn(2)
        self.net_ = build_network(NetworkConfig(channel_scale=self.channel_scale),
                                  rng=np.random.default_rng(init_seq), dtype=np.dtype(self.dtype))
        state = OptimizerState(self.learning_rate, self.momentum, self.weight_decay)
        dataset = [(X[i:i + 1], y[i:i + 1]) for i in range(X.shape[0])]
        self.history_ = train(self.net_, dataset, epochs=self.epochs, batch_size=self.batch_size,
                              rng=np.random.default_rng(order_seq), state=state)
        return self

    def decision_function(self, X):
        """Fused logits ``F^fused``."""
        check_is_fitted(self, "net_")
        X = check_images(X, self.net_.config.input_channels)
        outputs, _ = self.net_.forward(X)
        return outputs.fused[:, 0]

    def predict_proba(self, X):
        return sigmoid_map(self.decision_function(X))

    def predict(self, X):
        return (self.predict_proba(X) > self.threshold).astype(np.uint8)

    def score(self, X, y):
        """F-score of the thresholded prediction over all pixels of the batch."""
        pred = self.predict(X)
        y = check_masks(y, pred.shape[0], pred.shape[1:])[:, 0]
        return f_score(confusion(pred, y))[2]
