"""scikit-learn compatible wrapper around the two-phase pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import ShapeError, check_image_batch, check_label_batch
from .data import make_sample
from .metrics import EvalConfig, ods
from .networks import NetConfig
from .training import TrainConfig, phase1_maps, phase2_maps, train_phase1, train_phase2


class CrispEdgeDetector(BaseEstimator):
    """Logical refinement edge detector.

    ``fit(X, y)`` takes images ``[n, *spatial]`` (or ``[n, 1, *spatial]``) with
    values in [0, 1] and integer instance label maps ``y [n, *spatial]``;
    object and edge targets are derived from the labels. ``predict`` returns
    binary edge maps, ``predict_proba`` the fused refinement probabilities.

    Parameters
    ----------
    rank : int
        Spatial rank, 2 or 3.
    base_width : int
        Channels of the first stage; widths double per level up to 8x.
    epochs_phase1, epochs_phase2 : int
        Passes over the training set for each phase.
    gate_enabled : bool
        False swaps every logical gate for a plain convolution (ablation).
    eval_d : float
        Match tolerance, as a fraction of the image diagonal, used by ``score``.
    """

    def __init__(self, rank=2, base_width=32, gn_groups=8, epochs_phase1=10, epochs_phase2=10,
                 batch_size=8, learning_rate=1e-3, gate_enabled=True, flip_augment=True,
                 seed=0, eval_d=0.0075):
        self.rank = rank
        self.base_width = base_width
        self.gn_groups = gn_groups
        self.epochs_phase1 = epochs_phase1
        self.epochs_phase2 = epochs_phase2
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.gate_enabled = gate_enabled
        self.flip_augment = flip_augment
        self.seed = seed
        self.eval_d = eval_d

    def _configs(self):
        net = NetConfig(rank=self.rank, base_width=self.base_width, gn_groups=self.gn_groups,
                        gate_enabled=self.gate_enabled).validate()
        train = TrainConfig(seed=self.seed, epochs_phase1=self.epochs_phase1, epochs_phase2=self.epochs_phase2,
                            batch_size=self.batch_size, learning_rate=self.learning_rate,
                            gate_enabled=self.gate_enabled, flip_augment=self.flip_augment).validate()
        return net, train

    def fit(self, X, y):
        X = check_image_batch(X, self.rank)
        y = check_label_batch(y, X.shape[2:])
        if len(y) != len(X):
            raise ShapeError(f"{len(X)} images but {len(y)} label maps")
        samples = [make_sample(x, lab, f"sample_{i:05d}") for i, (x, lab) in enumerate(zip(X, y))]
        net_cfg, train_cfg = self._configs()
        self.phase1_ = train_phase1(samples, train_cfg, net_cfg)
        self.phase2_ = train_phase2(samples, self.phase1_, train_cfg, net_cfg)
        self.spatial_shape_ = tuple(X.shape[2:])
        return self

    def _check_X(self, X):
        check_is_fitted(self, "phase2_")
        X = check_image_batch(X, self.rank)
        return X

    def predict_proba(self, X) -> np.ndarray:
        X = self._check_X(X)
        m1 = phase1_maps(self.phase1_, list(X))
        return np.stack([outs[-1] for outs in phase2_maps(self.phase2_, list(X), m1)])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) > 0.5).astype(np.uint8)

    def transform(self, X) -> np.ndarray:
        """Phase-one (object map, fused edge map) pairs stacked on axis 1."""
        X = self._check_X(X)
        return np.stack([np.stack(m) for m in phase1_maps(self.phase1_, list(X))])

    def score(self, X, y) -> float:
        """ODS F-measure of the fused refinement output."""
        probs = self.predict_proba(X)
        y = check_label_batch(y, probs.shape[1:])
        gts = [make_sample(np.zeros_like(p), lab, "").edge_mask for p, lab in zip(probs, y)]
        return ods(list(probs), gts, EvalConfig(d=self.eval_d))[3]
