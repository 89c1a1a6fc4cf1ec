"""scikit-learn style wrappers around training, prediction and standardization.

``ChreodeEstimator.fit`` takes snapshot populations (a
:class:`~chreode.landscape.TrajectoryDataset`, or a list of ``(n_i, d)``
arrays plus their times); ``predict`` returns the noise-free one-step
prediction and ``sample`` the stochastic population.
"""

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .autodiff import DTYPE
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import OperatorPredictor, StandardizationStats, StandardizedSet, mean_velocity
from .landscape import Snapshot, TrajectoryDataset
from .losses import sinkhorn_w2
from .trainer import TrainConfig, train


def _as_dataset(X, t):
    if isinstance(X, TrajectoryDataset):
        if t is not None:
            raise ValueError("times come from the dataset; do not pass t as well")
        return X
    if t is None:
        raise ValueError("t (one time per snapshot) is required when X is a list of arrays")
    if len(X) != len(t):
        raise ValueError(f"got {len(X)} snapshots but {len(t)} times")
    snaps = [Snapshot(t=float(ti), cells=check_array(xi, dtype=np.float64)) for xi, ti in zip(X, t)]
    return TrajectoryDataset(snaps, test_frac=0.0)


class ChreodeEstimator(BaseEstimator):
    """One-step transition model trained on unpaired snapshot populations."""

    def __init__(
        self,
        variant="selected",
        steps=2000,
        batch=128,
        K=8,
        base_lr=3e-4,
        weight_decay=0.01,
        pair_mode="all_ordered",
        drift_on=True,
        down_on=True,
        width=64,
        depth=3,
        rank=16,
        random_state=0,
    ):
        self.variant = variant
        self.steps = steps
        self.batch = batch
        self.K = K
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.pair_mode = pair_mode
        self.drift_on = drift_on
        self.down_on = down_on
        self.width = width
        self.depth = depth
        self.rank = rank
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            variant=self.variant,
            steps=self.steps,
            batch=self.batch,
            K=self.K,
            base_lr=self.base_lr,
            weight_decay=self.weight_decay,
            pair_mode=self.pair_mode,
            drift_on=self.drift_on,
            down_on=self.down_on,
            width=self.width,
            depth=self.depth,
            rank=self.rank,
            seed=int(self.random_state or 0),
            eval_every=0,
            checkpoint_every=0,
        )

    def fit(self, X, t=None):
        ds = _as_dataset(X, t)
        self.model_, self.history_ = train(ds, self._train_config())
        self.times_ = ds.times
        self.n_features_in_ = ds.dim
        return self

    def _check_X(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the model was fitted with {self.n_features_in_}")
        return X

    def predict(self, X, delta):
        """Noise-free prediction ``z + alpha(delta) (-grad U + S z)``."""
        X = self._check_X(X)
        return OperatorPredictor(self.model_).deterministic(X, delta)

    def sample(self, X, delta, n_samples=32, random_state=None):
        """``n_samples`` stochastic predictions per row; shape ``(n, n_samples, d)``."""
        X = self._check_X(X)
        seed = self.random_state if random_state is None else random_state
        return OperatorPredictor(self.model_).sample(X, delta, n_samples, int(seed or 0))

    def score(self, X, y, delta, n_samples=32):
        """Negative entropic transport distance between predicted and observed ``y`` populations."""
        pred = self.sample(X, delta, n_samples).reshape(-1, self.n_features_in_)
        y = check_array(y, dtype=np.float64)
        with torch.no_grad():
            return -float(sinkhorn_w2(torch.as_tensor(pred, dtype=DTYPE), torch.as_tensor(y, dtype=DTYPE)))

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_checkpoint(self.model_, path, extra={"estimator_params": self.get_params(), "times": self.times_})

    @classmethod
    def load(cls, path):
        model, meta = load_checkpoint(path)
        if model is None:
            raise ValueError("identity stub checkpoints carry no estimator")
        est = cls(**meta["extra"].get("estimator_params", {}))
        est.model_ = model
        est.times_ = tuple(meta["extra"].get("times", ()))
        est.n_features_in_ = model.dim
        return est


class Standardizer(TransformerMixin, BaseEstimator):
    """Train-only standardization; ``transform`` returns tagged :class:`StandardizedSet`.

    Passing an already standardized set to ``transform`` raises, so data
    cannot be standardized twice.
    """

    def fit(self, X, y=None):
        self.stats_ = StandardizationStats.fit(check_array(X, dtype=np.float64))
        self.n_features_in_ = self.stats_.mean.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        if isinstance(X, StandardizedSet):
            return self.stats_.apply(X)  # raises
        return self.stats_.apply(check_array(X, dtype=np.float64))

    def inverse_transform(self, X):
        check_is_fitted(self, "stats_")
        return self.stats_.invert(X)


class LinearBaseline(BaseEstimator):
    """Shift by ``delta`` times the mean per-gap velocity of the snapshot means."""

    def fit(self, X, t):
        if len(X) < 2 or len(X) != len(t):
            raise ValueError("need at least two snapshots with one time each")
        means = [check_array(x, dtype=np.float64).mean(axis=0) for x in X]
        self.velocity_ = mean_velocity(t, means)
        self.n_features_in_ = self.velocity_.shape[0]
        return self

    def predict(self, X, delta):
        check_is_fitted(self, "velocity_")
        return check_array(X, dtype=np.float64) + delta * self.velocity_
