"""Held-out evaluation: standardization, transition metrics, baselines, fate and velocity.

Every metric is computed in coordinates standardized with statistics of
the *train* split of the source timepoint. Standardized arrays carry a
provenance tag, and the metric functions refuse anything else, so a raw
array cannot reach a metric by accident.

Predictors share one small protocol::

    predictor.sample(z, delta, k, seed) -> (n, k, d) array
    predictor.deterministic(z, delta)   -> (n, d) array
    predictor.stochastic                -> bool

Deterministic predictors return a single draw (``k`` is ignored): a
population replicated ``k`` times is the same empirical distribution.
"""

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy import stats as sps
from sklearn.neighbors import KNeighborsClassifier, NearestNeighbors

from .autodiff import DTYPE
from .exceptions import DataError
from .landscape import propagate
from .losses import SinkhornConfig, mmd, sinkhorn_w2
from .rng import derived_seed, torch_generator
from .time_codes import median_training_delta

STD_GUARD = 1e-6
K_EVAL = 32
MMD_BLOCK_ROWS = 256


# ------------------------------------------------------------ standardization
@dataclass(frozen=True)
class StandardizedSet:
    values: np.ndarray
    tag: str


@dataclass(frozen=True)
class StandardizationStats:
    """Per-dimension train statistics; ``tag`` identifies them in standardized sets."""

    mean: np.ndarray
    std: np.ndarray
    tag: str

    @classmethod
    def fit(cls, train_source):
        x = np.asarray(train_source, dtype=float)
        if x.ndim != 2 or x.shape[0] == 0:
            raise DataError("standardization needs a nonempty (n, d) train set")
        mean, std = x.mean(axis=0), x.std(axis=0)
        digest = hashlib.sha256(mean.tobytes() + std.tobytes()).hexdigest()[:16]
        return cls(mean=mean, std=std, tag=f"train-std:{digest}")

    def apply(self, x):
        if isinstance(x, StandardizedSet):
            raise DataError(f"set is already standardized (tag {x.tag}); refusing to standardize twice")
        x = np.asarray(x, dtype=float)
        return StandardizedSet(values=(x - self.mean) / (self.std + STD_GUARD), tag=self.tag)

    def invert(self, s):
        self._check(s)
        return s.values * (self.std + STD_GUARD) + self.mean

    def _check(self, s):
        if not isinstance(s, StandardizedSet):
            raise DataError("metrics require standardized sets; got a raw array")
        if s.tag != self.tag:
            raise DataError(f"set was standardized with {s.tag}, expected {self.tag}")


def standardize(train_source, *others):
    """Fit stats on ``train_source`` and apply them to it and to ``others``."""
    stats = StandardizationStats.fit(train_source)
    return [stats.apply(train_source)] + [stats.apply(o) for o in others], stats


def _tensor(s):
    return torch.as_tensor(s.values, dtype=DTYPE)


def _require_pair(a, b):
    for s in (a, b):
        if not isinstance(s, StandardizedSet):
            raise DataError("metrics require standardized sets; got a raw array")
    if a.tag != b.tag:
        raise DataError(f"sets standardized with different statistics ({a.tag} vs {b.tag})")


def population_w2(pred, target, cfg=SinkhornConfig()):
    _require_pair(pred, target)
    with torch.no_grad():
        return float(sinkhorn_w2(_tensor(pred), _tensor(target), cfg))


def population_mmd(pred, target, block_rows=MMD_BLOCK_ROWS):
    _require_pair(pred, target)
    with torch.no_grad():
        return float(mmd(_tensor(pred), _tensor(target), block_rows=block_rows))


# ------------------------------------------------------------ predictors
class IdentityPredictor:
    """Source replay: the prediction is the source population itself."""

    stochastic = False

    def sample(self, z, delta, k=1, seed=0):
        return np.asarray(z, dtype=float)[:, None, :].copy()

    def deterministic(self, z, delta):
        return np.asarray(z, dtype=float).copy()


class LinearPredictor:
    """Shift every cell by ``delta * velocity``."""

    stochastic = False

    def __init__(self, velocity):
        self.velocity = np.asarray(velocity, dtype=float)

    def deterministic(self, z, delta):
        return np.asarray(z, dtype=float) + delta * self.velocity

    def sample(self, z, delta, k=1, seed=0):
        return self.deterministic(z, delta)[:, None, :]


def mean_velocity(times, means):
    """Average over adjacent timepoint gaps of the per-unit-time change in population mean."""
    times = np.asarray(times, dtype=float)
    means = np.asarray(means, dtype=float)
    if len(times) < 2:
        raise DataError("the linear baseline needs at least two train timepoints")
    rates = np.diff(means, axis=0) / np.diff(times)[:, None]
    return rates.mean(axis=0)


def dataset_velocity(ds):
    return mean_velocity(ds.times, [ds.train(i).mean(axis=0) for i in range(len(ds.times))])


def identity_baseline(source):
    return IdentityPredictor().deterministic(source, 0.0)


def linear_baseline(source, velocity, delta):
    return LinearPredictor(velocity).deterministic(source, delta)


class OperatorPredictor:
    """Wrap a trained operator; noise is drawn from a seed-derived stream."""

    stochastic = True

    def __init__(self, model, action=None, chunk=1024):
        self.model = model
        self.action = action
        self.chunk = chunk

    def sample(self, z, delta, k=K_EVAL, seed=0):
        z = torch.as_tensor(np.asarray(z, dtype=float), dtype=DTYPE)
        gen = torch_generator(seed, "eval_noise")
        noise = torch.randn(z.shape[0], k, z.shape[1], generator=gen, dtype=DTYPE)
        out = []
        for lo in range(0, z.shape[0], self.chunk):
            hi = lo + self.chunk
            samples, _ = self.model.one_step(z[lo:hi], delta, noise[lo:hi], self.action, create_graph=False)
            out.append(samples.detach())
        return torch.cat(out).numpy()

    def deterministic(self, z, delta):
        z = torch.as_tensor(np.asarray(z, dtype=float), dtype=DTYPE)
        return self.model.deterministic(z, delta, self.action, create_graph=False).detach().numpy()


class SimulatorPredictor:
    """The ground-truth SDE used as a model (self-consistency oracle)."""

    stochastic = True

    def __init__(self, landscape, dt=0.01):
        self.landscape = landscape
        self.dt = dt

    def sample(self, z, delta, k=K_EVAL, seed=0):
        z = np.asarray(z, dtype=float)
        rep = np.repeat(z, k, axis=0)
        end = propagate(self.landscape, rep, delta, derived_seed(seed, "simulator_predict"), self.dt)
        return end.reshape(z.shape[0], k, z.shape[1])

    def deterministic(self, z, delta):
        z = np.asarray(z, dtype=float)
        return z + delta * self.landscape.drift(z)


def predict_population(predictor, source, delta, k, seed):
    draws = predictor.sample(source, delta, k, seed)
    if not np.isfinite(draws).all():
        raise DataError("predictor produced non-finite samples")
    return draws.reshape(-1, draws.shape[-1])


# ------------------------------------------------------------ transitions
@dataclass
class MetricsRecord:
    source_t: float
    target_t: float
    delta: float
    seed: int
    k_eval: int
    w2: float
    mmd: float
    w2_identity: float
    mmd_identity: float
    w2_linear: float
    mmd_linear: float
    n_source: int
    n_target: int

    def to_record(self):
        return asdict(self)


def evaluate_transition(
    predictor,
    source,
    target,
    delta,
    stats,
    velocity,
    k_eval=K_EVAL,
    seed=0,
    source_t=0.0,
    target_t=None,
    sinkhorn=SinkhornConfig(),
):
    """Model and baseline metrics for one (source, target) pair of raw test sets.

    Predictions are made in raw coordinates and standardized with ``stats``
    together with the target, so model and baselines see identical data.
    """
    if delta < 0:
        raise DataError("delta must be nonnegative")
    tgt = stats.apply(target)

    def metrics(p):
        pred = stats.apply(predict_population(p, source, delta, k_eval, seed))
        return population_w2(pred, tgt, sinkhorn), population_mmd(pred, tgt)

    w2, mm = metrics(predictor)
    w2_id, mmd_id = metrics(IdentityPredictor())
    w2_lin, mmd_lin = metrics(LinearPredictor(velocity))
    return MetricsRecord(
        source_t=float(source_t),
        target_t=float(source_t + delta if target_t is None else target_t),
        delta=float(delta),
        seed=int(seed),
        k_eval=int(k_eval),
        w2=w2,
        mmd=mm,
        w2_identity=w2_id,
        mmd_identity=mmd_id,
        w2_linear=w2_lin,
        mmd_linear=mmd_lin,
        n_source=int(len(source)),
        n_target=int(len(target)),
    )


def evaluate_dataset(predictor, ds, seeds=(0,), k_eval=K_EVAL, source_index=0, targets=None):
    """One :class:`MetricsRecord` per (target timepoint, seed), source fixed at ``source_index``."""
    stats = StandardizationStats.fit(ds.train(source_index))
    velocity = dataset_velocity(ds)
    t0 = ds.times[source_index]
    idx = targets if targets is not None else range(source_index + 1, len(ds.times))
    records = []
    for j in idx:
        for seed in seeds:
            records.append(
                evaluate_transition(
                    predictor,
                    ds.test(source_index),
                    ds.test(j),
                    ds.times[j] - t0,
                    stats,
                    velocity,
                    k_eval=k_eval,
                    seed=seed,
                    source_t=t0,
                    target_t=ds.times[j],
                )
            )
    return records


def aggregate(records, keys=("w2", "mmd", "w2_identity", "mmd_identity", "w2_linear", "mmd_linear")):
    """Mean and (population) std per target over seeds."""
    out = []
    for t in sorted({r.target_t for r in records}):
        group = [r for r in records if r.target_t == t]
        row = {"target_t": t, "n_seeds": len(group)}
        for key in keys:
            vals = np.array([getattr(r, key) for r in group])
            row[f"{key}_mean"] = float(vals.mean())
            row[f"{key}_std"] = float(vals.std())
        out.append(row)
    return out


# ------------------------------------------------------------ velocity
@dataclass
class VelocityConsistency:
    value: float
    n_used: int
    n_zero: int


def velocity_consistency(cells, velocities, k=20):
    """Mean cosine similarity between each cell's velocity and those of its k nearest neighbours.

    Cells with zero velocity have no direction; they are dropped before the
    neighbour search and counted in ``n_zero``.
    """
    cells = np.asarray(cells, dtype=float)
    vel = np.asarray(velocities, dtype=float)
    norms = np.linalg.norm(vel, axis=1)
    keep = norms > 0
    if np.count_nonzero(keep) < k + 1:
        raise DataError(f"velocity consistency needs at least k+1={k + 1} cells with nonzero velocity")
    x, unit = cells[keep], vel[keep] / norms[keep, None]
    nn_index = NearestNeighbors(n_neighbors=k + 1).fit(x)
    _, idx = nn_index.kneighbors(x)
    neighbours = idx[:, 1:]  # drop self
    cos = np.einsum("id,ikd->ik", unit, unit[neighbours])
    return VelocityConsistency(float(cos.mean()), int(keep.sum()), int((~keep).sum()))


def default_probe_delta(times, factor=0.1):
    return factor * median_training_delta(times)


def predicted_velocities(predictor, cells, delta_probe):
    if not delta_probe > 0:
        raise DataError("delta_probe must be positive")
    return (predictor.deterministic(cells, delta_probe) - np.asarray(cells, dtype=float)) / delta_probe


# ------------------------------------------------------------ fate
@dataclass
class FateReport:
    predicted_ratios: np.ndarray
    truth_ratios: np.ndarray
    n_classified: np.ndarray
    r_masked: float
    n_with_pred: int
    degenerate: bool
    k: int
    knn: int
    notes: list = field(default_factory=list)

    def to_record(self):
        def clean(a):
            return [None if not math.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]

        return {
            "r_masked": None if not math.isfinite(self.r_masked) else self.r_masked,
            "n_with_pred": self.n_with_pred,
            "n_sources": int(len(self.predicted_ratios)),
            "degenerate": self.degenerate,
            "k": self.k,
            "knn": self.knn,
            "predicted_ratios": clean(self.predicted_ratios),
            "truth_ratios": clean(self.truth_ratios),
            "notes": list(self.notes),
        }


def fate_scores(predictor, sources, atlas_cells, atlas_labels, delta, truth_ratios, k=K_EVAL, knn=20, seed=0):
    """Predicted left-basin ratios per source and their Pearson correlation with the truth.

    Each of the ``k`` endpoint predictions per source takes the majority
    label of its ``knn`` nearest atlas cells; ``undecided`` predictions are
    dropped from the ratio. The correlation runs over sources with at
    least one classified prediction and a defined true ratio.
    """
    atlas_cells = np.asarray(atlas_cells, dtype=float)
    if len(atlas_cells) < knn:
        raise DataError(f"atlas has {len(atlas_cells)} cells, fewer than knn={knn}")
    sources = np.asarray(sources, dtype=float)
    truth = np.asarray(truth_ratios, dtype=float)
    clf = KNeighborsClassifier(n_neighbors=knn).fit(atlas_cells, np.asarray(atlas_labels, dtype=str))
    draws = predictor.sample(sources, delta, k, seed)
    labels = clf.predict(draws.reshape(-1, draws.shape[-1])).reshape(draws.shape[0], draws.shape[1])
    left = (labels == "left_well").sum(axis=1)
    right = (labels == "right_well").sum(axis=1)
    classified = left + right
    with np.errstate(invalid="ignore", divide="ignore"):
        ratios = np.where(classified > 0, left / np.maximum(classified, 1), np.nan)
    mask = (classified > 0) & np.isfinite(truth)
    notes = []
    r = float("nan")
    degenerate = True
    if mask.sum() < 2:
        notes.append("fewer than two sources with a classified prediction")
    elif np.ptp(ratios[mask]) == 0 or np.ptp(truth[mask]) == 0:
        notes.append("zero variance in predicted or true ratios; correlation undefined")
    else:
        r = float(sps.pearsonr(ratios[mask], truth[mask])[0])
        degenerate = False
    return FateReport(
        predicted_ratios=ratios,
        truth_ratios=truth,
        n_classified=classified,
        r_masked=r,
        n_with_pred=int((classified > 0).sum()),
        degenerate=degenerate,
        k=int(k),
        knn=int(knn),
        notes=notes,
    )


def clone_fate_scores(predictor, bench, k=K_EVAL, knn=20, seed=0):
    """:func:`fate_scores` on a :class:`~chreode.landscape.CloneBenchmark`."""
    delta = bench.daughters.t - bench.source.t
    return fate_scores(
        predictor,
        bench.source.cells,
        bench.daughters.cells,
        bench.daughters.fates,
        delta,
        bench.ratios,
        k=k,
        knn=knn,
        seed=seed,
    )
