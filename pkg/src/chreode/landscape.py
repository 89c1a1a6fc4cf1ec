"""Ground-truth landscape SDEs and the snapshot datasets drawn from them.

Cells follow ``dz = (-grad U(z) + S z) dt + sigma dW`` with a double-well
potential in the first two coordinates, a planar rotation ``S`` and
Ornstein-Uhlenbeck relaxation toward zero in the remaining coordinates.
Each timepoint is an independent population (destructive sampling), so no
cell is observed twice.

Dataset files are plain text::

    CHREODE-DS v1 d=<d> T=<T>
    SNAP t=<t> n=<n> clones=<0|1>
    <d values, %.17g> [<clone id> <fate>]
    ...

Fate tokens are ``left_well``, ``right_well`` and ``undecided``. The
train/test split and the simulation provenance live in a JSON sidecar
(``<path>.json``) next to the data file.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import ConfigError, DataError, DatasetFormatError
from .rng import numpy_rng

KINDS = ("double_well", "rotation_only", "well_plus_rotation")
FATES = ("left_well", "right_well", "undecided")
UNDECIDED_BAND = 0.3
FORMAT_TAG = "CHREODE-DS"
FORMAT_VERSION = "v1"


@dataclass(frozen=True)
class Landscape:
    """Drift and diffusion of a synthetic landscape in ``dim`` dimensions.

    ``well_shift`` moves both wells along the first coordinate; it is how
    a second, related landscape is made for transfer experiments.
    """

    kind: str = "well_plus_rotation"
    dim: int = 8
    omega: float = 0.5
    sigma_plane: float = 0.3
    sigma_ambient: float = 0.2
    ou_rate: float = 1.0
    well_shift: float = 0.0
    init_center: tuple = (0.0, 0.5)
    init_std: float = 0.1
    ambient_init_std: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown landscape kind {self.kind!r}; expected one of {KINDS}")
        if self.dim < 2:
            raise ConfigError("landscape dim must be at least 2")
        if min(self.sigma_plane, self.sigma_ambient, self.init_std, self.ambient_init_std) < 0:
            raise ConfigError("diffusion and initial spread must be nonnegative")
        if self.ou_rate < 0:
            raise ConfigError("ou_rate must be nonnegative")
        if len(self.init_center) > self.dim:
            raise ConfigError("init_center longer than dim")
        object.__setattr__(self, "init_center", tuple(float(c) for c in self.init_center))

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown landscape keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        out = asdict(self)
        out["init_center"] = list(self.init_center)
        return out

    @property
    def has_wells(self):
        return self.kind != "rotation_only"

    @property
    def angular_velocity(self):
        return 0.0 if self.kind == "double_well" else float(self.omega)

    @property
    def center(self):
        c = np.zeros(self.dim)
        c[: len(self.init_center)] = self.init_center
        return c

    @property
    def diffusion(self):
        s = np.full(self.dim, float(self.sigma_ambient))
        s[:2] = self.sigma_plane
        return s

    def potential(self, z):
        """``U(z)`` row-wise, including the quadratic OU part of the ambient dims."""
        z = np.atleast_2d(z)
        u = 0.5 * self.ou_rate * np.sum(z[:, 2:] ** 2, axis=1)
        if self.has_wells:
            x = z[:, 0] - self.well_shift
            u = u + (x**2 - 1.0) ** 2 + 0.5 * z[:, 1] ** 2
        return u

    def potential_grad(self, z):
        z = np.atleast_2d(z)
        g = np.zeros_like(z, dtype=float)
        g[:, 2:] = self.ou_rate * z[:, 2:]
        if self.has_wells:
            x = z[:, 0] - self.well_shift
            g[:, 0] = 4.0 * x * (x**2 - 1.0)
            g[:, 1] = z[:, 1]
        return g

    def antisym_matrix(self):
        s = np.zeros((self.dim, self.dim))
        s[0, 1] = -self.angular_velocity
        s[1, 0] = self.angular_velocity
        return s

    def drift(self, z):
        return -self.potential_grad(z) + np.atleast_2d(z) @ self.antisym_matrix().T

    @property
    def is_gradient_flow(self):
        return self.angular_velocity == 0.0 and not self.diffusion.any()


# ---------------------------------------------------------------- simulation
def _step_count(t, dt):
    return max(1, math.ceil(t / dt - 1e-9)) if t > 0 else 0


def _cell_draws(seed, label, keys, n, dim, n_normals):
    """Per-cell standard normals, one independent stream per cell index."""
    out = np.empty((n, n_normals, dim))
    for i in range(n):
        out[i] = numpy_rng(seed, label, *keys, i).standard_normal((n_normals, dim))
    return out


def _integrate(landscape, z0, normals, t, n_steps):
    """Euler-Maruyama over ``n_steps`` equal steps; ``normals`` is ``(n, n_steps, d)``."""
    z = z0.copy()
    if n_steps == 0:
        return z
    dt = t / n_steps
    scale = landscape.diffusion * math.sqrt(dt)
    for k in range(n_steps):
        z = z + landscape.drift(z) * dt + normals[:, k] * scale
    return z


def _descent_path(landscape, z0, t, dt, max_halvings=20):
    # Noise-free gradient flow: halve dt until U is non-increasing on every path.
    for _ in range(max_halvings):
        n_steps = _step_count(t, dt)
        h = t / n_steps
        z, u = z0.copy(), landscape.potential(z0)
        ok = True
        for _ in range(n_steps):
            z = z - landscape.potential_grad(z) * h
            u_next = landscape.potential(z)
            if np.any(u_next > u + 1e-12):
                ok = False
                break
            u = u_next
        if ok:
            return z, h
        dt = dt / 2
    raise ConfigError("gradient flow did not become monotone after repeated dt halving")


def _initial_states(landscape, draws):
    spread = np.full(landscape.dim, float(landscape.ambient_init_std))
    spread[:2] = landscape.init_std
    return landscape.center + spread * draws


def _simulate(landscape, t, n, seed, dt, label, keys):
    if dt <= 0:
        raise ConfigError("dt must be positive")
    if t < 0:
        raise ConfigError("t must be nonnegative")
    if n < 1:
        raise ConfigError("population size must be at least 1")
    n_steps = _step_count(t, dt)
    draws = _cell_draws(seed, label, keys, n, landscape.dim, 1 + n_steps)
    z0 = _initial_states(landscape, draws[:, 0])
    if landscape.is_gradient_flow and n_steps:
        return _descent_path(landscape, z0, t, dt)[0]
    return _integrate(landscape, z0, draws[:, 1:], t, n_steps)


def simulate_population(landscape, t, n, seed, dt=0.01, snapshot_key=0):
    """``n`` independent cells at time ``t``; returns a :class:`Snapshot`.

    Cell ``i`` uses its own random stream keyed by ``(seed, snapshot_key,
    i)``, so the result does not depend on batching or thread count.
    """
    cells = _simulate(landscape, t, n, seed, dt, "population", (snapshot_key,))
    return Snapshot(t=float(t), cells=cells)


def dt_convergence_gap(landscape, t, n, seed, dt=0.01):
    """Relative change of the start-to-end transport distance when ``dt`` is halved.

    Both runs share initial states and Brownian paths (the coarse
    increments are sums of consecutive fine ones).
    """
    from .losses import sinkhorn_w2  # local import keeps the simulator numpy-only
    import torch

    n_fine = 2 * _step_count(t, dt)
    draws = _cell_draws(seed, "convergence", (), n, landscape.dim, 1 + n_fine)
    z0 = _initial_states(landscape, draws[:, 0])
    fine = draws[:, 1:]
    coarse = (fine[:, 0::2] + fine[:, 1::2]) / math.sqrt(2.0)
    end_coarse = _integrate(landscape, z0, coarse, t, n_fine // 2)
    end_fine = _integrate(landscape, z0, fine, t, n_fine)
    as_t = lambda a: torch.as_tensor(a, dtype=torch.float64)  # noqa: E731
    w_coarse = float(sinkhorn_w2(as_t(z0), as_t(end_coarse)))
    w_fine = float(sinkhorn_w2(as_t(z0), as_t(end_fine)))
    return abs(w_coarse - w_fine) / w_coarse


def fate_of(cells, shift=0.0, band=UNDECIDED_BAND):
    """Per-cell basin label from the sign of the first coordinate."""
    x = np.asarray(cells)[:, 0] - shift
    out = np.full(len(x), "undecided", dtype=object)
    out[x <= -band] = "left_well"
    out[x >= band] = "right_well"
    return out


def fate_ratio(labels):
    """``left / (left + right)``; NaN when no cell reached a basin."""
    labels = np.asarray(labels)
    left = np.count_nonzero(labels == "left_well")
    right = np.count_nonzero(labels == "right_well")
    return left / (left + right) if left + right else float("nan")


def _majority(labels):
    left = np.count_nonzero(labels == "left_well")
    right = np.count_nonzero(labels == "right_well")
    if left == right:
        return "undecided"
    return "left_well" if left > right else "right_well"


@dataclass
class CloneBenchmark:
    source: "Snapshot"
    daughters: "Snapshot"
    ratios: np.ndarray

    def to_dataset(self, provenance=None):
        return TrajectoryDataset([self.source, self.daughters], provenance=provenance or {})

    @classmethod
    def from_dataset(cls, ds):
        if len(ds.snapshots) != 2 or not all(s.has_clones for s in ds.snapshots):
            raise DataError("a clone benchmark needs exactly two snapshots with clone columns")
        source, daughters = ds.snapshots
        ratios = np.array(
            [fate_ratio(daughters.fates[daughters.clone_ids == c]) for c in source.clone_ids]
        )
        return cls(source=source, daughters=daughters, ratios=ratios)


def propagate(landscape, states, duration, seed, dt=0.01, label="propagate", chunk=2048):
    """Evolve each row of ``states`` independently for ``duration`` time units.

    Row ``i`` draws its Brownian increments from its own stream keyed by
    ``(seed, label, i)``; rows are processed in chunks to bound memory.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if duration < 0:
        raise ConfigError("duration must be nonnegative")
    n_steps = _step_count(duration, dt)
    if n_steps == 0:
        return states.copy()
    if landscape.is_gradient_flow:
        return _descent_path(landscape, states, duration, dt)[0]
    out = np.empty_like(states)
    for lo in range(0, len(states), chunk):
        hi = min(lo + chunk, len(states))
        normals = np.stack(
            [numpy_rng(seed, label, i).standard_normal((n_steps, landscape.dim)) for i in range(lo, hi)]
        )
        out[lo:hi] = _integrate(landscape, states[lo:hi], normals, duration, n_steps)
    return out


def simulate_clones(landscape, t_source, t_end, n_clones, daughters_per_clone, seed, dt=0.01):
    """Clonal sources at ``t_source`` and their independently evolved daughters at ``t_end``."""
    if t_end < t_source:
        raise ConfigError("t_end must not precede t_source")
    if n_clones < 1 or daughters_per_clone < 1:
        raise ConfigError("need at least one clone and one daughter per clone")
    sources = _simulate(landscape, t_source, n_clones, seed, dt, "clone_sources", ())
    ids = np.repeat(np.arange(n_clones), daughters_per_clone)
    daughters = propagate(landscape, sources[ids], t_end - t_source, seed, dt, label="clone_daughters")
    fates = fate_of(daughters, landscape.well_shift)
    per_clone = [fates[ids == c] for c in range(n_clones)]
    ratios = np.array([fate_ratio(f) for f in per_clone])
    source = Snapshot(
        t=float(t_source),
        cells=sources,
        clone_ids=np.arange(n_clones),
        fates=np.array([_majority(f) for f in per_clone], dtype=object),
    )
    return CloneBenchmark(
        source=source,
        daughters=Snapshot(t=float(t_end), cells=daughters, clone_ids=ids, fates=fates),
        ratios=ratios,
    )


# ---------------------------------------------------------------- datasets
@dataclass
class Snapshot:
    """One unpaired population at a single timepoint."""

    t: float
    cells: np.ndarray
    clone_ids: Optional[np.ndarray] = None
    fates: Optional[np.ndarray] = None

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=float)
        if self.cells.ndim != 2:
            raise DataError("snapshot cells must be a 2-d array")
        if (self.clone_ids is None) != (self.fates is None):
            raise DataError("clone ids and fate labels must be given together")
        if self.clone_ids is not None:
            self.clone_ids = np.asarray(self.clone_ids, dtype=np.int64)
            self.fates = np.asarray(self.fates, dtype=object)
            if not len(self.clone_ids) == len(self.fates) == len(self.cells):
                raise DataError("clone/fate columns must have one entry per cell")
            bad = set(self.fates) - set(FATES)
            if bad:
                raise DataError(f"unknown fate labels {sorted(bad)}")

    @property
    def n(self):
        return self.cells.shape[0]

    @property
    def has_clones(self):
        return self.clone_ids is not None

    def equals(self, other):
        same = self.t == other.t and np.array_equal(self.cells, other.cells)
        if self.has_clones != other.has_clones:
            return False
        if self.has_clones:
            same = same and np.array_equal(self.clone_ids, other.clone_ids)
            same = same and list(self.fates) == list(other.fates)
        return bool(same)


@dataclass
class TrajectoryDataset:
    """Ordered snapshots with a deterministic per-timepoint train/test split."""

    snapshots: list
    split_seed: int = 0
    test_frac: float = 0.2
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.snapshots) < 1:
            raise DataError("a dataset needs at least one snapshot")
        times = [s.t for s in self.snapshots]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DataError("snapshot times must be strictly increasing")
        dims = {s.cells.shape[1] for s in self.snapshots}
        if len(dims) != 1:
            raise DataError("all snapshots must share one dimension")
        if not 0 <= self.test_frac < 1:
            raise DataError("test_frac must lie in [0, 1)")

    @property
    def times(self):
        return tuple(s.t for s in self.snapshots)

    @property
    def dim(self):
        return self.snapshots[0].cells.shape[1]

    def split_indices(self, i):
        """``(train_idx, test_idx)`` for snapshot ``i``, sorted and disjoint."""
        n = self.snapshots[i].n
        perm = numpy_rng(self.split_seed, "split", i).permutation(n)
        n_test = int(round(self.test_frac * n))
        if self.test_frac > 0 and n > 1:
            n_test = min(max(n_test, 1), n - 1)
        return np.sort(perm[n_test:]), np.sort(perm[:n_test])

    def train(self, i):
        return self.snapshots[i].cells[self.split_indices(i)[0]]

    def test(self, i):
        return self.snapshots[i].cells[self.split_indices(i)[1]]

    def index_of(self, t):
        for i, s in enumerate(self.snapshots):
            if s.t == t:
                return i
        raise DataError(f"no snapshot at t={t}")

    def equals(self, other):
        return (
            len(self.snapshots) == len(other.snapshots)
            and all(a.equals(b) for a, b in zip(self.snapshots, other.snapshots))
            and self.split_seed == other.split_seed
            and self.test_frac == other.test_frac
            and self.provenance == other.provenance
        )


def simulate_dataset(landscape, times, n_per_time, seed, dt=0.01, split_seed=None, test_frac=0.2):
    """Independent populations at each of ``times``."""
    if len(times) < 2:
        raise ConfigError("a trajectory needs at least two timepoints")
    snaps = [simulate_population(landscape, t, n_per_time, seed, dt, snapshot_key=i) for i, t in enumerate(times)]
    provenance = {"landscape": landscape.to_dict(), "seed": int(seed), "dt": float(dt)}
    return TrajectoryDataset(
        snaps,
        split_seed=int(seed if split_seed is None else split_seed),
        test_frac=float(test_frac),
        provenance=provenance,
    )


def _format_row(values, clone=None, fate=None):
    text = " ".join("%.17g" % v for v in values)
    if clone is not None:
        text += f" {int(clone)} {fate}"
    return text


def dataset_text(ds):
    lines = [f"{FORMAT_TAG} {FORMAT_VERSION} d={ds.dim} T={len(ds.snapshots)}"]
    for s in ds.snapshots:
        if s.n == 0:
            raise DataError(f"refusing to write an empty snapshot (t={s.t})")
        lines.append(f"SNAP t={s.t!r} n={s.n} clones={int(s.has_clones)}")
        for j, row in enumerate(s.cells):
            if s.has_clones:
                lines.append(_format_row(row, s.clone_ids[j], s.fates[j]))
            else:
                lines.append(_format_row(row))
    return "\n".join(lines) + "\n"


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_dataset(ds, path):
    """Write the data file and its JSON sidecar (split and provenance)."""
    text = dataset_text(ds)
    path = Path(path)
    path.write_text(text)
    meta = {"split_seed": ds.split_seed, "test_frac": ds.test_frac, "provenance": ds.provenance}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def _fields(line, expected, lineno):
    parts = line.split()
    if [p.split("=", 1)[0] for p in parts[1:]] != expected or parts[0] != "SNAP":
        raise DatasetFormatError(f"line {lineno}: malformed snapshot header {line!r}")
    return dict(p.split("=", 1) for p in parts[1:])


def parse_dataset(text):
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError("empty dataset file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != FORMAT_TAG or not head[2].startswith("d=") or not head[3].startswith("T="):
        raise DatasetFormatError(f"malformed header {lines[0]!r}")
    if head[1] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {head[1]!r}; expected {FORMAT_VERSION}")
    try:
        d, n_snap = int(head[2][2:]), int(head[3][2:])
    except ValueError as exc:
        raise DatasetFormatError(f"malformed header {lines[0]!r}") from exc
    pos, snaps = 1, []
    for _ in range(n_snap):
        if pos >= len(lines):
            raise DatasetFormatError("file truncated: missing snapshot header")
        if snaps and not lines[pos].startswith("SNAP"):
            raise DatasetFormatError(
                f"snapshot at t={snaps[-1].t}: header says n={snaps[-1].n} but more rows follow"
            )
        info = _fields(lines[pos], ["t", "n", "clones"], pos + 1)
        try:
            t, n, clones = float(info["t"]), int(info["n"]), int(info["clones"])
        except ValueError as exc:
            raise DatasetFormatError(f"line {pos + 1}: malformed snapshot header") from exc
        if n < 1:
            raise DatasetFormatError(f"line {pos + 1}: empty snapshot")
        rows = lines[pos + 1 : pos + 1 + n]
        width = d + (2 if clones else 0)
        if len(rows) < n or any(len(r.split()) != width or r.startswith("SNAP") for r in rows):
            raise DatasetFormatError(f"snapshot at t={t}: header says n={n} but the rows do not match")
        cols = [r.split() for r in rows]
        try:
            cells = np.array([[float(v) for v in c[:d]] for c in cols])
            ids = np.array([int(c[d]) for c in cols]) if clones else None
        except ValueError as exc:
            raise DatasetFormatError(f"snapshot at t={t}: non-numeric entry") from exc
        fates = np.array([c[d + 1] for c in cols], dtype=object) if clones else None
        try:
            snaps.append(Snapshot(t=t, cells=cells, clone_ids=ids, fates=fates))
        except DataError as exc:
            raise DatasetFormatError(str(exc)) from exc
        pos += 1 + n
    if any(line.strip() for line in lines[pos:]):
        raise DatasetFormatError(
            f"snapshot at t={snaps[-1].t}: header says n={snaps[-1].n} but more rows follow"
        )
    return snaps


def read_dataset(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    snaps = parse_dataset(path.read_text())
    meta = {}
    if sidecar_path(path).exists():
        meta = json.loads(sidecar_path(path).read_text())
    return TrajectoryDataset(
        snaps,
        split_seed=int(meta.get("split_seed", 0)),
        test_frac=float(meta.get("test_frac", 0.2)),
        provenance=meta.get("provenance", {}),
    )
