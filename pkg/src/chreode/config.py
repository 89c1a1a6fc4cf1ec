"""Run configuration documents (YAML) with strict key checking.

Schema (every section and key optional; unknown keys are errors)::

    seed: 0
    simulate:
      landscape: {kind, dim, omega, sigma_plane, sigma_ambient, ou_rate,
                  well_shift, init_center, init_std, ambient_init_std}
      times: [0.25, 0.75, 1.25, 2.0]
      n_per_time: 2000
      dt: 0.01
      test_frac: 0.2
      clones: {t_source, t_end, n_clones, daughters_per_clone}   # or null
    train: {TrainConfig fields; weights: {mmd, w2, drift, down}}
    eval: {k_eval: 32, seeds: 3, fate_k: 32, knn: 20}
    ablate: {seeds: 3, variants: [...]}
"""

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .exceptions import ConfigError
from .landscape import Landscape
from .trainer import TrainConfig

ABLATION_VARIANTS = (
    "selected",
    "unconstrained",
    "tied_time2vec",
    "tied_fourier",
    "single_delta",
    "no_drift",
    "no_down",
)


def _strict(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {sorted(unknown)}")
    return data


@dataclass
class CloneConfig:
    t_source: float = 0.25
    t_end: float = 2.0
    n_clones: int = 200
    daughters_per_clone: int = 128


@dataclass
class SimulateConfig:
    landscape: Landscape = field(default_factory=Landscape)
    times: tuple = (0.25, 0.75, 1.25, 2.0)
    n_per_time: int = 2000
    dt: float = 0.01
    test_frac: float = 0.2
    clones: Optional[CloneConfig] = field(default_factory=CloneConfig)

    def __post_init__(self):
        self.times = tuple(float(t) for t in self.times)
        if len(self.times) < 2:
            raise ConfigError("simulate.times needs at least two timepoints")
        if self.n_per_time < 1:
            raise ConfigError("simulate.n_per_time must be at least 1 (empty snapshots are not allowed)")
        if self.dt <= 0:
            raise ConfigError("simulate.dt must be positive")

    @classmethod
    def from_dict(cls, data):
        data = _strict(cls, data, "simulate")
        if isinstance(data, cls):
            return data
        data = dict(data)
        if "landscape" in data:
            data["landscape"] = Landscape.from_dict(data["landscape"] or {})
        if "clones" in data and data["clones"] is not None:
            data["clones"] = CloneConfig(**_strict(CloneConfig, data["clones"], "simulate.clones"))
        return cls(**data)

    def to_dict(self):
        return {
            "landscape": self.landscape.to_dict(),
            "times": list(self.times),
            "n_per_time": self.n_per_time,
            "dt": self.dt,
            "test_frac": self.test_frac,
            "clones": asdict(self.clones) if self.clones is not None else None,
        }


@dataclass
class EvalConfig:
    k_eval: int = 32
    seeds: int = 3
    fate_k: int = 32
    knn: int = 20

    def __post_init__(self):
        if min(self.k_eval, self.seeds, self.fate_k, self.knn) < 1:
            raise ConfigError("eval settings must be positive integers")


@dataclass
class AblateConfig:
    seeds: int = 3
    variants: tuple = ABLATION_VARIANTS

    def __post_init__(self):
        self.variants = tuple(self.variants)
        bad = set(self.variants) - set(ABLATION_VARIANTS)
        if bad:
            raise ConfigError(f"unknown ablation variants {sorted(bad)}; expected from {ABLATION_VARIANTS}")
        if "selected" not in self.variants:
            raise ConfigError("the ablation grid must include the selected variant")


@dataclass
class RunConfig:
    seed: int = 0
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    @classmethod
    def from_dict(cls, data):
        data = _strict(cls, data or {}, "<root>")
        if isinstance(data, cls):
            return data
        out = cls(seed=int(data.get("seed", 0)))
        if "simulate" in data:
            out.simulate = SimulateConfig.from_dict(data["simulate"] or {})
        if "train" in data:
            out.train = TrainConfig.from_dict(data["train"] or {})
        if "eval" in data:
            out.eval = EvalConfig(**_strict(EvalConfig, data["eval"] or {}, "eval"))
        if "ablate" in data:
            out.ablate = AblateConfig(**_strict(AblateConfig, data["ablate"] or {}, "ablate"))
        return out

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(data or {})

    def to_dict(self):
        return {
            "seed": self.seed,
            "simulate": self.simulate.to_dict(),
            "train": self.train.to_dict(),
            "eval": asdict(self.eval),
            "ablate": {"seeds": self.ablate.seeds, "variants": list(self.ablate.variants)},
        }

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
