"""TOML-backed configuration for the command-line tools.

A config file holds up to six tables -- ``[mpc]``, ``[dataset]``,
``[train]``, ``[episode]``, ``[tune]``, ``[experiment]`` -- each of which
overrides the defaults of the corresponding run stage.  Every key is
optional; an empty or absent file yields the built-in defaults.  Unknown
tables, unknown keys, wrong types, and values that fail the target
dataclass's own validation all raise :class:`ConfigError`, which the CLI
maps to exit code 2.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - version-dependent import
    import tomli as tomllib

from .mpc import MpcConfig
from .simloop import EpisodeConfig


class ConfigError(ValueError):
    """A config file could not be parsed or validated."""


_DEFAULT_BOX_LOWER = (-0.39, -math.pi, -3.0, -14.0)
_DEFAULT_BOX_UPPER = (0.39, math.pi, 3.0, 14.0)


@dataclass(frozen=True)
class DatasetSection:
    """Controls for `gen-dataset`: sample count and state sampling box.

    The default box spans the full rail and angle range with angular rates
    up to +-14 rad/s, wide enough to cover the states visited by the
    closed-loop controller during a swing-up.
    """

    n_samples: int = 12000
    box_lower: tuple = _DEFAULT_BOX_LOWER
    box_upper: tuple = _DEFAULT_BOX_UPPER
    workers: int | None = None

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if len(self.box_lower) != 4 or len(self.box_upper) != 4:
            raise ValueError("box_lower and box_upper must each have 4 entries")
        if self.workers is not None and self.workers < 1:
            raise ValueError("workers must be >= 1 when given")


@dataclass(frozen=True)
class TrainSection:
    """Controls for `train`: optimizer settings shared by both networks.

    The sensitivity network trains with a seed offset of +1 from the action
    network so the two do not share mini-batch streams.
    """

    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    val_fraction: float = 0.1
    lr_schedule: str = "constant"
    mirror_augment: bool = False
    action_hidden: tuple | None = None  # None -> library default
    sens_hidden: tuple | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0.0 < self.val_fraction < 0.5):
            raise ValueError("val_fraction must be in (0, 0.5)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        for name in ("action_hidden", "sens_hidden"):
            sizes = getattr(self, name)
            if sizes is not None and (
                    len(sizes) < 1 or any(int(v) < 1 for v in sizes)):
                raise ValueError(f"{name} must be a non-empty list of widths >= 1")


@dataclass(frozen=True)
class EpisodeSection:
    """Closed-loop episode shape used by `eval`, `tune`, and `experiment`."""

    duration: float = 20.0
    control_rate: float = 50.0
    sim_dt: float = 0.002

    def to_episode_config(self, **overrides) -> EpisodeConfig:
        return EpisodeConfig(duration=self.duration,
                             control_rate=self.control_rate,
                             sim_dt=self.sim_dt, **overrides)

    def __post_init__(self):
        # Delegate numeric validation to the episode config itself.
        try:
            self.to_episode_config()
        except ValueError as exc:
            raise ValueError(f"invalid episode settings: {exc}") from exc


@dataclass(frozen=True)
class TuneSection:
    """Controls for a single tuning run (`tune`)."""

    episodes: int = 18
    method: str = "turbo"
    init_jitter: float = 0.05
    eval_episodes: int = 3
    n_candidates: int | None = None

    def __post_init__(self):
        if self.episodes < 2:
            raise ValueError("episodes must be >= 2")
        if self.method not in ("turbo", "sobol"):
            raise ValueError(f"method must be 'turbo' or 'sobol', got {self.method!r}")
        if self.init_jitter < 0:
            raise ValueError("init_jitter must be >= 0")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")
        if self.n_candidates is not None and self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1 when given")


@dataclass(frozen=True)
class ExperimentSection:
    """Controls for the batch study (`experiment`)."""

    n_instances: int = 20
    episodes: int = 18
    methods: tuple = ("turbo", "sobol")
    seeds: tuple = (0, 1, 2)
    init_jitter: float = 0.05
    eval_episodes: int = 3
    n_candidates: int | None = None
    workers: int | None = None

    def __post_init__(self):
        if self.n_instances < 1:
            raise ValueError("n_instances must be >= 1")
        if self.episodes < 2:
            raise ValueError("episodes must be >= 2")
        if not self.methods or any(m not in ("turbo", "sobol") for m in self.methods):
            raise ValueError("methods must be a non-empty subset of ['turbo', 'sobol']")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("methods must not repeat")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must not repeat")
        if self.init_jitter < 0:
            raise ValueError("init_jitter must be >= 0")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")
        if self.n_candidates is not None and self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1 when given")
        if self.workers is not None and self.workers < 1:
            raise ValueError("workers must be >= 1 when given")


# [mpc] keys map straight onto MpcConfig; the nested physical-constants
# object stays at its library default and is not reachable from TOML.
_MPC_KEYS = tuple(f.name for f in dataclasses.fields(MpcConfig)
                  if f.name != "constants")

_INT_FIELDS = frozenset({
    "n_samples", "workers", "epochs", "batch_size", "n_horizon", "max_iter",
    "episodes", "eval_episodes", "n_candidates", "n_instances",
})

_BOOL_FIELDS = frozenset({"mirror_augment"})


@dataclass(frozen=True)
class AppConfig:
    """All tool settings resolved from a TOML file (or pure defaults)."""

    mpc: MpcConfig = field(default_factory=MpcConfig)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainSection = field(default_factory=TrainSection)
    episode: EpisodeSection = field(default_factory=EpisodeSection)
    tune: TuneSection = field(default_factory=TuneSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)


def _coerce(section: str, key: str, value):
    """Map TOML values onto dataclass field types, rejecting mismatches."""
    if key in _BOOL_FIELDS:
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {key}: expected a boolean, "
                              f"got {value!r}")
        return value
    if isinstance(value, bool):  # bool is an int subclass; never wanted here
        raise ConfigError(f"[{section}] {key}: boolean is not a valid value")
    if key in _INT_FIELDS:
        if not isinstance(value, int):
            raise ConfigError(f"[{section}] {key}: expected an integer, "
                              f"got {value!r}")
        return value
    if isinstance(value, list):
        out = []
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float, str)):
                raise ConfigError(f"[{section}] {key}: list entries must be "
                                  f"numbers or strings, got {v!r}")
            out.append(v)
        return tuple(out)
    if isinstance(value, int):
        return float(value) if key not in ("seeds",) else value
    if isinstance(value, (float, str)):
        return value
    raise ConfigError(f"[{section}] {key}: unsupported value {value!r}")


def _build_section(section: str, cls, raw: dict, allowed: tuple):
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"[{section}] has unknown keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(section, k, v) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


_SECTIONS = {
    "mpc": (MpcConfig, _MPC_KEYS),
    "dataset": (DatasetSection, tuple(f.name for f in dataclasses.fields(DatasetSection))),
    "train": (TrainSection, tuple(f.name for f in dataclasses.fields(TrainSection))),
    "episode": (EpisodeSection, tuple(f.name for f in dataclasses.fields(EpisodeSection))),
    "tune": (TuneSection, tuple(f.name for f in dataclasses.fields(TuneSection))),
    "experiment": (ExperimentSection, tuple(f.name for f in dataclasses.fields(ExperimentSection))),
}


def load_config(path=None) -> AppConfig:
    """Read a TOML file into an :class:`AppConfig` (defaults when path is None)."""
    if path is None:
        return AppConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config tables: {', '.join(unknown)}")
    kwargs = {}
    for name, (cls, allowed) in _SECTIONS.items():
        raw = doc.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"[{name}] must be a table")
        kwargs[name] = _build_section(name, cls, raw, allowed)
    cfg = AppConfig(**kwargs)
    # [mpc] values flow into dataclasses with their own validation.
    try:
        cfg.mpc.validate()
    except ValueError as exc:
        raise ConfigError(f"[mpc]: {exc}") from exc
    # A dataset box must be a valid sampling region for the plant at hand.
    lo = np.asarray(cfg.dataset.box_lower, dtype=float)
    hi = np.asarray(cfg.dataset.box_upper, dtype=float)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ConfigError("[dataset]: box bounds must be finite numbers")
    if not np.all(lo < hi):
        raise ConfigError("[dataset]: box_lower must be strictly below box_upper")
    return cfg
