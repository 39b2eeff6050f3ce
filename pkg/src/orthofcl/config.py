"""Experiment configuration files and presets.

A config file is INI text with one section per settings type::

    [ExperimentConfig]
    num_tasks = 10
    beta = 0.5

    [MemoryConfig]
    rank = 2

Omitted keys keep their defaults; unknown sections or keys are errors.
"""

import configparser
import dataclasses
import io
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from orthofcl.data import RasterFormat, SyntheticConfig
from orthofcl.errors import ConfigError
from orthofcl.federated import RoundConfig
from orthofcl.memory import MemoryConfig
from orthofcl.model import BackboneConfig

logger = logging.getLogger(__name__)

#: The Dirichlet concentrations of the published heterogeneity settings.
BETA_PRESETS = (1.0, 0.5, 0.1)

#: The environment variable read when no thread count is given.
THREADS_ENV = "DOLFIN_THREADS"


@dataclass(frozen=True)
class ExperimentConfig:
    """Every setting of an experiment.

    Parameters
    ----------
    backbone : BackboneConfig
        The backbone shape.
    memory : MemoryConfig
        The subspace memory settings, including the adapter rank.
    round : RoundConfig
        The federated round settings.
    data : SyntheticConfig
        The synthetic dataset settings, unused when `ingest_path` is set.
    num_tasks : int
        The number of tasks T, by default 10.
    beta : float
        The Dirichlet concentration β, by default 0.5.
    lr_adapter, lr_head : float
        The AdamW learning rates of the B matrices and of the head, by
        default 3e-3 and 3e-2.
    weight_decay : float
        The decoupled weight decay, by default 0.01.
    seed : int
        The experiment seed, by default 0.
    ingest_path : str | None
        A raster file to train on instead of synthetic data.
    ingest_format : str
        `"idx"` or `"csv"`, by default `"idx"`.
    random_a : bool
        Use seeded random adapter bases that ignore the memory.
    no_memory_update : bool
        Never grow the subspace memories.
    weighted_a_avg : bool
        Weight the basis average by n_k.
    """

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    round: RoundConfig = field(default_factory=RoundConfig)
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    num_tasks: int = 10
    beta: float = 0.5
    lr_adapter: float = 3e-3
    lr_head: float = 3e-2
    weight_decay: float = 0.01
    seed: int = 0
    ingest_path: str | None = None
    ingest_format: str = "idx"
    random_a: bool = False
    no_memory_update: bool = False
    weighted_a_avg: bool = False

    def __post_init__(self) -> None:
        if self.num_tasks < 1:
            raise ConfigError("There should be at least one task.")

        if self.beta <= 0:
            raise ConfigError("The Dirichlet concentration β should be positive.")

        if min(self.lr_adapter, self.lr_head, self.weight_decay) < 0:
            raise ConfigError("Learning rates and weight decay should be non-negative.")

        if self.rank > self.backbone.embed_dim:
            raise ConfigError(
                f"The rank {self.rank} exceeds the embedding dimension "
                f"{self.backbone.embed_dim}."
            )

        try:
            RasterFormat(self.ingest_format)
        except ValueError:
            raise ConfigError(f"Unknown raster format {self.ingest_format!r}.")

        if not self.ingest_path:
            if self.data.num_classes % self.num_tasks:
                raise ConfigError(
                    f"{self.data.num_classes} classes cannot be split into "
                    f"{self.num_tasks} equal tasks."
                )

            if self.data.input_dim != self.backbone.input_dim:
                raise ConfigError(
                    f"The synthetic input dimension {self.data.input_dim} does "
                    f"not match the backbone's {self.backbone.input_dim}."
                )

    @property
    def rank(self) -> int:
        """The adapter rank r.

        Returns
        -------
        int
            `memory.rank`.
        """

        return self.memory.rank

    def replace(self, **changes: Any) -> "ExperimentConfig":
        """Copy the config with changes, dotted keys reaching into sections.

        Parameters
        ----------
        **changes : Any
            Top-level fields, or `section__field` keys such as
            `memory__rank=4`.

        Returns
        -------
        ExperimentConfig
            The changed config, validated.
        """

        top: dict[str, Any] = {}
        nested: dict[str, dict[str, Any]] = {}
        for key, value in changes.items():
            if "__" in key:
                section, name = key.split("__", 1)
                nested.setdefault(section, {})[name] = value
            else:
                top[key] = value

        for section, values in nested.items():
            top[section] = dataclasses.replace(getattr(self, section), **values)

        return dataclasses.replace(self, **top)

    def to_dict(self) -> dict[str, Any]:
        """The config as a nested mapping, one entry per section.

        Returns
        -------
        dict[str, Any]
            A mapping `from_dict` rebuilds the config from.
        """

        out: dict[str, Any] = {}
        for name, section in _SECTIONS.items():
            if name == "ExperimentConfig":
                out[name] = {
                    f.name: getattr(self, f.name)
                    for f in dataclasses.fields(self)
                    if f.name not in _COMPONENTS
                }
            else:
                component = getattr(self, _COMPONENTS_BY_TYPE[section])
                out[name] = dataclasses.asdict(component)

        return out

    @classmethod
    def from_dict(cls, mapping: dict[str, dict[str, Any]]) -> "ExperimentConfig":
        """Build a config from the mapping of `to_dict`.

        Parameters
        ----------
        mapping : dict[str, dict[str, Any]]
            Section names to field values. Missing sections and fields keep
            their defaults.

        Returns
        -------
        ExperimentConfig
            The config.

        Raises
        ------
        ConfigError
            If a section or field is unknown, or a value is invalid.
        """

        unknown = set(mapping) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"Unknown config sections {sorted(unknown)}.")

        kwargs: dict[str, Any] = {}
        for name, section in _SECTIONS.items():
            values = dict(mapping.get(name, {}))
            known = {f.name for f in dataclasses.fields(section)}
            if name == "ExperimentConfig":
                known -= set(_COMPONENTS)

            extra = set(values) - known
            if extra:
                raise ConfigError(f"Unknown keys {sorted(extra)} in [{name}].")

            if name == "ExperimentConfig":
                kwargs.update(values)
            else:
                kwargs[_COMPONENTS_BY_TYPE[section]] = _build(section, values)

        return _build(cls, kwargs)


_COMPONENTS = {
    "backbone": BackboneConfig,
    "memory": MemoryConfig,
    "round": RoundConfig,
    "data": SyntheticConfig,
}
_COMPONENTS_BY_TYPE = {t: name for name, t in _COMPONENTS.items()}
_SECTIONS: dict[str, type] = {
    "ExperimentConfig": ExperimentConfig,
    "BackboneConfig": BackboneConfig,
    "MemoryConfig": MemoryConfig,
    "RoundConfig": RoundConfig,
    "SyntheticConfig": SyntheticConfig,
}


def _build(cls: type, values: dict[str, Any]) -> Any:
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"Invalid settings for {cls.__name__}: {exc}") from exc


def _coerce(text: str, hint: Any, key: str) -> Any:
    """Convert an INI value to the type of its field."""

    text = text.strip()
    args = typing.get_args(hint)

    if type(None) in args:
        if text.lower() in ("", "none"):
            return None
        hint = next(a for a in args if a is not type(None))

    try:
        if hint is bool:
            lowered = text.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)

        if hint is int:
            return int(text)

        if hint is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {hint.__name__}.")

    return text


def loads_config(text: str) -> ExperimentConfig:
    """Parse config text.

    Parameters
    ----------
    text : str
        The INI text.

    Returns
    -------
    ExperimentConfig
        The config.

    Raises
    ------
    ConfigError
        If the text is malformed, names unknown sections or keys, or holds
        invalid values.
    """

    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # type: ignore[assignment, method-assign]

    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"Malformed config: {exc}") from exc

    mapping: dict[str, dict[str, Any]] = {}
    for name in parser.sections():
        section = _SECTIONS.get(name)
        if section is None:
            raise ConfigError(f"Unknown config section [{name}].")

        hints = typing.get_type_hints(section)
        values = {}
        for key, raw in parser.items(name):
            if key not in hints or key in _COMPONENTS and name == "ExperimentConfig":
                raise ConfigError(f"Unknown key {key!r} in [{name}].")
            values[key] = _coerce(raw, hints[key], f"[{name}] {key}")
        mapping[name] = values

    return ExperimentConfig.from_dict(mapping)


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a config file.

    Parameters
    ----------
    path : str | Path
        The INI file.

    Returns
    -------
    ExperimentConfig
        The config.

    Raises
    ------
    ConfigError
        If the file is missing or invalid.
    """

    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"Cannot read config {path}: {exc}") from exc

    logger.debug("loading config from %s", path)
    return loads_config(text)


def to_ini(config: ExperimentConfig) -> str:
    """Write a config as INI text.

    Parameters
    ----------
    config : ExperimentConfig
        The config.

    Returns
    -------
    str
        Text `loads_config` reads back to an equal config. Unset optional
        values are written as `none`.
    """

    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # type: ignore[assignment, method-assign]

    for name, values in config.to_dict().items():
        parser[name] = {
            k: "none" if v is None else repr(v) if isinstance(v, float) else str(v)
            for k, v in values.items()
        }

    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def _preset(
    lr_adapter: float,
    lr_head: float,
    rank: int,
    embed_dim: int,
    beta: float,
) -> ExperimentConfig:
    return ExperimentConfig(
        backbone=BackboneConfig(embed_dim=embed_dim),
        memory=MemoryConfig(rank=rank),
        beta=beta,
        lr_adapter=lr_adapter,
        lr_head=lr_head,
    )


#: The published hyperparameters per benchmark, scaled to the synthetic
#: backbone. Ranks above the default width widen the embedding.
PRESETS: dict[str, ExperimentConfig] = {
    "cifar100": _preset(3e-3, 3e-3, 2, 32, 0.5),
    "imagenet-r": _preset(1e-3, 1e-3, 64, 128, 0.5),
    "imagenet-a": _preset(3e-3, 3e-2, 32, 64, 1.0),
    "cub200": _preset(1e-2, 1e-2, 1, 32, 1.0),
}


def preset(name: str) -> ExperimentConfig:
    """Look up a named preset.

    Parameters
    ----------
    name : str
        One of `PRESETS`.

    Returns
    -------
    ExperimentConfig
        The preset config.

    Raises
    ------
    ConfigError
        If the name is unknown.
    """

    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"Unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}."
        ) from None
