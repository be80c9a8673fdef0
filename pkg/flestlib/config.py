from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import pathlib
import re
from dataclasses import dataclass
from logging import getLogger
from typing import Any, Mapping

import yaml

from . import constants, errors
from .enums import TrainingMode
from .federation import RunConfig
from .model import Hyper


__all__ = ("ExperimentConfig", "load_config", "read_config_file")


logger = getLogger(__name__)

try:
    from yaml import CSafeLoader as SafeLoader

    logger.debug("Successfully imported pyyaml CSafeLoader.")
except ImportError:
    from yaml import SafeLoader

    logger.debug("Failed to import pyyaml CSafeLoader, falling back to the pure Python loader.")


_FLAT_LINE = re.compile(r"^\s*([A-Za-z_]\w*)\s*=\s*(.*?)\s*$")


_UNHASHED_FIELDS = frozenset({"output_dir", "max_workers"})
"""Fields that never change a run's numbers."""


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    """A triple file or a train/valid/test directory. Unset means the built-in synthetic KG."""
    num_clients: int = 5
    rank: int = constants.REFERENCE_DEFAULTS["rank"]
    sparsity: float = constants.REFERENCE_DEFAULTS["sparsity"]
    alpha: float = 0.01
    beta: float = 1e-5
    lr: float = constants.REFERENCE_DEFAULTS["lr"]
    dropout: float = constants.REFERENCE_DEFAULTS["dropout"]
    batch_size: int = constants.REFERENCE_DEFAULTS["batch_size"]
    local_epochs: int = constants.REFERENCE_DEFAULTS["local_epochs"]
    rounds_max: int = constants.REFERENCE_DEFAULTS["rounds_max"]
    patience: int = 15
    eval_every: int = 5
    partition_seed: int = 0
    init_seed: int = 0
    shuffle_seed: int = 0
    mode: TrainingMode = TrainingMode.federated
    max_workers: int = 1
    output_dir: str = "runs/flest"
    synthetic_entities: int = 20
    synthetic_relations: int = 3
    synthetic_triples: int = 120
    synthetic_rank: int = 8
    synthetic_seed: int = 0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is None or f.name == "mode":
                continue
            # YAML reads "1e-5" as a string, and flags arrive as strings too.
            kind = type(f.default) if f.default is not None else str
            try:
                setattr(self, f.name, kind(value))
            except (TypeError, ValueError) as e:
                raise errors.ConfigError(f'Field "{f.name}" expects {kind.__name__}, got "{value}".') from e
            if kind is int and isinstance(value, float) and value != int(value):
                raise errors.ConfigError(f'Field "{f.name}" expects an integer, got {value}.')

        if isinstance(self.mode, str):
            try:
                self.mode = TrainingMode(self.mode)
            except ValueError as e:
                raise errors.ConfigError(f'Unknown mode "{self.mode}".') from e
        self.validate()

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls))

    def validate(self):
        # Hyper and RunConfig own the numeric range checks.
        self.to_run_config()
        for name in ("synthetic_entities", "synthetic_relations", "synthetic_triples", "synthetic_rank"):
            if getattr(self, name) < 1:
                raise errors.ConfigError(f"{name} must be at least 1, got {getattr(self, name)}.")

    def to_hyper(self) -> Hyper:
        return Hyper(
            alpha=self.alpha,
            beta=self.beta,
            lr=self.lr,
            dropout_rate=self.dropout,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
        )

    def to_run_config(self) -> RunConfig:
        return RunConfig(
            num_clients=self.num_clients,
            rounds_max=self.rounds_max,
            hyper=self.to_hyper(),
            rank=self.rank,
            sparsity=self.sparsity,
            init_seed=self.init_seed,
            shuffle_seed=self.shuffle_seed,
            mode=self.mode,
            patience=self.patience,
            eval_every=self.eval_every,
            max_workers=self.max_workers,
        )

    def to_dict(self) -> dict[str, Any]:
        ret = dataclasses.asdict(self)
        ret["mode"] = self.mode.value
        return ret

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        """SHA-256 hex digest of the canonical JSON of every result-affecting field."""
        hashed = {name: value for name, value in self.to_dict().items() if name not in _UNHASHED_FIELDS}
        return hashlib.sha256(json.dumps(hashed, sort_keys=True).encode("utf-8")).hexdigest()

    def log_fields(self):
        logger.info("Experiment configuration:")
        for name, value in self.to_dict().items():
            logger.info("  %s: %s", name, value)


def _read_flat_lines(text: str) -> dict[str, Any] | None:
    """``field = value`` lines, or None when any non-comment line is not one."""
    ret = {}
    for line in text.splitlines():
        if line.strip() == "" or line.lstrip().startswith("#"):
            continue
        match = _FLAT_LINE.match(line)
        if match is None:
            return None
        ret[match[1]] = yaml.load(match[2], Loader=SafeLoader)
    return ret or None


def read_config_file(path: str | pathlib.Path) -> dict[str, Any]:
    """A flat mapping of ``field: value`` YAML or ``field = value`` lines. Unknown fields are rejected."""
    path = pathlib.Path(path)
    logger.debug('Loading config file at "%s".', path)
    try:
        with open(path, "r", encoding="utf-8") as file:
            text = file.read()
        data = _read_flat_lines(text)
        if data is None:
            data = yaml.load(text, Loader=SafeLoader)
    except yaml.YAMLError as e:
        raise errors.ConfigError(f'Config file "{path}" is not valid YAML: {e}') from e

    if data is None:
        return {}
    if not isinstance(data, dict):
        raise errors.ConfigError(f'Config file "{path}" must be a mapping of field: value.')

    known = ExperimentConfig.field_names()
    for key, value in data.items():
        if key not in known:
            raise errors.ConfigError(f'Config file "{path}" sets unknown field "{key}".')
        if isinstance(value, (dict, list)):
            raise errors.ConfigError(f'Config file "{path}" field "{key}" must be a scalar.')
    return data


def load_config(
    path: str | pathlib.Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> ExperimentConfig:
    """Defaults, then the config file, then the output dir environment variable, then ``overrides``."""
    environ = os.environ if environ is None else environ
    values: dict[str, Any] = {}
    if path is not None:
        values.update(read_config_file(path))
    if env_output_dir := environ.get(constants.OUTPUT_DIR_ENV):
        values["output_dir"] = env_output_dir
    if overrides:
        unknown = set(overrides) - set(ExperimentConfig.field_names())
        if unknown:
            raise errors.ConfigError(f"Unknown config field(s): {', '.join(sorted(unknown))}.")
        values.update({key: value for key, value in overrides.items() if value is not None})

    try:
        return ExperimentConfig(**values)
    except TypeError as e:
        raise errors.ConfigError(str(e)) from e
