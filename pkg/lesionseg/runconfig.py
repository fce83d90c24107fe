## lesionseg/runconfig.py

"""
Per-run tunables.

A run config is a plain-text file of ``key = value`` lines (``#`` starts a
comment) read with python-decouple's RepositoryEnv. Command-line flags
override file values, which override the defaults below.
"""

import logging
import os
import typing
from dataclasses import dataclass, fields, replace
from typing import Any, Dict, Optional

from decouple import RepositoryEnv

from segmentation.densecrf import CrfParams
from segmentation.exceptions import ConfigError
from segmentation.network import BackboneConfig
from segmentation.network.config import AGGREGATION_MODES, POOL_FACTOR
from segmentation.trainer import SgdConfig

logger = logging.getLogger(__name__)

PRESETS = ("desk", "full")
TRUE_WORDS = ("1", "true", "yes", "on", "y", "t")
FALSE_WORDS = ("0", "false", "no", "off", "n", "f", "")


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    working_size: int = 224
    seed: int = 0
    learning_rate: Optional[float] = None
    momentum: float = 0.9
    weight_decay: float = 0.0005
    iterations: int = 500
    decay_biases: bool = True
    aux_loss: bool = False
    aggregation: str = "learned"
    crf_omega1: float = 3.0
    crf_omega2: float = 5.0
    crf_sigma_alpha: float = 3.0
    crf_sigma_beta: float = 60.0
    crf_sigma_gamma: float = 3.0
    crf_iters: int = 10
    crf_window: int = 9
    se_radius: int = 1
    input_dir: str = "data/input"
    output_dir: str = "data/output"
    checkpoint: str = "data/lesionseg.ckpt"
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        issues = []

        if self.preset not in PRESETS:
            issues.append(f"preset must be one of {PRESETS}, got '{self.preset}'")
        if self.aggregation not in AGGREGATION_MODES:
            issues.append(f"aggregation must be one of {AGGREGATION_MODES}, got '{self.aggregation}'")
        if self.working_size < POOL_FACTOR or self.working_size % POOL_FACTOR:
            issues.append(f"working_size must be a positive multiple of {POOL_FACTOR}")
        if self.learning_rate is not None and not self.learning_rate > 0:
            issues.append(f"learning_rate must be positive, got {self.learning_rate}")
        if self.iterations < 0:
            issues.append(f"iterations must be nonnegative, got {self.iterations}")
        if self.crf_iters < 1:
            issues.append(f"crf_iters must be positive, got {self.crf_iters}")
        if self.crf_window < 0:
            issues.append(f"crf_window must be nonnegative, got {self.crf_window}")
        if self.se_radius < 1:
            issues.append(f"se_radius must be positive, got {self.se_radius}")
        if self.workers < 1:
            issues.append(f"workers must be positive, got {self.workers}")

        if issues:
            logger.error(f"Run config validation failed: {issues}")
            raise ConfigError(issues)

    @classmethod
    def field_types(cls) -> Dict[str, Any]:
        hints = typing.get_type_hints(cls)
        return {f.name: hints[f.name] for f in fields(cls)}

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        if not os.path.isfile(path):
            raise ConfigError([f"Config file {path} does not exist"])

        repository = RepositoryEnv(os.fspath(path))
        types = cls.field_types()
        unknown = sorted(set(repository.data) - set(types))
        if unknown:
            logger.error(f"Unknown keys in {path}: {unknown}")
            raise ConfigError([f"unknown key '{key}'" for key in unknown])

        values, issues = {}, []
        for key, raw in repository.data.items():
            try:
                values[key] = _cast(raw, types[key])
            except ValueError as e:
                issues.append(f"{key}: {e}")
        if issues:
            logger.error(f"Bad values in {path}: {issues}")
            raise ConfigError(issues)

        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def with_overrides(self, **overrides) -> "RunConfig":
        unknown = sorted(set(overrides) - set(self.field_types()))
        if unknown:
            raise ConfigError([f"unknown key '{key}'" for key in unknown])
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def save(self, path) -> str:
        lines = [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)]
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
        return os.fspath(path)

    def network_config(self) -> BackboneConfig:
        size = (self.working_size, self.working_size)
        return BackboneConfig.preset(self.preset, size, aggregation=self.aggregation)

    def sgd_config(self) -> SgdConfig:
        options = dict(
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            iterations=self.iterations,
            seed=self.seed,
            decay_biases=self.decay_biases,
            aux_loss=self.aux_loss,
        )
        if self.learning_rate is not None:
            return SgdConfig(learning_rate=self.learning_rate, **options)
        if self.preset == "full":
            return SgdConfig.full(**options)
        return SgdConfig.desk(**options)

    def crf_params(self) -> CrfParams:
        return CrfParams(
            omega1=self.crf_omega1,
            omega2=self.crf_omega2,
            sigma_alpha=self.crf_sigma_alpha,
            sigma_beta=self.crf_sigma_beta,
            sigma_gamma=self.crf_sigma_gamma,
            iterations=self.crf_iters,
            window_radius=self.crf_window or None,
        )


def _cast(raw: str, kind) -> Any:
    text = raw.strip()
    if kind == Optional[float]:
        return float(text) if text else None
    if kind is bool:
        word = text.lower()
        if word in TRUE_WORDS:
            return True
        if word in FALSE_WORDS:
            return False
        raise ValueError(f"not a boolean: '{raw}'")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
