"""Experiment configuration: a JSON document with three sections.

Every key is optional and defaults to the value shown by
``Config().as_dict()``; unknown keys anywhere are rejected.

``task``
    generator, seed, sizes and task parameters for the training and test
    sets, or ``train_path``/``test_path`` pointing at dataset files.
``model``
    ``space`` is ``"context"`` (left/right offsets ``0..d_max`` searched
    per layer at fixed width ``bottleneck``) or ``"dim"`` (widths from
    ``dims`` searched at fixed ``left``/``right`` context per layer).
``search``
    the fields of :class:`tdnnas.search.SearchConfig`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .formats import config_hash
from .search import SearchConfig, TaskData
from .supernet import SearchSpace, context_space, dim_space
from .tasks import Dataset, GENERATORS, gen_lagged_product, gen_planted_bottleneck, load_dataset


class ConfigError(ValueError):
    pass


@dataclass
class TaskConfig:
    generator: str = "lagged-product"
    seed: int = 0
    lag: int = 2
    rank: int = 4
    classes: int = 4
    F: int = 8
    n_seq: int = 2000
    T_seq: int = 200
    test_n_seq: int = 200
    train_path: str | None = None
    test_path: str | None = None

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"task.generator must be one of {sorted(GENERATORS)}, got {self.generator!r}")
        for name in ("n_seq", "T_seq", "test_n_seq", "F"):
            if getattr(self, name) < 1:
                raise ConfigError(f"task.{name} must be positive")

    def generate(self, part: int) -> Dataset:
        n = self.n_seq if part == 0 else self.test_n_seq
        if self.generator == "lagged-product":
            return gen_lagged_product(self.seed, self.lag, n, self.T_seq, self.F, part)
        return gen_planted_bottleneck(self.seed, self.rank, n, self.T_seq, self.F, self.classes, part)


@dataclass
class ModelConfig:
    space: str = "context"
    layers: int = 2
    hidden_dim: int = 32
    d_max: int = 3
    bottleneck: int = 8
    dims: list[int] = field(default_factory=lambda: [2, 4, 8, 16])
    left: list[int] = field(default_factory=lambda: [1, 1])
    right: list[int] = field(default_factory=lambda: [1, 1])

    def __post_init__(self):
        if self.space not in ("context", "dim"):
            raise ConfigError(f"model.space must be 'context' or 'dim', got {self.space!r}")
        if self.layers < 1 or self.hidden_dim < 1:
            raise ConfigError("model.layers and model.hidden_dim must be positive")
        if self.space == "dim" and not (len(self.left) == len(self.right) == self.layers):
            raise ConfigError(f"model.left and model.right need one entry per layer ({self.layers})")


@dataclass
class Config:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    out: str = "runs"

    def as_dict(self) -> dict:
        return {"task": asdict(self.task), "model": asdict(self.model), "search": self.search.as_dict(), "out": self.out}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Config":
        if not isinstance(data, Mapping):
            raise ConfigError("config must be a JSON object")
        _reject_unknown(data, {"task", "model", "search", "out"}, "config")
        try:
            return cls(
                task=_section(TaskConfig, data.get("task", {}), "task"),
                model=_section(ModelConfig, data.get("model", {}), "model"),
                search=_section(SearchConfig, data.get("search", {}), "search"),
                out=str(data.get("out", "runs")),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def digest(self) -> str:
        """Hash of everything that determines results; the output directory is excluded."""
        d = self.as_dict()
        d.pop("out")
        return config_hash(d)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def build_space(self) -> SearchSpace:
        m, t = self.model, self.task
        classes = 2 if t.generator == "lagged-product" else t.classes
        if m.space == "context":
            return context_space(m.layers, m.d_max, t.F, classes, m.hidden_dim, m.bottleneck)
        return dim_space(m.layers, tuple(m.dims), t.F, classes, m.hidden_dim,
                         left=tuple(m.left), right=tuple(m.right))

    def build_data(self) -> TaskData:
        t = self.task
        train = load_dataset(t.train_path) if t.train_path else t.generate(0)
        test = load_dataset(t.test_path) if t.test_path else t.generate(1)
        return TaskData.from_split(train, test, self.search.heldout_frac, self.search.seed)


def _reject_unknown(data: Mapping, allowed: set[str], where: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _section(cls, data: Mapping, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where} must be an object")
    _reject_unknown(data, {f.name for f in fields(cls)}, where)
    return cls(**data)


def load_config(path) -> Config:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return Config.from_dict(data)
