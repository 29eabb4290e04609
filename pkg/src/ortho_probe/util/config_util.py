from __future__ import annotations

import os
import json

from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Tuple

from .error_util import ConfigError
from .objective_util import ObjectiveId, Structure, check_mode, objective_groups, parse_objectives
from .probe_util import Hyperparams
from .train_util import TrainConfig
from .embedding_util import PlantedSpec
from .checkpoint_util import get_extension_for_mode

__all__ = [
    "SPLITS",
    "SyntheticConfig",
    "ExperimentConfig",
    "load_experiment_config",
    "get_worker_count",
]

SPLITS = ("train", "dev", "test")
TRAIN_KEYS = (
    "batch_size",
    "initial_lr",
    "lr_decay_factor",
    "patience_updates",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "max_epochs",
    "rotation_lr_scale",
    "calibrate_initial_scale",
)
HYPER_KEYS = (
    "lambda_orthogonal",
    "lambda_sparsity",
    "sparsity_trigger",
    "sparsity_warmup_epochs",
    "clip_norm",
    "orthogonality_penalty",
)

@dataclass(frozen=True)
class SyntheticConfig:
    """
    Planted data written by `synth` in place of real treebanks and embeddings.
    """
    ambient_dim: int = 64
    planted_structures: Tuple[str, ...] = ("dep",)
    planted_rank: Optional[int] = None
    noise_scale: float = 0.1
    rotation_seed: int = 0
    min_length: int = 5
    max_length: int = 20
    sentences: Dict[str, int] = field(default_factory=lambda: {"train": 300, "dev": 50, "test": 50})

    def planted_spec(self, tree_seed: int=0) -> PlantedSpec:
        """
        The planting recipe shared by every split; the rank defaults to the
        longest sentence minus one so all splits use the same blocks.
        """
        return PlantedSpec(
            ambient_dim=self.ambient_dim,
            planted_structures=tuple(Structure(name) for name in self.planted_structures),
            noise_scale=self.noise_scale,
            rotation_seed=self.rotation_seed,
            planted_rank=self.planted_rank if self.planted_rank is not None else max(self.max_length - 1, 1),
            tree_seed=tree_seed,
        )

@dataclass(frozen=True)
class ExperimentConfig:
    """
    One experiment: data locations, the training mode and objectives, the
    layers and seeds to run, and optimizer settings.

    Embedding paths are per-split templates containing `{layer}`. With a
    `synthetic` section, data paths default to files under
    `<output_dir>/data` written by `synth`.
    """
    treebanks: Dict[str, str] = field(default_factory=dict)
    embeddings: Dict[str, str] = field(default_factory=dict)
    synthetic: Optional[SyntheticConfig] = None
    taxonomy: Optional[str] = None
    mode: str = "A"
    objectives: Tuple[str, ...] = ("dep-distance",)
    layers: Tuple[int, ...] = (0,)
    seeds: Tuple[int, ...] = (0,)
    train: Dict[str, Any] = field(default_factory=dict)
    output_dir: str = "output"
    epsilon: float = 1e-4

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> ExperimentConfig:
        """
        >>> ExperimentConfig.from_dict({"mode": "e", "objectives": ["all"], "synthetic": {}}).mode
        'e'

        :raises ConfigError: On unknown keys or wrongly typed sections.
        """
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
        values = dict(data)
        synthetic = values.pop("synthetic", None)
        if synthetic is not None:
            if not isinstance(synthetic, dict):
                raise ConfigError("synthetic", "expected an object")
            synthetic_known = {f.name for f in fields(SyntheticConfig)}
            for key in synthetic:
                if key not in synthetic_known:
                    raise ConfigError(f"synthetic.{key}", "unknown configuration key")
            if "sentences" in synthetic:
                synthetic = dict(synthetic, sentences=dict(SyntheticConfig().sentences, **synthetic["sentences"]))
            if "planted_structures" in synthetic:
                synthetic = dict(synthetic, planted_structures=tuple(synthetic["planted_structures"]))
            values["synthetic"] = SyntheticConfig(**synthetic)
        for key in ("objectives", "layers", "seeds"):
            if key in values:
                if not isinstance(values[key], (list, tuple)):
                    raise ConfigError(key, "expected a list")
                values[key] = tuple(values[key])
        for key in ("treebanks", "embeddings", "train"):
            if key in values and not isinstance(values[key], dict):
                raise ConfigError(key, "expected an object")
        return cls(**values)

    def with_overrides(self, **overrides: Any) -> ExperimentConfig:
        """
        Replaces the given keys; None values leave a key untouched.
        """
        train = dict(self.train)
        updates: Dict[str, Any] = {}
        for key, value in overrides.items():
            if value is None:
                continue
            if key in TRAIN_KEYS or key in HYPER_KEYS:
                train[key] = value
            elif key in ("objectives", "layers", "seeds"):
                updates[key] = tuple(value)
            else:
                updates[key] = value
        return replace(self, train=train, **updates)

    @property
    def objective_ids(self) -> List[ObjectiveId]:
        try:
            return parse_objectives(self.objectives)
        except ValueError as e:
            raise ConfigError("objectives", str(e)) from None

    @property
    def normalized_mode(self) -> str:
        try:
            return check_mode(self.mode)
        except ValueError as e:
            raise ConfigError("mode", str(e)) from None

    def groups(self) -> List[Tuple[ObjectiveId, ...]]:
        """
        The objective groups trained jointly under the configured mode.
        """
        try:
            return objective_groups(self.normalized_mode, self.objective_ids)
        except ValueError as e:
            raise ConfigError("objectives", str(e)) from None

    def hyperparams(self) -> Hyperparams:
        values = {key: self.train[key] for key in HYPER_KEYS if key in self.train}
        try:
            return Hyperparams(**values)
        except ValueError as e:
            raise ConfigError("train", str(e)) from None

    def train_config(self, objectives: Tuple[ObjectiveId, ...], seed: int) -> TrainConfig:
        values = {key: self.train[key] for key in TRAIN_KEYS if key in self.train}
        return TrainConfig(
            hyper=self.hyperparams(),
            objectives=objectives,
            mode=self.normalized_mode,
            seed=seed,
            **values
        )

    def treebank_path(self, split: str) -> str:
        if split in self.treebanks:
            return self.treebanks[split]
        if self.synthetic is not None:
            return os.path.join(self.output_dir, "data", f"{split}.conllu")
        raise ConfigError("treebanks", f"no treebank configured for the {split} split")

    def embedding_path(self, split: str, layer: int) -> str:
        if split in self.embeddings:
            return self.embeddings[split].format(layer=layer)
        if self.synthetic is not None:
            return os.path.join(self.output_dir, "data", f"{split}.layer{layer}.opemb")
        raise ConfigError("embeddings", f"no embedding file configured for the {split} split")

    def checkpoint_path(self, layer: int, seed: int, group: Tuple[ObjectiveId, ...]) -> str:
        extension = get_extension_for_mode(self.normalized_mode)
        name = "+".join(objective.name for objective in group)
        return os.path.join(
            self.output_dir,
            "checkpoints",
            f"mode{self.normalized_mode}-layer{layer}-seed{seed}-{name}{extension}"
        )

    def validate(self) -> None:
        """
        :raises ConfigError: Naming the first offending field.
        """
        objectives = self.objective_ids
        groups = self.groups()
        unknown = set(self.train) - set(TRAIN_KEYS) - set(HYPER_KEYS)
        if unknown:
            raise ConfigError(f"train.{sorted(unknown)[0]}", "unknown training setting")
        for group in groups:
            self.train_config(group, self.seeds[0] if self.seeds else 0)

        if not self.layers:
            raise ConfigError("layers", "at least one layer is required")
        if any(layer < 0 for layer in self.layers):
            raise ConfigError("layers", "layer indices must be nonnegative")
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        if not self.epsilon > 0:
            raise ConfigError("epsilon", f"must be positive, got {self.epsilon}")

        needs_taxonomy = any(objective.structure is Structure.LEX for objective in objectives)
        if self.synthetic is None:
            for split in SPLITS:
                if split not in self.treebanks:
                    raise ConfigError("treebanks", f"missing the {split} split")
                if split not in self.embeddings:
                    raise ConfigError("embeddings", f"missing the {split} split")
                if len(self.layers) > 1 and "{layer}" not in self.embeddings[split]:
                    raise ConfigError("embeddings", f"the {split} path needs a `{{layer}}` placeholder for several layers")
            if needs_taxonomy and self.taxonomy is None:
                raise ConfigError("taxonomy", "hypernymy objectives need a taxonomy file")
        else:
            if needs_taxonomy:
                raise ConfigError("objectives", "hypernymy objectives cannot be trained on synthetic data")
            try:
                spec = self.synthetic.planted_spec()
            except ValueError as e:
                raise ConfigError("synthetic", str(e)) from None
            assert spec.planted_rank is not None
            if spec.planted_rank < self.synthetic.max_length - 1:
                raise ConfigError("synthetic.planted_rank", f"sentences of {self.synthetic.max_length} tokens need rank {self.synthetic.max_length - 1}")
            if spec.planted_rank * len(spec.planted_structures) > spec.ambient_dim:
                raise ConfigError("synthetic.ambient_dim", f"{len(spec.planted_structures)} blocks of rank {spec.planted_rank} do not fit")
            if not 1 <= self.synthetic.min_length <= self.synthetic.max_length:
                raise ConfigError("synthetic", "expected 1 <= min_length <= max_length")
            for split in SPLITS:
                if self.synthetic.sentences.get(split, 0) < 1:
                    raise ConfigError("synthetic.sentences", f"the {split} split needs at least one sentence")

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "treebanks": dict(self.treebanks),
            "embeddings": dict(self.embeddings),
            "taxonomy": self.taxonomy,
            "mode": self.mode,
            "objectives": list(self.objectives),
            "layers": list(self.layers),
            "seeds": list(self.seeds),
            "train": dict(self.train),
            "output_dir": self.output_dir,
            "epsilon": self.epsilon,
        }
        if self.synthetic is not None:
            data["synthetic"] = {
                f.name: list(value) if isinstance(value, tuple) else value
                for f in fields(self.synthetic)
                for value in [getattr(self.synthetic, f.name)]
            }
        return data

def load_experiment_config(path: Optional[str]=None, **overrides: Any) -> ExperimentConfig:
    """
    Loads a JSON experiment configuration and applies flag overrides.

    :param path: The JSON file; defaults are used when omitted.
    :raises ConfigError: On unreadable JSON or an invalid configuration.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError("config", f"cannot read {path}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError("config", f"{path} must hold a JSON object")
    try:
        config = ExperimentConfig.from_dict(data).with_overrides(**overrides)
    except TypeError as e:
        raise ConfigError("config", str(e)) from None
    config.validate()
    return config

def get_worker_count() -> int:
    """
    Worker processes allowed by `ORTHO_PROBE_THREADS` (default 1).
    """
    value = os.getenv("ORTHO_PROBE_THREADS", "1")
    try:
        count = int(value)
    except ValueError:
        raise ConfigError("ORTHO_PROBE_THREADS", f"expected an integer, got `{value}`") from None
    if count < 1:
        raise ConfigError("ORTHO_PROBE_THREADS", f"must be at least 1, got {count}")
    return count
