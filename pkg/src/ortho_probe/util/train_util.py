from __future__ import annotations

import os
import json
import math
import torch
import numpy as np
import safetensors
import safetensors.torch

from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

from .log_util import logger
from .file_util import atomic_open
from .error_util import ConfigError, DataError, NumericalError
from .linalg_util import all_finite, dso_penalty, l1_penalty, orthogonality_deviation, soft_threshold
from .objective_util import ObjectiveId, check_mode, objective_groups
from .embedding_util import EmbeddingSet, check_alignment
from .treebank_util import AnnotatedSentence, GoldLabels, Taxonomy, gold_labels
from .probe_util import (
    ROTATION_KEY,
    SCALER_PREFIX,
    Example,
    GradientBundle,
    Hyperparams,
    LinearProbeParams,
    OrthogonalProbeParams,
    ProbeParams,
    calibrate_scale,
    data_loss,
    loss_and_gradients,
    predict,
)

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "TrainState",
    "TrainResult",
    "Batch",
    "initialize_params",
    "initial_state",
    "prepare_datasets",
    "build_schedule",
    "clip_gradients",
    "adam_update",
    "adam_step",
    "proximal_sparsity",
    "validation_loss",
    "train",
    "save_training_state",
    "load_training_state",
]

@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization settings of one training run.

    V's entries are about 1/√dim in size, so by default its Adam step is
    scaled by 1/√dim to move it at the same relative rate as the scaling
    vectors; `rotation_lr_scale` overrides the factor. With `calibrate_initial_scale`
    a freshly initialized probe is rescaled to the gold labels before the
    first epoch.
    """
    batch_size: int = 12
    initial_lr: float = 0.02
    lr_decay_factor: float = 10.0
    patience_updates: int = 3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    hyper: Hyperparams = field(default_factory=Hyperparams)
    objectives: Tuple[ObjectiveId, ...] = ()
    mode: str = "A"
    seed: int = 0
    max_epochs: int = 40
    rotation_lr_scale: Optional[float] = None
    calibrate_initial_scale: bool = True

    def __post_init__(self) -> None:
        for name in ("batch_size", "patience_updates", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be a positive count, got {getattr(self, name)}")
        for name in ("initial_lr", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, f"must be positive, got {getattr(self, name)}")
        if self.rotation_lr_scale is not None and not self.rotation_lr_scale > 0:
            raise ConfigError("rotation_lr_scale", f"must be positive, got {self.rotation_lr_scale}")
        if not self.lr_decay_factor > 1:
            raise ConfigError("lr_decay_factor", f"must exceed 1, got {self.lr_decay_factor}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(name, f"must be in [0, 1), got {getattr(self, name)}")
        try:
            mode = check_mode(self.mode)
        except ValueError as e:
            raise ConfigError("mode", str(e)) from None
        if not self.objectives:
            raise ConfigError("objectives", "at least one objective is required")
        try:
            groups = objective_groups(mode, self.objectives)
        except ValueError as e:
            raise ConfigError("objectives", str(e)) from None
        if len(groups) != 1:
            raise ConfigError("objectives", f"mode {mode} trains these objectives in {len(groups)} separate runs")
        object.__setattr__(self, "mode", mode)

    @property
    def clip_norm(self) -> float:
        return self.hyper.clip_norm

    def rotation_step_scale(self, dim: int) -> float:
        return self.rotation_lr_scale if self.rotation_lr_scale is not None else 1.0 / math.sqrt(dim)

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    dso: Optional[float]
    orthogonality_deviation: Optional[float]
    sparsity_penalty: float
    learning_rate: float
    sparsity_latched: bool
    steps: int
    skipped: int
    improved: bool

@dataclass
class TrainState:
    """
    Everything needed to continue training exactly where it stopped.
    """
    params: ProbeParams
    first_moments: Dict[str, torch.Tensor]
    second_moments: Dict[str, torch.Tensor]
    step: int
    current_lr: float
    best_val_loss: float = math.inf
    lr_updates_without_improvement: int = 0
    sparsity_latched: bool = False
    history: List[EpochRecord] = field(default_factory=list)
    epoch: int = 0
    best_params: Optional[ProbeParams] = None
    best_epoch: int = 0
    stopped: bool = False
    dso_curve: List[float] = field(default_factory=list)
    sparsity_curve: List[float] = field(default_factory=list)

class TrainResult(NamedTuple):
    final_params: ProbeParams
    best_params: ProbeParams
    history: List[EpochRecord]
    state: TrainState

class Batch(NamedTuple):
    """
    Indices into one objective's dataset; a batch never mixes objectives.
    """
    objective: ObjectiveId
    indices: Tuple[int, ...]

def initialize_params(
    mode: str,
    dim: int,
    objectives: Sequence[ObjectiveId],
    seed: int
) -> ProbeParams:
    """
    Fresh parameters for a training mode.

    >>> from ortho_probe.util.objective_util import parse_objectives
    >>> type(initialize_params("II", 4, parse_objectives(["dep-depth"]), 0)).__name__
    'LinearProbeParams'
    """
    mode = check_mode(mode)
    if mode == "II":
        return LinearProbeParams.initialize(dim, objectives, seed)
    return OrthogonalProbeParams.initialize(dim, objectives, seed, rotation_frozen=mode == "I")

def initial_state(config: TrainConfig, params: ProbeParams) -> TrainState:
    return TrainState(
        params=params,
        first_moments={},
        second_moments={},
        step=0,
        current_lr=config.initial_lr,
    )

def prepare_datasets(
    sentences: Sequence[AnnotatedSentence],
    embeddings: EmbeddingSet,
    objectives: Sequence[ObjectiveId],
    taxonomy: Optional[Taxonomy]=None,
    seed: int=0
) -> Dict[ObjectiveId, List[Example]]:
    """
    Pairs each sentence's embeddings with the gold labels of every objective.

    Depth and distance objectives of a structure share one label object,
    so random trees are the same for both.

    :raises AlignmentError: When embeddings and sentences do not line up.
    """
    check_alignment(embeddings, sentences)
    labels: Dict[Any, List[GoldLabels]] = {}
    datasets: Dict[ObjectiveId, List[Example]] = {}
    for objective in objectives:
        if objective.structure not in labels:
            labels[objective.structure] = [
                gold_labels(sentence, objective.structure, taxonomy=taxonomy, seed=seed)
                for sentence in sentences
            ]
        datasets[objective] = [
            Example(matrix, gold)
            for matrix, gold in zip(embeddings.sentences, labels[objective.structure])
        ]
    return datasets

def build_schedule(
    datasets: Mapping[ObjectiveId, Sequence[Any]],
    batch_size: int,
    epoch_seed: int
) -> List[Batch]:
    """
    Shuffles each objective's sentences into single-objective batches and
    interleaves the batches of all objectives.

    >>> from ortho_probe.util.objective_util import ObjectiveId
    >>> schedule = build_schedule({ObjectiveId.parse("pos-depth"): list(range(25))}, 12, 3)
    >>> sorted(len(batch.indices) for batch in schedule)
    [1, 12, 12]

    :raises DataError: When a configured objective has no data.
    """
    if batch_size < 1:
        raise ValueError(f"Batch size must be positive, got {batch_size}")
    rng = np.random.default_rng(epoch_seed % (1 << 64))
    batches: List[Batch] = []
    for objective in sorted(datasets):
        size = len(datasets[objective])
        if size == 0:
            raise DataError(f"No training data for objective {objective}")
        order = [int(index) for index in rng.permutation(size)]
        for start in range(0, size, batch_size):
            batches.append(Batch(objective, tuple(order[start:start + batch_size])))
    return [batches[int(index)] for index in rng.permutation(len(batches))]

def clip_gradients(bundle: GradientBundle, clip_norm: float) -> GradientBundle:
    """
    Rescales each gradient tensor whose L2 norm exceeds `clip_norm`.
    """
    if not clip_norm > 0:
        raise ValueError(f"Clip norm must be positive, got {clip_norm}")
    clipped = {}
    for key, gradient in bundle:
        norm = float(torch.linalg.vector_norm(gradient))
        clipped[key] = gradient * (clip_norm / norm) if norm > clip_norm else gradient
    return GradientBundle.from_named(clipped)

def adam_update(
    param: torch.Tensor,
    gradient: torch.Tensor,
    first_moment: torch.Tensor,
    second_moment: torch.Tensor,
    step: int,
    lr: float,
    beta1: float=0.9,
    beta2: float=0.999,
    eps: float=1e-8
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    One bias-corrected Adam update at step `step` (1-based).

    >>> one = torch.ones(1, dtype=torch.float64)
    >>> zero = torch.zeros(1, dtype=torch.float64)
    >>> updated, _, _ = adam_update(zero, one, zero, zero, 1, 0.02)
    >>> round(updated.item(), 8)
    -0.02

    :return: The updated parameter, first moment and second moment.
    """
    first_moment = beta1 * first_moment + (1.0 - beta1) * gradient
    second_moment = beta2 * second_moment + (1.0 - beta2) * gradient * gradient
    corrected_first = first_moment / (1.0 - beta1 ** step)
    corrected_second = second_moment / (1.0 - beta2 ** step)
    updated = param - lr * corrected_first / (torch.sqrt(corrected_second) + eps)
    return updated, first_moment, second_moment

def adam_step(
    state: TrainState,
    gradients: GradientBundle,
    lr: float,
    config: Optional[TrainConfig]=None
) -> TrainState:
    """
    Applies clipping (when a config is given) and one Adam update to every
    trainable tensor that has a gradient. With a config, V's learning rate
    is scaled by `config.rotation_step_scale`.

    :raises NumericalError: When a gradient has non-finite entries.
    """
    if config is not None:
        gradients = clip_gradients(gradients, config.clip_norm)
    beta1 = config.adam_beta1 if config is not None else 0.9
    beta2 = config.adam_beta2 if config is not None else 0.999
    eps = config.adam_eps if config is not None else 1e-8

    step = state.step + 1
    current = state.params.state_dict()
    rotation_scale = 1.0
    if config is not None and isinstance(state.params, OrthogonalProbeParams):
        rotation_scale = config.rotation_step_scale(state.params.dim)
    trainable = set(state.params.trainable_keys())
    updated: Dict[str, torch.Tensor] = {}
    first_moments = dict(state.first_moments)
    second_moments = dict(state.second_moments)
    for key, gradient in gradients:
        if key not in trainable:
            continue
        if not all_finite(gradient):
            raise NumericalError(f"Non-finite gradient for {key} at step {step}")
        param = current[key]
        updated[key], first_moments[key], second_moments[key] = adam_update(
            param,
            gradient,
            first_moments.get(key, torch.zeros_like(param)),
            second_moments.get(key, torch.zeros_like(param)),
            step,
            lr * rotation_scale if key == ROTATION_KEY else lr,
            beta1,
            beta2,
            eps
        )
    return replace(
        state,
        params=state.params.replace_tensors(updated),
        first_moments=first_moments,
        second_moments=second_moments,
        step=step,
    )

def validation_loss(
    params: ProbeParams,
    val_sets: Mapping[ObjectiveId, Sequence[Example]],
    objectives: Sequence[ObjectiveId]
) -> float:
    """
    Mean data loss over validation sentences, summed over objectives.
    Regularization penalties are excluded.
    """
    total = 0.0
    for objective in objectives:
        examples = val_sets.get(objective, [])
        if not examples:
            logger.warning(f"No validation data for {objective}")
            continue
        total += sum(
            data_loss(predict(params, objective, example.embeddings), example.labels)
            for example in examples
        ) / len(examples)
    return total

def _sparsity_penalty(state: TrainState, hyper: Hyperparams) -> float:
    if not state.sparsity_latched or not isinstance(state.params, OrthogonalProbeParams):
        return 0.0
    return hyper.lambda_sparsity * sum(l1_penalty(scaler) for scaler in state.params.scalers.values())

def _maybe_latch_sparsity(state: TrainState, hyper: Hyperparams, epoch: int) -> None:
    if state.sparsity_latched or hyper.lambda_sparsity <= 0:
        return
    if epoch <= hyper.sparsity_warmup_epochs:
        return
    if not isinstance(state.params, OrthogonalProbeParams):
        return
    dso = dso_penalty(state.params.rotation)
    if dso < hyper.sparsity_trigger:
        state.sparsity_latched = True
        logger.info(f"Sparsity penalty switched on at step {state.step + 1} (DSO {dso:.4f} < {hyper.sparsity_trigger})")

def proximal_sparsity(
    state: TrainState,
    objective: ObjectiveId,
    lr: float,
    hyper: Hyperparams
) -> TrainState:
    """
    Once sparsity is latched, soft-thresholds the scaling vector of
    `objective` by lr·λ_S. Entries that reach zero stay exactly zero until
    the data gradient moves them out again.
    """
    if not state.sparsity_latched or hyper.lambda_sparsity <= 0:
        return state
    if not isinstance(state.params, OrthogonalProbeParams):
        return state
    shrunk = soft_threshold(state.params.scalers[objective], lr * hyper.lambda_sparsity)
    return replace(state, params=state.params.replace_tensors({f"{SCALER_PREFIX}{objective.name}": shrunk}))

def _run_epoch(
    state: TrainState,
    config: TrainConfig,
    train_data: Mapping[ObjectiveId, Sequence[Example]],
    epoch: int
) -> Tuple[TrainState, float, int, int]:
    schedule = build_schedule(train_data, config.batch_size, config.seed ^ epoch)
    losses = []
    skipped = 0
    for index, batch in enumerate(schedule):
        _maybe_latch_sparsity(state, config.hyper, epoch)
        examples = [train_data[batch.objective][i] for i in batch.indices]
        loss, gradients, batch_skipped = loss_and_gradients(
            state.params,
            config.hyper,
            examples,
            batch.objective,
            sparsity_active=state.sparsity_latched,
            sparsity_gradient=False
        )
        if not math.isfinite(loss):
            raise NumericalError(f"Non-finite loss {loss} for {batch.objective}", epoch=epoch, batch=index)
        try:
            state = adam_step(state, gradients, state.current_lr, config)
        except NumericalError as e:
            raise NumericalError(str(e), epoch=epoch, batch=index) from None
        state = proximal_sparsity(state, batch.objective, state.current_lr, config.hyper)
        losses.append(loss)
        skipped += batch_skipped
        if isinstance(state.params, OrthogonalProbeParams):
            state.dso_curve.append(dso_penalty(state.params.rotation))
        state.sparsity_curve.append(_sparsity_penalty(state, config.hyper))
        logger.debug(f"Epoch {epoch} batch {index} ({batch.objective}): loss {loss:.6f}")
    return state, float(np.mean(losses)), len(schedule), skipped

def train(
    config: TrainConfig,
    train_data: Mapping[ObjectiveId, Sequence[Example]],
    val_data: Mapping[ObjectiveId, Sequence[Example]],
    params: Optional[ProbeParams]=None,
    state_path: Optional[str]=None,
    resume: bool=False
) -> TrainResult:
    """
    Trains a probe with per-batch clipped Adam steps, learning-rate decay
    on validation plateaus, early stopping and best-checkpoint tracking.

    After an epoch without a new validation minimum the learning rate is
    divided by `lr_decay_factor`; after `patience_updates` consecutive such
    epochs training stops. Any new minimum resets the count. The sparsity
    penalty switches on for good at the first step where DSO(V) falls below
    the trigger, but not during the warmup epochs; it is applied as a
    proximal step after each Adam update.

    :param params: Starting parameters; freshly initialized from the seed
        (and scale-calibrated, see `TrainConfig`) when omitted.
    :param state_path: When given, a training-state snapshot is written after each epoch.
    :param resume: Continue from the snapshot at `state_path` if it exists.
    :raises NumericalError: On a non-finite loss or gradient.
    """
    for objective in config.objectives:
        if not train_data.get(objective):
            raise DataError(f"No training data for objective {objective}")
    data = {objective: train_data[objective] for objective in config.objectives}

    state: Optional[TrainState] = None
    if resume and state_path is not None and os.path.exists(state_path):
        state = load_training_state(state_path)
        if set(state.params.objectives) != set(config.objectives):
            raise ConfigError("objectives", f"snapshot {state_path} was trained for different objectives")
        logger.info(f"Resuming from {state_path} after epoch {state.epoch}")
    if state is None:
        if params is None:
            dim = int(next(iter(data.values()))[0].embeddings.shape[1])
            params = initialize_params(config.mode, dim, config.objectives, config.seed)
            if config.calibrate_initial_scale:
                params = calibrate_scale(params, data)
        state = initial_state(config, params)

    while not state.stopped and state.epoch < config.max_epochs:
        epoch = state.epoch + 1
        state, train_loss, steps, skipped = _run_epoch(state, config, data, epoch)
        val_loss = validation_loss(state.params, val_data, config.objectives)
        if not math.isfinite(val_loss):
            raise NumericalError(f"Non-finite validation loss {val_loss}", epoch=epoch)

        improved = val_loss < state.best_val_loss
        learning_rate = state.current_lr
        if improved:
            state.best_val_loss = val_loss
            state.best_params = state.params
            state.best_epoch = epoch
            state.lr_updates_without_improvement = 0
        else:
            state.current_lr = state.current_lr / config.lr_decay_factor
            state.lr_updates_without_improvement += 1
            logger.info(f"No new validation minimum, learning rate decayed to {state.current_lr:g}")

        rotation = state.params.rotation if isinstance(state.params, OrthogonalProbeParams) else None
        record = EpochRecord(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_loss,
            dso=None if rotation is None else dso_penalty(rotation),
            orthogonality_deviation=None if rotation is None else orthogonality_deviation(rotation),
            sparsity_penalty=_sparsity_penalty(state, config.hyper),
            learning_rate=learning_rate,
            sparsity_latched=state.sparsity_latched,
            steps=steps,
            skipped=skipped,
            improved=improved,
        )
        state.history.append(record)
        state.epoch = epoch
        logger.info(
            f"Epoch {epoch}: train {train_loss:.5f}, validation {val_loss:.5f}"
            + ("" if record.dso is None else f", DSO {record.dso:.5f}")
            + f", sparsity {record.sparsity_penalty:.5f}, lr {learning_rate:g}"
        )

        if state.lr_updates_without_improvement >= config.patience_updates:
            state.stopped = True
            logger.info(f"Early stop after epoch {epoch}; best epoch {state.best_epoch}")
        if state_path is not None:
            save_training_state(state, state_path)

    best = state.best_params if state.best_params is not None else state.params
    return TrainResult(final_params=state.params, best_params=best, history=state.history, state=state)

def _params_kind(params: ProbeParams) -> str:
    if isinstance(params, LinearProbeParams):
        return "linear"
    return "scaling" if params.rotation_frozen else "orthogonal"

def _params_from_state_dict(kind: str, state_dict: Dict[str, torch.Tensor]) -> ProbeParams:
    if kind == "linear":
        return LinearProbeParams.from_state_dict(state_dict)
    return OrthogonalProbeParams.from_state_dict(state_dict, rotation_frozen=kind == "scaling")

def save_training_state(state: TrainState, path: str) -> None:
    """
    Snapshots a training state as safetensors; counters, curves and
    history travel as JSON metadata.
    """
    # safetensors refuses entries that share storage.
    tensors: Dict[str, torch.Tensor] = {}
    for key, value in state.params.state_dict().items():
        tensors[f"params.{key}"] = value.detach().clone().contiguous()
    if state.best_params is not None:
        for key, value in state.best_params.state_dict().items():
            tensors[f"best.{key}"] = value.detach().clone().contiguous()
    for key, value in state.first_moments.items():
        tensors[f"adam_m.{key}"] = value.detach().clone().contiguous()
    for key, value in state.second_moments.items():
        tensors[f"adam_v.{key}"] = value.detach().clone().contiguous()
    counters = {
        "kind": _params_kind(state.params),
        "step": state.step,
        "current_lr": state.current_lr,
        "best_val_loss": state.best_val_loss,
        "lr_updates_without_improvement": state.lr_updates_without_improvement,
        "sparsity_latched": state.sparsity_latched,
        "epoch": state.epoch,
        "best_epoch": state.best_epoch,
        "stopped": state.stopped,
    }
    metadata = {
        "state": json.dumps(counters),
        "history": json.dumps([asdict(record) for record in state.history]),
        "dso_curve": json.dumps(state.dso_curve),
        "sparsity_curve": json.dumps(state.sparsity_curve),
    }
    with atomic_open(path, binary=True) as f:
        f.write(safetensors.torch.save(tensors, metadata=metadata))
    logger.debug(f"Wrote training state after epoch {state.epoch} to {path}")

def load_training_state(path: str) -> TrainState:
    """
    Restores a snapshot written by `save_training_state`.
    """
    with safetensors.safe_open(path, framework="pt") as f: # type: ignore[no-untyped-call]
        metadata = f.metadata() or {}
        tensors = {key: f.get_tensor(key) for key in f.keys()}

    def section(prefix: str) -> Dict[str, torch.Tensor]:
        return {key[len(prefix):]: value for key, value in tensors.items() if key.startswith(prefix)}

    counters = json.loads(metadata["state"])
    best = section("best.")
    return TrainState(
        params=_params_from_state_dict(counters["kind"], section("params.")),
        first_moments=section("adam_m."),
        second_moments=section("adam_v."),
        step=int(counters["step"]),
        current_lr=float(counters["current_lr"]),
        best_val_loss=float(counters["best_val_loss"]),
        lr_updates_without_improvement=int(counters["lr_updates_without_improvement"]),
        sparsity_latched=bool(counters["sparsity_latched"]),
        history=[EpochRecord(**record) for record in json.loads(metadata["history"])],
        epoch=int(counters["epoch"]),
        best_params=_params_from_state_dict(counters["kind"], best) if best else None,
        best_epoch=int(counters["best_epoch"]),
        stopped=bool(counters["stopped"]),
        dso_curve=[float(value) for value in json.loads(metadata["dso_curve"])],
        sparsity_curve=[float(value) for value in json.loads(metadata["sparsity_curve"])],
    )
