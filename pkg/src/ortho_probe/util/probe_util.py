from __future__ import annotations

import math
import torch

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

from .log_util import logger
from .dtype_util import TRAINING_DTYPE
from .linalg_util import (
    check_square,
    l1_penalty,
    orthogonality_gradient,
    orthogonality_penalty,
    random_orthogonal,
)
from .objective_util import ObjectiveId, Structure
from .treebank_util import GoldLabels

__all__ = [
    "Hyperparams",
    "OrthogonalProbeParams",
    "LinearProbeParams",
    "ProbeParams",
    "GradientBundle",
    "Example",
    "distance_forward_linear",
    "depth_forward_linear",
    "distance_forward_orthogonal",
    "depth_forward_orthogonal",
    "predict_depths",
    "predict_distances",
    "predict",
    "data_loss",
    "total_loss",
    "loss_gradients",
    "loss_and_gradients",
    "calibrate_scale",
    "parameter_count",
    "degrees_of_freedom",
    "planted_oracle",
]

ROTATION_KEY = "rotation"
SCALER_PREFIX = "scaler."
MAP_PREFIX = "map."

@dataclass(frozen=True)
class Hyperparams:
    """
    Regularization settings shared by every objective of a probe.

    :param lambda_orthogonal: Weight of the orthogonality penalty on V.
    :param lambda_sparsity: Weight of the L1 penalty on the active scaling vector.
    :param sparsity_trigger: The DSO value below which the L1 penalty switches on.
    :param sparsity_warmup_epochs: Epochs of data fitting before the trigger is armed.
    :param clip_norm: Per-tensor gradient norm cap.
    :param orthogonality_penalty: `dso` (double soft) or `so` (soft).
    """
    lambda_orthogonal: float = 0.05
    lambda_sparsity: float = 0.0
    sparsity_trigger: float = 1.5
    sparsity_warmup_epochs: int = 1
    clip_norm: float = 1.5
    orthogonality_penalty: str = "dso"

    def __post_init__(self) -> None:
        if self.lambda_orthogonal < 0:
            raise ValueError(f"lambda_orthogonal must be nonnegative, got {self.lambda_orthogonal}")
        if self.lambda_sparsity < 0:
            raise ValueError(f"lambda_sparsity must be nonnegative, got {self.lambda_sparsity}")
        if self.sparsity_warmup_epochs < 0:
            raise ValueError(f"sparsity_warmup_epochs must be nonnegative, got {self.sparsity_warmup_epochs}")
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.orthogonality_penalty not in ("dso", "so"):
            raise ValueError(f"orthogonality_penalty must be `dso` or `so`, got {self.orthogonality_penalty}")

class Example(NamedTuple):
    """
    One sentence's embeddings paired with the gold labels of one structure.
    """
    embeddings: torch.Tensor
    labels: GoldLabels

@dataclass(frozen=True, eq=False)
class OrthogonalProbeParams:
    """
    A shared rotation V with one scaling vector per objective.

    With `rotation_frozen` the rotation stays at 𝕀 and only the scaling
    vectors train (the scaling-only baseline).
    """
    rotation: torch.Tensor
    scalers: Dict[ObjectiveId, torch.Tensor]
    rotation_frozen: bool = False

    def __post_init__(self) -> None:
        dim = check_square(self.rotation, "rotation")
        for objective, scaler in self.scalers.items():
            if scaler.shape != (dim,):
                raise ValueError(f"Scaling vector for {objective} has shape {tuple(scaler.shape)}, expected ({dim},)")

    @property
    def dim(self) -> int:
        return int(self.rotation.shape[0])

    @property
    def objectives(self) -> List[ObjectiveId]:
        return list(self.scalers.keys())

    @classmethod
    def initialize(
        cls,
        dim: int,
        objectives: Sequence[ObjectiveId],
        seed: int,
        rotation_frozen: bool=False
    ) -> OrthogonalProbeParams:
        """
        Seeded random rotation (𝕀 when frozen) and scaling vectors of 1/√dim.
        """
        rotation = torch.eye(dim, dtype=TRAINING_DTYPE) if rotation_frozen else random_orthogonal(dim, seed)
        return cls(
            rotation=rotation,
            scalers={
                objective: torch.full((dim,), 1.0 / math.sqrt(dim), dtype=TRAINING_DTYPE)
                for objective in objectives
            },
            rotation_frozen=rotation_frozen
        )

    def state_dict(self) -> Dict[str, torch.Tensor]:
        state = {ROTATION_KEY: self.rotation}
        for objective, scaler in self.scalers.items():
            state[f"{SCALER_PREFIX}{objective.name}"] = scaler
        return state

    def trainable_keys(self) -> List[str]:
        keys = [] if self.rotation_frozen else [ROTATION_KEY]
        return keys + [f"{SCALER_PREFIX}{objective.name}" for objective in self.scalers]

    @classmethod
    def from_state_dict(
        cls,
        state_dict: Dict[str, torch.Tensor],
        rotation_frozen: bool=False
    ) -> OrthogonalProbeParams:
        scalers = {
            ObjectiveId.parse(key[len(SCALER_PREFIX):]): value.to(TRAINING_DTYPE)
            for key, value in state_dict.items()
            if key.startswith(SCALER_PREFIX)
        }
        return cls(
            rotation=state_dict[ROTATION_KEY].to(TRAINING_DTYPE),
            scalers=scalers,
            rotation_frozen=rotation_frozen
        )

    def replace_tensors(self, tensors: Dict[str, torch.Tensor]) -> OrthogonalProbeParams:
        state = self.state_dict()
        state.update(tensors)
        return OrthogonalProbeParams.from_state_dict(state, rotation_frozen=self.rotation_frozen)

    def with_scaler(self, objective: ObjectiveId, scaler: torch.Tensor) -> OrthogonalProbeParams:
        scalers = dict(self.scalers)
        scalers[objective] = scaler
        return OrthogonalProbeParams(self.rotation, scalers, self.rotation_frozen)

@dataclass(frozen=True, eq=False)
class LinearProbeParams:
    """
    One dense linear map B per objective (the standard structural probe).
    """
    maps: Dict[ObjectiveId, torch.Tensor]

    def __post_init__(self) -> None:
        dims = {check_square(matrix, f"map for {objective}") for objective, matrix in self.maps.items()}
        if len(dims) > 1:
            raise ValueError(f"Linear maps have inconsistent dimensions {sorted(dims)}")

    @property
    def dim(self) -> int:
        return int(next(iter(self.maps.values())).shape[0])

    @property
    def objectives(self) -> List[ObjectiveId]:
        return list(self.maps.keys())

    @classmethod
    def initialize(
        cls,
        dim: int,
        objectives: Sequence[ObjectiveId],
        seed: int
    ) -> LinearProbeParams:
        """
        Every map starts as Vᵀ/√dim with the orthogonal probe's seeded V, so
        both probe kinds make identical initial predictions.
        """
        start = random_orthogonal(dim, seed).T / math.sqrt(dim)
        return cls(maps={objective: start.clone() for objective in objectives})

    def state_dict(self) -> Dict[str, torch.Tensor]:
        return {f"{MAP_PREFIX}{objective.name}": matrix for objective, matrix in self.maps.items()}

    def trainable_keys(self) -> List[str]:
        return list(self.state_dict().keys())

    @classmethod
    def from_state_dict(cls, state_dict: Dict[str, torch.Tensor]) -> LinearProbeParams:
        return cls(maps={
            ObjectiveId.parse(key[len(MAP_PREFIX):]): value.to(TRAINING_DTYPE)
            for key, value in state_dict.items()
            if key.startswith(MAP_PREFIX)
        })

    def replace_tensors(self, tensors: Dict[str, torch.Tensor]) -> LinearProbeParams:
        state = self.state_dict()
        state.update(tensors)
        return LinearProbeParams.from_state_dict(state)

ProbeParams = Union[OrthogonalProbeParams, LinearProbeParams]

@dataclass(frozen=True, eq=False)
class GradientBundle:
    """
    Gradients of a loss, keyed like the parameters they differentiate.
    """
    rotation: Optional[torch.Tensor] = None
    scalers: Dict[ObjectiveId, torch.Tensor] = field(default_factory=dict)
    maps: Dict[ObjectiveId, torch.Tensor] = field(default_factory=dict)

    def named(self) -> Dict[str, torch.Tensor]:
        """
        Flattens to parameter keys (`rotation`, `scaler.<objective>`, `map.<objective>`).
        """
        named: Dict[str, torch.Tensor] = {}
        if self.rotation is not None:
            named[ROTATION_KEY] = self.rotation
        for objective, gradient in self.scalers.items():
            named[f"{SCALER_PREFIX}{objective.name}"] = gradient
        for objective, gradient in self.maps.items():
            named[f"{MAP_PREFIX}{objective.name}"] = gradient
        return named

    @classmethod
    def from_named(cls, named: Dict[str, torch.Tensor]) -> GradientBundle:
        return cls(
            rotation=named.get(ROTATION_KEY, None),
            scalers={
                ObjectiveId.parse(key[len(SCALER_PREFIX):]): value
                for key, value in named.items() if key.startswith(SCALER_PREFIX)
            },
            maps={
                ObjectiveId.parse(key[len(MAP_PREFIX):]): value
                for key, value in named.items() if key.startswith(MAP_PREFIX)
            },
        )

    def __iter__(self) -> Iterator[Tuple[str, torch.Tensor]]:
        return iter(self.named().items())

def _check_embeddings(embeddings: torch.Tensor, dim: int) -> None:
    if embeddings.dim() != 2 or embeddings.shape[1] != dim:
        raise ValueError(f"Expected embeddings of shape (tokens, {dim}), got {tuple(embeddings.shape)}")

def _pairwise_squared(projected: torch.Tensor) -> torch.Tensor:
    difference = projected.unsqueeze(1) - projected.unsqueeze(0)
    return (difference ** 2).sum(dim=-1)

def _project_linear(matrix: torch.Tensor, embeddings: torch.Tensor) -> torch.Tensor:
    dim = check_square(matrix, "B")
    _check_embeddings(embeddings, dim)
    return embeddings @ matrix.T

def _project_orthogonal(
    rotation: torch.Tensor,
    scaler: torch.Tensor,
    embeddings: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    dim = check_square(rotation, "V")
    if scaler.shape != (dim,):
        raise ValueError(f"Expected a scaling vector of shape ({dim},), got {tuple(scaler.shape)}")
    _check_embeddings(embeddings, dim)
    rotated = embeddings @ rotation
    return rotated, rotated * scaler.unsqueeze(0)

def distance_forward_linear(matrix: torch.Tensor, embeddings: torch.Tensor) -> torch.Tensor:
    """
    Squared distances ‖B(h_i − h_j)‖² for every token pair.

    >>> h = torch.tensor([[0.0, 0.0], [3.0, 4.0]], dtype=torch.float64)
    >>> distance_forward_linear(torch.eye(2, dtype=torch.float64), h)[0, 1].item()
    25.0
    """
    return _pairwise_squared(_project_linear(matrix, embeddings))

def depth_forward_linear(matrix: torch.Tensor, embeddings: torch.Tensor) -> torch.Tensor:
    """
    Squared norms ‖Bh_i‖² per token.
    """
    return (_project_linear(matrix, embeddings) ** 2).sum(dim=-1)

def distance_forward_orthogonal(
    rotation: torch.Tensor,
    scaler: torch.Tensor,
    embeddings: torch.Tensor
) -> torch.Tensor:
    """
    Squared distances ‖d̄ ⊙ Vᵀ(h_i − h_j)‖² for every token pair.
    """
    _, projected = _project_orthogonal(rotation, scaler, embeddings)
    return _pairwise_squared(projected)

def depth_forward_orthogonal(
    rotation: torch.Tensor,
    scaler: torch.Tensor,
    embeddings: torch.Tensor
) -> torch.Tensor:
    """
    Squared norms ‖d̄ ⊙ Vᵀh_i‖² per token.
    """
    _, projected = _project_orthogonal(rotation, scaler, embeddings)
    return (projected ** 2).sum(dim=-1)

def predict_depths(params: ProbeParams, objective: ObjectiveId, embeddings: torch.Tensor) -> torch.Tensor:
    if isinstance(params, LinearProbeParams):
        return depth_forward_linear(params.maps[objective], embeddings)
    return depth_forward_orthogonal(params.rotation, params.scalers[objective], embeddings)

def predict_distances(params: ProbeParams, objective: ObjectiveId, embeddings: torch.Tensor) -> torch.Tensor:
    if isinstance(params, LinearProbeParams):
        return distance_forward_linear(params.maps[objective], embeddings)
    return distance_forward_orthogonal(params.rotation, params.scalers[objective], embeddings)

def predict(params: ProbeParams, objective: ObjectiveId, embeddings: torch.Tensor) -> torch.Tensor:
    """
    Depths or pairwise distances, whichever the objective targets.
    """
    if objective.is_distance:
        return predict_distances(params, objective, embeddings)
    return predict_depths(params, objective, embeddings)

def _scored_entries(
    prediction: torch.Tensor,
    gold: GoldLabels
) -> Tuple[torch.Tensor, torch.Tensor, float]:
    # Returns (mask, target, normalizer) for the entries a prediction is scored on.
    s = len(gold)
    if prediction.dim() == 2:
        if prediction.shape != (s, s):
            raise ValueError(f"Distance prediction shape {tuple(prediction.shape)} does not match {s} tokens")
        return gold.distance_mask & ~torch.eye(s, dtype=torch.bool), gold.distances, float(s * s)
    if prediction.shape != (s,):
        raise ValueError(f"Depth prediction shape {tuple(prediction.shape)} does not match {s} tokens")
    return gold.depth_mask, gold.depths, float(s)

def _data_loss_and_gradient(
    prediction: torch.Tensor,
    gold: GoldLabels
) -> Tuple[torch.Tensor, torch.Tensor, bool]:
    # Returns (loss, ∂loss/∂prediction, fully-masked flag).
    mask, target, normalizer = _scored_entries(prediction, gold)
    residual = prediction - target
    weights = mask.to(prediction.dtype)
    loss = (residual.abs() * weights).sum() / normalizer
    gradient = torch.sign(residual) * weights / normalizer
    return loss, gradient, not bool(mask.any())

def data_loss(prediction: torch.Tensor, gold: GoldLabels) -> float:
    """
    Normalized L1 error between predictions and unmasked gold labels.

    A 2-D prediction is scored against distances over ordered pairs i ≠ j
    and divided by s²; a 1-D prediction is scored against depths and
    divided by s. Fully masked sentences score 0.

    >>> from ortho_probe.util.treebank_util import positional_labels
    >>> data_loss(torch.tensor([[0.0, 3.0], [3.0, 0.0]], dtype=torch.float64), positional_labels(2))
    1.0
    """
    loss, _, _ = _data_loss_and_gradient(prediction, gold)
    return float(loss)

def _penalty(
    params: ProbeParams,
    hyper: Hyperparams,
    objective: ObjectiveId,
    sparsity_active: bool
) -> float:
    if isinstance(params, LinearProbeParams):
        return 0.0
    penalty = 0.0
    if not params.rotation_frozen and hyper.lambda_orthogonal > 0:
        penalty += hyper.lambda_orthogonal * orthogonality_penalty(params.rotation, hyper.orthogonality_penalty)
    if sparsity_active and hyper.lambda_sparsity > 0:
        penalty += hyper.lambda_sparsity * l1_penalty(params.scalers[objective])
    return penalty

def _sentence_gradient(
    params: ProbeParams,
    objective: ObjectiveId,
    example: Example
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor], bool]:
    embeddings, gold = example
    if isinstance(params, LinearProbeParams):
        matrix = params.maps[objective]
        projected = _project_linear(matrix, embeddings)
        rotated = None
    else:
        scaler = params.scalers[objective]
        rotated, projected = _project_orthogonal(params.rotation, scaler, embeddings)

    if objective.is_distance:
        prediction = _pairwise_squared(projected)
        loss, upstream, skipped = _data_loss_and_gradient(prediction, gold)
        symmetric = upstream + upstream.T
        # Laplacian of the pairwise weights.
        d_projected = 2.0 * (symmetric.sum(dim=1, keepdim=True) * projected - symmetric @ projected)
    else:
        prediction = (projected ** 2).sum(dim=-1)
        loss, upstream, skipped = _data_loss_and_gradient(prediction, gold)
        d_projected = 2.0 * upstream.unsqueeze(1) * projected

    gradients: Dict[str, torch.Tensor] = {}
    if isinstance(params, LinearProbeParams):
        gradients[f"{MAP_PREFIX}{objective.name}"] = d_projected.T @ embeddings
    else:
        assert rotated is not None
        gradients[f"{SCALER_PREFIX}{objective.name}"] = (d_projected * rotated).sum(dim=0)
        if not params.rotation_frozen:
            gradients[ROTATION_KEY] = embeddings.T @ (d_projected * scaler.unsqueeze(0))
    return loss, gradients, skipped

def loss_and_gradients(
    params: ProbeParams,
    hyper: Hyperparams,
    batch: Sequence[Example],
    objective: ObjectiveId,
    sparsity_active: bool=False,
    sparsity_gradient: bool=True
) -> Tuple[float, GradientBundle, int]:
    """
    Evaluates the batch loss and its analytic gradient in one pass.

    Sentence terms are reduced in batch order. Absolute-value and L1 kinks
    take subgradient 0.

    :param sparsity_gradient: When false the active L1 term counts toward the
        loss but not the gradient; the trainer applies it as a proximal step.

    :return: The loss, the gradients and the number of fully masked sentences.
    :raises ValueError: On an empty batch or an unconfigured objective.
    """
    if not batch:
        raise ValueError("Cannot evaluate an empty batch")
    if objective not in params.objectives:
        raise ValueError(f"Objective {objective} is not configured for this probe")

    total = torch.zeros((), dtype=TRAINING_DTYPE)
    summed: Dict[str, torch.Tensor] = {}
    skipped = 0
    for example in batch:
        loss, gradients, was_skipped = _sentence_gradient(params, objective, example)
        total = total + loss
        skipped += int(was_skipped)
        for key, gradient in gradients.items():
            summed[key] = summed[key] + gradient if key in summed else gradient
    if skipped:
        logger.debug(f"{skipped} fully masked sentence(s) in a {objective} batch")

    count = float(len(batch))
    named = {key: gradient / count for key, gradient in summed.items()}

    if isinstance(params, OrthogonalProbeParams):
        if not params.rotation_frozen and hyper.lambda_orthogonal > 0:
            named[ROTATION_KEY] = named[ROTATION_KEY] + hyper.lambda_orthogonal * orthogonality_gradient(
                params.rotation, hyper.orthogonality_penalty
            )
        scaler_key = f"{SCALER_PREFIX}{objective.name}"
        if sparsity_active and sparsity_gradient and hyper.lambda_sparsity > 0:
            named[scaler_key] = named[scaler_key] + hyper.lambda_sparsity * torch.sign(params.scalers[objective])
        for other in params.objectives:
            named.setdefault(f"{SCALER_PREFIX}{other.name}", torch.zeros_like(params.scalers[other]))

    value = float(total) / count + _penalty(params, hyper, objective, sparsity_active)
    return value, GradientBundle.from_named(named), skipped

def total_loss(
    params: ProbeParams,
    hyper: Hyperparams,
    batch: Sequence[Example],
    objective: ObjectiveId,
    sparsity_active: bool=False
) -> float:
    """
    Mean data loss over the batch plus λ_O·DSO(V) and, once sparsity is
    active, λ_S·‖d̄_o‖₁. Linear probes carry no penalties.
    """
    value, _, _ = loss_and_gradients(params, hyper, batch, objective, sparsity_active)
    return value

def loss_gradients(
    params: ProbeParams,
    hyper: Hyperparams,
    batch: Sequence[Example],
    objective: ObjectiveId,
    sparsity_active: bool=False
) -> GradientBundle:
    """
    Analytic gradients of `total_loss`; scaling vectors of other objectives get zeros.
    """
    _, gradients, _ = loss_and_gradients(params, hyper, batch, objective, sparsity_active)
    return gradients

def calibrate_scale(
    params: ProbeParams,
    datasets: Mapping[ObjectiveId, Sequence[Example]]
) -> ProbeParams:
    """
    Rescales each objective's scaling vector (or linear map) by one factor
    so its predictions sum to the same total as the unmasked gold labels.

    A fresh probe predicts about 1/dim of the gold scale.
    Objectives without data or with nonpositive totals are left unchanged.
    """
    tensors: Dict[str, torch.Tensor] = {}
    for objective in params.objectives:
        predicted = 0.0
        target_total = 0.0
        for example in datasets.get(objective, ()):
            prediction = predict(params, objective, example.embeddings)
            mask, target, _ = _scored_entries(prediction, example.labels)
            predicted += float(prediction[mask].sum())
            target_total += float(target[mask].sum())
        if not (predicted > 0 and target_total > 0):
            logger.debug(f"No scale calibration for {objective}")
            continue
        factor = math.sqrt(target_total / predicted)
        if isinstance(params, LinearProbeParams):
            tensors[f"{MAP_PREFIX}{objective.name}"] = params.maps[objective] * factor
        else:
            tensors[f"{SCALER_PREFIX}{objective.name}"] = params.scalers[objective] * factor
        logger.debug(f"Initial scale of {objective} multiplied by {factor:.4f}")
    return params.replace_tensors(tensors)

def parameter_count(dim: int, n_objectives: int) -> int:
    """
    >>> parameter_count(1024, 8)
    1056768
    """
    if dim < 1 or n_objectives < 1:
        raise ValueError("Dimension and objective count must be positive")
    return dim * dim + dim * n_objectives

def degrees_of_freedom(dim: int, n_objectives: int) -> int:
    """
    >>> degrees_of_freedom(1024, 8)
    531968
    """
    if dim < 1 or n_objectives < 1:
        raise ValueError("Dimension and objective count must be positive")
    return dim * (dim - 1) // 2 + dim * n_objectives

def planted_oracle(
    rotation: torch.Tensor,
    blocks: Dict[Structure, range],
    objectives: Sequence[ObjectiveId]
) -> OrthogonalProbeParams:
    """
    Exact-recovery parameters for planted embeddings h = Q·z: V = Q and
    d̄_o is the indicator of the coordinates holding o's structure.
    """
    scalers = {}
    for objective in objectives:
        scaler = torch.zeros(rotation.shape[0], dtype=TRAINING_DTYPE)
        block = blocks[objective.structure]
        scaler[block.start:block.stop] = 1.0
        scalers[objective] = scaler
    return OrthogonalProbeParams(rotation=rotation.to(TRAINING_DTYPE), scalers=scalers)
