from __future__ import annotations

import math
import torch
import numpy as np

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .log_util import logger
from .file_util import atomic_open
from .error_util import ConfigError
from .dtype_util import TRAINING_DTYPE
from .objective_util import SHARED_ROTATION_MODES, ObjectiveId
from .probe_util import Example, OrthogonalProbeParams, ProbeParams
from .eval_util import objective_correlation

__all__ = [
    "DEFAULT_EPSILON",
    "DROP_FRACTIONS",
    "DimSelection",
    "DimReportRow",
    "OverlapTable",
    "Histogram",
    "ScalingHistogram",
    "select_dimensions",
    "probe_selections",
    "masked_params",
    "masked_evaluate",
    "drop_partition",
    "dimension_drop_cv",
    "dimension_report",
    "overlap_table",
    "check_overlap_mode",
    "histogram_weights",
    "histogram_export",
    "scaling_histogram",
    "epsilon_sweep",
    "write_dims_tsv",
    "write_overlap_tsv",
    "write_histogram_tsv",
    "write_scaling_tsv",
    "write_epsilon_tsv",
]

DEFAULT_EPSILON = 1e-4
DROP_FRACTIONS = (0.25, 0.33, 0.50)

@dataclass(frozen=True)
class DimSelection:
    """
    The dimensions whose scaling-vector entries exceed ε in magnitude.
    """
    objective: Optional[ObjectiveId]
    epsilon: float
    dim: int
    selected: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.selected)

def _orthogonal(params: ProbeParams) -> OrthogonalProbeParams:
    if not isinstance(params, OrthogonalProbeParams):
        raise ValueError("Dimension analysis needs an orthogonal probe with scaling vectors")
    return params

def select_dimensions(
    scaler: torch.Tensor,
    epsilon: float=DEFAULT_EPSILON,
    objective: Optional[ObjectiveId]=None
) -> DimSelection:
    """
    >>> select_dimensions(torch.tensor([1e-6, 0.5, 1e-5]), 1e-4).selected
    (1,)

    :raises ValueError: When ε is not positive.
    """
    if not epsilon > 0:
        raise ValueError(f"Epsilon must be positive, got {epsilon}")
    selected = tuple(int(index) for index in torch.nonzero(scaler.abs() > epsilon).flatten().tolist())
    return DimSelection(objective=objective, epsilon=epsilon, dim=int(scaler.shape[0]), selected=selected)

def probe_selections(
    params: ProbeParams,
    epsilon: float=DEFAULT_EPSILON,
    objectives: Optional[Sequence[ObjectiveId]]=None
) -> Dict[ObjectiveId, DimSelection]:
    probe = _orthogonal(params)
    return {
        objective: select_dimensions(probe.scalers[objective], epsilon, objective)
        for objective in (objectives if objectives is not None else probe.objectives)
    }

def masked_params(
    params: ProbeParams,
    objective: ObjectiveId,
    mask: Iterable[int]
) -> OrthogonalProbeParams:
    """
    A copy of the probe whose scaling vector for `objective` is zero outside `mask`.

    :raises ValueError: When a mask index lies outside [0, dim).
    """
    probe = _orthogonal(params)
    keep = torch.zeros(probe.dim, dtype=TRAINING_DTYPE)
    for index in mask:
        if not 0 <= index < probe.dim:
            raise ValueError(f"Mask index {index} outside [0, {probe.dim})")
        keep[index] = 1.0
    return probe.with_scaler(objective, probe.scalers[objective] * keep)

def masked_evaluate(
    params: ProbeParams,
    objective: ObjectiveId,
    mask: Iterable[int],
    examples: Sequence[Example]
) -> Optional[float]:
    """
    The correlation of `objective` when only the masked dimensions are used.

    :return: The correlation, or None for an empty mask.
    """
    indices = sorted(set(mask))
    if not indices:
        return None
    return objective_correlation(masked_params(params, objective, indices), objective, examples).value

def drop_partition(
    selected: Sequence[int],
    drop_fraction: float,
    seed: int
) -> List[Tuple[int, ...]]:
    """
    Splits selected dimensions into round(1/fraction) disjoint, exhaustive,
    as-equal-as-possible random subsets.

    >>> sorted(len(subset) for subset in drop_partition(range(10), 0.33, seed=0))
    [3, 3, 4]

    :raises ValueError: When the fraction is outside (0, 1).
    """
    if not 0 < drop_fraction < 1:
        raise ValueError(f"Drop fraction must be in (0, 1), got {drop_fraction}")
    if not selected:
        raise ValueError("Cannot partition an empty selection")
    k = min(max(int(round(1.0 / drop_fraction)), 1), len(selected))
    rng = np.random.default_rng(seed)
    permuted = rng.permutation(np.asarray(list(selected), dtype=np.int64))
    return [tuple(sorted(int(index) for index in part)) for part in np.array_split(permuted, k)]

def dimension_drop_cv(
    params: ProbeParams,
    objective: ObjectiveId,
    selection: DimSelection,
    drop_fraction: float,
    examples: Sequence[Example],
    seed: int=0
) -> Optional[float]:
    """
    Mean correlation over re-evaluations that each drop one subset of the
    selected dimensions.
    """
    if not selection.selected:
        raise ValueError(f"Selection for {objective} is empty")
    selected = set(selection.selected)
    values = []
    for subset in drop_partition(selection.selected, drop_fraction, seed):
        value = masked_evaluate(params, objective, selected.difference(subset), examples)
        if value is not None:
            values.append(value)
    return float(np.mean(values)) if values else None

@dataclass
class DimReportRow:
    objective: ObjectiveId
    n_selected: int
    correlation_full: Optional[float]
    correlation_masked: Optional[float]
    drops: Dict[float, Optional[float]]

def dimension_report(
    params: ProbeParams,
    examples: Mapping[ObjectiveId, Sequence[Example]],
    epsilon: float=DEFAULT_EPSILON,
    seed: int=0,
    drop_fractions: Sequence[float]=DROP_FRACTIONS
) -> List[DimReportRow]:
    """
    Selected-dimension counts with full, masked and dimension-dropped
    correlations for every objective that has evaluation data.
    """
    rows = []
    for objective, selection in probe_selections(params, epsilon).items():
        if objective not in examples:
            continue
        data = examples[objective]
        full = objective_correlation(params, objective, data).value
        if selection.selected:
            masked = masked_evaluate(params, objective, selection.selected, data)
            drops = {
                fraction: dimension_drop_cv(params, objective, selection, fraction, data, seed)
                for fraction in drop_fractions
            }
        else:
            logger.warning(f"No dimension of {objective} exceeds epsilon {epsilon:g}")
            masked = None
            drops = {fraction: None for fraction in drop_fractions}
        rows.append(DimReportRow(objective, len(selection), full, masked, drops))
    return rows

@dataclass
class OverlapTable:
    """
    Pairwise counts of shared selected dimensions; the diagonal holds the
    selection sizes.
    """
    objectives: Tuple[ObjectiveId, ...]
    counts: List[List[int]]

    def count(self, a: ObjectiveId, b: ObjectiveId) -> int:
        return self.counts[self.objectives.index(a)][self.objectives.index(b)]

def overlap_table(selections: Sequence[DimSelection]) -> OverlapTable:
    """
    >>> a = DimSelection(ObjectiveId.parse("dep-depth"), 1e-4, 8, (0, 1, 2))
    >>> b = DimSelection(ObjectiveId.parse("pos-depth"), 1e-4, 8, (2, 5))
    >>> overlap_table([a, b]).counts
    [[3, 1], [1, 2]]

    :raises ValueError: When selections come from different dimensions or lack an objective.
    """
    dims = {selection.dim for selection in selections}
    if len(dims) > 1:
        raise ValueError(f"Selections have mismatched dimensions {sorted(dims)}")
    objectives = []
    for selection in selections:
        if selection.objective is None:
            raise ValueError("Overlap tables need selections labelled with their objective")
        objectives.append(selection.objective)
    sets = [set(selection.selected) for selection in selections]
    return OverlapTable(
        objectives=tuple(objectives),
        counts=[[len(a & b) for b in sets] for a in sets],
    )

def check_overlap_mode(mode: str) -> None:
    """
    Overlaps are only meaningful when the objectives share one rotation.

    :raises ConfigError: For modes that train a separate probe per objective.
    """
    if mode not in SHARED_ROTATION_MODES:
        raise ConfigError(
            "mode",
            f"overlap analysis needs a shared-rotation checkpoint (modes {', '.join(SHARED_ROTATION_MODES)}), got mode {mode}"
        )

def histogram_weights(
    scalers: Mapping[ObjectiveId, torch.Tensor],
    objectives: Sequence[ObjectiveId]
) -> torch.Tensor:
    """
    Σ_k 10^(K−1−k)·|d̄_k| over the listed objectives; used only to order
    dimensions for display.
    """
    if not objectives:
        raise ValueError("At least one objective is required")
    count = len(objectives)
    return torch.stack([
        (10.0 ** (count - 1 - k)) * scalers[objective].abs()
        for k, objective in enumerate(objectives)
    ]).sum(dim=0)

@dataclass
class Histogram:
    """
    Selected-dimension counts per consecutive bin of display-ordered dimensions.
    """
    objectives: Tuple[ObjectiveId, ...]
    order: List[int]
    bin_size: int
    counts: Dict[ObjectiveId, List[int]]

def histogram_export(
    scalers: Mapping[ObjectiveId, torch.Tensor],
    selections: Mapping[ObjectiveId, DimSelection],
    objectives: Sequence[ObjectiveId],
    bin_size: int=10
) -> Histogram:
    """
    >>> scaler = torch.cat([torch.ones(25), torch.zeros(15)])
    >>> objective = ObjectiveId.parse("dep-depth")
    >>> selections = {objective: select_dimensions(scaler, objective=objective)}
    >>> histogram_export({objective: scaler}, selections, [objective]).counts[objective]
    [10, 10, 5, 0]
    """
    if bin_size < 1:
        raise ValueError(f"Bin size must be positive, got {bin_size}")
    weights = histogram_weights(scalers, objectives).tolist()
    order = sorted(range(len(weights)), key=lambda index: (-weights[index], index))
    n_bins = math.ceil(len(order) / bin_size)
    counts = {}
    for objective in objectives:
        selected = set(selections[objective].selected)
        bins = [0] * n_bins
        for position, index in enumerate(order):
            if index in selected:
                bins[position // bin_size] += 1
        counts[objective] = bins
    return Histogram(objectives=tuple(objectives), order=order, bin_size=bin_size, counts=counts)

@dataclass
class ScalingHistogram:
    """
    Counts of |d̄| per decade; `edges[k]` is the log10 lower edge of bin k.
    Exact zeros are counted separately.
    """
    edges: List[int]
    counts: List[int]
    zeros: int

def scaling_histogram(
    scaler: torch.Tensor,
    low_exponent: int=-40,
    high_exponent: int=1
) -> ScalingHistogram:
    """
    >>> histogram = scaling_histogram(torch.tensor([0.0, 3e-5, 0.5, 2.0]), -6, 1)
    >>> histogram.zeros, histogram.counts
    (1, [0, 1, 0, 0, 0, 1, 1])
    """
    if not low_exponent < high_exponent:
        raise ValueError(f"Invalid exponent range [{low_exponent}, {high_exponent})")
    magnitudes = scaler.detach().abs().to(torch.float64).cpu().numpy()
    nonzero = magnitudes[magnitudes > 0]
    # Out-of-range magnitudes land in the outermost bins.
    exponents = np.clip(np.floor(np.log10(nonzero)), low_exponent, high_exponent - 1)
    edges = list(range(low_exponent, high_exponent))
    counts = [int(np.sum(exponents == edge)) for edge in edges]
    return ScalingHistogram(edges=edges, counts=counts, zeros=int(magnitudes.size - nonzero.size))

def epsilon_sweep(
    params: ProbeParams,
    epsilons: Sequence[float],
    objectives: Optional[Sequence[ObjectiveId]]=None
) -> Dict[ObjectiveId, Dict[float, int]]:
    """
    Selection sizes for each ε; stable sizes mean the selection does not
    depend on the threshold.
    """
    probe = _orthogonal(params)
    return {
        objective: {
            epsilon: len(select_dimensions(probe.scalers[objective], epsilon, objective))
            for epsilon in epsilons
        }
        for objective in (objectives if objectives is not None else probe.objectives)
    }

def _format(value: Optional[float]) -> str:
    return "NA" if value is None else f"{value:.6f}"

def write_dims_tsv(rows: Sequence[DimReportRow], path: str) -> None:
    fractions = sorted({fraction for row in rows for fraction in row.drops})
    with atomic_open(path) as f:
        columns = ["objective", "n_selected", "correlation_full", "correlation_masked"]
        columns += [f"drop{int(round(fraction * 100))}" for fraction in fractions]
        f.write("\t".join(columns) + "\n")
        for row in rows:
            values = [row.objective.name, str(row.n_selected), _format(row.correlation_full), _format(row.correlation_masked)]
            values += [_format(row.drops.get(fraction)) for fraction in fractions]
            f.write("\t".join(values) + "\n")
    logger.info(f"Wrote dimension table to {path}")

def write_overlap_tsv(table: OverlapTable, path: str) -> None:
    with atomic_open(path) as f:
        f.write("\t".join(["objective"] + [objective.name for objective in table.objectives]) + "\n")
        for objective, row in zip(table.objectives, table.counts):
            f.write("\t".join([objective.name] + [str(count) for count in row]) + "\n")
    logger.info(f"Wrote overlap table to {path}")

def write_histogram_tsv(histogram: Histogram, path: str) -> None:
    with atomic_open(path) as f:
        f.write("bin\tobjective\tcount\n")
        for objective in histogram.objectives:
            for index, count in enumerate(histogram.counts[objective]):
                f.write(f"{index}\t{objective.name}\t{count}\n")
    logger.info(f"Wrote histogram to {path}")

def write_scaling_tsv(histograms: Mapping[ObjectiveId, ScalingHistogram], path: str) -> None:
    with atomic_open(path) as f:
        f.write("objective\tlog10_lower\tcount\n")
        for objective, histogram in histograms.items():
            f.write(f"{objective.name}\tzero\t{histogram.zeros}\n")
            for edge, count in zip(histogram.edges, histogram.counts):
                f.write(f"{objective.name}\t{edge}\t{count}\n")
    logger.info(f"Wrote scaling-vector histogram to {path}")

def write_epsilon_tsv(sweep: Mapping[ObjectiveId, Mapping[float, int]], path: str) -> None:
    with atomic_open(path) as f:
        f.write("objective\tepsilon\tn_selected\n")
        for objective, sizes in sweep.items():
            for epsilon, size in sizes.items():
                f.write(f"{objective.name}\t{epsilon:g}\t{size}\n")
    logger.info(f"Wrote epsilon sweep to {path}")
