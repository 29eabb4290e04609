from __future__ import annotations

import json
import math
import torch
import numpy as np

from collections import deque
from dataclasses import dataclass, field
from scipy.stats import rankdata
from typing import Any, Dict, List, Mapping, Optional, Sequence, Set, Tuple

from .log_util import logger
from .file_util import atomic_open
from .objective_util import LINGUISTIC_STRUCTURES, ObjectiveId, Structure, Target
from .treebank_util import AnnotatedSentence, GoldLabels, structure_parents
from .probe_util import Example, ProbeParams, predict, predict_depths, predict_distances

__all__ = [
    "MIN_REPORTED_LENGTH",
    "MAX_REPORTED_LENGTH",
    "CorrelationSummary",
    "ParseScore",
    "ReportCell",
    "EvalReport",
    "spearman",
    "sentence_depth_spearman",
    "sentence_distance_spearman",
    "aggregate_by_length",
    "score_predictions",
    "depth_correlation",
    "distance_correlation",
    "objective_correlation",
    "gold_edges",
    "extract_undirected_tree",
    "uuas",
    "extract_directed_tree",
    "uas",
    "parse_score",
    "build_report",
    "write_report_json",
    "write_report_tsv",
    "write_parse_tsv",
]

MIN_REPORTED_LENGTH = 5
MAX_REPORTED_LENGTH = 50

Edge = Tuple[int, int]

def spearman(a: Sequence[float], b: Sequence[float]) -> Optional[float]:
    """
    Spearman's rank correlation with average ranks for ties.

    >>> spearman([1, 2, 3, 4], [10, 20, 30, 40])
    1.0
    >>> spearman([1, 2, 3], [3, 2, 1])
    -1.0
    >>> spearman([1, 2, 3], [5, 5, 5]) is None
    True

    :return: The correlation, or None when either side is constant or
        shorter than two values.
    :raises ValueError: When the sequences differ in length.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"Cannot correlate sequences of lengths {x.size} and {y.size}")
    if x.size < 2:
        return None
    x_ranks = rankdata(x)
    y_ranks = rankdata(y)
    x_ranks = x_ranks - x_ranks.mean()
    y_ranks = y_ranks - y_ranks.mean()
    denominator = math.sqrt(float(x_ranks @ x_ranks) * float(y_ranks @ y_ranks))
    if denominator == 0.0:
        return None
    return max(-1.0, min(1.0, float(x_ranks @ y_ranks) / denominator))

def sentence_depth_spearman(prediction: torch.Tensor, gold: GoldLabels) -> Optional[float]:
    """
    Correlation between gold depths and predicted squared norms over unmasked tokens.
    """
    mask = gold.depth_mask
    return spearman(gold.depths[mask].tolist(), prediction[mask].tolist())

def sentence_distance_spearman(prediction: torch.Tensor, gold: GoldLabels) -> Optional[float]:
    """
    Per token, the correlation between its gold and predicted distance rows
    (unmasked, self excluded), averaged over tokens with a defined value.
    """
    n = len(gold)
    values = []
    for i in range(n):
        mask = gold.distance_mask[i].clone()
        mask[i] = False
        rho = spearman(gold.distances[i][mask].tolist(), prediction[i][mask].tolist())
        if rho is not None:
            values.append(rho)
    if not values:
        return None
    return float(np.mean(values))

@dataclass
class CorrelationSummary:
    """
    Length-grouped correlations: the mean within each sentence length, then
    the macro mean over lengths.
    """
    value: Optional[float]
    group_means: Dict[int, float]
    n_sentences: int
    n_skipped: int

def aggregate_by_length(
    scores: Sequence[Tuple[int, Optional[float]]],
    min_length: int=MIN_REPORTED_LENGTH,
    max_length: int=MAX_REPORTED_LENGTH
) -> CorrelationSummary:
    """
    >>> aggregate_by_length([(5, 1.0), (5, 0.0), (6, 0.5), (51, -1.0), (7, None)]).value
    0.5
    """
    groups: Dict[int, List[float]] = {}
    skipped = 0
    for length, score in scores:
        if not min_length <= length <= max_length:
            continue
        if score is None:
            skipped += 1
            continue
        groups.setdefault(length, []).append(score)
    group_means = {length: float(np.mean(values)) for length, values in sorted(groups.items())}
    value = float(np.mean(list(group_means.values()))) if group_means else None
    return CorrelationSummary(
        value=value,
        group_means=group_means,
        n_sentences=sum(len(values) for values in groups.values()),
        n_skipped=skipped,
    )

def score_predictions(
    predictions: Sequence[torch.Tensor],
    labels: Sequence[GoldLabels],
    min_length: int=MIN_REPORTED_LENGTH,
    max_length: int=MAX_REPORTED_LENGTH
) -> CorrelationSummary:
    """
    Scores per-sentence predictions against gold labels; 2-D predictions
    are distances, 1-D predictions depths.
    """
    if len(predictions) != len(labels):
        raise ValueError(f"Got {len(predictions)} predictions for {len(labels)} sentences")
    scores = []
    for prediction, gold in zip(predictions, labels):
        if prediction.dim() == 2:
            score = sentence_distance_spearman(prediction, gold)
        else:
            score = sentence_depth_spearman(prediction, gold)
        scores.append((len(gold), score))
    summary = aggregate_by_length(scores, min_length, max_length)
    if summary.n_skipped:
        logger.warning(f"{summary.n_skipped} sentence(s) had no defined correlation and were skipped")
    return summary

def depth_correlation(
    params: ProbeParams,
    objective: ObjectiveId,
    examples: Sequence[Example],
    min_length: int=MIN_REPORTED_LENGTH,
    max_length: int=MAX_REPORTED_LENGTH
) -> CorrelationSummary:
    if objective.target is not Target.DEPTH:
        raise ValueError(f"{objective} is not a depth objective")
    predictions = [predict_depths(params, objective, example.embeddings) for example in examples]
    return score_predictions(predictions, [example.labels for example in examples], min_length, max_length)

def distance_correlation(
    params: ProbeParams,
    objective: ObjectiveId,
    examples: Sequence[Example],
    min_length: int=MIN_REPORTED_LENGTH,
    max_length: int=MAX_REPORTED_LENGTH
) -> CorrelationSummary:
    if objective.target is not Target.DISTANCE:
        raise ValueError(f"{objective} is not a distance objective")
    predictions = [predict_distances(params, objective, example.embeddings) for example in examples]
    return score_predictions(predictions, [example.labels for example in examples], min_length, max_length)

def objective_correlation(
    params: ProbeParams,
    objective: ObjectiveId,
    examples: Sequence[Example],
    min_length: int=MIN_REPORTED_LENGTH,
    max_length: int=MAX_REPORTED_LENGTH
) -> CorrelationSummary:
    """
    Depth or distance correlation, whichever the objective targets.
    """
    predictions = [predict(params, objective, example.embeddings) for example in examples]
    return score_predictions(predictions, [example.labels for example in examples], min_length, max_length)

def gold_edges(parents: Sequence[int]) -> Set[Edge]:
    """
    Undirected 0-based edges (i < j) of a parent array.

    >>> sorted(gold_edges([2, 0, 2]))
    [(0, 1), (1, 2)]
    """
    return {
        (min(token, head - 1), max(token, head - 1))
        for token, head in enumerate(parents)
        if head != 0
    }

def extract_undirected_tree(distances: torch.Tensor) -> List[Edge]:
    """
    Minimum spanning tree over predicted distances (Kruskal); ties break
    lexicographically on (i, j).

    >>> d = torch.tensor([[0, 1, 2], [1, 0, 1], [2, 1, 0]], dtype=torch.float64)
    >>> extract_undirected_tree(d)
    [(0, 1), (1, 2)]

    :raises ValueError: When the matrix is not square and symmetric.
    """
    if distances.dim() != 2 or distances.shape[0] != distances.shape[1]:
        raise ValueError(f"Expected a square distance matrix, got shape {tuple(distances.shape)}")
    if not torch.allclose(distances, distances.T, rtol=0.0, atol=1e-12):
        raise ValueError("Distance matrix is not symmetric")
    n = int(distances.shape[0])
    values = distances.detach().cpu().tolist()
    pairs = sorted(
        ((values[i][j], i, j) for i in range(n) for j in range(i + 1, n)),
    )
    component = list(range(n))

    def find(node: int) -> int:
        while component[node] != node:
            component[node] = component[component[node]]
            node = component[node]
        return node

    edges: List[Edge] = []
    for _, i, j in pairs:
        a, b = find(i), find(j)
        if a == b:
            continue
        component[max(a, b)] = min(a, b)
        edges.append((i, j))
        if len(edges) == n - 1:
            break
    return sorted(edges)

def uuas(edges: Sequence[Edge], parents: Sequence[int]) -> float:
    """
    Fraction of gold undirected edges recovered.

    >>> uuas([(0, 1), (1, 2), (2, 3)], [0, 1, 1, 1])
    0.3333333333333333
    """
    gold = gold_edges(parents)
    if not gold:
        return 1.0
    predicted = {(min(i, j), max(i, j)) for i, j in edges}
    return len(predicted & gold) / len(gold)

def extract_directed_tree(distances: torch.Tensor, depths: torch.Tensor) -> List[int]:
    """
    Orients the minimum spanning tree away from the token of minimum
    predicted depth (first on ties).

    >>> d = torch.tensor([[0, 1, 2], [1, 0, 1], [2, 1, 0]], dtype=torch.float64)
    >>> extract_directed_tree(d, torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64))
    [2, 0, 2]

    :return: A parent array, 1-based with 0 marking the root.
    """
    n = int(distances.shape[0])
    if depths.shape != (n,):
        raise ValueError(f"Expected {n} depth predictions, got shape {tuple(depths.shape)}")
    neighbors: Dict[int, List[int]] = {token: [] for token in range(n)}
    for i, j in extract_undirected_tree(distances):
        neighbors[i].append(j)
        neighbors[j].append(i)
    root = int(np.argmin(depths.detach().cpu().numpy()))
    parents = [0] * n
    visited = {root}
    queue = deque([root])
    while queue:
        node = queue.popleft()
        for child in sorted(neighbors[node]):
            if child not in visited:
                visited.add(child)
                parents[child] = node + 1
                queue.append(child)
    return parents

def uas(predicted: Sequence[int], gold: Sequence[int]) -> float:
    """
    Fraction of tokens whose predicted head equals the gold head; the root
    counts as correct only when it is the gold root.

    >>> uas([2, 0, 2], [2, 0, 1])
    0.6666666666666666
    """
    if len(predicted) != len(gold):
        raise ValueError(f"Parent arrays differ in length ({len(predicted)} vs {len(gold)})")
    if not gold:
        return 1.0
    return sum(p == g for p, g in zip(predicted, gold)) / len(gold)

@dataclass
class ParseScore:
    """
    Micro-averaged attachment scores over a set of sentences.
    """
    uuas: float
    uas: Optional[float]
    n_edges: int
    n_sentences: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "uuas": self.uuas,
            "uas": self.uas,
            "n_edges": self.n_edges,
            "n_sentences": self.n_sentences,
        }

def parse_score(
    params: ProbeParams,
    embeddings: Sequence[torch.Tensor],
    sentences: Sequence[AnnotatedSentence],
    structure: Structure=Structure.DEP,
    seed: int=0,
    depth_params: Optional[ProbeParams]=None
) -> ParseScore:
    """
    Extracts trees from a probe's distance predictions and scores them
    against the gold trees of `structure`. Directed trees and UAS need depth
    predictions, taken from `depth_params` or else from `params` when it
    also probes depth.

    :raises ValueError: When the probe has no distance objective for `structure`.
    """
    distance_objective = ObjectiveId(structure, Target.DISTANCE)
    depth_objective = ObjectiveId(structure, Target.DEPTH)
    if distance_objective not in params.objectives:
        raise ValueError(f"Tree extraction needs a trained {distance_objective} objective")
    if depth_params is None and depth_objective in params.objectives:
        depth_params = params
    directed = depth_params is not None and depth_objective in depth_params.objectives

    correct_edges = 0
    correct_heads = 0
    n_edges = 0
    n_tokens = 0
    n_sentences = 0
    for matrix, sentence in zip(embeddings, sentences):
        n = len(sentence)
        if n < 2:
            continue
        gold = structure_parents(sentence, structure, seed=seed)
        distances = predict_distances(params, distance_objective, matrix)
        edges = extract_undirected_tree(distances)
        correct_edges += len(set(edges) & gold_edges(gold))
        n_edges += n - 1
        n_sentences += 1
        if directed:
            assert depth_params is not None
            predicted = extract_directed_tree(distances, predict_depths(depth_params, depth_objective, matrix))
            correct_heads += sum(p == g for p, g in zip(predicted, gold))
            n_tokens += n
    if n_edges == 0:
        raise ValueError("No sentence with at least two tokens to parse")
    return ParseScore(
        uuas=correct_edges / n_edges,
        uas=correct_heads / n_tokens if directed else None,
        n_edges=n_edges,
        n_sentences=n_sentences,
    )

@dataclass(frozen=True)
class ReportCell:
    """
    One (layer, objective) correlation, one value per seed.
    """
    layer: int
    objective: ObjectiveId
    values: Tuple[Optional[float], ...]
    split: str = "test"
    n_sentences: int = 0
    nonzero_dims: Optional[int] = None

    @property
    def defined(self) -> List[float]:
        return [value for value in self.values if value is not None]

    @property
    def mean(self) -> Optional[float]:
        values = self.defined
        return float(np.mean(values)) if values else None

    @property
    def std(self) -> Optional[float]:
        """
        Sample standard deviation over seeds; None for fewer than two.

        >>> round(ReportCell(0, ObjectiveId.parse("dep-depth"), (0.8, 0.9)).std, 6)
        0.070711
        """
        values = self.defined
        return float(np.std(values, ddof=1)) if len(values) > 1 else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "layer": self.layer,
            "objective": self.objective.name,
            "split": self.split,
            "values": list(self.values),
            "mean": self.mean,
            "std": self.std,
            "n_sentences": self.n_sentences,
            "nonzero_dims": self.nonzero_dims,
        }

@dataclass
class EvalReport:
    """
    Layer-wise correlations, the best layer per objective, the average over
    linguistic objectives and the selectivity against random trees.
    """
    cells: List[ReportCell]
    best: Dict[ObjectiveId, ReportCell]
    average: Optional[float]
    random_average: Optional[float]
    selectivity: Optional[float]
    parse_scores: Dict[int, ParseScore] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "cells": [cell.to_dict() for cell in self.cells],
            "best": {
                objective.name: {"layer": cell.layer, "mean": cell.mean, "std": cell.std}
                for objective, cell in sorted(self.best.items())
            },
            "average": self.average,
            "random_average": self.random_average,
            "selectivity": self.selectivity,
            "parse_scores": {str(layer): score.to_dict() for layer, score in sorted(self.parse_scores.items())},
            "metadata": self.metadata,
        }

def _mean_of(cells: Sequence[ReportCell]) -> Optional[float]:
    means = [cell.mean for cell in cells if cell.mean is not None]
    return float(np.mean(means)) if means else None

def build_report(
    cells: Sequence[ReportCell],
    parse_scores: Optional[Mapping[int, ParseScore]]=None,
    metadata: Optional[Dict[str, Any]]=None
) -> EvalReport:
    """
    Picks the best layer per objective (first layer on ties) and derives
    the average and selectivity rows.

    The average runs over the best cells of the dependency, hypernymy and
    positional objectives present; selectivity subtracts the average over
    the random-tree objectives.

    >>> cells = [
    ...     ReportCell(0, ObjectiveId.parse("dep-depth"), (0.5,)),
    ...     ReportCell(1, ObjectiveId.parse("dep-depth"), (0.7,)),
    ...     ReportCell(1, ObjectiveId.parse("rand-depth"), (0.2,), split="train"),
    ... ]
    >>> report = build_report(cells)
    >>> report.best[ObjectiveId.parse("dep-depth")].layer, round(report.selectivity, 6)
    (1, 0.5)
    """
    best: Dict[ObjectiveId, ReportCell] = {}
    for cell in sorted(cells, key=lambda cell: (cell.objective, cell.layer)):
        if cell.mean is None:
            continue
        current = best.get(cell.objective)
        if current is None or cell.mean > (current.mean if current.mean is not None else -math.inf):
            best[cell.objective] = cell

    linguistic = [cell for objective, cell in best.items() if objective.structure in LINGUISTIC_STRUCTURES]
    control = [cell for objective, cell in best.items() if objective.structure is Structure.RAND]
    average = _mean_of(linguistic)
    random_average = _mean_of(control)
    selectivity = average - random_average if average is not None and random_average is not None else None

    combined_metadata = dict(metadata or {})
    combined_metadata["splits"] = {cell.objective.name: cell.split for cell in cells}
    return EvalReport(
        cells=list(cells),
        best=best,
        average=average,
        random_average=random_average,
        selectivity=selectivity,
        parse_scores=dict(parse_scores or {}),
        metadata=combined_metadata,
    )

def write_report_json(report: EvalReport, path: str) -> None:
    with atomic_open(path) as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Wrote report to {path}")

def _format(value: Optional[float]) -> str:
    return "NA" if value is None else f"{value:.6f}"

def write_report_tsv(report: EvalReport, path: str) -> None:
    """
    One row per layer and objective.
    """
    with atomic_open(path) as f:
        f.write("layer\tobjective\tsplit\tmean\tstd\tn_sentences\tnonzero_dims\n")
        for cell in sorted(report.cells, key=lambda cell: (cell.layer, cell.objective)):
            dims = "NA" if cell.nonzero_dims is None else str(cell.nonzero_dims)
            f.write(
                f"{cell.layer}\t{cell.objective.name}\t{cell.split}\t{_format(cell.mean)}"
                f"\t{_format(cell.std)}\t{cell.n_sentences}\t{dims}\n"
            )
    logger.info(f"Wrote report table to {path}")

def write_parse_tsv(scores: Mapping[int, ParseScore], path: str) -> None:
    with atomic_open(path) as f:
        f.write("layer\tuuas\tuas\tn_edges\tn_sentences\n")
        for layer, score in sorted(scores.items()):
            f.write(f"{layer}\t{_format(score.uuas)}\t{_format(score.uas)}\t{score.n_edges}\t{score.n_sentences}\n")
    logger.info(f"Wrote attachment scores to {path}")
