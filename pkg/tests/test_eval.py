import json
import math
import random
import torch
import pytest

from typing import List, Optional, Sequence

from ortho_probe.util import (
    ObjectiveId,
    ParseScore,
    ReportCell,
    aggregate_by_length,
    build_report,
    extract_directed_tree,
    extract_undirected_tree,
    gold_edges,
    labels_from_parents,
    objective_correlation,
    oracle_probe,
    parse_score,
    prepare_datasets,
    positional_labels,
    random_tree_parents,
    sentence_distance_spearman,
    spearman,
    Structure,
    uas,
    uuas,
    write_parse_tsv,
    write_report_json,
    write_report_tsv,
)

from conftest import DEP_DEPTH, DEP_DISTANCE, POS_DEPTH, RAND_DEPTH, RAND_DISTANCE, planted_split, unrotated_oracle

def average_ranks(values: Sequence[float]) -> List[float]:
    return [
        1 + sum(other < value for other in values) + (sum(other == value for other in values) - 1) / 2
        for value in values
    ]

def brute_force_spearman(a: Sequence[float], b: Sequence[float]) -> Optional[float]:
    x, y = average_ranks(a), average_ranks(b)
    mx, my = sum(x) / len(x), sum(y) / len(y)
    sxy = sum((i - mx) * (j - my) for i, j in zip(x, y))
    sxx = sum((i - mx) ** 2 for i in x)
    syy = sum((j - my) ** 2 for j in y)
    if sxx == 0 or syy == 0:
        return None
    return sxy / math.sqrt(sxx * syy)

def test_spearman_matches_average_rank_definition() -> None:
    rng = random.Random(7)
    for _ in range(1000):
        n = rng.randint(2, 25)
        a = [float(rng.randint(0, 5)) for _ in range(n)]
        b = [float(rng.randint(0, 8)) for _ in range(n)]
        expected = brute_force_spearman(a, b)
        actual = spearman(a, b)
        if expected is None:
            assert actual is None
        else:
            assert actual == pytest.approx(expected, abs=1e-12)

def test_spearman_edge_cases() -> None:
    assert spearman([1.0], [2.0]) is None
    assert spearman([], []) is None
    with pytest.raises(ValueError):
        spearman([1, 2], [1, 2, 3])

def test_distance_correlation_of_gold_is_perfect() -> None:
    gold = labels_from_parents(random_tree_parents(9, 4), Structure.DEP)
    assert sentence_distance_spearman(gold.distances, gold) == pytest.approx(1.0)
    # Two tokens leave one distance per row, which has no correlation.
    assert sentence_distance_spearman(positional_labels(2).distances, positional_labels(2)) is None

def test_aggregation_keeps_reported_lengths_only() -> None:
    summary = aggregate_by_length([(4, 0.0), (5, 0.2), (5, 0.4), (50, 1.0), (51, 0.0), (6, None)])
    assert sorted(summary.group_means) == [5, 50]
    assert summary.group_means[5] == pytest.approx(0.3)
    assert summary.value == pytest.approx(0.65)
    assert summary.n_sentences == 3
    assert summary.n_skipped == 1
    assert aggregate_by_length([(3, 1.0)]).value is None

def test_minimum_spanning_tree_of_a_tree_metric_is_the_tree() -> None:
    for seed in range(100):
        n = 2 + seed % 29
        parents = random_tree_parents(n, seed)
        labels = labels_from_parents(parents, Structure.RAND)
        edges = extract_undirected_tree(labels.distances)
        assert len(edges) == n - 1
        assert set(edges) == gold_edges(parents)
        assert uuas(edges, parents) == 1.0
        assert extract_directed_tree(labels.distances, labels.depths) == parents
        assert uas(extract_directed_tree(labels.distances, labels.depths), parents) == 1.0

def test_tree_extraction_breaks_ties_lexicographically() -> None:
    distances = torch.ones(4, 4, dtype=torch.float64) - torch.eye(4, dtype=torch.float64)
    assert extract_undirected_tree(distances) == [(0, 1), (0, 2), (0, 3)]
    assert extract_directed_tree(distances, torch.tensor([1.0, 0.0, 0.0, 1.0], dtype=torch.float64)) == [2, 0, 1, 1]

def test_tree_extraction_rejects_bad_matrices() -> None:
    with pytest.raises(ValueError):
        extract_undirected_tree(torch.zeros(2, 3, dtype=torch.float64))
    with pytest.raises(ValueError):
        extract_undirected_tree(torch.tensor([[0.0, 1.0], [2.0, 0.0]], dtype=torch.float64))
    with pytest.raises(ValueError):
        extract_directed_tree(torch.zeros(3, 3, dtype=torch.float64), torch.zeros(2, dtype=torch.float64))

def test_oracle_probe_scores_perfectly(small_spec) -> None: # type: ignore[no-untyped-def]
    sentences, embeddings = planted_split(12, 21, small_spec)
    oracle = oracle_probe(small_spec, sentences, [DEP_DEPTH, DEP_DISTANCE])
    score = parse_score(oracle, embeddings.sentences, sentences)
    assert score.uuas == 1.0
    assert score.uas == 1.0
    assert score.n_sentences == 12
    assert score.n_edges == sum(len(sentence) - 1 for sentence in sentences)
    identity, planted = unrotated_oracle(small_spec, sentences, embeddings, [DEP_DEPTH, DEP_DISTANCE])
    for objective, examples in prepare_datasets(sentences, planted, [DEP_DEPTH, DEP_DISTANCE]).items():
        assert objective_correlation(identity, objective, examples).value == pytest.approx(1.0)

def test_parse_score_without_depth_is_undirected(small_spec) -> None: # type: ignore[no-untyped-def]
    sentences, embeddings = planted_split(4, 22, small_spec)
    distance_only = oracle_probe(small_spec, sentences, [DEP_DISTANCE])
    assert parse_score(distance_only, embeddings.sentences, sentences).uas is None
    depth_only = oracle_probe(small_spec, sentences, [DEP_DEPTH])
    with pytest.raises(ValueError):
        parse_score(depth_only, embeddings.sentences, sentences)
    directed = parse_score(distance_only, embeddings.sentences, sentences, depth_params=depth_only)
    assert directed.uas == 1.0

def test_report_std_and_best_layers() -> None:
    cells = [
        ReportCell(0, DEP_DEPTH, (0.25, 0.75)),
        ReportCell(1, DEP_DEPTH, (0.5, 0.5)),
        ReportCell(2, DEP_DEPTH, (0.5, 0.5)),
        ReportCell(0, POS_DEPTH, (0.9, None)),
        ReportCell(1, RAND_DEPTH, (0.1, 0.3), split="train"),
        ReportCell(1, RAND_DISTANCE, (None, None), split="train"),
    ]
    report = build_report(cells, metadata={"mode": "A"})
    assert cells[0].std == pytest.approx(abs(0.25 - 0.75) / math.sqrt(2))
    # Layer 0 ties layer 1 on the mean and wins as the earlier layer.
    assert report.best[DEP_DEPTH].layer == 0
    assert report.best[POS_DEPTH].std is None
    assert RAND_DISTANCE not in report.best
    assert report.average == pytest.approx((0.5 + 0.9) / 2)
    assert report.random_average == pytest.approx(0.2)
    assert report.selectivity == pytest.approx(0.5)
    assert report.metadata["mode"] == "A"
    assert report.metadata["splits"]["rand-depth"] == "train"

def test_report_without_controls_has_no_selectivity() -> None:
    report = build_report([ReportCell(3, DEP_DISTANCE, (0.5,))])
    assert report.selectivity is None
    assert report.average == 0.5

def test_reports_are_written(tmp_path) -> None: # type: ignore[no-untyped-def]
    report = build_report(
        [ReportCell(0, DEP_DISTANCE, (0.5, 0.7), n_sentences=10, nonzero_dims=12)],
        parse_scores={0: ParseScore(uuas=0.75, uas=None, n_edges=8, n_sentences=2)},
    )
    json_path = str(tmp_path / "report.json")
    write_report_json(report, json_path)
    with open(json_path) as f:
        written = json.load(f)
    assert written["best"]["dep-distance"]["layer"] == 0
    assert written["cells"][0]["nonzero_dims"] == 12
    assert written["parse_scores"]["0"]["uas"] is None

    tsv_path = str(tmp_path / "report.tsv")
    write_report_tsv(report, tsv_path)
    with open(tsv_path) as f:
        rows = [line.rstrip("\n").split("\t") for line in f]
    assert rows[0][:3] == ["layer", "objective", "split"]
    assert rows[1] == ["0", "dep-distance", "test", "0.600000", f"{0.2 / math.sqrt(2):.6f}", "10", "12"]

    parse_path = str(tmp_path / "parse.tsv")
    write_parse_tsv(report.parse_scores, parse_path)
    with open(parse_path) as f:
        assert f.read().splitlines()[1] == "0\t0.750000\tNA\t8\t2"

def test_objective_parsing_round_trips_names() -> None:
    for objective in (DEP_DEPTH, RAND_DISTANCE):
        assert ObjectiveId.parse(objective.name) == objective
