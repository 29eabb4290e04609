import io
import os
import torch
import pytest

from collections import Counter, deque
from scipy.stats import chisquare
from typing import FrozenSet, List, Tuple

from ortho_probe.util import (
    EWT_SENTENCE_COUNTS,
    MalformedSentenceError,
    MalformedTaxonomyError,
    Structure,
    Taxonomy,
    chain_parents,
    gold_labels,
    hypernymy_labels,
    labels_from_parents,
    load_taxonomy,
    parse_conllu,
    positional_labels,
    random_tree_parents,
    random_treebank,
    read_conllu,
    sentence_seed,
    structure_parents,
    write_conllu,
)

SENTENCE = """# sent_id = weblog-1
# text = I don't know.
1\tI\tI\tPRON\tPRP\t_\t4\tnsubj\t_\t_
2-3\tdon't\t_\t_\t_\t_\t_\t_\t_\t_
2\tdo\tdo\tAUX\tVBP\t_\t4\taux\t_\t_
3\tn't\tnot\tPART\tRB\t_\t4\tadvmod\t_\t_
4\tknow\tknow\tVERB\tVB\t_\t0\troot\t_\t_
4.1\tit\tit\tPRON\tPRP\t_\t_\t_\t4:obj\t_
5\t.\t.\tPUNCT\t.\t_\t4\tpunct\t_\t_

"""

def conllu_block(sentence_id: str, heads: List[int]) -> str:
    lines = [f"# sent_id = {sentence_id}"]
    for index, head in enumerate(heads, start=1):
        lines.append(f"{index}\tw{index}\tw{index}\tNOUN\t_\t_\t{head}\tdep\t_\t_")
    return "\n".join(lines) + "\n\n"

def test_parse_skips_ranges_and_empty_nodes() -> None:
    [sentence] = parse_conllu(io.StringIO(SENTENCE))
    assert sentence.id == "weblog-1"
    assert [token.form for token in sentence.tokens] == ["I", "do", "n't", "know", "."]
    assert sentence.parents == [4, 4, 4, 0, 4]
    assert sentence.root == 4

def test_parse_multiple_sentences_without_trailing_blank_line() -> None:
    text = conllu_block("a", [0, 1]) + conllu_block("b", [2, 0, 2]).rstrip("\n")
    sentences = parse_conllu(text.splitlines())
    assert [s.id for s in sentences] == ["a", "b"]
    assert [len(s) for s in sentences] == [2, 3]

def test_sentence_ids_default_to_ordinals() -> None:
    text = "1\ta\ta\tX\t_\t_\t0\troot\t_\t_\n\n1\tb\tb\tX\t_\t_\t0\troot\t_\t_\n"
    assert [s.id for s in parse_conllu(text.splitlines())] == ["sent-1", "sent-2"]

@pytest.mark.parametrize("heads,message", [
    ([2, 1], "no root"),
    ([0, 0], "2 root tokens"),
    ([0, 3, 2], "cycle"),
    ([0, 5], "out-of-range"),
    ([0, 2], "its own head"),
])
def test_malformed_trees_name_the_sentence(heads: List[int], message: str) -> None:
    with pytest.raises(MalformedSentenceError) as info:
        parse_conllu(conllu_block("bad-7", heads).splitlines())
    assert info.value.sentence_id == "bad-7"
    assert message in str(info.value)

def test_non_integer_head_is_malformed() -> None:
    text = "# sent_id = x\n1\ta\ta\tX\t_\t_\troot\troot\t_\t_\n"
    with pytest.raises(MalformedSentenceError):
        parse_conllu(text.splitlines())

def test_written_treebank_parses_back() -> None:
    sentences = list(random_treebank(5, 2, 9, seed=4))
    stream = io.StringIO()
    write_conllu(sentences, stream)
    parsed = parse_conllu(io.StringIO(stream.getvalue()))
    assert [(s.id, s.parents) for s in parsed] == [(s.id, s.parents) for s in sentences]

def bfs_distances(parents: List[int]) -> List[List[int]]:
    n = len(parents)
    adjacency: List[List[int]] = [[] for _ in range(n)]
    for token, head in enumerate(parents):
        if head:
            adjacency[token].append(head - 1)
            adjacency[head - 1].append(token)
    table = []
    for start in range(n):
        distance = [-1] * n
        distance[start] = 0
        queue = deque([start])
        while queue:
            node = queue.popleft()
            for neighbor in adjacency[node]:
                if distance[neighbor] < 0:
                    distance[neighbor] = distance[node] + 1
                    queue.append(neighbor)
        table.append(distance)
    return table

def test_lca_distances_match_breadth_first_search() -> None:
    for seed in range(40):
        n = 1 + seed % 17
        parents = random_tree_parents(n, seed)
        labels = labels_from_parents(parents, Structure.RAND)
        expected = bfs_distances(parents)
        assert labels.distances.tolist() == [[float(d) for d in row] for row in expected]
        root = parents.index(0)
        assert labels.depths.tolist() == [float(d) for d in expected[root]]

def test_labels_are_symmetric_with_zero_diagonal() -> None:
    labels = labels_from_parents(random_tree_parents(12, 3), Structure.DEP)
    assert torch.equal(labels.distances, labels.distances.T)
    assert torch.all(torch.diagonal(labels.distances) == 0)
    assert labels.n_distance_pairs == 66

def test_positional_labels_are_the_chain() -> None:
    for n in (1, 2, 9):
        chain = labels_from_parents(chain_parents(n), Structure.POS)
        positional = positional_labels(n)
        assert torch.equal(chain.depths, positional.depths)
        assert torch.equal(chain.distances, positional.distances)

def test_random_tree_parents_form_a_tree() -> None:
    for seed in range(30):
        parents = random_tree_parents(10, seed)
        assert parents.count(0) == 1
        assert all(0 <= head <= 10 for head in parents)
        assert all(d >= 0 for d in bfs_distances(parents)[0])

def undirected(parents: List[int]) -> FrozenSet[Tuple[int, int]]:
    return frozenset((min(token, head - 1), max(token, head - 1)) for token, head in enumerate(parents) if head)

def test_random_trees_on_four_nodes_are_uniform() -> None:
    counts = Counter(undirected(random_tree_parents(4, seed)) for seed in range(16000))
    # Cayley: 4^(4-2) labeled trees.
    assert len(counts) == 16
    _, p = chisquare(list(counts.values()))
    assert p > 0.01

def test_rooted_random_trees_on_three_nodes_are_uniform() -> None:
    counts = Counter(tuple(random_tree_parents(3, seed)) for seed in range(9000))
    # Three labeled trees times three roots.
    assert len(counts) == 9
    _, p = chisquare(list(counts.values()))
    assert p > 0.001

def test_sentence_seed_is_stable() -> None:
    assert sentence_seed(0, "s1") == sentence_seed(0, "s1")
    assert sentence_seed(0, "s1") != sentence_seed(0, "s2")
    assert 0 <= sentence_seed(2**70, "s1") < 2**64

def test_random_structure_is_shared_by_depth_and_distance() -> None:
    [sentence] = list(random_treebank(1, 8, 8, seed=2))
    labels = gold_labels(sentence, Structure.RAND, seed=5)
    parents = structure_parents(sentence, Structure.RAND, seed=5)
    assert torch.equal(labels.distances, labels_from_parents(parents, Structure.RAND).distances)
    assert torch.equal(gold_labels(sentence, Structure.RAND, seed=5).depths, labels.depths)

def test_random_treebank_is_deterministic() -> None:
    first = list(random_treebank(20, 5, 20, seed=9))
    second = list(random_treebank(20, 5, 20, seed=9))
    assert first == second
    assert all(5 <= len(sentence) <= 20 for sentence in first)
    with pytest.raises(ValueError):
        list(random_treebank(1, 6, 5, seed=0))

TAXONOMY = """# hypernymy forest
E\tdog.n\tcanine.n
E\tcanine.n\tanimal.n
E\tcat.n\tfeline.n
E\tfeline.n\tanimal.n
E\trun.v\tmove.v
L\tdog\tNOUN\tdog.n
L\tcat\tNOUN\tcat.n
L\trun\tVERB\trun.v
L\tmove\tVERB\tmove.v
L\tstone\tNOUN\tstone.n
E\tstone.n\tobject.n
"""

def test_taxonomy_depths_and_lca_distances() -> None:
    taxonomy = load_taxonomy(io.StringIO(TAXONOMY))
    assert taxonomy.depth("dog.n") == 2
    assert taxonomy.root("dog.n") == "animal.n"
    assert taxonomy.distance("dog.n", "cat.n") == 4
    assert taxonomy.distance("dog.n", "canine.n") == 1
    assert taxonomy.distance("dog.n", "stone.n") is None
    assert taxonomy.lookup("Dog", "NOUN") == "dog.n"
    assert taxonomy.lookup("dog", "VERB") is None

def test_hypernymy_labels_mask_unresolved_and_cross_category_pairs() -> None:
    taxonomy = load_taxonomy(io.StringIO(TAXONOMY))
    text = (
        "# sent_id = h1\n"
        "1\tdog\tdog\tNOUN\t_\t_\t2\tnsubj\t_\t_\n"
        "2\truns\trun\tVERB\t_\t_\t0\troot\t_\t_\n"
        "3\tthe\tthe\tDET\t_\t_\t4\tdet\t_\t_\n"
        "4\tcat\tcat\tNOUN\t_\t_\t2\tobj\t_\t_\n"
        "5\tstone\tstone\tNOUN\t_\t_\t2\tobl\t_\t_\n"
    )
    [sentence] = parse_conllu(text.splitlines())
    labels = hypernymy_labels(sentence, taxonomy)
    assert labels.depth_mask.tolist() == [True, True, False, True, True]
    assert labels.depths[0].item() == 2.0
    assert labels.depths[1].item() == 1.0
    assert bool(labels.distance_mask[0, 3]) and labels.distances[0, 3].item() == 4.0
    assert not bool(labels.distance_mask[0, 1])
    assert not bool(labels.distance_mask[0, 4])
    assert not bool(labels.distance_mask[2, 3])
    assert torch.equal(labels.distance_mask, labels.distance_mask.T)

@pytest.mark.parametrize("text", [
    "E\ta\tb\nE\tb\ta\n",
    "E\ta\tb\nE\ta\tc\n",
    "L\tdog\tNOUN\tmissing\n",
    "X\tbroken\n",
])
def test_malformed_taxonomies(text: str) -> None:
    with pytest.raises(MalformedTaxonomyError):
        load_taxonomy(io.StringIO(text))

def test_taxonomy_from_mappings() -> None:
    taxonomy = Taxonomy({"a": "b"}, {("x", "NOUN"): "a"})
    assert taxonomy.nodes == ["a", "b"]
    assert taxonomy.ancestors("a") == ["a", "b"]

def test_hypernymy_labels_need_a_taxonomy() -> None:
    [sentence] = list(random_treebank(1, 3, 3, seed=0))
    with pytest.raises(ValueError):
        gold_labels(sentence, Structure.LEX)
    with pytest.raises(ValueError):
        structure_parents(sentence, Structure.LEX)

EWT_DIR = os.getenv("ORTHO_PROBE_EWT_DIR")

@pytest.mark.skipif(EWT_DIR is None, reason="set ORTHO_PROBE_EWT_DIR to a directory holding the EWT splits")
@pytest.mark.parametrize("split", ["train", "dev", "test"])
def test_ewt_split_sizes(split: str) -> None:
    assert EWT_DIR is not None
    sentences = read_conllu(os.path.join(EWT_DIR, f"en_ewt-ud-{split}.conllu"))
    assert len(sentences) == EWT_SENTENCE_COUNTS[split]
