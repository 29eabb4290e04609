from __future__ import annotations

import heapq
import hashlib
import torch
import numpy as np

from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, TextIO, Tuple

from .log_util import logger
from .dtype_util import TRAINING_DTYPE
from .error_util import MalformedSentenceError, MalformedTaxonomyError
from .objective_util import Structure

__all__ = [
    "Token",
    "AnnotatedSentence",
    "GoldLabels",
    "Taxonomy",
    "parse_conllu",
    "read_conllu",
    "write_conllu",
    "labels_from_parents",
    "dep_labels",
    "positional_labels",
    "chain_parents",
    "random_tree_parents",
    "random_tree_labels",
    "sentence_seed",
    "load_taxonomy",
    "hypernymy_labels",
    "gold_labels",
    "structure_parents",
    "random_treebank",
]

ID, FORM, LEMMA, UPOS, XPOS, FEATS, HEAD, DEPREL, DEPS, MISC = range(10)
HYPERNYMY_TAGS = ("NOUN", "VERB")

@dataclass(frozen=True)
class Token:
    """
    A single treebank word. `head` is 0 for the root, otherwise the 1-based parent index.
    """
    index: int
    form: str
    lemma: str
    upos: str
    head: int

@dataclass(frozen=True)
class AnnotatedSentence:
    id: str
    tokens: Tuple[Token, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def parents(self) -> List[int]:
        return [token.head for token in self.tokens]

    @property
    def root(self) -> int:
        """
        The 1-based index of the root token.
        """
        return next(token.index for token in self.tokens if token.head == 0)

@dataclass(frozen=True, eq=False)
class GoldLabels:
    """
    Depths and pairwise distances of one structure over one sentence.

    Masks are `True` where the label takes part in losses and metrics.
    """
    structure: Structure
    depths: torch.Tensor
    depth_mask: torch.Tensor
    distances: torch.Tensor
    distance_mask: torch.Tensor

    def __len__(self) -> int:
        return int(self.depths.shape[0])

    @property
    def n_depths(self) -> int:
        return int(self.depth_mask.sum())

    @property
    def n_distance_pairs(self) -> int:
        """
        Number of unmasked unordered pairs (i < j).
        """
        return int(torch.triu(self.distance_mask, diagonal=1).sum())

    def permuted(self, order: Sequence[int]) -> GoldLabels:
        """
        Returns labels re-indexed by a token permutation.
        """
        index = torch.as_tensor(list(order), dtype=torch.long)
        return GoldLabels(
            structure=self.structure,
            depths=self.depths[index],
            depth_mask=self.depth_mask[index],
            distances=self.distances[index][:, index],
            distance_mask=self.distance_mask[index][:, index],
        )

def _check_tree(sentence_id: str, parents: Sequence[int]) -> None:
    n = len(parents)
    roots = [i + 1 for i, head in enumerate(parents) if head == 0]
    if len(roots) == 0:
        raise MalformedSentenceError(sentence_id, "no root token")
    if len(roots) > 1:
        raise MalformedSentenceError(sentence_id, f"{len(roots)} root tokens {roots}")
    for i, head in enumerate(parents):
        if head < 0 or head > n:
            raise MalformedSentenceError(sentence_id, f"token {i + 1} has out-of-range head {head}")
        if head == i + 1:
            raise MalformedSentenceError(sentence_id, f"token {i + 1} is its own head")
    # Every token must reach the root within n steps.
    for start in range(1, n + 1):
        node, steps = start, 0
        while node != 0:
            node = parents[node - 1]
            steps += 1
            if steps > n:
                raise MalformedSentenceError(sentence_id, f"cycle through token {start}")

def _parse_block(lines: List[str], comments: List[str], ordinal: int) -> AnnotatedSentence:
    sentence_id = f"sent-{ordinal}"
    for comment in comments:
        key, _, value = comment.lstrip("#").partition("=")
        if key.strip() == "sent_id" and value.strip():
            sentence_id = value.strip()

    tokens: List[Token] = []
    for line in lines:
        columns = line.split("\t")
        if "-" in columns[ID] or "." in columns[ID]:
            # Multiword ranges and empty nodes are not tree tokens.
            continue
        if len(columns) <= HEAD:
            raise MalformedSentenceError(sentence_id, f"expected 10 columns, got {len(columns)}: {line!r}")
        try:
            index = int(columns[ID])
            head = int(columns[HEAD])
        except ValueError:
            raise MalformedSentenceError(sentence_id, f"non-integer id or head in {line!r}") from None
        if index != len(tokens) + 1:
            raise MalformedSentenceError(sentence_id, f"token ids are not consecutive at {index}")
        tokens.append(Token(
            index=index,
            form=columns[FORM],
            lemma=columns[LEMMA],
            upos=columns[UPOS],
            head=head
        ))
    if not tokens:
        raise MalformedSentenceError(sentence_id, "no tokens")
    _check_tree(sentence_id, [token.head for token in tokens])
    return AnnotatedSentence(id=sentence_id, tokens=tuple(tokens))

def parse_conllu(stream: Iterable[str]) -> List[AnnotatedSentence]:
    """
    Parses CoNLL-U text into validated sentences.

    >>> text = "# sent_id = s1\\n1\\tHe\\the\\tPRON\\t_\\t_\\t2\\tnsubj\\t_\\t_\\n2\\truns\\trun\\tVERB\\t_\\t_\\t0\\troot\\t_\\t_\\n"
    >>> [s] = parse_conllu(text.splitlines())
    >>> s.id, len(s), s.root
    ('s1', 2, 2)

    :param stream: Lines of CoNLL-U text (a text file or a list of lines).
    :return: One sentence per blank-line-separated block.
    :raises MalformedSentenceError: When a block is not a single rooted tree.
    """
    sentences: List[AnnotatedSentence] = []
    lines: List[str] = []
    comments: List[str] = []
    for raw in stream:
        line = raw.rstrip("\r\n")
        if line.startswith("#"):
            comments.append(line)
            continue
        if not line.strip():
            if lines:
                sentences.append(_parse_block(lines, comments, len(sentences) + 1))
            lines, comments = [], []
            continue
        lines.append(line)
    if lines:
        sentences.append(_parse_block(lines, comments, len(sentences) + 1))
    return sentences

def read_conllu(path: str) -> List[AnnotatedSentence]:
    """
    Reads a CoNLL-U file.
    """
    with open(path, "r", encoding="utf-8") as f:
        sentences = parse_conllu(f)
    logger.info(f"Read {len(sentences)} sentences from {path}")
    return sentences

def write_conllu(sentences: Iterable[AnnotatedSentence], stream: TextIO) -> None:
    """
    Writes sentences as minimal 10-column CoNLL-U.
    """
    for sentence in sentences:
        stream.write(f"# sent_id = {sentence.id}\n")
        for token in sentence.tokens:
            deprel = "root" if token.head == 0 else "dep"
            stream.write(
                f"{token.index}\t{token.form}\t{token.lemma}\t{token.upos}\t_\t_\t{token.head}\t{deprel}\t_\t_\n"
            )
        stream.write("\n")

def _tree_depths(parents: Sequence[int]) -> List[int]:
    depths: List[Optional[int]] = [None] * len(parents)
    for start in range(len(parents)):
        path = []
        node = start
        while depths[node] is None and parents[node] != 0:
            path.append(node)
            node = parents[node] - 1
        base = depths[node] if depths[node] is not None else 0
        depths[node] = base
        for offset, visited in enumerate(reversed(path), start=1):
            depths[visited] = base + offset
    return [int(depth) for depth in depths] # type: ignore[arg-type]

def labels_from_parents(parents: Sequence[int], structure: Structure) -> GoldLabels:
    """
    Builds unmasked tree labels from a parent array (0 = root, 1-based heads).

    Distances use depth_i + depth_j − 2·depth_lca.

    >>> labels = labels_from_parents([0, 1, 2], Structure.DEP)
    >>> labels.depths.tolist(), labels.distances[0, 2].item()
    ([0.0, 1.0, 2.0], 2.0)
    """
    n = len(parents)
    depths = _tree_depths(parents)
    ancestors: List[List[int]] = []
    for i in range(n):
        chain = [i]
        while parents[chain[-1]] != 0:
            chain.append(parents[chain[-1]] - 1)
        ancestors.append(chain)

    distances = torch.zeros(n, n, dtype=TRAINING_DTYPE)
    for i in range(n):
        lineage = set(ancestors[i])
        for j in range(i + 1, n):
            lca = next(node for node in ancestors[j] if node in lineage)
            distance = depths[i] + depths[j] - 2 * depths[lca]
            distances[i, j] = distance
            distances[j, i] = distance

    return GoldLabels(
        structure=structure,
        depths=torch.tensor(depths, dtype=TRAINING_DTYPE),
        depth_mask=torch.ones(n, dtype=torch.bool),
        distances=distances,
        distance_mask=torch.ones(n, n, dtype=torch.bool),
    )

def dep_labels(sentence: AnnotatedSentence) -> GoldLabels:
    """
    Dependency-tree depths (root = 0) and undirected path lengths.
    """
    return labels_from_parents(sentence.parents, Structure.DEP)

def chain_parents(n: int) -> List[int]:
    """
    The left-to-right chain rooted at token 1.

    >>> chain_parents(4)
    [0, 1, 2, 3]
    """
    if n < 1:
        raise ValueError(f"Sentence length must be positive, got {n}")
    return [i for i in range(n)]

def positional_labels(n: int) -> GoldLabels:
    """
    Word index as depth and index difference as distance.

    >>> labels = positional_labels(4)
    >>> labels.depths.tolist(), labels.distances[0, 3].item()
    ([0.0, 1.0, 2.0, 3.0], 3.0)
    """
    if n < 1:
        raise ValueError(f"Sentence length must be positive, got {n}")
    index = torch.arange(n, dtype=TRAINING_DTYPE)
    return GoldLabels(
        structure=Structure.POS,
        depths=index.clone(),
        depth_mask=torch.ones(n, dtype=torch.bool),
        distances=(index.unsqueeze(0) - index.unsqueeze(1)).abs(),
        distance_mask=torch.ones(n, n, dtype=torch.bool),
    )

def sentence_seed(global_seed: int, sentence_id: str) -> int:
    """
    Mixes a global seed with a stable hash of the sentence id.

    >>> sentence_seed(3, "s1") == sentence_seed(3, "s1") != sentence_seed(4, "s1")
    True
    """
    digest = hashlib.blake2b(sentence_id.encode("utf-8"), digest_size=8).digest()
    sequence = np.random.SeedSequence([global_seed % (1 << 64), int.from_bytes(digest, "little")])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])

def _prufer_edges(sequence: Sequence[int], n: int) -> List[Tuple[int, int]]:
    degree = [1] * n
    for node in sequence:
        degree[node] += 1
    leaves = [node for node in range(n) if degree[node] == 1]
    heapq.heapify(leaves)
    edges = []
    for node in sequence:
        leaf = heapq.heappop(leaves)
        edges.append((leaf, node))
        degree[node] -= 1
        if degree[node] == 1:
            heapq.heappush(leaves, node)
    edges.append((heapq.heappop(leaves), heapq.heappop(leaves)))
    return edges

def random_tree_parents(n: int, seed: int) -> List[int]:
    """
    Samples a uniformly random labeled tree on `n` nodes (uniform Prüfer
    sequence) with a uniformly random root, as a parent array.

    >>> random_tree_parents(1, 5)
    [0]
    >>> random_tree_parents(2, 5).count(0)
    1
    """
    if n < 1:
        raise ValueError(f"Sentence length must be positive, got {n}")
    if n == 1:
        return [0]
    rng = np.random.default_rng(seed)
    sequence = [int(node) for node in rng.integers(0, n, size=n - 2)]
    root = int(rng.integers(0, n))
    adjacency: List[List[int]] = [[] for _ in range(n)]
    for a, b in _prufer_edges(sequence, n):
        adjacency[a].append(b)
        adjacency[b].append(a)

    parents = [0] * n
    visited = {root}
    frontier = [root]
    while frontier:
        node = frontier.pop()
        for neighbor in adjacency[node]:
            if neighbor not in visited:
                visited.add(neighbor)
                parents[neighbor] = node + 1
                frontier.append(neighbor)
    return parents

def random_tree_labels(n: int, sentence_seed: int) -> GoldLabels:
    """
    Labels of the seeded random tree; depth and distance objectives share the tree.
    """
    return labels_from_parents(random_tree_parents(n, sentence_seed), Structure.RAND)

@dataclass
class Taxonomy:
    """
    A hypernymy forest with a (lemma, upos) lexicon.

    >>> taxonomy = Taxonomy({"dog": "canine", "canine": "animal"}, {("dog", "NOUN"): "dog"})
    >>> taxonomy.depth("dog"), taxonomy.root("dog")
    (2, 'animal')
    """
    parent: Dict[str, str]
    lexicon: Dict[Tuple[str, str], str]
    _depth: Dict[str, int] = field(default_factory=dict, init=False, repr=False)
    _root: Dict[str, str] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self) -> None:
        nodes = set(self.parent.keys()) | set(self.parent.values())
        for node in sorted(nodes):
            path = []
            current = node
            on_path = set()
            while current not in self._depth:
                if current in on_path:
                    raise MalformedTaxonomyError(f"Cycle in taxonomy through node {current}")
                on_path.add(current)
                path.append(current)
                parent = self.parent.get(current, current)
                if parent == current:
                    self._depth[current] = 0
                    self._root[current] = current
                    path.pop()
                    break
                current = parent
            for visited in reversed(path):
                parent = self.parent[visited]
                self._depth[visited] = self._depth[parent] + 1
                self._root[visited] = self._root[parent]
        for key, node in self.lexicon.items():
            if node not in self._depth:
                raise MalformedTaxonomyError(f"Lexicon entry {key} points to unknown node {node}")

    @property
    def nodes(self) -> List[str]:
        return sorted(self._depth)

    def depth(self, node: str) -> int:
        return self._depth[node]

    def root(self, node: str) -> str:
        return self._root[node]

    def ancestors(self, node: str) -> List[str]:
        """
        The path from `node` (inclusive) up to its root.
        """
        chain = [node]
        while self.parent.get(chain[-1], chain[-1]) != chain[-1]:
            chain.append(self.parent[chain[-1]])
        return chain

    def distance(self, a: str, b: str) -> Optional[int]:
        """
        Edge count between two nodes via their lowest common ancestor, or
        `None` when they sit in different trees.
        """
        if self.root(a) != self.root(b):
            return None
        lineage = set(self.ancestors(a))
        lca = next(node for node in self.ancestors(b) if node in lineage)
        return self.depth(a) + self.depth(b) - 2 * self.depth(lca)

    def lookup(self, lemma: str, upos: str) -> Optional[str]:
        node = self.lexicon.get((lemma, upos))
        if node is None:
            node = self.lexicon.get((lemma.lower(), upos))
        return node

def load_taxonomy(stream: Iterable[str]) -> Taxonomy:
    """
    Reads the line-oriented taxonomy format: `E<TAB>child<TAB>parent` edges
    and `L<TAB>lemma<TAB>upos<TAB>node` lexicon entries; `#` starts a comment.

    >>> load_taxonomy(["E\\ta\\tb", "E\\tb\\ta"])
    Traceback (most recent call last):
    ...
    ortho_probe.util.error_util.MalformedTaxonomyError: Cycle in taxonomy through node a

    :raises MalformedTaxonomyError: On cycles, multiple parents, dangling lexicon targets or bad lines.
    """
    parent: Dict[str, str] = {}
    lexicon: Dict[Tuple[str, str], str] = {}
    for number, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        columns = line.split("\t")
        if columns[0] == "E" and len(columns) == 3:
            child, head = columns[1], columns[2]
            if parent.get(child, head) != head:
                raise MalformedTaxonomyError(f"Line {number}: node {child} has two parents")
            parent[child] = head
        elif columns[0] == "L" and len(columns) == 4:
            lexicon[(columns[1], columns[2])] = columns[3]
        else:
            raise MalformedTaxonomyError(f"Line {number}: unrecognized record {line!r}")
    return Taxonomy(parent, lexicon)

def hypernymy_labels(sentence: AnnotatedSentence, taxonomy: Taxonomy) -> GoldLabels:
    """
    Hypernymy depths for resolvable nouns and verbs, and hypernymy distances
    for noun-noun and verb-verb pairs in the same taxonomy tree. Everything
    else is masked.
    """
    n = len(sentence)
    nodes: List[Optional[str]] = [
        taxonomy.lookup(token.lemma, token.upos) if token.upos in HYPERNYMY_TAGS else None
        for token in sentence.tokens
    ]
    depths = torch.zeros(n, dtype=TRAINING_DTYPE)
    depth_mask = torch.zeros(n, dtype=torch.bool)
    distances = torch.zeros(n, n, dtype=TRAINING_DTYPE)
    distance_mask = torch.zeros(n, n, dtype=torch.bool)

    for i, node in enumerate(nodes):
        if node is None:
            continue
        depths[i] = taxonomy.depth(node)
        depth_mask[i] = True
        for j in range(i + 1, n):
            other = nodes[j]
            if other is None or sentence.tokens[i].upos != sentence.tokens[j].upos:
                continue
            distance = taxonomy.distance(node, other)
            if distance is None:
                continue
            distances[i, j] = distances[j, i] = distance
            distance_mask[i, j] = distance_mask[j, i] = True

    return GoldLabels(
        structure=Structure.LEX,
        depths=depths,
        depth_mask=depth_mask,
        distances=distances,
        distance_mask=distance_mask,
    )

def structure_parents(
    sentence: AnnotatedSentence,
    structure: Structure,
    seed: int=0
) -> List[int]:
    """
    The parent array of a tree-shaped structure over a sentence.

    :raises ValueError: For hypernymy, which is not a tree over the sentence.
    """
    if structure is Structure.DEP:
        return sentence.parents
    if structure is Structure.POS:
        return chain_parents(len(sentence))
    if structure is Structure.RAND:
        return random_tree_parents(len(sentence), sentence_seed(seed, sentence.id))
    raise ValueError(f"Structure {structure.value} does not define a tree over the sentence")

def gold_labels(
    sentence: AnnotatedSentence,
    structure: Structure,
    taxonomy: Optional[Taxonomy]=None,
    seed: int=0
) -> GoldLabels:
    """
    Builds the gold labels of `structure` for a sentence.

    :param seed: The global seed for random trees.
    :raises ValueError: When hypernymy labels are requested without a taxonomy.
    """
    if structure is Structure.DEP:
        return dep_labels(sentence)
    if structure is Structure.POS:
        return positional_labels(len(sentence))
    if structure is Structure.RAND:
        return random_tree_labels(len(sentence), sentence_seed(seed, sentence.id))
    if taxonomy is None:
        raise ValueError("Hypernymy labels require a taxonomy")
    return hypernymy_labels(sentence, taxonomy)

def random_treebank(
    n_sentences: int,
    min_length: int,
    max_length: int,
    seed: int,
    prefix: str="synth"
) -> Iterator[AnnotatedSentence]:
    """
    Generates sentences whose dependency annotation is a uniform random tree.

    >>> [len(s) for s in random_treebank(3, 4, 4, seed=0)]
    [4, 4, 4]
    """
    if not 1 <= min_length <= max_length:
        raise ValueError(f"Invalid sentence length range [{min_length}, {max_length}]")
    rng = np.random.default_rng(seed)
    for k in range(n_sentences):
        length = int(rng.integers(min_length, max_length + 1))
        sentence_id = f"{prefix}-{k + 1:06d}"
        parents = random_tree_parents(length, sentence_seed(seed, f"tree:{sentence_id}"))
        yield AnnotatedSentence(
            id=sentence_id,
            tokens=tuple(
                Token(index=i + 1, form=f"w{i + 1}", lemma=f"w{i + 1}", upos="X", head=head)
                for i, head in enumerate(parents)
            )
        )
