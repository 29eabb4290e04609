from __future__ import annotations

import struct
import torch
import numpy as np

from dataclasses import dataclass
from typing import BinaryIO, List, Optional, Sequence, Tuple

from .log_util import logger
from .file_util import atomic_open
from .dtype_util import STORAGE_DTYPE, TRAINING_DTYPE, get_numpy_dtype, as_training_tensor
from .error_util import AlignmentError, EmbeddingFormatError
from .linalg_util import random_orthogonal
from .objective_util import ObjectiveId, Structure
from .probe_util import OrthogonalProbeParams, planted_oracle
from .treebank_util import AnnotatedSentence, sentence_seed, structure_parents

__all__ = [
    "OPEMB_MAGIC",
    "OPEMB_VERSION",
    "EmbeddingSet",
    "PlantedSpec",
    "read_embeddings",
    "write_embeddings",
    "load_embeddings",
    "save_embeddings",
    "check_alignment",
    "synthesize_planted",
    "planted_rotation",
    "planted_block",
    "oracle_probe",
]

OPEMB_MAGIC = b"OPEMB\x00"
OPEMB_VERSION = 1
HEADER = struct.Struct("<BIII")
COUNT = struct.Struct("<I")

@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """
    Token embeddings of one encoder layer, one (tokens × dim) float64 matrix per sentence.
    """
    layer: int
    dim: int
    sentences: List[torch.Tensor]

    def __post_init__(self) -> None:
        for index, matrix in enumerate(self.sentences):
            if matrix.dim() != 2 or matrix.shape[1] != self.dim:
                raise ValueError(
                    f"Sentence {index} has shape {tuple(matrix.shape)}, expected (tokens, {self.dim})"
                )

    def __len__(self) -> int:
        return len(self.sentences)

    def __getitem__(self, index: int) -> torch.Tensor:
        return self.sentences[index]

@dataclass(frozen=True)
class PlantedSpec:
    """
    Recipe for synthetic embeddings with known tree structure.

    Each planted structure occupies its own block of `planted_rank`
    coordinates; the rest of the space holds Gaussian noise; everything
    is then rotated by a seeded orthogonal matrix.
    """
    ambient_dim: int
    planted_structures: Tuple[Structure, ...] = (Structure.DEP,)
    noise_scale: float = 0.1
    rotation_seed: int = 0
    planted_rank: Optional[int] = None
    tree_seed: int = 0

    def __post_init__(self) -> None:
        if self.ambient_dim < 1:
            raise ValueError(f"Ambient dimension must be positive, got {self.ambient_dim}")
        if self.noise_scale < 0:
            raise ValueError(f"Noise scale must be nonnegative, got {self.noise_scale}")
        if not self.planted_structures:
            raise ValueError("At least one structure must be planted")
        if Structure.LEX in self.planted_structures:
            raise ValueError("Hypernymy is not a tree over the sentence and cannot be planted")

    def resolve_rank(self, treebank: Sequence[AnnotatedSentence]) -> int:
        """
        The per-structure block size, checked against the ambient dimension.

        :raises ValueError: When a sentence needs more coordinates than available.
        """
        longest = max((len(sentence) for sentence in treebank), default=1)
        rank = self.planted_rank if self.planted_rank is not None else max(longest - 1, 1)
        if longest - 1 > rank:
            raise ValueError(f"A sentence of {longest} tokens needs planted rank {longest - 1}, got {rank}")
        if rank * len(self.planted_structures) > self.ambient_dim:
            raise ValueError(
                f"Planted rank {rank} × {len(self.planted_structures)} structures exceeds ambient dimension {self.ambient_dim}"
            )
        return rank

def read_embeddings(
    stream: BinaryIO,
    expected_treebank: Optional[Sequence[AnnotatedSentence]]=None
) -> EmbeddingSet:
    """
    Reads an OPEMB stream, widening single-precision values to float64.

    :param stream: A binary stream positioned at the magic bytes.
    :param expected_treebank: When given, sentence and token counts must match it.
    :raises EmbeddingFormatError: On bad magic, version or truncation.
    :raises AlignmentError: On count mismatch with `expected_treebank`.
    """
    offset = 0

    def read_exact(size: int, what: str) -> bytes:
        nonlocal offset
        data = stream.read(size)
        if len(data) != size:
            raise EmbeddingFormatError(offset + len(data), f"Truncated {what}: expected {size} bytes, got {len(data)}")
        offset += size
        return data

    magic = read_exact(len(OPEMB_MAGIC), "magic")
    if magic != OPEMB_MAGIC:
        raise EmbeddingFormatError(0, f"Bad magic {magic!r}")
    version, layer, count, dim = HEADER.unpack(read_exact(HEADER.size, "header"))
    if version != OPEMB_VERSION:
        raise EmbeddingFormatError(len(OPEMB_MAGIC), f"Unsupported version {version}")
    if dim == 0:
        raise EmbeddingFormatError(offset - COUNT.size, "Embedding dimension is zero")
    if expected_treebank is not None and count != len(expected_treebank):
        raise AlignmentError(f"Embedding file has {count} sentences, treebank has {len(expected_treebank)}")

    dtype = get_numpy_dtype(STORAGE_DTYPE)
    sentences = []
    for index in range(count):
        (tokens,) = COUNT.unpack(read_exact(COUNT.size, f"token count of sentence {index}"))
        if expected_treebank is not None and tokens != len(expected_treebank[index]):
            raise AlignmentError(
                f"embedding has {tokens} tokens, treebank has {len(expected_treebank[index])}",
                sentence_index=index,
                sentence_id=expected_treebank[index].id
            )
        payload = read_exact(tokens * dim * dtype.itemsize, f"payload of sentence {index}")
        values = np.frombuffer(payload, dtype=dtype).reshape(tokens, dim)
        sentences.append(as_training_tensor(values))

    trailing = stream.read(1)
    if trailing:
        raise EmbeddingFormatError(offset, "Unexpected trailing bytes")
    return EmbeddingSet(layer=layer, dim=dim, sentences=sentences)

def write_embeddings(embeddings: EmbeddingSet, stream: BinaryIO) -> None:
    """
    Writes the OPEMB format: magic, u8 version, u32 layer, u32 sentence
    count, u32 dim, then per sentence a u32 token count and row-major
    little-endian float32 values.
    """
    dtype = get_numpy_dtype(STORAGE_DTYPE)
    stream.write(OPEMB_MAGIC)
    stream.write(HEADER.pack(OPEMB_VERSION, embeddings.layer, len(embeddings), embeddings.dim))
    for matrix in embeddings.sentences:
        stream.write(COUNT.pack(matrix.shape[0]))
        stream.write(np.ascontiguousarray(matrix.detach().cpu().numpy(), dtype=dtype).tobytes())

def load_embeddings(
    path: str,
    expected_treebank: Optional[Sequence[AnnotatedSentence]]=None
) -> EmbeddingSet:
    with open(path, "rb") as f:
        embeddings = read_embeddings(f, expected_treebank)
    logger.info(f"Read layer {embeddings.layer} embeddings ({len(embeddings)} sentences, dim {embeddings.dim}) from {path}")
    return embeddings

def save_embeddings(embeddings: EmbeddingSet, path: str) -> None:
    with atomic_open(path, binary=True) as f:
        write_embeddings(embeddings, f)
    logger.info(f"Wrote layer {embeddings.layer} embeddings to {path}")

def check_alignment(
    embeddings: EmbeddingSet,
    treebank: Sequence[AnnotatedSentence]
) -> None:
    """
    Checks sentence order and token counts against a treebank.

    :raises AlignmentError: On the first mismatch.
    """
    if len(embeddings) != len(treebank):
        raise AlignmentError(f"Embedding set has {len(embeddings)} sentences, treebank has {len(treebank)}")
    for index, (matrix, sentence) in enumerate(zip(embeddings.sentences, treebank)):
        if matrix.shape[0] != len(sentence):
            raise AlignmentError(
                f"embedding has {matrix.shape[0]} tokens, treebank has {len(sentence)}",
                sentence_index=index,
                sentence_id=sentence.id
            )

def planted_rotation(spec: PlantedSpec) -> torch.Tensor:
    """
    The hidden rotation Q; embeddings are h = Q·z for planted coordinates z.
    """
    return random_orthogonal(spec.ambient_dim, spec.rotation_seed)

def planted_block(spec: PlantedSpec, structure: Structure, rank: int) -> range:
    """
    The coordinates (before rotation) holding `structure`.
    """
    position = spec.planted_structures.index(structure)
    return range(position * rank, (position + 1) * rank)

def _path_indicators(parents: Sequence[int], rank: int) -> torch.Tensor:
    # Each non-root token owns the edge to its parent; a token's row marks
    # the edges on its root path, so squared distances are tree distances.
    n = len(parents)
    edge_coordinate = {}
    for token, head in enumerate(parents):
        if head != 0:
            edge_coordinate[token] = len(edge_coordinate)
    coordinates = torch.zeros(n, rank, dtype=TRAINING_DTYPE)
    for token in range(n):
        node = token
        while parents[node] != 0:
            coordinates[token, edge_coordinate[node]] = 1.0
            node = parents[node] - 1
    return coordinates

def synthesize_planted(
    treebank: Sequence[AnnotatedSentence],
    spec: PlantedSpec,
    layer: int=0
) -> EmbeddingSet:
    """
    Synthesizes embeddings in which each planted structure is exactly
    recoverable by an orthogonal probe.

    >>> from ortho_probe.util.treebank_util import random_treebank
    >>> sentences = list(random_treebank(2, 3, 5, seed=1))
    >>> embeddings = synthesize_planted(sentences, PlantedSpec(ambient_dim=8, noise_scale=0.0))
    >>> len(embeddings), embeddings.dim
    (2, 8)

    :param treebank: Sentences providing the dependency trees.
    :param spec: The planting recipe.
    :param layer: The layer index; it is mixed into the noise seed.
    :raises ValueError: When the planted blocks do not fit the ambient dimension.
    """
    rank = spec.resolve_rank(treebank)
    rotation = planted_rotation(spec)
    planted = rank * len(spec.planted_structures)
    generator = torch.Generator(device="cpu").manual_seed(
        sentence_seed(spec.rotation_seed, f"noise:{layer}") % (1 << 63)
    )

    sentences = []
    for sentence in treebank:
        n = len(sentence)
        coordinates = torch.zeros(n, spec.ambient_dim, dtype=TRAINING_DTYPE)
        for structure in spec.planted_structures:
            block = planted_block(spec, structure, rank)
            parents = structure_parents(sentence, structure, seed=spec.tree_seed)
            coordinates[:, block.start:block.stop] = _path_indicators(parents, rank)
        if planted < spec.ambient_dim:
            noise = torch.randn(n, spec.ambient_dim - planted, generator=generator, dtype=TRAINING_DTYPE)
            coordinates[:, planted:] = noise * spec.noise_scale
        sentences.append((coordinates @ rotation.T).contiguous())

    logger.debug(f"Synthesized {len(sentences)} planted sentences for layer {layer} (rank {rank})")
    return EmbeddingSet(layer=layer, dim=spec.ambient_dim, sentences=sentences)

def oracle_probe(
    spec: PlantedSpec,
    treebank: Sequence[AnnotatedSentence],
    objectives: Sequence[ObjectiveId]
) -> OrthogonalProbeParams:
    """
    The orthogonal probe that recovers planted structures exactly: V = Q and
    each scaling vector is the indicator of its structure's block.

    :raises ValueError: When an objective's structure was not planted.
    """
    for objective in objectives:
        if objective.structure not in spec.planted_structures:
            raise ValueError(f"Structure of {objective} is not planted")
    rank = spec.resolve_rank(treebank)
    blocks = {
        structure: planted_block(spec, structure, rank)
        for structure in spec.planted_structures
    }
    return planted_oracle(planted_rotation(spec), blocks, objectives)
