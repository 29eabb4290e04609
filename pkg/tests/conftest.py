import torch
import pytest

from typing import Dict, List, Tuple

from ortho_probe.util import (
    AnnotatedSentence,
    EmbeddingSet,
    Example,
    ObjectiveId,
    OrthogonalProbeParams,
    PlantedSpec,
    Structure,
    oracle_probe,
    prepare_datasets,
    random_treebank,
    synthesize_planted,
)

DEP_DEPTH = ObjectiveId.parse("dep-depth")
DEP_DISTANCE = ObjectiveId.parse("dep-distance")
POS_DEPTH = ObjectiveId.parse("pos-depth")
POS_DISTANCE = ObjectiveId.parse("pos-distance")
RAND_DEPTH = ObjectiveId.parse("rand-depth")
RAND_DISTANCE = ObjectiveId.parse("rand-distance")

def planted_split(
    n_sentences: int,
    seed: int,
    spec: PlantedSpec,
    min_length: int=5,
    max_length: int=12,
    prefix: str="s"
) -> Tuple[List[AnnotatedSentence], EmbeddingSet]:
    sentences = list(random_treebank(n_sentences, min_length, max_length, seed=seed, prefix=prefix))
    return sentences, synthesize_planted(sentences, spec)

def planted_datasets(
    spec: PlantedSpec,
    objectives: List[ObjectiveId],
    sizes: Tuple[int, int]=(60, 20),
    max_length: int=12
) -> Tuple[Dict[ObjectiveId, List[Example]], Dict[ObjectiveId, List[Example]]]:
    train_sentences, train_embeddings = planted_split(sizes[0], 11, spec, max_length=max_length, prefix="train")
    dev_sentences, dev_embeddings = planted_split(sizes[1], 12, spec, max_length=max_length, prefix="dev")
    return (
        prepare_datasets(train_sentences, train_embeddings, objectives),
        prepare_datasets(dev_sentences, dev_embeddings, objectives),
    )

@pytest.fixture
def generator() -> torch.Generator:
    return torch.Generator(device="cpu").manual_seed(1234)

@pytest.fixture
def small_spec() -> PlantedSpec:
    return PlantedSpec(
        ambient_dim=16,
        planted_structures=(Structure.DEP,),
        noise_scale=0.0,
        rotation_seed=5,
        planted_rank=11,
    )

def unrotated_oracle(
    spec: PlantedSpec,
    sentences: List[AnnotatedSentence],
    embeddings: EmbeddingSet,
    objectives: List[ObjectiveId]
) -> Tuple[OrthogonalProbeParams, EmbeddingSet]:
    """
    The oracle with V = 𝕀 over embeddings rounded back to planted coordinates.
    Predictions are then exact integers, so tied gold values stay tied.
    """
    oracle = oracle_probe(spec, sentences, objectives)
    planted = EmbeddingSet(
        layer=embeddings.layer,
        dim=embeddings.dim,
        sentences=[torch.round(h @ oracle.rotation) for h in embeddings.sentences],
    )
    identity = OrthogonalProbeParams(rotation=torch.eye(spec.ambient_dim, dtype=torch.float64), scalers=oracle.scalers)
    return identity, planted
