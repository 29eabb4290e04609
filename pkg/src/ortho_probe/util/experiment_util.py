from __future__ import annotations

import os
import json
import numpy as np

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

from .log_util import logger
from .file_util import atomic_open
from .error_util import CheckpointError, ConfigError
from .objective_util import SHARED_ROTATION_MODES, ObjectiveId, Structure, Target
from .treebank_util import AnnotatedSentence, Taxonomy, load_taxonomy, random_treebank, read_conllu, sentence_seed, write_conllu
from .embedding_util import EmbeddingSet, load_embeddings, oracle_probe, save_embeddings, synthesize_planted
from .probe_util import Example, OrthogonalProbeParams, ProbeParams, parameter_count, degrees_of_freedom
from .checkpoint_util import load_checkpoint, save_checkpoint
from .train_util import TrainResult, prepare_datasets, train
from .eval_util import (
    EvalReport,
    ParseScore,
    ReportCell,
    build_report,
    objective_correlation,
    parse_score,
    write_parse_tsv,
    write_report_json,
    write_report_tsv,
)
from .analysis_util import (
    check_overlap_mode,
    dimension_report,
    epsilon_sweep,
    histogram_export,
    overlap_table,
    probe_selections,
    scaling_histogram,
    select_dimensions,
    write_dims_tsv,
    write_epsilon_tsv,
    write_histogram_tsv,
    write_overlap_tsv,
    write_scaling_tsv,
)
from .config_util import SPLITS, ExperimentConfig

__all__ = [
    "SplitData",
    "TrainingJob",
    "JobSummary",
    "evaluation_split",
    "load_split",
    "load_experiment_taxonomy",
    "synthesize_experiment",
    "training_jobs",
    "run_training_job",
    "run_training",
    "evaluate_experiment",
    "analyze_experiment",
]

# Random trees for gold labels are fixed across seeds and epochs.
LABEL_TREE_SEED = 0

@dataclass(frozen=True, eq=False)
class SplitData:
    sentences: List[AnnotatedSentence]
    embeddings: EmbeddingSet

class TrainingJob(NamedTuple):
    layer: int
    seed: int
    objectives: Tuple[str, ...]

    @property
    def objective_ids(self) -> Tuple[ObjectiveId, ...]:
        return tuple(ObjectiveId.parse(name) for name in self.objectives)

class JobSummary(NamedTuple):
    job: TrainingJob
    checkpoint: str
    epochs: int
    best_epoch: int
    best_val_loss: float

def evaluation_split(objective: ObjectiveId) -> str:
    """
    Random-tree controls are scored on the training split, everything else on test.

    >>> evaluation_split(ObjectiveId.parse("rand-depth")), evaluation_split(ObjectiveId.parse("dep-depth"))
    ('train', 'test')
    """
    return "train" if objective.structure is Structure.RAND else "test"

def load_split(config: ExperimentConfig, split: str, layer: int) -> SplitData:
    """
    Reads a split's treebank and the aligned embeddings of one layer.
    """
    sentences = read_conllu(config.treebank_path(split))
    embeddings = load_embeddings(config.embedding_path(split, layer), expected_treebank=sentences)
    return SplitData(sentences=sentences, embeddings=embeddings)

def load_experiment_taxonomy(config: ExperimentConfig) -> Optional[Taxonomy]:
    if config.taxonomy is None:
        return None
    with open(config.taxonomy, "r", encoding="utf-8") as f:
        return load_taxonomy(f)

def _examples(
    data: SplitData,
    objectives: Sequence[ObjectiveId],
    taxonomy: Optional[Taxonomy]
) -> Dict[ObjectiveId, List[Example]]:
    return prepare_datasets(data.sentences, data.embeddings, objectives, taxonomy=taxonomy, seed=LABEL_TREE_SEED)

def synthesize_experiment(config: ExperimentConfig) -> List[str]:
    """
    Writes a synthetic treebank and planted embeddings for every split and layer.

    Output is a pure function of the configuration, so re-running rewrites
    identical bytes.

    :return: The paths written.
    """
    if config.synthetic is None:
        raise ConfigError("synthetic", "the synth command needs a `synthetic` section")
    synthetic = config.synthetic
    spec = synthetic.planted_spec(tree_seed=LABEL_TREE_SEED)
    written = []
    for split in SPLITS:
        sentences = list(random_treebank(
            synthetic.sentences[split],
            synthetic.min_length,
            synthetic.max_length,
            seed=sentence_seed(synthetic.rotation_seed, f"treebank:{split}"),
            prefix=split
        ))
        treebank_path = config.treebank_path(split)
        with atomic_open(treebank_path) as f:
            write_conllu(sentences, f)
        written.append(treebank_path)
        for layer in config.layers:
            embedding_path = config.embedding_path(split, layer)
            save_embeddings(synthesize_planted(sentences, spec, layer=layer), embedding_path)
            written.append(embedding_path)
    return written

def training_jobs(config: ExperimentConfig) -> List[TrainingJob]:
    return [
        TrainingJob(layer, seed, tuple(objective.name for objective in group))
        for layer in config.layers
        for seed in config.seeds
        for group in config.groups()
    ]

def _write_history(result: TrainResult, path: str, params: ProbeParams) -> None:
    state = result.state
    n_objectives = len(params.objectives)
    document = {
        "history": [asdict(record) for record in result.history],
        "best_epoch": state.best_epoch,
        "best_val_loss": state.best_val_loss,
        "stopped_early": state.stopped,
        "dso_curve": state.dso_curve,
        "sparsity_curve": state.sparsity_curve,
        "parameters": sum(tensor.numel() for tensor in params.state_dict().values()),
    }
    if isinstance(params, OrthogonalProbeParams) and not params.rotation_frozen:
        document["parameter_count"] = parameter_count(params.dim, n_objectives)
        document["degrees_of_freedom"] = degrees_of_freedom(params.dim, n_objectives)
    with atomic_open(path) as f:
        json.dump(document, f, indent=2)
        f.write("\n")

def run_training_job(
    config_data: Dict[str, Any],
    job: TrainingJob,
    resume: bool=True
) -> JobSummary:
    """
    Trains one (layer, seed, objective group) run and writes its best
    checkpoint and history. Module-level so worker processes can run it.
    """
    config = ExperimentConfig.from_dict(config_data)
    objectives = job.objective_ids
    train_config = config.train_config(objectives, job.seed)
    taxonomy = load_experiment_taxonomy(config)
    train_examples = _examples(load_split(config, "train", job.layer), objectives, taxonomy)
    dev_examples = _examples(load_split(config, "dev", job.layer), objectives, taxonomy)

    checkpoint = config.checkpoint_path(job.layer, job.seed, objectives)
    base, _ = os.path.splitext(checkpoint)
    logger.info(f"Training layer {job.layer}, seed {job.seed}: {', '.join(job.objectives)}")
    result = train(
        train_config,
        train_examples,
        dev_examples,
        state_path=f"{base}.state.safetensors",
        resume=resume
    )
    save_checkpoint(
        result.best_params,
        checkpoint,
        config.normalized_mode,
    )
    _write_history(result, f"{base}.history.json", result.best_params)
    return JobSummary(
        job=job,
        checkpoint=checkpoint,
        epochs=len(result.history),
        best_epoch=result.state.best_epoch,
        best_val_loss=result.state.best_val_loss,
    )

def run_training(
    config: ExperimentConfig,
    resume: bool=True,
    workers: int=1
) -> List[JobSummary]:
    """
    Runs every training job, in worker processes when `workers` > 1.
    Each run is deterministic on its own, so the order of completion does
    not change any output.
    """
    jobs = training_jobs(config)
    config_data = config.to_dict()
    if workers <= 1 or len(jobs) <= 1:
        return [run_training_job(config_data, job, resume) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as executor:
        futures = [executor.submit(run_training_job, config_data, job, resume) for job in jobs]
        return [future.result() for future in futures]

def _load_probe(
    config: ExperimentConfig,
    layer: int,
    seed: int,
    group: Tuple[ObjectiveId, ...]
) -> ProbeParams:
    path = config.checkpoint_path(layer, seed, group)
    if not os.path.exists(path):
        raise CheckpointError(f"Missing checkpoint {path}; run `train` first")
    checkpoint = load_checkpoint(path)
    if checkpoint.mode != config.normalized_mode:
        raise CheckpointError(f"{path} holds a mode {checkpoint.mode} probe, expected mode {config.normalized_mode}")
    return checkpoint.params

def _oracle(config: ExperimentConfig, data: SplitData, group: Tuple[ObjectiveId, ...]) -> ProbeParams:
    if config.synthetic is None:
        raise ConfigError("synthetic", "oracle probes exist only for synthetic data")
    try:
        return oracle_probe(config.synthetic.planted_spec(tree_seed=LABEL_TREE_SEED), data.sentences, group)
    except ValueError as e:
        raise ConfigError("synthetic.planted_structures", str(e)) from None

def _average_parse_scores(scores: Sequence[ParseScore]) -> ParseScore:
    uas_values = [score.uas for score in scores if score.uas is not None]
    return ParseScore(
        uuas=float(np.mean([score.uuas for score in scores])),
        uas=float(np.mean(uas_values)) if uas_values else None,
        n_edges=scores[0].n_edges,
        n_sentences=scores[0].n_sentences,
    )

def evaluate_experiment(config: ExperimentConfig, oracle: bool=False) -> EvalReport:
    """
    Scores every trained probe and writes `report.json`, `report.tsv` and,
    when dependency distances were probed, `parse.tsv`.

    :param oracle: Score exact-recovery probes of the planted structures
        instead of checkpoints (synthetic data only).
    """
    taxonomy = load_experiment_taxonomy(config)
    groups = config.groups()
    values: Dict[Tuple[int, ObjectiveId], List[Optional[float]]] = {}
    sentence_counts: Dict[Tuple[int, ObjectiveId], int] = {}
    nonzero: Dict[Tuple[int, ObjectiveId], List[int]] = {}
    parse_scores: Dict[int, ParseScore] = {}
    dep_distance = ObjectiveId(Structure.DEP, Target.DISTANCE)
    dep_depth = ObjectiveId(Structure.DEP, Target.DEPTH)

    for layer in config.layers:
        splits = {split: load_split(config, split, layer) for split in ("train", "test")}
        examples = {
            objective: _examples(splits[evaluation_split(objective)], [objective], taxonomy)[objective]
            for group in groups
            for objective in group
        }
        layer_parses = []
        for seed in config.seeds:
            probes: Dict[ObjectiveId, ProbeParams] = {}
            for group in groups:
                params = _oracle(config, splits["test"], group) if oracle else _load_probe(config, layer, seed, group)
                for objective in group:
                    probes[objective] = params
                    summary = objective_correlation(params, objective, examples[objective])
                    values.setdefault((layer, objective), []).append(summary.value)
                    sentence_counts[(layer, objective)] = summary.n_sentences
                    if isinstance(params, OrthogonalProbeParams):
                        count = len(select_dimensions(params.scalers[objective], config.epsilon, objective))
                        nonzero.setdefault((layer, objective), []).append(count)
            if dep_distance in probes:
                layer_parses.append(parse_score(
                    probes[dep_distance],
                    splits["test"].embeddings.sentences,
                    splits["test"].sentences,
                    Structure.DEP,
                    depth_params=probes.get(dep_depth)
                ))
        if layer_parses:
            parse_scores[layer] = _average_parse_scores(layer_parses)

    cells = [
        ReportCell(
            layer=layer,
            objective=objective,
            values=tuple(scores),
            split=evaluation_split(objective),
            n_sentences=sentence_counts[(layer, objective)],
            nonzero_dims=int(round(float(np.mean(nonzero[(layer, objective)])))) if (layer, objective) in nonzero else None,
        )
        for (layer, objective), scores in sorted(values.items())
    ]
    report = build_report(
        cells,
        parse_scores,
        metadata={
            "mode": config.normalized_mode,
            "layers": list(config.layers),
            "seeds": list(config.seeds),
            "epsilon": config.epsilon,
            "oracle": oracle,
        }
    )
    write_report_json(report, os.path.join(config.output_dir, "report.json"))
    write_report_tsv(report, os.path.join(config.output_dir, "report.tsv"))
    if parse_scores:
        write_parse_tsv(parse_scores, os.path.join(config.output_dir, "parse.tsv"))
    return report

def analyze_experiment(
    config: ExperimentConfig,
    overlap: Optional[bool]=None,
    epsilons: Sequence[float]=(),
    bin_size: int=10
) -> List[str]:
    """
    Writes dimension, overlap, histogram, scaling-vector and ε-sweep tables
    per (layer, seed, objective group) under `<output_dir>/analysis`.

    :param overlap: Force overlap tables on or off; by default they are
        written for shared-rotation modes only.
    :raises ConfigError: When overlaps are requested for a mode without a
        shared rotation, or the probes are linear.
    """
    mode = config.normalized_mode
    if mode == "II":
        raise ConfigError("mode", "dimension analysis needs orthogonal probes with scaling vectors")
    if overlap:
        check_overlap_mode(mode)
    with_overlap = overlap if overlap is not None else mode in SHARED_ROTATION_MODES

    taxonomy = load_experiment_taxonomy(config)
    directories = []
    for layer in config.layers:
        splits = {split: load_split(config, split, layer) for split in ("train", "test")}
        for seed in config.seeds:
            for group in config.groups():
                params = _load_probe(config, layer, seed, group)
                examples = {
                    objective: _examples(splits[evaluation_split(objective)], [objective], taxonomy)[objective]
                    for objective in group
                }
                name = "+".join(objective.name for objective in group)
                directory = os.path.join(config.output_dir, "analysis", f"layer{layer}-seed{seed}-{name}")
                write_dims_tsv(
                    dimension_report(params, examples, config.epsilon, seed=seed),
                    os.path.join(directory, "dims.tsv")
                )
                assert isinstance(params, OrthogonalProbeParams)
                write_scaling_tsv(
                    {objective: scaling_histogram(params.scalers[objective]) for objective in group},
                    os.path.join(directory, "scaling.tsv")
                )
                if epsilons:
                    write_epsilon_tsv(epsilon_sweep(params, epsilons, group), os.path.join(directory, "epsilon.tsv"))
                if with_overlap:
                    selections = probe_selections(params, config.epsilon, group)
                    write_overlap_tsv(
                        overlap_table([selections[objective] for objective in group]),
                        os.path.join(directory, "overlap.tsv")
                    )
                    write_histogram_tsv(
                        histogram_export(params.scalers, selections, group, bin_size),
                        os.path.join(directory, "histogram.tsv")
                    )
                directories.append(directory)
    return directories
