#!/usr/bin/env python
import click
import functools

from collections import Counter
from typing import Optional, List, Any, Callable, Tuple

from .util import (
    OrthoProbeError,
    ExperimentConfig,
    OrthogonalProbeParams,
    cyan,
    green,
    red,
    yellow,
    abbreviate_count,
    format_correlation,
    configure_logging,
    load_experiment_config,
    get_worker_count,
    synthesize_experiment,
    run_training,
    evaluate_experiment,
    analyze_experiment,
    read_conllu,
    load_taxonomy,
    hypernymy_labels,
    load_checkpoint,
    load_metadata,
    parameter_count,
    degrees_of_freedom,
    orthogonality_deviation,
    dso_penalty,
    download_ewt,
    EWT_SPLITS,
    MIN_REPORTED_LENGTH,
    MAX_REPORTED_LENGTH,
)

def handle_errors(fn: Callable[..., Any]) -> Callable[..., Any]:
    """
    Maps ortho-probe errors to their exit codes.
    """
    @functools.wraps(fn)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return fn(*args, **kwargs)
        except OrthoProbeError as e:
            click.echo(red(f"{type(e).__name__}: {e}"), err=True)
            raise click.exceptions.Exit(e.exit_code)
    return wrapper

def parse_layers(
    ctx: click.Context,
    param: click.Parameter,
    value: Optional[str]
) -> Optional[Tuple[int, ...]]:
    if value is None:
        return None
    try:
        return tuple(int(layer) for layer in value.split(",") if layer.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got `{value}`")

def experiment_options() -> Callable[..., Any]:
    """
    Add the experiment configuration and its overridable keys to a command.
    """
    def wrap(fn: Callable[..., Any]) -> Callable[..., Any]:
        fn = click.option("--max-epochs", type=int, default=None, help="Maximum number of training epochs")(fn)
        fn = click.option("--lambda-sparsity", type=float, default=None, help="Weight of the L1 penalty on scaling vectors")(fn)
        fn = click.option("--epsilon", type=float, default=None, help="Threshold for counting a scaling-vector entry as nonzero")(fn)
        fn = click.option("--output-dir", type=click.Path(file_okay=False), default=None, help="Directory for data, checkpoints and reports")(fn)
        fn = click.option("--objectives", type=str, multiple=True, help="Objectives such as `dep-distance`, or `all`")(fn)
        fn = click.option(
            "--mode",
            type=click.Choice(["A", "B", "C", "D", "E", "I", "II"], case_sensitive=False),
            default=None,
            help="A: one probe per objective; B: depth and distance per structure; C: all distances; D: all depths; E: all objectives; I: scaling vector only; II: linear structural probe"
        )(fn)
        fn = click.option("--layers", type=str, default=None, callback=parse_layers, help="Comma-separated layer indices")(fn)
        fn = click.option("--seed", "seeds", type=int, multiple=True, help="Seeds to run (repeatable)")(fn)
        fn = click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), default=None, help="Experiment configuration JSON")(fn)
        return fn
    return wrap

def get_config(
    config_file: Optional[str],
    seeds: Tuple[int, ...],
    layers: Optional[Tuple[int, ...]],
    mode: Optional[str],
    objectives: Tuple[str, ...],
    output_dir: Optional[str],
    epsilon: Optional[float],
    lambda_sparsity: Optional[float],
    max_epochs: Optional[int]
) -> ExperimentConfig:
    return load_experiment_config(
        config_file,
        seeds=seeds or None,
        layers=layers,
        mode=mode,
        objectives=objectives or None,
        output_dir=output_dir,
        epsilon=epsilon,
        lambda_sparsity=lambda_sparsity,
        max_epochs=max_epochs,
    )

@click.group("ortho-probe")
@click.option("--log-level", type=str, default="WARNING", help="Logging level, e.g. INFO or DEBUG")
def main(log_level: str="WARNING") -> None:
    """
    Orthogonal structural probes: train, evaluate and analyze probes that
    recover linguistic trees from contextual embeddings.
    """
    configure_logging(log_level)

@main.command("synth")
@experiment_options()
@handle_errors
def synth(**kwargs: Any) -> None:
    """
    Write a synthetic treebank and planted embeddings for every split and layer.
    """
    config = get_config(**kwargs)
    for path in synthesize_experiment(config):
        click.echo(f"Wrote {path}")
    click.echo("Done!")

@main.command("train")
@experiment_options()
@click.option("--resume/--no-resume", default=True, is_flag=True, help="Continue interrupted runs from their training-state snapshot")
@handle_errors
def train(resume: bool=True, **kwargs: Any) -> None:
    """
    Train one probe per (layer, seed, objective group) and save the best
    validation checkpoint with its training history.
    """
    config = get_config(**kwargs)
    for summary in run_training(config, resume=resume, workers=get_worker_count()):
        click.echo(
            f"{cyan(summary.checkpoint)}: best epoch {summary.best_epoch} of {summary.epochs}, "
            f"validation loss {green(f'{summary.best_val_loss:.6f}')}"
        )
    click.echo("Done!")

@main.command("eval")
@experiment_options()
@click.option("--oracle", is_flag=True, default=False, help="Score exact-recovery probes of the planted structures (synthetic data only)")
@handle_errors
def evaluate(oracle: bool=False, **kwargs: Any) -> None:
    """
    Score trained probes with Spearman correlations and attachment scores,
    writing report.json, report.tsv and parse.tsv.
    """
    config = get_config(**kwargs)
    report = evaluate_experiment(config, oracle=oracle)
    for objective, cell in sorted(report.best.items()):
        split = "" if cell.split == "test" else yellow(f" ({cell.split})")
        click.echo(f"{cyan(objective.name)}: {green(format_correlation(cell.mean, cell.std))} at layer {cell.layer}{split}")
    if report.average is not None:
        click.echo(f"{cyan('average')}: {green(format_correlation(report.average))}")
    if report.selectivity is not None:
        click.echo(f"{cyan('selectivity')}: {green(format_correlation(report.selectivity))}")
    for layer, score in sorted(report.parse_scores.items()):
        uas = "n/a" if score.uas is None else f"{100 * score.uas:.2f}"
        click.echo(f"Layer {layer}: UUAS {green(f'{100 * score.uuas:.2f}')}, UAS {green(uas)}")

@main.command("analyze")
@experiment_options()
@click.option("--overlap/--no-overlap", default=None, help="Force overlap tables on or off; by default written for shared-rotation modes")
@click.option("--epsilon-sweep", type=float, multiple=True, help="Also count selected dimensions at this threshold (repeatable)")
@click.option("--bin-size", type=int, default=10, help="Dimensions per histogram bin")
@handle_errors
def analyze(
    overlap: Optional[bool]=None,
    epsilon_sweep: Tuple[float, ...]=(),
    bin_size: int=10,
    **kwargs: Any
) -> None:
    """
    Write selected-dimension, overlap, histogram and scaling-vector tables
    for every trained orthogonal probe.
    """
    config = get_config(**kwargs)
    for directory in analyze_experiment(config, overlap=overlap, epsilons=epsilon_sweep, bin_size=bin_size):
        click.echo(f"Wrote {directory}")
    click.echo("Done!")

@main.command("inspect-conllu")
@click.argument("input_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--taxonomy", type=click.Path(exists=True, dir_okay=False), default=None, help="Taxonomy file for hypernymy coverage")
@handle_errors
def inspect_conllu(input_file: str, taxonomy: Optional[str]=None) -> None:
    """
    Validate a CoNLL-U treebank and print sentence and length statistics.
    """
    sentences = read_conllu(input_file)
    lengths = Counter(len(sentence) for sentence in sentences)
    n_tokens = sum(length * count for length, count in lengths.items())
    click.echo(f"Sentences: {cyan(str(len(sentences)))}")
    click.echo(f"Tokens: {cyan(str(n_tokens))}")
    if sentences:
        click.echo(f"Lengths: {green(str(min(lengths)))} to {green(str(max(lengths)))}")
        reported = sum(count for length, count in lengths.items() if MIN_REPORTED_LENGTH <= length <= MAX_REPORTED_LENGTH)
        click.echo(f"Sentences of {MIN_REPORTED_LENGTH} to {MAX_REPORTED_LENGTH} tokens: {cyan(str(reported))}")

    if taxonomy is not None:
        with open(taxonomy, "r", encoding="utf-8") as f:
            hierarchy = load_taxonomy(f)
        covered = 0
        for sentence in sentences:
            covered += hypernymy_labels(sentence, hierarchy).n_depths
        click.echo(f"Tokens with a hypernymy label: {cyan(str(covered))}")

@main.command("inspect-checkpoint")
@click.argument("input_file", type=click.Path(exists=True, dir_okay=False))
@handle_errors
def inspect_checkpoint(input_file: str) -> None:
    """
    Print the tensors, parameter counts and orthogonality of a probe checkpoint.
    """
    checkpoint = load_checkpoint(input_file)
    params = checkpoint.params
    click.echo(f"Mode: {cyan(checkpoint.mode)}")
    click.echo(f"Objectives: {cyan(', '.join(objective.name for objective in params.objectives))}")

    total_params = 0
    for key, value in params.state_dict().items():
        shape = ", ".join([str(s) for s in value.shape])
        dtype = f"{value.dtype}".split(".")[-1]
        click.echo(f"{cyan(key)}: [{green(shape)}] <{dtype}>")
        total_params += value.numel()

    click.echo()
    click.echo(f"Stored values: {cyan(abbreviate_count(total_params))} ({total_params:,d})")
    if isinstance(params, OrthogonalProbeParams):
        if not params.rotation_frozen:
            count = parameter_count(params.dim, len(params.objectives))
            freedom = degrees_of_freedom(params.dim, len(params.objectives))
            click.echo(f"Trainable parameters: {cyan(abbreviate_count(count))} ({count:,d})")
            click.echo(f"Degrees of freedom: {cyan(abbreviate_count(freedom))} ({freedom:,d})")
        click.echo(f"DSO: {green(f'{dso_penalty(params.rotation):.6g}')}")
        click.echo(f"Orthogonality deviation: {green(f'{orthogonality_deviation(params.rotation):.6g}')}")

    metadata = load_metadata(input_file)
    if metadata:
        click.echo()
        click.echo("Metadata:")
        for key, metadatum in metadata.items():
            click.echo(f"{cyan(key)}: {green(metadatum)}")

@main.command("download-treebank")
@click.argument("directory", type=click.Path(file_okay=False))
@click.option("--split", "splits", type=click.Choice(list(EWT_SPLITS)), multiple=True, help="Splits to download, default all")
@click.option("--overwrite/--no-overwrite", default=False, is_flag=True, help="Replace files that already exist")
@handle_errors
def download_treebank(
    directory: str,
    splits: List[str]=[],
    overwrite: bool=False
) -> None:
    """
    Download the English-EWT treebank splits.
    """
    for path in download_ewt(directory, splits or EWT_SPLITS, overwrite=overwrite):
        click.echo(f"{cyan(path)}")
    click.echo("Done!")

if __name__ == "__main__":
    main()
