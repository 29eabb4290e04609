import os
import json
import pytest

from click.testing import CliRunner
from typing import Any, Dict, List

from ortho_probe.__main__ import main

CHECKPOINT = os.path.join("checkpoints", "modeB-layer0-seed0-dep-depth+dep-distance.opckp")

def experiment(tmp_path, **extra: Any) -> str: # type: ignore[no-untyped-def]
    data: Dict[str, Any] = {
        "synthetic": {
            "ambient_dim": 16,
            "max_length": 8,
            "noise_scale": 0.1,
            "rotation_seed": 9,
            "sentences": {"train": 24, "dev": 8, "test": 8},
        },
        "mode": "B",
        "objectives": ["dep-depth", "dep-distance"],
        "layers": [0],
        "seeds": [0, 1],
        "train": {"max_epochs": 2, "batch_size": 8},
        "output_dir": str(tmp_path / "out"),
    }
    data.update(extra)
    path = str(tmp_path / "experiment.json")
    with open(path, "w") as f:
        json.dump(data, f)
    return path

def invoke(*args: str) -> Any:
    result = CliRunner().invoke(main, list(args), catch_exceptions=False)
    return result

def read_bytes(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()

@pytest.fixture
def trained(tmp_path, monkeypatch) -> str: # type: ignore[no-untyped-def]
    monkeypatch.delenv("ORTHO_PROBE_THREADS", raising=False)
    config = experiment(tmp_path)
    assert invoke("synth", "--config", config).exit_code == 0
    result = invoke("train", "--config", config)
    assert result.exit_code == 0, result.output
    return config

def test_synth_is_reproducible(tmp_path) -> None: # type: ignore[no-untyped-def]
    config = experiment(tmp_path)
    result = invoke("synth", "--config", config)
    assert result.exit_code == 0, result.output
    data = tmp_path / "out" / "data"
    files = sorted(os.listdir(data))
    assert files == [
        "dev.conllu",
        "dev.layer0.opemb",
        "test.conllu",
        "test.layer0.opemb",
        "train.conllu",
        "train.layer0.opemb",
    ]
    first = {name: read_bytes(str(data / name)) for name in files}
    assert invoke("synth", "--config", config).exit_code == 0
    assert {name: read_bytes(str(data / name)) for name in files} == first

def test_train_writes_checkpoints_and_histories(trained, tmp_path) -> None: # type: ignore[no-untyped-def]
    out = tmp_path / "out"
    assert os.path.exists(out / CHECKPOINT)
    assert os.path.exists(out / "checkpoints" / "modeB-layer0-seed1-dep-depth+dep-distance.opckp")
    with open(out / "checkpoints" / "modeB-layer0-seed0-dep-depth+dep-distance.history.json") as f:
        history = json.load(f)
    assert len(history["history"]) == 2
    assert history["parameter_count"] == 16 * 16 + 2 * 16
    assert history["degrees_of_freedom"] == 16 * 15 // 2 + 2 * 16
    # A finished run resumes as a no-op.
    again = invoke("train", "--config", trained)
    assert again.exit_code == 0
    assert "best epoch" in again.output

def test_eval_reports_every_objective(trained, tmp_path) -> None: # type: ignore[no-untyped-def]
    result = invoke("eval", "--config", trained)
    assert result.exit_code == 0, result.output
    assert "dep-depth" in result.output
    assert "UUAS" in result.output
    out = tmp_path / "out"
    with open(out / "report.json") as f:
        report = json.load(f)
    assert sorted(report["best"]) == ["dep-depth", "dep-distance"]
    assert all(len(cell["values"]) == 2 for cell in report["cells"])
    assert report["metadata"]["mode"] == "B"
    assert os.path.exists(out / "report.tsv")
    assert os.path.exists(out / "parse.tsv")

def test_oracle_eval_parses_perfectly(trained, tmp_path) -> None: # type: ignore[no-untyped-def]
    result = invoke("eval", "--config", trained, "--oracle")
    assert result.exit_code == 0, result.output
    with open(tmp_path / "out" / "report.json") as f:
        report = json.load(f)
    assert report["metadata"]["oracle"] is True
    assert report["parse_scores"]["0"]["uuas"] == 1.0
    assert report["parse_scores"]["0"]["uas"] == 1.0
    assert all(cell["nonzero_dims"] == 7 for cell in report["cells"])

def test_analyze_writes_tables(trained, tmp_path) -> None: # type: ignore[no-untyped-def]
    result = invoke("analyze", "--config", trained, "--epsilon-sweep", "1e-3", "--epsilon-sweep", "1e-6", "--bin-size", "4")
    assert result.exit_code == 0, result.output
    directory = tmp_path / "out" / "analysis" / "layer0-seed1-dep-depth+dep-distance"
    for name in ("dims.tsv", "scaling.tsv", "epsilon.tsv", "overlap.tsv", "histogram.tsv"):
        assert os.path.exists(directory / name), name
    with open(directory / "histogram.tsv") as f:
        rows: List[str] = f.read().splitlines()
    # Four bins per objective plus the header.
    assert len(rows) == 1 + 2 * 4
    result = invoke("analyze", "--config", trained, "--no-overlap", "--seed", "0")
    assert result.exit_code == 0

def test_overlap_needs_a_shared_rotation(trained) -> None: # type: ignore[no-untyped-def]
    result = invoke("analyze", "--config", trained, "--mode", "A", "--overlap")
    assert result.exit_code == 2
    assert "ConfigError" in result.output

def test_missing_checkpoints_are_data_errors(trained) -> None: # type: ignore[no-untyped-def]
    result = invoke("eval", "--config", trained, "--mode", "A")
    assert result.exit_code == 3
    assert "CheckpointError" in result.output

def test_invalid_configuration_exits_with_two(tmp_path) -> None: # type: ignore[no-untyped-def]
    config = experiment(tmp_path, objectives=["dep-width"])
    result = invoke("synth", "--config", config)
    assert result.exit_code == 2
    assert "objectives" in result.output
    result = invoke("train", "--config", experiment(tmp_path), "--max-epochs", "0")
    assert result.exit_code == 2

def test_inspect_conllu(trained, tmp_path) -> None: # type: ignore[no-untyped-def]
    result = invoke("inspect-conllu", str(tmp_path / "out" / "data" / "test.conllu"))
    assert result.exit_code == 0, result.output
    assert "Sentences" in result.output
    assert "8" in result.output

def test_inspect_malformed_conllu(tmp_path) -> None: # type: ignore[no-untyped-def]
    path = str(tmp_path / "bad.conllu")
    with open(path, "w") as f:
        f.write("# sent_id = broken\n1\ta\ta\tX\t_\t_\t0\troot\t_\t_\n2\tb\tb\tX\t_\t_\t0\troot\t_\t_\n")
    result = invoke("inspect-conllu", path)
    assert result.exit_code == 3
    assert "broken" in result.output

def test_inspect_checkpoint(trained, tmp_path) -> None: # type: ignore[no-untyped-def]
    result = invoke("inspect-checkpoint", str(tmp_path / "out" / CHECKPOINT))
    assert result.exit_code == 0, result.output
    assert "rotation" in result.output
    assert "scaler.dep-depth" in result.output
    assert "Degrees of freedom" in result.output
    assert "DSO" in result.output
