import os
import json
import pytest

from typing import Any, Dict

from ortho_probe.util import (
    ConfigError,
    ExperimentConfig,
    SyntheticConfig,
    get_worker_count,
    load_experiment_config,
)

from conftest import DEP_DEPTH, DEP_DISTANCE

def synthetic_config(**extra: Any) -> Dict[str, Any]:
    data: Dict[str, Any] = {
        "synthetic": {"ambient_dim": 16, "max_length": 8, "sentences": {"train": 10}},
        "mode": "A",
        "objectives": ["dep-depth", "dep-distance"],
        "output_dir": "out",
    }
    data.update(extra)
    return data

def write_config(tmp_path, data: Dict[str, Any]) -> str: # type: ignore[no-untyped-def]
    path = str(tmp_path / "experiment.json")
    with open(path, "w") as f:
        json.dump(data, f)
    return path

def test_synthetic_defaults_and_paths(tmp_path) -> None: # type: ignore[no-untyped-def]
    config = load_experiment_config(write_config(tmp_path, synthetic_config()))
    assert config.synthetic is not None
    assert config.synthetic.sentences == {"train": 10, "dev": 50, "test": 50}
    assert config.synthetic.planted_spec().planted_rank == 7
    assert config.treebank_path("dev") == os.path.join("out", "data", "dev.conllu")
    assert config.embedding_path("test", 3) == os.path.join("out", "data", "test.layer3.opemb")
    assert config.groups() == [(DEP_DEPTH,), (DEP_DISTANCE,)]
    assert config.checkpoint_path(2, 1, (DEP_DEPTH,)) == os.path.join("out", "checkpoints", "modeA-layer2-seed1-dep-depth.opckp")

def test_flag_overrides_win(tmp_path) -> None: # type: ignore[no-untyped-def]
    path = write_config(tmp_path, synthetic_config(train={"max_epochs": 5}))
    config = load_experiment_config(path, max_epochs=2, lambda_sparsity=0.01, mode="ii", seeds=[3, 4], layers=None)
    assert config.train == {"max_epochs": 2, "lambda_sparsity": 0.01}
    assert config.normalized_mode == "II"
    assert config.seeds == (3, 4)
    assert config.layers == (0,)
    train_config = config.train_config((DEP_DEPTH,), seed=3)
    assert train_config.max_epochs == 2
    assert train_config.hyper.lambda_sparsity == 0.01
    assert config.checkpoint_path(0, 3, (DEP_DEPTH,)).endswith(".linear.opckp")

def test_optimizer_settings_reach_the_train_config(tmp_path) -> None: # type: ignore[no-untyped-def]
    train = {"rotation_lr_scale": 1.0, "calibrate_initial_scale": False, "sparsity_warmup_epochs": 0}
    config = load_experiment_config(write_config(tmp_path, synthetic_config(train=train)))
    train_config = config.train_config((DEP_DEPTH,), seed=0)
    assert train_config.rotation_step_scale(64) == 1.0
    assert not train_config.calibrate_initial_scale
    assert train_config.hyper.sparsity_warmup_epochs == 0
    assert train_config.hyper.sparsity_trigger == 1.5

def test_joint_modes_group_objectives(tmp_path) -> None: # type: ignore[no-untyped-def]
    config = load_experiment_config(write_config(tmp_path, synthetic_config(mode="B")))
    assert config.groups() == [(DEP_DEPTH, DEP_DISTANCE)]
    assert "dep-depth+dep-distance" in config.checkpoint_path(0, 0, config.groups()[0])

@pytest.mark.parametrize("extra,field", [
    ({"colour": "blue"}, "colour"),
    ({"mode": "Q"}, "mode"),
    ({"objectives": ["dep-width"]}, "objectives"),
    ({"objectives": "dep-depth"}, "objectives"),
    ({"mode": "C"}, "objectives"),
    ({"objectives": ["lex-depth"]}, "objectives"),
    ({"layers": []}, "layers"),
    ({"layers": [-1]}, "layers"),
    ({"seeds": []}, "seeds"),
    ({"epsilon": 0.0}, "epsilon"),
    ({"train": {"max_epochs": 0}}, "max_epochs"),
    ({"train": {"momentum": 0.9}}, "train.momentum"),
    ({"train": {"clip_norm": -1.0}}, "train"),
    ({"train": {"rotation_lr_scale": 0.0}}, "rotation_lr_scale"),
    ({"train": {"sparsity_warmup_epochs": -1}}, "train"),
    ({"synthetic": {"ambient_dim": 16, "max_length": 12, "planted_rank": 5}}, "synthetic.planted_rank"),
    ({"synthetic": {"ambient_dim": 8, "max_length": 12}}, "synthetic.ambient_dim"),
    ({"synthetic": {"ambient_dim": 16, "max_length": 8, "sentences": {"dev": 0}}}, "synthetic.sentences"),
    ({"synthetic": {"dims": 4}}, "synthetic.dims"),
])
def test_validation_names_the_field(tmp_path, extra: Dict[str, Any], field: str) -> None: # type: ignore[no-untyped-def]
    with pytest.raises(ConfigError) as info:
        load_experiment_config(write_config(tmp_path, synthetic_config(**extra)))
    assert info.value.field == field

def test_real_data_needs_every_split(tmp_path) -> None: # type: ignore[no-untyped-def]
    data: Dict[str, Any] = {
        "treebanks": {"train": "t.conllu", "dev": "d.conllu", "test": "e.conllu"},
        "embeddings": {"train": "t.{layer}.opemb", "dev": "d.{layer}.opemb"},
        "layers": [0, 1],
    }
    with pytest.raises(ConfigError) as info:
        load_experiment_config(write_config(tmp_path, data))
    assert info.value.field == "embeddings"
    data["embeddings"]["test"] = "e.opemb"
    with pytest.raises(ConfigError) as info:
        load_experiment_config(write_config(tmp_path, data))
    assert "placeholder" in str(info.value)
    data["embeddings"]["test"] = "e.{layer}.opemb"
    config = load_experiment_config(write_config(tmp_path, data))
    assert config.embedding_path("test", 1) == "e.1.opemb"
    with pytest.raises(ConfigError) as info:
        load_experiment_config(write_config(tmp_path, dict(data, objectives=["lex-depth"])))
    assert info.value.field == "taxonomy"

def test_unreadable_config(tmp_path) -> None: # type: ignore[no-untyped-def]
    path = str(tmp_path / "broken.json")
    with open(path, "w") as f:
        f.write("{not json")
    with pytest.raises(ConfigError) as info:
        load_experiment_config(path)
    assert info.value.field == "config"
    with pytest.raises(ConfigError):
        load_experiment_config(str(tmp_path / "missing.json"))
    assert ConfigError("x", "y").exit_code == 2

def test_config_round_trips_through_dict() -> None:
    config = ExperimentConfig.from_dict(synthetic_config(seeds=[1, 2]))
    assert ExperimentConfig.from_dict(config.to_dict()) == config
    assert isinstance(config.synthetic, SyntheticConfig)

def test_worker_count(monkeypatch) -> None: # type: ignore[no-untyped-def]
    monkeypatch.delenv("ORTHO_PROBE_THREADS", raising=False)
    assert get_worker_count() == 1
    monkeypatch.setenv("ORTHO_PROBE_THREADS", "4")
    assert get_worker_count() == 4
    for value in ("0", "many"):
        monkeypatch.setenv("ORTHO_PROBE_THREADS", value)
        with pytest.raises(ConfigError):
            get_worker_count()
