import json

import pytest

from deformplan.config import RunConfig, load_config, save_config
from deformplan.encoder import EncoderConfig


def test_defaults_are_consistent():
    config = RunConfig()
    assert config.rssm.embed_dim == config.encoder.embed_dim
    assert config.rssm.action_dim == 4
    assert config.seed == 0


def test_round_trip_through_json(tmp_path):
    config = RunConfig(seed=42, goal="dent")
    path = tmp_path / "run.json"
    save_config(config, path)
    loaded = load_config(path)
    assert loaded.to_dict() == config.to_dict()
    assert loaded.seed == 42
    assert loaded.env.workspace.lo == config.env.workspace.lo


def test_unknown_keys_rejected(tmp_path):
    config = RunConfig()
    data = config.to_dict()
    data["typo_field"] = 1
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    with pytest.raises(ValueError, match="typo_field"):
        load_config(path)

    data = config.to_dict()
    data["planner"]["oops"] = 2
    path.write_text(json.dumps(data))
    with pytest.raises(ValueError, match="oops"):
        load_config(path)


def test_embed_dim_mismatch_rejected():
    config = RunConfig()
    with pytest.raises(ValueError, match="embed_dim"):
        RunConfig(encoder=EncoderConfig(deform_dim=8, appearance_dim=8), rssm=config.rssm)


def test_infinity_threshold_survives_json(tmp_path):
    config = RunConfig()
    assert config.reward_threshold == float("inf")
    path = tmp_path / "run.json"
    save_config(config, path)
    json.loads(path.read_text())  # must be strictly valid JSON
    assert load_config(path).reward_threshold == float("inf")
