"""Run configuration round trips and overrides."""

import json

import pytest

from pointad.config import ConfigKeyError, RunConfig, smoke_config


def test_defaults():
    cfg = RunConfig()
    assert cfg.views == 9 and cfg.render.size == (336, 336) and cfg.encoder.input_size == (336, 336)
    assert (cfg.aggregation.k, cfg.aggregation.alpha, cfg.aggregation.sigma) == (10, 0.5, 1.0)
    assert cfg.prompts.length == 12 and cfg.encoder.temperature == 0.01
    assert cfg.eval.fpr_limit == 0.3


def test_dict_roundtrip_and_fingerprint(tmp_path):
    cfg = smoke_config({"train.loss_weights": {"cross": 0.5}, "render.angles": [0.0] * 9})
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.fingerprint() == cfg.fingerprint()
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert RunConfig.load(tmp_path / "c.json") == cfg
    assert smoke_config().fingerprint() != cfg.fingerprint()


def test_override_rejects_unknown_keys():
    with pytest.raises(ConfigKeyError):
        RunConfig().override({"render.sise": [1, 1]})
    with pytest.raises(ConfigKeyError):
        RunConfig().override({"renderer.size": [1, 1]})
    with pytest.raises(ConfigKeyError):
        RunConfig.from_dict({"colour": 1})


def test_override_values():
    cfg = RunConfig().override({"train.epochs": 3, "views": 4})
    assert cfg.train.epochs == 3 and cfg.views == 4 and RunConfig().train.epochs == 15
