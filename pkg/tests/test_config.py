import json

import pytest
from pydantic import ValidationError

from recast.config import RunConfig


def test_defaults_build_library_objects():
    cfg = RunConfig()
    rc = cfg.recast.build()
    assert (rc.n_layers, rc.n_groups, rc.n_templates, rc.n_sets) == (6, 3, 2, 2)
    assert cfg.mimicry.build().optimizer == "sgd"
    suite = cfg.til.suite(rc.layout[0][0].dims[1])
    assert len(suite) == cfg.til.tasks + 1
    assert cfg.adapter.build().kind == "lora"


@pytest.mark.parametrize("bad", [
    {"recast": {"groups": 7}},
    {"recast": {"width": 0}},
    {"mimicry": {"lr": 0}},
    {"mimicry": {"sigma": -0.1}},
    {"mimicry": {"loss": "kl"}},
    {"til": {"mode": "everything"}},
    {"til": {"classes": 1}},
    {"adapter": {"sparsity": 2}},
    {"unknown": 1},
    {"til": {"seeds": 3}},
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ValidationError):
        RunConfig.model_validate(bad)


def test_load_round_trip(tmp_path):
    cfg = RunConfig.model_validate({"til": {"tasks": 5}, "output_dir": "x"})
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.model_dump()))
    assert RunConfig.load(p) == cfg
