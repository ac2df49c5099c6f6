import json

import pytest

from kala.config import OUTPUT_ENV, RunConfig, apply_overrides, load_config
from kala.errors import ConfigError


def write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data) if not isinstance(data, str) else data)
    return str(path)


def test_defaults_fill_missing_sections(tmp_path):
    cfg = load_config(write(tmp_path, {"seed": 4}))
    assert cfg.seed == 4
    assert cfg.to_dict() == {**RunConfig().to_dict(), "seed": 4}


def test_nested_values_and_overrides(tmp_path):
    path = write(tmp_path, {"seed": 0, "model": {"kfm_locations": [1, 2], "kfm": {"gamma2": False}}})
    cfg = load_config(path, ["train.lr=0.001", "model.variant=kala-pointwise", "paths.output_dir=x/y"])
    assert cfg.model.kfm_locations == [1, 2]
    assert cfg.model.kfm.gamma2 is False and cfg.model.kfm.beta1 is True
    assert cfg.train.lr == 0.001
    assert cfg.model.variant == "kala-pointwise"
    assert cfg.paths.output_dir == "x/y"


def test_override_without_file():
    assert load_config(None, ["seed=9"]).seed == 9


def test_override_values_parse_as_json():
    data = apply_overrides({}, ["a.b=[1, 2]", "a.c=true", "d=text"])
    assert data == {"a": {"b": [1, 2], "c": True}, "d": "text"}


@pytest.mark.parametrize("data, message", [
    ({"seed": 0, "modle": {}}, "unknown key"),
    ({"seed": 0, "model": {"hiden": 3}}, "model"),
    ({"model": {}}, "seed"),
    ({"seed": 0, "model": {"variant": "bert"}}, "variant"),
    ({"seed": 0, "train": {"warmup": 1.0}}, "warmup"),
    ({"seed": 0, "generator": {"unseen_fraction": 2}}, "unseen_fraction"),
])
def test_invalid_configs(tmp_path, data, message):
    with pytest.raises(ConfigError, match=message):
        load_config(write(tmp_path, data))


def test_bad_json_reports_line(tmp_path):
    with pytest.raises(ConfigError, match="line 2"):
        load_config(write(tmp_path, '{"seed": 0,\n oops}'))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "nope.json"))


def test_bad_override():
    with pytest.raises(ConfigError):
        load_config(None, ["seed"])


def test_environment_sets_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    cfg = load_config(None, ["seed=0", "paths.output_dir=ignored"])
    assert cfg.paths.output_dir == str(tmp_path / "env")


def test_shipped_configs_load():
    import glob
    import os
    root = os.path.join(os.path.dirname(__file__), os.pardir, "configs")
    paths = glob.glob(os.path.join(root, "*.json"))
    assert paths
    for path in paths:
        load_config(path)
