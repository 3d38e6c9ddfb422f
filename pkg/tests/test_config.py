import json

import pytest

from encofa.config import RunConfig, config_from_dict, dump_config_json, load_config
from encofa.exceptions import ConfigError


def write(tmp_path, text):
    p = tmp_path / "run.toml"
    p.write_text(text)
    return p


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.hyper.tau == 0.2 and cfg.optim.weight_decay == 1e-4 and cfg.optim.power == 0.9


def test_toml_roundtrip(tmp_path):
    cfg = load_config(write(tmp_path, """
[hyper]
lambda = 1.5
gamma_cl = 0.75
k = 50
[optim]
lr = 1          # integer promoted to float
[train]
epochs = 10
"""))
    assert cfg.hyper.lam == 1.5 and cfg.hyper.gamma_cl == 0.75 and cfg.hyper.k == 50
    assert isinstance(cfg.optim.lr, float) and cfg.optim.lr == 1.0
    out = tmp_path / "c.json"
    dump_config_json(cfg, out)
    again = config_from_dict(json.loads(out.read_text()))
    assert again == cfg


@pytest.mark.parametrize("raw,key", [
    ({"hyper": {"lam": 1.0}}, "hyper.lam"),
    ({"hyper": {"gamma_x": 0.1}}, "hyper.gamma_x"),
    ({"optimizer": {}}, "optimizer"),
    ({"hyper": {"k": 2.5}}, "hyper.k"),
    ({"hyper": {"gamma_cl": "high"}}, "hyper.gamma_cl"),
    ({"train": {"augment": 1}}, "train.augment"),
    ({"hyper": {"gamma_p": 1.2}}, "hyper.gamma_p"),
    ({"hyper": {"lambda": -1}}, "hyper.lambda"),
    ({"train": {"epochs": 3, "warmup_epochs": 3}}, "train.warmup_epochs"),
    ({"optim": {"lr": 0}}, "optim.lr"),
    ({"train": {"variant": "dividemix"}}, "train.variant"),
    ({"data": {"source": "csv"}}, "data.path"),
    ({"hyper": {"gmm_var_floor": 0}}, "hyper.gmm_var_floor"),
])
def test_invalid_config_names_key(raw, key):
    with pytest.raises(ConfigError) as info:
        config_from_dict(raw)
    assert info.value.key == key


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "[hyper\nk = 1"))


def test_shipped_presets_load():
    from pathlib import Path

    presets = sorted((Path(__file__).parent.parent / "configs").glob("*.toml"))
    assert len(presets) >= 8
    for p in presets:
        load_config(p)
