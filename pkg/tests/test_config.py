import json

import pytest

from pib import config
from pib.errors import ConfigError, DataError


def test_defaults_describe_the_mnist_cascade():
    cfg = config.RunConfig()
    assert [(l.rows, l.cols) for l in cfg.network.layers] == [(784, 100)]
    assert cfg.network.final_readout == (100, 10)


def test_nested_sections_are_built():
    cfg = config.from_dict({
        "seed": 4,
        "train": {"beta": 0.2, "optimizer": {"lr": 0.5}, "kernel": {"kind": "gaussian", "sigma": None,
                                                                  "gamma": 1.0, "standardize": False}},
        "network": {"layers": [{"type": "optical", "n_in": 8, "n_out": 16, "readout_dim": 4}],
                    "final_readout": [4, 2]},
        "rl": {"config": {"episodes": 3}},
        "unsup": {"augment": {"shift_max": 1}},
        "bench": {"baseline": {"epochs": 2, "optimizer": {"lr": 0.1}}},
    })
    assert cfg.train.optimizer.lr == 0.5 and cfg.train.kernel.standardize is False
    assert cfg.network.layers[0].kind == "optical"
    assert cfg.rl.config.episodes == 3 and cfg.unsup.augment.shift_max == 1
    assert cfg.bench.baseline.optimizer.lr == 0.1


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"train": {"betaa": 0.1}},
    {"train": {"optimizer": {"learning_rate": 1}}},
    {"train": {"kernel": {"kind": "gaussian", "width": 2}}},
    {"network": {"layers": [{"type": "memristor", "rows": 4, "cols": 2, "colour": 1}], "final_readout": [2, 2]}},
    {"network": {"layers": [{"type": "tape", "rows": 4}], "final_readout": [2, 2]}},
    {"rl": {"config": {"episodes": 3, "gamma": 0.9}}},
    {"rl": {"agent": {}}},
    {"distributed": {"peers": []}},
    {"dataset": {"name": "blobs", "shuffle": True}},
    {"bench": {"baseline": {"lr": 1}}},
])
def test_unknown_keys_fail_fast(doc):
    with pytest.raises(ConfigError):
        config.from_dict(doc)


def test_invalid_values_are_config_errors():
    with pytest.raises(ConfigError):
        config.from_dict({"train": {"batch_size": 1}})
    with pytest.raises(ConfigError):
        config.from_dict({"network": {"layers": [{"type": "memristor", "rows": 4, "cols": 3}],
                                      "final_readout": [2, 2]}})


def test_paths_checked_at_load(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"dataset": {"name": "csv", "train_csv": "a.csv", "test_csv": "b.csv"}}))
    with pytest.raises(DataError):
        config.load(p)
    (tmp_path / "a.csv").write_text("label,x\n0,1\n1,2\n")
    (tmp_path / "b.csv").write_text("label,x\n0,1\n1,2\n")
    cfg = config.load(p)
    assert cfg.dataset.load(0, tmp_path).X_train.shape == (2, 1)


def test_bad_json_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        config.load(tmp_path / "missing.json")
    (tmp_path / "x.json").write_text("{")
    with pytest.raises(ConfigError):
        config.load(tmp_path / "x.json")


def test_seed_propagates_everywhere():
    cfg = config.with_seed(config.RunConfig(), 11)
    assert cfg.train.seed == cfg.bench.baseline.seed == cfg.rl.config.seed == 11


def test_default_config_round_trips():
    d = config.to_dict(config.RunConfig())
    assert config.to_dict(config.from_dict(json.loads(json.dumps(d)))) == d


def test_to_dict_round_trips():
    cfg = config.from_dict({"seed": 2, "rl": {"network": config.default_rl_network().to_dict(),
                                              "train": config.default_rl_train(2).to_dict()}})
    again = config.from_dict(json.loads(json.dumps(config.to_dict(cfg))))
    assert config.to_dict(again) == config.to_dict(cfg)


def test_shipped_configs_parse():
    from pathlib import Path
    from pib import config as cfgmod
    shipped = sorted((Path(__file__).parent.parent / "configs").glob("*.json"))
    assert shipped
    for path in shipped:
        cfg = cfgmod.load(path)
        assert cfgmod.from_dict(cfgmod.to_dict(cfg)) == cfg
