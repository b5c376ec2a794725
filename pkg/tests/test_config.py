import json

import pytest

from binarch.config import ConfigError, RunConfig
from binarch.ops import MODES


def test_desk_defaults_validate():
    cfg = RunConfig.desk()
    cfg.validate()
    sc = cfg.search_config()
    assert [s.depth for s in sc.schedule.stages] == [3, 4, 5]
    assert [s.ops_kept for s in sc.schedule.stages] == [8, 5, 3]
    assert sc.network.mode == MODES["bin-proposed"]


def test_full_preset_values():
    cfg = RunConfig.full()
    sc = cfg.search_config(10)
    assert [(s.depth, s.epochs, s.warmup_epochs) for s in sc.schedule.stages] == [(5, 25, 10), (11, 25, 10),
                                                                                (17, 25, 10)]
    assert sc.optim.arch_lr == 6e-4 and sc.optim.batch_size == 96
    net = cfg.network_config(10)
    assert (net.init_channels, net.layers, net.n_nodes, net.stem_stride) == (36, 20, 4, 1)
    assert cfg.train_config().cutout == 16 and cfg.train_config().epochs == 600


@pytest.mark.parametrize("doc,key", [({"bogus": 1}, "bogus"), ({"search": {"bogus": 1}}, "search.'bogus'"),
                                     ({"train": 3}, "train")])
def test_unknown_or_bad_keys_named(doc, key):
    with pytest.raises(ConfigError) as e:
        RunConfig.from_dict(doc)
    assert key in str(e.value)


@pytest.mark.parametrize("doc", [{"mode": "ternary"}, {"dtype": "float16"}, {"threads": 0},
                                 {"search": {"depths": [3, 4], "ops_kept": [8, 5, 3]}},
                                 {"search": {"epochs": "four"}}, {"train": {"cutout": 64}}])
def test_invalid_values_rejected(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc).validate()


def test_load_with_preset(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"preset": "full", "seed": 4, "search": {"epochs": 12}}))
    cfg = RunConfig.load(str(p))
    assert cfg.seed == 4 and cfg.search.epochs == 12 and cfg.network.init_channels == 36


def test_overrides_parse_json_values():
    cfg = RunConfig.desk().with_overrides(["search.epochs=0", "mode=\"bin-full\"", "search.depths=[1,2,3]"])
    assert cfg.search.epochs == 0 and cfg.mode == "bin-full" and cfg.search.depths == [1, 2, 3]
    with pytest.raises(ConfigError, match="nope"):
        RunConfig.desk().with_overrides(["search.nope=1"])
    with pytest.raises(ConfigError):
        RunConfig.desk().with_overrides(["no_equals_sign"])


def test_zero_epochs_forces_zero_warmup():
    sc = RunConfig.desk().with_overrides(["search.epochs=0"]).search_config()
    assert all(s.epochs == 0 and s.warmup_epochs == 0 for s in sc.schedule.stages)


def test_real_mode_selects_sgd():
    cfg = RunConfig.desk().with_overrides(["mode=\"real\""])
    t = cfg.train_config()
    assert t.optimizer == "sgd" and t.lr == 0.1 and t.momentum == 0.9


def test_round_trip_through_dict():
    cfg = RunConfig.full().with_overrides(["seed=9"])
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_datasets_split_sizes():
    search, train, test = RunConfig.desk().with_overrides(["data.n_images=200"]).datasets()
    assert len(train) == 160 and len(test) == 40 and len(search) == 160
    search, _, _ = RunConfig.desk().with_overrides(["data.n_images=1000"]).datasets()
    assert len(search) == 512
