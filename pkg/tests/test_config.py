import pytest

from octagraph import hetero
from octagraph.config import ConfigError, PipelineConfig, config_from_dict, load_config


def test_defaults():
    cfg = config_from_dict({})
    assert cfg == PipelineConfig()
    t = cfg.train_config()
    assert (t.epochs, t.batch_size, t.n_folds) == (100, 16, 6)


def test_full_file(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("""
# comments are allowed
[data]
threshold = 0.4
[model]
ablation = "vessel"
dropout = 0.1
[train]
epochs = 5
learning_rate = 0.002
class_weights = "none"
[split]
folds = 4
seed = 3
[explain]
k = 5
steps = 32
""")
    cfg = load_config(path)
    assert cfg.model.relations == hetero.ABLATIONS["vessel"]
    assert cfg.train.epochs == 5 and cfg.train.learning_rate == 0.002
    assert cfg.train_config().n_folds == 4
    assert cfg.explain.k == 5 and cfg.data.threshold == 0.4


@pytest.mark.parametrize("bad", [
    {"trian": {}},
    {"train": {"epoch": 3}},
    {"train": {"epochs": "3"}},
    {"train": {"n_folds": 3}},
    {"model": {"ablation": "nope"}},
    {"model": {"ablation": "vessel", "relations": ["VES_VES"]}},
    {"model": {"relations": ["XYZ"]}},
    {"model": {"include_coordinates": 1}},
    {"split": {"test_fold": 1, "val_fold": 1}},
    {"explain": {"steps": 4}},
    {"data": {"threshold": 0}},
])
def test_strict_schema(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_malformed_toml(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[train\nepochs = 3")
    with pytest.raises(ConfigError):
        load_config(path)
