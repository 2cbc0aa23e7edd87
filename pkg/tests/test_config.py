import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semgraph_reloc.config import RunConfig
from semgraph_reloc.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert cfg.train.learning_rate == 0.001 and cfg.train.epochs == 35
    assert (cfg.train.beta1, cfg.train.beta2) == (0.9, 0.999)
    assert cfg.model.capacity == 35
    assert (cfg.model.global_dim, cfg.model.map_dim, cfg.model.graph_dim) == (128, 128, 64)
    assert cfg.cluster.alpha == 2.0


def test_yaml_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.override("model.encoder_image_size", "[64, 24]")
    cfg.override("train.ablation", "base+semantic")
    cfg.save(tmp_path / "c.yaml")
    back = RunConfig.load(tmp_path / "c.yaml")
    assert back == cfg and back.digest() == cfg.digest()


@settings(max_examples=30)
@given(st.floats(1e-6, 1.0), st.integers(1, 500), st.integers(0, 2**31))
def test_round_trip_property(lr, epochs, seed):
    cfg = RunConfig()
    cfg.train.learning_rate, cfg.train.epochs, cfg.rng_seed = lr, epochs, seed
    assert RunConfig.from_yaml(cfg.to_yaml()) == cfg


def test_override_coerces():
    cfg = RunConfig()
    cfg.override("train.learning_rate", "3e-4")
    cfg.override("model.k", "8")
    assert cfg.train.learning_rate == 3e-4 and cfg.model.k == 8


@pytest.mark.parametrize("key,value", [("train.nope", "1"), ("nope.k", "1"), ("model.k", "abc"),
                                       ("model.k", "1.5"), ("model.share_graph_weights", "3")])
def test_override_rejects(key, value):
    with pytest.raises(ConfigError):
        RunConfig().override(key, value)


def test_unknown_file_key():
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_yaml("train:\n  bogus: 1\n")


def test_not_a_mapping():
    with pytest.raises(ConfigError):
        RunConfig.from_yaml("- 1\n- 2\n")


@pytest.mark.parametrize("field,value", [("learning_rate", 0.0), ("epochs", 0), ("ablation", "x")])
def test_train_validation(field, value):
    cfg = RunConfig()
    setattr(cfg.train, field, value)
    with pytest.raises(ConfigError):
        cfg.train.validate()


def test_structure_lists_capacity():
    assert "capacity" in RunConfig().model.structure()
