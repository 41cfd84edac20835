import pytest

from scoreattn.config import (DataConfig, RunConfig, load_config, parse_overrides, resolve_key,
                              set_value)
from scoreattn.errors import ConfigError


def write(tmp_path, text):
    path = tmp_path / "run.toml"
    path.write_text(text)
    return path


def test_defaults_are_desk_scale_and_valid():
    config = load_config()
    assert config.model.d == 32 and config.model.feature_width == config.data.feature_width
    assert config.bench.aggregators == ["score_attention", "mean", "max", "logsumexp", "conv1d", "cls"]


def test_file_then_overrides(tmp_path):
    path = write(tmp_path, 'seed = 4\n[model]\ntask = "retrieval"\nk = 2\n[train]\nlr = 0.01\n')
    config = load_config(path, {"k": "3", "train.epochs": "5", "bench.seeds": "1,2"})
    assert config.seed == 4 and config.train.seed == 4
    assert config.model.task == "retrieval" and config.model.k == 3
    assert config.train.lr == 0.01 and config.train.epochs == 5
    assert config.bench.seeds == [1, 2]


def test_linked_feature_width_sets_both_sections():
    config = load_config(overrides={"feature_width": "40"})
    assert config.model.feature_width == config.data.feature_width == 40


@pytest.mark.parametrize("text", ['[model]\nwidth = 3\n', 'colour = 1\n', 'model = 3\n',
                                  '[model]\nk = "two"\n', '[train]\nepochs = 1.5\n', 'seed = \n'])
def test_bad_files_raise_config_error(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, text))


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.toml")


def test_cross_section_validation():
    with pytest.raises(ConfigError):
        load_config(overrides={"model.feature_width": "10"})
    with pytest.raises(ConfigError):
        load_config(overrides={"data.R": "20"})
    with pytest.raises(ConfigError):
        load_config(overrides={"precision": "16"})
    with pytest.raises(ConfigError):
        load_config(overrides={"workers": "0"})


def test_resolve_key():
    assert resolve_key("model.k") == "model.k"
    assert resolve_key("warmup-epochs") == "train.warmup_epochs"
    assert resolve_key("seed") == "seed"
    with pytest.raises(ConfigError):
        resolve_key("nothing")
    with pytest.raises(ConfigError):
        resolve_key("model.nothing")


def test_top_level_name_wins_over_section_field():
    # "seed" exists at top level and in [train]; the top-level one drives both
    assert resolve_key("seed") == "seed"
    assert load_config(overrides={"seed": "9"}).train.seed == 9


def test_value_conversion():
    config = RunConfig()
    set_value(config, "model.share_cross_attention", "yes")
    assert config.model.share_cross_attention is True
    set_value(config, "train.lr", "none")
    assert config.train.lr is None
    with pytest.raises(ConfigError):
        set_value(config, "model.share_cross_attention", "maybe")


def test_files_source_requires_paths():
    with pytest.raises(ConfigError):
        DataConfig(source="files").validate()
    with pytest.raises(ConfigError):
        DataConfig(source="ftp").validate()


def test_parse_overrides():
    assert parse_overrides(["--k", "5", "--model.aggregator=mean"]) == {"k": "5", "model.aggregator": "mean"}
    with pytest.raises(ConfigError):
        parse_overrides(["k", "5"])
    with pytest.raises(ConfigError):
        parse_overrides(["--k"])
