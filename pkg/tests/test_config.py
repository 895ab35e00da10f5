import pytest

from dcswin.config import ConfigError, RunConfig, format_config, load_config, parse_config


def test_defaults_round_trip():
    text = format_config(RunConfig())
    assert parse_config(text) == RunConfig()
    assert "train.lr = 0.0003" in text
    assert "train.ignore_label" not in text


def test_overrides_and_comments():
    cfg = parse_config("""
        # tiny run
        model.variant = dc      # trailing comment
        model.depths = 2, 2, 2, 2
        train.steps = 7
        train.augment = yes
        train.betas = 0.8, 0.99
        data.ignore_label = 0
    """)
    assert cfg.model.variant == "dc" and cfg.model.depths == (2, 2, 2, 2)
    assert cfg.train.steps == 7 and cfg.train.augment is True
    assert cfg.train.betas == (0.8, 0.99)
    assert cfg.train_config().ignore_label == 0
    assert cfg.model.build().depths == [2, 2, 2, 2]


@pytest.mark.parametrize("text,key", [
    ("train.learning_rate = 1", "train.learning_rate"),
    ("optim.lr = 1", "optim.lr"),
    ("train.steps = many", "train.steps"),
    ("train.steps = 1\ntrain.steps = 2", "train.steps"),
    ("model.preset = swin_huge", "model.preset"),
    ("model.variant = fancy", "model.variant"),
    ("train.ignore_label = 3", "train.ignore_label"),
    ("train.lr = -1", "train"),
    ("train.steps", "line 1"),
])
def test_errors_name_the_key(text, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        parse_config(text)


def test_empty_value_resets_optional():
    cfg = parse_config("model.embed_dim = 48\n")
    assert cfg.model.build().embed_dim == 48
    assert parse_config("model.embed_dim =\n").model.embed_dim is None


def test_load_config(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("output.dir = somewhere\n")
    assert load_config(p).output.dir == "somewhere"
