import pytest

from ldenet.config import dump_config, load_config, save_config
from ldenet.errors import ConfigError
from ldenet.models import ModelConfig
from ldenet.training import TrainConfig


def write(tmp_path, text):
    path = tmp_path / "run.ini"
    path.write_text(text)
    return path


def test_defaults_without_file():
    assert load_config(None) == (ModelConfig(), TrainConfig())


def test_typed_values(tmp_path):
    path = write(tmp_path, """
[model]
c = 8
heads = 2
ffn_expansion = 2.5
enh_blocks_per_level = 2, 1, 1, 0

[train]
total_steps = 10
lr_max = 1e-3
hsv = false
""")
    model, train = load_config(path)
    assert model == ModelConfig(c=8, heads=2, ffn_expansion=2.5, enh_blocks_per_level=(2, 1, 1, 0))
    assert train.total_steps == 10 and train.lr_max == 1e-3 and train.hsv is False
    assert train.seed == TrainConfig().seed


def test_dump_roundtrip(tmp_path):
    model = ModelConfig(c=12, n_blocks=3, light_c=7, enh_blocks_per_level=(1, 2, 1, 1))
    train = TrainConfig(seed=9, flip=False, lambda_p=0.5, batch_size=3)
    path = tmp_path / "out.ini"
    save_config(model, train, path)
    assert load_config(path) == (model, train)
    assert "[model]" in dump_config(model, train) and "lambda_recon = 0.2" in dump_config(model, train)


@pytest.mark.parametrize("text,match", [
    ("[model]\nwidth = 3\n", "unknown key"),
    ("[optim]\nlr = 1\n", "unknown section"),
    ("[train]\nseed = forty\n", "bad value"),
    ("[train]\nhsv = maybe\n", "bad value"),
    ("[model]\nc = 6\nheads = 4\n", "heads"),
    ("c = 3\n", "malformed"),
])
def test_rejects(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        load_config(write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.ini")
