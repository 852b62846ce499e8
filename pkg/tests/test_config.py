import pytest

from mcaer.config import RunConfig, apply_updates, format_value, load_config, parse_value
from mcaer.errors import ConfigError


def write(tmp_path, text):
    p = tmp_path / "run.ini"
    p.write_text(text)
    return p


class TestParsing:
    @pytest.mark.parametrize(
        "annotation,text,want",
        [
            ("int", " 5 ", 5),
            ("float", "4e-3", 4e-3),
            ("bool", "yes", True),
            ("bool", "off", False),
            ("str", " float64 ", "float64"),
            ("tuple[int, ...]", "32, 64,128", (32, 64, 128)),
            ("tuple[str, ...]", "face,context", ("face", "context")),
            ("tuple[float, float, float]", "0.7,0.1,0.2", (0.7, 0.1, 0.2)),
            ("Optional[float]", "none", None),
            ("Optional[float]", "0.95", 0.95),
        ],
    )
    def test_values(self, annotation, text, want):
        assert parse_value(annotation, text) == want

    @pytest.mark.parametrize("annotation,text", [("int", "x"), ("bool", "maybe"), ("tuple[int, int]", "1,2,3")])
    def test_bad_values(self, annotation, text):
        with pytest.raises(ValueError):
            parse_value(annotation, text)

    def test_format_round_trip(self):
        cfg = RunConfig()
        assert format_value(None) == "none" and format_value(True) == "true"
        assert format_value(cfg.model.face_widths) == "32,64,128,256,256"


class TestLoad:
    def test_defaults_without_file(self):
        assert load_config(None) == RunConfig()

    def test_sections_apply(self, tmp_path):
        cfg = load_config(write(tmp_path, "[model]\nwidth_divisor = 8\n[train]\nepochs = 3\nearly_stop_acc = 0.9\n[prep]\ncrop_pad = 2\n"))
        assert cfg.model.width_divisor == 8
        assert cfg.train.epochs == 3 and cfg.train.early_stop_acc == 0.9
        assert cfg.prep.crop_pad == 2

    def test_streams_synchronized(self, tmp_path):
        cfg = load_config(write(tmp_path, "[train]\nenabled_streams = face,context\n"))
        assert cfg.model.enabled_streams == ("face", "context") == cfg.train.enabled_streams

    def test_unknown_key_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="lr"):
            load_config(write(tmp_path, "[train]\nlr = 0.1\n"))

    def test_unknown_section_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="optim"):
            load_config(write(tmp_path, "[optim]\nx = 1\n"))

    def test_bad_value_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="epochs"):
            load_config(write(tmp_path, "[train]\nepochs = many\n"))

    def test_invalid_combination_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, "[model]\nenabled_streams = face\n"))

    def test_malformed_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, "epochs = 3\n"))

    def test_ini_round_trip(self, tmp_path):
        cfg = apply_updates(RunConfig(), "train", {"epochs": "9", "early_stop_acc": "0.5"})
        assert load_config(write(tmp_path, cfg.to_ini())) == cfg
