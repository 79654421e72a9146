import pytest

from config import Config, load_config, parse_override_args
from core.errors import ConfigError
from core.registry import CommandContext, CommandRegistry, registry
from modules import load_modules


def _ctx(command="", argv=None):
    return CommandContext(config=Config(), argv=argv or [], command=command)


class TestConfigValues:

    def test_defaults_validate(self):
        cfg = Config().validate()
        assert cfg.model.kp_depth == 3
        assert cfg.model.output_stride == 8
        assert cfg.assign.level_strides == (8, 16, 32, 64, 128)
        assert cfg.infer.score_threshold == 0.1

    @pytest.mark.parametrize("key, raw, expected", [
        ("model.res_ratio", "1/4", 0.25),
        ("model.res_ratio", "0.5", 0.5),
        ("model.kp_depth", " 2 ", 2),
        ("model.disk_offset", "off", False),
        ("model.heatmap", "Yes", True),
        ("train.decay_epochs", "27, 33", (27, 33)),
        ("train.decay_epochs", "(5,)", (5,)),
        ("model.backbone_widths", "8,16,32,64", (8, 16, 32, 64)),
        ("data.source", "'coco'", "coco"),
    ])
    def test_set_coerces(self, key, raw, expected):
        cfg = Config()
        cfg.set(key, raw)
        section, name = key.split(".")
        assert getattr(cfg.section(section), name) == expected

    @pytest.mark.parametrize("key, raw", [
        ("model.kp_depth", "three"),
        ("model.heatmap", "maybe"),
        ("model.res_ratio", "1/0"),
        ("model.nonexistent", "1"),
        ("nosection.key", "1"),
        ("kp_depth", "3"),
    ])
    def test_set_rejects(self, key, raw):
        with pytest.raises(ConfigError):
            Config().set(key, raw)

    @pytest.mark.parametrize("key, raw", [
        ("model.kp_depth", "0"),
        ("model.res_ratio", "1/3"),
        ("model.backbone_widths", "8, 16"),
        ("model.num_keypoints", "5"),
        ("assign.scale_bounds", "64, 128, 256"),
        ("train.decay_epochs", "55, 45"),
        ("train.decay_epochs", "60"),
        ("infer.pre_nms_top_n", "50"),
        ("data.source", "lsp"),
        ("scene.max_height", "300"),
    ])
    def test_validation_errors(self, key, raw):
        cfg = Config()
        cfg.set(key, raw)
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_flat_round_trip(self):
        cfg = Config()
        cfg.set("model.res_ratio", "1/16")
        cfg.set("train.decay_epochs", "")
        cfg.set("model.heatmap", "false")
        back = Config.from_flat(cfg.to_flat())
        assert back.to_flat() == cfg.to_flat()
        assert back.model.res_ratio == 0.0625
        assert back.train.decay_epochs == ()
        assert back.model.heatmap is False

    def test_run_dir(self, tmp_path):
        cfg = Config()
        cfg.RUNS_DIR = tmp_path / "runs"
        assert cfg.run_dir("desk") == tmp_path / "runs" / "desk"
        assert (tmp_path / "runs" / "desk").is_dir()
        cfg.train.out_dir = str(tmp_path / "elsewhere")
        assert cfg.run_dir("desk") == tmp_path / "elsewhere"

    def test_env_selects_device(self, monkeypatch):
        monkeypatch.setenv("INSPOSE_DEVICE", "cpu")
        monkeypatch.setenv("INSPOSE_WORKERS", "3")
        cfg = Config()
        assert cfg.resolve_device() == "cpu"
        assert cfg.WORKERS == 3


class TestConfigFiles:

    def test_load_file_and_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# comment line\n"
            "model.kp_depth = 2   # trailing comment\n"
            "\n"
            "train.epochs = 10\n"
            "train.decay_epochs = 7, 9\n"
        )
        cfg = load_config(str(path), {"train.epochs": "12"})
        assert cfg.model.kp_depth == 2
        assert cfg.train.epochs == 12
        assert cfg.train.decay_epochs == (7, 9)

    def test_error_names_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("model.kp_depth = 2\nmodel.kp_depth = deep\n")
        with pytest.raises(ConfigError, match="bad.cfg:2"):
            load_config(str(path))

    def test_missing_equals(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("model.kp_depth 2\n")
        with pytest.raises(ConfigError, match=":1"):
            load_config(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.cfg"))

    def test_saved_file_loads_back(self, tiny_config, tmp_path):
        path = tmp_path / "saved.cfg"
        tiny_config.save(path)
        assert load_config(str(path)).to_flat() == tiny_config.to_flat()

    def test_ints_on_float_fields_load_back(self, tmp_path):
        cfg = Config()
        cfg.scene.max_height = 100
        cfg.train.lr = 1
        cfg.assign.scale_bounds = (32, 64, 128, 256)
        flat = cfg.to_flat()
        assert flat["scene.max_height"] == "100.0"
        assert flat["assign.scale_bounds"] == "32.0, 64.0, 128.0, 256.0"
        assert flat["train.decay_epochs"] == "45, 55"

        path = tmp_path / "ints.cfg"
        cfg.save(path)
        assert load_config(str(path)).to_flat() == flat

    @pytest.mark.parametrize("name", ["desk", "fast5", "overfit", "coco"])
    def test_shipped_configs_validate(self, name):
        from config import CONFIGS_DIR
        load_config(str(CONFIGS_DIR / f"{name}.cfg"))


class TestOverrideArgs:

    def test_both_forms(self):
        assert parse_override_args(["--model.kp_depth", "2", "--train.lr=0.02"]) == {
            "model.kp_depth": "2",
            "train.lr": "0.02",
        }

    def test_value_with_equals_sign(self):
        assert parse_override_args(["--data.coco_train_ann=a=b.json"]) == {"data.coco_train_ann": "a=b.json"}

    @pytest.mark.parametrize("tokens", [["--verbose"], ["model.kp_depth", "2"], ["--model.kp_depth"]])
    def test_rejects(self, tokens):
        with pytest.raises(ConfigError):
            parse_override_args(tokens)


class TestRegistry:

    def test_exit_codes(self):
        reg = CommandRegistry()
        reg.register("ok", lambda ctx: None)
        reg.register("three", lambda ctx: 3)
        reg.register("boom", lambda ctx: 1 / 0)

        def interrupted(ctx):
            raise KeyboardInterrupt

        reg.register("stop", interrupted)
        assert reg.handle_command(_ctx("ok")) == 0
        assert reg.handle_command(_ctx("three")) == 3
        assert reg.handle_command(_ctx("boom")) == 1
        assert reg.handle_command(_ctx("stop")) == 130
        assert reg.handle_command(_ctx("missing")) == 2

    def test_aliases_and_case(self):
        reg = CommandRegistry()
        reg.register("Eval", lambda ctx: 0, aliases=["EVALUATE"], module="evaluate")
        assert reg.get_command("eval").name == "eval"
        assert reg.get_command("evaluate").name == "eval"
        assert reg.get_command("EvAl").module == "evaluate"
        assert reg.get_command("score") is None

    def test_pipeline_error_is_a_failure(self, caplog):
        reg = CommandRegistry()

        def bad_config(ctx):
            raise ConfigError("model.kp_depth must be >= 1, got 0")

        reg.register("train", bad_config)
        assert reg.handle_command(_ctx("train")) == 1
        assert "ConfigError" in caplog.text and "kp_depth" in caplog.text

    def test_listing_is_sorted_with_first_doc_line(self):
        reg = CommandRegistry()

        def visualize(ctx):
            """Draw poses

            More text
            """

        reg.register("visualize", visualize, description=visualize.__doc__)
        reg.register("eval", lambda ctx: 0, description="Score results")
        assert [c.name for c in reg.list_commands()] == ["eval", "visualize"]
        assert reg.get_command("visualize").description == "Draw poses"


class TestModules:

    def test_load_registers_commands(self):
        loaded, failed = load_modules(_ctx(), ["train", "evaluate", "infer", "visualize"])
        assert loaded == ["train", "evaluate", "infer", "visualize"]
        assert failed == []
        for name in ("train", "eval", "evaluate", "infer", "visualize", "vis"):
            assert registry.get_command(name) is not None
        assert registry.get_command("eval").module == "evaluate"

    def test_unknown_module_fails_softly(self):
        loaded, failed = load_modules(_ctx(), ["infer", "nope"])
        assert loaded == ["infer"]
        assert [name for name, _ in failed] == ["nope"]

