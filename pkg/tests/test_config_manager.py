"""
配置管理器的测试：导出回读、未知键、预设、交叉校验与摘要。
"""

import pytest

from sceneslots_core.config_manager import CONFIG_ENV_VAR, PRESETS, ConfigError, ConfigManager


@pytest.fixture(autouse=True)
def isolated_cwd(tmp_path, monkeypatch):
    """不让仓库根目录的 config.ini 或环境变量影响结果。"""
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(CONFIG_ENV_VAR, raising=False)


class TestLoading:
    def test_defaults_without_file(self):
        manager = ConfigManager()
        assert manager.preset == "desk"
        assert manager.model.num_slots == 4
        assert manager.train.betas == (0.9, 0.999)

    def test_file_and_overrides(self, tmp_path, tiny_config_text):
        path = tmp_path / "tiny.ini"
        path.write_text(tiny_config_text, encoding="utf-8")
        manager = ConfigManager(path, overrides={"Runtime": {"seed": 9}, "Train": {"jitter": False}})
        assert manager.model.slot_dim == 4
        assert manager.runtime.seed == 9
        assert manager.train.jitter is False
        assert manager.model.extractor_channels == (2, 2, 2)

    def test_env_var_selects_file(self, tmp_path, tiny_config_text, monkeypatch):
        path = tmp_path / "from_env.ini"
        path.write_text(tiny_config_text, encoding="utf-8")
        monkeypatch.setenv(CONFIG_ENV_VAR, str(path))
        assert ConfigManager().model.num_slots == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ConfigManager(tmp_path / "absent.ini")

    def test_preset(self):
        manager = ConfigManager(preset="clevr567")
        assert manager.preset == "clevr567"
        assert manager.model.num_slots == 8
        assert manager.scenegen.max_objects == 7
        assert set(PRESETS) == {"desk", "clevr567", "room_chair", "room_diverse"}
        with pytest.raises(ConfigError):
            ConfigManager(preset="kitchen")


class TestValidation:
    """未知节/键、类型错误与跨字段约束。"""

    @pytest.mark.parametrize("text", [
        "[Nope]\nx = 1\n",
        "[Model]\nnum_slotz = 3\n",
        "[Model]\nnum_slots = three\n",
        "[Train]\njitter = maybe\n",
        "not an ini file",
    ])
    def test_rejects_bad_text(self, text):
        with pytest.raises(ConfigError):
            ConfigManager.from_text(text)

    @pytest.mark.parametrize("overrides", [
        {"Train": {"patch_size": 200}},
        {"Train": {"coarse_resolution": 40}},
        {"SceneGen": {"min_objects": 4, "max_objects": 2}},
        {"Runtime": {"precision": "float16"}},
        {"Model": {"encoder_variant": "wide"}},
        {"Model": {"skip_layer": 5}},
        {"Train": {"adversarial": True, "patch_size": 32}},
        {"SceneGen": {"shapes": "sphere,torus"}},
        {"Eval": {"samples": 0}},
    ])
    def test_cross_field_errors(self, overrides):
        with pytest.raises(ConfigError):
            ConfigManager(overrides=overrides)


class TestDumpAndDigest:
    def test_dump_roundtrip(self, tiny_config):
        text = tiny_config.dump()
        again = ConfigManager.from_text(text)
        assert again.as_dict() == tiny_config.as_dict()
        assert again.dump() == text

    def test_model_digest_covers_model_only(self, tiny_config, tiny_config_text):
        changed_eval = ConfigManager.from_text(tiny_config_text.replace("seeds = 0\nsamples = 8", "seeds = 0\nsamples = 4"))
        assert changed_eval.model_digest() == tiny_config.model_digest()
        changed_model = ConfigManager.from_text(tiny_config_text.replace("slot_dim = 4", "slot_dim = 6"))
        assert changed_model.model_digest() != tiny_config.model_digest()

    def test_dataset_digest_depends_on_seed(self, tiny_config):
        assert tiny_config.dataset_digest(0) == tiny_config.dataset_digest(0)
        assert tiny_config.dataset_digest(0) != tiny_config.dataset_digest(1)

    def test_logging_config(self, tiny_config):
        log_config = tiny_config.get_logging_config()
        assert log_config["level"] == "WARNING"
        assert "%(message)s" in log_config["log_format"]
