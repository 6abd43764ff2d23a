"""
命令行入口的测试：退出码、stderr 上的 JSON 错误与完整的 生成→训练→评估→渲染→编辑 流程。
"""

import json

import pytest

from sceneslots_core.cli import EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, main
from sceneslots_core.config_manager import ConfigManager
from sceneslots_core.image_io import read_labels
from sceneslots_core.run_state import RunState
from sceneslots_core.tensor import precision


@pytest.fixture(autouse=True)
def restore_precision():
    """main 会按配置修改全局精度。"""
    with precision("float32"):
        yield


@pytest.fixture
def config_path(tmp_path, tiny_config_text):
    path = tmp_path / "tiny.ini"
    path.write_text(tiny_config_text, encoding="utf-8")
    return path


def last_error(capsys) -> dict:
    lines = [line for line in capsys.readouterr().err.splitlines() if line.startswith("{")]
    return json.loads(lines[-1])


class TestCliBasics:
    def test_config_dump(self, capsys, config_path, tiny_config):
        assert main(["--config", str(config_path), "config", "dump"]) == EXIT_OK
        dumped = ConfigManager.from_text(capsys.readouterr().out)
        assert dumped.as_dict() == tiny_config.as_dict()

    def test_global_flags_after_subcommand(self, capsys, config_path):
        assert main(["config", "dump", "--config", str(config_path), "--seed", "17"]) == EXIT_OK
        assert ConfigManager.from_text(capsys.readouterr().out).runtime.seed == 17

    def test_missing_required_argument(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["train"])
        assert excinfo.value.code == EXIT_USAGE
        assert last_error(capsys)["error"] == "UsageError"

    def test_views_and_orbit_are_exclusive(self, capsys, tmp_path):
        with pytest.raises(SystemExit) as excinfo:
            main(["render", "--ckpt", "a", "--scene", "b", "--out", str(tmp_path), "--views", "0", "--orbit", "8"])
        assert excinfo.value.code == EXIT_USAGE

    def test_orbit_must_be_positive(self, capsys, config_path, tmp_path):
        code = main(["--config", str(config_path), "render", "--ckpt", str(tmp_path / "a.ckpt"), "--scene",
                     str(tmp_path), "--out", str(tmp_path / "out"), "--orbit", "0"])
        assert code == EXIT_VALIDATION
        assert last_error(capsys)["error"] == "ValueError"

    def test_missing_dataset_is_validation_error(self, capsys, config_path, tmp_path):
        code = main(["--config", str(config_path), "train", "--data", str(tmp_path / "nothing")])
        assert code == EXIT_VALIDATION
        error = last_error(capsys)
        assert error["exit_code"] == EXIT_VALIDATION
        assert error["error"] == "DatasetValidationError"

    def test_unknown_config_key(self, capsys, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[Model]\nslots = 3\n", encoding="utf-8")
        assert main(["--config", str(path), "config", "dump"]) == EXIT_VALIDATION
        assert last_error(capsys)["error"] == "ConfigError"

    def test_gradcheck_tensor_suite(self, config_path):
        assert main(["--config", str(config_path), "gradcheck", "--module", "tensor", "--trials", "1"]) == EXIT_OK


@pytest.mark.slow
class TestEndToEnd:
    """极小配置上跑通全部子命令。"""

    def test_full_pipeline(self, tmp_path, config_path):
        base = ["--config", str(config_path)]
        data, run, renders = tmp_path / "data", tmp_path / "run", tmp_path / "renders"
        assert main(base + ["gen-data", "--out", str(data)]) == EXIT_OK
        assert (data / "manifest.json").is_file()

        assert main(base + ["train", "--data", str(data), "--out", str(run)]) == EXIT_OK
        ckpt = run / "checkpoints" / "final.ckpt"
        assert ckpt.is_file()
        log = [json.loads(line) for line in (run / "train_log.jsonl").read_text(encoding="utf-8").splitlines()]
        assert sum(1 for r in log if r["event"] == "step") == 3

        report_path = tmp_path / "report.json"
        assert main(base + ["eval", "--data", str(data), "--ckpt", str(ckpt), "--out", str(report_path)]) == EXIT_OK
        report = json.loads(report_path.read_text(encoding="utf-8"))
        assert report["num_scenes"] == 2
        assert -1.0 <= report["aggregate"]["ari"]["mean"] <= 1.0
        assert json.loads((run / RunState.REPORT_FILENAME).read_text(encoding="utf-8"))["num_scenes"] == 2

        scene = data / "scene_00000"
        assert main(base + ["render", "--ckpt", str(ckpt), "--scene", str(scene), "--out", str(renders),
                            "--orbit", "8"]) == EXIT_OK
        assert len(list((renders / "rgb").glob("*.png"))) == 8
        labels = sorted((renders / "labels").glob("*.png"))
        assert len(labels) == 8
        assert read_labels(labels[0]).max() <= 2

        plan = tmp_path / "plan.json"
        plan.write_text(json.dumps({"edits": [{"op": "move", "slot": 1, "translation": [0.2, 0.0, 0.0]},
                                              {"op": "remove", "slot": 2}]}), encoding="utf-8")
        edited = tmp_path / "edited"
        assert main(base + ["edit", "--ckpt", str(ckpt), "--scene", str(scene), "--plan", str(plan),
                            "--out", str(edited)]) == EXIT_OK
        summary = json.loads((edited / "edit.json").read_text(encoding="utf-8"))
        assert summary["removed"] == [False, True]

    def test_resume_with_wrong_digest(self, tmp_path, config_path, tiny_config_text, capsys):
        base = ["--config", str(config_path)]
        data, run = tmp_path / "data", tmp_path / "run"
        assert main(base + ["gen-data", "--out", str(data), "--num-scenes", "1"]) == EXIT_OK
        assert main(base + ["train", "--data", str(data), "--out", str(run)]) == EXIT_OK
        other = tmp_path / "other.ini"
        other.write_text(tiny_config_text.replace("slot_dim = 4", "slot_dim = 6"), encoding="utf-8")
        code = main(["--config", str(other), "train", "--data", str(data), "--out", str(tmp_path / "again"),
                     "--resume", str(run / "checkpoints" / "final.ckpt")])
        assert code == EXIT_VALIDATION
        assert last_error(capsys)["error"] == "CheckpointError"
