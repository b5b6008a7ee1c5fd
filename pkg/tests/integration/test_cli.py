"""
命令行集成测试
"""
import json

import pytest

from errors import NotEnoughImages
from main import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from schemas import load_preset
from synthetic import make_survey
from tests.conftest import PRESETS_DIR

pytestmark = pytest.mark.integration


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    """通过 generate 命令生成的带立方体数据集"""
    root = tmp_path_factory.mktemp("cli")
    dataset = root / "survey"
    assert main(["generate", "--preset", "wall-scan", "--change", "cube", "--out", str(dataset), "--seed", "1"]) == EXIT_OK
    return dataset


@pytest.fixture(scope="module")
def detected(generated, tmp_path_factory):
    out = tmp_path_factory.mktemp("detect")
    assert main(["detect", "--dataset", str(generated), "--out", str(out), "--threads", "2"]) == EXIT_OK
    return out


class TestCommands:
    """各子命令测试"""

    def test_generate_layout(self, generated):
        """测试生成的数据集目录"""
        assert (generated / "model.obj").exists()
        assert (generated / "intrinsics.txt").exists()
        assert len(list(generated.glob("*.pgm"))) == 7
        assert len(list(generated.glob("*.pose.txt"))) == 7
        assert (generated / "ground_truth.json").exists()

    def test_info(self, generated, capsys):
        assert main(["info", "--dataset", str(generated)]) == EXIT_OK
        output = capsys.readouterr().out
        assert "images: 7" in output
        assert "ground truth changes: 1" in output

    def test_filter_writes_manifest(self, generated, capsys):
        assert main(["filter", "--dataset", str(generated)]) == EXIT_OK
        with open(generated / "kept.json", "r", encoding="utf-8") as f:
            manifest = json.load(f)
        assert manifest == {"kept": [0, 1, 2, 3, 4, 5, 6], "total": 7}
        assert "kept 7/7" in capsys.readouterr().out

    def test_filter_duplicate_heavy_dataset(self, tmp_path):
        """测试相机几乎静止的数据集：清单只保留不超过 20% 的图像"""
        preset = load_preset("wall-scan", PRESETS_DIR)
        path = preset.path.model_copy(update={
            "waypoints": 50,
            "start": [-2.5, -0.05, 0.0],
            "end": [-2.5, 0.05, 0.0],
            "look_at": [[4.0, -0.05, 0.0], [4.0, 0.05, 0.0]],
        })
        scene = preset.scene.model_copy(update={"noise_sigma": 2.0})
        dataset = tmp_path / "slow_survey"
        make_survey(scene, path, preset.camera, dataset, seed=0)

        assert main(["filter", "--dataset", str(dataset)]) == EXIT_OK
        with open(dataset / "kept.json", "r", encoding="utf-8") as f:
            manifest = json.load(f)
        assert manifest["total"] == 50
        assert len(manifest["kept"]) <= 10
        assert manifest["kept"][0] == 0
        assert manifest["kept"][-1] == 49

    def test_detect_outputs(self, detected):
        """测试检测输出文件"""
        for name in ("changes.json", "changes.ply", "timing.json"):
            assert (detected / name).exists()
        with open(detected / "changes.json", "r", encoding="utf-8") as f:
            assert len(json.load(f)) >= 1

    def test_detect_prints_timing_table(self, generated, tmp_path, capsys):
        manifest = tmp_path / "kept.json"
        manifest.write_text(json.dumps({"kept": [1, 2, 3, 4, 5], "total": 7}), encoding="utf-8")
        code = main([
            "detect", "--dataset", str(generated), "--out", str(tmp_path / "out"),
            "--manifest", str(manifest), "--max-comparisons", "2", "--debug-images",
        ])
        assert code == EXIT_OK
        output = capsys.readouterr().out
        assert "Data Loading | Inconsistencies | 3D Change" in output
        assert any((tmp_path / "out" / "debug").glob("dist_*.pgm"))

    def test_detect_two_images_clamps_comparisons(self, generated, tmp_path, caplog):
        """测试只有 2 幅图像时 m 被截断且正常退出"""
        manifest = tmp_path / "kept.json"
        manifest.write_text(json.dumps({"kept": [2, 3], "total": 7}), encoding="utf-8")
        code = main(["detect", "--dataset", str(generated), "--out", str(tmp_path / "out"), "--manifest", str(manifest)])
        assert code == EXIT_OK
        assert (tmp_path / "out" / "changes.json").exists()
        assert "被截断" in caplog.text

    def test_evaluate(self, generated, detected, capsys):
        assert main(["evaluate", "--dataset", str(generated), "--report", str(detected / "changes.json")]) == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary["matched"] == 1
        assert summary["n_ground_truth"] == 1


class TestExitCodes:
    """退出码测试"""

    def test_help(self):
        assert main(["--help"]) == EXIT_OK

    @pytest.mark.parametrize("argv", [
        [],
        ["explode"],
        ["detect", "--dataset", "x"],
        ["generate", "--out", "x", "--preset", "spiral"],
        ["detect", "--dataset", "x", "--out", "y", "--max-comparisons", "many"],
        ["filter", "--dataset", "x", "--search-radius", "wide"],
        ["filter", "--dataset", "x", "--quality-level", "high"],
        ["detect", "--dataset", "x", "--out", "y", "--confidence", "sure"],
        ["detect", "--dataset", "x", "--out", "y", "--search-radius", "8"],
    ])
    def test_usage_errors(self, argv):
        assert main(argv) == EXIT_USAGE

    def test_validation_error(self, generated, tmp_path, capsys):
        code = main(["detect", "--dataset", str(generated), "--out", str(tmp_path), "--max-comparisons", "0"])
        assert code == EXIT_USAGE
        assert capsys.readouterr().err.startswith("error:")

    def test_missing_dataset(self, tmp_path, capsys):
        code = main(["detect", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path / "out")])
        assert code == EXIT_FAILURE
        assert "error:" in capsys.readouterr().err

    def test_output_not_writable(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("", encoding="utf-8")
        code = main(["generate", "--out", str(blocker / "survey"), "--waypoints", "2"])
        assert code == EXIT_FAILURE

    def test_manifest_total_mismatch(self, generated, tmp_path):
        manifest = tmp_path / "kept.json"
        manifest.write_text(json.dumps({"kept": [0, 1], "total": 3}), encoding="utf-8")
        code = main(["detect", "--dataset", str(generated), "--out", str(tmp_path / "out"), "--manifest", str(manifest)])
        assert code == EXIT_FAILURE

    def test_evaluate_without_ground_truth(self, tmp_path):
        report = tmp_path / "changes.json"
        report.write_text("[]", encoding="utf-8")
        assert main(["evaluate", "--dataset", str(tmp_path), "--report", str(report)]) == EXIT_FAILURE

    def test_detection_error_is_failure(self, generated, tmp_path, mocker, capsys):
        """测试检测阶段的错误映射为退出码 1"""
        mocker.patch("main.run_detection", side_effect=NotEnoughImages("至少需要 2 幅图像，实际 1"))
        code = main(["detect", "--dataset", str(generated), "--out", str(tmp_path / "out")])
        assert code == EXIT_FAILURE
        assert "至少需要 2 幅图像" in capsys.readouterr().err

    def test_threads_flag_forwarded(self, generated, tmp_path, mocker):
        set_threads = mocker.patch("main.set_worker_threads", return_value=3)
        assert main(["filter", "--dataset", str(generated), "--out", str(tmp_path / "kept.json"), "--threads", "3"]) == EXIT_OK
        set_threads.assert_called_once_with(3)

    @pytest.mark.parametrize("flags", [["--search-radius", "0"], ["--quality-level", "0"]])
    def test_filter_flag_validation(self, generated, tmp_path, flags):
        code = main(["filter", "--dataset", str(generated), "--out", str(tmp_path / "kept.json")] + flags)
        assert code == EXIT_USAGE

    def test_confidence_validation(self, generated, tmp_path):
        code = main(["detect", "--dataset", str(generated), "--out", str(tmp_path / "out"), "--confidence", "1.5"])
        assert code == EXIT_USAGE

    @pytest.mark.parametrize("text", ["{not json", json.dumps({"kept": [3, 1], "total": 7})])
    def test_invalid_manifest_is_failure(self, generated, tmp_path, capsys, text):
        """测试清单无法解析或字段非法时为数据错误（退出码 1）"""
        manifest = tmp_path / "kept.json"
        manifest.write_text(text, encoding="utf-8")
        code = main(["detect", "--dataset", str(generated), "--out", str(tmp_path / "out"), "--manifest", str(manifest)])
        assert code == EXIT_FAILURE
        assert capsys.readouterr().err.startswith("error:")

    def test_unparseable_config_is_failure(self, generated, tmp_path):
        config = tmp_path / "detection.json"
        config.write_text("{not json", encoding="utf-8")
        code = main(["detect", "--dataset", str(generated), "--out", str(tmp_path / "out"), "--config", str(config)])
        assert code == EXIT_FAILURE
