"""
输出生成器测试
"""
import json

import numpy as np

from change_3d import ChangeRegion3D
from data_io import load_pgm, load_ply_points
from output_generator import (
    debug_image_names,
    format_timing_table,
    generate_output_files,
    save_distance_image,
    save_mask_image,
    save_timing,
)
from schemas import StageTimings


def make_region(mean, support=(0, 1, 2)):
    return ChangeRegion3D(
        mean=np.asarray(mean, dtype=float),
        covariance=np.diag([0.01, 0.02, 0.03]),
        support=tuple(support),
        pixel_area=512.0,
    )


class TestSaveTiming:
    """阶段耗时保存测试"""

    def test_save_timing(self, temp_dir):
        """测试保存耗时 JSON"""
        timings = StageTimings(data_loading=0.5, inconsistencies=2.25, change_3d=0.125, images=7, comparisons=22)
        output_path = temp_dir / "subdir" / "timing.json"

        save_timing(timings, output_path)

        assert output_path.exists()
        with open(output_path, "r", encoding="utf-8") as f:
            data = json.load(f)
        assert data["inconsistencies"] == 2.25
        assert data["comparisons"] == 22

    def test_format_timing_table(self):
        """测试三列耗时表"""
        table = format_timing_table(StageTimings(data_loading=0.5, inconsistencies=2.25, change_3d=0.125))
        header, row = table.splitlines()
        assert header == "Data Loading | Inconsistencies | 3D Change"
        assert [float(v) for v in row.split("|")] == [0.5, 2.25, 0.125]


class TestDebugImages:
    """调试图像测试"""

    def test_debug_image_names(self):
        names = debug_image_names(3, 12)
        assert names == {"distance": "dist_003_012.pgm", "mask": "mask_003_012.pgm"}

    def test_save_distance_image(self, temp_dir):
        """测试距离图截断到 8 位"""
        distance = np.array([[0.0, 12.4], [300.0, -5.0]])
        path = temp_dir / "dist.pgm"
        save_distance_image(distance, path)
        assert load_pgm(path).data.tolist() == [[0, 12], [255, 0]]

    def test_save_mask_image(self, temp_dir):
        path = temp_dir / "mask.pgm"
        save_mask_image(np.array([[True, False]]), path)
        assert load_pgm(path).data.tolist() == [[255, 0]]


class TestGenerateOutputFiles:
    """输出文件生成测试"""

    def test_generate_output_files(self, temp_dir):
        """测试生成所有输出文件"""
        regions = [make_region([1.0, 0.0, 0.0]), make_region([0.0, 2.0, 0.0], support=(4, 5))]
        output_dir = temp_dir / "output"
        files = generate_output_files(regions, output_dir, timings=StageTimings(images=7))

        assert output_dir.exists()
        assert set(files) == {"changes_json", "changes_ply", "timing"}
        assert files["changes_json"].name == "changes.json"
        assert files["changes_ply"].name == "changes.ply"
        assert files["timing"].name == "timing.json"

        with open(files["changes_json"], "r", encoding="utf-8") as f:
            report = json.load(f)
        assert [r["support"] for r in report] == [[0, 1, 2], [4, 5]]
        assert report[0]["pixel_area"] == 512.0
        assert load_ply_points(files["changes_ply"]).shape == (324, 3)

    def test_generate_output_files_without_timing(self, temp_dir):
        """测试不写耗时文件"""
        files = generate_output_files([], temp_dir)
        assert "timing" not in files
        with open(files["changes_json"], "r", encoding="utf-8") as f:
            assert json.load(f) == []
        assert load_ply_points(files["changes_ply"]).shape == (0, 3)

    def test_ellipsoid_scale(self, temp_dir):
        """测试椭球按 n_sigma 缩放"""
        region = ChangeRegion3D(np.zeros(3), np.eye(3) * 0.04, (0, 1), 10.0)
        files = generate_output_files([region], temp_dir, n_sigma=2.0)
        points = load_ply_points(files["changes_ply"])
        np.testing.assert_allclose(np.linalg.norm(points, axis=1), 0.4, atol=1e-6)
