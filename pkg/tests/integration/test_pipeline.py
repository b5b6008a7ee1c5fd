"""
端到端检测流程集成测试
"""
import numpy as np
import pytest

from data_io import GROUND_TRUTH_FILE
from evaluation import evaluate_detections, sweep_max_comparisons
from geometry import project_points, projection_matrix
from pipeline import run_detection
from schemas import CameraSpec, DetectionConfig, InconsistencyParams, load_preset
from synthetic import change_centroids, load_ground_truth, make_survey
from tests.conftest import PRESETS_DIR

pytestmark = pytest.mark.integration


@pytest.fixture(scope="module")
def cube_result(cube_survey):
    return run_detection(cube_survey)


class TestDetection:
    """合成数据集上的检测测试"""

    def test_no_change_soundness(self, no_change_survey):
        """测试无变化场景不输出任何三维区域"""
        result = run_detection(no_change_survey)
        assert result.regions == []

    def test_cube_discovered(self, cube_survey, cube_result):
        """测试发现仅在巡检中存在的立方体"""
        centroid = np.zeros(3)
        found = [r for r in cube_result.regions if np.linalg.norm(r.mean - centroid) <= 0.3]
        assert found

        region = found[0]
        views_inside = 0
        for frame in cube_survey.frames:
            P = projection_matrix(cube_survey.intrinsics, frame.pose)
            pixel, depth = project_points(P, region.mean.reshape(1, 3))
            if depth[0] <= 0:
                continue
            u, v = np.rint(pixel[0]).astype(int)
            for region_2d in cube_result.regions_2d.get(frame.index, []):
                if np.any(np.all(region_2d.pixels == [u, v], axis=1)):
                    views_inside += 1
                    break
        assert views_inside >= 2

    def test_cube_has_no_spurious_regions(self, cube_survey, cube_result):
        ground_truth = load_ground_truth(cube_survey.root / GROUND_TRUTH_FILE)
        summary = evaluate_detections(cube_result.regions, change_centroids(ground_truth))
        assert summary.matched == 1
        assert summary.spurious == 0

    def test_timings(self, cube_result):
        timings = cube_result.timings
        assert timings.images == 7
        assert timings.comparisons == 28
        assert timings.data_loading > 0
        assert timings.inconsistencies > 0
        assert timings.change_3d >= 0

    def test_kept_subset_reports_frame_indices(self, cube_survey):
        """测试保留子集时支持索引为数据集帧编号"""
        kept = [1, 2, 3, 4, 5]
        result = run_detection(cube_survey, kept=kept)
        assert result.timings.images == 5
        assert set(result.regions_2d) == set(kept)
        for region in result.regions:
            assert set(region.support) <= set(kept)

    def test_debug_images(self, cube_survey, temp_dir):
        config = DetectionConfig(inconsistency=InconsistencyParams(max_comparisons=2))
        run_detection(cube_survey, config, kept=[2, 3, 4], debug_dir=temp_dir)
        # 位置索引：保留子集中的第 1 幅与第 0、2 幅比较
        assert (temp_dir / "dist_001_000.pgm").exists()
        assert (temp_dir / "mask_001_002.pgm").exists()

    def test_rotate_in_place_has_no_baseline(self, tmp_path):
        """测试原地旋转（零基线）无法定位变化：结果为空且不报错"""
        preset = load_preset("rotate-in-place", PRESETS_DIR)
        scene = preset.scene.model_copy(update={"changes": [preset.change_cube]})
        dataset = make_survey(scene, preset.path, preset.camera, tmp_path, seed=0)
        result = run_detection(dataset)
        assert result.regions == []


@pytest.mark.slow
class TestSweeps:
    """比较数 m 的扫描实验"""

    def test_more_comparisons_fewer_false_positives(self, tmp_path, wall_scan_preset):
        """位姿扰动下 m=4 的误检不多于 m=2"""
        scene = wall_scan_preset.scene.model_copy(update={
            "changes": [wall_scan_preset.change_cube],
            "rotation_sigma": float(np.radians(0.5)),
            "translation_sigma": 0.01,
        })
        spurious = {2: 0, 4: 0}
        confirmed = {2: 0, 4: 0}
        for seed in range(5):
            dataset = make_survey(scene, wall_scan_preset.path, wall_scan_preset.camera, tmp_path / str(seed), seed=seed)
            rows = sweep_max_comparisons(dataset, [np.zeros(3)], m_values=(2, 4))
            for row in rows:
                spurious[row.max_comparisons] += row.spurious
                confirmed[row.max_comparisons] += row.confirmed_2d
        assert spurious[4] <= spurious[2]
        assert confirmed[4] <= confirmed[2]

    @pytest.fixture(scope="class")
    def large_survey(self, tmp_path_factory, wall_scan_preset):
        """1280×960 带立方体的数据集，已预热 JIT 编译"""
        camera = CameraSpec(fx=800.0, fy=800.0, cx=640.0, cy=480.0, width=1280, height=960)
        scene = wall_scan_preset.scene.model_copy(update={"changes": [wall_scan_preset.change_cube]})
        dataset = make_survey(scene, wall_scan_preset.path, camera, tmp_path_factory.mktemp("large"), seed=0)
        run_detection(dataset.subset([0, 1]), DetectionConfig(inconsistency=InconsistencyParams(max_comparisons=1)))
        return dataset

    def test_inconsistency_cost_grows_with_batch_size(self, large_survey):
        """1280×960 下不一致性阶段耗时随图像数 n=2..6 单调增长"""
        timings = [run_detection(large_survey.subset(range(n))).timings for n in range(2, 7)]
        seconds = [t.inconsistencies for t in timings]
        assert all(b > a for a, b in zip(seconds, seconds[1:]))
        for t in timings:
            assert t.inconsistencies / t.comparisons < 10 * 0.281

    def test_inconsistency_cost_grows_with_m(self, large_survey):
        """1280×960 下不一致性阶段耗时随 m 单调增长"""
        rows = sweep_max_comparisons(large_survey, [np.zeros(3)], m_values=(2, 3, 4, 5, 6))
        seconds = [row.inconsistencies_seconds for row in rows]
        assert all(b > a for a, b in zip(seconds, seconds[1:]))
        comparisons = [7 * m for m in (2, 3, 4, 5, 6)]
        per_comparison = [s / n for s, n in zip(seconds, comparisons)]
        assert max(per_comparison) < 10 * 0.281
