"""
评估测试
"""
from types import SimpleNamespace

import numpy as np

from evaluation import evaluate_detections, format_sweep_table
from schemas import SweepRow


def at(*mean):
    return SimpleNamespace(mean=np.array(mean, dtype=float))


class TestEvaluateDetections:
    """检测结果评估测试"""

    def test_match_and_spurious(self):
        """测试匹配与误检计数"""
        regions = [at(0.1, 0.0, 0.0), at(0.0, 2.0, 0.0), at(0.0, 0.0, 0.45)]
        summary = evaluate_detections(regions, [[0.0, 0.0, 0.0]])
        assert summary.n_regions == 3
        assert summary.matched == 1
        assert summary.spurious == 1
        assert summary.nearest_distances[0] == 0.1

    def test_no_regions(self):
        summary = evaluate_detections([], [[0.0, 0.0, 0.0]])
        assert summary.matched == 0
        assert summary.spurious == 0
        assert summary.nearest_distances == [None]

    def test_no_ground_truth(self):
        """测试无变化场景中所有区域都是误检"""
        summary = evaluate_detections([at(1.0, 1.0, 1.0)], [])
        assert summary.spurious == 1
        assert summary.n_ground_truth == 0

    def test_nearest_region_too_far(self):
        summary = evaluate_detections([at(0.4, 0.0, 0.0)], [[0.0, 0.0, 0.0]], match_radius=0.3)
        assert summary.matched == 0
        assert summary.spurious == 0


def test_format_sweep_table():
    rows = [
        SweepRow(max_comparisons=2, confirmed_2d=9, regions=3, matched=1, spurious=2, inconsistencies_seconds=0.5),
        SweepRow(max_comparisons=4, confirmed_2d=5, regions=1, matched=1, spurious=0, inconsistencies_seconds=1.25),
    ]
    lines = format_sweep_table(rows).splitlines()
    assert lines[0].startswith("m | confirmed 2D")
    assert [int(line.split("|")[0]) for line in lines[1:]] == [2, 4]
    assert lines[2].split("|")[-1].strip() == "1.250"
