"""
检测结果评估：与真值变化物体比较，以及比较数 m 的扫描实验
"""
from typing import Any, List, Optional, Sequence

import numpy as np

from data_io import SurveyDataset
from logging_config import get_logger
from pipeline import run_detection
from schemas import DetectionConfig, EvaluationSummary, SweepRow

logger = get_logger(__name__)

DEFAULT_M_VALUES = (2, 3, 4, 5, 6)


def evaluate_detections(
    regions: Sequence[Any],
    centroids: Sequence[Sequence[float]],
    match_radius: float = 0.3,
    spurious_radius: float = 0.5,
) -> EvaluationSummary:
    """
    Args:
        regions: 具有 mean 属性的三维区域（ChangeRegion3D 或报告记录）
        centroids: 真值变化物体中心
        match_radius: 真值被视为找到的最大距离（米）
        spurious_radius: 区域被视为误检的最小距离（米）
    """
    means = np.array([np.asarray(r.mean, dtype=np.float64) for r in regions]).reshape(-1, 3)
    truth = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    if len(means) and len(truth):
        distances = np.linalg.norm(means[:, None, :] - truth[None, :, :], axis=2)
    else:
        distances = np.zeros((len(means), len(truth)))

    nearest: List[Optional[float]] = [
        float(distances[:, k].min()) if len(means) else None for k in range(len(truth))
    ]
    matched = sum(1 for d in nearest if d is not None and d <= match_radius)
    if len(truth):
        spurious = int(np.sum(distances.min(axis=1) > spurious_radius))
    else:
        spurious = len(means)
    return EvaluationSummary(
        n_regions=len(means),
        n_ground_truth=len(truth),
        matched=matched,
        spurious=spurious,
        nearest_distances=nearest,
    )


def sweep_max_comparisons(
    dataset: SurveyDataset,
    centroids: Sequence[Sequence[float]],
    config: Optional[DetectionConfig] = None,
    m_values: Sequence[int] = DEFAULT_M_VALUES,
    spurious_radius: float = 0.5,
) -> List[SweepRow]:
    """对每个 m 运行一次检测并统计确认区域与误检数"""
    config = config or DetectionConfig()
    rows = []
    for m in m_values:
        inconsistency = config.inconsistency.model_copy(update={"max_comparisons": m})
        result = run_detection(dataset, config.model_copy(update={"inconsistency": inconsistency}))
        summary = evaluate_detections(result.regions, centroids, spurious_radius=spurious_radius)
        rows.append(SweepRow(
            max_comparisons=m,
            confirmed_2d=sum(len(found) for found in result.regions_2d.values()),
            regions=summary.n_regions,
            matched=summary.matched,
            spurious=summary.spurious,
            inconsistencies_seconds=result.timings.inconsistencies,
        ))
        logger.info(
            f"m={m} - 三维区域: {summary.n_regions}, 误检: {summary.spurious}",
            extra={"context": {"m": m, "spurious": summary.spurious}},
        )
    return rows


def format_sweep_table(rows: Sequence[SweepRow]) -> str:
    lines = ["m | confirmed 2D | regions | matched | spurious | inconsistencies (s)"]
    for row in rows:
        lines.append(
            f"{row.max_comparisons} | {row.confirmed_2d:12d} | {row.regions:7d} | "
            f"{row.matched:7d} | {row.spurious:8d} | {row.inconsistencies_seconds:.3f}"
        )
    return "\n".join(lines)
