"""
检测流程编排：数据加载 → 不一致性 → 三维变化，三个阶段分别计时
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from change_3d import ChangeRegion3D, estimate_change_regions, group_regions, prune_near_camera
from data_io import SurveyDataset
from geometry import build_bvh, projection_matrix
from inconsistency import ChangeRegion2D, UncertaintyModel, cast_view, confirm_regions, neighbor_indices
from logging_config import get_logger, log_performance
from schemas import DetectionConfig, StageTimings

logger = get_logger(__name__)


@dataclass
class DetectionResult:
    """
    一次检测的结果

    regions 与 regions_2d 中的图像索引均为数据集中的帧编号。
    """
    regions: List[ChangeRegion3D]
    regions_2d: Dict[int, List[ChangeRegion2D]] = field(default_factory=dict)
    timings: StageTimings = field(default_factory=StageTimings)


def _to_frame_indices(region: ChangeRegion3D, frame_indices: Sequence[int]) -> ChangeRegion3D:
    return ChangeRegion3D(
        mean=region.mean,
        covariance=region.covariance,
        support=tuple(frame_indices[i] for i in region.support),
        pixel_area=region.pixel_area,
    )


def run_detection(
    dataset: SurveyDataset,
    config: Optional[DetectionConfig] = None,
    kept: Optional[Sequence[int]] = None,
    debug_dir: Optional[str | Path] = None,
) -> DetectionResult:
    """
    端到端检测

    Args:
        dataset: 巡检数据集
        config: 检测参数
        kept: 低运动过滤后保留的图像位置（为空时使用全部图像）
        debug_dir: 保存逐对距离图与掩码的目录

    Returns:
        DetectionResult
    """
    config = config or DetectionConfig()
    params = config.inconsistency
    uncertainty = UncertaintyModel.from_params(config.uncertainty)
    context = {"root": str(dataset.root), "images": len(kept) if kept is not None else len(dataset)}

    with log_performance("数据加载", logger, context) as loading:
        survey = dataset.subset(kept) if kept is not None else dataset
        images = survey.load_images()
        mesh = survey.load_mesh()
        bvh = build_bvh(mesh)
    intrinsics = survey.intrinsics
    poses = survey.poses
    frame_indices = [frame.index for frame in survey.frames]

    with log_performance("不一致性", logger, {**context, "max_comparisons": params.max_comparisons}) as inconsistencies:
        confirmed: Dict[int, List[ChangeRegion2D]] = {}
        comparisons = 0
        for i, pose in enumerate(poses):
            view = cast_view(intrinsics, pose, bvh)
            confirmed[i] = confirm_regions(
                i, images, poses, intrinsics, mesh, bvh, params, uncertainty,
                view=view, debug_dir=debug_dir,
            )
            comparisons += len(neighbor_indices(i, len(images), params.max_comparisons))

    with log_performance("三维变化", logger, context) as change:
        projections = {i: projection_matrix(intrinsics, pose) for i, pose in enumerate(poses)}
        all_regions = [region for i in sorted(confirmed) for region in confirmed[i]]
        groups = group_regions(all_regions, projections, uncertainty)
        regions = estimate_change_regions(groups, projections, uncertainty)
        regions = prune_near_camera(regions, poses, config.change_3d.min_distance)

    timings = StageTimings(
        data_loading=loading.elapsed,
        inconsistencies=inconsistencies.elapsed,
        change_3d=change.elapsed,
        images=len(images),
        comparisons=comparisons,
    )
    logger.info(
        f"检测完成 - 二维区域: {len(all_regions)}, 三维区域: {len(regions)}",
        extra={"context": {**context, "regions_2d": len(all_regions), "regions_3d": len(regions)}},
    )
    return DetectionResult(
        regions=[_to_frame_indices(r, frame_indices) for r in regions],
        regions_2d={frame_indices[i]: found for i, found in confirmed.items()},
        timings=timings,
    )
