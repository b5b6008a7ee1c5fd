"""
三维变化区域估计：DLT 三角化 + sigma 点传播不确定性

各视图中确认的二维区域先按两视图三角化的重投影门限分组，每组的 5 个 sigma 点
按编号跨视图配对三角化，得到三维均值与协方差。
"""
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import BehindCamera, ChangeDetectionError, DegenerateGeometry, NonPSD
from geometry import Pose, ProjectionMatrix, skew
from inconsistency import ChangeRegion2D, UncertaintyModel
from logging_config import get_logger

logger = get_logger(__name__)

DEGENERACY_RATIO = 1e-9
SIGMA_SCALE = np.sqrt(2.0)
# 无偏 unscented 权重（κ=0）：中心点权重 0，其余四点各 1/4
SIGMA_WEIGHTS = np.array([0.0, 0.25, 0.25, 0.25, 0.25])


@dataclass(frozen=True)
class TriangulationProblem:
    """齐次最小二乘 A X = 0 的输入：n 个像素与对应投影矩阵"""
    pixels: np.ndarray
    projections: Tuple[ProjectionMatrix, ...]

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        if len(pixels) < 2:
            raise DegenerateGeometry(f"三角化至少需要 2 个视图，实际 {len(pixels)}")
        if len(pixels) != len(self.projections):
            raise ValueError("像素与投影矩阵数量不一致")
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "projections", tuple(self.projections))

    def matrix(self) -> np.ndarray:
        """堆叠 S(x̄)·P 得到 3n×4 矩阵"""
        return np.vstack([
            skew(np.array([x, y, 1.0])) @ P.matrix for (x, y), P in zip(self.pixels, self.projections)
        ])

    def block_weights(self) -> np.ndarray:
        """每块的尺度权重 1 / (‖x̄‖·‖P‖)，使各视图在 SVD 中贡献相当"""
        return np.array([
            1.0 / (np.linalg.norm([x, y, 1.0]) * np.linalg.norm(P.matrix))
            for (x, y), P in zip(self.pixels, self.projections)
        ])


@dataclass(frozen=True)
class TriangulationResult:
    point: np.ndarray
    residual: float
    singular_values: np.ndarray


@dataclass(frozen=True)
class ChangeRegion3D:
    """三维变化区域：均值（米）、协方差（米²）、支持图像与像素面积总和"""
    mean: np.ndarray
    covariance: np.ndarray
    support: Tuple[int, ...]
    pixel_area: float


def triangulate(observations: Sequence[Tuple[Sequence[float], ProjectionMatrix]]) -> TriangulationResult:
    """
    SVD 求解 A X = 0

    Args:
        observations: (像素, 投影矩阵) 列表，至少 2 个

    Raises:
        DegenerateGeometry: 最小两个奇异值过于接近，或解位于无穷远
        BehindCamera: 解在某个视图中深度非正
    """
    problem = TriangulationProblem(
        np.array([pixel for pixel, _ in observations], dtype=np.float64),
        tuple(P for _, P in observations),
    )
    A = problem.matrix() * np.repeat(problem.block_weights(), 3)[:, None]
    _, s, vt = np.linalg.svd(A)
    if s[-2] - s[-1] < DEGENERACY_RATIO * s[0]:
        raise DegenerateGeometry(f"深度无法确定: 奇异值 {s[-2]:.3e}, {s[-1]:.3e}")
    solution = vt[-1]
    if abs(solution[3]) < 1e-12 * np.linalg.norm(solution[:3]):
        raise DegenerateGeometry("三角化结果位于无穷远")
    point = solution[:3] / solution[3]
    for P in problem.projections:
        depth = float(P.matrix[2] @ np.append(point, 1.0))
        if depth <= 0:
            raise BehindCamera(f"三角化点 {point.tolist()} 在相机后方（深度 {depth:.3g}）")
    return TriangulationResult(point=point, residual=float(s[-1]), singular_values=s)


def _psd_eigen(covariance: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    covariance = np.asarray(covariance, dtype=np.float64).reshape(2, 2)
    covariance = 0.5 * (covariance + covariance.T)
    eigvals, eigvecs = np.linalg.eigh(covariance)
    scale = max(1.0, float(np.max(np.abs(eigvals))))
    if eigvals.min() < -1e-12 * scale:
        raise NonPSD(f"协方差不是半正定矩阵: 最小特征值 {eigvals.min():.3e}")
    return np.clip(eigvals, 0.0, None), eigvecs


def _canonical_factor(covariance: np.ndarray) -> np.ndarray:
    """特征值降序、每个特征向量最大分量取正的平方根因子"""
    eigvals, eigvecs = _psd_eigen(covariance)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    for j in range(2):
        if eigvecs[np.argmax(np.abs(eigvecs[:, j])), j] < 0:
            eigvecs[:, j] = -eigvecs[:, j]
    return eigvecs * np.sqrt(eigvals)


def _cholesky_factor(covariance: np.ndarray) -> np.ndarray:
    eigvals, eigvecs = _psd_eigen(covariance)
    try:
        return np.linalg.cholesky(0.5 * (covariance + np.transpose(covariance)))
    except np.linalg.LinAlgError:
        # 奇异矩阵退回特征分解因子
        return eigvecs * np.sqrt(eigvals)


def sigma_points(
    mean: Sequence[float],
    covariance: np.ndarray,
    method: Literal["cholesky", "canonical"] = "cholesky",
) -> np.ndarray:
    """
    5 个 sigma 点：均值，均值 ± √2·L 的两列

    Args:
        mean: 像素均值
        covariance: 2×2 半正定协方差
        method: cholesky 用 Cholesky 因子；canonical 用符号规范化的特征分解因子（跨视图配对）

    Returns:
        (5, 2)，顺序为 mean, +L₁, +L₂, -L₁, -L₂

    Raises:
        NonPSD: 协方差不是半正定矩阵
    """
    mean = np.asarray(mean, dtype=np.float64).reshape(2)
    covariance = np.asarray(covariance, dtype=np.float64).reshape(2, 2)
    factor = _canonical_factor(covariance) if method == "canonical" else _cholesky_factor(covariance)
    spread = SIGMA_SCALE * factor.T
    return np.vstack([mean, mean + spread, mean - spread])


def sigma_covariance(points: np.ndarray, mean: Optional[np.ndarray] = None) -> np.ndarray:
    """按 unscented 权重计算 sigma 点的样本协方差"""
    points = np.asarray(points, dtype=np.float64)
    center = points.mean(axis=0) if mean is None else np.asarray(mean, dtype=np.float64)
    centered = points - center
    covariance = (SIGMA_WEIGHTS[:, None] * centered).T @ centered
    return 0.5 * (covariance + covariance.T)


def _gate_score(region: ChangeRegion2D, pixel: np.ndarray, uncertainty: UncertaintyModel) -> float:
    delta = pixel - region.mean
    return float(delta @ np.linalg.solve(region.covariance + uncertainty.covariance, delta))


def _reprojection_scores(
    point: np.ndarray,
    regions: Sequence[ChangeRegion2D],
    projections: Mapping[int, ProjectionMatrix],
    uncertainty: UncertaintyModel,
) -> List[float]:
    scores = []
    for region in regions:
        h = projections[region.image_index].matrix @ np.append(point, 1.0)
        if h[2] <= 0:
            scores.append(np.inf)
        else:
            scores.append(_gate_score(region, h[:2] / h[2], uncertainty))
    return scores


def _group_score(
    regions: Sequence[ChangeRegion2D],
    projections: Mapping[int, ProjectionMatrix],
    uncertainty: UncertaintyModel,
) -> float:
    """组内均值三角化后在各视图的最大门限得分；三角化失败为 inf"""
    try:
        result = triangulate([(r.mean, projections[r.image_index]) for r in regions])
    except ChangeDetectionError:
        return np.inf
    return max(_reprojection_scores(result.point, regions, projections, uncertainty))


def group_regions(
    regions: Sequence[ChangeRegion2D],
    projections: Mapping[int, ProjectionMatrix],
    uncertainty: Optional[UncertaintyModel] = None,
) -> List[List[ChangeRegion2D]]:
    """
    跨视图分组

    两个不同图像的区域在两视图三角化后，重投影都落在各自 τ² 门限内时建立连接；
    按得分升序贪心合并，每组每幅图像至多一个区域，且合并后的组整体仍满足门限。

    Returns:
        至少包含两幅图像的分组，组内按图像索引排序
    """
    uncertainty = uncertainty or UncertaintyModel.from_params()
    regions = list(regions)

    links = []
    for a, b in combinations(range(len(regions)), 2):
        if regions[a].image_index == regions[b].image_index:
            continue
        score = _group_score([regions[a], regions[b]], projections, uncertainty)
        if score < uncertainty.tau_squared:
            links.append((score, a, b))
    links.sort()

    group_of = list(range(len(regions)))
    members: Dict[int, List[int]] = {k: [k] for k in range(len(regions))}
    for _, a, b in links:
        ga, gb = group_of[a], group_of[b]
        if ga == gb:
            continue
        merged = members[ga] + members[gb]
        images = [regions[k].image_index for k in merged]
        if len(set(images)) != len(images):
            continue
        if _group_score([regions[k] for k in merged], projections, uncertainty) >= uncertainty.tau_squared:
            continue
        for k in members[gb]:
            group_of[k] = ga
        members[ga] = merged
        del members[gb]

    groups = []
    for indices in members.values():
        if len(indices) < 2:
            continue
        groups.append(sorted((regions[k] for k in indices), key=lambda r: r.image_index))
    groups.sort(key=lambda g: (g[0].image_index, float(g[0].mean[0]), float(g[0].mean[1])))

    logger.debug(
        f"跨视图分组 - 区域: {len(regions)}, 连接: {len(links)}, 分组: {len(groups)}",
        extra={"context": {"regions": len(regions), "links": len(links), "groups": len(groups)}},
    )
    return groups


def estimate_change_regions(
    groups: Sequence[Sequence[ChangeRegion2D]],
    projections: Mapping[int, ProjectionMatrix],
    uncertainty: Optional[UncertaintyModel] = None,
) -> List[ChangeRegion3D]:
    """
    逐组三角化 sigma 点得到三维变化区域

    第 k 个 sigma 点跨视图配对三角化；三维均值为 5 个三角化点的平均，协方差为其
    unscented 样本协方差。三角化失败或均值重投影超出某个支持视图门限的组被丢弃。
    """
    uncertainty = uncertainty or UncertaintyModel.from_params()
    estimates = []
    for group in groups:
        images = [r.image_index for r in group]
        if len(set(images)) < 2:
            logger.warning(f"分组 {images} 少于 2 幅图像，跳过")
            continue
        points = [sigma_points(r.mean, r.covariance, method="canonical") for r in group]
        try:
            triangulated = np.vstack([
                triangulate([(pts[k], projections[r.image_index]) for pts, r in zip(points, group)]).point
                for k in range(len(SIGMA_WEIGHTS))
            ])
        except ChangeDetectionError as e:
            logger.warning(
                f"分组 {images} 三角化失败，已丢弃: {e}",
                extra={"context": {"images": images, "error": str(e)}},
            )
            continue

        mean = triangulated.mean(axis=0)
        scores = _reprojection_scores(mean, group, projections, uncertainty)
        if max(scores) >= uncertainty.tau_squared:
            logger.warning(
                f"分组 {images} 均值重投影超出门限，已丢弃",
                extra={"context": {"images": images, "scores": [round(s, 3) for s in scores]}},
            )
            continue

        estimates.append(ChangeRegion3D(
            mean=mean,
            covariance=sigma_covariance(triangulated, mean),
            support=tuple(sorted(images)),
            pixel_area=float(sum(r.area for r in group)),
        ))
    return estimates


def prune_near_camera(
    regions: Sequence[ChangeRegion3D],
    poses: Mapping[int, Pose] | Sequence[Pose],
    min_distance: float,
) -> List[ChangeRegion3D]:
    """剔除均值距任一支持相机中心小于 min_distance 的区域"""
    if min_distance < 0:
        raise ValueError("min_distance 不能为负")
    kept = []
    for region in regions:
        distances = [float(np.linalg.norm(region.mean - poses[i].translation)) for i in region.support]
        if distances and min(distances) < min_distance:
            logger.info(
                f"剔除近相机区域 - 距离 {min(distances):.3f} 米",
                extra={"context": {"mean": region.mean.tolist(), "support": list(region.support)}},
            )
            continue
        kept.append(region)
    return kept
