"""
低运动图像过滤：稀疏角点检测 + 金字塔 Lucas-Kanade 跟踪

相邻图像的中位位移低于阈值时视为重复视角并丢弃；无法跟踪（场景变化过大）的图像保留。
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence

import cv2
import numpy as np

from data_io import GrayImage
from errors import DimensionMismatch, ImageTooSmall
from logging_config import get_logger
from schemas import MotionFilterParams

logger = get_logger(__name__)

RESIDUAL_FRACTION = 0.2
MIN_SCORE = 1e-6
MIN_MEAN_DIFFERENCE = 1.0


@dataclass(frozen=True)
class Feature:
    """角点：位置 (x, y) 与结构张量最小特征值"""
    position: np.ndarray
    score: float


@dataclass(frozen=True)
class TrackResult:
    feature: Feature
    displacement: np.ndarray
    tracked: bool


def _as_float(image: GrayImage) -> np.ndarray:
    return image.data.astype(np.float32)


def detect_features(image: GrayImage, params: Optional[MotionFilterParams] = None) -> List[Feature]:
    """
    检测角点（最小特征值响应 + 非极大值抑制）

    Returns:
        按响应降序排列的角点，相互间距不小于 2×patch_radius

    Raises:
        ImageTooSmall: 图像不大于 2×patch_radius
    """
    params = params or MotionFilterParams()
    r = params.patch_radius
    if image.width <= 2 * r or image.height <= 2 * r:
        raise ImageTooSmall(f"图像 {image.width}x{image.height} 小于特征块 {2 * r + 1}")

    score = cv2.cornerMinEigenVal(_as_float(image), blockSize=3, ksize=3)
    peak = float(score.max())
    threshold = max(params.quality_level * peak, MIN_SCORE)
    local_max = score >= cv2.dilate(score, np.ones((3, 3), np.uint8))

    candidates = local_max & (score > threshold)
    candidates[:r, :] = False
    candidates[-r:, :] = False
    candidates[:, :r] = False
    candidates[:, -r:] = False
    ys, xs = np.nonzero(candidates)
    if len(xs) == 0:
        return []

    values = score[ys, xs]
    order = np.lexsort((xs, ys, -values))
    min_spacing_sq = (2 * r) ** 2
    accepted: List[Feature] = []
    positions = np.empty((0, 2))
    for k in order:
        p = np.array([xs[k], ys[k]], dtype=np.float64)
        if len(positions) and np.min(np.sum((positions - p) ** 2, axis=1)) < min_spacing_sq:
            continue
        accepted.append(Feature(position=p, score=float(values[k])))
        positions = np.vstack([positions, p])
        if len(accepted) >= params.max_features:
            break
    return accepted


def track_features(
    a: GrayImage,
    b: GrayImage,
    features: Sequence[Feature],
    params: Optional[MotionFilterParams] = None,
) -> List[TrackResult]:
    """
    由粗到细跟踪 a 中的角点到 b

    Raises:
        DimensionMismatch: 两幅图像尺寸不同
    """
    params = params or MotionFilterParams()
    if a.shape != b.shape:
        raise DimensionMismatch(f"图像尺寸不一致: {a.shape} vs {b.shape}")
    if not features:
        return []

    r = params.patch_radius
    window = (2 * r + 1, 2 * r + 1)
    p0 = np.array([f.position for f in features], dtype=np.float32).reshape(-1, 1, 2)
    p1, status, _ = cv2.calcOpticalFlowPyrLK(
        a.data, b.data, p0, None,
        winSize=window,
        maxLevel=params.pyramid_levels - 1,
        criteria=(cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, 30, 0.01),
    )
    p0 = p0.reshape(-1, 2).astype(np.float64)
    p1 = p1.reshape(-1, 2).astype(np.float64)
    status = status.reshape(-1).astype(bool)

    fa = _as_float(a)
    fb = _as_float(b)
    results = []
    for feature, start, end, ok in zip(features, p0, p1, status):
        displacement = end - start
        tracked = bool(ok) and np.all(np.isfinite(end))
        if tracked:
            inside = r <= end[0] <= a.width - 1 - r and r <= end[1] <= a.height - 1 - r
            tracked = inside and float(np.linalg.norm(displacement)) <= params.max_displacement
        if tracked:
            patch_a = cv2.getRectSubPix(fa, window, (float(start[0]), float(start[1])))
            patch_b = cv2.getRectSubPix(fb, window, (float(end[0]), float(end[1])))
            rms = float(np.sqrt(np.mean((patch_a - patch_b) ** 2)))
            dynamic_range = max(float(patch_a.max() - patch_a.min()), 1.0)
            tracked = rms <= RESIDUAL_FRACTION * dynamic_range
        results.append(TrackResult(feature=feature, displacement=displacement, tracked=bool(tracked)))
    return results


def _has_moved(
    reference: GrayImage,
    reference_features: Sequence[Feature],
    candidate: GrayImage,
    params: MotionFilterParams,
) -> bool:
    if not reference_features:
        difference = np.mean(np.abs(reference.data.astype(np.int16) - candidate.data.astype(np.int16)))
        return bool(difference >= MIN_MEAN_DIFFERENCE)

    tracks = track_features(reference, candidate, reference_features, params)
    tracked = [t for t in tracks if t.tracked]
    if len(tracked) / len(tracks) < params.min_tracked_fraction:
        return True
    median = float(np.median([np.linalg.norm(t.displacement) for t in tracked]))
    return median >= params.displacement_threshold


def filter_low_movement(
    sequence: Sequence[GrayImage],
    params: Optional[MotionFilterParams] = None,
) -> List[int]:
    """
    贪心过滤低运动图像

    保留第一幅；之后每幅与最近保留的图像比较，中位位移 ≥ 阈值或跟踪比例过低时保留；
    最后一幅总是保留。

    Returns:
        严格递增的保留索引
    """
    params = params or MotionFilterParams()
    if not sequence:
        return []

    kept = [0]
    reference = sequence[0]
    reference_features = detect_features(reference, params)
    last = len(sequence) - 1
    for i in range(1, len(sequence)):
        candidate = sequence[i]
        if candidate.shape != reference.shape:
            raise DimensionMismatch(f"第 {i} 幅图像尺寸 {candidate.shape} 与序列不一致")
        if i == last or _has_moved(reference, reference_features, candidate, params):
            kept.append(i)
            reference = candidate
            reference_features = detect_features(candidate, params)

    logger.info(
        f"低运动过滤完成 - 保留: {len(kept)}/{len(sequence)}",
        extra={"context": {"kept": len(kept), "total": len(sequence)}},
    )
    return kept
