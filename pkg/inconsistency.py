"""
不一致性检测：经由三维模型将邻近图像重投影到当前视角，计算不确定性门限内的
最小灰度差，提取二维变化区域，并通过多对比较消除歧义

重投影采用逆向映射：从目标视角发射光线与模型求交，再投影到源图像双线性采样。
"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from numba import njit, prange

from data_io import GrayImage
from errors import DimensionMismatch, NotEnoughImages
from geometry import (
    Bvh,
    CameraIntrinsics,
    Pose,
    TriangleMesh,
    back_project_pixels,
    cast_rays,
    pixel_grid,
    project_points,
    projection_matrix,
)
from logging_config import get_logger
from output_generator import debug_image_names, save_distance_image, save_mask_image
from schemas import InconsistencyParams, UncertaintyParams

logger = get_logger(__name__)


# ---------------------------------------------------------------------------
# 类型
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WarpedImage:
    """源图像在目标位姿下的重投影结果，无效像素灰度为 0"""
    image: GrayImage
    valid: np.ndarray

    def __post_init__(self) -> None:
        if self.valid.shape != self.image.shape:
            raise DimensionMismatch("有效掩码与图像尺寸不一致")


@dataclass(frozen=True)
class UncertaintyModel:
    """像素重投影不确定性 Σ 与马氏距离门限 τ²"""
    covariance: np.ndarray
    tau_squared: float

    def __post_init__(self) -> None:
        covariance = np.array(self.covariance, dtype=np.float64)
        if covariance.shape != (2, 2) or not np.allclose(covariance, covariance.T):
            raise ValueError("Σ 必须是 2×2 对称矩阵")
        if np.linalg.eigvalsh(covariance).min() <= 0:
            raise ValueError("Σ 必须正定")
        if not self.tau_squared > 0:
            raise ValueError("τ² 必须为正")
        covariance.setflags(write=False)
        object.__setattr__(self, "covariance", covariance)

    @classmethod
    def from_params(cls, params: Optional[UncertaintyParams] = None) -> "UncertaintyModel":
        params = params or UncertaintyParams()
        return cls(np.eye(2) * params.sigma_px ** 2, params.gate)

    @classmethod
    def isotropic(cls, sigma_px: float, tau_squared: float = 11.82) -> "UncertaintyModel":
        return cls(np.eye(2) * sigma_px ** 2, tau_squared)

    def gate_offsets(self) -> np.ndarray:
        """门限椭圆内的整数像素偏移 (dx, dy)，按马氏距离升序，中心在首位"""
        info = np.linalg.inv(self.covariance)
        reach = int(math.ceil(math.sqrt(self.tau_squared * np.linalg.eigvalsh(self.covariance).max())))
        dy, dx = np.mgrid[-reach:reach + 1, -reach:reach + 1]
        offsets = np.column_stack([dx.ravel(), dy.ravel()])
        distances = np.einsum("ni,ij,nj->n", offsets, info, offsets)
        inside = distances < self.tau_squared
        inside[np.all(offsets == 0, axis=1)] = True
        offsets, distances = offsets[inside], distances[inside]
        order = np.lexsort((offsets[:, 0], offsets[:, 1], distances))
        return np.ascontiguousarray(offsets[order], dtype=np.int64)


@dataclass(frozen=True)
class ChangeRegion2D:
    """
    图像中的二维变化区域

    mean 为成员像素坐标 (x, y) 的均值，covariance 为其总体协方差；
    support 为确认该区域的源图像索引。
    """
    mean: np.ndarray
    covariance: np.ndarray
    area: float
    image_index: int
    pixels: np.ndarray = field(repr=False)
    support: Tuple[int, ...] = ()

    @classmethod
    def from_pixels(cls, pixels: np.ndarray, image_index: int, support: Tuple[int, ...] = ()) -> "ChangeRegion2D":
        pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
        coords = pixels.astype(np.float64)
        mean = coords.mean(axis=0)
        centered = coords - mean
        covariance = centered.T @ centered / len(coords)
        return cls(
            mean=mean,
            covariance=0.5 * (covariance + covariance.T),
            area=float(len(pixels)),
            image_index=image_index,
            pixels=pixels,
            support=tuple(support),
        )


@dataclass(frozen=True)
class DestinationView:
    """目标视角的逐像素光线求交结果（每个目标视角只需计算一次）"""
    pose: Pose
    hit_points: np.ndarray
    hit: np.ndarray


@dataclass(frozen=True)
class PairComparison:
    """一对图像 (src → dst) 的比较结果"""
    dst_index: int
    src_index: int
    warped: WarpedImage
    distance: np.ndarray
    regions: List[ChangeRegion2D]


# ---------------------------------------------------------------------------
# 重投影
# ---------------------------------------------------------------------------

def cast_view(intrinsics: CameraIntrinsics, pose: Pose, bvh: Bvh) -> DestinationView:
    """从相机对每个像素中心发射光线并与模型求交"""
    directions = back_project_pixels(intrinsics, pose, pixel_grid(intrinsics))
    ts, ids = cast_rays(bvh, pose.translation, directions)
    hit = ids >= 0
    points = np.full(directions.shape, np.nan)
    points[hit] = pose.translation + ts[hit, None] * directions[hit]
    shape = (intrinsics.height, intrinsics.width)
    return DestinationView(pose=pose, hit_points=points, hit=hit.reshape(shape))


def reproject_image(
    src: GrayImage,
    T_src: Pose,
    T_dst: Pose,
    intrinsics: CameraIntrinsics,
    mesh: TriangleMesh,
    bvh: Bvh,
    view: Optional[DestinationView] = None,
    occlusion_tolerance: float = 0.01,
) -> WarpedImage:
    """
    将源图像经模型重投影到目标位姿

    Args:
        src: 源图像
        T_src: 源位姿
        T_dst: 目标位姿
        intrinsics: 共享内参
        mesh: 三维模型
        bvh: 模型的加速结构
        view: 预先计算的目标视角求交结果（为空时现场计算）
        occlusion_tolerance: 源视角二次求交的距离容差（米）

    Returns:
        WarpedImage；模型未命中、投影越界、深度非正或在源视角被遮挡的像素无效
    """
    if src.shape != (intrinsics.height, intrinsics.width):
        raise DimensionMismatch(f"源图像 {src.shape} 与内参尺寸不一致")
    if bvh.n_triangles != mesh.n_triangles:
        raise ValueError("BVH 与网格不匹配")
    if view is None or not np.array_equal(view.pose.matrix(), T_dst.matrix()):
        view = cast_view(intrinsics, T_dst, bvh)

    hit = view.hit.ravel()
    candidates = np.flatnonzero(hit)
    points = view.hit_points[candidates]

    pixels, depth = project_points(projection_matrix(intrinsics, T_src), points)
    ok = (depth > 0) & np.all(np.isfinite(pixels), axis=1)
    ok[ok] = intrinsics.contains(pixels[ok])

    # 源视角遮挡检查：源相机到交点的光线必须先到达该交点
    to_points = points[ok] - T_src.translation
    distances = np.linalg.norm(to_points, axis=1)
    ts, _ = cast_rays(bvh, T_src.translation, to_points / distances[:, None])
    visible = np.abs(ts - distances) <= occlusion_tolerance
    ok[np.flatnonzero(ok)[~visible]] = False

    valid = np.zeros(hit.shape, dtype=bool)
    valid[candidates[ok]] = True
    map_x = np.full(hit.shape, -1.0, dtype=np.float32)
    map_y = np.full(hit.shape, -1.0, dtype=np.float32)
    map_x[candidates[ok]] = pixels[ok, 0]
    map_y[candidates[ok]] = pixels[ok, 1]

    shape = src.shape
    warped = cv2.remap(
        src.data, map_x.reshape(shape), map_y.reshape(shape),
        interpolation=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE,
    )
    valid = valid.reshape(shape)
    warped[~valid] = 0
    return WarpedImage(image=GrayImage.from_array(warped), valid=valid)


# ---------------------------------------------------------------------------
# 不一致性距离
# ---------------------------------------------------------------------------

@njit(parallel=True, cache=True)
def _gated_min_difference(dst, warped, valid, offsets):
    h, w = dst.shape
    out = np.zeros((h, w), dtype=np.float64)
    for y in prange(h):
        for x in range(w):
            if not valid[y, x]:
                continue
            value = dst[y, x]
            best = np.inf
            for k in range(offsets.shape[0]):
                zx = x + offsets[k, 0]
                zy = y + offsets[k, 1]
                if zx < 0 or zx >= w or zy < 0 or zy >= h or not valid[zy, zx]:
                    continue
                d = abs(value - warped[zy, zx])
                if d < best:
                    best = d
                    if best == 0.0:
                        break
            out[y, x] = best
    return out


def inconsistency_distance(dst: GrayImage, warped: WarpedImage, uncertainty: UncertaintyModel) -> np.ndarray:
    """
    逐像素在门限椭圆内取最小灰度差

    Returns:
        (h, w) 浮点距离图，无效像素为 0
    """
    if dst.shape != warped.image.shape:
        raise DimensionMismatch(f"图像尺寸不一致: {dst.shape} vs {warped.image.shape}")
    return _gated_min_difference(
        dst.data.astype(np.float64),
        warped.image.data.astype(np.float64),
        np.ascontiguousarray(warped.valid),
        uncertainty.gate_offsets(),
    )


# ---------------------------------------------------------------------------
# 区域提取
# ---------------------------------------------------------------------------

def threshold_mask(distance: np.ndarray, params: InconsistencyParams) -> np.ndarray:
    """二值化后做开运算（先腐蚀后膨胀）"""
    mask = (distance > params.intensity_threshold).astype(np.uint8)
    size = 2 * params.kernel_radius + 1
    kernel = cv2.getStructuringElement(cv2.MORPH_RECT, (size, size))
    return cv2.morphologyEx(mask, cv2.MORPH_OPEN, kernel)


def extract_regions(
    distance: np.ndarray,
    params: Optional[InconsistencyParams] = None,
    image_index: int = 0,
) -> List[ChangeRegion2D]:
    """二值化、开运算、8 连通标记、面积过滤，返回各连通域的均值与协方差"""
    params = params or InconsistencyParams()
    opened = threshold_mask(distance, params)
    n_labels, labels, stats, _ = cv2.connectedComponentsWithStats(opened, connectivity=8)

    regions = []
    for label in range(1, n_labels):
        if stats[label, cv2.CC_STAT_AREA] < params.min_region_area:
            continue
        x0 = stats[label, cv2.CC_STAT_LEFT]
        y0 = stats[label, cv2.CC_STAT_TOP]
        w = stats[label, cv2.CC_STAT_WIDTH]
        h = stats[label, cv2.CC_STAT_HEIGHT]
        ys, xs = np.nonzero(labels[y0:y0 + h, x0:x0 + w] == label)
        regions.append(ChangeRegion2D.from_pixels(np.column_stack([xs + x0, ys + y0]), image_index))
    return regions


# ---------------------------------------------------------------------------
# 多对比较确认
# ---------------------------------------------------------------------------

def neighbor_indices(index: int, n_images: int, max_comparisons: int) -> List[int]:
    """按序列邻接选择邻居：i+1, i-1, i+2, i-2, ...，取前 m 个"""
    neighbors = []
    for offset in range(1, n_images):
        for j in (index + offset, index - offset):
            if 0 <= j < n_images and len(neighbors) < max_comparisons:
                neighbors.append(j)
    return neighbors


def required_support(n_pairs: int, params: InconsistencyParams) -> int:
    """确认所需的图像对数；比例部分不超过实际比较的对数，最少对数不降低"""
    return max(params.min_confirming_pairs, min(math.ceil(params.confirm_fraction * n_pairs), n_pairs))


def regions_agree(a: ChangeRegion2D, b: ChangeRegion2D, uncertainty: UncertaintyModel) -> bool:
    """两个区域的均值互相落在对方的 τ² 门限内"""
    delta = a.mean - b.mean
    for region in (a, b):
        gate = region.covariance + uncertainty.covariance
        if float(delta @ np.linalg.solve(gate, delta)) >= uncertainty.tau_squared:
            return False
    return True


def compare_pair(
    dst_index: int,
    src_index: int,
    images: Sequence[GrayImage],
    poses: Sequence[Pose],
    intrinsics: CameraIntrinsics,
    mesh: TriangleMesh,
    bvh: Bvh,
    params: InconsistencyParams,
    uncertainty: UncertaintyModel,
    view: Optional[DestinationView] = None,
) -> PairComparison:
    """比较一对图像：将源图像重投影到目标视角并提取候选区域"""
    warped = reproject_image(
        images[src_index], poses[src_index], poses[dst_index], intrinsics, mesh, bvh,
        view=view, occlusion_tolerance=params.occlusion_tolerance,
    )
    distance = inconsistency_distance(images[dst_index], warped, uncertainty)
    regions = extract_regions(distance, params, dst_index)
    return PairComparison(dst_index, src_index, warped, distance, regions)


def _save_pair_debug(comparison: PairComparison, params: InconsistencyParams, debug_dir: Path) -> None:
    names = debug_image_names(comparison.dst_index, comparison.src_index)
    save_distance_image(comparison.distance, debug_dir / names["distance"])
    save_mask_image(threshold_mask(comparison.distance, params) > 0, debug_dir / names["mask"])


def _find(parent: List[int], k: int) -> int:
    while parent[k] != k:
        parent[k] = parent[parent[k]]
        k = parent[k]
    return k


def confirm_regions(
    index: int,
    images: Sequence[GrayImage],
    poses: Sequence[Pose],
    intrinsics: CameraIntrinsics,
    mesh: TriangleMesh,
    bvh: Bvh,
    params: Optional[InconsistencyParams] = None,
    uncertainty: Optional[UncertaintyModel] = None,
    view: Optional[DestinationView] = None,
    debug_dir: Optional[str | Path] = None,
) -> List[ChangeRegion2D]:
    """
    多对比较确认图像 index 中的变化区域

    图像 index 与至多 m 个序列邻居比较，每对产生候选区域；候选区域被足够多的图像对
    （含自身）中的区域互相门限匹配时确认。相互匹配的已确认候选合并成员像素。
    邻居数少于 min_confirming_pairs 时仍执行比较（含调试输出），但不确认任何区域。

    Raises:
        NotEnoughImages: 图像少于 2 幅
    """
    params = params or InconsistencyParams()
    uncertainty = uncertainty or UncertaintyModel.from_params()
    n_images = len(images)
    if n_images < 2:
        raise NotEnoughImages(f"至少需要 2 幅图像，实际 {n_images}")
    if len(poses) != n_images:
        raise ValueError("图像与位姿数量不一致")

    neighbors = neighbor_indices(index, n_images, params.max_comparisons)
    if len(neighbors) < params.max_comparisons:
        logger.warning(
            f"图像 {index} 仅有 {len(neighbors)} 个邻居，比较数 m={params.max_comparisons} 被截断",
            extra={"context": {"image": index, "neighbors": len(neighbors)}},
        )
    required = required_support(len(neighbors), params)
    if required > len(neighbors):
        logger.warning(
            f"图像 {index} 确认所需图像对数 {required} 超过比较数 {len(neighbors)}，不确认任何区域",
            extra={"context": {"image": index, "required": required, "neighbors": len(neighbors)}},
        )

    if view is None:
        view = cast_view(intrinsics, poses[index], bvh)
    debug_path = Path(debug_dir) if debug_dir is not None else None

    candidates: List[Tuple[int, ChangeRegion2D]] = []
    for pair, j in enumerate(neighbors):
        comparison = compare_pair(index, j, images, poses, intrinsics, mesh, bvh, params, uncertainty, view)
        if debug_path is not None:
            _save_pair_debug(comparison, params, debug_path)
        candidates.extend((pair, region) for region in comparison.regions)
    if required > len(neighbors):
        return []

    n = len(candidates)
    links: Dict[int, List[int]] = {k: [] for k in range(n)}
    for a in range(n):
        for b in range(a + 1, n):
            if candidates[a][0] != candidates[b][0] and regions_agree(candidates[a][1], candidates[b][1], uncertainty):
                links[a].append(b)
                links[b].append(a)

    confirmed = []
    for k in range(n):
        pairs = {candidates[k][0]} | {candidates[o][0] for o in links[k]}
        if len(pairs) >= required:
            confirmed.append(k)

    parent = list(range(n))
    confirmed_set = set(confirmed)
    for k in confirmed:
        for o in links[k]:
            if o in confirmed_set:
                parent[_find(parent, k)] = _find(parent, o)

    clusters: Dict[int, List[int]] = {}
    for k in confirmed:
        clusters.setdefault(_find(parent, k), []).append(k)

    regions = []
    for members in clusters.values():
        pixels = np.unique(np.vstack([candidates[k][1].pixels for k in members]), axis=0)
        support = tuple(sorted({neighbors[candidates[k][0]] for k in members}))
        regions.append(ChangeRegion2D.from_pixels(pixels, index, support))
    regions.sort(key=lambda r: (-r.area, float(r.mean[0]), float(r.mean[1])))

    logger.debug(
        f"图像 {index} - 候选区域: {n}, 确认区域: {len(regions)}",
        extra={"context": {"image": index, "candidates": n, "confirmed": len(regions), "required": required}},
    )
    return regions
