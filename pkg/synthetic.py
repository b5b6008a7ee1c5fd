"""
合成巡检数据：房间网格 + 长方体物体，沿相机路径光线投射渲染灰度图像，
输出完整数据集目录与真值变化记录
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from pydantic import ValidationError
from scipy.spatial.transform import Rotation

from data_io import (
    GROUND_TRUTH_FILE,
    INTRINSICS_FILE,
    MODEL_FILE,
    GrayImage,
    SurveyDataset,
    load_survey,
    save_intrinsics,
    save_obj,
    save_pgm,
    save_pose_file,
)
from errors import CameraOutsideRoom, DataFormatError, ObjectOutsideRoom
from geometry import (
    Bvh,
    CameraIntrinsics,
    Pose,
    TriangleMesh,
    back_project_pixels,
    build_bvh,
    cast_rays,
    look_at,
    pixel_grid,
)
from logging_config import get_logger, log_function_performance
from schemas import (
    BoxObject,
    CameraSpec,
    GroundTruthChange,
    GroundTruthFile,
    PathSpec,
    SceneSpec,
)

logger = get_logger(__name__)

# 长方体 8 个顶点的符号与 12 个外向三角形
_BOX_SIGNS = np.array([
    [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
    [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
], dtype=np.float64)
_BOX_TRIANGLES = np.array([
    [0, 3, 2], [0, 2, 1],   # -z
    [4, 5, 6], [4, 6, 7],   # +z
    [0, 1, 5], [0, 5, 4],   # -y
    [3, 7, 6], [3, 6, 2],   # +y
    [0, 4, 7], [0, 7, 3],   # -x
    [1, 2, 6], [1, 6, 5],   # +x
], dtype=np.int64)
# 墙面顺序 -x, +x, -y, +y, -z, +z；反转长方体的绕序使法向朝内
_ROOM_TRIANGLES = np.vstack([_BOX_TRIANGLES[2 * p:2 * p + 2] for p in (4, 5, 2, 3, 0, 1)])[:, ::-1]


@dataclass(frozen=True)
class Scene:
    """模型网格（不含变化物体）、巡检网格（含变化物体）与变化物体中心"""
    model_mesh: TriangleMesh
    survey_mesh: TriangleMesh
    change_centroids: List[np.ndarray]
    spec: SceneSpec


def intrinsics_from_spec(camera: CameraSpec) -> CameraIntrinsics:
    return CameraIntrinsics(camera.fx, camera.fy, camera.cx, camera.cy, camera.width, camera.height)


def box_mesh(center: Sequence[float], half_extents: Sequence[float], albedo: int = 250) -> TriangleMesh:
    """轴对齐长方体，三角形法向朝外"""
    vertices = np.asarray(center, dtype=np.float64) + _BOX_SIGNS * np.asarray(half_extents, dtype=np.float64)
    return TriangleMesh(vertices, _BOX_TRIANGLES, np.full(12, albedo))


def room_mesh(room_size: Sequence[float], wall_albedo: Sequence[int]) -> TriangleMesh:
    """以原点为中心的房间，六面墙法向朝内"""
    vertices = _BOX_SIGNS * (np.asarray(room_size, dtype=np.float64) / 2.0)
    albedo = [value for value in wall_albedo for _ in range(2)]
    return TriangleMesh(vertices, _ROOM_TRIANGLES, np.asarray(albedo))


def _check_inside(box: BoxObject, half_room: np.ndarray) -> None:
    low = np.asarray(box.center) - np.asarray(box.half_extents)
    high = np.asarray(box.center) + np.asarray(box.half_extents)
    if np.any(low <= -half_room) or np.any(high >= half_room):
        raise ObjectOutsideRoom(f"物体 center={box.center} half_extents={box.half_extents} 超出房间或与墙面重叠")


def build_scene(spec: SceneSpec) -> Scene:
    """
    构建模型与巡检网格

    Raises:
        ObjectOutsideRoom: 物体超出房间或与墙面重叠
    """
    half_room = np.asarray(spec.room_size) / 2.0
    for box in [*spec.objects, *spec.changes]:
        _check_inside(box, half_room)

    room = room_mesh(spec.room_size, spec.wall_albedo)
    model_parts = [room] + [box_mesh(b.center, b.half_extents, b.albedo) for b in spec.objects]
    change_parts = [box_mesh(b.center, b.half_extents, b.albedo) for b in spec.changes]
    model = TriangleMesh.merge(model_parts)
    survey = TriangleMesh.merge(model_parts + change_parts) if change_parts else model
    return Scene(
        model_mesh=model,
        survey_mesh=survey,
        change_centroids=[np.asarray(b.center, dtype=np.float64) for b in spec.changes],
        spec=spec,
    )


def _check_camera(mesh: TriangleMesh, pose: Pose) -> None:
    low, high = mesh.bounds()
    if np.any(pose.translation <= low) or np.any(pose.translation >= high):
        raise CameraOutsideRoom(f"相机中心 {pose.translation.tolist()} 不在房间内")


def shade(mesh: TriangleMesh, points: np.ndarray, triangle_ids: np.ndarray, texture_cell: float, checker_gain: float) -> np.ndarray:
    """反照率乘以世界坐标棋盘格（只用三角形所在平面内的两个坐标）"""
    axes = mesh.dominant_axes()[triangle_ids]
    cells = np.floor(points / texture_cell).astype(np.int64)
    parity = (cells.sum(axis=1) - cells[np.arange(len(cells)), axes]) % 2
    albedo = mesh.albedo[triangle_ids].astype(np.float64)
    return np.where(parity == 1, albedo * checker_gain, albedo)


@log_function_performance("渲染")
def render(
    mesh: TriangleMesh,
    intrinsics: CameraIntrinsics,
    pose: Pose,
    noise_sigma: float = 0.0,
    seed: int | np.random.Generator = 0,
    bvh: Optional[Bvh] = None,
    texture_cell: float = 0.5,
    checker_gain: float = 0.5,
) -> GrayImage:
    """
    渲染灰度图像：最近交点的反照率乘棋盘格，未命中为 0

    Args:
        mesh: 场景网格
        intrinsics: 相机内参
        pose: 相机位姿
        noise_sigma: 加性高斯噪声 σ（为 0 时不加噪声）
        seed: 噪声随机种子或生成器
        bvh: 预先构建的 BVH
        texture_cell: 棋盘格边长（米）
        checker_gain: 暗格相对亮度

    Raises:
        CameraOutsideRoom: 相机中心不在网格包围盒内
    """
    _check_camera(mesh, pose)
    bvh = bvh or build_bvh(mesh)
    directions = back_project_pixels(intrinsics, pose, pixel_grid(intrinsics))
    ts, ids = cast_rays(bvh, pose.translation, directions)
    hit = ids >= 0

    values = np.zeros(len(directions))
    points = pose.translation + ts[hit, None] * directions[hit]
    values[hit] = shade(mesh, points, ids[hit], texture_cell, checker_gain)
    image = values.reshape(intrinsics.height, intrinsics.width)

    if noise_sigma > 0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        image = image + rng.normal(0.0, noise_sigma, image.shape)
    return GrayImage.from_array(np.clip(np.rint(image), 0, 255))


def render_depth(mesh: TriangleMesh, bvh: Bvh, intrinsics: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """逐像素光线距离（米），未命中为 inf"""
    directions = back_project_pixels(intrinsics, pose, pixel_grid(intrinsics))
    ts, _ = cast_rays(bvh, pose.translation, directions)
    return ts.reshape(intrinsics.height, intrinsics.width)


def camera_path(path: PathSpec) -> List[Pose]:
    """
    生成相机路径

    wall-scan: 相机中心从 start 线性移动到 end，注视点同步在 look_at 首尾之间插值；
    rotate-in-place: 相机中心固定在 start，注视点在 look_at 首尾之间扫过。
    """
    start = np.asarray(path.start, dtype=np.float64)
    end = np.asarray(path.end, dtype=np.float64)
    first = np.asarray(path.look_at[0], dtype=np.float64)
    last = np.asarray(path.look_at[-1], dtype=np.float64)
    poses = []
    for k in range(path.waypoints):
        s = k / (path.waypoints - 1)
        eye = start if path.mode == "rotate-in-place" else start + s * (end - start)
        poses.append(look_at(eye, first + s * (last - first)))
    return poses


def perturb_pose(pose: Pose, rng: np.random.Generator, rotation_sigma: float, translation_sigma: float) -> Pose:
    """对位姿施加随机旋转（轴角）与平移扰动"""
    rotation = pose.rotation
    translation = pose.translation
    if rotation_sigma > 0:
        delta = Rotation.from_rotvec(rng.normal(0.0, rotation_sigma, 3)).as_matrix()
        rotation = delta @ rotation
        # 去除累积的数值误差
        u, _, vt = np.linalg.svd(rotation)
        rotation = u @ vt
    if translation_sigma > 0:
        translation = translation + rng.normal(0.0, translation_sigma, 3)
    return Pose(rotation, translation)


def _pose_numbers(pose: Pose) -> List[float]:
    return np.hstack([pose.rotation, pose.translation.reshape(3, 1)]).ravel().tolist()


def make_survey(
    scene_spec: SceneSpec,
    path_spec: PathSpec,
    camera: CameraSpec | CameraIntrinsics,
    output_dir: str | Path,
    seed: int = 0,
) -> SurveyDataset:
    """
    生成巡检数据集目录

    写出 model.obj（不含变化物体）、NNN.pgm、NNN.pose.txt、intrinsics.txt 与 ground_truth.json。
    渲染使用真实位姿；写入的位姿按 rotation_sigma / translation_sigma 扰动。

    Returns:
        重新加载的 SurveyDataset
    """
    intrinsics = camera if isinstance(camera, CameraIntrinsics) else intrinsics_from_spec(camera)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    scene = build_scene(scene_spec)
    poses = camera_path(path_spec)
    for pose in poses:
        _check_camera(scene.survey_mesh, pose)

    noise_seq, pose_seq = np.random.SeedSequence(seed).spawn(2)
    noise_rng = np.random.default_rng(noise_seq)
    pose_rng = np.random.default_rng(pose_seq)

    bvh = build_bvh(scene.survey_mesh)
    save_obj(scene.model_mesh, output_dir / MODEL_FILE)
    save_intrinsics(intrinsics, output_dir / INTRINSICS_FILE)

    for k, pose in enumerate(poses):
        image = render(
            scene.survey_mesh, intrinsics, pose,
            noise_sigma=scene_spec.noise_sigma, seed=noise_rng, bvh=bvh,
            texture_cell=scene_spec.texture_cell, checker_gain=scene_spec.checker_gain,
        )
        save_pgm(image, output_dir / f"{k:03d}.pgm")
        reported = perturb_pose(pose, pose_rng, scene_spec.rotation_sigma, scene_spec.translation_sigma)
        save_pose_file(reported, output_dir / f"{k:03d}.pose.txt")

    ground_truth = GroundTruthFile(
        seed=seed,
        changes=[GroundTruthChange(centroid=list(b.center), half_extents=list(b.half_extents)) for b in scene_spec.changes],
        true_poses=[_pose_numbers(p) for p in poses],
    )
    with open(output_dir / GROUND_TRUTH_FILE, "w", encoding="utf-8") as f:
        json.dump(ground_truth.model_dump(), f, ensure_ascii=False, indent=2)

    logger.info(
        f"生成合成数据集 - 图像: {len(poses)}, 变化物体: {len(scene_spec.changes)}",
        extra={"context": {"output_dir": str(output_dir), "mode": path_spec.mode, "seed": seed}},
    )
    return load_survey(output_dir)


def load_ground_truth(path: str | Path) -> GroundTruthFile:
    with open(path, "r", encoding="utf-8") as f:
        try:
            return GroundTruthFile.model_validate(json.load(f))
        except (json.JSONDecodeError, ValidationError) as e:
            raise DataFormatError(f"{path}: 真值文件无效: {e}") from e


def true_poses(ground_truth: GroundTruthFile) -> List[Pose]:
    return [Pose.from_matrix(np.asarray(numbers).reshape(3, 4)) for numbers in ground_truth.true_poses]


def change_centroids(ground_truth: GroundTruthFile) -> List[np.ndarray]:
    return [np.asarray(c.centroid, dtype=np.float64) for c in ground_truth.changes]
