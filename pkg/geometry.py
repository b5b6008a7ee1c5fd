"""
几何核心：刚体位姿、针孔相机投影/反投影、三角网格与 BVH 光线求交

约定：
- Pose 表示 world←camera 变换：X_world = R · X_cam + t，t 即相机中心
- 相机坐标系 x 向右、y 向下、z 沿光轴向前
- 像素坐标原点为左上角像素中心
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numba
import numpy as np
from numba import njit, prange

from errors import (
    EmptyMesh,
    InvalidIntrinsics,
    InvalidMesh,
    NotARotation,
    PointBehindCamera,
)
from logging_config import get_logger, log_function_performance

logger = get_logger(__name__)

ROTATION_TOLERANCE = 1e-9
MIN_TRIANGLE_AREA = 1e-12
BVH_LEAF_SIZE = 4

# 求交常量（numba 编译期常量）
_T_MIN = 1e-6        # 最小命中距离，防止表面自遮挡
_TIE_EPS = 1e-12     # 距离相同的判定阈值，取较小的三角形编号
_BARY_EPS = 1e-10    # 重心坐标容差，共享边不产生裂缝
_DET_EPS = 1e-18
_BOX_PAD = 1e-9
_STACK_SIZE = 128


def _as_vector(value: Sequence[float] | np.ndarray, size: int, name: str) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64).reshape(-1)
    if array.shape != (size,):
        raise ValueError(f"{name} 必须是长度为 {size} 的向量")
    return array


# ---------------------------------------------------------------------------
# 位姿与相机
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """刚体变换（world←camera）"""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rotation = np.array(self.rotation, dtype=np.float64)
        if rotation.shape != (3, 3):
            raise NotARotation("旋转矩阵必须是 3×3")
        translation = _as_vector(self.translation, 3, "translation")
        drift = np.max(np.abs(rotation.T @ rotation - np.eye(3)))
        det = np.linalg.det(rotation)
        if drift > ROTATION_TOLERANCE or abs(det - 1.0) > ROTATION_TOLERANCE:
            raise NotARotation(f"旋转矩阵不正交: 偏差 {drift:.3e}, 行列式 {det:.6f}")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Pose":
        """由 4×4 或 3×4 齐次矩阵构造"""
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape not in ((4, 4), (3, 4)):
            raise ValueError("位姿矩阵必须是 4×4 或 3×4")
        return cls(matrix[:3, :3], matrix[:3, 3])

    @property
    def center(self) -> np.ndarray:
        """相机中心（世界坐标）"""
        return self.translation

    def matrix(self) -> np.ndarray:
        """4×4 齐次矩阵"""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        """将 (N,3) 点从相机坐标变换到世界坐标"""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def compose_pose(world_T_body: Pose, body_T_cam: Pose) -> Pose:
    """位姿复合：T = world_T_body · body_T_cam"""
    rotation = world_T_body.rotation @ body_T_cam.rotation
    translation = world_T_body.rotation @ body_T_cam.translation + world_T_body.translation
    return Pose(rotation, translation)


def look_at(eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, 0.0, 1.0)) -> Pose:
    """相机位于 eye、光轴指向 target 的位姿（图像 y 轴朝下）"""
    eye_v = _as_vector(eye, 3, "eye")
    forward = _as_vector(target, 3, "target") - eye_v
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("eye 与 target 重合")
    z_axis = forward / norm
    x_axis = np.cross(z_axis, _as_vector(up, 3, "up"))
    if np.linalg.norm(x_axis) < 1e-9:
        raise ValueError("光轴与 up 方向平行")
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    return Pose(np.column_stack([x_axis, y_axis, z_axis]), eye_v)


@dataclass(frozen=True)
class CameraIntrinsics:
    """针孔相机内参（零偏斜）"""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidIntrinsics(f"焦距必须为正: fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise InvalidIntrinsics(f"图像尺寸必须为正: {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidIntrinsics(f"主点 ({self.cx}, {self.cy}) 超出 {self.width}x{self.height}")

    def matrix(self) -> np.ndarray:
        """K 矩阵"""
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def inverse_matrix(self) -> np.ndarray:
        """K⁻¹ 的闭式解"""
        return np.array([
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ])

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        """像素是否位于图像范围 [0, w-1]×[0, h-1] 内"""
        pixels = np.atleast_2d(pixels)
        return (
            (pixels[:, 0] >= 0) & (pixels[:, 0] <= self.width - 1)
            & (pixels[:, 1] >= 0) & (pixels[:, 1] <= self.height - 1)
        )


@dataclass(frozen=True)
class ProjectionMatrix:
    """3×4 投影矩阵 P = K R [I | -t]"""
    matrix: np.ndarray

    def __post_init__(self) -> None:
        matrix = np.array(self.matrix, dtype=np.float64)
        if matrix.shape != (3, 4):
            raise ValueError("投影矩阵必须是 3×4")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)


def projection_matrix(intrinsics: CameraIntrinsics, pose: Pose) -> ProjectionMatrix:
    """由内参与 world←camera 位姿构造投影矩阵"""
    # (T)^-1 将世界坐标变换到相机坐标
    rotation = pose.rotation.T
    extrinsic = np.hstack([np.eye(3), -pose.translation.reshape(3, 1)])
    return ProjectionMatrix(intrinsics.matrix() @ rotation @ extrinsic)


def project(P: ProjectionMatrix, point: Sequence[float]) -> Tuple[np.ndarray, float]:
    """
    将世界点投影到像素

    Returns:
        (像素坐标, 沿光轴的深度)

    Raises:
        PointBehindCamera: 深度 ≤ 0
    """
    X = _as_vector(point, 3, "point")
    if not np.all(np.isfinite(X)):
        raise ValueError("点坐标必须有限")
    h = P.matrix @ np.append(X, 1.0)
    depth = float(h[2])
    if depth <= 0:
        raise PointBehindCamera(f"点 {X.tolist()} 的深度 {depth:.6g} ≤ 0")
    return h[:2] / depth, depth


def project_points(P: ProjectionMatrix, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """批量投影 (N,3) 点；深度 ≤ 0 的像素为 nan，由调用方判断"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    h = points @ P.matrix[:, :3].T + P.matrix[:, 3]
    depth = h[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pixels = h[:, :2] / depth[:, None]
    pixels[depth <= 0] = np.nan
    return pixels, depth


@dataclass(frozen=True)
class Ray:
    """光线：原点与单位方向"""
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self) -> None:
        origin = _as_vector(self.origin, 3, "origin")
        direction = _as_vector(self.direction, 3, "direction")
        if abs(np.linalg.norm(direction) - 1.0) > 1e-12:
            raise ValueError("光线方向必须是单位向量")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @classmethod
    def towards(cls, origin: Sequence[float], direction: Sequence[float]) -> "Ray":
        """方向自动归一化"""
        d = _as_vector(direction, 3, "direction")
        return cls(origin, d / np.linalg.norm(d))

    def point_at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


def back_project(intrinsics: CameraIntrinsics, pose: Pose, pixel: Sequence[float]) -> Ray:
    """像素反投影为世界坐标系中的光线 r = Rᵀ K⁻¹ x"""
    x, y = _as_vector(pixel, 2, "pixel")
    direction = pose.rotation @ (intrinsics.inverse_matrix() @ np.array([x, y, 1.0]))
    return Ray(pose.translation.copy(), direction / np.linalg.norm(direction))


def pixel_grid(intrinsics: CameraIntrinsics) -> np.ndarray:
    """全部像素中心坐标 (h*w, 2)，行优先"""
    ys, xs = np.mgrid[0:intrinsics.height, 0:intrinsics.width]
    return np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)


def back_project_pixels(intrinsics: CameraIntrinsics, pose: Pose, pixels: np.ndarray) -> np.ndarray:
    """批量反投影，返回 (N,3) 单位方向"""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    homogeneous = np.column_stack([pixels, np.ones(len(pixels))])
    directions = homogeneous @ (pose.rotation @ intrinsics.inverse_matrix()).T
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions


def skew(x: Sequence[float]) -> np.ndarray:
    """反对称矩阵 S(x)，满足 S(x)·y = x × y"""
    a, b, c = _as_vector(x, 3, "x")
    return np.array([
        [0.0, -c, b],
        [c, 0.0, -a],
        [-b, a, 0.0],
    ])


# ---------------------------------------------------------------------------
# 网格
# ---------------------------------------------------------------------------

def _triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    if len(triangles) == 0:
        return np.zeros(0)
    corners = vertices[triangles]
    return 0.5 * np.linalg.norm(np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]), axis=1)


@dataclass(frozen=True)
class TriangleMesh:
    """三角网格：顶点（米）、三角形顶点索引、每个三角形的反照率"""
    vertices: np.ndarray
    triangles: np.ndarray
    albedo: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        vertices = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise InvalidMesh(f"三角形索引越界（顶点数 {len(vertices)}）")
        areas = _triangle_areas(vertices, triangles)
        if np.any(areas <= MIN_TRIANGLE_AREA):
            raise InvalidMesh(f"存在 {int(np.sum(areas <= MIN_TRIANGLE_AREA))} 个退化三角形")
        if self.albedo is None:
            albedo = np.full(len(triangles), 128, dtype=np.uint8)
        else:
            albedo = np.array(self.albedo, dtype=np.uint8).reshape(-1)
            if albedo.shape != (len(triangles),):
                raise InvalidMesh("反照率数量必须与三角形数量一致")
        for array in (vertices, triangles, albedo):
            array.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)
        object.__setattr__(self, "albedo", albedo)

    @classmethod
    def from_arrays(
        cls,
        vertices: np.ndarray,
        triangles: np.ndarray,
        albedo: Optional[np.ndarray] = None,
    ) -> "TriangleMesh":
        """构造网格并剔除退化三角形（加载时清理）"""
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise InvalidMesh(f"三角形索引越界（顶点数 {len(vertices)}）")
        keep = _triangle_areas(vertices, triangles) > MIN_TRIANGLE_AREA
        dropped = int(np.sum(~keep))
        if dropped:
            logger.warning(f"剔除 {dropped} 个退化三角形", extra={"context": {"dropped": dropped}})
        if albedo is not None:
            albedo = np.asarray(albedo, dtype=np.uint8).reshape(-1)[keep]
        return cls(vertices, triangles[keep], albedo)

    @classmethod
    def merge(cls, meshes: Iterable["TriangleMesh"]) -> "TriangleMesh":
        vertices: List[np.ndarray] = []
        triangles: List[np.ndarray] = []
        albedo: List[np.ndarray] = []
        offset = 0
        for mesh in meshes:
            vertices.append(mesh.vertices)
            triangles.append(mesh.triangles + offset)
            albedo.append(mesh.albedo)
            offset += len(mesh.vertices)
        if not vertices:
            return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        return cls(np.vstack(vertices), np.vstack(triangles), np.concatenate(albedo))

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def dominant_axes(self) -> np.ndarray:
        """每个三角形法向量绝对值最大的坐标轴"""
        corners = self.vertices[self.triangles]
        normals = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
        return np.argmax(np.abs(normals), axis=1)


@dataclass(frozen=True)
class Hit:
    """光线与网格的最近交点"""
    point: np.ndarray
    triangle_id: int
    t: float


# ---------------------------------------------------------------------------
# BVH
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Bvh:
    """
    扁平化的轴对齐包围盒二叉树

    叶子节点 left == -1，其三角形为 triangle_order[start:start+count]。
    v0/e1/e2 为按三角形编号存储的顶点与边，供求交内核直接使用。
    """
    node_min: np.ndarray
    node_max: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    triangle_order: np.ndarray
    v0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_left)

    @property
    def n_triangles(self) -> int:
        return len(self.v0)

    def leaves(self) -> List[Tuple[int, np.ndarray]]:
        """(节点编号, 叶子中的三角形编号)"""
        result = []
        for node in range(self.n_nodes):
            if self.node_left[node] < 0:
                start = self.node_start[node]
                result.append((node, self.triangle_order[start:start + self.node_count[node]]))
        return result

    def _kernel_args(self) -> tuple:
        return (
            self.node_min, self.node_max, self.node_left, self.node_right,
            self.node_start, self.node_count, self.triangle_order,
            self.v0, self.e1, self.e2,
        )


@log_function_performance("构建BVH")
def build_bvh(mesh: TriangleMesh) -> Bvh:
    """沿最长轴中位数划分构建 BVH，叶子最多 4 个三角形"""
    n = mesh.n_triangles
    if n == 0:
        raise EmptyMesh("网格为空，无法构建 BVH")

    corners = mesh.vertices[mesh.triangles]
    tri_min = corners.min(axis=1)
    tri_max = corners.max(axis=1)
    centroids = corners.mean(axis=1)
    order = np.arange(n, dtype=np.int64)

    node_min: List[np.ndarray] = []
    node_max: List[np.ndarray] = []
    node_left: List[int] = []
    node_right: List[int] = []
    node_start: List[int] = []
    node_count: List[int] = []

    def new_node(start: int, end: int) -> int:
        members = order[start:end]
        node_min.append(tri_min[members].min(axis=0) - _BOX_PAD)
        node_max.append(tri_max[members].max(axis=0) + _BOX_PAD)
        node_left.append(-1)
        node_right.append(-1)
        node_start.append(start)
        node_count.append(end - start)
        return len(node_left) - 1

    stack = [(new_node(0, n), 0, n)]
    while stack:
        node, start, end = stack.pop()
        count = end - start
        if count <= BVH_LEAF_SIZE:
            continue
        members = order[start:end]
        member_centroids = centroids[members]
        axis = int(np.argmax(np.ptp(member_centroids, axis=0)))
        # 按质心排序，编号作为次关键字保证确定性
        order[start:end] = members[np.lexsort((members, member_centroids[:, axis]))]
        middle = start + count // 2
        left = new_node(start, middle)
        right = new_node(middle, end)
        node_left[node] = left
        node_right[node] = right
        node_count[node] = 0
        stack.append((right, middle, end))
        stack.append((left, start, middle))

    bvh = Bvh(
        node_min=np.ascontiguousarray(node_min, dtype=np.float64),
        node_max=np.ascontiguousarray(node_max, dtype=np.float64),
        node_left=np.asarray(node_left, dtype=np.int64),
        node_right=np.asarray(node_right, dtype=np.int64),
        node_start=np.asarray(node_start, dtype=np.int64),
        node_count=np.asarray(node_count, dtype=np.int64),
        triangle_order=order,
        v0=np.ascontiguousarray(corners[:, 0]),
        e1=np.ascontiguousarray(corners[:, 1] - corners[:, 0]),
        e2=np.ascontiguousarray(corners[:, 2] - corners[:, 0]),
    )
    logger.debug(
        f"BVH构建完成 - 三角形: {n}, 节点: {bvh.n_nodes}",
        extra={"context": {"triangles": n, "nodes": bvh.n_nodes}},
    )
    return bvh


@njit(cache=True)
def _hit_triangle(ox, oy, oz, dx, dy, dz, v0, e1, e2, k):
    # Möller–Trumbore
    e1x, e1y, e1z = e1[k, 0], e1[k, 1], e1[k, 2]
    e2x, e2y, e2z = e2[k, 0], e2[k, 1], e2[k, 2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if -_DET_EPS < det < _DET_EPS:
        return np.inf
    inv = 1.0 / det
    tx = ox - v0[k, 0]
    ty = oy - v0[k, 1]
    tz = oz - v0[k, 2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < -_BARY_EPS or u > 1.0 + _BARY_EPS:
        return np.inf
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < -_BARY_EPS or u + v > 1.0 + _BARY_EPS:
        return np.inf
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t < _T_MIN:
        return np.inf
    return t


@njit(cache=True)
def _hit_box(ox, oy, oz, dx, dy, dz, box_min, box_max, t_limit):
    t_near = -np.inf
    t_far = t_limit
    origin = (ox, oy, oz)
    direction = (dx, dy, dz)
    for a in range(3):
        o = origin[a]
        d = direction[a]
        if abs(d) < 1e-300:
            if o < box_min[a] or o > box_max[a]:
                return False
        else:
            t0 = (box_min[a] - o) / d
            t1 = (box_max[a] - o) / d
            if t0 > t1:
                t0, t1 = t1, t0
            if t0 > t_near:
                t_near = t0
            if t1 < t_far:
                t_far = t1
            if t_near > t_far:
                return False
    return t_far >= _T_MIN


@njit(cache=True)
def _traverse(ox, oy, oz, dx, dy, dz, node_min, node_max, node_left, node_right,
              node_start, node_count, order, v0, e1, e2):
    stack = np.empty(_STACK_SIZE, dtype=np.int64)
    stack[0] = 0
    sp = 1
    best_t = np.inf
    best_id = -1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not _hit_box(ox, oy, oz, dx, dy, dz, node_min[node], node_max[node], best_t + _TIE_EPS):
            continue
        left = node_left[node]
        if left < 0:
            start = node_start[node]
            for j in range(start, start + node_count[node]):
                k = order[j]
                t = _hit_triangle(ox, oy, oz, dx, dy, dz, v0, e1, e2, k)
                if t < best_t - _TIE_EPS or (t <= best_t + _TIE_EPS and k < best_id):
                    best_t = t
                    best_id = k
        else:
            stack[sp] = node_right[node]
            sp += 1
            stack[sp] = left
            sp += 1
    return best_t, best_id


@njit(parallel=True, cache=True)
def _cast_rays_kernel(origins, directions, node_min, node_max, node_left, node_right,
                      node_start, node_count, order, v0, e1, e2):
    n = origins.shape[0]
    ts = np.empty(n, dtype=np.float64)
    ids = np.empty(n, dtype=np.int64)
    for r in prange(n):
        t, k = _traverse(
            origins[r, 0], origins[r, 1], origins[r, 2],
            directions[r, 0], directions[r, 1], directions[r, 2],
            node_min, node_max, node_left, node_right, node_start, node_count, order, v0, e1, e2,
        )
        ts[r] = t
        ids[r] = k
    return ts, ids


@njit(parallel=True, cache=True)
def _brute_force_kernel(origins, directions, v0, e1, e2):
    n = origins.shape[0]
    m = v0.shape[0]
    ts = np.empty(n, dtype=np.float64)
    ids = np.empty(n, dtype=np.int64)
    for r in prange(n):
        best_t = np.inf
        best_id = -1
        for k in range(m):
            t = _hit_triangle(
                origins[r, 0], origins[r, 1], origins[r, 2],
                directions[r, 0], directions[r, 1], directions[r, 2],
                v0, e1, e2, k,
            )
            if t < best_t - _TIE_EPS or (t <= best_t + _TIE_EPS and k < best_id):
                best_t = t
                best_id = k
        ts[r] = best_t
        ids[r] = best_id
    return ts, ids


def _ray_arrays(origins: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    origins = np.asarray(origins, dtype=np.float64)
    if origins.shape == (3,):
        origins = np.broadcast_to(origins, directions.shape)
    origins = np.ascontiguousarray(origins).reshape(-1, 3)
    if origins.shape != directions.shape:
        raise ValueError("光线原点与方向数量不一致")
    return origins, directions


def cast_rays(bvh: Bvh, origins: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    批量光线求交（并行）

    Args:
        bvh: 加速结构
        origins: (N,3) 或单个 (3,) 原点
        directions: (N,3) 单位方向

    Returns:
        (t, triangle_id)；未命中时 t=inf、id=-1
    """
    origins, directions = _ray_arrays(origins, directions)
    if len(directions) == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    return _cast_rays_kernel(origins, directions, *bvh._kernel_args())


def intersect_rays_brute_force(mesh: TriangleMesh, origins: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """逐三角形暴力求交，作为 BVH 的对照"""
    origins, directions = _ray_arrays(origins, directions)
    corners = mesh.vertices[mesh.triangles]
    v0 = np.ascontiguousarray(corners[:, 0])
    e1 = np.ascontiguousarray(corners[:, 1] - corners[:, 0])
    e2 = np.ascontiguousarray(corners[:, 2] - corners[:, 0])
    if len(directions) == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    return _brute_force_kernel(origins, directions, v0, e1, e2)


def _to_hit(ray: Ray, t: float, triangle_id: int) -> Optional[Hit]:
    if triangle_id < 0 or not np.isfinite(t):
        return None
    return Hit(point=ray.point_at(t), triangle_id=int(triangle_id), t=float(t))


def ray_mesh_intersect(bvh: Bvh, mesh: TriangleMesh, ray: Ray) -> Optional[Hit]:
    """光线与网格最近交点；光线逃出模型时返回 None"""
    if bvh.n_triangles != mesh.n_triangles:
        raise ValueError("BVH 与网格不匹配")
    ts, ids = cast_rays(bvh, ray.origin.reshape(1, 3), ray.direction.reshape(1, 3))
    return _to_hit(ray, ts[0], ids[0])


def brute_force_intersect(mesh: TriangleMesh, ray: Ray) -> Optional[Hit]:
    ts, ids = intersect_rays_brute_force(mesh, ray.origin.reshape(1, 3), ray.direction.reshape(1, 3))
    return _to_hit(ray, ts[0], ids[0])


def set_worker_threads(threads: Optional[int]) -> int:
    """限制 numba 并行线程数，返回实际生效的线程数"""
    if threads is not None:
        numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))
    return numba.get_num_threads()


__all__ = [
    "Bvh", "CameraIntrinsics", "Hit", "Pose", "ProjectionMatrix", "Ray", "TriangleMesh",
    "back_project", "back_project_pixels", "brute_force_intersect", "build_bvh", "cast_rays",
    "compose_pose", "intersect_rays_brute_force", "look_at", "pixel_grid", "project",
    "project_points", "projection_matrix", "ray_mesh_intersect", "set_worker_threads", "skew",
]
