"""
数据读写模块：PGM 图像、OBJ 网格、位姿/内参文本、变化报告 JSON 与椭球 PLY

数据集目录结构：
    model.obj            三维模型
    intrinsics.txt       fx fy cx cy width height
    NNN.pgm              巡检图像（P5，maxval 255）
    NNN.pose.txt         world←camera 位姿（3×4，行优先 12 个数）
    body_T_cam.txt       可选；存在时 NNN.pose.txt 为机体位姿，加载时与其复合
"""
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from errors import (
    DataFormatError,
    DatasetError,
    IndexOutOfRange,
    MalformedHeader,
    NonPolygonalFace,
    NonPositiveDefiniteCovariance,
    NotARotation,
    TruncatedData,
    UnsupportedMaxval,
    WrongCount,
)
from geometry import CameraIntrinsics, Pose, TriangleMesh, compose_pose
from logging_config import get_logger
from schemas import ChangeRegionRecord, KeptManifest

logger = get_logger(__name__)

POSE_DRIFT_TOLERANCE = 1e-6
ICOSPHERE_SUBDIVISIONS = 2

MODEL_FILE = "model.obj"
INTRINSICS_FILE = "intrinsics.txt"
BODY_T_CAM_FILE = "body_T_cam.txt"
GROUND_TRUTH_FILE = "ground_truth.json"
_IMAGE_PATTERN = re.compile(r"^(\d+)\.pgm$")
_ALBEDO_MATERIAL = re.compile(r"^gray_(\d{1,3})$")


# ---------------------------------------------------------------------------
# 图像
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GrayImage:
    """8 位单通道图像，data 为 (height, width) 行优先数组"""
    width: int
    height: int
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if data.size != self.width * self.height:
            raise DataFormatError(f"像素数 {data.size} 与尺寸 {self.width}x{self.height} 不符")
        data = data.reshape(self.height, self.width)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array: np.ndarray) -> "GrayImage":
        """由二维数组构造，超出 [0,255] 的值截断"""
        array = np.asarray(array)
        if array.ndim != 2:
            raise DataFormatError("灰度图像必须是二维数组")
        if array.dtype != np.uint8:
            array = np.clip(np.rint(array), 0, 255).astype(np.uint8)
        return cls(width=array.shape[1], height=array.shape[0], data=array)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width


def _read_header_tokens(raw: bytes, count: int) -> Tuple[List[bytes], int]:
    """读取 PNM 头部的前 count 个记号，跳过 # 注释，返回 (记号, 数据起始偏移)"""
    tokens: List[bytes] = []
    pos = 0
    n = len(raw)
    while len(tokens) < count:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise MalformedHeader("PGM 文件头不完整")
        tokens.append(raw[start:pos])
    # 头部与数据之间恰好一个空白字符
    if pos >= n or not raw[pos:pos + 1].isspace():
        if len(tokens) == count and pos >= n:
            return tokens, pos
        raise MalformedHeader("PGM 文件头后缺少分隔符")
    return tokens, pos + 1


def _parse_pgm_header(raw: bytes) -> Tuple[int, int, int]:
    if not raw.startswith(b"P5"):
        raise MalformedHeader("不是二进制 PGM (P5) 文件")
    tokens, offset = _read_header_tokens(raw, 4)
    if tokens[0] != b"P5":
        raise MalformedHeader(f"PGM 魔数非法: {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise MalformedHeader(f"PGM 文件头包含非整数: {tokens[1:]}") from e
    if width <= 0 or height <= 0:
        raise MalformedHeader(f"PGM 尺寸非法: {width}x{height}")
    if maxval != 255:
        raise UnsupportedMaxval(f"仅支持 maxval 255，实际为 {maxval}")
    return width, height, offset


def read_pgm_size(path: str | Path) -> Tuple[int, int]:
    """只读取 PGM 头部，返回 (width, height)"""
    with open(path, "rb") as f:
        head = f.read(512)
    width, height, _ = _parse_pgm_header(head)
    return width, height


def load_pgm(path: str | Path) -> GrayImage:
    """读取二进制 PGM 图像"""
    raw = Path(path).read_bytes()
    width, height, offset = _parse_pgm_header(raw)
    expected = width * height
    payload = raw[offset:offset + expected]
    if len(payload) < expected:
        raise TruncatedData(f"{path}: 需要 {expected} 字节像素数据，实际 {len(payload)}")
    return GrayImage(width, height, np.frombuffer(payload, dtype=np.uint8))


def save_pgm(image: GrayImage, path: str | Path) -> None:
    """写出二进制 PGM 图像"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    path.write_bytes(header + image.data.tobytes())


# ---------------------------------------------------------------------------
# 网格
# ---------------------------------------------------------------------------

def _resolve_obj_index(token: str, n_vertices: int, line_no: int) -> int:
    try:
        index = int(token.split("/")[0])
    except ValueError as e:
        raise DataFormatError(f"第 {line_no} 行: 无法解析面索引 {token!r}") from e
    if index > 0:
        resolved = index - 1
    elif index < 0:
        resolved = n_vertices + index
    else:
        raise IndexOutOfRange(f"第 {line_no} 行: OBJ 索引从 1 开始，不能为 0")
    if not 0 <= resolved < n_vertices:
        raise IndexOutOfRange(f"第 {line_no} 行: 索引 {index} 超出顶点数 {n_vertices}")
    return resolved


def load_obj(path: str | Path) -> TriangleMesh:
    """
    读取 Wavefront OBJ 子集（v / f / #），多边形按扇形三角化

    `usemtl gray_NNN` 指定后续面的反照率；其他指令忽略。
    """
    vertices: List[List[float]] = []
    triangles: List[Tuple[int, int, int]] = []
    albedo: List[int] = []
    current_albedo = 128
    has_albedo = False

    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            keyword, args = parts[0], parts[1:]
            if keyword == "v":
                if len(args) < 3:
                    raise WrongCount(f"第 {line_no} 行: 顶点需要 3 个坐标")
                try:
                    vertices.append([float(a) for a in args[:3]])
                except ValueError as e:
                    raise DataFormatError(f"第 {line_no} 行: 顶点坐标不是数字") from e
            elif keyword == "f":
                if len(args) < 3:
                    raise NonPolygonalFace(f"第 {line_no} 行: 面只有 {len(args)} 个顶点")
                indices = [_resolve_obj_index(a, len(vertices), line_no) for a in args]
                for k in range(1, len(indices) - 1):
                    triangles.append((indices[0], indices[k], indices[k + 1]))
                    albedo.append(current_albedo)
            elif keyword == "usemtl" and args:
                match = _ALBEDO_MATERIAL.match(args[0])
                if match:
                    current_albedo = min(int(match.group(1)), 255)
                    has_albedo = True

    logger.debug(
        f"读取OBJ - 顶点: {len(vertices)}, 三角形: {len(triangles)}",
        extra={"context": {"path": str(path)}},
    )
    return TriangleMesh.from_arrays(
        np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
        np.asarray(triangles, dtype=np.int64).reshape(-1, 3),
        np.asarray(albedo) if has_albedo else None,
    )


def save_obj(mesh: TriangleMesh, path: str | Path) -> None:
    """写出 OBJ，反照率以 usemtl gray_NNN 分组"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# vertices {len(mesh.vertices)} triangles {mesh.n_triangles}"]
    lines.extend(f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist())
    current = None
    for (a, b, c), value in zip(mesh.triangles.tolist(), mesh.albedo.tolist()):
        if value != current:
            lines.append(f"usemtl gray_{value:03d}")
            current = value
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# 位姿与内参
# ---------------------------------------------------------------------------

def _read_numbers(path: str | Path, expected: int) -> List[float]:
    tokens = Path(path).read_text(encoding="utf-8").split()
    if len(tokens) != expected:
        raise WrongCount(f"{path}: 需要 {expected} 个数，实际 {len(tokens)} 个")
    try:
        return [float(t) for t in tokens]
    except ValueError as e:
        raise DataFormatError(f"{path}: 包含非数字内容") from e


def _orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """将接近正交的矩阵投影到最近的旋转矩阵"""
    drift = np.max(np.abs(rotation.T @ rotation - np.eye(3)))
    if drift > POSE_DRIFT_TOLERANCE:
        raise NotARotation(f"旋转矩阵正交性偏差 {drift:.3e} 超过 {POSE_DRIFT_TOLERANCE}")
    if np.linalg.det(rotation) <= 0:
        raise NotARotation("旋转矩阵行列式不为 +1")
    u, _, vt = np.linalg.svd(rotation)
    return u @ vt


def load_pose_file(path: str | Path) -> Pose:
    """读取 12 个数的 3×4 位姿矩阵（行优先）"""
    matrix = np.asarray(_read_numbers(path, 12)).reshape(3, 4)
    return Pose(_orthonormalize(matrix[:, :3]), matrix[:, 3])


def save_pose_file(pose: Pose, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = np.hstack([pose.rotation, pose.translation.reshape(3, 1)])
    path.write_text("\n".join(" ".join(repr(float(v)) for v in row) for row in rows) + "\n", encoding="utf-8")


def load_intrinsics(path: str | Path) -> CameraIntrinsics:
    """读取 fx fy cx cy width height"""
    fx, fy, cx, cy, width, height = _read_numbers(path, 6)
    if width != int(width) or height != int(height):
        raise DataFormatError(f"{path}: 图像尺寸必须是整数")
    return CameraIntrinsics(fx, fy, cx, cy, int(width), int(height))


def save_intrinsics(intrinsics: CameraIntrinsics, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    k = intrinsics
    path.write_text(f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# 变化报告与椭球
# ---------------------------------------------------------------------------

def _region_record(region: Any) -> ChangeRegionRecord:
    return ChangeRegionRecord(
        mean=[float(v) for v in np.asarray(region.mean).reshape(3)],
        covariance=[float(v) for v in np.asarray(region.covariance).reshape(9)],
        support=[int(i) for i in region.support],
        pixel_area=float(region.pixel_area),
    )


def sort_regions(regions: Iterable[Any]) -> List[Any]:
    """报告顺序：支持图像数降序，其次均值字典序"""
    return sorted(regions, key=lambda r: (-len(r.support), tuple(float(v) for v in np.asarray(r.mean).reshape(3))))


def write_change_report(regions: Sequence[Any], path: str | Path) -> None:
    """
    写出 changes.json

    Args:
        regions: 具有 mean / covariance / support / pixel_area 的三维变化区域
        path: 输出路径
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [_region_record(r).model_dump() for r in sort_regions(regions)]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(records, f, ensure_ascii=False, indent=2)


def load_change_report(path: str | Path) -> List[ChangeRegionRecord]:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{path}: 变化报告不是合法 JSON: {e}") from e
    if not isinstance(data, list):
        raise DataFormatError(f"{path}: 变化报告必须是 JSON 数组")
    try:
        return [ChangeRegionRecord.model_validate(item) for item in data]
    except ValidationError as e:
        raise DataFormatError(f"{path}: 变化报告字段无效: {e}") from e


def icosphere(subdivisions: int = ICOSPHERE_SUBDIVISIONS) -> np.ndarray:
    """单位球面上的正二十面体细分顶点（细分 2 次共 162 个）"""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    vertices = [
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    points = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in vertices]

    for _ in range(subdivisions):
        midpoints: Dict[Tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in midpoints:
                m = points[a] + points[b]
                points.append(m / np.linalg.norm(m))
                midpoints[key] = len(points) - 1
            return midpoints[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
        faces = refined

    return np.vstack(points)


def covariance_sqrt(covariance: np.ndarray) -> np.ndarray:
    """对称半正定矩阵的对称平方根"""
    covariance = np.asarray(covariance, dtype=np.float64)
    covariance = 0.5 * (covariance + covariance.T)
    eigvals, eigvecs = np.linalg.eigh(covariance)
    scale = max(1.0, float(np.max(np.abs(eigvals))))
    if eigvals.min() < -1e-12 * scale:
        raise NonPositiveDefiniteCovariance(f"协方差存在负特征值 {eigvals.min():.3e}")
    return eigvecs @ np.diag(np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T


def ellipsoid_points(mean: np.ndarray, covariance: np.ndarray, n_sigma: float) -> np.ndarray:
    """在 n_sigma 协方差椭球面上采样"""
    return np.asarray(mean, dtype=np.float64).reshape(3) + n_sigma * icosphere() @ covariance_sqrt(covariance).T


def write_ply_ellipsoids(regions: Sequence[Any], path: str | Path, n_sigma: float = 3.0) -> None:
    """写出 ASCII PLY 点云，每个区域 162 个椭球面点"""
    clouds = [ellipsoid_points(r.mean, r.covariance, n_sigma) for r in regions]
    points = np.vstack(clouds) if clouds else np.zeros((0, 3))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [
        "ply",
        "format ascii 1.0",
        f"comment change ellipsoids n_sigma={n_sigma}",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    body = [f"{x!r} {y!r} {z!r}" for x, y, z in points.tolist()]
    path.write_text("\n".join(header + body) + "\n", encoding="ascii")


def load_ply_points(path: str | Path) -> np.ndarray:
    """读取本模块写出的 ASCII PLY 顶点"""
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != "ply":
        raise MalformedHeader(f"{path}: 不是 PLY 文件")
    n_vertices = None
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n_vertices = int(line.split()[2])
        if line == "end_header":
            if n_vertices is None:
                raise MalformedHeader(f"{path}: 缺少 element vertex")
            body = lines[i + 1:i + 1 + n_vertices]
            if len(body) < n_vertices:
                raise TruncatedData(f"{path}: 顶点数据不完整")
            return np.array([[float(v) for v in row.split()] for row in body]).reshape(-1, 3)
    raise MalformedHeader(f"{path}: 缺少 end_header")


# ---------------------------------------------------------------------------
# 数据集
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SurveyFrame:
    """一幅巡检图像及其位姿"""
    index: int
    image_path: Path
    pose: Pose


@dataclass
class SurveyDataset:
    """巡检数据集：按序的图像、位姿、共享内参与模型路径"""
    root: Path
    mesh_path: Path
    intrinsics: CameraIntrinsics
    frames: List[SurveyFrame] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def poses(self) -> List[Pose]:
        return [frame.pose for frame in self.frames]

    def load_images(self) -> List[GrayImage]:
        return [load_pgm(frame.image_path) for frame in self.frames]

    def load_mesh(self) -> TriangleMesh:
        return load_obj(self.mesh_path)

    def subset(self, indices: Sequence[int]) -> "SurveyDataset":
        """按保留索引取子集"""
        for i in indices:
            if not 0 <= i < len(self.frames):
                raise DatasetError(f"保留索引 {i} 超出图像数 {len(self.frames)}")
        return SurveyDataset(self.root, self.mesh_path, self.intrinsics, [self.frames[i] for i in indices])


def load_survey(root: str | Path) -> SurveyDataset:
    """
    加载数据集目录

    Raises:
        DatasetError: 目录不存在、缺少模型/内参/位姿、或图像尺寸与内参不一致
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"数据集目录不存在: {root}")
    mesh_path = root / MODEL_FILE
    if not mesh_path.exists():
        raise DatasetError(f"缺少模型文件: {mesh_path}")
    if not (root / INTRINSICS_FILE).exists():
        raise DatasetError(f"缺少内参文件: {root / INTRINSICS_FILE}")
    intrinsics = load_intrinsics(root / INTRINSICS_FILE)

    body_T_cam: Optional[Pose] = None
    if (root / BODY_T_CAM_FILE).exists():
        body_T_cam = load_pose_file(root / BODY_T_CAM_FILE)
        logger.info("检测到 body_T_cam.txt，位姿将与相机外参复合")

    images = sorted(
        (int(m.group(1)), p) for p in root.iterdir() if (m := _IMAGE_PATTERN.match(p.name))
    )
    if not images:
        raise DatasetError(f"数据集中没有图像: {root}")

    frames = []
    for index, image_path in images:
        pose_path = image_path.with_name(image_path.stem + ".pose.txt")
        if not pose_path.exists():
            raise DatasetError(f"图像缺少位姿文件: {pose_path.name}")
        width, height = read_pgm_size(image_path)
        if (width, height) != (intrinsics.width, intrinsics.height):
            raise DatasetError(
                f"{image_path.name} 尺寸 {width}x{height} 与内参 {intrinsics.width}x{intrinsics.height} 不一致"
            )
        pose = load_pose_file(pose_path)
        if body_T_cam is not None:
            pose = compose_pose(pose, body_T_cam)
        frames.append(SurveyFrame(index=index, image_path=image_path, pose=pose))

    logger.info(
        f"加载数据集 - 图像: {len(frames)}",
        extra={"context": {"root": str(root), "images": len(frames)}},
    )
    return SurveyDataset(root=root, mesh_path=mesh_path, intrinsics=intrinsics, frames=frames)


def save_manifest(kept: Sequence[int], total: int, path: str | Path) -> KeptManifest:
    manifest = KeptManifest(kept=list(kept), total=total)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest.model_dump(), f, indent=2)
    return manifest


def load_manifest(path: str | Path) -> KeptManifest:
    with open(path, "r", encoding="utf-8") as f:
        try:
            return KeptManifest.model_validate(json.load(f))
        except (json.JSONDecodeError, ValidationError) as e:
            raise DataFormatError(f"{path}: 保留清单无效: {e}") from e
