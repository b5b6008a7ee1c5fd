"""
使用 Pydantic 定义参数与输出 Schema
"""
import json
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy.stats import chi2

from errors import DataFormatError


class MotionFilterParams(BaseModel):
    """低运动图像过滤参数"""
    max_features: int = Field(default=200, gt=0, description="每幅图像最多检测的角点数")
    patch_radius: int = Field(default=7, gt=0, description="特征块半径（像素）")
    pyramid_levels: int = Field(default=3, gt=0, description="金字塔层数")
    search_radius: int = Field(default=8, gt=0, description="每层搜索半径（像素）")
    displacement_threshold: float = Field(default=2.0, gt=0, description="中位位移阈值（像素）")
    min_tracked_fraction: float = Field(default=0.5, gt=0, le=1, description="最低跟踪成功比例")
    quality_level: float = Field(default=0.01, gt=0, lt=1, description="角点响应相对最大响应的下限")

    @property
    def max_displacement(self) -> float:
        """由粗到细搜索可达到的最大位移"""
        return float(self.search_radius * (2 ** self.pyramid_levels - 1))


class InconsistencyParams(BaseModel):
    """不一致性图像与二维变化区域参数"""
    intensity_threshold: float = Field(default=30.0, gt=0, description="二值化阈值 θ（8位灰度）")
    kernel_radius: int = Field(default=2, gt=0, description="开运算核半径（像素）")
    min_region_area: float = Field(default=150.0, gt=0, description="最小区域面积（像素²）")
    max_comparisons: int = Field(default=4, ge=1, description="每幅图像比较的邻居数 m")
    min_confirming_pairs: int = Field(default=2, ge=1, description="确认区域所需的最少图像对")
    confirm_fraction: float = Field(default=0.75, gt=0, le=1, description="确认区域所需的图像对比例")
    occlusion_tolerance: float = Field(default=0.01, gt=0, description="遮挡判断的距离容差（米）")


class UncertaintyParams(BaseModel):
    """重投影不确定性参数：Σ = σ²I，τ² 为 χ²₂ 分位数"""
    sigma_px: float = Field(default=2.0, gt=0, description="各向同性像素标准差")
    confidence: float = Field(default=0.9973, gt=0, lt=1, description="门限对应的置信度（3σ）")
    tau_squared: Optional[float] = Field(default=None, gt=0, description="显式门限 τ²，为空时由 confidence 计算")

    @property
    def gate(self) -> float:
        """马氏距离门限 τ²"""
        if self.tau_squared is not None:
            return float(self.tau_squared)
        return float(chi2.ppf(self.confidence, df=2))


class ChangeEstimationParams(BaseModel):
    """三维变化区域估计参数"""
    min_distance: float = Field(default=0.5, ge=0, description="近相机剔除距离（米）")
    n_sigma: float = Field(default=3.0, gt=0, description="椭球可视化的 σ 倍数")


class DetectionConfig(BaseModel):
    """完整的检测配置"""
    model_config = ConfigDict(extra="forbid")

    motion_filter: MotionFilterParams = Field(default_factory=MotionFilterParams)
    inconsistency: InconsistencyParams = Field(default_factory=InconsistencyParams)
    uncertainty: UncertaintyParams = Field(default_factory=UncertaintyParams)
    change_3d: ChangeEstimationParams = Field(default_factory=ChangeEstimationParams)


class RunConfig(BaseModel):
    """一次命令行运行的配置"""
    model_config = ConfigDict(extra="forbid")

    dataset_root: Path = Field(description="数据集根目录")
    output_dir: Path = Field(description="输出目录")
    detection: DetectionConfig = Field(default_factory=DetectionConfig)
    manifest: Optional[Path] = Field(default=None, description="保留图像索引清单")
    debug_images: bool = Field(default=False, description="是否保存调试图像")
    seed: int = Field(default=0, ge=0, description="随机种子（检测流程是确定性的，仅随运行记录）")
    threads: Optional[int] = Field(default=None, gt=0, description="并行线程上限")


# ---- 合成数据 ----

class CameraSpec(BaseModel):
    """针孔相机参数"""
    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float = Field(ge=0)
    cy: float = Field(ge=0)
    width: int = Field(gt=0)
    height: int = Field(gt=0)

    @model_validator(mode="after")
    def _principal_point_inside(self) -> "CameraSpec":
        if self.cx >= self.width or self.cy >= self.height:
            raise ValueError("主点必须位于图像范围内")
        return self


class BoxObject(BaseModel):
    """轴对齐长方体物体"""
    center: List[float] = Field(min_length=3, max_length=3, description="中心（米）")
    half_extents: List[float] = Field(min_length=3, max_length=3, description="半边长（米）")
    albedo: int = Field(default=250, ge=0, le=255, description="反照率（8位）")

    @field_validator("half_extents")
    @classmethod
    def _positive_extents(cls, value: List[float]) -> List[float]:
        if any(v <= 0 for v in value):
            raise ValueError("半边长必须为正")
        return value


class SceneSpec(BaseModel):
    """合成房间场景"""
    room_size: List[float] = Field(default=[8.0, 8.0, 3.0], min_length=3, max_length=3, description="房间尺寸（米），以原点为中心")
    texture_cell: float = Field(default=0.5, gt=0, description="棋盘格边长（米）")
    checker_gain: float = Field(default=0.5, gt=0, le=1, description="棋盘暗格相对亮度")
    wall_albedo: List[int] = Field(
        default=[140, 160, 150, 170, 120, 200], min_length=6, max_length=6,
        description="-x,+x,-y,+y,-z,+z 六个面的反照率",
    )
    objects: List[BoxObject] = Field(default_factory=list, description="模型中存在的物体")
    changes: List[BoxObject] = Field(default_factory=list, description="仅在巡检时存在的物体")
    noise_sigma: float = Field(default=0.0, ge=0, description="加性高斯噪声 σ（灰度）")
    rotation_sigma: float = Field(default=0.0, ge=0, description="位姿旋转扰动 σ（弧度）")
    translation_sigma: float = Field(default=0.0, ge=0, description="位姿平移扰动 σ（米）")

    @field_validator("room_size")
    @classmethod
    def _positive_room(cls, value: List[float]) -> List[float]:
        if any(v <= 0 for v in value):
            raise ValueError("房间尺寸必须为正")
        return value


class PathSpec(BaseModel):
    """相机路径"""
    mode: Literal["wall-scan", "rotate-in-place"] = Field(default="wall-scan")
    waypoints: int = Field(default=7, ge=2, description="路径点数量")
    start: List[float] = Field(default=[-2.5, -2.4, 0.0], min_length=3, max_length=3)
    end: List[float] = Field(default=[-2.5, 2.4, 0.0], min_length=3, max_length=3)
    look_at: List[List[float]] = Field(
        default_factory=lambda: [[4.0, -2.4, 0.0], [4.0, 2.4, 0.0]],
        description="注视目标；扫墙模式按路径点插值，原地旋转模式为扫过的方向",
    )

    @field_validator("look_at")
    @classmethod
    def _targets_are_points(cls, value: List[List[float]]) -> List[List[float]]:
        if not value or any(len(p) != 3 for p in value):
            raise ValueError("look_at 必须是非空的三维点列表")
        return value


class SurveyPreset(BaseModel):
    """巡检预设：相机 + 场景 + 路径 + 可选的默认变化物体"""
    camera: CameraSpec
    scene: SceneSpec = Field(default_factory=SceneSpec)
    path: PathSpec = Field(default_factory=PathSpec)
    change_cube: Optional[BoxObject] = Field(default=None, description="--change cube 时注入的物体")


# ---- 输出记录 ----

class ChangeRegionRecord(BaseModel):
    """changes.json 中的一条三维变化区域"""
    mean: List[float] = Field(min_length=3, max_length=3, description="均值（米）")
    covariance: List[float] = Field(min_length=9, max_length=9, description="3×3 协方差，行优先（米²）")
    support: List[int] = Field(description="支持图像索引")
    pixel_area: float = Field(ge=0, description="像素面积总和（像素²）")


class GroundTruthChange(BaseModel):
    """真值变化物体"""
    centroid: List[float] = Field(min_length=3, max_length=3)
    half_extents: List[float] = Field(min_length=3, max_length=3)


class GroundTruthFile(BaseModel):
    """ground_truth.json"""
    seed: int
    changes: List[GroundTruthChange] = Field(default_factory=list)
    true_poses: List[List[float]] = Field(default_factory=list, description="渲染用真实位姿（每个 12 个数）")


class KeptManifest(BaseModel):
    """低运动过滤后的保留索引清单"""
    kept: List[int]
    total: int = Field(ge=0)

    @model_validator(mode="after")
    def _indices_increasing(self) -> "KeptManifest":
        if any(b <= a for a, b in zip(self.kept, self.kept[1:])):
            raise ValueError("保留索引必须严格递增")
        if any(k < 0 or k >= self.total for k in self.kept):
            raise ValueError("保留索引超出范围")
        return self


class StageTimings(BaseModel):
    """检测各阶段耗时（秒），与运行时间表的三列对应"""
    data_loading: float = 0.0
    inconsistencies: float = 0.0
    change_3d: float = 0.0
    images: int = 0
    comparisons: int = 0


def load_detection_config(config_path: str | Path = "configs/detection.json") -> DetectionConfig:
    """
    加载检测配置文件，文件不存在时使用默认配置

    Raises:
        DataFormatError: 文件不是合法 JSON 或字段校验失败
    """
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            return DetectionConfig.model_validate(json.load(f))
    except FileNotFoundError:
        return DetectionConfig()
    except (json.JSONDecodeError, ValidationError) as e:
        raise DataFormatError(f"{config_path}: 检测配置无效: {e}") from e


def load_preset(name: str, presets_dir: str | Path = "configs/presets") -> SurveyPreset:
    """按名称加载巡检预设（wall-scan -> wall_scan.json）"""
    preset_path = Path(presets_dir) / f"{name.replace('-', '_')}.json"
    if not preset_path.exists():
        raise FileNotFoundError(f"巡检预设不存在: {preset_path}")
    with open(preset_path, "r", encoding="utf-8") as f:
        return SurveyPreset.model_validate(json.load(f))


# ---- 评估 ----

class EvaluationSummary(BaseModel):
    """检测结果与真值的比较"""
    n_regions: int = Field(ge=0, description="三维变化区域数")
    n_ground_truth: int = Field(ge=0, description="真值变化物体数")
    matched: int = Field(ge=0, description="在匹配半径内找到区域的真值物体数")
    spurious: int = Field(ge=0, description="距所有真值都超过误检半径的区域数")
    nearest_distances: List[Optional[float]] = Field(default_factory=list, description="每个真值物体到最近区域的距离（米）")


class SweepRow(BaseModel):
    """比较数 m 扫描的一行"""
    max_comparisons: int = Field(ge=1)
    confirmed_2d: int = Field(ge=0, description="确认的二维区域总数")
    regions: int = Field(ge=0)
    matched: int = Field(ge=0)
    spurious: int = Field(ge=0)
    inconsistencies_seconds: float = Field(ge=0)
