"""
pytest 配置和共享 fixtures
"""
import tempfile
from pathlib import Path

import cv2
import numpy as np
import pytest

from data_io import GrayImage
from geometry import CameraIntrinsics, build_bvh
from schemas import SurveyPreset, load_preset
from synthetic import build_scene, make_survey

PRESETS_DIR = Path(__file__).resolve().parent.parent / "configs" / "presets"


@pytest.fixture
def temp_dir():
    """创建临时目录"""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def small_intrinsics():
    """320×240 测试相机"""
    return CameraIntrinsics(fx=200.0, fy=200.0, cx=160.0, cy=120.0, width=320, height=240)


@pytest.fixture
def textured_image():
    """平滑随机纹理（适合角点检测与跟踪）"""
    rng = np.random.default_rng(7)
    noise = rng.uniform(0, 255, (240, 320)).astype(np.float32)
    smooth = cv2.GaussianBlur(noise, (0, 0), 3.0)
    smooth = (smooth - smooth.min()) / (smooth.max() - smooth.min()) * 255.0
    return GrayImage.from_array(smooth)


@pytest.fixture(scope="session")
def wall_scan_preset() -> SurveyPreset:
    return load_preset("wall-scan", PRESETS_DIR)


@pytest.fixture(scope="session")
def room_scene(wall_scan_preset):
    """默认房间（无变化物体）及其 BVH"""
    scene = build_scene(wall_scan_preset.scene)
    return scene, build_bvh(scene.model_mesh)


@pytest.fixture(scope="session")
def no_change_survey(tmp_path_factory, wall_scan_preset):
    """7 个位姿的扫墙数据集，无噪声、无变化"""
    root = tmp_path_factory.mktemp("no_change")
    return make_survey(wall_scan_preset.scene, wall_scan_preset.path, wall_scan_preset.camera, root, seed=0)


@pytest.fixture(scope="session")
def cube_survey(tmp_path_factory, wall_scan_preset):
    """7 个位姿的扫墙数据集，巡检时多出一个 0.3 米立方体"""
    root = tmp_path_factory.mktemp("cube")
    scene = wall_scan_preset.scene.model_copy(update={"changes": [wall_scan_preset.change_cube]})
    return make_survey(scene, wall_scan_preset.path, wall_scan_preset.camera, root, seed=0)


@pytest.fixture
def reset_logging():
    """重置日志配置"""
    import logging

    # 保存原始配置
    original_handlers = logging.root.handlers[:]
    original_level = logging.root.level

    yield

    # 恢复原始配置
    logging.root.handlers = original_handlers
    logging.root.setLevel(original_level)
