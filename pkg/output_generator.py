"""
输出文件生成模块：生成 changes.json、changes.ply、timing.json 以及调试图像
"""
import json
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np

from data_io import GrayImage, save_pgm, write_change_report, write_ply_ellipsoids
from schemas import StageTimings


def save_timing(timings: StageTimings, output_path: str | Path) -> None:
    """
    保存各阶段耗时

    Args:
        timings: 阶段耗时
        output_path: 输出 JSON 文件路径
    """
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)

    with open(output_path, "w", encoding="utf-8") as f:
        json.dump(timings.model_dump(), f, ensure_ascii=False, indent=2)


def format_timing_table(timings: StageTimings) -> str:
    """三列耗时表：Data Loading | Inconsistencies | 3D Change"""
    header = "Data Loading | Inconsistencies | 3D Change"
    row = f"{timings.data_loading:12.3f} | {timings.inconsistencies:15.3f} | {timings.change_3d:9.3f}"
    return f"{header}\n{row}"


def save_distance_image(distance: np.ndarray, output_path: str | Path) -> None:
    """保存不一致性距离图（截断到 8 位）"""
    save_pgm(GrayImage.from_array(np.clip(distance, 0, 255)), output_path)


def save_mask_image(mask: np.ndarray, output_path: str | Path) -> None:
    """保存二值掩码（0 / 255）"""
    save_pgm(GrayImage.from_array(np.where(mask, 255, 0).astype(np.uint8)), output_path)


def debug_image_names(dst_index: int, src_index: int) -> Dict[str, str]:
    """调试图像文件名：dist_<目标>_<源>.pgm 与 mask_<目标>_<源>.pgm"""
    suffix = f"{dst_index:03d}_{src_index:03d}.pgm"
    return {"distance": f"dist_{suffix}", "mask": f"mask_{suffix}"}


def generate_output_files(
    regions: Sequence[Any],
    output_dir: str | Path,
    timings: Optional[StageTimings] = None,
    n_sigma: float = 3.0,
) -> Dict[str, Path]:
    """
    生成所有输出文件

    Args:
        regions: 三维变化区域
        output_dir: 输出目录
        timings: 阶段耗时（为空时不写 timing.json）
        n_sigma: 椭球的 σ 倍数

    Returns:
        生成的文件路径字典
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    files = {}

    # 1. 变化报告
    report_path = output_dir / "changes.json"
    write_change_report(regions, report_path)
    files["changes_json"] = report_path

    # 2. 椭球点云
    ply_path = output_dir / "changes.ply"
    write_ply_ellipsoids(regions, ply_path, n_sigma)
    files["changes_ply"] = ply_path

    # 3. 阶段耗时
    if timings is not None:
        timing_path = output_dir / "timing.json"
        save_timing(timings, timing_path)
        files["timing"] = timing_path

    return files
