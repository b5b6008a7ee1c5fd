#!/usr/bin/env python
"""
命令行入口：generate | filter | detect | info | evaluate | sweep

退出码：0 成功，1 运行/IO 错误，2 用法或参数校验错误
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

# 日志配置读取环境变量，必须先加载 .env
load_dotenv()

from pydantic import ValidationError  # noqa: E402

from data_io import GROUND_TRUTH_FILE, load_change_report, load_manifest, load_survey, save_manifest  # noqa: E402
from errors import ChangeDetectionError  # noqa: E402
from evaluation import evaluate_detections, format_sweep_table, sweep_max_comparisons  # noqa: E402
from geometry import set_worker_threads  # noqa: E402
from logging_config import get_logger, log_exception, log_performance  # noqa: E402
from motion_filter import filter_low_movement  # noqa: E402
from output_generator import format_timing_table, generate_output_files  # noqa: E402
from pipeline import run_detection  # noqa: E402
from schemas import DetectionConfig, PathSpec, RunConfig, SceneSpec, load_detection_config, load_preset  # noqa: E402
from synthetic import change_centroids, load_ground_truth, make_survey  # noqa: E402

logger = get_logger(__name__)

CONFIG_DIR = Path(__file__).resolve().parent / "configs"
DEFAULT_DETECTION_CONFIG = CONFIG_DIR / "detection.json"
PRESETS_DIR = CONFIG_DIR / "presets"
DEFAULT_MANIFEST = "kept.json"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# 命令行参数 -> (配置分组, 字段)
DETECTION_FLAGS = {
    "displacement_threshold": ("motion_filter", "displacement_threshold"),
    "min_tracked_fraction": ("motion_filter", "min_tracked_fraction"),
    "max_features": ("motion_filter", "max_features"),
    "patch_radius": ("motion_filter", "patch_radius"),
    "pyramid_levels": ("motion_filter", "pyramid_levels"),
    "search_radius": ("motion_filter", "search_radius"),
    "quality_level": ("motion_filter", "quality_level"),
    "intensity_threshold": ("inconsistency", "intensity_threshold"),
    "kernel_radius": ("inconsistency", "kernel_radius"),
    "min_region_area": ("inconsistency", "min_region_area"),
    "max_comparisons": ("inconsistency", "max_comparisons"),
    "min_confirming_pairs": ("inconsistency", "min_confirming_pairs"),
    "confirm_fraction": ("inconsistency", "confirm_fraction"),
    "occlusion_tolerance": ("inconsistency", "occlusion_tolerance"),
    "sigma_px": ("uncertainty", "sigma_px"),
    "confidence": ("uncertainty", "confidence"),
    "tau_squared": ("uncertainty", "tau_squared"),
    "min_distance": ("change_3d", "min_distance"),
    "n_sigma": ("change_3d", "n_sigma"),
}


def build_detection_config(args: argparse.Namespace) -> DetectionConfig:
    """配置文件为基础，命令行参数覆盖单个字段（重新校验）"""
    base = load_detection_config(args.config).model_dump()
    for flag, (section, name) in DETECTION_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            base[section][name] = value
    return DetectionConfig.model_validate(base)


def _add_detection_flags(parser: argparse.ArgumentParser, stages: List[str]) -> None:
    parser.add_argument("--config", default=str(DEFAULT_DETECTION_CONFIG), help="检测配置文件")
    parser.add_argument("--threads", type=int, default=None, help="并行线程上限（默认使用全部核心）")
    if "motion_filter" in stages:
        parser.add_argument("--displacement-threshold", type=float, help="中位位移阈值（像素）")
        parser.add_argument("--min-tracked-fraction", type=float, help="最低跟踪成功比例")
        parser.add_argument("--max-features", type=int, help="每幅图像最多角点数")
        parser.add_argument("--patch-radius", type=int, help="特征块半径（像素）")
        parser.add_argument("--pyramid-levels", type=int, help="金字塔层数")
        parser.add_argument("--search-radius", type=int, help="每层搜索半径（像素）")
        parser.add_argument("--quality-level", type=float, help="角点响应相对最大响应的下限")
    if "inconsistency" in stages:
        parser.add_argument("--intensity-threshold", type=float, help="二值化阈值 θ")
        parser.add_argument("--kernel-radius", type=int, help="开运算核半径（像素）")
        parser.add_argument("--min-region-area", type=float, help="最小区域面积（像素²）")
        parser.add_argument("--max-comparisons", type=int, help="每幅图像比较的邻居数 m")
        parser.add_argument("--min-confirming-pairs", type=int, help="确认所需的最少图像对")
        parser.add_argument("--confirm-fraction", type=float, help="确认所需的图像对比例")
        parser.add_argument("--occlusion-tolerance", type=float, help="遮挡判断距离容差（米）")
        parser.add_argument("--sigma-px", type=float, help="重投影像素标准差")
        parser.add_argument("--confidence", type=float, help="门限置信度（τ² 为 χ²₂ 分位数）")
        parser.add_argument("--tau-squared", type=float, help="马氏距离门限 τ²")
        parser.add_argument("--min-distance", type=float, help="近相机剔除距离（米）")
        parser.add_argument("--n-sigma", type=float, help="椭球 σ 倍数")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="change-detect", description="基于三维模型的几何变化检测")
    subparsers = parser.add_subparsers(dest="command", required=True)

    generate = subparsers.add_parser("generate", help="生成合成巡检数据集")
    generate.add_argument("--preset", default="wall-scan", choices=["wall-scan", "rotate-in-place"])
    generate.add_argument("--change", default="none", choices=["none", "cube"], help="是否注入变化物体")
    generate.add_argument("--out", required=True, help="数据集输出目录")
    generate.add_argument("--seed", type=int, default=0)
    generate.add_argument("--waypoints", type=int, help="路径点数量")
    generate.add_argument("--noise-sigma", type=float, help="图像噪声 σ（灰度）")
    generate.add_argument("--rotation-sigma", type=float, help="位姿旋转扰动 σ（弧度）")
    generate.add_argument("--translation-sigma", type=float, help="位姿平移扰动 σ（米）")

    filter_ = subparsers.add_parser("filter", help="过滤低运动图像")
    filter_.add_argument("--dataset", required=True)
    filter_.add_argument("--out", help=f"保留清单路径（默认 <dataset>/{DEFAULT_MANIFEST}）")
    _add_detection_flags(filter_, ["motion_filter"])

    detect = subparsers.add_parser("detect", help="检测变化")
    detect.add_argument("--dataset", required=True)
    detect.add_argument("--out", required=True, help="结果输出目录")
    detect.add_argument("--manifest", help="保留图像清单")
    detect.add_argument("--debug-images", action="store_true", help="保存逐对距离图与掩码")
    detect.add_argument("--seed", type=int, default=0, help="随运行记录的种子；检测流程是确定性的，不使用随机数")
    _add_detection_flags(detect, ["inconsistency"])

    info = subparsers.add_parser("info", help="显示数据集信息")
    info.add_argument("--dataset", required=True)

    evaluate = subparsers.add_parser("evaluate", help="将 changes.json 与真值比较")
    evaluate.add_argument("--dataset", required=True)
    evaluate.add_argument("--report", required=True, help="changes.json 路径")
    evaluate.add_argument("--match-radius", type=float, default=0.3)
    evaluate.add_argument("--spurious-radius", type=float, default=0.5)

    sweep = subparsers.add_parser("sweep", help="扫描比较数 m")
    sweep.add_argument("--dataset", required=True)
    sweep.add_argument("--m-values", type=int, nargs="+", default=[2, 3, 4, 5, 6])
    _add_detection_flags(sweep, ["inconsistency"])

    return parser


def cmd_generate(args: argparse.Namespace) -> int:
    preset = load_preset(args.preset, PRESETS_DIR)
    scene_updates: Dict[str, Any] = {}
    for name in ("noise_sigma", "rotation_sigma", "translation_sigma"):
        if getattr(args, name) is not None:
            scene_updates[name] = getattr(args, name)
    if args.change == "cube":
        if preset.change_cube is None:
            raise ChangeDetectionError(f"预设 {args.preset} 未定义变化物体")
        scene_updates["changes"] = [preset.change_cube.model_dump()]
    scene = SceneSpec.model_validate({**preset.scene.model_dump(), **scene_updates})
    path_updates = {"waypoints": args.waypoints} if args.waypoints is not None else {}
    path = PathSpec.model_validate({**preset.path.model_dump(), **path_updates})

    dataset = make_survey(scene, path, preset.camera, args.out, seed=args.seed)
    print(f"generated {len(dataset)} images, {len(scene.changes)} changes -> {args.out}")
    return EXIT_OK


def cmd_filter(args: argparse.Namespace) -> int:
    config = build_detection_config(args)
    set_worker_threads(args.threads)
    dataset = load_survey(args.dataset)
    with log_performance("低运动过滤", logger, {"images": len(dataset)}):
        kept = filter_low_movement(dataset.load_images(), config.motion_filter)
    out = Path(args.out) if args.out else Path(args.dataset) / DEFAULT_MANIFEST
    save_manifest(kept, len(dataset), out)
    print(f"kept {len(kept)}/{len(dataset)} -> {out}")
    return EXIT_OK


def cmd_detect(args: argparse.Namespace) -> int:
    run = RunConfig(
        dataset_root=Path(args.dataset),
        output_dir=Path(args.out),
        detection=build_detection_config(args),
        manifest=Path(args.manifest) if args.manifest else None,
        debug_images=args.debug_images,
        seed=args.seed,
        threads=args.threads,
    )
    logger.info(
        f"开始检测 - 数据集: {run.dataset_root}",
        extra={"context": {"dataset": str(run.dataset_root), "output": str(run.output_dir), "seed": run.seed}},
    )
    set_worker_threads(run.threads)
    dataset = load_survey(run.dataset_root)
    kept = None
    if run.manifest is not None:
        manifest = load_manifest(run.manifest)
        if manifest.total != len(dataset):
            raise ChangeDetectionError(f"清单图像总数 {manifest.total} 与数据集 {len(dataset)} 不一致")
        kept = manifest.kept
    debug_dir = run.output_dir / "debug" if run.debug_images else None

    result = run_detection(dataset, run.detection, kept=kept, debug_dir=debug_dir)
    generate_output_files(result.regions, run.output_dir, result.timings, run.detection.change_3d.n_sigma)

    print(f"regions: {len(result.regions)}")
    print(format_timing_table(result.timings))
    return EXIT_OK


def cmd_info(args: argparse.Namespace) -> int:
    dataset = load_survey(args.dataset)
    mesh = dataset.load_mesh()
    k = dataset.intrinsics
    low, high = mesh.bounds()
    print(f"dataset: {dataset.root}")
    print(f"images: {len(dataset)}")
    print(f"intrinsics: fx={k.fx} fy={k.fy} cx={k.cx} cy={k.cy} {k.width}x{k.height}")
    print(f"mesh: {len(mesh.vertices)} vertices, {mesh.n_triangles} triangles, bounds {low.tolist()} - {high.tolist()}")
    ground_truth = Path(args.dataset) / GROUND_TRUTH_FILE
    if ground_truth.exists():
        print(f"ground truth changes: {len(load_ground_truth(ground_truth).changes)}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    ground_truth = load_ground_truth(Path(args.dataset) / GROUND_TRUTH_FILE)
    summary = evaluate_detections(
        load_change_report(args.report), change_centroids(ground_truth),
        match_radius=args.match_radius, spurious_radius=args.spurious_radius,
    )
    print(json.dumps(summary.model_dump(), ensure_ascii=False, indent=2))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = build_detection_config(args)
    set_worker_threads(args.threads)
    dataset = load_survey(args.dataset)
    ground_truth_path = Path(args.dataset) / GROUND_TRUTH_FILE
    centroids = change_centroids(load_ground_truth(ground_truth_path)) if ground_truth_path.exists() else []
    rows = sweep_max_comparisons(dataset, centroids, config, args.m_values)
    print(format_sweep_table(rows))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "filter": cmd_filter,
    "detect": cmd_detect,
    "info": cmd_info,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        return COMMANDS[args.command](args)
    except ValidationError as e:
        print(f"error: 参数校验失败: {e.errors()[0].get('msg', e)}", file=sys.stderr)
        return EXIT_USAGE
    except (ChangeDetectionError, OSError) as e:
        log_exception(logger, f"{args.command} 失败: {e}", exc_info=False, extra_context={"command": args.command})
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
