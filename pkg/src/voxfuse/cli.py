"""Command-line surface: label generation, evaluation, forward runs, benchmarks.

Exit codes: 0 success, 1 config or usage error, 2 required file not found,
3 parse error, 4 dimension mismatch.
"""

from __future__ import annotations

import argparse
import csv
import importlib.resources
import json
import os
import sys
import time
import tracemalloc

import numpy as np

from .camera import CameraModel, FeatureMap2D, read_kitti_calib
from .config import DATA_ROOT_ENV, PipelineConfig
from .errors import ConfigError, EmptyInput, ParseError, ShapeError, VoxfuseError
from .grid import GridGeometry, SparseVoxelGrid
from .lidar import SparseConvSpec, read_velodyne_bin
from .metrics import compute_metrics
from .occlusion import (
    OcclusionLabel,
    build_volume,
    label_camera,
    label_lidar,
    read_kitti_bitmask,
    read_kitti_label_volume,
    read_volume,
    write_volume,
)
from .pipeline import forward_scene
from .refine import (
    estimate_importance,
    fuse_refined,
    gather_fine,
    gather_semi_fine,
    seeded_projection,
    select_sets,
)
from .synthetic import load_scene, ring_rig

BENCH_HEADER = ["stage", "nonempty", "sets", "dims_x", "dims_y", "dims_z",
                "wall_s", "peak_kb"]

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NOT_FOUND = 2
EXIT_PARSE = 3
EXIT_DIMS = 4


class _Parser(argparse.ArgumentParser):
    """Usage mistakes exit with the config-error code instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _load_config(path: str | None) -> PipelineConfig:
    return PipelineConfig.load(path) if path else PipelineConfig()


def _histogram(labels: np.ndarray) -> dict:
    return {
        "empty": int((labels == OcclusionLabel.EMPTY).sum()),
        "non_occluded": int((labels == OcclusionLabel.NON_OCCLUDED).sum()),
        "occluded": int((labels == OcclusionLabel.OCCLUDED).sum()),
    }


def _label_one(semantics: np.ndarray, pc, rig, geom: GridGeometry, stride: int):
    if pc is None:
        lidar_labels = np.zeros(geom.dims, dtype=np.uint8)
    else:
        lidar_labels = label_lidar(pc, semantics, geom)
    if rig:
        cam_labels = label_camera(rig, semantics, geom, pixel_stride=stride)
    else:
        cam_labels = np.zeros(geom.dims, dtype=np.uint8)
    return build_volume(semantics, lidar_labels, cam_labels, geom)


def _cmd_label_gen(args) -> int:
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    frames = []
    if args.dataset == "synthetic":
        scene = load_scene(args.sequence)
        geom = scene.geometry
        semantics = scene.gt_volume()
        try:
            pc = scene.lidar_scan() if scene.boxes else None
        except EmptyInput:
            pc = None
        rig = ring_rig(scene)
        volume = _label_one(semantics, pc, rig, geom, args.stride)
        name = os.path.splitext(os.path.basename(args.sequence))[0]
        path = os.path.join(out_dir, f"{name}.occ.u8")
        write_volume(path, volume.occlusion.astype(np.uint8), geom)
        frames.append({"name": name, "volume": path,
                       "histogram": _histogram(volume.occlusion)})
    else:
        root = os.environ.get(DATA_ROOT_ENV, "")
        seq_dir = args.sequence if os.path.isabs(args.sequence) \
            else os.path.join(root, args.sequence)
        voxel_dir = os.path.join(seq_dir, "voxels")
        if not os.path.isdir(voxel_dir):
            raise FileNotFoundError(f"no voxels/ directory under {seq_dir}")
        geom = GridGeometry.preset("semantickitti")
        calib_path = os.path.join(seq_dir, "calib.txt")
        rig = [read_kitti_calib(calib_path)] if os.path.exists(calib_path) else []
        label_files = sorted(f for f in os.listdir(voxel_dir) if f.endswith(".label"))
        if not label_files:
            raise FileNotFoundError(f"no .label files under {voxel_dir}")
        for fname in label_files:
            stem = fname[:-len(".label")]
            semantics = read_kitti_label_volume(os.path.join(voxel_dir, fname),
                                                dims=geom.dims).astype(np.int64)
            invalid_path = os.path.join(voxel_dir, f"{stem}.invalid")
            if os.path.exists(invalid_path):
                semantics[read_kitti_bitmask(invalid_path, dims=geom.dims)] = 0
            bin_path = os.path.join(seq_dir, "velodyne", f"{stem}.bin")
            pc = read_velodyne_bin(bin_path) if os.path.exists(bin_path) else None
            volume = _label_one(semantics, pc, rig, geom, args.stride)
            path = os.path.join(out_dir, f"{stem}.occ.u8")
            write_volume(path, volume.occlusion.astype(np.uint8), geom)
            frames.append({"name": stem, "volume": path,
                           "histogram": _histogram(volume.occlusion)})
    summary = {"dataset": args.dataset, "stride": args.stride, "frames": frames}
    with open(os.path.join(out_dir, "labels_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(json.dumps(summary))
    return EXIT_OK


def _cmd_eval(args) -> int:
    pred, _ = read_volume(args.pred)
    gt, _ = read_volume(args.gt)
    report = compute_metrics(pred.astype(np.int64), gt.astype(np.int64),
                             num_classes=args.classes)
    text = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def _resolve_scene(spec: str):
    if spec == "demo":
        path = importlib.resources.files("voxfuse").joinpath("data/demo_scene.json")
        with importlib.resources.as_file(path) as p:
            return load_scene(str(p))
    return load_scene(spec)


def _cmd_forward(args) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config = config.with_overrides(root_seed=args.seed)
    scene = _resolve_scene(args.scene)
    result = forward_scene(scene, config)
    print(result.stage_report())
    out_dir = args.out or config.out_dir
    os.makedirs(out_dir, exist_ok=True)
    geom4 = result.refined.geometry
    write_volume(os.path.join(out_dir, "o4_labels.u8"),
                 result.labels_scale4().astype(np.uint8), geom4)
    write_volume(os.path.join(out_dir, "o1_labels.u8"),
                 result.labels_scale1().astype(np.uint8), result.geometry)
    report = {
        "seeds": result.seeds,
        "timings": result.timings,
        "counts": result.counts,
        "o4_shape": list(result.o4.shape),
        "o1_shape": list(result.o1.shape),
        "refined_equals_fused": result.refine_identity,
        "total_seconds": result.total_seconds,
    }
    with open(os.path.join(out_dir, "forward_report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    return EXIT_OK


def _bench_rig(geom: GridGeometry) -> list[CameraModel]:
    span = np.asarray(geom.dims) * geom.voxel_size
    eye = geom.origin_array + span / 2.0
    cams = []
    for k in range(2):
        theta = np.pi * k
        target = eye + np.array([np.cos(theta), np.sin(theta), 0.0])
        cams.append(CameraModel.from_lookat(eye, target, 16.0, 16.0, 15.5, 15.5, (32, 32)))
    return cams


def _timed_peak(fn):
    tracemalloc.start()
    start = time.perf_counter()
    out = fn()
    wall = time.perf_counter() - start
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return out, wall, peak / 1024.0


def _bench_case(config: PipelineConfig, n: int, dims1: tuple, rows: list):
    geom1 = GridGeometry(origin=(0.0, 0.0, 0.0), voxel_size=config.voxel_size,
                         dims_scale1=dims1, scale=1)
    geom4 = geom1.with_scale(4)
    c = config.lidar_channels
    rng = np.random.default_rng(config.seed_for(f"bench-{n}-{dims1[0]}"))

    def grid_at(scale: int, count: int) -> SparseVoxelGrid:
        g = geom1.with_scale(scale)
        total = int(np.prod(g.dims))
        k = min(count, total)
        if k == 0:
            return SparseVoxelGrid.empty(g, c)
        flat = rng.choice(total, size=k, replace=False)
        coords = np.stack(np.unravel_index(flat, g.dims), axis=1).astype(np.int64)
        return SparseVoxelGrid(g, coords, rng.normal(size=(k, c)))

    fm4 = grid_at(4, n)
    lidar2 = grid_at(2, 2 * n)
    lidar1 = grid_at(1, 4 * n)
    rig = _bench_rig(geom1)
    maps = FeatureMap2D.seeded(rig, config.image_channels, seed=11)
    rie = SparseConvSpec.seeded(c, 1, 3, mode="submanifold", seed=config.seed_for("rie"))
    proj = seeded_projection(c + config.image_channels, c, seed=3)
    sconv1 = SparseConvSpec.seeded(c, c, 3, mode="submanifold", seed=4)
    sconv2 = SparseConvSpec.seeded(c, c, 3, mode="submanifold", seed=5)

    sets, t_select, m_select = _timed_peak(
        lambda: select_sets(estimate_importance(fm4, rie), config.tau1, config.tau2))
    n_sets = sets.semi_fine.shape[0] + sets.fine.shape[0]
    (fs2, ff1), t_gather, m_gather = _timed_peak(
        lambda: (gather_semi_fine(sets, lidar2, rig, maps, proj),
                 gather_fine(sets, lidar1, rig, maps, proj)))
    _, t_refine, m_refine = _timed_peak(
        lambda: fuse_refined(ff1, fs2, fm4, sconv1, sconv2))

    for stage, wall, peak in (("select", t_select, m_select),
                              ("gather", t_gather, m_gather),
                              ("refine", t_refine, m_refine),
                              ("hvfr", t_select + t_gather + t_refine,
                               max(m_select, m_gather, m_refine))):
        rows.append([stage, len(fm4), n_sets, dims1[0], dims1[1], dims1[2],
                     f"{wall:.6f}", f"{peak:.1f}"])


def _cmd_bench(args) -> int:
    config = _load_config(args.config)
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip() != ""]
    except ValueError:
        raise ConfigError(f"--sizes must be comma-separated integers, got {args.sizes!r}")
    rows: list = []
    base = tuple(config.dims)
    doubled = tuple(2 * d for d in base)
    for dims1 in (base, doubled):
        for n in sizes:
            _bench_case(config, n, dims1, rows)
    lines = [",".join(BENCH_HEADER)] + [",".join(str(v) for v in r) for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxfuse",
                     description="Sparse multi-resolution voxel occupancy toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    lg = sub.add_parser("label-gen", help="generate occlusion label volumes")
    lg.add_argument("--dataset", required=True, choices=["semantickitti", "synthetic"])
    lg.add_argument("--sequence", required=True,
                    help="sequence directory (semantickitti) or scene JSON (synthetic)")
    lg.add_argument("--out", required=True, help="output directory")
    lg.add_argument("--stride", type=int, default=4, help="camera pixel stride")
    lg.set_defaults(fn=_cmd_label_gen)

    ev = sub.add_parser("eval", help="score a predicted volume against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--classes", type=int, default=None)
    ev.add_argument("--out", default=None)
    ev.set_defaults(fn=_cmd_eval)

    fw = sub.add_parser("forward", help="run the full pipeline on a scene")
    fw.add_argument("--config", default=None)
    fw.add_argument("--scene", required=True, help="scene JSON path, or 'demo'")
    fw.add_argument("--seed", type=int, default=None, help="override the root seed")
    fw.add_argument("--out", default=None)
    fw.set_defaults(fn=_cmd_forward)

    be = sub.add_parser("bench", help="time refinement stages across sizes")
    be.add_argument("--config", default=None)
    be.add_argument("--sizes", default="0,64,512,4096",
                    help="comma-separated non-empty voxel counts")
    be.add_argument("--out", default=None, help="CSV output path")
    be.set_defaults(fn=_cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"not found: {exc}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ShapeError as exc:
        print(f"dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_DIMS
    except VoxfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
