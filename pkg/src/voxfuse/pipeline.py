"""Full forward pass: points and camera features in, 21-channel volumes out.

Stages compose the library modules in fixed order — voxelize, pyramid,
densify, camera fusion, importance-driven refinement, prediction head,
fine decoder — with per-stage wall time and non-empty counts recorded.
Learned weights are replaced by seeded deterministic stand-ins throughout,
all split from one root seed.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel, FeatureMap2D
from .config import PipelineConfig
from .densify import MultiScaleFeatures, densify
from .fusion import DeformableAttnParams, fuse, guide_queries, softmax_rows
from .grid import GridGeometry, SparseVoxelGrid, subdivide_coords
from .lidar import PointCloud, SparseConvSpec, multi_scale_stack, sparse_conv, voxelize
from .occlusion import OCC_CHANNELS, SEM_CHANNELS, assemble_output, decoder_input_set
from .refine import (
    RefinementSets,
    estimate_importance,
    fuse_refined,
    gather_fine,
    gather_semi_fine,
    seeded_projection,
    select_sets,
)
from .synthetic import SyntheticScene, ring_rig

OUT_CHANNELS = SEM_CHANNELS + OCC_CHANNELS


@contextmanager
def _timed(timings: dict, name: str):
    start = time.perf_counter()
    yield
    timings[name] = time.perf_counter() - start


@dataclass
class ForwardResult:
    """Every intermediate of one forward pass plus timings and counts."""

    geometry: GridGeometry
    voxelized: SparseVoxelGrid
    pyramid: dict
    dense: SparseVoxelGrid
    fused: SparseVoxelGrid
    sets: RefinementSets
    refined: SparseVoxelGrid
    o4: np.ndarray
    o1: np.ndarray
    decoder_coords: np.ndarray
    refine_identity: bool
    timings: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    @property
    def total_seconds(self) -> float:
        return float(sum(self.timings.values()))

    def labels_scale4(self) -> np.ndarray:
        return volume_labels(self.o4)

    def labels_scale1(self) -> np.ndarray:
        return volume_labels(self.o1)

    def stage_report(self) -> str:
        lines = ["stage            seconds   nonempty"]
        for name, secs in self.timings.items():
            count = self.counts.get(name, "")
            lines.append(f"{name:<16} {secs:8.4f}   {count}")
        lines.append(f"{'total':<16} {self.total_seconds:8.4f}")
        lines.append(f"o4 shape: {self.o4.shape}")
        lines.append(f"o1 shape: {self.o1.shape}")
        lines.append(f"refined equals fused: {self.refine_identity}")
        return "\n".join(lines)


def volume_labels(out21: np.ndarray) -> np.ndarray:
    """Semantic argmax where the visibility argmax is not empty, else 0."""
    out21 = np.asarray(out21)
    sem = np.argmax(out21[..., :SEM_CHANNELS], axis=-1)
    visible = np.argmax(out21[..., SEM_CHANNELS:], axis=-1) != 0
    return np.where(visible, sem, 0).astype(np.int64)


def _head_logits(grid: SparseVoxelGrid, channels: int, seed: int) -> np.ndarray:
    """Set-preserving conv, ReLU, then a 1x1 map to the 21 output channels."""
    spec = SparseConvSpec.seeded(channels, channels, 3, mode="submanifold", seed=seed)
    hidden = np.maximum(sparse_conv(grid, spec).features, 0.0)
    rng = np.random.default_rng(seed + 1)
    w = rng.normal(0.0, 1.0 / np.sqrt(channels), size=(channels, OUT_CHANNELS))
    return hidden @ w


def _split_probs(logits: np.ndarray) -> np.ndarray:
    """Row-normalize the semantic and visibility blocks independently."""
    return np.concatenate([softmax_rows(logits[:, :SEM_CHANNELS]),
                           softmax_rows(logits[:, SEM_CHANNELS:])], axis=1)


def _background(dims: tuple) -> tuple[np.ndarray, np.ndarray]:
    """One-hot empty class and one-hot empty visibility everywhere."""
    sem = np.zeros(tuple(dims) + (SEM_CHANNELS,))
    sem[..., 0] = 1.0
    occ = np.zeros(tuple(dims) + (OCC_CHANNELS,))
    occ[..., 0] = 1.0
    return sem, occ


def forward(pc: PointCloud, rig: list[CameraModel], maps: FeatureMap2D,
            config: PipelineConfig, geometry: GridGeometry | None = None) -> ForwardResult:
    geom = geometry or config.geometry()
    c = config.lidar_channels
    seeds = {name: config.seed_for(name) for name in
             ("backbone", "stack-width", "queries", "fusion", "rie", "gather-semi",
              "gather-fine", "refine-a", "refine-b", "head", "decoder")}
    timings: dict = {}
    counts: dict = {}

    with _timed(timings, "voxelize"):
        f_l1 = voxelize(pc, geom, channels=c)
    counts["voxelize"] = len(f_l1)

    with _timed(timings, "pyramid"):
        pyramid = multi_scale_stack(f_l1, seed=seeds["backbone"])
    counts["pyramid"] = sum(len(g) for g in pyramid.values())

    with _timed(timings, "densify"):
        dense = densify(MultiScaleFeatures.from_stack(pyramid, seed=seeds["stack-width"]))
    counts["densify"] = len(dense)

    with _timed(timings, "fuse"):
        queries = guide_queries(dense, qv_seed=seeds["queries"])
        params = DeformableAttnParams.seeded(maps.channels, c, n_ref=config.n_ref,
                                             seed=seeds["fusion"])
        fused = fuse(queries, rig, maps, params)
    counts["fuse"] = len(fused)

    with _timed(timings, "select"):
        rie = SparseConvSpec.seeded(c, 1, 3, mode="submanifold", seed=seeds["rie"])
        sets = select_sets(estimate_importance(fused, rie), config.tau1, config.tau2)
    counts["select"] = sets.semi_fine.shape[0] + sets.fine.shape[0]

    with _timed(timings, "gather"):
        proj2 = seeded_projection(c + maps.channels, c, seed=seeds["gather-semi"])
        proj1 = seeded_projection(c + maps.channels, c, seed=seeds["gather-fine"])
        fs2 = gather_semi_fine(sets, pyramid[2], rig, maps, proj2)
        ff1 = gather_fine(sets, pyramid[1], rig, maps, proj1)
    counts["gather"] = len(fs2) + len(ff1)

    with _timed(timings, "refine"):
        sconv1 = SparseConvSpec.seeded(c, c, 3, mode="submanifold", seed=seeds["refine-a"])
        sconv2 = SparseConvSpec.seeded(c, c, 3, mode="submanifold", seed=seeds["refine-b"])
        refined = fuse_refined(ff1, fs2, fused, sconv1, sconv2)
    counts["refine"] = len(refined)
    identity = bool(np.array_equal(refined.coords, fused.coords)
                    and np.array_equal(refined.features, fused.features))

    with _timed(timings, "head"):
        probs = _split_probs(_head_logits(refined, c, seeds["head"]))
        geom4 = refined.geometry
        sem_vol, occ_vol = _background(geom4.dims)
        cx, cy, cz = refined.coords.T
        sem_vol[cx, cy, cz] = probs[:, :SEM_CHANNELS]
        occ_vol[cx, cy, cz] = probs[:, SEM_CHANNELS:]
        o4 = assemble_output(sem_vol, occ_vol)
    counts["head"] = len(refined)

    with _timed(timings, "decode"):
        parents = decoder_input_set(o4)
        o1, children = _decode_fine(o4, parents, geom, seeds["decoder"])
    counts["decode"] = children.shape[0]

    return ForwardResult(geometry=geom, voxelized=f_l1, pyramid=pyramid, dense=dense,
                         fused=fused, sets=sets, refined=refined, o4=o4, o1=o1,
                         decoder_coords=children, refine_identity=identity,
                         timings=timings, counts=counts, seeds=seeds)


def _decode_fine(o4: np.ndarray, parents: np.ndarray, geom: GridGeometry,
                 seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Emit 64 scale-1 children per visible coarse voxel.

    Child logits come from a seeded linear map over the parent's 21 channels
    concatenated with the child's normalized offset inside the parent.
    """
    dims1 = geom.with_scale(1).dims
    sem_vol, occ_vol = _background(dims1)
    if parents.shape[0] == 0:
        return assemble_output(sem_vol, occ_vol), np.zeros((0, 3), dtype=np.int64)

    children = subdivide_coords(parents, 4)
    parent_rows = np.repeat(np.arange(parents.shape[0]), 64)
    parent_vecs = o4[parents[:, 0], parents[:, 1], parents[:, 2]][parent_rows]
    offsets = (children - parents[parent_rows] * 4) / 4.0
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1.0 / np.sqrt(OUT_CHANNELS + 3),
                   size=(OUT_CHANNELS + 3, OUT_CHANNELS))
    # identity carry plus a seeded perturbation so children track their parent
    w[:OUT_CHANNELS] += np.eye(OUT_CHANNELS)
    probs = _split_probs(np.hstack([parent_vecs, offsets]) @ w)
    keep = (children < np.asarray(dims1)).all(axis=1)
    ch, pr = children[keep], probs[keep]
    sem_vol[ch[:, 0], ch[:, 1], ch[:, 2]] = pr[:, :SEM_CHANNELS]
    occ_vol[ch[:, 0], ch[:, 1], ch[:, 2]] = pr[:, SEM_CHANNELS:]
    return assemble_output(sem_vol, occ_vol), ch


def scene_inputs(scene: SyntheticScene, config: PipelineConfig,
                 n_cameras: int = 4, image_size: tuple = (64, 64)):
    """LiDAR scan, outward camera ring, and rendered feature maps for a scene."""
    rig = ring_rig(scene, n_cameras=n_cameras, image_size=image_size)
    return scene.lidar_scan(), rig, scene.feature_maps(rig, config.image_channels)


def forward_scene(scene: SyntheticScene, config: PipelineConfig,
                  n_cameras: int = 4, image_size: tuple = (64, 64)) -> ForwardResult:
    pc, rig, maps = scene_inputs(scene, config, n_cameras, image_size)
    return forward(pc, rig, maps, config, geometry=scene.geometry)
