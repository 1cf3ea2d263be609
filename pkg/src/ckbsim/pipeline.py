"""Environment dataset generation: scene, poses, label maps, features and
ray-traced channels for every CU position."""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict

import numpy as np

from .datastore import DatasetManifest, EnvSample, split
from .envsense import (DEFAULT_FOV, DEFAULT_KAPPA, DEFAULT_RESOLUTION, GRID, adaptive_roi_radius,
                       grid_descriptor, render_for_pose, roi_semantic_vector)
from .raytrace import ArrayGeometry, link_channel
from .scene import NUM_CLASSES, SceneConfig, build_scene, sample_cu_positions


def channel_scale(channels):
    """Standard deviation of every real and imaginary entry, rounded to the
    nearest power of two so that scaling by it is exact in floating point."""
    flat = np.concatenate([np.asarray(h, dtype=np.complex128).ravel() for h in channels])
    std = float(np.sqrt(np.mean(np.concatenate([flat.real, flat.imag]) ** 2)
                        - np.mean(np.concatenate([flat.real, flat.imag])) ** 2))
    if not np.isfinite(std) or std <= 0:
        return 1.0
    return float(2.0 ** round(math.log2(std)))


def _one(args):
    scene, poses, i, resolution, fov, kappa, max_reflections, max_paths = args
    pose = poses[i]
    _, channel = link_channel(scene, scene.bs, pose, ArrayGeometry.horizontal(),
                              ArrayGeometry.horizontal(), max_reflections, max_paths)
    label_map = render_for_pose(scene, poses, i, resolution, fov)
    d_r = adaptive_roi_radius(label_map)
    sem = roi_semantic_vector(label_map, d_r, kappa)
    return EnvSample(i, scene.bs.position, pose.position, label_map.labels, sem.j_po,
                     grid_descriptor(label_map, GRID), channel.entries, d_r)


def generate_dataset(config=None, n=995, seed=42, resolution=DEFAULT_RESOLUTION,
                     fov=DEFAULT_FOV, kappa=DEFAULT_KAPPA, max_reflections=2, max_paths=20,
                     workers=1):
    """Returns (samples, manifest). ``c_h`` is computed over the training part
    of the default 3:1 split seeded with ``seed``."""
    config = config or SceneConfig()
    scene = build_scene(config, seed)
    poses = sample_cu_positions(scene, n)
    jobs = [(scene, poses, i, resolution, fov, kappa, max_reflections, max_paths)
            for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            samples = list(pool.map(_one, jobs, chunksize=16))
    else:
        samples = [_one(job) for job in jobs]
    if n >= 2:
        train, _ = split(samples, (3, 1), seed)
    else:
        train = samples
    extra = {"world_scale": scene.world_scale, "fov": fov, "kappa": kappa,
             "max_reflections": max_reflections, "max_paths": max_paths,
             "scene": {k: v for k, v in asdict(config).items() if isinstance(v, (int, float))}}
    h, w = (resolution, resolution) if np.isscalar(resolution) else resolution
    manifest = DatasetManifest(n, NUM_CLASSES, 16, 16, (h, w), GRID,
                               channel_scale([s.H for s in train]), seed, extra=extra)
    return samples, manifest


__all__ = ["channel_scale", "generate_dataset"]
