"""BS-view semantic sensing and the three environment feature branches.

The label map is rendered by a pinhole camera at the BS whose optical axis
passes through the CU.  Every pixel ray is intersected exactly with the
scene geometry, so labels are the ground-truth materials rather than the
output of a learned segmenter.
"""

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ConfigError, DimensionError, DomainError
from .scene import CU_BODY, GROUND, HEIGHT_BANDS, NUM_CLASSES, SKY, Box, Material
from .tensorkit import BatchNorm, Linear, Module, ReLU, Sequential, Tensor

DEFAULT_RESOLUTION = 256
DEFAULT_FOV = math.pi / 2
CU_BODY_SIZE = (3.17, 2.0, 1.5)
BAND_HEIGHT = 6.0
D_MIN, D_MAX = 20, 100
DEFAULT_KAPPA = 0.01
GRID = 8

_CU_MATERIAL = Material(-1, "cu-body", 1.0, 0.0, CU_BODY)


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray
    cu_pixel: tuple
    depth: np.ndarray = None
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        h, w = self.labels.shape
        u0, v0 = self.cu_pixel
        if not (0 <= u0 < h and 0 <= v0 < w):
            raise DimensionError(f"CU pixel {self.cu_pixel} outside {h}x{w} map")

    @property
    def shape(self):
        return self.labels.shape


@dataclass(frozen=True)
class SemanticVector:
    j_po: np.ndarray
    j_pc: np.ndarray
    roi_radius: int
    threshold: int
    roi_area: int

    def normalized(self):
        return self.j_po / self.roi_area


# -- rendering -----------------------------------------------------------------
def camera_basis(bs, cu):
    """Unit (forward, right, up) vectors of a camera at ``bs`` looking at ``cu``."""
    forward = np.asarray(cu, dtype=float) - np.asarray(bs, dtype=float)
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise DomainError("camera and target coincide")
    forward /= norm
    ref = np.array([0.0, 0.0, 1.0])
    if np.linalg.norm(np.cross(forward, ref)) < 1e-9:
        ref = np.array([0.0, 1.0, 0.0])  # looking straight down
    right = np.cross(forward, ref)
    right /= np.linalg.norm(right)
    return forward, right, np.cross(right, forward)


def pixel_rays(bs, cu, resolution, fov=DEFAULT_FOV):
    """Ray directions (h, w, 3), not normalized, with the centre pixel
    ``(h // 2, w // 2)`` on the optical axis."""
    h, w = (resolution, resolution) if np.isscalar(resolution) else resolution
    forward, right, up = camera_basis(bs, cu)
    focal = (w / 2) / math.tan(fov / 2)
    x = (np.arange(w) - w // 2) / focal
    y = (h // 2 - np.arange(h)) / focal
    return forward + x[None, :, None] * right + y[:, None, None] * up


def cu_body(cu, heading=0):
    """Vehicle box under the CU antenna, long side along axis ``heading``."""
    length, width, height = CU_BODY_SIZE
    half = [width / 2, width / 2]
    half[heading] = length / 2
    x, y, _ = cu
    return Box((x - half[0], y - half[1], 0.0), (x + half[0], y + half[1], height), _CU_MATERIAL)


def _project_bounds(corners, origin, basis, focal, shape):
    forward, right, up = basis
    rel = corners - origin
    depth = rel @ forward
    h, w = shape
    if np.any(depth <= 1e-6):
        return 0, h, 0, w  # straddles the camera plane: test every pixel
    cols = rel @ right / depth * focal + w // 2
    rows = h // 2 - rel @ up / depth * focal
    r0, r1 = int(max(0, math.floor(rows.min()))), int(min(h, math.ceil(rows.max()) + 1))
    c0, c1 = int(max(0, math.floor(cols.min()))), int(min(w, math.ceil(cols.max()) + 1))
    return r0, r1, c0, c1


def _slab(origin, inv, lo, hi):
    """Entry ray parameter per ray (inf on miss). ``inv`` holds per-axis
    reciprocal direction components, each shaped like the pixel block."""
    enter, leave = None, None
    for a in range(3):
        t1 = (lo[a] - origin[a]) * inv[a]
        t2 = (hi[a] - origin[a]) * inv[a]
        near, far = np.minimum(t1, t2), np.maximum(t1, t2)
        enter = near if enter is None else np.maximum(enter, near)
        leave = far if leave is None else np.minimum(leave, far)
    return np.where((enter < leave) & (enter > 0), enter, np.inf)


def _box_label(box, z):
    m = box.material
    if not m.height_banded:
        return np.full(z.shape, m.semantic_class, dtype=np.int64)
    band = np.clip(np.floor(z / BAND_HEIGHT), 0, HEIGHT_BANDS - 1).astype(np.int64)
    return m.semantic_class + band


def render_label_map(scene, bs=None, cu=None, resolution=DEFAULT_RESOLUTION, fov=DEFAULT_FOV,
                     heading=0):
    """Semantic label map and depth (metres along each ray; inf for sky)."""
    h, w = (resolution, resolution) if np.isscalar(resolution) else resolution
    if min(h, w) < 16:
        raise ConfigError(f"resolution must be at least 16 pixels, got {resolution}")
    origin = np.asarray(getattr(bs if bs is not None else scene.bs, "position", bs), dtype=float)
    target = np.asarray(getattr(cu, "position", cu), dtype=float)
    basis = camera_basis(origin, target)
    focal = (w / 2) / math.tan(fov / 2)
    dirs = pixel_rays(origin, target, (h, w), fov)
    scale = np.linalg.norm(dirs, axis=-1)
    # exact zeros would give 0 * inf; a 1e-300 nudge moves no pixel
    safe = np.where(dirs == 0, 1e-300, dirs)
    inv = [1.0 / safe[..., a] for a in range(3)]

    labels = np.full((h, w), SKY, dtype=np.int64)
    t_best = np.full((h, w), np.inf)
    down = dirs[..., 2] < 0
    t_ground = np.where(down, -origin[2] / np.where(down, dirs[..., 2], -1.0), np.inf)
    labels[down] = GROUND
    t_best = np.minimum(t_best, t_ground)

    for box in tuple(scene.boxes) + (cu_body(target, heading),):
        lo, hi = np.array(box.min_corner), np.array(box.max_corner)
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                            for z in (lo[2], hi[2])])
        r0, r1, c0, c1 = _project_bounds(corners, origin, basis, focal, (h, w))
        if r0 >= r1 or c0 >= c1:
            continue
        sub = dirs[r0:r1, c0:c1]
        t = _slab(origin, [v[r0:r1, c0:c1] for v in inv], lo, hi)
        closer = t < t_best[r0:r1, c0:c1]
        if not closer.any():
            continue
        z = origin[2] + t[closer] * sub[closer][:, 2]
        lab = labels[r0:r1, c0:c1]
        lab[closer] = _box_label(box, z)
        t_best[r0:r1, c0:c1] = np.where(closer, t, t_best[r0:r1, c0:c1])

    depth = t_best * scale
    return LabelMap(labels.astype(np.uint8), (h // 2, w // 2), depth)


def render_for_pose(scene, poses, index, resolution=DEFAULT_RESOLUTION, fov=DEFAULT_FOV):
    """Render the view of ``poses[index]`` with the vehicle aligned to its
    direction of travel."""
    here = poses[index].array
    other = poses[index + 1].array if index + 1 < len(poses) else poses[index - 1].array \
        if index > 0 else here
    step = np.abs(other - here)
    heading = int(step[1] > step[0])
    return render_label_map(scene, scene.bs, poses[index], resolution, fov, heading)


# -- ROI semantics ---------------------------------------------------------------
def adaptive_roi_radius(label_map, d_min=D_MIN, d_max=D_MAX):
    """Linear density rule: dense surroundings shrink the ROI."""
    labels = label_map.labels
    u0, v0 = label_map.cu_pixel
    h, w = labels.shape
    window = labels[max(0, u0 - d_max):min(h, u0 + d_max + 1), max(0, v0 - d_max):min(w, v0 + d_max + 1)]
    rho = float(np.mean((window != SKY) & (window != GROUND)))
    return int(round(d_max - (d_max - d_min) * rho))


def roi_mask(shape, center, radius):
    h, w = shape
    u0, v0 = center
    u = np.arange(h)[:, None] - u0
    v = np.arange(w)[None, :] - v0
    return u * u + v * v <= radius * radius


def count_threshold(area, kappa):
    """ceil(kappa * area) evaluated exactly for decimal kappa."""
    k = Fraction(str(kappa)) if isinstance(kappa, float) else Fraction(kappa)
    return int(math.ceil(k * area))


def apply_threshold(j_pc, threshold):
    j_pc = np.asarray(j_pc)
    return np.where(j_pc < threshold, 0, j_pc)


def merge_labels(labels, z_eff, num_classes=NUM_CLASSES):
    """Map classes 1..num_classes onto 1..z_eff in contiguous runs."""
    if not 1 <= z_eff <= num_classes:
        raise ConfigError(f"z_eff must lie in 1..{num_classes}")
    labels = np.asarray(labels, dtype=np.int64)
    return 1 + (labels - 1) * z_eff // num_classes


def roi_semantic_vector(label_map, d_r, kappa=DEFAULT_KAPPA, threshold=None, z_eff=None):
    """Per-class pixel counts inside the disc of radius ``d_r`` around the CU
    pixel, with classes below the count threshold zeroed."""
    if d_r < 1:
        raise ConfigError("ROI radius must be at least one pixel")
    if not 0 <= kappa < 1:
        raise ConfigError("kappa must lie in [0, 1)")
    z = label_map.num_classes if z_eff is None else z_eff
    labels = label_map.labels if z_eff is None else merge_labels(label_map.labels, z_eff,
                                                                 label_map.num_classes)
    mask = roi_mask(labels.shape, label_map.cu_pixel, d_r)
    area = int(mask.sum())
    j_pc = np.bincount(np.asarray(labels[mask], dtype=np.int64), minlength=z + 1)[1:z + 1]
    j_r = count_threshold(area, kappa) if threshold is None else int(threshold)
    return SemanticVector(apply_threshold(j_pc, j_r), j_pc, int(d_r), j_r, area)


# -- global descriptor -----------------------------------------------------------
def grid_descriptor(label_map, grid=GRID):
    """(grid, grid, Z + 1): per-cell class histogram (raw pixel counts) and
    mean inverse depth (sky counts as zero)."""
    labels = label_map.labels
    h, w = labels.shape
    if h % grid or w % grid:
        raise DimensionError(f"{h}x{w} map is not divisible into a {grid}x{grid} grid")
    z = label_map.num_classes
    ch, cw = h // grid, w // grid
    cell = (np.arange(h)[:, None] // ch) * grid + np.arange(w)[None, :] // cw
    idx = cell * z + (labels.astype(np.int64) - 1)
    hist = np.bincount(idx.ravel(), minlength=grid * grid * z).reshape(grid, grid, z)
    out = np.empty((grid, grid, z + 1))
    out[..., :z] = hist
    if label_map.depth is None:
        out[..., z] = 0.0
    else:
        with np.errstate(divide="ignore"):
            inv = np.where(np.isfinite(label_map.depth), 1.0 / label_map.depth, 0.0)
        out[..., z] = inv.reshape(grid, ch, grid, cw).mean(axis=(1, 3))
    return out


def descriptor_features(descriptor, pixels_per_cell, depth_scale=10.0):
    """Flatten a descriptor to encoder input: histogram fractions and inverse
    depth in units of ``1 / depth_scale``."""
    d = np.array(descriptor, dtype=float)
    d[..., :-1] /= pixels_per_cell
    d[..., -1] *= depth_scale
    return d.reshape(*d.shape[:-3], -1)


def location_input(bs, cu, world_scale):
    """The 6-vector [p_u; p_c] divided by the world extent."""
    p = np.concatenate([np.asarray(getattr(cu, "position", cu), dtype=float),
                        np.asarray(getattr(bs, "position", bs), dtype=float)], axis=-1)
    if not np.all(np.isfinite(p)):
        raise DomainError("non-finite position")
    return p / world_scale


# -- learned encoders --------------------------------------------------------------
class LocationEncoder(Module):
    """Two FC blocks (affine, batch norm, ReLU) from the scaled 6-vector."""

    def __init__(self, rng, in_features=6, width=64, zero_init=False):
        self.block1 = Sequential(Linear(in_features, width, rng, zero_init=zero_init),
                                 BatchNorm(width), ReLU())
        self.block2 = Sequential(Linear(width, width, rng, zero_init=zero_init),
                                 BatchNorm(width), ReLU())
        self.out_features = width

    def forward(self, x):
        if not np.all(np.isfinite(x.data if isinstance(x, Tensor) else x)):
            raise DomainError("non-finite location input")
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self.block2(self.block1(x))


class ImageEncoder(Module):
    def __init__(self, rng, in_features=GRID * GRID * (NUM_CLASSES + 1), width=128, zero_init=False):
        self.fc = Linear(in_features, width, rng, zero_init=zero_init)
        self.out_features = width

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return ReLU()(self.fc(x))


class SemanticEncoder(Module):
    def __init__(self, rng, in_features=NUM_CLASSES, width=64, zero_init=False):
        self.fc1 = Linear(in_features, width, rng, zero_init=zero_init)
        self.fc2 = Linear(width, width, rng, zero_init=zero_init)
        self.out_features = width

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return ReLU()(self.fc2(ReLU()(self.fc1(x))))


# -- estimator wrappers ---------------------------------------------------------------
class ROISemanticTransformer(TransformerMixin, BaseEstimator):
    """Label maps -> area-normalized thresholded ROI counts, shape (N, z_eff).

    ``radius`` is ``"adaptive"`` or a fixed pixel radius.
    """

    def __init__(self, radius="adaptive", kappa=DEFAULT_KAPPA, z_eff=NUM_CLASSES):
        self.radius = radius
        self.kappa = kappa
        self.z_eff = z_eff

    def fit(self, X, y=None):
        if self.radius != "adaptive" and int(self.radius) < 1:
            raise ConfigError("ROI radius must be at least one pixel")
        self.n_features_out_ = self.z_eff
        return self

    def _radius(self, label_map):
        return adaptive_roi_radius(label_map) if self.radius == "adaptive" else int(self.radius)

    def transform(self, X):
        return np.stack([roi_semantic_vector(m, self._radius(m), self.kappa, z_eff=self.z_eff)
                         .normalized() for m in X])


class GridDescriptorTransformer(TransformerMixin, BaseEstimator):
    """Label maps -> flattened, normalized grid descriptors."""

    def __init__(self, grid=GRID, depth_scale=10.0):
        self.grid = grid
        self.depth_scale = depth_scale

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        out = []
        for m in X:
            h, w = m.shape
            out.append(descriptor_features(grid_descriptor(m, self.grid),
                                           (h // self.grid) * (w // self.grid), self.depth_scale))
        return np.stack(out)


__all__ = [
    "GridDescriptorTransformer", "ImageEncoder", "LabelMap", "LocationEncoder",
    "ROISemanticTransformer", "SemanticEncoder", "SemanticVector", "adaptive_roi_radius",
    "apply_threshold", "camera_basis", "count_threshold", "cu_body", "descriptor_features",
    "grid_descriptor", "location_input", "merge_labels", "pixel_rays", "render_for_pose",
    "render_label_map", "roi_mask", "roi_semantic_vector",
]
