"""Synthetic axis-aligned urban scenes and CU trajectories.

The world is a Manhattan grid: roads run along multiples of
``road_spacing`` and buildings and vegetation blocks sit inside the city
blocks between them, so CU routes that follow road centerlines can never
enter an obstacle.
"""

import configparser
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigError, TrajectoryRangeError

# Semantic label layout (Z = 28): sky, ground, CU body, vegetation, then
# four building materials x six height bands.
SKY, GROUND, CU_BODY, VEGETATION = 1, 2, 3, 4
MATERIAL_BASE = 5
HEIGHT_BANDS = 6
NUM_CLASSES = 28


@dataclass(frozen=True)
class Material:
    id: int
    name: str
    reflection_magnitude: float
    reflection_phase: float
    semantic_class: int
    height_banded: bool = False

    def __post_init__(self):
        if not 0 < self.reflection_magnitude <= 1:
            raise ConfigError(f"material {self.name}: |gamma| must lie in (0, 1]")
        if not 1 <= self.semantic_class <= NUM_CLASSES:
            raise ConfigError(f"material {self.name}: semantic class out of range")

    @property
    def gamma(self):
        return self.reflection_magnitude * complex(math.cos(self.reflection_phase),
                                                   math.sin(self.reflection_phase))


def _building(id, name, magnitude):
    return Material(id, name, magnitude, math.pi, MATERIAL_BASE + HEIGHT_BANDS * id, True)


CONCRETE = _building(0, "concrete", 0.70)
BRICK = _building(1, "brick", 0.60)
WOOD = _building(2, "wood", 0.45)
GLASS = _building(3, "glass", 0.30)
FOLIAGE = Material(4, "vegetation", 0.25, math.pi, VEGETATION)
ASPHALT = Material(5, "ground", 0.50, math.pi, GROUND)
DEFAULT_PALETTE = (CONCRETE, BRICK, WOOD, GLASS)


@dataclass(frozen=True)
class Pose:
    position: tuple

    def __post_init__(self):
        p = tuple(float(v) for v in self.position)
        if len(p) != 3:
            raise ConfigError("pose position must be a 3-vector")
        if p[2] < 0:
            raise ConfigError("pose height must be non-negative")
        object.__setattr__(self, "position", p)

    @property
    def array(self):
        return np.array(self.position)


@dataclass(frozen=True)
class Box:
    min_corner: tuple
    max_corner: tuple
    material: Material

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min_corner)
        hi = tuple(float(v) for v in self.max_corner)
        if not all(a < b for a, b in zip(lo, hi)):
            raise ConfigError(f"box corners not ordered: {lo} / {hi}")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    def contains(self, point):
        return all(a <= p <= b for a, p, b in zip(self.min_corner, point, self.max_corner))


@dataclass(frozen=True)
class Scene:
    """Immutable world. ``ground_material=None`` makes the ground plane
    non-reflecting (it still renders as ground)."""

    boxes: tuple
    ground_material: Material
    bs: Pose
    cu_waypoints: tuple
    cu_speed: float
    rng_seed: int
    extent: tuple = (360.0, 480.0)
    dt: float = 1.0

    def __post_init__(self):
        if self.bs.position[2] <= 0:
            raise ConfigError("BS must be above ground")
        if not self.cu_waypoints:
            raise ConfigError("CU trajectory needs at least one waypoint")
        for wp in self.cu_waypoints:
            if any(b.contains(wp.position) for b in self.boxes):
                raise ConfigError(f"waypoint {wp.position} lies inside a box")

    @property
    def world_scale(self):
        return float(max(self.extent))

    def trajectory_length(self):
        pts = np.array([w.position for w in self.cu_waypoints])
        return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()) if len(pts) > 1 else 0.0


@dataclass
class SceneConfig:
    # [world]
    extent_x: float = 360.0
    extent_y: float = 480.0
    road_spacing: float = 60.0
    road_width: float = 12.0
    block_margin: float = 2.0
    building_count_min: int = 14
    building_count_max: int = 22
    building_footprint_min: float = 10.0
    building_footprint_max: float = 40.0
    building_height_min: float = 6.0
    building_height_max: float = 32.0
    vegetation_count_min: int = 4
    vegetation_count_max: int = 10
    # [materials]
    palette: tuple = DEFAULT_PALETTE
    vegetation_material: Material = FOLIAGE
    ground_material: Material = ASPHALT
    # [bs]
    bs_x: float = 180.0
    bs_y: float = 240.0
    bs_z: float = 40.0
    # [trajectories]
    trajectory_count: int = 3
    route_length: float = 1000.0
    cu_speed: float = 3.0
    cu_height: float = 1.5
    dt: float = 1.0

    def validate(self):
        if self.extent_x <= 0 or self.extent_y <= 0:
            raise ConfigError("world extent must be positive")
        if self.road_spacing <= self.road_width:
            raise ConfigError("road spacing must exceed road width")
        if self.building_count_min < 0 or self.building_count_max < self.building_count_min:
            raise ConfigError("invalid building count range")
        if self.vegetation_count_min < 0 or self.vegetation_count_max < self.vegetation_count_min:
            raise ConfigError("invalid vegetation count range")
        if self.trajectory_count < 1 or self.route_length < 0:
            raise ConfigError("need at least one trajectory with non-negative length")
        if self.cu_speed <= 0 or self.dt <= 0:
            raise ConfigError("speed and time step must be positive")
        if self.bs_z <= 0:
            raise ConfigError("BS height must be positive")
        return self


def _grid(extent, spacing):
    return np.arange(0.0, extent + 1e-9, spacing)


def _blocks(config):
    xs, ys = _grid(config.extent_x, config.road_spacing), _grid(config.extent_y, config.road_spacing)
    inset = config.road_width / 2 + config.block_margin
    out = []
    for x0, x1 in zip(xs[:-1], xs[1:]):
        for y0, y1 in zip(ys[:-1], ys[1:]):
            if x1 - x0 > 2 * inset and y1 - y0 > 2 * inset:
                out.append((x0 + inset, x1 - inset, y0 + inset, y1 - inset))
    return out


def _overlaps(a, b):
    return all(a.min_corner[i] < b.max_corner[i] and b.min_corner[i] < a.max_corner[i] for i in range(2))


def _place(rng, blocks, size_range, height_range, material, existing, bs, tries=60):
    for _ in range(tries):
        bx0, bx1, by0, by1 = blocks[rng.integers(len(blocks))]
        sx = rng.uniform(size_range[0], min(size_range[1], bx1 - bx0))
        sy = rng.uniform(size_range[0], min(size_range[1], by1 - by0))
        x0 = rng.uniform(bx0, bx1 - sx)
        y0 = rng.uniform(by0, by1 - sy)
        h = rng.uniform(*height_range)
        box = Box((x0, y0, 0.0), (x0 + sx, y0 + sy, h), material)
        if not box.contains(bs) and not any(_overlaps(box, other) for other in existing):
            return box
    return None


def _route(rng, config, start, length):
    """Random walk along the road grid from node ``start`` until at least
    ``length`` metres are covered; returns the corner waypoints and end node."""
    xs, ys = _grid(config.extent_x, config.road_spacing), _grid(config.extent_y, config.road_spacing)
    i, j = start
    points = [(xs[i], ys[j])]
    heading, travelled = None, 0.0
    moves = [(1, 0), (-1, 0), (0, 1), (0, -1)]
    while travelled < length:
        options = [m for m in moves
                   if 0 <= i + m[0] < len(xs) and 0 <= j + m[1] < len(ys)
                   and (heading is None or m != (-heading[0], -heading[1]))]
        if not options:
            break
        # keep straight with probability one half, else pick any legal move
        if heading in options and rng.random() < 0.5:
            move = heading
        else:
            move = options[rng.integers(len(options))]
        ni, nj = i + move[0], j + move[1]
        if move == heading:
            points[-1] = (xs[ni], ys[nj])
        else:
            points.append((xs[ni], ys[nj]))
        travelled += math.hypot(xs[ni] - xs[i], ys[nj] - ys[j])
        i, j, heading = ni, nj, move
    return points, (i, j)


def build_scene(config=None, seed=42):
    """Deterministically build a :class:`Scene` from ``config`` and ``seed``."""
    config = (config or SceneConfig()).validate()
    rng = np.random.default_rng(seed)
    bs = (config.bs_x, config.bs_y, config.bs_z)
    blocks = _blocks(config)
    boxes = []
    if blocks:
        n_build = int(rng.integers(config.building_count_min, config.building_count_max + 1))
        for _ in range(n_build):
            material = config.palette[rng.integers(len(config.palette))]
            box = _place(rng, blocks, (config.building_footprint_min, config.building_footprint_max),
                         (config.building_height_min, config.building_height_max), material, boxes, bs)
            if box is not None:
                boxes.append(box)
        n_veg = int(rng.integers(config.vegetation_count_min, config.vegetation_count_max + 1))
        for _ in range(n_veg):
            box = _place(rng, blocks, (3.0, 6.0), (3.0, 8.0), config.vegetation_material, boxes, bs)
            if box is not None:
                boxes.append(box)
    elif config.building_count_max or config.vegetation_count_max:
        raise ConfigError("world too small for any city block")

    nx = len(_grid(config.extent_x, config.road_spacing))
    ny = len(_grid(config.extent_y, config.road_spacing))
    node = (int(rng.integers(nx)), int(rng.integers(ny)))
    polyline = []
    for _ in range(config.trajectory_count):
        points, node = _route(rng, config, node, config.route_length)
        polyline.extend(points if not polyline else points[1:])
    waypoints = tuple(Pose((x, y, config.cu_height)) for x, y in polyline)
    return Scene(tuple(boxes), config.ground_material, Pose(bs), waypoints, config.cu_speed,
                 int(seed), (config.extent_x, config.extent_y), config.dt)


def sample_cu_positions(scene, n, dt=None):
    """``n`` poses spaced ``cu_speed * dt`` apart in arc length along the route."""
    if n < 1:
        raise ConfigError("need at least one CU pose")
    dt = scene.dt if dt is None else dt
    step = scene.cu_speed * dt
    pts = np.array([w.position for w in scene.cu_waypoints])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1) if len(pts) > 1 else np.zeros(0)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = step * np.arange(n)
    if targets[-1] > cum[-1] * (1 + 1e-12) + 1e-9:
        raise TrajectoryRangeError(
            f"{n} poses need {targets[-1]:.1f} m of route, trajectory has {cum[-1]:.1f} m")
    poses = []
    for s in targets:
        k = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        if k < 0:
            poses.append(Pose(pts[0]))
            continue
        frac = 0.0 if seg[k] == 0 else min(1.0, (s - cum[k]) / seg[k])
        poses.append(Pose(pts[k] + frac * (pts[k + 1] - pts[k])))
    return poses


# -- config file -----------------------------------------------------------
_SECTIONS = {
    "world": ("extent_x", "extent_y", "road_spacing", "road_width", "block_margin",
              "building_count_min", "building_count_max", "building_footprint_min",
              "building_footprint_max", "building_height_min", "building_height_max",
              "vegetation_count_min", "vegetation_count_max"),
    "bs": ("bs_x", "bs_y", "bs_z"),
    "trajectories": ("trajectory_count", "route_length", "cu_speed", "cu_height", "dt"),
}


def _material_line(m):
    return f"{m.reflection_magnitude}, {m.reflection_phase!r}"


def load_scene_config(path):
    """Read an INI scene config. Missing keys keep their defaults.

    The ``[materials]`` section maps material names to
    ``"magnitude, phase"``; ``concrete``, ``brick``, ``wood`` and ``glass``
    form the building palette, ``vegetation`` and ``ground`` the others.
    """
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read scene config {path}")
    config = SceneConfig()
    types = {f.name: f.type for f in fields(SceneConfig)}
    updates = {}
    for section, keys in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        for key in parser[section]:
            if key not in keys:
                raise ConfigError(f"unknown key [{section}] {key}")
            cast = int if types[key] in (int, "int") else float
            try:
                updates[key] = cast(parser[section][key])
            except ValueError:
                raise ConfigError(f"bad value for [{section}] {key}") from None
    if parser.has_section("materials"):
        by_name = {m.name: m for m in DEFAULT_PALETTE + (FOLIAGE, ASPHALT)}
        for name, value in parser["materials"].items():
            if name not in by_name:
                raise ConfigError(f"unknown material {name}")
            try:
                mag, phase = (float(v) for v in value.split(","))
            except ValueError:
                raise ConfigError(f"material {name} needs 'magnitude, phase'") from None
            by_name[name] = replace(by_name[name], reflection_magnitude=mag, reflection_phase=phase)
        updates["palette"] = tuple(by_name[m.name] for m in DEFAULT_PALETTE)
        updates["vegetation_material"] = by_name["vegetation"]
        updates["ground_material"] = by_name["ground"]
    return replace(config, **updates).validate()


def dump_scene_config(config, path):
    parser = configparser.ConfigParser()
    for section, keys in _SECTIONS.items():
        parser[section] = {k: repr(getattr(config, k)) for k in keys}
    materials = {m.name: _material_line(m) for m in config.palette}
    materials["vegetation"] = _material_line(config.vegetation_material)
    materials["ground"] = _material_line(config.ground_material)
    parser["materials"] = materials
    with open(path, "w") as fh:
        parser.write(fh)


def small_config(**overrides):
    """A compact world used by tests and quick experiments."""
    base = SceneConfig(extent_x=120.0, extent_y=120.0, building_count_min=3, building_count_max=5,
                       vegetation_count_min=1, vegetation_count_max=2, bs_x=60.0, bs_y=60.0,
                       bs_z=25.0, building_height_max=20.0, route_length=200.0,
                       trajectory_count=1)
    return replace(base, **overrides)


__all__ = [
    "ASPHALT", "BRICK", "Box", "CONCRETE", "CU_BODY", "DEFAULT_PALETTE", "FOLIAGE", "GLASS",
    "GROUND", "HEIGHT_BANDS", "MATERIAL_BASE", "Material", "NUM_CLASSES", "Pose", "SKY", "Scene",
    "SceneConfig", "VEGETATION", "WOOD", "build_scene", "dump_scene_config",
    "load_scene_config", "sample_cu_positions", "small_config",
]
