"""Image-method ray tracing and narrowband MIMO channel assembly.

Every reflecting surface is an axis-aligned rectangle (a box face) or the
infinite ground plane ``z = 0``.  For each ordered face sequence the
transmitter is mirrored successively across the faces; the reflection
points are recovered by back-projecting from the receiver, and every leg
of the resulting polyline is occlusion-tested against all boxes.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, DegenerateGeometryError, DomainError

SPEED_OF_LIGHT = 299792458.0
CARRIER_HZ = 28e9
WAVELENGTH = SPEED_OF_LIGHT / CARRIER_HZ

_T_EPS = 1e-9
_FACE_TOL = 1e-9


@dataclass(frozen=True)
class PathComponent:
    delay: float
    aod: tuple
    aoa: tuple
    gain: complex
    distance: float
    interactions: int
    gammas: tuple = ()
    points: tuple = ()
    faces: tuple = ()

    def line(self):
        return (f"{self.distance:.9f} {self.interactions} {self.delay:.12e} "
                f"{self.aod[0]:.9f} {self.aod[1]:.9f} {self.aoa[0]:.9f} {self.aoa[1]:.9f} "
                f"{self.gain.real:.9e} {self.gain.imag:.9e}")


@dataclass
class PathSet:
    paths: list = field(default_factory=list)
    wavelength: float = WAVELENGTH

    def __len__(self):
        return len(self.paths)

    def __iter__(self):
        return iter(self.paths)

    def __getitem__(self, i):
        return self.paths[i]

    def dump(self):
        """One path per line: d_m I_m tau aod_az aod_el aoa_az aoa_el re(a) im(a)."""
        header = "# distance interactions delay aod_az aod_el aoa_az aoa_el gain_re gain_im"
        return "\n".join([header] + [p.line() for p in self.paths]) + "\n"


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array.

    ``orientation`` rotates global direction vectors into the array frame,
    in which the elements lie in the local y-z plane and broadside is +x.
    """

    rows: int = 4
    cols: int = 4
    spacing: float = WAVELENGTH / 2
    orientation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.spacing <= 0:
            raise DomainError("array needs positive dimensions and spacing")

    @property
    def size(self):
        return self.rows * self.cols

    @classmethod
    def horizontal(cls, rows=4, cols=4, spacing=WAVELENGTH / 2):
        """Array lying in the horizontal plane with broadside pointing up."""
        return cls(rows, cols, spacing, ((0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)))


@dataclass(frozen=True)
class ChannelMatrix:
    entries: np.ndarray
    wavelength: float = WAVELENGTH

    def __post_init__(self):
        if not np.all(np.isfinite(self.entries)):
            raise DomainError("channel matrix has non-finite entries")

    @property
    def shape(self):
        return self.entries.shape


def path_gain(distance, gammas, wavelength=WAVELENGTH):
    """Complex amplitude of one path: free-space spreading, per-bounce
    reflection coefficients and propagation phase."""
    if distance <= 0:
        raise DomainError(f"path length must be positive, got {distance}")
    if wavelength <= 0:
        raise DomainError(f"wavelength must be positive, got {wavelength}")
    product = complex(np.prod(np.asarray(gammas, dtype=complex))) if len(gammas) else 1.0
    phase = -2.0 * math.pi * distance / wavelength
    return wavelength / (4 * math.pi * distance) * product * complex(math.cos(phase), math.sin(phase))


def direction_angles(vector):
    """(azimuth, elevation) of a direction: azimuth from +x toward +y in the
    horizontal plane, elevation from horizontal, positive up."""
    x, y, z = vector
    return math.atan2(y, x), math.atan2(z, math.hypot(x, y))


def steering_vector(geom, direction, wavelength=WAVELENGTH):
    az, el = direction
    u = np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    local = np.asarray(geom.orientation) @ u
    # cos(el) sin(az) and sin(el) of the local direction
    uy, uz = local[1], local[2]
    k = 2 * math.pi / wavelength
    p = np.arange(geom.rows)[:, None]
    q = np.arange(geom.cols)[None, :]
    return np.exp(1j * k * geom.spacing * (p * uy + q * uz)).reshape(-1)


def assemble_channel(paths, tx_geom, rx_geom, wavelength=WAVELENGTH):
    """Narrowband K x M matrix: sum of gain * a_rx(aoa) a_tx(aod)^H over paths."""
    if isinstance(paths, PathSet) and not math.isclose(paths.wavelength, wavelength, rel_tol=1e-12):
        raise ConsistencyError(
            f"paths traced at wavelength {paths.wavelength} but assembled at {wavelength}")
    h = np.zeros((rx_geom.size, tx_geom.size), dtype=complex)
    for path in paths:
        a_rx = steering_vector(rx_geom, path.aoa, wavelength)
        a_tx = steering_vector(tx_geom, path.aod, wavelength)
        h += path.gain * np.outer(a_rx, a_tx.conj())
    return ChannelMatrix(h, wavelength)


# -- geometry ------------------------------------------------------------------
@dataclass(frozen=True)
class FaceTable:
    axis: np.ndarray
    coord: np.ndarray
    sign: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    gamma: np.ndarray
    owner: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray

    def __len__(self):
        return len(self.axis)


def face_table(scene):
    """Reflecting faces of the scene; the ground plane (owner -1) comes first
    unless the scene has no ground material."""
    axis, coord, sign, lo, hi, gamma, owner = [], [], [], [], [], [], []
    if scene.ground_material is not None:
        axis, coord, sign, owner = [2], [0.0], [1.0], [-1]
        lo, hi, gamma = [[-np.inf] * 3], [[np.inf] * 3], [scene.ground_material.gamma]
    for b, box in enumerate(scene.boxes):
        bmin, bmax = np.array(box.min_corner), np.array(box.max_corner)
        for a in range(3):
            for s, c in ((-1.0, bmin[a]), (1.0, bmax[a])):
                if a == 2 and s < 0 and c <= 0:
                    continue  # underside resting on the ground
                axis.append(a)
                coord.append(c)
                sign.append(s)
                lo.append(bmin)
                hi.append(bmax)
                gamma.append(box.material.gamma)
                owner.append(b)
    if scene.boxes:
        box_lo = np.array([b.min_corner for b in scene.boxes])
        box_hi = np.array([b.max_corner for b in scene.boxes])
    else:
        box_lo = box_hi = np.zeros((0, 3))
    return FaceTable(np.array(axis), np.array(coord), np.array(sign), np.array(lo, dtype=float),
                     np.array(hi, dtype=float), np.array(gamma, dtype=complex), np.array(owner),
                     box_lo, box_hi)


def segment_blocked(p0, p1, box_lo, box_hi, t_eps=_T_EPS):
    """Vectorized slab test. ``p0``/``p1`` are (S, 3); returns (S,) bools that
    are True when the open segment crosses the interior of any box."""
    if len(box_lo) == 0 or len(p0) == 0:
        return np.zeros(len(p0), dtype=bool)
    d = (p1 - p0)[:, None, :]
    o = p0[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (box_lo[None] - o) * inv
        t2 = (box_hi[None] - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # a zero direction component: inside the slab => unbounded, outside => never
    parallel = d == 0
    inside = (o > box_lo[None]) & (o < box_hi[None])
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    enter = np.maximum(tmin.max(axis=2), t_eps)
    leave = np.minimum(tmax.min(axis=2), 1.0 - t_eps)
    return np.any(enter < leave, axis=1)


def _mirror(points, faces, table):
    out = points.copy()
    idx = np.arange(len(points))
    a = table.axis[faces]
    out[idx, a] = 2.0 * table.coord[faces] - points[idx, a]
    return out


def _in_front(points, faces, table):
    a = table.axis[faces]
    return table.sign[faces] * (points[np.arange(len(points)), a] - table.coord[faces]) > 0


def _enumerate(tx, table, order):
    """Face sequences (n, order) and their final image points (n, 3)."""
    n_faces = len(table)
    seqs = np.arange(n_faces)[:, None]
    images = _mirror(np.repeat(tx[None], n_faces, 0), seqs[:, 0], table)
    keep = _in_front(np.repeat(tx[None], n_faces, 0), seqs[:, 0], table)
    seqs, images = seqs[keep], images[keep]
    for _ in range(order - 1):
        if len(seqs) == 0:
            break
        rep = np.repeat(np.arange(len(seqs)), n_faces)
        nxt = np.tile(np.arange(n_faces), len(seqs))
        src = images[rep]
        keep = (nxt != seqs[rep, -1]) & _in_front(src, nxt, table)
        rep, nxt, src = rep[keep], nxt[keep], src[keep]
        seqs = np.concatenate([seqs[rep], nxt[:, None]], axis=1)
        images = _mirror(src, nxt, table)
    return seqs, images


def _backtrack(tx, rx, seqs, table):
    """Reflection points for each sequence; returns (valid mask, points (n, k, 3))."""
    n, k = seqs.shape
    images = np.empty((n, k + 1, 3))
    images[:, 0] = tx
    for j in range(k):
        images[:, j + 1] = _mirror(images[:, j], seqs[:, j], table)
    target = np.repeat(rx[None], n, 0)
    points = np.empty((n, k, 3))
    valid = np.ones(n, dtype=bool)
    idx = np.arange(n)
    for j in range(k - 1, -1, -1):
        f = seqs[:, j]
        a = table.axis[f]
        src = images[:, j + 1]
        denom = target[idx, a] - src[idx, a]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (table.coord[f] - src[idx, a]) / denom
        ok = np.isfinite(t) & (t > _T_EPS) & (t < 1 - _T_EPS)
        q = src + np.where(np.isfinite(t), t, 0.0)[:, None] * (target - src)
        q[idx, a] = table.coord[f]
        within = np.all((q >= table.lo[f] - _FACE_TOL) & (q <= table.hi[f] + _FACE_TOL), axis=1)
        valid &= ok & within
        points[:, j] = q
        target = q
    return valid, points, images[:, -1]


def trace_paths(scene, tx, rx, max_reflections=2, max_paths=20, wavelength=WAVELENGTH):
    """Unblocked specular paths between ``tx`` and ``rx`` with at most
    ``max_reflections`` bounces, strongest first, truncated to ``max_paths``."""
    if max_reflections < 0:
        raise DomainError("max_reflections must be non-negative")
    tx = np.asarray(getattr(tx, "position", tx), dtype=float)
    rx = np.asarray(getattr(rx, "position", rx), dtype=float)
    if np.array_equal(tx, rx):
        raise DegenerateGeometryError("transmitter and receiver coincide")
    table = face_table(scene)
    found = []
    if not segment_blocked(tx[None], rx[None], table.box_lo, table.box_hi)[0]:
        found.append(((), np.zeros((0, 3)), float(np.linalg.norm(rx - tx))))
    for order in range(1, max_reflections + 1):
        seqs, _ = _enumerate(tx, table, order)
        if len(seqs) == 0:
            break
        valid, points, last_image = _backtrack(tx, rx, seqs, table)
        seqs, points, last_image = seqs[valid], points[valid], last_image[valid]
        if len(seqs) == 0:
            continue
        chain = np.concatenate([np.repeat(tx[None, None], len(seqs), 0), points,
                                np.repeat(rx[None, None], len(seqs), 0)], axis=1)
        blocked = np.zeros(len(seqs), dtype=bool)
        for s in range(order + 1):
            blocked |= segment_blocked(chain[:, s], chain[:, s + 1], table.box_lo, table.box_hi)
        for i in np.flatnonzero(~blocked):
            found.append((tuple(int(f) for f in seqs[i]), points[i],
                          float(np.linalg.norm(last_image[i] - rx))))

    paths = []
    for faces, pts, dist in found:
        gammas = tuple(complex(table.gamma[f]) for f in faces)
        first = pts[0] if len(pts) else rx
        last = pts[-1] if len(pts) else tx
        paths.append(PathComponent(
            delay=dist / SPEED_OF_LIGHT,
            aod=direction_angles(first - tx),
            aoa=direction_angles(last - rx),
            gain=path_gain(dist, gammas, wavelength),
            distance=dist,
            interactions=len(faces),
            gammas=gammas,
            points=tuple(tuple(p) for p in pts),
            faces=faces,
        ))
    paths.sort(key=lambda p: (-abs(p.gain), p.interactions, p.distance, p.faces))
    return PathSet(paths[:max_paths], wavelength)


def link_channel(scene, tx, rx, tx_geom=None, rx_geom=None, max_reflections=2, max_paths=20,
                 wavelength=WAVELENGTH):
    """Trace and assemble in one call; returns (PathSet, ChannelMatrix)."""
    tx_geom = tx_geom or ArrayGeometry.horizontal()
    rx_geom = rx_geom or ArrayGeometry.horizontal()
    paths = trace_paths(scene, tx, rx, max_reflections, max_paths, wavelength)
    return paths, assemble_channel(paths, tx_geom, rx_geom, wavelength)
