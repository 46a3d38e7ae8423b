"""Synthetic box worlds with per-voxel appearance features and a planar robot camera."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy import ndimage

from .raycast import NO_HIT, cast_rays, pinhole_directions, rotate_yaw

IGNORE = -1
FLOOR, WALL = 0, 1
SCENE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SceneConfig:
    extents: tuple[int, int, int] = (64, 64, 16)
    voxel_size: float = 0.1
    n_classes: int = 8
    n_features: int = 12
    n_objects: int = 12
    object_size: tuple[int, int] = (4, 9)  # footprint edge range, voxels
    object_height: tuple[int, int] = (3, 10)
    partition: bool = True  # interior wall with a doorway
    door_width: float = 1.2
    clearance: float = 0.6  # free gap kept around objects, metres
    n_shifted: int = 3
    shift_magnitude: float = 0.72  # fraction of the way towards the neighbour centroid
    shift_neighbours: int = 3
    class_separation: float = 3.0
    structural_scale: float = 2.0  # floor/wall means lie further out than object means
    feature_std: float = 0.15
    appearance_seed: int = 7  # shared by source and target domains
    robot_radius: float = 0.2
    camera_height: float = 0.3

    @classmethod
    def from_dict(cls, d: dict | None) -> "SceneConfig":
        d = dict(d or {})
        for key in ("extents", "object_size", "object_height"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class ViewPose:
    x: float
    y: float
    z: float
    yaw: float

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


def wrap_angle(a: float) -> float:
    """Wrap to [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class Camera:
    width: int = 64
    height: int = 48
    hfov: float = math.pi / 2
    max_range: float = 5.0
    noise_std: float = 0.9

    def directions(self, yaw: float) -> np.ndarray:
        """World-frame unit rays, shape (height*width, 3)."""
        return rotate_yaw(_cached_dirs(self.width, self.height, self.hfov), yaw).reshape(-1, 3)


_DIR_CACHE: dict = {}


def _cached_dirs(w, h, hfov):
    key = (w, h, hfov)
    if key not in _DIR_CACHE:
        _DIR_CACHE[key] = pinhole_directions(w, h, hfov)
    return _DIR_CACHE[key]


@dataclass
class SensorFrame:
    pose: ViewPose
    width: int
    height: int
    features: np.ndarray  # (H, W, F) float32, zero where invalid
    depth: np.ndarray  # (H, W) metres, 0 = no hit
    gt_labels: np.ndarray  # (H, W) int, IGNORE where no hit
    timestamp: int = 0

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


@dataclass
class SceneModel:
    voxel_size: float
    extents: tuple[int, int, int]
    occupied: np.ndarray  # (X, Y, Z) bool
    class_id: np.ndarray  # (X, Y, Z) int16, IGNORE where free
    features: np.ndarray  # (X, Y, Z, F) float32, zero where free
    means_source: np.ndarray  # (K, F)
    means_target: np.ndarray  # (K, F)
    feature_std: float
    shifted_classes: tuple[int, ...]
    start_pose: ViewPose
    robot_radius: float
    camera_height: float
    domain: str = "target"
    _blocked: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_classes(self) -> int:
        return self.means_source.shape[0]

    @property
    def n_features(self) -> int:
        return self.means_source.shape[1]

    @property
    def body_top(self) -> int:
        """Highest voxel layer the robot body occupies."""
        return max(1, int(math.ceil(self.camera_height / self.voxel_size)))

    def blocked_2d(self) -> np.ndarray:
        """Ground-truth footprint obstacles: any occupied voxel in the robot's height band."""
        if self._blocked is None:
            self._blocked = self.occupied[:, :, 1:self.body_top + 1].any(axis=2)
        return self._blocked


# --------------------------------------------------------------------------- scene

def class_means(config: SceneConfig):
    """Source/target class means and the shifted class ids.

    Depends only on ``config`` (appearance seed), so a source-domain scene and a
    target-domain scene built from the same config share the source means.
    """
    rng = np.random.default_rng(config.appearance_seed)
    k, f = config.n_classes, config.n_features
    source = rng.normal(0.0, config.class_separation / math.sqrt(2.0), size=(k, f))
    structural = [c for c in (FLOOR, WALL) if c < k]
    source[structural] *= config.structural_scale
    target = source.copy()
    candidates = np.arange(2, k) if k > 2 else np.arange(k)
    n_shift = min(config.n_shifted, len(candidates))
    shifted = tuple(sorted(int(c) for c in rng.choice(candidates, size=n_shift, replace=False)))
    for c in shifted:
        # pull towards the centre of its nearest object classes so errors spread over several
        others = np.array([o for o in candidates if o != c] or [o for o in range(k) if o != c])
        if not len(others):
            continue
        near = others[np.argsort(np.linalg.norm(source[others] - source[c], axis=1), kind="stable")]
        hub = source[near[:config.shift_neighbours]].mean(axis=0)
        target[c] = source[c] + config.shift_magnitude * (hub - source[c])
    return source, target, shifted


def _connected(free2d: np.ndarray) -> bool:
    labels, n = ndimage.label(free2d)
    return n == 1


def _inflate(blocked: np.ndarray, cells: int) -> np.ndarray:
    if cells <= 0:
        return blocked.copy()
    r = cells
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    disk = (xx ** 2 + yy ** 2) <= r * r
    return ndimage.binary_dilation(blocked, structure=disk, border_value=1)


def generate_scene(seed: int, config: SceneConfig = SceneConfig(), domain: str = "target") -> SceneModel:
    """Build a walled box world with axis-aligned objects.

    Raises:
        ValueError: when the requested objects cannot be placed while keeping
            the free space connected for the robot.
    """
    if domain not in ("source", "target"):
        raise ValueError(f"unknown domain {domain!r}")
    rng = np.random.default_rng(seed)
    nx, ny, nz = config.extents
    vs = config.voxel_size
    k = config.n_classes
    if k < 3:
        raise ValueError("need at least floor, wall and one object class")

    cls = np.full((nx, ny, nz), IGNORE, dtype=np.int16)
    cls[:, :, 0] = FLOOR
    cls[0, :, :] = WALL
    cls[-1, :, :] = WALL
    cls[:, 0, :] = WALL
    cls[:, -1, :] = WALL
    if config.partition:
        door = max(1, int(round(config.door_width / vs)))
        mid = nx // 2
        lo = int(rng.integers(2, max(3, ny - door - 2)))
        cls[mid, :, 1:] = WALL
        cls[mid, lo:lo + door, 1:] = IGNORE

    body_top = max(1, int(math.ceil(config.camera_height / vs)))
    robot_cells = int(math.ceil(config.robot_radius / vs))
    clear_cells = int(math.ceil(config.clearance / vs))

    object_classes = list(range(2, k))
    order = []
    while len(order) < config.n_objects:
        order.extend(rng.permutation(object_classes).tolist())
    order = order[:config.n_objects]

    for c in order:
        placed = False
        for _ in range(200):
            sx = int(rng.integers(config.object_size[0], config.object_size[1] + 1))
            sy = int(rng.integers(config.object_size[0], config.object_size[1] + 1))
            h = int(rng.integers(config.object_height[0], config.object_height[1] + 1))
            h = min(h, nz - 1)
            x0 = int(rng.integers(1, max(2, nx - sx - 1)))
            y0 = int(rng.integers(1, max(2, ny - sy - 1)))
            x1, y1 = x0 + sx, y0 + sy
            if x1 > nx - 1 or y1 > ny - 1:
                continue
            # keep a free gap to other objects; walls may be touched
            gx0, gy0 = max(0, x0 - clear_cells), max(0, y0 - clear_cells)
            gx1, gy1 = min(nx, x1 + clear_cells), min(ny, y1 + clear_cells)
            if (cls[gx0:gx1, gy0:gy1, 1:body_top + 1] > WALL).any():
                continue
            trial = cls.copy()
            trial[x0:x1, y0:y1, 1:1 + h] = c
            free2d = ~_inflate((trial[:, :, 1:body_top + 1] != IGNORE).any(axis=2), robot_cells)
            if not free2d.any() or not _connected(free2d):
                continue
            cls = trial
            placed = True
            break
        if not placed:
            raise ValueError(
                f"could not place {config.n_objects} objects without blocking free space")

    occupied = cls != IGNORE
    means_source, means_target, shifted = class_means(config)
    means = means_source if domain == "source" else means_target
    feats = np.zeros((nx, ny, nz, config.n_features), dtype=np.float32)
    occ_idx = np.nonzero(occupied)
    ids = cls[occ_idx].astype(np.int64)
    noise = rng.normal(0.0, config.feature_std, size=(len(ids), config.n_features))
    feats[occ_idx] = (means[ids] + noise).astype(np.float32)

    scene = SceneModel(
        voxel_size=vs, extents=(nx, ny, nz), occupied=occupied, class_id=cls,
        features=feats, means_source=means_source, means_target=means_target,
        feature_std=config.feature_std, shifted_classes=shifted,
        start_pose=ViewPose(0.0, 0.0, config.camera_height, 0.0),
        robot_radius=config.robot_radius, camera_height=config.camera_height,
        domain=domain,
    )
    scene.start_pose = _sample_free_poses(scene, 1, rng, margin=0.2)[0]
    return scene


# --------------------------------------------------------------------------- rendering

def render_frame(scene: SceneModel, pose: ViewPose, camera: Camera,
                 rng: np.random.Generator | None = None, timestamp: int = 0) -> SensorFrame:
    """Ray cast every pixel to the first occupied voxel within range.

    Pixel features are the hit voxel's feature plus i.i.d. Gaussian noise with
    ``camera.noise_std`` (drawn from ``rng``; a fresh seed-0 stream if omitted).
    """
    dirs = camera.directions(pose.yaw)
    hit, dist = cast_rays(pose.position, dirs, camera.max_range, scene.occupied, scene.voxel_size)
    valid = hit != NO_HIT
    h, w, f = camera.height, camera.width, scene.n_features
    feats = np.zeros((h * w, f), dtype=np.float32)
    depth = np.zeros(h * w)
    labels = np.full(h * w, IGNORE, dtype=np.int16)
    idx = hit[valid]
    flat_feats = scene.features.reshape(-1, f)
    vals = flat_feats[idx].astype(np.float64)
    if camera.noise_std > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        vals = vals + camera.noise_std * rng.standard_normal(vals.shape)
    feats[valid] = vals
    depth[valid] = dist[valid]
    labels[valid] = scene.class_id.ravel()[idx]
    return SensorFrame(pose=pose, width=w, height=h, features=feats.reshape(h, w, f),
                       depth=depth.reshape(h, w), gt_labels=labels.reshape(h, w),
                       timestamp=timestamp)


# --------------------------------------------------------------------------- collision

@njit(cache=True)
def _seg_point_dist2(ax, ay, bx, by, px, py):
    vx, vy = bx - ax, by - ay
    ll = vx * vx + vy * vy
    t = 0.0
    if ll > 0:
        t = ((px - ax) * vx + (py - ay) * vy) / ll
        t = min(1.0, max(0.0, t))
    qx, qy = ax + t * vx - px, ay + t * vy - py
    return qx * qx + qy * qy


@njit(cache=True)
def _seg_hits_box(ax, ay, bx, by, x0, y0, x1, y1):
    # Liang-Barsky clip of the segment against the box
    dx, dy = bx - ax, by - ay
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, ax - x0), (dx, x1 - ax), (-dy, ay - y0), (dy, y1 - ay)):
        if p == 0.0:
            if q < 0.0:
                return False
        else:
            r = q / p
            if p < 0.0:
                if r > t1:
                    return False
                if r > t0:
                    t0 = r
            else:
                if r < t0:
                    return False
                if r < t1:
                    t1 = r
    return True


@njit(cache=True)
def segment_box_distance(ax, ay, bx, by, x0, y0, x1, y1):
    """Euclidean distance between a 2D segment and an axis-aligned box."""
    if _seg_hits_box(ax, ay, bx, by, x0, y0, x1, y1):
        return 0.0
    best = np.inf
    for px, py in ((ax, ay), (bx, by)):
        ddx = max(x0 - px, 0.0, px - x1)
        ddy = max(y0 - py, 0.0, py - y1)
        best = min(best, ddx * ddx + ddy * ddy)
    for px, py in ((x0, y0), (x0, y1), (x1, y0), (x1, y1)):
        best = min(best, _seg_point_dist2(ax, ay, bx, by, px, py))
    return math.sqrt(best)


@njit(cache=True)
def _segment_clear(blocked, vs, ax, ay, bx, by, radius):
    nx, ny = blocked.shape
    lo_x, hi_x = min(ax, bx) - radius, max(ax, bx) + radius
    lo_y, hi_y = min(ay, by) - radius, max(ay, by) + radius
    if lo_x < 0.0 or lo_y < 0.0 or hi_x > nx * vs or hi_y > ny * vs:
        return False
    i0 = max(0, int(math.floor(lo_x / vs)))
    i1 = min(nx - 1, int(math.floor(hi_x / vs)))
    j0 = max(0, int(math.floor(lo_y / vs)))
    j1 = min(ny - 1, int(math.floor(hi_y / vs)))
    for i in range(i0, i1 + 1):
        for j in range(j0, j1 + 1):
            if blocked[i, j]:
                d = segment_box_distance(ax, ay, bx, by, i * vs, j * vs, (i + 1) * vs, (j + 1) * vs)
                if d < radius:
                    return False
    return True


def check_path(world, start: ViewPose, end: ViewPose, robot_radius: float) -> bool:
    """True iff the XY segment dilated by ``robot_radius`` touches no blocked cell.

    ``world`` is anything exposing ``blocked_2d()`` and ``voxel_size``: the
    ground-truth :class:`SceneModel` (oracle checks) or the reconstructed map.
    Leaving the grid counts as a collision.
    """
    return bool(_segment_clear(world.blocked_2d(), float(world.voxel_size),
                               start.x, start.y, end.x, end.y, float(robot_radius)))


def _sample_free_poses(scene: SceneModel, n: int, rng: np.random.Generator,
                       margin: float = 0.0, max_attempts: int | None = None) -> list[ViewPose]:
    nx, ny, _ = scene.extents
    vs = scene.voxel_size
    attempts = max_attempts if max_attempts is not None else 1000 * n
    radius = scene.robot_radius + margin
    out: list[ViewPose] = []
    seen = set()
    for _ in range(attempts):
        x = float(rng.uniform(0.0, nx * vs))
        y = float(rng.uniform(0.0, ny * vs))
        yaw = float(rng.uniform(-math.pi, math.pi))
        pose = ViewPose(x, y, scene.camera_height, yaw)
        if (x, y, yaw) in seen or not check_path(scene, pose, pose, radius):
            continue
        seen.add((x, y, yaw))
        out.append(pose)
        if len(out) == n:
            return out
    raise RuntimeError(f"found only {len(out)} of {n} free poses in {attempts} attempts")


def sample_test_poses(scene: SceneModel, n: int, seed: int) -> list[ViewPose]:
    """``n`` collision-free poses, uniform over the grid area and yaw."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return _sample_free_poses(scene, n, np.random.default_rng(seed))


def reachable_cells(scene: SceneModel) -> np.ndarray:
    """Footprint cells whose centre the robot can reach from the start pose."""
    vs = scene.voxel_size
    r_cells = int(math.ceil(scene.robot_radius / vs))
    free = ~_inflate(scene.blocked_2d(), r_cells)
    labels, _ = ndimage.label(free)
    si, sj = int(scene.start_pose.x / vs), int(scene.start_pose.y / vs)
    lab = labels[si, sj]
    if lab == 0:
        return free
    return labels == lab


def observable_surface(scene: SceneModel, camera: Camera, spacing: float = 0.4, n_yaw: int = 8) -> np.ndarray:
    """Flat indices of voxels seen from a lattice of reachable robot poses.

    Used as the denominator of coverage; 8 headings with a 90 degree camera
    give overlapping azimuth coverage at every lattice point.
    """
    vs = scene.voxel_size
    reach = reachable_cells(scene)
    nx, ny, _ = scene.extents
    seen = np.zeros(scene.occupied.size, dtype=bool)
    for x in np.arange(spacing / 2, nx * vs, spacing):
        for y in np.arange(spacing / 2, ny * vs, spacing):
            i, j = int(x / vs), int(y / vs)
            if not reach[i, j]:
                continue
            for yaw in np.linspace(-math.pi, math.pi, n_yaw, endpoint=False):
                pose = ViewPose(float(x), float(y), scene.camera_height, float(yaw))
                if not check_path(scene, pose, pose, scene.robot_radius):
                    continue
                hit, _ = cast_rays(pose.position, camera.directions(pose.yaw), camera.max_range,
                                   scene.occupied, vs)
                seen[hit[hit != NO_HIT]] = True
    return np.flatnonzero(seen)


# --------------------------------------------------------------------------- persistence

def _rle(values: np.ndarray):
    change = np.flatnonzero(np.diff(values)) + 1
    starts = np.r_[0, change]
    lengths = np.diff(np.r_[starts, len(values)])
    return values[starts], lengths


def save_scene(scene: SceneModel, path) -> None:
    """Write the scene as text: header, class table, RLE classes, occupied features.

    Floats are written with 17 significant digits so the round trip is exact.
    """
    nx, ny, nz = scene.extents
    lines = [
        f"# embodied-da scene v{SCENE_FORMAT_VERSION}",
        f"extents {nx} {ny} {nz}",
        f"voxel_size {scene.voxel_size!r}",
        f"classes {scene.n_classes}",
        f"features {scene.n_features}",
        f"feature_std {scene.feature_std!r}",
        f"robot_radius {scene.robot_radius!r}",
        f"camera_height {scene.camera_height!r}",
        f"domain {scene.domain}",
        "shifted " + " ".join(str(c) for c in scene.shifted_classes),
        "start " + " ".join(repr(v) for v in (scene.start_pose.x, scene.start_pose.y,
                                                scene.start_pose.z, scene.start_pose.yaw)),
        "class_table",
    ]
    for c in range(scene.n_classes):
        src = " ".join(f"{v:.17g}" for v in scene.means_source[c])
        tgt = " ".join(f"{v:.17g}" for v in scene.means_target[c])
        lines.append(f"{c} source {src} target {tgt}")
    vals, lens = _rle(scene.class_id.ravel().astype(np.int64))
    lines.append(f"rle {len(vals)}")
    lines.extend(f"{v} {n}" for v, n in zip(vals, lens))
    occ = scene.features.reshape(-1, scene.n_features)[scene.occupied.ravel()]
    lines.append(f"voxel_features {len(occ)}")
    lines.extend(" ".join(f"{v:.9g}" for v in row) for row in occ)
    Path(path).write_text("\n".join(lines) + "\n")


def load_scene(path) -> SceneModel:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# embodied-da scene v"):
        raise ValueError(f"{path}: not a scene file")
    version = int(lines[0].rsplit("v", 1)[1])
    if version != SCENE_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported scene version {version}")
    head: dict[str, list[str]] = {}
    i = 1
    while lines[i] != "class_table":
        key, *rest = lines[i].split()
        head[key] = rest
        i += 1
    i += 1
    k = int(head["classes"][0])
    f = int(head["features"][0])
    src = np.empty((k, f))
    tgt = np.empty((k, f))
    for c in range(k):
        parts = lines[i + c].split()
        src[c] = [float(v) for v in parts[2:2 + f]]
        tgt[c] = [float(v) for v in parts[3 + f:3 + 2 * f]]
    i += k
    n_runs = int(lines[i].split()[1])
    runs = np.array([[int(v) for v in ln.split()] for ln in lines[i + 1:i + 1 + n_runs]], dtype=np.int64)
    i += 1 + n_runs
    nx, ny, nz = (int(v) for v in head["extents"])
    cls = np.repeat(runs[:, 0], runs[:, 1]).astype(np.int16).reshape(nx, ny, nz)
    occupied = cls != IGNORE
    n_occ = int(lines[i].split()[1])
    occ = np.array([[float(v) for v in ln.split()] for ln in lines[i + 1:i + 1 + n_occ]], dtype=np.float32)
    feats = np.zeros((nx, ny, nz, f), dtype=np.float32)
    feats.reshape(-1, f)[occupied.ravel()] = occ.reshape(-1, f)
    sx, sy, sz, syaw = (float(v) for v in head["start"])
    return SceneModel(
        voxel_size=float(head["voxel_size"][0]), extents=(nx, ny, nz), occupied=occupied,
        class_id=cls, features=feats, means_source=src, means_target=tgt,
        feature_std=float(head["feature_std"][0]),
        shifted_classes=tuple(int(c) for c in head.get("shifted", [])),
        start_pose=ViewPose(sx, sy, sz, syaw), robot_radius=float(head["robot_radius"][0]),
        camera_height=float(head["camera_height"][0]), domain=head["domain"][0],
    )


def false_color(frame: SensorFrame, channels=(0, 1, 2)) -> np.ndarray:
    """uint8 RGB image from three feature channels, min-max scaled over valid pixels."""
    img = frame.features[..., list(channels)].astype(np.float64)
    valid = frame.valid
    out = np.zeros(img.shape, dtype=np.uint8)
    if valid.any():
        lo = img[valid].min(axis=0)
        hi = img[valid].max(axis=0)
        scaled = (img - lo) / np.where(hi > lo, hi - lo, 1.0)
        out[valid] = np.clip(scaled[valid] * 255.0 + 0.5, 0, 255).astype(np.uint8)
    return out


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary portable pixmap (P6)."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1).reshape(h, w, 3)
