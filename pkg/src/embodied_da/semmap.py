"""Uncertainty-aware semantic voxel map.

Each voxel keeps a state (unobserved / free / surface), per-class hit counts,
a fused uncertainty ``u_map`` (exponential filter) and a training-discount
accumulator ``tau_map``.
"""

from __future__ import annotations

import csv
import math

import numpy as np

from .raycast import NO_HIT, cast_rays, traverse_rays
from .worldsim import IGNORE, Camera, SensorFrame, ViewPose

UNOBSERVED, FREE, SURFACE = 0, 1, 2
D_MIN = 1.0
FUSE_MEAN, FUSE_LAST = "mean", "last"


def tau_obs(depth, d_min: float = D_MIN):
    """Per-observation discount weight ``max(d, d_min)^-2``."""
    return np.maximum(np.asarray(depth, dtype=np.float64), d_min) ** -2


class SemanticVoxelMap:
    """Voxel grid aligned with the scene grid.

    Single writer: :meth:`integrate_frame` and :meth:`update_tau` mutate in
    place and bump :attr:`version`; readers that must not see torn state take
    a :meth:`snapshot`.
    """

    def __init__(self, extents, voxel_size: float, n_classes: int, lam: float = 0.5,
                 camera_height: float = 0.3, d_min: float = D_MIN, fuse: str = FUSE_MEAN):
        if not 0.0 <= lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        self.extents = tuple(int(v) for v in extents)
        self.voxel_size = float(voxel_size)
        self.n_classes = int(n_classes)
        self.lam = float(lam)
        self.camera_height = float(camera_height)
        self.d_min = float(d_min)
        self.fuse = fuse
        n = int(np.prod(self.extents))
        self.state = np.zeros(n, dtype=np.int8)
        self.counts = np.zeros((n, self.n_classes), dtype=np.int32)
        self.u_map = np.zeros(n)
        self.tau_map = np.zeros(n)
        self.observed_once = np.zeros(n, dtype=bool)
        self.observation_hits = np.zeros(n, dtype=np.int32)
        self.assumed_free = np.zeros(self.extents[:2], dtype=bool)
        self.version = 0
        self._blocked: tuple[int, np.ndarray] | None = None

    @classmethod
    def for_scene(cls, scene, **kw) -> "SemanticVoxelMap":
        return cls(scene.extents, scene.voxel_size, scene.n_classes,
                   camera_height=scene.camera_height, **kw)

    # ------------------------------------------------------------------ access

    def flat_index(self, i: int, j: int, k: int) -> int:
        _, ny, nz = self.extents
        return (i * ny + j) * nz + k

    def grid(self, values: np.ndarray) -> np.ndarray:
        return values.reshape(self.extents)

    def snapshot(self) -> "SemanticVoxelMap":
        new = object.__new__(SemanticVoxelMap)
        new.__dict__.update(self.__dict__)
        for name in ("state", "counts", "u_map", "tau_map", "observed_once",
                     "observation_hits", "assumed_free"):
            setattr(new, name, getattr(self, name).copy())
        new._blocked = None
        return new

    def map_class(self, voxel: int):
        """Arg-max class of a surface voxel (lowest id wins ties), else ``None``."""
        if self.state[voxel] != SURFACE:
            return None
        return int(np.argmax(self.counts[voxel]))

    def map_classes(self) -> np.ndarray:
        """Vectorised :meth:`map_class`; ``IGNORE`` for non-surface voxels."""
        out = np.argmax(self.counts, axis=1)
        return np.where(self.state == SURFACE, out, IGNORE)

    def discount(self, voxel, depth):
        """``tau_obs / (tau_map + tau_obs)`` for an observation at ``depth``."""
        t = tau_obs(depth, self.d_min)
        return t / (self.tau_map[voxel] + t)

    # ------------------------------------------------------------------ traversability

    @property
    def body_top(self) -> int:
        return max(1, int(math.ceil(self.camera_height / self.voxel_size)))

    def mark_footprint_free(self, pose: ViewPose, radius: float) -> None:
        """The robot's own footprint is known to be traversable at start."""
        nx, ny, _ = self.extents
        vs = self.voxel_size
        ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        cx, cy = (ii + 0.5) * vs, (jj + 0.5) * vs
        self.assumed_free |= (cx - pose.x) ** 2 + (cy - pose.y) ** 2 <= radius ** 2
        self.version += 1

    def blocked_2d(self) -> np.ndarray:
        """Cells the planner must avoid.

        A cell is traversable only when its floor voxel was observed as a
        surface (a box standing on it would have occluded it) and no surface
        was seen in the robot's height band above it.
        """
        if self._blocked is not None and self._blocked[0] == self.version:
            return self._blocked[1]
        st = self.state.reshape(self.extents)
        floor_seen = st[:, :, 0] == SURFACE
        band = (st[:, :, 1:self.body_top + 1] == SURFACE).any(axis=2)
        blocked = ~((floor_seen | self.assumed_free) & ~band)
        self._blocked = (self.version, blocked)
        return blocked

    # ------------------------------------------------------------------ updates

    def integrate_frame(self, frame: SensorFrame, labels: np.ndarray, u_pred: np.ndarray,
                        camera: Camera) -> None:
        """Carve free space along every ray and fuse labels/uncertainty at hits.

        Pixels hitting the same voxel within one frame are averaged (or the
        last pixel wins with ``fuse="last"``) before the exponential filter.
        """
        free_vox, hit_ray, hit_vox = self.frame_hits(frame, camera)
        lab = np.asarray(labels).ravel()[hit_ray]
        keep = lab != IGNORE
        hit_ray, hit_vox, lab = hit_ray[keep], hit_vox[keep], lab[keep]
        u = np.asarray(u_pred, dtype=np.float64).ravel()[hit_ray]

        # this frame's surfaces win over its own free-space carving
        free_vox = np.setdiff1d(free_vox, hit_vox, assume_unique=False)
        carved = free_vox[self.state[free_vox] == SURFACE]
        if len(carved):
            self.counts[carved] = 0
            self.observed_once[carved] = False
            self.u_map[carved] = 0.0
        self.state[free_vox] = FREE

        if len(hit_vox):
            np.add.at(self.counts, (hit_vox, lab), 1)
            np.add.at(self.observation_hits, hit_vox, 1)
            uniq, inv = np.unique(hit_vox, return_inverse=True)
            if self.fuse == FUSE_LAST:
                fused = np.empty(len(uniq))
                fused[inv] = u
            else:
                fused = np.bincount(inv, weights=u, minlength=len(uniq)) / np.bincount(inv, minlength=len(uniq))
            first = ~self.observed_once[uniq]
            prev = self.u_map[uniq]
            self.u_map[uniq] = np.where(first, fused, self.lam * prev + (1.0 - self.lam) * fused)
            self.observed_once[uniq] = True
            self.state[uniq] = SURFACE
        self.version += 1

    def frame_hits(self, frame: SensorFrame, camera: Camera):
        """Voxels passed by the frame's rays and the voxel each valid ray landed in.

        Returns ``(free_voxels, hit_ray, hit_voxel)``. The hit voxel is the first
        one entered exactly at the measured depth; the renderer used the same
        traversal, so the comparison is exact.
        """
        depth = frame.depth.ravel()
        valid = depth > 0
        limits = np.where(valid, depth, camera.max_range)
        dirs = camera.directions(frame.pose.yaw)
        no_stop = np.zeros(self.extents, dtype=bool)
        _, _, ray, vox, t_in = traverse_rays(frame.pose.position, dirs, limits, no_stop, self.voxel_size)
        at_depth = valid[ray] & (t_in == depth[ray])
        free_vox = np.unique(vox[~(valid[ray] & (t_in >= depth[ray]))])
        cand = np.flatnonzero(at_depth)
        first = cand[np.r_[True, ray[cand[1:]] != ray[cand[:-1]]]] if len(cand) else cand
        return free_vox, ray[first], vox[first]

    def update_tau(self, frame: SensorFrame, camera: Camera) -> None:
        """Accumulate ``tau_obs`` for surface voxels seen in a training frame.

        Each voxel is credited once per frame at its closest observed depth.
        """
        _, hit_ray, hit_vox = self.frame_hits(frame, camera)
        surf = self.state[hit_vox] == SURFACE
        vox, d = _min_per_voxel(hit_vox[surf], frame.depth.ravel()[hit_ray[surf]])
        self.tau_map[vox] += tau_obs(d, self.d_min)
        self.version += 1

    # ------------------------------------------------------------------ queries

    def raycast_classes(self, pose: ViewPose, dirs: np.ndarray, max_range: float):
        """Map class and depth of the first surface voxel along each ray."""
        hit, dist = cast_rays(pose.position, dirs, max_range,
                              (self.state == SURFACE).reshape(self.extents), self.voxel_size)
        classes = np.full(len(hit), IGNORE, dtype=np.int64)
        ok = hit != NO_HIT
        classes[ok] = self.map_classes()[hit[ok]]
        return classes, hit, dist

    def surface_voxels(self) -> np.ndarray:
        return np.flatnonzero(self.state == SURFACE)

    def export_csv(self, path) -> None:
        """Observed voxels: index, state, argmax class, u_map, tau_map."""
        _, ny, nz = self.extents
        cls = self.map_classes()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "k", "state", "class", "u_map", "tau_map", "hits"])
            for v in np.flatnonzero(self.state != UNOBSERVED):
                i, rem = divmod(int(v), ny * nz)
                j, k = divmod(rem, nz)
                w.writerow([i, j, k, int(self.state[v]), int(cls[v]),
                            f"{self.u_map[v]:.6g}", f"{self.tau_map[v]:.6g}", int(self.observation_hits[v])])


def _min_per_voxel(vox: np.ndarray, d: np.ndarray):
    order = np.lexsort((d, vox))
    vox, d = vox[order], d[order]
    first = np.r_[True, vox[1:] != vox[:-1]] if len(vox) else np.zeros(0, dtype=bool)
    return vox[first], d[first]
