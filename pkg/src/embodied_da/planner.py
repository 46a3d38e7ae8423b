"""Sampling-based next-best-view planner over the semantic voxel map.

The planner keeps one tree of candidate view poses rooted at the robot. Every
node stores the information gain of its view and the cost of the edge from
its parent; the next target is the node with the best accumulated gain per
accumulated cost along its root path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .raycast import NO_HIT, pinhole_directions, rotate_yaw, traverse_rays
from .semmap import SURFACE, UNOBSERVED, SemanticVoxelMap, _min_per_voxel
from .worldsim import ViewPose, check_path, wrap_angle

CURIOSITY, EXPLORATION, RANDOM = "curiosity", "exploration", "random"
MODES = (CURIOSITY, EXPLORATION, RANDOM)
COST_FLOOR = 1e-3


@dataclass(frozen=True)
class GainParams:
    alpha_u: float = 0.001
    d_min: float = 1.0
    mode: str = CURIOSITY
    rays: tuple[int, int] = (16, 12)  # (columns, rows)
    max_range: float = 5.0
    hfov: float = math.pi / 2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown gain mode {self.mode!r}")
        if self.alpha_u < 0:
            raise ValueError("alpha_u must be >= 0")


@dataclass(frozen=True)
class PlannerConfig:
    n_new: int = 10
    sample_radius: float = 2.0
    n_reject: int = 50
    kappa_yaw: float = 0.2
    robot_radius: float = 0.2
    camera_height: float = 0.3
    max_gain_updates: int = 30
    max_nodes: int = 200
    stuck_ticks: int = 5


@dataclass
class ViewNode:
    pose: ViewPose
    parent: int | None
    gain: float = 0.0
    cost: float = 0.0
    gain_stamp: int = -1
    order: int = 0
    children: list[int] = field(default_factory=list)


@dataclass
class Action:
    kind: str  # "move", "expand" or "replan"
    pose: ViewPose | None = None
    gain: float = 0.0
    exhausted: bool = False


# --------------------------------------------------------------------------- gains

_RAY_CACHE: dict = {}


def gain_directions(params: GainParams, yaw: float) -> np.ndarray:
    key = (params.rays, params.hfov)
    if key not in _RAY_CACHE:
        _RAY_CACHE[key] = pinhole_directions(params.rays[0], params.rays[1], params.hfov)
    return rotate_yaw(_RAY_CACHE[key], yaw).reshape(-1, 3)


def visible_voxels(smap: SemanticVoxelMap, pose: ViewPose, dirs: np.ndarray, max_range: float):
    """Distinct surface voxels (with closest hit depth) and unobserved voxels seen from ``pose``.

    Rays pass through free and unobserved voxels and stop at the first surface.
    """
    stop = (smap.state == SURFACE).reshape(smap.extents)
    hit, dist, _, vox, _ = traverse_rays(pose.position, dirs, max_range, stop, smap.voxel_size)
    unobserved = np.unique(vox[smap.state[vox] == UNOBSERVED])
    ok = hit != NO_HIT
    surf, depth = _min_per_voxel(hit[ok], dist[ok])
    return surf, depth, unobserved


def gain_from_visible(smap: SemanticVoxelMap, surf, depth, unobserved, params: GainParams) -> float:
    if params.mode == EXPLORATION:
        return float(len(unobserved))
    surface_term = float(np.sum(smap.discount(surf, depth) * smap.u_map[surf])) if len(surf) else 0.0
    return surface_term + params.alpha_u * len(unobserved)


def compute_gain(smap: SemanticVoxelMap, pose: ViewPose, params: GainParams,
                 dirs: np.ndarray | None = None) -> float:
    """Information gain of a view.

    Surface voxels add ``discount * u_map``, unobserved voxels add ``alpha_u``
    and free voxels nothing; each voxel counts once. Exploration mode counts
    unobserved voxels only.
    """
    if dirs is None:
        dirs = gain_directions(params, pose.yaw)
    surf, depth, unobserved = visible_voxels(smap, pose, dirs, params.max_range)
    return gain_from_visible(smap, surf, depth, unobserved, params)


def edge_cost(a: ViewPose, b: ViewPose, kappa_yaw: float = 0.2) -> float:
    """XY distance plus weighted absolute yaw change, floored to stay positive."""
    c = math.hypot(b.x - a.x, b.y - a.y) + kappa_yaw * abs(wrap_angle(b.yaw - a.yaw))
    return max(c, COST_FLOOR)


# --------------------------------------------------------------------------- tree

class ViewTree:
    def __init__(self, root: ViewPose):
        self.nodes: dict[int, ViewNode] = {}
        self._next = 0
        self.root = self._add(ViewNode(pose=root, parent=None))

    def _add(self, node: ViewNode) -> int:
        nid = self._next
        self._next += 1
        node.order = nid
        self.nodes[nid] = node
        if node.parent is not None:
            self.nodes[node.parent].children.append(nid)
        return nid

    def add(self, pose: ViewPose, parent: int, gain: float, cost: float, stamp: int) -> int:
        return self._add(ViewNode(pose=pose, parent=parent, gain=gain, cost=cost, gain_stamp=stamp))

    def __len__(self) -> int:
        return len(self.nodes)

    def ordered(self) -> list[int]:
        """Node ids in insertion order (parents precede children)."""
        return sorted(self.nodes)

    def path(self, nid: int) -> list[int]:
        """Non-root nodes from the root's child down to ``nid``."""
        out = []
        while nid != self.root:
            out.append(nid)
            nid = self.nodes[nid].parent
        return out[::-1]

    def leaves(self) -> list[int]:
        return [i for i in self.ordered() if i != self.root and not self.nodes[i].children]

    def values(self):
        """Accumulated gain / accumulated cost along each root path."""
        ids = self.ordered()
        pg: dict[int, float] = {}
        pc: dict[int, float] = {}
        vals = {}
        for i in ids:
            n = self.nodes[i]
            if i == self.root:
                pg[i], pc[i] = 0.0, 0.0
                continue
            pg[i] = pg[n.parent] + n.gain
            pc[i] = pc[n.parent] + n.cost
            vals[i] = pg[i] / pc[i]
        return vals

    def reroot(self, nid: int) -> None:
        """Make ``nid`` the root, keeping only its subtree."""
        keep = set()
        stack = [nid]
        while stack:
            i = stack.pop()
            keep.add(i)
            stack.extend(self.nodes[i].children)
        self.nodes = {i: n for i, n in self.nodes.items() if i in keep}
        root = self.nodes[nid]
        root.parent = None
        root.cost = 0.0
        self.root = nid

    def prune(self, nid: int) -> None:
        """Remove ``nid`` and its subtree."""
        parent = self.nodes[nid].parent
        stack = [nid]
        while stack:
            i = stack.pop()
            stack.extend(self.nodes[i].children)
            del self.nodes[i]
        if parent is not None:
            self.nodes[parent].children.remove(nid)


def select_nbv(tree: ViewTree):
    """Best accumulated gain per cost.

    Returns ``(target, first)`` where ``first`` is the root's child on the path
    to ``target``, or ``None`` when every gain is zero (exploration exhausted).
    Ties resolve to the earliest inserted node.
    """
    vals = tree.values()
    if not vals:
        return None
    best = max(vals, key=lambda i: (vals[i], -i))
    if vals[best] <= 0.0:
        gains = {i: tree.nodes[i].gain for i in vals}
        best = max(gains, key=lambda i: (gains[i], -i))
        if gains[best] <= 0.0:
            return None
    return best, tree.path(best)[0]


# --------------------------------------------------------------------------- planner

def sample_viewpoint(smap: SemanticVoxelMap, tree: ViewTree, rng: np.random.Generator,
                     cfg: PlannerConfig = PlannerConfig()):
    """Uniform pose within ``sample_radius`` of a random tree node.

    Returns ``(pose, parent_id)`` or ``None`` after ``n_reject`` failed attempts.
    """
    ids = tree.ordered()
    for _ in range(cfg.n_reject):
        parent = ids[int(rng.integers(len(ids)))]
        base = tree.nodes[parent].pose
        r = cfg.sample_radius * math.sqrt(rng.random())
        phi = rng.uniform(-math.pi, math.pi)
        yaw = rng.uniform(-math.pi, math.pi)
        pose = ViewPose(base.x + r * math.cos(phi), base.y + r * math.sin(phi), cfg.camera_height, yaw)
        if check_path(smap, base, pose, cfg.robot_radius):
            return pose, parent
    return None


class Planner:
    """Tree-based NBV planner; one :meth:`tick` moves the robot by at most one edge."""

    def __init__(self, start: ViewPose, params: GainParams, cfg: PlannerConfig = PlannerConfig(),
                 seed: int = 0):
        self.params = params
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.tree = ViewTree(start)
        self.pose = start
        self.idle = 0
        self.gain_evals = 0

    def _gain(self, smap, pose) -> float:
        if self.params.mode == RANDOM:
            return 0.0
        self.gain_evals += 1
        return compute_gain(smap, pose, self.params)

    def expand(self, smap: SemanticVoxelMap) -> int:
        added = 0
        for _ in range(self.cfg.n_new):
            if len(self.tree) >= self.cfg.max_nodes:
                break
            s = sample_viewpoint(smap, self.tree, self.rng, self.cfg)
            if s is None:
                continue
            pose, parent = s
            self.tree.add(pose, parent, self._gain(smap, pose),
                          edge_cost(self.tree.nodes[parent].pose, pose, self.cfg.kappa_yaw), smap.version)
            added += 1
        return added

    def refresh_gains(self, smap: SemanticVoxelMap) -> None:
        """Re-evaluate stale gains along the currently best path until it is fresh."""
        budget = self.cfg.max_gain_updates
        while budget > 0:
            sel = select_nbv(self.tree)
            if sel is None:
                return
            stale = [i for i in self.tree.path(sel[0]) if self.tree.nodes[i].gain_stamp < smap.version]
            if not stale:
                return
            for i in stale[:budget]:
                node = self.tree.nodes[i]
                node.gain = self._gain(smap, node.pose)
                node.gain_stamp = smap.version
            budget -= len(stale)

    def reset(self) -> None:
        self.tree = ViewTree(self.pose)

    def tick(self, smap: SemanticVoxelMap) -> Action:
        self.expand(smap)
        while True:
            if len(self.tree) == 1:
                self.idle += 1
                if self.idle >= self.cfg.stuck_ticks:
                    self.idle = 0
                    self.reset()
                    return Action("replan")
                return Action("expand")
            exhausted = False
            if self.params.mode == RANDOM:
                leaves = self.tree.leaves()
                target = leaves[int(self.rng.integers(len(leaves)))]
                first = self.tree.path(target)[0]
            else:
                self.refresh_gains(smap)
                sel = select_nbv(self.tree)
                if sel is None:
                    # nothing left to gain: keep moving to keep collecting data
                    exhausted = True
                    leaves = self.tree.leaves()
                    target = leaves[int(self.rng.integers(len(leaves)))]
                    first = self.tree.path(target)[0]
                else:
                    target, first = sel
            node = self.tree.nodes[first]
            # the map may have grown since the edge was sampled
            if not check_path(smap, self.pose, node.pose, self.cfg.robot_radius):
                self.tree.prune(first)
                continue
            self.idle = 0
            self.pose = node.pose
            gain = node.gain
            self.tree.reroot(first)
            return Action("move", pose=self.pose, gain=gain, exhausted=exhausted)
