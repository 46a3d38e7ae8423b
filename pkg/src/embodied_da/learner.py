"""Self-supervised adaptation loop: collect bundles, pseudo-label from the map, retrain."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from . import segmodel as sm
from .metrics import evaluate_frames
from .planner import GainParams, Planner, PlannerConfig
from .semmap import SURFACE, SemanticVoxelMap
from .worldsim import (IGNORE, Camera, SceneModel, SensorFrame, ViewPose, _sample_free_poses,
                       check_path, render_frame)

log = logging.getLogger(__name__)

MAP_RAYCAST, MAP_DEPTH_LOOKUP, SELF_TRAINING = "map_raycast", "map_depth_lookup", "self_training"
SUPERVISION_MODES = (MAP_RAYCAST, MAP_DEPTH_LOOKUP, SELF_TRAINING)


@dataclass(frozen=True)
class TrainConfig:
    bundle_size: int = 150
    epochs: int = 15
    lr_latent: float = 0.002
    lr_head: float = 0.02
    replay_fraction: float = 0.3
    val_fraction: float = 0.1
    patience: int = 3
    supervision: str = MAP_RAYCAST
    batch_size: int = 4096
    refit_samples: int = 50_000
    pca_components: int = 6
    rerender_all: bool = True
    flip: bool = True
    running_normalizer: bool = True

    def __post_init__(self):
        if self.supervision not in SUPERVISION_MODES:
            raise ValueError(f"unknown supervision mode {self.supervision!r}")


@dataclass(frozen=True)
class PretrainConfig:
    n_frames: int = 500  # size of the source corpus
    epochs: int = 40
    patience: int = 3
    lr_latent: float = 0.002
    lr_head: float = 0.02
    batch_size: int = 4096
    val_fraction: float = 0.1
    latent_dim: int | None = None
    pca_components: int = 6
    refit_samples: int = 50_000


@dataclass
class LabeledFrame:
    features: np.ndarray  # (H, W, F)
    labels: np.ndarray  # (H, W), IGNORE where unlabeled
    replay: bool = False
    frame_id: int = -1


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# --------------------------------------------------------------------------- pseudo labels

def render_pseudo_labels(smap: SemanticVoxelMap, frame: SensorFrame, mode: str, camera: Camera,
                         model: sm.SegModel | None = None) -> np.ndarray:
    """Per-pixel training labels for a target frame; ``IGNORE`` marks unusable pixels."""
    shape = (frame.height, frame.width)
    if mode == SELF_TRAINING:
        if model is None:
            raise ValueError("self_training needs the current model")
        return sm.predict(model, frame)[0]
    dirs = camera.directions(frame.pose.yaw)
    if mode == MAP_RAYCAST:
        classes, _, _ = smap.raycast_classes(frame.pose, dirs, camera.max_range)
        return classes.reshape(shape)
    if mode == MAP_DEPTH_LOOKUP:
        depth = frame.depth.ravel()
        out = np.full(depth.shape, IGNORE, dtype=np.int64)
        valid = depth > 0
        pts = frame.pose.position + dirs[valid] * (depth[valid] + 1e-6 * smap.voxel_size)[:, None]
        idx = np.floor(pts / smap.voxel_size).astype(np.int64)
        nx, ny, nz = smap.extents
        inside = ((idx >= 0) & (idx < np.array([nx, ny, nz]))).all(axis=1)
        flat = np.zeros(len(idx), dtype=np.int64)
        flat[inside] = (idx[inside, 0] * ny + idx[inside, 1]) * nz + idx[inside, 2]
        lab = np.where(inside, smap.map_classes()[flat], IGNORE)
        # landing in free or unobserved space yields no label
        lab = np.where(inside & (smap.state[flat] == SURFACE), lab, IGNORE)
        out[valid] = lab
        return out.reshape(shape)
    raise ValueError(f"unknown supervision mode {mode!r}")


# --------------------------------------------------------------------------- datasets

def assemble_training_set(bundle_frames: list[SensorFrame], source_corpus: list[LabeledFrame],
                          cfg: TrainConfig, smap: SemanticVoxelMap, camera: Camera,
                          model: sm.SegModel | None, rng: np.random.Generator,
                          label_cache: dict | None = None):
    """Split pseudo-labelled target frames into train/val and add source replay.

    Pseudo labels are recomputed from the current map for every frame (or only
    for frames missing from ``label_cache`` when ``cfg.rerender_all`` is off).
    Replay frames carry ground-truth source labels.
    """
    if not bundle_frames:
        raise ValueError("need at least one collected frame")
    targets = []
    for f in bundle_frames:
        if not cfg.rerender_all and label_cache is not None and f.timestamp in label_cache:
            labels = label_cache[f.timestamp]
        else:
            labels = render_pseudo_labels(smap, f, cfg.supervision, camera, model)
            if label_cache is not None:
                label_cache[f.timestamp] = labels
        targets.append(LabeledFrame(f.features, labels, replay=False, frame_id=f.timestamp))
    n = len(targets)
    order = rng.permutation(n)
    n_val = min(n - 1, max(1, round_half_up(cfg.val_fraction * n))) if n > 1 else 0
    val = [targets[i] for i in order[:n_val]]
    train = [targets[i] for i in order[n_val:]]
    n_replay = min(len(source_corpus), round_half_up(cfg.replay_fraction * n))
    if n_replay:
        pick = rng.choice(len(source_corpus), size=n_replay, replace=False)
        train += [source_corpus[i] for i in np.sort(pick)]
    return train, val


def _pixels(frames: list[LabeledFrame], rng: np.random.Generator | None = None, flip: bool = False):
    xs, ys = [], []
    for f in frames:
        feat, lab = f.features, f.labels
        if flip and rng is not None and rng.random() < 0.5:
            feat, lab = hflip(feat), hflip(lab)
        m = lab >= 0
        xs.append(feat[m])
        ys.append(lab[m].astype(np.int64))
    if not xs:
        return np.zeros((0, 0), dtype=np.float32), np.zeros(0, dtype=np.int64)
    return np.concatenate(xs), np.concatenate(ys)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1]


def _epoch(model, x, y, cfg, rng):
    perm = rng.permutation(len(x))
    losses = []
    for s in range(0, len(x), cfg.batch_size):
        b = perm[s:s + cfg.batch_size]
        loss, g_a, g_w, g_b = sm.loss_and_grads(model, x[b], y[b])
        model = dataclasses.replace(
            model,
            latent_proj=model.latent_proj - cfg.lr_latent * g_a,
            class_weights=model.class_weights - cfg.lr_head * g_w,
            biases=model.biases - cfg.lr_head * g_b,
        )
        losses.append(loss * len(b))
    return model, float(np.sum(losses) / max(1, len(x)))


def refit_estimator(model: sm.SegModel, x: np.ndarray, rng: np.random.Generator,
                    n_samples: int, n_components: int):
    """PCA/GMM and normaliser refit on a random subset of training pixels.

    Returns the updated model and the raw uncertainties of the subset.
    """
    take = min(n_samples, len(x))
    idx = np.sort(rng.choice(len(x), size=take, replace=False))
    z, logits = sm.forward(model, x[idx])
    model = sm.fit_estimator(model, z, np.argmax(logits, axis=1), n_components)
    raw = sm.estimate_uncertainty(model, z)
    return sm.fit_normalizer(model, raw), raw


def train_cycle(model: sm.SegModel, train: list[LabeledFrame], val: list[LabeledFrame],
                cfg: TrainConfig, rng: np.random.Generator):
    """Train with early stopping on validation cross-entropy, then refit the estimator.

    Returns ``(model, log_rows, refit_raw)``; ``refit_raw`` seeds the running
    normaliser (``None`` when the cycle was aborted).
    """
    x_probe, y_probe = _pixels(train)
    if len(y_probe) == 0:
        log.warning("no labelled training pixels; training cycle aborted")
        return model, [], None
    x_val, y_val = _pixels(val)
    best, best_val, bad = None, np.inf, 0
    rows = []
    current = model
    for epoch in range(1, cfg.epochs + 1):
        x, y = _pixels(train, rng, cfg.flip)
        current, train_loss = _epoch(current, x, y, cfg, rng)
        val_loss = sm.cross_entropy(current, x_val, y_val) if len(y_val) else float("nan")
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "stopped_early": False}
        rows.append(row)
        if not len(y_val):
            best = current
            continue
        if val_loss < best_val:
            best, best_val, bad = current, val_loss, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                row["stopped_early"] = True
                break
    if best is None:
        best = model
    best, raw = refit_estimator(best, x_probe, rng, cfg.refit_samples, cfg.pca_components)
    return best, rows, raw


class RunningNormalizer:
    """Gaussian quantile normaliser over every raw value seen since the last reset."""

    def __init__(self, seed_values: np.ndarray | None = None):
        self.n = 0
        self.s = 0.0
        self.ss = 0.0
        self.max = -np.inf
        if seed_values is not None:
            self.update(seed_values)

    def update(self, values: np.ndarray) -> None:
        v = np.asarray(values, dtype=np.float64).ravel()
        v = v[np.isfinite(v)]
        if len(v):
            self.n += len(v)
            self.s += float(v.sum())
            self.ss += float(np.dot(v, v))
            self.max = max(self.max, float(v.max()))

    def apply(self, model: sm.SegModel) -> sm.SegModel:
        """Model with the pooled normaliser; unchanged while fewer than 2 samples exist."""
        if self.n < 2:
            return model
        mu = self.s / self.n
        sigma = math.sqrt(max(self.ss / self.n - mu * mu, 0.0))
        delta = mu + sigma * NormalDist().inv_cdf(1.0 - sm.EXCEED_PROB) if sigma > 0 else mu
        return dataclasses.replace(model, delta_a=min(delta, self.max), u_max=self.max)


# --------------------------------------------------------------------------- pretraining

def source_corpus(scene: SceneModel, camera: Camera, n_frames: int, seed: int) -> list[LabeledFrame]:
    """Ground-truth labelled frames from random poses of a source-domain scene."""
    rng = np.random.default_rng(seed)
    poses = _sample_free_poses(scene, n_frames, rng)
    out = []
    for i, p in enumerate(poses):
        f = render_frame(scene, p, camera, rng=rng, timestamp=i)
        out.append(LabeledFrame(f.features, f.gt_labels.astype(np.int64), replay=True, frame_id=i))
    return out


def pretrain(corpus: list[LabeledFrame], n_classes: int, cfg: PretrainConfig = PretrainConfig(),
             seed: int = 0) -> sm.SegModel:
    """Supervised training on source frames until validation accuracy plateaus."""
    rng = np.random.default_rng(seed)
    n_features = corpus[0].features.shape[-1]
    model = sm.init_model(n_features, n_classes, cfg.latent_dim, seed=seed)
    order = rng.permutation(len(corpus))
    n_val = max(1, round_half_up(cfg.val_fraction * len(corpus)))
    val = [corpus[i] for i in order[:n_val]]
    train = [corpus[i] for i in order[n_val:]]
    x_val, y_val = _pixels(val)
    x_tr, y_tr = _pixels(train)
    tcfg = TrainConfig(lr_latent=cfg.lr_latent, lr_head=cfg.lr_head, batch_size=cfg.batch_size)
    best, best_acc, bad = model, -1.0, 0
    for _ in range(cfg.epochs):
        model, _ = _epoch(model, x_tr, y_tr, tcfg, rng)
        acc = float(np.mean(sm.predict_pixels(model, x_val) == y_val))
        if acc > best_acc + 1e-4:
            best, best_acc, bad = model, acc, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    best, _ = refit_estimator(best, x_tr, rng, cfg.refit_samples, cfg.pca_components)
    log.info("pretrained model: source val accuracy %.4f", best_acc)
    return best


# --------------------------------------------------------------------------- mission

@dataclass
class AdaptationResult:
    models: list[sm.SegModel]
    metrics: list[dict]
    trajectory: list[dict]
    training_log: list[dict]
    smap: SemanticVoxelMap
    collisions: int = 0
    bundles: list[list[SensorFrame]] = field(default_factory=list)


def _coverage(smap: SemanticVoxelMap, observable: np.ndarray | None) -> float:
    if observable is None or len(observable) == 0:
        return float("nan")
    return float(np.mean(smap.state[observable] == SURFACE))


def run_adaptation(scene: SceneModel, model: sm.SegModel, gain: GainParams, cfg: TrainConfig,
                   cycles: int, *, camera: Camera, corpus: list[LabeledFrame],
                   test_frames: list[SensorFrame], seed: int = 0,
                   planner_cfg: PlannerConfig | None = None, lam: float = 0.5,
                   observable: np.ndarray | None = None, spin_frames: int = 4,
                   max_ticks_per_frame: int = 20, keep_bundles: bool = False) -> AdaptationResult:
    """Alternate plan-and-collect with retraining for ``cycles`` bundles.

    The map persists across cycles; each new model is published to the
    planner/mapping loop as soon as its cycle finishes. Cycle 0 in the metric
    trace is the incoming (pretrained) model.
    """
    ss = np.random.SeedSequence(seed)
    plan_seed, render_seed, train_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    render_rng = np.random.default_rng(render_seed)
    train_rng = np.random.default_rng(train_seed)
    planner_cfg = planner_cfg or PlannerConfig(robot_radius=scene.robot_radius,
                                               camera_height=scene.camera_height)
    gain = dataclasses.replace(gain, max_range=camera.max_range, hfov=camera.hfov)

    smap = SemanticVoxelMap.for_scene(scene, lam=lam, d_min=gain.d_min)
    start = scene.start_pose
    smap.mark_footprint_free(start, scene.robot_radius + 0.1)
    planner = Planner(start, gain, planner_cfg, seed=plan_seed)

    def evaluate(m, cycle, frames_total):
        iou, miou, _ = evaluate_frames(m, test_frames, scene.n_classes)
        return {"cycle": cycle, "miou": miou, "iou": iou, "coverage": _coverage(smap, observable),
                "frames": frames_total}

    models = [model]
    metrics = [evaluate(model, 0, 0)]
    trajectory: list[dict] = []
    training_log: list[dict] = []
    collected: list[SensorFrame] = []
    bundles: list[list[SensorFrame]] = []
    label_cache: dict = {}
    collisions = 0
    normalizer = RunningNormalizer() if cfg.running_normalizer else None
    current = model
    tick = 0
    pending_spin = [ViewPose(start.x, start.y, start.z, ((start.yaw + k * 2 * math.pi / spin_frames + math.pi)
                                                         % (2 * math.pi)) - math.pi)
                    for k in range(spin_frames)]
    prev_pose = start

    def capture(pose: ViewPose) -> SensorFrame:
        nonlocal current
        frame = render_frame(scene, pose, camera, rng=render_rng, timestamp=len(collected))
        labels, _, latents = sm.predict(current, frame)
        valid = frame.valid
        raw = np.full(valid.shape, np.nan)
        raw[valid] = sm.estimate_uncertainty(current, latents[valid])
        if normalizer is not None:
            normalizer.update(raw[valid])
            current = normalizer.apply(current)
        u_pred = sm.normalize_uncertainty(current, raw)
        smap.integrate_frame(frame, labels, u_pred, camera)
        smap.update_tau(frame, camera)
        collected.append(frame)
        return frame

    for cycle in range(1, cycles + 1):
        target = cycle * cfg.bundle_size
        ticks_left = max_ticks_per_frame * cfg.bundle_size
        while len(collected) < target:
            if pending_spin:
                pose = pending_spin.pop(0)
                kind, g, exhausted = "spin", 0.0, False
            else:
                if ticks_left <= 0:
                    raise RuntimeError("robot stuck: tick budget exhausted before bundle was full")
                ticks_left -= 1
                act = planner.tick(smap)
                tick += 1
                if act.kind != "move":
                    trajectory.append({"tick": tick, "cycle": cycle, "action": act.kind,
                                       "x": planner.pose.x, "y": planner.pose.y, "z": planner.pose.z,
                                       "yaw": planner.pose.yaw, "gain": 0.0, "mode": gain.mode})
                    continue
                pose, kind, g, exhausted = act.pose, "move", act.gain, act.exhausted
                if not check_path(scene, prev_pose, pose, scene.robot_radius):
                    collisions += 1
            prev_pose = pose
            capture(pose)
            trajectory.append({"tick": tick, "cycle": cycle, "action": "exhausted" if exhausted else kind,
                               "x": pose.x, "y": pose.y, "z": pose.z, "yaw": pose.yaw, "gain": g,
                               "mode": gain.mode})
        bundles.append(collected[target - cfg.bundle_size:target])

        # planning halts while the network retrains
        train, val = assemble_training_set(collected, corpus, cfg, smap, camera, current, train_rng,
                                           label_cache)
        new_model, rows, raw = train_cycle(current, train, val, cfg, train_rng)
        for r in rows:
            training_log.append({"cycle": cycle, **r})
        if raw is not None:
            current = new_model
            if normalizer is not None:
                normalizer = RunningNormalizer(raw)
        models.append(current)
        metrics.append(evaluate(current, cycle, len(collected)))
        log.info("cycle %d (%s): mIoU %.4f coverage %.3f", cycle, gain.mode,
                 metrics[-1]["miou"], metrics[-1]["coverage"])

    return AdaptationResult(models=models, metrics=metrics, trajectory=trajectory,
                            training_log=training_log, smap=smap, collisions=collisions,
                            bundles=bundles if keep_bundles else [])


# --------------------------------------------------------------------------- bundle archive

def save_bundle(frames: list[SensorFrame], path) -> None:
    poses = np.array([[f.pose.x, f.pose.y, f.pose.z, f.pose.yaw] for f in frames])
    with open(path, "wb") as fh:
        np.savez_compressed(
            fh, version=np.array(1), poses=poses,
            timestamps=np.array([f.timestamp for f in frames]),
            features=np.stack([f.features for f in frames]),
            depth=np.stack([f.depth for f in frames]),
            gt_labels=np.stack([f.gt_labels for f in frames]))


def load_bundle(path) -> list[SensorFrame]:
    with np.load(path) as d:
        out = []
        for i, p in enumerate(d["poses"]):
            feats = d["features"][i]
            out.append(SensorFrame(pose=ViewPose(*(float(v) for v in p)), width=feats.shape[1],
                                   height=feats.shape[0], features=feats, depth=d["depth"][i],
                                   gt_labels=d["gt_labels"][i], timestamp=int(d["timestamps"][i])))
    return out
