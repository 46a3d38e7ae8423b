"""Experiment orchestration: shared pretraining, (method, seed) runs, metric files."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import learner as lr
from .metrics import DEFAULT_BIN_EDGES, group_improvement, render_test_set
from .planner import CURIOSITY, EXPLORATION, RANDOM, GainParams, PlannerConfig
from .segmodel import save_model
from .semmap import SURFACE
from .worldsim import Camera, SceneConfig, generate_scene, observable_surface, sample_test_poses

log = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1
TEST_POSE_SEED_OFFSET = 10_000
NARROW_SCENE_ALPHA_U = 0.002  # preset for cluttered / corridor-like layouts


@dataclass(frozen=True)
class MethodSpec:
    name: str
    mode: str = CURIOSITY
    alpha_u: float | None = None  # None: experiment default
    supervision: str | None = None  # None: experiment default


DEFAULT_METHODS = (
    MethodSpec("curiosity", CURIOSITY),
    MethodSpec("exploration", EXPLORATION),
    MethodSpec("random", RANDOM),
)


@dataclass(frozen=True)
class ExperimentConfig:
    output_dir: str = "runs/default"
    cycles: int = 3
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    test_pose_count: int = 120
    methods: tuple[MethodSpec, ...] = DEFAULT_METHODS
    scene: SceneConfig = SceneConfig()
    camera: Camera = Camera()
    train: lr.TrainConfig = lr.TrainConfig()
    pretrain: lr.PretrainConfig = lr.PretrainConfig()
    gain: GainParams = GainParams()
    planner: dict = field(default_factory=dict)  # PlannerConfig overrides
    lam: float = 0.5
    source_scene_seed: int = 1000
    corpus_seed: int = 1
    pretrain_seed: int = 0
    save_checkpoints: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        kw = {}
        for key in ("output_dir", "cycles", "test_pose_count", "lam", "source_scene_seed",
                    "corpus_seed", "pretrain_seed", "save_checkpoints"):
            if key in d:
                kw[key] = d.pop(key)
        if "seeds" in d:
            kw["seeds"] = tuple(int(s) for s in d.pop("seeds"))
        if "methods" in d:
            kw["methods"] = tuple(m if isinstance(m, MethodSpec) else MethodSpec(**m) for m in d.pop("methods"))
        if "scene" in d:
            kw["scene"] = SceneConfig.from_dict(d.pop("scene"))
        if "camera" in d:
            kw["camera"] = Camera(**d.pop("camera"))
        if "train" in d:
            kw["train"] = lr.TrainConfig(**d.pop("train"))
        if "pretrain" in d:
            kw["pretrain"] = lr.PretrainConfig(**d.pop("pretrain"))
        if "gain" in d:
            g = dict(d.pop("gain"))
            if "rays" in g:
                g["rays"] = tuple(g["rays"])
            kw["gain"] = GainParams(**g)
        if "planner" in d:
            kw["planner"] = dict(d.pop("planner"))
        if d:
            raise ValueError(f"unknown experiment keys: {sorted(d)}")
        cfg = cls(**kw)
        names = [m.name for m in cfg.methods]
        if len(set(names)) != len(names):
            raise ValueError("method names must be unique")
        if cfg.cycles < 0:
            raise ValueError("cycles must be >= 0")
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        d["methods"] = [dataclasses.asdict(m) for m in self.methods]
        for key in ("extents", "object_size", "object_height"):
            d["scene"][key] = list(d["scene"][key])
        d["gain"]["rays"] = list(d["gain"]["rays"])
        return d


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(yaml.safe_load(fh) or {})


def method_params(cfg: ExperimentConfig, m: MethodSpec) -> tuple[GainParams, lr.TrainConfig]:
    """Gain and training settings of one method; everything else is shared."""
    gain = dataclasses.replace(cfg.gain, mode=m.mode,
                               alpha_u=cfg.gain.alpha_u if m.alpha_u is None else m.alpha_u)
    train = cfg.train if m.supervision is None else dataclasses.replace(cfg.train, supervision=m.supervision)
    return gain, train


# --------------------------------------------------------------------------- shared setup

@dataclass
class SeedContext:
    scene: object
    test_frames: list
    observable: np.ndarray


def prepare_pretrained(cfg: ExperimentConfig):
    """Source corpus and the pretrained model shared by every run."""
    src = generate_scene(cfg.source_scene_seed, cfg.scene, domain="source")
    corpus = lr.source_corpus(src, cfg.camera, cfg.pretrain.n_frames, cfg.corpus_seed)
    model = lr.pretrain(corpus, cfg.scene.n_classes, cfg.pretrain, seed=cfg.pretrain_seed)
    return model, corpus


def prepare_seed(cfg: ExperimentConfig, seed: int) -> SeedContext:
    scene = generate_scene(seed, cfg.scene)
    poses = sample_test_poses(scene, cfg.test_pose_count, seed + TEST_POSE_SEED_OFFSET)
    frames = render_test_set(scene, poses, cfg.camera, seed=seed + TEST_POSE_SEED_OFFSET)
    return SeedContext(scene, frames, observable_surface(scene, cfg.camera))


def run_single(cfg: ExperimentConfig, method: MethodSpec, seed: int, model, corpus,
               ctx: SeedContext | None = None) -> lr.AdaptationResult:
    """One (method, seed) mission from the shared pretrained model."""
    ctx = ctx or prepare_seed(cfg, seed)
    gain, train = method_params(cfg, method)
    pcfg = PlannerConfig(**{"robot_radius": ctx.scene.robot_radius,
                            "camera_height": ctx.scene.camera_height, **cfg.planner})
    return lr.run_adaptation(ctx.scene, model, gain, train, cfg.cycles, camera=cfg.camera,
                             corpus=corpus, test_frames=ctx.test_frames, seed=seed,
                             planner_cfg=pcfg, lam=cfg.lam, observable=ctx.observable)


# --------------------------------------------------------------------------- persistence

def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def metric_header(n_classes: int) -> list[str]:
    return (["schema_version", "method", "seed", "cycle", "miou", "coverage", "frames", "collisions"]
            + [f"iou_{c}" for c in range(n_classes)])


def metric_rows(method: str, seed: int, result: lr.AdaptationResult) -> list[list[str]]:
    rows = []
    for m in result.metrics:
        rows.append([str(METRICS_SCHEMA_VERSION), method, str(seed), str(m["cycle"]), _fmt(m["miou"]),
                     _fmt(m["coverage"]), str(m["frames"]), str(result.collisions)]
                    + [_fmt(v) for v in m["iou"]])
    return rows


class _Appender:
    """CSV file that is only ever appended to; header written on creation."""

    def __init__(self, path: Path, header: list[str]):
        self.path = path
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(header)

    def write(self, rows) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerows(rows)


def _write_dicts(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def read_metrics(path) -> list[dict]:
    """Metric rows with numeric fields parsed; empty IoU cells become NaN."""
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            ious = [float(r[k]) if r[k] else math.nan for k in r if k.startswith("iou_")]
            out.append({"method": r["method"], "seed": int(r["seed"]), "cycle": int(r["cycle"]),
                        "miou": float(r["miou"]) if r["miou"] else math.nan,
                        "coverage": float(r["coverage"]) if r["coverage"] else math.nan,
                        "frames": int(r["frames"]), "collisions": int(r["collisions"]),
                        "iou": np.array(ious)})
    return out


def _save_map_summary(path: Path, result: lr.AdaptationResult) -> None:
    smap = result.smap
    hits = smap.grid(smap.observation_hits).sum(axis=2)
    st = smap.grid(smap.state)
    cls = smap.grid(smap.map_classes())
    # top-most observed surface class per column
    surf = st == SURFACE
    top = np.where(surf.any(axis=2), st.shape[2] - 1 - np.argmax(surf[:, :, ::-1], axis=2), -1)
    top_cls = np.where(top >= 0, np.take_along_axis(cls, np.maximum(top, 0)[..., None], axis=2)[..., 0], -1)
    traj = np.array([[t["x"], t["y"]] for t in result.trajectory if t["action"] not in ("expand", "replan")])
    np.savez_compressed(path, hits=hits, top_class=top_cls, trajectory=traj.reshape(-1, 2),
                        voxel_size=np.array(smap.voxel_size))


# --------------------------------------------------------------------------- summaries

def summarize(rows: list[dict], bin_edges=DEFAULT_BIN_EDGES):
    """Per-method final-cycle statistics and pooled per-bin IoU improvement."""
    by_method: dict[str, dict[int, dict[int, dict]]] = {}
    for r in rows:
        by_method.setdefault(r["method"], {}).setdefault(r["seed"], {})[r["cycle"]] = r
    summary, bins = [], []
    for method, seeds in by_method.items():
        finals, pre = [], []
        before, after = [], []
        for seed in sorted(seeds):
            cyc = seeds[seed]
            last = cyc[max(cyc)]
            finals.append(last["miou"])
            pre.append(cyc[0]["miou"] if 0 in cyc else math.nan)
            if 0 in cyc:
                before.append(cyc[0]["iou"])
                after.append(last["iou"])
        finals, pre = np.array(finals), np.array(pre)
        last_cycle = max(max(c) for c in seeds.values())
        summary.append({
            "method": method, "runs": len(finals), "final_cycle": last_cycle,
            "pretrained_miou": float(np.nanmean(pre)),
            "final_miou_mean": float(np.mean(finals)), "final_miou_std": float(np.std(finals)),
            "delta_miou": float(np.mean(finals - pre)),
        })
        if before:
            for g in group_improvement(np.concatenate(before), np.concatenate(after), bin_edges):
                bins.append({"method": method, "bin": g["bin"], "n_entries": len(g["classes"]),
                             "mean_delta": "" if g["mean_delta"] is None else g["mean_delta"]})
    return summary, bins


def write_summary(out: Path, rows: list[dict]) -> None:
    summary, bins = summarize(rows)
    _write_dicts(out / "summary.csv", summary)
    _write_dicts(out / "group_improvement.csv", bins)
    lines = ["| method | runs | pretrained mIoU | final mIoU | delta |", "|---|---|---|---|---|"]
    for s in summary:
        lines.append(f"| {s['method']} | {s['runs']} | {s['pretrained_miou']:.3f} | "
                     f"{s['final_miou_mean']:.3f} ± {s['final_miou_std']:.3f} | {s['delta_miou']:+.3f} |")
    (out / "summary.md").write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------- driver

@dataclass
class ExperimentResult:
    output_dir: Path
    rows: list[dict]
    failures: list[dict]
    collisions: int

    @property
    def ok(self) -> bool:
        return not self.failures


def run_experiment(cfg: ExperimentConfig, plots: bool = True) -> ExperimentResult:
    """Run every (method, seed) pair and write metrics, logs, checkpoints and plots.

    Metric rows are appended in (method, seed) order as runs finish; wall
    times go to a separate file so the metric file is reproducible byte for
    byte. A crashed run is logged to ``failures.csv`` and skipped.
    """
    out = Path(cfg.output_dir)
    for sub in ("checkpoints", "logs", "maps"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    with open(out / "config.yaml", "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)

    t0 = time.perf_counter()
    model, corpus = prepare_pretrained(cfg)
    save_model(model, out / "checkpoints" / "pretrained.npz")
    pretrain_time = time.perf_counter() - t0

    metrics = _Appender(out / "metrics.csv", metric_header(cfg.scene.n_classes))
    timings = _Appender(out / "timings.csv", ["method", "seed", "wall_time_s"])
    timings.write([["pretrain", "", f"{pretrain_time:.3f}"]])
    failures: list[dict] = []
    contexts: dict[int, SeedContext] = {}
    collisions = 0

    for method in cfg.methods:
        for seed in cfg.seeds:
            tag = f"{method.name}_s{seed}"
            t0 = time.perf_counter()
            try:
                if seed not in contexts:
                    contexts[seed] = prepare_seed(cfg, seed)
                res = run_single(cfg, method, seed, model, corpus, contexts[seed])
            except Exception as exc:  # a crashed run must not take the others down
                log.exception("run %s failed", tag)
                failures.append({"method": method.name, "seed": seed, "error": f"{type(exc).__name__}: {exc}"})
                continue
            metrics.write(metric_rows(method.name, seed, res))
            timings.write([[method.name, str(seed), f"{time.perf_counter() - t0:.3f}"]])
            collisions += res.collisions
            _write_dicts(out / "logs" / f"trajectory_{tag}.csv", res.trajectory)
            _write_dicts(out / "logs" / f"training_{tag}.csv", res.training_log)
            _save_map_summary(out / "maps" / f"{tag}.npz", res)
            if cfg.save_checkpoints:
                for c, m in enumerate(res.models):
                    if c > 0:
                        save_model(m, out / "checkpoints" / f"{tag}_c{c}.npz")
            log.info("finished %s: final mIoU %.4f", tag, res.metrics[-1]["miou"])

    if failures:
        _write_dicts(out / "failures.csv", failures)
    rows = read_metrics(out / "metrics.csv")
    write_summary(out, rows)
    if plots:
        from .plotting import make_plots
        make_plots(out)
    return ExperimentResult(out, rows, failures, collisions)
