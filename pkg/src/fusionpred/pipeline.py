"""Stage functions wired together by the command-line interface.

Each stage reads its inputs, never modifies them, and returns plain data so
the CLI only handles argument parsing, file placement and formatting.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audit
from .config import PipelineConfig
from .geometry import Box3D, bev_scatter, voxelize
from .mda import DecoderParams, MdaContext, MdaParams, QuerySet, decoder_forward
from .metrics import (average_precision, class_name, min_ade, min_fde, precision_recall,
                      tracking_report)
from .mme import MmeParams, mme_forward
from .rtmct.data import generate_samples
from .rtmct.model import init_params, predict
from .rtmct.preprocess import AgentHistory, preprocess
from .rtmct.train import train
from .sim.dataset import iter_frames, read_meta, write_dataset
from .sim.detect import pseudo_detect
from .sim.world import FRAME_RATE, Scenario, frame_rng, lift_features, simulate
from .tracker import Tracker, TrackRecord, read_stream, track_frame

DETECTION_STREAM = 2  # per-frame random stream used for pseudo-detections
PREDICTION_FORMAT = "fusionpred-predictions"


class InputError(ValueError):
    """A missing or malformed input file."""


# --- dataset -------------------------------------------------------------------------

def run_simulation(cfg: PipelineConfig, out_dir, workers: int = 1) -> dict:
    scenario = cfg.scenario()
    frames = simulate(scenario, cfg["seed"], cfg["scenario.frames"], workers)
    meta = {"seed": cfg["seed"], "scenario": scenario.to_dict()}
    write_dataset(frames, out_dir, meta)
    return {"frames": len(frames), "agents": len(scenario.agents),
            "points": int(sum(len(f.points) for f in frames)),
            "boxes": int(sum(len(f.boxes) for f in frames))}


def open_dataset(path):
    """``(meta, scenario)`` for a dataset directory; errors name the path."""
    path = Path(path)
    if not path.is_dir():
        raise InputError(f"{path}: dataset directory not found")
    try:
        meta = read_meta(path)
        scenario = Scenario.from_dict(meta["scenario"])
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None
    return meta, scenario


def dataset_frames(path):
    try:
        yield from iter_frames(path)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None


def world_ground_truth(path) -> list[list[tuple[int, Box3D]]]:
    """Per frame ``(agent id, world box)`` for every visible agent."""
    return [[(int(i), b.transformed(f.ego_pose)) for i, b in zip(f.ids, f.boxes)] for f in dataset_frames(path)]


def ground_truth_trajectories(path) -> dict:
    out: dict = {}
    for frame in world_ground_truth(path):
        for gid, b in frame:
            out.setdefault(gid, []).append(b.center[:2])
    return {k: np.array(v) for k, v in out.items()}


# --- fusion diagnostics --------------------------------------------------------------

def fusion_check(cfg: PipelineConfig, path) -> list[tuple]:
    """Audit the fast fusion paths against slow references on the first frames."""
    _, scenario = open_dataset(path)
    grid, mcfg, dcfg = cfg.grid(), cfg.mme(), cfg.mda()
    cameras = scenario.cameras()
    if len(cameras) != dcfg.num_cameras:
        raise InputError(f"{path}: dataset has {len(cameras)} cameras, mda.num_cameras is {dcfg.num_cameras}")
    params = MdaParams.random(dcfg, seed=cfg["seed"])
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 0xF05E]))
    records = []
    sums = {"serialization_mismatches": 0, "association_violations": 0, "associated_features": 0,
            "image_features": 0, "voxels": 0}
    worst = 0.0
    n = 0
    for frame in dataset_frames(path):
        if n >= cfg["fuse.frames"]:
            break
        n += 1
        vox = voxelize(frame.points[:, :3].astype(np.float64), grid, dcfg.dim, seed=cfg["seed"])
        sums["voxels"] += len(vox.coords)
        if len(vox.coords) == 0:
            continue
        for axis in ("x", "y"):
            sums["serialization_mismatches"] += audit.serialization_audit(vox, cfg.window(axis))
        pyramids = [lift_features(p, dcfg.dim, seed=j) for j, p in enumerate(frame.features)]
        if len(pyramids) != len(cameras) or any(len(p) != dcfg.num_levels for p in pyramids):
            raise InputError(f"{path}: frame {frame.index} feature pyramids do not match the MDA config")
        for cam, pyr in zip(cameras, pyramids):
            a = audit.association_audit(vox, grid, cam, pyr[0], mcfg.radius)
            sums["association_violations"] += a["violations"]
            sums["associated_features"] += a["associated"]
            sums["image_features"] += a["features"]
        refs = rng.uniform(0.0, 1.0, (cfg["fuse.queries"], 3))
        queries = QuerySet(rng.normal(0.0, 1.0, (len(refs), dcfg.dim)), refs)
        worst = max(worst, audit.mda_audit(queries, bev_scatter(vox, grid), pyramids, cameras, grid, params, dcfg))
    records.append(("frames_checked", "all", n))
    records += [(k, "all", v) for k, v in sums.items()]
    records.append(("mda_max_abs_diff", "all", worst))
    return records


# --- tracking ------------------------------------------------------------------------

def detections_for(frame, cfg: PipelineConfig) -> list[Box3D]:
    return pseudo_detect(frame.boxes, cfg.detection(), frame_rng(cfg["seed"], frame.index, DETECTION_STREAM))


def run_tracking(cfg: PipelineConfig, path, workers: int = 1) -> list[TrackRecord]:
    open_dataset(path)
    out = []
    with Tracker(cfg.tracker(), workers) as tracker:
        for frame in dataset_frames(path):
            out.extend(tracker.step(detections_for(frame, cfg), frame.timestamp, frame.ego_pose))
    return out


def load_tracks(path) -> list[TrackRecord]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: tracklet stream not found")
    try:
        return list(read_stream(path))
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None


def tracks_by_frame(records, frames: int) -> list[list[tuple[int, Box3D]]]:
    out = [[] for _ in range(frames)]
    for r in records:
        if r.frame >= frames:
            raise InputError(f"tracklet record at frame {r.frame} beyond the dataset's {frames} frames")
        out[r.frame].append((r.id, r.box))
    return out


def track_trajectories(records) -> dict:
    out: dict = {}
    for r in records:
        out.setdefault(r.id, []).append(r.box.center[:2])
    return {k: np.array(v) for k, v in out.items()}


# --- histories for the predictor -----------------------------------------------------

@dataclass
class Observations:
    """Per-agent positions keyed by frame, plus the ego (robot) position."""
    positions: dict  # id -> {frame: (x, y)}
    classes: dict  # id -> class
    ego: dict  # frame -> (x, y)


def observations_from_dataset(path) -> Observations:
    pos, cls, ego = {}, {}, {}
    for frame in dataset_frames(path):
        ego[frame.index] = frame.ego_pose.translation[:2].copy()
        for i, b in zip(frame.ids, frame.boxes):
            w = b.transformed(frame.ego_pose)
            pos.setdefault(int(i), {})[frame.index] = w.center[:2]
            cls[int(i)] = w.cls
    return Observations(pos, cls, ego)


def observations_from_tracks(records) -> Observations:
    pos, cls = {}, {}
    for r in records:
        pos.setdefault(r.id, {})[r.frame] = r.box.center[:2]
        cls[r.id] = r.box.cls
    return Observations(pos, cls, {})


def _history(track: dict, cls: int, anchor: int, t_obs: int) -> AgentHistory | None:
    frames = [f for f in range(anchor - t_obs + 1, anchor + 1) if f in track]
    if not frames:
        return None
    return AgentHistory(cls, np.array([track[f] for f in frames]), np.array(frames) - anchor)


def agent_context(obs: Observations, agent: int, anchor: int, t_obs: int, robot_class: int):
    """Target history ending at ``anchor`` and every other agent's overlapping history."""
    target = _history(obs.positions[agent], obs.classes[agent], anchor, t_obs)
    others = []
    for other in sorted(obs.positions):
        if other == agent:
            continue
        h = _history(obs.positions[other], obs.classes[other], anchor, t_obs)
        if h is not None:
            others.append(h)
    if obs.ego:
        h = _history(obs.ego, robot_class, anchor, t_obs)
        if h is not None:
            others.append(h)
    return target, others


def training_samples(obs: Observations, cfg: PipelineConfig) -> list[tuple]:
    """Sliding windows with a complete observed history and future."""
    rc = cfg.rtmct()
    stride = cfg["train.window_stride"]
    out = []
    for agent in sorted(obs.positions):
        track = obs.positions[agent]
        if obs.classes[agent] >= rc.num_classes:
            continue
        frames = sorted(track)
        for anchor in frames[rc.t_obs - 1::stride]:
            span = range(anchor - rc.t_obs + 1, anchor + rc.t_pred + 1)
            if not all(f in track for f in span):
                continue
            target, others = agent_context(obs, agent, anchor, rc.t_obs, rc.robot_class)
            future = np.array([track[f] for f in range(anchor + 1, anchor + rc.t_pred + 1)])
            out.append((target, others, future))
    return out


def train_predictor(cfg: PipelineConfig, source=None, log=None):
    """Train on a dataset directory, a tracklet stream, or synthetic samples when ``source`` is None.

    Returns ``(TrainResult, sample count)``.
    """
    rc = cfg.rtmct()
    if source is None:
        samples = generate_samples(cfg["train.samples"], rc, seed=cfg["seed"])
    else:
        src = Path(source)
        if src.is_dir():
            open_dataset(src)
            obs = observations_from_dataset(src)
        else:
            obs = observations_from_tracks(load_tracks(src))
        samples = training_samples(obs, cfg)
    batch, _, _ = preprocess(samples, rc)
    if len(batch) == 0:
        raise InputError(f"{source}: no trajectory windows of {rc.t_obs + rc.t_pred} frames to train on")
    return train(batch, init_params(rc, seed=cfg["seed"]), rc, cfg.training(), log=log), len(batch)


# --- prediction ----------------------------------------------------------------------

def ego_positions(path) -> dict:
    return {f.index: f.ego_pose.translation[:2].copy() for f in dataset_frames(path)}


def run_prediction(records, params: dict, rc, cfg: PipelineConfig, ego: dict | None = None) -> list[dict]:
    """Predict for every track at every ``predict.stride``-th frame it is reported in.

    ``ego`` (frame -> world XY) adds the sensor platform as a robot-class neighbour.
    """
    obs = observations_from_tracks(records)
    obs.ego = dict(ego or {})
    stride, keep = cfg["predict.stride"], cfg["predict.keep"]
    items, keys = [], []
    for agent in sorted(obs.positions):
        if obs.classes[agent] >= rc.num_classes:
            continue
        for anchor in sorted(obs.positions[agent]):
            if anchor % stride:
                continue
            target, others = agent_context(obs, agent, anchor, rc.t_obs, rc.robot_class)
            items.append((target, others))
            keys.append((anchor, agent))
    if not items:
        return []
    batch, kept, _ = preprocess(items, rc)
    if len(batch) == 0:
        return []
    out = []
    for (anchor, agent), p in zip([keys[i] for i in kept], predict(batch, params, rc)):
        out.append({"frame": anchor, "id": agent, "cls": int(obs.classes[agent]),
                    "scores": p.scores[:keep].tolist(), "trajectories": p.trajectories[:keep].tolist()})
    out.sort(key=lambda r: (r["frame"], r["id"]))
    return out


def write_predictions(preds, path, dt: float) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": PREDICTION_FORMAT, "version": 1, "dt": dt}, sort_keys=True) + "\n")
        for p in preds:
            fh.write(json.dumps(p, sort_keys=True) + "\n")


def read_predictions(path) -> tuple[float, list[dict]]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: predictions file not found")
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    try:
        head = json.loads(lines[0]) if lines else {}
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:1: bad header ({exc})") from None
    if head.get("format") != PREDICTION_FORMAT:
        raise InputError(f"{path}: not a predictions file")
    out = []
    for n, ln in enumerate(lines[1:], 2):
        try:
            rec = json.loads(ln)
            rec["trajectories"] = np.asarray(rec["trajectories"], dtype=np.float64).reshape(len(rec["scores"]), -1, 2)
            rec["scores"] = np.asarray(rec["scores"], dtype=np.float64)
            int(rec["frame"]), int(rec["id"]), int(rec["cls"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}:{n}: bad prediction record ({exc})") from None
        out.append(rec)
    return float(head["dt"]), out


# --- evaluation ----------------------------------------------------------------------

@dataclass
class Evaluation:
    records: list  # (metric, class, value)
    pr_curves: dict  # class name -> (recall, precision)


def evaluate(cfg: PipelineConfig, dataset, detections=None, tracks=None, predictions=None) -> Evaluation:
    """Detection AP, tracking quality and matched-tracklet trajectory errors.

    ``detections`` default to pseudo-detections regenerated from ``dataset``;
    ``tracks`` and ``predictions`` are optional and add their sections.
    """
    ecfg = cfg.evaluation()
    open_dataset(dataset)
    frames = list(dataset_frames(dataset))
    gt = [list(f.boxes) for f in frames]
    if detections is None:
        detections = [detections_for(f, cfg) for f in frames]
    records, curves = [], {}
    for c, thr in enumerate(ecfg.iou_thresholds):
        name = class_name(c)
        ap = average_precision(detections, gt, c, ecfg)
        records.append(("ap", name, ap))
        records.append(("ap_iou_threshold", name, thr))
        prec, rec, n_gt = precision_recall(detections, gt, c, thr)
        records.append(("gt_boxes", name, int(n_gt)))
        curves[name] = (rec, prec)
    if predictions is not None and tracks is None:
        raise InputError("predictions need the tracklet stream to be matched to ground truth")
    if tracks is None:
        return Evaluation(records, curves)
    world = [[(int(i), b.transformed(f.ego_pose)) for i, b in zip(f.ids, f.boxes)] for f in frames]
    rep = tracking_report(tracks_by_frame(tracks, len(frames)), world, ecfg)
    records += [("id_switches", "all", rep.id_switches), ("track_matches", "all", rep.matches),
                ("track_misses", "all", rep.misses), ("false_tracks", "all", rep.false_tracks),
                ("mota", "all", rep.mota),
                ("min_coverage", "all", min(rep.coverage.values()) if rep.coverage else None)]
    records += [("coverage", f"agent{gid}", v) for gid, v in rep.coverage.items()]
    if predictions is None:
        return Evaluation(records, curves)
    dt, preds = predictions
    records += trajectory_records(preds, dt, rep.assignment, world, ecfg.top_k)
    return Evaluation(records, curves)


def trajectory_records(preds, dt: float, assignment: dict, world, top_k) -> list[tuple]:
    """minADE/minFDE over predictions whose tracklet is matched and whose future is fully visible."""
    gt_pos = {}
    for f, frame in enumerate(world):
        for gid, b in frame:
            gt_pos[(f, gid)] = b.center[:2]
    errors: dict = {}
    skipped = 0
    for p in preds:
        gid = assignment.get((int(p["frame"]), int(p["id"])))
        n_steps = p["trajectories"].shape[1]
        future_frames = [int(p["frame"]) + int(round((s + 1) * dt * FRAME_RATE)) for s in range(n_steps)]
        if gid is None or any((f, gid) not in gt_pos for f in future_frames):
            skipped += 1
            continue
        truth = np.array([gt_pos[(f, gid)] for f in future_frames])
        for k in top_k:
            if k > len(p["scores"]):
                raise InputError(f"top-k {k} exceeds the {len(p['scores'])} stored prediction modes")
            for name in (class_name(int(p["cls"])), "all"):
                e = errors.setdefault((k, name), ([], []))
                e[0].append(min_ade(p["trajectories"], p["scores"], truth, k))
                e[1].append(min_fde(p["trajectories"], p["scores"], truth, k))
    out = [("predictions_evaluated", "all", len(preds) - skipped), ("predictions_skipped", "all", skipped)]
    for (k, name), (ade, fde) in sorted(errors.items()):
        out.append((f"min_ade@{k}", name, float(np.mean(ade))))
        out.append((f"min_fde@{k}", name, float(np.mean(fde))))
    return out


# --- benchmark -----------------------------------------------------------------------

def benchmark(cfg: PipelineConfig, workers: int = 1) -> list[tuple]:
    """Per-stage latency ``(stage, mean, p50, p99)`` in milliseconds on one simulated frame."""
    scenario = cfg.scenario()
    grid, mcfg, dcfg, rc = cfg.grid(), cfg.mme(), cfg.mda(), cfg.rtmct()
    seed = cfg["seed"]
    frame = simulate(scenario, seed, 1)[0]
    cameras = scenario.cameras()
    pyramids = [lift_features(p, dcfg.dim, seed=j) for j, p in enumerate(frame.features)]
    mme_params = MmeParams.random(dcfg.dim, mcfg, seed=seed)
    dec_params = DecoderParams.random(dcfg, num_layers=1, seed=seed)
    vox = voxelize(frame.points[:, :3].astype(np.float64), grid, dcfg.dim, seed=seed)
    fused, fused_img = mme_forward(vox, [p[0] for p in pyramids], cameras, grid, mme_params, mcfg)
    context = MdaContext(bev_scatter(fused, grid), [[fused_img[j]] + list(p[1:]) for j, p in enumerate(pyramids)],
                         cameras, grid)
    qrng = np.random.default_rng(seed)
    queries = QuerySet(qrng.normal(0, 1, (cfg["bench.queries"], dcfg.dim)),
                       qrng.uniform(0, 1, (cfg["bench.queries"], 3)))
    dets = detections_for(frame, cfg)
    tcfg = cfg.tracker()
    samples = generate_samples(32, rc, seed=seed)
    batch, _, _ = preprocess([(t, o) for t, o, _ in samples], rc)
    rt_params = init_params(rc, seed=seed)

    warm = Tracker(tcfg)
    for i in range(tcfg.birth + 1):
        warm.step(dets, i / FRAME_RATE, frame.ego_pose)
    state, t_next = warm.state, (tcfg.birth + 1) / FRAME_RATE
    pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def track_step():
        track_frame(state, dets, t_next, frame.ego_pose, tcfg, pool)

    stages = [
        ("render", lambda: simulate(scenario, seed, 1)),
        ("voxelize", lambda: voxelize(frame.points[:, :3].astype(np.float64), grid, dcfg.dim, seed=seed)),
        ("fusion_encoder", lambda: mme_forward(vox, [p[0] for p in pyramids], cameras, grid, mme_params, mcfg)),
        ("fusion_decoder", lambda: decoder_forward(queries, context, dec_params, dcfg)),
        ("tracker", track_step),
        ("predictor", lambda: predict(batch, rt_params, rc)),
    ]
    out = []
    for name, fn in stages:
        for _ in range(cfg["bench.warmup"]):
            fn()
        times = []
        for _ in range(cfg["bench.repeats"]):
            t0 = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t0) * 1e3)
        t = np.array(times)
        out.append((name, float(t.mean()), float(np.percentile(t, 50)), float(np.percentile(t, 99))))
    if pool:
        pool.shutdown()
    return out
