"""Mini-batch training with Adam, class-balanced sampling and JSON checkpoints."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RtmctConfig
from .model import audit_positive_index, loss_and_grad
from .preprocess import TrajectoryBatch

CHECKPOINT_FORMAT = "fusionpred-rtmct"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 1e-4
    steps: int = 1000
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    class_balanced: bool = True
    audit: bool = False  # re-check every positive selection with a scalar scan
    grad_clip: float | None = 10.0
    schedule: str = "constant"  # or "cosine": decays to zero over ``steps``

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant":
            return self.lr
        if self.schedule == "cosine":
            return 0.5 * self.lr * (1 + np.cos(np.pi * step / max(self.steps, 1)))
        raise ValueError(f"unknown learning-rate schedule {self.schedule!r}")


@dataclass
class TrainResult:
    params: dict
    curve: list = field(default_factory=list)  # per-step loss
    audited: int = 0
    seconds: float = 0.0


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        out = {}
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            out[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return out


def class_balanced_weights(cls: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-element sampling probabilities inversely proportional to class frequency."""
    counts = np.bincount(cls, minlength=num_classes).astype(np.float64)
    w = 1.0 / counts[cls]
    return w / w.sum()


def train(data: TrajectoryBatch, params: dict, config: RtmctConfig, settings: TrainSettings = TrainSettings(),
          log=None) -> TrainResult:
    if len(data) == 0:
        raise ValueError("training set is empty")
    if data.future is None:
        raise ValueError("training set has no ground-truth futures")
    settings.lr_at(0)
    rng = np.random.default_rng(settings.seed)
    probs = class_balanced_weights(data.cls, config.num_classes) if settings.class_balanced else None
    opt = Adam(params, settings.lr, settings.beta1, settings.beta2, settings.eps)
    result = TrainResult(dict(params))
    t0 = time.perf_counter()
    p = result.params
    for step in range(settings.steps):
        idx = rng.choice(len(data), size=min(settings.batch_size, len(data)), replace=probs is not None, p=probs) \
            if probs is not None else rng.choice(len(data), size=min(settings.batch_size, len(data)), replace=False)
        batch = data.subset(np.sort(idx))
        value, grads, pos, parts = loss_and_grad(batch, p, config)
        if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDiverged(f"non-finite loss/gradient at step {step}: loss={value}, "
                                   f"smooth_l1={parts[0]}, ce={parts[1]}, lr={settings.lr}")
        if settings.audit:
            refs = p["refs"]
            for i in range(len(batch)):
                want = audit_positive_index(batch.future[i], refs[batch.cls[i]])
                if want != pos[i]:
                    raise AssertionError(f"positive selection mismatch at step {step}, element {i}: "
                                         f"{pos[i]} vs exhaustive {want}")
                result.audited += 1
        if settings.grad_clip:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > settings.grad_clip:
                grads = {k: g * (settings.grad_clip / norm) for k, g in grads.items()}
        opt.lr = settings.lr_at(step)
        p = opt.step(p, grads)
        result.curve.append(value)
        if log and (step % 100 == 0 or step == settings.steps - 1):
            log(f"step {step} loss {value:.4f}")
    result.params = p
    result.seconds = time.perf_counter() - t0
    return result


def save_checkpoint(path, params: dict, config: RtmctConfig, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(params.items())},
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path):
    """Returns ``(params, config, extra)``; values round-trip bit-exactly."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not a checkpoint ({exc})") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unexpected checkpoint format {doc.get('format')!r}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    config = RtmctConfig.from_dict(doc["config"])
    params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
    return params, config, doc.get("extra", {})
