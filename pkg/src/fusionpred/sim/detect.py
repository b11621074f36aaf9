"""Noisy pseudo-detections derived from ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Box3D
from .motion import CLASS_MOTION


@dataclass(frozen=True)
class DetectionNoise:
    sigma_pos: float = 0.1
    sigma_yaw: float = 0.02
    sigma_size: float = 0.02
    fp_rate: float = 0.02
    fn_rate: float = 0.02
    clutter_range: float = 40.0
    true_confidence: tuple = (0.6, 1.0)
    clutter_confidence: tuple = (0.3, 0.6)

    def __post_init__(self):
        for name in ("fp_rate", "fn_rate"):
            r = getattr(self, name)
            if not 0 <= r <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {r}")
        if min(self.sigma_pos, self.sigma_yaw, self.sigma_size) < 0:
            raise ValueError("noise standard deviations must be non-negative")


def pseudo_detect(boxes, noise: DetectionNoise, rng: np.random.Generator) -> list[Box3D]:
    """Perturb, drop and clutter ground-truth ``boxes``.

    Each box survives with probability ``1 - fn_rate`` and then gets Gaussian
    position, yaw and relative size noise.  Each ground-truth box also spawns
    a clutter box with probability ``fp_rate``, uniform over the clutter
    square.  True boxes draw higher confidences than clutter.
    """
    exact = noise.sigma_pos == 0 and noise.sigma_yaw == 0 and noise.sigma_size == 0
    out = []
    for b in boxes:
        drop = rng.random() < noise.fn_rate
        spawn_fp = rng.random() < noise.fp_rate
        dpos = rng.normal(0.0, 1.0, 2)
        dyaw, dsize = rng.normal(), rng.normal(0.0, 1.0, 3)
        conf = float(rng.uniform(*noise.true_confidence))
        if not drop:
            if exact:
                out.append(Box3D(b.center, b.size, b.yaw, b.cls, conf))
            else:
                center = b.center + np.array([*(noise.sigma_pos * dpos), 0.0])
                size = b.size * np.maximum(1 + noise.sigma_size * dsize, 0.1)
                out.append(Box3D(center, size, b.yaw + noise.sigma_yaw * dyaw, b.cls, conf))
        if spawn_fp:
            cls = int(rng.integers(0, len(CLASS_MOTION)))
            size = np.asarray(CLASS_MOTION[cls].size)
            xy = rng.uniform(-noise.clutter_range, noise.clutter_range, 2)
            out.append(Box3D([xy[0], xy[1], size[2] / 2], size, rng.uniform(-np.pi, np.pi), cls,
                             float(rng.uniform(*noise.clutter_confidence))))
    return out
