"""Flat ``section.key: value`` pipeline configuration (YAML syntax).

Every key has a default here; files and ``--set`` overrides may only name
known keys, and values must match the default's type.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import yaml

from .geometry import GridSpec
from .mda import MdaConfig
from .metrics import EvalConfig
from .mme import MmeConfig
from .rtmct.config import RtmctConfig
from .rtmct.train import TrainSettings
from .serialization import WindowSpec
from .sim.detect import DetectionNoise
from .sim.render import LidarConfig
from .sim.world import Scenario, random_scenario, reference_scenario
from .tracker import TrackerConfig


def _prefixed(prefix: str, cls, skip=()) -> dict:
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        v = f.default
        out[f"{prefix}.{f.name}"] = list(v) if isinstance(v, tuple) else v
    return out


DEFAULTS: dict = {
    "seed": 0,
    "scenario.preset": "reference",  # or "random"
    "scenario.agents": 5,  # agent count for the random preset
    "scenario.frames": 300,
    "scenario.ego_path": "static",
    "scenario.ego_speed": 0.0,
    "scenario.visible_range": 50.0,
    "scenario.feature_channels": 8,
    **_prefixed("lidar", LidarConfig),
    "grid.lower": [-40.0, -40.0, -1.0],
    "grid.upper": [40.0, 40.0, 3.0],
    "grid.cell_size": [0.5, 0.5, 0.5],
    **_prefixed("mme", MmeConfig),
    **_prefixed("mda", MdaConfig),
    "fuse.frames": 2,  # frames audited by fuse-check
    "fuse.queries": 4,  # MDA queries compared against the loop reference per frame
    "fuse.tolerance": 1e-9,  # largest accepted MDA difference to the loop reference
    **_prefixed("detect", DetectionNoise),
    **_prefixed("tracker", TrackerConfig),
    **_prefixed("rtmct", RtmctConfig),
    "train.samples": 5000,  # synthetic training trajectories
    "train.lr": 2e-3,
    "train.steps": 3000,
    "train.batch_size": 32,
    "train.schedule": "cosine",
    "train.class_balanced": True,
    "train.audit": False,
    "train.window_stride": 4,  # frames between training windows cut from a dataset or tracklet stream
    "predict.stride": 10,  # predict every n-th frame of each tracklet
    "predict.keep": 10,  # highest-scoring modes stored per prediction
    **_prefixed("eval", EvalConfig),
    "bench.repeats": 5,
    "bench.warmup": 1,
    "bench.queries": 300,  # decoder object queries, reference points spread over the grid
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):  # YAML 1.1 reads exponents without a dot ("1e9") as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        if default and len(value) != len(default) and key not in _VARIABLE_LENGTH:
            raise ConfigError(f"{key}: expected {len(default)} values, got {len(value)}")
        proto = default[0] if default else 0.0
        return [_coerce(f"{key}[{i}]", v, proto) for i, v in enumerate(value)]
    if default is None:
        return value
    raise ConfigError(f"{key}: unsupported value {value!r}")


_VARIABLE_LENGTH = {"rtmct.forward_speeds", "rtmct.turn_rates", "rtmct.thresholds", "rtmct.class_speed_scale",
                    "eval.top_k", "lidar.elevation_deg"}


@dataclass
class PipelineConfig:
    values: dict

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "PipelineConfig":
        values = dict(DEFAULTS)
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    doc = yaml.safe_load(fh)
            except FileNotFoundError:
                raise ConfigError(f"{path}: config file not found") from None
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: invalid YAML ({exc})") from None
            if doc is None:
                doc = {}
            if not isinstance(doc, dict):
                raise ConfigError(f"{path}: expected a flat mapping of keys to values")
            for k, v in doc.items():
                if isinstance(v, dict):
                    raise ConfigError(f"{path}: {k}: nested sections are not allowed; use dotted keys")
                cls._set(values, str(k), v, str(path))
        for k, v in (overrides or {}).items():
            cls._set(values, k, v, "override")
        cfg = cls(values)
        cfg.validate()
        return cfg

    @staticmethod
    def _set(values: dict, key: str, value, where: str) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        values[key] = _coerce(key, value, DEFAULTS[key])

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: (tuple(v) if isinstance(v, list) else v) for k, v in self.values.items()
                if k.startswith(prefix + ".")}

    def dump(self) -> str:
        return yaml.safe_dump(self.values, sort_keys=True, default_flow_style=None)

    # --- module configs ----------------------------------------------------------------

    def _build(self, prefix, cls, extra=()):
        kw = {k: v for k, v in self.section(prefix).items() if k not in extra}
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{prefix}: {exc}") from None

    def lidar(self) -> LidarConfig:
        return self._build("lidar", LidarConfig)

    def scenario(self) -> Scenario:
        sc = self.section("scenario")
        common = dict(ego_path=sc["ego_path"], ego_speed=sc["ego_speed"], visible_range=sc["visible_range"],
                      feature_channels=sc["feature_channels"], lidar=self.lidar())
        try:
            if sc["preset"] == "reference":
                return reference_scenario(**common)
            if sc["preset"] == "random":
                rng = np.random.default_rng(np.random.SeedSequence([self["seed"], 0x5CE7]))
                return random_scenario(sc["agents"], rng, **common)
        except ValueError as exc:
            raise ConfigError(f"scenario: {exc}") from None
        raise ConfigError(f"scenario.preset: {sc['preset']!r} not in ('reference', 'random')")

    def grid(self) -> GridSpec:
        try:
            return GridSpec.from_range(self["grid.lower"], self["grid.upper"], self["grid.cell_size"])
        except ValueError as exc:
            raise ConfigError(f"grid: {exc}") from None

    def window(self, axis="x") -> WindowSpec:
        try:
            return WindowSpec(*self["mme.window_3d"], axis=axis)
        except ValueError as exc:
            raise ConfigError(f"mme.window_3d: {exc}") from None

    def mme(self) -> MmeConfig:
        return self._build("mme", MmeConfig)

    def mda(self) -> MdaConfig:
        return self._build("mda", MdaConfig)

    def detection(self) -> DetectionNoise:
        return self._build("detect", DetectionNoise)

    def tracker(self) -> TrackerConfig:
        return self._build("tracker", TrackerConfig)

    def rtmct(self) -> RtmctConfig:
        return self._build("rtmct", RtmctConfig)

    def training(self) -> TrainSettings:
        t = self.section("train")
        try:
            return TrainSettings(lr=t["lr"], steps=t["steps"], batch_size=t["batch_size"], seed=self["seed"],
                                 schedule=t["schedule"], class_balanced=t["class_balanced"], audit=t["audit"])
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from None

    def evaluation(self) -> EvalConfig:
        return self._build("eval", EvalConfig)

    def validate(self) -> None:
        """Build every module config so any invalid value fails before a run starts."""
        if self["seed"] < 0:
            raise ConfigError("seed: must be non-negative")
        if self["scenario.frames"] < 1:
            raise ConfigError("scenario.frames: must be positive")
        for key in ("train.samples", "train.steps", "train.batch_size", "train.window_stride", "predict.stride",
                    "predict.keep", "bench.repeats", "bench.queries",
                    "fuse.frames", "fuse.queries"):
            if self[key] < 1:
                raise ConfigError(f"{key}: must be positive")
        if self["train.lr"] < 0:
            raise ConfigError("train.lr: must be non-negative")
        self.scenario()
        self.grid()
        self.window()
        self.mme()
        self.mda()
        self.detection()
        self.tracker()
        self.rtmct()
        self.training().lr_at(0)
        self.evaluation()
