"""On-disk dataset: a directory with ``meta.json`` and a binary ``frames.bin``.

``frames.bin`` starts with the magic ``FPRD``, a version byte and three
reserved bytes.  Each frame follows as a little-endian ``uint32`` payload
length and the payload:

* ``uint32`` index, ``float64`` timestamp, 12 ``float64`` pose values
  (row-major rotation, then translation);
* points: ``uint32`` count, then ``count x 4`` ``float32`` (x, y, z, intensity);
* features: ``uint32`` cameras; per camera ``uint32`` levels; per level
  ``uint32`` H, W, C, ``float32`` scale, then ``H x W x C`` ``float32``;
* boxes: ``uint32`` count; per box 8 ``float32`` (x, y, z, l, w, h, yaw,
  confidence) and 2 ``uint32`` (id, class).
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..geometry import Box3D, FeatureMap2D, RigidTransform
from .world import FrameRecord

MAGIC = b"FPRD"
VERSION = 1
META_FORMAT = "fusionpred-dataset"
BOX_DTYPE = np.dtype([("f", "<f4", 8), ("id", "<u4"), ("cls", "<u4")])


def encode_frame(rec: FrameRecord) -> bytes:
    parts = [struct.pack("<Id", rec.index, rec.timestamp)]
    pose = np.concatenate([rec.ego_pose.rotation.ravel(), rec.ego_pose.translation])
    parts.append(pose.astype("<f8").tobytes())
    pts = np.ascontiguousarray(rec.points, dtype="<f4").reshape(-1, 4)
    parts += [struct.pack("<I", len(pts)), pts.tobytes()]
    parts.append(struct.pack("<I", len(rec.features)))
    for pyramid in rec.features:
        parts.append(struct.pack("<I", len(pyramid)))
        for fmap in pyramid:
            h, w, c = fmap.values.shape
            parts += [struct.pack("<IIIf", h, w, c, fmap.scale), fmap.values.astype("<f4").tobytes()]
    boxes = np.zeros(len(rec.boxes), BOX_DTYPE)
    for i, (b, gid) in enumerate(zip(rec.boxes, rec.ids)):
        boxes[i] = ([*b.center, *b.size, b.yaw, b.confidence], gid, b.cls)
    parts += [struct.pack("<I", len(boxes)), boxes.tobytes()]
    return b"".join(parts)


class _Cursor:
    def __init__(self, buf: bytes, where: str):
        self.buf, self.pos, self.where = buf, 0, where

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValueError(f"{self.where}: record truncated (needs {self.pos + n} bytes, has {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt, count=count)


def decode_frame(buf: bytes, where: str = "frame") -> FrameRecord:
    cur = _Cursor(buf, where)
    index, timestamp = cur.unpack("<Id")
    pose = cur.array("<f8", 12).astype(np.float64)
    ego = RigidTransform(pose[:9].reshape(3, 3), pose[9:])
    (n_pts,) = cur.unpack("<I")
    points = cur.array("<f4", n_pts * 4).reshape(n_pts, 4).astype(np.float32)
    (n_cams,) = cur.unpack("<I")
    feats = []
    for _ in range(n_cams):
        (levels,) = cur.unpack("<I")
        pyramid = []
        for _ in range(levels):
            h, w, c, scale = cur.unpack("<IIIf")
            vals = cur.array("<f4", h * w * c).reshape(h, w, c).astype(np.float32)
            pyramid.append(FeatureMap2D(vals, float(scale)))
        feats.append(tuple(pyramid))
    (n_boxes,) = cur.unpack("<I")
    raw = cur.array(BOX_DTYPE, n_boxes)
    boxes = []
    for r in raw:
        f = r["f"].astype(np.float64)
        boxes.append(Box3D(f[:3], f[3:6], float(f[6]), int(r["cls"]), float(f[7])))
    if cur.pos != len(buf):
        raise ValueError(f"{where}: {len(buf) - cur.pos} trailing bytes")
    return FrameRecord(index, timestamp, ego, points, tuple(feats), tuple(boxes), raw["id"].astype(np.uint32))


def write_dataset(records, path, meta: dict | None = None) -> int:
    """Write frames (any iterable) and ``meta``; returns the frame count."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path / "frames.bin", "wb") as fh:
        fh.write(MAGIC + bytes([VERSION, 0, 0, 0]))
        for rec in records:
            payload = encode_frame(rec)
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
            count += 1
    doc = {"format": META_FORMAT, "version": VERSION, "frames": count, **(meta or {})}
    with open(path / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return count


def read_meta(path) -> dict:
    meta_path = Path(path) / "meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"{meta_path}: dataset metadata not found")
    with open(meta_path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{meta_path}: invalid JSON ({exc})") from None
    if doc.get("format") != META_FORMAT:
        raise ValueError(f"{meta_path}: not a fusionpred dataset")
    if doc.get("version") != VERSION:
        raise ValueError(f"{meta_path}: unsupported dataset version {doc.get('version')!r} (expected {VERSION})")
    return doc


def iter_frames(path):
    """Stream frames one at a time from ``path/frames.bin``."""
    bin_path = Path(path) / "frames.bin"
    with open(bin_path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != MAGIC:
            raise ValueError(f"{bin_path}: bad magic bytes {head[:4]!r}, not a frame file")
        if head[4] != VERSION:
            raise ValueError(f"{bin_path}: unsupported frame format version {head[4]} (expected {VERSION})")
        n = 0
        while True:
            size = fh.read(4)
            if not size:
                return
            if len(size) < 4:
                raise ValueError(f"{bin_path}: truncated length prefix of frame {n}")
            (length,) = struct.unpack("<I", size)
            payload = fh.read(length)
            if len(payload) < length:
                raise ValueError(f"{bin_path}: frame {n} truncated ({len(payload)} of {length} bytes)")
            yield decode_frame(payload, f"{bin_path} frame {n}")
            n += 1


def read_dataset(path) -> tuple[dict, list[FrameRecord]]:
    meta = read_meta(path)
    frames = list(iter_frames(path))
    if len(frames) != meta["frames"]:
        raise ValueError(f"{path}: meta lists {meta['frames']} frames, found {len(frames)}")
    return meta, frames


def dataset_bytes(path) -> int:
    p = Path(path)
    return sum(os.path.getsize(p / n) for n in ("meta.json", "frames.bin"))
