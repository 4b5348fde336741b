"""Fixture serialization for (pyramid, workload) pairs.

Two formats:
  * a packed binary container with a versioned header, counts as
    little-endian uint32 and all array payloads as little-endian
    float32, used for generated fixtures,
  * a JSON text variant for small hand-written test fixtures.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ConfigError
from .msda import FeatureLevel, FeatureMapPyramid, QueryWorkload

MAGIC = b"DMWL"
VERSION = 1

F32 = np.float32


def _pack_array(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _read_array(buf: memoryview, offset: int, shape) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape)) if shape else 0
    nbytes = count * 4
    if offset + nbytes > len(buf):
        raise ConfigError("workload container truncated")
    arr = np.frombuffer(buf[offset:offset + nbytes], dtype="<f4").reshape(shape)
    return arr.astype(F32), offset + nbytes


def dump_workload(pyramid: FeatureMapPyramid, workload: QueryWorkload) -> bytes:
    workload.validate_against(pyramid)
    nq, d = workload.num_queries, workload.d
    h, p, l = workload.heads, workload.points_per_level, workload.num_levels
    head = struct.pack("<4sHHIIIII", MAGIC, VERSION, 0, d, h, p, l, nq)
    parts = [head]
    for lev in pyramid.levels:
        parts.append(struct.pack("<II", lev.height, lev.width))
    for lev in pyramid.levels:
        parts.append(_pack_array(lev.pixels))
    parts.append(_pack_array(workload.queries))
    parts.append(_pack_array(workload.ref_points))
    parts.append(_pack_array(workload.w_sample))
    parts.append(_pack_array(workload.w_attn))
    parts.append(_pack_array(workload.w_value))
    return b"".join(parts)


def load_workload(data: bytes) -> tuple[FeatureMapPyramid, QueryWorkload]:
    if len(data) < 28:
        raise ConfigError("workload container too short for header")
    magic, version, _pad, d, h, p, l, nq = struct.unpack_from("<4sHHIIIII", data, 0)
    if magic != MAGIC:
        raise ConfigError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ConfigError(f"unsupported container version {version}")
    off = 28
    dims = []
    for _ in range(l):
        hh, ww = struct.unpack_from("<II", data, off)
        dims.append((hh, ww))
        off += 8
    buf = memoryview(data)
    levels = []
    for hh, ww in dims:
        px, off = _read_array(buf, off, (hh, ww, d))
        levels.append(FeatureLevel(px))
    queries, off = _read_array(buf, off, (nq, d))
    ref_points, off = _read_array(buf, off, (nq, l, 2))
    hlp = h * l * p
    w_sample, off = _read_array(buf, off, (d, hlp * 2))
    w_attn, off = _read_array(buf, off, (d, hlp))
    w_value, off = _read_array(buf, off, (d, d))
    if off != len(data):
        raise ConfigError(f"trailing bytes in workload container ({len(data) - off})")
    pyramid = FeatureMapPyramid(tuple(levels), d)
    workload = QueryWorkload(queries, ref_points, w_sample, w_attn, w_value, h, p)
    return pyramid, workload


def save_workload(path, pyramid: FeatureMapPyramid, workload: QueryWorkload) -> None:
    with open(path, "wb") as f:
        f.write(dump_workload(pyramid, workload))


def read_workload(path) -> tuple[FeatureMapPyramid, QueryWorkload]:
    with open(path, "rb") as f:
        return load_workload(f.read())


def workload_to_text(pyramid: FeatureMapPyramid, workload: QueryWorkload) -> str:
    """Human-readable JSON variant for small fixtures."""
    workload.validate_against(pyramid)
    doc = {
        "format": "danmpsim-workload",
        "version": VERSION,
        "d": workload.d,
        "heads": workload.heads,
        "points_per_level": workload.points_per_level,
        "levels": [
            {"height": lev.height, "width": lev.width,
             "pixels": lev.pixels.reshape(-1).tolist()}
            for lev in pyramid.levels
        ],
        "queries": workload.queries.tolist(),
        "ref_points": workload.ref_points.tolist(),
        "w_sample": workload.w_sample.tolist(),
        "w_attn": workload.w_attn.tolist(),
        "w_value": workload.w_value.tolist(),
    }
    return json.dumps(doc, indent=1)


def workload_from_text(text: str) -> tuple[FeatureMapPyramid, QueryWorkload]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"bad workload text: {e}") from e
    if doc.get("format") != "danmpsim-workload":
        raise ConfigError("not a workload fixture")
    d = int(doc["d"])
    levels = []
    for lev in doc["levels"]:
        px = np.array(lev["pixels"], dtype=F32).reshape(lev["height"], lev["width"], d)
        levels.append(FeatureLevel(px))
    pyramid = FeatureMapPyramid(tuple(levels), d)
    workload = QueryWorkload(
        np.array(doc["queries"], dtype=F32),
        np.array(doc["ref_points"], dtype=F32),
        np.array(doc["w_sample"], dtype=F32),
        np.array(doc["w_attn"], dtype=F32),
        np.array(doc["w_value"], dtype=F32),
        int(doc["heads"]),
        int(doc["points_per_level"]),
    )
    return pyramid, workload
