"""Functional reference for multi-scale deformable attention.

All kernels are plain numpy over float32 data. They are the numerical
oracle for the simulated execution paths: every engine mode must
reproduce these per-query outputs.

Conventions:
  * a pyramid level is a (H, W, d) float32 grid of pixel vectors,
  * reference points are normalized to [0, 1]^2 per level and scaled to
    pixel units as (x * (W - 1), y * (H - 1)),
  * sampling offsets are in pixel units and added after scaling,
  * interpolation uses unit-spaced bilinear weights; neighbors outside
    the grid contribute zero (dropped, not renormalized).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

F32 = np.float32


def _require_f32(arr: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(arr)
    if a.dtype != np.float32:
        raise ConfigError(f"{name} must be float32, got {a.dtype}")
    return a


@dataclass(frozen=True)
class FeatureLevel:
    """One pyramid level: a height x width grid of d-length pixel vectors."""

    pixels: np.ndarray  # (H, W, d) float32

    def __post_init__(self):
        px = _require_f32(self.pixels, "pixels")
        if px.ndim != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ConfigError(f"pixels must be (H, W, d) with H, W >= 1, got {px.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def depth(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class FeatureMapPyramid:
    """Ordered multi-resolution feature levels sharing one hidden dimension."""

    levels: tuple[FeatureLevel, ...]
    d: int

    def __post_init__(self):
        if not self.levels:
            raise ConfigError("pyramid needs at least one level")
        for i, lev in enumerate(self.levels):
            if lev.depth != self.d:
                raise ConfigError(f"level {i} depth {lev.depth} != d={self.d}")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def total_pixels(self) -> int:
        return sum(l.height * l.width for l in self.levels)

    def dims(self) -> list[tuple[int, int]]:
        return [(l.height, l.width) for l in self.levels]


@dataclass(frozen=True)
class QueryWorkload:
    """Queries plus the projection weights that derive offsets and logits.

    Shapes (nq queries, l levels, h heads, p points per level, dim d):
      queries    (nq, d)
      ref_points (nq, l, 2), normalized (x, y) in [0, 1]
      w_sample   (d, h*l*p*2)
      w_attn     (d, h*l*p)
      w_value    (d, d)
    """

    queries: np.ndarray
    ref_points: np.ndarray
    w_sample: np.ndarray
    w_attn: np.ndarray
    w_value: np.ndarray
    heads: int
    points_per_level: int

    def __post_init__(self):
        q = _require_f32(self.queries, "queries")
        rp = _require_f32(self.ref_points, "ref_points")
        for name in ("w_sample", "w_attn", "w_value"):
            _require_f32(getattr(self, name), name)
        if q.ndim != 2 or q.shape[0] < 1:
            raise ConfigError(f"queries must be (nq, d), got {q.shape}")
        if rp.ndim != 3 or rp.shape[0] != q.shape[0] or rp.shape[2] != 2:
            raise ConfigError(f"ref_points must be (nq, levels, 2), got {rp.shape}")
        if rp.size and (rp.min() < 0.0 or rp.max() > 1.0):
            raise ConfigError("ref_points must lie in [0, 1]")
        if self.heads < 1 or self.points_per_level < 1:
            raise ConfigError("heads and points_per_level must be >= 1")
        d = q.shape[1]
        l = rp.shape[1]
        hlp = self.heads * l * self.points_per_level
        if self.w_sample.shape != (d, hlp * 2):
            raise ConfigError(
                f"w_sample must be (d, h*l*p*2)={(d, hlp * 2)}, got {self.w_sample.shape}")
        if self.w_attn.shape != (d, hlp):
            raise ConfigError(f"w_attn must be (d, h*l*p)={(d, hlp)}, got {self.w_attn.shape}")
        if self.w_value.shape != (d, d):
            raise ConfigError(f"w_value must be (d, d), got {self.w_value.shape}")

    @property
    def num_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def d(self) -> int:
        return self.queries.shape[1]

    @property
    def num_levels(self) -> int:
        return self.ref_points.shape[1]

    def validate_against(self, pyramid: FeatureMapPyramid) -> None:
        if pyramid.d != self.d:
            raise ConfigError(f"pyramid d={pyramid.d} != workload d={self.d}")
        if pyramid.num_levels != self.num_levels:
            raise ConfigError(
                f"pyramid has {pyramid.num_levels} levels, workload expects {self.num_levels}")


@dataclass(frozen=True)
class SamplePoint:
    """One sampling location in absolute pixel units of its level."""

    level: int
    x: float
    y: float
    query: int
    head: int
    point: int


def project_offsets(workload: QueryWorkload) -> np.ndarray:
    """Sampling offsets in pixel units, shape (nq, h, l, p, 2)."""
    flat = workload.queries @ workload.w_sample
    return flat.reshape(workload.num_queries, workload.heads, workload.num_levels,
                        workload.points_per_level, 2)


def compute_attention_weights(workload: QueryWorkload) -> np.ndarray:
    """Per-head softmax over all l*p point logits, shape (nq, h, l, p)."""
    nq, h = workload.num_queries, workload.heads
    l, p = workload.num_levels, workload.points_per_level
    logits = (workload.queries @ workload.w_attn).reshape(nq, h, l * p)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    w = e / e.sum(axis=-1, keepdims=True)
    return w.reshape(nq, h, l, p)


def grid_sample(pixels: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Zero-padded bilinear gather at fractional (x, y) pixel coordinates.

    `points` is (..., 2); result is (..., d). Out-of-grid neighbors are
    dropped (weight contributes nothing), so fully outside points yield
    zero vectors.
    """
    h, w, d = pixels.shape
    pts = points.reshape(-1, 2).astype(F32, copy=False)
    x = pts[:, 0]
    y = pts[:, 1]
    x0f = np.floor(x)
    y0f = np.floor(y)
    fx = x - x0f
    fy = y - y0f
    # clip before the int cast so absurd coordinates cannot overflow
    x0 = np.clip(x0f, -2, w).astype(np.int64)
    y0 = np.clip(y0f, -2, h).astype(np.int64)
    one = F32(1.0)
    out = np.zeros((pts.shape[0], d), dtype=F32)
    corners = (
        (x0, y0, (one - fx) * (one - fy)),
        (x0 + 1, y0, fx * (one - fy)),
        (x0, y0 + 1, (one - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    )
    for xi, yi, wt in corners:
        mask = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        if mask.any():
            out[mask] += pixels[yi[mask], xi[mask]] * wt[mask, None]
    return out.reshape(points.shape[:-1] + (d,))


def bilinear_interpolate(level: FeatureLevel, x: float, y: float) -> np.ndarray:
    """Interpolated d-vector at one fractional pixel coordinate."""
    pt = np.array([[x, y]], dtype=F32)
    return grid_sample(level.pixels, pt)[0]


def project_values(pyramid: FeatureMapPyramid, w_value: np.ndarray) -> FeatureMapPyramid:
    """Apply the value projection pixelwise to every level."""
    levels = tuple(FeatureLevel(lev.pixels @ w_value) for lev in pyramid.levels)
    return FeatureMapPyramid(levels, pyramid.d)


def sample_coordinates(pyramid: FeatureMapPyramid, workload: QueryWorkload,
                       offsets: np.ndarray) -> np.ndarray:
    """Absolute pixel coordinates of every sample, shape (nq, h, l, p, 2)."""
    workload.validate_against(pyramid)
    coords = np.empty(offsets.shape, dtype=F32)
    for li, lev in enumerate(pyramid.levels):
        scale = np.array([lev.width - 1, lev.height - 1], dtype=F32)
        base = workload.ref_points[:, li] * scale  # (nq, 2)
        coords[:, :, li] = base[:, None, None, :] + offsets[:, :, li]
    return coords


def sample_points(pyramid: FeatureMapPyramid, workload: QueryWorkload,
                  offsets: np.ndarray | None = None,
                  query_ids=None) -> list[SamplePoint]:
    """Flat list of SamplePoint records, optionally restricted to some queries."""
    if offsets is None:
        offsets = project_offsets(workload)
    coords = sample_coordinates(pyramid, workload, offsets)
    if query_ids is None:
        query_ids = range(workload.num_queries)
    pts = []
    for q in query_ids:
        for hh in range(workload.heads):
            for li in range(workload.num_levels):
                for pp in range(workload.points_per_level):
                    x, y = coords[q, hh, li, pp]
                    pts.append(SamplePoint(li, float(x), float(y), int(q), hh, pp))
    return pts


def msgs(pyramid: FeatureMapPyramid, workload: QueryWorkload,
         offsets: np.ndarray | None = None) -> np.ndarray:
    """Multi-scale grid sampling over the value-projected pyramid.

    Returns sampled vectors of shape (nq, h, l, p, d).
    """
    workload.validate_against(pyramid)
    if offsets is None:
        offsets = project_offsets(workload)
    values = project_values(pyramid, workload.w_value)
    coords = sample_coordinates(pyramid, workload, offsets)
    nq, h, l, p, _ = coords.shape
    out = np.empty((nq, h, l, p, pyramid.d), dtype=F32)
    for li, lev in enumerate(values.levels):
        out[:, :, li] = grid_sample(lev.pixels, coords[:, :, li])
    return out


def msdattn_forward(pyramid: FeatureMapPyramid, workload: QueryWorkload,
                    offsets: np.ndarray | None = None) -> np.ndarray:
    """Attention-weighted aggregation of sampled values, shape (nq, d).

    Head j owns the contiguous channel chunk [j*d/h, (j+1)*d/h) of the
    output; the per-head weighted sums are concatenated chunkwise.
    """
    d, h = pyramid.d, workload.heads
    if d % h != 0:
        raise ConfigError(f"d={d} not divisible by heads={h}")
    weights = compute_attention_weights(workload)
    sampled = msgs(pyramid, workload, offsets)
    agg = np.einsum("qhlp,qhlpd->qhd", weights, sampled)
    dh = d // h
    return np.concatenate([agg[:, j, j * dh:(j + 1) * dh] for j in range(h)], axis=1)
