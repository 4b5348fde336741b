"""Synthetic workload generation with controllable spatial skew.

Reference points follow the chosen skew model; sampling offsets are
gaussian jitter whose magnitude is set through the offset projection
scale, so sample points land near the targeted regions. The overlap
knob controls what fraction of queries share hotspot targets, which is
what gives packing something to exploit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError
from .msda import FeatureLevel, FeatureMapPyramid, QueryWorkload

F32 = np.float32

PRESET_QUERIES = {"de-detr": 100, "dn-detr": 300, "dino": 900}

DEFAULT_LEVELS = ((64, 64), (32, 32), (16, 16), (8, 8))

MAX_PIXELS = 4 * 1024 * 1024  # generation guard for scaled specs


@dataclass(frozen=True)
class SkewSpec:
    kind: str = "uniform"          # uniform | gaussian-hotspots | zipf
    hotspots: int = 4
    sigma: float = 2.0             # pixel-unit spread on the finest level
    zipf_s: float = 1.2
    overlap: float = 0.5           # fraction of queries sharing hotspot targets
    zipf_grid: int = 8             # zipf cell grid per level axis

    def __post_init__(self):
        if self.kind not in ("uniform", "gaussian-hotspots", "zipf"):
            raise ConfigError(f"unknown skew kind {self.kind!r}")
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError("overlap must be in [0, 1]")
        if self.hotspots < 1:
            raise ConfigError("hotspots must be >= 1")


@dataclass(frozen=True)
class WorkloadSpec:
    preset: str = "de-detr"        # de-detr | dn-detr | dino | custom
    queries: int | None = None     # overrides the preset count
    batch: int = 1
    levels: tuple = DEFAULT_LEVELS
    d: int = 32
    heads: int = 4
    points_per_level: int = 4
    skew: SkewSpec = field(default_factory=SkewSpec)
    offset_sigma: float = 1.0      # pixel jitter added by projected offsets
    head_spread: float = 4.0       # per-head offset bias, finest-level pixels
    seed: int = 0

    def __post_init__(self):
        if self.preset not in PRESET_QUERIES and self.preset != "custom":
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.preset == "custom" and not self.queries:
            raise ConfigError("custom preset needs an explicit query count")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if any(h < 1 or w < 1 for h, w in self.levels):
            raise ConfigError("level dims must be >= 1")

    @property
    def num_queries(self) -> int:
        return self.queries if self.queries else PRESET_QUERIES[self.preset]

    @property
    def total_pixels(self) -> int:
        return sum(h * w for h, w in self.levels)


def scale(spec: WorkloadSpec, factor: float) -> WorkloadSpec:
    """Grow queries by `factor` and level areas by `factor` (axes by sqrt)."""
    if factor < 1:
        raise ConfigError("scale factor must be >= 1")
    if factor == 1:
        return spec
    s = float(np.sqrt(factor))
    levels = tuple((int(round(h * s)), int(round(w * s))) for h, w in spec.levels)
    if sum(h * w for h, w in levels) > MAX_PIXELS:
        raise ConfigError("scaled pyramid exceeds the generation capacity guard")
    return WorkloadSpec(preset="custom",
                        queries=int(round(spec.num_queries * factor)),
                        batch=spec.batch, levels=levels, d=spec.d,
                        heads=spec.heads, points_per_level=spec.points_per_level,
                        skew=spec.skew, offset_sigma=spec.offset_sigma,
                        seed=spec.seed)


def _zipf_weights(n: int, s: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** (-s)
    return w / w.sum()


def _ref_points(spec: WorkloadSpec, rng: np.random.Generator) -> np.ndarray:
    """Normalized per-query targets, identical across levels."""
    nq = spec.num_queries
    sk = spec.skew
    if sk.kind == "uniform":
        base = rng.uniform(0.0, 1.0, (nq, 2))
    elif sk.kind == "gaussian-hotspots":
        centers = rng.uniform(0.12, 0.88, (sk.hotspots, 2))
        h0, w0 = spec.levels[0]
        # ref jitter carries 2/3 of the sigma budget, offsets the rest
        sig_n = (sk.sigma * 2.0 / 3.0) / max(max(w0, h0) - 1, 1)
        n_shared = int(np.ceil(sk.overlap * nq))
        base = np.empty((nq, 2))
        which = rng.integers(0, sk.hotspots, nq)
        jitter = rng.normal(0.0, sig_n, (nq, 2))
        base[:n_shared] = centers[which[:n_shared]] + jitter[:n_shared]
        base[n_shared:] = rng.uniform(0.05, 0.95, (nq - n_shared, 2))
        base = np.clip(base, 0.0, 1.0)
    else:  # zipf over a cell grid
        g = sk.zipf_grid
        cells = g * g
        weights = _zipf_weights(cells, sk.zipf_s)
        perm = rng.permutation(cells)  # decouple rank from position
        chosen = perm[rng.choice(cells, size=nq, p=weights)]
        rows, cols = np.divmod(chosen, g)
        inner = rng.uniform(0.0, 1.0, (nq, 2))
        base = np.stack([(cols + inner[:, 0]) / g, (rows + inner[:, 1]) / g], axis=1)
    base = np.clip(base, 0.0, 1.0)
    return np.repeat(base[:, None, :], len(spec.levels), axis=1).astype(F32)


def generate(spec: WorkloadSpec) -> tuple[FeatureMapPyramid, QueryWorkload]:
    """Deterministic (pyramid, workload) pair for a spec."""
    if spec.total_pixels > MAX_PIXELS:
        raise ConfigError("pyramid exceeds the generation capacity guard")
    rng = np.random.default_rng(spec.seed)
    d, h, p = spec.d, spec.heads, spec.points_per_level
    l = len(spec.levels)
    nq = spec.num_queries

    levels = tuple(FeatureLevel(rng.standard_normal((hh, ww, d)).astype(F32))
                   for hh, ww in spec.levels)
    pyramid = FeatureMapPyramid(levels, d)

    queries = rng.standard_normal((nq, d)).astype(F32)
    queries[:, 0] = 1.0  # bias channel carries the per-head offset structure
    ref_points = _ref_points(spec, rng)
    # queries ~ N(0,1) per column, so column sums of w_sample entries with
    # std offset_sigma/sqrt(d) give offsets with std ~= offset_sigma pixels
    w_sample = rng.normal(0.0, spec.offset_sigma / np.sqrt(d),
                          (d, h * l * p * 2)).astype(F32)
    # row 0 sets a fixed per-(head, level, point) displacement so one
    # query's heads fan out over a neighborhood instead of one pixel;
    # the spread scales with each level's resolution
    w0, h0 = spec.levels[0][1], spec.levels[0][0]
    bias = np.empty((h, l, p, 2), dtype=np.float64)
    for li, (hh_l, ww_l) in enumerate(spec.levels):
        rel = max(ww_l, hh_l) / max(w0, h0, 1)
        bias[:, li] = rng.normal(0.0, spec.head_spread * rel, (h, p, 2))
    w_sample[0, :] = bias.reshape(-1).astype(F32)
    w_attn = rng.normal(0.0, 1.0 / np.sqrt(d), (d, h * l * p)).astype(F32)
    w_value = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)).astype(F32)
    workload = QueryWorkload(queries, ref_points, w_sample, w_attn, w_value, h, p)
    workload.validate_against(pyramid)
    return pyramid, workload


# ---------------------------------------------------------------------------
# spec files
# ---------------------------------------------------------------------------

def spec_to_json(spec: WorkloadSpec) -> str:
    doc = asdict(spec)
    doc["levels"] = [list(x) for x in spec.levels]
    doc["format"] = "danmpsim-workload-spec"
    return json.dumps(doc, indent=1)


def spec_from_json(text: str) -> WorkloadSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"bad workload spec: {e}") from e
    if doc.pop("format", None) != "danmpsim-workload-spec":
        raise ConfigError("not a workload spec file")
    skew = doc.pop("skew", {})
    levels = tuple(tuple(x) for x in doc.pop("levels", DEFAULT_LEVELS))
    known = {k: doc[k] for k in ("preset", "queries", "batch", "d", "heads",
                                 "points_per_level", "offset_sigma", "seed")
             if k in doc}
    return WorkloadSpec(levels=levels, skew=SkewSpec(**skew), **known)
