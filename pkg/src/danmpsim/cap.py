"""Clustering-and-packing query scheduler.

A probe subset of queries is sampled, their sampling coordinates are
clustered per pyramid level with k-means, the cluster neighborhoods
drive a hot/cold classification of feature-map entries, and the
remaining queries are packed by the centroid that attracts the
plurality of their sample points. The schedule is a permutation only;
numerical results are never affected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import msda
from .errors import ConfigError

HOT_FRACTION = 0.5
REGION_HALF = 4  # 9x9 neighborhood around a centroid


@dataclass
class KmeansResult:
    centroids: np.ndarray          # (k, 2) float64
    assignments: np.ndarray        # (n,) int
    inertia_history: list[float]
    distance_evals: int            # for the host cost model


@dataclass
class ClusterModel:
    """Per-level centroids in pixel units; global centroid id is
    level_offset + local index."""

    centroids: list[np.ndarray]    # one (k_l, 2) array per level
    k: int
    region_half: int = REGION_HALF

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")

    @property
    def offsets(self) -> list[int]:
        out, total = [], 0
        for c in self.centroids:
            out.append(total)
            total += len(c)
        return out

    @property
    def total_centroids(self) -> int:
        return sum(len(c) for c in self.centroids)


@dataclass
class QueryPack:
    pack_id: int
    centroid_id: int
    query_ids: list[int]

    def __post_init__(self):
        if not self.query_ids:
            raise ConfigError("packs must be non-empty")


@dataclass
class HotColdMap:
    """Per-entry hot flag and estimated access count for every level."""

    counts: list[np.ndarray]       # int64 (H, W) per level
    hot: list[np.ndarray]          # bool (H, W) per level

    @property
    def total_entries(self) -> int:
        return sum(c.size for c in self.counts)

    @property
    def hot_entries(self) -> int:
        return int(sum(h.sum() for h in self.hot))

    def to_text(self) -> str:
        lines = []
        for li, h in enumerate(self.hot):
            lines.append(f"level {li} ({h.shape[0]}x{h.shape[1]}) "
                         f"hot={int(h.sum())}")
            for r in range(h.shape[0]):
                lines.append("".join("H" if v else "." for v in h[r]))
        return "\n".join(lines) + "\n"


@dataclass
class CapSchedule:
    order: np.ndarray              # permutation of all query ids
    probe_ids: np.ndarray
    packs: list[QueryPack]
    hotcold: HotColdMap
    cluster: ClusterModel | None
    flops: int                     # host-side work estimate


def select_probe_queries(workload: msda.QueryWorkload, fraction: float,
                         seed: int) -> np.ndarray:
    """Deterministic probe subset; size round(fraction*nq), at least 1."""
    nq = workload.num_queries
    if nq < 1:
        raise ConfigError("empty workload")
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"probe fraction must be in (0, 1), got {fraction}")
    size = max(1, int(fraction * nq + 0.5))
    rng = np.random.default_rng(seed)
    ids = rng.choice(nq, size=size, replace=False)
    return np.sort(ids)


def kmeans_cluster(points: np.ndarray, k: int, seed: int,
                   max_iters: int = 100) -> KmeansResult:
    """Lloyd's iteration with k-means++ seeding, deterministic by seed.

    Stops when assignments stabilize; empty clusters are re-seeded to
    the point farthest from every centroid.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ConfigError("points must be a non-empty (n, 2) array")
    n = pts.shape[0]
    if k < 1 or k > n:
        raise ConfigError(f"need 1 <= k <= {n}, got k={k}")
    rng = np.random.default_rng(seed)
    evals = 0

    # k-means++ seeding
    centroids = np.empty((k, 2), dtype=np.float64)
    centroids[0] = pts[rng.integers(n)]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    evals += n
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = pts[rng.integers(n)]
        else:
            centroids[j] = pts[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((pts - centroids[j]) ** 2).sum(axis=1))
        evals += n

    assign = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    for _ in range(max_iters):
        dists = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        evals += n * k
        new_assign = dists.argmin(axis=1)
        inertia = float(dists[np.arange(n), new_assign].sum())
        history.append(inertia)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = pts[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
            else:
                far = dists.min(axis=1).argmax()
                centroids[j] = pts[far]
    return KmeansResult(centroids, assign, history, evals)


def _touch_counts(dims, samples_xy_by_level) -> list[np.ndarray]:
    """Per-entry counts of 2x2 interpolation footprints touching it."""
    counts = [np.zeros(dim, dtype=np.int64) for dim in dims]
    for li, (h, w) in enumerate(dims):
        xy = samples_xy_by_level[li]
        if xy.size == 0:
            continue
        x0 = np.floor(xy[:, 0]).astype(np.int64)
        y0 = np.floor(xy[:, 1]).astype(np.int64)
        grid = counts[li]
        for dx in (0, 1):
            for dy in (0, 1):
                xi = x0 + dx
                yi = y0 + dy
                m = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
                if m.any():
                    np.add.at(grid, (yi[m], xi[m]), 1)
    return counts


def _region_mask(dims, cluster: ClusterModel | None) -> list[np.ndarray]:
    masks = [np.zeros(dim, dtype=bool) for dim in dims]
    if cluster is None:
        return masks
    half = cluster.region_half
    for li, cents in enumerate(cluster.centroids):
        h, w = dims[li]
        for cx, cy in cents:
            cc = int(np.clip(round(cx), 0, w - 1))
            cr = int(np.clip(round(cy), 0, h - 1))
            masks[li][max(0, cr - half):cr + half + 1,
                      max(0, cc - half):cc + half + 1] = True
    return masks


def _rank_hot(counts, region) -> list[np.ndarray]:
    """Flag the top ceil(HOT_FRACTION * entries) entries hot.

    Ordering: higher count first, centroid-region entries win count
    ties, remaining ties break in canonical (level, row, col) order.
    """
    flat_counts = np.concatenate([c.reshape(-1) for c in counts])
    flat_region = np.concatenate([r.reshape(-1) for r in region]).astype(np.int64)
    total = flat_counts.size
    hot_n = int(np.ceil(HOT_FRACTION * total))
    canon = np.arange(total)
    order = np.lexsort((canon, -flat_region, -flat_counts))
    hot_flat = np.zeros(total, dtype=bool)
    hot_flat[order[:hot_n]] = True
    out = []
    off = 0
    for c in counts:
        out.append(hot_flat[off:off + c.size].reshape(c.shape))
        off += c.size
    return out


def estimate_frequencies(cluster: ClusterModel | None,
                         probe_samples: list[msda.SamplePoint],
                         dims: list[tuple[int, int]]) -> HotColdMap:
    """Hot/cold classification from probe-sample footprints."""
    by_level = []
    for li in range(len(dims)):
        xy = np.array([[s.x, s.y] for s in probe_samples if s.level == li],
                      dtype=np.float64).reshape(-1, 2)
        by_level.append(xy)
    counts = _touch_counts(dims, by_level)
    region = _region_mask(dims, cluster)
    hot = _rank_hot(counts, region)
    return HotColdMap(counts, hot)


def reference_frequencies(workload: msda.QueryWorkload,
                          pyramid: msda.FeatureMapPyramid) -> HotColdMap:
    """CAP-free fallback: frequencies from scaled reference points only."""
    dims = pyramid.dims()
    by_level = []
    for li, (h, w) in enumerate(dims):
        scale = np.array([w - 1, h - 1], dtype=np.float64)
        by_level.append(workload.ref_points[:, li].astype(np.float64) * scale)
    counts = _touch_counts(dims, by_level)
    region = _region_mask(dims, None)
    hot = _rank_hot(counts, region)
    return HotColdMap(counts, hot)


def _nearest_global_centroid(cluster: ClusterModel, level: int,
                             xy: np.ndarray) -> np.ndarray:
    """Global centroid ids of the nearest centroid per point (n, 2)."""
    cents = cluster.centroids[level]
    if len(cents) == 0:
        raise ConfigError(f"no centroids on level {level}")
    d = ((xy[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1) + cluster.offsets[level]


def pack_queries(coords: np.ndarray, query_ids: np.ndarray,
                 cluster: ClusterModel) -> tuple[list[QueryPack], int]:
    """Group queries by the centroid winning the plurality of their points.

    `coords` is (len(query_ids), h, l, p, 2) in pixel units. Ties go to
    the lowest centroid id; packs come out in centroid-id order with
    original relative query order inside. Also returns the number of
    distance evaluations for the host cost model.
    """
    n, h, l, p, _ = coords.shape
    total_cents = cluster.total_centroids
    votes = np.zeros((n, total_cents), dtype=np.int64)
    evals = 0
    for li in range(l):
        xy = coords[:, :, li].reshape(-1, 2).astype(np.float64)
        gids = _nearest_global_centroid(cluster, li, xy).reshape(n, h * p)
        evals += xy.shape[0] * len(cluster.centroids[li])
        for q in range(n):
            np.add.at(votes[q], gids[q], 1)
    winners = votes.argmax(axis=1)  # argmax takes lowest index on ties
    packs: list[QueryPack] = []
    for cid in range(total_cents):
        members = [int(query_ids[i]) for i in range(n) if winners[i] == cid]
        if members:
            packs.append(QueryPack(len(packs), cid, members))
    return packs, evals


def cap_schedule(workload: msda.QueryWorkload, pyramid: msda.FeatureMapPyramid,
                 k: int = 8, seed: int = 0, fraction: float = 0.2,
                 offsets: np.ndarray | None = None) -> CapSchedule:
    """Full pipeline: probe, cluster, classify, pack.

    Execution order is probe queries first (original order), then packs
    in centroid-id order. The result is a bijection over query ids.
    """
    workload.validate_against(pyramid)
    if offsets is None:
        offsets = msda.project_offsets(workload)
    coords = msda.sample_coordinates(pyramid, workload, offsets)
    nq = workload.num_queries
    probe_ids = select_probe_queries(workload, fraction, seed)
    dims = pyramid.dims()

    flops = 0
    centroids = []
    for li in range(pyramid.num_levels):
        pts = coords[probe_ids, :, li].reshape(-1, 2).astype(np.float64)
        k_l = min(k, len(pts))
        res = kmeans_cluster(pts, k_l, seed + li)
        centroids.append(res.centroids)
        flops += res.distance_evals * 5  # sub, sub, mul, mul, add per eval
    cluster = ClusterModel(centroids, k)

    probe_samples = msda.sample_points(pyramid, workload, offsets,
                                       query_ids=probe_ids.tolist())
    hotcold = estimate_frequencies(cluster, probe_samples, dims)

    probe_set = set(probe_ids.tolist())
    rest = np.array([q for q in range(nq) if q not in probe_set], dtype=np.int64)
    if len(rest):
        packs, evals = pack_queries(coords[rest], rest, cluster)
        flops += evals * 5
    else:
        packs = []
    order = list(probe_ids)
    for pack in packs:
        order.extend(pack.query_ids)
    order = np.array(order, dtype=np.int64)
    if sorted(order.tolist()) != list(range(nq)):
        raise ConfigError("schedule is not a permutation")  # defensive
    return CapSchedule(order, probe_ids, packs, hotcold, cluster, flops)


def schedule_to_text(sched: CapSchedule) -> str:
    """Structured text export: pack membership plus the hot/cold map."""
    lines = [f"probe {' '.join(str(q) for q in sched.probe_ids.tolist())}"]
    for pack in sched.packs:
        qs = " ".join(str(q) for q in pack.query_ids)
        lines.append(f"pack {pack.pack_id} centroid {pack.centroid_id}: {qs}")
    lines.append(f"order {' '.join(str(q) for q in sched.order.tolist())}")
    return "\n".join(lines) + "\n" + sched.hotcold.to_text()
