"""Feature-map placement onto the banks of one rank.

Each level is cut into square-ish spatial tiles. A tile holding at
least one hot entry counts as hot and goes to a PE-equipped bank
(greedy least-loaded by estimated frequency); all-cold tiles spread
round-robin over the banks without PEs. Tile borders are duplicated
into one-pixel halos so every sample point's 2x2 interpolation
neighborhood is resident in the bank that owns its floor pixel.

The same layout is replicated in every rank; bank ids here are
rank-local (bankgroup * banks_per_bankgroup + bank).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cap import HotColdMap
from .dram import DramTopology
from .errors import ConfigError


@dataclass(frozen=True)
class Tile:
    level: int
    r0: int
    r1: int
    c0: int
    c1: int
    hot: bool
    freq: int
    hot_entries: int

    @property
    def rows(self) -> int:
        return self.r1 - self.r0

    @property
    def cols(self) -> int:
        return self.c1 - self.c0

    @property
    def pixels(self) -> int:
        return self.rows * self.cols


@dataclass
class BankAllocation:
    bank: int                    # rank-local id
    pe: bool
    tiles: list[Tile] = field(default_factory=list)
    slots: dict = field(default_factory=dict)  # (level, row, col) -> slot
    load_estimate: int = 0

    @property
    def pixel_count(self) -> int:
        return len(self.slots)


@dataclass
class PlacementPlan:
    banks: list[BankAllocation]
    owner: list[np.ndarray]      # per level (H, W) int array of owning bank
    hotcold: HotColdMap
    pe_banks: list[int]
    non_pe_banks: list[int]
    pixel_bytes: int             # burst-padded bytes per pixel vector
    bursts_per_pixel: int
    topo: DramTopology
    owned_pixels: int = 0
    halo_pixels: int = 0
    uniform: bool = False

    @property
    def halo_ratio(self) -> float:
        return self.halo_pixels / max(self.owned_pixels, 1)

    def bank_of(self, level: int, row: int, col: int) -> int:
        return int(self.owner[level][row, col])

    def bankgroup_of(self, bank: int) -> int:
        return bank // self.topo.banks_per_bankgroup

    def slot_row_col(self, bank: int, slot: int) -> tuple[int, int]:
        """DRAM (row, column) of a pixel slot inside its bank."""
        byte = slot * self.pixel_bytes
        row = byte // self.topo.row_bytes
        col = (byte % self.topo.row_bytes) // self.topo.burst_bytes
        return row, col


class Replica(tuple):
    """(bank, slot) pair returned by locate."""
    __slots__ = ()

    @property
    def bank(self):
        return self[0]

    @property
    def slot(self):
        return self[1]


def _tile_grid(h: int, w: int, tile: int):
    for r0 in range(0, h, tile):
        for c0 in range(0, w, tile):
            yield r0, min(r0 + tile, h), c0, min(c0 + tile, w)


def pe_bank_ids(topo: DramTopology, fraction: float = 0.5) -> list[int]:
    """PE-equipped banks: the first ceil(fraction*banks) of each group."""
    per_group = max(1, int(round(topo.banks_per_bankgroup * fraction)))
    out = []
    for bg in range(topo.bankgroups_per_rank):
        for b in range(per_group):
            out.append(bg * topo.banks_per_bankgroup + b)
    return out


def build_layout(dims: list[tuple[int, int]], topo: DramTopology,
                 hotcold: HotColdMap, d: int, tile_size: int = 8,
                 halo: int = 1, pe_fraction: float = 0.5,
                 uniform: bool = False) -> PlacementPlan:
    """Assign tiles to banks and materialize owned plus halo slot maps.

    `uniform` switches to the even baseline: every bank has a PE and
    tiles go round-robin in canonical order, ignoring frequency.
    """
    nbanks = topo.banks_per_rank
    if uniform:
        pe = list(range(nbanks))
        non_pe = []
    else:
        pe = pe_bank_ids(topo, pe_fraction)
        non_pe = [b for b in range(nbanks) if b not in set(pe)]

    raw: list[tuple] = []
    for li, (h, w) in enumerate(dims):
        hot = hotcold.hot[li]
        counts = hotcold.counts[li]
        for r0, r1, c0, c1 in _tile_grid(h, w, tile_size):
            hot_n = int(hot[r0:r1, c0:c1].sum())
            freq = int(counts[r0:r1, c0:c1].sum())
            raw.append((li, r0, r1, c0, c1, freq, hot_n))

    # hot tiles = highest expected-access tiles until they cover half the
    # pixels; this is the tile-granular form of the entry classification
    total_px = sum(h * w for h, w in dims)
    quota = -(-total_px // 2)
    by_freq = sorted(range(len(raw)),
                     key=lambda i: (-raw[i][5], -raw[i][6], raw[i][0],
                                    raw[i][1], raw[i][3]))
    hot_ids = set()
    covered = 0
    for i in by_freq:
        if covered >= quota:
            break
        hot_ids.add(i)
        li, r0, r1, c0, c1, _f, _hn = raw[i]
        covered += (r1 - r0) * (c1 - c0)
    tiles = [Tile(li, r0, r1, c0, c1, i in hot_ids, freq, hot_n)
             for i, (li, r0, r1, c0, c1, freq, hot_n) in enumerate(raw)]

    banks = [BankAllocation(b, b in set(pe)) for b in range(nbanks)]

    if uniform:
        for i, t in enumerate(tiles):
            banks[i % nbanks].tiles.append(t)
            banks[i % nbanks].load_estimate += t.freq
    else:
        hot_tiles = sorted([t for t in tiles if t.hot],
                           key=lambda t: (-t.freq, t.level, t.r0, t.c0))
        cold_tiles = [t for t in tiles if not t.hot]
        # greedy least-loaded keeps per-bank expected accesses level
        def assigned_pixels(a):
            return sum(t.pixels for t in a.tiles)

        for t in hot_tiles:
            tgt = min((banks[b] for b in pe),
                      key=lambda a: (a.load_estimate, assigned_pixels(a), a.bank))
            tgt.tiles.append(t)
            tgt.load_estimate += t.freq
        for i, t in enumerate(cold_tiles):
            pool = non_pe if non_pe else pe
            tgt = banks[pool[i % len(pool)]]
            tgt.tiles.append(t)
            tgt.load_estimate += t.freq

    owner = [np.full(dim, -1, dtype=np.int64) for dim in dims]
    owned = 0
    halo_px = 0
    for alloc in banks:
        slot = 0
        for t in alloc.tiles:
            for r in range(t.r0, t.r1):
                for c in range(t.c0, t.c1):
                    alloc.slots[(t.level, r, c)] = slot
                    owner[t.level][r, c] = alloc.bank
                    slot += 1
            if halo:
                h, w = dims[t.level]
                for r in range(max(0, t.r0 - halo), min(h, t.r1 + halo)):
                    for c in range(max(0, t.c0 - halo), min(w, t.c1 + halo)):
                        key = (t.level, r, c)
                        if key not in alloc.slots:
                            alloc.slots[key] = slot
                            slot += 1
                            halo_px += 1
        owned += sum(t.pixels for t in alloc.tiles)

    bursts = max(1, -(-d * 4 // topo.burst_bytes))
    pixel_bytes = bursts * topo.burst_bytes
    for alloc in banks:
        need = len(alloc.slots) * pixel_bytes
        if need > topo.bank_bytes:
            raise ConfigError(
                f"bank {alloc.bank} needs {need} bytes > capacity {topo.bank_bytes}")

    for li, grid in enumerate(owner):
        if (grid < 0).any():
            raise ConfigError(f"level {li} has unowned pixels")

    return PlacementPlan(banks=banks, owner=owner, hotcold=hotcold,
                         pe_banks=pe, non_pe_banks=non_pe,
                         pixel_bytes=pixel_bytes, bursts_per_pixel=bursts,
                         topo=topo, owned_pixels=owned, halo_pixels=halo_px,
                         uniform=uniform)


def locate(plan: PlacementPlan, level: int, row: int, col: int,
           requester: int | None = None) -> Replica:
    """Resolve a pixel to (bank, slot), preferring the requester's halo copy."""
    if requester is not None:
        slot = plan.banks[requester].slots.get((level, row, col))
        if slot is not None:
            return Replica((requester, slot))
    bank = plan.bank_of(level, row, col)
    slot = plan.banks[bank].slots.get((level, row, col))
    if slot is None:
        raise ConfigError(f"pixel ({level},{row},{col}) unmapped")  # internal bug
    return Replica((bank, slot))


def plan_to_text(plan: PlacementPlan) -> str:
    lines = []
    for alloc in plan.banks:
        tag = "PE " if alloc.pe else "   "
        lines.append(f"bank {alloc.bank:3d} {tag} load={alloc.load_estimate} "
                     f"pixels={alloc.pixel_count}")
        for t in alloc.tiles:
            flag = "hot" if t.hot else "cold"
            lines.append(f"  L{t.level} r{t.r0}:{t.r1} c{t.c0}:{t.c1} "
                         f"{flag} freq={t.freq}")
    lines.append(f"halo_ratio {plan.halo_ratio:.6f}")
    return "\n".join(lines) + "\n"
