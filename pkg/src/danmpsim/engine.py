"""Three-tier near-memory engine: bank, bank-group, and rank units.

Execution model
---------------
Functional values flow through the same float32 kernels as the
reference attention (the interpolation unit gathers with a pairwise
tree, so results agree with the reference to rounding). Timing is an
event model in memory-clock cycles:

  * a load phase streams the value-projected pyramid and per-query
    coordinate/weight tables through the cycle-level channel
    controller (one canonical broadcast; every rank captures a copy),
  * queries then run in schedule order: instruction groups are
    delivered over the shared command path of the query's channel
    (one instruction per `instr_cycles`), bank/bank-group units fetch
    neighbors through a FIFO input buffer backed by the per-bank
    open-row state machine, partial sums ride the intra-bank-group
    bus upward, and the rank unit merges tagged streams, concatenates
    heads, and writes the result back over the channel data path.

Non-uniform mode serves hot tiles with bank units and cold tiles with
bank-group units; the uniform baseline places a unit in every bank and
lets idle banks steal pending samples from the most loaded bank at
cross-bank transfer cost.
"""

from __future__ import annotations

from collections import OrderedDict, deque
from dataclasses import dataclass, field

import numpy as np

from . import cap as cap_mod
from . import isa, msda, placement
from .dram import (DramController, DramTopology, EnergyLedger, MemRequest,
                   TimingParams, AddressTuple, encode_address)
from .errors import ConfigError, InvariantViolation, LocalityError
from .report import SimReport

F32 = np.float32

MODES = ("danmp", "danmp-uniform", "danmp-nocap", "host-reference")


@dataclass(frozen=True)
class EngineParams:
    """Model constants; latencies are memory-clock cycles."""

    buffer_bytes: int = 4096
    reuse_window: int = 4            # queries a block survives unused
    simd_lanes: int = 16
    intra_bg_beat_cycles: int = 4    # per 64-byte beat on the group bus
    instr_cycles: int = 2            # command-path slot per instruction
    rank_queue_depth: int = 5
    vsize_max: int = 8               # samples per grouped instruction
    host_flops_per_cycle: float = 256.0
    steal_min_backlog: int = 2
    steal_hop_cycles: int = 16
    overhead_fraction: float = 0.085
    tile_size: int = 8
    halo: int = 1
    pe_bank_fraction: float = 0.5
    cap_k: int = 8
    cap_fraction: float = 0.2
    channel_bytes_per_cycle: int = 16
    adder_cycles: int = 3
    multiplier_cycles: int = 4
    comparator_cycles: int = 1
    table_bytes_per_sample: int = 12  # packed coordinate + weight + tag

    @property
    def icu_cycles(self) -> int:
        # coordinate sampler, boundary check, index generator
        return (self.adder_cycles + self.comparator_cycles
                + self.multiplier_cycles + self.adder_cycles)

    def bicu_cycles(self, d: int) -> int:
        # fraction extract, weight multiply, two-level adder tree,
        # extra beats for vectors wider than the SIMD width
        beats = -(-d // self.simd_lanes)
        first = (self.comparator_cycles + self.adder_cycles
                 + self.multiplier_cycles + 2 * self.adder_cycles)
        per_beat = self.multiplier_cycles + 2 * self.adder_cycles
        return first + per_beat * (beats - 1)

    def merge_cycles(self, d: int) -> int:
        return self.adder_cycles * -(-d // self.simd_lanes)


def bicu_gather(pixels: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Interpolation-unit gather: same taps as the reference kernel but
    accumulated as a pairwise tree, the way the adder tree sums them."""
    h, w, d = pixels.shape
    pts = points.reshape(-1, 2).astype(F32, copy=False)
    x = pts[:, 0]
    y = pts[:, 1]
    x0f = np.floor(x)
    y0f = np.floor(y)
    fx = x - x0f
    fy = y - y0f
    x0 = np.clip(x0f, -2, w).astype(np.int64)
    y0 = np.clip(y0f, -2, h).astype(np.int64)
    one = F32(1.0)
    taps = []
    for xi, yi, wt in ((x0, y0, (one - fx) * (one - fy)),
                       (x0 + 1, y0, fx * (one - fy)),
                       (x0, y0 + 1, (one - fx) * fy),
                       (x0 + 1, y0 + 1, fx * fy)):
        mask = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        v = np.zeros((pts.shape[0], d), dtype=F32)
        if mask.any():
            v[mask] = pixels[yi[mask], xi[mask]] * wt[mask, None]
        taps.append(v)
    out = (taps[0] + taps[1]) + (taps[2] + taps[3])
    return out.reshape(points.shape[:-1] + (d,))


class FifoBuffer:
    """Input buffer: FIFO capacity eviction plus the stale-query window."""

    __slots__ = ("capacity", "window", "blocks", "nmr", "nre", "hits",
                 "inserts")

    def __init__(self, capacity_blocks: int, window: int):
        self.capacity = max(1, capacity_blocks)
        self.window = window
        self.blocks: OrderedDict = OrderedDict()
        self.nmr = 0
        self.nre = 0
        self.hits = 0
        self.inserts = 0

    def access(self, key, qpos: int) -> bool:
        self.nmr += 1
        if key in self.blocks:
            self.blocks[key] = qpos  # refresh the window clock, keep FIFO order
            self.hits += 1
            return True
        if len(self.blocks) >= self.capacity:
            self.blocks.popitem(last=False)
            self.nre += 1
        self.blocks[key] = qpos
        self.inserts += 1
        return False

    def advance_query(self, qpos: int) -> None:
        stale = [k for k, last in self.blocks.items()
                 if qpos - last > self.window]
        for k in stale:
            del self.blocks[k]
            self.nre += 1


class LocalBank:
    """Open-row state for accesses made by near-memory units."""

    __slots__ = ("open_row",)

    def __init__(self):
        self.open_row = None

    def access(self, row: int, timing: TimingParams, bursts: int):
        """(latency, activated) for reading one pixel vector."""
        activated = False
        lat = 0
        if self.open_row == row:
            pass
        else:
            if self.open_row is not None:
                lat += timing.t_rp
            lat += timing.t_rcd
            self.open_row = row
            activated = True
        lat += timing.t_cl + bursts * timing.t_bl
        return lat, activated


@dataclass
class PeState:
    pe_id: int
    tier: str                   # bank | bankgroup | rank
    domain: int
    location: int               # bank id or bankgroup id within the rank
    free: int = 0
    busy: int = 0
    ops: int = 0
    buffer: FifoBuffer | None = None


@dataclass
class CompiledOp:
    """One sample's work item plus its routing metadata."""

    instr: isa.NmpInstruction
    tier: str
    bank: int                   # serving bank (floor-pixel owner)
    query: int
    head: int
    level: int
    point: int
    x: float
    y: float
    weight: float
    tag: int


class Accumulator:
    """Tag-keyed partial-sum streams; only equal tags ever merge."""

    def __init__(self):
        self.streams: dict[int, list] = {}

    def merge(self, tag: int, query: int, head: int, vec: np.ndarray,
              violations: list | None = None) -> None:
        s = self.streams.get(tag)
        if s is None:
            self.streams[tag] = [query, head, vec.copy(), 1]
            return
        if s[0] != query or s[1] != head:
            if violations is not None:
                violations.append(
                    f"tag {tag} collision: ({s[0]},{s[1]}) vs ({query},{head})")
            # refuse the merge: mismatching stream identity never mixes
            return
        s[2] = s[2] + vec
        s[3] += 1

    def pop(self, tag: int, query: int, head: int) -> np.ndarray:
        s = self.streams.pop(tag, None)
        if s is None or s[0] != query or s[1] != head:
            raise InvariantViolation(f"unknown or foreign tag {tag} at finalize")
        return s[2]


def psum_tag(qpos: int, head: int, heads: int) -> int:
    slots = max(1, 16 // heads)
    return (qpos % slots) * heads + head


# ---------------------------------------------------------------------------
# Tier execution primitives (also used directly by tests)
# ---------------------------------------------------------------------------

def exec_bank_pe(pe: PeState, op: CompiledOp, plan: placement.PlacementPlan,
                 banks: dict[int, LocalBank], timing: TimingParams,
                 params: EngineParams, values: list[np.ndarray],
                 qpos: int = 0):
    """Interpolate one sample at a bank unit; all reads must be local.

    Returns (weighted vector, cycles, events dict).
    """
    if not plan.banks[op.bank].pe:
        raise ConfigError(f"bank {op.bank} has no processing element")
    pixels = values[op.level]
    h, w, d = pixels.shape
    events = {"acts": 0, "read_bursts": 0, "hits": 0, "misses": 0}
    cycles = params.icu_cycles
    slots = plan.banks[op.bank].slots
    x0, y0 = int(np.floor(op.x)), int(np.floor(op.y))
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            if not (0 <= xi < w and 0 <= yi < h):
                continue
            key = (op.level, yi, xi)
            if key not in slots:
                raise LocalityError(
                    f"bank {op.bank} asked for non-local pixel {key}")
            if pe.buffer is not None and pe.buffer.access(key, qpos):
                cycles += 1
                events["hits"] += 1
            else:
                slot = slots[key]
                row, _col = plan.slot_row_col(op.bank, slot)
                lat, activated = banks[op.bank].access(row, timing,
                                                       plan.bursts_per_pixel)
                cycles += lat
                events["misses"] += 1
                events["read_bursts"] += plan.bursts_per_pixel
                if activated:
                    events["acts"] += 1
    cycles += params.bicu_cycles(d)
    vec = bicu_gather(pixels, np.array([op.x, op.y], dtype=F32))
    out = (F32(op.weight) * vec).astype(F32)
    pe.ops += 1
    return out, cycles, events


def exec_bg_pe(pe: PeState, op: CompiledOp, plan: placement.PlacementPlan,
               banks: dict[int, LocalBank], timing: TimingParams,
               params: EngineParams, values: list[np.ndarray],
               qpos: int = 0):
    """Interpolate one cold sample at the bank-group unit.

    The target bank must be a non-PE bank of this group; reads cross
    the intra-group bus at per-beat cost.
    """
    if plan.banks[op.bank].pe and not plan.uniform:
        raise ConfigError(
            f"bank {op.bank} is PE-equipped; hot data belongs to the bank tier")
    if plan.bankgroup_of(op.bank) != pe.location:
        raise ConfigError(f"bank {op.bank} is outside bank-group {pe.location}")
    pixels = values[op.level]
    h, w, d = pixels.shape
    events = {"acts": 0, "read_bursts": 0, "hits": 0, "misses": 0,
              "intra_bg": 0}
    cycles = params.icu_cycles
    slots = plan.banks[op.bank].slots
    x0, y0 = int(np.floor(op.x)), int(np.floor(op.y))
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            if not (0 <= xi < w and 0 <= yi < h):
                continue
            key = (op.level, yi, xi)
            if key not in slots:
                raise LocalityError(
                    f"bank {op.bank} does not hold pixel {key}")
            if pe.buffer is not None and pe.buffer.access(key, qpos):
                cycles += 1
                events["hits"] += 1
            else:
                slot = slots[key]
                row, _col = plan.slot_row_col(op.bank, slot)
                lat, activated = banks[op.bank].access(row, timing,
                                                       plan.bursts_per_pixel)
                cycles += lat + params.intra_bg_beat_cycles * plan.bursts_per_pixel
                events["misses"] += 1
                events["intra_bg"] += 1
                events["read_bursts"] += plan.bursts_per_pixel
                if activated:
                    events["acts"] += 1
    cycles += params.bicu_cycles(d)
    vec = bicu_gather(pixels, np.array([op.x, op.y], dtype=F32))
    out = (F32(op.weight) * vec).astype(F32)
    pe.ops += 1
    return out, cycles, events


def exec_rank_pe(acc: Accumulator, heads: int, d: int,
                 parts: list[tuple[int, int, int, np.ndarray]],
                 violations: list | None = None) -> np.ndarray:
    """Merge tagged (tag, query, head, vector) partials and concatenate
    the per-head chunks into the final d-length output."""
    if d % heads:
        raise ConfigError("d must divide into heads")
    query = parts[0][1]
    head_tag = {}
    for tag, q, hh, vec in parts:
        acc.merge(tag, q, hh, vec, violations)
        if q == query:
            head_tag[hh] = tag
    dh = d // heads
    out = np.zeros(d, dtype=F32)
    for hh in range(heads):
        vec = acc.pop(head_tag[hh], query, hh)
        out[hh * dh:(hh + 1) * dh] = vec[hh * dh:(hh + 1) * dh]
    return out


# ---------------------------------------------------------------------------
# Whole-run orchestration
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    report: SimReport
    outputs: np.ndarray            # (nq, d) float32 per-query results
    schedule_order: np.ndarray
    trace: list = field(default_factory=list)
    programs: list = field(default_factory=list)  # CompiledOp lists per query


def _host_reference(workload, pyramid, params, timing, topo, seed) -> RunResult:
    nq, h = workload.num_queries, workload.heads
    l, p, d = workload.num_levels, workload.points_per_level, pyramid.d
    offsets = msda.project_offsets(workload)
    coords = msda.sample_coordinates(pyramid, workload, offsets)
    outputs = msda.msdattn_forward(pyramid, workload, offsets)

    bursts_per_pixel = max(1, -(-d * 4 // topo.burst_bytes))
    valid = 0
    for li, lev in enumerate(pyramid.levels):
        x0 = np.floor(coords[:, :, li, :, 0])
        y0 = np.floor(coords[:, :, li, :, 1])
        for dx in (0, 1):
            for dy in (0, 1):
                valid += int(((x0 + dx >= 0) & (x0 + dx < lev.width)
                              & (y0 + dy >= 0) & (y0 + dy < lev.height)).sum())
    fetch_bytes = valid * bursts_per_pixel * topo.burst_bytes
    samples = nq * h * l * p
    flops = samples * (8 * d + 20) + samples * 2 * d
    fc_flops = _fc_flops(pyramid, workload)
    fetch_cycles = -(-fetch_bytes // (params.channel_bytes_per_cycle * topo.channels))
    msd_cycles = fetch_cycles + int(np.ceil(flops / params.host_flops_per_cycle))
    fc_cycles = int(np.ceil(fc_flops / params.host_flops_per_cycle))

    ledger = EnergyLedger(overhead_fraction=params.overhead_fraction)
    bits = fetch_bytes * 8
    ledger.add("ddr_bit", bits)
    ledger.add("io_bit", bits)
    # sequential-layout lower bound on row activates, context only
    ledger.add("act", max(1, fetch_bytes // topo.row_bytes))
    ledger.add("multiplier", samples * (4 * d + 6))
    ledger.add("adder", samples * (4 * d + 4))
    ledger.add("comparator", samples * 4)
    ledger.apply_overheads()

    rep = SimReport(mode="host-reference", seed=seed)
    rep.total_cycles = fc_cycles + msd_cycles
    rep.phase_cycles = {"cap": 0, "fc": fc_cycles, "data_move": 0,
                        "msdattn": msd_cycles}
    rep.metrics = {"idle_rate": 0.0, "reuse_rate": 0.0, "nmr": 0, "nre": 0,
                   "n_pes": 0, "span": msd_cycles}
    rep.counters = {"interpolations": samples, "cross_bank_transfers": 0,
                    "intra_bg_transfers": 0, "instructions": 0, "steals": 0,
                    "fetch_bursts": valid * bursts_per_pixel}
    rep.energy_pj = ledger.as_pj_dict()
    rep.energy_ops = dict(ledger.op_counts)
    rep.workload = {"queries": nq, "heads": h, "levels": l, "points": p, "d": d}
    rep.config = {"topology": {"channels": topo.channels,
                               "ranks_per_channel": topo.ranks_per_channel}}
    return RunResult(rep, outputs, np.arange(nq), [], [])


def _fc_flops(pyramid, workload) -> int:
    n, d = pyramid.total_pixels, pyramid.d
    nq = workload.num_queries
    hlp = workload.heads * workload.num_levels * workload.points_per_level
    return 2 * n * d * d + 2 * nq * d * (3 * hlp) + 2 * nq * d * d


def _weight_bytes(workload) -> int:
    return 4 * (workload.w_value.size + workload.w_sample.size
                + workload.w_attn.size)


class NmpEngine:
    """One simulation run; single-owner mutable state."""

    def __init__(self, workload, pyramid, mode, topology=None, timing=None,
                 params=None, seed=0):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; pick from {MODES}")
        workload.validate_against(pyramid)
        self.workload = workload
        self.pyramid = pyramid
        self.mode = mode
        self.topo = topology or DramTopology()
        self.timing = timing or TimingParams()
        self.params = params or EngineParams()
        self.seed = seed
        if workload.heads > 16:
            raise ConfigError("tag space supports at most 16 heads")
        self.violations: list[str] = []
        self.ledger = EnergyLedger(overhead_fraction=self.params.overhead_fraction)

    # -- schedule & placement ----------------------------------------------

    def _schedule(self):
        w, pyr, pr = self.workload, self.pyramid, self.params
        if self.mode in ("danmp", "danmp-uniform"):
            sched = cap_mod.cap_schedule(w, pyr, k=pr.cap_k, seed=self.seed,
                                         fraction=pr.cap_fraction)
            return sched.order, sched.hotcold, sched.flops, sched
        # no clustering: original order, frequencies from reference points
        hotcold = cap_mod.reference_frequencies(w, pyr)
        flops = w.num_queries * w.num_levels * 5
        return np.arange(w.num_queries), hotcold, flops, None

    # -- load phase ----------------------------------------------------------

    def _load_phase(self, plan) -> tuple[int, list]:
        """Stream the canonical pyramid copy and query tables through the
        channel-0 controller; every rank captures the broadcast."""
        topo, pr = self.topo, self.params
        ctrl = DramController(topo, self.timing, channel=0)
        w = self.workload
        samples = (w.num_queries * w.heads * w.num_levels * w.points_per_level)
        table_bursts = -(-samples * pr.table_bytes_per_sample // topo.burst_bytes)
        weight_bursts = -(-_weight_bytes(w) // topo.burst_bytes)

        writes = []
        for alloc in plan.banks:
            n_slots = len(alloc.slots)
            bg, bank = divmod(alloc.bank, topo.banks_per_bankgroup)
            writes.append((bg, bank, n_slots * plan.bursts_per_pixel))
        # one spare row region at the top of bank 0 carries the tables
        max_rows = max((-(-(n * topo.burst_bytes) // topo.row_bytes))
                       for _bg, _b, n in writes) if writes else 0
        table_row0 = min(topo.rows_per_bank - 1, max_rows + 1)

        pending = []
        for bg, bank, bursts in writes:
            for i in range(bursts):
                row, col = divmod(i, topo.columns_per_row)
                pending.append(("write", bg, bank, row, col))
        for i in range(table_bursts + weight_bursts):
            row, col = divmod(i, topo.columns_per_row)
            kind = "write" if i < table_bursts else "read"
            pending.append((kind, 0, 0, table_row0 + row, col))

        # interleave across banks per row so each bank streams row hits
        pending.sort(key=lambda t: (t[3], t[4], t[1], t[2], t[0]))
        i = 0
        while i < len(pending) or ctrl.pending:
            while i < len(pending):
                kind, bg, bank, row, col = pending[i]
                req = MemRequest(kind, encode_address(
                    AddressTuple(0, 0, bg, bank, row % topo.rows_per_bank, col),
                    topo))
                if not ctrl.enqueue(req):
                    break
                i += 1
            best, min_e = ctrl._pick()
            if best is None and ctrl.pending:
                ctrl.cycle = max(ctrl.cycle + 1, min_e)
                continue
            ctrl.tick()
        span = ctrl.drain()

        # broadcast energy: every channel carries the stream, every rank
        # captures its own copy into bank rows
        data_bursts = sum(b for _g, _b2, b in writes) + table_bursts
        bits = data_bursts * topo.burst_bytes * 8
        self.ledger.add("io_bit", bits * topo.channels)
        self.ledger.add("ddr_bit", bits * topo.total_ranks)
        self.ledger.add("act", ctrl.stats["acts"] * topo.total_ranks)
        wbits = weight_bursts * topo.burst_bytes * 8
        self.ledger.add("ddr_bit", wbits)
        self.ledger.add("io_bit", wbits)
        return span, ctrl.trace

    # -- query phase ---------------------------------------------------------

    def _build_domains(self, plan):
        topo, pr = self.topo, self.params
        d = self.pyramid.d
        blocks = max(1, pr.buffer_bytes // plan.pixel_bytes)
        domains = []
        for ch in range(topo.channels):
            for rk in range(topo.ranks_per_channel):
                idx = len(domains)
                bank_pes = {}
                for b in plan.pe_banks:
                    bank_pes[b] = PeState(len(bank_pes), "bank", idx, b,
                                          buffer=FifoBuffer(blocks, pr.reuse_window))
                bg_pes = {}
                if not plan.uniform:
                    for g in range(topo.bankgroups_per_rank):
                        bg_pes[g] = PeState(g, "bankgroup", idx, g,
                                            buffer=FifoBuffer(blocks, pr.reuse_window))
                rank_pe = PeState(0, "rank", idx, 0)
                local = {b: LocalBank() for b in range(topo.banks_per_rank)}
                domains.append({
                    "channel": ch, "bank_pes": bank_pes, "bg_pes": bg_pes,
                    "rank_pe": rank_pe, "banks": local,
                    "acc": Accumulator(), "inflight": deque(),
                    "queries": 0,
                })
        return domains

    def _assign_domains(self, order, sched, n_domains):
        """Map each query to a rank domain: probe and unpacked queries go
        round-robin in blocks of four; packs stay whole on the least
        loaded domain so their locality survives sharding."""
        dom_of = np.empty(self.workload.num_queries, dtype=np.int64)
        loads = [0] * n_domains
        if sched is None:
            for i, q in enumerate(order):
                dom = (i // 4) % n_domains
                dom_of[q] = dom
                loads[dom] += 1
            return dom_of
        for i, q in enumerate(sched.probe_ids.tolist()):
            dom = (i // 4) % n_domains
            dom_of[q] = dom
            loads[dom] += 1
        for pack in sched.packs:
            dom = min(range(n_domains), key=lambda j: (loads[j], j))
            for q in pack.query_ids:
                dom_of[q] = dom
            loads[dom] += len(pack.query_ids)
        return dom_of

    def run(self) -> RunResult:
        if self.mode == "host-reference":
            return _host_reference(self.workload, self.pyramid, self.params,
                                   self.timing, self.topo, self.seed)
        w, pyr, pr, topo = self.workload, self.pyramid, self.params, self.topo
        nq, h = w.num_queries, w.heads
        l, p, d = w.num_levels, w.points_per_level, pyr.d
        dh = d // h if d % h == 0 else None
        if dh is None:
            raise ConfigError(f"d={d} not divisible by heads={h}")

        order, hotcold, cap_flops, sched = self._schedule()
        plan = placement.build_layout(
            pyr.dims(), topo, hotcold, d, tile_size=pr.tile_size, halo=pr.halo,
            pe_fraction=pr.pe_bank_fraction, uniform=self.mode == "danmp-uniform")

        offsets = msda.project_offsets(w)
        weights = msda.compute_attention_weights(w)
        coords = msda.sample_coordinates(pyr, w, offsets)
        values = [lev.pixels @ w.w_value for lev in pyr.levels]

        # sampled through the interpolation unit's tree-order kernel
        sampled = np.empty((nq, h, l, p, d), dtype=F32)
        for li in range(l):
            sampled[:, :, li] = bicu_gather(values[li], coords[:, :, li])
        weighted = (weights[..., None] * sampled).astype(F32)

        # serving bank of each sample: owner of the clamped floor pixel
        serve_bank = np.empty((nq, h, l, p), dtype=np.int64)
        for li, lev in enumerate(pyr.levels):
            x0 = np.clip(np.floor(coords[:, :, li, :, 0]), 0, lev.width - 1)
            y0 = np.clip(np.floor(coords[:, :, li, :, 1]), 0, lev.height - 1)
            serve_bank[:, :, li] = plan.owner[li][y0.astype(np.int64),
                                                 x0.astype(np.int64)]

        cap_cycles = int(np.ceil(cap_flops / pr.host_flops_per_cycle))
        fc_cycles = int(np.ceil(_fc_flops(pyr, w) / pr.host_flops_per_cycle))
        load_span, trace = self._load_phase(plan)

        domains = self._build_domains(plan)
        n_domains = len(domains)
        dom_of = self._assign_domains(order, sched, n_domains)
        w_eff = min(pr.rank_queue_depth, max(1, 16 // h))

        ca_free = [0] * topo.channels
        data_free = [0] * topo.channels
        outputs = np.zeros((nq, d), dtype=F32)
        bursts = plan.bursts_per_pixel
        wb_cycles = -(-d * 4 // pr.channel_bytes_per_cycle)
        xfer_beats = bursts * pr.intra_bg_beat_cycles
        merge_cy = pr.merge_cycles(d)
        bicu_cy = pr.bicu_cycles(d)
        icu_cy = pr.icu_cycles
        sample_shape = (h, l, p)

        counters = {"interpolations": 0, "cross_bank_transfers": 0,
                    "intra_bg_transfers": 0, "instructions": 0, "steals": 0,
                    "acts": 0, "read_bursts": 0, "buffer_accesses": 0}
        finalize_times = []
        per_domain_count = [0] * n_domains
        adder_ops = multiplier_ops = comparator_ops = 0
        io_bits = 0

        levels_hw = [(lev.height, lev.width) for lev in pyr.levels]
        for qpos, q in enumerate(order.tolist()):
            dom_idx = int(dom_of[q])
            dom = domains[dom_idx]
            ch = dom["channel"]
            qlocal = per_domain_count[dom_idx]  # domain-local sequence index
            per_domain_count[dom_idx] += 1

            # group this query's samples by serving bank; entries are
            # (sample, donor) with donor set only for stolen work
            bank_groups: dict[int, list] = {}
            for hh in range(h):
                for li in range(l):
                    for pp in range(p):
                        b = int(serve_bank[q, hh, li, pp])
                        bank_groups.setdefault(b, []).append(((hh, li, pp), None))

            if plan.uniform:
                # idle banks steal the oldest pending sample from the most
                # loaded bank at memory-controller transfer cost
                idle = [b for b in range(topo.banks_per_rank)
                        if b not in bank_groups]
                while idle:
                    donor = max(bank_groups,
                                key=lambda b: (len(bank_groups[b]), -b))
                    if len(bank_groups[donor]) < pr.steal_min_backlog:
                        break
                    thief = idle.pop(0)
                    s, _src = bank_groups[donor].pop(0)
                    bank_groups.setdefault(thief, []).append((s, donor))
                    counters["cross_bank_transfers"] += 1
                    counters["steals"] += 1

            # instruction accounting: grouped interpolation ops per
            # (unit, head) plus per-group reductions and rank control
            n_instr = 2
            touched_bgs = set()
            for b, entries in bank_groups.items():
                per_head: dict[int, int] = {}
                for (hh, _li, _pp), _donor in entries:
                    per_head[hh] = per_head.get(hh, 0) + 1
                for cnt in per_head.values():
                    n_instr += -(-cnt // pr.vsize_max)
                touched_bgs.add(plan.bankgroup_of(b))
            n_instr += len(touched_bgs)
            counters["instructions"] += n_instr
            io_bits += n_instr * isa.TOTAL_BITS

            gate = 0
            if len(dom["inflight"]) >= w_eff:
                gate = dom["inflight"][-w_eff]
            start = max(ca_free[ch], gate)
            deliv = start + n_instr * pr.instr_cycles
            ca_free[ch] = deliv

            # per-unit execution
            head_ready: dict[tuple, int] = {}   # (bg, head) -> ready cycle
            head_part: dict[tuple, np.ndarray] = {}
            for b in sorted(bank_groups):
                entries = bank_groups[b]
                if not entries:
                    continue
                if plan.banks[b].pe:
                    unit = dom["bank_pes"][b]
                    local = True
                else:
                    unit = dom["bg_pes"][plan.bankgroup_of(b)]
                    local = False
                # blocks idle past the window are gone before this query runs
                unit.buffer.advance_query(qpos)
                t = max(unit.free, deliv)
                groups_by_head: dict[int, list] = {}
                for entry in entries:
                    groups_by_head.setdefault(entry[0][0], []).append(entry)

                # the unit pipelines index computation, neighbor fetch, and
                # interpolation across its samples: one fill, then each
                # sample occupies max(fetch, interpolate) cycles
                t += icu_cy
                unit.busy += icu_cy
                for hh in sorted(groups_by_head):
                    for (s, donor) in groups_by_head[hh]:
                        _hh, li, pp = s
                        hgt, wid = levels_hw[li]
                        x = coords[q, _hh, li, pp, 0]
                        y = coords[q, _hh, li, pp, 1]
                        x0 = int(np.floor(x))
                        y0 = int(np.floor(y))
                        fetch = 0
                        is_steal = donor is not None
                        serving = donor if is_steal else b
                        slots = plan.banks[serving].slots
                        if is_steal:
                            # full read path, serialized off-chip hop over
                            # the shared channel data bus, then write path;
                            # the thief stalls while the data travels
                            bus = (2 * 4 * bursts * topo.burst_bytes
                                   // pr.channel_bytes_per_cycle)
                            slot_start = max(data_free[ch], t)
                            data_free[ch] = slot_start + bus
                            wait = (slot_start + bus - t
                                    + self.timing.t_rcd + self.timing.t_cl
                                    + 4 * bursts * self.timing.t_bl
                                    + 2 * pr.steal_hop_cycles
                                    + self.timing.t_cl)
                            t += wait  # stall, not busy
                            sbits = 4 * bursts * topo.burst_bytes * 8
                            self.ledger.add("ddr_bit", 2 * sbits)
                            io_bits += 2 * sbits
                            counters["read_bursts"] += 4 * bursts
                        for dy2 in (0, 1):
                            for dx2 in (0, 1):
                                xi, yi = x0 + dx2, y0 + dy2
                                if not (0 <= xi < wid and 0 <= yi < hgt):
                                    continue
                                key = (li, yi, xi)
                                if is_steal:
                                    unit.buffer.access(key, qpos)
                                    fetch += 1
                                    continue
                                if key not in slots:
                                    raise LocalityError(
                                        f"unit at bank {serving} missing {key}")
                                if unit.buffer.access(key, qpos):
                                    fetch += 1
                                else:
                                    slot = slots[key]
                                    row, _c = plan.slot_row_col(serving, slot)
                                    lat, activated = dom["banks"][serving].access(
                                        row, self.timing, bursts)
                                    if not local:
                                        lat += xfer_beats
                                        counters["intra_bg_transfers"] += 1
                                    fetch += lat
                                    counters["read_bursts"] += bursts
                                    if activated:
                                        counters["acts"] += 1
                        service = max(fetch, bicu_cy)
                        t += service
                        unit.busy += service
                        unit.ops += 1
                        counters["interpolations"] += 1
                        multiplier_ops += 4 * d + 6 + d
                        adder_ops += 3 * d + 4 + d
                        comparator_ops += 4
                t += bicu_cy  # drain the last sample through the tree
                unit.busy += bicu_cy
                for hh in sorted(groups_by_head):
                    # partial sum for (this unit, head), fixed sample order
                    lp_idx = np.array([(e[0][1], e[0][2])
                                       for e in groups_by_head[hh]], dtype=np.int64)
                    part = weighted[q, hh][lp_idx[:, 0], lp_idx[:, 1]].sum(
                        axis=0, dtype=F32)
                    bg = plan.bankgroup_of(b)
                    if plan.uniform:
                        # no group accumulators: every bank partial rides to
                        # the rank unit on its own
                        key = (b, hh)
                        head_part[key] = part.astype(F32)
                        head_ready[key] = t + xfer_beats
                    else:
                        # bank partials drain through the group accumulator
                        bgpe = dom["bg_pes"][bg]
                        arrive = t + (xfer_beats if local else 0)
                        tm = max(bgpe.free, arrive) + merge_cy
                        bgpe.free = tm
                        bgpe.busy += merge_cy
                        key = (bg, hh)
                        if key in head_part:
                            head_part[key] = (head_part[key] + part).astype(F32)
                            head_ready[key] = max(head_ready[key], tm)
                        else:
                            head_part[key] = part.astype(F32)
                            head_ready[key] = tm
                unit.free = t

            # rank tier: merge tagged streams per head, concatenate, write back
            rank = dom["rank_pe"]
            acc = dom["acc"]
            fin = deliv
            for (bg, hh) in sorted(head_part):
                tag = psum_tag(qlocal, hh, h)
                arrive = head_ready[(bg, hh)] + xfer_beats
                tmerge = max(rank.free, arrive) + merge_cy
                rank.busy += merge_cy
                rank.free = tmerge
                fin = max(fin, tmerge)
                acc.merge(tag, q, hh, head_part[(bg, hh)], self.violations)
            out = np.zeros(d, dtype=F32)
            for hh in range(h):
                tag = psum_tag(qlocal, hh, h)
                try:
                    vec = acc.pop(tag, q, hh)
                except InvariantViolation as e:
                    self.violations.append(str(e))
                    vec = np.zeros(d, dtype=F32)
                out[hh * dh:(hh + 1) * dh] = vec[hh * dh:(hh + 1) * dh]
            outputs[q] = out
            fin += h  # head concatenation
            wb = max(data_free[ch], fin) + wb_cycles
            data_free[ch] = wb
            io_bits += d * 32
            dom["inflight"].append(wb)
            finalize_times.append(wb)

        span = max(finalize_times) if finalize_times else 1
        span = max(span, 1)

        # metrics over interpolating units
        pes = []
        for dom in domains:
            pes.extend(dom["bank_pes"].values())
            pes.extend(dom["bg_pes"].values())
        n_pes = len(pes)
        stall_sum = sum(max(0, span - pe.busy) for pe in pes)
        idle_rate = stall_sum / (n_pes * span) if n_pes else 0.0
        nmr = sum(pe.buffer.nmr for pe in pes if pe.buffer)
        nre = sum(pe.buffer.nre for pe in pes if pe.buffer)
        reuse = reuse_rate(nmr, nre)
        hist = [0] * 10
        for pe in pes:
            u = min(0.999, pe.busy / span)
            hist[int(u * 10)] += 1

        expected = nq * h * l * p
        if counters["interpolations"] != expected:
            self.violations.append(
                f"work conservation: {counters['interpolations']} != {expected}")

        counters["buffer_accesses"] = nmr
        self.ledger.add("buffer", nmr + sum(pe.buffer.inserts for pe in pes if pe.buffer))
        self.ledger.add("act", counters["acts"])
        self.ledger.add("ddr_bit", counters["read_bursts"] * topo.burst_bytes * 8)
        self.ledger.add("io_bit", io_bits)
        self.ledger.add("adder", adder_ops)
        self.ledger.add("multiplier", multiplier_ops)
        self.ledger.add("comparator", comparator_ops)
        self.ledger.apply_overheads()

        rep = SimReport(mode=self.mode, seed=self.seed)
        rep.phase_cycles = {"cap": cap_cycles, "fc": fc_cycles,
                            "data_move": load_span, "msdattn": span}
        rep.total_cycles = cap_cycles + max(fc_cycles, load_span) + span
        rep.metrics = {"idle_rate": idle_rate, "reuse_rate": reuse,
                       "nmr": nmr, "nre": nre, "n_pes": n_pes, "span": span}
        rep.counters = counters
        rep.energy_pj = self.ledger.as_pj_dict()
        rep.energy_ops = dict(self.ledger.op_counts)
        rep.pe_utilization_hist = hist
        rep.data_layout = {"halo_ratio": plan.halo_ratio,
                           "hot_entries": hotcold.hot_entries,
                           "total_entries": hotcold.total_entries,
                           "pe_banks": len(plan.pe_banks),
                           "owned_pixels": plan.owned_pixels,
                           "halo_pixels": plan.halo_pixels}
        rep.workload = {"queries": nq, "heads": h, "levels": l, "points": p,
                        "d": d}
        rep.config = {"topology": {"channels": topo.channels,
                                   "ranks_per_channel": topo.ranks_per_channel,
                                   "bankgroups": topo.bankgroups_per_rank,
                                   "banks_per_group": topo.banks_per_bankgroup},
                      "cap": {"k": pr.cap_k, "fraction": pr.cap_fraction},
                      "rank_window": w_eff}
        rep.violations = list(self.violations)
        return RunResult(rep, outputs, order, trace, [])


def reuse_rate(nmr: int, nre: int) -> float:
    """(NMR - NRE) / NMR, clamped into [0, 1]; zero requests give 0."""
    if nmr <= 0:
        return 0.0
    return max(0.0, min(1.0, (nmr - nre) / nmr))


def idle_rate(stalls, n_pes: int, total: int) -> float:
    """Average stall share sum(s_i) / (N * T)."""
    if n_pes <= 0 or total <= 0:
        return 0.0
    s = sum(stalls)
    return max(0.0, min(1.0, s / (n_pes * total)))


def compute_metrics(counters: dict, elapsed: int, pes: list) -> dict:
    """Metric record from raw counters and per-unit busy times."""
    stalls = [max(0, elapsed - pe.busy) for pe in pes]
    return {
        "idle_rate": idle_rate(stalls, len(pes), elapsed),
        "reuse_rate": reuse_rate(counters.get("nmr", 0), counters.get("nre", 0)),
        "nmr": counters.get("nmr", 0),
        "nre": counters.get("nre", 0),
        "n_pes": len(pes),
        "span": elapsed,
    }


def run_flow(workload, pyramid, mode, topology=None, timing=None,
             params=None, seed=0) -> RunResult:
    """Simulate one mode end to end and return (report, outputs)."""
    eng = NmpEngine(workload, pyramid, mode, topology=topology, timing=timing,
                    params=params, seed=seed)
    return eng.run()
