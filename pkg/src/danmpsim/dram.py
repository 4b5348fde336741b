"""DDR5 channel model: address mapping, per-bank timing state machines,
an FR-FCFS open-page controller, an independent trace checker, and the
energy ledger.

One simulator cycle is one memory clock at 2400 MHz. Processing-element
latencies elsewhere in the package use the same clock domain.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .errors import ConfigError

NEG = -(10 ** 9)


@dataclass(frozen=True)
class TimingParams:
    """DRAM timing constraints in memory cycles."""

    t_rcd: int = 40
    t_cl: int = 40
    t_rp: int = 40
    t_rc: int = 116
    t_bl: int = 8
    t_faw: int = 32
    t_ras: int = 76
    t_ccd_s: int = 8
    t_ccd_l: int = 12

    def __post_init__(self):
        for name in ("t_rcd", "t_cl", "t_rp", "t_rc", "t_bl", "t_faw",
                     "t_ras", "t_ccd_s", "t_ccd_l"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.t_rc < self.t_ras + self.t_rp:
            raise ConfigError("tRC must cover tRAS + tRP")


@dataclass(frozen=True)
class DramTopology:
    """Channel/DIMM/rank/bank-group/bank hierarchy and geometry."""

    channels: int = 4
    dimms_per_channel: int = 1
    ranks_per_dimm: int = 2
    bankgroups_per_rank: int = 8
    banks_per_bankgroup: int = 4
    rows_per_bank: int = 32768
    columns_per_row: int = 128        # one column = one 64-byte burst slot
    bus_width: int = 64               # bits
    channel_bandwidth: float = 38.4e9  # bytes/second
    burst_bytes: int = 64
    xor_fold: bool = False

    def __post_init__(self):
        for name in ("channels", "dimms_per_channel", "ranks_per_dimm",
                     "bankgroups_per_rank", "banks_per_bankgroup",
                     "rows_per_bank", "columns_per_row"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.xor_fold and (self.bankgroups_per_rank & (self.bankgroups_per_rank - 1)):
            raise ConfigError("xor_fold needs a power-of-two bank-group count")

    @property
    def ranks_per_channel(self) -> int:
        # a rank index within a channel covers dimm * ranks_per_dimm + rank
        return self.dimms_per_channel * self.ranks_per_dimm

    @property
    def total_ranks(self) -> int:
        return self.channels * self.ranks_per_channel

    @property
    def banks_per_rank(self) -> int:
        return self.bankgroups_per_rank * self.banks_per_bankgroup

    @property
    def row_bytes(self) -> int:
        return self.columns_per_row * self.burst_bytes

    @property
    def bank_bytes(self) -> int:
        return self.rows_per_bank * self.row_bytes

    @property
    def capacity_bytes(self) -> int:
        return (self.channels * self.ranks_per_channel * self.banks_per_rank
                * self.bank_bytes)


@dataclass(frozen=True)
class AddressTuple:
    channel: int
    rank: int
    bankgroup: int
    bank: int
    row: int
    column: int


def decode_address(addr: int, topo: DramTopology) -> AddressTuple:
    """Split a physical byte address into its hierarchy coordinates.

    Interleave order, low to high: burst offset, channel, column,
    bank-group, bank, rank, row. The optional XOR fold mixes low row
    bits into the bank-group index (Skylake-style conflict spreading)
    while staying bijective.
    """
    if addr < 0 or addr >= topo.capacity_bytes:
        raise ConfigError(f"address {addr:#x} outside capacity")
    x = addr // topo.burst_bytes
    x, channel = divmod(x, topo.channels)[0], x % topo.channels
    x, column = x // topo.columns_per_row, x % topo.columns_per_row
    x, bankgroup = x // topo.bankgroups_per_rank, x % topo.bankgroups_per_rank
    x, bank = x // topo.banks_per_bankgroup, x % topo.banks_per_bankgroup
    x, rank = x // topo.ranks_per_channel, x % topo.ranks_per_channel
    row = x
    if topo.xor_fold:
        bankgroup ^= row & (topo.bankgroups_per_rank - 1)
    return AddressTuple(channel, rank, bankgroup, bank, row, column)


def encode_address(t: AddressTuple, topo: DramTopology) -> int:
    """Inverse of decode_address."""
    bankgroup = t.bankgroup
    if topo.xor_fold:
        bankgroup ^= t.row & (topo.bankgroups_per_rank - 1)
    x = t.row
    x = x * topo.ranks_per_channel + t.rank
    x = x * topo.banks_per_bankgroup + t.bank
    x = x * topo.bankgroups_per_rank + bankgroup
    x = x * topo.columns_per_row + t.column
    x = x * topo.channels + t.channel
    return x * topo.burst_bytes


@dataclass
class MemRequest:
    """One read or write of `size` bytes at a burst-aligned address."""

    kind: str                  # "read" | "write"
    addr: int
    size: int = 64
    origin: str = "host"       # host | rank-pe | bg-pe | bank-pe
    issue_cycle: int = 0
    completion_cycle: int | None = None
    caused_act: bool = False

    def __post_init__(self):
        if self.kind not in ("read", "write"):
            raise ConfigError(f"bad request kind {self.kind!r}")


@dataclass(frozen=True)
class CommandRecord:
    cycle: int
    op: str        # ACT | RD | WR | PRE
    channel: int
    rank: int
    bankgroup: int
    bank: int
    row: int
    column: int

    def line(self) -> str:
        return (f"{self.cycle} {self.op} {self.channel} {self.rank} "
                f"{self.bankgroup} {self.bank} {self.row} {self.column}")


class _BankState:
    __slots__ = ("open_row", "last_act", "last_pre", "last_col")

    def __init__(self):
        self.open_row = None
        self.last_act = NEG
        self.last_pre = NEG
        self.last_col = NEG


class DramController:
    """FR-FCFS open-page controller for one channel.

    Requests enter bounded read/write queues (back-pressure when full)
    and retire when their column command issues; read data lands
    t_cl + t_bl after the column command. At most one command issues
    per cycle. Row hits are preferred, then age.
    """

    def __init__(self, topology: DramTopology, timing: TimingParams,
                 channel: int = 0, queue_depth: int = 32,
                 record_trace: bool = True,
                 refresh_period: int = 0, refresh_duration: int = 0):
        self.topo = topology
        self.timing = timing
        self.channel = channel
        self.queue_depth = queue_depth
        self.record_trace = record_trace
        self.refresh_period = refresh_period
        self.refresh_duration = refresh_duration
        self.cycle = 0
        self.trace: list[CommandRecord] = []
        self.read_queue: list = []
        self.write_queue: list = []
        self.retired: list[MemRequest] = []
        self._seq = 0
        self._banks: dict[tuple, _BankState] = {}
        self._rank_acts: dict[int, deque] = {}
        self._last_col_bg: dict[tuple, int] = {}
        self._last_col_any = NEG
        self.stats = {"row_hits": 0, "row_misses": 0, "row_conflicts": 0,
                      "acts": 0, "reads": 0, "writes": 0, "pres": 0}

    # -- queue interface ---------------------------------------------------

    def enqueue(self, req: MemRequest) -> bool:
        """Admit a request; False signals back-pressure (caller stalls)."""
        if req.size % self.topo.burst_bytes:
            raise ConfigError("request size must be a burst multiple")
        queue = self.read_queue if req.kind == "read" else self.write_queue
        if len(queue) >= self.queue_depth:
            return False
        t = decode_address(req.addr, self.topo)
        if t.channel != self.channel:
            raise ConfigError(f"request for channel {t.channel} on controller "
                              f"{self.channel}")
        req.issue_cycle = self.cycle
        # cache hot-path lookups with the queue entry
        queue.append((req, t, self._seq, self._bank(t), t.rank,
                      (t.rank, t.bankgroup)))
        self._seq += 1
        return True

    @property
    def pending(self) -> int:
        return len(self.read_queue) + len(self.write_queue)

    # -- timing ------------------------------------------------------------

    def _bank(self, t) -> _BankState:
        key = (t.rank, t.bankgroup, t.bank)
        st = self._banks.get(key)
        if st is None:
            st = _BankState()
            self._banks[key] = st
        return st

    def _in_refresh(self, cycle: int) -> int:
        """Return the end of a blackout window covering `cycle`, else 0."""
        if not self.refresh_period:
            return 0
        phase = cycle % self.refresh_period
        if phase < self.refresh_duration:
            return cycle - phase + self.refresh_duration
        return 0

    def _next_command(self, entry) -> tuple[str, int]:
        """(command, earliest issue cycle) for a queued request."""
        req, t, _seq, bank, rank, bg_key = entry
        tm = self.timing
        if bank.open_row == t.row:
            earliest = bank.last_act + tm.t_rcd
            last_same_bg = self._last_col_bg.get(bg_key, NEG)
            earliest = max(earliest, last_same_bg + tm.t_ccd_l,
                           self._last_col_any + tm.t_ccd_s)
            cmd = "RD" if req.kind == "read" else "WR"
        elif bank.open_row is None:
            earliest = max(bank.last_act + tm.t_rc, bank.last_pre + tm.t_rp)
            acts = self._rank_acts.get(rank)
            if acts and len(acts) >= 4:
                earliest = max(earliest, acts[-4] + tm.t_faw)
            cmd = "ACT"
        else:
            # conflicting open row: close it, draining any column data first
            earliest = max(bank.last_act + tm.t_ras, bank.last_col + tm.t_bl)
            cmd = "PRE"
        if self.refresh_period:
            blackout = self._in_refresh(max(earliest, self.cycle))
            if blackout:
                earliest = max(earliest, blackout)
        return cmd, earliest

    def _issue(self, idx: int, queue: list, cmd: str, when: int) -> CommandRecord:
        req, t, _seq, bank, _rank, _bg_key = queue[idx]
        tm = self.timing
        if cmd == "ACT":
            bank.open_row = t.row
            bank.last_act = when
            acts = self._rank_acts.setdefault(t.rank, deque(maxlen=8))
            acts.append(when)
            req.caused_act = True
            self.stats["acts"] += 1
            self.stats["row_misses"] += 1
            rec = CommandRecord(when, "ACT", self.channel, t.rank, t.bankgroup,
                                t.bank, t.row, 0)
        elif cmd == "PRE":
            bank.open_row = None
            bank.last_pre = when
            self.stats["pres"] += 1
            self.stats["row_conflicts"] += 1
            rec = CommandRecord(when, "PRE", self.channel, t.rank, t.bankgroup,
                                t.bank, t.row, 0)
        else:
            bank.last_col = when
            self._last_col_bg[(t.rank, t.bankgroup)] = when
            self._last_col_any = when
            req.completion_cycle = when + tm.t_cl + tm.t_bl
            if not req.caused_act:
                self.stats["row_hits"] += 1
            queue.pop(idx)
            self.retired.append(req)
            if cmd == "RD":
                self.stats["reads"] += 1
            else:
                self.stats["writes"] += 1
            rec = CommandRecord(when, cmd, self.channel, t.rank, t.bankgroup,
                                t.bank, t.row, t.column)
        if self.record_trace:
            self.trace.append(rec)
        return rec

    def _candidates(self):
        for queue in (self.read_queue, self.write_queue):
            for idx, rt in enumerate(queue):
                yield queue, idx, rt

    def _pick(self) -> tuple:
        """Best command issuable at the current cycle plus the earliest
        legal cycle over all candidates (for event skipping)."""
        tm = self.timing
        cyc = self.cycle
        t_rcd, t_ccd_l, t_ccd_s = tm.t_rcd, tm.t_ccd_l, tm.t_ccd_s
        t_rc, t_rp, t_faw = tm.t_rc, tm.t_rp, tm.t_faw
        t_ras, t_bl = tm.t_ras, tm.t_bl
        last_any = self._last_col_any
        col_bg = self._last_col_bg
        rank_acts = self._rank_acts
        refreshing = self.refresh_period
        best = None
        best_key = None
        min_earliest = None
        for queue in (self.read_queue, self.write_queue):
            for idx, entry in enumerate(queue):
                req, t, seq, bank, rank, bg_key = entry
                open_row = bank.open_row
                if open_row == t.row:
                    earliest = bank.last_act + t_rcd
                    e2 = col_bg.get(bg_key, NEG) + t_ccd_l
                    if e2 > earliest:
                        earliest = e2
                    e3 = last_any + t_ccd_s
                    if e3 > earliest:
                        earliest = e3
                    hit = 0
                    cmd = "RD" if req.kind == "read" else "WR"
                elif open_row is None:
                    earliest = bank.last_act + t_rc
                    e2 = bank.last_pre + t_rp
                    if e2 > earliest:
                        earliest = e2
                    acts = rank_acts.get(rank)
                    if acts and len(acts) >= 4:
                        e3 = acts[-4] + t_faw
                        if e3 > earliest:
                            earliest = e3
                    hit = 1
                    cmd = "ACT"
                else:
                    earliest = bank.last_act + t_ras
                    e2 = bank.last_col + t_bl
                    if e2 > earliest:
                        earliest = e2
                    hit = 1
                    cmd = "PRE"
                if refreshing:
                    blackout = self._in_refresh(max(earliest, cyc))
                    if blackout and blackout > earliest:
                        earliest = blackout
                if min_earliest is None or earliest < min_earliest:
                    min_earliest = earliest
                if earliest <= cyc:
                    key = (hit, seq)
                    if best_key is None or key < best_key:
                        best_key = key
                        best = (key, queue, idx, cmd)
        return best, min_earliest

    def tick(self) -> list[CommandRecord]:
        """Advance one cycle; issue at most one command legal right now."""
        issued = []
        best, _ = self._pick()
        if best is not None:
            _, queue, idx, cmd = best
            issued.append(self._issue(idx, queue, cmd, self.cycle))
        self.cycle += 1
        return issued

    def next_event_cycle(self) -> int | None:
        """Earliest cycle at which any queued request has a legal command."""
        _best, min_earliest = self._pick()
        return min_earliest

    def drain(self) -> int:
        """Run with event skipping until all queues empty; returns cycle."""
        while self.pending:
            best, min_earliest = self._pick()
            if best is None:
                self.cycle = max(self.cycle + 1, min_earliest)
                continue
            _, queue, idx, cmd = best
            self._issue(idx, queue, cmd, self.cycle)
            self.cycle += 1
        return self.cycle


def schedule_tick(controller: DramController) -> list[CommandRecord]:
    """Commands issued by the controller in the current cycle."""
    return controller.tick()


# ---------------------------------------------------------------------------
# Independent trace checker
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimingViolation:
    rule: str
    cycle: int
    index: int
    detail: str


def check_timing(trace: list[CommandRecord], timing: TimingParams) -> list[TimingViolation]:
    """Scan a time-ordered command trace for pairwise constraint breaks.

    Checked rules: ACT->RD/WR >= tRCD, ACT->PRE >= tRAS, ACT->ACT same
    bank >= tRC, PRE->ACT >= tRP, column->column same bank-group >=
    tCCD_L and across bank-groups (same channel) >= tCCD_S, and at most
    4 ACTs per rank inside any tFAW window.
    """
    tm = timing
    violations = []
    last_act: dict[tuple, int] = {}
    last_pre: dict[tuple, int] = {}
    last_col_bg: dict[tuple, int] = {}
    last_col_chan: dict[tuple, tuple] = {}  # channel -> (cycle, bg_key)
    rank_acts: dict[tuple, deque] = {}

    def bad(rule, rec, i, need, got):
        violations.append(TimingViolation(
            rule, rec.cycle, i, f"need >= {need}, got {got}"))

    for i, rec in enumerate(trace):
        bank_key = (rec.channel, rec.rank, rec.bankgroup, rec.bank)
        bg_key = (rec.channel, rec.rank, rec.bankgroup)
        if rec.op == "ACT":
            prev = last_act.get(bank_key)
            if prev is not None and rec.cycle - prev < tm.t_rc:
                bad("tRC", rec, i, tm.t_rc, rec.cycle - prev)
            prev = last_pre.get(bank_key)
            if prev is not None and rec.cycle - prev < tm.t_rp:
                bad("tRP", rec, i, tm.t_rp, rec.cycle - prev)
            acts = rank_acts.setdefault((rec.channel, rec.rank), deque(maxlen=4))
            if len(acts) == 4 and rec.cycle - acts[0] < tm.t_faw:
                bad("tFAW", rec, i, tm.t_faw, rec.cycle - acts[0])
            acts.append(rec.cycle)
            last_act[bank_key] = rec.cycle
        elif rec.op in ("RD", "WR"):
            prev = last_act.get(bank_key)
            if prev is not None and rec.cycle - prev < tm.t_rcd:
                bad("tRCD", rec, i, tm.t_rcd, rec.cycle - prev)
            prev = last_col_bg.get(bg_key)
            if prev is not None and rec.cycle - prev < tm.t_ccd_l:
                bad("tCCD_L", rec, i, tm.t_ccd_l, rec.cycle - prev)
            chan_prev = last_col_chan.get(rec.channel)
            if chan_prev is not None and chan_prev[1] != bg_key:
                if rec.cycle - chan_prev[0] < tm.t_ccd_s:
                    bad("tCCD_S", rec, i, tm.t_ccd_s, rec.cycle - chan_prev[0])
            last_col_bg[bg_key] = rec.cycle
            last_col_chan[rec.channel] = (rec.cycle, bg_key)
        elif rec.op == "PRE":
            prev = last_act.get(bank_key)
            if prev is not None and rec.cycle - prev < tm.t_ras:
                bad("tRAS", rec, i, tm.t_ras, rec.cycle - prev)
            last_pre[bank_key] = rec.cycle
    return violations


# ---------------------------------------------------------------------------
# Trace text form
# ---------------------------------------------------------------------------

class TraceParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def trace_to_text(trace: list[CommandRecord]) -> str:
    return "\n".join(rec.line() for rec in trace) + ("\n" if trace else "")


def parse_trace(text: str) -> list[CommandRecord]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise TraceParseError(lineno, f"expected 8 fields, got {len(parts)}")
        cycle_s, op, *rest = parts
        if op not in ("ACT", "RD", "WR", "PRE"):
            raise TraceParseError(lineno, f"unknown command {op!r}")
        try:
            cycle = int(cycle_s)
            chan, rank, bg, bank, row, col = (int(v) for v in rest)
        except ValueError:
            raise TraceParseError(lineno, "non-integer field") from None
        out.append(CommandRecord(cycle, op, chan, rank, bg, bank, row, col))
    return out


# ---------------------------------------------------------------------------
# Energy ledger (integer centi-picojoule accounting)
# ---------------------------------------------------------------------------

CPJ = 100  # centi-pJ per pJ

RATES_CPJ = {
    "act": 2000 * CPJ,        # per activate
    "ddr_bit": 420,           # 4.2 pJ per read/write bit
    "io_bit": 400,            # 4 pJ per off-chip I/O bit
    "buffer": 50 * CPJ,       # per NMP buffer access
    "adder": 90,              # 0.9 pJ per FP32 add
    "multiplier": 240,        # 2.4 pJ per FP32 multiply
    "comparator": 27,         # 0.27 pJ per compare
}

LEDGER_KINDS = ("act", "ddr_bit", "io_bit", "buffer", "adder", "multiplier",
                "comparator", "refresh", "termination")


@dataclass
class EnergyLedger:
    """Per-category energy counters in exact 0.01 pJ units."""

    counters_cpj: dict = field(default_factory=lambda: {k: 0 for k in LEDGER_KINDS})
    op_counts: dict = field(default_factory=lambda: {k: 0 for k in LEDGER_KINDS})
    overhead_fraction: float = 0.085

    def add(self, kind: str, quantity: int = 1) -> None:
        if kind not in RATES_CPJ:
            raise ConfigError(f"unknown energy event {kind!r}")
        self.counters_cpj[kind] += RATES_CPJ[kind] * quantity
        self.op_counts[kind] += quantity

    def apply_overheads(self) -> None:
        """Refresh and I/O-termination surcharges as a fraction of the
        compute/access subtotal, split evenly between the two counters."""
        sub = sum(self.counters_cpj[k] for k in RATES_CPJ)
        extra = int(round(sub * self.overhead_fraction))
        self.counters_cpj["refresh"] += extra // 2
        self.counters_cpj["termination"] += extra - extra // 2

    @property
    def total_cpj(self) -> int:
        return sum(self.counters_cpj.values())

    @property
    def total_pj(self) -> float:
        return self.total_cpj / CPJ

    def as_pj_dict(self) -> dict:
        d = {k: v / CPJ for k, v in self.counters_cpj.items()}
        d["total"] = self.total_pj
        return d


def account_energy(ledger: EnergyLedger, event: str, quantity: int = 1) -> EnergyLedger:
    """Apply one event to the ledger and return it."""
    ledger.add(event, quantity)
    return ledger
