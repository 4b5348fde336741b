"""Accelerator instruction format: bit-exact encode/decode/route.

An instruction is 83 bits, delivered as 11 bytes with the top 5 bits
zero-padded. Field order, MSB first:

    mode_se   1 bit   0 = plain DRAM mode, 1 = NMP mode
    nmp_se    2 bits  executing tier: 0 rank, 1 bank-group, 2 bank, 3 reserved
    op_code   4 bits  see Opcode
    ddr_cmd   3 bits  DRAM command flags, bit2 ACT, bit1 RD/WR column, bit0 PRE
    daddr    32 bits  target address in the NMP logical space
    vsize     3 bits  burst count selector (vsize+1 consecutive table entries)
    w_value  32 bits  IEEE-754 single scalar weight (raw bit pattern)
    psum_tag  4 bits  partial-sum stream id; only equal tags may merge
    reserved  2 bits  always zero

Stated field widths sum to 81; two reserved bits complete the 83-bit
total.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

TOTAL_BITS = 83
WORD_BYTES = 11

FIELDS = (
    ("mode_se", 1),
    ("nmp_se", 2),
    ("op_code", 4),
    ("ddr_cmd", 3),
    ("daddr", 32),
    ("vsize", 3),
    ("w_value", 32),
    ("psum_tag", 4),
    ("reserved", 2),
)

assert sum(w for _, w in FIELDS) == TOTAL_BITS

# ddr_cmd flag bits
DDR_ACT = 0b100
DDR_COL = 0b010
DDR_PRE = 0b001

MODE_DRAM = 0
MODE_NMP = 1

TIER_RANK = 0
TIER_BANKGROUP = 1
TIER_BANK = 2

_TIER_NAMES = {TIER_RANK: "rank", TIER_BANKGROUP: "bankgroup", TIER_BANK: "bank"}

CANONICAL_ONE = 0x3F800000  # 1.0f


class Opcode(IntEnum):
    NMP_SUM = 0x0
    NMP_MEAN = 0x1
    NMP_WSUM = 0x2
    NMP_INTERP = 0x3
    NMP_INDEX = 0x4
    NMP_CONCAT = 0x5
    NMP_WRITEBACK = 0x6


VALID_OPCODES = {int(op) for op in Opcode}

# opcodes that consume the scalar weight field; all others must carry
# the canonical 1.0 encoding so golden vectors stay stable
WEIGHTED_OPCODES = {int(Opcode.NMP_WSUM)}


class EncodingError(ValueError):
    """A field is out of range or violates a format rule."""


class DecodeError(ValueError):
    """The byte word cannot be decoded (strict mode)."""


class RoutingError(ValueError):
    """The tier selector carries the reserved code."""


def float_bits(value: float) -> int:
    """IEEE-754 single bit pattern of a Python float."""
    return struct.unpack(">I", struct.pack(">f", value))[0]


def bits_float(bits: int) -> float:
    return struct.unpack(">f", struct.pack(">I", bits))[0]


@dataclass(frozen=True)
class NmpInstruction:
    mode_se: int = MODE_NMP
    nmp_se: int = TIER_RANK
    op_code: int = int(Opcode.NMP_SUM)
    ddr_cmd: int = 0
    daddr: int = 0
    vsize: int = 0
    w_value: int = CANONICAL_ONE  # raw IEEE-754 single bits
    psum_tag: int = 0
    reserved: int = 0

    @property
    def weight(self) -> float:
        return bits_float(self.w_value)

    def fields(self) -> dict[str, int]:
        return {name: getattr(self, name) for name, _ in FIELDS}


def encode(instr: NmpInstruction) -> bytes:
    """Pack an instruction into 11 bytes (top 5 bits zero)."""
    word = 0
    for name, width in FIELDS:
        value = getattr(instr, name)
        if not isinstance(value, int) or value < 0 or value >= (1 << width):
            raise EncodingError(f"field {name}={value!r} does not fit in {width} bits")
        word = (word << width) | value
    if instr.reserved != 0:
        raise EncodingError("reserved bits must be zero")
    if instr.op_code not in VALID_OPCODES:
        raise EncodingError(f"op_code {instr.op_code:#x} not in opcode table")
    return word.to_bytes(WORD_BYTES, "big")


def validate_canonical(instr: NmpInstruction) -> None:
    """Emitter-side rule: non-weighted opcodes carry the canonical 1.0 weight."""
    if instr.op_code not in WEIGHTED_OPCODES and instr.w_value != CANONICAL_ONE:
        raise EncodingError("non-weighted opcodes must carry the canonical 1.0 weight")


def decode(word: bytes, strict: bool = True) -> NmpInstruction:
    """Unpack 11 bytes into an instruction; inverse of encode."""
    if len(word) != WORD_BYTES:
        raise DecodeError(f"expected {WORD_BYTES} bytes, got {len(word)}")
    value = int.from_bytes(word, "big")
    if strict and value >> TOTAL_BITS:
        raise DecodeError("nonzero padding bits")
    out = {}
    for name, width in reversed(FIELDS):
        out[name] = value & ((1 << width) - 1)
        value >>= width
    if strict:
        if out["reserved"] != 0:
            raise DecodeError("nonzero reserved bits")
        if out["op_code"] not in VALID_OPCODES:
            raise DecodeError(f"unknown opcode {out['op_code']:#x}")
    return NmpInstruction(**out)


def route(instr: NmpInstruction) -> str:
    """Executing tier of an instruction: 'rank', 'bankgroup', or 'bank'."""
    try:
        return _TIER_NAMES[instr.nmp_se]
    except KeyError:
        raise RoutingError(f"reserved tier code {instr.nmp_se}") from None


def annotate(instr: NmpInstruction) -> str:
    op = Opcode(instr.op_code).name if instr.op_code in VALID_OPCODES else f"0x{instr.op_code:x}"
    return (f"mode_se={instr.mode_se} nmp_se={instr.nmp_se} op={op} "
            f"ddr_cmd={instr.ddr_cmd:03b} daddr=0x{instr.daddr:08x} "
            f"vsize={instr.vsize} w=0x{instr.w_value:08x} tag={instr.psum_tag}")


def golden_vectors() -> list[NmpInstruction]:
    """Fixed instruction set used for conformance files across runs."""
    return [
        NmpInstruction(),
        NmpInstruction(mode_se=MODE_NMP, nmp_se=TIER_BANK, op_code=int(Opcode.NMP_WSUM),
                       ddr_cmd=DDR_COL, daddr=0x00000040, vsize=1,
                       w_value=CANONICAL_ONE, psum_tag=3),
        NmpInstruction(mode_se=MODE_NMP, nmp_se=TIER_BANK, op_code=int(Opcode.NMP_INTERP),
                       ddr_cmd=DDR_ACT | DDR_COL, daddr=0xDEADBEEF, vsize=7,
                       psum_tag=0xF),
        NmpInstruction(mode_se=MODE_DRAM, nmp_se=TIER_RANK, op_code=int(Opcode.NMP_WRITEBACK),
                       ddr_cmd=DDR_PRE, daddr=0x12345678, vsize=0, psum_tag=5),
        NmpInstruction(mode_se=MODE_NMP, nmp_se=TIER_BANKGROUP, op_code=int(Opcode.NMP_SUM),
                       ddr_cmd=0, daddr=0xFFFFFFFF, vsize=2, psum_tag=9),
        NmpInstruction(mode_se=MODE_NMP, nmp_se=TIER_BANK, op_code=int(Opcode.NMP_WSUM),
                       ddr_cmd=DDR_ACT | DDR_COL | DDR_PRE, daddr=0x0,
                       vsize=4, w_value=float_bits(-2.5), psum_tag=1),
        NmpInstruction(mode_se=MODE_NMP, nmp_se=TIER_RANK, op_code=int(Opcode.NMP_CONCAT),
                       daddr=0x80000001, psum_tag=8),
        NmpInstruction(mode_se=MODE_NMP, nmp_se=TIER_BANKGROUP, op_code=int(Opcode.NMP_MEAN),
                       ddr_cmd=DDR_COL, daddr=0x00C0FFEE, vsize=3, psum_tag=2),
    ]


def golden_file_text() -> str:
    lines = ["# hex word (11 bytes)      decoded fields"]
    for instr in golden_vectors():
        lines.append(f"{encode(instr).hex()}  {annotate(instr)}")
    return "\n".join(lines) + "\n"
