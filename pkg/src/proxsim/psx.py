"""PSX macro-instructions: representation, validation, unrolling and compression analytics.

A PSX program is a short body of tensor instructions plus up to four fixed-count
loops. Each instruction names the loops it lives in (always a prefix of the
nest, outermost first), a per-loop address stride and per-loop register
strides. The unroller expands the program into the dynamic op stream a TFU
executes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, NamedTuple, Optional

MAX_INSTRUCTIONS = 32
MAX_LOOPS = 4
NUM_DATA_REGS = 48
CODE_REG_BYTES = 8
DEFAULT_LOOP_OVERHEAD = 2


class Opcode(Enum):
    TENSOR_LOAD = "TensorLoad"
    TENSOR_STORE = "TensorStore"
    MAC_VECTOR = "MacVector"
    VEC_ALU = "VecALU"
    META_LOOP_COUNT = "MetaLoopCount"
    META_LOOP_ITERATION = "MetaLoopIteration"
    META_LOOP_DISABLE = "MetaLoopDisable"
    META_BASE_ADDRESS = "MetaBaseAddress"
    META_STRIDE = "MetaStride"
    META_REG_STRIDE = "MetaRegStride"
    LOOP_START = "LoopStart"
    LOOP_END = "LoopEnd"

    @property
    def is_body(self) -> bool:
        return self in BODY_OPCODES

    @property
    def is_memory(self) -> bool:
        return self in (Opcode.TENSOR_LOAD, Opcode.TENSOR_STORE)

    @property
    def is_compute(self) -> bool:
        return self in (Opcode.MAC_VECTOR, Opcode.VEC_ALU)


BODY_OPCODES = frozenset(
    {Opcode.TENSOR_LOAD, Opcode.TENSOR_STORE, Opcode.MAC_VECTOR, Opcode.VEC_ALU}
)


class PsxError(ValueError):
    """Base class for program validation failures."""

    def __init__(self, message: str, index: Optional[int] = None):
        self.index = index
        if index is not None:
            message = f"instruction {index}: {message}"
        super().__init__(message)


class TooManyInstructions(PsxError):
    pass


class TooManyLoops(PsxError):
    pass


class RegisterOverflow(PsxError):
    pass


class DanglingLoopRef(PsxError):
    pass


class MalformedInstruction(PsxError):
    pass


@dataclass(frozen=True)
class LoopNest:
    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))

    def __len__(self) -> int:
        return len(self.counts)

    def iterations(self, level: int) -> int:
        """Total executions of loop ``level``'s body over the whole nest."""
        return math.prod(self.counts[: level + 1])


@dataclass(frozen=True)
class PsxInstr:
    """One TFU code-register entry.

    ``loops`` is the loop mask, stored as the sorted tuple of levels the
    instruction resides in. ``addr_strides``, ``reg_strides`` and each entry of
    ``src_reg_strides`` are aligned with ``loops``. ``fire_on`` holds
    ``(level, iteration)`` predicates set by MetaLoopIteration: the instruction
    only executes when every listed loop is at the listed iteration.
    Stores carry their data register in ``src_regs`` and have no destination.
    """

    opcode: Opcode
    dest_reg: Optional[int] = None
    src_regs: tuple[int, ...] = ()
    base_addr: Optional[int] = None
    loops: tuple[int, ...] = ()
    addr_strides: tuple[int, ...] = ()
    reg_strides: tuple[int, ...] = ()
    src_reg_strides: tuple[tuple[int, ...], ...] = ()
    fire_on: tuple[tuple[int, int], ...] = ()
    access_bytes: int = 64

    @property
    def depth(self) -> int:
        return len(self.loops)


@dataclass(frozen=True)
class PsxProgram:
    instrs: tuple[PsxInstr, ...]
    loops: LoopNest
    psx_tagged: bool = True

    def __post_init__(self):
        object.__setattr__(self, "instrs", tuple(self.instrs))
        if not isinstance(self.loops, LoopNest):
            object.__setattr__(self, "loops", LoopNest(tuple(self.loops)))

    def __len__(self) -> int:
        return len(self.instrs)

    @property
    def encoded_bytes(self) -> int:
        return CODE_REG_BYTES * len(self.instrs)


class DynOp(NamedTuple):
    opcode: Opcode
    dest: Optional[int]
    srcs: tuple[int, ...]
    addr: Optional[int]
    static_index: int


@dataclass
class DynamicTrace:
    ops: list[DynOp] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ops)

    def __iter__(self) -> Iterator[DynOp]:
        return iter(self.ops)


def _src_strides(ins: PsxInstr) -> tuple[tuple[int, ...], ...]:
    if ins.src_reg_strides:
        return ins.src_reg_strides
    return tuple((0,) * len(ins.loops) for _ in ins.src_regs)


def _reg_range(base: int, strides: tuple[int, ...], loops: tuple[int, ...],
               counts: tuple[int, ...], fixed: dict[int, int]) -> tuple[int, int]:
    lo = hi = base
    for lvl, s in zip(loops, strides):
        if lvl in fixed:
            lo += s * fixed[lvl]
            hi += s * fixed[lvl]
            continue
        span = s * (counts[lvl] - 1)
        if span >= 0:
            hi += span
        else:
            lo += span
    return lo, hi


def validate_program(p: PsxProgram, code_reg_capacity: int = MAX_INSTRUCTIONS) -> PsxProgram:
    """Check every encodability limit; return ``p`` unchanged or raise a PsxError."""
    if len(p.instrs) > code_reg_capacity:
        raise TooManyInstructions(
            f"{len(p.instrs)} instructions exceed {code_reg_capacity} code registers",
            index=code_reg_capacity)
    counts = p.loops.counts
    if len(counts) > MAX_LOOPS:
        raise TooManyLoops(f"{len(counts)} loops exceed the {MAX_LOOPS}-loop limit")
    if any(c < 1 for c in counts):
        raise TooManyLoops(f"loop counts must be >= 1, got {counts}")

    prev_depth = 0
    closed_at: set[int] = set()
    for i, ins in enumerate(p.instrs):
        if not ins.opcode.is_body:
            raise MalformedInstruction(f"{ins.opcode.value} cannot appear in a program body", i)
        if any(lvl >= len(counts) or lvl < 0 for lvl in ins.loops):
            raise DanglingLoopRef(f"loop mask {ins.loops} references loops beyond {len(counts)}", i)
        if ins.loops != tuple(range(ins.depth)):
            raise DanglingLoopRef(f"loop mask {ins.loops} is not a nest prefix", i)
        if len(ins.addr_strides) not in (0, ins.depth) or len(ins.reg_strides) not in (0, ins.depth):
            raise MalformedInstruction("stride vectors must match the loop mask", i)
        if any(len(s) != ins.depth for s in ins.src_reg_strides) or (
                ins.src_reg_strides and len(ins.src_reg_strides) != len(ins.src_regs)):
            raise MalformedInstruction("source register strides must match the loop mask", i)
        if len(ins.src_regs) > 2:
            raise MalformedInstruction("at most two source registers", i)
        if ins.opcode.is_memory and ins.base_addr is None:
            raise MalformedInstruction("loads and stores need a base address", i)
        for lvl, it in ins.fire_on:
            if lvl not in ins.loops:
                raise DanglingLoopRef(f"iteration predicate on loop {lvl} outside the mask", i)
            if not 0 <= it < counts[lvl]:
                raise DanglingLoopRef(f"iteration {it} outside loop {lvl} count {counts[lvl]}", i)
        # A loop level may only be entered once: deeper runs must be contiguous.
        d = ins.depth
        if d > prev_depth and any(lvl in closed_at for lvl in range(prev_depth, d)):
            raise MalformedInstruction("loop body is not contiguous in program order", i)
        if d < prev_depth:
            closed_at.update(range(d, prev_depth))
        prev_depth = d

        fixed = dict(ins.fire_on)
        regs = []
        if ins.dest_reg is not None:
            regs.append((ins.dest_reg, ins.reg_strides or (0,) * d))
        regs.extend(zip(ins.src_regs, _src_strides(ins)))
        for base, strides in regs:
            lo, hi = _reg_range(base, strides, ins.loops, counts, fixed)
            if lo < 0 or hi >= NUM_DATA_REGS:
                raise RegisterOverflow(
                    f"register range [{lo}, {hi}] leaves the {NUM_DATA_REGS}-entry file", i)
    return p


def offload_cycles(p: PsxProgram, bus_bytes_per_cycle: int = 8) -> int:
    if bus_bytes_per_cycle <= 0:
        raise ValueError("bus width must be positive")
    return -(-CODE_REG_BYTES * len(p.instrs) // bus_bytes_per_cycle)


# -- unrolling ---------------------------------------------------------------

class _Resolved(NamedTuple):
    opcode: Opcode
    sidx: int
    dest: Optional[int]
    dstr: tuple[int, ...]
    srcs: tuple[int, ...]
    sstr: tuple[tuple[int, ...], ...]
    base: Optional[int]
    astr: tuple[int, ...]
    fire: tuple[tuple[int, int], ...]


def _build_tree(p: PsxProgram):
    """Group the body into nested runs: a node is a list of instrs and child nodes."""
    items = []
    for i, ins in enumerate(p.instrs):
        d = ins.depth
        r = _Resolved(ins.opcode, i, ins.dest_reg, ins.reg_strides or (0,) * d,
                      ins.src_regs, _src_strides(ins), ins.base_addr,
                      ins.addr_strides or (0,) * d, ins.fire_on)
        items.append((d, r))

    def build(level: int, pos: int):
        node = []
        while pos < len(items):
            d, r = items[pos]
            if d < level:
                break
            if d == level:
                node.append(r)
                pos += 1
            else:
                child, pos = build(level + 1, pos)
                node.append(child)
        return node, pos

    tree, _ = build(0, 0)
    return tree


def iter_unroll(p: PsxProgram) -> Iterator[DynOp]:
    """Yield the dynamic op stream lazily, in issue order."""
    counts = p.loops.counts
    tree = _build_tree(p)
    idx: list[int] = []

    def run(node):
        for item in node:
            if isinstance(item, list):
                lvl = len(idx)
                idx.append(0)
                for it in range(counts[lvl]):
                    idx[lvl] = it
                    yield from run(item)
                idx.pop()
                continue
            r = item
            if r.fire and any(idx[l] != it for l, it in r.fire):
                continue
            dest = r.dest
            if dest is not None:
                for k, s in enumerate(r.dstr):
                    dest += idx[k] * s
            srcs = r.srcs
            if srcs:
                srcs = tuple(b + sum(idx[k] * s for k, s in enumerate(st))
                             for b, st in zip(srcs, r.sstr))
            addr = r.base
            if addr is not None:
                for k, s in enumerate(r.astr):
                    addr += idx[k] * s
            yield DynOp(r.opcode, dest, srcs, addr, r.sidx)

    yield from run(tree)


def unroll(p: PsxProgram) -> DynamicTrace:
    return DynamicTrace(list(iter_unroll(p)))


# -- counting ----------------------------------------------------------------

def instr_instances(p: PsxProgram, i: int) -> int:
    """Exact dynamic executions of static instruction ``i``."""
    ins = p.instrs[i]
    fixed = {lvl for lvl, _ in ins.fire_on}
    return math.prod(p.loops.counts[l] for l in ins.loops if l not in fixed)


def unrolled_count(p: PsxProgram) -> int:
    return sum(instr_instances(p, i) for i in range(len(p.instrs)))


def loop_iterations(p: PsxProgram) -> int:
    return sum(p.loops.iterations(l) for l in range(len(p.loops)))


def baseline_dynamic_count(p: PsxProgram, loop_overhead: int = DEFAULT_LOOP_OVERHEAD) -> int:
    """Instructions a conventional core pushes through its pipeline for ``p``."""
    return unrolled_count(p) + loop_overhead * loop_iterations(p)


def metadata_count(p: PsxProgram) -> int:
    """PSX meta instructions needed to populate the code registers.

    Registers are cleared by LoopStart, so only non-zero strides and
    predicates cost an instruction.
    """
    n = len(p.loops)
    for ins in p.instrs:
        if ins.base_addr is not None:
            n += 1
        n += sum(1 for s in ins.addr_strides if s)
        n += sum(1 for s in ins.reg_strides if s)
        n += sum(1 for st in ins.src_reg_strides for s in st if s)
        n += len(ins.fire_on)
    return n


def core_side_count(p: PsxProgram) -> int:
    """Dynamic instructions the core front end sees in PSX mode."""
    return len(p.instrs) + metadata_count(p) + 2


def compression_ratio(p: PsxProgram, loop_overhead: int = DEFAULT_LOOP_OVERHEAD) -> float:
    return baseline_dynamic_count(p, loop_overhead) / core_side_count(p)
