"""Tensor Functional Unit: offload, unrolling scheduler, issue queues, scoreboard, TC.

The unrolling scheduler walks the program twice in lockstep, once for compute
ops and once for loads/stores, feeding two 8-entry in-order queues. Each
queue issues from its head. A load may run ahead of older compute as long as
no older unissued compute op still reads or writes its destination register;
loads and stores stay in program order with respect to each other.
"""

from __future__ import annotations

import math
from collections import OrderedDict, deque
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

from . import psx
from .memhier.config import Level
from .psx import Opcode, PsxProgram

LOAD, STORE, MAC, VALU = 0, 1, 2, 3
_KIND = {Opcode.TENSOR_LOAD: LOAD, Opcode.TENSOR_STORE: STORE, Opcode.MAC_VECTOR: MAC,
         Opcode.VEC_ALU: VALU}
PAGE_BYTES = 4096
IDEAL_MEMORY_LATENCY = 5


class TfuBusy(RuntimeError):
    pass


class ProgramTooLarge(ValueError):
    pass


class RestoreWhileBusy(RuntimeError):
    pass


@dataclass(frozen=True)
class TfuConfig:
    attached_level: Level = Level.L2
    macs_per_cycle: int = 64
    code_reg_capacity: int = psx.MAX_INSTRUCTIONS
    data_regs: int = psx.NUM_DATA_REGS
    issue_queue_depth: int = 8
    tc_entries: int = 6
    tc_miss_cycles: int = 30
    refill_per_lane: int = 2
    mac_latency: int = 4
    valu_latency: int = 1
    bus_bytes: int = 8

    def __post_init__(self):
        if isinstance(self.attached_level, str):
            object.__setattr__(self, "attached_level", Level.parse(self.attached_level))
        if self.macs_per_cycle not in (64, 128, 256):
            raise ValueError(f"macs_per_cycle must be 64, 128 or 256, got {self.macs_per_cycle}")

    @property
    def lanes(self) -> int:
        return self.macs_per_cycle // 64


class TranslationCache:
    """Tiny LRU cache of virtual-to-physical page translations (identity mapped)."""

    def __init__(self, entries: int = 6, miss_cycles: int = 30):
        self.capacity = entries
        self.miss_cycles = miss_cycles
        self.entries: OrderedDict[int, int] = OrderedDict()
        self.pending: dict[int, int] = {}   # page -> cycle its walk completes
        self.lookups = 0
        self.hits = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def hit_rate(self) -> float:
        return self.hits / self.lookups if self.lookups else 0.0

    def invalidate_all(self) -> None:
        self.entries.clear()
        self.pending.clear()


class Lookup(NamedTuple):
    hit: bool
    physical_page: int
    latency: int


def tc_lookup(tc: TranslationCache, vaddr: int, t: Optional[int] = None) -> Lookup:
    """Translate ``vaddr``. With a cycle ``t``, a lookup that finds a walk still in
    flight for its page waits for that walk instead of starting another."""
    page = vaddr // PAGE_BYTES
    tc.lookups += 1
    if page in tc.entries:
        tc.hits += 1
        tc.entries.move_to_end(page)
        ready = tc.pending.get(page)
        if t is not None and ready is not None and ready > t + 1:
            return Lookup(True, page, ready - t)
        return Lookup(True, tc.entries[page], 1)
    if len(tc.entries) >= tc.capacity:
        old, _ = tc.entries.popitem(last=False)
        tc.pending.pop(old, None)
    tc.entries[page] = page
    if t is not None:
        tc.pending[page] = t + tc.miss_cycles
        if len(tc.pending) > 4 * tc.capacity:
            tc.pending = {pg: r for pg, r in tc.pending.items() if pg in tc.entries}
    return Lookup(False, page, tc.miss_cycles)


def tc_invalidate_all(tfus) -> None:
    """TLB shootdown: empty every TFU's translation cache in the same cycle."""
    for t in tfus:
        (t.tc if isinstance(t, TfuState) else t).invalidate_all()


# -- compiled programs ---------------------------------------------------------

@dataclass
class Compiled:
    kinds: list[int]
    dests: list[Optional[int]]
    srcs: list[tuple[int, ...]]
    rel: list[int]
    sidx: list[int]
    nbytes: list[int]
    compute: list[int]
    memory: list[int]
    dep_issue: list[int]
    dep_done: list[tuple[int, ...]]
    opcodes: list[Opcode]

    def __len__(self):
        return len(self.kinds)


_compile_cache: dict = {}


def _shape_key(p: PsxProgram):
    return (tuple(replace(i, base_addr=0 if i.base_addr is not None else None)
                  for i in p.instrs), p.loops)


def compile_program(p: PsxProgram) -> Compiled:
    """Unroll once with zero bases and precompute register hazards."""
    key = _shape_key(p)
    hit = _compile_cache.get(key)
    if hit is not None:
        return hit
    shape = PsxProgram(key[0], key[1])
    kinds, dests, srcs, rel, sidx, nbytes, opcodes = [], [], [], [], [], [], []
    compute, memory, dep_issue, dep_done = [], [], [], []
    last_writer: dict[int, int] = {}
    last_reader: dict[int, int] = {}      # compute readers
    last_mem = last_compute = -1
    for i, op in enumerate(psx.iter_unroll(shape)):
        k = _KIND[op.opcode]
        kinds.append(k)
        opcodes.append(op.opcode)
        dests.append(op.dest)
        srcs.append(op.srcs)
        rel.append(op.addr or 0)
        sidx.append(op.static_index)
        nbytes.append(shape.instrs[op.static_index].access_bytes)
        if k == LOAD:
            # may pass older compute unless it still reads or writes the register
            memory.append(i)
            dep_issue.append(last_reader.get(op.dest, -1))
            w = last_writer.get(op.dest)
            dep_done.append(() if w is None else (w,))
            last_writer[op.dest] = i
            last_mem = i
        elif k == STORE:
            memory.append(i)
            dep_issue.append(last_compute)
            w = last_writer.get(op.srcs[0])
            dep_done.append(() if w is None else (w,))
            last_mem = i
        else:
            compute.append(i)
            need = {last_writer[s] for s in op.srcs if s in last_writer}
            if op.dest in last_writer:
                need.add(last_writer[op.dest])
            dep_issue.append(last_mem)
            dep_done.append(tuple(sorted(need)))
            for s in op.srcs:
                last_reader[s] = i
            last_writer[op.dest] = i
            last_compute = i
    c = Compiled(kinds, dests, srcs, rel, sidx, nbytes, compute, memory, dep_issue, dep_done,
                 opcodes)
    if len(_compile_cache) > 4096:
        _compile_cache.clear()
    _compile_cache[key] = c
    return c


# -- TFU state -----------------------------------------------------------------

class RetiredOp(NamedTuple):
    cycle: int
    seq: int
    op: psx.DynOp


@dataclass(frozen=True)
class Acceptance:
    start_cycle: int
    first_issue_cycle: int


@dataclass(frozen=True)
class Snapshot:
    program: Optional[PsxProgram]
    compute_issued: int = 0
    memory_issued: int = 0
    data_regs: tuple[int, ...] = ()


@dataclass
class TfuStats:
    programs: int = 0
    macs: int = 0
    ops: int = 0
    busy_cycles: int = 0
    idle_cycles: int = 0
    stall_cycles: int = 0
    unrolled_ops: int = 0


class TfuState:
    def __init__(self, config: TfuConfig, memory=None, name: str = ""):
        self.cfg = config
        self.mem = memory
        self.name = name or f"TFU@{config.attached_level.value}"
        self.tc = TranslationCache(config.tc_entries, config.tc_miss_cycles)
        self.program: Optional[PsxProgram] = None
        self.busy = False
        self.stats = TfuStats()
        self.trace: list[RetiredOp] = []
        self.record_trace = False
        self.regs = [-1] * config.data_regs  # seq of last writer, per data register
        self.load_drain = 0  # completion of the previous program's last load
        self._clear()

    def _clear(self):
        self.c: Optional[Compiled] = None
        self.bases: list[int] = []
        self.cq: deque[int] = deque()
        self.mq: deque[int] = deque()
        self.cnext = 0
        self.mnext = 0
        self.cissued = 0
        self.missued = 0
        self.issued: list[int] = []
        self.done: list[int] = []
        self.first_issue = 0
        self.finish_cycle = 0

    # -- offload -------------------------------------------------------------

    @property
    def idle(self) -> bool:
        return not self.busy

    def accept_offload(self, p: PsxProgram, cycle: int = 0) -> Acceptance:
        if self.busy:
            raise TfuBusy(f"{self.name} is still executing a program")
        if len(p.instrs) > self.cfg.code_reg_capacity:
            raise ProgramTooLarge(
                f"{len(p.instrs)} instructions exceed {self.cfg.code_reg_capacity} code registers")
        psx.validate_program(p, self.cfg.code_reg_capacity)
        # loads still in flight from the previous program may target registers
        # the new one reuses, so issue waits for them; stores drain in background
        first = max(cycle + psx.offload_cycles(p, self.cfg.bus_bytes), self.load_drain)
        return self._install(p, first, cycle)

    def _install(self, p: PsxProgram, first_issue: int, cycle: int, skip_c: int = 0,
                 skip_m: int = 0) -> Acceptance:
        prev_finish = self.finish_cycle
        self._clear()
        self.program = p
        self.busy = True
        c = self.c = compile_program(p)
        self.bases = [i.base_addr or 0 for i in p.instrs]
        n = len(c)
        self.issued = [-1] * n
        self.done = [-1] * n
        for i in c.compute[:skip_c]:
            self.issued[i] = self.done[i] = first_issue - 1
        for i in c.memory[:skip_m]:
            self.issued[i] = self.done[i] = first_issue - 1
        self.cnext = self.cissued = skip_c
        self.mnext = self.missued = skip_m
        self.first_issue = first_issue
        self.finish_cycle = max(prev_finish, first_issue)
        self.stats.programs += 1
        self.stats.unrolled_ops += n - skip_c - skip_m
        self._refill(self.cfg.issue_queue_depth)
        return Acceptance(cycle, first_issue)

    # -- cycle step ------------------------------------------------------------

    def _dyn(self, i: int) -> psx.DynOp:
        c = self.c
        addr = None
        if c.kinds[i] in (LOAD, STORE):
            addr = self.bases[c.sidx[i]] + c.rel[i]
        return psx.DynOp(c.opcodes[i], c.dests[i], c.srcs[i], addr, c.sidx[i])

    def _retire(self, i: int, t: int) -> None:
        if self.record_trace:
            self.trace.append(RetiredOp(t, i, self._dyn(i)))

    def step(self, t: int) -> int:
        """Advance one cycle; returns the number of ops issued."""
        if not self.busy:
            self.stats.idle_cycles += 1
            return 0
        if t < self.first_issue:
            return 0
        c = self.c
        issued, done = self.issued, self.done
        kinds = c.kinds
        count = 0
        # compute queue: in order, up to one op per 64-MAC lane
        cq = self.cq
        lanes = self.cfg.lanes
        while cq and lanes:
            i = cq[0]
            di = c.dep_issue[i]
            if di >= 0 and (issued[di] < 0 or issued[di] > t):
                break
            ready = True
            for d in c.dep_done[i]:
                if done[d] < 0 or done[d] > t:
                    ready = False
                    break
            if not ready:
                break
            cq.popleft()
            issued[i] = t
            if kinds[i] == MAC:
                done[i] = t + self.cfg.mac_latency
                self.stats.macs += 64
            else:
                done[i] = t + self.cfg.valu_latency
            if done[i] > self.finish_cycle:
                self.finish_cycle = done[i]
            self.cissued += 1
            lanes -= 1
            count += 1
            self._retire(i, t)
        # load/store queue: in order, bounded by free ports at the attached level
        mq = self.mq
        if mq:
            level = self.cfg.attached_level
            mem = self.mem
            while mq:
                i = mq[0]
                store = kinds[i] == STORE
                if mem is not None and not mem.can_issue(level, store, t):
                    break
                di = c.dep_issue[i]
                if di >= 0 and (issued[di] < 0 or issued[di] > t):
                    break
                ready = True
                for d in c.dep_done[i]:
                    if done[d] < 0 or done[d] > t:
                        ready = False
                        break
                if not ready:
                    break
                addr = self.bases[c.sidx[i]] + c.rel[i]
                lk = tc_lookup(self.tc, addr, t)
                mq.popleft()
                issued[i] = t
                if mem is None:
                    done[i] = t + lk.latency + IDEAL_MEMORY_LATENCY
                else:
                    done[i] = mem.access(level, addr, t + lk.latency, store, c.nbytes[i])
                if done[i] > self.finish_cycle:
                    self.finish_cycle = done[i]
                self.missued += 1
                count += 1
                self._retire(i, t)
        self._refill(self.cfg.refill_per_lane * self.cfg.lanes)
        comp, memo = c.compute, c.memory
        self.stats.ops += count
        if count:
            self.stats.busy_cycles += 1
        else:
            self.stats.stall_cycles += 1
        if not cq and not mq and self.cnext == len(comp) and self.mnext == len(memo):
            self._finish()
        return count

    def _refill(self, rate: int) -> None:
        """The unrolling scheduler appends up to ``rate`` ops to each queue."""
        c = self.c
        depth = self.cfg.issue_queue_depth
        for q, ops, attr in ((self.cq, c.compute, "cnext"), (self.mq, c.memory, "mnext")):
            nxt = getattr(self, attr)
            k = 0
            while len(q) < depth and nxt < len(ops) and k < rate:
                q.append(ops[nxt])
                nxt += 1
                k += 1
            setattr(self, attr, nxt)

    def _finish(self) -> None:
        c = self.c
        for i in range(len(c)):
            if c.kinds[i] != STORE and c.dests[i] is not None:
                self.regs[c.dests[i]] = i
        self.load_drain = max((self.done[i] for i in c.memory if c.kinds[i] == LOAD),
                              default=0)
        self.busy = False
        self.program = None

    @property
    def drained_at(self) -> int:
        """Cycle at which the last issued op completes."""
        return self.finish_cycle

    def next_event_cycle(self, t: int) -> int:
        """Earliest cycle after ``t`` at which this TFU could make progress."""
        if not self.busy:
            return math.inf
        if t + 1 < self.first_issue:
            return self.first_issue
        cand = []
        c, issued, done = self.c, self.issued, self.done
        for q in (self.cq, self.mq):
            if not q:
                continue
            i = q[0]
            di = c.dep_issue[i]
            if di >= 0 and issued[di] < 0:
                continue
            ts = [t + 1]
            for d in c.dep_done[i]:
                if done[d] < 0:
                    ts = None
                    break
                ts.append(done[d])
            if ts is not None:
                cand.append(max(ts))
        if (self.cnext < len(c.compute) and len(self.cq) < self.cfg.issue_queue_depth) or (
                self.mnext < len(c.memory) and len(self.mq) < self.cfg.issue_queue_depth):
            cand.append(t + 1)
        return max(t + 1, min(cand)) if cand else t + 1

    # -- context switch ----------------------------------------------------------

    def save_context(self) -> Snapshot:
        """Stop at a retire boundary; in-flight ops complete, unissued ones are kept."""
        if not self.busy:
            return Snapshot(None, data_regs=tuple(self.regs))
        snap = Snapshot(self.program, self.cissued, self.missued, tuple(self.regs))
        self.busy = False
        self.program = None
        self._clear()
        return snap

    def restore_context(self, snap: Snapshot, cycle: int = 0) -> Optional[Acceptance]:
        if self.busy:
            raise RestoreWhileBusy(f"{self.name} is busy")
        self.tc.invalidate_all()
        self.regs = list(snap.data_regs) or [-1] * self.cfg.data_regs
        if snap.program is None:
            return None
        p = snap.program
        self.stats.programs -= 1
        return self._install(p, cycle + psx.offload_cycles(p, self.cfg.bus_bytes), cycle,
                             snap.compute_issued, snap.memory_issued)

    def run_to_completion(self, start: int = 0, limit: int = 10**9) -> int:
        """Step until the resident program drains; returns the drain cycle."""
        t = start
        while self.busy:
            self.step(t)
            if not self.busy:
                break
            t = self.next_event_cycle(t)
            if t > limit:
                raise RuntimeError(f"{self.name} did not finish by cycle {limit}")
        return max(t, self.finish_cycle)
