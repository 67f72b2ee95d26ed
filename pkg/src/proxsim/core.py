"""Throughput model of the legacy out-of-order core.

The core runs the fully unrolled kernel plus loop bookkeeping. Each dynamic
op is placed with timestamp list scheduling: it allocates in program order
through the shared front end (bounded by the reorder buffer), then issues at
the earliest cycle where its sources are ready and a unit is free. Loads and
stores enter the hierarchy at L1.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable

from . import psx
from .memhier.config import Level
from .psx import PsxProgram
from .tfu import LOAD, MAC, STORE, compile_program

VECTOR_MACS = 64


@dataclass(frozen=True)
class CoreConfig:
    macs_per_cycle: int = 128
    alloc_width: int = 8
    rob_entries: int = 320
    mac_latency: int = 4
    valu_latency: int = 1
    loop_overhead: int = psx.DEFAULT_LOOP_OVERHEAD

    def __post_init__(self):
        if self.macs_per_cycle < VECTOR_MACS or self.macs_per_cycle % VECTOR_MACS:
            raise ValueError("core MAC width must be a positive multiple of 64")
        if self.alloc_width < 1 or self.rob_entries < 1:
            raise ValueError("alloc width and ROB size must be positive")

    @property
    def mac_units(self) -> int:
        return self.macs_per_cycle // VECTOR_MACS


class Frontend:
    """In-order allocation slots of one physical core, shared by its SMT threads."""

    def __init__(self, width: int):
        self.width = width
        self.cursor = 0
        self.used = 0
        self.ops = 0

    def claim(self, t: int, n: int = 1) -> int:
        """Allocate ``n`` slots no earlier than ``t``; returns the cycle of the last one."""
        if t > self.cursor:
            self.cursor, self.used = t, 0
        self.used += n
        self.ops += n
        if self.used > self.width:
            adv = (self.used - 1) // self.width
            self.cursor += adv
            self.used -= adv * self.width
        return self.cursor


@dataclass
class CoreStats:
    ops: int = 0
    bookkeeping_ops: int = 0
    macs: int = 0
    loads: int = 0
    stores: int = 0


class _Units:
    """Per-cycle occupancy of a pool of identical pipelined units."""

    def __init__(self, count: int):
        self.count = count
        self.used: dict[int, int] = {}

    def reserve(self, t: int) -> int:
        used = self.used
        while used.get(t, 0) >= self.count:
            t += 1
        used[t] = used.get(t, 0) + 1
        return t

    def prune(self, before: int) -> None:
        self.used = {c: n for c, n in self.used.items() if c >= before}


_overhead_cache: dict[int, float] = {}


def _bookkeeping_ratio(p: PsxProgram, loop_overhead: int) -> float:
    n = psx.unrolled_count(p)
    return (psx.baseline_dynamic_count(p, loop_overhead) - n) / n if n else 0.0


class LegacyThread:
    """One SMT thread executing unrolled programs on the core's own units."""

    PRUNE_EVERY = 4096

    def __init__(self, cfg: CoreConfig, frontend: Frontend, memory,
                 programs: Iterable[PsxProgram] = (), name: str = "core"):
        self.cfg = cfg
        self.fe = frontend
        self.mem = memory
        self.name = name
        self.units = _Units(cfg.mac_units)
        self.rob: deque[int] = deque()
        self.ready: dict[int, int] = {}
        self.stats = CoreStats()
        self.queue: deque[PsxProgram] = deque(programs)
        self.last_retire = 0
        self.alloc_at = 0
        self._prog = None
        self._pos = 0
        self._frac = 0.0
        self._extra = 0.0
        self._since_prune = 0

    def add(self, programs: Iterable[PsxProgram]) -> None:
        self.queue.extend(programs)

    @property
    def finished(self) -> bool:
        return self._prog is None and not self.queue

    @property
    def done_at(self) -> int:
        return self.last_retire

    def _next_program(self) -> bool:
        if not self.queue:
            self._prog = None
            return False
        p = self.queue.popleft()
        c = compile_program(p)
        self._prog = (c, [i.base_addr or 0 for i in p.instrs])
        self._pos = 0
        key = id(c)
        ratio = _overhead_cache.get(key)
        if ratio is None:
            ratio = _overhead_cache[key] = _bookkeeping_ratio(p, self.cfg.loop_overhead)
        self._extra = ratio
        return True

    def step(self, t: int) -> None:
        """Schedule every op whose allocation falls at or before ``t``."""
        while True:
            if self._prog is None and not self._next_program():
                return
            if self.alloc_at > t:
                return
            self._schedule_one()

    def next_event_cycle(self, t: int) -> float:
        if self.finished:
            return math.inf
        return max(t + 1, self.alloc_at)

    def _schedule_one(self) -> None:
        cfg = self.cfg
        c, bases = self._prog
        i = self._pos
        # bookkeeping ops are spread evenly over the body ops
        self._frac += self._extra
        extra = int(self._frac)
        self._frac -= extra
        self.stats.bookkeeping_ops += extra
        floor = self.rob[0] if len(self.rob) >= cfg.rob_entries else 0
        a = self.fe.claim(floor, 1 + extra)
        ready = self.ready
        kind = c.kinds[i]
        t0 = a + 1
        if kind == LOAD:
            done = self.mem.load(Level.L1, bases[c.sidx[i]] + c.rel[i], t0, c.nbytes[i])
            ready[c.dests[i]] = done
            self.stats.loads += 1
        elif kind == STORE:
            t0 = max(t0, ready.get(c.srcs[i][0], 0))
            done = self.mem.store(Level.L1, bases[c.sidx[i]] + c.rel[i], t0, c.nbytes[i])
            self.stats.stores += 1
        else:
            dest = c.dests[i]
            for s in c.srcs[i]:
                r = ready.get(s, 0)
                if r > t0:
                    t0 = r
            r = ready.get(dest, 0)
            if r > t0:
                t0 = r
            t0 = self.units.reserve(t0)
            if kind == MAC:
                done = t0 + cfg.mac_latency
                self.stats.macs += VECTOR_MACS
            else:
                done = t0 + cfg.valu_latency
            ready[dest] = done
        self.stats.ops += 1
        retire = max(self.last_retire, done)
        self.last_retire = retire
        self.rob.append(retire)
        if len(self.rob) > cfg.rob_entries:
            self.rob.popleft()
        self.alloc_at = a
        self._pos = i + 1
        if self._pos >= len(c):
            self._prog = None
        self._since_prune += 1
        if self._since_prune >= self.PRUNE_EVERY:
            self._since_prune = 0
            self.units.prune(a - 1024)


def run_programs(cfg: CoreConfig, memory, programs: Iterable[PsxProgram],
                 start: int = 0) -> LegacyThread:
    """Run programs on a lone legacy thread to completion (convenience for tests)."""
    th = LegacyThread(cfg, Frontend(cfg.alloc_width), memory, programs)
    th.fe.cursor = start
    t = start
    while not th.finished:
        th.step(t)
        t = th.next_event_cycle(t)
        if t == math.inf:
            break
    return th
