"""Timed three-level hierarchy as seen by one core and its near-cache TFUs.

All cores run the same blocked work on disjoint output tiles, so one
representative core is simulated. Its L1 and L2 are private; the L3 is the
full set of slices (shared tensors live anywhere in it), but the core only
gets one slice's worth of port bandwidth, its fair share of the ring. The
near-L3 TFU owns the partitioned ways of the local slice.

Timing is reservation based: every 64B transfer claims a port slot in some
cycle, misses hold an MSHR until their fill lands, and a request to a line
whose fill is still in flight merges with it.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Optional, TextIO

from .cache import SetAssocCache
from .coherence import ActionKind, AgentKind, CoherenceDirectory, core, near_l3
from .config import DRAM_LATENCY, LINE_BYTES, CacheConfig, Level, default_l1, default_l2, default_l3
from .counters import MovementCounters

CORE_ID = 0
LOCAL_SLICE = 0


class BandwidthViolation(AssertionError):
    pass


class PortSaturated(RuntimeError):
    """A port had no free slot in the requested cycle (retried, never surfaced)."""


class MshrFull(RuntimeError):
    """All MSHRs were busy (the request waits, never surfaced)."""


class PortTable:
    """Per-cycle slot usage of a group of identical 64B ports."""

    PRUNE_AT = 1 << 17

    def __init__(self, name: str, ports: int):
        self.name = name
        self.ports = ports
        self.used: dict[int, int] = {}
        self.transfers = 0
        self.busy_cycles = 0
        self.stalls = 0
        self.horizon = 0

    def free(self, t: int) -> bool:
        return self.used.get(t, 0) < self.ports

    def free_slots(self, t: int) -> int:
        return self.ports - self.used.get(t, 0)

    def reserve(self, t: int) -> int:
        used = self.used
        n = used.get(t, 0)
        while n >= self.ports:
            self.stalls += 1
            t += 1
            n = used.get(t, 0)
        n += 1
        if n * LINE_BYTES > self.ports * LINE_BYTES:
            raise BandwidthViolation(f"{self.name}: {n * LINE_BYTES}B in cycle {t}")
        if n == 1:
            self.busy_cycles += 1
        used[t] = n
        self.transfers += 1
        if t > self.horizon:
            self.horizon = t
        if len(used) > self.PRUNE_AT:
            self.prune(self.horizon - (self.PRUNE_AT >> 1))
        return t

    def prune(self, before: int) -> None:
        self.audit()
        self.used = {c: n for c, n in self.used.items() if c >= before}

    def audit(self) -> None:
        """Bytes moved through the port group never exceed ports x 64B in a cycle."""
        cap = self.ports * LINE_BYTES
        for c, n in self.used.items():
            if n * LINE_BYTES > cap:
                raise BandwidthViolation(f"{self.name}: {n * LINE_BYTES}B in cycle {c} > {cap}B")


class Mshr:
    def __init__(self, name: str, entries: int):
        self.name = name
        self.entries = entries
        self.heap: list[int] = []
        self.inflight: dict[int, int] = {}
        self.stall_cycles = 0

    def pending(self, line: int, t: int) -> Optional[int]:
        r = self.inflight.get(line)
        return r if r is not None and r > t else None

    def acquire(self, t: int) -> int:
        heap = self.heap
        while heap and heap[0] <= t:
            heapq.heappop(heap)
        if len(heap) >= self.entries:
            free_at = heapq.heappop(heap)
            self.stall_cycles += free_at - t
            t = free_at
        return t

    def hold(self, line: int, ready: int) -> None:
        heapq.heappush(self.heap, ready)
        self.inflight[line] = ready
        if len(self.inflight) > 64 * self.entries:
            low = self.heap[0] if self.heap else ready
            self.inflight = {l: r for l, r in self.inflight.items() if r > low}


@dataclass
class HierarchyStats:
    snoops: int = 0
    dram_reads: int = 0


class Hierarchy:
    def __init__(self, l1: CacheConfig | None = None, l2: CacheConfig | None = None,
                 l3: CacheConfig | None = None, trace: Optional[TextIO] = None,
                 check_coherence: bool = True):
        self.l1cfg = l1 = l1 or default_l1()
        self.l2cfg = l2 = l2 or default_l2()
        self.l3cfg = l3 = l3 or default_l3()
        self.l1 = SetAssocCache(l1.sets, l1.ways, l1.replacement, name="L1")
        self.l2 = SetAssocCache(l2.sets, l2.ways, l2.replacement, name="L2")
        shared_ways = l3.ways - l3.partitioned_ways_for_tfu
        self.l3 = [SetAssocCache(l3.sets, shared_ways, l3.replacement, index_div=l3.slices,
                                 name=f"L3.{s}") for s in range(l3.slices)]
        self.part = None
        if l3.partitioned_ways_for_tfu:
            self.part = SetAssocCache(l3.sets, l3.partitioned_ways_for_tfu, l3.replacement,
                                      name="L3P")
        self.l1r = PortTable("L1.read", l1.read_ports)
        self.l1w = PortTable("L1.write", l1.write_ports)
        self.l2p = PortTable("L2", l2.write_ports if l2.shares_ports else l2.read_ports)
        self.l3p = PortTable("L3", l3.shared_rw_ports_64B or l3.read_ports)
        self.m1 = Mshr("L1", l1.mshr_entries)
        self.m2 = Mshr("L2", l2.mshr_entries)
        self.m3 = Mshr("L3", l3.mshr_entries)
        self.c = MovementCounters()
        self.stats = HierarchyStats()
        self.dir = CoherenceDirectory(cores=1, slices=l3.slices)
        self.check_coherence = check_coherence
        self.trace = trace

    # -- helpers -------------------------------------------------------------

    def ports(self) -> list[PortTable]:
        return [self.l1r, self.l1w, self.l2p, self.l3p]

    def audit(self) -> None:
        for p in self.ports():
            p.audit()

    def _log(self, t: int, iface: str, kind: str, line: int) -> None:
        if self.trace is not None:
            self.trace.write(f"{t} {iface} {kind} {line * LINE_BYTES:#x}\n")

    def _fill(self, iface: str, t: int, line: int) -> None:
        self.c.fill(iface)
        self._log(t, iface, "fill", line)

    def _evict(self, iface: str, t: int, line: int) -> None:
        self.c.evict(iface)
        self._log(t, iface, "evict", line)

    def _home(self, line: int) -> SetAssocCache:
        return self.l3[line % len(self.l3)]

    def port_for(self, entry: Level, store: bool) -> PortTable:
        if entry is Level.L1:
            return self.l1w if store else self.l1r
        return self.l2p if entry is Level.L2 else self.l3p

    def can_issue(self, entry: Level, store: bool, t: int) -> bool:
        return self.port_for(entry, store).free(t)

    def free_slots(self, entry: Level, store: bool, t: int) -> int:
        return self.port_for(entry, store).free_slots(t)

    # -- warm start ------------------------------------------------------------

    def warm(self, level: Level, lines, near_tfu: bool = False) -> None:
        """Install clean copies without charging time or movement.

        With ``near_tfu`` the L3 copies go into the partitioned region of the
        local slice instead of the home slice.
        """
        if near_tfu and (level is not Level.L3 or self.part is None):
            raise ValueError("near-TFU warm needs a partitioned L3")
        for line in lines:
            if near_tfu:
                if not self.part.lookup(line):
                    v = self.part.insert(line)
                    if v:
                        self.dir.evict(near_l3(LOCAL_SLICE), v[0])
                    self.dir.tfu_l3_load(LOCAL_SLICE, line)
            elif level is Level.L3:
                self._home(line).insert(line)
            elif level is Level.L2:
                v = self.l2.insert(line)
                if v:
                    self._drop_core_copy(v[0])
                self.dir.core_load(CORE_ID, line)
            else:
                self.l1.insert(line)

    def _drop_core_copy(self, line: int) -> None:
        self.l1.invalidate(line)
        self.dir.evict(core(CORE_ID), line)

    # -- coherence actions -------------------------------------------------------

    def _apply(self, actions, t: int) -> int:
        """Carry out directory actions; returns the extra latency they cost."""
        extra = 0
        for act in actions:
            self.stats.snoops += 1
            line = act.line
            if act.agent.kind is AgentKind.CORE:
                if act.kind in (ActionKind.SNOOP_L1_WRITEBACK, ActionKind.SNOOP_L1_INVALIDATE):
                    extra = max(extra, self.l1cfg.tag_latency_cycles)
                    if self.l1.clean(line):
                        self._evict("L1-L2", t, line)
                        self.l2.mark_dirty(line)
                    if act.kind is ActionKind.SNOOP_L1_INVALIDATE:
                        self.l1.invalidate(line)
                elif act.kind is ActionKind.WRITEBACK:
                    extra = max(extra, self.l2cfg.tag_latency_cycles)
                    if self.l2.clean(line):
                        self._evict("L2-L3", t, line)
                        self._home(line).insert(line, dirty=True)
                elif act.kind is ActionKind.INVALIDATE:
                    self.l1.invalidate(line)
                    self.l2.invalidate(line)
            else:
                extra = max(extra, self.l3cfg.tag_latency_cycles)
                if act.kind is ActionKind.WRITEBACK and self.part is not None:
                    if self.part.clean(line):
                        self._evict("L3-L3", t, line)
                        self._home(line).insert(line, dirty=True)
                elif act.kind is ActionKind.INVALIDATE and self.part is not None:
                    self.part.invalidate(line)
        return extra

    def _check(self, line: int) -> None:
        if self.check_coherence:
            self.dir.check(line)

    # -- level walks -----------------------------------------------------------

    def _l3_fetch(self, line: int, t: int) -> int:
        """An L2 miss looks up the line's home slice; returns data arrival."""
        cfg = self.l3cfg
        t0 = self.l3p.reserve(t)
        hit = self._home(line).lookup(line) or (self.part is not None and line in self.part)
        self.c.lookup("L3", hit)
        if hit:
            return t0 + cfg.tag_latency_cycles + cfg.data_latency_cycles
        ready = self.m3.pending(line, t0)
        if ready is not None:
            return ready
        ta = self.m3.acquire(t0 + cfg.tag_latency_cycles)
        arrive = ta + DRAM_LATENCY
        self._dram_fill(line, arrive)
        self.m3.hold(line, arrive)
        return arrive

    def _dram_fill(self, line: int, t: int) -> None:
        self.stats.dram_reads += 1
        self._fill("L3-DRAM", t, line)
        v = self._home(line).insert(line)
        if v and v[1]:
            self._evict("L3-DRAM", t, v[0])

    def _l2_install(self, line: int, t: int) -> None:
        v = self.l2.insert(line)
        if v:
            victim, dirty = v
            if self.l1.invalidate(victim):
                dirty = True
            self.dir.evict(core(CORE_ID), victim)
            if dirty:
                self._evict("L2-L3", t, victim)
                self.l3p.reserve(t)
                self._home(victim).insert(victim, dirty=True)

    def _l2_lookup(self, line: int, t: int) -> int:
        """Look up L2 at cycle ``t`` (port already considered); returns data arrival."""
        cfg = self.l2cfg
        t0 = self.l2p.reserve(t)
        ready = self.m2.pending(line, t0)
        hit = ready is None and self.l2.lookup(line)
        self.c.lookup("L2", hit or ready is not None)
        if hit:
            return t0 + cfg.tag_latency_cycles + cfg.data_latency_cycles
        if ready is not None:
            return max(ready, t0 + cfg.tag_latency_cycles) + 1
        ta = self.m2.acquire(t0 + cfg.tag_latency_cycles)
        arrive = self._l3_fetch(line, ta)
        tf = self.l2p.reserve(arrive)
        self._fill("L2-L3", tf, line)
        self._l2_install(line, tf)
        self.m2.hold(line, tf + 1)
        return tf + 1

    def _l1_access(self, line: int, t: int, store: bool) -> int:
        cfg = self.l1cfg
        port = self.l1w if store else self.l1r
        t0 = port.reserve(t)
        extra = self._apply(
            self.dir.core_store(CORE_ID, line) if store else self.dir.core_load(CORE_ID, line), t0)
        ready = self.m1.pending(line, t0)
        hit = ready is None and self.l1.lookup(line)
        self.c.lookup("L1", hit or ready is not None)
        if hit:
            done = t0 + extra + cfg.tag_latency_cycles + cfg.data_latency_cycles
        elif ready is not None:
            done = max(ready, t0 + cfg.tag_latency_cycles) + 1
        else:
            ta = self.m1.acquire(t0 + extra + cfg.tag_latency_cycles)
            arrive = self._l2_lookup(line, ta)
            tf = self.l1w.reserve(arrive)
            self._fill("L1-L2", tf, line)
            v = self.l1.insert(line)
            if v and v[1]:
                self._evict("L1-L2", tf, v[0])
                self.l2p.reserve(tf)
                self.l2.mark_dirty(v[0])
                self.dir.l1_writeback(CORE_ID, v[0])
            self.m1.hold(line, tf + 1)
            done = tf + 1
        if store:
            self.l1.mark_dirty(line)
        self._check(line)
        return done

    def _l2_entry(self, line: int, t: int, store: bool) -> int:
        acts = (self.dir.tfu_l2_store if store else self.dir.tfu_l2_load)(CORE_ID, line)
        extra = self._apply(acts, t)
        done = self._l2_lookup(line, t) + extra
        if store:
            self.l2.mark_dirty(line)
        self._check(line)
        return done

    def _l3_entry(self, line: int, t: int, store: bool) -> int:
        if self.part is None:
            raise ValueError("near-L3 access without a partitioned region")
        cfg = self.l3cfg
        t0 = self.l3p.reserve(t)
        acts = (self.dir.tfu_l3_store if store else self.dir.tfu_l3_load)(LOCAL_SLICE, line)
        extra = self._apply(acts, t0)
        ready = self.m3.pending(line, t0)
        hit = ready is None and self.part.lookup(line)
        self.c.lookup("L3P", hit or ready is not None)
        lat = cfg.tag_latency_cycles + cfg.data_latency_cycles
        if hit:
            done = t0 + extra + lat
        elif ready is not None:
            done = max(ready, t0 + lat)
        else:
            # the home slice delivers through the same port slot
            ta = self.m3.acquire(t0 + extra + cfg.tag_latency_cycles)
            home = self._home(line)
            in_home = home.lookup(line)
            self.c.lookup("L3", in_home)
            if in_home:
                arrive = ta + lat
            else:
                arrive = ta + DRAM_LATENCY
                self._dram_fill(line, arrive)
            self._fill("L3-L3", arrive, line)
            v = self.part.insert(line)
            if v:
                self.dir.evict(near_l3(LOCAL_SLICE), v[0])
                if v[1]:
                    self._evict("L3-L3", arrive, v[0])
                    self._home(v[0]).insert(v[0], dirty=True)
            self.m3.hold(line, arrive + cfg.data_latency_cycles)
            done = arrive + cfg.data_latency_cycles
        if store:
            self.part.mark_dirty(line)
        self._check(line)
        return done

    # -- public access -----------------------------------------------------------

    def access(self, entry: Level, addr: int, t: int, store: bool = False,
               nbytes: int = LINE_BYTES) -> int:
        """Service one register-file load or store; returns the completion cycle."""
        line = addr // LINE_BYTES
        if store:
            self.c.rf_store_bytes += nbytes
        else:
            self.c.rf_load_bytes += nbytes
        if entry is Level.L1:
            return self._l1_access(line, t, store)
        if entry is Level.L2:
            return self._l2_entry(line, t, store)
        return self._l3_entry(line, t, store)

    def load(self, entry: Level, addr: int, t: int, nbytes: int = LINE_BYTES) -> int:
        return self.access(entry, addr, t, False, nbytes)

    def store(self, entry: Level, addr: int, t: int, nbytes: int = LINE_BYTES) -> int:
        return self.access(entry, addr, t, True, nbytes)

    def utilization(self, cycles: int) -> dict[str, float]:
        """Fraction of available port slots used, per port group."""
        if cycles <= 0:
            return {p.name: 0.0 for p in self.ports()}
        return {p.name: min(1.0, p.transfers / (p.ports * cycles)) for p in self.ports()}
