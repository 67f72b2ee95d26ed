"""Machine assembly: configurations, thread binding, work partitioning and layer runs.

All cores run the same code on equal shares of a layer, so one representative
core is simulated cycle by cycle: the core that receives the largest share.
Its legacy thread and TFU driver threads share one front end and one cache
hierarchy. A layer's runtime is the time that core takes to finish its share.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Sequence

from . import kernelgen, psx
from .core import CoreConfig, Frontend, LegacyThread
from .layers import LayerKind, LayerSpec
from .memhier import (CacheConfig, Hierarchy, Level, MovementCounters, NoTraffic, default_l1,
                      default_l2, default_l3, dm_overhead, hitrates, partition_l3)
from .memhier.config import LINE_BYTES
from .psx import LoopNest, Opcode, PsxInstr, PsxProgram
from .tfu import LOAD, TfuConfig, TfuState, compile_program

VECTOR_MACS = 64
VECTOR_BYTES = 64
SCRATCH_BASE = 0x6000_0000
DEFAULT_CORES = 28
SMT_WAYS = 4


class UnknownConfig(KeyError):
    pass


class ThreadRole(Enum):
    LEGACY = "legacy-core"
    TFU_L1 = "TFU@L1"
    TFU_L2 = "TFU@L2"
    TFU_L3 = "TFU@L3"
    IDLE = "idle"


_TFU_ROLE = {Level.L1: ThreadRole.TFU_L1, Level.L2: ThreadRole.TFU_L2, Level.L3: ThreadRole.TFU_L3}
_LEVELS = (Level.L1, Level.L2, Level.L3)

# (core MACs/cycle, TFU MACs/cycle at L1, L2, L3). The L1 share of a P-config
# reuses the core's MAC units, driven through the L1-attached TFU scheduler.
_NOTATION = {
    "M128": (128, (0, 0, 0)),
    "M256": (256, (0, 0, 0)),
    "M512": (512, (0, 0, 0)),
    "P128": (128, (0, 0, 0)),
    "P256": (128, (128, 64, 64)),
    "P320": (128, (128, 128, 64)),
    "P512": (256, (256, 128, 128)),
    "P640": (256, (256, 256, 128)),
}


@dataclass(frozen=True)
class MachineConfig:
    name: str = "M128"
    cores: int = DEFAULT_CORES
    smt_ways: int = SMT_WAYS
    ghz: float = 2.6
    l1: CacheConfig = field(default_factory=default_l1)
    l2: CacheConfig = field(default_factory=default_l2)
    l3: CacheConfig = field(default_factory=default_l3)
    core_macs_per_cycle: int = 128
    tfu_widths: tuple[int, int, int] = (0, 0, 0)
    alloc_width: int = 8
    rob_entries: int = 320
    l1_psx: bool = True          # P-configs: the L1 share runs as PSX through the L1 TFU
    legacy_threads: int = 1      # M-configs: SMT threads running legacy code

    def __post_init__(self):
        object.__setattr__(self, "tfu_widths", tuple(self.tfu_widths))
        if self.cores < 1 or self.smt_ways < 1:
            raise UnknownConfig(f"{self.name}: cores and SMT ways must be positive")
        if len(self.tfu_widths) != 3 or any(w < 0 for w in self.tfu_widths):
            raise UnknownConfig(f"{self.name}: tfu_widths needs three non-negative widths")
        if any(w and (w % VECTOR_MACS or w > 256) for w in self.tfu_widths):
            raise UnknownConfig(f"{self.name}: TFU widths must be 64, 128 or 256")
        if self.has_tfus and 1 + sum(1 for w in self.tfu_widths if w) > self.smt_ways:
            raise UnknownConfig(f"{self.name}: not enough SMT threads to bind every TFU")

    @property
    def has_tfus(self) -> bool:
        return any(self.tfu_widths)

    @property
    def peak_macs_per_cycle(self) -> int:
        if not self.has_tfus:
            return self.core_macs_per_cycle
        l1 = self.tfu_widths[0] or self.core_macs_per_cycle
        return l1 + self.tfu_widths[1] + self.tfu_widths[2]

    def tfu_width(self, level: Level) -> int:
        return self.tfu_widths[_LEVELS.index(level)]

    @property
    def core_config(self) -> CoreConfig:
        return CoreConfig(self.core_macs_per_cycle, self.alloc_width, self.rob_entries)


def parse_config(name: str) -> MachineConfig:
    """Map M/P notation to a machine. Unknown names raise UnknownConfig."""
    key = name.strip().upper() if isinstance(name, str) else name
    if key not in _NOTATION:
        raise UnknownConfig(f"unknown machine configuration {name!r}; known: "
                            + ", ".join(_NOTATION))
    core, tfus = _NOTATION[key]
    return MachineConfig(name=key, core_macs_per_cycle=core, tfu_widths=tfus)


def config_names() -> list[str]:
    return list(_NOTATION)


def config_from_dict(doc: dict) -> MachineConfig:
    """Build a machine from a document: ``{"base": "P256", <field overrides>}``.

    Cache levels take ``CacheConfig`` field overrides; ``l3_tfu_ways`` sets the
    near-L3 partition.
    """
    doc = dict(doc)
    m = parse_config(doc.pop("base", doc.pop("name", "M128")))
    over = {}
    for lvl in ("l1", "l2", "l3"):
        if lvl in doc:
            over[lvl] = replace(getattr(m, lvl), **doc.pop(lvl))
    ways = doc.pop("l3_tfu_ways", None)
    try:
        m = replace(m, **over, **doc)
    except TypeError as e:
        raise UnknownConfig(str(e)) from e
    if ways is not None:
        m = replace(m, l3=partition_l3(m.l3, ways))
    return m


def with_ports(m: MachineConfig, l1_read: int, l2: int, l3: int) -> MachineConfig:
    """Port variant with compute sized at 128 MACs per 64B port at every level."""
    l1 = replace(m.l1, read_ports_64B=l1_read)
    l2c = m.l2.with_ports(l2)
    l3c = m.l3.with_ports(l3)
    w = (128 * l1_read, 128 * l2, 128 * l3)
    return replace(m, name=f"{m.name}[{l1_read}/{l2}/{l3}]", l1=l1, l2=l2c, l3=l3c,
                   core_macs_per_cycle=w[0], tfu_widths=w)


# -- thread binding ---------------------------------------------------------------

@dataclass(frozen=True)
class ThreadBinding:
    roles: tuple[ThreadRole, ...]

    def thread_of(self, role: ThreadRole) -> Optional[int]:
        return self.roles.index(role) if role in self.roles else None

    def to_dict(self) -> dict[str, str]:
        return {f"T{i}": r.value for i, r in enumerate(self.roles)}


def bind_threads(m: MachineConfig) -> ThreadBinding:
    """One OS-visible SMT thread per TFU; the remaining thread runs legacy code."""
    roles: list[ThreadRole] = []
    if not m.has_tfus:
        roles = [ThreadRole.LEGACY] * min(m.legacy_threads, m.smt_ways)
    else:
        for lvl in _LEVELS:
            if m.tfu_width(lvl):
                roles.append(_TFU_ROLE[lvl])
        roles.append(ThreadRole.LEGACY)
    roles += [ThreadRole.IDLE] * (m.smt_ways - len(roles))
    return ThreadBinding(tuple(roles[: m.smt_ways]))


def describe_capabilities(m: MachineConfig) -> dict:
    """Per-level TFU presence and MAC width plus the SMT binding map."""
    tfus = {lvl.value: m.tfu_width(lvl) for lvl in _LEVELS if m.tfu_width(lvl)}
    return {
        "name": m.name,
        "cores": m.cores,
        "smt_ways": m.smt_ways,
        "core_macs_per_cycle": m.core_macs_per_cycle,
        "peak_macs_per_cycle": m.peak_macs_per_cycle,
        "tfus": tfus,
        "binding": bind_threads(m).to_dict(),
        "l3_tfu_ways": m.l3.partitioned_ways_for_tfu if tfus.get("L3") else 0,
    }


def config_from_capabilities(report: dict) -> MachineConfig:
    """Inverse of ``describe_capabilities`` for the notation configurations."""
    for name in _NOTATION:
        m = parse_config(name)
        if (m.core_macs_per_cycle == report["core_macs_per_cycle"]
                and {lvl.value: m.tfu_width(lvl) for lvl in _LEVELS if m.tfu_width(lvl)}
                == report["tfus"]):
            if name.startswith("P") == report["name"].startswith("P"):
                return m
    raise UnknownConfig(f"no configuration matches {report}")


# -- placement and partitioning -----------------------------------------------------

def select_levels(kind: LayerKind, outer_l2: bool = False) -> frozenset[Level]:
    """Cache levels whose TFUs take part for a primitive kind."""
    if kind is LayerKind.CONVOLUTION:
        return frozenset(_LEVELS)
    if kind is LayerKind.INNER_PRODUCT:
        return frozenset({Level.L2, Level.L3})
    return frozenset({Level.L2, Level.L3} if outer_l2 else {Level.L3})


def partition_static_asymmetric(units: int, strengths: Sequence[float]) -> list[int]:
    """Split ``units`` proportionally to ``strengths`` (largest remainder, ties to lower index)."""
    if units < 0:
        raise ValueError("units must be non-negative")
    if not strengths or any(s <= 0 for s in strengths):
        raise ValueError("strengths must be non-empty and positive")
    total = sum(strengths)
    quotas = [units * s / total for s in strengths]
    alloc = [math.floor(q) for q in quotas]
    left = units - sum(alloc)
    order = sorted(range(len(strengths)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[:left]:
        alloc[i] += 1
    return alloc


class Schedule(Enum):
    STATIC_ASYMMETRIC = "static_asymmetric"
    STATIC = "static"


@dataclass(frozen=True)
class Policy:
    schedule: Schedule = Schedule.STATIC_ASYMMETRIC
    levels: Optional[frozenset[Level]] = None   # overrides the per-kind affinity
    psx: bool = True                            # False runs everything as legacy code
    outer_l2: bool = False                      # pooling/concat also use the L2 TFU
    passes: Optional[int] = None                # invocations per layer; IP defaults to 2
    warm: bool = True

    def passes_for(self, kind: LayerKind) -> int:
        if self.passes is not None:
            return self.passes
        return 2 if kind is LayerKind.INNER_PRODUCT else 1


# -- TFU driver thread --------------------------------------------------------------

class TfuThread:
    """SMT thread bound to one TFU.

    The thread fills the code registers for the next program while the TFU
    runs the current one, and offloads it as soon as the TFU has issued every
    op. The fence applies only to the thread's own core-side code, so the
    thread finishes once the TFU has fully drained.
    """

    def __init__(self, tfu: TfuState, frontend: Frontend, name: str):
        self.tfu = tfu
        self.fe = frontend
        self.name = name
        self.queue: list[PsxProgram] = []
        self.pos = 0
        self.running = False
        self.done_at = 0
        self.core_side_ops = 0
        self.fence_waits = 0
        self._prep_ready: Optional[int] = None

    def add(self, programs: Iterable[PsxProgram]) -> None:
        self.queue.extend(programs)

    @property
    def finished(self) -> bool:
        return not self.running and self.pos >= len(self.queue)

    def _prepare(self, t: int) -> None:
        if self.pos < len(self.queue) and self._prep_ready is None:
            n = psx.core_side_count(self.queue[self.pos])
            self.core_side_ops += n
            self._prep_ready = self.fe.claim(t, n)

    def step(self, t: int) -> None:
        tfu = self.tfu
        if tfu.busy:
            tfu.step(t)
            if tfu.busy:
                return
        if self.pos < len(self.queue):
            self._prepare(t)
            p = self.queue[self.pos]
            self.pos += 1
            tfu.accept_offload(p, max(t + 1, self._prep_ready + 1))
            self._prep_ready = None
            self.running = True
            self._prepare(t)
            return
        if self.running and t >= tfu.drained_at:
            self.running = False
            self.fence_waits += 1
            self.done_at = max(self.done_at, tfu.drained_at)

    def next_event_cycle(self, t: int) -> float:
        if self.tfu.busy:
            return self.tfu.next_event_cycle(t)
        if self.pos < len(self.queue):
            return t + 1
        if self.running:
            return max(t + 1, self.tfu.drained_at)
        return math.inf


# -- metrics --------------------------------------------------------------------------

@dataclass
class WorkerReport:
    role: str
    units: int
    macs: int
    done_at: int


@dataclass
class SimMetrics:
    config: str
    layer: str
    kind: str
    cycles: int
    macs: int                      # useful MACs of the whole layer, all passes
    cores: int
    passes: int = 1
    multiplicity: int = 1
    counters: MovementCounters = field(default_factory=MovementCounters)
    port_transfers: dict[str, int] = field(default_factory=dict)
    port_slots: dict[str, int] = field(default_factory=dict)
    legacy_instructions: int = 0   # through the legacy pipeline, incl. bookkeeping
    psx_core_instructions: int = 0  # core-side PSX stream
    tfu_ops: int = 0               # unrolled ops issued by TFU schedulers
    mac_ops: int = 0               # 64-MAC vector ops on the representative core
    valu_ops: int = 0
    tc_lookups: int = 0
    baseline_instructions: int = 0  # what the legacy pipeline would run for the same work
    workers: list[WorkerReport] = field(default_factory=list)

    @property
    def macs_per_cycle_per_core(self) -> float:
        return self.macs / (self.cores * self.cycles) if self.cycles else 0.0

    @property
    def hitrates(self) -> dict[str, float]:
        return hitrates(self.counters)

    @property
    def dm_overhead(self) -> Optional[float]:
        try:
            return dm_overhead(self.counters).total
        except NoTraffic:
            return None

    @property
    def dm_per_interface(self) -> dict[str, float]:
        try:
            return dm_overhead(self.counters).per_interface
        except NoTraffic:
            return {}

    @property
    def bandwidth_utilization(self) -> dict[str, float]:
        return {k: min(1.0, self.port_transfers[k] / s) if s else 0.0
                for k, s in self.port_slots.items()}

    @property
    def cumulative_utilization(self) -> float:
        slots = sum(self.port_slots.values())
        return min(1.0, sum(self.port_transfers.values()) / slots) if slots else 0.0

    @property
    def compression(self) -> Optional[float]:
        issued = self.legacy_instructions + self.psx_core_instructions
        return self.baseline_instructions / issued if issued else None

    def events(self) -> dict[str, int]:
        """Event counts for the energy model (representative core, weighted)."""
        c = self.counters
        ev = {
            "fe_ops": self.legacy_instructions + self.psx_core_instructions,
            "ooo_ops": self.legacy_instructions + self.psx_core_instructions,
            "mac_ops": self.mac_ops,
            "valu_ops": self.valu_ops,
            "tfu_ops": self.tfu_ops,
            "tc_lookups": self.tc_lookups,
            "l1_accesses": c.lookups.get("L1", 0),
            "l2_accesses": c.lookups.get("L2", 0),
            "l3_accesses": c.lookups.get("L3", 0) + c.lookups.get("L3P", 0),
            "dram_bytes": c.moved("L3-DRAM"),
        }
        for iface in ("L1-L2", "L2-L3", "L3-L3"):
            ev[f"move_{iface}"] = c.moved(iface)
        return ev

    def scaled(self, k: int) -> "SimMetrics":
        """The same run repeated ``k`` times (distinct-shape multiplicity)."""
        out = SimMetrics(self.config, self.layer, self.kind, self.cycles * k, self.macs * k,
                         self.cores, self.passes, self.multiplicity * k)
        out.counters.merge(self.counters, k)
        out.port_transfers = {p: v * k for p, v in self.port_transfers.items()}
        out.port_slots = {p: v * k for p, v in self.port_slots.items()}
        for name in ("legacy_instructions", "psx_core_instructions", "tfu_ops", "mac_ops",
                     "valu_ops", "tc_lookups", "baseline_instructions"):
            setattr(out, name, getattr(self, name) * k)
        out.workers = [WorkerReport(w.role, w.units * k, w.macs * k, w.done_at)
                       for w in self.workers]
        return out

    def to_row(self) -> dict:
        hr = self.hitrates
        dm = self.dm_per_interface
        row = {
            "config": self.config,
            "layer": self.layer,
            "kind": self.kind,
            "multiplicity": self.multiplicity,
            "cycles": self.cycles,
            "macs": self.macs,
            "macs_per_cycle_per_core": round(self.macs_per_cycle_per_core, 4),
            "dm_overhead": None if self.dm_overhead is None else round(self.dm_overhead, 6),
            "bw_utilization": round(self.cumulative_utilization, 6),
            "legacy_instructions": self.legacy_instructions,
            "psx_core_instructions": self.psx_core_instructions,
            "tfu_ops": self.tfu_ops,
        }
        for lvl in ("L1", "L2", "L3", "L3P"):
            row[f"hit_{lvl}"] = round(hr[lvl], 6) if lvl in hr else None
        for iface in ("L1-L2", "L2-L3", "L3-L3", "L3-DRAM"):
            row[f"dm_{iface}"] = round(dm[iface], 6) if iface in dm else None
        return row


def combine(metrics: Sequence[SimMetrics], label: str = "total") -> SimMetrics:
    """Sum a list of runs on the same machine into one suite-level record."""
    if not metrics:
        raise ValueError("nothing to combine")
    first = metrics[0]
    out = SimMetrics(first.config, label, "suite", 0, 0, first.cores, 1, 0)
    for m in metrics:
        out.cycles += m.cycles
        out.macs += m.macs
        out.multiplicity += m.multiplicity
        out.counters.merge(m.counters)
        for p, v in m.port_transfers.items():
            out.port_transfers[p] = out.port_transfers.get(p, 0) + v
        for p, v in m.port_slots.items():
            out.port_slots[p] = out.port_slots.get(p, 0) + v
        for name in ("legacy_instructions", "psx_core_instructions", "tfu_ops", "mac_ops",
                     "valu_ops", "tc_lookups", "baseline_instructions"):
            setattr(out, name, getattr(out, name) + getattr(m, name))
    return out


# -- layer simulation -------------------------------------------------------------------

@dataclass(frozen=True)
class _Site:
    role: ThreadRole
    level: Optional[Level]     # None: legacy code on the core
    width: int


def active_sites(m: MachineConfig, kind: LayerKind, policy: Policy) -> list[_Site]:
    """Compute sites that share a layer on each core, in thread order."""
    if not policy.psx or not m.has_tfus:
        return [_Site(ThreadRole.LEGACY, None, m.core_macs_per_cycle)]
    levels = policy.levels if policy.levels is not None else select_levels(kind, policy.outer_l2)
    sites = []
    for lvl in _LEVELS:
        w = m.tfu_width(lvl)
        if lvl not in levels or not w:
            continue
        if lvl is Level.L1 and not m.l1_psx:
            sites.append(_Site(ThreadRole.LEGACY, None, m.core_macs_per_cycle))
        else:
            sites.append(_Site(_TFU_ROLE[lvl], lvl, w))
    return sites or [_Site(ThreadRole.LEGACY, None, m.core_macs_per_cycle)]


def _partial_store(accumulators: int, slot: int) -> PsxProgram:
    """Spill the accumulators of a tile whose reduction continues on another worker."""
    st = PsxInstr(Opcode.TENSOR_STORE, src_regs=(0,), base_addr=SCRATCH_BASE + slot * 4096,
                  loops=(0,), addr_strides=(VECTOR_BYTES,), reg_strides=(0,),
                  src_reg_strides=((1,),))
    return PsxProgram((st,), LoopNest((accumulators,)))


def _assign(units: list[tuple[int, kernelgen.ProgramRef]], counts: list[int],
            accumulators: int) -> list[list[tuple[int, object]]]:
    """Cut the unit list into contiguous pieces; a piece that stops mid-tile spills."""
    pieces, start = [], 0
    for n in counts:
        piece = list(units[start:start + n])
        end = start + n
        if n and end < len(units) and units[end][0] == units[end - 1][0]:
            piece.append((units[end - 1][0], _partial_store(accumulators, len(pieces))))
        pieces.append(piece)
        start = end
    return pieces


def _lines_by_role(kernel: kernelgen.KernelIR, refs) -> dict[str, list[int]]:
    out: dict[str, dict[int, None]] = {}
    for ref in refs:
        lk = kernel.materialize(ref)
        c = compile_program(lk.program)
        bases = [i.base_addr or 0 for i in lk.instrs]
        for i in c.memory:
            role = lk.roles[c.sidx[i]] if c.kinds[i] == LOAD else "output"
            out.setdefault(role, {})[(bases[c.sidx[i]] + c.rel[i]) // LINE_BYTES] = None
    return {r: list(v) for r, v in out.items()}


def _warm(mem: Hierarchy, kernel: kernelgen.KernelIR, mine, sites, pieces) -> None:
    """Approximate the steady state of a long-running layer before timing starts.

    Output buffers and weights live in L3 from earlier layers or inferences.
    Weights are reused by every tile, so they also sit where their consumer
    reads them: L2 for the core side, the TFU region for the near-L3 unit.
    Input activations were just produced and are in L2 as well as L3.
    """
    lines = _lines_by_role(kernel, [r for _, r in mine])
    for ls in lines.values():
        mem.warm(Level.L3, ls)
    mem.warm(Level.L2, lines.get("weight", ()))
    for role, ls in lines.items():
        if role not in ("weight", "output"):
            mem.warm(Level.L2, ls)
    for site, piece in zip(sites, pieces):
        if site.level is Level.L3 and piece:
            mine_l3 = _lines_by_role(kernel, [r for _, r in piece])
            mem.warm(Level.L3, mine_l3.get("weight", ()), near_tfu=True)


def _baseline_count(kernel: kernelgen.KernelIR, refs) -> int:
    per_template: dict[int, int] = {}
    total = 0
    for ref in refs:
        n = per_template.get(ref.template)
        if n is None:
            n = per_template[ref.template] = psx.baseline_dynamic_count(
                kernel.templates[ref.template].program)
        total += n
    return total


def run_layer(m: MachineConfig, layer: LayerSpec, policy: Policy = Policy(),
              max_cycles: int = 10 ** 9) -> SimMetrics:
    """Simulate one layer on the representative core of ``m``."""
    layer = layer.validate()
    kernel = kernelgen.block_layer(layer)
    units = [(ti, ref) for ti, tile in enumerate(kernel.tiles) for ref in tile]
    share = partition_static_asymmetric(len(units), [1] * m.cores)
    mine = units[: share[0]]
    sites = active_sites(m, layer.kind, policy)
    if policy.schedule is Schedule.STATIC_ASYMMETRIC:
        strengths = [s.width for s in sites]
    else:
        strengths = [1] * len(sites)
    counts = partition_static_asymmetric(len(mine), strengths)
    pieces = _assign(mine, counts, kernel.blocking.accumulators_used)
    passes = policy.passes_for(layer.kind)

    l3 = m.l3
    if any(s.level is Level.L3 for s in sites) and not l3.partitioned_ways_for_tfu:
        l3 = partition_l3(l3, 2)
    mem = Hierarchy(m.l1, m.l2, l3)
    if policy.warm and mine:
        _warm(mem, kernel, mine, sites, pieces)
    fe = Frontend(m.alloc_width)
    workers = []
    for site, piece in zip(sites, pieces):
        progs = []
        for _, ref in piece:
            if isinstance(ref, PsxProgram):
                progs.append([ref])
            elif site.level is None:
                progs.append([kernel.materialize(ref).program])
            else:
                progs.append(kernelgen.lower_loop_kernel(kernel.materialize(ref)))
        flat = [p for group in progs for p in group] * passes
        if site.level is None:
            w = LegacyThread(m.core_config, fe, mem, flat, name=site.role.value)
        else:
            tcfg = TfuConfig(attached_level=site.level, macs_per_cycle=site.width)
            w = TfuThread(TfuState(tcfg, mem), fe, site.role.value)
            w.add(flat)
        workers.append((site, len(piece), w))

    t = 0
    live = [w for _, _, w in workers]
    while live:
        for w in live:
            w.step(t)
        nxt = min(w.next_event_cycle(t) for w in live)
        live = [w for w in live if not w.finished]
        if nxt == math.inf or not live:
            break
        t = int(nxt)
        if t > max_cycles:
            raise RuntimeError(f"{layer.name}: no completion within {max_cycles} cycles")
    mem.audit()

    cycles = max([1] + [w.done_at for _, _, w in workers])
    out = SimMetrics(m.name, layer.name, layer.kind.value, cycles, layer.macs * passes,
                     m.cores, passes)
    out.counters = mem.c.snapshot()
    for p in mem.ports():
        out.port_transfers[p.name] = p.transfers
        out.port_slots[p.name] = p.ports * cycles
    out.baseline_instructions = _baseline_count(
        kernel, [r for _, r in mine if not isinstance(r, PsxProgram)]) * passes
    for site, n, w in workers:
        if isinstance(w, LegacyThread):
            out.legacy_instructions += w.stats.ops + w.stats.bookkeeping_ops
            out.mac_ops += w.stats.macs // VECTOR_MACS
            macs = w.stats.macs
        else:
            st = w.tfu.stats
            out.psx_core_instructions += w.core_side_ops
            out.tfu_ops += st.ops
            out.mac_ops += st.macs // VECTOR_MACS
            out.tc_lookups += w.tfu.tc.lookups
            macs = st.macs
        out.workers.append(WorkerReport(site.role.value, n, macs, w.done_at))
    out.valu_ops = _count_valu(kernel, mine) * passes
    return out


def _count_valu(kernel: kernelgen.KernelIR, mine) -> int:
    per: dict[int, int] = {}
    total = 0
    for _, ref in mine:
        if isinstance(ref, PsxProgram):
            continue
        n = per.get(ref.template)
        if n is None:
            p = kernel.templates[ref.template].program
            n = per[ref.template] = sum(psx.instr_instances(p, i)
                                        for i, ins in enumerate(p.instrs)
                                        if ins.opcode is Opcode.VEC_ALU)
        total += n
    return total


def _shape_key(layer: LayerSpec):
    d = layer.to_dict()
    d.pop("name")
    return tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in d.items()))


def distinct_shapes(layers: Iterable[LayerSpec]) -> list[tuple[LayerSpec, int]]:
    """Layers grouped by shape, first occurrence order, with their multiplicity."""
    order: dict = {}
    counts: Counter = Counter()
    for l in layers:
        k = _shape_key(l)
        order.setdefault(k, l)
        counts[k] += 1
    return [(l, counts[k]) for k, l in order.items()]


def run_suite(m: MachineConfig, layers: Iterable[LayerSpec], policy: Policy = Policy(),
              scale: float = 1.0) -> list[SimMetrics]:
    """Simulate each distinct layer shape once and weight it by its multiplicity."""
    out = []
    for layer, k in distinct_shapes(l.scaled(scale) for l in layers):
        r = run_layer(m, layer, policy)
        out.append(r.scaled(k) if k > 1 else r)
    return out
