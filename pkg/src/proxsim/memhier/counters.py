"""Movement and lookup counters plus the derived overhead and hit-rate metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

INTERFACES = ("L1-L2", "L2-L3", "L3-L3", "L3-DRAM")
# Cross-cache movement that counts toward the overhead total. Fills of the
# near-L3 partition from a home slice and DRAM traffic are reported but excluded.
OVERHEAD_INTERFACES = ("L1-L2", "L2-L3")


class NoTraffic(ZeroDivisionError):
    pass


@dataclass
class MovementCounters:
    fill_bytes: dict[str, int] = field(default_factory=lambda: dict.fromkeys(INTERFACES, 0))
    evict_bytes: dict[str, int] = field(default_factory=lambda: dict.fromkeys(INTERFACES, 0))
    rf_load_bytes: int = 0
    rf_store_bytes: int = 0
    lookups: dict[str, int] = field(default_factory=dict)
    hits: dict[str, int] = field(default_factory=dict)

    def fill(self, iface: str, nbytes: int = 64) -> None:
        self.fill_bytes[iface] += nbytes

    def evict(self, iface: str, nbytes: int = 64) -> None:
        self.evict_bytes[iface] += nbytes

    def lookup(self, level: str, hit: bool) -> None:
        self.lookups[level] = self.lookups.get(level, 0) + 1
        if hit:
            self.hits[level] = self.hits.get(level, 0) + 1

    def moved(self, iface: str) -> int:
        return self.fill_bytes[iface] + self.evict_bytes[iface]

    def merge(self, other: "MovementCounters", weight: int = 1) -> None:
        for k in INTERFACES:
            self.fill_bytes[k] += weight * other.fill_bytes[k]
            self.evict_bytes[k] += weight * other.evict_bytes[k]
        self.rf_load_bytes += weight * other.rf_load_bytes
        self.rf_store_bytes += weight * other.rf_store_bytes
        for k, v in other.lookups.items():
            self.lookups[k] = self.lookups.get(k, 0) + weight * v
        for k, v in other.hits.items():
            self.hits[k] = self.hits.get(k, 0) + weight * v

    def snapshot(self) -> "MovementCounters":
        c = MovementCounters()
        c.merge(self)
        return c

    def minus(self, earlier: "MovementCounters") -> "MovementCounters":
        c = self.snapshot()
        c.merge(earlier, -1)
        return c


@dataclass(frozen=True)
class DmReport:
    total: float
    per_interface: dict[str, float]


def dm_overhead(c: MovementCounters) -> DmReport:
    """Cross-cache fills and dirty evictions over register-file load/store bytes."""
    denom = c.rf_load_bytes + c.rf_store_bytes
    if denom <= 0:
        raise NoTraffic("no register-file loads or stores were recorded")
    per = {k: c.moved(k) / denom for k in INTERFACES}
    return DmReport(sum(per[k] for k in OVERHEAD_INTERFACES), per)


def hitrates(c: MovementCounters) -> dict[str, float]:
    """Hits over lookups for every level that saw at least one lookup."""
    return {lvl: c.hits.get(lvl, 0) / n for lvl, n in sorted(c.lookups.items()) if n}
