"""Cache parameters and defaults for the modeled server core."""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

LINE_BYTES = 64
DRAM_LATENCY = 120


class Replacement(Enum):
    LRU = "LRU"
    RRIP = "RRIP"


class Level(Enum):
    L1 = "L1"
    L2 = "L2"
    L3 = "L3"

    @classmethod
    def parse(cls, text: str) -> "Level":
        return cls(text.strip().upper())


class InvalidWayCount(ValueError):
    pass


class InvalidCacheConfig(ValueError):
    pass


@dataclass(frozen=True)
class CacheConfig:
    """One cache level. For the L3, capacity and ways describe a single slice."""

    capacity_bytes: int
    ways: int
    line_bytes: int = LINE_BYTES
    replacement: Replacement = Replacement.LRU
    read_ports_64B: int = 0
    write_ports_64B: int = 0
    shared_rw_ports_64B: int = 0
    mshr_entries: int = 8
    tag_latency_cycles: int = 1
    data_latency_cycles: int = 4
    slices: int = 1
    partitioned_ways_for_tfu: int = 0

    def __post_init__(self):
        if isinstance(self.replacement, str):
            object.__setattr__(self, "replacement", Replacement(self.replacement.upper()))
        if self.ways < 1 or self.capacity_bytes % (self.ways * self.line_bytes):
            raise InvalidCacheConfig(
                f"capacity {self.capacity_bytes} not divisible by {self.ways} ways x "
                f"{self.line_bytes}B lines")
        if not 0 <= self.partitioned_ways_for_tfu < self.ways:
            raise InvalidWayCount(
                f"{self.partitioned_ways_for_tfu} partitioned ways out of {self.ways}")
        if self.read_ports_64B + self.shared_rw_ports_64B < 1:
            raise InvalidCacheConfig("a cache needs at least one read-capable port")

    @property
    def sets(self) -> int:
        return self.capacity_bytes // (self.ways * self.line_bytes)

    @property
    def read_ports(self) -> int:
        return self.read_ports_64B or self.shared_rw_ports_64B

    @property
    def write_ports(self) -> int:
        return self.write_ports_64B or self.shared_rw_ports_64B

    @property
    def shares_ports(self) -> bool:
        return self.shared_rw_ports_64B > 0 and not self.read_ports_64B

    def partition_bytes(self, ways: int | None = None) -> int:
        ways = self.partitioned_ways_for_tfu if ways is None else ways
        return self.sets * ways * self.line_bytes

    def with_ports(self, ports: int) -> "CacheConfig":
        """Same cache with ``ports`` read ports (or read/write ports if shared)."""
        if self.shares_ports:
            return replace(self, shared_rw_ports_64B=ports)
        return replace(self, read_ports_64B=ports)


def default_l1() -> CacheConfig:
    return CacheConfig(32 * 1024, 8, replacement=Replacement.LRU, read_ports_64B=2,
                       write_ports_64B=1, mshr_entries=8, tag_latency_cycles=1,
                       data_latency_cycles=4)


def default_l2() -> CacheConfig:
    return CacheConfig(1024 * 1024, 16, replacement=Replacement.LRU, shared_rw_ports_64B=2,
                       mshr_entries=48, tag_latency_cycles=2, data_latency_cycles=8)


def default_l3(tfu_ways: int = 2) -> CacheConfig:
    # 1.375MB slice = 2048 sets x 11 ways x 64B
    return CacheConfig(1408 * 1024, 11, replacement=Replacement.RRIP, shared_rw_ports_64B=1,
                       mshr_entries=48, tag_latency_cycles=10, data_latency_cycles=10,
                       slices=28, partitioned_ways_for_tfu=tfu_ways)


def partition_l3(cfg: CacheConfig, ways_for_tfu: int) -> CacheConfig:
    """Reserve ``ways_for_tfu`` ways of every slice set for the near-L3 TFU."""
    if not 1 <= ways_for_tfu <= cfg.ways - 1:
        raise InvalidWayCount(f"ways_for_tfu must be in [1, {cfg.ways - 1}], got {ways_for_tfu}")
    return replace(cfg, partitioned_ways_for_tfu=ways_for_tfu)
