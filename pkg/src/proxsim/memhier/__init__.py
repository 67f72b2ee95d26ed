"""Cache hierarchy model: caches, ports, MSHRs, coherence and movement accounting."""

from .cache import SetAssocCache
from .coherence import (Action, ActionKind, Agent, AgentKind, CoherenceDirectory,
                        CoherenceViolation, State)
from .config import (DRAM_LATENCY, LINE_BYTES, CacheConfig, InvalidCacheConfig, InvalidWayCount,
                     Level, Replacement, default_l1, default_l2, default_l3, partition_l3)
from .counters import DmReport, MovementCounters, NoTraffic, dm_overhead, hitrates
from .hierarchy import BandwidthViolation, Hierarchy, MshrFull, PortSaturated, PortTable
from .modelcheck import CheckResult, model_check

__all__ = [
    "Action", "ActionKind", "Agent", "AgentKind", "BandwidthViolation", "CacheConfig",
    "CheckResult", "CoherenceDirectory", "CoherenceViolation", "DRAM_LATENCY", "DmReport",
    "Hierarchy", "InvalidCacheConfig", "InvalidWayCount", "LINE_BYTES", "Level",
    "MovementCounters", "MshrFull", "NoTraffic", "PortSaturated", "PortTable", "Replacement",
    "SetAssocCache", "State", "default_l1", "default_l2", "default_l3", "dm_overhead",
    "hitrates", "model_check", "partition_l3",
]
