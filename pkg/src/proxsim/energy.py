"""Event-count energy model.

Every event counted by the simulator carries a per-event energy weight. Weights are
calibrated on baseline (legacy-core) runs so that the front-end/out-of-order share of
the energy stack matches target fractions for a compute-bound and a bandwidth-bound
workload. All energies are in arbitrary units; after calibration the baseline
convolution total equals 1.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Mapping, Optional

import numpy as np
from scipy.optimize import lsq_linear

from . import layers
from .machine import SimMetrics, combine, parse_config, run_suite

LINE_BYTES = 64


class InfeasibleCalibration(ValueError):
    """No positive weight vector reproduces the target fractions within tolerance."""

    def __init__(self, message: str, best: Optional["EnergyWeights"] = None,
                 fractions: Optional[dict[str, float]] = None):
        super().__init__(message)
        self.best = best
        self.fractions = fractions or {}


class WorkloadMismatch(ValueError):
    pass


class Cluster(Enum):
    FE = "fe"              # fetch + decode
    OOO = "ooo"            # rename, allocate, dispatch
    COMPUTE = "compute"    # MAC and vector ALU datapaths
    CACHE = "cache"        # array accesses at L1/L2/L3
    MOVEMENT = "movement"  # fills and evictions across cache interfaces
    TFU = "tfu"            # TFU scheduling and translation cache
    DRAM = "dram"


@dataclass(frozen=True)
class EnergyWeights:
    """Energy per event. Cache and movement weights are per 64B line."""

    fe_op: float
    ooo_op: float
    mac_op: float
    l1_access: float
    l2_access: float
    l3_access: float
    move_l1_l2: float
    move_l2_l3: float
    move_l3_l3: float
    tfu_op: float
    tc_lookup: float
    dram_access: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not v > 0:
                raise ValueError(f"weight {f.name} must be positive, got {v}")

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class EnergyStack:
    """Per-cluster energy of one run plus what is needed to derive power."""

    clusters: Mapping[str, float]
    total: float
    cycles: int
    macs: int
    workload: str

    @classmethod
    def build(cls, clusters: Mapping[str, float], cycles: int, macs: int,
              workload: str) -> "EnergyStack":
        ordered = {c.value: float(clusters.get(c.value, 0.0)) for c in Cluster}
        return cls(ordered, sum(ordered.values()), cycles, macs, workload)

    @property
    def power(self) -> float:
        return self.total / self.cycles if self.cycles else 0.0

    def fraction(self, *names: str) -> float:
        return sum(self.clusters[n] for n in names) / self.total if self.total else 0.0

    def __add__(self, other: "EnergyStack") -> "EnergyStack":
        merged = {k: self.clusters[k] + other.clusters[k] for k in self.clusters}
        return EnergyStack.build(merged, self.cycles + other.cycles, self.macs + other.macs,
                                 f"{self.workload}+{other.workload}")

    def rows(self) -> list[dict]:
        """One report row per cluster."""
        return [{"workload": self.workload, "cluster": k, "energy": v,
                 "fraction": v / self.total if self.total else 0.0}
                for k, v in self.clusters.items()]


# -- stack evaluation ----------------------------------------------------------------

def energy_stack(metrics: SimMetrics, w: EnergyWeights) -> EnergyStack:
    """Multiply a run's event counts by the weights, grouped by cluster.

    Runs with TFUs only pay front-end and out-of-order energy for the compressed
    core-side stream; unrolled work is charged as TFU scheduler ops.
    """
    e = metrics.events()
    lines = lambda key: e[key] / LINE_BYTES
    clusters = {
        Cluster.FE.value: e["fe_ops"] * w.fe_op,
        Cluster.OOO.value: e["ooo_ops"] * w.ooo_op,
        Cluster.COMPUTE.value: (e["mac_ops"] + e["valu_ops"]) * w.mac_op,
        Cluster.CACHE.value: (e["l1_accesses"] * w.l1_access + e["l2_accesses"] * w.l2_access
                              + e["l3_accesses"] * w.l3_access),
        Cluster.MOVEMENT.value: (lines("move_L1-L2") * w.move_l1_l2
                                 + lines("move_L2-L3") * w.move_l2_l3
                                 + lines("move_L3-L3") * w.move_l3_l3),
        Cluster.TFU.value: e["tfu_ops"] * w.tfu_op + e["tc_lookups"] * w.tc_lookup,
        Cluster.DRAM.value: lines("dram_bytes") * w.dram_access,
    }
    return EnergyStack.build(clusters, metrics.cycles, metrics.macs, metrics.layer)


def relative_report(a: EnergyStack, b: EnergyStack) -> dict[str, float]:
    """Performance, energy and power of run ``a`` relative to run ``b``."""
    if a.macs != b.macs:
        raise WorkloadMismatch(f"runs cover different work ({a.macs} vs {b.macs} MACs)")
    if not (a.cycles and b.cycles and a.total and b.total):
        raise WorkloadMismatch("both runs need nonzero cycles and energy")
    return {
        "perf": b.cycles / a.cycles,
        "energy": a.total / b.total,
        "power": (a.total / a.cycles) / (b.total / b.cycles),
    }


# -- calibration ------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationTargets:
    conv_front: float = 0.60            # FE+OOO share, compute-bound workload
    transformer_front: float = 0.50     # FE+OOO share, bandwidth-bound workload
    transformer_memory: float = 0.45    # cache+movement share, bandwidth-bound workload
    tolerance: float = 0.05


@dataclass(frozen=True)
class WeightShape:
    """Fixed ratios inside each cluster.

    Calibration only solves one scale per cluster; these ratios set the shape within a
    cluster and price the events that baseline runs never produce.
    """

    ooo_per_fe: float = 1.25     # rename/alloc/dispatch work per fetched and decoded op
    l2_per_l1: float = 2.0       # access energy grows with array size, sub-linearly
    l3_per_l1: float = 2.5       # L3 slice is slightly larger than L2; mesh hops are movement
    move_per_l1: float = 0.5     # one line across an interface vs one L1 access
    l2_l3_per_l1_l2: float = 1.0
    l3_l3_per_l1_l2: float = 1.0
    tfu_per_front: float = 0.1   # in-order TFU scheduler op vs one FE+OOO op
    tc_per_l1: float = 0.1       # 6-entry translation CAM vs an L1 access
    dram_per_l3: float = 4.0

    def __post_init__(self):
        if self.l2_per_l1 < 1 or self.l3_per_l1 < 1:
            raise ValueError("L2 and L3 access weights may not be below L1's")
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")

    def weights(self, front: float, mac: float, cache: float) -> EnergyWeights:
        """Weights from per-cluster scales (energy of one FE+OOO op, one MAC op,
        one L1 access)."""
        fe = front / (1 + self.ooo_per_fe)
        l3 = cache * self.l3_per_l1
        movement = cache * self.move_per_l1
        return EnergyWeights(
            fe_op=fe, ooo_op=fe * self.ooo_per_fe, mac_op=mac,
            l1_access=cache, l2_access=cache * self.l2_per_l1, l3_access=l3,
            move_l1_l2=movement, move_l2_l3=movement * self.l2_l3_per_l1_l2,
            move_l3_l3=movement * self.l3_l3_per_l1_l2,
            tfu_op=front * self.tfu_per_front, tc_lookup=cache * self.tc_per_l1,
            dram_access=l3 * self.dram_per_l3)


def _cluster_counts(metrics: SimMetrics, shape: WeightShape) -> np.ndarray:
    """Event totals in units of each calibrated scale: front end, compute, memory."""
    unit = shape.weights(1.0, 1.0, 1.0)
    s = energy_stack(metrics, unit).clusters
    return np.array([s["fe"] + s["ooo"], s["compute"], s["cache"] + s["movement"]])


def calibrate_weights(conv: SimMetrics, transformer: SimMetrics,
                      targets: CalibrationTargets = CalibrationTargets(),
                      shape: WeightShape = WeightShape()) -> EnergyWeights:
    """Fit weights to baseline runs of a convolution and a transformer suite.

    Unknowns are three scales (front end, compute, cache with movement tied to it).
    Bounded least squares matches the target shares and normalizes the convolution
    total to 1.
    Raises ``InfeasibleCalibration`` when the best positive fit misses a target by more
    than the tolerance; the best fit rides on the exception.
    """
    c = _cluster_counts(conv, shape)
    t = _cluster_counts(transformer, shape)
    if not c.any() or not t.any():
        raise InfeasibleCalibration("calibration runs have no events")
    front, memory = np.array([1.0, 0, 0]), np.array([0, 0, 1.0])
    ct, tt = c / c.sum(), t / t.sum()
    a = np.array([
        ct * front - targets.conv_front * ct,
        tt * front - targets.transformer_front * tt,
        tt * memory - targets.transformer_memory * tt,
        ct,
    ])
    b = np.array([0.0, 0.0, 0.0, 1.0])
    sol = lsq_linear(a, b, bounds=(1e-12, np.inf), method="bvls")
    w = shape.weights(*(float(v) for v in sol.x / c.sum()))

    sc, st = energy_stack(conv, w), energy_stack(transformer, w)
    got = {"conv_front": sc.fraction("fe", "ooo"),
           "transformer_front": st.fraction("fe", "ooo"),
           "transformer_memory": st.fraction("cache", "movement")}
    misses = [k for k, v in got.items() if abs(v - getattr(targets, k)) > targets.tolerance]
    if misses:
        detail = ", ".join(f"{k}={got[k]:.3f} (target {getattr(targets, k):.2f})" for k in misses)
        raise InfeasibleCalibration(f"no weights within tolerance: {detail}", w, got)
    return w


@functools.lru_cache(maxsize=None)
def baseline_weights(scale: float = 0.25, shape: WeightShape = WeightShape()) -> EnergyWeights:
    """Weights calibrated on M128 runs of the builtin convolution and transformer suites."""
    m = parse_config("M128")
    conv = combine(run_suite(m, layers.resnet50_conv(), scale=scale))
    transformer = combine(run_suite(m, layers.transformer_ip(), scale=scale))
    return calibrate_weights(conv, transformer, shape=shape)
