"""Random-walk model checking of the directory against a shadow of cache contents.

The shadow keeps a data version per copy (L1, L2 and near-L3 partitions) and
applies only the actions the directory returns. A load that observes a stale
version, a writer coexisting with another holder, an owner bit that does not
match a modified L1 copy, or a presence bit without a partition copy are all
reported as violations.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .coherence import (ActionKind, AgentKind, CoherenceDirectory, CoherenceViolation, State,
                        core, near_l3)


@dataclass
class Shadow:
    cores: int
    slices: int
    latest: dict[int, int] = field(default_factory=dict)
    home: dict[int, int] = field(default_factory=dict)
    l1: list[dict[int, tuple[int, bool]]] = field(default_factory=list)
    l2: list[dict[int, tuple[int, bool]]] = field(default_factory=list)
    part: list[dict[int, tuple[int, bool]]] = field(default_factory=list)

    def __post_init__(self):
        self.l1 = [{} for _ in range(self.cores)]
        self.l2 = [{} for _ in range(self.cores)]
        self.part = [{} for _ in range(self.slices)]

    def copies(self, agent):
        if agent.kind is AgentKind.CORE:
            return self.l2[agent.index]
        return self.part[agent.index]

    def apply(self, actions) -> None:
        for act in actions:
            line, a = act.line, act.agent
            if act.kind is ActionKind.SNOOP_L1_WRITEBACK:
                self._l1_to_l2(a.index, line, drop=False)
            elif act.kind is ActionKind.SNOOP_L1_INVALIDATE:
                self._l1_to_l2(a.index, line, drop=True)
            elif act.kind is ActionKind.WRITEBACK:
                held = self.copies(a).get(line)
                if held is None:
                    raise CoherenceViolation(f"writeback from {a} without a copy of {line}")
                self.home[line] = held[0]
                self.copies(a)[line] = (held[0], False)
            elif act.kind is ActionKind.INVALIDATE:
                self.copies(a).pop(line, None)
                if a.kind is AgentKind.CORE:
                    self.l1[a.index].pop(line, None)

    def _l1_to_l2(self, c: int, line: int, drop: bool) -> None:
        held = self.l1[c].get(line)
        if held is None:
            return
        if held[1]:
            self.l2[c][line] = (held[0], True)
        if drop:
            del self.l1[c][line]
        else:
            self.l1[c][line] = (held[0], False)


OPS = ("core_load", "core_store", "tfu_l2_load", "tfu_l2_store", "tfu_l3_load",
       "tfu_l3_store", "evict_core", "evict_l1", "evict_near")


@dataclass
class CheckResult:
    transitions: int
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations


class ModelChecker:
    def __init__(self, cores: int = 2, slices: int = 2, lines: int = 8, seed: int = 0):
        self.d = CoherenceDirectory(cores, slices)
        self.sh = Shadow(cores, slices)
        self.lines = lines
        self.rng = random.Random(seed)

    # each step returns nothing; violations raise
    def step(self, op: str, who: int, line: int) -> None:
        d, sh = self.d, self.sh
        if op in ("core_load", "tfu_l2_load"):
            sh.apply(getattr(d, op)(who, line))
            self._read_core(who, line, into_l1=op == "core_load")
        elif op in ("core_store", "tfu_l2_store"):
            sh.apply(getattr(d, op)(who, line))
            v = sh.latest.get(line, 0) + 1
            sh.latest[line] = v
            if op == "core_store":
                self._fill_l2(who, line)
                sh.l1[who][line] = (v, True)
            else:
                sh.l1[who].pop(line, None)
                sh.l2[who][line] = (v, True)
        elif op == "tfu_l3_load":
            sh.apply(d.tfu_l3_load(who, line))
            held = sh.part[who].get(line)
            if held is None:
                held = (sh.home.get(line, 0), False)
                sh.part[who][line] = held
            self._observe(line, held[0], f"near_l3{who}")
        elif op == "tfu_l3_store":
            sh.apply(d.tfu_l3_store(who, line))
            v = sh.latest.get(line, 0) + 1
            sh.latest[line] = v
            sh.part[who][line] = (v, True)
        elif op == "evict_core":
            if line in sh.l2[who]:
                sh.apply(d.evict(core(who), line))
                sh.l1[who].pop(line, None)
                sh.l2[who].pop(line, None)
        elif op == "evict_l1":
            held = sh.l1[who].pop(line, None)
            if held is not None and held[1]:
                sh.l2[who][line] = (held[0], True)
                d.l1_writeback(who, line)
        elif op == "evict_near":
            if line in sh.part[who]:
                sh.apply(d.evict(near_l3(who), line))
                sh.part[who].pop(line, None)
        self.check(line)

    def _fill_l2(self, c: int, line: int) -> None:
        if line not in self.sh.l2[c]:
            self.sh.l2[c][line] = (self.sh.home.get(line, 0), False)

    def _read_core(self, c: int, line: int, into_l1: bool) -> None:
        sh = self.sh
        if into_l1 and line in sh.l1[c]:
            v = sh.l1[c][line][0]
        else:
            self._fill_l2(c, line)
            v = sh.l2[c][line][0]
            if into_l1:
                sh.l1[c][line] = (v, False)
        self._observe(line, v, f"core{c}")

    def _observe(self, line: int, v: int, who: str) -> None:
        if v != self.sh.latest.get(line, 0):
            raise CoherenceViolation(
                f"{who} read stale version {v} of line {line} (latest {self.sh.latest.get(line, 0)})")

    def check(self, line: int) -> None:
        d, sh = self.d, self.sh
        d.check(line)
        for c in range(sh.cores):
            st = d.state(core(c), line)
            if (st is State.I) != (line not in sh.l2[c]):
                raise CoherenceViolation(f"core{c} presence mismatch on line {line}: {st}")
            if line in sh.l1[c] and line not in sh.l2[c]:
                raise CoherenceViolation(f"core{c} L1 holds line {line} without L2")
            dirty_l1 = sh.l1[c].get(line, (0, False))[1]
            if dirty_l1 != d.l1_owner(c, line):
                raise CoherenceViolation(f"core{c} owner bit disagrees with L1 on line {line}")
        for s in range(sh.slices):
            present = line in sh.part[s]
            if present != (s in d.near_l3_bits(line)):
                raise CoherenceViolation(f"near-L3 bit of slice {s} disagrees on line {line}")

    def run(self, transitions: int) -> CheckResult:
        rng = self.rng
        cores, slices = self.sh.cores, self.sh.slices
        violations: list[str] = []
        for _ in range(transitions):
            op = rng.choice(OPS)
            who = rng.randrange(slices if op.endswith(("near",)) or "l3" in op else cores)
            line = rng.randrange(self.lines)
            try:
                self.step(op, who, line)
            except CoherenceViolation as e:
                violations.append(str(e))
                break
        return CheckResult(transitions, violations)


def model_check(transitions: int = 1_000_000, cores: int = 2, slices: int = 2, lines: int = 8,
                seed: int = 0) -> CheckResult:
    """Random exploration; agents are ``cores`` core domains plus one near-L3 TFU per slice."""
    return ModelChecker(cores, slices, lines, seed).run(transitions)
