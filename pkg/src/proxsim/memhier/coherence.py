"""MESIF directory with the per-line L1 owner bit and near-L3 TFU presence bits.

Every caching agent is either a core's private domain (L1 + L2, plus the TFUs
attached to them) or the partitioned region of one L3 slice used by that
slice's near-L3 TFU. The directory decides permissions and returns the
actions the hierarchy must perform on the agents' caches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum


class State(Enum):
    M = "M"
    E = "E"
    S = "S"
    I = "I"
    F = "F"


class AgentKind(Enum):
    CORE = "core"
    NEAR_L3 = "near_l3"


class ActionKind(Enum):
    WRITEBACK = "writeback"              # agent's dirty copy goes to its home slice
    INVALIDATE = "invalidate"            # agent drops its copy
    SNOOP_L1_WRITEBACK = "snoop_l1_wb"   # core L1 pushes its modified copy into L2
    SNOOP_L1_INVALIDATE = "snoop_l1_inv" # core L1 copy is written back (if dirty) and dropped


class CoherenceViolation(AssertionError):
    pass


@dataclass(frozen=True)
class Agent:
    kind: AgentKind
    index: int

    def __str__(self):
        return f"{self.kind.value}{self.index}"


def core(i: int) -> Agent:
    return Agent(AgentKind.CORE, i)


def near_l3(i: int) -> Agent:
    return Agent(AgentKind.NEAR_L3, i)


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    agent: Agent
    line: int


@dataclass
class DirEntry:
    states: dict[Agent, State] = field(default_factory=dict)
    l1_owner: set[int] = field(default_factory=set)


_WRITABLE = (State.M, State.E)


class CoherenceDirectory:
    def __init__(self, cores: int = 1, slices: int = 1):
        self.cores = cores
        self.slices = slices
        self.entries: dict[int, DirEntry] = {}

    def home(self, line: int) -> int:
        return line % self.slices

    def entry(self, line: int) -> DirEntry:
        e = self.entries.get(line)
        if e is None:
            e = self.entries[line] = DirEntry()
        return e

    def state(self, agent: Agent, line: int) -> State:
        e = self.entries.get(line)
        return e.states.get(agent, State.I) if e else State.I

    def l1_owner(self, core_index: int, line: int) -> bool:
        e = self.entries.get(line)
        return bool(e) and core_index in e.l1_owner

    def near_l3_bits(self, line: int) -> set[int]:
        e = self.entries.get(line)
        if not e:
            return set()
        return {a.index for a in e.states if a.kind is AgentKind.NEAR_L3}

    # -- internal transitions ------------------------------------------------

    def _flush(self, e: DirEntry, agent: Agent, line: int, out: list) -> None:
        """Write back a modified holder (snooping its L1 first when it owns the line)."""
        if agent.kind is AgentKind.CORE and agent.index in e.l1_owner:
            out.append(Action(ActionKind.SNOOP_L1_WRITEBACK, agent, line))
            e.l1_owner.discard(agent.index)
        out.append(Action(ActionKind.WRITEBACK, agent, line))

    def _shared(self, req: Agent, line: int) -> list[Action]:
        e = self.entry(line)
        if e.states.get(req, State.I) is not State.I:
            return []
        out: list[Action] = []
        for a, s in list(e.states.items()):
            if s is State.M:
                self._flush(e, a, line, out)
                e.states[a] = State.S
            elif s in (State.E, State.F):
                e.states[a] = State.S
        e.states[req] = State.F if e.states else State.E
        return out

    def _exclusive(self, req: Agent, line: int) -> list[Action]:
        e = self.entry(line)
        out: list[Action] = []
        for a, s in list(e.states.items()):
            if a == req:
                continue
            if s is State.M:
                self._flush(e, a, line, out)
            out.append(Action(ActionKind.INVALIDATE, a, line))
            del e.states[a]
            if a.kind is AgentKind.CORE:
                e.l1_owner.discard(a.index)
        e.states[req] = State.M
        return out

    # -- requests ------------------------------------------------------------

    def core_load(self, c: int, line: int) -> list[Action]:
        return self._shared(core(c), line)

    def core_store(self, c: int, line: int) -> list[Action]:
        out = self._exclusive(core(c), line)
        self.entry(line).l1_owner.add(c)
        return out

    def tfu_l2_load(self, c: int, line: int) -> list[Action]:
        e = self.entry(line)
        out: list[Action] = []
        if c in e.l1_owner:
            out.append(Action(ActionKind.SNOOP_L1_WRITEBACK, core(c), line))
            e.l1_owner.discard(c)
        return out + self._shared(core(c), line)

    def tfu_l2_store(self, c: int, line: int) -> list[Action]:
        e = self.entry(line)
        out: list[Action] = []
        if e.states.get(core(c), State.I) is not State.I:
            out.append(Action(ActionKind.SNOOP_L1_INVALIDATE, core(c), line))
        e.l1_owner.discard(c)
        return out + self._exclusive(core(c), line)

    def tfu_l3_load(self, s: int, line: int) -> list[Action]:
        return self._shared(near_l3(s), line)

    def tfu_l3_store(self, s: int, line: int) -> list[Action]:
        return self._exclusive(near_l3(s), line)

    def l1_writeback(self, c: int, line: int) -> None:
        """Core L1 evicted its modified copy into its L2; the line stays M in L2."""
        e = self.entries.get(line)
        if e:
            e.l1_owner.discard(c)

    def evict(self, agent: Agent, line: int) -> list[Action]:
        e = self.entries.get(line)
        if not e or agent not in e.states:
            return []
        out: list[Action] = []
        if e.states.pop(agent) is State.M:
            self._flush(e, agent, line, out)
        if agent.kind is AgentKind.CORE:
            e.l1_owner.discard(agent.index)
        if not e.states:
            del self.entries[line]
        return out

    # -- checking ------------------------------------------------------------

    def check(self, line: int) -> None:
        e = self.entries.get(line)
        if not e:
            return
        holders = [(a, s) for a, s in e.states.items() if s is not State.I]
        writers = [a for a, s in holders if s in _WRITABLE]
        if len(writers) > 1 or (writers and len(holders) > 1):
            raise CoherenceViolation(f"line {line:#x}: SWMR broken by {holders}")
        if sum(s is State.F for _, s in holders) > 1:
            raise CoherenceViolation(f"line {line:#x}: two forwarders")
        for c in e.l1_owner:
            if e.states.get(core(c)) is not State.M:
                raise CoherenceViolation(f"line {line:#x}: L1 owner bit on non-modified core {c}")

    def check_all(self) -> None:
        for line in self.entries:
            self.check(line)
