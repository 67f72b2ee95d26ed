import copy
import io
from collections import deque

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxsim.memhier import (ActionKind, BandwidthViolation, CacheConfig, CoherenceDirectory,
                             Hierarchy, InvalidCacheConfig, InvalidWayCount, Level,
                             MovementCounters, NoTraffic, PortTable, Replacement, SetAssocCache,
                             State, default_l3, dm_overhead, hitrates, model_check,
                             partition_l3)
from proxsim.memhier.coherence import core, near_l3
from proxsim.memhier.modelcheck import ModelChecker


class TestLatency:
    def test_l1_hit_is_tag_plus_data(self):
        h = Hierarchy()
        first = h.load(Level.L1, 0x1000, 0)
        t = first + 10
        assert h.load(Level.L1, 0x1000, t) == t + 1 + 4

    def test_outer_levels_are_slower(self):
        h = Hierarchy()
        h.warm(Level.L2, [1])
        h.warm(Level.L3, [2])
        l2 = h.load(Level.L1, 64, 0)
        l3 = h.load(Level.L1, 128, 0)
        dram = h.load(Level.L1, 192, 0)
        assert 5 < l2 < l3 < dram

    def test_second_access_no_new_movement(self):
        h = Hierarchy()
        for entry in (Level.L1, Level.L2, Level.L3):
            addr = {Level.L1: 0x10000, Level.L2: 0x20000, Level.L3: 0x30000}[entry]
            t = h.load(entry, addr, 0)
            before = h.c.snapshot()
            h.load(entry, addr, t + 1)
            after = h.c.minus(before)
            assert all(after.fill_bytes[k] == 0 and after.evict_bytes[k] == 0
                       for k in after.fill_bytes)
            assert after.rf_load_bytes == 64

    def test_inner_levels_bypassed(self):
        h = Hierarchy()
        h.load(Level.L2, 0x4000, 0)
        assert 0x4000 // 64 not in h.l1
        assert h.c.fill_bytes["L1-L2"] == 0

    def test_mshr_merges_in_flight_miss(self):
        h = Hierarchy()
        a = h.load(Level.L1, 0x8000, 0)
        b = h.load(Level.L1, 0x8000, 1)
        assert b <= a + 1
        assert h.stats.dram_reads == 1

    def test_near_l3_without_partition(self):
        h = Hierarchy(l3=default_l3(0))
        with pytest.raises(ValueError):
            h.load(Level.L3, 0, 0)


class TestCoherence:
    def test_tfu_l2_store_invalidates_l1_owner(self):
        h = Hierarchy()
        t = h.store(Level.L1, 0x100, 0)
        line = 0x100 // 64
        assert h.dir.l1_owner(0, line)
        h.store(Level.L2, 0x100, t + 1)
        assert line not in h.l1
        assert not h.dir.l1_owner(0, line)
        assert h.c.evict_bytes["L1-L2"] == 64
        h.dir.check(line)

    def test_tfu_l2_load_pulls_l1_dirty_copy(self):
        h = Hierarchy()
        t = h.store(Level.L1, 0x200, 0)
        h.load(Level.L2, 0x200, t + 1)
        line = 0x200 // 64
        assert line in h.l1 and not h.dir.l1_owner(0, line)

    def test_near_l3_store_invalidates_core(self):
        h = Hierarchy()
        t = h.load(Level.L1, 0x300, 0)
        h.store(Level.L3, 0x300, t + 1)
        line = 0x300 // 64
        assert line not in h.l1 and line not in h.l2
        assert h.dir.near_l3_bits(line) == {0}

    def test_model_check_clean(self):
        res = model_check(200_000, cores=2, slices=2, lines=8, seed=1)
        assert res.ok, res.violations
        assert res.transitions == 200_000

    def test_mutant_missing_invalidate_detected(self):
        class Broken(CoherenceDirectory):
            def _exclusive(self, req, line):
                e = self.entry(line)
                e.states[req] = State.M
                return []

        mc = ModelChecker(2, 2, 8, seed=0)
        mc.d = Broken(2, 2)
        assert not mc.run(20_000).ok

    def test_mutant_missing_snoop_detected(self):
        class Broken(CoherenceDirectory):
            def tfu_l2_load(self, c, line):
                return self._shared(core(c), line)

        mc = ModelChecker(2, 2, 8, seed=0)
        mc.d = Broken(2, 2)
        assert not mc.run(50_000).ok


class _RefMesi:
    """Reference permissions: holders and at most one writer per line."""

    def __init__(self):
        self.holders: dict[int, set] = {}
        self.writer: dict[int, object] = {}

    def read(self, a, line):
        self.holders.setdefault(line, set()).add(a)
        if self.writer.get(line) not in (None, a):
            self.writer.pop(line)

    def write(self, a, line):
        self.holders[line] = {a}
        self.writer[line] = a

    def evict(self, a, line):
        self.holders.get(line, set()).discard(a)
        if self.writer.get(line) == a:
            self.writer.pop(line)


def _dir_key(d: CoherenceDirectory):
    return tuple(sorted((line, tuple(sorted((str(a), s.value) for a, s in e.states.items())),
                         tuple(sorted(e.l1_owner)))
                        for line, e in d.entries.items()))


class TestExhaustiveTwoLineTwoAgent:
    AGENTS = (core(0), near_l3(0))

    def _moves(self):
        c, n = self.AGENTS
        for line in (0, 1):
            yield ("core_load", c, line)
            yield ("core_store", c, line)
            yield ("tfu_l2_load", c, line)
            yield ("tfu_l2_store", c, line)
            yield ("tfu_l3_load", n, line)
            yield ("tfu_l3_store", n, line)
            yield ("evict", c, line)
            yield ("evict", n, line)
            yield ("l1_writeback", c, line)

    def _apply(self, d, ref, move):
        op, agent, line = move
        if op == "evict":
            d.evict(agent, line)
            ref.evict(agent, line)
        elif op == "l1_writeback":
            d.l1_writeback(agent.index, line)
        else:
            acts = getattr(d, op)(agent.index, line)
            kinds = {(a.kind, a.agent) for a in acts}
            (ref.write if op.endswith("store") else ref.read)(agent, line)
            return acts, kinds
        return [], set()

    def test_all_reachable_states_match_reference(self):
        start = (CoherenceDirectory(1, 1), _RefMesi())
        seen = {_dir_key(start[0])}
        todo = deque([start])
        while todo:
            d0, r0 = todo.popleft()
            for move in self._moves():
                d, ref = copy.deepcopy(d0), copy.deepcopy(r0)
                owner_before = d.l1_owner(0, move[2])
                acts, kinds = self._apply(d, ref, move)
                d.check_all()
                for line in (0, 1):
                    held = {a for a in self.AGENTS if d.state(a, line) is not State.I}
                    assert held == ref.holders.get(line, set()), (move, line)
                    writer = ref.writer.get(line)
                    if writer is not None:
                        assert d.state(writer, line) in (State.M, State.E)
                    m = [a for a in self.AGENTS if d.state(a, line) is State.M]
                    assert len(m) <= 1
                    if m:
                        assert held == set(m)
                # a TFU store under an L1 owner must snoop-invalidate the L1 first
                if move[0] == "tfu_l2_store" and owner_before:
                    assert (ActionKind.SNOOP_L1_INVALIDATE, core(0)) in kinds
                key = _dir_key(d)
                if key not in seen:
                    seen.add(key)
                    todo.append((d, ref))
        assert len(seen) > 10


class TestPartition:
    def test_two_of_eleven_is_256k(self):
        cfg = partition_l3(default_l3(), 2)
        assert cfg.partition_bytes() == 256 * 1024

    def test_eight_ways(self):
        assert partition_l3(default_l3(), 8).partition_bytes() == 1024 * 1024

    @pytest.mark.parametrize("ways", [0, 11, 12])
    def test_invalid(self, ways):
        with pytest.raises(InvalidWayCount):
            partition_l3(default_l3(), ways)

    def test_partition_excluded_from_shared_ways(self):
        h = Hierarchy(l3=partition_l3(default_l3(), 3))
        assert h.l3[0].ways == 8 and h.part.ways == 3

    def test_bad_config(self):
        with pytest.raises(InvalidCacheConfig):
            CacheConfig(capacity_bytes=1000, ways=8)


class TestCounters:
    def test_no_traffic(self):
        with pytest.raises(NoTraffic):
            dm_overhead(MovementCounters())

    def test_warm_window_is_zero(self):
        h = Hierarchy()
        lines = range(64)
        t = 0
        for _ in range(2):
            for ln in lines:
                t = h.load(Level.L1, ln * 64, t)
        before = h.c.snapshot()
        for ln in lines:
            t = h.load(Level.L1, ln * 64, t)
        assert dm_overhead(h.c.minus(before)).total == 0.0

    def test_ratio(self):
        c = MovementCounters()
        c.fill("L1-L2", 64)
        c.evict("L2-L3", 64)
        c.fill("L3-DRAM", 640)
        c.rf_load_bytes = 512
        rep = dm_overhead(c)
        assert rep.total == pytest.approx(0.25)
        assert rep.per_interface["L1-L2"] == pytest.approx(0.125)
        assert rep.per_interface["L3-DRAM"] == pytest.approx(1.25)

    def test_single_address_hitrate(self):
        h = Hierarchy()
        t = 0
        for _ in range(100):
            t = h.load(Level.L1, 0x40, t)
        assert hitrates(h.c)["L1"] == pytest.approx(0.99)
        assert "L3P" not in hitrates(h.c)

    def test_counters_monotone(self):
        h = Hierarchy()
        prev = h.c.snapshot()
        t = 0
        for i in range(2000):
            t = h.access(Level.L1, (i * 7919 % 4096) * 64, t, store=i % 3 == 0)
            cur = h.c.snapshot()
            for k in cur.fill_bytes:
                assert cur.fill_bytes[k] >= prev.fill_bytes[k]
                assert cur.evict_bytes[k] >= prev.evict_bytes[k]
            prev = cur


class TestBandwidth:
    def test_port_table_spills_to_next_cycle(self):
        p = PortTable("x", 2)
        assert [p.reserve(5) for _ in range(5)] == [5, 5, 6, 6, 7]
        assert p.stalls > 0
        p.audit()

    def test_audit_catches_overflow(self):
        p = PortTable("x", 1)
        p.used[3] = 2
        with pytest.raises(BandwidthViolation):
            p.audit()

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from(list(Level)), st.integers(0, 2047),
                              st.booleans(), st.integers(0, 3)), min_size=1, max_size=300))
    def test_conservation_random_traffic(self, reqs):
        h = Hierarchy()
        t = 0
        for lvl, line, store, gap in reqs:
            t += gap
            h.access(lvl, line * 64, t, store)
        h.audit()
        for p in h.ports():
            assert all(n <= p.ports for n in p.used.values())


class TestWarmup:
    def test_second_pass_identical(self):
        trace = [((i * 37) % 900) * 64 for i in range(3000)]

        def run():
            h = Hierarchy()
            t = 0
            for a in trace:
                t = h.load(Level.L1, a, t)
            before = h.c.snapshot()
            for a in trace:
                t = h.load(Level.L1, a, t)
            return hitrates(h.c.minus(before))

        assert run() == run()

    def test_steady_state_repeats(self):
        trace = [((i * 37) % 900) * 64 for i in range(3000)]
        h = Hierarchy()
        t = 0
        rates = []
        for _ in range(3):
            before = h.c.snapshot()
            for a in trace:
                t = h.load(Level.L1, a, t)
            rates.append(hitrates(h.c.minus(before)))
        assert rates[1] == rates[2]

    def test_warm_charges_nothing(self):
        h = Hierarchy()
        h.warm(Level.L2, range(100))
        h.warm(Level.L3, range(100, 200))
        assert all(v == 0 for v in h.c.fill_bytes.values())

    def test_trace_dump(self):
        buf = io.StringIO()
        h = Hierarchy(trace=buf)
        h.load(Level.L1, 0x1000, 0)
        rows = buf.getvalue().splitlines()
        assert rows and all(len(r.split()) == 4 for r in rows)
        assert {r.split()[2] for r in rows} <= {"fill", "evict"}


class TestCache:
    def test_lru_order(self):
        c = SetAssocCache(1, 2)
        c.insert(1)
        c.insert(2)
        c.lookup(1)
        assert c.insert(3) == (2, False)

    def test_srrip_scan_resistance(self):
        c = SetAssocCache(1, 4, Replacement.RRIP)
        for ln in (1, 2):
            c.insert(ln)
            c.lookup(ln)
        for ln in range(100, 104):  # short scan
            c.insert(ln)
        assert 1 in c and 2 in c

    def test_dirty_victim(self):
        c = SetAssocCache(1, 1)
        c.insert(1, dirty=True)
        assert c.insert(2) == (1, True)
