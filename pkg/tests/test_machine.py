import pytest
from hypothesis import given, strategies as st

from proxsim import layers
from proxsim.layers import InvalidLayer, LayerKind, LayerSpec
from proxsim.machine import (Policy, Schedule, ThreadRole, UnknownConfig, bind_threads,
                             config_from_capabilities, config_from_dict, config_names,
                             describe_capabilities, parse_config, partition_static_asymmetric,
                             run_layer, run_suite, select_levels, with_ports)
from proxsim.memhier import Level


CONV = layers.resnet50_conv()[10].scaled(0.25)


class TestConfigs:
    @pytest.mark.parametrize("name,core,tfus", [
        ("M128", 128, (0, 0, 0)), ("M512", 512, (0, 0, 0)),
        ("P256", 128, (128, 64, 64)), ("P640", 256, (256, 256, 128)),
    ])
    def test_notation(self, name, core, tfus):
        m = parse_config(name)
        assert m.core_macs_per_cycle == core and m.tfu_widths == tfus

    def test_peak_is_sum_of_widths(self):
        assert parse_config("P640").peak_macs_per_cycle == 640
        assert parse_config("P256").peak_macs_per_cycle == 256
        assert parse_config("M256").peak_macs_per_cycle == 256

    def test_unknown(self):
        with pytest.raises(UnknownConfig):
            parse_config("Q100")

    def test_case_insensitive(self):
        assert parse_config("p256") == parse_config("P256")

    def test_document_overrides(self):
        m = config_from_dict({"base": "P256", "l2": {"shared_rw_ports_64B": 1},
                              "l3_tfu_ways": 3})
        assert m.l2.shared_rw_ports_64B == 1
        assert m.l3.partitioned_ways_for_tfu == 3
        with pytest.raises(UnknownConfig):
            config_from_dict({"base": "P256", "no_such_field": 1})

    def test_port_variant_sizes_compute_per_port(self):
        m = with_ports(parse_config("P640"), 2, 1, 1)
        assert m.tfu_widths == (256, 128, 128)
        assert m.l2.shared_rw_ports_64B == 1


class TestCapabilities:
    def test_p640(self):
        rep = describe_capabilities(parse_config("P640"))
        assert rep["tfus"] == {"L1": 256, "L2": 256, "L3": 128}

    def test_baseline_has_no_tfus(self):
        rep = describe_capabilities(parse_config("M128"))
        assert rep["tfus"] == {}
        assert set(rep["binding"].values()) <= {"legacy-core", "idle"}

    @pytest.mark.parametrize("name", config_names())
    def test_roundtrip(self, name):
        m = parse_config(name)
        assert config_from_capabilities(describe_capabilities(m)).name == name

    def test_binding_one_thread_per_tfu(self):
        b = bind_threads(parse_config("P256"))
        for role in (ThreadRole.TFU_L1, ThreadRole.TFU_L2, ThreadRole.TFU_L3):
            assert b.thread_of(role) is not None
        roles = list(b.to_dict().values())
        assert len(roles) == 4 and len(set(roles)) == 4


class TestPlacement:
    def test_levels_by_kind(self):
        assert select_levels(LayerKind.CONVOLUTION) == {Level.L1, Level.L2, Level.L3}
        assert select_levels(LayerKind.INNER_PRODUCT) == {Level.L2, Level.L3}
        assert select_levels(LayerKind.POOLING) == {Level.L3}
        assert select_levels(LayerKind.CONCAT, outer_l2=True) == {Level.L2, Level.L3}

    def test_inner_product_never_touches_l1(self):
        ip = layers.transformer_ip()[0]
        r = run_layer(parse_config("P256"), ip, Policy(levels=frozenset({Level.L2})))
        assert r.counters.lookups.get("L1", 0) == 0


class TestStaticAsymmetric:
    @pytest.mark.parametrize("units,strengths,want", [
        (10, [2, 2, 1], [4, 4, 2]),
        (9, [1, 1, 1], [3, 3, 3]),
        (11, [2, 2, 1], [5, 4, 2]),
        (0, [3, 1], [0, 0]),
    ])
    def test_examples(self, units, strengths, want):
        assert partition_static_asymmetric(units, strengths) == want

    @given(st.integers(0, 10_000), st.lists(st.integers(1, 16), min_size=1, max_size=6))
    def test_sums_and_stays_within_one_of_quota(self, units, strengths):
        alloc = partition_static_asymmetric(units, strengths)
        assert sum(alloc) == units
        total = sum(strengths)
        for a, s in zip(alloc, strengths):
            assert abs(a - units * s / total) < 1

    @given(st.lists(st.integers(1, 8), min_size=1, max_size=5), st.integers(1, 50))
    def test_divisible_cases_finish_together(self, strengths, k):
        # units divisible by the strength sum: every worker finishes at the same time
        units = k * sum(strengths)
        alloc = partition_static_asymmetric(units, strengths)
        finish = [a / s for a, s in zip(alloc, strengths)]
        assert max(finish) - min(finish) <= 1 / min(strengths)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            partition_static_asymmetric(-1, [1])
        with pytest.raises(ValueError):
            partition_static_asymmetric(4, [1, 0])


class TestRunLayer:
    def test_work_conservation(self):
        for name in ("M128", "P256", "P640"):
            r = run_layer(parse_config(name), CONV)
            core_macs = sum(w.macs for w in r.workers)
            assert core_macs == r.mac_ops * 64
            assert core_macs * r.cores >= CONV.macs
            assert r.macs == CONV.macs

    def test_all_workers_done_before_layer_ends(self):
        r = run_layer(parse_config("P256"), CONV)
        assert all(w.done_at <= r.cycles for w in r.workers)
        assert max(w.done_at for w in r.workers) == r.cycles

    def test_units_split_by_strength(self):
        r = run_layer(parse_config("P256"), CONV)
        units = {w.role: w.units for w in r.workers}
        assert units["TFU@L1"] == 2 * units["TFU@L2"] == 2 * units["TFU@L3"]

    def test_static_schedule_splits_evenly(self):
        r = run_layer(parse_config("P256"), CONV, Policy(schedule=Schedule.STATIC))
        units = [w.units for w in r.workers]
        assert max(units) - min(units) <= 1

    def test_deterministic(self):
        a = run_layer(parse_config("P256"), CONV)
        b = run_layer(parse_config("P256"), CONV)
        assert a.to_row() == b.to_row()
        assert a.events() == b.events()

    def test_zero_output_layer(self):
        bad = LayerSpec(LayerKind.CONVOLUTION, "empty", 64, 0, 14, 14, 3, 3)
        with pytest.raises(InvalidLayer):
            run_layer(parse_config("M128"), bad)

    def test_psx_off_runs_legacy(self):
        r = run_layer(parse_config("P256"), CONV, Policy(psx=False))
        assert [w.role for w in r.workers] == ["legacy-core"]
        assert r.tfu_ops == 0 and r.psx_core_instructions == 0

    def test_core_side_stream_is_compressed(self):
        base = run_layer(parse_config("M128"), CONV)
        prox = run_layer(parse_config("P256"), CONV)
        assert prox.baseline_instructions == base.legacy_instructions
        assert prox.compression > 5


class TestScaling:
    def test_baseline_grows_then_flattens(self):
        perf = {n: run_layer(parse_config(n), CONV).macs_per_cycle_per_core
                for n in ("M128", "M256", "M512")}
        assert perf["M128"] < perf["M256"] <= perf["M512"] * 1.001
        assert perf["M512"] / perf["M256"] < perf["M256"] / perf["M128"]

    def test_more_tfu_compute_is_not_slower(self):
        p256 = run_layer(parse_config("P256"), CONV).macs_per_cycle_per_core
        p640 = run_layer(parse_config("P640"), CONV).macs_per_cycle_per_core
        assert p640 >= p256

    def test_suite_weights_repeated_shapes(self):
        ls = [CONV, CONV, CONV]
        (r,) = run_suite(parse_config("M128"), ls)
        single = run_layer(parse_config("M128"), CONV)
        assert r.multiplicity == 3
        assert r.cycles == 3 * single.cycles and r.macs == 3 * single.macs
