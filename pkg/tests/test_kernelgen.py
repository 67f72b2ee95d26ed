import statistics

import pytest
from hypothesis import given, settings, strategies as st

from proxsim import kernelgen as kg
from proxsim import psx
from proxsim.layers import (InvalidConfig, LayerKind, LayerSpec, UnknownModel, builtin_model,
                            dump_layers, load_layers, resnet50_conv, transformer_ip)
from proxsim.psx import LoopNest, Opcode, PsxInstr, PsxProgram
from proxsim.tfu import TranslationCache, tc_lookup

from oracles import brute_force_weight_reuse, reference_trace


def conv(ic, oc, hw, k=1, stride=1, pad=None):
    return LayerSpec(LayerKind.CONVOLUTION, "t", ic, oc, hw, hw, k, k, stride,
                     pad=k // 2 if pad is None else pad)


def trace_of(programs):
    out = []
    for p in programs:
        out += [tuple(op[:4]) for op in psx.unroll(p)]
    return out


def ref_of(lk):
    return [t[:4] for t in reference_trace(lk.program)]


class TestModels:
    def test_resnet_has_53_layers(self):
        assert len(builtin_model("resnet50_conv")) == 53

    def test_transformer_has_106_layers(self):
        assert len(builtin_model("transformer_ip")) == 106

    def test_unknown_model(self):
        with pytest.raises(UnknownModel):
            builtin_model("vgg16")

    def test_all_builtin_layers_valid(self):
        for name in ("resnet50_conv", "transformer_ip", "resnet50_pool_res5c",
                     "densenet_concat_sample"):
            for layer in builtin_model(name):
                layer.validate()

    def test_resnet_output_planes(self):
        planes = {l.out_w for l in resnet50_conv()}
        assert planes == {112, 56, 28, 14, 7}

    def test_layer_file_roundtrip(self, tmp_path):
        f = tmp_path / "layers.json"
        layers = resnet50_conv()[:3]
        f.write_text(dump_layers(layers))
        assert load_layers(f) == layers

    def test_empty_layer_file(self, tmp_path):
        f = tmp_path / "empty.json"
        f.write_text('{"layers": []}')
        with pytest.raises(InvalidConfig):
            load_layers(f)


class TestAlgorithmReuse:
    def test_1x1_weight_reuse_matches_brute_force(self):
        layer = conv(2, 2, 56, pad=0)
        assert brute_force_weight_reuse(layer) == 3136
        assert kg.algorithm_ops_per_byte(layer).weight_ops_per_byte == 3136

    def test_1x1_input_reuse_is_out_channels(self):
        assert kg.algorithm_ops_per_byte(conv(64, 256, 56)).input_ops_per_byte == 256

    def test_inner_product_weight_reuse_is_one(self):
        for layer in transformer_ip()[:8]:
            assert kg.algorithm_ops_per_byte(layer).weight_ops_per_byte == 1

    def test_trivial_layer_reuse_is_one(self):
        r = kg.algorithm_ops_per_byte(conv(1, 1, 1))
        assert (r.input_ops_per_byte, r.weight_ops_per_byte, r.output_ops_per_byte) == (1, 1, 1)


class TestBlocking:
    def test_fig2_shape(self):
        k = kg.block_layer(conv(64, 64, 56), outputs_per_inner_loop=4)
        (prog,) = kg.lower_to_psx(k.templates[0])
        kinds = [(i.opcode, i.depth) for i in prog.instrs]
        depth = len(prog.loops)
        w_loads = [d for op, d in kinds if op is Opcode.TENSOR_LOAD and d < depth]
        inner = [op for op, d in kinds if d == depth]
        assert w_loads, "weight loads sit outside the output loop"
        assert inner.count(Opcode.TENSOR_LOAD) == 1 and prog.loops.counts[-1] == 4
        assert inner.count(Opcode.MAC_VECTOR) == k.blocking.weights_resident

    def test_degenerate_single_mac(self):
        k = kg.block_layer(conv(1, 1, 1))
        progs = kg.lower_to_psx(k)
        assert len(progs) == 1 and all(c == 1 for c in progs[0].loops.counts)
        r = kg.kernel_traffic(k)
        assert (r.loads_per_mac, r.stores_per_mac) == (2.0, 1.0)

    def test_register_budget_respected(self):
        for layer in resnet50_conv() + transformer_ip()[:6]:
            b = kg.block_layer(layer).blocking
            assert b.registers_used <= 48

    def test_inner_product_streams_weights(self):
        k = kg.block_layer(LayerSpec(LayerKind.INNER_PRODUCT, vec_inputs=1024,
                                     out_channels=1024))
        loads = macs = 0
        for t, n in k.template_counts().items():
            lk = k.templates[t]
            for i, (ins, role) in enumerate(zip(lk.instrs, lk.roles)):
                count = n * psx.instr_instances(lk.program, i)
                if ins.opcode is Opcode.TENSOR_LOAD and role == "weight":
                    loads += count
                macs += count if ins.opcode is Opcode.MAC_VECTOR else 0
        assert loads == macs

    @pytest.mark.parametrize("layer", [conv(20, 48, 6, k=3), conv(64, 80, 7),
                                       conv(32, 64, 8, k=3, stride=2)])
    def test_every_weight_vector_loaded_once_per_tile(self, layer):
        k = kg.block_layer(layer)
        base, size = k.tensors["weight"]
        uses: dict[int, int] = {}
        for lk in k.iter_kernels():
            for op in psx.iter_unroll(lk.program):
                if op.opcode is Opcode.TENSOR_LOAD and lk.roles[op.static_index] == "weight":
                    uses[op.addr] = uses.get(op.addr, 0) + 1
        assert sorted(uses) == list(range(base, base + size, 64))
        tiles_per_group = layer.out_h * layer.out_w // k.blocking.outputs_per_inner_loop
        assert set(uses.values()) == {tiles_per_group}

    def test_conv_stream_translation_hit_rate(self):
        for layer in resnet50_conv():
            k = kg.block_layer(layer.scaled(0.25))
            tc = TranslationCache()
            for lk in k.iter_tile_kernels(0):
                for op in psx.iter_unroll(lk.program):
                    if op.addr is not None:
                        tc_lookup(tc, op.addr)
            assert tc.hit_rate >= 0.9, layer.name

    def test_rf_below_minimum(self):
        with pytest.raises(kg.UnblockableLayer):
            kg.block_layer(conv(64, 64, 14), rf_size=7)

    def test_small_rf_still_blocks(self):
        k = kg.block_layer(conv(64, 64, 14), rf_size=8)
        assert k.blocking.registers_used <= 8


def _small_layers():
    return [
        conv(8, 32, 6, k=3),
        conv(12, 48, 5, k=1, stride=2, pad=0),
        conv(3, 16, 9, k=7, stride=2),
        LayerSpec(LayerKind.INNER_PRODUCT, vec_inputs=96, out_channels=80),
        LayerSpec(LayerKind.POOLING, "p", 128, 128, 3, 3, 3, 3, 1),
        LayerSpec(LayerKind.CONCAT, in_h=2, in_w=3, sources=(96, 32)),
    ]


class TestLowering:
    @pytest.mark.parametrize("layer", _small_layers(), ids=lambda l: l.kind.value)
    def test_trace_equivalence(self, layer):
        k = kg.block_layer(layer)
        for lk in k.iter_kernels():
            assert trace_of(kg.lower_to_psx(lk)) == ref_of(lk)

    @pytest.mark.parametrize("layer", _small_layers(), ids=lambda l: l.kind.value)
    def test_output_stationary(self, layer):
        k = kg.block_layer(layer)
        stores = [op.addr for p in kg.lower_to_psx(k) for op in psx.unroll(p)
                  if op.opcode is Opcode.TENSOR_STORE]
        assert len(stores) == len(set(stores))

    def test_conv_covers_every_output_once(self):
        layer = conv(8, 40, 6, k=3)
        k = kg.block_layer(layer)
        stores = sorted(op.addr for p in kg.lower_to_psx(k) for op in psx.unroll(p)
                        if op.opcode is Opcode.TENSOR_STORE)
        base = kg.TENSOR_BASES["output"]
        assert stores == [base + 64 * i for i in range(36 * 3)]

    def test_fig2_is_one_program_two_loops(self):
        lk = _fig2_like()
        progs = kg.lower_to_psx(lk)
        assert len(progs) == 1 and len(progs[0].loops) == 2

    def test_five_deep_nest_is_peeled(self):
        lk = _five_deep()
        progs = kg.lower_to_psx(lk)
        assert len(progs) >= 2
        assert all(len(p.loops) <= 4 for p in progs)
        assert trace_of(progs) == ref_of(lk)


def _fig2_like():
    w = PsxInstr(Opcode.TENSOR_LOAD, dest_reg=0, base_addr=0, loops=(0,), addr_strides=(64,),
                 reg_strides=(0,))
    x = PsxInstr(Opcode.TENSOR_LOAD, dest_reg=1, base_addr=4096, loops=(0, 1),
                 addr_strides=(4, 256), reg_strides=(0, 0))
    m = PsxInstr(Opcode.MAC_VECTOR, dest_reg=2, src_regs=(0, 1), loops=(0, 1),
                 reg_strides=(0, 1), src_reg_strides=((0, 0), (0, 0)))
    prog = PsxProgram((w, x, m), LoopNest((16, 4)))
    return kg.LoopKernel(prog, ("weight", "input", "output"), ("c", "j"))


def _five_deep():
    a = PsxInstr(Opcode.TENSOR_LOAD, dest_reg=0, base_addr=0, loops=(0,), addr_strides=(64,),
                 reg_strides=(1,))
    b = PsxInstr(Opcode.TENSOR_LOAD, dest_reg=4, base_addr=1 << 16, loops=(0, 1, 2, 3, 4),
                 addr_strides=(4096, 512, 64, 8, 4), reg_strides=(0, 0, 0, 0, 1))
    c = PsxInstr(Opcode.MAC_VECTOR, dest_reg=10, src_regs=(0, 4), loops=(0, 1, 2, 3, 4),
                 reg_strides=(0, 1, 0, 0, 0), src_reg_strides=((1, 0, 0, 0, 0), (0, 0, 0, 0, 1)))
    d = PsxInstr(Opcode.TENSOR_STORE, src_regs=(10,), src_reg_strides=((0, 1),),
                 base_addr=1 << 20, loops=(0, 1), addr_strides=(128, 64), fire_on=((0, 2),))
    e = PsxInstr(Opcode.VEC_ALU, dest_reg=20, src_regs=(20,), loops=())
    prog = PsxProgram((a, b, c, d, e), LoopNest((3, 2, 2, 3, 2)))
    return kg.LoopKernel(prog, ("weight", "input", "output", "output", "output"),
                         tuple("abcde"))


@settings(max_examples=40, deadline=None)
@given(ic=st.integers(1, 40), oc=st.integers(1, 80), hw=st.integers(1, 9),
       k=st.sampled_from([1, 3]), stride=st.integers(1, 2), rf=st.integers(8, 48))
def test_generated_kernels_stay_in_register_file(ic, oc, hw, k, stride, rf):
    layer = conv(ic, oc, max(hw, k), k, stride)
    ir = kg.block_layer(layer, rf_size=rf)
    top = 0
    for t in ir.templates:
        for p in kg.lower_to_psx(t):
            psx.validate_program(p)
            for op in psx.unroll(p):
                regs = ([op.dest] if op.dest is not None else []) + list(op.srcs)
                top = max([top] + regs)
    assert top < rf


def test_loads_per_mac_matches_unrolled_count():
    """The symbolic count agrees with counting every unrolled op."""
    for layer in _small_layers()[:4]:
        ir = kg.block_layer(layer)
        ops = [t[0] for lk in ir.iter_kernels() for t in reference_trace(lk.program)]
        expect = ops.count(Opcode.TENSOR_LOAD) / ops.count(Opcode.MAC_VECTOR)
        assert kg.kernel_traffic(ir).loads_per_mac == pytest.approx(expect)


def test_resnet_loads_per_mac_steady():
    vals = [kg.kernel_traffic(kg.block_layer(l)).loads_per_mac for l in resnet50_conv()]
    assert all(0.35 <= v <= 0.65 for v in vals)
    assert abs(statistics.mean(vals) - 0.49) <= 0.10


def test_transformer_loads_per_mac():
    vals = [kg.kernel_traffic(kg.block_layer(l)).loads_per_mac for l in transformer_ip()]
    assert abs(statistics.mean(vals) - 1.35) <= 0.20
