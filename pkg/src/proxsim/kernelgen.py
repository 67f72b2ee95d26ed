"""Blocked, output-stationary kernels for DNN primitives and their PSX lowering.

A layer is cut into output tiles. Each tile is one unit of work and runs as
one or more PSX programs (the reduction may be split across programs; the
accumulators stay resident in the data registers in between). Programs are
stored once per distinct shape as templates whose base addresses are
relative to the start of each tensor, so symbolic analytics never need to
materialize a whole layer.
"""

from __future__ import annotations

import dataclasses
import itertools
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator, Optional

from . import psx
from .layers import LayerKind, LayerSpec
from .psx import LoopNest, Opcode, PsxInstr, PsxProgram

VECTOR_BYTES = 64
ACC_LANES = 16          # int32 accumulators per 64B vector
IC_PER_MAC = 4          # int8 inputs folded into each accumulator lane per MAC
MAX_OUTPUTS_PER_LOOP = 14
MAX_CONV_REDUCE_STEPS = 12
MAX_IP_REDUCE_STEPS = 32
IP_ACCUMULATORS = 4

TENSOR_BASES = {"input": 0x1000_0000, "weight": 0x4000_0000, "output": 0x7000_0000,
                "input1": 0x2000_0000}


class UnblockableLayer(ValueError):
    pass


@dataclass(frozen=True)
class BlockingParams:
    outputs_per_inner_loop: int
    weights_resident: int
    accumulators_used: int
    buffer_depth: int = 1
    reduce_steps: int = 1
    vector_bytes: int = VECTOR_BYTES

    @property
    def registers_used(self) -> int:
        return (self.accumulators_used + self.buffer_depth * self.weights_resident
                + self.outputs_per_inner_loop)


@dataclass(frozen=True)
class LoopKernel:
    """An unconstrained loop nest (any depth) with role-annotated body ops."""

    program: PsxProgram
    roles: tuple[str, ...]
    loop_names: tuple[str, ...]

    @property
    def instrs(self):
        return self.program.instrs

    @property
    def loops(self):
        return self.program.loops


@dataclass(frozen=True)
class ProgramRef:
    template: int
    offsets: tuple[tuple[str, int], ...]


@dataclass
class KernelIR:
    layer: LayerSpec
    blocking: BlockingParams
    templates: list[LoopKernel]
    tiles: list[tuple[ProgramRef, ...]]
    tensors: dict[str, tuple[int, int]] = field(default_factory=dict)  # role -> (base, bytes)

    def template_counts(self) -> Counter:
        return Counter(ref.template for tile in self.tiles for ref in tile)

    def materialize(self, ref: ProgramRef) -> LoopKernel:
        tk = self.templates[ref.template]
        offs = dict(ref.offsets)
        instrs = []
        for ins, role in zip(tk.instrs, tk.roles):
            if ins.base_addr is not None:
                ins = dataclasses.replace(
                    ins, base_addr=ins.base_addr + self.tensors[role][0] + offs.get(role, 0))
            instrs.append(ins)
        return LoopKernel(PsxProgram(tuple(instrs), tk.loops), tk.roles, tk.loop_names)

    def iter_tile_kernels(self, tile_index: int) -> Iterator[LoopKernel]:
        for ref in self.tiles[tile_index]:
            yield self.materialize(ref)

    def iter_kernels(self) -> Iterator[LoopKernel]:
        for tile in self.tiles:
            for ref in tile:
                yield self.materialize(ref)

    @property
    def total_macs(self) -> int:
        counts = self.template_counts()
        return sum(n * _count(self.templates[t].program, Opcode.MAC_VECTOR) for t, n in counts.items())


@dataclass(frozen=True)
class ReuseReport:
    input_ops_per_byte: float
    weight_ops_per_byte: float
    output_ops_per_byte: float
    loads_per_mac: Optional[float] = None
    stores_per_mac: Optional[float] = None
    output_reuse_approximate: bool = True


# -- op builder --------------------------------------------------------------

class _Nest:
    """Builds ops against named loops; loops of count 1 are dropped on finish."""

    def __init__(self, loops: list[tuple[str, int]]):
        self.loops = loops
        self.ops: list[tuple] = []

    def op(self, opcode, role, member, *, dest=None, dcoef=None, srcs=(), base=None,
           acoef=None, fire_last=False, nbytes=VECTOR_BYTES):
        self.ops.append((opcode, role, member, dest, dcoef or {}, srcs, base, acoef or {},
                         fire_last, nbytes))

    def finish(self) -> LoopKernel:
        names = [n for n, c in self.loops if c > 1] or [self.loops[-1][0]]
        counts = {n: c for n, c in self.loops}
        instrs, roles = [], []
        for opcode, role, member, dest, dcoef, srcs, base, acoef, fire_last, nbytes in self.ops:
            kept = [n for n in names if n in member]
            fire = ()
            if fire_last:
                fire = tuple((names.index(n), counts[n] - 1) for n in kept
                             if n in fire_last)
            instrs.append(PsxInstr(
                opcode,
                dest_reg=dest,
                src_regs=tuple(r for r, _ in srcs),
                base_addr=base,
                loops=tuple(range(len(kept))),
                addr_strides=tuple(acoef.get(n, 0) for n in kept) if base is not None else (),
                reg_strides=tuple(dcoef.get(n, 0) for n in kept),
                src_reg_strides=tuple(tuple(c.get(n, 0) for n in kept) for _, c in srcs),
                fire_on=fire,
                access_bytes=nbytes,
            ))
            roles.append(role)
        nest = LoopNest(tuple(counts[n] for n in names))
        return LoopKernel(PsxProgram(tuple(instrs), nest), tuple(roles), tuple(names))


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def _largest_divisor_at_most(n: int, cap: int) -> int:
    return max(d for d in _divisors(n) if d <= cap)


# -- convolution -------------------------------------------------------------

def _conv_blocking(layer: LayerSpec, rf_size: int,
                   outputs: Optional[int] = None) -> tuple[int, int, int]:
    icg = -(-layer.in_channels // IC_PER_MAC)
    f_total = layer.kernel_w * icg
    depth = 2 if f_total % 2 == 0 else 1
    oc_blocks = -(-layer.out_channels // ACC_LANES)
    if outputs is not None:
        if layer.out_w % outputs:
            raise ValueError(f"outputs_per_inner_loop={outputs} must divide {layer.out_w}")
        choices = [outputs]
    else:
        choices = sorted((d for d in _divisors(layer.out_w) if d <= MAX_OUTPUTS_PER_LOOP),
                         reverse=True)
    for n_out in choices:
        n_wt = 0
        for w in range(1, oc_blocks + 1):
            if n_out * w + depth * w + n_out <= rf_size:
                n_wt = w
        if n_wt:
            return n_out, n_wt, depth
    raise UnblockableLayer(f"{layer.name}: no accumulator block fits {rf_size} registers")


def _reduce_blocks(kh: int, f_total: int, depth: int, cap: int) -> tuple[int, int]:
    """Steps per program: (kernel rows, flattened kw*ic steps)."""
    if f_total <= cap:
        rows = max(d for d in _divisors(kh) if d * f_total <= cap)
        return rows, f_total
    cands = [d for d in _divisors(f_total) if d <= cap and d % depth == 0]
    return 1, max(cands) if cands else f_total


def _conv_template(n_out, n_wt, depth, rows, fsteps, geom, stores=False) -> LoopKernel:
    row_pitch, pix_step, f_total, out_pitch = geom
    acc = n_out * n_wt
    wreg = acc
    ireg = acc + depth * n_wt
    nest = _Nest([("kh", rows), ("f", fsteps // depth), ("d", depth), ("j", n_out)])
    red = ("kh", "f", "d")
    # weights are stored step-major within an output-channel group, so the
    # vectors of one reduction step are adjacent and the stream stays linear
    step = n_wt * VECTOR_BYTES
    for k in range(n_wt):
        nest.op(Opcode.TENSOR_LOAD, "weight", red, dest=wreg + k, dcoef={"d": n_wt},
                base=k * VECTOR_BYTES, acoef={"kh": f_total * step, "f": depth * step,
                                              "d": step})
    inner = red + ("j",)
    nest.op(Opcode.TENSOR_LOAD, "input", inner, dest=ireg, dcoef={"j": 1}, base=0,
            acoef={"kh": row_pitch, "f": depth * IC_PER_MAC, "d": IC_PER_MAC, "j": pix_step},
            nbytes=IC_PER_MAC)
    for k in range(n_wt):
        nest.op(Opcode.MAC_VECTOR, "output", inner, dest=k, dcoef={"j": n_wt},
                srcs=((ireg, {"j": 1}), (wreg + k, {"d": n_wt})))
    if stores:
        for k in range(n_wt):
            nest.op(Opcode.TENSOR_STORE, "output", inner, srcs=((k, {"j": n_wt}),),
                    base=k * VECTOR_BYTES, acoef={"j": out_pitch}, fire_last=red)
    return nest.finish()


def _writeback_template(n_out, n_wt, out_pitch) -> LoopKernel:
    """Store a finished accumulator block.

    Kept apart from the reduction so stores, which wait for their MAC, never
    sit between the input loads of the reduction in the in-order memory queue.
    """
    nest = _Nest([("j", n_out)])
    for k in range(n_wt):
        nest.op(Opcode.TENSOR_STORE, "output", ("j",), srcs=((k, {"j": n_wt}),),
                base=k * VECTOR_BYTES, acoef={"j": out_pitch})
    return nest.finish()


def _block_conv(layer: LayerSpec, rf_size: int, outputs: Optional[int]) -> KernelIR:
    n_out, n_wt, depth = _conv_blocking(layer, rf_size, outputs)
    icg = -(-layer.in_channels // IC_PER_MAC)
    cp = icg * IC_PER_MAC
    f_total = layer.kernel_w * icg
    kh = layer.kernel_h
    rows, fsteps = _reduce_blocks(kh, f_total, depth, MAX_CONV_REDUCE_STEPS)
    if fsteps % depth:
        depth = 1
    oc_blocks = -(-layer.out_channels // ACC_LANES)
    row_pitch = layer.padded_w * cp
    pix_step = layer.stride * cp
    out_pitch = oc_blocks * VECTOR_BYTES
    w_block = kh * f_total * VECTOR_BYTES
    geom = (row_pitch, pix_step, f_total, out_pitch)

    templates: list[LoopKernel] = []
    index: dict = {}

    def template(key, build):
        if key not in index:
            index[key] = len(templates)
            templates.append(build())
        return index[key]

    red_blocks = [(r, f) for r in range(0, kh, rows) for f in range(0, f_total, fsteps)]
    tiles = []
    for ocb0 in range(0, oc_blocks, n_wt):
        nw = min(n_wt, oc_blocks - ocb0)
        # a tile with a single reduction program stores in place
        fused = len(red_blocks) == 1
        red_t = template(("reduce", nw, fused),
                         lambda: _conv_template(n_out, nw, depth, rows, fsteps, geom, fused))
        wb_t = None if fused else template(
            ("writeback", nw), lambda: _writeback_template(n_out, nw, out_pitch))
        for oh in range(layer.out_h):
            for ow0 in range(0, layer.out_w, n_out):
                pix_in = (oh * layer.stride * layer.padded_w + ow0 * layer.stride) * cp
                out_off = (oh * layer.out_w + ow0) * out_pitch + ocb0 * VECTOR_BYTES
                refs = [ProgramRef(red_t, (
                    ("input", pix_in + r0 * row_pitch + f0 * IC_PER_MAC),
                    ("weight", ocb0 * w_block + (r0 * f_total + f0) * nw * VECTOR_BYTES)))
                    for r0, f0 in red_blocks]
                if fused:
                    refs[0] = ProgramRef(red_t, refs[0].offsets + (("output", out_off),))
                else:
                    refs.append(ProgramRef(wb_t, (("output", out_off),)))
                tiles.append(tuple(refs))
    tensors = {
        "input": (TENSOR_BASES["input"], layer.padded_h * row_pitch),
        "weight": (TENSOR_BASES["weight"], oc_blocks * w_block),
        "output": (TENSOR_BASES["output"], layer.out_h * layer.out_w * out_pitch),
    }
    blocking = BlockingParams(n_out, n_wt, n_out * n_wt, depth, rows * fsteps)
    return KernelIR(layer, blocking, templates, tiles, tensors)


# -- inner product -----------------------------------------------------------

def _ip_template(n_acc, depth, steps, last) -> LoopKernel:
    xreg = n_acc
    wreg = n_acc + depth
    nest = _Nest([("r", steps // depth), ("d", depth)])
    red = ("r", "d")
    nest.op(Opcode.TENSOR_LOAD, "input", red, dest=xreg, dcoef={"d": 1}, base=0,
            acoef={"r": depth * IC_PER_MAC, "d": IC_PER_MAC}, nbytes=IC_PER_MAC)
    for k in range(n_acc):
        nest.op(Opcode.TENSOR_LOAD, "weight", red, dest=wreg + k, dcoef={"d": n_acc},
                base=k * VECTOR_BYTES,
                acoef={"r": depth * n_acc * VECTOR_BYTES, "d": n_acc * VECTOR_BYTES})
    for k in range(n_acc):
        nest.op(Opcode.MAC_VECTOR, "output", red, dest=k,
                srcs=((xreg, {"d": 1}), (wreg + k, {"d": n_acc})))
    if last:
        for k in range(n_acc):
            nest.op(Opcode.TENSOR_STORE, "output", red, srcs=((k, {}),),
                    base=k * VECTOR_BYTES, fire_last=red)
    return nest.finish()


def _block_ip(layer: LayerSpec, rf_size: int) -> KernelIR:
    icg = -(-layer.vec_inputs // IC_PER_MAC)
    oc_blocks = -(-layer.out_channels // ACC_LANES)
    n_acc = min(IP_ACCUMULATORS, oc_blocks)
    steps = _largest_divisor_at_most(icg, MAX_IP_REDUCE_STEPS)
    depth = 1
    for d in _divisors(steps):
        if n_acc + d + d * n_acc <= rf_size:
            depth = d
    if n_acc + 2 > rf_size:
        raise UnblockableLayer(f"{layer.name}: register file too small")
    # weights of each accumulator group are interleaved step-major so a program
    # streams one contiguous region
    w_block = icg * VECTOR_BYTES
    templates, index = [], {}

    def template(na, last):
        if (na, last) not in index:
            index[(na, last)] = len(templates)
            templates.append(_ip_template(na, depth, steps, last))
        return index[(na, last)]

    tiles = []
    n_blocks = icg // steps
    for ocb0 in range(0, oc_blocks, n_acc):
        na = min(n_acc, oc_blocks - ocb0)
        refs = []
        for b in range(n_blocks):
            refs.append(ProgramRef(template(na, b == n_blocks - 1), (
                ("input", b * steps * IC_PER_MAC),
                ("weight", ocb0 * w_block + b * steps * na * VECTOR_BYTES),
                ("output", ocb0 * VECTOR_BYTES))))
        tiles.append(tuple(refs))
    tensors = {
        "input": (TENSOR_BASES["input"], icg * IC_PER_MAC),
        "weight": (TENSOR_BASES["weight"], oc_blocks * w_block),
        "output": (TENSOR_BASES["output"], oc_blocks * VECTOR_BYTES),
    }
    return KernelIR(layer, BlockingParams(1, n_acc, n_acc, depth, steps), templates, tiles, tensors)


# -- pooling and concat ------------------------------------------------------

def _block_pool(layer: LayerSpec, rf_size: int) -> KernelIR:
    vecs = -(-layer.in_channels // VECTOR_BYTES)
    cp = vecs * VECTOR_BYTES
    kw = layer.kernel_w
    rot = kw if kw + 1 <= rf_size else 1
    n_v = max(1, min(vecs, rf_size // (rot + 1)))
    row_pitch = layer.padded_w * cp

    templates, index = [], {}

    def template(nv):
        if nv not in index:
            nest = _Nest([("kh", layer.kernel_h), ("kw", kw)])
            for v in range(nv):
                nest.op(Opcode.TENSOR_LOAD, "input", ("kh", "kw"), dest=nv + v * rot,
                        dcoef={"kw": 1 if rot > 1 else 0}, base=v * VECTOR_BYTES,
                        acoef={"kh": row_pitch, "kw": cp})
            for v in range(nv):
                nest.op(Opcode.VEC_ALU, "output", ("kh", "kw"), dest=v,
                        srcs=((v, {}), (nv + v * rot, {"kw": 1 if rot > 1 else 0})))
            for v in range(nv):
                nest.op(Opcode.TENSOR_STORE, "output", ("kh", "kw"), srcs=((v, {}),),
                        base=v * VECTOR_BYTES, fire_last=("kh", "kw"))
            index[nv] = len(templates)
            templates.append(nest.finish())
        return index[nv]

    tiles = []
    for v0 in range(0, vecs, n_v):
        nv = min(n_v, vecs - v0)
        for oh in range(layer.out_h):
            for ow in range(layer.out_w):
                tiles.append((ProgramRef(template(nv), (
                    ("input", (oh * layer.stride * layer.padded_w + ow * layer.stride) * cp
                     + v0 * VECTOR_BYTES),
                    ("output", (oh * layer.out_w + ow) * cp + v0 * VECTOR_BYTES))),))
    tensors = {"input": (TENSOR_BASES["input"], layer.padded_h * row_pitch),
               "output": (TENSOR_BASES["output"], layer.out_h * layer.out_w * cp)}
    return KernelIR(layer, BlockingParams(1, 0, n_v, rot, layer.kernel_h * kw), templates,
                    tiles, tensors)


def _block_concat(layer: LayerSpec, rf_size: int) -> KernelIR:
    total = sum(layer.sources)
    pixels = layer.in_h * layer.in_w
    templates, index = [], {}

    def template(n_p, vecs, pitch_in, last_bytes):
        key = (n_p, vecs, pitch_in, last_bytes)
        if key not in index:
            nest = _Nest([("p", n_p), ("v", vecs)])
            nest.op(Opcode.TENSOR_LOAD, "input", ("p", "v"), dest=0,
                    dcoef={"p": vecs, "v": 1}, base=0,
                    acoef={"p": pitch_in, "v": VECTOR_BYTES}, nbytes=last_bytes)
            nest.op(Opcode.TENSOR_STORE, "output", ("p", "v"), srcs=((0, {"p": vecs, "v": 1}),),
                    base=0, acoef={"p": total, "v": VECTOR_BYTES}, nbytes=last_bytes)
            index[key] = len(templates)
            templates.append(nest.finish())
        return index[key]

    tiles = []
    tensors = {"output": (TENSOR_BASES["output"], pixels * total)}
    chan_off = 0
    for s, ch in enumerate(layer.sources):
        role = "input" if s == 0 else f"input{s}"
        base = TENSOR_BASES["input"] + s * 0x1000_0000
        tensors[role] = (base, pixels * ch)
        vecs = -(-ch // VECTOR_BYTES)
        n_p = max(1, min(pixels, rf_size // vecs))
        n_p = _largest_divisor_at_most(pixels, n_p)
        nbytes = min(ch, VECTOR_BYTES)
        for p0 in range(0, pixels, n_p):
            tiles.append((ProgramRef(template(n_p, vecs, ch, nbytes), (
                (role, p0 * ch), ("output", p0 * total + chan_off))),))
        chan_off += ch
    # every template addresses its own source through the "input" role slot
    ir = KernelIR(layer, BlockingParams(1, 0, 0, 1, 1), templates, [], tensors)
    fixed = []
    for tile in tiles:
        (ref,) = tile
        offs = dict(ref.offsets)
        role = next(r for r in offs if r.startswith("input"))
        shift = tensors[role][0] - tensors["input"][0]
        fixed.append((ProgramRef(ref.template, (("input", offs[role] + shift),
                                                ("output", offs["output"]))),))
    ir.tiles = fixed
    return ir


def block_layer(layer: LayerSpec, rf_size: int = psx.NUM_DATA_REGS,
                vector_bytes: int = VECTOR_BYTES,
                outputs_per_inner_loop: Optional[int] = None) -> KernelIR:
    """Emit the output-stationary blocked kernel for ``layer``.

    Convolutions pick the widest output row segment (at most 14 pixels) that
    leaves room for at least one resident weight vector, then as many weight
    vectors as fit. ``outputs_per_inner_loop`` pins the segment width.
    """
    layer.validate()
    if rf_size < 8:
        raise UnblockableLayer(f"register file of {rf_size} is below the minimum of 8")
    if vector_bytes != VECTOR_BYTES:
        raise ValueError("only 64B vectors are modeled")
    if layer.kind is LayerKind.CONVOLUTION:
        return _block_conv(layer, rf_size, outputs_per_inner_loop)
    if layer.kind is LayerKind.INNER_PRODUCT:
        return _block_ip(layer, rf_size)
    if layer.kind is LayerKind.POOLING:
        return _block_pool(layer, rf_size)
    return _block_concat(layer, rf_size)


# -- analytics ---------------------------------------------------------------

def algorithm_ops_per_byte(layer: LayerSpec) -> ReuseReport:
    """Peak per-tensor reuse with an unbounded register file (int8 tensors)."""
    layer.validate()
    if layer.kind is LayerKind.CONVOLUTION:
        macs = layer.macs
        return ReuseReport(
            input_ops_per_byte=macs / (layer.in_channels * layer.in_h * layer.in_w),
            weight_ops_per_byte=macs / (layer.out_channels * layer.in_channels
                                        * layer.kernel_h * layer.kernel_w),
            output_ops_per_byte=macs / (layer.out_channels * layer.out_h * layer.out_w),
        )
    if layer.kind is LayerKind.INNER_PRODUCT:
        return ReuseReport(float(layer.out_channels), 1.0, float(layer.vec_inputs))
    if layer.kind is LayerKind.POOLING:
        window = layer.kernel_h * layer.kernel_w
        ops = layer.out_h * layer.out_w * layer.in_channels * window
        return ReuseReport(ops / (layer.in_channels * layer.in_h * layer.in_w), 0.0,
                           float(window))
    return ReuseReport(0.0, 0.0, 0.0)


def _count(p: PsxProgram, opcode: Opcode) -> int:
    return sum(psx.instr_instances(p, i) for i, ins in enumerate(p.instrs)
               if ins.opcode is opcode)


def kernel_op_counts(kernel: KernelIR) -> dict[Opcode, int]:
    out = Counter()
    for t, n in kernel.template_counts().items():
        p = kernel.templates[t].program
        for op in BODY_KINDS:
            out[op] += n * _count(p, op)
    return dict(out)


BODY_KINDS = (Opcode.TENSOR_LOAD, Opcode.TENSOR_STORE, Opcode.MAC_VECTOR, Opcode.VEC_ALU)


def kernel_traffic(kernel: KernelIR) -> ReuseReport:
    """Loads and stores per MAC instruction, summed exactly over every tile."""
    c = kernel_op_counts(kernel)
    alg = algorithm_ops_per_byte(kernel.layer)
    macs = c[Opcode.MAC_VECTOR]
    return dataclasses.replace(
        alg,
        loads_per_mac=c[Opcode.TENSOR_LOAD] / macs if macs else None,
        stores_per_mac=c[Opcode.TENSOR_STORE] / macs if macs else None,
    )


def kernel_compression(kernel: KernelIR, loop_overhead: int = psx.DEFAULT_LOOP_OVERHEAD) -> float:
    base = core = 0
    for t, n in kernel.template_counts().items():
        for p in lower_loop_kernel(kernel.templates[t]):
            base += n * psx.baseline_dynamic_count(p, loop_overhead)
            core += n * psx.core_side_count(p)
    return base / core


def instruction_counts(kernel: KernelIR, loop_overhead: int = psx.DEFAULT_LOOP_OVERHEAD) -> tuple[int, int, int]:
    """(legacy dynamic count, PSX core-side count, unrolled TFU ops) for the whole layer."""
    base = core = unrolled = 0
    for t, n in kernel.template_counts().items():
        for p in lower_loop_kernel(kernel.templates[t]):
            base += n * psx.baseline_dynamic_count(p, loop_overhead)
            core += n * psx.core_side_count(p)
            unrolled += n * psx.unrolled_count(p)
    return base, core, unrolled


# -- lowering ----------------------------------------------------------------

def _run_position(instrs, i: int) -> str:
    """'before' if a deeper op follows instruction i inside its own loop body."""
    d = instrs[i].depth
    for ins in instrs[i + 1:]:
        if ins.depth < d:
            break
        if ins.depth > d:
            return "before"
    return "after"


def _peel(p: PsxProgram, k: int) -> list[PsxProgram]:
    counts = p.loops.counts
    outer, inner = counts[:k], counts[k:]
    pos = [_run_position(p.instrs, i) for i in range(len(p.instrs))]
    out = []
    for prefix in itertools.product(*[range(c) for c in outer]):
        instrs = []
        for i, ins in enumerate(p.instrs):
            fire = dict(ins.fire_on)
            if any(l < k and prefix[l] != it for l, it in fire.items()):
                continue
            d = ins.depth
            if d <= k:
                want = 0 if pos[i] == "before" else None
                ok = all(prefix[l] == (want if want is not None else outer[l] - 1)
                         for l in range(d, k))
                if not ok:
                    continue
            shift = lambda strides: sum(prefix[l] * s for l, s in enumerate(strides[:k]))
            new_loops = tuple(range(max(0, d - k)))
            dest = ins.dest_reg
            if dest is not None and ins.reg_strides:
                dest += shift(ins.reg_strides)
            srcs = tuple(r + (shift(st) if st else 0)
                         for r, st in zip(ins.src_regs, ins.src_reg_strides or [()] * len(ins.src_regs)))
            base = ins.base_addr
            if base is not None and ins.addr_strides:
                base += shift(ins.addr_strides)
            instrs.append(dataclasses.replace(
                ins, dest_reg=dest, src_regs=srcs, base_addr=base, loops=new_loops,
                addr_strides=ins.addr_strides[k:] if ins.addr_strides else (),
                reg_strides=ins.reg_strides[k:] if ins.reg_strides else (),
                src_reg_strides=tuple(st[k:] for st in ins.src_reg_strides),
                fire_on=tuple((l - k, it) for l, it in ins.fire_on if l >= k),
            ))
        if instrs:
            out.append(psx.validate_program(PsxProgram(tuple(instrs), LoopNest(inner))))
    return out


def lower_loop_kernel(kernel: LoopKernel) -> list[PsxProgram]:
    """Lower one loop nest; loops beyond the fourth are peeled from the outside."""
    p = kernel.program
    extra = len(p.loops) - psx.MAX_LOOPS
    if extra <= 0:
        return [psx.validate_program(p)]
    return _peel(p, extra)


def lower_to_psx(kernel: KernelIR | LoopKernel) -> list[PsxProgram]:
    if isinstance(kernel, LoopKernel):
        return lower_loop_kernel(kernel)
    out = []
    for lk in kernel.iter_kernels():
        out.extend(lower_loop_kernel(lk))
    return out
