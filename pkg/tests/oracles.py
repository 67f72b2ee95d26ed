"""Independent reference models used only by the tests.

None of these share code paths with the package implementations they check.
"""

import functools
import itertools
import random

from proxsim.psx import LoopNest, Opcode, PsxInstr, PsxProgram


def reference_trace(p):
    """Scalar loop-nest interpreter.

    Enumerates every (instruction, iteration vector) instance by brute force and
    orders them pairwise: the first differing shared loop index decides, ties
    fall back to program order. Returns tuples of
    (opcode, dest, srcs, addr, static_index).
    """
    counts = p.loops.counts
    instances = []
    for s, ins in enumerate(p.instrs):
        levels = list(ins.loops)
        fixed = dict(ins.fire_on)
        for idx in itertools.product(*[range(counts[l]) for l in levels]):
            if any(idx[levels.index(l)] != it for l, it in fixed.items()):
                continue
            instances.append((s, idx))

    def cmp(a, b):
        (sa, ia), (sb, ib) = a, b
        for x, y in zip(ia, ib):
            if x != y:
                return -1 if x < y else 1
        return (sa > sb) - (sa < sb)

    instances.sort(key=functools.cmp_to_key(cmp))
    out = []
    for s, idx in instances:
        ins = p.instrs[s]
        dest = None
        if ins.dest_reg is not None:
            dest = ins.dest_reg
            for k, v in enumerate(idx):
                if ins.reg_strides:
                    dest += v * ins.reg_strides[k]
        srcs = []
        for j, r in enumerate(ins.src_regs):
            for k, v in enumerate(idx):
                if ins.src_reg_strides:
                    r += v * ins.src_reg_strides[j][k]
            srcs.append(r)
        addr = None
        if ins.base_addr is not None:
            addr = ins.base_addr
            for k, v in enumerate(idx):
                if ins.addr_strides:
                    addr += v * ins.addr_strides[k]
        out.append((ins.opcode, dest, tuple(srcs), addr, s))
    return out


def random_program(rng: random.Random, max_dynamic=None):
    """A random valid program: <=4 loops, counts <=8, <=32 instrs.

    Depths are drawn as a structured (single-run-per-level) sequence. When
    ``max_dynamic`` is given, loop counts are redrawn until the unrolled length
    fits.
    """
    n_loops = rng.randint(1, 4)
    n_instr = rng.randint(1, 32)
    # Depth profile: rise to a peak then fall, which is always well nested.
    peak = rng.randint(0, n_loops)
    up = sorted(rng.randint(0, peak) for _ in range(n_instr))
    split = rng.randint(0, n_instr)
    depths = up[:split] + sorted(up[split:], reverse=True)
    while True:
        counts = [rng.randint(1, 8) for _ in range(n_loops)]
        if max_dynamic is None:
            break
        dyn = sum(_prod(counts[:d]) for d in depths)
        if dyn <= max_dynamic:
            break
    instrs = []
    for d in depths:
        kind = rng.choice([Opcode.TENSOR_LOAD, Opcode.TENSOR_STORE, Opcode.MAC_VECTOR,
                           Opcode.VEC_ALU])
        loops = tuple(range(d))
        fire = ()
        if d and rng.random() < 0.15:
            lvl = rng.randrange(d)
            fire = ((lvl, rng.randrange(counts[lvl])),)

        def reg(stride_ok=True):
            # keep the whole swept range inside 0..47
            strides = []
            for l in loops:
                strides.append(rng.choice([0, 0, 1]) if stride_ok else 0)
            span = sum(s * (counts[l] - 1) for l, s in zip(loops, strides))
            base = rng.randint(0, 47 - span)
            return base, tuple(strides)

        if kind is Opcode.TENSOR_LOAD:
            dest, dstr = reg()
            addr = rng.randrange(0, 1 << 20) * 64
            astr = tuple(rng.choice([0, 64, 128, 4096, -64]) for _ in loops)
            if any(s < 0 for s in astr):
                addr += 64 * 8 * 8
            instrs.append(PsxInstr(kind, dest_reg=dest, base_addr=addr, loops=loops,
                                   addr_strides=astr, reg_strides=dstr, fire_on=fire))
        elif kind is Opcode.TENSOR_STORE:
            src, sstr = reg()
            addr = rng.randrange(0, 1 << 20) * 64
            astr = tuple(rng.choice([0, 64, 256]) for _ in loops)
            instrs.append(PsxInstr(kind, src_regs=(src,), src_reg_strides=(sstr,),
                                   base_addr=addr, loops=loops, addr_strides=astr,
                                   reg_strides=(0,) * d, fire_on=fire))
        else:
            dest, dstr = reg()
            nsrc = rng.randint(1, 2)
            srcs, sstrs = zip(*[reg() for _ in range(nsrc)])
            instrs.append(PsxInstr(kind, dest_reg=dest, src_regs=tuple(srcs),
                                   src_reg_strides=tuple(sstrs), loops=loops,
                                   reg_strides=dstr, fire_on=fire))
    return PsxProgram(tuple(instrs), LoopNest(tuple(counts)))


def _prod(xs):
    out = 1
    for x in xs:
        out *= x
    return out


def brute_force_weight_reuse(layer):
    """Count MAC uses of every weight element over a full direct-convolution nest.

    Returns the maximum use count, i.e. the algorithmic reuse of one weight.
    Only meant for small layers.
    """
    uses = {}
    oh = (layer.in_h - layer.kernel_h) // layer.stride + 1
    ow = (layer.in_w - layer.kernel_w) // layer.stride + 1
    for oc in range(layer.out_channels):
        for y in range(oh):
            for x in range(ow):
                for ic in range(layer.in_channels):
                    for ky in range(layer.kernel_h):
                        for kx in range(layer.kernel_w):
                            key = (oc, ic, ky, kx)
                            uses[key] = uses.get(key, 0) + 1
    return max(uses.values())
