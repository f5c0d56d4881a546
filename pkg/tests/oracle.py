"""Independent single-step oracles and program generators.

The oracles deliberately avoid the region-summary machinery: they apply
per-instruction cell-level rules directly while single-stepping the
original image, the approach the summary path exists to replace. Any
disagreement between the two is a bug in the summaries.
"""

from __future__ import annotations

import random

from vciflow.cells import bits, register_mask
from vciflow.descriptors import describe
from vciflow.harness import MachineState, step
from vciflow.isa import MASK32, decode

_ESP_MASK = register_mask("ESP")


def step_defined(descs, defined):
    """The spec's literal per-instruction propagation rule:
    if src intersects D then D |= dest else D -= dest."""
    for d in descs:
        if d.src.mask & defined:
            defined |= d.dest.mask
        else:
            defined &= ~d.dest.mask
    return defined


class OracleRegion:
    __slots__ = ("id", "start", "length", "parents", "live")

    def __init__(self, rid, start, length, parents):
        self.id = rid
        self.start = start
        self.length = length
        self.parents = set(parents)
        self.live = set()


class TaintOracle:
    """Instruction-at-a-time taint tracker over the original image."""

    def __init__(self, addr_taint=True):
        self.defined = 0
        self.hist = {}
        self.shadow = {}
        self.regions = {}
        self.next_region = 0
        self.addr_taint = addr_taint

    # -- sources (mirrors the engine's id allocation order)

    def define_mem_source(self, addr, length):
        rid = self.next_region
        self.next_region += 1
        region = OracleRegion(rid, addr, length, ())
        self.regions[rid] = region
        for a in range(addr, addr + length):
            self.shadow[a & MASK32] = rid
            region.live.add(a & MASK32)
        return rid

    def define_reg_source(self, name):
        rid = self.next_region
        self.next_region += 1
        self.regions[rid] = OracleRegion(rid, None, 0, ())
        mask = register_mask(name)
        self.defined |= mask
        for b in bits(mask):
            self.hist.setdefault(b, set()).add(rid)
        return rid

    # -- primitive taint operations

    def _hist_union(self, mask):
        h = set()
        for b in bits(mask & self.defined):
            h |= self.hist.get(b, set())
        return h

    def _addr_parents(self, mask):
        return self._hist_union(mask) if self.addr_taint else set()

    def _define(self, mask, parents):
        self.defined |= mask
        for b in bits(mask):
            self.hist[b] = set(parents)

    def _kill(self, mask):
        self.defined &= ~mask
        for b in bits(mask):
            self.hist.pop(b, None)

    def _remove_bytes(self, addr, size):
        for a in range(addr, addr + size):
            a &= MASK32
            rid = self.shadow.pop(a, None)
            if rid is not None:
                self.regions[rid].live.discard(a)

    def _write_bytes(self, addr, size, parents):
        if parents:
            self._remove_bytes(addr, size)
            rid = self.next_region
            self.next_region += 1
            region = OracleRegion(rid, addr, size, parents)
            self.regions[rid] = region
            for a in range(addr, addr + size):
                self.shadow[a & MASK32] = rid
                region.live.add(a & MASK32)
        else:
            self._remove_bytes(addr, size)

    # -- per-instruction rules

    def _flow(self, desc):
        if desc.src.mask & self.defined:
            parents = self._hist_union(desc.src.mask)
            self.defined |= desc.dest.mask
            for b in bits(desc.dest.mask):
                self.hist[b] = set(parents)
        else:
            self.defined &= ~desc.flow_kill_mask
            for b in bits(desc.flow_kill_mask):
                self.hist.pop(b, None)

    def _memory(self, instr, desc, regs):
        mem_op = instr.mem_operand
        if mem_op is not None:
            ea = (mem_op.disp + (regs[mem_op.base] if mem_op.base else 0)) \
                & MASK32
            base_mask = register_mask(mem_op.base) if mem_op.base else 0
        else:
            ea = (regs["ESP"] - 4) & MASK32 if desc.mem == "write" \
                else regs["ESP"]
            base_mask = _ESP_MASK
        size = 4
        addr_par = self._addr_parents(base_mask)
        incoming = None
        if desc.mem in ("read", "readwrite"):
            mem_parents = {self.shadow[a] for a in range(ea, ea + size)
                           if a in self.shadow}
            incoming = (mem_parents | self._hist_union(desc.src.mask)
                        | addr_par)
            if desc.mem_data_dest.mask:
                if incoming:
                    self._define(desc.mem_data_dest.mask, incoming)
                else:
                    self._kill(desc.mem_data_dest.mask)
        if desc.mem in ("write", "readwrite"):
            if desc.mem == "readwrite":
                parents = incoming
            else:
                parents = (self._hist_union(desc.mem_data_src.mask)
                           | addr_par)
            self._write_bytes(ea, size, parents)

    def _string(self, instr, state):
        mn = instr.mnemonic
        delta = -1 if state.flags["DF"] else 1
        count = state.regs["ECX"] if instr.rep else 1
        esi, edi = state.regs["ESI"], state.regs["EDI"]
        esi_par = self._addr_parents(register_mask("ESI"))
        edi_par = self._addr_parents(register_mask("EDI"))
        al = register_mask("AL")
        for i in range(count):
            if mn == "movsb":
                src_a = (esi + delta * i) & MASK32
                dst_a = (edi + delta * i) & MASK32
                inc = set(esi_par)
                if src_a in self.shadow:
                    inc.add(self.shadow[src_a])
                self._write_bytes(dst_a, 1, inc | edi_par)
            elif mn == "stosb":
                dst_a = (edi + delta * i) & MASK32
                self._write_bytes(dst_a, 1, self._hist_union(al) | edi_par)
            else:
                src_a = (esi + delta * i) & MASK32
                inc = set(esi_par)
                if src_a in self.shadow:
                    inc.add(self.shadow[src_a])
                if inc:
                    self._define(al, inc)
                else:
                    self._kill(al)

    def process_instruction(self, instr, state):
        """Taint effect of one instruction about to execute in state."""
        desc = describe(instr)
        if desc.string_op:
            self._flow(desc)
            self._string(instr, state)
            return
        self._flow(desc)
        if desc.mem != "none":
            self._memory(instr, desc, state.regs)

    def run(self, image, entry, state, imports=None, max_steps=2_000_000):
        """Single-step the image, applying taint before each instruction."""
        imports = imports or {}
        state.eip = entry & MASK32
        state.map_image(image)
        cache = {}
        steps = 0
        while not state.halted:
            ip = state.eip
            if ip == image.end:
                break
            if ip in imports:
                if imports[ip].lower().endswith("exitprocess"):
                    break
                ret = state.read32(state.regs["ESP"])
                state.regs["ESP"] = (state.regs["ESP"] + 4) & MASK32
                state.eip = ret
                continue
            instr = cache.get(ip)
            if instr is None:
                instr = decode(image.data, ip - image.base, image.base)
                cache[ip] = instr
            self.process_instruction(instr, state)
            step(state, instr)
            steps += 1
            if steps > max_steps:
                raise RuntimeError("oracle run did not terminate")
        return state

    # -- comparable results

    def roots_of(self, rid, memo=None):
        memo = memo if memo is not None else {}
        if rid in memo:
            return memo[rid]
        memo[rid] = frozenset()
        region = self.regions[rid]
        if not region.parents:
            out = frozenset((rid,))
        else:
            out = frozenset().union(*(self.roots_of(p, memo)
                                      for p in region.parents))
        memo[rid] = out
        return out

    def result(self):
        memo = {}
        cell_roots = {b: frozenset().union(*(self.roots_of(r, memo)
                                             for r in self.hist[b]))
                      if self.hist[b] else frozenset()
                      for b in bits(self.defined)}
        byte_roots = {a: self.roots_of(rid, memo)
                      for a, rid in self.shadow.items()}
        return self.defined, cell_roots, byte_roots


def engine_result(taint_state):
    """The same (defined, cell roots, byte roots) view of the engine."""
    memo = {}
    cell_roots = {}
    for b in bits(taint_state.defined):
        h = taint_state.hist.get(b, set())
        cell_roots[b] = frozenset().union(
            *(taint_state.roots_of(r, memo) for r in h)) if h else frozenset()
    byte_roots = {a: taint_state.roots_of(rid, memo)
                  for a, rid in taint_state.shadow.items()}
    return taint_state.defined, cell_roots, byte_roots


# --------------------------------------------------------- generators

REGS = ("EAX", "ECX", "EDX", "EBX", "EBP", "ESI", "EDI")
COND_POOL = ("z", "nz", "b", "ae", "s", "ns", "o", "no", "p", "np",
             "l", "ge", "le", "g", "be", "a")


def gen_region_instructions(rng, max_len=12):
    """Random register-only instruction run (one dataflow region)."""
    from vciflow.isa import build, imm, reg, reg8

    n = rng.randint(1, max_len)
    out = []
    for _ in range(n):
        kind = rng.randrange(8)
        r1 = rng.choice(REGS)
        r2 = rng.choice(REGS)
        if kind == 0:
            out.append(build("mov", reg(r1), reg(r2)))
        elif kind == 1:
            out.append(build("mov", reg(r1), imm(rng.getrandbits(32))))
        elif kind == 2:
            mn = rng.choice(("add", "adc", "sub", "xor", "and", "or"))
            out.append(build(mn, reg(r1), reg(r2)))
        elif kind == 3:
            mn = rng.choice(("add", "adc", "sub", "xor", "and", "or"))
            out.append(build(mn, reg(r1), imm(rng.getrandbits(32))))
        elif kind == 4:
            out.append(build(rng.choice(("cmp", "test")), reg(r1), reg(r2)))
        elif kind == 5:
            out.append(build(rng.choice(("inc", "dec")), reg(r1)))
        elif kind == 6:
            mn = rng.choice(("shl", "shr"))
            out.append(build(mn, reg(r1), imm(rng.randint(1, 31))))
        else:
            c = rng.randrange(16)
            if rng.random() < 0.5:
                r8 = rng.choice(("AL", "CL", "DL", "BL", "AH", "CH", "DH", "BH"))
                out.append(build("set" + COND_POOL[c % len(COND_POOL)],
                                 reg8(r8), cond=COND_POOL.index(
                                     COND_POOL[c % len(COND_POOL)])))
            else:
                name = COND_POOL[c % len(COND_POOL)]
                out.append(build("cmov" + name, reg(r1), reg(r2),
                                 cond=COND_POOL.index(name)))
    return out


ARENA_BASE = 0x00500000
ARENA_LEN = 64
STACK_TOP = 0x00200000
CODE_BASE = 0x00401000


class ProgramBuilder:
    """Emits a decodable straight-line-plus-loops program."""

    def __init__(self, rng):
        self.rng = rng
        self.instrs = []

    def emit(self, *args, **kw):
        from vciflow.isa import build
        ins = build(*args, **kw)
        self.instrs.append(ins)
        return ins

    def assemble(self, base=CODE_BASE):
        from vciflow.isa import encode, target
        from dataclasses import replace as dreplace
        # first pass: assign addresses (fixing label operands by index)
        addr = base
        addrs = []
        for ins in self.instrs:
            addrs.append(addr)
            addr += ins.encoded_length
        blob = bytearray()
        for i, ins in enumerate(self.instrs):
            ins = dreplace(ins, address=addrs[i])
            t = ins.branch_target()
            if t is not None and t < 0:      # label = ~index
                ins = dreplace(ins, operands=(target(addrs[~t]),))
            blob += encode(ins)
        return bytes(blob), base


def _emit_random_ops(b, rng, count, depth, allow_mem=True,
                     allow_string=True):
    """Random op block; returns the new stack depth."""
    from vciflow.isa import imm, mem, reg, reg8

    for _ in range(count):
        kind = rng.randrange(12)
        r1, r2 = rng.choice(REGS), rng.choice(REGS)
        arena = ARENA_BASE + 4 * rng.randrange(ARENA_LEN // 4)
        if kind == 0:
            b.emit("mov", reg(r1), reg(r2))
        elif kind == 1:
            b.emit("mov", reg(r1), imm(rng.getrandbits(32)))
        elif kind == 2:
            mn = rng.choice(("add", "adc", "sub", "xor", "and", "or"))
            b.emit(mn, reg(r1), reg(r2))
        elif kind == 3:
            b.emit(rng.choice(("inc", "dec")), reg(r1))
        elif kind == 4:
            b.emit(rng.choice(("shl", "shr")), reg(r1),
                   imm(rng.randint(1, 31)))
        elif kind == 5 and allow_mem:
            b.emit(rng.choice(("mov", "add", "xor")), reg(r1),
                   mem(None, arena))
        elif kind == 6 and allow_mem:
            b.emit(rng.choice(("mov", "add", "sub")), mem(None, arena),
                   reg(r1))
        elif kind == 7 and allow_mem:
            b.emit("mov", mem(None, arena), imm(rng.getrandbits(32)))
        elif kind == 8 and allow_mem:
            b.emit("push", reg(r1))
            depth += 1
        elif kind == 9 and allow_mem and depth > 0:
            b.emit("pop", reg(r1))
            depth -= 1
        elif kind == 10 and allow_string and allow_mem:
            src = ARENA_BASE + rng.randrange(ARENA_LEN - 8)
            dst = ARENA_BASE + rng.randrange(ARENA_LEN - 8)
            b.emit("mov", reg("ESI"), imm(src))
            b.emit("mov", reg("EDI"), imm(dst))
            sk = rng.randrange(3)
            if sk == 0:
                n = rng.randint(1, 6)
                b.emit("mov", reg("ECX"), imm(n))
                b.emit("movsb", rep=True)
            elif sk == 1:
                b.emit("stosb")
            else:
                b.emit("lodsb")
        else:
            name = rng.choice(COND_POOL)
            if rng.random() < 0.5:
                r8 = rng.choice(("AL", "CL", "DL", "BL"))
                b.emit("set" + name, reg8(r8), cond=COND_POOL.index(name))
            else:
                b.emit("cmov" + name, reg(r1), reg(r2),
                       cond=COND_POOL.index(name))
    return depth


def gen_traced_program(rng):
    """Bounded program for taint-oracle comparison (Jcc/JMP loops only)."""
    from vciflow.isa import imm, reg, target

    b = ProgramBuilder(rng)
    for r in REGS[:4]:
        b.emit("mov", reg(r), imm(rng.getrandbits(32)))
    depth = _emit_random_ops(b, rng, rng.randint(2, 12), 0)
    if rng.random() < 0.7:
        counter = "EBP"
        iters = rng.randint(1, 5)
        b.emit("mov", reg(counter), imm(iters))
        loop_start = len(b.instrs)
        _emit_random_ops(b, rng, rng.randint(1, 8), 0, allow_string=True)
        b.emit("dec", reg(counter))
        b.emit("jnz", target(~loop_start), cond=5, branch_form="rel8")
    _emit_random_ops(b, rng, rng.randint(0, 8), depth)
    b.emit("hlt")
    return b.assemble()


def gen_preservation_program(rng, force=None):
    """Program for original-vs-integrated state comparison.

    force="expand" guarantees a rel8 branch that must widen after
    instrumentation; force="emulate" guarantees LOOP-family rewriting.
    """
    from vciflow.isa import imm, reg, target

    b = ProgramBuilder(rng)
    for r in REGS[:4]:
        b.emit("mov", reg(r), imm(rng.getrandbits(32)))
    depth = _emit_random_ops(b, rng, rng.randint(1, 6), 0)
    if force == "expand":
        # forward Jcc over a block of one-region instructions: each gains
        # a 5-byte land, pushing the displacement past 127
        cond = rng.choice(("z", "nz", "s", "ns"))
        jcc_index = len(b.instrs)
        b.emit("j" + cond, target(0), cond=COND_POOL.index(cond),
               branch_form="rel8")
        fill = rng.randint(22, 30)
        for _ in range(fill):
            b.emit("push", imm(rng.getrandbits(7)))
            b.emit("pop", reg(rng.choice(REGS)))
        from vciflow.isa import target as tgt
        from dataclasses import replace as drep
        b.instrs[jcc_index] = drep(b.instrs[jcc_index],
                                   operands=(tgt(~len(b.instrs)),))
    elif force == "emulate":
        mn = rng.choice(("loop", "loope", "loopne", "jecxz"))
        if mn == "jecxz":
            b.emit("mov", reg("ECX"), imm(rng.choice((0, 1, 3))))
            jec_index = len(b.instrs)
            b.emit("jecxz", target(0), branch_form="rel8")
            for _ in range(rng.randint(20, 26)):
                b.emit("push", imm(rng.getrandbits(7)))
                b.emit("pop", reg(rng.choice(("EAX", "EBX", "EDX"))))
            from dataclasses import replace as drep
            from vciflow.isa import target as tgt
            b.instrs[jec_index] = drep(b.instrs[jec_index],
                                       operands=(tgt(~len(b.instrs)),))
        else:
            iters = rng.randint(1, 5)
            b.emit("mov", reg("ECX"), imm(iters))
            loop_start = len(b.instrs)
            for _ in range(rng.randint(20, 26)):
                b.emit("push", imm(rng.getrandbits(7)))
                b.emit("pop", reg(rng.choice(("EAX", "EBX", "EDX"))))
            b.emit(mn, target(~loop_start), branch_form="rel8")
    else:
        if rng.random() < 0.6:
            iters = rng.randint(1, 4)
            b.emit("mov", reg("EBP"), imm(iters))
            loop_start = len(b.instrs)
            _emit_random_ops(b, rng, rng.randint(1, 6), 0)
            b.emit("dec", reg("EBP"))
            b.emit("jnz", target(~loop_start), cond=5, branch_form="rel8")
        if rng.random() < 0.5:
            cond = rng.choice(COND_POOL)
            jcc_index = len(b.instrs)
            b.emit("j" + cond, target(0), cond=COND_POOL.index(cond),
                   branch_form="rel8")
            _emit_random_ops(b, rng, rng.randint(1, 5), 0,
                             allow_string=False)
            from dataclasses import replace as drep
            from vciflow.isa import target as tgt
            b.instrs[jcc_index] = drep(b.instrs[jcc_index],
                                       operands=(tgt(~len(b.instrs)),))
    b.emit("hlt")
    return b.assemble()


def fresh_state(rng=None):
    """Machine state with the arena mapped and the stack at STACK_TOP."""
    state = MachineState(esp=STACK_TOP)
    data = bytes((rng.getrandbits(8) if rng else (7 * i + 3) & 0xFF)
                 for i in range(ARENA_LEN))
    state.map_bytes(ARENA_BASE, data)
    return state
