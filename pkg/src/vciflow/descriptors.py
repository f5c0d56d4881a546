"""Static source/destination object sets for every subset instruction.

describe() computes the register/flag cells an instruction reads and
writes, plus how its memory accesses route data: mem_data_dest are the
cells whose value comes from a memory read (a load's targets), and
mem_data_src are the cells whose value flows into a memory write (the
stored operand). The propagation walk kills with dest minus
mem_data_dest so that a load's effect stays with the per-packet memory
processing rather than the precomputed summaries.

XOR r,r and SUB r,r are idioms whose destination is independent of the
source value: src is nullified to the empty set.
"""

from __future__ import annotations

from dataclasses import dataclass

from .cells import (ARITH_FLAGS_MASK, ALL_FLAGS_MASK, FLAG_MASK,
                    INCDEC_FLAGS_MASK, ArchObjectSet, register_mask)
from .errors import UnsupportedOpcode
from .isa import Instruction

_CF = FLAG_MASK["CF"]
_ZF = FLAG_MASK["ZF"]
_SF = FLAG_MASK["SF"]
_OF = FLAG_MASK["OF"]
_PF = FLAG_MASK["PF"]
_DF = FLAG_MASK["DF"]
_ESP = register_mask("ESP")
_ECX = register_mask("ECX")
_ESI = register_mask("ESI")
_EDI = register_mask("EDI")
_AL = register_mask("AL")

# flags read by condition code 0..15 (o,no,b,ae,z,nz,be,a,s,ns,p,np,l,ge,le,g)
COND_FLAGS = (
    _OF, _OF, _CF, _CF, _ZF, _ZF, _CF | _ZF, _CF | _ZF,
    _SF, _SF, _PF, _PF, _SF | _OF, _SF | _OF,
    _ZF | _SF | _OF, _ZF | _SF | _OF,
)


@dataclass(frozen=True)
class InstructionDescriptor:
    src: ArchObjectSet
    dest: ArchObjectSet
    mem: str = "none"               # none | read | write | readwrite
    mem_data_src: ArchObjectSet = ArchObjectSet(0)
    mem_data_dest: ArchObjectSet = ArchObjectSet(0)
    conditional_write: bool = False
    string_op: bool = False

    @property
    def flow_kill_mask(self):
        """Cells the propagation walk may kill: dest minus load targets."""
        return self.dest.mask & ~self.mem_data_dest.mask


def _d(src=0, dest=0, mem="none", mds=0, mdd=0, cond=False, string=False):
    return InstructionDescriptor(ArchObjectSet(src), ArchObjectSet(dest), mem,
                                 ArchObjectSet(mds), ArchObjectSet(mdd),
                                 cond, string)


def _cells(op):
    if op.kind in ("reg", "reg8"):
        return register_mask(op.reg)
    return 0


def describe(ins: Instruction) -> InstructionDescriptor:
    """Exact per-instruction descriptor (pure and deterministic)."""
    mn, ops = ins.mnemonic, ins.operands

    if mn in ("nop", "hlt", "trace"):
        return _d()
    if mn == "mov":
        d, s = ops
        if d.kind == "mem":
            return _d(src=_cells(s), mem="write", mds=_cells(s))
        if s.kind == "mem":
            return _d(dest=_cells(d), mem="read", mdd=_cells(d))
        return _d(src=_cells(s), dest=_cells(d))
    if mn in ("add", "adc", "sub", "xor", "and", "or"):
        d, s = ops
        carry = _CF if mn == "adc" else 0
        if d.kind == "mem":
            # result and flags depend on the old memory value too
            return _d(src=_cells(s) | carry, dest=ARITH_FLAGS_MASK,
                      mem="readwrite", mds=_cells(s), mdd=ARITH_FLAGS_MASK)
        if s.kind == "mem":
            return _d(src=_cells(d) | carry,
                      dest=_cells(d) | ARITH_FLAGS_MASK, mem="read",
                      mdd=_cells(d) | ARITH_FLAGS_MASK)
        src = _cells(d) | _cells(s) | carry
        if mn in ("xor", "sub") and s.kind == "reg" and s.reg == d.reg:
            src = 0  # destination no longer depends on the source value
        return _d(src=src, dest=_cells(d) | ARITH_FLAGS_MASK)
    if mn in ("cmp", "test"):
        d, s = ops
        if d.kind == "mem" or s.kind == "mem":
            regcells = _cells(d) | _cells(s)
            return _d(src=regcells, dest=ARITH_FLAGS_MASK, mem="read",
                      mdd=ARITH_FLAGS_MASK)
        return _d(src=_cells(d) | _cells(s), dest=ARITH_FLAGS_MASK)
    if mn in ("inc", "dec"):
        r = _cells(ops[0])
        return _d(src=r, dest=r | INCDEC_FLAGS_MASK)
    if mn in ("shl", "shr"):
        r = _cells(ops[0])
        return _d(src=r, dest=r | ARITH_FLAGS_MASK)
    if mn == "push":
        return _d(src=_cells(ops[0]) | _ESP, dest=_ESP, mem="write",
                  mds=_cells(ops[0]))
    if mn == "pop":
        r = _cells(ops[0])
        return _d(src=_ESP, dest=r | _ESP, mem="read", mdd=r)
    if mn == "pushfd":
        return _d(src=ALL_FLAGS_MASK | _ESP, dest=_ESP, mem="write",
                  mds=ALL_FLAGS_MASK)
    if mn == "popfd":
        return _d(src=_ESP, dest=ALL_FLAGS_MASK | _ESP, mem="read",
                  mdd=ALL_FLAGS_MASK)
    if mn == "call":
        membit = "readwrite" if ins.branch_form == "indirect" else "write"
        return _d(src=_ESP, dest=_ESP, mem=membit)
    if mn == "ret":
        return _d(src=_ESP, dest=_ESP, mem="read")
    if mn == "jmp":
        return _d(mem="read" if ins.branch_form == "indirect" else "none")
    if mn == "jecxz":
        return _d(src=_ECX)
    if mn == "loop":
        return _d(src=_ECX, dest=_ECX)
    if mn in ("loope", "loopne"):
        return _d(src=_ECX | _ZF, dest=_ECX)
    if mn.startswith("j") and ins.cond is not None:
        return _d(src=COND_FLAGS[ins.cond])
    if mn.startswith("set") and ins.cond is not None:
        return _d(src=COND_FLAGS[ins.cond], dest=_cells(ops[0]), cond=True)
    if mn.startswith("cmov") and ins.cond is not None:
        # old destination value may survive: keep it among the sources
        return _d(src=_cells(ops[1]) | _cells(ops[0]) | COND_FLAGS[ins.cond],
                  dest=_cells(ops[0]), cond=True)
    if mn == "movsb":
        rep = _ECX if ins.rep else 0
        return _d(src=_ESI | _EDI | _DF | rep, dest=_ESI | _EDI | rep,
                  mem="readwrite", string=True)
    if mn == "stosb":
        rep = _ECX if ins.rep else 0
        return _d(src=_AL | _EDI | _DF | rep, dest=_EDI | rep,
                  mem="write", mds=_AL, string=True)
    if mn == "lodsb":
        rep = _ECX if ins.rep else 0
        return _d(src=_ESI | _DF | rep, dest=_AL | _ESI | rep,
                  mem="read", mdd=_AL, string=True)
    raise UnsupportedOpcode(f"no descriptor for {ins}")
