"""Architectural cell universe: register bytes and flags as one bitset.

Cells are the atoms of every object set: 8 general registers x 4 byte
cells (bit = reg_index * 4 + byte_index) plus seven flag cells. Named
registers resolve to fixed cell groups, so AL < AX < EAX containment
holds by construction and taint on AL never implies taint on AH.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import UnknownRegister

REG32 = ("EAX", "ECX", "EDX", "EBX", "ESP", "EBP", "ESI", "EDI")
REG16 = ("AX", "CX", "DX", "BX", "SP", "BP", "SI", "DI")
REG8 = ("AL", "CL", "DL", "BL", "AH", "CH", "DH", "BH")
FLAGS = ("CF", "PF", "AF", "ZF", "SF", "OF", "DF")

FLAG_BIT = {name: 32 + i for i, name in enumerate(FLAGS)}
FLAG_MASK = {name: 1 << bit for name, bit in FLAG_BIT.items()}

REG_CELLS_MASK = (1 << 32) - 1
ALL_FLAGS_MASK = sum(FLAG_MASK.values())
ALL_CELLS_MASK = REG_CELLS_MASK | ALL_FLAGS_MASK

# OF,SF,ZF,AF,CF,PF: written by the two-operand arithmetic/logic group.
ARITH_FLAGS_MASK = (FLAG_MASK["CF"] | FLAG_MASK["PF"] | FLAG_MASK["AF"]
                    | FLAG_MASK["ZF"] | FLAG_MASK["SF"] | FLAG_MASK["OF"])
# INC/DEC leave CF untouched.
INCDEC_FLAGS_MASK = ARITH_FLAGS_MASK & ~FLAG_MASK["CF"]

_GROUP = {}
for _i, _r in enumerate(REG32):
    _GROUP[_r] = 0xF << (_i * 4)
for _i, _r in enumerate(REG16):
    _GROUP[_r] = 0x3 << (_i * 4)
for _i, _r in enumerate(REG8):
    _GROUP[_r] = 1 << ((_i & 3) * 4 + (_i >> 2))
_GROUP.update(FLAG_MASK)

_CELL_NAMES = tuple(f"{REG32[b // 4].lower()}.{b % 4}" for b in range(32)) \
    + tuple(f.lower() for f in FLAGS)
_NAME_TO_BIT = {name: bit for bit, name in enumerate(_CELL_NAMES)}


def register_mask(name):
    """Cell mask for a named register or flag (raises UnknownRegister)."""
    try:
        return _GROUP[name.upper()]
    except KeyError:
        raise UnknownRegister(name) from None


def cell_name(bit):
    return _CELL_NAMES[bit]


def bits(mask):
    """Iterate set bit indices of a cell mask, lowest first."""
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask ^= low


def singles(mask):
    """Split a mask into 'single elements': per-register cell groups
    (whatever cells of that register are present) and individual flags."""
    out = []
    for i in range(8):
        group = mask & (0xF << (i * 4))
        if group:
            out.append(group)
    flags = mask & ALL_FLAGS_MASK
    for bit in bits(flags):
        out.append(1 << bit)
    return out


@dataclass(frozen=True)
class ArchObjectSet:
    """Immutable set over architectural cells, backed by a bitmask.

    Exact set algebra; the empty set is a valid value. Hot paths work on
    .mask directly.
    """

    mask: int = 0

    @classmethod
    def of(cls, *names):
        m = 0
        for name in names:
            m |= register_mask(name)
        return cls(m)

    @classmethod
    def from_cells(cls, names):
        m = 0
        for name in names:
            try:
                m |= 1 << _NAME_TO_BIT[name]
            except KeyError:
                raise UnknownRegister(name) from None
        return cls(m)

    def __or__(self, other):
        return ArchObjectSet(self.mask | other.mask)

    def __and__(self, other):
        return ArchObjectSet(self.mask & other.mask)

    def __sub__(self, other):
        return ArchObjectSet(self.mask & ~other.mask)

    def __le__(self, other):
        return self.mask & ~other.mask == 0

    def __bool__(self):
        return self.mask != 0

    def __contains__(self, name):
        m = register_mask(name)
        return self.mask & m == m

    def cells(self):
        return tuple(_CELL_NAMES[b] for b in bits(self.mask))

    def __repr__(self):
        return "ArchObjectSet{%s}" % ",".join(self.cells())


EMPTY = ArchObjectSet(0)


def cells_of(name):
    """Cell set of a named register or flag (Def. containment table)."""
    return ArchObjectSet(register_mask(name))
