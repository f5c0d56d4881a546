"""IA-32 subset codec: byte-exact decode/encode plus effective addresses.

The supported set is the closure of the instructions used by the tool's
reference programs: MOV/ADD/ADC/SUB/XOR/AND/OR/CMP/TEST in their r,r /
r,imm / r,[m] / [m],r / [m],imm forms, INC/DEC/SHL/SHR on registers,
PUSH/POP, the rel8/rel32 branch family, LOOP/LOOPE/LOOPNE/JECXZ,
CALL/JMP dword-indirect, SETcc/CMOVcc, MOVSB/STOSB/LODSB with REP,
PUSHFD/POPFD, NOP, RET and HLT. No SIB byte, no prefixes beyond REP,
no 16-bit operand size.

Decoded instructions re-encode to the identical bytes: operands record
their encoded immediate/displacement width and two-operand instructions
record their mr/rm direction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .cells import REG8, REG32
from .errors import (DisplacementOverflow, NoMemoryOperand,
                     TruncatedInstruction, Unencodable, UnsupportedOpcode)

MASK32 = 0xFFFFFFFF

COND_NAMES = ("o", "no", "b", "ae", "z", "nz", "be", "a",
              "s", "ns", "p", "np", "l", "ge", "le", "g")

_ARITH_MR = {0x01: "add", 0x09: "or", 0x11: "adc", 0x21: "and",
             0x29: "sub", 0x31: "xor", 0x39: "cmp"}
_ARITH_RM = {op + 2: mn for op, mn in _ARITH_MR.items()}
_ARITH_OPC_MR = {mn: op for op, mn in _ARITH_MR.items()}
_GROUP1 = {0: "add", 1: "or", 2: "adc", 4: "and", 5: "sub", 6: "xor", 7: "cmp"}
_GROUP1_EXT = {mn: ext for ext, mn in _GROUP1.items()}

BINARY_OPS = ("mov", "add", "adc", "sub", "xor", "and", "or", "cmp", "test")
STRING_OPS = ("movsb", "stosb", "lodsb")


@dataclass(frozen=True)
class Operand:
    kind: str                  # reg | reg8 | imm | mem | target
    reg: str | None = None
    value: int = 0             # immediate value or absolute branch target
    base: str | None = None    # memory base register, None for [disp32]
    disp: int = 0
    disp_size: int = 0         # encoded displacement width: 0, 8 or 32
    imm_size: int = 0          # encoded immediate width: 0 = pick shortest

    def __str__(self):
        if self.kind in ("reg", "reg8"):
            return self.reg
        if self.kind == "imm":
            return f"0x{self.value & MASK32:X}"
        if self.kind == "target":
            return f"0x{self.value & MASK32:08X}"
        if self.base is None:
            return f"[0x{self.disp & MASK32:X}]"
        if self.disp == 0 and self.disp_size == 0:
            return f"[{self.base}]"
        sign = "+" if self.disp >= 0 else "-"
        return f"[{self.base}{sign}0x{abs(self.disp):X}]"


def reg(name):
    return Operand("reg", reg=name)


def reg8(name):
    return Operand("reg8", reg=name)


def imm(value, size=0):
    return Operand("imm", value=value & MASK32, imm_size=size)


def mem(base=None, disp=0, disp_size=None):
    if disp_size is None:
        if base is None:
            disp_size = 32
        elif disp == 0:
            disp_size = 0
        else:
            disp_size = 8 if -128 <= disp <= 127 else 32
    return Operand("mem", base=base, disp=disp, disp_size=disp_size)


def target(addr):
    return Operand("target", value=addr & MASK32)


@dataclass(frozen=True)
class Instruction:
    address: int
    mnemonic: str
    operands: tuple = ()
    encoded_length: int = 0
    branch_form: str = "none"       # none | rel8 | rel32 | indirect
    cond: int | None = None
    rep: bool = False
    form: str | None = None         # mr/rm direction for two-operand forms

    def __str__(self):
        name = self.mnemonic.upper()
        if self.rep:
            name = "REP " + name
        if not self.operands:
            return name
        return name + " " + ",".join(str(op) for op in self.operands)

    @property
    def mem_operand(self):
        for op in self.operands:
            if op.kind == "mem":
                return op
        return None

    def branch_target(self):
        for op in self.operands:
            if op.kind == "target":
                return op.value
        return None

    def at(self, address):
        return replace(self, address=address)


def build(mnemonic, *operands, cond=None, rep=False, form=None,
          branch_form=None, address=0):
    """Construct an instruction for later encoding (length filled in)."""
    if branch_form is None:
        branch_form = "none"
        if any(op.kind == "target" for op in operands):
            branch_form = "rel32" if mnemonic == "call" else "rel8"
        elif mnemonic in ("jmp", "call") and operands and operands[0].kind == "mem":
            branch_form = "indirect"
    ins = Instruction(address, mnemonic, tuple(operands), 0,
                      branch_form, cond, rep, form)
    return replace(ins, encoded_length=encoded_size(ins))


def jcc(cond_name, target_addr, rel="rel8"):
    c = COND_NAMES.index(cond_name)
    return build("j" + cond_name, target(target_addr), cond=c, branch_form=rel)


# ---------------------------------------------------------------- decode

def _need(code, offset, n):
    if offset + n > len(code):
        raise TruncatedInstruction(f"need {n} byte(s) at offset {offset}")


def _u8(code, i):
    _need(code, i, 1)
    return code[i], i + 1


def _i8(code, i):
    v, i = _u8(code, i)
    return (v - 256 if v >= 128 else v), i


def _u32(code, i):
    _need(code, i, 4)
    return int.from_bytes(code[i:i + 4], "little"), i + 4


def _i32(code, i):
    v, i = _u32(code, i)
    return (v - (1 << 32) if v >= (1 << 31) else v), i


def _modrm(code, i, *, want_mem=None):
    """Decode a ModRM byte without SIB. Returns (regfield, rm operand, i)."""
    b, i = _u8(code, i)
    mod, regf, rm = b >> 6, (b >> 3) & 7, b & 7
    if mod == 3:
        if want_mem is True:
            raise UnsupportedOpcode("register form not supported here")
        return regf, reg(REG32[rm]), i
    if want_mem is False:
        raise UnsupportedOpcode("memory form not supported here")
    if rm == 4:
        raise UnsupportedOpcode("SIB addressing is outside the subset")
    if mod == 0:
        if rm == 5:
            disp, i = _u32(code, i)
            return regf, mem(None, disp, 32), i
        return regf, mem(REG32[rm], 0, 0), i
    if mod == 1:
        disp, i = _i8(code, i)
        return regf, mem(REG32[rm], disp, 8), i
    disp, i = _i32(code, i)
    return regf, mem(REG32[rm], disp, 32), i


def decode(code, offset, base_address=0):
    """Decode one instruction at code[offset]; address = base + offset."""
    _need(code, offset, 1)
    addr = (base_address + offset) & MASK32
    i = offset
    b, i = _u8(code, i)
    rep = False
    if b == 0xF3:
        b, i = _u8(code, i)
        if b not in (0xA4, 0xAA, 0xAC):
            raise UnsupportedOpcode(f"REP prefix before {b:#04x}")
        rep = True

    def done(mnemonic, *ops, branch_form="none", cond=None, form=None):
        return Instruction(addr, mnemonic, tuple(ops), i - offset,
                           branch_form, cond, rep, form)

    def rel_target(disp):
        return target((addr + (i - offset) + disp) & MASK32)

    if b in _ARITH_MR or b == 0x89 or b == 0x85:
        mn = "mov" if b == 0x89 else ("test" if b == 0x85 else _ARITH_MR[b])
        regf, rm, i = _modrm(code, i)
        return done(mn, rm, reg(REG32[regf]), form="mr")
    if b in _ARITH_RM or b == 0x8B:
        mn = "mov" if b == 0x8B else _ARITH_RM[b]
        regf, rm, i = _modrm(code, i)
        return done(mn, reg(REG32[regf]), rm, form="rm")
    if 0x40 <= b <= 0x47:
        return done("inc", reg(REG32[b - 0x40]))
    if 0x48 <= b <= 0x4F:
        return done("dec", reg(REG32[b - 0x48]))
    if 0x50 <= b <= 0x57:
        return done("push", reg(REG32[b - 0x50]))
    if 0x58 <= b <= 0x5F:
        return done("pop", reg(REG32[b - 0x58]))
    if b == 0x68:
        v, i = _u32(code, i)
        return done("push", imm(v, 32))
    if b == 0x6A:
        v, i = _i8(code, i)
        return done("push", imm(v, 8))
    if b in (0x81, 0x83):
        regf, rm, i = _modrm(code, i)
        if regf not in _GROUP1:
            raise UnsupportedOpcode(f"group-1 /{regf}")
        if b == 0x81:
            v, i = _u32(code, i)
            return done(_GROUP1[regf], rm, imm(v, 32))
        v, i = _i8(code, i)
        return done(_GROUP1[regf], rm, imm(v, 8))
    if b == 0x90:
        return done("nop")
    if 0xB8 <= b <= 0xBF:
        v, i = _u32(code, i)
        return done("mov", reg(REG32[b - 0xB8]), imm(v, 32))
    if b == 0xC1:
        regf, rm, i = _modrm(code, i, want_mem=False)
        if regf not in (4, 5):
            raise UnsupportedOpcode(f"shift group /{regf}")
        v, i = _u8(code, i)
        return done("shl" if regf == 4 else "shr", rm, imm(v, 8))
    if b == 0xC3:
        return done("ret")
    if b == 0xC7:
        regf, rm, i = _modrm(code, i, want_mem=True)
        if regf != 0:
            raise UnsupportedOpcode(f"C7 /{regf}")
        v, i = _u32(code, i)
        return done("mov", rm, imm(v, 32))
    if b == 0xF7:
        regf, rm, i = _modrm(code, i, want_mem=False)
        if regf != 0:
            raise UnsupportedOpcode(f"F7 /{regf}")
        v, i = _u32(code, i)
        return done("test", rm, imm(v, 32))
    if b == 0xE8:
        disp, i = _i32(code, i)
        return done("call", rel_target(disp), branch_form="rel32")
    if b == 0xE9:
        disp, i = _i32(code, i)
        return done("jmp", rel_target(disp), branch_form="rel32")
    if b == 0xEB:
        disp, i = _i8(code, i)
        return done("jmp", rel_target(disp), branch_form="rel8")
    if 0x70 <= b <= 0x7F:
        disp, i = _i8(code, i)
        c = b & 0xF
        return done("j" + COND_NAMES[c], rel_target(disp),
                    branch_form="rel8", cond=c)
    if 0xE0 <= b <= 0xE3:
        mn = ("loopne", "loope", "loop", "jecxz")[b - 0xE0]
        disp, i = _i8(code, i)
        return done(mn, rel_target(disp), branch_form="rel8")
    if b == 0x0F:
        b2, i = _u8(code, i)
        if 0x80 <= b2 <= 0x8F:
            disp, i = _i32(code, i)
            c = b2 & 0xF
            return done("j" + COND_NAMES[c], rel_target(disp),
                        branch_form="rel32", cond=c)
        if 0x90 <= b2 <= 0x9F:
            regf, rm, i = _modrm(code, i, want_mem=False)
            if regf != 0:
                raise UnsupportedOpcode(f"SETcc /{regf}")
            c = b2 & 0xF
            r8 = REG8[REG32.index(rm.reg)]
            return done("set" + COND_NAMES[c], reg8(r8), cond=c)
        if 0x40 <= b2 <= 0x4F:
            regf, rm, i = _modrm(code, i, want_mem=False)
            c = b2 & 0xF
            return done("cmov" + COND_NAMES[c], reg(REG32[regf]), rm, cond=c)
        raise UnsupportedOpcode(f"0F {b2:02X}")
    if b == 0xFF:
        regf, rm, i = _modrm(code, i, want_mem=True)
        if rm.base is not None or rm.disp_size != 32:
            raise UnsupportedOpcode("indirect form must be [disp32]")
        if regf == 2:
            return done("call", rm, branch_form="indirect")
        if regf == 4:
            return done("jmp", rm, branch_form="indirect")
        raise UnsupportedOpcode(f"FF /{regf}")
    if b == 0xA4:
        return done("movsb")
    if b == 0xAA:
        return done("stosb")
    if b == 0xAC:
        return done("lodsb")
    if b == 0x9C:
        return done("pushfd")
    if b == 0x9D:
        return done("popfd")
    if b == 0xF4:
        return done("hlt")
    raise UnsupportedOpcode(f"opcode {b:#04x}")


# ---------------------------------------------------------------- encode

def _fits_i8(v32):
    v32 &= MASK32
    return v32 <= 0x7F or v32 >= 0xFFFFFF80


def _imm_width(op):
    if op.imm_size:
        return op.imm_size
    return 8 if _fits_i8(op.value) else 32


def _mem_size(op):
    return 1 + {0: 0, 8: 1, 32: 4}[op.disp_size]


def _modrm_bytes(regf, rm):
    if rm.kind == "reg":
        return bytes([0xC0 | (regf << 3) | REG32.index(rm.reg)])
    if rm.kind == "reg8":
        return bytes([0xC0 | (regf << 3) | REG8.index(rm.reg)])
    if rm.base is None:
        return bytes([(regf << 3) | 5]) + (rm.disp & MASK32).to_bytes(4, "little")
    idx = REG32.index(rm.base)
    if idx == 4:
        raise Unencodable("ESP base needs a SIB byte (outside the subset)")
    if rm.disp_size == 0:
        if idx == 5:
            raise Unencodable("[EBP] with no displacement is not encodable")
        return bytes([idx])
    if rm.disp_size == 8:
        return bytes([0x40 | idx]) + (rm.disp & 0xFF).to_bytes(1, "little")
    return bytes([0x80 | idx]) + (rm.disp & MASK32).to_bytes(4, "little")


def encoded_size(ins):
    """Encoded length of an instruction, independent of its address."""
    mn, ops = ins.mnemonic, ins.operands
    n = 1 if ins.rep else 0
    if mn in ("nop", "ret", "hlt", "pushfd", "popfd") or mn in STRING_OPS:
        return n + 1
    if mn in ("inc", "dec"):
        return n + 1
    if mn in ("push", "pop") and ops[0].kind == "reg":
        return n + 1
    if mn == "push":
        return n + (2 if _imm_width(ops[0]) == 8 else 5)
    if mn in ("shl", "shr"):
        return n + 3
    if mn.startswith("set"):
        return n + 3
    if mn.startswith("cmov"):
        return n + 3
    if ins.branch_form == "rel8":
        return n + 2
    if ins.branch_form == "rel32":
        return n + (5 if mn in ("jmp", "call") else 6)
    if ins.branch_form == "indirect":
        return n + 2 + 4
    if mn == "trace":
        return n + 5
    if mn in BINARY_OPS:
        d, s = ops
        if mn == "mov" and d.kind == "reg" and s.kind == "imm":
            return n + 5
        if s.kind == "imm":
            opc_len = 1
            body = _mem_size(d) if d.kind == "mem" else 1
            if mn == "mov" or mn == "test":
                return n + opc_len + body + 4
            return n + opc_len + body + (1 if _imm_width(s) == 8 else 4)
        m = d if d.kind == "mem" else (s if s.kind == "mem" else None)
        return n + 1 + (_mem_size(m) if m is not None else 1)
    raise Unencodable(f"cannot size {ins}")


def encode(ins):
    """Shortest canonical encoding (or the recorded decoded form)."""
    mn, ops = ins.mnemonic, ins.operands
    out = bytearray()
    if ins.rep:
        out.append(0xF3)
    simple = {"nop": 0x90, "ret": 0xC3, "hlt": 0xF4, "pushfd": 0x9C,
              "popfd": 0x9D, "movsb": 0xA4, "stosb": 0xAA, "lodsb": 0xAC}
    if mn in simple:
        out.append(simple[mn])
        return bytes(out)
    if mn == "inc":
        out.append(0x40 + REG32.index(ops[0].reg))
        return bytes(out)
    if mn == "dec":
        out.append(0x48 + REG32.index(ops[0].reg))
        return bytes(out)
    if mn == "push" and ops[0].kind == "reg":
        out.append(0x50 + REG32.index(ops[0].reg))
        return bytes(out)
    if mn == "pop":
        out.append(0x58 + REG32.index(ops[0].reg))
        return bytes(out)
    if mn == "push":
        if _imm_width(ops[0]) == 8:
            out += bytes([0x6A, ops[0].value & 0xFF])
        else:
            out.append(0x68)
            out += (ops[0].value & MASK32).to_bytes(4, "little")
        return bytes(out)
    if mn in ("shl", "shr"):
        out.append(0xC1)
        out += _modrm_bytes(4 if mn == "shl" else 5, ops[0])
        out.append(ops[1].value & 0xFF)
        return bytes(out)
    if mn.startswith("set") and ins.cond is not None:
        out += bytes([0x0F, 0x90 + ins.cond])
        out += _modrm_bytes(0, ops[0])
        return bytes(out)
    if mn.startswith("cmov") and ins.cond is not None:
        out += bytes([0x0F, 0x40 + ins.cond])
        out += _modrm_bytes(REG32.index(ops[0].reg), ops[1])
        return bytes(out)
    if ins.branch_form in ("rel8", "rel32"):
        return bytes(out) + _encode_branch(ins)
    if ins.branch_form == "indirect":
        out += bytes([0xFF, 0x15 if mn == "call" else 0x25])
        out += (ops[0].disp & MASK32).to_bytes(4, "little")
        return bytes(out)
    if mn in BINARY_OPS:
        return bytes(out) + _encode_binary(ins)
    raise Unencodable(f"cannot encode {ins}")


def _encode_branch(ins):
    t = ins.branch_target()
    size = encoded_size(ins)
    disp = (t - (ins.address + size)) & MASK32
    sdisp = disp - (1 << 32) if disp >= (1 << 31) else disp
    mn = ins.mnemonic
    if ins.branch_form == "rel8":
        if not -128 <= sdisp <= 127:
            raise DisplacementOverflow(
                f"{ins} rel8 displacement {sdisp} out of range")
        db = disp & 0xFF
        if mn == "jmp":
            return bytes([0xEB, db])
        if mn in ("loopne", "loope", "loop", "jecxz"):
            opc = {"loopne": 0xE0, "loope": 0xE1, "loop": 0xE2, "jecxz": 0xE3}
            return bytes([opc[mn], db])
        if ins.cond is not None:
            return bytes([0x70 + ins.cond, db])
        raise Unencodable(f"no rel8 form for {mn}")
    d4 = disp.to_bytes(4, "little")
    if mn == "call":
        return bytes([0xE8]) + d4
    if mn == "jmp":
        return bytes([0xE9]) + d4
    if ins.cond is not None:
        return bytes([0x0F, 0x80 + ins.cond]) + d4
    raise Unencodable(f"no rel32 form for {mn}")


def _encode_binary(ins):
    mn, (d, s) = ins.mnemonic, ins.operands
    if mn == "test" and s.kind == "mem":
        d, s = s, d  # TEST is commutative; only the r/m,r form exists
    if s.kind == "imm":
        if mn == "mov":
            if d.kind == "reg":
                return bytes([0xB8 + REG32.index(d.reg)]) \
                    + (s.value & MASK32).to_bytes(4, "little")
            return bytes([0xC7]) + _modrm_bytes(0, d) \
                + (s.value & MASK32).to_bytes(4, "little")
        if mn == "test":
            return bytes([0xF7]) + _modrm_bytes(0, d) \
                + (s.value & MASK32).to_bytes(4, "little")
        ext = _GROUP1_EXT[mn]
        if _imm_width(s) == 8:
            return bytes([0x83]) + _modrm_bytes(ext, d) \
                + bytes([s.value & 0xFF])
        return bytes([0x81]) + _modrm_bytes(ext, d) \
            + (s.value & MASK32).to_bytes(4, "little")
    opc_mr = 0x89 if mn == "mov" else (0x85 if mn == "test" else _ARITH_OPC_MR[mn])
    if d.kind == "mem" or mn == "test":
        return bytes([opc_mr]) + _modrm_bytes(REG32.index(s.reg), d)
    if s.kind == "mem":
        return bytes([opc_mr + 2]) + _modrm_bytes(REG32.index(d.reg), s)
    # reg,reg: honor the decoded direction, default mr
    if ins.form == "rm":
        return bytes([opc_mr + 2]) + _modrm_bytes(REG32.index(d.reg), s)
    return bytes([opc_mr]) + _modrm_bytes(REG32.index(s.reg), d)


# ------------------------------------------------------ memory accesses

def memory_accesses(ins, regs):
    """All memory accesses of one execution of ins, given a register file.

    Returns a list of (address, size, access) with access read|write|
    readwrite. String instructions report their first-iteration byte
    accesses. regs is any mapping register name -> 32-bit value.
    """
    mn = ins.mnemonic
    out = []
    m = ins.mem_operand
    if m is not None and ins.branch_form == "none":
        addr = (m.disp + (regs[m.base] if m.base else 0)) & MASK32
        if mn == "mov":
            acc = "write" if ins.operands[0].kind == "mem" else "read"
        elif mn in ("cmp", "test"):
            acc = "read"
        elif ins.operands[0].kind == "mem":
            acc = "readwrite"
        else:
            acc = "read"
        out.append((addr, 4, acc))
    if ins.branch_form == "indirect":
        out.append((m.disp & MASK32, 4, "read"))
        if mn == "call":
            out.append(((regs["ESP"] - 4) & MASK32, 4, "write"))
        return out
    if mn == "push" or mn == "pushfd" or (mn == "call" and ins.branch_form == "rel32"):
        out.append(((regs["ESP"] - 4) & MASK32, 4, "write"))
    elif mn in ("pop", "popfd", "ret"):
        out.append((regs["ESP"] & MASK32, 4, "read"))
    elif mn == "movsb":
        out.append((regs["ESI"] & MASK32, 1, "read"))
        out.append((regs["EDI"] & MASK32, 1, "write"))
    elif mn == "stosb":
        out.append((regs["EDI"] & MASK32, 1, "write"))
    elif mn == "lodsb":
        out.append((regs["ESI"] & MASK32, 1, "read"))
    return out


def effective_address(ins, regs):
    """Primary effective address of ins: (address, size, access)."""
    accesses = memory_accesses(ins, regs)
    if not accesses:
        raise NoMemoryOperand(str(ins))
    return accesses[0]
