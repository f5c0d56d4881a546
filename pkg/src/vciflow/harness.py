"""Deterministic interpreter, trace packets and the packet channel.

Code lands in an integrated image assemble to CALL rel32 into a
reserved instrumentation area; the interpreter intercepts those calls
before they execute, emits a 60-byte trace packet capturing the CPU
context (and the effective address of the upcoming memory terminator),
and resumes at the next instruction. Architectural state is untouched.

Static mode appends packets to a log for later processing; dynamic mode
pushes them through a bounded single-producer single-consumer channel
to a consumer running concurrently. Both must yield identical results.
"""

from __future__ import annotations

import struct
import threading
from collections import deque
from dataclasses import dataclass, field

from .cells import REG32
from .descriptors import describe
from .errors import (ChannelClosed, ChannelPoisoned, MemoryFault,
                     PacketIdExhausted, PacketLogFull, UndecodableInstruction,
                     VciflowError)
from .isa import MASK32, decode, memory_accesses

FLAG_NAMES = ("CF", "PF", "AF", "ZF", "SF", "OF", "DF")
# EFLAGS image bit positions
_FLAG_POS = {"CF": 0, "PF": 2, "AF": 4, "ZF": 6, "SF": 7, "DF": 10, "OF": 11}

ACCESS_CODE = {"none": 0, "read": 1, "write": 2, "readwrite": 3}
ACCESS_NAME = {v: k for k, v in ACCESS_CODE.items()}


@dataclass(frozen=True)
class Image:
    base: int
    data: bytes

    @property
    def end(self):
        return self.base + len(self.data)

    def contains(self, addr):
        return self.base <= addr < self.end


class MachineState:
    """Registers, flags, sparse byte memory and a halt latch."""

    __slots__ = ("regs", "eip", "flags", "memory", "halted", "strict")

    def __init__(self, eip=0, regs=None, esp=None, strict=True):
        self.regs = {r: 0 for r in REG32}
        if regs:
            self.regs.update({k.upper(): v & MASK32 for k, v in regs.items()})
        if esp is not None:
            self.regs["ESP"] = esp & MASK32
        self.eip = eip & MASK32
        self.flags = {f: False for f in FLAG_NAMES}
        self.memory = {}
        self.halted = False
        self.strict = strict

    def copy(self):
        dup = MachineState(self.eip, strict=self.strict)
        dup.regs = dict(self.regs)
        dup.flags = dict(self.flags)
        dup.memory = dict(self.memory)
        dup.halted = self.halted
        return dup

    def map_bytes(self, addr, data):
        for i, b in enumerate(data):
            self.memory[(addr + i) & MASK32] = b

    def map_image(self, image):
        self.map_bytes(image.base, image.data)

    def read8(self, addr):
        addr &= MASK32
        try:
            return self.memory[addr]
        except KeyError:
            if self.strict:
                raise MemoryFault(f"read of unmapped byte 0x{addr:08X}") from None
            return 0

    def read32(self, addr):
        return (self.read8(addr) | self.read8(addr + 1) << 8
                | self.read8(addr + 2) << 16 | self.read8(addr + 3) << 24)

    def write8(self, addr, value):
        self.memory[addr & MASK32] = value & 0xFF

    def write32(self, addr, value):
        for i in range(4):
            self.write8(addr + i, value >> (8 * i))

    def flags_image(self):
        img = 1 << 1  # reserved EFLAGS bit, always set
        for name, pos in _FLAG_POS.items():
            if self.flags[name]:
                img |= 1 << pos
        return img

    def set_flags_image(self, img):
        for name, pos in _FLAG_POS.items():
            self.flags[name] = bool(img >> pos & 1)


# -------------------------------------------------------------- stepping

def _parity(value):
    return bin(value & 0xFF).count("1") % 2 == 0


def _set_szp(st, res):
    st.flags["ZF"] = res == 0
    st.flags["SF"] = bool(res >> 31)
    st.flags["PF"] = _parity(res)


def _flags_add(st, a, b, carry=0):
    res = (a + b + carry) & MASK32
    st.flags["CF"] = a + b + carry > MASK32
    st.flags["AF"] = bool((a ^ b ^ res) & 0x10)
    st.flags["OF"] = bool(~(a ^ b) & (a ^ res) & 0x80000000)
    _set_szp(st, res)
    return res


def _flags_sub(st, a, b, borrow=0):
    res = (a - b - borrow) & MASK32
    st.flags["CF"] = a < b + borrow
    st.flags["AF"] = bool((a ^ b ^ res) & 0x10)
    st.flags["OF"] = bool((a ^ b) & (a ^ res) & 0x80000000)
    _set_szp(st, res)
    return res


def _flags_logic(st, res):
    st.flags["CF"] = False
    st.flags["OF"] = False
    st.flags["AF"] = False
    _set_szp(st, res)
    return res


def _cond(st, c):
    f = st.flags
    table = (
        f["OF"], not f["OF"], f["CF"], not f["CF"], f["ZF"], not f["ZF"],
        f["CF"] or f["ZF"], not (f["CF"] or f["ZF"]), f["SF"], not f["SF"],
        f["PF"], not f["PF"], f["SF"] != f["OF"], f["SF"] == f["OF"],
        f["ZF"] or f["SF"] != f["OF"], not f["ZF"] and f["SF"] == f["OF"],
    )
    return table[c]


def _read_operand(st, op):
    if op.kind == "reg":
        return st.regs[op.reg]
    if op.kind == "imm":
        return op.value & MASK32
    if op.kind == "mem":
        addr = (op.disp + (st.regs[op.base] if op.base else 0)) & MASK32
        return st.read32(addr)
    raise VciflowError(f"cannot read operand {op}")


def _write_operand(st, op, value):
    if op.kind == "reg":
        st.regs[op.reg] = value & MASK32
        return
    if op.kind == "mem":
        addr = (op.disp + (st.regs[op.base] if op.base else 0)) & MASK32
        st.write32(addr, value)
        return
    raise VciflowError(f"cannot write operand {op}")


def _push(st, value):
    st.regs["ESP"] = (st.regs["ESP"] - 4) & MASK32
    st.write32(st.regs["ESP"], value)


def _pop(st):
    value = st.read32(st.regs["ESP"])
    st.regs["ESP"] = (st.regs["ESP"] + 4) & MASK32
    return value


def step(state, instr):
    """Execute one decoded instruction; returns a taken-transfer target
    (or None) so the caller can vet indirect control flow."""
    st = state
    mn = instr.mnemonic
    nxt = (instr.address + instr.encoded_length) & MASK32
    st.eip = nxt
    transfer = None

    if mn == "nop":
        pass
    elif mn == "hlt":
        st.halted = True
    elif mn == "mov":
        d, s = instr.operands
        _write_operand(st, d, _read_operand(st, s))
    elif mn in ("add", "adc", "sub", "xor", "and", "or", "cmp", "test"):
        d, s = instr.operands
        a = _read_operand(st, d)
        b = _read_operand(st, s)
        if mn == "add":
            res = _flags_add(st, a, b)
        elif mn == "adc":
            res = _flags_add(st, a, b, int(st.flags["CF"]))
        elif mn in ("sub", "cmp"):
            res = _flags_sub(st, a, b)
        elif mn == "xor":
            res = _flags_logic(st, a ^ b)
        elif mn == "and" or mn == "test":
            res = _flags_logic(st, a & b)
        else:
            res = _flags_logic(st, a | b)
        if mn not in ("cmp", "test"):
            _write_operand(st, d, res)
    elif mn == "inc" or mn == "dec":
        r = instr.operands[0]
        a = _read_operand(st, r)
        carry = st.flags["CF"]
        res = _flags_add(st, a, 1) if mn == "inc" else _flags_sub(st, a, 1)
        st.flags["CF"] = carry
        _write_operand(st, r, res)
    elif mn in ("shl", "shr"):
        r, cnt = instr.operands
        a = _read_operand(st, r)
        c = cnt.value & 31
        if c:
            if mn == "shl":
                res = (a << c) & MASK32
                st.flags["CF"] = bool(a >> (32 - c) & 1)
                st.flags["OF"] = (bool(res >> 31) != st.flags["CF"]) if c == 1 else False
            else:
                res = a >> c
                st.flags["CF"] = bool(a >> (c - 1) & 1)
                st.flags["OF"] = bool(a >> 31) if c == 1 else False
            st.flags["AF"] = False
            _set_szp(st, res)
            _write_operand(st, r, res)
    elif mn == "push":
        _push(st, _read_operand(st, instr.operands[0]))
    elif mn == "pop":
        _write_operand(st, instr.operands[0], _pop(st))
    elif mn == "pushfd":
        _push(st, st.flags_image())
    elif mn == "popfd":
        st.set_flags_image(_pop(st))
    elif mn == "call":
        if instr.branch_form == "indirect":
            t = st.read32(instr.operands[0].disp)
        else:
            t = instr.branch_target()
        _push(st, nxt)
        st.eip = t & MASK32
        transfer = st.eip
    elif mn == "ret":
        st.eip = _pop(st)
        transfer = st.eip
    elif mn == "jmp":
        if instr.branch_form == "indirect":
            st.eip = st.read32(instr.operands[0].disp) & MASK32
        else:
            st.eip = instr.branch_target()
        transfer = st.eip
    elif mn == "jecxz":
        if st.regs["ECX"] == 0:
            st.eip = instr.branch_target()
            transfer = st.eip
    elif mn in ("loop", "loope", "loopne"):
        st.regs["ECX"] = (st.regs["ECX"] - 1) & MASK32
        take = st.regs["ECX"] != 0
        if mn == "loope":
            take = take and st.flags["ZF"]
        elif mn == "loopne":
            take = take and not st.flags["ZF"]
        if take:
            st.eip = instr.branch_target()
            transfer = st.eip
    elif instr.cond is not None and mn.startswith("j"):
        if _cond(st, instr.cond):
            st.eip = instr.branch_target()
            transfer = st.eip
    elif instr.cond is not None and mn.startswith("set"):
        r8 = instr.operands[0].reg
        idx = ("AL", "CL", "DL", "BL", "AH", "CH", "DH", "BH").index(r8)
        reg32 = REG32[idx & 3]
        shift = (idx >> 2) * 8
        val = st.regs[reg32] & ~(0xFF << shift)
        if _cond(st, instr.cond):
            val |= 1 << shift
        st.regs[reg32] = val
    elif instr.cond is not None and mn.startswith("cmov"):
        d, s = instr.operands
        if _cond(st, instr.cond):
            _write_operand(st, d, _read_operand(st, s))
    elif mn in ("movsb", "stosb", "lodsb"):
        delta = -1 if st.flags["DF"] else 1
        count = st.regs["ECX"] if instr.rep else 1
        for _ in range(count):
            if mn == "movsb":
                st.write8(st.regs["EDI"], st.read8(st.regs["ESI"]))
                st.regs["ESI"] = (st.regs["ESI"] + delta) & MASK32
                st.regs["EDI"] = (st.regs["EDI"] + delta) & MASK32
            elif mn == "stosb":
                st.write8(st.regs["EDI"], st.regs["EAX"] & 0xFF)
                st.regs["EDI"] = (st.regs["EDI"] + delta) & MASK32
            else:
                st.regs["EAX"] = (st.regs["EAX"] & ~0xFF) | st.read8(st.regs["ESI"])
                st.regs["ESI"] = (st.regs["ESI"] + delta) & MASK32
        if instr.rep:
            st.regs["ECX"] = 0
    else:
        raise UndecodableInstruction(f"no semantics for {instr}")
    return transfer


# --------------------------------------------------------------- packets

PACKET_STRUCT = struct.Struct("<5IHBB9I")
PACKET_SIZE = PACKET_STRUCT.size
assert PACKET_SIZE == 60

LOG_MAGIC = b"SPPK"
LOG_VERSION = 1
DEFAULT_LOG_CAPACITY = 833333  # 50 MB of 60-byte records


@dataclass(frozen=True)
class TracePacket:
    packet_id: int
    thread_id: int
    region_id: int
    instr_address: int
    ea: int
    ea_size: int
    access_kind: int
    pad: int
    context_regs: tuple          # EAX,ECX,EDX,EBX,ESP,EBP,ESI,EDI
    context_flags: int

    def pack(self):
        return PACKET_STRUCT.pack(
            self.packet_id, self.thread_id, self.region_id,
            self.instr_address, self.ea, self.ea_size, self.access_kind,
            self.pad, *self.context_regs, self.context_flags)

    @classmethod
    def unpack(cls, raw):
        if len(raw) != PACKET_SIZE:
            raise VciflowError(f"packet must be {PACKET_SIZE} bytes")
        v = PACKET_STRUCT.unpack(raw)
        return cls(packet_id=v[0], thread_id=v[1], region_id=v[2],
                   instr_address=v[3], ea=v[4], ea_size=v[5],
                   access_kind=v[6], pad=v[7], context_regs=tuple(v[8:16]),
                   context_flags=v[16])

    def reg(self, name):
        return self.context_regs[REG32.index(name)]

    def flag(self, name):
        return bool(self.context_flags >> _FLAG_POS[name] & 1)


class PacketEmitter:
    """Strictly sequential packet id source; exhausts at 2**32 ids."""

    def __init__(self, first_id=0, id_space=1 << 32):
        self.next_id = first_id
        self.id_space = id_space

    def make(self, region_id, instr_address, ea, ea_size, access_kind, state):
        if self.next_id >= self.id_space:
            raise PacketIdExhausted(
                f"packet id space of {self.id_space} values exhausted")
        pkt = TracePacket(
            packet_id=self.next_id, thread_id=0, region_id=region_id,
            instr_address=instr_address & MASK32, ea=ea & MASK32,
            ea_size=ea_size, access_kind=access_kind, pad=0,
            context_regs=tuple(state.regs[r] for r in REG32),
            context_flags=state.flags_image())
        self.next_id += 1
        return pkt


class PacketLog:
    """Append-only packet store with a fixed capacity, mirroring the
    pre-sized mapped-file layout: SPPK magic, u16 version, u64 count."""

    def __init__(self, capacity=DEFAULT_LOG_CAPACITY):
        self.capacity = capacity
        self.packets = []

    def append(self, packet):
        if len(self.packets) >= self.capacity:
            raise PacketLogFull(f"log capacity {self.capacity} reached")
        self.packets.append(packet)

    def __len__(self):
        return len(self.packets)

    def __iter__(self):
        return iter(self.packets)

    def __getitem__(self, i):
        return self.packets[i]

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(LOG_MAGIC)
            fh.write(struct.pack("<HQ", LOG_VERSION, len(self.packets)))
            for pkt in self.packets:
                fh.write(pkt.pack())

    @classmethod
    def load(cls, path, capacity=DEFAULT_LOG_CAPACITY):
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != LOG_MAGIC:
                raise VciflowError(f"bad packet log magic {magic!r}")
            version, count = struct.unpack("<HQ", fh.read(10))
            if version != LOG_VERSION:
                raise VciflowError(f"unsupported packet log version {version}")
            log = cls(capacity=max(capacity, count))
            for _ in range(count):
                log.packets.append(TracePacket.unpack(fh.read(PACKET_SIZE)))
        return log


class PacketChannel:
    """Bounded FIFO between exactly one producer and one consumer.

    push blocks while the buffer is full; pop blocks while it is empty.
    close() lets the consumer drain and then raises ChannelClosed;
    poison() makes the producer's next push raise ChannelPoisoned.
    """

    def __init__(self, capacity):
        if capacity < 1:
            raise VciflowError("channel capacity must be at least 1")
        self.capacity = capacity
        self._buf = deque()
        self._lock = threading.Lock()
        self._not_full = threading.Condition(self._lock)
        self._not_empty = threading.Condition(self._lock)
        self._closed = False
        self._poison = None

    def push(self, packet):
        with self._lock:
            while len(self._buf) >= self.capacity:
                if self._poison is not None:
                    raise ChannelPoisoned(str(self._poison))
                self._not_full.wait(0.05)
            if self._poison is not None:
                raise ChannelPoisoned(str(self._poison))
            if self._closed:
                raise ChannelClosed("push after close")
            self._buf.append(packet)
            self._not_empty.notify()

    def pop(self):
        with self._lock:
            while not self._buf:
                if self._closed:
                    raise ChannelClosed("channel drained")
                self._not_empty.wait(0.05)
            pkt = self._buf.popleft()
            self._not_full.notify()
            return pkt

    def close(self):
        with self._lock:
            self._closed = True
            self._not_empty.notify_all()

    def poison(self, exc):
        with self._lock:
            self._poison = exc
            self._not_full.notify_all()


# ------------------------------------------------------------ execution

@dataclass(frozen=True)
class LandSite:
    area_address: int
    call_address: int
    region_id: int
    next_address: int
    mem_address: int | None      # new-image address of the memory terminator


@dataclass
class RunTrace:
    packets: object              # PacketLog
    transfers: list = field(default_factory=list)  # (packet_id, source, target)
    unknown_regions: list = field(default_factory=list)


@dataclass
class RunControl:
    """Everything run() needs beyond the raw image."""
    lands: dict = field(default_factory=dict)         # call target -> LandSite
    imports: dict = field(default_factory=dict)       # address -> name
    known_addresses: frozenset = frozenset()
    code_end: int | None = None
    max_steps: int = 10_000_000


def _import_is_exit(name):
    return name.lower().endswith("exitprocess")


def run(image, entry, state=None, control=None, emit=None,
        emitter=None, map_images=()):
    """Run an image until HLT, clean fall-off or an intercepted exit.

    Code-land CALLs are intercepted and emitted via emit(packet); import
    targets behave as a plain return unless their name marks process
    exit. Returns (final state, RunTrace).
    """
    control = control or RunControl()
    emitter = emitter or PacketEmitter()
    state = state or MachineState()
    state.eip = entry & MASK32
    state.map_image(image)
    for extra in map_images:
        state.map_image(extra)
    code_end = control.code_end if control.code_end is not None else image.end
    trace = RunTrace(packets=PacketLog())

    cache = {}
    steps = 0
    jumped_here = False  # the first thunk starts exactly at code_end
    while not state.halted:
        ip = state.eip
        if ip == image.end or (ip == code_end and not jumped_here):
            break
        if ip in control.imports:
            if _import_is_exit(control.imports[ip]):
                state.halted = True
                break
            state.eip = _pop(state)
            jumped_here = True
            continue
        if not image.contains(ip):
            raise UndecodableInstruction(
                f"execution left the image at 0x{ip:08X}")
        instr = cache.get(ip)
        if instr is None:
            try:
                instr = decode(image.data, ip - image.base, image.base)
            except VciflowError as exc:
                raise UndecodableInstruction(f"0x{ip:08X}: {exc}") from exc
            cache[ip] = instr
        if (instr.mnemonic == "call" and instr.branch_form == "rel32"
                and instr.branch_target() in control.lands):
            site = control.lands[instr.branch_target()]
            ea, size, access = 0, 0, 0
            if site.mem_address is not None:
                mem_instr = cache.get(site.mem_address)
                if mem_instr is None:
                    mem_instr = decode(image.data,
                                       site.mem_address - image.base,
                                       image.base)
                    cache[site.mem_address] = mem_instr
                ea, size, _acc = memory_accesses(mem_instr, state.regs)[0]
                access = ACCESS_CODE[describe(mem_instr).mem]
            pkt = emitter.make(site.region_id, site.next_address,
                               ea, size, access, state)
            trace.packets.append(pkt)
            if emit is not None:
                emit(pkt)
            state.eip = (ip + instr.encoded_length) & MASK32
            jumped_here = False
            continue
        transfer = step(state, instr)
        jumped_here = transfer is not None
        if transfer is not None and control.known_addresses:
            known = (transfer in control.known_addresses
                     or transfer in control.imports
                     or transfer == code_end or transfer == image.end)
            if not known:
                trace.transfers.append((emitter.next_id - 1, ip, transfer))
        steps += 1
        if steps >= control.max_steps:
            raise VciflowError(f"exceeded {control.max_steps} steps")
    return state, trace


@dataclass(frozen=True)
class Diagnostic:
    kind: str
    packet_id: int
    source: int
    target: int

    def __str__(self):
        return (f"{self.kind}: transfer from 0x{self.source:08X} to "
                f"unmapped 0x{self.target:08X} (after packet {self.packet_id})")


def detect_interference(trace, region_map=None):
    """Surface control transfers into code the analysis cannot see.

    The packet processor cannot propagate through uninstrumented
    targets; rather than silently mispropagating, every executed
    transfer whose target has no region mapping becomes a warning.
    """
    diagnostics = [Diagnostic("unmapped-transfer", pid, src, dst)
                   for pid, src, dst in trace.transfers]
    for pid, rid in getattr(trace, "unknown_regions", ()):
        diagnostics.append(Diagnostic("unknown-region", pid, rid, rid))
    return diagnostics
