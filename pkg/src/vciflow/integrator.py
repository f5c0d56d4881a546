"""Editable instruction lists and two-stage relocating assembly.

Instructions live in a doubly-linked list (constant-time insertion and
removal anywhere) with an address map for lookup. Intra-image branches
link to nodes, never to raw addresses, so edits cannot dangle; branches
leaving the image are routed through appended `JMP DWORD PTR [slot]`
thunks whose 4-byte slots hold the extern target addresses.

Stage 1 lays nodes out from the new base and expands every rel8 branch
whose displacement no longer fits; LOOP/LOOPE/LOOPNE/JECXZ have no
near form and are rewritten as flag-preserving multi-instruction
sequences (PUSHFD/DEC ECX/.../POPFD). Expansion only grows encodings,
so iterating to a fixed point terminates. Stage 2 patches every
displacement from final addresses and emits the image bytes.

Code lands are trace-marker nodes that assemble to CALL rel32 into a
reserved instrumentation area past the import slots; the interpreter
intercepts those targets, emits a packet and resumes, leaving all
architectural state untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

from .errors import (BranchIntoInstructionMiddle,
                     DeleteLastNodeWithIncomingLinks, InvalidHandle,
                     LayoutDivergence, RegionImageMismatch, UnresolvedImport)
from .harness import Image, LandSite, RunControl
from .isa import (MASK32, Instruction, build, encode, encoded_size, jcc,
                  reg, target)
from .regions import discover

_LOOP_FAMILY = ("loop", "loope", "loopne", "jecxz")


class Node:
    """One instruction in the integration list (an opaque handle)."""

    __slots__ = ("instr", "origin", "prev", "next", "link_node",
                 "link_extern", "incoming", "new_address", "owner",
                 "original_address", "marker_region", "marker_anchor",
                 "marker_is_mem")

    def __init__(self, instr, origin, owner, original_address=None):
        self.instr = instr
        self.origin = origin
        self.owner = owner
        self.original_address = original_address
        self.prev = None
        self.next = None
        self.link_node = None
        self.link_extern = None
        self.incoming = set()
        self.new_address = None
        self.marker_region = None
        self.marker_anchor = None
        self.marker_is_mem = False

    def __repr__(self):
        return f"<Node {self.origin} {self.instr}>"


class IntegrationList:
    """Mutable instruction sequence for one loaded code image."""

    def __init__(self, image_base, image_size):
        self.image_base = image_base
        self.image_size = image_size
        self.head = None
        self.tail = None
        self.by_addr = {}
        self.import_targets = {}     # extern address -> [referrer addrs]
        self.count = 0

    def __iter__(self):
        node = self.head
        while node is not None:
            yield node
            node = node.next

    def __len__(self):
        return self.count

    def node_at(self, address):
        try:
            return self.by_addr[address]
        except KeyError:
            raise InvalidHandle(f"no node at 0x{address:08X}") from None

    def _check(self, node):
        if not isinstance(node, Node) or node.owner is not self:
            raise InvalidHandle(f"{node!r} is not a live node of this list")

    def _link_in(self, node, prev, nxt):
        node.prev, node.next = prev, nxt
        if prev is not None:
            prev.next = node
        else:
            self.head = node
        if nxt is not None:
            nxt.prev = node
        else:
            self.tail = node
        self.count += 1

    def append(self, instr, origin="injected", original_address=None):
        node = Node(instr, origin, self, original_address)
        self._link_in(node, self.tail, None)
        if original_address is not None:
            self.by_addr[original_address] = node
        return node

    def insert_after(self, handle, instr, origin="injected"):
        self._check(handle)
        node = Node(instr, origin, self)
        self._link_in(node, handle, handle.next)
        return node

    def insert_before(self, handle, instr, origin="injected",
                      take_links=False):
        self._check(handle)
        node = Node(instr, origin, self)
        self._link_in(node, handle.prev, handle)
        if take_links:
            for src in tuple(handle.incoming):
                src.link_node = node
                node.incoming.add(src)
            handle.incoming.clear()
        return node

    def delete(self, handle):
        self._check(handle)
        if handle.incoming and handle.next is None:
            raise DeleteLastNodeWithIncomingLinks(
                "no successor to re-point incoming links to")
        for src in tuple(handle.incoming):
            src.link_node = handle.next
            handle.next.incoming.add(src)
        handle.incoming.clear()
        if handle.link_node is not None:
            handle.link_node.incoming.discard(handle)
        if handle.prev is not None:
            handle.prev.next = handle.next
        else:
            self.head = handle.next
        if handle.next is not None:
            handle.next.prev = handle.prev
        else:
            self.tail = handle.prev
        if handle.original_address is not None:
            self.by_addr.pop(handle.original_address, None)
        handle.owner = None
        self.count -= 1

    def replace(self, handle, instr):
        self._check(handle)
        if handle.link_node is not None:
            handle.link_node.incoming.discard(handle)
            handle.link_node = None
        handle.link_extern = None
        handle.instr = instr
        handle.origin = "replacement" if handle.original_address is not None \
            else handle.origin
        t = instr.branch_target()
        if t is not None:
            self._bind_target(handle, t)
        return handle

    def _bind_target(self, node, t):
        if t in self.by_addr:
            node.link_node = self.by_addr[t]
            node.link_node.incoming.add(node)
        elif self.image_base <= t < self.image_base + self.image_size:
            raise BranchIntoInstructionMiddle(
                f"branch from {node.instr} into 0x{t:08X}")
        else:
            node.link_extern = t
            self.import_targets.setdefault(t, []).append(
                node.original_address if node.original_address is not None
                else -1)


def load_program(code, base, entries):
    """Decode every reachable instruction into an integration list."""
    instrs, _targets, _externs = discover(code, base, entries)
    lst = IntegrationList(base, len(code))
    for addr in sorted(instrs):
        lst.append(instrs[addr], origin="original", original_address=addr)
    for node in lst:
        t = node.instr.branch_target()
        if t is not None:
            lst._bind_target(node, t)
    return lst


def inject_code_lands(lst, region_map):
    """Insert one trace marker per region: immediately before a memory
    terminator when present, else at region entry."""
    if region_map.base != lst.image_base:
        raise RegionImageMismatch(
            f"regions built at 0x{region_map.base:08X}, "
            f"list loaded at 0x{lst.image_base:08X}")
    markers = 0
    for region in region_map.regions:
        if region.mem_index is not None:
            anchor_addr = region.instructions[region.mem_index].address
        else:
            anchor_addr = region.entry
        if anchor_addr not in lst.by_addr:
            raise RegionImageMismatch(
                f"region {region.id} instruction 0x{anchor_addr:08X} "
                f"is not in the list")
        anchor = lst.by_addr[anchor_addr]
        marker = lst.insert_before(anchor, build("trace"), take_links=True)
        marker.marker_region = region.id
        marker.marker_anchor = anchor
        marker.marker_is_mem = region.mem_index is not None
        markers += 1
    return markers


# ------------------------------------------------------------- assembly

@dataclass(frozen=True)
class Thunk:
    extern_target: int
    name: str
    address: int
    slot_address: int


@dataclass
class IntegrationStats:
    passes: int = 0
    expanded: int = 0
    emulated: int = 0


@dataclass
class IntegratedImage:
    base: int
    data: bytes
    code_end: int
    addr_map: dict
    entry_map: dict
    thunks: tuple
    lands: tuple
    instruction_addresses: frozenset
    area: tuple
    imports: dict
    stats: IntegrationStats

    @property
    def image(self):
        return Image(self.base, self.data)

    def entry_for(self, original_address):
        return self.entry_map.get(original_address,
                                  self.addr_map.get(original_address))

    def control(self, max_steps=10_000_000):
        return RunControl(
            lands={land.area_address: land for land in self.lands},
            imports=dict(self.imports),
            known_addresses=self.instruction_addresses,
            code_end=self.code_end,
            max_steps=max_steps)

    def save_map(self, path):
        doc = {"base": f"0x{self.base:08X}",
               "code_end": f"0x{self.code_end:08X}",
               "map": {f"0x{o:08X}": f"0x{n:08X}"
                       for o, n in sorted(self.addr_map.items())}}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")


def _size_of(node):
    return 5 if node.marker_region is not None else encoded_size(node.instr)


def _promote(node):
    node.instr = replace(node.instr, branch_form="rel32")


def _splice_emulation(lst, node, stats):
    """Replace a LOOP-family node with the flag-preserving sequence."""
    mn = node.instr.mnemonic
    fall = node.next
    if fall is None:
        fall = lst.append(build("hlt"), origin="injected")
    t_node, t_extern = node.link_node, node.link_extern

    def ins(instr, after):
        return lst.insert_after(after, instr, origin="injected")

    def link(branch, to_node=None, extern=None):
        if to_node is not None:
            branch.link_node = to_node
            to_node.incoming.add(branch)
        else:
            branch.link_extern = extern

    z = target(0)
    head = lst.insert_before(node, build("pushfd"), origin="injected",
                             take_links=True)
    if mn == "jecxz":
        n2 = ins(build("test", reg("ECX"), reg("ECX")), head)
    else:
        n2 = ins(build("dec", reg("ECX")), head)
    if mn in ("jecxz", "loop"):
        # PUSHFD / test-or-dec / Jcc L1 / POPFD / JMP fall / L1: POPFD / JMP t
        n3 = ins(jcc("z" if mn == "jecxz" else "nz", 0), n2)
        n4 = ins(build("popfd"), n3)
        n5 = ins(build("jmp", z, branch_form="rel8"), n4)
        n6 = ins(build("popfd"), n5)
        n7 = ins(build("jmp", z, branch_form="rel8"), n6)
        link(n3, to_node=n6)
        link(n5, to_node=fall)
        link(n7, to_node=t_node, extern=t_extern)
    else:
        # PUSHFD / DEC ECX / JZ L1 / POPFD / Jcc t / JMP fall / L1: POPFD
        n3 = ins(jcc("z", 0), n2)
        n4 = ins(build("popfd"), n3)
        n5 = ins(jcc("z" if mn == "loope" else "nz", 0), n4)
        n6 = ins(build("jmp", z, branch_form="rel8"), n5)
        n7 = ins(build("popfd"), n6)
        link(n3, to_node=n7)
        link(n5, to_node=t_node, extern=t_extern)
        link(n6, to_node=fall)
    head.original_address = node.original_address
    if node.original_address is not None:
        lst.by_addr[node.original_address] = head
    node.original_address = None
    lst.delete(node)
    stats.emulated += 1
    return head


def integrate(lst, new_base=None, imports=None):
    """Assemble the list into a relocated, semantically equal image."""
    if new_base is None:
        new_base = lst.image_base
    imports = {int(k): v for k, v in (imports or {}).items()}
    stats = IntegrationStats()

    extern_order = []
    for node in lst:
        if node.link_extern is not None:
            if node.link_extern not in imports:
                raise UnresolvedImport(
                    f"extern target 0x{node.link_extern:08X} has no "
                    f"import table entry")
            if node.link_extern not in extern_order:
                extern_order.append(node.link_extern)

    # stage 1: iterate layout until every displacement fits; extern
    # branches go through far thunks, so rel8 extern forms always expand
    while True:
        stats.passes += 1
        if stats.passes > 2 * lst.count + 16:
            raise LayoutDivergence(
                "relaxation failed to reach a fixed point")
        cursor = new_base
        for node in lst:
            node.new_address = cursor
            cursor += _size_of(node)
        code_end = cursor
        changed = False
        for node in list(lst):
            if node.instr.branch_form != "rel8":
                continue
            if node.link_node is not None:
                size = _size_of(node)
                disp = node.link_node.new_address - (node.new_address + size)
                if -128 <= disp <= 127:
                    continue
            elif node.link_extern is None:
                continue
            if node.instr.mnemonic in _LOOP_FAMILY:
                _splice_emulation(lst, node, stats)
            else:
                _promote(node)
                stats.expanded += 1
            changed = True
        if not changed:
            break

    # thunk and slot layout: thunks first (two NOPs between consecutive
    # thunks, per the reference integrated-code layout), then the slots
    thunk_addrs = {}
    cursor = code_end
    for i, extern in enumerate(extern_order):
        thunk_addrs[extern] = cursor
        cursor += 6
        if i != len(extern_order) - 1:
            cursor += 2
    slot_base = cursor
    slots = {extern: slot_base + 4 * i
             for i, extern in enumerate(extern_order)}
    image_end = slot_base + 4 * len(extern_order)
    area_base = (image_end + 3) & ~3

    lands = []
    area_of = {}
    for node in lst:
        if node.marker_region is not None:
            area_of[id(node)] = area_base + 4 * len(lands)
            lands.append(node)

    # stage 2: emit bytes with final displacements
    out = bytearray()
    for node in lst:
        if node.marker_region is not None:
            disp = (area_of[id(node)] - (node.new_address + 5)) & MASK32
            out += bytes([0xE8]) + disp.to_bytes(4, "little")
            continue
        ins = node.instr
        if node.link_node is not None:
            ins = replace(ins, operands=(target(node.link_node.new_address),))
        elif node.link_extern is not None:
            ins = replace(ins, operands=(target(thunk_addrs[node.link_extern]),))
        ins = replace(ins, address=node.new_address,
                      encoded_length=encoded_size(ins))
        raw = encode(ins)
        assert len(raw) == _size_of(node), (str(ins), raw.hex())
        out += raw
    for i, extern in enumerate(extern_order):
        out += bytes([0xFF, 0x25]) + slots[extern].to_bytes(4, "little")
        if i != len(extern_order) - 1:
            out += b"\x90\x90"
    for extern in extern_order:
        out += (extern & MASK32).to_bytes(4, "little")

    addr_map = {}
    entry_map = {}
    for node in lst:
        if node.original_address is not None:
            addr_map[node.original_address] = node.new_address
            entry = node
            while (entry.prev is not None
                   and entry.prev.marker_anchor is entry):
                entry = entry.prev
            entry_map[node.original_address] = entry.new_address

    land_sites = tuple(
        LandSite(area_address=area_of[id(n)], call_address=n.new_address,
                 region_id=n.marker_region,
                 next_address=n.marker_anchor.new_address,
                 mem_address=(n.marker_anchor.new_address
                              if n.marker_is_mem else None))
        for n in lands)
    known = frozenset(n.new_address for n in lst) \
        | frozenset(thunk_addrs.values())
    thunks = tuple(Thunk(extern, imports[extern], thunk_addrs[extern],
                         slots[extern]) for extern in extern_order)
    return IntegratedImage(
        base=new_base, data=bytes(out), code_end=code_end,
        addr_map=addr_map, entry_map=entry_map, thunks=thunks,
        lands=land_sites, instruction_addresses=known,
        area=(area_base, area_base + 4 * len(lands)),
        imports={t.extern_target: t.name for t in thunks},
        stats=stats)
