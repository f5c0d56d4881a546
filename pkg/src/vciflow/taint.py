"""Per-packet taint propagation over region summaries and shadow memory.

The defined object is a set of architectural cells; every defined cell
carries a history of parents (monitored-region ids). Shadow memory maps
each tainted byte to the monitored region that owns it; regions record
creation, reference and destruction packets plus parent/child lineage.

Packet processing order: the region's precomputed in/out variants first
(register flow of everything the region executed), then the disputable
merge, then the memory terminator itself, whose effective address rides
in the packet. Writes of tainted data create monitored regions as
children of every contributing parent; writes of clean data destroy the
taint they overwrite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .cells import bits, cell_name, register_mask, singles
from .errors import InvalidSourceSpec, UnknownRegionId
from .isa import MASK32

_ESP_MASK = register_mask("ESP")


@dataclass
class MonitoredRegion:
    id: int
    kind: str                    # memory | register-source
    start: int | None
    length: int
    created_by: int | None       # packet id, None for analysis sources
    created_at: int | None       # instruction address
    parents: set = field(default_factory=set)
    children: set = field(default_factory=set)
    references: list = field(default_factory=list)
    destroyed_by: int | None = None
    live: set = field(default_factory=set)

    @property
    def name(self):
        if self.kind == "memory":
            return f"p_{self.start:x}"
        return f"src_{self.id}"


class TaintState:
    """Single-owner analysis state (consumer side in dynamic mode)."""

    def __init__(self, addr_taint=True):
        self.defined = 0
        self.hist = {}               # cell bit -> set of region ids
        self.shadow = {}             # byte address -> region id
        self.regions = {}            # region id -> MonitoredRegion
        self.next_region = 0
        self.events = []
        self.addr_taint = addr_taint
        self._fired = []             # (out_mask, parent set) of this packet
        self.packets_seen = 0

    # ------------------------------------------------------------ events

    def _event(self, packet_id, kind, *, region=None, cells=None,
               address=None):
        ev = {"packet": packet_id, "kind": kind}
        if region is not None:
            ev["region"] = region
        if cells is not None:
            ev["cells"] = cells
        if address is not None:
            ev["address"] = f"0x{address:08X}"
        self.events.append(ev)

    # ------------------------------------------------------------ helpers

    def hist_union(self, mask):
        h = set()
        for b in bits(mask & self.defined):
            h |= self.hist.get(b, set())
        return h

    def _define_cells(self, mask, parents, packet_id):
        self.defined |= mask
        for b in bits(mask):
            self.hist[b] = set(parents)
        self._event(packet_id, "define",
                    cells=[cell_name(b) for b in bits(mask)])

    def _kill_cells(self, mask, packet_id):
        live = mask & self.defined
        self.defined &= ~mask
        for b in bits(mask):
            self.hist.pop(b, None)
        if live:
            self._event(packet_id, "kill",
                        cells=[cell_name(b) for b in bits(live)])

    def _remove_bytes(self, addr, size, packet_id):
        for a in range(addr, addr + size):
            a &= MASK32
            rid = self.shadow.pop(a, None)
            if rid is None:
                continue
            region = self.regions[rid]
            region.live.discard(a)
            if not region.live and region.destroyed_by is None:
                region.destroyed_by = packet_id
                self._event(packet_id, "destroy", region=rid, address=addr)

    def _create_region(self, addr, size, parents, packet_id, instr_addr):
        self._remove_bytes(addr, size, packet_id)
        rid = self.next_region
        self.next_region += 1
        region = MonitoredRegion(rid, "memory", addr & MASK32, size,
                                 packet_id, instr_addr, parents=set(parents))
        self.regions[rid] = region
        for a in range(addr, addr + size):
            a &= MASK32
            self.shadow[a] = rid
            region.live.add(a)
        for p in parents:
            self.regions[p].children.add(rid)
        self._event(packet_id, "create", region=rid, address=addr)
        return region

    def _reference(self, rids, packet_id):
        for rid in sorted(rids):
            region = self.regions[rid]
            region.references.append(packet_id)
            self._event(packet_id, "reference", region=rid)

    # ------------------------------------------------------------ sources

    def define_source(self, *, memory=None, register=None):
        """Create root monitored regions and/or defined register cells."""
        if memory is not None:
            addr, length = memory
            if length <= 0:
                raise InvalidSourceSpec("zero-length source range")
            self._remove_bytes(addr, length, None)
            rid = self.next_region
            self.next_region += 1
            region = MonitoredRegion(rid, "memory", addr & MASK32, length,
                                     None, None)
            self.regions[rid] = region
            for a in range(addr, addr + length):
                a &= MASK32
                self.shadow[a] = rid
                region.live.add(a)
            self._event(None, "define", region=rid, address=addr)
            return region
        if register is not None:
            mask = register_mask(register)
            rid = self.next_region
            self.next_region += 1
            region = MonitoredRegion(rid, "register-source", None, 0,
                                     None, None)
            self.regions[rid] = region
            self.defined |= mask
            for b in bits(mask):
                self.hist.setdefault(b, set()).add(rid)
            self._event(None, "define", region=rid,
                        cells=[cell_name(b) for b in bits(mask)])
            return region
        raise InvalidSourceSpec("source needs a memory range or a register")

    # ----------------------------------------------------------- variants

    def apply_variants(self, region):
        masks = region.variant_masks
        defined0 = self.defined
        o_s = 0
        for im, om in masks:
            o_s |= im | om
        contribs = []
        for im, om in masks:
            if im & defined0 and om:
                contribs.append((om, self.hist_union(im)))
        self.defined &= ~o_s
        for b in bits(o_s):
            self.hist.pop(b, None)
        for om, h in contribs:
            self.defined |= om
            for b in bits(om):
                dest = self.hist.get(b)
                if dest is None:
                    self.hist[b] = set(h)
                else:
                    dest |= h
        self._fired = contribs

    def process_disputable(self, region):
        """Join the parent histories of every variant writing a disputable
        element so no potential parent object is lost."""
        disputable = region.disputable.mask
        if not disputable & self.defined:
            return
        for single in singles(disputable):
            if not single & self.defined:
                continue
            merged = set()
            for om, h in self._fired:
                if om & single:
                    merged |= h
            if merged:
                for b in bits(single & self.defined):
                    self.hist[b] = set(merged)

    # ------------------------------------------------------------- memory

    def _addr_parents(self, mask):
        if not self.addr_taint:
            return set()
        return self.hist_union(mask)

    def process_standard(self, packet, region_instr):
        desc = region_instr.desc
        instr = region_instr.instr
        ea, size = packet.ea, packet.ea_size
        mem_op = instr.mem_operand
        if mem_op is not None and mem_op.base is not None:
            base_mask = register_mask(mem_op.base)
        elif mem_op is not None:
            base_mask = 0
        else:
            base_mask = _ESP_MASK  # implicit stack access
        addr_par = self._addr_parents(base_mask)
        pid = packet.packet_id
        incoming = None
        if desc.mem in ("read", "readwrite"):
            mem_parents = {self.shadow[a] for a in range(ea, ea + size)
                           if a in self.shadow}
            incoming = mem_parents | self.hist_union(desc.src.mask) | addr_par
            if mem_parents:
                self._reference(mem_parents, pid)
            mdd = desc.mem_data_dest.mask
            if mdd:
                if incoming:
                    self._define_cells(mdd, incoming, pid)
                else:
                    self._kill_cells(mdd, pid)
        if desc.mem in ("write", "readwrite"):
            if desc.mem == "readwrite":
                write_parents = incoming
            else:
                write_parents = (self.hist_union(desc.mem_data_src.mask)
                                 | addr_par)
            if write_parents:
                self._create_region(ea, size, write_parents, pid,
                                    packet.instr_address)
            else:
                self._remove_bytes(ea, size, pid)

    def process_nonstandard(self, packet, region_instr):
        """String instructions: per-byte reads/writes driven by the packet
        context (ESI/EDI/ECX/DF)."""
        instr = region_instr.instr
        mn = instr.mnemonic
        pid = packet.packet_id
        delta = -1 if packet.flag("DF") else 1
        count = packet.reg("ECX") if instr.rep else 1
        esi, edi = packet.reg("ESI"), packet.reg("EDI")
        esi_par = self._addr_parents(register_mask("ESI"))
        edi_par = self._addr_parents(register_mask("EDI"))
        al_mask = register_mask("AL")
        refs = set()
        for i in range(count):
            if mn == "movsb":
                src_a = (esi + delta * i) & MASK32
                dst_a = (edi + delta * i) & MASK32
                inc = esi_par.copy()
                if src_a in self.shadow:
                    inc.add(self.shadow[src_a])
                    refs.add(self.shadow[src_a])
                write_parents = inc | edi_par
                if write_parents:
                    self._create_region(dst_a, 1, write_parents, pid,
                                        packet.instr_address)
                else:
                    self._remove_bytes(dst_a, 1, pid)
            elif mn == "stosb":
                dst_a = (edi + delta * i) & MASK32
                write_parents = self.hist_union(al_mask) | edi_par
                if write_parents:
                    self._create_region(dst_a, 1, write_parents, pid,
                                        packet.instr_address)
                else:
                    self._remove_bytes(dst_a, 1, pid)
            else:  # lodsb
                src_a = (esi + delta * i) & MASK32
                inc = esi_par.copy()
                if src_a in self.shadow:
                    inc.add(self.shadow[src_a])
                    refs.add(self.shadow[src_a])
                if inc:
                    self._define_cells(al_mask, inc, pid)
                else:
                    self._kill_cells(al_mask, pid)
        if refs:
            self._reference(refs, pid)

    # ------------------------------------------------------------ packets

    def process_packet(self, packet, region_map):
        region = region_map.by_id.get(packet.region_id)
        if region is None:
            raise UnknownRegionId(f"packet {packet.packet_id} names region "
                                  f"{packet.region_id}")
        self._fired = []
        if region.variants:
            self.apply_variants(region)
        if region.disputable.mask & self.defined:
            self.process_disputable(region)
        if region.mem_index is not None:
            ri = region.instructions[region.mem_index]
            if ri.desc.string_op:
                self.process_nonstandard(packet, ri)
            else:
                self.process_standard(packet, ri)
        self.packets_seen += 1

    def process_log(self, packets, region_map):
        for packet in packets:
            self.process_packet(packet, region_map)
        return self

    # ------------------------------------------------------------ results

    def roots_of(self, rid, _memo=None):
        memo = _memo if _memo is not None else {}
        if rid in memo:
            return memo[rid]
        memo[rid] = frozenset()  # cycle guard; ids strictly order creation
        region = self.regions[rid]
        if not region.parents:
            result = frozenset((rid,))
        else:
            result = frozenset().union(
                *(self.roots_of(p, memo) for p in region.parents))
        memo[rid] = result
        return result

    def snapshot(self):
        return {
            "type": "snapshot",
            "packets": self.packets_seen,
            "defined": [cell_name(b) for b in bits(self.defined)],
            "regions": [{
                "id": r.id, "kind": r.kind, "name": r.name,
                "start": None if r.start is None else f"0x{r.start:08X}",
                "length": r.length,
                "created_by": r.created_by,
                "created_at": (None if r.created_at is None
                               else f"0x{r.created_at:08X}"),
                "parents": sorted(r.parents),
                "children": sorted(r.children),
                "references": list(r.references),
                "destroyed_by": r.destroyed_by,
                "live_bytes": len(r.live),
            } for r in sorted(self.regions.values(), key=lambda r: r.id)],
        }

    def export_events(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for ev in self.events:
                fh.write(json.dumps({"type": "event", **ev}) + "\n")
            fh.write(json.dumps(self.snapshot()) + "\n")


def analyze_log(packets, region_map, sources, addr_taint=True):
    """Static-mode analysis: replay a packet log against region summaries."""
    state = TaintState(addr_taint=addr_taint)
    apply_sources(state, sources)
    state.process_log(packets, region_map)
    return state


def apply_sources(state, sources):
    """Source specs: [{"kind": "mem", "addr": ..., "len": ...} |
    {"kind": "reg", "reg": "EAX"}]."""
    for spec in sources:
        if spec.get("kind") == "mem":
            state.define_source(memory=(int(spec["addr"]), int(spec["len"])))
        elif spec.get("kind") == "reg":
            state.define_source(register=spec["reg"])
        else:
            raise InvalidSourceSpec(f"bad source spec {spec!r}")
    return state
