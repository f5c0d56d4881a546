"""Dataflow regions: discovery, partitioning and propagation summaries.

A region is a basic-block-like run of instructions with two extra
boundary rules: any instruction touching memory terminates its region
(and is its last instruction), and any branch target starts a fresh
region so trace packets map one-to-one to region executions.

Each region carries precomputed in/out variant pairs: if any element of
o_in is defined on region entry then every element of o_out is defined
on exit, and a trailing kill pair (o_in, empty) lists cells the region
unconditionally destroys. Disputable cells are those written by two or
more variant outs at once; their parent histories must be merged so no
taint source is lost.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

from .cells import REG_CELLS_MASK, ArchObjectSet, singles
from .descriptors import InstructionDescriptor, describe
from .errors import (ConfigError, IoFailure, OverlappingCodePaths,
                     TruncatedInstruction, UndecodableReachableByte,
                     UnsupportedOpcode, VersionMismatch)
from .isa import Instruction, decode, encode

FORMAT_NAME = "vciflow-analysis"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class RegionInstr:
    address: int
    instr: Instruction
    desc: InstructionDescriptor


@dataclass(frozen=True)
class VariantPair:
    o_in: ArchObjectSet
    o_out: ArchObjectSet


@dataclass(frozen=True)
class DataflowRegion:
    id: int
    instructions: tuple
    terminator_kind: str            # memory | control | fallthrough-end
    mem_index: int | None
    variants: tuple
    disputable: ArchObjectSet

    @property
    def entry(self):
        return self.instructions[0].address

    @cached_property
    def variant_masks(self):
        return tuple((v.o_in.mask, v.o_out.mask) for v in self.variants)

    @property
    def terminator(self):
        return self.instructions[-1]


@dataclass
class RegionMap:
    base: int
    size: int
    entries: tuple
    regions: tuple
    externs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.by_entry = {r.entry: r for r in self.regions}
        self.by_id = {r.id: r for r in self.regions}
        self.region_of = {ri.address: r.id
                          for r in self.regions for ri in r.instructions}

    @property
    def instructions(self):
        return {ri.address: ri for r in self.regions for ri in r.instructions}

    def __getitem__(self, entry_address):
        return self.by_entry[entry_address]


# ----------------------------------------------------------- discovery

def discover(code, base, entries):
    """Recursive-descent decode of every reachable instruction.

    Returns (instructions by address, branch-target set, extern targets
    with their referring addresses).
    """
    if not entries:
        raise ConfigError("entry point set is empty")
    end = base + len(code)
    for e in entries:
        if not base <= e < end:
            raise UndecodableReachableByte(f"entry 0x{e:08X} outside image")
    instrs = {}
    owner = {}
    targets = set()
    externs = {}
    work = sorted(set(entries))
    while work:
        a = work.pop()
        if a in instrs or not base <= a < end:
            continue
        prev = owner.get(a)
        if prev is not None:
            raise OverlappingCodePaths(
                f"0x{a:08X} lands inside the instruction at 0x{prev:08X}")
        try:
            ins = decode(code, a - base, base)
        except (UnsupportedOpcode, TruncatedInstruction) as exc:
            raise UndecodableReachableByte(f"0x{a:08X}: {exc}") from exc
        for byte_addr in range(a, a + ins.encoded_length):
            prev = owner.get(byte_addr)
            if prev is not None and prev != a:
                raise OverlappingCodePaths(
                    f"byte 0x{byte_addr:08X} decoded two ways "
                    f"(0x{prev:08X} vs 0x{a:08X})")
            owner[byte_addr] = a
        instrs[a] = ins
        t = ins.branch_target()
        if t is not None:
            if base <= t < end:
                targets.add(t)
                work.append(t)
            else:
                externs.setdefault(t, []).append(a)
        if ins.mnemonic not in ("jmp", "ret", "hlt"):
            nxt = a + ins.encoded_length
            if nxt < end:
                work.append(nxt)
    return instrs, targets, externs


# ------------------------------------------------------------ variants

def _variant_masks(descs):
    """In/out variant pairs (as masks) for an instruction sequence."""
    srcs = [d.src.mask for d in descs]
    dests = [d.dest.mask for d in descs]
    kills = [d.flow_kill_mask for d in descs]
    n = len(descs)
    dest_full = 0
    for m in dests:
        dest_full |= m
    done = 0
    walks = []
    for i in range(n):
        for seed in singles(srcs[i]):
            if seed & done:
                continue
            done |= seed
            out = seed
            for j in range(n):
                if out & srcs[j]:
                    out |= dests[j]
                else:
                    out &= ~kills[j]
                if not out:
                    break
            walks.append((seed, out))
            if out:
                dest_full &= ~(out | seed)
    pairs = [(s, o) for s, o in walks if o and o != s]
    emitted_outs = 0
    for _s, o in pairs:
        emitted_outs |= o
    # A pass-through seed that another variant's out can re-define must be
    # emitted as an identity pair, or the erase step would lose it.
    for s, o in walks:
        if o and o == s and s & emitted_outs:
            pairs.append((s, s))
    if dest_full:
        pairs.append((dest_full, 0))
    return pairs


def variants_for(instructions):
    """Variant pairs for a raw instruction sequence (one region's worth)."""
    descs = [describe(ins) for ins in instructions]
    return tuple(VariantPair(ArchObjectSet(s), ArchObjectSet(o))
                 for s, o in _variant_masks(descs))


def gen_variants(region: DataflowRegion):
    """Recompute a region's variant pairs from its instructions."""
    descs = [ri.desc for ri in region.instructions]
    return tuple(VariantPair(ArchObjectSet(s), ArchObjectSet(o))
                 for s, o in _variant_masks(descs))


def compute_disputable(variants):
    """Cells present in two or more variant outs, flags excluded."""
    outs = [v.o_out.mask for v in variants]
    disputable = 0
    for i in range(len(outs)):
        for j in range(len(outs)):
            if i != j:
                disputable |= outs[i] & outs[j]
    return ArchObjectSet(disputable & REG_CELLS_MASK)


# ------------------------------------------------------------- regions

def build_regions(code, base, entries):
    """Partition reachable code into dataflow regions."""
    instrs, targets, externs = discover(code, base, entries)
    starts = set(entries) | targets
    groups = []
    current = []
    prev_end = None
    for a in sorted(instrs):
        ins = instrs[a]
        if current and (a in starts or a != prev_end):
            groups.append((current, "fallthrough-end", None))
            current = []
        current.append(RegionInstr(a, ins, describe(ins)))
        prev_end = a + ins.encoded_length
        desc = current[-1].desc
        is_mem = desc.mem != "none"
        is_ctl = (ins.branch_form != "none"
                  or ins.mnemonic in ("ret", "hlt"))
        if is_mem or is_ctl:
            kind = "memory" if is_mem else "control"
            groups.append((current, kind, len(current) - 1 if is_mem else None))
            current = []
    if current:
        groups.append((current, "fallthrough-end", None))

    regions = []
    for rid, (ris, kind, mem_index) in enumerate(groups):
        variants = tuple(
            VariantPair(ArchObjectSet(s), ArchObjectSet(o))
            for s, o in _variant_masks([ri.desc for ri in ris]))
        regions.append(DataflowRegion(
            id=rid, instructions=tuple(ris), terminator_kind=kind,
            mem_index=mem_index, variants=variants,
            disputable=compute_disputable(variants)))
    return RegionMap(base=base, size=len(code), entries=tuple(sorted(entries)),
                     regions=tuple(regions), externs=externs)


# ------------------------------------------------------------ database

def export_analysis(region_map, path, code=None):
    """Write the analysis database (JSON lines, versioned header)."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            header = {"format": FORMAT_NAME, "version": FORMAT_VERSION,
                      "base": f"0x{region_map.base:08X}",
                      "size": region_map.size,
                      "entries": [f"0x{e:08X}" for e in region_map.entries],
                      "externs": {f"0x{t:08X}": [f"0x{a:08X}" for a in refs]
                                  for t, refs in region_map.externs.items()}}
            fh.write(json.dumps(header) + "\n")
            for r in region_map.regions:
                for ri in r.instructions:
                    raw = code[ri.address - region_map.base:
                               ri.address - region_map.base
                               + ri.instr.encoded_length] if code else None
                    rec = {"type": "instruction",
                           "address": f"0x{ri.address:08X}",
                           "bytes": (raw or encode(ri.instr)).hex(),
                           "mnemonic": ri.instr.mnemonic,
                           "text": str(ri.instr),
                           "src": list(ri.desc.src.cells()),
                           "dest": list(ri.desc.dest.cells()),
                           "region": r.id}
                    fh.write(json.dumps(rec) + "\n")
            for r in region_map.regions:
                rec = {"type": "region", "id": r.id,
                       "entry": f"0x{r.entry:08X}",
                       "instructions": [f"0x{ri.address:08X}"
                                        for ri in r.instructions],
                       "terminator": r.terminator_kind,
                       "mem_index": r.mem_index,
                       "variants": [{"in": list(v.o_in.cells()),
                                     "out": list(v.o_out.cells())}
                                    for v in r.variants],
                       "disputable": list(r.disputable.cells())}
                fh.write(json.dumps(rec) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_analysis(path):
    """Reload an analysis database into a structurally equal RegionMap."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise VersionMismatch(f"not an analysis database: {exc}") from exc
    if not lines:
        raise VersionMismatch("empty analysis database")
    header = lines[0]
    if header.get("format") != FORMAT_NAME:
        raise VersionMismatch(f"unknown format {header.get('format')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"unsupported version {header.get('version')!r}")
    base = int(header["base"], 16)
    instrs = {}
    for rec in lines[1:]:
        if rec["type"] != "instruction":
            continue
        addr = int(rec["address"], 16)
        raw = bytes.fromhex(rec["bytes"])
        ins = decode(raw, 0, addr)
        instrs[addr] = RegionInstr(addr, ins, describe(ins))
    regions = []
    for rec in lines[1:]:
        if rec["type"] != "region":
            continue
        ris = tuple(instrs[int(a, 16)] for a in rec["instructions"])
        variants = tuple(VariantPair(ArchObjectSet.from_cells(v["in"]),
                                     ArchObjectSet.from_cells(v["out"]))
                         for v in rec["variants"])
        regions.append(DataflowRegion(
            id=rec["id"], instructions=ris,
            terminator_kind=rec["terminator"], mem_index=rec["mem_index"],
            variants=variants,
            disputable=ArchObjectSet.from_cells(rec["disputable"])))
    regions.sort(key=lambda r: r.id)
    externs = {int(t, 16): [int(a, 16) for a in refs]
               for t, refs in header.get("externs", {}).items()}
    return RegionMap(base=base, size=header["size"],
                     entries=tuple(int(e, 16) for e in header["entries"]),
                     regions=tuple(regions), externs=externs)
