"""Result rendering: propagation graph (DOT), text report, packet search."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import IoFailure, VciflowError
from .harness import ACCESS_NAME, PacketLog


@dataclass
class RegionSnapshot:
    id: int
    kind: str
    name: str
    start: int | None
    length: int
    created_by: int | None
    created_at: int | None
    parents: tuple
    children: tuple
    references: tuple
    destroyed_by: int | None
    live_bytes: int


@dataclass
class AnalysisReport:
    events: list = field(default_factory=list)
    regions: dict = field(default_factory=dict)
    defined_cells: tuple = ()
    packets: object = None           # PacketLog | None
    region_map: object = None        # RegionMap | None, enables find


def load_report(events_path, packet_log_path=None, region_map=None):
    """Assemble a report from the analysis export (+ optional inputs)."""
    events = []
    regions = {}
    defined = ()
    try:
        with open(events_path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                if rec.get("type") == "event":
                    events.append(rec)
                elif rec.get("type") == "snapshot":
                    defined = tuple(rec.get("defined", ()))
                    for r in rec.get("regions", ()):
                        regions[r["id"]] = RegionSnapshot(
                            id=r["id"], kind=r["kind"], name=r["name"],
                            start=(None if r["start"] is None
                                   else int(r["start"], 16)),
                            length=r["length"],
                            created_by=r["created_by"],
                            created_at=(None if r["created_at"] is None
                                        else int(r["created_at"], 16)),
                            parents=tuple(r["parents"]),
                            children=tuple(r["children"]),
                            references=tuple(r["references"]),
                            destroyed_by=r["destroyed_by"],
                            live_bytes=r["live_bytes"])
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    packets = PacketLog.load(packet_log_path) if packet_log_path else None
    return AnalysisReport(events=events, regions=regions,
                          defined_cells=defined, packets=packets,
                          region_map=region_map)


def _dot_quote(text):
    return '"%s"' % text.replace('"', r'\"')


def render_dot(report):
    """Propagation graph: one node per monitored region, one edge per
    parent->child relation. Output is deterministic (ordered by id)."""
    lines = ["digraph propagation {", "  rankdir=TB;",
             "  node [shape=box, fontname=monospace];"]
    for rid in sorted(report.regions):
        r = report.regions[rid]
        if r.kind == "memory":
            where = f"0x{r.start:08X}+{r.length}"
        else:
            where = "register source"
        creator = ("source" if r.created_by is None
                   else f"packet {r.created_by}")
        label = f"{r.name}\\n{where}\\n{creator}"
        lines.append(f"  {_dot_quote(r.name)} [label={_dot_quote(label)}];")
    for rid in sorted(report.regions):
        r = report.regions[rid]
        for child in sorted(r.children):
            if child in report.regions:
                lines.append(f"  {_dot_quote(r.name)} -> "
                             f"{_dot_quote(report.regions[child].name)};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def find_instruction(report, pattern):
    """Packets whose region contains a matching instruction.

    pattern is a hex address (0x...), a mnemonic, or full instruction
    text ("ADD ECX,EBX"); returns (packet ids, linked region ids).
    """
    if report.region_map is None or report.packets is None:
        raise VciflowError("finding instructions needs the packet log "
                           "and the analysis database")
    pattern = pattern.strip()
    wanted_regions = set()
    if pattern.lower().startswith("0x"):
        addr = int(pattern, 16)
        for region in report.region_map.regions:
            if any(ri.address == addr for ri in region.instructions):
                wanted_regions.add(region.id)
    else:
        norm = " ".join(pattern.upper().split())
        for region in report.region_map.regions:
            for ri in region.instructions:
                text = str(ri.instr).upper()
                if text == norm or ri.instr.mnemonic.upper() == norm:
                    wanted_regions.add(region.id)
                    break
    packet_ids = [p.packet_id for p in report.packets
                  if p.region_id in wanted_regions]
    return packet_ids, sorted(wanted_regions)


def render_text_report(report):
    """Region lifecycles (created/references/destroyed) + packet table."""
    out = ["analysis report", "================", ""]
    out.append(f"defined cells at end: "
               f"{', '.join(report.defined_cells) or '(none)'}")
    out.append("")
    out.append("monitored regions")
    out.append("-----------------")
    for rid in sorted(report.regions):
        r = report.regions[rid]
        where = (f"0x{r.start:08X} len {r.length}" if r.kind == "memory"
                 else "register source")
        out.append(f"{r.name} (id {r.id}): {where}")
        created = ("analysis source" if r.created_by is None else
                   f"packet {r.created_by} at 0x{r.created_at or 0:08X}")
        out.append(f"  created by {created}")
        if r.references:
            out.append(f"  referenced by packets "
                       f"{', '.join(str(p) for p in r.references)}")
        else:
            out.append("  no references")
        if r.destroyed_by is not None:
            out.append(f"  destroyed by packet {r.destroyed_by}")
        if r.parents:
            names = ", ".join(report.regions[p].name for p in r.parents)
            out.append(f"  parents: {names}")
        if r.children:
            names = ", ".join(report.regions[c].name for c in r.children)
            out.append(f"  children: {names}")
        out.append("")
    out.append("events")
    out.append("------")
    for ev in report.events:
        pid = "source" if ev.get("packet") is None else f"packet {ev['packet']}"
        detail = []
        if "region" in ev:
            detail.append(f"region {ev['region']}")
        if "cells" in ev:
            detail.append("cells " + ",".join(ev["cells"]))
        if "address" in ev:
            detail.append(f"at {ev['address']}")
        out.append(f"{pid}: {ev['kind']} {' '.join(detail)}".rstrip())
    out.append("")
    if report.packets is not None:
        out.append("packets")
        out.append("-------")
        out.append("id       region   instr        ea           size access")
        for p in report.packets:
            out.append(f"{p.packet_id:<8} {p.region_id:<8} "
                       f"0x{p.instr_address:08X}   0x{p.ea:08X}   "
                       f"{p.ea_size:<4} {ACCESS_NAME[p.access_kind]}")
        out.append("")
    return "\n".join(out)
