"""Command-line pipeline: export -> integrate -> run -> analyze -> report."""

from __future__ import annotations

import argparse
import json
import sys
import threading

from . import harness, integrator, regions, report as report_mod, taint
from .errors import ChannelClosed, ConfigError, VciflowError
from .harness import Image, MachineState, PacketChannel


def _parse_int(text):
    return int(text, 0)


def _load_json(path):
    if path is None:
        return None
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _load_imports(path):
    doc = _load_json(path) or {}
    return {int(addr, 0): name for addr, name in doc.items()}


def _load_sources(path):
    doc = _load_json(path) or []
    out = []
    for spec in doc:
        if "reg" in spec:
            out.append({"kind": "reg", "reg": spec["reg"]})
        else:
            out.append({"kind": "mem", "addr": int(str(spec["addr"]), 0),
                        "len": int(spec["len"])})
    return out


def _initial_state(init_doc):
    state = MachineState()
    if not init_doc:
        return state
    for name, value in (init_doc.get("regs") or {}).items():
        state.regs[name.upper()] = int(str(value), 0) & 0xFFFFFFFF
    for addr, hexbytes in (init_doc.get("mem") or {}).items():
        state.map_bytes(int(str(addr), 0), bytes.fromhex(hexbytes))
    return state


def _read_image(args):
    with open(args.image, "rb") as fh:
        data = fh.read()
    if not data:
        raise ConfigError(f"{args.image} is empty")
    return data


def _check_distinct(*paths):
    given = [p for p in paths if p]
    if len(set(given)) != len(given):
        raise ConfigError("output paths must be distinct")


def _integrated(args, data, with_lands):
    lst = integrator.load_program(data, args.base, args.entry)
    region_map = regions.build_regions(data, args.base, args.entry)
    if getattr(args, "demo_nops", 0):
        from .isa import build
        for node in list(lst):
            anchor = node
            for _ in range(args.demo_nops):
                anchor = lst.insert_after(anchor, build("nop"))
    if with_lands:
        integrator.inject_code_lands(lst, region_map)
    imports = _load_imports(getattr(args, "imports", None))
    image = integrator.integrate(lst, new_base=args.new_base, imports=imports)
    return image, region_map


# ------------------------------------------------------------- commands

def cmd_export(args):
    data = _read_image(args)
    region_map = regions.build_regions(data, args.base, args.entry)
    regions.export_analysis(region_map, args.out, code=data)
    n = len(region_map.instructions)
    print(f"exported {n} instructions in {len(region_map.regions)} regions "
          f"to {args.out}")
    return 0


def cmd_integrate(args):
    _check_distinct(args.out_image, args.out_map)
    data = _read_image(args)
    image, _ = _integrated(args, data, with_lands=args.lands)
    with open(args.out_image, "wb") as fh:
        fh.write(image.data)
    if args.out_map:
        image.save_map(args.out_map)
    print(f"integrated image: base 0x{image.base:08X}, "
          f"{len(image.data)} bytes, code ends 0x{image.code_end:08X}, "
          f"{len(image.thunks)} thunk(s), {len(image.lands)} land(s), "
          f"{image.stats.expanded} expanded, {image.stats.emulated} emulated")
    return 0


def _run_static(image, original, region_map, entry, state, control):
    final, trace = harness.run(image.image, entry, state, control=control,
                               map_images=(original,))
    return final, trace, None


def _run_dynamic(image, original, region_map, entry, state, control,
                 sources, capacity):
    channel = PacketChannel(capacity)
    taint_state = taint.TaintState()
    taint.apply_sources(taint_state, sources)
    failures = []

    def consume():
        while True:
            try:
                packet = channel.pop()
            except ChannelClosed:
                return
            try:
                taint_state.process_packet(packet, region_map)
            except Exception as exc:  # poison the producer and bail
                failures.append(exc)
                channel.poison(exc)
                return

    worker = threading.Thread(target=consume, name="packet-consumer")
    worker.start()
    try:
        final, trace = harness.run(image.image, entry, state, control=control,
                                   emit=channel.push, map_images=(original,))
    finally:
        channel.close()
        worker.join()
    if failures:
        raise failures[0]
    return final, trace, taint_state


def cmd_run(args):
    _check_distinct(args.packet_log, args.events_out)
    data = _read_image(args)
    image, region_map = _integrated(args, data, with_lands=True)
    original = Image(args.base, data)
    entry = image.entry_for(args.entry[0])
    state = _initial_state(_load_json(args.init))
    control = image.control()
    sources = _load_sources(args.sources)
    if args.mode == "dynamic":
        if args.events_out is None:
            raise ConfigError("dynamic mode needs --events-out")
        final, trace, taint_state = _run_dynamic(
            image, original, region_map, entry, state, control,
            sources, args.channel_capacity)
    else:
        final, trace, taint_state = _run_static(
            image, original, region_map, entry, state, control)
    trace.packets.save(args.packet_log)
    if taint_state is not None and args.events_out:
        taint_state.export_events(args.events_out)
    for diag in harness.detect_interference(trace):
        print(f"warning: {diag}", file=sys.stderr)
    print(f"run complete: {len(trace.packets)} packet(s), "
          f"eip 0x{final.eip:08X}, halted={final.halted}")
    return 0


def cmd_analyze(args):
    region_map = regions.load_analysis(args.analysis)
    packets = harness.PacketLog.load(args.packet_log)
    sources = _load_sources(args.sources)
    state = taint.analyze_log(packets, region_map, sources)
    state.export_events(args.out)
    live = sum(1 for r in state.regions.values() if r.destroyed_by is None)
    print(f"analyzed {len(packets)} packet(s): {len(state.regions)} "
          f"region(s), {live} live")
    return 0


def cmd_report(args):
    region_map = regions.load_analysis(args.analysis) if args.analysis else None
    rep = report_mod.load_report(args.events, args.packet_log, region_map)
    if args.dot:
        with open(args.dot, "w", encoding="utf-8") as fh:
            fh.write(report_mod.render_dot(rep))
    if args.text:
        with open(args.text, "w", encoding="utf-8") as fh:
            fh.write(report_mod.render_text_report(rep))
    if args.find:
        packet_ids, region_ids = report_mod.find_instruction(rep, args.find)
        print(f"find {args.find!r}: packets "
              f"{', '.join(str(p) for p in packet_ids) or '(none)'}; "
              f"regions {', '.join(str(r) for r in region_ids) or '(none)'}")
    if not (args.dot or args.text or args.find):
        print(report_mod.render_text_report(rep))
    return 0


# --------------------------------------------------------------- parser

def _add_image_args(sub):
    sub.add_argument("--image", required=True, help="raw code image file")
    sub.add_argument("--base", required=True, type=_parse_int,
                     help="image load address")
    sub.add_argument("--entry", required=True, type=_parse_int,
                     action="append", help="entry point (repeatable)")


def make_parser():
    parser = argparse.ArgumentParser(
        prog="vciflow",
        description="static x86 rewriting with taint propagation analysis")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("export", help="build the analysis database")
    _add_image_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = subs.add_parser("integrate", help="rewrite an image")
    _add_image_args(p)
    p.add_argument("--new-base", type=_parse_int, default=None)
    p.add_argument("--imports", help="JSON {hex extern address: name}")
    p.add_argument("--demo-nops", type=int, default=0,
                   help="insert N NOPs after every instruction")
    p.add_argument("--lands", action="store_true",
                   help="inject one code land per dataflow region")
    p.add_argument("--out-image", required=True)
    p.add_argument("--out-map")
    p.set_defaults(func=cmd_integrate)

    p = subs.add_parser("run", help="integrate with code lands and trace")
    _add_image_args(p)
    p.add_argument("--new-base", type=_parse_int, default=None)
    p.add_argument("--imports")
    p.add_argument("--mode", choices=("static", "dynamic"), default="static")
    p.add_argument("--packet-log", required=True)
    p.add_argument("--sources", help="JSON taint source list")
    p.add_argument("--events-out", help="analysis export (dynamic mode)")
    p.add_argument("--init", help="JSON initial state {regs:{},mem:{}}")
    p.add_argument("--channel-capacity", type=int, default=256)
    p.set_defaults(func=cmd_run)

    p = subs.add_parser("analyze", help="replay a packet log (static mode)")
    p.add_argument("--analysis", required=True)
    p.add_argument("--packet-log", required=True)
    p.add_argument("--sources", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = subs.add_parser("report", help="render results")
    p.add_argument("--events", required=True)
    p.add_argument("--packet-log")
    p.add_argument("--analysis")
    p.add_argument("--dot")
    p.add_argument("--text")
    p.add_argument("--find")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VciflowError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
