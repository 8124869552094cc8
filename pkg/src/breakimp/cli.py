"""``breakimp`` command line: imphash, transform, inspect, verify, gen.

JSON goes to stdout; diagnostics go to stderr as a single line.
Exit codes: 0 ok/equivalent, 1 usage, 2 parse error, 3 transform refused,
4 not equivalent.
"""
from __future__ import annotations

import argparse
import json
import secrets
import sys
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

from .codec import has_bound_import_directory, parse_pe, read_import_directory, read_reloc_directory
from .errors import (
    EquivalenceCheckFailed,
    NoImportTable,
    PeFormatError,
    PeToolError,
    SpecInvalid,
    TransformRefused,
)
from .forge import SynthSpec, build_pe
from .imphash import Mode, imphash, load_ordinal_table
from .model import ByName
from .shuffler import Strategy, transform
from .verifier import MockExportUniverse, assert_equivalent

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARSE = 2
EXIT_REFUSED = 3
EXIT_NOT_EQUIVALENT = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="breakimp", description="Import hashing and imphash-breaking thunk shuffling for PE files.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("imphash", help="compute the import hash of a PE file")
    p.add_argument("file", type=Path)
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.COMPAT.value)
    p.add_argument("--show-string", action="store_true", help="include the canonical import string")
    p.add_argument("--ordinal-table", type=Path, help="JSON ordinal-to-name table for compat mode")

    p = sub.add_parser("transform", help="shuffle import thunks and repair references")
    p.add_argument("input", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--seed", type=_seed)
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default=Strategy.AUTO.value)
    p.add_argument("--unbind", action="store_true", help="strip bound imports before transforming")
    p.add_argument("--no-checksum", action="store_true", help="leave the CheckSum field untouched")

    p = sub.add_parser("inspect", help="dump descriptors, thunks and relocation summary")
    p.add_argument("file", type=Path)

    p = sub.add_parser("verify", help="check two images bind every reference identically")
    p.add_argument("original", type=Path)
    p.add_argument("transformed", type=Path)
    p.add_argument("--load-base", type=_seed, action="append", default=[],
                   help="extra load base to simulate (repeatable)")

    p = sub.add_parser("gen", help="generate a synthetic PE from a JSON spec")
    p.add_argument("--spec", type=Path, required=True)
    p.add_argument("-o", "--output", type=Path, required=True)
    return parser


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _write(path: Path, data: bytes) -> None:
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, indent=2) + "\n")


def cmd_imphash(args) -> int:
    image = parse_pe(_read(args.file))
    table = load_ordinal_table(args.ordinal_table) if args.ordinal_table else None
    report = imphash(image, Mode(args.mode), table)
    _emit(report.to_json(show_string=args.show_string))
    return EXIT_OK


def cmd_transform(args) -> int:
    if args.output.resolve() == args.input.resolve():
        raise UsageError("output must differ from input; files are never modified in place")
    seed = secrets.randbits(64) if args.seed is None else args.seed
    result = transform(
        _read(args.input),
        seed,
        Strategy(args.strategy),
        unbind=args.unbind,
        recompute_checksum=not args.no_checksum,
    )
    _write(args.output, result.output)
    doc = result.to_json()
    doc["output"] = str(args.output)
    _emit(doc)
    return EXIT_OK


def inspect_image(data: bytes) -> dict:
    image = parse_pe(data)
    try:
        descriptors = read_import_directory(image)
    except NoImportTable:
        descriptors = []
    relocs = read_reloc_directory(image)
    by_type = Counter(typ for block in relocs for typ, _ in block.entries)
    imports = []
    for d in descriptors:
        thunks = []
        for t in d.thunks:
            entry = {"ft_slot_rva": t.ft_slot_rva, "oft_slot_rva": t.oft_slot_rva, "value": t.value}
            if isinstance(t.payload, ByName):
                entry.update(hint=t.payload.hint, name=t.payload.name, name_rva=t.payload.name_rva)
            else:
                entry["ordinal"] = t.payload.value
            thunks.append(entry)
        imports.append({
            "module": d.module_name,
            "oft_rva": d.oft_rva,
            "ft_rva": d.ft_rva,
            "name_rva": d.name_rva,
            "time_date_stamp": d.time_date_stamp,
            "forwarder_chain": d.forwarder_chain,
            "thunks": thunks,
        })
    return {
        "machine_class": image.machine_class.value,
        "image_base": image.image_base,
        "characteristics": image.characteristics,
        "relocs_stripped": image.relocs_stripped,
        "bound_import_directory": has_bound_import_directory(image),
        "sections": [
            {
                "name": s.label,
                "virtual_address": s.virtual_address,
                "virtual_size": s.virtual_size,
                "raw_offset": s.raw_offset,
                "raw_size": s.raw_size,
                "characteristics": s.characteristics,
            }
            for s in image.sections
        ],
        "imports": imports,
        "relocations": {
            "blocks": len(relocs),
            "entries": sum(len(b.entries) for b in relocs),
            "by_type": {str(k): v for k, v in sorted(by_type.items())},
        },
    }


def cmd_inspect(args) -> int:
    _emit(inspect_image(_read(args.file)))
    return EXIT_OK


def cmd_verify(args) -> int:
    original = parse_pe(_read(args.original))
    transformed = parse_pe(_read(args.transformed))
    universe = MockExportUniverse.covering(original, transformed)
    report = assert_equivalent(original, transformed, universe, args.load_base)
    _emit(report.to_json())
    return EXIT_OK if report.equivalent else EXIT_NOT_EQUIVALENT


def cmd_gen(args) -> int:
    _write(args.output, build_pe(SynthSpec.load(args.spec)))
    _emit({"output": str(args.output)})
    return EXIT_OK


COMMANDS = {
    "imphash": cmd_imphash,
    "transform": cmd_transform,
    "inspect": cmd_inspect,
    "verify": cmd_verify,
    "gen": cmd_gen,
}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, SpecInvalid)):
        return EXIT_USAGE
    if isinstance(exc, TransformRefused):
        return EXIT_REFUSED
    if isinstance(exc, EquivalenceCheckFailed):
        return EXIT_NOT_EQUIVALENT
    return EXIT_PARSE


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except (UsageError, PeToolError) as exc:
        kind = "usage" if isinstance(exc, UsageError) else type(exc).__name__
        print(f"breakimp: {kind}: {exc}", file=sys.stderr)
        return exit_code_for(exc)


def main() -> None:
    sys.exit(run())
