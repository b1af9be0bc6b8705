"""Command-line front end: encode/decode, image inspection, traces, validation.

Every command is deterministic given its inputs and configuration; all
randomness lives in the test suite. Configuration comes from flags,
falling back to the CAPKERNEL_KPREFIX and CAPKERNEL_ADDR environment
variables, then to built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from typing import List, Optional, Sequence

from .bitvec import parse_hex, word_hex
from .capability import (
    CapKind,
    Capability,
    PREFIXED_KINDS,
    parse_capability,
    render_capability,
)
from .encoding import (
    StorageImage,
    cap_cell_values,
    decode_external_cap,
    decode_log_cap,
    decode_prefix_cap,
    decode_state_report,
    decode_write_range,
    encode_state,
)
from .kernel_state import (
    DEFAULT_KERNEL_PREFIX,
    CapFormatError,
    check_invariant,
    init_state,
    state_from_json,
    state_to_json,
)
from .syscall import request_from_json, render_effect, run_trace
from .validator import parse_code, render_violation, validate

ENV_KERNEL_PREFIX = "CAPKERNEL_KPREFIX"
ENV_KERNEL_ADDR = "CAPKERNEL_ADDR"


@dataclass(frozen=True)
class Config:
    kernel_prefix: int = DEFAULT_KERNEL_PREFIX
    kernel_eth_addr: int = 0


def _resolve_config(args: argparse.Namespace) -> Config:
    prefix = args.kernel_prefix
    if prefix is None:
        prefix = os.environ.get(ENV_KERNEL_PREFIX)
    if prefix is None:
        prefix = DEFAULT_KERNEL_PREFIX
    elif isinstance(prefix, str):
        prefix = parse_hex(prefix, bits=32)
    addr = args.kernel_addr
    if addr is None:
        addr = os.environ.get(ENV_KERNEL_ADDR)
    if addr is None:
        addr = 0
    elif isinstance(addr, str):
        addr = parse_hex(addr, bits=160)
    return Config(prefix, addr)


def _read_text(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def _write_text(path: Optional[str], text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _load_state(path: str):
    return state_from_json(json.loads(_read_text(path)))


def _load_image(path: Optional[str]) -> StorageImage:
    return StorageImage.from_text(_read_text(path)) if path else StorageImage()


def _state_json_text(state) -> str:
    return json.dumps(state_to_json(state), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_cap_encode(args: argparse.Namespace, config: Config) -> int:
    cap = parse_capability(args.spec)
    filler = parse_hex(args.filler) if args.filler else 0
    cells = cap_cell_values(cap.kind, cap.payload, lambda cell: filler)
    for cell in cells:
        print(word_hex(cell))
    return 0


def _cmd_cap_decode(args: argparse.Namespace, config: Config) -> int:
    kind = CapKind(args.kind)
    cells = [parse_hex(c) for c in args.cells]
    if kind in PREFIXED_KINDS:
        if len(cells) != 1:
            print("invalid: expected exactly one cell")
            return 1
        payload = decode_prefix_cap(cells[0])
        if payload is None:
            print(f"invalid: prefix {cells[0] >> 248} > 192")
            return 1
    elif kind is CapKind.WRITE:
        if len(cells) == 0 or len(cells) % 2:
            print("invalid: expected start/length cell pairs")
            return 1
        ranges = []
        for i in range(0, len(cells), 2):
            rng = decode_write_range((cells[i], cells[i + 1]))
            if rng is None:
                print(f"invalid: cells {i},{i + 1} are not a well-formed range")
                return 1
            ranges.append(rng)
        from .capability import WriteCapability

        payload = WriteCapability(tuple(ranges))
    elif kind is CapKind.LOG:
        payload = decode_log_cap(tuple(cells))
        if payload is None:
            print("invalid: bad topic count cell")
            return 1
    elif kind is CapKind.EXTERNAL:
        if len(cells) != 1:
            print("invalid: expected exactly one cell")
            return 1
        payload = decode_external_cap(cells[0])
        if payload is None:
            print("invalid: any-target flag set with a nonzero target field")
            return 1
    else:
        if cells:
            print("invalid: entry capability has no cells")
            return 1
        from .capability import EntryCapability

        payload = EntryCapability()
    print(render_capability(Capability(kind, payload)))
    return 0


def _cmd_state_init(args: argparse.Namespace, config: Config) -> int:
    caps = [parse_capability(spec) for spec in args.cap or []]
    try:
        state = init_state(
            config.kernel_eth_addr,
            parse_hex(args.key, bits=192),
            parse_hex(args.eth_addr, bits=160),
            caps,
            kernel_prefix=config.kernel_prefix,
        )
    except CapFormatError as err:
        print(f"invalid: {err}", file=sys.stderr)
        return 1
    _write_text(args.output, _state_json_text(state))
    return 0


def _cmd_state_dump(args: argparse.Namespace, config: Config) -> int:
    state = _load_state(args.state_file)
    if args.json:
        sys.stdout.write(_state_json_text(state))
        return 0
    obj = state_to_json(state)
    print(f"kernel address: {obj['kernel_eth_addr']}")
    print(f"entry: {obj['entry_key'] or '(unset)'}")
    print(f"current: {obj['curr_key'] or '(unset)'}")
    print(f"procedures: {len(obj['procs'])}")
    for proc in obj["procs"]:
        print(f"  [{proc['index']}] key={proc['key']} eth={proc['eth_addr']}")
        for kind in CapKind:
            for i, cap_obj in enumerate(proc["caps"].get(kind.value, []), start=1):
                from .capability import capability_from_json

                cap = capability_from_json(cap_obj)
                print(f"      {kind.value}[{i}]: {render_capability(cap)}")
    return 0


def _cmd_state_check(args: argparse.Namespace, config: Config) -> int:
    state = _load_state(args.state_file)
    problems = check_invariant(state, kernel_prefix=config.kernel_prefix)
    if not problems:
        print("ok")
        return 0
    for problem in problems:
        print(problem)
    return 1


def _cmd_state_encode(args: argparse.Namespace, config: Config) -> int:
    state = _load_state(args.state_file)
    filler = _load_image(args.filler)
    image = encode_state(state, filler, kernel_prefix=config.kernel_prefix)
    _write_text(args.output, image.to_text())
    return 0


def _cmd_state_decode(args: argparse.Namespace, config: Config) -> int:
    image = _load_image(args.image_file)
    state, problems = decode_state_report(image, kernel_prefix=config.kernel_prefix)
    if state is None:
        for problem in problems:
            print(f"invalid: {problem}")
        return 1
    sys.stdout.write(_state_json_text(state))
    return 0


def _cmd_trace_run(args: argparse.Namespace, config: Config) -> int:
    state = _load_state(args.state)
    image = _load_image(args.image)
    steps = []
    for line in _read_text(args.trace_file).splitlines():
        line = line.strip()
        if line:
            steps.append(request_from_json(json.loads(line)))
    result = run_trace(
        state,
        image,
        steps,
        kernel_prefix=config.kernel_prefix,
        reset_current=args.reset_current,
    )
    for n, verdict in enumerate(result.verdicts, start=1):
        print(f"step {n}: {verdict}")
    for effect in result.effects:
        print(f"effect: {render_effect(effect)}")
    if args.state_out:
        _write_text(args.state_out, _state_json_text(result.state))
    if args.image_out:
        _write_text(args.image_out, result.image.to_text())
    else:
        sys.stdout.write(result.image.to_text())
    return 0


def _cmd_validate(args: argparse.Namespace, config: Config) -> int:
    if args.code_file == "-":
        raw: bytes = sys.stdin.buffer.read()
    else:
        with open(args.code_file, "rb") as fh:
            raw = fh.read()
    code = parse_code(raw)
    violations = validate(code, config.kernel_eth_addr)
    if not violations:
        print("ok")
        return 0
    for v in violations:
        print(render_violation(v))
    return 1


# ---------------------------------------------------------------------------
# Parser assembly


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--kernel-prefix",
        metavar="HEX32",
        default=None,
        help="32-bit kernel-region address prefix (default 0xffffffff)",
    )
    common.add_argument(
        "--kernel-addr",
        metavar="HEX160",
        default=None,
        help="160-bit chain address of the deployed kernel (default 0x0)",
    )

    parser = argparse.ArgumentParser(
        prog="capkernel",
        description="Reference model of a capability-based contract kernel",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    cap = sub.add_parser("cap", help="encode or decode single capabilities")
    cap_sub = cap.add_subparsers(dest="cap_command", required=True)
    enc = cap_sub.add_parser("encode", parents=[common], help="capability spec to storage cells")
    enc.add_argument("spec", help="e.g. 'call prefix=5 base=0x...' or 'write start=0x... len=4'")
    enc.add_argument("--filler", metavar="HEX", default=None, help="pre-existing cell content")
    enc.set_defaults(func=_cmd_cap_encode)
    dec = cap_sub.add_parser("decode", parents=[common], help="storage cells to capability spec")
    dec.add_argument("kind", choices=[k.value for k in CapKind])
    dec.add_argument("cells", nargs="*", help="cell values, one hex word each")
    dec.set_defaults(func=_cmd_cap_decode)

    state = sub.add_parser("state", help="states: bootstrap, inspect, encode, decode")
    state_sub = state.add_subparsers(dest="state_command", required=True)
    init = state_sub.add_parser("init", parents=[common], help="build a bootstrap state")
    init.add_argument("--key", required=True, help="bootstrap procedure key (hex, 192-bit)")
    init.add_argument("--eth-addr", required=True, help="bootstrap procedure address (hex, 160-bit)")
    init.add_argument("--cap", action="append", metavar="SPEC", help="bootstrap capability; repeatable")
    init.add_argument("-o", "--output", default=None, help="state file to write (default stdout)")
    init.set_defaults(func=_cmd_state_init)
    dump = state_sub.add_parser("dump", parents=[common], help="render a state file")
    dump.add_argument("state_file")
    dump.add_argument("--json", action="store_true", help="canonical JSON instead of text")
    dump.set_defaults(func=_cmd_state_dump)
    check = state_sub.add_parser("check", parents=[common], help="decide the state invariant")
    check.add_argument("state_file")
    check.set_defaults(func=_cmd_state_check)
    senc = state_sub.add_parser("encode", parents=[common], help="state file to storage image")
    senc.add_argument("state_file")
    senc.add_argument("--filler", default=None, help="image supplying unused bits")
    senc.add_argument("-o", "--output", default=None, help="image file to write (default stdout)")
    senc.set_defaults(func=_cmd_state_encode)
    sdec = state_sub.add_parser("decode", parents=[common], help="storage image to state JSON")
    sdec.add_argument("image_file")
    sdec.set_defaults(func=_cmd_state_decode)

    trace = sub.add_parser("trace", help="replay system-call traces")
    trace_sub = trace.add_subparsers(dest="trace_command", required=True)
    run = trace_sub.add_parser("run", parents=[common], help="apply a trace to a state")
    run.add_argument("trace_file", help="one JSON record per line")
    run.add_argument("--state", required=True, help="initial state file")
    run.add_argument("--image", default=None, help="initial user-region image")
    run.add_argument("--reset-current", action="store_true",
                     help="start as a fresh top-level invocation (current := entry)")
    run.add_argument("--state-out", default=None, help="write the final state here")
    run.add_argument("--image-out", default=None,
                     help="write the final image here instead of stdout")
    run.set_defaults(func=_cmd_trace_run)

    val = sub.add_parser("validate", parents=[common], help="validate procedure bytecode")
    val.add_argument("code_file", help="raw binary or hex text; - for stdin")
    val.set_defaults(func=_cmd_validate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    config = _resolve_config(args)
    return args.func(args, config)


if __name__ == "__main__":
    sys.exit(main())
