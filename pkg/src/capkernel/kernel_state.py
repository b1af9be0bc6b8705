"""High-level system state: the procedure registry and its global invariant.

The state is a value; every mutation path (bootstrap, system calls)
builds a new state. The invariant bundles three guarantees: procedure
indices form a dense 1..n bijection with keys, the entry and current
marks point at registered procedures, and no write capability reaches
into the kernel-reserved storage region.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

from .bitvec import KEY_BITS, WORD_BITS, eth_hex, key_hex, parse_hex
from .capability import (
    ETH_ADDR_BITS,
    CapKind,
    CapPayload,
    Capability,
    WriteCapability,
    WriteRange,
    capability_from_json,
    capability_to_json,
)

KERNEL_PREFIX_BITS = 32
DEFAULT_KERNEL_PREFIX = 0xFFFFFFFF

MAX_PROC_INDEX = (1 << 24) - 1
MAX_CAPS_PER_KIND = (1 << 8) - 1


class CapFormatError(ValueError):
    """A capability fails its format rules in the context it is used."""


def in_kernel_region(addr: int, kernel_prefix: int = DEFAULT_KERNEL_PREFIX) -> bool:
    """True iff the top 32 bits of the address equal the kernel prefix."""
    return addr >> (WORD_BITS - KERNEL_PREFIX_BITS) == kernel_prefix


def kernel_region_bounds(kernel_prefix: int = DEFAULT_KERNEL_PREFIX) -> Tuple[int, int]:
    """Half-open address interval reserved for kernel metadata."""
    lo = kernel_prefix << (WORD_BITS - KERNEL_PREFIX_BITS)
    return lo, lo + (1 << (WORD_BITS - KERNEL_PREFIX_BITS))


def range_touches_kernel(rng: WriteRange, kernel_prefix: int = DEFAULT_KERNEL_PREFIX) -> bool:
    lo, hi = kernel_region_bounds(kernel_prefix)
    return rng.start < hi and rng.stop > lo


def write_cap_touches_kernel(
    cap: WriteCapability, kernel_prefix: int = DEFAULT_KERNEL_PREFIX
) -> bool:
    return any(range_touches_kernel(r, kernel_prefix) for r in cap.ranges)


def _normalize_caps(
    caps: Optional[Mapping[CapKind, Iterable[CapPayload]]],
) -> Dict[CapKind, Tuple[CapPayload, ...]]:
    full: Dict[CapKind, Tuple[CapPayload, ...]] = {kind: () for kind in CapKind}
    if caps:
        for kind, payloads in caps.items():
            full[CapKind(kind)] = tuple(payloads)
    return full


@dataclass(frozen=True)
class Procedure:
    """A registered procedure: dense index, chain address, capability lists."""

    index: int
    eth_addr: int
    caps: Dict[CapKind, Tuple[CapPayload, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 1 <= self.index <= MAX_PROC_INDEX:
            raise ValueError(f"procedure index {self.index} out of range [1, {MAX_PROC_INDEX}]")
        if self.eth_addr < 0 or self.eth_addr >> ETH_ADDR_BITS:
            raise ValueError(f"eth address {self.eth_addr:#x} does not fit in {ETH_ADDR_BITS} bits")
        object.__setattr__(self, "caps", _normalize_caps(self.caps))

    def caps_of(self, kind: CapKind) -> Tuple[CapPayload, ...]:
        return self.caps[kind]


@dataclass(frozen=True)
class KernelState:
    """The whole system state: registry plus entry/current marks."""

    procs: Dict[int, Procedure] = field(default_factory=dict)
    entry_key: Optional[int] = None
    curr_key: Optional[int] = None
    kernel_eth_addr: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "procs", dict(self.procs))

    def key_of_index(self, index: int) -> Optional[int]:
        for key, proc in self.procs.items():
            if proc.index == index:
                return key
        return None


@dataclass(frozen=True)
class LogEmitted:
    topics: Tuple[int, ...]
    payload: bytes


@dataclass(frozen=True)
class ExternalCalled:
    target: int
    value_sent: bool


SyscallEffect = object  # LogEmitted | ExternalCalled


def nprocs(state: KernelState) -> int:
    return len(state.procs)


def check_invariant(
    state: KernelState, *, kernel_prefix: int = DEFAULT_KERNEL_PREFIX
) -> List[str]:
    """Decide the global invariant; returns all violations (empty means ok)."""
    problems: List[str] = []
    n = len(state.procs)
    indices = sorted(p.index for p in state.procs.values())
    if indices != list(range(1, n + 1)):
        problems.append(f"index bijection: indices {indices} are not exactly 1..{n}")
    for name, mark in (("entry", state.entry_key), ("current", state.curr_key)):
        if mark is not None and mark not in state.procs:
            problems.append(f"{name} registered: key {key_hex(mark)} is not a registered procedure")
    for key, proc in state.procs.items():
        if key < 0 or key >> KEY_BITS:
            problems.append(f"key width: {key:#x} does not fit in {KEY_BITS} bits")
            continue
        for kind, payloads in proc.caps.items():
            if len(payloads) > MAX_CAPS_PER_KIND:
                problems.append(
                    f"cap list size: {key_hex(key)} holds {len(payloads)} {kind.value} caps"
                )
            for i, payload in enumerate(payloads, start=1):
                try:
                    Capability(kind, payload)
                except ValueError as exc:
                    problems.append(f"cap payload: {key_hex(key)} {kind.value}[{i}]: {exc}")
                    continue
                if kind is CapKind.WRITE and write_cap_touches_kernel(payload, kernel_prefix):
                    problems.append(
                        f"kernel region: {key_hex(key)} write cap [{i}] covers reserved addresses"
                    )
    return problems


def init_state(
    kernel_eth_addr: int,
    bootstrap_key: int,
    bootstrap_eth_addr: int,
    bootstrap_caps: Iterable[Capability] = (),
    *,
    kernel_prefix: int = DEFAULT_KERNEL_PREFIX,
) -> KernelState:
    """Build the genesis state: one procedure holding the given capabilities.

    The bootstrap procedure gets index 1 and becomes both the entry and
    the current procedure, so every trace starts from a self-contained,
    invariant-satisfying state.
    """
    if bootstrap_key < 0 or bootstrap_key >> KEY_BITS:
        raise ValueError(f"bootstrap key {bootstrap_key:#x} does not fit in {KEY_BITS} bits")
    grouped: Dict[CapKind, list] = {kind: [] for kind in CapKind}
    for cap in bootstrap_caps:
        if not isinstance(cap, Capability):
            raise CapFormatError(f"expected a Capability, got {type(cap).__name__}")
        if cap.kind is CapKind.WRITE and write_cap_touches_kernel(cap.payload, kernel_prefix):
            raise CapFormatError("bootstrap write capability covers the kernel region")
        grouped[cap.kind].append(cap.payload)
        if len(grouped[cap.kind]) > MAX_CAPS_PER_KIND:
            raise CapFormatError(f"more than {MAX_CAPS_PER_KIND} {cap.kind.value} capabilities")
    state = KernelState(
        procs={bootstrap_key: Procedure(1, bootstrap_eth_addr, grouped)},
        entry_key=bootstrap_key,
        curr_key=bootstrap_key,
        kernel_eth_addr=kernel_eth_addr,
    )
    problems = check_invariant(state, kernel_prefix=kernel_prefix)
    if problems:
        raise CapFormatError("; ".join(problems))
    return state


def state_to_json(state: KernelState) -> dict:
    """JSON-ready dict; procedures sorted by index for stable output."""
    procs = sorted(state.procs.items(), key=lambda kv: kv[1].index)
    return {
        "kernel_eth_addr": eth_hex(state.kernel_eth_addr),
        "entry_key": None if state.entry_key is None else key_hex(state.entry_key),
        "curr_key": None if state.curr_key is None else key_hex(state.curr_key),
        "procs": [
            {
                "key": key_hex(key),
                "index": proc.index,
                "eth_addr": eth_hex(proc.eth_addr),
                "caps": {
                    kind.value: [
                        capability_to_json(Capability(kind, payload)) for payload in payloads
                    ]
                    for kind, payloads in proc.caps.items()
                    if payloads
                },
            }
            for key, proc in procs
        ],
    }


def state_from_json(obj: dict) -> KernelState:
    procs: Dict[int, Procedure] = {}
    for entry in obj.get("procs", []):
        key = parse_hex(entry["key"], bits=KEY_BITS)
        caps: Dict[CapKind, list] = {}
        for kind_name, cap_objs in entry.get("caps", {}).items():
            kind = CapKind(kind_name)
            payloads = []
            for cap_obj in cap_objs:
                cap = capability_from_json({**cap_obj, "kind": kind_name})
                payloads.append(cap.payload)
            caps[kind] = payloads
        procs[key] = Procedure(int(entry["index"]), parse_hex(entry["eth_addr"], bits=160), caps)

    def opt_key(name: str) -> Optional[int]:
        raw = obj.get(name)
        return None if raw is None else parse_hex(raw, bits=KEY_BITS)

    return KernelState(
        procs=procs,
        entry_key=opt_key("entry_key"),
        curr_key=opt_key("curr_key"),
        kernel_eth_addr=parse_hex(obj["kernel_eth_addr"], bits=160),
    )
