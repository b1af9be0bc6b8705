"""Capability kinds, their set semantics, and subset decision procedures.

Each capability denotes a set of admissible actions: a prefixed
capability admits every procedure key sharing its leading bits, a write
capability admits every address inside a union of ranges, and so on.
Delegation hands out a capability only if its set is contained in the
parent's, so each kind carries a subset decision procedure alongside
its membership test.

The prefix logic is generic over key width: the production width is 192
bits, but every function takes a width argument so small-width
exhaustive checking runs through the identical code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence, Tuple, Union

from .bitvec import (
    KEY_BITS,
    WORD_BITS,
    WORD_MASK,
    eth_hex,
    key_hex,
    leading_bits,
    parse_hex,
    word_hex,
)

ETH_ADDR_BITS = 160
MAX_LOG_TOPICS = 4


class CapKind(str, Enum):
    """The seven capability kinds, one per system call."""

    REGISTER = "register"
    DELETE = "delete"
    CALL = "call"
    WRITE = "write"
    LOG = "log"
    EXTERNAL = "external"
    ENTRY = "entry"


PREFIXED_KINDS = (CapKind.REGISTER, CapKind.DELETE, CapKind.CALL)


@dataclass(frozen=True)
class PrefixedCapability:
    """A base procedure key plus the number of leading bits that must match."""

    prefix_size: int
    base_key: int

    def __post_init__(self) -> None:
        if not 0 <= self.prefix_size <= KEY_BITS:
            raise ValueError(f"prefix size {self.prefix_size} out of range [0, {KEY_BITS}]")
        if self.base_key < 0 or self.base_key >> KEY_BITS:
            raise ValueError(f"base key {self.base_key:#x} does not fit in {KEY_BITS} bits")


@dataclass(frozen=True)
class WriteRange:
    """Half-open address range [start, start + length); never wraps."""

    start: int
    length: int

    def __post_init__(self) -> None:
        if self.start < 0 or self.start >> WORD_BITS:
            raise ValueError(f"range start {self.start:#x} is not a storage address")
        if self.length < 1:
            raise ValueError(f"range length must be at least 1, got {self.length}")
        if self.start + self.length > WORD_MASK + 1:
            raise ValueError("range runs past the top of the address space")

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class WriteCapability:
    """Union of admissible write ranges; ranges may overlap."""

    ranges: Tuple[WriteRange, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "ranges", tuple(self.ranges))


@dataclass(frozen=True)
class LogCapability:
    """Pins the first len(fixed_topics) topics of every emitted record."""

    fixed_topics: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "fixed_topics", tuple(self.fixed_topics))
        if len(self.fixed_topics) > MAX_LOG_TOPICS:
            raise ValueError(f"at most {MAX_LOG_TOPICS} fixed topics, got {len(self.fixed_topics)}")
        for t in self.fixed_topics:
            if t < 0 or t >> WORD_BITS:
                raise ValueError(f"topic {t:#x} is not a storage word")


@dataclass(frozen=True)
class ExternalCallCapability:
    """Admissible external targets: one fixed address, or any (target=None)."""

    target: Optional[int]
    may_send_value: bool

    def __post_init__(self) -> None:
        if self.target is not None and (self.target < 0 or self.target >> ETH_ADDR_BITS):
            raise ValueError(f"target {self.target:#x} does not fit in {ETH_ADDR_BITS} bits")


@dataclass(frozen=True)
class EntryCapability:
    """Unit capability: permission to move the entry-procedure mark."""


CapPayload = Union[
    PrefixedCapability,
    WriteCapability,
    LogCapability,
    ExternalCallCapability,
    EntryCapability,
]

_KIND_PAYLOAD = {
    CapKind.REGISTER: PrefixedCapability,
    CapKind.DELETE: PrefixedCapability,
    CapKind.CALL: PrefixedCapability,
    CapKind.WRITE: WriteCapability,
    CapKind.LOG: LogCapability,
    CapKind.EXTERNAL: ExternalCallCapability,
    CapKind.ENTRY: EntryCapability,
}


@dataclass(frozen=True)
class Capability:
    """Tagged union over the seven kinds; the tag fixes the payload type."""

    kind: CapKind
    payload: CapPayload = field(default_factory=EntryCapability)

    def __post_init__(self) -> None:
        expected = _KIND_PAYLOAD[self.kind]
        if type(self.payload) is not expected:
            raise ValueError(
                f"{self.kind.value} capability needs a {expected.__name__} payload, "
                f"got {type(self.payload).__name__}"
            )


def prefix_admits(cap: PrefixedCapability, key: int, *, width: int = KEY_BITS) -> bool:
    """True iff the first prefix_size bits of key match the base key's."""
    if cap.prefix_size > width:
        raise ValueError(f"prefix size {cap.prefix_size} exceeds key width {width}")
    if key < 0 or key >> width or cap.base_key >> width:
        raise ValueError("key does not fit the stated width")
    shift = width - cap.prefix_size
    return key >> shift == cap.base_key >> shift


def prefix_subset(
    inner: PrefixedCapability, outer: PrefixedCapability, *, width: int = KEY_BITS
) -> bool:
    """Set inclusion: a longer prefix on a matching base narrows the set."""
    return inner.prefix_size >= outer.prefix_size and prefix_admits(
        outer, inner.base_key, width=width
    )


def prefix_set_size(cap: PrefixedCapability, *, width: int = KEY_BITS) -> int:
    """Number of keys the capability admits: 2**(width - prefix_size)."""
    if cap.prefix_size > width:
        raise ValueError(f"prefix size {cap.prefix_size} exceeds key width {width}")
    return 1 << (width - cap.prefix_size)


def write_admits(cap: WriteCapability, addr: int) -> bool:
    """True iff some range of the union contains the address."""
    return any(r.start <= addr < r.stop for r in cap.ranges)


def merge_ranges(ranges: Iterable[WriteRange]) -> Tuple[WriteRange, ...]:
    """Normalize a union: sort by start, coalesce overlapping or adjacent ranges."""
    ordered = sorted(ranges, key=lambda r: (r.start, r.stop))
    merged: list[WriteRange] = []
    for r in ordered:
        if merged and r.start <= merged[-1].stop:
            last = merged[-1]
            if r.stop > last.stop:
                merged[-1] = WriteRange(last.start, r.stop - last.start)
        else:
            merged.append(r)
    return tuple(merged)


def write_subset(inner: WriteCapability, outer: WriteCapability) -> bool:
    """Set inclusion over address unions.

    The outer union is normalized first; each inner range must then fall
    inside a single normalized outer range (a range cannot straddle a gap).
    """
    merged = merge_ranges(outer.ranges)
    starts = [m.start for m in merged]
    for r in inner.ranges:
        # rightmost merged range starting at or before r.start
        lo, hi = 0, len(starts)
        while lo < hi:
            mid = (lo + hi) // 2
            if starts[mid] <= r.start:
                lo = mid + 1
            else:
                hi = mid
        if lo == 0 or r.stop > merged[lo - 1].stop:
            return False
    return True


def log_admits(cap: LogCapability, topics: Sequence[int]) -> bool:
    """True iff the record's topics start with the capability's fixed topics."""
    fixed = cap.fixed_topics
    return len(topics) >= len(fixed) and tuple(topics[: len(fixed)]) == fixed


def log_subset(inner: LogCapability, outer: LogCapability) -> bool:
    """More fixed topics means less authority, so containment is prefix order."""
    return inner.fixed_topics[: len(outer.fixed_topics)] == outer.fixed_topics


def external_admits(cap: ExternalCallCapability, target: int, send_value: bool) -> bool:
    """True iff the target is admissible and value transfer is allowed if used."""
    if target < 0 or target >> ETH_ADDR_BITS:
        raise ValueError(f"target {target:#x} does not fit in {ETH_ADDR_BITS} bits")
    if cap.target is not None and cap.target != target:
        return False
    return cap.may_send_value or not send_value


def external_subset(inner: ExternalCallCapability, outer: ExternalCallCapability) -> bool:
    if outer.target is not None and inner.target != outer.target:
        return False
    return outer.may_send_value or not inner.may_send_value


def capability_subset(inner: Capability, outer: Capability, *, width: int = KEY_BITS) -> bool:
    """Kind-tag dispatch; capabilities of different kinds are incomparable."""
    if inner.kind is not outer.kind:
        return False
    a, b = inner.payload, outer.payload
    if inner.kind in PREFIXED_KINDS:
        return prefix_subset(a, b, width=width)
    if inner.kind is CapKind.WRITE:
        return write_subset(a, b)
    if inner.kind is CapKind.LOG:
        return log_subset(a, b)
    if inner.kind is CapKind.EXTERNAL:
        return external_subset(a, b)
    return True  # entry: unit set, always contained


def render_capability(cap: Capability) -> str:
    """One-line human-readable form, parseable back by parse_capability."""
    p = cap.payload
    if cap.kind in PREFIXED_KINDS:
        return f"{cap.kind.value} prefix={p.prefix_size} base={key_hex(p.base_key)}"
    if cap.kind is CapKind.WRITE:
        if not p.ranges:
            return "write none"
        return "write " + " ".join(f"start={word_hex(r.start)} len={r.length}" for r in p.ranges)
    if cap.kind is CapKind.LOG:
        return "log topics=" + ",".join(word_hex(t) for t in p.fixed_topics)
    if cap.kind is CapKind.EXTERNAL:
        target = "any" if p.target is None else eth_hex(p.target)
        value = "yes" if p.may_send_value else "no"
        return f"external target={target} value={value}"
    return "entry"


def _fields_of(parts: Sequence[str]) -> list:
    pairs = []
    for part in parts:
        name, sep, value = part.partition("=")
        if not sep:
            raise ValueError(f"expected name=value, got {part!r}")
        pairs.append((name, value))
    return pairs


def parse_capability(text: str) -> Capability:
    """Parse the render_capability grammar."""
    parts = text.split()
    if not parts:
        raise ValueError("empty capability spec")
    kind_name, rest = parts[0], parts[1:]
    try:
        kind = CapKind(kind_name)
    except ValueError:
        raise ValueError(f"unknown capability kind {kind_name!r}") from None

    if kind in PREFIXED_KINDS:
        fields = dict(_fields_of(rest))
        if set(fields) != {"prefix", "base"}:
            raise ValueError(f"{kind.value} capability needs prefix= and base=")
        return Capability(
            kind, PrefixedCapability(int(fields["prefix"]), parse_hex(fields["base"], bits=KEY_BITS))
        )
    if kind is CapKind.WRITE:
        if rest == ["none"]:
            return Capability(kind, WriteCapability(()))
        pairs = _fields_of(rest)
        ranges = []
        for i in range(0, len(pairs), 2):
            chunk = pairs[i : i + 2]
            if [name for name, _ in chunk] != ["start", "len"]:
                raise ValueError("write capability needs start=... len=... pairs")
            ranges.append(WriteRange(parse_hex(chunk[0][1]), int(chunk[1][1])))
        return Capability(kind, WriteCapability(tuple(ranges)))
    if kind is CapKind.LOG:
        fields = dict(_fields_of(rest)) if rest else {"topics": ""}
        if set(fields) != {"topics"}:
            raise ValueError("log capability needs topics=")
        raw = fields["topics"]
        topics = tuple(parse_hex(t) for t in raw.split(",")) if raw else ()
        return Capability(kind, LogCapability(topics))
    if kind is CapKind.EXTERNAL:
        fields = dict(_fields_of(rest))
        if set(fields) != {"target", "value"}:
            raise ValueError("external capability needs target= and value=")
        target = None if fields["target"] == "any" else parse_hex(fields["target"], bits=ETH_ADDR_BITS)
        if fields["value"] not in ("yes", "no"):
            raise ValueError("value= must be yes or no")
        return Capability(kind, ExternalCallCapability(target, fields["value"] == "yes"))
    if rest:
        raise ValueError("entry capability takes no fields")
    return Capability(kind, EntryCapability())


def capability_to_json(cap: Capability) -> dict:
    p = cap.payload
    if cap.kind in PREFIXED_KINDS:
        return {"kind": cap.kind.value, "prefix_size": p.prefix_size, "base_key": key_hex(p.base_key)}
    if cap.kind is CapKind.WRITE:
        return {
            "kind": cap.kind.value,
            "ranges": [{"start": word_hex(r.start), "length": str(r.length)} for r in p.ranges],
        }
    if cap.kind is CapKind.LOG:
        return {"kind": cap.kind.value, "topics": [word_hex(t) for t in p.fixed_topics]}
    if cap.kind is CapKind.EXTERNAL:
        return {
            "kind": cap.kind.value,
            "target": "any" if p.target is None else eth_hex(p.target),
            "may_send_value": p.may_send_value,
        }
    return {"kind": cap.kind.value}


def capability_from_json(obj: dict) -> Capability:
    kind = CapKind(obj["kind"])
    if kind in PREFIXED_KINDS:
        return Capability(
            kind,
            PrefixedCapability(int(obj["prefix_size"]), parse_hex(obj["base_key"], bits=KEY_BITS)),
        )
    if kind is CapKind.WRITE:
        ranges = tuple(
            WriteRange(parse_hex(r["start"]), int(r["length"])) for r in obj.get("ranges", [])
        )
        return Capability(kind, WriteCapability(ranges))
    if kind is CapKind.LOG:
        return Capability(kind, LogCapability(tuple(parse_hex(t) for t in obj.get("topics", []))))
    if kind is CapKind.EXTERNAL:
        raw = obj["target"]
        target = None if raw == "any" else parse_hex(raw, bits=ETH_ADDR_BITS)
        return Capability(kind, ExternalCallCapability(target, bool(obj["may_send_value"])))
    return Capability(kind, EntryCapability())
