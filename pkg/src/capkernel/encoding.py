"""Bit-exact storage encodings with explicit filler propagation.

Every encoder maps a structured value to storage words and takes a
filler argument supplying the bits it does not constrain, so encoding
never invents or discards the pre-existing content of unused bits.
Every decoder is the partial inverse: it reads only the meaningful
bits, returns None off the encoder's range, and never looks at filler.

Kernel-reserved addresses pack four fields into one word:

    [kernel prefix : 32][marker : 8][body : 192][suffix : 24]

markers:
    0x00  procedure count          body 0, suffix 0
    0x01  procedure list slot      body 0, suffix = index (1-based)
    0x02  per-procedure data       body = procedure key, suffix below
    0x04  entry-procedure mark     body 0, suffix 0
    0x05  current-procedure mark   body 0, suffix 0
    0x06  kernel self address      body 0, suffix 0

The 24-bit suffix under marker 0x02 packs three bytes (hi, mid, lo):
metadata cells carry lo = 0 with hi selecting the field (0x00 chain
address, 0x01 index, 0x02 capability count with mid = kind code);
capability data cells carry lo = 1-based capability index, mid = kind
code, hi = cell number within the capability's encoding.

Per-kind capability cell layout:
    register/delete/call   1 cell: prefix byte at bits 248..255, key at
                           0..191, filler in 192..247
    write                  2 cells: start, then length; no filler
    log                    1 cell holding the topic count (upper bits
                           must be zero, not filler: the count drives
                           how many further cells are meaningful), then
                           one full cell per fixed topic
    external               1 cell: bit 255 = any-target flag, bit 254 =
                           may-send-value, bits 0..159 = fixed target
                           (zero when any), filler in 160..253
    entry                  no cells
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple, Union

from .bitvec import WORD_BITS, WORD_MASK, KEY_BITS, bit_range, join, mask_of, word_hex
from .capability import (
    CapKind,
    Capability,
    ExternalCallCapability,
    EntryCapability,
    LogCapability,
    MAX_LOG_TOPICS,
    PREFIXED_KINDS,
    PrefixedCapability,
    WriteCapability,
    WriteRange,
)
from .kernel_state import (
    DEFAULT_KERNEL_PREFIX,
    KernelState,
    Procedure,
    check_invariant,
    in_kernel_region,
)

MARKER_PROC_COUNT = 0x00
MARKER_PROC_LIST = 0x01
MARKER_PROC_DATA = 0x02
MARKER_ENTRY = 0x04
MARKER_CURRENT = 0x05
MARKER_KERNEL_SELF = 0x06

META_ETH = 0x00
META_INDEX = 0x01
META_CAP_COUNT = 0x02

KIND_CODES = {
    CapKind.REGISTER: 0x01,
    CapKind.DELETE: 0x02,
    CapKind.CALL: 0x03,
    CapKind.WRITE: 0x04,
    CapKind.LOG: 0x05,
    CapKind.EXTERNAL: 0x06,
    CapKind.ENTRY: 0x07,
}
CODE_KINDS = {code: kind for kind, code in KIND_CODES.items()}

PREFIX_CAP_UNUSED_BITS = bit_range(KEY_BITS, WORD_BITS - 8)
PREFIX_CAP_UNUSED_MASK = mask_of(PREFIX_CAP_UNUSED_BITS)
EXT_CAP_UNUSED_BITS = bit_range(160, 254)
EXT_CAP_UNUSED_MASK = mask_of(EXT_CAP_UNUSED_BITS)

_MASK24 = (1 << 24) - 1
_MASK160 = (1 << 160) - 1
_MASK192 = (1 << 192) - 1
_MASK8 = 0xFF


# ---------------------------------------------------------------------------
# Kernel address slots


@dataclass(frozen=True)
class ProcCountSlot:
    """Holds the number of registered procedures (low 24 bits)."""


@dataclass(frozen=True)
class ProcListSlot:
    """Holds the key of the procedure with this 1-based index."""

    index: int

    def __post_init__(self) -> None:
        if not 1 <= self.index <= _MASK24:
            raise ValueError(f"list index {self.index} out of range [1, {_MASK24}]")


@dataclass(frozen=True)
class ProcEthSlot:
    """Holds a procedure's 160-bit chain address."""

    key: int

    def __post_init__(self) -> None:
        _check_key(self.key)


@dataclass(frozen=True)
class ProcIndexSlot:
    """Holds a procedure's 1-based index (low 24 bits)."""

    key: int

    def __post_init__(self) -> None:
        _check_key(self.key)


@dataclass(frozen=True)
class CapCountSlot:
    """Holds how many capabilities of one kind a procedure carries."""

    key: int
    kind: CapKind

    def __post_init__(self) -> None:
        _check_key(self.key)


@dataclass(frozen=True)
class CapDataSlot:
    """One cell of one capability's encoding."""

    key: int
    kind: CapKind
    cap_index: int
    cell: int

    def __post_init__(self) -> None:
        _check_key(self.key)
        if not 1 <= self.cap_index <= _MASK8:
            raise ValueError(f"capability index {self.cap_index} out of range [1, {_MASK8}]")
        if not 0 <= self.cell <= _MASK8:
            raise ValueError(f"cell number {self.cell} out of range [0, {_MASK8}]")


@dataclass(frozen=True)
class EntrySlot:
    """Holds the entry procedure's index; 0 when no entry mark is set."""


@dataclass(frozen=True)
class CurrentSlot:
    """Holds the current procedure's index; 0 when unset."""


@dataclass(frozen=True)
class KernelSelfSlot:
    """Holds the chain address of the deployed kernel itself."""


KernelSlot = Union[
    ProcCountSlot,
    ProcListSlot,
    ProcEthSlot,
    ProcIndexSlot,
    CapCountSlot,
    CapDataSlot,
    EntrySlot,
    CurrentSlot,
    KernelSelfSlot,
]


def _check_key(key: int) -> None:
    if key < 0 or key >> KEY_BITS:
        raise ValueError(f"key {key:#x} does not fit in {KEY_BITS} bits")


def encode_slot(slot: KernelSlot, *, kernel_prefix: int = DEFAULT_KERNEL_PREFIX) -> int:
    """Injective packing of a semantic kernel address into a storage word."""
    match slot:
        case ProcCountSlot():
            marker, body, suffix = MARKER_PROC_COUNT, 0, 0
        case ProcListSlot(index=index):
            marker, body, suffix = MARKER_PROC_LIST, 0, index
        case ProcEthSlot(key=key):
            marker, body, suffix = MARKER_PROC_DATA, key, META_ETH << 16
        case ProcIndexSlot(key=key):
            marker, body, suffix = MARKER_PROC_DATA, key, META_INDEX << 16
        case CapCountSlot(key=key, kind=kind):
            marker, body = MARKER_PROC_DATA, key
            suffix = (META_CAP_COUNT << 16) | (KIND_CODES[kind] << 8)
        case CapDataSlot(key=key, kind=kind, cap_index=cap_index, cell=cell):
            marker, body = MARKER_PROC_DATA, key
            suffix = (cell << 16) | (KIND_CODES[kind] << 8) | cap_index
        case EntrySlot():
            marker, body, suffix = MARKER_ENTRY, 0, 0
        case CurrentSlot():
            marker, body, suffix = MARKER_CURRENT, 0, 0
        case KernelSelfSlot():
            marker, body, suffix = MARKER_KERNEL_SELF, 0, 0
        case _:
            raise TypeError(f"not a kernel slot: {slot!r}")
    return join(kernel_prefix, 224, join(marker, 216, join(body, 24, suffix)))


def decode_slot(
    word: int, *, kernel_prefix: int = DEFAULT_KERNEL_PREFIX
) -> Optional[KernelSlot]:
    """Partial inverse of encode_slot: None off its range."""
    if word >> 224 != kernel_prefix:
        return None
    marker = (word >> 216) & _MASK8
    body = (word >> 24) & _MASK192
    suffix = word & _MASK24
    if marker == MARKER_PROC_COUNT:
        return ProcCountSlot() if body == 0 and suffix == 0 else None
    if marker == MARKER_PROC_LIST:
        return ProcListSlot(suffix) if body == 0 and suffix >= 1 else None
    if marker == MARKER_PROC_DATA:
        hi, mid, lo = suffix >> 16, (suffix >> 8) & _MASK8, suffix & _MASK8
        if lo == 0:
            if hi == META_ETH and mid == 0:
                return ProcEthSlot(body)
            if hi == META_INDEX and mid == 0:
                return ProcIndexSlot(body)
            if hi == META_CAP_COUNT and mid in CODE_KINDS:
                return CapCountSlot(body, CODE_KINDS[mid])
            return None
        if mid in CODE_KINDS:
            return CapDataSlot(body, CODE_KINDS[mid], lo, hi)
        return None
    if marker == MARKER_ENTRY:
        return EntrySlot() if body == 0 and suffix == 0 else None
    if marker == MARKER_CURRENT:
        return CurrentSlot() if body == 0 and suffix == 0 else None
    if marker == MARKER_KERNEL_SELF:
        return KernelSelfSlot() if body == 0 and suffix == 0 else None
    return None


# ---------------------------------------------------------------------------
# Per-kind capability cell encodings


def encode_prefix_cap(cap: PrefixedCapability, filler: int = 0) -> int:
    """Prefix byte on top, key at the bottom, filler in the unused band."""
    return join(cap.prefix_size, 248, (filler & PREFIX_CAP_UNUSED_MASK) | cap.base_key)


def decode_prefix_cap(word: int) -> Optional[PrefixedCapability]:
    prefix_size = word >> 248
    if prefix_size > KEY_BITS:
        return None
    return PrefixedCapability(prefix_size, word & _MASK192)


def encode_write_range(rng: WriteRange) -> Tuple[int, int]:
    """Two fully meaningful cells: the start address, then the length."""
    return rng.start, rng.length


def decode_write_range(cells: Tuple[int, int]) -> Optional[WriteRange]:
    start, length = cells
    if length < 1 or start + length > WORD_MASK + 1:
        return None
    return WriteRange(start, length)


def encode_log_cap(cap: LogCapability) -> Tuple[int, ...]:
    """Count cell (no filler: it drives how many cells follow), then topics."""
    return (len(cap.fixed_topics),) + cap.fixed_topics


def decode_log_cap(cells: Tuple[int, ...]) -> Optional[LogCapability]:
    if not cells:
        return None
    count = cells[0]
    if count > MAX_LOG_TOPICS or len(cells) != 1 + count:
        return None
    return LogCapability(tuple(cells[1:]))


def encode_external_cap(cap: ExternalCallCapability, filler: int = 0) -> int:
    word = filler & EXT_CAP_UNUSED_MASK
    if cap.target is None:
        word |= 1 << 255
    else:
        word |= cap.target
    if cap.may_send_value:
        word |= 1 << 254
    return word


def decode_external_cap(word: int) -> Optional[ExternalCallCapability]:
    any_target = bool(word >> 255)
    target = word & _MASK160
    if any_target and target != 0:
        return None
    return ExternalCallCapability(None if any_target else target, bool((word >> 254) & 1))


def cap_cell_values(kind: CapKind, payload, filler_at) -> List[int]:
    """Cells of one capability's encoding; filler_at(cell) supplies filler."""
    if kind in PREFIXED_KINDS:
        return [encode_prefix_cap(payload, filler_at(0))]
    if kind is CapKind.WRITE:
        return list(encode_write_range(payload))
    if kind is CapKind.LOG:
        return list(encode_log_cap(payload))
    if kind is CapKind.EXTERNAL:
        return [encode_external_cap(payload, filler_at(0))]
    return []  # entry: no cells


# ---------------------------------------------------------------------------
# Storage images


class StorageImage:
    """Total word-to-word mapping with finite support; absent cells read 0."""

    __slots__ = ("_cells",)

    def __init__(self, cells: Optional[Dict[int, int]] = None) -> None:
        self._cells = {a: v for a, v in (cells or {}).items() if v}

    def get(self, addr: int) -> int:
        return self._cells.get(addr, 0)

    def set(self, addr: int, value: int) -> "StorageImage":
        """Functional update: returns a new image with one cell changed."""
        if addr < 0 or addr > WORD_MASK or value < 0 or value > WORD_MASK:
            raise ValueError("cell address and value must be 256-bit words")
        cells = dict(self._cells)
        if value:
            cells[addr] = value
        else:
            cells.pop(addr, None)
        return StorageImage(cells)

    def cells(self) -> Dict[int, int]:
        return dict(self._cells)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, StorageImage):
            return NotImplemented
        return self._cells == other._cells

    def __hash__(self) -> int:
        return hash(frozenset(self._cells.items()))

    def __len__(self) -> int:
        return len(self._cells)

    def __iter__(self) -> Iterator[Tuple[int, int]]:
        return iter(sorted(self._cells.items()))

    def __repr__(self) -> str:
        return f"StorageImage({len(self._cells)} nonzero cells)"

    def user_cells(self, *, kernel_prefix: int = DEFAULT_KERNEL_PREFIX) -> Dict[int, int]:
        return {a: v for a, v in self._cells.items() if not in_kernel_region(a, kernel_prefix)}

    def to_text(self) -> str:
        """One `address value` pair per line, both as 64-digit hex, sorted."""
        return "".join(f"{word_hex(a)} {word_hex(v)}\n" for a, v in self)

    @classmethod
    def from_text(cls, text: str) -> "StorageImage":
        cells: Dict[int, int] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected `address value`, got {line!r}")
            addr, value = (int(p, 16) for p in parts)
            if addr > WORD_MASK or value > WORD_MASK:
                raise ValueError(f"line {lineno}: cell does not fit in {WORD_BITS} bits")
            cells[addr] = value
        return cls(cells)


# ---------------------------------------------------------------------------
# Whole-state encoding


def state_cells(
    state: KernelState, *, kernel_prefix: int = DEFAULT_KERNEL_PREFIX
) -> Dict[int, Tuple[int, int]]:
    """Every live kernel cell as address -> (value, meaningful-bit mask).

    The mask says which bits of the cell the state pins down; encode_state
    fills the rest from its filler image. Cells whose mask is the full
    word admit no filler at all.
    """
    out: Dict[int, Tuple[int, int]] = {}

    def put(slot: KernelSlot, value: int, mask: int) -> None:
        out[encode_slot(slot, kernel_prefix=kernel_prefix)] = (value, mask)

    def index_of(key: Optional[int]) -> int:
        return 0 if key is None else state.procs[key].index

    put(ProcCountSlot(), len(state.procs), _MASK24)
    put(EntrySlot(), index_of(state.entry_key), _MASK24)
    put(CurrentSlot(), index_of(state.curr_key), _MASK24)
    put(KernelSelfSlot(), state.kernel_eth_addr, _MASK160)
    for key, proc in state.procs.items():
        put(ProcListSlot(proc.index), key, _MASK192)
        put(ProcEthSlot(key), proc.eth_addr, _MASK160)
        put(ProcIndexSlot(key), proc.index, _MASK24)
        for kind in CapKind:
            payloads = proc.caps[kind]
            put(CapCountSlot(key, kind), len(payloads), _MASK8)
            for cap_index, payload in enumerate(payloads, start=1):
                cells = cap_cell_values(kind, payload, lambda cell: 0)
                for cell, value in enumerate(cells):
                    slot = CapDataSlot(key, kind, cap_index, cell)
                    if kind in PREFIXED_KINDS:
                        mask = WORD_MASK ^ PREFIX_CAP_UNUSED_MASK
                    elif kind is CapKind.EXTERNAL:
                        mask = WORD_MASK ^ EXT_CAP_UNUSED_MASK
                    else:
                        mask = WORD_MASK
                    put(slot, value, mask)
    return out


def encode_state(
    state: KernelState,
    filler: Optional[StorageImage] = None,
    *,
    kernel_prefix: int = DEFAULT_KERNEL_PREFIX,
) -> StorageImage:
    """Write the state's live cells over the filler image.

    Addresses carrying no live data, kernel-region or not, keep the
    filler's content bit for bit; live cells keep the filler's content
    in exactly their non-meaningful bits.
    """
    filler = filler or StorageImage()
    cells = filler.cells()
    for addr, (value, mask) in state_cells(state, kernel_prefix=kernel_prefix).items():
        merged = value | (filler.get(addr) & ~mask & WORD_MASK)
        if merged:
            cells[addr] = merged
        else:
            cells.pop(addr, None)
    return StorageImage(cells)


def decode_state_report(
    image: StorageImage, *, kernel_prefix: int = DEFAULT_KERNEL_PREFIX
) -> Tuple[Optional[KernelState], List[str]]:
    """Decode with a diagnosis list; (None, problems) off encode_state's range."""
    problems: List[str] = []

    def cell(slot: KernelSlot) -> int:
        return image.get(encode_slot(slot, kernel_prefix=kernel_prefix))

    count = cell(ProcCountSlot()) & _MASK24
    keys: List[int] = []
    seen: Dict[int, int] = {}
    for index in range(1, count + 1):
        key = cell(ProcListSlot(index)) & _MASK192
        if key in seen:
            problems.append(
                f"list slot {index}: key {word_hex(key)[: 2 + 16]}… already listed at index {seen[key]}"
            )
            continue
        seen[key] = index
        keys.append(key)
    if problems:
        return None, problems

    procs: Dict[int, Procedure] = {}
    for index, key in enumerate(keys, start=1):
        stored_index = cell(ProcIndexSlot(key)) & _MASK24
        if stored_index != index:
            problems.append(
                f"procedure {index}: index cell holds {stored_index}, list says {index}"
            )
            continue
        eth_addr = cell(ProcEthSlot(key)) & _MASK160
        caps: Dict[CapKind, list] = {}
        for kind in CapKind:
            n = cell(CapCountSlot(key, kind)) & _MASK8
            payloads = []
            for cap_index in range(1, n + 1):
                where = f"procedure {index} {kind.value} cap {cap_index}"
                data = lambda c: cell(CapDataSlot(key, kind, cap_index, c))
                if kind in PREFIXED_KINDS:
                    payload = decode_prefix_cap(data(0))
                elif kind is CapKind.WRITE:
                    payload = decode_write_range((data(0), data(1)))
                elif kind is CapKind.LOG:
                    head = data(0)
                    if head > MAX_LOG_TOPICS:
                        payload = None
                    else:
                        payload = decode_log_cap(
                            (head,) + tuple(data(c) for c in range(1, head + 1))
                        )
                elif kind is CapKind.EXTERNAL:
                    payload = decode_external_cap(data(0))
                else:
                    payload = EntryCapability()
                if payload is None:
                    problems.append(f"{where}: cell content is not a valid capability")
                else:
                    payloads.append(payload)
            caps[kind] = payloads
        procs[key] = Procedure(index, eth_addr, caps)
    if problems:
        return None, problems

    def mark(slot: KernelSlot, name: str) -> Optional[int]:
        index = cell(slot) & _MASK24
        if index == 0:
            return None
        if index > count:
            problems.append(f"{name} mark: index {index} exceeds procedure count {count}")
            return None
        return keys[index - 1]

    state = KernelState(
        procs=procs,
        entry_key=mark(EntrySlot(), "entry"),
        curr_key=mark(CurrentSlot(), "current"),
        kernel_eth_addr=cell(KernelSelfSlot()) & _MASK160,
    )
    if problems:
        return None, problems
    problems.extend(check_invariant(state, kernel_prefix=kernel_prefix))
    if problems:
        return None, problems
    return state, []


def decode_state(
    image: StorageImage, *, kernel_prefix: int = DEFAULT_KERNEL_PREFIX
) -> Optional[KernelState]:
    state, _ = decode_state_report(image, kernel_prefix=kernel_prefix)
    return state
