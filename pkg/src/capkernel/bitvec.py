"""Fixed-width word arithmetic for the 256-bit storage substrate.

Words are plain Python ints constrained to [0, 2**256); procedure keys
to [0, 2**192). Nothing here wraps silently: an operation that would
overflow its width raises OverflowError instead of truncating, so any
loss of bits is an explicit, caller-requested event.
"""

from __future__ import annotations

from typing import Iterable, Tuple

WORD_BITS = 256
KEY_BITS = 192

WORD_MASK = (1 << WORD_BITS) - 1
KEY_MASK = (1 << KEY_BITS) - 1

FULL_WORD_BITS = frozenset(range(WORD_BITS))


def of_natural(value: int) -> int:
    """Admit a natural number as a 256-bit word, or raise OverflowError."""
    if value < 0:
        raise ValueError(f"word value must be non-negative, got {value}")
    if value > WORD_MASK:
        raise OverflowError(f"value {value:#x} does not fit in {WORD_BITS} bits")
    return value


def to_natural(word: int) -> int:
    """Inverse of of_natural; validates the word invariant on the way out."""
    return of_natural(word)


def of_key(value: int) -> int:
    """Admit a natural number as a 192-bit procedure key."""
    if value < 0:
        raise ValueError(f"key value must be non-negative, got {value}")
    if value > KEY_MASK:
        raise OverflowError(f"value {value:#x} does not fit in {KEY_BITS} bits")
    return value


def join(hi: int, low_width: int, lo: int) -> int:
    """Pack hi above a low_width-bit field holding lo.

    Returns hi * 2**low_width + lo. The low field width is a term-level
    argument, so nested joins need no type gymnastics; both operands are
    checked against their fields rather than truncated.
    """
    if not 0 <= low_width <= WORD_BITS:
        raise ValueError(f"low field width must be in [0, {WORD_BITS}], got {low_width}")
    if lo < 0 or (low_width < WORD_BITS and lo >> low_width):
        raise OverflowError(f"low operand {lo:#x} does not fit in {low_width} bits")
    if hi < 0:
        raise OverflowError(f"high operand must be non-negative, got {hi}")
    result = (hi << low_width) | lo
    if result > WORD_MASK:
        raise OverflowError(
            f"high operand {hi:#x} does not fit above a {low_width}-bit field"
        )
    return result


def split(word: int, low_width: int) -> Tuple[int, int]:
    """Inverse of join: return (hi, lo) for the given low field width."""
    if not 0 <= low_width <= WORD_BITS:
        raise ValueError(f"low field width must be in [0, {WORD_BITS}], got {low_width}")
    if low_width == WORD_BITS:
        return 0, word
    return word >> low_width, word & ((1 << low_width) - 1)


def mask_of(bits: Iterable[int]) -> int:
    """Build the mask with exactly the given bit indices set."""
    mask = 0
    for i in bits:
        if not 0 <= i < WORD_BITS:
            raise ValueError(f"bit index {i} out of range [0, {WORD_BITS})")
        mask |= 1 << i
    return mask


def bit_range(start: int, stop: int) -> frozenset:
    """Index set for the contiguous bit band [start, stop)."""
    if not 0 <= start <= stop <= WORD_BITS:
        raise ValueError(f"bad bit band [{start}, {stop})")
    return frozenset(range(start, stop))


def restrict(word: int, bits: Iterable[int]) -> int:
    """Zero every bit of word whose index is not in the given set."""
    return word & mask_of(bits)


def leading_bits(value: int, count: int, *, width: int = KEY_BITS) -> Tuple[int, ...]:
    """The count most-significant bits of a width-bit value, MSB first."""
    if not 0 < width <= WORD_BITS:
        raise ValueError(f"width must be in (0, {WORD_BITS}], got {width}")
    if not 0 <= count <= width:
        raise ValueError(f"prefix length {count} out of range [0, {width}]")
    if value < 0 or value >> width:
        raise OverflowError(f"value {value:#x} does not fit in {width} bits")
    top = value >> (width - count)
    return tuple((top >> (count - 1 - i)) & 1 for i in range(count))


def bit_or(a: int, b: int) -> int:
    return of_natural(a) | of_natural(b)


def bit_and(a: int, b: int) -> int:
    return of_natural(a) & of_natural(b)


def shift_left(word: int, amount: int, *, truncate: bool = False) -> int:
    """Left shift; overflow is an error unless truncation is requested."""
    if amount < 0:
        raise ValueError(f"shift amount must be non-negative, got {amount}")
    shifted = of_natural(word) << amount
    if truncate:
        return shifted & WORD_MASK
    if shifted > WORD_MASK:
        raise OverflowError(f"shifting {word:#x} left by {amount} overflows {WORD_BITS} bits")
    return shifted


def shift_right(word: int, amount: int) -> int:
    if amount < 0:
        raise ValueError(f"shift amount must be non-negative, got {amount}")
    return of_natural(word) >> amount


def word_hex(word: int) -> str:
    """Render a word as 0x plus exactly 64 lowercase hex digits."""
    return f"0x{of_natural(word):064x}"


def key_hex(key: int) -> str:
    """Render a procedure key as 0x plus exactly 48 lowercase hex digits."""
    return f"0x{of_key(key):048x}"


def eth_hex(addr: int) -> str:
    """Render a 160-bit chain address as 0x plus 40 lowercase hex digits."""
    if addr < 0 or addr >> 160:
        raise OverflowError(f"value {addr:#x} does not fit in 160 bits")
    return f"0x{addr:040x}"


def parse_hex(text: str, *, bits: int = WORD_BITS) -> int:
    """Parse an optionally 0x-prefixed hex string into a bits-wide value."""
    body = text.strip().lower()
    if body.startswith("0x"):
        body = body[2:]
    if not body:
        raise ValueError(f"empty hex value {text!r}")
    value = int(body, 16)
    if value >> bits:
        raise OverflowError(f"value {text!r} does not fit in {bits} bits")
    return value
