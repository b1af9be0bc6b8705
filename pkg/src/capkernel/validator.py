"""Lexical bytecode validation for procedure registration.

A procedure may only compute locally and delegate into the kernel, so
its code must contain no storage writes, no calls, no logs, no contract
creation and no self destruct. The check is a single disassembly pass:
PUSH immediates are consumed as data, so a forbidden byte value hiding
inside an immediate is never misread as an instruction.

DELEGATECALL is admitted only as the tail of the exact three-instruction
template PUSH20 <kernel address>; GAS; DELEGATECALL. The template is
deliberately narrow: it keeps the check one-pass and decidable, at the
price of rejecting semantically equivalent call sites.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Union

OP_STOP = 0x00
OP_SSTORE = 0x55
OP_GAS = 0x5A
OP_PUSH1 = 0x60
OP_PUSH20 = 0x73
OP_PUSH32 = 0x7F
OP_LOG0 = 0xA0
OP_LOG4 = 0xA4
OP_CREATE = 0xF0
OP_CALL = 0xF1
OP_CALLCODE = 0xF2
OP_DELEGATECALL = 0xF4
OP_CREATE2 = 0xF5
OP_STATICCALL = 0xFA
OP_SELFDESTRUCT = 0xFF


class Reason(Enum):
    STATE_CHANGE = "StateChange"
    EXTERNAL_CALL = "ExternalCall"
    SELF_DESTRUCT = "SelfDestruct"
    CREATE = "Create"
    LOG_INSTRUCTION = "LogInstruction"
    UNGUARDED_DELEGATECALL = "UnguardedDelegatecall"
    TRUNCATED_PUSH = "TruncatedPush"


FORBIDDEN = {
    OP_SSTORE: Reason.STATE_CHANGE,
    OP_CREATE: Reason.CREATE,
    OP_CREATE2: Reason.CREATE,
    OP_CALL: Reason.EXTERNAL_CALL,
    OP_CALLCODE: Reason.EXTERNAL_CALL,
    OP_STATICCALL: Reason.EXTERNAL_CALL,
    OP_SELFDESTRUCT: Reason.SELF_DESTRUCT,
    **{op: Reason.LOG_INSTRUCTION for op in range(OP_LOG0, OP_LOG4 + 1)},
}


@dataclass(frozen=True)
class Instruction:
    offset: int
    opcode: int
    immediate: Optional[bytes] = None

    @property
    def size(self) -> int:
        return 1 + (len(self.immediate) if self.immediate is not None else 0)


@dataclass(frozen=True)
class Violation:
    offset: int
    opcode: int
    reason: Reason


class TruncatedPushError(ValueError):
    def __init__(self, offset: int, opcode: int) -> None:
        need = opcode - 0x5F
        super().__init__(f"PUSH{need} at offset {offset} runs past the end of code")
        self.offset = offset
        self.opcode = opcode


def disassemble(code: bytes) -> List[Instruction]:
    """Linear scan; PUSH immediates are consumed, never decoded as opcodes."""
    out: List[Instruction] = []
    pos = 0
    while pos < len(code):
        opcode = code[pos]
        if OP_PUSH1 <= opcode <= OP_PUSH32:
            width = opcode - 0x5F
            if pos + 1 + width > len(code):
                raise TruncatedPushError(pos, opcode)
            out.append(Instruction(pos, opcode, bytes(code[pos + 1 : pos + 1 + width])))
            pos += 1 + width
        else:
            out.append(Instruction(pos, opcode))
            pos += 1
    return out


def _guarded_delegatecall(program: Sequence[Instruction], i: int, kernel_eth_addr: int) -> bool:
    if i < 2:
        return False
    push, gas = program[i - 2], program[i - 1]
    return (
        gas.opcode == OP_GAS
        and push.opcode == OP_PUSH20
        and push.immediate == kernel_eth_addr.to_bytes(20, "big")
    )


def validate(code: bytes, kernel_eth_addr: int) -> List[Violation]:
    """All violations in instruction order; an empty list means the code passes."""
    try:
        program = disassemble(code)
    except TruncatedPushError as err:
        return [Violation(err.offset, err.opcode, Reason.TRUNCATED_PUSH)]
    violations: List[Violation] = []
    for i, ins in enumerate(program):
        if ins.opcode in FORBIDDEN:
            violations.append(Violation(ins.offset, ins.opcode, FORBIDDEN[ins.opcode]))
        elif ins.opcode == OP_DELEGATECALL and not _guarded_delegatecall(
            program, i, kernel_eth_addr
        ):
            violations.append(Violation(ins.offset, ins.opcode, Reason.UNGUARDED_DELEGATECALL))
    return violations


_MNEMONICS = {
    0x00: "STOP", 0x01: "ADD", 0x02: "MUL", 0x03: "SUB", 0x04: "DIV", 0x05: "SDIV",
    0x06: "MOD", 0x07: "SMOD", 0x08: "ADDMOD", 0x09: "MULMOD", 0x0A: "EXP",
    0x0B: "SIGNEXTEND", 0x10: "LT", 0x11: "GT", 0x12: "SLT", 0x13: "SGT", 0x14: "EQ",
    0x15: "ISZERO", 0x16: "AND", 0x17: "OR", 0x18: "XOR", 0x19: "NOT", 0x1A: "BYTE",
    0x1B: "SHL", 0x1C: "SHR", 0x1D: "SAR", 0x20: "SHA3", 0x30: "ADDRESS",
    0x31: "BALANCE", 0x32: "ORIGIN", 0x33: "CALLER", 0x34: "CALLVALUE",
    0x35: "CALLDATALOAD", 0x36: "CALLDATASIZE", 0x37: "CALLDATACOPY", 0x38: "CODESIZE",
    0x39: "CODECOPY", 0x3A: "GASPRICE", 0x3B: "EXTCODESIZE", 0x3C: "EXTCODECOPY",
    0x3D: "RETURNDATASIZE", 0x3E: "RETURNDATACOPY", 0x3F: "EXTCODEHASH",
    0x40: "BLOCKHASH", 0x41: "COINBASE", 0x42: "TIMESTAMP", 0x43: "NUMBER",
    0x44: "DIFFICULTY", 0x45: "GASLIMIT", 0x46: "CHAINID", 0x47: "SELFBALANCE",
    0x48: "BASEFEE", 0x50: "POP", 0x51: "MLOAD", 0x52: "MSTORE", 0x53: "MSTORE8",
    0x54: "SLOAD", 0x55: "SSTORE", 0x56: "JUMP", 0x57: "JUMPI", 0x58: "PC",
    0x59: "MSIZE", 0x5A: "GAS", 0x5B: "JUMPDEST", 0x5F: "PUSH0",
    0xF0: "CREATE", 0xF1: "CALL", 0xF2: "CALLCODE", 0xF3: "RETURN",
    0xF4: "DELEGATECALL", 0xF5: "CREATE2", 0xFA: "STATICCALL", 0xFD: "REVERT",
    0xFE: "INVALID", 0xFF: "SELFDESTRUCT",
}
_MNEMONICS.update({OP_PUSH1 + i: f"PUSH{i + 1}" for i in range(32)})
_MNEMONICS.update({0x80 + i: f"DUP{i + 1}" for i in range(16)})
_MNEMONICS.update({0x90 + i: f"SWAP{i + 1}" for i in range(16)})
_MNEMONICS.update({OP_LOG0 + i: f"LOG{i}" for i in range(5)})


def mnemonic(opcode: int) -> str:
    return _MNEMONICS.get(opcode, f"UNKNOWN_0X{opcode:02X}")


def render_violation(v: Violation) -> str:
    return f"offset {v.offset}: {mnemonic(v.opcode)} {v.reason.value}"


def parse_code(data: Union[bytes, str]) -> bytes:
    """Accept raw binary or hex text (optional 0x prefix, whitespace ignored)."""
    if isinstance(data, bytes):
        try:
            text = data.decode("ascii")
        except UnicodeDecodeError:
            return data
    else:
        text = data
    stripped = "".join(text.split()).lower()
    if stripped.startswith("0x"):
        stripped = stripped[2:]
    if all(c in "0123456789abcdef" for c in stripped) and len(stripped) % 2 == 0:
        return bytes.fromhex(stripped)
    if isinstance(data, bytes):
        return data
    raise ValueError("input is neither raw bytes nor even-length hex text")
