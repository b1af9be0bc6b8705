"""The seven system calls: capability-gated transitions on the kernel state.

Each call is a pure function from (state, user image, request) to a
successor; a denied request raises a SyscallError subclass and leaves
both the state and the image untouched. The authorizing capability is
always named by its 1-based index in the caller's list for that kind,
so authorization never involves a hidden search.

Logs and external calls are recorded as effects, not executed; callee
code never runs inside this model. A trace is a list of steps, each
naming its own caller, so call-context policy stays with the trace
author.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .bitvec import KEY_BITS, WORD_MASK, eth_hex, key_hex, parse_hex, word_hex
from .capability import (
    CapKind,
    Capability,
    capability_from_json,
    capability_to_json,
    capability_subset,
    external_admits,
    log_admits,
    prefix_admits,
    write_admits,
)
from .encoding import StorageImage
from .kernel_state import (
    DEFAULT_KERNEL_PREFIX,
    ETH_ADDR_BITS,
    ExternalCalled,
    KernelState,
    LogEmitted,
    MAX_CAPS_PER_KIND,
    MAX_PROC_INDEX,
    Procedure,
    in_kernel_region,
    write_cap_touches_kernel,
)


class SyscallError(Exception):
    """A denied or malformed request; the machine state is unchanged."""

    def __init__(self, detail: str = "") -> None:
        super().__init__(detail)
        self.detail = detail

    @property
    def verdict(self) -> str:
        name = type(self).__name__
        return f"{name}: {self.detail}" if self.detail else name


class NoSuchCapability(SyscallError):
    pass


class CapabilityViolation(SyscallError):
    pass


class KernelRegionViolation(SyscallError):
    pass


class DuplicateKey(SyscallError):
    pass


class UnknownKey(SyscallError):
    pass


class MalformedRequest(SyscallError):
    pass


@dataclass(frozen=True)
class Grant:
    """A capability to hand to a new procedure, plus the subset witness:
    the 1-based index of the caller capability it attenuates."""

    cap: Capability
    parent_index: int


@dataclass(frozen=True)
class RegisterRequest:
    new_key: int
    eth_addr: int
    grants: Tuple[Grant, ...]
    cap_index: int


@dataclass(frozen=True)
class DeleteRequest:
    key: int
    cap_index: int


@dataclass(frozen=True)
class CallRequest:
    key: int
    cap_index: int


@dataclass(frozen=True)
class WriteRequest:
    addr: int
    value: int
    cap_index: int


@dataclass(frozen=True)
class LogRequest:
    topics: Tuple[int, ...]
    payload: bytes
    cap_index: int


@dataclass(frozen=True)
class ExternalRequest:
    target: int
    send_value: bool
    cap_index: int


@dataclass(frozen=True)
class SetEntryRequest:
    key: int
    cap_index: int


SyscallRequest = Union[
    RegisterRequest,
    DeleteRequest,
    CallRequest,
    WriteRequest,
    LogRequest,
    ExternalRequest,
    SetEntryRequest,
]


def _caller_proc(state: KernelState, caller: int) -> Procedure:
    proc = state.procs.get(caller)
    if proc is None:
        raise MalformedRequest(f"caller {key_hex(caller)} is not registered")
    return proc


def _authorizing_cap(proc: Procedure, kind: CapKind, cap_index: int):
    caps = proc.caps[kind]
    if not 1 <= cap_index <= len(caps):
        raise NoSuchCapability(
            f"caller holds {len(caps)} {kind.value} capabilities, requested #{cap_index}"
        )
    return caps[cap_index - 1]


def _check_key_width(key: int, what: str) -> None:
    if key < 0 or key >> KEY_BITS:
        raise MalformedRequest(f"{what} does not fit in {KEY_BITS} bits")


def sys_register(
    state: KernelState,
    caller: int,
    new_key: int,
    eth_addr: int,
    grants: Sequence[Grant],
    cap_index: int,
    *,
    kernel_prefix: int = DEFAULT_KERNEL_PREFIX,
) -> KernelState:
    """Register a procedure under a fresh key with attenuated capabilities.

    Every granted capability must be a subset of the caller capability
    named by its parent_index, so authority can only shrink along the
    registration tree.
    """
    proc = _caller_proc(state, caller)
    cap = _authorizing_cap(proc, CapKind.REGISTER, cap_index)
    _check_key_width(new_key, "new key")
    if eth_addr < 0 or eth_addr >> ETH_ADDR_BITS:
        raise MalformedRequest(f"eth address does not fit in {ETH_ADDR_BITS} bits")
    if not prefix_admits(cap, new_key):
        raise CapabilityViolation(f"key {key_hex(new_key)} is outside the register prefix")
    if new_key in state.procs:
        raise DuplicateKey(f"key {key_hex(new_key)} is already registered")
    if len(state.procs) >= MAX_PROC_INDEX:
        raise MalformedRequest("procedure table is full")

    granted: Dict[CapKind, list] = {kind: [] for kind in CapKind}
    for grant in grants:
        parents = proc.caps[grant.cap.kind]
        if not 1 <= grant.parent_index <= len(parents):
            raise NoSuchCapability(
                f"caller holds {len(parents)} {grant.cap.kind.value} capabilities, "
                f"grant names #{grant.parent_index}"
            )
        parent = Capability(grant.cap.kind, parents[grant.parent_index - 1])
        if not capability_subset(grant.cap, parent):
            raise CapabilityViolation(
                f"granted {grant.cap.kind.value} capability exceeds parent #{grant.parent_index}"
            )
        if grant.cap.kind is CapKind.WRITE and write_cap_touches_kernel(
            grant.cap.payload, kernel_prefix
        ):
            raise KernelRegionViolation("granted write capability covers the kernel region")
        granted[grant.cap.kind].append(grant.cap.payload)
        if len(granted[grant.cap.kind]) > MAX_CAPS_PER_KIND:
            raise MalformedRequest(f"more than {MAX_CAPS_PER_KIND} {grant.cap.kind.value} grants")

    procs = dict(state.procs)
    procs[new_key] = Procedure(len(state.procs) + 1, eth_addr, granted)
    return replace(state, procs=procs)


def sys_delete(state: KernelState, caller: int, key: int, cap_index: int) -> KernelState:
    """Unregister a procedure; the last index is renumbered into the gap."""
    proc = _caller_proc(state, caller)
    cap = _authorizing_cap(proc, CapKind.DELETE, cap_index)
    _check_key_width(key, "key")
    if not prefix_admits(cap, key):
        raise CapabilityViolation(f"key {key_hex(key)} is outside the delete prefix")
    victim = state.procs.get(key)
    if victim is None:
        raise UnknownKey(f"key {key_hex(key)} is not registered")
    if key == state.entry_key:
        raise MalformedRequest("cannot delete the entry procedure")

    last_index = len(state.procs)
    procs = dict(state.procs)
    del procs[key]
    if victim.index != last_index:
        for other_key, other in procs.items():
            if other.index == last_index:
                procs[other_key] = replace(other, index=victim.index)
                break
    curr = state.curr_key
    if curr == key:
        curr = state.entry_key  # the deleted procedure can no longer be current
    return replace(state, procs=procs, curr_key=curr)


def sys_call(state: KernelState, caller: int, key: int, cap_index: int) -> KernelState:
    """Mark a registered procedure as current; execution stays out of model."""
    proc = _caller_proc(state, caller)
    cap = _authorizing_cap(proc, CapKind.CALL, cap_index)
    _check_key_width(key, "key")
    if not prefix_admits(cap, key):
        raise CapabilityViolation(f"key {key_hex(key)} is outside the call prefix")
    if key not in state.procs:
        raise UnknownKey(f"key {key_hex(key)} is not registered")
    return replace(state, curr_key=key)


def sys_write(
    state: KernelState,
    caller: int,
    addr: int,
    value: int,
    cap_index: int,
    *,
    kernel_prefix: int = DEFAULT_KERNEL_PREFIX,
) -> KernelState:
    """Authorize one user-region cell write; the image update is the driver's.

    Returns the state unchanged: a write never alters the registry.
    """
    proc = _caller_proc(state, caller)
    cap = _authorizing_cap(proc, CapKind.WRITE, cap_index)
    if not 0 <= addr <= WORD_MASK or not 0 <= value <= WORD_MASK:
        raise MalformedRequest("address and value must be 256-bit words")
    if in_kernel_region(addr, kernel_prefix):
        raise KernelRegionViolation(f"address {word_hex(addr)} is kernel-reserved")
    if not write_admits(cap, addr):
        raise CapabilityViolation(f"address {word_hex(addr)} is outside the write capability")
    return state


def sys_log(
    state: KernelState,
    caller: int,
    topics: Sequence[int],
    payload: bytes,
    cap_index: int,
) -> LogEmitted:
    proc = _caller_proc(state, caller)
    cap = _authorizing_cap(proc, CapKind.LOG, cap_index)
    topics = tuple(topics)
    if len(topics) > 4:
        raise MalformedRequest(f"at most 4 topics, got {len(topics)}")
    if any(t < 0 or t > WORD_MASK for t in topics):
        raise MalformedRequest("topics must be 256-bit words")
    if not log_admits(cap, topics):
        raise CapabilityViolation("topics do not start with the capability's fixed topics")
    return LogEmitted(topics, bytes(payload))


def sys_external(
    state: KernelState,
    caller: int,
    target: int,
    send_value: bool,
    cap_index: int,
) -> ExternalCalled:
    proc = _caller_proc(state, caller)
    cap = _authorizing_cap(proc, CapKind.EXTERNAL, cap_index)
    if target < 0 or target >> ETH_ADDR_BITS:
        raise MalformedRequest(f"target does not fit in {ETH_ADDR_BITS} bits")
    if not external_admits(cap, target, send_value):
        raise CapabilityViolation(
            "value transfer not permitted" if (cap.target in (None, target)) else
            f"target {eth_hex(target)} is not admissible"
        )
    return ExternalCalled(target, send_value)


def sys_set_entry(state: KernelState, caller: int, key: int, cap_index: int) -> KernelState:
    proc = _caller_proc(state, caller)
    _authorizing_cap(proc, CapKind.ENTRY, cap_index)
    _check_key_width(key, "key")
    if key not in state.procs:
        raise UnknownKey(f"key {key_hex(key)} is not registered")
    return replace(state, entry_key=key)


# ---------------------------------------------------------------------------
# Dispatch and trace driving


@dataclass(frozen=True)
class StepOutcome:
    state: KernelState
    image: StorageImage
    effects: Tuple[object, ...]


def apply_syscall(
    state: KernelState,
    image: StorageImage,
    caller: int,
    request: SyscallRequest,
    *,
    kernel_prefix: int = DEFAULT_KERNEL_PREFIX,
) -> StepOutcome:
    """One transition of the machine (state, user image) under a request."""
    match request:
        case RegisterRequest(new_key=k, eth_addr=a, grants=g, cap_index=i):
            return StepOutcome(
                sys_register(state, caller, k, a, g, i, kernel_prefix=kernel_prefix), image, ()
            )
        case DeleteRequest(key=k, cap_index=i):
            return StepOutcome(sys_delete(state, caller, k, i), image, ())
        case CallRequest(key=k, cap_index=i):
            return StepOutcome(sys_call(state, caller, k, i), image, ())
        case WriteRequest(addr=a, value=v, cap_index=i):
            next_state = sys_write(state, caller, a, v, i, kernel_prefix=kernel_prefix)
            return StepOutcome(next_state, image.set(a, v), ())
        case LogRequest(topics=t, payload=p, cap_index=i):
            return StepOutcome(state, image, (sys_log(state, caller, t, p, i),))
        case ExternalRequest(target=t, send_value=v, cap_index=i):
            return StepOutcome(state, image, (sys_external(state, caller, t, v, i),))
        case SetEntryRequest(key=k, cap_index=i):
            return StepOutcome(sys_set_entry(state, caller, k, i), image, ())
        case _:
            raise MalformedRequest(f"unknown request type {type(request).__name__}")


@dataclass(frozen=True)
class TraceResult:
    state: KernelState
    image: StorageImage
    verdicts: Tuple[str, ...]
    effects: Tuple[object, ...]


def run_trace(
    state: KernelState,
    image: StorageImage,
    steps: Sequence[Tuple[int, SyscallRequest]],
    *,
    kernel_prefix: int = DEFAULT_KERNEL_PREFIX,
    reset_current: bool = False,
) -> TraceResult:
    """Apply steps strictly in order; a denied step changes nothing.

    With reset_current, the current-procedure mark is set to the entry
    mark before the first step, modelling a fresh top-level invocation.
    """
    if reset_current and state.curr_key != state.entry_key:
        state = replace(state, curr_key=state.entry_key)
    verdicts: List[str] = []
    effects: List[object] = []
    for caller, request in steps:
        try:
            outcome = apply_syscall(state, image, caller, request, kernel_prefix=kernel_prefix)
        except SyscallError as err:
            verdicts.append(err.verdict)
        else:
            state, image = outcome.state, outcome.image
            effects.extend(outcome.effects)
            verdicts.append("ok")
    return TraceResult(state, image, tuple(verdicts), tuple(effects))


# ---------------------------------------------------------------------------
# Trace wire format: one JSON object per line


def request_to_json(caller: int, request: SyscallRequest) -> dict:
    base = {"caller": key_hex(caller)}
    match request:
        case RegisterRequest(new_key=k, eth_addr=a, grants=g, cap_index=i):
            caps = []
            for grant in g:
                obj = capability_to_json(grant.cap)
                obj["parent_index"] = grant.parent_index
                caps.append(obj)
            return {"syscall": "register", **base, "cap_index": i,
                    "new_key": key_hex(k), "eth_addr": eth_hex(a), "caps": caps}
        case DeleteRequest(key=k, cap_index=i):
            return {"syscall": "delete", **base, "cap_index": i, "key": key_hex(k)}
        case CallRequest(key=k, cap_index=i):
            return {"syscall": "call", **base, "cap_index": i, "key": key_hex(k)}
        case WriteRequest(addr=a, value=v, cap_index=i):
            return {"syscall": "write", **base, "cap_index": i,
                    "addr": word_hex(a), "value": word_hex(v)}
        case LogRequest(topics=t, payload=p, cap_index=i):
            return {"syscall": "log", **base, "cap_index": i,
                    "topics": [word_hex(x) for x in t], "payload": "0x" + p.hex()}
        case ExternalRequest(target=t, send_value=v, cap_index=i):
            return {"syscall": "external", **base, "cap_index": i,
                    "target": eth_hex(t), "send_value": v}
        case SetEntryRequest(key=k, cap_index=i):
            return {"syscall": "set_entry", **base, "cap_index": i, "key": key_hex(k)}
    raise MalformedRequest(f"unknown request type {type(request).__name__}")


def request_from_json(obj: dict) -> Tuple[int, SyscallRequest]:
    """Parse one trace record into (caller, request); raises MalformedRequest."""
    try:
        name = obj["syscall"]
        caller = parse_hex(obj["caller"], bits=KEY_BITS)
        cap_index = int(obj["cap_index"])
        if name == "register":
            grants = []
            for cap_obj in obj.get("caps", []):
                grants.append(
                    Grant(capability_from_json(cap_obj), int(cap_obj["parent_index"]))
                )
            request: SyscallRequest = RegisterRequest(
                parse_hex(obj["new_key"], bits=KEY_BITS),
                parse_hex(obj["eth_addr"], bits=ETH_ADDR_BITS),
                tuple(grants),
                cap_index,
            )
        elif name == "delete":
            request = DeleteRequest(parse_hex(obj["key"], bits=KEY_BITS), cap_index)
        elif name == "call":
            request = CallRequest(parse_hex(obj["key"], bits=KEY_BITS), cap_index)
        elif name == "write":
            request = WriteRequest(parse_hex(obj["addr"]), parse_hex(obj["value"]), cap_index)
        elif name == "log":
            payload = obj.get("payload", "0x")
            if payload.startswith("0x"):
                payload = payload[2:]
            request = LogRequest(
                tuple(parse_hex(t) for t in obj.get("topics", [])),
                bytes.fromhex(payload),
                cap_index,
            )
        elif name == "external":
            request = ExternalRequest(
                parse_hex(obj["target"], bits=ETH_ADDR_BITS),
                bool(obj["send_value"]),
                cap_index,
            )
        elif name == "set_entry":
            request = SetEntryRequest(parse_hex(obj["key"], bits=KEY_BITS), cap_index)
        else:
            raise MalformedRequest(f"unknown syscall {name!r}")
    except MalformedRequest:
        raise
    except (KeyError, TypeError, ValueError, OverflowError) as exc:
        raise MalformedRequest(f"bad trace record: {exc}") from None
    return caller, request


def render_effect(effect: object) -> str:
    if isinstance(effect, LogEmitted):
        topics = ",".join(word_hex(t) for t in effect.topics)
        return f"log topics={topics} payload=0x{effect.payload.hex()}"
    if isinstance(effect, ExternalCalled):
        value = "yes" if effect.value_sent else "no"
        return f"external target={eth_hex(effect.target)} value={value}"
    raise TypeError(f"not an effect: {effect!r}")
