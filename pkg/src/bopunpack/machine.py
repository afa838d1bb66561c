"""Guest machine semantics plus the reference interpreter.

The interpreter is the ground truth the DBI engine is checked against;
exceptions reach guest code through an SEH-style handler chain.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable

from .isa import MAX_LENGTH, DecodeError, Instruction, Op, TruncatedInstruction, decode

PAGE_SIZE = 0x1000
MASK32 = 0xFFFF_FFFF
SP = 7

# Thread-information-block analog.
SEH_HEAD = 0x0000_0F00
STACK_TOP_CELL = 0x0000_0F04
STACK_BOTTOM_CELL = 0x0000_0F08

LIB_BASE = 0x0070_0000
LIB_SIZE = 0x1000
LIB_STUB_SPACING = 16

CACHE_BASE = 0x0090_0000
CACHE_END = 0x00A0_0000

RECORD_SIZE = 12
CONTEXT_SIZE = 60
FRAME_SIZE = RECORD_SIZE + CONTEXT_SIZE

# GuestContext field offsets.
CTX_REG = 0
CTX_PC = 32
CTX_FLAGS = 36
CTX_BP = 40
CTX_BCTL = 56

BAD_MNEMONIC = "(BAD)"


class ExceptionCode(IntEnum):
    ACCESS_VIOLATION = 1
    INVALID_OPCODE = 2
    SINGLE_STEP = 3
    SOFTWARE_TRAP = 4


class MemoryFault(Exception):
    """Access to an unmapped or guest-inaccessible address."""

    def __init__(self, addr: int):
        super().__init__(f"access violation at 0x{addr:08X}")
        self.addr = addr


class Memory:
    """Sparse page-granular guest memory. Unmapped accesses raise MemoryFault."""

    def __init__(self) -> None:
        self.pages: dict[int, bytearray] = {}

    def map(self, addr: int, size: int) -> None:
        start = addr & ~(PAGE_SIZE - 1)
        for page in range(start, addr + size, PAGE_SIZE):
            self.pages.setdefault(page, bytearray(PAGE_SIZE))

    def is_mapped(self, addr: int) -> bool:
        return (addr & ~(PAGE_SIZE - 1)) in self.pages

    def read(self, addr: int, n: int) -> bytes:
        out = bytearray()
        while n:
            addr &= MASK32
            page = self.pages.get(addr & ~(PAGE_SIZE - 1))
            if page is None:
                raise MemoryFault(addr)
            off = addr & (PAGE_SIZE - 1)
            chunk = min(n, PAGE_SIZE - off)
            out += page[off:off + chunk]
            addr += chunk
            n -= chunk
        return bytes(out)

    def write(self, addr: int, data: bytes) -> None:
        # validate the whole range first so a faulting write has no effect
        for a in range(addr, addr + len(data), 1):
            if not self.is_mapped(a & MASK32):
                raise MemoryFault(a & MASK32)
        for i, b in enumerate(data):
            a = (addr + i) & MASK32
            self.pages[a & ~(PAGE_SIZE - 1)][a & (PAGE_SIZE - 1)] = b

    def read_u32(self, addr: int) -> int:
        return struct.unpack("<I", self.read(addr, 4))[0]

    def write_u32(self, addr: int, value: int) -> None:
        self.write(addr, struct.pack("<I", value & MASK32))

    def copy(self) -> Memory:
        dup = Memory()
        dup.pages = {k: bytearray(v) for k, v in self.pages.items()}
        return dup

    def digest(self, exclude: tuple[int, int] | None = None) -> str:
        h = hashlib.sha256()
        for page in sorted(self.pages):
            if exclude and exclude[0] <= page < exclude[1]:
                continue
            h.update(page.to_bytes(4, "little"))
            h.update(self.pages[page])
        return h.hexdigest()


@dataclass(frozen=True)
class ExceptionRecord:
    code: ExceptionCode
    address: int
    info: int = 0

    def pack(self) -> bytes:
        return struct.pack("<III", int(self.code), self.address & MASK32, self.info & MASK32)

    @classmethod
    def unpack(cls, data: bytes) -> ExceptionRecord:
        code, address, info = struct.unpack("<III", data[:RECORD_SIZE])
        return cls(ExceptionCode(code), address, info)


@dataclass(frozen=True)
class GuestContext:
    regs: tuple[int, ...]
    pc: int
    flags: int
    bp: tuple[int, int, int, int]
    bctl: int

    def pack(self) -> bytes:
        return struct.pack("<8I I I 4I I", *self.regs, self.pc, self.flags, *self.bp, self.bctl)

    @classmethod
    def unpack(cls, data: bytes) -> GuestContext:
        v = struct.unpack("<8I I I 4I I", data[:CONTEXT_SIZE])
        return cls(tuple(v[0:8]), v[8], v[9], tuple(v[10:14]), v[14])


@dataclass
class MachineState:
    mem: Memory = field(default_factory=Memory)
    regs: list[int] = field(default_factory=lambda: [0] * 8)
    pc: int = 0
    z: bool = False
    s: bool = False
    c: bool = False
    bp: list[int] = field(default_factory=lambda: [0] * 4)
    bctl: int = 0
    halted: bool = False
    # when set, EXIT is legal here and guest data accesses here fault
    cache_region: tuple[int, int] | None = None
    # side information about the most recent step
    last_instr: Instruction | None = None
    last_write: tuple[int, int] | None = None

    @property
    def sp(self) -> int:
        return self.regs[SP]

    @property
    def flags(self) -> int:
        return int(self.z) | int(self.s) << 1 | int(self.c) << 2

    @flags.setter
    def flags(self, value: int) -> None:
        self.z, self.s, self.c = bool(value & 1), bool(value & 2), bool(value & 4)

    def in_cache(self, addr: int) -> bool:
        return self.cache_region is not None and self.cache_region[0] <= addr < self.cache_region[1]

    def _check_data(self, addr: int, width: int) -> None:
        if self.cache_region is None:
            return
        lo, hi = self.cache_region
        if addr < hi and addr + width > lo:
            raise MemoryFault(max(addr, lo))

    def read_data(self, addr: int) -> int:
        addr &= MASK32
        self._check_data(addr, 4)
        return self.mem.read_u32(addr)

    def write_data(self, addr: int, value: int) -> None:
        addr &= MASK32
        self._check_data(addr, 4)
        self.mem.write_u32(addr, value)
        self.last_write = (addr, 4)

    def push(self, value: int) -> None:
        new_sp = (self.regs[SP] - 4) & MASK32
        self.write_data(new_sp, value)
        self.regs[SP] = new_sp

    def pop(self) -> int:
        value = self.read_data(self.regs[SP])
        self.regs[SP] = (self.regs[SP] + 4) & MASK32
        return value

    def enabled_breakpoints(self) -> list[int]:
        return [self.bp[i] for i in range(4) if self.bctl >> i & 1]

    def capture_context(self) -> GuestContext:
        return GuestContext(tuple(self.regs), self.pc, self.flags, tuple(self.bp), self.bctl)

    def load_context(self, ctx: GuestContext) -> None:
        self.regs = list(ctx.regs)
        self.pc = ctx.pc
        self.flags = ctx.flags
        self.bp = list(ctx.bp)
        self.bctl = ctx.bctl & 0xF

    def copy(self) -> MachineState:
        return MachineState(
            self.mem.copy(), list(self.regs), self.pc, self.z, self.s, self.c,
            list(self.bp), self.bctl, self.halted, self.cache_region,
        )

    def arch_view(self) -> tuple:
        """Registers and flags; what transparency checks compare."""
        return (tuple(self.regs), self.z, self.s, self.c, tuple(self.bp), self.bctl)


# --- step outcomes -------------------------------------------------------

@dataclass(frozen=True)
class Normal:
    pass


@dataclass(frozen=True)
class Fault:
    record: ExceptionRecord


@dataclass(frozen=True)
class ContinueRequest:
    context_addr: int


@dataclass(frozen=True)
class Halted:
    pass


@dataclass(frozen=True)
class Exit:
    """EXIT executed inside the cache region; only the DBI engine sees this."""

    value: int


StepOutcome = Normal | Fault | ContinueRequest | Halted | Exit

NORMAL = Normal()
HALTED = Halted()


def fetch(state: MachineState, addr: int, allow_cache: bool = False) -> Instruction:
    """Decode the instruction at ``addr`` as the CPU would.

    Raises MemoryFault when the first byte (or a byte the instruction needs)
    is unreadable, DecodeError when the bytes are not an instruction. The
    cache region is invisible unless ``allow_cache``.
    """
    if not allow_cache and state.in_cache(addr):
        raise MemoryFault(addr)
    off = addr & (PAGE_SIZE - 1)
    page = state.mem.pages.get(addr & ~(PAGE_SIZE - 1))
    if page is not None and off + MAX_LENGTH <= PAGE_SIZE and (
            allow_cache or state.in_cache(addr) == state.in_cache(addr + MAX_LENGTH - 1)):
        return decode(bytes(page[off:off + MAX_LENGTH]), addr)
    buf = bytearray()
    stop = None
    for i in range(MAX_LENGTH):
        a = (addr + i) & MASK32
        if not state.mem.is_mapped(a) or (not allow_cache and state.in_cache(a)):
            stop = a
            break
        buf += state.mem.read(a, 1)
    if not buf:
        raise MemoryFault(addr)
    try:
        return decode(bytes(buf), addr)
    except TruncatedInstruction:
        if stop is not None:
            raise MemoryFault(stop) from None
        raise


def _set_zs(state: MachineState, result: int) -> None:
    state.z = result == 0
    state.s = bool(result >> 31)


def step(state: MachineState, in_cache: bool = False) -> StepOutcome:
    """Execute exactly one instruction at ``state.pc``.

    Faults are precise: a faulting instruction leaves the state untouched.
    ``in_cache`` lets the DBI engine run its translated code.
    """
    state.last_write = None
    state.last_instr = None
    pc = state.pc
    try:
        instr = fetch(state, pc, allow_cache=in_cache)
    except MemoryFault as exc:
        return Fault(ExceptionRecord(ExceptionCode.ACCESS_VIOLATION, pc, exc.addr))
    except DecodeError:
        return Fault(ExceptionRecord(ExceptionCode.INVALID_OPCODE, pc))
    state.last_instr = instr
    if instr.has_bad_prefix:
        return Fault(ExceptionRecord(ExceptionCode.INVALID_OPCODE, pc))

    op, o = instr.op, instr.operands
    nxt = (pc + instr.length) & MASK32
    regs = state.regs
    saved = (list(regs), state.z, state.s, state.c)
    try:
        if op is Op.MOV_RI:
            regs[o[0]] = o[1]
        elif op is Op.MOV_RR:
            regs[o[0]] = regs[o[1]]
        elif op is Op.LOAD:
            regs[o[0]] = state.read_data(regs[o[1]] + o[2])
        elif op is Op.STORE:
            state.write_data(regs[o[0]] + o[1], regs[o[2]])
        elif op in (Op.ADD_RI, Op.ADD_RR):
            a = regs[o[0]]
            b = o[1] if op is Op.ADD_RI else regs[o[1]]
            total = a + b
            regs[o[0]] = total & MASK32
            _set_zs(state, total & MASK32)
            state.c = total > MASK32
        elif op in (Op.SUB_RI, Op.SUB_RR, Op.CMP_RI):
            a = regs[o[0]]
            b = regs[o[1]] if op is Op.SUB_RR else o[1]
            result = (a - b) & MASK32
            if op is not Op.CMP_RI:
                regs[o[0]] = result
            _set_zs(state, result)
            state.c = a < b
        elif op in (Op.XOR_RI, Op.XOR_RR):
            b = o[1] if op is Op.XOR_RI else regs[o[1]]
            regs[o[0]] ^= b
            _set_zs(state, regs[o[0]])
            state.c = False
        elif op is Op.PUSH:
            state.push(regs[o[0]])
        elif op is Op.POP:
            value = state.pop()
            regs[o[0]] = value
        elif op is Op.PUSHI:
            state.push(o[0])
        elif op is Op.JMP:
            nxt = (nxt + o[0]) & MASK32
        elif op is Op.JZ:
            if state.z:
                nxt = (nxt + o[0]) & MASK32
        elif op is Op.JNZ:
            if not state.z:
                nxt = (nxt + o[0]) & MASK32
        elif op is Op.JMPR:
            nxt = regs[o[0]]
        elif op is Op.CALL:
            state.push(nxt)
            nxt = (nxt + o[0]) & MASK32
        elif op is Op.CALLR:
            target = regs[o[0]]
            state.push(nxt)
            nxt = target
        elif op is Op.RET:
            nxt = state.pop()
        elif op is Op.TRAP:
            return Fault(ExceptionRecord(ExceptionCode.SOFTWARE_TRAP, pc, o[0]))
        elif op is Op.CONTINUE:
            return ContinueRequest(regs[1])
        elif op is Op.HALT:
            state.halted = True
            return HALTED
        elif op is Op.EXIT:
            if in_cache and state.in_cache(pc):
                return Exit(o[0])
            return Fault(ExceptionRecord(ExceptionCode.INVALID_OPCODE, pc))
    except MemoryFault as exc:
        regs[:], state.z, state.s, state.c = saved
        state.last_write = None
        return Fault(ExceptionRecord(ExceptionCode.ACCESS_VIOLATION, pc, exc.addr))
    state.pc = nxt
    return NORMAL


class Delivery(Enum):
    DELIVERED = "delivered"
    UNHANDLED = "unhandled"


def deliver_exception(state: MachineState, rec: ExceptionRecord) -> Delivery:
    """Hand ``rec`` to the guest's current SEH frame.

    The context captured is the machine state as it is now, so callers set
    ``state.pc`` to the address the handler should see as the resume point.
    """
    mem = state.mem
    try:
        head = mem.read_u32(SEH_HEAD)
        top = mem.read_u32(STACK_TOP_CELL)
        bottom = mem.read_u32(STACK_BOTTOM_CELL)
    except MemoryFault:
        return Delivery.UNHANDLED
    sp = state.sp
    if head == 0 or not bottom <= sp <= top:
        return Delivery.UNHANDLED
    try:
        handler = state.read_data(head + 4)
        ctx = state.capture_context()
        frame = (sp - FRAME_SIZE) & MASK32
        state._check_data(frame, FRAME_SIZE)
        mem.write(frame, rec.pack() + ctx.pack())
    except MemoryFault:
        return Delivery.UNHANDLED
    state.regs[SP] = frame
    state.regs[0] = frame
    state.regs[1] = frame + RECORD_SIZE
    state.pc = handler
    return Delivery.DELIVERED


def apply_context(state: MachineState, ctx_addr: int) -> GuestContext:
    """Load the whole architectural state from a guest context in memory.

    The only route by which guest code can change B0-B3/bctl.
    """
    ctx_addr &= MASK32
    state._check_data(ctx_addr, CONTEXT_SIZE)
    ctx = GuestContext.unpack(state.mem.read(ctx_addr, CONTEXT_SIZE))
    state.load_context(ctx)
    return ctx


# --- reference interpreter -----------------------------------------------

class StopReason(Enum):
    HALTED = "Halted"
    UNHANDLED = "UnhandledException"
    FUEL_EXHAUSTED = "FuelExhausted"


TraceEntry = tuple[int, str]


@dataclass
class RunReport:
    reason: StopReason
    r0: int
    trace: list[TraceEntry]
    singlesteps: int = 0
    delivered: list[ExceptionRecord] = field(default_factory=list)
    state: MachineState | None = None


def trace_name(instr: Instruction | None) -> str:
    return instr.mnemonic if instr is not None else BAD_MNEMONIC


def run_reference(
    state: MachineState,
    fuel: int,
    on_step: Callable[[MachineState, int, StepOutcome], None] | None = None,
    trace: list[TraceEntry] | None = None,
) -> RunReport:
    """Interpret the guest natively until HALT, an unhandled fault, or fuel runs out.

    ``on_step(state, n, outcome)`` observes the state after the n-th
    instruction, before any exception is delivered. Breakpoints trap after
    the matching instruction has taken effect.
    """
    if fuel <= 0:
        raise ValueError("fuel must be positive")
    trace = [] if trace is None else trace
    report = RunReport(StopReason.FUEL_EXHAUSTED, 0, trace, state=state)
    executed = 0
    while executed < fuel:
        pc = state.pc
        outcome = step(state)
        executed += 1
        trace.append((pc, trace_name(state.last_instr)))
        if on_step is not None:
            on_step(state, len(trace), outcome)

        rec = None
        if isinstance(outcome, Normal):
            if pc in state.enabled_breakpoints():
                rec = ExceptionRecord(ExceptionCode.SINGLE_STEP, pc)
                report.singlesteps += 1
        elif isinstance(outcome, Fault):
            rec = outcome.record
        elif isinstance(outcome, ContinueRequest):
            try:
                apply_context(state, outcome.context_addr)
            except MemoryFault as exc:
                rec = ExceptionRecord(ExceptionCode.ACCESS_VIOLATION, pc, exc.addr)
        elif isinstance(outcome, Halted):
            report.reason = StopReason.HALTED
            break
        if rec is not None:
            report.delivered.append(rec)
            if deliver_exception(state, rec) is Delivery.UNHANDLED:
                report.reason = StopReason.UNHANDLED
                break
    report.r0 = state.regs[0]
    return report
