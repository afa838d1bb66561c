"""Dynamic binary instrumentation engine with a single-slot code cache.

Guest code never runs in place. The dispatcher translates one basic block
at a time into the cache region, runs it on the machine core and regains
control whenever the block leaves straight-line execution. Everything the
guest can observe matches a native run, down to stack contents and the
addresses inside exception records.
"""
from __future__ import annotations

import bisect
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable

from .image import PackedImage, entry_section_range, first_section_range, library_range, load
from .isa import DecodeError, Instruction, Op, encode
from .machine import (
    CACHE_BASE, CACHE_END, MASK32, SP, ContinueRequest, Delivery, ExceptionCode,
    ExceptionRecord, Exit, Fault, Halted, MachineState, MemoryFault, Normal,
    RunReport, TraceEntry, apply_context, deliver_exception, fetch, run_reference,
    step, trace_name,
)
from .oep import DetectorState, OepHit, Strategy

ADLER_MOD = 65521
DEFAULT_FUEL = 10_000_000


def adler32(data: bytes) -> int:
    a, b = 1, 0
    for byte in data:
        a = (a + byte) % ADLER_MOD
        b = (b + a) % ADLER_MOD
    return b << 16 | a


class SelfModMethod(Enum):
    WRITE_RANGE = "write-check"
    ADLER32 = "adler32"


class CutReason(Enum):
    CONTROL_TRANSFER = "ControlTransfer"
    BREAKPOINT_CUT = "BreakpointCut"
    UNDECODABLE_GUARD = "UndecodableGuard"


class Verdict(str, Enum):
    OEP_FOUND = "OepFound"
    HALTED = "HaltedBeforeOep"
    FUEL_EXHAUSTED = "FuelExhausted"
    UNHANDLED = "UnhandledException"
    CACHE_OVERFLOW = "CacheOverflow"


class CacheOverflow(Exception):
    pass


@dataclass
class EngineConfig:
    selfmod_method: SelfModMethod = SelfModMethod.ADLER32
    oep_strategy: Strategy = Strategy.SECTION_RANGE
    oep_range: tuple[int, int] | None = None
    fuel: int = DEFAULT_FUEL
    # debug switches for negative tests
    fixups_enabled: bool = True
    original_returns: bool = True


@dataclass
class EngineStats:
    block_builds: int = 0
    transfers: int = 0
    selfmod_breaks: int = 0
    checksum_recomputes: int = 0
    writes_checked: int = 0
    exceptions_fixed: int = 0
    continues_intercepted: int = 0
    singlesteps_delivered: int = 0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BreakpointLedger:
    """Hardware breakpoints as last seen in a context passed to CONTINUE."""

    slots: list[tuple[int, bool]] = field(default_factory=lambda: [(0, False)] * 4)

    def record(self, bp, bctl: int) -> None:
        self.slots = [(bp[i] & MASK32, bool(bctl >> i & 1)) for i in range(4)]

    def is_enabled(self, addr: int) -> bool:
        return any(enabled and a == addr for a, enabled in self.slots)


# --- cached blocks -------------------------------------------------------

@dataclass(frozen=True)
class MapEntry:
    """One original instruction and the cache bytes that implement it."""

    orig_addr: int
    orig_len: int
    cache_addr: int
    cache_len: int
    instr: Instruction


class ExitKind(Enum):
    DIRECT = "direct"
    REGISTER = "register"
    RETURN = "return"
    GUARD = "guard"


@dataclass(frozen=True)
class ExitSpec:
    kind: ExitKind
    value: int
    index: int | None          # cache_map entry the exit belongs to
    adjust: int = 0
    pushed_return: int | None = None


@dataclass
class CachedBlock:
    orig_start: int
    orig_len: int
    cache_start: int
    cache_map: list[MapEntry]
    exits: dict[int, ExitSpec]
    code: bytes
    checksum: int
    contains_store: bool
    cut_reason: CutReason
    bp_addr: int | None = None

    @property
    def instr_addrs(self) -> list[int]:
        return [e.orig_addr for e in self.cache_map]

    def index_of(self, cache_addr: int) -> int | None:
        starts = [e.cache_addr for e in self.cache_map]
        i = bisect.bisect_right(starts, cache_addr) - 1
        if i < 0:
            return None
        e = self.cache_map[i]
        return i if cache_addr < e.cache_addr + e.cache_len else None

    def to_original(self, cache_addr: int) -> int | None:
        i = self.index_of(cache_addr)
        return None if i is None else self.cache_map[i].orig_addr


def _ins(op: Op, *operands: int, prefix: bool = False) -> bytes:
    return encode(Instruction(op, tuple(operands), prefix))


def build_block(state: MachineState, org_va: int, ledger: BreakpointLedger,
                cache_start: int = CACHE_BASE, original_returns: bool = True) -> CachedBlock:
    """Translate the basic block at ``org_va`` into cache code.

    The block ends after the first control transfer, right after an
    instruction sitting on an enabled ledger breakpoint, or in front of the
    first instruction that cannot be fetched.
    """
    code = bytearray()
    entries: list[MapEntry] = []
    exits: dict[int, ExitSpec] = {}
    cur = org_va & MASK32
    cut = CutReason.CONTROL_TRANSFER
    bp_addr = None

    while True:
        here = cache_start + len(code)
        try:
            instr = fetch(state, cur)
        except (MemoryFault, DecodeError):
            exits[here] = ExitSpec(ExitKind.GUARD, cur, None)
            code += _ins(Op.EXIT, cur)
            cut = CutReason.UNDECODABLE_GUARD
            break

        index = len(entries)
        nxt = (cur + instr.length) & MASK32
        op, o = instr.op, instr.operands
        if instr.has_bad_prefix or op in (Op.TRAP, Op.HALT, Op.CONTINUE):
            emitted = encode(instr)
        elif op is Op.EXIT:
            # guest EXIT must still fault as it would natively
            emitted = _ins(Op.EXIT, o[0], prefix=True)
        elif op is Op.JMP:
            exits[here] = ExitSpec(ExitKind.DIRECT, (nxt + o[0]) & MASK32, index)
            emitted = _ins(Op.EXIT, (nxt + o[0]) & MASK32)
        elif op in (Op.JZ, Op.JNZ):
            taken = (nxt + o[0]) & MASK32
            exits[here + 5] = ExitSpec(ExitKind.DIRECT, nxt, index)
            exits[here + 10] = ExitSpec(ExitKind.DIRECT, taken, index)
            emitted = _ins(op, 5) + _ins(Op.EXIT, nxt) + _ins(Op.EXIT, taken)
        elif op is Op.JMPR:
            exits[here] = ExitSpec(ExitKind.REGISTER, o[0], index)
            emitted = _ins(Op.EXIT, o[0])
        elif op in (Op.CALL, Op.CALLR):
            ret = nxt if original_returns else here + 10
            if op is Op.CALL:
                target = (nxt + o[0]) & MASK32
                exits[here + 5] = ExitSpec(ExitKind.DIRECT, target, index, pushed_return=ret)
                emitted = _ins(Op.PUSHI, ret) + _ins(Op.EXIT, target)
            else:
                # the push already moved SP when the exit reads it
                adjust = 4 if o[0] == SP else 0
                exits[here + 5] = ExitSpec(ExitKind.REGISTER, o[0], index, adjust, pushed_return=ret)
                emitted = _ins(Op.PUSHI, ret) + _ins(Op.EXIT, o[0])
        elif op is Op.RET:
            exits[here] = ExitSpec(ExitKind.RETURN, 0, index)
            emitted = _ins(Op.EXIT, 0)
        else:
            emitted = encode(instr)

        on_bp = ledger.is_enabled(cur)
        if on_bp:
            bp_addr = cur
            if not instr.is_control_transfer:
                exits[here + len(emitted)] = ExitSpec(ExitKind.DIRECT, nxt, index)
                emitted += _ins(Op.EXIT, nxt)
                cut = CutReason.BREAKPOINT_CUT

        entries.append(MapEntry(cur, instr.length, here, len(emitted), instr))
        code += emitted
        if cache_start + len(code) > CACHE_END:
            raise CacheOverflow(f"block at 0x{org_va:08X} exceeds the cache region")
        cur = nxt
        if instr.is_control_transfer or on_bp:
            break

    orig_len = sum(e.orig_len for e in entries)
    original = state.mem.read(org_va, orig_len) if orig_len else b""
    return CachedBlock(
        orig_start=org_va & MASK32,
        orig_len=orig_len,
        cache_start=cache_start,
        cache_map=entries,
        exits=exits,
        code=bytes(code),
        checksum=adler32(original),
        contains_store=any(e.instr.op is Op.STORE for e in entries),
        cut_reason=cut,
        bp_addr=bp_addr,
    )


# --- block exits ---------------------------------------------------------

@dataclass(frozen=True)
class Transfer:
    target: int
    source: int | None
    pushed_return: int | None = None
    retired_last: bool = True


@dataclass(frozen=True)
class SelfModBreak:
    resume: int
    source: int
    retired_last: bool


@dataclass(frozen=True)
class GuestFault:
    record: ExceptionRecord
    translated: bool


@dataclass(frozen=True)
class ContinueIntercepted:
    context_addr: int
    source: int


@dataclass(frozen=True)
class BlockHalted:
    pass


@dataclass(frozen=True)
class OutOfFuel:
    pass


BlockExit = Transfer | SelfModBreak | GuestFault | ContinueIntercepted | BlockHalted | OutOfFuel


def check_selfmod(block: CachedBlock, target: tuple[int, int], method: SelfModMethod,
                  state: MachineState, stats: EngineStats) -> bool:
    """True (dirty) when the store at ``target`` invalidated the cached block."""
    stats.writes_checked += 1
    if method is SelfModMethod.WRITE_RANGE:
        addr, width = target
        return addr < block.orig_start + block.orig_len and addr + width > block.orig_start
    stats.checksum_recomputes += 1
    return adler32(state.mem.read(block.orig_start, block.orig_len)) != block.checksum


class Engine:
    """One unpacking session over a single machine state."""

    def __init__(self, state: MachineState, config: EngineConfig, detector: DetectorState,
                 on_exit: Callable[[MachineState, int, BlockExit], None] | None = None):
        self.state = state
        self.config = config
        self.detector = detector
        self.ledger = BreakpointLedger()
        self.stats = EngineStats()
        self.trace: list[TraceEntry] = []
        self.delivered: list[ExceptionRecord] = []
        self.block: CachedBlock | None = None
        self.on_exit = on_exit
        state.cache_region = (CACHE_BASE, CACHE_END)

    # -- cache slot --

    def install(self, block: CachedBlock) -> None:
        mem = self.state.mem
        old = self.block
        if old is not None and len(old.code) > len(block.code):
            mem.write(old.cache_start, bytes(len(old.code)))
        mem.map(block.cache_start, len(block.code))
        mem.write(block.cache_start, block.code)
        self.block = block

    # -- execution --

    def execute_block(self, block: CachedBlock) -> BlockExit:
        state, config = self.state, self.config
        starts = {e.cache_addr: i for i, e in enumerate(block.cache_map)}
        last = len(block.cache_map) - 1
        state.pc = block.cache_start
        while True:
            pc = state.pc
            i = starts.get(pc)
            if i is not None:
                if len(self.trace) >= config.fuel:
                    state.pc = block.cache_map[i].orig_addr
                    return OutOfFuel()
                entry = block.cache_map[i]
                self.trace.append((entry.orig_addr, entry.instr.mnemonic))
            else:
                i = block.index_of(pc)
            outcome = step(state, in_cache=True)

            if isinstance(outcome, Normal):
                if state.last_write is not None:
                    self.detector.on_write(*state.last_write)
                    entry = block.cache_map[i]
                    if entry.instr.op is Op.STORE and check_selfmod(
                            block, state.last_write, config.selfmod_method, state, self.stats):
                        resume = (entry.orig_addr + entry.orig_len) & MASK32
                        state.pc = resume
                        return SelfModBreak(resume, entry.orig_addr, i == last)
                continue
            if isinstance(outcome, Exit):
                return self._resolve_exit(block, block.exits[pc])
            source = block.cache_map[i].orig_addr
            if isinstance(outcome, Fault):
                rec = outcome.record
                if config.fixups_enabled:
                    rec = ExceptionRecord(rec.code, source, rec.info)
                    state.pc = source
                return GuestFault(rec, config.fixups_enabled)
            state.pc = source
            if isinstance(outcome, ContinueRequest):
                return ContinueIntercepted(outcome.context_addr, source)
            if isinstance(outcome, Halted):
                return BlockHalted()
            raise AssertionError(f"unexpected outcome {outcome!r}")

    def _resolve_exit(self, block: CachedBlock, spec: ExitSpec) -> BlockExit:
        state = self.state
        if spec.kind is ExitKind.GUARD:
            return self._guard(spec.value, block)
        source = block.cache_map[spec.index].orig_addr
        if spec.kind is ExitKind.DIRECT:
            target = spec.value
        elif spec.kind is ExitKind.REGISTER:
            target = (state.regs[spec.value] + spec.adjust) & MASK32
        else:
            try:
                target = state.pop()
            except MemoryFault as exc:
                state.pc = source
                rec = ExceptionRecord(ExceptionCode.ACCESS_VIOLATION, source, exc.addr)
                return GuestFault(rec, True)
        state.pc = target
        return Transfer(target, source, spec.pushed_return)

    def _guard(self, addr: int, block: CachedBlock) -> BlockExit:
        """Reached an instruction the builder could not fetch."""
        state = self.state
        state.pc = addr
        source = block.cache_map[-1].orig_addr if block.cache_map else None
        try:
            fetch(state, addr)
        except (MemoryFault, DecodeError):
            pass
        else:
            # an earlier store in this block made it readable
            return Transfer(addr, source, retired_last=False)
        if len(self.trace) >= self.config.fuel:
            return OutOfFuel()
        outcome = step(state)
        self.trace.append((addr, trace_name(state.last_instr)))
        assert isinstance(outcome, Fault), outcome
        return GuestFault(outcome.record, False)

    # -- dispatchers --

    def on_guest_fault(self, rec: ExceptionRecord) -> int | None:
        """Deliver a guest exception; returns the handler address or None if unhandled."""
        self.delivered.append(rec)
        if deliver_exception(self.state, rec) is Delivery.UNHANDLED:
            return None
        return self.state.pc

    def on_continue(self, ctx_addr: int) -> int:
        """Apply a guest context but keep control; returns the original resume pc."""
        ctx = apply_context(self.state, ctx_addr)
        self.ledger.record(ctx.bp, ctx.bctl)
        self.stats.continues_intercepted += 1
        return self.state.pc

    def run(self, entry: int) -> tuple[Verdict, OepHit | None]:
        state, stats = self.state, self.stats
        pending: tuple[int, int | None, int | None] = (entry, None, None)
        while True:
            target, source, pushed = pending
            stats.transfers += 1
            hit = self.detector.on_transfer(target, source, state, pushed)
            if hit is not None:
                return Verdict.OEP_FOUND, hit
            try:
                block = build_block(state, target, self.ledger,
                                    original_returns=self.config.original_returns)
            except CacheOverflow:
                return Verdict.CACHE_OVERFLOW, None
            stats.block_builds += 1
            self.install(block)
            result = self.execute_block(block)
            if self.on_exit is not None:
                self.on_exit(state, len(self.trace), result)

            singlestep = block.bp_addr is not None and getattr(result, "retired_last", False)
            if isinstance(result, Transfer):
                pending = (result.target, result.source, result.pushed_return)
            elif isinstance(result, SelfModBreak):
                stats.selfmod_breaks += 1
                pending = (result.resume, result.source, None)
            elif isinstance(result, GuestFault):
                if result.translated:
                    stats.exceptions_fixed += 1
                handler = self.on_guest_fault(result.record)
                if handler is None:
                    return Verdict.UNHANDLED, None
                pending = (handler, result.record.address, None)
            elif isinstance(result, ContinueIntercepted):
                try:
                    resume = self.on_continue(result.context_addr)
                except MemoryFault as exc:
                    rec = ExceptionRecord(ExceptionCode.ACCESS_VIOLATION, result.source, exc.addr)
                    handler = self.on_guest_fault(rec)
                    if handler is None:
                        return Verdict.UNHANDLED, None
                    resume = handler
                pending = (resume, result.source, None)
            elif isinstance(result, BlockHalted):
                return Verdict.HALTED, None
            else:
                return Verdict.FUEL_EXHAUSTED, None

            if singlestep:
                # the breakpointed instruction retired: trap with its original address
                rec = ExceptionRecord(ExceptionCode.SINGLE_STEP, block.bp_addr)
                stats.singlesteps_delivered += 1
                handler = self.on_guest_fault(rec)
                if handler is None:
                    return Verdict.UNHANDLED, None
                pending = (handler, block.bp_addr, None)


@dataclass
class UnpackReport:
    oep: int | None
    verdict: Verdict
    stats: EngineStats
    trace: list[TraceEntry]
    candidate: bool = False
    delivered: list[ExceptionRecord] = field(default_factory=list)
    state: MachineState | None = None
    resumed: RunReport | None = None

    @property
    def success(self) -> bool:
        return self.verdict == Verdict.OEP_FOUND


def make_detector(image: PackedImage, config: EngineConfig) -> DetectorState:
    return DetectorState(
        strategy=config.oep_strategy,
        range=config.oep_range or first_section_range(image),
        lib_range=library_range(),
        stub_ignore_range=entry_section_range(image),
    )


def run_unpack(image: PackedImage, config: EngineConfig | None = None,
               on_exit: Callable[[MachineState, int, BlockExit], None] | None = None) -> UnpackReport:
    """Run the loader stub under instrumentation until the OEP detector fires.

    Execution stops before the OEP block runs; ``state.pc`` is the OEP.
    """
    config = config or EngineConfig()
    state = load(image)
    engine = Engine(state, config, make_detector(image, config), on_exit)
    started = time.perf_counter()
    verdict, hit = engine.run(image.entry)
    engine.stats.wall_time = time.perf_counter() - started
    return UnpackReport(
        oep=hit.address if hit else None,
        verdict=verdict,
        stats=engine.stats,
        trace=engine.trace,
        candidate=bool(hit and hit.candidate),
        delivered=engine.delivered,
        state=state,
    )


def resume_native(report: UnpackReport, fuel: int = DEFAULT_FUEL) -> RunReport:
    """Continue a stopped session uninstrumented, appending to its trace."""
    if report.state is None or not report.success:
        raise ValueError("nothing to resume")
    budget = max(fuel - len(report.trace), 1)
    report.resumed = run_reference(report.state, budget, trace=report.trace)
    return report.resumed
