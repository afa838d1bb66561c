"""Original-entry-point detectors fed by the DBI dispatcher."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .machine import MemoryFault, MachineState

__all__ = ["Strategy", "OepHit", "DetectorState"]


class Strategy(Enum):
    SECTION_RANGE = "range"
    WRITTEN_THEN_EXECUTED = "wx"
    FIRST_LIBRARY_CALL = "api"


@dataclass(frozen=True)
class OepHit:
    address: int
    # library-call hits are only a hint for manual analysis
    candidate: bool = False


@dataclass
class DetectorState:
    strategy: Strategy
    range: tuple[int, int] = (0, 0)
    lib_range: tuple[int, int] = (0, 0)
    stub_ignore_range: tuple[int, int] | None = None
    dirty_set: set[int] = field(default_factory=set)
    fired: OepHit | None = None

    def on_write(self, addr: int, width: int) -> None:
        if self.strategy is Strategy.WRITTEN_THEN_EXECUTED:
            self.dirty_set.update(range(addr, addr + width))

    def on_transfer(self, target: int, source: int | None, state: MachineState,
                    pushed_return: int | None = None) -> OepHit | None:
        """Inspect one dispatcher transfer; returns the hit the first time one fires.

        ``source`` is the original address of the instruction that caused
        the transfer (None for the initial entry); ``pushed_return`` is the
        return address it pushed when it was a call.
        """
        if self.fired is not None:
            return None
        hit = None
        if self.strategy is Strategy.SECTION_RANGE:
            if self._in_range(target):
                hit = OepHit(target)
        elif self.strategy is Strategy.WRITTEN_THEN_EXECUTED:
            if target in self.dirty_set:
                hit = OepHit(target)
        else:
            hit = self._library_call(target, source, state, pushed_return)
        self.fired = hit
        return hit

    def _in_range(self, addr: int) -> bool:
        lo, hi = self.range
        return lo <= addr < hi

    def _library_call(self, target: int, source: int | None, state: MachineState,
                      pushed_return: int | None) -> OepHit | None:
        lo, hi = self.lib_range
        if not lo <= target < hi or source is None:
            return None
        if self.stub_ignore_range is not None and not self._in_range(source):
            # the loader stub's own API use is not the program's
            ilo, ihi = self.stub_ignore_range
            if ilo <= source < ihi:
                return None
        try:
            ret = state.mem.read_u32(state.sp)
        except MemoryFault:
            return None
        # a direct call sits right before its return address; report the call site
        if pushed_return is not None and pushed_return == ret:
            return OepHit(source, candidate=True)
        return OepHit(ret, candidate=True)
