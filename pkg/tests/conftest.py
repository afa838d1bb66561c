from __future__ import annotations

from pathlib import Path

import pytest

from bopunpack.asm import Assembler
from bopunpack.machine import (
    PAGE_SIZE, SEH_HEAD, SP, STACK_BOTTOM_CELL, STACK_TOP_CELL, MachineState,
)
from bopunpack.packers import corpus, make_payload

GOLDEN = Path(__file__).parent / "golden"
STACK_TOP = 0x0010_0000
STACK_BOTTOM = STACK_TOP - 0x10000


def bare_machine(code: bytes = b"", at: int = 0x2000) -> MachineState:
    """A machine with ``code`` mapped at ``at``, a stack and the TIB cells; no image."""
    state = MachineState()
    state.mem.map(0, PAGE_SIZE)
    state.mem.write_u32(SEH_HEAD, 0)
    state.mem.write_u32(STACK_TOP_CELL, STACK_TOP)
    state.mem.write_u32(STACK_BOTTOM_CELL, STACK_BOTTOM)
    state.mem.map(STACK_BOTTOM, STACK_TOP - STACK_BOTTOM)
    state.regs[SP] = STACK_TOP
    state.mem.map(at & ~(PAGE_SIZE - 1), PAGE_SIZE)
    state.mem.write(at, code)
    state.pc = at
    return state


def asm(at: int = 0x2000) -> Assembler:
    return Assembler(at)


@pytest.fixture(scope="session")
def samples():
    return corpus()


@pytest.fixture(scope="session")
def payload():
    return make_payload()
