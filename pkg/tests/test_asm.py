from __future__ import annotations

import pytest

from bopunpack.asm import Assembler, At
from bopunpack.isa import Instruction, Op, decode


def test_forward_and_backward_labels():
    a = Assembler(0x1000)
    a.label("top")
    a.ins(Op.JMP, a.ref("end"))
    a.ins(Op.JNZ, a.ref("top"))
    a.label("end")
    a.ins(Op.MOV_RI, 1, a.ref("top"))
    code = a.assemble()
    assert decode(code) == Instruction(Op.JMP, (5,))
    assert decode(code[5:]) == Instruction(Op.JNZ, (-10,))
    assert decode(code[10:]) == Instruction(Op.MOV_RI, (1, 0x1000))


def test_absolute_target_call():
    a = Assembler(0x1000)
    a.ins(Op.CALL, At(0x700020))
    assert decode(a.assemble()).operands == (0x700020 - 0x1005,)


def test_words_and_alignment():
    a = Assembler(0x1000)
    a.raw(b"\x52")
    a.align(4)
    a.label("w")
    a.word(a.ref("w"))
    assert a.assemble() == b"\x52\0\0\0" + (0x1004).to_bytes(4, "little")


def test_prefixed_emission_length():
    a = Assembler(0)
    assert a.ins(Op.JMP, 0, prefix=True) == 0
    assert a.pc == 6


def test_duplicate_label():
    a = Assembler(0)
    a.label("x")
    with pytest.raises(ValueError):
        a.label("x")
