"""BOP-32 instruction set and its byte encoding.

Every instruction is ``[opcode][operands...]`` with little-endian
immediates. Relative branches are relative to the address of the next
instruction. A single optional ``0xF0`` prefix may precede any opcode;
executing a prefixed instruction raises InvalidOpcode.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum, IntEnum

__all__ = [
    "Op", "Layout", "OpDef", "TABLE", "BY_OPCODE", "PREFIX", "MAX_LENGTH",
    "CONTROL_TRANSFER", "Instruction",
    "DecodeError", "UnknownOpcode", "TruncatedInstruction", "InvalidEncoding",
    "InvalidOperand", "decode", "encode",
]

PREFIX = 0xF0
MASK32 = 0xFFFF_FFFF


class Op(IntEnum):
    """Mnemonics; the value is the opcode byte."""

    MOV_RI = 0x10
    MOV_RR = 0x11
    LOAD = 0x12
    STORE = 0x13
    ADD_RI = 0x20
    ADD_RR = 0x21
    SUB_RI = 0x22
    SUB_RR = 0x23
    XOR_RI = 0x24
    XOR_RR = 0x25
    CMP_RI = 0x26
    PUSH = 0x30
    POP = 0x31
    PUSHI = 0x32
    JMP = 0x40
    JZ = 0x41
    JNZ = 0x42
    JMPR = 0x43
    CALL = 0x44
    CALLR = 0x45
    RET = 0x46
    TRAP = 0x50
    CONTINUE = 0x51
    HALT = 0x52
    EXIT = 0x5F


class Layout(Enum):
    NONE = "none"          # [op]
    R = "r"                # [op][r]
    R_IMM = "r,imm32"      # [op][r][imm32]
    R_R = "r,r"            # [op][dst<<4|src]
    R_MEM = "r,[r+disp]"   # [op][dst<<4|base][disp32][0]   (LOAD)
    MEM_R = "[r+disp],r"   # [op][base<<4|src][disp32][0]   (STORE)
    IMM = "imm32"          # [op][imm32]
    REL = "rel32"          # [op][rel32]
    IMM8 = "imm8"          # [op][imm8]


_LENGTHS = {
    Layout.NONE: 1, Layout.R: 2, Layout.R_IMM: 6, Layout.R_R: 2,
    Layout.R_MEM: 7, Layout.MEM_R: 7, Layout.IMM: 5, Layout.REL: 5,
    Layout.IMM8: 2,
}


@dataclass(frozen=True, slots=True)
class OpDef:
    op: Op
    layout: Layout

    @property
    def length(self) -> int:
        return _LENGTHS[self.layout]


TABLE: tuple[OpDef, ...] = (
    OpDef(Op.MOV_RI, Layout.R_IMM),
    OpDef(Op.MOV_RR, Layout.R_R),
    OpDef(Op.LOAD, Layout.R_MEM),
    OpDef(Op.STORE, Layout.MEM_R),
    OpDef(Op.ADD_RI, Layout.R_IMM),
    OpDef(Op.ADD_RR, Layout.R_R),
    OpDef(Op.SUB_RI, Layout.R_IMM),
    OpDef(Op.SUB_RR, Layout.R_R),
    OpDef(Op.XOR_RI, Layout.R_IMM),
    OpDef(Op.XOR_RR, Layout.R_R),
    OpDef(Op.CMP_RI, Layout.R_IMM),
    OpDef(Op.PUSH, Layout.R),
    OpDef(Op.POP, Layout.R),
    OpDef(Op.PUSHI, Layout.IMM),
    OpDef(Op.JMP, Layout.REL),
    OpDef(Op.JZ, Layout.REL),
    OpDef(Op.JNZ, Layout.REL),
    OpDef(Op.JMPR, Layout.R),
    OpDef(Op.CALL, Layout.REL),
    OpDef(Op.CALLR, Layout.R),
    OpDef(Op.RET, Layout.NONE),
    OpDef(Op.TRAP, Layout.IMM8),
    OpDef(Op.CONTINUE, Layout.NONE),
    OpDef(Op.HALT, Layout.NONE),
    OpDef(Op.EXIT, Layout.IMM),
)

BY_OPCODE: dict[int, OpDef] = {d.op.value: d for d in TABLE}
MAX_LENGTH = 1 + max(d.length for d in TABLE)

CONTROL_TRANSFER = frozenset({
    Op.JMP, Op.JZ, Op.JNZ, Op.JMPR, Op.CALL, Op.CALLR, Op.RET,
    Op.TRAP, Op.CONTINUE, Op.HALT, Op.EXIT,
})

# Assembler-style names used in listings and traces.
_TEXT_NAME = {
    Op.MOV_RI: "MOV", Op.MOV_RR: "MOV", Op.ADD_RI: "ADD", Op.ADD_RR: "ADD",
    Op.SUB_RI: "SUB", Op.SUB_RR: "SUB", Op.XOR_RI: "XOR", Op.XOR_RR: "XOR",
    Op.CMP_RI: "CMP",
}


class DecodeError(Exception):
    """Guest memory at ``addr`` does not hold a decodable instruction."""

    def __init__(self, msg: str, addr: int = 0):
        super().__init__(f"{msg} at 0x{addr:08X}")
        self.addr = addr


class UnknownOpcode(DecodeError):
    pass


class TruncatedInstruction(DecodeError):
    pass


class InvalidEncoding(DecodeError):
    """Opcode is known but a register field is out of range."""


class InvalidOperand(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class Instruction:
    """A decoded instruction.

    ``operands`` follows the layout order: registers as ints 0-7, ``imm32``
    unsigned, ``rel32``/``disp32`` signed, ``imm8`` unsigned.
    """

    op: Op
    operands: tuple[int, ...] = ()
    has_bad_prefix: bool = False

    @property
    def length(self) -> int:
        return BY_OPCODE[self.op].length + (1 if self.has_bad_prefix else 0)

    @property
    def is_control_transfer(self) -> bool:
        return self.op in CONTROL_TRANSFER

    @property
    def mnemonic(self) -> str:
        """Trace name, e.g. ``MOV_RI`` or ``LOCK.JMP`` for prefixed forms."""
        name = self.op.name
        return f"LOCK.{name}" if self.has_bad_prefix else name

    def __str__(self) -> str:
        layout = BY_OPCODE[self.op].layout
        o = self.operands
        name = _TEXT_NAME.get(self.op, self.op.name)
        if layout is Layout.NONE:
            args = ""
        elif layout is Layout.R:
            args = f"R{o[0]}"
        elif layout is Layout.R_IMM:
            args = f"R{o[0]}, 0x{o[1]:08X}"
        elif layout is Layout.R_R:
            args = f"R{o[0]}, R{o[1]}"
        elif layout is Layout.R_MEM:
            args = f"R{o[0]}, [R{o[1]}{o[2]:+#x}]"
        elif layout is Layout.MEM_R:
            args = f"[R{o[0]}{o[1]:+#x}], R{o[2]}"
        elif layout is Layout.IMM:
            args = f"0x{o[0]:08X}"
        elif layout is Layout.REL:
            args = f"rel {o[0]:+#x}"
        else:
            args = f"0x{o[0]:02X}"
        text = f"{name} {args}".rstrip()
        return f"LOCK {text}" if self.has_bad_prefix else text


def _reg(value: int, addr: int) -> int:
    if value > 7:
        raise InvalidEncoding(f"register index {value}", addr)
    return value


def decode(data: bytes, addr: int = 0) -> Instruction:
    """Decode the instruction whose encoding starts at ``data[0]``.

    ``addr`` is only used in error messages.
    """
    if not data:
        raise TruncatedInstruction("empty input", addr)
    prefixed = data[0] == PREFIX
    body = data[1:] if prefixed else data
    if not body:
        raise TruncatedInstruction("prefix without opcode", addr)
    opdef = BY_OPCODE.get(body[0])
    if opdef is None:
        raise UnknownOpcode(f"unknown opcode 0x{body[0]:02X}", addr)
    if len(body) < opdef.length:
        raise TruncatedInstruction(f"{opdef.op.name} needs {opdef.length} bytes", addr)

    layout = opdef.layout
    if layout is Layout.NONE:
        operands: tuple[int, ...] = ()
    elif layout is Layout.R:
        operands = (_reg(body[1], addr),)
    elif layout is Layout.R_IMM:
        operands = (_reg(body[1], addr), struct.unpack_from("<I", body, 2)[0])
    elif layout is Layout.R_R:
        operands = (_reg(body[1] >> 4, addr), _reg(body[1] & 0xF, addr))
    elif layout in (Layout.R_MEM, Layout.MEM_R):
        first, second = _reg(body[1] >> 4, addr), _reg(body[1] & 0xF, addr)
        disp = struct.unpack_from("<i", body, 2)[0]
        if body[6]:
            raise InvalidEncoding(f"nonzero reserved byte 0x{body[6]:02X}", addr)
        operands = (first, second, disp) if layout is Layout.R_MEM else (first, disp, second)
    elif layout is Layout.IMM:
        operands = (struct.unpack_from("<I", body, 1)[0],)
    elif layout is Layout.REL:
        operands = (struct.unpack_from("<i", body, 1)[0],)
    else:
        operands = (body[1],)
    return Instruction(opdef.op, operands, prefixed)


def _check_reg(value: int) -> int:
    if not 0 <= value <= 7:
        raise InvalidOperand(f"register index {value} out of range")
    return value


def _check_u32(value: int) -> int:
    if not 0 <= value <= MASK32:
        raise InvalidOperand(f"imm32 {value:#x} out of range")
    return value


def _check_s32(value: int) -> int:
    if not -0x8000_0000 <= value <= 0x7FFF_FFFF:
        raise InvalidOperand(f"rel/disp32 {value:#x} out of range")
    return value


_ARITY = {
    Layout.NONE: 0, Layout.R: 1, Layout.R_IMM: 2, Layout.R_R: 2,
    Layout.R_MEM: 3, Layout.MEM_R: 3, Layout.IMM: 1, Layout.REL: 1, Layout.IMM8: 1,
}


def encode(instr: Instruction) -> bytes:
    opdef = BY_OPCODE[instr.op]
    layout = opdef.layout
    o = instr.operands
    if len(o) != _ARITY[layout]:
        raise InvalidOperand(f"{instr.op.name} takes {_ARITY[layout]} operands, got {len(o)}")

    op = bytes([opdef.op.value])
    if layout is Layout.NONE:
        body = op
    elif layout is Layout.R:
        body = op + bytes([_check_reg(o[0])])
    elif layout is Layout.R_IMM:
        body = op + bytes([_check_reg(o[0])]) + struct.pack("<I", _check_u32(o[1]))
    elif layout is Layout.R_R:
        body = op + bytes([_check_reg(o[0]) << 4 | _check_reg(o[1])])
    elif layout is Layout.R_MEM:
        body = op + bytes([_check_reg(o[0]) << 4 | _check_reg(o[1])]) + struct.pack("<i", _check_s32(o[2])) + b"\0"
    elif layout is Layout.MEM_R:
        body = op + bytes([_check_reg(o[0]) << 4 | _check_reg(o[2])]) + struct.pack("<i", _check_s32(o[1])) + b"\0"
    elif layout is Layout.IMM:
        body = op + struct.pack("<I", _check_u32(o[0]))
    elif layout is Layout.REL:
        body = op + struct.pack("<i", _check_s32(o[0]))
    else:
        if not 0 <= o[0] <= 0xFF:
            raise InvalidOperand(f"imm8 {o[0]:#x} out of range")
        body = op + bytes([o[0]])
    return bytes([PREFIX]) + body if instr.has_bad_prefix else body
