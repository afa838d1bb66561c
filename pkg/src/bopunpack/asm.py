"""Tiny label-resolving assembler for building BOP-32 code in Python."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .isa import Instruction, Op, encode

__all__ = ["Assembler", "Label", "At"]


@dataclass(frozen=True)
class Label:
    name: str


@dataclass(frozen=True)
class At:
    """A fixed absolute address usable wherever a label is."""

    addr: int


@dataclass
class _Item:
    addr: int
    op: Op | None
    operands: tuple
    prefix: bool = False
    raw: bytes = b""
    word: object = None


@dataclass
class Assembler:
    """Accumulates instructions at increasing addresses starting at ``base``.

    Operands may be :class:`Label` or :class:`At` objects; they resolve to
    the address (absolute for ``imm32``, relative for ``rel32`` branches).
    Instruction lengths are fixed, so forward references need no relaxation.
    """

    base: int
    _items: list[_Item] = field(default_factory=list)
    _labels: dict[str, int] = field(default_factory=dict)
    _pc: int = -1

    def __post_init__(self) -> None:
        self._pc = self.base

    @property
    def pc(self) -> int:
        return self._pc

    def label(self, name: str) -> Label:
        if name in self._labels:
            raise ValueError(f"duplicate label {name!r}")
        self._labels[name] = self._pc
        return Label(name)

    def ref(self, name: str) -> Label:
        return Label(name)

    def addr(self, name: str) -> int:
        return self._labels[name]

    def ins(self, op: Op, *operands, prefix: bool = False) -> int:
        """Emit one instruction; returns its address."""
        at = self._pc
        length = Instruction(op, (), prefix).length
        self._items.append(_Item(at, op, operands, prefix))
        self._pc += length
        return at

    def raw(self, data: bytes) -> int:
        at = self._pc
        self._items.append(_Item(at, None, (), raw=bytes(data)))
        self._pc += len(data)
        return at

    def word(self, value) -> int:
        at = self._pc
        self._items.append(_Item(at, None, (), word=value))
        self._pc += 4
        return at

    def align(self, n: int, fill: int = 0) -> None:
        pad = -(self._pc - self.base) % n
        if pad:
            self.raw(bytes([fill]) * pad)

    def _resolve(self, value, item: _Item, relative: bool) -> int:
        if isinstance(value, At):
            target = value.addr
        elif isinstance(value, Label):
            target = self._labels[value.name]
        else:
            return value
        if relative:
            length = Instruction(item.op, (), item.prefix).length
            return target - (item.addr + length)
        return target

    def assemble(self) -> bytes:
        out = bytearray()
        for item in self._items:
            if item.op is None:
                if item.word is not None:
                    out += struct.pack("<I", self._resolve(item.word, item, False) & 0xFFFF_FFFF)
                else:
                    out += item.raw
                continue
            relative = item.op in (Op.JMP, Op.JZ, Op.JNZ, Op.CALL)
            operands = tuple(self._resolve(v, item, relative) for v in item.operands)
            out += encode(Instruction(item.op, operands, item.prefix))
        return bytes(out)
