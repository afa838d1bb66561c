"""The BOPX executable container and its loader.

Layout (little-endian)::

    "BOPX" | version u16 | section_count u16 | entry u32 | stack_top u32
    section_count x { name[8] | va u32 | file_off u32 | file_size u32 | mem_size u32 | flags u32 }
    raw bytes (section file_off values are absolute file offsets)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

from .machine import (
    CACHE_BASE, CACHE_END, LIB_BASE, LIB_SIZE, LIB_STUB_SPACING, MASK32, PAGE_SIZE,
    SEH_HEAD, SP, STACK_BOTTOM_CELL, STACK_TOP_CELL, MachineState, Memory,
)
from .isa import Op

MAGIC = b"BOPX"
VERSION = 1
HEADER = struct.Struct("<4sHHII")
SECTION = struct.Struct("<8sIIIII")
STACK_SIZE = 0x10000
DEFAULT_STACK_TOP = 0x0010_0000

FLAG_FIRST = 1


class MalformedImage(ValueError):
    pass


@dataclass(frozen=True)
class Section:
    name: bytes
    va: int
    file_off: int
    file_size: int
    mem_size: int
    flags: int = 0

    @property
    def end(self) -> int:
        return self.va + self.mem_size

    @property
    def label(self) -> str:
        return self.name.rstrip(b"\0").decode("ascii", "replace")

    def contains(self, addr: int) -> bool:
        return self.va <= addr < self.end


@dataclass
class PackedImage:
    entry: int
    sections: list[Section]
    raw: bytes
    stack_top: int = DEFAULT_STACK_TOP
    version: int = VERSION

    def section_bytes(self, sec: Section) -> bytes:
        return self.raw[sec.file_off:sec.file_off + sec.file_size]

    def section_at(self, addr: int) -> Section | None:
        return next((s for s in self.sections if s.contains(addr)), None)

    def to_bytes(self) -> bytes:
        return self.raw

    @classmethod
    def from_bytes(cls, data: bytes) -> PackedImage:
        return parse(data)


@dataclass
class SectionSpec:
    """Input to :func:`build`: contents placed at ``va``."""

    name: str
    va: int
    data: bytes
    mem_size: int = 0
    flags: int = 0


def build(entry: int, specs: list[SectionSpec], stack_top: int = DEFAULT_STACK_TOP) -> PackedImage:
    """Lay out sections into a serialized image."""
    header_len = HEADER.size + SECTION.size * len(specs)
    sections = []
    body = bytearray()
    for spec in specs:
        name = spec.name.encode("ascii")
        if len(name) > 8:
            raise MalformedImage(f"section name too long: {spec.name!r}")
        mem_size = spec.mem_size or len(spec.data)
        sections.append(Section(name.ljust(8, b"\0"), spec.va, header_len + len(body),
                                len(spec.data), mem_size, spec.flags))
        body += spec.data
    raw = HEADER.pack(MAGIC, VERSION, len(sections), entry, stack_top)
    raw += b"".join(SECTION.pack(s.name, s.va, s.file_off, s.file_size, s.mem_size, s.flags)
                    for s in sections)
    raw += body
    return parse(raw)


_RESERVED = (
    (0, PAGE_SIZE, "TIB page"),
    (LIB_BASE, LIB_BASE + LIB_SIZE, "library region"),
    (CACHE_BASE, CACHE_END, "cache region"),
)


def parse(data: bytes) -> PackedImage:
    if len(data) < HEADER.size:
        raise MalformedImage("file shorter than header")
    magic, version, count, entry, stack_top = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise MalformedImage(f"bad magic {magic!r}")
    if version != VERSION:
        raise MalformedImage(f"unsupported version {version}")
    if count == 0:
        raise MalformedImage("image has no sections")
    if len(data) < HEADER.size + SECTION.size * count:
        raise MalformedImage("truncated section table")
    sections = [Section(*SECTION.unpack_from(data, HEADER.size + i * SECTION.size))
                for i in range(count)]
    image = PackedImage(entry, sections, bytes(data), stack_top, version)
    validate(image)
    return image


def validate(image: PackedImage) -> None:
    stack = (image.stack_top - STACK_SIZE, image.stack_top)
    if image.stack_top & 3 or stack[0] < PAGE_SIZE or image.stack_top > 1 << 32:
        raise MalformedImage(f"bad stack_top 0x{image.stack_top:08X}")
    spans = []
    for sec in image.sections:
        if sec.mem_size < sec.file_size:
            raise MalformedImage(f"{sec.label}: mem_size < file_size")
        if sec.va + sec.mem_size > 1 << 32:
            raise MalformedImage(f"{sec.label}: wraps the address space")
        if sec.file_off + sec.file_size > len(image.raw):
            raise MalformedImage(f"{sec.label}: file data past end of file")
        for lo, hi, what in (*_RESERVED, (*stack, "stack")):
            if sec.va < hi and sec.end > lo:
                raise MalformedImage(f"{sec.label}: overlaps the {what}")
        spans.append((sec.va, sec.end, sec.label))
    spans.sort()
    for (_, end_a, a), (start_b, _, b) in zip(spans, spans[1:]):
        if start_b < end_a:
            raise MalformedImage(f"sections {a} and {b} overlap")
    if image.section_at(image.entry) is None:
        raise MalformedImage(f"entry 0x{image.entry:08X} outside every section")


def load(image: PackedImage) -> MachineState:
    """Map the image into a fresh machine ready to run at the entry point."""
    validate(image)
    mem = Memory()
    for sec in image.sections:
        mem.map(sec.va, sec.mem_size)
        mem.write(sec.va, image.section_bytes(sec).ljust(sec.mem_size, b"\0"))
    top = image.stack_top
    mem.map(top - STACK_SIZE, STACK_SIZE)
    mem.map(0, PAGE_SIZE)
    mem.write_u32(SEH_HEAD, 0)
    mem.write_u32(STACK_TOP_CELL, top)
    mem.write_u32(STACK_BOTTOM_CELL, top - STACK_SIZE)
    mem.map(LIB_BASE, LIB_SIZE)
    mem.write(LIB_BASE, library_bytes())
    state = MachineState(mem)
    state.regs[SP] = top & MASK32
    state.pc = image.entry
    return state


def library_bytes() -> bytes:
    """The library region: a RET stub every LIB_STUB_SPACING bytes."""
    stub = bytes([Op.RET.value]).ljust(LIB_STUB_SPACING, b"\0")
    return stub * (LIB_SIZE // LIB_STUB_SPACING)


def library_range() -> tuple[int, int]:
    return LIB_BASE, LIB_BASE + LIB_SIZE


def first_section_range(image: PackedImage) -> tuple[int, int]:
    if not image.sections:
        raise MalformedImage("image has no sections")
    sec = image.sections[0]
    return sec.va, sec.end


def entry_section_range(image: PackedImage) -> tuple[int, int]:
    sec = image.section_at(image.entry)
    if sec is None:
        raise MalformedImage("entry outside every section")
    return sec.va, sec.end


def read_image(path: str | Path) -> PackedImage:
    return parse(Path(path).read_bytes())


def write_image(image: PackedImage, path: str | Path) -> None:
    Path(path).write_bytes(image.to_bytes())
