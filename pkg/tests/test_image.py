from __future__ import annotations

import struct

import pytest

from bopunpack.image import (
    DEFAULT_STACK_TOP, HEADER, MAGIC, SECTION, STACK_SIZE, MalformedImage, PackedImage,
    Section, SectionSpec, build, first_section_range, library_range, load, parse,
)
from bopunpack.machine import (
    LIB_BASE, PAGE_SIZE, SEH_HEAD, SP, STACK_BOTTOM_CELL, STACK_TOP_CELL,
)


def _one(va=0x1000, data=b"\x52", mem=0x100, entry=None):
    return build(va if entry is None else entry, [SectionSpec(".text", va, data, mem)])


def test_header_is_bit_exact():
    image = _one()
    raw = image.to_bytes()
    assert raw[:HEADER.size] == struct.pack("<4sHHII", b"BOPX", 1, 1, 0x1000, DEFAULT_STACK_TOP)
    name, va, off, fsize, msize, flags = struct.unpack_from("<8sIIIII", raw, HEADER.size)
    assert (name, va, fsize, msize, flags) == (b".text\0\0\0", 0x1000, 1, 0x100, 0)
    assert off == HEADER.size + SECTION.size and raw[off] == 0x52


def test_load_sets_pc_to_entry():
    state = load(_one())
    assert state.pc == 0x1000


def test_zero_fill():
    state = load(_one(data=b"\x52\x52", mem=0x40))
    assert state.mem.read(0x1000, 0x40) == b"\x52\x52" + bytes(0x3E)


def test_loader_cells_and_stack():
    state = load(_one())
    assert state.regs[SP] == DEFAULT_STACK_TOP
    assert state.mem.read_u32(SEH_HEAD) == 0
    assert state.mem.read_u32(STACK_TOP_CELL) == DEFAULT_STACK_TOP
    assert state.mem.read_u32(STACK_BOTTOM_CELL) == DEFAULT_STACK_TOP - 0x10000
    assert library_range() == (0x0070_0000, 0x0070_1000)
    for stub in range(LIB_BASE, LIB_BASE + 0x100, 16):
        assert state.mem.read(stub, 1) == b"\x46"


def test_loader_writes_nothing_else(samples):
    image = samples["P1"].image
    state = load(image)
    allowed = set()
    for sec in image.sections:
        allowed.update(range(sec.va & ~(PAGE_SIZE - 1), sec.end, PAGE_SIZE))
    allowed.update(range(image.stack_top - STACK_SIZE, image.stack_top, PAGE_SIZE))
    allowed.update({0, LIB_BASE})
    assert set(state.mem.pages) <= allowed
    tib = state.mem.read(0, PAGE_SIZE)
    touched = {i for i, b in enumerate(tib) if b}
    assert touched <= set(range(0xF00, 0xF0C))


def test_overlapping_sections():
    with pytest.raises(MalformedImage, match="overlap"):
        build(0x1000, [SectionSpec("a", 0x1000, b"\x52", 0x1000),
                       SectionSpec("b", 0x1800, b"\x52", 0x100)])


@pytest.mark.parametrize("va", [0, LIB_BASE, 0x0090_0000, DEFAULT_STACK_TOP - 0x100])
def test_reserved_regions(va):
    with pytest.raises(MalformedImage):
        _one(va=va)


def test_entry_outside_sections():
    with pytest.raises(MalformedImage, match="entry"):
        _one(entry=0x5000)


def test_mem_smaller_than_file():
    with pytest.raises(MalformedImage):
        build(0x1000, [SectionSpec("a", 0x1000, b"\x52" * 8, 4)])


def test_bad_magic_and_version():
    raw = bytearray(_one().to_bytes())
    with pytest.raises(MalformedImage, match="magic"):
        parse(b"XXXX" + bytes(raw[4:]))
    raw[4] = 9
    with pytest.raises(MalformedImage, match="version"):
        parse(bytes(raw))


def test_truncated():
    raw = _one().to_bytes()
    for cut in (3, HEADER.size + 4, len(raw) - 1):
        with pytest.raises(MalformedImage):
            parse(raw[:cut])


def test_empty_section_list():
    with pytest.raises(MalformedImage):
        build(0x1000, [])
    empty = PackedImage(0x1000, [], MAGIC)
    with pytest.raises(MalformedImage):
        first_section_range(empty)


def test_first_section_range_two_sections():
    image = build(0x4000, [SectionSpec("a", 0x1000, b"\x52", 0x800),
                           SectionSpec("b", 0x4000, b"\x52", 0x100)])
    assert first_section_range(image) == (0x1000, 0x1800)


def test_first_section_range_merged(samples):
    image = samples["P5"].image
    assert len(image.sections) == 1
    sec = image.sections[0]
    assert first_section_range(image) == (sec.va, sec.va + sec.mem_size) == (0x1000, 0x3000)


def test_serialize_reload_idempotent(samples):
    for sample in samples.values():
        first = load(sample.image)
        again = parse(sample.image.to_bytes())
        assert again == sample.image
        second = load(again)
        assert first.mem.digest() == second.mem.digest()
        assert (first.arch_view(), first.pc) == (second.arch_view(), second.pc)


def test_section_helpers():
    sec = Section(b"x\0\0\0\0\0\0\0", 0x1000, 0, 0, 0x10)
    assert sec.label == "x" and sec.contains(0x100F) and not sec.contains(0x1010)
