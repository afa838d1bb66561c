"""Synthetic packer corpus.

Each packer encrypts the payload's code section and prepends a loader stub
built around one adversarial trick:

* P1 xor-loop: plain in-place rolling-XOR decode, then an indirect jump.
* P2 delta-selfmod: CALL/POP GetPC, patches instruction bytes ahead in its
  own block and keeps the rolling key inside an instruction immediate.
* P3 seh-flow: exceptions, hardware breakpoints armed through a context,
  a single-step counter mixed into the key, CONTINUE into the OEP.
* P4 prefix-trap: LOCK-prefixed jumps fault on purpose; the handler checks
  and accumulates the exception addresses into the key.
* P5 overwrite-loop: one merged section, a copy loop writes the next stage
  right ahead of itself and the stub rewrites bytes in its current block.

Keys depend on what the tricks produce, so an engine that gets any of them
wrong decrypts garbage instead of failing quietly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

from .asm import Assembler, At
from .image import FLAG_FIRST, PackedImage, SectionSpec, build, load
from .isa import Op
from .machine import (
    CTX_BCTL, CTX_BP, CTX_PC, CTX_REG, LIB_BASE, SEH_HEAD, ExceptionCode, run_reference,
)

PACKER_IDS = ("P1", "P2", "P3", "P4", "P5")

PAYLOAD_VA = 0x1000
SECTION_SIZE = 0x1000
STUB_VA = 0x4000
MERGED_STUB_OFFSET = 0x800

# fixed library "imports"
API_GET_VERSION = LIB_BASE + 0x20
API_VIRTUAL_PROTECT = LIB_BASE + 0x40

REFERENCE_FUEL = 10_000_000
FAIL_R0 = 0xBAD

_KEYS = {
    "P1": (0x5EED1234, 0x01020305),
    "P2": (0xC0DEFACE, 0x00A0B0C1),
    "P3": (0x7E10C4A1, 0x11111111),
    "P4": (0x0F0F1234, 0x02468ACE),
    "P5": (0x3A5A7A9A, 0x0BADF00D),
}


class PackError(ValueError):
    pass


@dataclass
class CorpusSample:
    id: str
    image: PackedImage
    true_oep: int
    expected_r0: int
    expected_singlesteps: int
    notes: str = ""
    # (address, length) of stub bytes that get rewritten before they run
    patch_sites: list[tuple[int, int]] = field(default_factory=list)
    # OEP range a human would pick when sections are merged
    oep_range: tuple[int, int] | None = None

    def sidecar(self) -> str:
        lines = [
            f"true_oep=0x{self.true_oep:08X}",
            f"expected_r0={self.expected_r0}",
            f"expected_singlesteps={self.expected_singlesteps}",
        ]
        if self.oep_range:
            lines.append(f"oep_range=0x{self.oep_range[0]:08X}:0x{self.oep_range[1]:08X}")
        lines.append(f"notes={self.notes}")
        return "\n".join(lines) + "\n"


def parse_sidecar(text: str) -> dict:
    out: dict = {}
    for line in text.splitlines():
        if not line.strip() or "=" not in line:
            continue
        key, value = line.split("=", 1)
        key = key.strip()
        if key == "true_oep":
            out[key] = int(value, 16)
        elif key in ("expected_r0", "expected_singlesteps"):
            out[key] = int(value)
        elif key == "oep_range":
            lo, hi = value.split(":")
            out[key] = (int(lo, 16), int(hi, 16))
        else:
            out[key] = value
    return out


def sidecar_path(image_path: str | Path) -> Path:
    return Path(image_path).with_suffix(".sidecar")


# --- payload -------------------------------------------------------------

def make_payload() -> PackedImage:
    """Canonical payload: one API call, then sums 1..10 into R0 and halts.

    R0 starts at zero as the loader leaves it; every stub restores that.
    """
    a = Assembler(PAYLOAD_VA)
    a.ins(Op.CALL, At(API_GET_VERSION))
    a.ins(Op.MOV_RI, 1, 10)
    a.label("loop")
    a.ins(Op.ADD_RR, 0, 1)
    a.ins(Op.SUB_RI, 1, 1)
    a.ins(Op.JNZ, a.ref("loop"))
    a.ins(Op.HALT)
    code = a.assemble()
    return build(PAYLOAD_VA, [SectionSpec(".text", PAYLOAD_VA, code, SECTION_SIZE, FLAG_FIRST)])


# --- helpers -------------------------------------------------------------

def _words(data: bytes) -> list[int]:
    data = data + b"\0" * (-len(data) % 4)
    return list(struct.unpack(f"<{len(data) // 4}I", data))


def _encrypt(data: bytes, key: int, delta: int) -> bytes:
    out = []
    for w in _words(data):
        out.append(w ^ key)
        key = (key + delta) & 0xFFFF_FFFF
    return struct.pack(f"<{len(out)}I", *out)


def _payload_parts(payload: PackedImage, limit: int) -> tuple[bytes, int, int]:
    if len(payload.sections) != 1:
        raise PackError("payload must have exactly one section")
    sec = payload.sections[0]
    code = payload.section_bytes(sec)
    if sec.va != PAYLOAD_VA:
        raise PackError(f"payload must be based at 0x{PAYLOAD_VA:X}")
    if len(code) + (-len(code) % 4) > limit:
        raise PackError(f"payload of {len(code)} bytes does not fit the stub layout ({limit})")
    return code, sec.va, payload.entry


def _decode_loop(a: Assembler, label: str, delta: int) -> None:
    """R2 = pointer, R3 = rolling key, R4 = word count; clobbers R5."""
    a.label(label)
    a.ins(Op.LOAD, 5, 2, 0)
    a.ins(Op.XOR_RR, 5, 3)
    a.ins(Op.STORE, 2, 0, 5)
    a.ins(Op.ADD_RI, 3, delta)
    a.ins(Op.ADD_RI, 2, 4)
    a.ins(Op.SUB_RI, 4, 1)
    a.ins(Op.JNZ, a.ref(label))


def _zero_regs(a: Assembler, regs=range(6)) -> None:
    for r in regs:
        a.ins(Op.MOV_RI, r, 0)


def _install_seh(a: Assembler, handler: str) -> None:
    a.ins(Op.PUSHI, a.ref(handler))
    a.ins(Op.PUSHI, 0)
    a.ins(Op.MOV_RR, 6, 7)
    a.ins(Op.MOV_RI, 5, 0)
    a.ins(Op.STORE, 5, SEH_HEAD, 6)


def _fail(a: Assembler) -> None:
    a.label("fail")
    a.ins(Op.MOV_RI, 0, FAIL_R0)
    a.ins(Op.HALT)


def _two_sections(enc: bytes, stub: bytes, entry: int) -> PackedImage:
    return build(entry, [
        SectionSpec(".text", PAYLOAD_VA, enc, SECTION_SIZE, FLAG_FIRST),
        SectionSpec(".stub", STUB_VA, stub, SECTION_SIZE),
    ])


# --- packers -------------------------------------------------------------

def _pack_p1(code: bytes, oep: int) -> tuple[PackedImage, dict]:
    key, delta = _KEYS["P1"]
    enc = _encrypt(code, key, delta)
    a = Assembler(STUB_VA)
    a.ins(Op.MOV_RI, 2, PAYLOAD_VA)
    a.ins(Op.MOV_RI, 3, key)
    a.ins(Op.MOV_RI, 4, len(enc) // 4)
    _decode_loop(a, "loop", delta)
    # the stub's own API use must not count as the program's first call
    a.ins(Op.CALL, At(API_VIRTUAL_PROTECT))
    _zero_regs(a)
    a.ins(Op.MOV_RI, 6, oep)
    a.ins(Op.JMPR, 6)
    return _two_sections(enc, a.assemble(), STUB_VA), {"notes": "xor-loop (UPX analog)"}


# opcode/register/imm bytes the P2 patch site shows before decoding
_P2_DISGUISE = bytes([Op.CMP_RI.value, 0x05, 0x37, 0x13])


def _pack_p2(code: bytes, oep: int) -> tuple[PackedImage, dict]:
    key, delta = _KEYS["P2"]
    enc = _encrypt(code, key, delta)
    real = struct.pack("<BBI", Op.MOV_RI.value, 2, PAYLOAD_VA)
    real_word = struct.unpack("<I", real[:4])[0]
    disguised_word = struct.unpack("<I", _P2_DISGUISE)[0]
    fixup = (disguised_word - real_word) & 0xFFFF_FFFF

    def stub(patch: int, keysite: int) -> Assembler:
        a = Assembler(STUB_VA)
        a.ins(Op.CALL, a.ref("getpc"))
        getpc = a.pc
        a.label("getpc")
        a.ins(Op.POP, 1)
        a.ins(Op.MOV_RR, 3, 1)
        a.ins(Op.ADD_RI, 3, patch - getpc)
        a.ins(Op.LOAD, 4, 3, 0)
        a.ins(Op.SUB_RI, 4, fixup)
        a.ins(Op.STORE, 3, 0, 4)
        a.ins(Op.MOV_RI, 5, 0)
        a.label("patch")
        a.raw(_P2_DISGUISE + real[4:])
        a.ins(Op.MOV_RI, 4, len(enc) // 4)
        a.ins(Op.JMP, a.ref("loop"))
        a.label("loop")
        a.label("keysite")
        a.ins(Op.MOV_RI, 3, key)
        a.ins(Op.LOAD, 5, 2, 0)
        a.ins(Op.XOR_RR, 5, 3)
        a.ins(Op.STORE, 2, 0, 5)
        a.ins(Op.ADD_RI, 3, delta)
        # rolling key lives in the immediate of the instruction at keysite
        a.ins(Op.STORE, 1, keysite + 2 - getpc, 3)
        a.ins(Op.ADD_RI, 2, 4)
        a.ins(Op.SUB_RI, 4, 1)
        a.ins(Op.JNZ, a.ref("loop"))
        _zero_regs(a)
        a.ins(Op.MOV_RI, 6, oep)
        a.ins(Op.JMPR, 6)
        return a

    # two passes: label addresses do not depend on the displacement values
    probe = stub(0, 0)
    a = stub(probe.addr("patch"), probe.addr("keysite"))
    meta = {
        "notes": "delta-selfmod (PESpin analog)",
        "patch_sites": [(a.addr("patch"), len(real)), (a.addr("keysite"), 6)],
    }
    return _two_sections(enc, a.assemble(), STUB_VA), meta


def _pack_p3(code: bytes, oep: int) -> tuple[PackedImage, dict]:
    key, delta = _KEYS["P3"]
    steps = 4
    enc = _encrypt(code, key, delta)
    a = Assembler(STUB_VA)
    _install_seh(a, "handler")
    a.ins(Op.TRAP, 1)
    bps = [
        a.ins(Op.MOV_RI, 2, 1),
        a.ins(Op.ADD_RI, 2, 2),
        a.ins(Op.ADD_RI, 2, 3),
        a.ins(Op.ADD_RI, 2, 4),
    ]
    a.ins(Op.MOV_RI, 5, a.ref("counter"))
    a.ins(Op.LOAD, 6, 5, 0)
    a.ins(Op.MOV_RI, 3, key ^ steps)
    a.ins(Op.XOR_RR, 3, 6)
    a.ins(Op.MOV_RI, 2, PAYLOAD_VA)
    a.ins(Op.MOV_RI, 4, len(enc) // 4)
    _decode_loop(a, "loop", delta)
    a.ins(Op.TRAP, 2)
    a.ins(Op.HALT)

    a.label("handler")
    a.ins(Op.LOAD, 2, 0, 0)
    a.ins(Op.CMP_RI, 2, ExceptionCode.SINGLE_STEP)
    a.ins(Op.JZ, a.ref("on_single_step"))
    a.ins(Op.CMP_RI, 2, ExceptionCode.SOFTWARE_TRAP)
    a.ins(Op.JNZ, a.ref("fail"))
    a.ins(Op.LOAD, 2, 0, 8)
    a.ins(Op.CMP_RI, 2, 1)
    a.ins(Op.JZ, a.ref("arm"))
    a.ins(Op.CMP_RI, 2, 2)
    a.ins(Op.JZ, a.ref("to_oep"))
    _fail(a)

    a.label("arm")
    for i, addr in enumerate(bps):
        a.ins(Op.MOV_RI, 2, addr)
        a.ins(Op.STORE, 1, CTX_BP + 4 * i, 2)
    a.ins(Op.MOV_RI, 2, 0xF)
    a.ins(Op.STORE, 1, CTX_BCTL, 2)
    a.ins(Op.LOAD, 2, 0, 4)
    a.ins(Op.ADD_RI, 2, 2)
    a.ins(Op.STORE, 1, CTX_PC, 2)
    a.ins(Op.CONTINUE)

    a.label("on_single_step")
    a.ins(Op.MOV_RI, 2, a.ref("counter"))
    a.ins(Op.LOAD, 3, 2, 0)
    a.ins(Op.ADD_RI, 3, 1)
    a.ins(Op.STORE, 2, 0, 3)
    a.ins(Op.CONTINUE)

    # resume straight into the OEP with the entry register state
    a.label("to_oep")
    a.ins(Op.MOV_RI, 5, a.ref("counter"))
    a.ins(Op.LOAD, 6, 5, 0)
    a.ins(Op.MOV_RI, 2, oep ^ steps)
    a.ins(Op.XOR_RR, 2, 6)
    a.ins(Op.STORE, 1, CTX_PC, 2)
    a.ins(Op.MOV_RI, 2, 0)
    for r in range(7):
        a.ins(Op.STORE, 1, CTX_REG + 4 * r, 2)
    a.ins(Op.STORE, 1, CTX_BCTL, 2)
    a.ins(Op.MOV_RI, 5, 0)
    a.ins(Op.STORE, 5, SEH_HEAD, 2)
    a.ins(Op.CONTINUE)

    a.align(4)
    a.label("counter")
    a.word(0)
    meta = {"notes": "seh-flow + hardware breakpoints (tElock/yC analog)", "singlesteps": steps}
    return _two_sections(enc, a.assemble(), STUB_VA), meta


def _pack_p4(code: bytes, oep: int) -> tuple[PackedImage, dict]:
    key, delta = _KEYS["P4"]
    enc = _encrypt(code, key, delta)

    def stub(fault_sum: int) -> Assembler:
        a = Assembler(STUB_VA)
        _install_seh(a, "handler")
        a.ins(Op.MOV_RI, 4, 0)
        a.ins(Op.MOV_RI, 3, 0)
        sites = [a.ins(Op.JMP, 0x40, prefix=True)]
        a.ins(Op.ADD_RI, 3, 1)
        sites.append(a.ins(Op.JNZ, -0x20, prefix=True))
        a.ins(Op.ADD_RI, 3, 1)
        sites.append(a.ins(Op.CALL, 0x100, prefix=True))
        # R4 now holds the sum of the three fault addresses
        a.ins(Op.MOV_RI, 6, oep ^ fault_sum)
        a.ins(Op.XOR_RR, 6, 4)
        a.ins(Op.MOV_RI, 3, key ^ fault_sum)
        a.ins(Op.XOR_RR, 3, 4)
        a.ins(Op.MOV_RI, 2, PAYLOAD_VA)
        a.ins(Op.MOV_RI, 4, len(enc) // 4)
        _decode_loop(a, "loop", delta)
        _zero_regs(a)
        a.ins(Op.JMPR, 6)

        a.label("handler")
        a.ins(Op.LOAD, 2, 0, 0)
        a.ins(Op.CMP_RI, 2, ExceptionCode.INVALID_OPCODE)
        a.ins(Op.JNZ, a.ref("fail"))
        a.ins(Op.LOAD, 2, 0, 4)
        a.ins(Op.MOV_RI, 3, a.ref("cursor"))
        a.ins(Op.LOAD, 5, 3, 0)
        a.ins(Op.LOAD, 6, 5, 0)
        a.ins(Op.SUB_RR, 6, 2)
        a.ins(Op.JNZ, a.ref("fail"))
        a.ins(Op.ADD_RI, 5, 4)
        a.ins(Op.STORE, 3, 0, 5)
        a.ins(Op.LOAD, 5, 1, CTX_REG + 4 * 4)
        a.ins(Op.ADD_RR, 5, 2)
        a.ins(Op.STORE, 1, CTX_REG + 4 * 4, 5)
        a.ins(Op.ADD_RI, 2, 6)
        a.ins(Op.STORE, 1, CTX_PC, 2)
        a.ins(Op.CONTINUE)
        _fail(a)

        a.align(4)
        a.label("cursor")
        a.word(a.ref("expected"))
        a.label("expected")
        for s in sites:
            a.word(s)
        a._sites = sites
        return a

    probe = stub(0)
    total = sum(probe._sites) & 0xFFFF_FFFF
    a = stub(total)
    meta = {"notes": "prefix-trap (LOCK-prefixed jumps as exceptions)", "fault_sites": a._sites}
    return _two_sections(enc, a.assemble(), STUB_VA), meta


def _pack_p5(code: bytes, oep: int) -> tuple[PackedImage, dict]:
    key, delta = _KEYS["P5"]
    enc = _encrypt(code, key, delta)
    stub_va = PAYLOAD_VA + MERGED_STUB_OFFSET
    stage_key = 0x6D6D6242
    patched = bytes([Op.MOV_RI.value, 6, 0x34, 0x12])
    patch_word = struct.unpack("<I", patched)[0]

    def stub(stage2: bytes, n2: int) -> Assembler:
        a = Assembler(stub_va)
        a.ins(Op.MOV_RI, 2, a.ref("stage2"))
        a.ins(Op.MOV_RI, 3, a.ref("blob"))
        a.ins(Op.MOV_RI, 4, n2)
        a.label("copy")
        a.ins(Op.LOAD, 5, 3, 0)
        a.ins(Op.XOR_RI, 5, stage_key)
        a.ins(Op.STORE, 2, 0, 5)
        a.ins(Op.ADD_RI, 2, 4)
        a.ins(Op.ADD_RI, 3, 4)
        a.ins(Op.SUB_RI, 4, 1)
        a.ins(Op.JNZ, a.ref("copy"))
        a.ins(Op.MOV_RI, 6, a.ref("patch"))
        a.ins(Op.LOAD, 5, 6, 0)
        # overwrite bytes of this very block with themselves, then for real
        a.ins(Op.STORE, 6, 0, 5)
        a.ins(Op.MOV_RI, 5, patch_word)
        a.ins(Op.STORE, 6, 0, 5)
        a.ins(Op.MOV_RI, 5, 0)
        a.label("patch")
        a.raw(bytes([Op.HALT.value]) * 6)
        a.label("stage2")
        a.raw(bytes(4 * n2))
        a.label("stage3")
        _decode_loop(a, "loop", delta)
        _zero_regs(a)
        a.ins(Op.MOV_RI, 6, oep)
        a.ins(Op.JMPR, 6)
        a.align(4)
        a.label("blob")
        a.raw(_xor_words(stage2, stage_key))
        return a

    def stage2_code(stage3: int) -> bytes:
        s = Assembler(0)
        s.ins(Op.MOV_RI, 2, PAYLOAD_VA)
        s.ins(Op.MOV_RI, 3, key)
        s.ins(Op.MOV_RI, 4, len(enc) // 4)
        s.ins(Op.JMP, stage3)
        return s.assemble()

    probe_code = stage2_code(0)
    n2 = (len(probe_code) + 3) // 4
    probe = stub(probe_code.ljust(4 * n2, b"\0"), n2)
    stage2_va = probe.addr("stage2")
    # rel32 of the final JMP is relative to its own position inside stage2
    s2 = stage2_code(probe.addr("stage3") - (stage2_va + len(probe_code)))
    a = stub(s2.ljust(4 * n2, b"\0"), n2)
    stub_bytes = a.assemble()
    merged = enc.ljust(MERGED_STUB_OFFSET, b"\0") + stub_bytes
    image = build(stub_va, [SectionSpec(".bop", PAYLOAD_VA, merged, 2 * SECTION_SIZE, FLAG_FIRST)])
    meta = {
        "notes": "overwrite-loop + merged section (Upack analog); needs --range",
        "patch_sites": [(a.addr("patch"), 6), (stage2_va, 4 * n2)],
        "oep_range": (PAYLOAD_VA, stub_va),
    }
    return image, meta


def _xor_words(data: bytes, key: int) -> bytes:
    return struct.pack(f"<{len(data) // 4}I", *(w ^ key for w in _words(data)))


_PACKERS = {"P1": _pack_p1, "P2": _pack_p2, "P3": _pack_p3, "P4": _pack_p4, "P5": _pack_p5}
_LIMITS = {"P5": MERGED_STUB_OFFSET}


def pack(payload: PackedImage, packer_id: str) -> CorpusSample:
    """Pack ``payload`` with one of P1..P5. Pure function of its inputs."""
    packer_id = packer_id.upper()
    if packer_id not in _PACKERS:
        raise PackError(f"unknown packer {packer_id!r}; expected one of {', '.join(PACKER_IDS)}")
    code, _, oep = _payload_parts(payload, _LIMITS.get(packer_id, SECTION_SIZE))
    image, meta = _PACKERS[packer_id](code, oep)
    truth = run_reference(load(payload), REFERENCE_FUEL)
    return CorpusSample(
        id=packer_id,
        image=image,
        true_oep=oep,
        expected_r0=truth.r0,
        expected_singlesteps=meta.get("singlesteps", 0),
        notes=meta["notes"],
        patch_sites=meta.get("patch_sites", []),
        oep_range=meta.get("oep_range"),
    )


def corpus(payload: PackedImage | None = None) -> dict[str, CorpusSample]:
    payload = payload or make_payload()
    return {pid: pack(payload, pid) for pid in PACKER_IDS}
