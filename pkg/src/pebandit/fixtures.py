"""Deterministic builder for Windows-loader-shaped PE test binaries.

The builder produces byte-identical output for identical (spec, seed) input.
Fixtures are synthetic: headers and layout follow loader rules, section
content is seeded junk unless the FixtureSpec pins it. A plain-text format is
provided for the CLI; tests mostly use the dataclasses directly.

Text format, one directive per line ('#' starts a comment):

    format pe32                  pe32 | pe32plus
    seed 7
    file-align 512
    section-align 4096
    checksum 0x1234abcd          omit for a seeded nonzero value; 0 allowed
    header-pad 64                extra slack kept after the section table
    packed-headers               zero header-table slack instead
    overlay 64                   trailing bytes after the last section
    certificate 128              authenticode-shaped blob at end of file
    debug [section-index]        plant a debug directory inside a section
    section <name> <kind> <virtual_size> <raw_size> [fill=0xNN]
                                 kind: code | data | rdata | bss
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass

from .errors import InvalidSpec
from .pe_model import (
    COFF_HEADER_SIZE,
    DOS_HEADER_SIZE,
    IMAGE_SCN_CNT_CODE,
    IMAGE_SCN_CNT_INITIALIZED_DATA,
    IMAGE_SCN_CNT_UNINITIALIZED_DATA,
    IMAGE_SCN_MEM_EXECUTE,
    IMAGE_SCN_MEM_READ,
    IMAGE_SCN_MEM_WRITE,
    PE32_MAGIC,
    PE32PLUS_MAGIC,
    SECTION_HEADER_SIZE,
    align_up,
)

SECTION_KIND_FLAGS: dict[str, int] = {
    "code": IMAGE_SCN_CNT_CODE | IMAGE_SCN_MEM_EXECUTE | IMAGE_SCN_MEM_READ,
    "data": IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ | IMAGE_SCN_MEM_WRITE,
    "rdata": IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ,
    "bss": IMAGE_SCN_CNT_UNINITIALIZED_DATA | IMAGE_SCN_MEM_READ | IMAGE_SCN_MEM_WRITE,
}

PE32_OPTIONAL_SIZE: int = 0xE0
PE32PLUS_OPTIONAL_SIZE: int = 0xF0
DEBUG_ENTRY_SIZE: int = 28
DEBUG_DATA_SIZE: int = 32
DEFAULT_E_LFANEW: int = 0x80


@dataclass(frozen=True)
class SectionSpec:
    name: bytes
    kind: str
    virtual_size: int
    raw_size: int
    content: bytes | None = None  # used-extent bytes; seeded junk when None
    slack_fill: bytes | None = None  # slack pattern; seeded junk when None


@dataclass(frozen=True)
class FixtureSpec:
    sections: tuple[SectionSpec, ...]
    format: str = "pe32"  # pe32 | pe32plus
    seed: int = 0
    file_alignment: int = 512
    section_alignment: int = 4096
    checksum: int | None = None
    header_pad: int = 64
    packed_headers: bool = False
    overlay: bytes | int = 0
    certificate: bytes | int = 0
    debug: bool = False
    debug_section: int | None = None
    timestamp: int | None = None
    e_lfanew: int | None = None  # ignored when packed_headers is set


def _check(spec: FixtureSpec) -> None:
    if spec.format not in ("pe32", "pe32plus"):
        raise InvalidSpec(f"unknown format {spec.format!r}")
    if not spec.sections:
        raise InvalidSpec("at least one section required")
    if spec.file_alignment & (spec.file_alignment - 1) or spec.file_alignment == 0:
        raise InvalidSpec("file alignment must be a power of two")
    for s in spec.sections:
        if len(s.name) > 8:
            raise InvalidSpec(f"section name {s.name!r} longer than 8 bytes")
        if s.kind not in SECTION_KIND_FLAGS:
            raise InvalidSpec(f"unknown section kind {s.kind!r}")
        if s.kind == "bss" and s.raw_size:
            raise InvalidSpec("bss sections carry no raw data")
        used = min(s.virtual_size, s.raw_size)
        if s.content is not None and len(s.content) > used:
            raise InvalidSpec(f"content for {s.name!r} exceeds its used extent")
    if spec.debug:
        idx = _debug_section_index(spec)
        s = spec.sections[idx]
        need = DEBUG_ENTRY_SIZE + DEBUG_DATA_SIZE
        if min(s.virtual_size, s.raw_size) < need:
            raise InvalidSpec(f"debug host section needs {need} used bytes")


def _debug_section_index(spec: FixtureSpec) -> int:
    if spec.debug_section is not None:
        if not 0 <= spec.debug_section < len(spec.sections):
            raise InvalidSpec("debug section index out of range")
        return spec.debug_section
    for i, s in enumerate(spec.sections):
        if s.kind in ("data", "rdata"):
            return i
    return 0


def build_fixture(spec: FixtureSpec) -> bytes:
    """Build the fixture bytes; deterministic in (spec, seed)."""
    _check(spec)
    rng = random.Random(spec.seed)
    pe32 = spec.format == "pe32"
    opt_size = PE32_OPTIONAL_SIZE if pe32 else PE32PLUS_OPTIONAL_SIZE
    nsec = len(spec.sections)
    fa, sa = spec.file_alignment, spec.section_alignment

    fixed = 4 + COFF_HEADER_SIZE + opt_size + nsec * SECTION_HEADER_SIZE
    if spec.packed_headers:
        e_lfanew = align_up(DOS_HEADER_SIZE + fixed, fa) - fixed
        size_of_headers = e_lfanew + fixed
    else:
        e_lfanew = spec.e_lfanew if spec.e_lfanew is not None else DEFAULT_E_LFANEW
        if e_lfanew < DOS_HEADER_SIZE:
            raise InvalidSpec("e_lfanew below DOS header size")
        size_of_headers = align_up(e_lfanew + fixed + spec.header_pad, fa)

    # virtual and raw layout
    vas: list[int] = []
    roffs: list[int] = []
    va = sa
    roff = size_of_headers
    for s in spec.sections:
        vas.append(va)
        va = align_up(va + max(s.virtual_size, 1), sa)
        if s.raw_size:
            roff = align_up(roff, fa)
            roffs.append(roff)
            roff += s.raw_size
        else:
            roffs.append(0)
    image_size = align_up(va, sa)
    raw_end = align_up(roff, 1)

    # section raw bytes, seeded junk where the FixtureSpec leaves content open
    blobs: list[bytes] = []
    for s in spec.sections:
        used = min(s.virtual_size, s.raw_size)
        body = s.content if s.content is not None else rng.randbytes(used)
        body = body + rng.randbytes(used - len(body))
        slack_len = s.raw_size - used
        if s.slack_fill is not None:
            fill = (s.slack_fill * (slack_len // max(len(s.slack_fill), 1) + 1))[:slack_len]
        else:
            fill = rng.randbytes(slack_len)
        blobs.append(body + fill)

    timestamp = spec.timestamp if spec.timestamp is not None else rng.getrandbits(32)
    checksum = spec.checksum
    if checksum is None:
        checksum = rng.getrandbits(32) | 1  # seeded, guaranteed nonzero

    overlay = spec.overlay if isinstance(spec.overlay, bytes) else rng.randbytes(spec.overlay)
    cert = spec.certificate
    if isinstance(cert, int):
        size = align_up(cert, 8)
        if cert:
            body = rng.randbytes(max(size - 8, 0))
            cert = struct.pack("<IHH", size, 0x0200, 0x0002) + body
        else:
            cert = b""

    debug_entry: tuple[int, int] | None = None  # (rva, size) for the directory
    if spec.debug:
        idx = _debug_section_index(spec)
        data_rva = vas[idx] + DEBUG_ENTRY_SIZE
        entry = struct.pack(
            "<IIHHIIII",
            0,
            timestamp,
            0,
            0,
            2,  # codeview
            DEBUG_DATA_SIZE,
            data_rva,
            roffs[idx] + DEBUG_ENTRY_SIZE,
        )
        payload = b"RSDS" + rng.randbytes(DEBUG_DATA_SIZE - 4)
        blob = bytearray(blobs[idx])
        blob[: DEBUG_ENTRY_SIZE + DEBUG_DATA_SIZE] = entry + payload
        blobs[idx] = bytes(blob)
        debug_entry = (vas[idx], DEBUG_ENTRY_SIZE)

    cert_offset = raw_end + len(overlay) if cert else 0

    # assemble headers
    out = bytearray(size_of_headers)
    out[0:2] = b"MZ"
    struct.pack_into("<I", out, 0x3C, e_lfanew)
    out[e_lfanew : e_lfanew + 4] = b"PE\x00\x00"
    machine = 0x14C if pe32 else 0x8664
    characteristics = 0x0102 if pe32 else 0x0022
    struct.pack_into(
        "<HHIIIHH", out, e_lfanew + 4, machine, nsec, timestamp, 0, 0, opt_size, characteristics
    )

    opt = e_lfanew + 4 + COFF_HEADER_SIZE
    code_sizes = sum(s.raw_size for s in spec.sections if s.kind == "code")
    data_sizes = sum(s.raw_size for s in spec.sections if s.kind in ("data", "rdata"))
    bss_sizes = sum(s.virtual_size for s in spec.sections if s.kind == "bss")
    entry_idx = next((i for i, s in enumerate(spec.sections) if s.kind == "code"), 0)
    entry_rva = vas[entry_idx]

    struct.pack_into("<HBB", out, opt, PE32_MAGIC if pe32 else PE32PLUS_MAGIC, 14, 0)
    struct.pack_into("<IIII", out, opt + 4, code_sizes, data_sizes, bss_sizes, entry_rva)
    if pe32:
        data_idx = next((i for i, s in enumerate(spec.sections) if s.kind != "code"), None)
        base_of_data = vas[data_idx] if data_idx is not None else 0
        struct.pack_into("<II", out, opt + 20, entry_rva, base_of_data)
        struct.pack_into("<I", out, opt + 28, 0x400000)
    else:
        struct.pack_into("<I", out, opt + 20, entry_rva)
        struct.pack_into("<Q", out, opt + 24, 0x140000000)
    struct.pack_into("<II", out, opt + 32, sa, fa)
    struct.pack_into("<HHHHHH", out, opt + 40, 6, 0, 0, 0, 6, 0)
    struct.pack_into("<I", out, opt + 52, 0)
    struct.pack_into("<III", out, opt + 56, image_size, size_of_headers, checksum)
    struct.pack_into("<HH", out, opt + 68, 3, 0)  # console subsystem
    if pe32:
        struct.pack_into("<IIII", out, opt + 72, 0x100000, 0x1000, 0x100000, 0x1000)
        struct.pack_into("<II", out, opt + 88, 0, 16)
        dirs = opt + 96
    else:
        struct.pack_into("<QQQQ", out, opt + 72, 0x100000, 0x1000, 0x100000, 0x1000)
        struct.pack_into("<II", out, opt + 104, 0, 16)
        dirs = opt + 112
    if cert:
        struct.pack_into("<II", out, dirs + 4 * 8, cert_offset, len(cert))
    if debug_entry:
        struct.pack_into("<II", out, dirs + 6 * 8, *debug_entry)

    table = opt + opt_size
    for i, s in enumerate(spec.sections):
        off = table + i * SECTION_HEADER_SIZE
        out[off : off + 8] = s.name.ljust(8, b"\x00")
        struct.pack_into(
            "<IIIIIIHHI",
            out,
            off + 8,
            s.virtual_size,
            vas[i],
            s.raw_size,
            roffs[i],
            0,
            0,
            0,
            0,
            SECTION_KIND_FLAGS[s.kind],
        )

    # section data, trailing data
    for i, s in enumerate(spec.sections):
        if s.raw_size:
            if len(out) < roffs[i]:
                out += bytes(roffs[i] - len(out))
            out += blobs[i]
    out += overlay
    out += cert
    return bytes(out)


# ----------------------------------------------------------------------
# text format


def parse_fixture_spec(text: str) -> FixtureSpec:
    """Parse the plain-text spec format into a FixtureSpec."""
    kw: dict[str, object] = {}
    sections: list[SectionSpec] = []
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key, args = parts[0], parts[1:]
        try:
            if key == "format":
                kw["format"] = args[0]
            elif key == "seed":
                kw["seed"] = int(args[0], 0)
            elif key == "file-align":
                kw["file_alignment"] = int(args[0], 0)
            elif key == "section-align":
                kw["section_alignment"] = int(args[0], 0)
            elif key == "checksum":
                kw["checksum"] = int(args[0], 0)
            elif key == "header-pad":
                kw["header_pad"] = int(args[0], 0)
            elif key == "packed-headers":
                kw["packed_headers"] = True
            elif key == "overlay":
                kw["overlay"] = int(args[0], 0)
            elif key == "certificate":
                kw["certificate"] = int(args[0], 0)
            elif key == "debug":
                kw["debug"] = True
                if args:
                    kw["debug_section"] = int(args[0], 0)
            elif key == "section":
                name, kind, vsize, rsize = args[0], args[1], int(args[2], 0), int(args[3], 0)
                content = None
                for extra in args[4:]:
                    if extra.startswith("fill="):
                        fill_byte = int(extra[5:], 0)
                        content = bytes([fill_byte]) * min(vsize, rsize)
                    else:
                        raise ValueError(f"unknown option {extra!r}")
                sections.append(SectionSpec(name.encode("ascii"), kind, vsize, rsize, content))
            else:
                raise ValueError(f"unknown directive {key!r}")
        except (IndexError, ValueError, UnicodeEncodeError) as exc:
            raise InvalidSpec(f"line {lineno}: {exc}") from exc
    return FixtureSpec(sections=tuple(sections), **kw)  # type: ignore[arg-type]
