"""Structural model of a PE file built for byte-exact round trips.

A parsed file is held as an ordered list of raw chunks:

    [0, table_end)            head: DOS header + stub, PE signature, COFF
                              header, optional header with data directories,
                              and the section table
    [table_end, first_raw)    head_pad: slack between the last section header
                              entry and the first section's raw data
    per data section          an optional alignment gap, then the section's
                              raw content ([raw_offset, raw_offset+raw_size))
    [last_end, EOF)           trailing data, split into overlay_pre,
                              certificate, overlay_post using the security
                              data directory (which stores a file offset)

``serialize`` reassembles the chunks in order, so ``serialize(parse(b)) == b``
for any accepted input. Edits are byte surgery on the serialized image
followed by a reparse; the offset helpers below locate every field the
rewriting layer touches.

Parsing is strict about the structures the rewriter mutates (headers, section
table, security/debug directories, trailing region) and permissive about
everything else (imports, relocations, resources are never interpreted).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import LayoutConflict, MalformedPe

DOS_HEADER_SIZE: int = 64
E_LFANEW_OFFSET: int = 0x3C
PE_SIGNATURE: bytes = b"PE\x00\x00"
COFF_HEADER_SIZE: int = 20
SECTION_HEADER_SIZE: int = 40

PE32_MAGIC: int = 0x10B
PE32PLUS_MAGIC: int = 0x20B

# field offsets relative to the start of the optional header; identical for
# both magics up to and including the checksum
OPT_ENTRY_POINT_OFFSET: int = 16
OPT_SECTION_ALIGNMENT_OFFSET: int = 32
OPT_FILE_ALIGNMENT_OFFSET: int = 36
OPT_IMAGE_SIZE_OFFSET: int = 56
OPT_HEADERS_SIZE_OFFSET: int = 60
OPT_CHECKSUM_OFFSET: int = 64

PE32_NUM_DIRS_OFFSET: int = 92
PE32_DIRS_OFFSET: int = 96
PE32PLUS_NUM_DIRS_OFFSET: int = 108
PE32PLUS_DIRS_OFFSET: int = 112
MAX_DATA_DIRECTORIES: int = 16

IMAGE_DIRECTORY_ENTRY_IMPORT: int = 1
IMAGE_DIRECTORY_ENTRY_SECURITY: int = 4
IMAGE_DIRECTORY_ENTRY_DEBUG: int = 6

IMAGE_SCN_CNT_CODE: int = 0x00000020
IMAGE_SCN_CNT_INITIALIZED_DATA: int = 0x00000040
IMAGE_SCN_CNT_UNINITIALIZED_DATA: int = 0x00000080
IMAGE_SCN_MEM_EXECUTE: int = 0x20000000
IMAGE_SCN_MEM_READ: int = 0x40000000
IMAGE_SCN_MEM_WRITE: int = 0x80000000


def align_up(value: int, alignment: int) -> int:
    if alignment <= 0:
        return value
    return (value + alignment - 1) // alignment * alignment


@dataclass(frozen=True)
class CoffHeader:
    machine: int
    section_count: int
    timestamp: int
    optional_size: int
    characteristics: int


@dataclass(frozen=True)
class DataDirectory:
    """One (rva, size) directory entry plus its own offset in the file."""

    rva: int
    size: int
    field_offset: int

    @property
    def present(self) -> bool:
        return self.rva != 0 and self.size != 0


@dataclass(frozen=True)
class SectionHeader:
    name_raw: bytes  # exactly 8 bytes, NUL padded
    virtual_size: int
    virtual_address: int
    raw_size: int
    raw_offset: int
    characteristics: int

    @property
    def name(self) -> bytes:
        return self.name_raw.rstrip(b"\x00")

    @property
    def executable(self) -> bool:
        return bool(self.characteristics & IMAGE_SCN_MEM_EXECUTE)

    @property
    def used_extent(self) -> int:
        """Bytes of raw content the loader actually maps."""
        return min(self.virtual_size, self.raw_size)


@dataclass(frozen=True)
class Section:
    header: SectionHeader
    content: bytes  # len == header.raw_size


@dataclass(frozen=True)
class ParsedPe:
    head: bytes
    head_pad: bytes
    sections: tuple[Section, ...]
    file_order: tuple[int, ...]  # indices of data-bearing sections by raw_offset
    gaps: tuple[bytes, ...]  # gaps[k] precedes file_order[k]; gaps[0] == b""
    overlay_pre: bytes
    certificate: bytes
    overlay_post: bytes

    e_lfanew: int
    coff: CoffHeader
    magic: int
    entry_point_rva: int
    section_alignment: int
    file_alignment: int
    image_size: int
    size_of_headers: int
    checksum_value: int
    data_directories: tuple[DataDirectory, ...]

    # ------------------------------------------------------------------
    # derived offsets

    @property
    def dos_stub(self) -> bytes:
        return self.head[: self.e_lfanew]

    @property
    def opt_offset(self) -> int:
        return self.e_lfanew + 4 + COFF_HEADER_SIZE

    @property
    def table_offset(self) -> int:
        return self.opt_offset + self.coff.optional_size

    @property
    def table_end(self) -> int:
        return self.table_offset + self.coff.section_count * SECTION_HEADER_SIZE

    @property
    def checksum_field_offset(self) -> int:
        return self.opt_offset + OPT_CHECKSUM_OFFSET

    def section_header_offset(self, index: int) -> int:
        return self.table_offset + index * SECTION_HEADER_SIZE

    def directory(self, index: int) -> DataDirectory | None:
        if 0 <= index < len(self.data_directories):
            return self.data_directories[index]
        return None

    @property
    def overlay(self) -> bytes:
        """Trailing data that is not the certificate blob."""
        return self.overlay_pre + self.overlay_post

    @property
    def first_raw_offset(self) -> int:
        if self.file_order:
            return self.sections[self.file_order[0]].header.raw_offset
        return self.table_end + len(self.head_pad)

    @property
    def last_raw_end(self) -> int:
        if self.file_order:
            h = self.sections[self.file_order[-1]].header
            return h.raw_offset + h.raw_size
        return self.table_end + len(self.head_pad)

    def rva_to_offset(self, rva: int) -> int | None:
        """File offset backing an RVA, or None when it has no raw bytes."""
        if 0 <= rva < self.size_of_headers:
            return rva
        for sec in self.sections:
            h = sec.header
            span = max(h.virtual_size, h.raw_size)
            if h.virtual_address <= rva < h.virtual_address + span:
                delta = rva - h.virtual_address
                if delta < h.raw_size:
                    return h.raw_offset + delta
                return None
        return None


def section_slack(p: ParsedPe, index: int) -> int:
    """Writable padding at the tail of a section's raw data.

    The loader maps only ``min(virtual_size, raw_size)`` bytes, so the rest of
    the raw extent can change without moving any other byte of the file.
    """
    h = p.sections[index].header
    return h.raw_size - h.used_extent


def section_slack_range(p: ParsedPe, index: int) -> tuple[int, int]:
    """File-offset range [start, end) of a section's slack region."""
    h = p.sections[index].header
    return h.raw_offset + h.used_extent, h.raw_offset + h.raw_size


def header_table_slack(p: ParsedPe) -> int:
    """Free bytes between the section table and the first section's data.

    This is the room available for appending section header entries without
    shifting any section content.
    """
    return len(p.head_pad)


# ----------------------------------------------------------------------
# parsing


def _u16(data: bytes, off: int) -> int:
    return struct.unpack_from("<H", data, off)[0]


def _u32(data: bytes, off: int) -> int:
    return struct.unpack_from("<I", data, off)[0]


def parse(data: bytes) -> ParsedPe:
    """Parse ``data`` into a ParsedPe or raise MalformedPe."""
    if len(data) < DOS_HEADER_SIZE:
        raise MalformedPe("file shorter than a DOS header")
    if data[:2] != b"MZ":
        raise MalformedPe("missing MZ signature")
    e_lfanew = _u32(data, E_LFANEW_OFFSET)
    if e_lfanew < DOS_HEADER_SIZE or e_lfanew + 4 + COFF_HEADER_SIZE > len(data):
        raise MalformedPe("bad e_lfanew")
    if data[e_lfanew : e_lfanew + 4] != PE_SIGNATURE:
        raise MalformedPe("missing PE signature")

    coff_off = e_lfanew + 4
    machine, nsec, timestamp, _symtab, _nsyms, opt_size, characteristics = struct.unpack_from(
        "<HHIIIHH", data, coff_off
    )
    opt_off = coff_off + COFF_HEADER_SIZE
    table_off = opt_off + opt_size
    table_end = table_off + nsec * SECTION_HEADER_SIZE
    if table_end > len(data):
        raise MalformedPe("section table extends past end of file")
    if opt_size < OPT_CHECKSUM_OFFSET + 4:
        raise MalformedPe("optional header too small")

    magic = _u16(data, opt_off)
    if magic == PE32_MAGIC:
        ndirs_off, dirs_off = PE32_NUM_DIRS_OFFSET, PE32_DIRS_OFFSET
    elif magic == PE32PLUS_MAGIC:
        ndirs_off, dirs_off = PE32PLUS_NUM_DIRS_OFFSET, PE32PLUS_DIRS_OFFSET
    else:
        raise MalformedPe(f"unknown optional header magic 0x{magic:x}")

    entry_point = _u32(data, opt_off + OPT_ENTRY_POINT_OFFSET)
    section_align = _u32(data, opt_off + OPT_SECTION_ALIGNMENT_OFFSET)
    file_align = _u32(data, opt_off + OPT_FILE_ALIGNMENT_OFFSET)
    image_size = _u32(data, opt_off + OPT_IMAGE_SIZE_OFFSET)
    headers_size = _u32(data, opt_off + OPT_HEADERS_SIZE_OFFSET)
    checksum = _u32(data, opt_off + OPT_CHECKSUM_OFFSET)
    if file_align == 0 or file_align & (file_align - 1):
        raise MalformedPe(f"file alignment 0x{file_align:x} is not a power of two")

    dirs: list[DataDirectory] = []
    if opt_size >= ndirs_off + 4:
        ndirs = _u32(data, opt_off + ndirs_off)
        avail = min(ndirs, MAX_DATA_DIRECTORIES, (opt_size - dirs_off) // 8)
        for i in range(max(avail, 0)):
            off = opt_off + dirs_off + i * 8
            dirs.append(DataDirectory(_u32(data, off), _u32(data, off + 4), off))

    headers: list[SectionHeader] = []
    for i in range(nsec):
        off = table_off + i * SECTION_HEADER_SIZE
        name_raw = data[off : off + 8]
        vsize, va, rsize, roff = struct.unpack_from("<IIII", data, off + 8)
        chars = _u32(data, off + 36)
        if rsize > 0:
            if roff + rsize > len(data):
                raise MalformedPe(f"section {i} raw data extends past end of file")
            if roff % file_align:
                raise MalformedPe(f"section {i} raw offset not aligned")
            if roff < table_end:
                raise MalformedPe(f"section {i} raw data overlaps headers")
        headers.append(SectionHeader(name_raw, vsize, va, rsize, roff, chars))

    file_order = sorted(
        (i for i in range(nsec) if headers[i].raw_size > 0),
        key=lambda i: headers[i].raw_offset,
    )
    prev_end = table_end
    gaps: list[bytes] = []
    head_pad = b""
    for k, idx in enumerate(file_order):
        h = headers[idx]
        if h.raw_offset < prev_end:
            raise MalformedPe(f"section {idx} overlaps preceding raw data")
        if k == 0:
            head_pad = data[prev_end : h.raw_offset]
            gaps.append(b"")
        else:
            gaps.append(data[prev_end : h.raw_offset])
        prev_end = h.raw_offset + h.raw_size
    last_end = prev_end if file_order else table_end

    sections = tuple(
        Section(h, data[h.raw_offset : h.raw_offset + h.raw_size] if h.raw_size else b"")
        for h in headers
    )

    trailing_start = last_end if file_order else table_end
    overlay_pre = data[trailing_start:]
    certificate = b""
    overlay_post = b""
    sec_dir = dirs[IMAGE_DIRECTORY_ENTRY_SECURITY] if len(dirs) > IMAGE_DIRECTORY_ENTRY_SECURITY else None
    if sec_dir is not None and (sec_dir.rva or sec_dir.size):
        # the security directory stores a file offset, not an RVA
        cert_off, cert_size = sec_dir.rva, sec_dir.size
        if cert_off == 0 or cert_size == 0:
            raise MalformedPe("half-empty certificate directory entry")
        if cert_off < trailing_start or cert_off + cert_size > len(data):
            raise MalformedPe("certificate range outside trailing data")
        overlay_pre = data[trailing_start:cert_off]
        certificate = data[cert_off : cert_off + cert_size]
        overlay_post = data[cert_off + cert_size :]

    return ParsedPe(
        head=data[:table_end],
        head_pad=head_pad,
        sections=sections,
        file_order=tuple(file_order),
        gaps=tuple(gaps),
        overlay_pre=overlay_pre,
        certificate=certificate,
        overlay_post=overlay_post,
        e_lfanew=e_lfanew,
        coff=CoffHeader(machine, nsec, timestamp, opt_size, characteristics),
        magic=magic,
        entry_point_rva=entry_point,
        section_alignment=section_align,
        file_alignment=file_align,
        image_size=image_size,
        size_of_headers=headers_size,
        checksum_value=checksum,
        data_directories=tuple(dirs),
    )


def serialize(p: ParsedPe) -> bytes:
    """Reassemble the chunks; inverse of parse."""
    out = bytearray(p.head)
    out += p.head_pad
    for k, idx in enumerate(p.file_order):
        out += p.gaps[k]
        h = p.sections[idx].header
        if len(out) != h.raw_offset:
            raise LayoutConflict(
                f"section {idx} content lands at 0x{len(out):x}, header says 0x{h.raw_offset:x}"
            )
        out += p.sections[idx].content
    out += p.overlay_pre
    out += p.certificate
    out += p.overlay_post
    return bytes(out)
