"""Independent layout arithmetic used as a test oracle.

Recomputes where every region of a built fixture must land, straight from
the fixture parameters and the PE layout rules, without calling the parser.
Kept deliberately separate from the library so parser and builder bugs
cannot cancel out through shared code.
"""

from __future__ import annotations

from dataclasses import dataclass

from pebandit.fixtures import FixtureSpec


def _align(value: int, alignment: int) -> int:
    rem = value % alignment
    return value if rem == 0 else value + alignment - rem


@dataclass
class ExpectedLayout:
    e_lfanew: int
    opt_offset: int
    table_offset: int
    table_end: int
    size_of_headers: int
    checksum_offset: int
    raw_offsets: list[int]
    raw_end: int
    overlay_start: int
    overlay_len: int
    cert_offset: int
    cert_len: int
    file_len: int
    header_slack: int


def expected_layout(spec: FixtureSpec) -> ExpectedLayout:
    opt_size = 0xE0 if spec.format == "pe32" else 0xF0
    fixed = 4 + 20 + opt_size + 40 * len(spec.sections)
    if spec.packed_headers:
        e_lfanew = _align(64 + fixed, spec.file_alignment) - fixed
        soh = e_lfanew + fixed
    else:
        e_lfanew = spec.e_lfanew if spec.e_lfanew is not None else 0x80
        soh = _align(e_lfanew + fixed + spec.header_pad, spec.file_alignment)
    opt_offset = e_lfanew + 4 + 20
    table_offset = opt_offset + opt_size
    table_end = table_offset + 40 * len(spec.sections)

    raw_offsets: list[int] = []
    cursor = soh
    for s in spec.sections:
        if s.raw_size:
            cursor = _align(cursor, spec.file_alignment)
            raw_offsets.append(cursor)
            cursor += s.raw_size
        else:
            raw_offsets.append(0)
    raw_end = cursor

    overlay_len = len(spec.overlay) if isinstance(spec.overlay, bytes) else spec.overlay
    cert_len = (
        len(spec.certificate)
        if isinstance(spec.certificate, bytes)
        else _align(spec.certificate, 8) if spec.certificate else 0
    )
    cert_offset = raw_end + overlay_len if cert_len else 0
    first_raw = min((r for r in raw_offsets if r), default=table_end)
    return ExpectedLayout(
        e_lfanew=e_lfanew,
        opt_offset=opt_offset,
        table_offset=table_offset,
        table_end=table_end,
        size_of_headers=soh,
        checksum_offset=opt_offset + 64,
        raw_offsets=raw_offsets,
        raw_end=raw_end,
        overlay_start=raw_end,
        overlay_len=overlay_len,
        cert_offset=cert_offset,
        cert_len=cert_len,
        file_len=raw_end + overlay_len + cert_len,
        header_slack=first_raw - table_end,
    )


def diff_positions(a: bytes, b: bytes) -> list[int]:
    """Byte-diff oracle: differing positions within the common prefix."""
    return [i for i in range(min(len(a), len(b))) if a[i] != b[i]]
