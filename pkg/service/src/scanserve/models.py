"""Toy detection models for the reference scan service.

Both models work on raw request bytes and never raise on malformed
input: a scanner that cannot make sense of a file simply finds nothing
suspicious in it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass


class ModelError(ValueError):
    """A model specifier or parameter that cannot be used."""


PE_SIGNATURE = b"PE\0\0"
SECTION_HEADER_SIZE = 40
_DOS_HEADER_SIZE = 64
_PE_OFFSET_FIELD = 0x3C


@dataclass(frozen=True)
class ByteMean:
    """Flag any body whose average byte value exceeds the threshold."""

    threshold: float

    def __post_init__(self):
        if not 0 < self.threshold < 255:
            raise ModelError(
                f"byte-mean threshold must lie strictly between 0 and 255, got {self.threshold}"
            )

    def is_malicious(self, data: bytes) -> bool:
        if not data:
            return False
        return sum(data) / len(data) > self.threshold


def scan_section_names(data: bytes) -> tuple[bytes, ...]:
    """Best-effort section names via the shortest possible header walk.

    DOS magic, the PE-offset field, the COFF section count and optional
    header size are all that gets read; no directory, no alignment, no
    sanity checks beyond staying inside the buffer. Anything that does
    not look like a PE yields no names instead of an error, and a
    truncated section table yields the entries that fit.
    """
    if len(data) < _DOS_HEADER_SIZE or data[:2] != b"MZ":
        return ()
    pe_offset = struct.unpack_from("<I", data, _PE_OFFSET_FIELD)[0]
    if pe_offset + 24 > len(data) or data[pe_offset : pe_offset + 4] != PE_SIGNATURE:
        return ()
    section_count = struct.unpack_from("<H", data, pe_offset + 6)[0]
    optional_size = struct.unpack_from("<H", data, pe_offset + 20)[0]
    table = pe_offset + 24 + optional_size
    names = []
    for i in range(section_count):
        entry = table + i * SECTION_HEADER_SIZE
        if entry + SECTION_HEADER_SIZE > len(data):
            break
        names.append(data[entry : entry + 8].rstrip(b"\0"))
    return tuple(names)


@dataclass(frozen=True)
class NameBlocklist:
    """Flag any body carrying a section named on the blocklist."""

    names: tuple[bytes, ...]

    def __post_init__(self):
        if not self.names:
            raise ModelError("name blocklist needs at least one name")
        for name in self.names:
            if not name or len(name) > 8:
                raise ModelError(f"blocklisted name must be 1-8 bytes, got {name!r}")

    def is_malicious(self, data: bytes) -> bool:
        present = scan_section_names(data)
        return any(name in present for name in self.names)


def parse_model_spec(text: str) -> ByteMean | NameBlocklist:
    """Build a model from its CLI form.

    ``byte-mean:<threshold>`` or ``name-blocklist:<name>[,<name>...]``.
    """
    kind, _, rest = text.partition(":")
    if kind == "byte-mean":
        try:
            threshold = float(rest)
        except ValueError:
            raise ModelError(f"byte-mean needs a numeric threshold, got {rest!r}") from None
        return ByteMean(threshold)
    if kind == "name-blocklist":
        names = tuple(
            part.strip().encode("latin-1") for part in rest.split(",") if part.strip()
        )
        return NameBlocklist(names)
    raise ModelError(f"unknown model {kind!r}; expected byte-mean or name-blocklist")
