"""Functionality-preserving PE transformations and their feature footprints.

Each action edits bytes the Windows loader ignores or treats as metadata:
appended trailing data, section slack, spare section-table room, section
names, the checksum field, and the certificate/debug directories. Macro
actions move many bytes at once; each has a list of 1-byte reductions used
by the trace minimizer to pin down which detection feature reacted.

``apply`` is deterministic: an AppliedAction carries everything needed to
reproduce the edit (payload, target section, new section name), so replays
rebuild identical bytes. Randomness (content draws, target choice) lives in
the campaign layer.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import InvalidSubstitute, MalformedPe, NotApplicable
from .pe_model import (
    IMAGE_DIRECTORY_ENTRY_DEBUG,
    IMAGE_DIRECTORY_ENTRY_IMPORT,
    IMAGE_DIRECTORY_ENTRY_SECURITY,
    IMAGE_SCN_CNT_INITIALIZED_DATA,
    IMAGE_SCN_MEM_READ,
    OPT_IMAGE_SIZE_OFFSET,
    SECTION_HEADER_SIZE,
    ParsedPe,
    align_up,
    header_table_slack,
    parse,
    section_slack,
    section_slack_range,
    serialize,
)

DEFAULT_FILLER: int = 0x00
DEFAULT_ADDED_SECTION_NAME: bytes = b".pad0"
ADDED_SECTION_FLAGS: int = IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ


class Feature(enum.Enum):
    """Static detection features an action can perturb."""

    FILE_HASH = "file_hash"
    SECTION_HASH = "section_hash"
    SECTION_COUNT = "section_count"
    SECTION_NAME = "section_name"
    SECTION_PADDING = "section_padding"
    DEBUG_INFO = "debug_info"
    CHECKSUM = "checksum"
    CERTIFICATE = "certificate"
    CODE_SEQUENCE = "code_sequence"  # out of scope: no action touches code
    DATA_DISTRIBUTION = "data_distribution"


FEATURE_LABELS: dict[Feature, str] = {
    Feature.FILE_HASH: "File Hash",
    Feature.SECTION_HASH: "Section Hash",
    Feature.SECTION_COUNT: "Section Count",
    Feature.SECTION_NAME: "Section Name",
    Feature.SECTION_PADDING: "Section Padding",
    Feature.DEBUG_INFO: "Debug Info",
    Feature.CHECKSUM: "Checksum",
    Feature.CERTIFICATE: "Certificate",
    Feature.CODE_SEQUENCE: "Code Sequence",
    Feature.DATA_DISTRIBUTION: "Data Distribution",
}


class ActionKind(enum.Enum):
    OVERLAY_APPEND = "overlay_append"
    SLACK_APPEND = "slack_append"
    SECTION_ADD = "section_add"
    SECTION_RENAME = "section_rename"
    CERT_REMOVE = "cert_remove"
    DEBUG_REMOVE = "debug_remove"
    CHECKSUM_BREAK = "checksum_break"
    OVERLAY_APPEND_BYTE = "overlay_append_byte"
    SLACK_APPEND_BYTE = "slack_append_byte"
    SECTION_ADD_BYTE = "section_add_byte"
    SECTION_RENAME_BYTE = "section_rename_byte"
    CODE_SLACK_BYTE = "code_slack_byte"

    @property
    def is_micro(self) -> bool:
        return self in MICRO_KINDS


MACRO_KINDS: frozenset[ActionKind] = frozenset(
    {
        ActionKind.OVERLAY_APPEND,
        ActionKind.SLACK_APPEND,
        ActionKind.SECTION_ADD,
        ActionKind.SECTION_RENAME,
        ActionKind.CERT_REMOVE,
        ActionKind.DEBUG_REMOVE,
        ActionKind.CHECKSUM_BREAK,
    }
)
MICRO_KINDS: frozenset[ActionKind] = frozenset(
    {
        ActionKind.OVERLAY_APPEND_BYTE,
        ActionKind.SLACK_APPEND_BYTE,
        ActionKind.SECTION_ADD_BYTE,
        ActionKind.SECTION_RENAME_BYTE,
        ActionKind.CODE_SLACK_BYTE,
    }
)

AFFECTED_FEATURES: dict[ActionKind, frozenset[Feature]] = {
    ActionKind.OVERLAY_APPEND: frozenset({Feature.FILE_HASH, Feature.DATA_DISTRIBUTION}),
    ActionKind.SLACK_APPEND: frozenset(
        {Feature.FILE_HASH, Feature.SECTION_HASH, Feature.SECTION_PADDING}
    ),
    ActionKind.SECTION_ADD: frozenset(
        {Feature.FILE_HASH, Feature.SECTION_COUNT, Feature.DATA_DISTRIBUTION}
    ),
    ActionKind.SECTION_RENAME: frozenset({Feature.FILE_HASH, Feature.SECTION_NAME}),
    ActionKind.CERT_REMOVE: frozenset({Feature.FILE_HASH, Feature.CERTIFICATE}),
    ActionKind.DEBUG_REMOVE: frozenset(
        {Feature.FILE_HASH, Feature.SECTION_HASH, Feature.DEBUG_INFO}
    ),
    ActionKind.CHECKSUM_BREAK: frozenset({Feature.FILE_HASH, Feature.CHECKSUM}),
    ActionKind.OVERLAY_APPEND_BYTE: frozenset({Feature.FILE_HASH}),
    ActionKind.SLACK_APPEND_BYTE: frozenset({Feature.FILE_HASH, Feature.SECTION_HASH}),
    ActionKind.SECTION_ADD_BYTE: frozenset({Feature.FILE_HASH, Feature.SECTION_COUNT}),
    ActionKind.SECTION_RENAME_BYTE: frozenset({Feature.FILE_HASH, Feature.SECTION_NAME}),
    ActionKind.CODE_SLACK_BYTE: frozenset({Feature.FILE_HASH, Feature.SECTION_HASH}),
}

# substitute search order for each macro, cheapest footprint first
MICRO_CANDIDATES: dict[ActionKind, tuple[ActionKind, ...]] = {
    ActionKind.SLACK_APPEND: (
        ActionKind.OVERLAY_APPEND_BYTE,
        ActionKind.SLACK_APPEND_BYTE,
    ),
    ActionKind.SECTION_ADD: (
        ActionKind.OVERLAY_APPEND_BYTE,
        ActionKind.SECTION_ADD_BYTE,
        ActionKind.OVERLAY_APPEND,
    ),
    ActionKind.DEBUG_REMOVE: (
        ActionKind.OVERLAY_APPEND_BYTE,
        ActionKind.CODE_SLACK_BYTE,
    ),
    ActionKind.SECTION_RENAME: (
        ActionKind.OVERLAY_APPEND_BYTE,
        ActionKind.SECTION_RENAME_BYTE,
    ),
    ActionKind.OVERLAY_APPEND: (ActionKind.OVERLAY_APPEND_BYTE,),
    ActionKind.CHECKSUM_BREAK: (ActionKind.OVERLAY_APPEND_BYTE,),
    ActionKind.CERT_REMOVE: (ActionKind.OVERLAY_APPEND_BYTE,),
}


def affected_features(kind: ActionKind) -> frozenset[Feature]:
    return AFFECTED_FEATURES[kind]


def micro_candidates(kind: ActionKind) -> tuple[ActionKind, ...]:
    if kind not in MACRO_KINDS:
        raise InvalidSubstitute(f"{kind.value} is not a macro action")
    return MICRO_CANDIDATES[kind]


# ----------------------------------------------------------------------
# payloads and applied actions


@dataclass(frozen=True)
class ContentPayload:
    data: bytes
    content_id: str


@dataclass(frozen=True)
class NamePayload:
    name: bytes  # at most 8 ASCII bytes
    name_id: str


Payload = ContentPayload | NamePayload | None


@dataclass(frozen=True)
class AppliedAction:
    kind: ActionKind
    payload: Payload = None
    target: int | None = None  # section index for slack and rename edits
    new_name: bytes | None = None  # name of an added section

    def describe(self) -> str:
        bits = [self.kind.value]
        if isinstance(self.payload, ContentPayload):
            bits.append(f"content={self.payload.content_id}")
        elif isinstance(self.payload, NamePayload):
            bits.append(f"name={self.payload.name.decode('ascii', 'replace')}")
        if self.target is not None:
            bits.append(f"section={self.target}")
        if self.new_name is not None:
            bits.append(f"new={self.new_name.decode('ascii', 'replace')}")
        return " ".join(bits)


def infer_feature(
    macro: ActionKind, substitute: ActionKind | None
) -> frozenset[Feature]:
    """Feature(s) responsible, given which reduction still evaded.

    A surviving 1-byte overlay append means any byte change sufficed: the
    file hash. A surviving kind-specific micro isolates that kind's narrow
    feature. No surviving substitute means the macro's full effect was
    needed, which points at its distinctive feature(s).
    """
    if macro in MICRO_KINDS and substitute is None:
        return AFFECTED_FEATURES[macro]
    if macro not in MACRO_KINDS:
        raise InvalidSubstitute(f"{macro.value} is not a macro action")
    if substitute is None:
        fallthrough = {
            ActionKind.SLACK_APPEND: frozenset({Feature.SECTION_PADDING}),
            ActionKind.SECTION_ADD: frozenset(
                {Feature.SECTION_COUNT, Feature.DATA_DISTRIBUTION}
            ),
            ActionKind.DEBUG_REMOVE: frozenset({Feature.DEBUG_INFO}),
            # full or partial name match; reports flag the sub-case
            ActionKind.SECTION_RENAME: frozenset({Feature.SECTION_NAME}),
            ActionKind.OVERLAY_APPEND: frozenset({Feature.DATA_DISTRIBUTION}),
            ActionKind.CHECKSUM_BREAK: frozenset({Feature.CHECKSUM}),
            ActionKind.CERT_REMOVE: frozenset({Feature.CERTIFICATE}),
        }
        return fallthrough[macro]
    if substitute not in MICRO_CANDIDATES[macro]:
        raise InvalidSubstitute(
            f"{substitute.value} does not substitute {macro.value}"
        )
    if substitute is ActionKind.OVERLAY_APPEND_BYTE:
        return frozenset({Feature.FILE_HASH})
    narrowed = {
        (ActionKind.SLACK_APPEND, ActionKind.SLACK_APPEND_BYTE): Feature.SECTION_HASH,
        (ActionKind.SECTION_ADD, ActionKind.SECTION_ADD_BYTE): Feature.SECTION_COUNT,
        (ActionKind.SECTION_ADD, ActionKind.OVERLAY_APPEND): Feature.DATA_DISTRIBUTION,
        (ActionKind.DEBUG_REMOVE, ActionKind.CODE_SLACK_BYTE): Feature.SECTION_HASH,
        (ActionKind.SECTION_RENAME, ActionKind.SECTION_RENAME_BYTE): Feature.SECTION_NAME,
    }
    return frozenset({narrowed[(macro, substitute)]})


def build_substitute(act: AppliedAction, micro: ActionKind) -> AppliedAction:
    """Reduced action standing in for ``act``, inheriting target and payload
    where the reduction needs them."""
    if micro not in micro_candidates(act.kind):
        raise InvalidSubstitute(f"{micro.value} does not substitute {act.kind.value}")
    if micro is ActionKind.OVERLAY_APPEND_BYTE:
        return AppliedAction(micro)
    if micro is ActionKind.SLACK_APPEND_BYTE:
        return AppliedAction(micro, target=act.target)
    if micro is ActionKind.SECTION_ADD_BYTE:
        return AppliedAction(micro, new_name=act.new_name)
    if micro is ActionKind.SECTION_RENAME_BYTE:
        return AppliedAction(micro, target=act.target)
    if micro is ActionKind.CODE_SLACK_BYTE:
        return AppliedAction(micro)
    # overlay append standing in for section add reuses the same content
    return AppliedAction(micro, payload=act.payload)


# ----------------------------------------------------------------------
# applicability


def applicable(p: ParsedPe, kind: ActionKind) -> bool:
    if kind in (
        ActionKind.OVERLAY_APPEND,
        ActionKind.OVERLAY_APPEND_BYTE,
        ActionKind.CHECKSUM_BREAK,
    ):
        return True
    if kind in (ActionKind.SLACK_APPEND, ActionKind.SLACK_APPEND_BYTE):
        return any(section_slack(p, i) >= 1 for i in range(len(p.sections)))
    if kind is ActionKind.CODE_SLACK_BYTE:
        return any(
            s.header.executable and section_slack(p, i) >= 1
            for i, s in enumerate(p.sections)
        )
    if kind in (ActionKind.SECTION_ADD, ActionKind.SECTION_ADD_BYTE):
        return header_table_slack(p) >= SECTION_HEADER_SIZE
    if kind in (ActionKind.SECTION_RENAME, ActionKind.SECTION_RENAME_BYTE):
        return len(p.sections) > 0
    if kind is ActionKind.CERT_REMOVE:
        d = p.directory(IMAGE_DIRECTORY_ENTRY_SECURITY)
        return d is not None and d.present
    if kind is ActionKind.DEBUG_REMOVE:
        d = p.directory(IMAGE_DIRECTORY_ENTRY_DEBUG)
        return d is not None and d.present
    raise NotApplicable(f"unknown action kind {kind!r}")


def _pick_slack_target(p: ParsedPe, executable_only: bool = False) -> int:
    best, best_slack = None, 0
    for i, s in enumerate(p.sections):
        if executable_only and not s.header.executable:
            continue
        slack = section_slack(p, i)
        if executable_only:
            if slack >= 1 and best is None:  # first code section with room
                return i
        elif slack > best_slack:
            best, best_slack = i, slack
    if executable_only or best is None:
        raise NotApplicable("no section with usable slack")
    return best


def load_name_list(path: str | Path | None = None) -> tuple[bytes, ...]:
    """Section names for renames and additions, one per line, max 8 bytes."""
    if path is None:
        text = resources.files("pebandit").joinpath("data/benign_names.txt").read_text("ascii")
    else:
        text = Path(path).read_text("ascii")
    names: list[bytes] = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        raw = line.encode("ascii")
        if len(raw) > 8:
            raise NotApplicable(f"name {line!r} longer than 8 bytes")
        names.append(raw)
    if not names:
        raise NotApplicable("name list is empty")
    return tuple(names)


def bump_name_byte(b: int) -> int:
    """Deterministic 1-byte name mutation: +1 within printable ASCII."""
    if b == 0:
        return ord(".")
    if 0x21 <= b <= 0x7E:
        return 0x21 + (b - 0x21 + 1) % 0x5E
    nxt = (b + 1) % 256
    return nxt if nxt else 1


# ----------------------------------------------------------------------
# apply


def apply(p: ParsedPe, act: AppliedAction, filler: int = DEFAULT_FILLER) -> ParsedPe:
    """Apply one action; returns the reparsed result, never mutates ``p``."""
    kind = act.kind
    img = bytearray(serialize(p))

    if kind is ActionKind.OVERLAY_APPEND:
        if not isinstance(act.payload, ContentPayload) or not act.payload.data:
            raise NotApplicable("overlay append needs content")
        img += act.payload.data

    elif kind is ActionKind.OVERLAY_APPEND_BYTE:
        img += bytes([filler])

    elif kind is ActionKind.SLACK_APPEND:
        if not isinstance(act.payload, ContentPayload) or not act.payload.data:
            raise NotApplicable("slack append needs content")
        tgt = act.target if act.target is not None else _pick_slack_target(p)
        start, end = section_slack_range(p, tgt)
        if end - start < 1:
            raise NotApplicable(f"section {tgt} has no slack")
        chunk = act.payload.data[: end - start]
        img[start : start + len(chunk)] = chunk

    elif kind in (ActionKind.SLACK_APPEND_BYTE, ActionKind.CODE_SLACK_BYTE):
        exec_only = kind is ActionKind.CODE_SLACK_BYTE
        tgt = act.target if act.target is not None else _pick_slack_target(p, exec_only)
        if exec_only and not p.sections[tgt].header.executable:
            raise NotApplicable(f"section {tgt} is not executable")
        start, end = section_slack_range(p, tgt)
        if end - start < 1:
            raise NotApplicable(f"section {tgt} has no slack")
        # a padding signature sits at the slack's start; the 1-byte probe
        # must not disturb it, so it lands on the last slack byte
        img[end - 1] = filler

    elif kind is ActionKind.SECTION_RENAME:
        if not isinstance(act.payload, NamePayload):
            raise NotApplicable("rename needs a name payload")
        if act.target is None:
            raise NotApplicable("rename needs a target section")
        if len(act.payload.name) > 8:
            raise NotApplicable("section names cap at 8 bytes")
        off = p.section_header_offset(act.target)
        img[off : off + 8] = act.payload.name.ljust(8, b"\x00")

    elif kind is ActionKind.SECTION_RENAME_BYTE:
        if act.target is None:
            raise NotApplicable("rename needs a target section")
        off = p.section_header_offset(act.target)
        img[off] = bump_name_byte(img[off])

    elif kind is ActionKind.CHECKSUM_BREAK:
        struct.pack_into("<I", img, p.checksum_field_offset, 0)

    elif kind is ActionKind.CERT_REMOVE:
        d = p.directory(IMAGE_DIRECTORY_ENTRY_SECURITY)
        if d is None or not d.present:
            raise NotApplicable("no certificate to remove")
        start = d.rva  # file offset for this directory
        img[start : start + d.size] = bytes(d.size)
        struct.pack_into("<II", img, d.field_offset, 0, 0)

    elif kind is ActionKind.DEBUG_REMOVE:
        d = p.directory(IMAGE_DIRECTORY_ENTRY_DEBUG)
        if d is None or not d.present:
            raise NotApplicable("no debug directory to remove")
        off = p.rva_to_offset(d.rva)
        if off is not None:
            img[off : off + d.size] = bytes(d.size)
        struct.pack_into("<II", img, d.field_offset, 0, 0)

    elif kind in (ActionKind.SECTION_ADD, ActionKind.SECTION_ADD_BYTE):
        if kind is ActionKind.SECTION_ADD:
            if not isinstance(act.payload, ContentPayload) or not act.payload.data:
                raise NotApplicable("section add needs content")
            content = act.payload.data
        else:
            content = bytes([filler])
        name = act.new_name if act.new_name is not None else DEFAULT_ADDED_SECTION_NAME
        img = _add_section(p, img, name, content)

    else:
        raise NotApplicable(f"unknown action kind {kind!r}")

    try:
        return parse(bytes(img))
    except MalformedPe as exc:  # a surgery bug, not a caller error
        raise NotApplicable(f"edit produced unparseable bytes: {exc}") from exc


def _add_section(p: ParsedPe, img: bytearray, name: bytes, content: bytes) -> bytearray:
    if header_table_slack(p) < SECTION_HEADER_SIZE:
        raise NotApplicable("no room left in the section table")
    if len(name) > 8:
        raise NotApplicable("section names cap at 8 bytes")
    fa, sa = p.file_alignment, p.section_alignment

    last_end = p.last_raw_end
    new_roff = align_up(last_end, fa)
    raw_size = align_up(len(content), fa)
    vsize = len(content)
    top = max(
        (s.header.virtual_address + max(s.header.virtual_size, s.header.raw_size)
         for s in p.sections),
        default=sa,
    )
    new_va = align_up(top, sa)

    entry = name.ljust(8, b"\x00") + struct.pack(
        "<IIIIIIHHI", vsize, new_va, raw_size, new_roff, 0, 0, 0, 0, ADDED_SECTION_FLAGS
    )
    img[p.table_end : p.table_end + SECTION_HEADER_SIZE] = entry

    coff_off = p.e_lfanew + 4
    struct.pack_into("<H", img, coff_off + 2, p.coff.section_count + 1)
    new_image_size = align_up(new_va + max(vsize, 1), sa)
    struct.pack_into("<I", img, p.opt_offset + OPT_IMAGE_SIZE_OFFSET, new_image_size)

    inserted = (new_roff - last_end) + raw_size
    d = p.directory(IMAGE_DIRECTORY_ENTRY_SECURITY)
    if d is not None and d.present:
        struct.pack_into("<I", img, d.field_offset, d.rva + inserted)

    blob = bytes(new_roff - last_end) + content + bytes(raw_size - len(content))
    return img[:last_end] + blob + img[last_end:]


# ----------------------------------------------------------------------
# functionality validation


def _allowed_ranges(original: ParsedPe, section_index: int) -> list[tuple[int, int]]:
    """Per-section content ranges that may legitimately change in place."""
    ranges: list[tuple[int, int]] = []
    d = original.directory(IMAGE_DIRECTORY_ENTRY_DEBUG)
    if d is not None and d.present:
        h = original.sections[section_index].header
        off = original.rva_to_offset(d.rva)
        if off is not None and h.raw_offset <= off < h.raw_offset + h.raw_size:
            rel = off - h.raw_offset
            ranges.append((rel, rel + d.size))
    return ranges


def _masked(data: bytes, ranges: list[tuple[int, int]]) -> bytes:
    if not ranges:
        return data
    buf = bytearray(data)
    for start, end in ranges:
        start, end = max(start, 0), min(end, len(buf))
        buf[start:end] = bytes(max(end - start, 0))
    return bytes(buf)


def validate_functionality(original: ParsedPe, rewritten: ParsedPe) -> bool:
    """Structural check that a rewrite kept the loader-visible program intact.

    Verifies: the result reparses, the entry point and import directory are
    untouched, every original section still maps the same bytes at the same
    virtual address (slack and the declared debug region excepted), and the
    original overlay survives as a prefix of the new one.
    """
    try:
        current = parse(serialize(rewritten))
    except MalformedPe:
        return False

    if current.entry_point_rva != original.entry_point_rva:
        return False

    imp_a = original.directory(IMAGE_DIRECTORY_ENTRY_IMPORT)
    imp_b = current.directory(IMAGE_DIRECTORY_ENTRY_IMPORT)
    rva_a = (imp_a.rva, imp_a.size) if imp_a else (0, 0)
    rva_b = (imp_b.rva, imp_b.size) if imp_b else (0, 0)
    if rva_a != rva_b:
        return False
    if imp_a is not None and imp_a.present:
        off_a = original.rva_to_offset(imp_a.rva)
        off_b = current.rva_to_offset(imp_a.rva)
        if (off_a is None) != (off_b is None):
            return False
        if off_a is not None:
            raw_a = serialize(original)[off_a : off_a + imp_a.size]
            raw_b = serialize(current)[off_b : off_b + imp_a.size]
            if raw_a != raw_b:
                return False

    if len(current.sections) < len(original.sections):
        return False
    for i, sec in enumerate(original.sections):
        cur = current.sections[i]
        if cur.header.virtual_address != sec.header.virtual_address:
            return False
        if cur.header.virtual_size != sec.header.virtual_size:
            return False
        used = sec.header.used_extent
        if sec.content[:used] != cur.content[:used]:
            ranges = _allowed_ranges(original, i)
            if _masked(sec.content[:used], ranges) != _masked(cur.content[:used], ranges):
                return False

    if not current.overlay.startswith(original.overlay):
        return False
    return True
