"""Scan oracles: the blackbox endpoints a search campaign queries.

Two families behind one ``classify(data) -> Label`` protocol:

* builtin surrogates, each keyed to a single detectable trait (file hash,
  section hash, section count, ...) so campaigns can be exercised against a
  known ground truth without any real scanner, and
* a remote HTTP client speaking a deliberately tiny JSON protocol, for
  pointing the same campaign at an external classifier service.

Every oracle call is metered through a Budget; an exhausted budget raises
before the oracle is reached, and a failed remote call still costs the
attempt it consumed.
"""

from __future__ import annotations

import enum
import hashlib
import threading
import time
from dataclasses import dataclass, field

import requests

from .errors import (
    BudgetExhausted,
    InvalidParams,
    PeError,
    ProtocolError,
    RemoteUnavailable,
)
from .pe_model import (
    IMAGE_DIRECTORY_ENTRY_DEBUG,
    IMAGE_DIRECTORY_ENTRY_SECURITY,
    ParsedPe,
    parse,
)


class Label(enum.Enum):
    MALICIOUS = "malicious"
    BENIGN = "benign"


@dataclass
class Budget:
    """Attempt meter shared by one origin sample's whole campaign."""

    max_attempts: int = 60
    used: int = 0
    phases: dict[str, int] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def consume(self, phase: str = "generation") -> int:
        """Returns the 1-based index of the attempt just spent."""
        with self._lock:
            if self.used >= self.max_attempts:
                raise BudgetExhausted(f"attempt cap {self.max_attempts} reached")
            self.used += 1
            self.phases[phase] = self.phases.get(phase, 0) + 1
            return self.used

    @property
    def remaining(self) -> int:
        return self.max_attempts - self.used


@dataclass(frozen=True)
class ScanResult:
    label: Label
    latency: float  # seconds spent inside the oracle call
    attempt_index: int  # 1-based within the budget; 0 when unmetered


def scan(
    oracle: Oracle, data: bytes, budget: Budget | None = None, phase: str = "generation"
) -> ScanResult:
    """One metered classification. The attempt is spent even when the
    oracle call itself fails afterwards."""
    attempt = budget.consume(phase) if budget is not None else 0
    started = time.perf_counter()
    label = oracle.classify(data)
    return ScanResult(label, time.perf_counter() - started, attempt)


# ----------------------------------------------------------------------
# builtin surrogates


class Oracle:
    name = "oracle"

    def classify(self, data: bytes) -> Label:
        raise NotImplementedError

    def healthy(self) -> bool:
        return True


def _parse_or_none(data: bytes) -> ParsedPe | None:
    try:
        return parse(data)
    except PeError:
        return None


class FileHashBlocklist(Oracle):
    """Flags exact files: sha256 of the full byte string against a blocklist."""

    name = "file_hash_blocklist"

    def __init__(self, digests: set[str]):
        self.digests = {d.lower() for d in digests}

    def classify(self, data: bytes) -> Label:
        if hashlib.sha256(data).hexdigest() in self.digests:
            return Label.MALICIOUS
        return Label.BENIGN


class SectionHashBlocklist(Oracle):
    """Flags any section whose raw content (slack included) hashes onto the
    blocklist. Files that do not parse are flagged outright."""

    name = "section_hash_blocklist"

    def __init__(self, digests: set[str]):
        self.digests = {d.lower() for d in digests}

    def classify(self, data: bytes) -> Label:
        pe = _parse_or_none(data)
        if pe is None:
            return Label.MALICIOUS
        for sec in pe.sections:
            if hashlib.sha256(sec.content).hexdigest() in self.digests:
                return Label.MALICIOUS
        return Label.BENIGN


class SectionCountRule(Oracle):
    name = "section_count_rule"

    def __init__(self, count: int):
        self.count = count

    def classify(self, data: bytes) -> Label:
        pe = _parse_or_none(data)
        if pe is None:
            return Label.MALICIOUS
        return Label.MALICIOUS if pe.coff.section_count == self.count else Label.BENIGN


class SectionNameRule(Oracle):
    name = "section_name_rule"

    def __init__(self, names: set[str | bytes]):
        self.names = {n.encode("ascii") if isinstance(n, str) else bytes(n) for n in names}

    def classify(self, data: bytes) -> Label:
        pe = _parse_or_none(data)
        if pe is None:
            return Label.MALICIOUS
        if any(sec.header.name in self.names for sec in pe.sections):
            return Label.MALICIOUS
        return Label.BENIGN


class PaddingSignature(Oracle):
    """Flags a byte pattern occurring inside any section's slack region."""

    name = "padding_signature"

    def __init__(self, pattern: bytes):
        if not pattern:
            raise InvalidParams("empty padding pattern")
        self.pattern = pattern

    def classify(self, data: bytes) -> Label:
        pe = _parse_or_none(data)
        if pe is None:
            return Label.MALICIOUS
        for sec in pe.sections:
            if self.pattern in sec.content[sec.header.used_extent :]:
                return Label.MALICIOUS
        return Label.BENIGN


class DebugInfoRule(Oracle):
    name = "debug_info_rule"

    def classify(self, data: bytes) -> Label:
        pe = _parse_or_none(data)
        if pe is None:
            return Label.MALICIOUS
        if pe.directory(IMAGE_DIRECTORY_ENTRY_DEBUG).present:
            return Label.MALICIOUS
        return Label.BENIGN


class ChecksumRule(Oracle):
    name = "checksum_rule"

    def classify(self, data: bytes) -> Label:
        pe = _parse_or_none(data)
        if pe is None:
            return Label.MALICIOUS
        return Label.MALICIOUS if pe.checksum_value != 0 else Label.BENIGN


class CertificateRule(Oracle):
    name = "certificate_rule"

    def classify(self, data: bytes) -> Label:
        pe = _parse_or_none(data)
        if pe is None:
            return Label.MALICIOUS
        if pe.directory(IMAGE_DIRECTORY_ENTRY_SECURITY).present:
            return Label.MALICIOUS
        return Label.BENIGN


class ByteMeanModel(Oracle):
    """Toy statistical model: mean byte value above the threshold flags the
    file. Works on raw bytes, no parsing involved."""

    name = "byte_mean_model"

    def __init__(self, threshold: float):
        self.threshold = threshold

    def classify(self, data: bytes) -> Label:
        if not data:
            return Label.BENIGN
        mean = sum(data) / len(data)
        return Label.MALICIOUS if mean > self.threshold else Label.BENIGN


def _digest_set_from_file(path: str) -> set[str]:
    digests = set()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if len(line) != 64 or any(c not in "0123456789abcdefABCDEF" for c in line):
                    raise InvalidParams(f"not a sha256 hex digest: {line!r}")
                digests.add(line.lower())
    except OSError as exc:
        raise InvalidParams(f"cannot read digest list {path}: {exc}") from exc
    if not digests:
        raise InvalidParams(f"digest list {path} is empty")
    return digests


def _build_builtin(name: str, params: str | None) -> Oracle:
    def need(what: str) -> str:
        if params is None:
            raise InvalidParams(f"{name} needs {what}")
        return params

    if name == "file_hash_blocklist":
        return FileHashBlocklist(_digest_set_from_file(need("a digest-list path")))
    if name == "section_hash_blocklist":
        return SectionHashBlocklist(_digest_set_from_file(need("a digest-list path")))
    if name == "section_count_rule":
        try:
            return SectionCountRule(int(need("a section count")))
        except ValueError as exc:
            raise InvalidParams(f"bad section count: {params!r}") from exc
    if name == "section_name_rule":
        names = {n for n in need("a comma separated name list").split(",") if n}
        if not names:
            raise InvalidParams("empty section name list")
        return SectionNameRule(names)
    if name == "padding_signature":
        try:
            return PaddingSignature(bytes.fromhex(need("a hex pattern")))
        except ValueError as exc:
            raise InvalidParams(f"bad hex pattern: {params!r}") from exc
    if name == "debug_info_rule":
        return DebugInfoRule()
    if name == "checksum_rule":
        return ChecksumRule()
    if name == "certificate_rule":
        return CertificateRule()
    if name == "byte_mean_model":
        try:
            return ByteMeanModel(float(need("a threshold")))
        except ValueError as exc:
            raise InvalidParams(f"bad threshold: {params!r}") from exc
    raise InvalidParams(f"unknown builtin oracle {name!r}")


BUILTIN_NAMES = (
    "file_hash_blocklist",
    "section_hash_blocklist",
    "section_count_rule",
    "section_name_rule",
    "padding_signature",
    "debug_info_rule",
    "checksum_rule",
    "certificate_rule",
    "byte_mean_model",
)


# ----------------------------------------------------------------------
# remote oracle


class RemoteOracle(Oracle):
    """Client for the one-endpoint scan protocol.

    POST {base}/scan with the raw bytes; the reply must be exactly
    ``{"label": "malicious"}`` or ``{"label": "benign"}``. Anything else
    from a live server is a protocol violation, not a retry case; only
    transport failures are retried.
    """

    name = "remote"

    def __init__(self, url: str, timeout: float = 5.0, retries: int = 2, backoff: float = 0.05):
        self.base = url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def _post(self, data: bytes) -> requests.Response:
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                return requests.post(
                    f"{self.base}/scan",
                    data=data,
                    headers={"Content-Type": "application/octet-stream"},
                    timeout=self.timeout,
                )
            except requests.RequestException as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(self.backoff)
        raise RemoteUnavailable(f"scan endpoint unreachable: {last}") from last

    def classify(self, data: bytes) -> Label:
        resp = self._post(data)
        if resp.status_code != 200:
            raise RemoteUnavailable(f"scan endpoint returned HTTP {resp.status_code}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise ProtocolError("scan reply is not JSON") from exc
        if not isinstance(body, dict) or set(body) != {"label"}:
            raise ProtocolError(f"scan reply must have exactly one key 'label', got {body!r}")
        value = body["label"]
        if value == "malicious":
            return Label.MALICIOUS
        if value == "benign":
            return Label.BENIGN
        raise ProtocolError(f"unknown label {value!r}")

    def healthy(self) -> bool:
        try:
            resp = requests.get(f"{self.base}/health", timeout=self.timeout)
        except requests.RequestException:
            return False
        if resp.status_code != 200:
            return False
        try:
            return resp.json() == {"status": "ok"}
        except ValueError:
            return False


# ----------------------------------------------------------------------
# spec strings


def make_oracle(text: str, timeout: float = 5.0, retries: int = 2) -> Oracle:
    """Build an oracle from its command-line form.

    ``builtin:<name>[:<params>]`` selects a surrogate; a plain
    ``http://...`` or ``https://...`` URL selects the remote client.
    """
    if text.startswith(("http://", "https://")):
        return RemoteOracle(text, timeout=timeout, retries=retries)
    if text.startswith("builtin:"):
        rest = text[len("builtin:") :]
        name, sep, params = rest.partition(":")
        return _build_builtin(name, params if sep else None)
    raise InvalidParams(
        f"oracle spec {text!r}: expected builtin:<name>[:<params>] or an http(s) URL"
    )
