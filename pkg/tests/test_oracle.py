"""Oracle gateway: spec strings, budget metering, surrogates, remote client.

Surrogate expectations are hand-computed (hashlib digests, byte means,
layout slices from the independent arithmetic in layout_oracle) and each
detector is also flipped by exactly the rewrite action built to affect it.
"""

import hashlib
import json
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
import requests

from pebandit.actions import (
    ActionKind,
    AppliedAction,
    ContentPayload,
    NamePayload,
    apply,
)
from pebandit.errors import (
    BudgetExhausted,
    InvalidParams,
    ProtocolError,
    RemoteUnavailable,
)
from pebandit.fixtures import FixtureSpec, SectionSpec, build_fixture
from pebandit.oracle import (
    BUILTIN_NAMES,
    Budget,
    ByteMeanModel,
    CertificateRule,
    ChecksumRule,
    DebugInfoRule,
    FileHashBlocklist,
    Label,
    PaddingSignature,
    RemoteOracle,
    SectionCountRule,
    SectionHashBlocklist,
    SectionNameRule,
    make_oracle,
    scan,
)
from pebandit.pe_model import parse, serialize

from conftest import plain_spec, rich_spec
from layout_oracle import expected_layout


def build(spec):
    return build_fixture(spec)


def rewrite(data, act):
    return serialize(apply(parse(data), act))


class TestSpecStrings:
    def test_every_builtin_name_is_constructible(self):
        samples = {
            "file_hash_blocklist": None,  # needs a real file, covered below
            "section_hash_blocklist": None,
            "section_count_rule": "builtin:section_count_rule:4",
            "section_name_rule": "builtin:section_name_rule:.evil,.bad",
            "padding_signature": "builtin:padding_signature:deadbeef",
            "debug_info_rule": "builtin:debug_info_rule",
            "checksum_rule": "builtin:checksum_rule",
            "certificate_rule": "builtin:certificate_rule",
            "byte_mean_model": "builtin:byte_mean_model:127.5",
        }
        assert set(samples) == set(BUILTIN_NAMES)
        for name, text in samples.items():
            if text is not None:
                oracle = make_oracle(text)
                assert oracle.name == name

    def test_digest_list_oracles_load_from_file(self, tmp_path):
        listing = tmp_path / "digests.txt"
        digest = hashlib.sha256(b"x").hexdigest()
        listing.write_text(f"# comment\n\n{digest}\n")
        oracle = make_oracle(f"builtin:file_hash_blocklist:{listing}")
        assert isinstance(oracle, FileHashBlocklist)
        assert oracle.digests == {digest}
        oracle = make_oracle(f"builtin:section_hash_blocklist:{listing}")
        assert isinstance(oracle, SectionHashBlocklist)

    def test_parameter_propagation(self):
        assert make_oracle("builtin:section_count_rule:7").count == 7
        assert make_oracle("builtin:byte_mean_model:150").threshold == 150.0
        assert make_oracle("builtin:padding_signature:CAFE").pattern == b"\xca\xfe"
        assert make_oracle("builtin:section_name_rule:.a,.b").names == {b".a", b".b"}

    def test_remote_specs(self):
        oracle = make_oracle("http://127.0.0.1:5555/")
        assert isinstance(oracle, RemoteOracle)
        assert oracle.base == "http://127.0.0.1:5555"
        assert isinstance(make_oracle("https://scanner.example"), RemoteOracle)

    def test_invalid_specs_rejected(self, tmp_path):
        empty = tmp_path / "empty.txt"
        empty.write_text("\n")
        bad = [
            "builtin:no_such_oracle",
            "builtin:section_count_rule",  # missing param
            "builtin:section_count_rule:many",
            "builtin:byte_mean_model:tall",
            "builtin:padding_signature:xyz",  # not hex
            "builtin:padding_signature:",
            "builtin:section_name_rule:",
            f"builtin:file_hash_blocklist:{tmp_path}/missing.txt",
            f"builtin:file_hash_blocklist:{empty}",
            "ftp://example.com",
            "byte_mean_model:150",
        ]
        for text in bad:
            with pytest.raises(InvalidParams):
                make_oracle(text)

    def test_digest_file_rejects_non_hex_lines(self, tmp_path):
        listing = tmp_path / "digests.txt"
        listing.write_text("nothex\n")
        with pytest.raises(InvalidParams):
            make_oracle(f"builtin:file_hash_blocklist:{listing}")


class TestBudget:
    def test_default_cap(self):
        assert Budget().max_attempts == 60

    def test_consume_counts_up_to_cap_then_raises(self):
        budget = Budget(max_attempts=3)
        for _ in range(3):
            budget.consume()
        assert budget.used == 3
        assert budget.remaining == 0
        with pytest.raises(BudgetExhausted):
            budget.consume()
        assert budget.used == 3  # the refused attempt is not counted

    def test_phase_tallies(self):
        budget = Budget(max_attempts=10)
        for _ in range(4):
            budget.consume("generation")
        for _ in range(2):
            budget.consume("minimization")
        assert budget.phases == {"generation": 4, "minimization": 2}
        assert budget.used == 6

    def test_scan_meters_the_oracle(self):
        budget = Budget(max_attempts=2)
        oracle = ByteMeanModel(threshold=10)
        first = scan(oracle, b"\xff", budget)
        assert first.label is Label.MALICIOUS
        assert first.attempt_index == 1
        second = scan(oracle, b"\x00", budget)
        assert second.label is Label.BENIGN
        assert second.attempt_index == 2
        with pytest.raises(BudgetExhausted):
            scan(oracle, b"\x00", budget)
        assert budget.used == 2

    def test_scan_records_latency(self):
        class Slow(ByteMeanModel):
            def classify(self, data):
                import time

                time.sleep(0.05)
                return super().classify(data)

        result = scan(Slow(threshold=10), b"\xff")
        assert result.label is Label.MALICIOUS
        assert result.latency >= 0.04
        assert result.attempt_index == 0  # unmetered call

    def test_failed_oracle_call_still_costs_the_attempt(self):
        class Exploding(ByteMeanModel):
            def classify(self, data):
                raise RemoteUnavailable("down")

        budget = Budget(max_attempts=5)
        with pytest.raises(RemoteUnavailable):
            scan(Exploding(threshold=0), b"x", budget)
        assert budget.used == 1

    def test_exact_counting_under_contention(self):
        budget = Budget(max_attempts=100)
        wins = []

        def worker(_):
            got = 0
            for _ in range(50):
                try:
                    budget.consume()
                    got += 1
                except BudgetExhausted:
                    pass
            return got

        with ThreadPoolExecutor(max_workers=8) as pex:
            wins = list(pex.map(worker, range(8)))
        assert sum(wins) == 100
        assert budget.used == 100


class TestFileHashBlocklist:
    def test_exact_file_match(self):
        data = build(plain_spec())
        other = build(plain_spec(seed=8))
        oracle = FileHashBlocklist({hashlib.sha256(data).hexdigest()})
        assert oracle.classify(data) is Label.MALICIOUS
        assert oracle.classify(other) is Label.BENIGN

    def test_single_appended_byte_evades(self):
        data = build(plain_spec())
        oracle = FileHashBlocklist({hashlib.sha256(data).hexdigest()})
        evaded = rewrite(data, AppliedAction(ActionKind.OVERLAY_APPEND_BYTE))
        assert oracle.classify(evaded) is Label.BENIGN

    def test_garbage_is_not_flagged(self):
        oracle = FileHashBlocklist({hashlib.sha256(b"mz").hexdigest()})
        assert oracle.classify(b"garbage") is Label.BENIGN


class TestSectionHashBlocklist:
    def _blocked_on_text_section(self, spec):
        data = build(spec)
        layout = expected_layout(spec)
        start = layout.raw_offsets[0]
        raw = data[start : start + spec.sections[0].raw_size]
        return data, SectionHashBlocklist({hashlib.sha256(raw).hexdigest()})

    def test_blocks_on_raw_section_content(self):
        data, oracle = self._blocked_on_text_section(plain_spec())
        assert oracle.classify(data) is Label.MALICIOUS
        assert oracle.classify(build(plain_spec(seed=8))) is Label.BENIGN

    def test_slack_byte_in_blocked_section_evades(self):
        data, oracle = self._blocked_on_text_section(plain_spec())
        evaded = rewrite(
            data, AppliedAction(ActionKind.SLACK_APPEND_BYTE, target=0)
        )
        assert oracle.classify(evaded) is Label.BENIGN

    def test_slack_byte_in_other_section_does_not_evade(self):
        data, oracle = self._blocked_on_text_section(plain_spec())
        still = rewrite(data, AppliedAction(ActionKind.SLACK_APPEND_BYTE, target=1))
        assert oracle.classify(still) is Label.MALICIOUS

    def test_unparseable_input_is_flagged(self):
        _, oracle = self._blocked_on_text_section(plain_spec())
        assert oracle.classify(b"\x00" * 40) is Label.MALICIOUS


class TestSectionCountRule:
    def test_matches_exact_count(self):
        data = build(plain_spec())  # two sections
        assert SectionCountRule(2).classify(data) is Label.MALICIOUS
        assert SectionCountRule(3).classify(data) is Label.BENIGN

    def test_adding_a_section_evades(self):
        data = build(plain_spec())
        evaded = rewrite(
            data,
            AppliedAction(
                ActionKind.SECTION_ADD,
                payload=ContentPayload(b"\x55" * 64, "blob"),
                new_name=b".didat",
            ),
        )
        assert SectionCountRule(2).classify(evaded) is Label.BENIGN
        assert SectionCountRule(3).classify(evaded) is Label.MALICIOUS

    def test_unparseable_input_is_flagged(self):
        assert SectionCountRule(2).classify(b"MZ but short") is Label.MALICIOUS


class TestSectionNameRule:
    def _evil_spec(self):
        return FixtureSpec(
            sections=(
                SectionSpec(b".text", "code", 800, 1024),
                SectionSpec(b".evil", "data", 300, 512),
            ),
            seed=21,
        )

    def test_matches_exact_name(self):
        data = build(self._evil_spec())
        assert SectionNameRule({".evil"}).classify(data) is Label.MALICIOUS
        assert SectionNameRule({".wicked"}).classify(data) is Label.BENIGN

    def test_rename_evades(self):
        data = build(self._evil_spec())
        evaded = rewrite(
            data,
            AppliedAction(
                ActionKind.SECTION_RENAME,
                payload=NamePayload(b".calm", "name-calm"),
                target=1,
            ),
        )
        assert SectionNameRule({".evil"}).classify(evaded) is Label.BENIGN

    def test_single_name_byte_bump_evades(self):
        data = build(self._evil_spec())
        evaded = rewrite(data, AppliedAction(ActionKind.SECTION_RENAME_BYTE, target=1))
        assert SectionNameRule({".evil"}).classify(evaded) is Label.BENIGN


class TestPaddingSignature:
    def _spec(self):
        return FixtureSpec(
            sections=(
                SectionSpec(b".text", "code", 1200, 1536, slack_fill=b"\xcd"),
                SectionSpec(b".data", "data", 700, 1024),
            ),
            seed=7,
        )

    def test_pattern_in_slack_is_flagged(self):
        data = build(self._spec())
        oracle = PaddingSignature(b"\xcd\xcd\xcd\xcd")
        assert oracle.classify(data) is Label.MALICIOUS
        assert oracle.classify(build(plain_spec())) is Label.BENIGN

    def test_pattern_in_used_content_is_not_slack(self):
        spec = FixtureSpec(
            sections=(
                SectionSpec(b".text", "code", 512, 512, content=b"\xcd" * 512),
                SectionSpec(b".data", "data", 100, 512),
            ),
            seed=7,
        )
        oracle = PaddingSignature(b"\xcd\xcd\xcd\xcd")
        assert oracle.classify(build(spec)) is Label.BENIGN

    def test_full_slack_overwrite_evades(self):
        data = build(self._spec())
        oracle = PaddingSignature(b"\xcd\xcd\xcd\xcd")
        evaded = rewrite(
            data,
            AppliedAction(
                ActionKind.SLACK_APPEND,
                payload=ContentPayload(b"\x00" * 336, "wipe"),
                target=0,
            ),
        )
        assert oracle.classify(evaded) is Label.BENIGN

    def test_single_slack_byte_lands_clear_of_the_signature(self):
        # the 1-byte probe writes at the far end of the slack, so a
        # signature at the slack's start survives it
        data = build(self._spec())
        oracle = PaddingSignature(b"\xcd\xcd\xcd\xcd")
        still = rewrite(data, AppliedAction(ActionKind.SLACK_APPEND_BYTE, target=0))
        assert oracle.classify(still) is Label.MALICIOUS

    def test_unparseable_input_is_flagged(self):
        assert PaddingSignature(b"\x01").classify(b"nope") is Label.MALICIOUS


class TestDebugInfoRule:
    def test_debug_directory_is_flagged(self):
        assert DebugInfoRule().classify(build(rich_spec())) is Label.MALICIOUS
        assert DebugInfoRule().classify(build(plain_spec())) is Label.BENIGN

    def test_debug_removal_evades(self):
        data = build(rich_spec())
        evaded = rewrite(data, AppliedAction(ActionKind.DEBUG_REMOVE))
        assert DebugInfoRule().classify(evaded) is Label.BENIGN


class TestChecksumRule:
    def test_nonzero_checksum_is_flagged(self):
        assert ChecksumRule().classify(build(plain_spec())) is Label.MALICIOUS
        zeroed = plain_spec()
        zeroed = FixtureSpec(sections=zeroed.sections, seed=zeroed.seed, checksum=0)
        assert ChecksumRule().classify(build(zeroed)) is Label.BENIGN

    def test_checksum_break_evades(self):
        data = build(plain_spec())
        evaded = rewrite(data, AppliedAction(ActionKind.CHECKSUM_BREAK))
        assert ChecksumRule().classify(evaded) is Label.BENIGN


class TestCertificateRule:
    def test_certificate_is_flagged(self):
        assert CertificateRule().classify(build(rich_spec())) is Label.MALICIOUS
        assert CertificateRule().classify(build(plain_spec())) is Label.BENIGN

    def test_cert_removal_evades(self):
        data = build(rich_spec())
        evaded = rewrite(data, AppliedAction(ActionKind.CERT_REMOVE))
        assert CertificateRule().classify(evaded) is Label.BENIGN


class TestByteMeanModel:
    def test_threshold_is_strict(self):
        # mean of bytes 100 and 200 is exactly 150
        data = bytes([100, 200])
        assert ByteMeanModel(150.0).classify(data) is Label.BENIGN
        assert ByteMeanModel(149.9).classify(data) is Label.MALICIOUS

    def test_empty_input_is_benign(self):
        assert ByteMeanModel(0.0).classify(b"") is Label.BENIGN

    def test_low_byte_append_pulls_the_mean_down(self):
        data = b"\xc8" * 1000  # mean 200
        oracle = ByteMeanModel(150.0)
        assert oracle.classify(data) is Label.MALICIOUS
        # closed form: 1000 bytes at 200 need 334 zeros for a mean
        # under 150 (200000 / 1334 = 149.93)
        assert oracle.classify(data + b"\x00" * 333) is Label.MALICIOUS
        assert oracle.classify(data + b"\x00" * 334) is Label.BENIGN

    def test_no_parsing_involved(self):
        assert ByteMeanModel(10.0).classify(b"\xff\xff") is Label.MALICIOUS


# ----------------------------------------------------------------------
# remote client


class FakeResponse:
    def __init__(self, status=200, payload=None, text=False):
        self.status_code = status
        self._payload = payload
        self._text = text

    def json(self):
        if self._text:
            raise ValueError("not json")
        return self._payload


def remote(retries=2):
    return RemoteOracle("http://127.0.0.1:1/", retries=retries, backoff=0.0)


class TestRemoteOracleProtocol:
    def test_accepts_both_labels(self, monkeypatch):
        for value, expected in [("malicious", Label.MALICIOUS), ("benign", Label.BENIGN)]:
            monkeypatch.setattr(
                requests, "post", lambda *a, **k: FakeResponse(payload={"label": value})
            )
            assert remote().classify(b"x") is expected

    def test_posts_to_scan_with_octet_stream(self, monkeypatch):
        seen = {}

        def capture(url, data=None, headers=None, timeout=None):
            seen.update(url=url, data=data, headers=headers, timeout=timeout)
            return FakeResponse(payload={"label": "benign"})

        monkeypatch.setattr(requests, "post", capture)
        RemoteOracle("http://host:9/", timeout=3.5).classify(b"\x01\x02")
        assert seen["url"] == "http://host:9/scan"
        assert seen["data"] == b"\x01\x02"
        assert seen["headers"]["Content-Type"] == "application/octet-stream"
        assert seen["timeout"] == 3.5

    def test_extra_keys_are_a_protocol_violation(self, monkeypatch):
        monkeypatch.setattr(
            requests,
            "post",
            lambda *a, **k: FakeResponse(payload={"label": "benign", "score": 0.9}),
        )
        with pytest.raises(ProtocolError):
            remote().classify(b"x")

    def test_unknown_label_value_rejected(self, monkeypatch):
        monkeypatch.setattr(
            requests, "post", lambda *a, **k: FakeResponse(payload={"label": "suspicious"})
        )
        with pytest.raises(ProtocolError):
            remote().classify(b"x")

    def test_non_object_reply_rejected(self, monkeypatch):
        monkeypatch.setattr(
            requests, "post", lambda *a, **k: FakeResponse(payload=["malicious"])
        )
        with pytest.raises(ProtocolError):
            remote().classify(b"x")

    def test_non_json_reply_rejected(self, monkeypatch):
        monkeypatch.setattr(requests, "post", lambda *a, **k: FakeResponse(text=True))
        with pytest.raises(ProtocolError):
            remote().classify(b"x")

    def test_http_error_status_is_unavailable(self, monkeypatch):
        monkeypatch.setattr(requests, "post", lambda *a, **k: FakeResponse(status=500))
        with pytest.raises(RemoteUnavailable):
            remote().classify(b"x")

    def test_transport_errors_retry_then_succeed(self, monkeypatch):
        calls = []

        def flaky(*a, **k):
            calls.append(1)
            if len(calls) < 3:
                raise requests.ConnectionError("refused")
            return FakeResponse(payload={"label": "benign"})

        monkeypatch.setattr(requests, "post", flaky)
        assert remote(retries=2).classify(b"x") is Label.BENIGN
        assert len(calls) == 3

    def test_transport_errors_exhaust_retries(self, monkeypatch):
        calls = []

        def down(*a, **k):
            calls.append(1)
            raise requests.ConnectionError("refused")

        monkeypatch.setattr(requests, "post", down)
        with pytest.raises(RemoteUnavailable):
            remote(retries=2).classify(b"x")
        assert len(calls) == 3

    def test_protocol_errors_are_not_retried(self, monkeypatch):
        calls = []

        def once(*a, **k):
            calls.append(1)
            return FakeResponse(payload={"verdict": "benign"})

        monkeypatch.setattr(requests, "post", once)
        with pytest.raises(ProtocolError):
            remote(retries=5).classify(b"x")
        assert len(calls) == 1


class _CannedHandler(BaseHTTPRequestHandler):
    def _reply(self, payload, status=200):
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        if self.path != "/scan":
            self._reply({"error": "not found"}, status=404)
            return
        length = int(self.headers.get("Content-Length", "0"))
        body = self.rfile.read(length)
        self._reply({"label": "malicious" if b"\xee" in body else "benign"})

    def do_GET(self):
        if self.path == "/health":
            self._reply({"status": "ok"})
        else:
            self._reply({"error": "not found"}, status=404)

    def log_message(self, *args):
        pass


@pytest.fixture()
def live_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _CannedHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_address[1]}"
    finally:
        server.shutdown()
        thread.join()


class TestRemoteOracleOverSocket:
    def test_round_trip_carries_the_body(self, live_server):
        oracle = make_oracle(live_server)
        assert oracle.classify(b"\x00\xee\x00") is Label.MALICIOUS
        assert oracle.classify(b"\x00\x01\x00") is Label.BENIGN

    def test_health_endpoint(self, live_server):
        assert make_oracle(live_server).healthy() is True

    def test_health_fails_closed_port(self):
        oracle = RemoteOracle("http://127.0.0.1:1", timeout=0.2, retries=0)
        assert oracle.healthy() is False

    def test_unreachable_scan_raises(self):
        oracle = RemoteOracle("http://127.0.0.1:1", timeout=0.2, retries=1, backoff=0.0)
        with pytest.raises(RemoteUnavailable):
            oracle.classify(b"x")

    def test_builtin_oracles_report_healthy(self):
        assert ByteMeanModel(1.0).healthy() is True


class TestDigestListsThroughSpec:
    def test_end_to_end_blocklist_attack_surface(self, tmp_path):
        data = build(plain_spec())
        listing = tmp_path / "bad.txt"
        listing.write_text(hashlib.sha256(data).hexdigest() + "\n")
        oracle = make_oracle(f"builtin:file_hash_blocklist:{listing}")
        assert oracle.classify(data) is Label.MALICIOUS
        evaded = rewrite(data, AppliedAction(ActionKind.OVERLAY_APPEND_BYTE))
        assert oracle.classify(evaded) is Label.BENIGN
