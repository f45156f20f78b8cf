"""Campaign orchestration: drive the bandit attack over a sample set.

One campaign shares a single arm pool across every sample. Per sample, the
loop selects an arm (filtered to actions applicable to the sample's current
state), instantiates it (randomized arms draw fresh content), applies it,
and scans. Detections push the arm's failure count and the transformed
sample carries forward; an evasion is minimized, re-verified, rewarded
through the pool, and functionality-checked. Samples whose minimized output
fails validation re-enter the queue with their remaining budget.

Scan accounting is split: the per-sample attempt budget covers generation
scans only; detection, minimization (own per-trace cap), and verification
are tallied separately in the stats.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import queue as queue_mod
import random
import threading
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

from .actions import (
    MACRO_KINDS,
    ActionKind,
    AppliedAction,
    ContentPayload,
    Feature,
    NamePayload,
    _pick_slack_target,
    applicable,
    apply,
    load_name_list,
    validate_functionality,
)
from .bandit import Arm, ArmPool, export_snapshot, init_pool
from .errors import (
    BudgetExhausted,
    NoApplicableArm,
    NoDetectedSamples,
    NonReplayableTrace,
    NotApplicable,
    OracleUnhealthy,
    PeError,
)
from .minimizer import (
    MinimizedTrace,
    Trace,
    _causes_for,
    count_changed_bytes,
    minimize,
    replay,
)
from .oracle import Budget, Label, Oracle, make_oracle, scan
from .pe_model import ParsedPe, parse, section_slack, serialize

log = logging.getLogger("pebandit.campaign")

OVERLAY_DRAW_LEN = 256
SECTION_CONTENT_DRAW_LEN = 512
MINIMIZE_SUBSTITUTE_WIDTH = 4  # 1 drop probe + up to 3 substitute probes


def bytes_changed(original: bytes, ae: bytes) -> int:
    """Appended plus modified byte count between an original and its
    adversarial example."""
    return count_changed_bytes(original, ae)


class ContentPool:
    """Benign content source for randomized-payload arms.

    Blobs come from a directory (ids are the file names, stable given the
    same directory); with no directory, draws fall back to seeded random
    bytes whose ids derive from their digest.
    """

    def __init__(self, pool_dir: str | Path | None, rng: random.Random):
        self.rng = rng
        self._lock = threading.Lock()
        self.blobs: list[tuple[str, bytes]] = []
        if pool_dir is not None:
            for path in sorted(Path(pool_dir).iterdir()):
                if path.is_file():
                    self.blobs.append((path.name, path.read_bytes()))

    def draw(self, length: int) -> ContentPayload:
        """One blob clipped to ``length`` bytes; random bytes when the
        pool directory is empty or absent."""
        if length < 1:
            raise ValueError("draw length must be positive")
        with self._lock:
            if self.blobs:
                blob_id, data = self.rng.choice(self.blobs)
                if len(data) > length:
                    return ContentPayload(data[:length], f"{blob_id}@{length}")
                return ContentPayload(data, blob_id)
            data = self.rng.randbytes(length)
        return ContentPayload(data, f"rand-{hashlib.sha256(data).hexdigest()[:12]}")


def draw_name(names: Sequence[bytes], rng: random.Random) -> NamePayload:
    name = rng.choice(list(names))
    return NamePayload(name, name.decode("ascii", "replace"))


def instantiate_action(
    arm: Arm,
    pe: ParsedPe,
    content_pool: ContentPool,
    names: Sequence[bytes],
    rng: random.Random,
) -> AppliedAction:
    """Concrete action for one arm pull against the sample's current state.

    Concrete-payload arms replay their stored payload; randomized parents
    draw fresh content sized to the action's room.
    """
    kind = arm.kind
    payload = arm.payload if arm.concrete else None

    if kind is ActionKind.OVERLAY_APPEND:
        return AppliedAction(kind, payload=payload or content_pool.draw(OVERLAY_DRAW_LEN))
    if kind is ActionKind.SLACK_APPEND:
        target = _pick_slack_target(pe)
        room = section_slack(pe, target)
        return AppliedAction(
            kind, payload=payload or content_pool.draw(room), target=target
        )
    if kind is ActionKind.SECTION_ADD:
        return AppliedAction(
            kind,
            payload=payload or content_pool.draw(SECTION_CONTENT_DRAW_LEN),
            new_name=draw_name(names, rng).name,
        )
    if kind is ActionKind.SECTION_RENAME:
        return AppliedAction(
            kind,
            payload=payload or draw_name(names, rng),
            target=rng.randrange(len(pe.sections)),
        )
    if kind is ActionKind.SECTION_RENAME_BYTE:
        return AppliedAction(kind, target=rng.randrange(len(pe.sections)))
    if kind is ActionKind.SECTION_ADD_BYTE:
        return AppliedAction(kind, new_name=draw_name(names, rng).name)
    # remaining kinds need no parameters: removals, checksum, byte appends
    return AppliedAction(kind)


@dataclass
class SampleOutcome:
    origin_id: str
    status: str  # evaded | failed | requeue
    trace: MinimizedTrace | None = None
    attempts: int = 0  # generation scans spent when the outcome was reached
    minimization_scans: int = 0
    verification_scans: int = 0


def _reward_retained(pool: ArmPool, mt: MinimizedTrace, pulled: Sequence[int]) -> None:
    """Credit the pool for every retained action of a verified evasion.

    Payload-bearing survivors become content arms on first sighting and
    collect essential credit afterwards; payloadless survivors credit the
    arm that was pulled at their source position (propagating to parents).
    """
    for out_index, pos in enumerate(mt.retained_positions):
        act = mt.actions[out_index]
        if isinstance(act.payload, (ContentPayload, NamePayload)):
            existing = pool.find_arm(act.kind, act.payload)
            if existing is None:
                pool.add_content_arm(act.kind, act.payload)
            else:
                pool.record_essential(existing)
        else:
            pool.record_essential(pulled[pos])


def _identity_minimized(trace: Trace) -> MinimizedTrace:
    """Minimization-free wrap: every replayable action retained unchanged."""
    final_sample, skipped = replay(trace.original, trace.actions)
    kept = [i for i in range(len(trace.actions)) if i not in skipped]
    actions = tuple(trace.actions[i] for i in kept)
    origin_kinds = tuple(a.kind for a in actions)
    substitutions: dict[int, ActionKind | None] = {i: None for i in kept}
    return MinimizedTrace(
        actions=actions,
        origin_kinds=origin_kinds,
        substitutions=substitutions,
        causes=_causes_for(actions, origin_kinds, substitutions),
        final_sample=final_sample,
        bytes_changed=count_changed_bytes(trace.original, final_sample),
        oracle_ref=trace.oracle_ref,
    )


def run_sample(
    origin_id: str,
    data: bytes,
    pool: ArmPool,
    oracle: Oracle,
    budget: Budget,
    content_pool: ContentPool,
    names: Sequence[bytes],
    rng: random.Random,
    strategy: str = "thompson",
    do_minimize: bool = True,
    requeue_on_validation_failure: bool = True,
    oracle_ref: str = "",
) -> SampleOutcome:
    """One attack pass over one detected sample (see module docstring)."""
    original_pe = parse(data)
    current = original_pe
    actions: list[AppliedAction] = []
    pulled: list[int] = []
    learn = strategy == "thompson"
    misfires = 0
    minimization_scans = 0
    verification_scans = 0

    def outcome(status: str, trace: MinimizedTrace | None = None) -> SampleOutcome:
        return SampleOutcome(
            origin_id,
            status,
            trace,
            attempts=budget.phases.get("generation", 0),
            minimization_scans=minimization_scans,
            verification_scans=verification_scans,
        )

    while budget.remaining > 0:
        if learn:
            arm_filter = lambda arm: applicable(current, arm.kind)  # noqa: E731
        else:
            # learning-free baseline: uniform over the randomized parents
            arm_filter = lambda arm: (  # noqa: E731
                arm.parent is None
                and not arm.concrete
                and applicable(current, arm.kind)
            )
        try:
            if learn:
                arm_id = pool.select(arm_filter)
            else:
                arm_id = pool.select_uniform(arm_filter, rng)
        except NoApplicableArm:
            return outcome("failed")

        act = instantiate_action(pool.arm(arm_id), current, content_pool, names, rng)
        try:
            transformed = apply(current, act)
        except (NotApplicable, PeError):
            # no oracle attempt was spent, so no posterior update either;
            # cap repeated misfires so a stuck state cannot loop forever
            misfires += 1
            if misfires > budget.max_attempts * 3:
                return outcome("failed")
            continue

        try:
            result = scan(oracle, serialize(transformed), budget, phase="generation")
        except BudgetExhausted:
            return outcome("failed")
        actions.append(act)
        pulled.append(arm_id)
        current = transformed

        if result.label is Label.MALICIOUS:
            if learn:
                pool.record_failure(arm_id)
            continue

        trace = Trace(data, tuple(actions), oracle_ref=oracle_ref)
        if do_minimize:
            min_budget = Budget(max_attempts=len(actions) * MINIMIZE_SUBSTITUTE_WIDTH + 1)
            try:
                mt = minimize(trace, oracle, min_budget)
            except (NonReplayableTrace, BudgetExhausted):
                # the oracle contradicted the evasion scan on replay; give
                # the sample up rather than reward a phantom
                minimization_scans += min_budget.used
                return outcome("failed")
            minimization_scans += min_budget.used
        else:
            mt = _identity_minimized(trace)

        verification_scans += 1
        if scan(oracle, mt.final_sample).label is not Label.BENIGN:
            return outcome("failed")

        if learn:
            _reward_retained(pool, mt, pulled)

        if not validate_functionality(original_pe, parse(mt.final_sample)):
            if requeue_on_validation_failure and budget.remaining > 0:
                return outcome("requeue")
            return outcome("failed")

        return outcome("evaded", mt)

    return outcome("failed")


# ----------------------------------------------------------------------
# campaign configuration and stats


@dataclass(frozen=True)
class CampaignConfig:
    oracle: str
    samples_dir: str | Path
    output_dir: str | Path
    max_attempts: int = 60
    seed: int = 0
    content_pool_dir: str | Path | None = None
    name_list_path: str | Path | None = None
    workers: int = 1
    minimize: bool = True
    requeue_on_validation_failure: bool = True
    strategy: str = "thompson"  # thompson | random
    include_micro_arms: bool = False
    transfer_oracles: tuple[str, ...] = ()

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.strategy not in ("thompson", "random"):
            raise ValueError(f"unknown strategy {self.strategy!r}")


BYTE_CHANGE_BUCKETS = (
    (0, "0"),
    (1, "1"),
    (2, "2-3"),
    (4, "4-7"),
    (8, "8-15"),
    (16, "16-63"),
    (64, "64-255"),
    (256, "256-1023"),
    (1024, "1024+"),
)


def byte_change_bucket(count: int) -> str:
    label = BYTE_CHANGE_BUCKETS[0][1]
    for floor, name in BYTE_CHANGE_BUCKETS:
        if count >= floor:
            label = name
    return label


@dataclass
class CampaignStats:
    detected: int  # samples the oracle flagged before any rewriting
    evaded: int  # detected samples with a verified minimized evasion
    evasion_rate: float  # evaded / detected
    arms: str  # pool snapshot at campaign end
    byte_change_histogram: dict[str, int]
    cause_histogram: dict[str, int]
    attempts_per_evasion: list[int]
    scan_counts: dict[str, int]
    skipped_malformed: int
    undetected: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> CampaignStats:
        return cls(**json.loads(text))


def empty_cause_histogram() -> dict[str, int]:
    return {feature.value: 0 for feature in Feature}


# ----------------------------------------------------------------------
# the work queue and campaign driver


@dataclass
class _Job:
    origin_id: str
    data: bytes
    budget: Budget


class WorkQueue:
    """Pending samples plus their per-sample attempt state. Requeued jobs
    keep their budget object, so remaining attempts carry over."""

    def __init__(self):
        self._q: queue_mod.Queue[_Job | None] = queue_mod.Queue()

    def put(self, job: _Job) -> None:
        self._q.put(job)

    def get(self) -> _Job | None:
        return self._q.get()

    def get_nowait(self) -> _Job | None:
        try:
            return self._q.get_nowait()
        except queue_mod.Empty:
            return None

    def task_done(self) -> None:
        self._q.task_done()

    def join(self) -> None:
        self._q.join()

    def close(self, workers: int) -> None:
        for _ in range(workers):
            self._q.put(None)


def run_campaign(cfg: CampaignConfig) -> CampaignStats:
    oracle = make_oracle(str(cfg.oracle))
    if not oracle.healthy():
        raise OracleUnhealthy(f"oracle {cfg.oracle!r} failed its health check")

    samples_dir = Path(cfg.samples_dir)
    output_dir = Path(cfg.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / "aes").mkdir(exist_ok=True)

    kinds = list(ActionKind) if cfg.include_micro_arms else MACRO_KINDS
    pool = init_pool(
        kinds, rng=random.Random(cfg.seed), include_micros=cfg.include_micro_arms
    )
    content_pool = ContentPool(cfg.content_pool_dir, random.Random(f"{cfg.seed}:content"))
    names = load_name_list(cfg.name_list_path)

    scan_counts = {"detection": 0, "generation": 0, "minimization": 0, "verification": 0}
    skipped_malformed = 0
    undetected = 0
    jobs: list[_Job] = []
    originals: dict[str, bytes] = {}

    for path in sorted(p for p in samples_dir.iterdir() if p.is_file()):
        data = path.read_bytes()
        try:
            parse(data)
        except PeError as exc:
            log.warning("skipping unparseable sample %s: %s", path.name, exc)
            skipped_malformed += 1
            continue
        scan_counts["detection"] += 1
        if scan(oracle, data).label is not Label.MALICIOUS:
            undetected += 1
            continue
        originals[path.name] = data
        jobs.append(_Job(path.name, data, Budget(max_attempts=cfg.max_attempts)))

    detected = len(jobs)
    if detected == 0:
        raise NoDetectedSamples("no sample in the input set is detected as malicious")

    results: dict[str, SampleOutcome] = {}
    results_lock = threading.Lock()
    work = WorkQueue()
    for job in jobs:
        work.put(job)

    def attend(job: _Job) -> None:
        out = run_sample(
            job.origin_id,
            job.data,
            pool,
            oracle,
            job.budget,
            content_pool,
            names,
            random.Random(f"{cfg.seed}:{job.origin_id}"),
            strategy=cfg.strategy,
            do_minimize=cfg.minimize,
            requeue_on_validation_failure=cfg.requeue_on_validation_failure,
            oracle_ref=str(cfg.oracle),
        )
        if out.status == "requeue":
            work.put(_Job(job.origin_id, job.data, job.budget))
        else:
            with results_lock:
                results[job.origin_id] = out

    if cfg.workers == 1:
        # inline drain, bit-deterministic
        while (job := work.get_nowait()) is not None:
            attend(job)
            work.task_done()
    else:

        def worker() -> None:
            while True:
                job = work.get()
                if job is None:
                    work.task_done()
                    return
                try:
                    attend(job)
                finally:
                    work.task_done()

        threads = [threading.Thread(target=worker) for _ in range(cfg.workers)]
        for t in threads:
            t.start()
        work.join()
        work.close(cfg.workers)
        for t in threads:
            t.join()

    evaded = {oid: out for oid, out in results.items() if out.status == "evaded"}
    for oid in sorted(evaded):
        mt = evaded[oid].trace
        (output_dir / "aes" / f"{oid}.ae").write_bytes(mt.final_sample)
        (output_dir / "aes" / f"{oid}.trace.json").write_text(
            trace_to_json(Trace(originals[oid], mt.actions, oracle_ref=mt.oracle_ref))
        )

    byte_hist: dict[str, int] = {}
    cause_hist = empty_cause_histogram()
    attempts: list[int] = []
    for oid in sorted(evaded):
        out = evaded[oid]
        bucket = byte_change_bucket(out.trace.bytes_changed)
        byte_hist[bucket] = byte_hist.get(bucket, 0) + 1
        for feature in out.trace.cause_features:
            cause_hist[feature.value] += 1
        attempts.append(out.attempts)
    for out in results.values():
        scan_counts["generation"] += out.attempts
        scan_counts["minimization"] += out.minimization_scans
        scan_counts["verification"] += out.verification_scans

    stats = CampaignStats(
        detected=detected,
        evaded=len(evaded),
        evasion_rate=len(evaded) / detected,
        arms=export_snapshot(pool),
        byte_change_histogram=byte_hist,
        cause_histogram=cause_hist,
        attempts_per_evasion=attempts,
        scan_counts=scan_counts,
        skipped_malformed=skipped_malformed,
        undetected=undetected,
    )

    traces = {oid: out.trace for oid, out in evaded.items()}
    matrix = transfer_matrix(traces, [str(cfg.oracle), *cfg.transfer_oracles])
    render_reports(stats, output_dir, matrix)
    return stats


# ----------------------------------------------------------------------
# trace files


def action_to_obj(act: AppliedAction) -> dict:
    obj: dict = {"kind": act.kind.value}
    if isinstance(act.payload, ContentPayload):
        obj["content_b64"] = base64.b64encode(act.payload.data).decode("ascii")
        obj["content_id"] = act.payload.content_id
    elif isinstance(act.payload, NamePayload):
        obj["name"] = act.payload.name.decode("latin-1")
        obj["name_id"] = act.payload.name_id
    if act.target is not None:
        obj["target"] = act.target
    if act.new_name is not None:
        obj["new_name"] = act.new_name.decode("latin-1")
    return obj


def action_from_obj(obj: dict) -> AppliedAction:
    kind = ActionKind(obj["kind"])
    payload = None
    if "content_b64" in obj:
        payload = ContentPayload(
            base64.b64decode(obj["content_b64"]), obj.get("content_id", "")
        )
    elif "name" in obj:
        payload = NamePayload(obj["name"].encode("latin-1"), obj.get("name_id", ""))
    new_name = obj.get("new_name")
    return AppliedAction(
        kind,
        payload=payload,
        target=obj.get("target"),
        new_name=new_name.encode("latin-1") if new_name is not None else None,
    )


def trace_to_json(trace: Trace) -> str:
    """Self-contained replayable form: original bytes, ordered actions, and
    the oracle the trace evaded."""
    return json.dumps(
        {
            "oracle": trace.oracle_ref,
            "original_b64": base64.b64encode(trace.original).decode("ascii"),
            "actions": [action_to_obj(a) for a in trace.actions],
        },
        indent=2,
    ) + "\n"


def trace_from_json(text: str) -> Trace:
    obj = json.loads(text)
    return Trace(
        original=base64.b64decode(obj["original_b64"]),
        actions=tuple(action_from_obj(a) for a in obj["actions"]),
        oracle_ref=obj.get("oracle", ""),
    )


# ----------------------------------------------------------------------
# transferability and reports


def transfer_matrix(
    aes: dict[str, MinimizedTrace], oracle_specs: Sequence[str]
) -> dict[str, dict[str, float]]:
    """cell[A][B] = fraction of the adversarial examples generated against
    oracle A that oracle B also labels benign. Diagonal cells are 1.0 by
    construction: every counted example was verified against its own oracle.

    Each trace's ``oracle_ref`` names the oracle specifier it was generated
    against and must appear in ``oracle_specs``.
    """
    specs = list(dict.fromkeys(oracle_specs))
    by_origin: dict[str, list[MinimizedTrace]] = {spec: [] for spec in specs}
    for origin_id, mt in aes.items():
        if mt.oracle_ref not in by_origin:
            raise ValueError(
                f"AE {origin_id!r} came from an unlisted oracle {mt.oracle_ref!r}"
            )
        by_origin[mt.oracle_ref].append(mt)

    matrix: dict[str, dict[str, float]] = {}
    for source in specs:
        row: dict[str, float] = {}
        source_aes = by_origin[source]
        for target in specs:
            if target == source:
                row[target] = 1.0
            elif not source_aes:
                row[target] = 0.0
            else:
                target_oracle = make_oracle(target)
                benign = sum(
                    1
                    for mt in source_aes
                    if target_oracle.classify(mt.final_sample) is Label.BENIGN
                )
                row[target] = benign / len(source_aes)
        matrix[source] = row
    return matrix


def render_cause_table(stats: CampaignStats) -> str:
    lines = [
        f"evaded {stats.evaded}/{stats.detected} (rate {stats.evasion_rate:.2f})",
        "",
        "root cause              evasions",
        "-" * 32,
    ]
    for feature in Feature:
        count = stats.cause_histogram.get(feature.value, 0)
        lines.append(f"{feature.value:<22} {count:>9}")
    return "\n".join(lines) + "\n"


def render_reports(
    stats: CampaignStats,
    output_dir: str | Path,
    transfer: dict[str, dict[str, float]] | None = None,
) -> None:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(stats.to_json())
    (out / "causes.txt").write_text(render_cause_table(stats))
    (out / "arms.txt").write_text(stats.arms)
    if transfer is not None:
        (out / "transfer.json").write_text(
            json.dumps(transfer, indent=2, sort_keys=True) + "\n"
        )
