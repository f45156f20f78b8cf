"""Greedy reduction of an evasive action trace to its essential core.

One left-to-right pass over the captured actions. For each position the
pass first tries dropping the action outright; if the replay stops being
evasive it tries that action's micro substitutes in footprint order and
keeps the first one that preserves evasion; otherwise the action stays.
Replays always rebuild from the pristine original because the rewrite
actions are not invertible.

Oracle traffic during a reduction is metered on its own budget, bounded by
|actions| * (1 + longest substitute list) + 1: one initial evasion check,
then at worst one drop probe plus every substitute probe per position.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from .actions import (
    ActionKind,
    AppliedAction,
    Feature,
    apply,
    build_substitute,
    infer_feature,
    micro_candidates,
)
from .errors import (
    InvalidSubstitute,
    NonReplayableTrace,
    NotApplicable,
    PeError,
    TraceTooLong,
)
from .oracle import Budget, Label, Oracle, scan
from .pe_model import parse, serialize

MAX_SUBSTITUTES = 3  # longest substitute list in the catalog
BRUTE_FORCE_CAP = 12


@dataclass(frozen=True)
class Trace:
    """An action sequence that produced an evasive sample, plus its origin."""

    original: bytes
    actions: tuple[AppliedAction, ...]
    oracle_ref: str = ""

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))


@dataclass(frozen=True)
class MinimizedTrace:
    actions: tuple[AppliedAction, ...]  # retained actions, post-substitution
    origin_kinds: tuple[ActionKind, ...]  # pre-substitution kind per retained action
    substitutions: dict[int, ActionKind | None]  # source position -> micro used
    causes: tuple[tuple[AppliedAction, frozenset[Feature]], ...]
    final_sample: bytes
    bytes_changed: int
    oracle_ref: str = ""  # carried over from the source trace

    @property
    def retained_positions(self) -> tuple[int, ...]:
        return tuple(sorted(self.substitutions))

    @property
    def cause_features(self) -> frozenset[Feature]:
        out: set[Feature] = set()
        for _, features in self.causes:
            out |= features
        return frozenset(out)


def count_changed_bytes(original: bytes, ae: bytes) -> int:
    """Appended length (growth only) plus differing bytes in the common prefix."""
    grown = max(len(ae) - len(original), 0)
    common = min(len(original), len(ae))
    return grown + sum(1 for i in range(common) if original[i] != ae[i])


def replay(original: bytes, actions) -> tuple[bytes, list[int]]:
    """Rebuild a sample from scratch. Actions that no longer apply in the
    replayed state are no-ops; their positions are reported back."""
    pe = parse(original)
    skipped: list[int] = []
    for idx, act in enumerate(actions):
        try:
            pe = apply(pe, act)
        except (NotApplicable, PeError, IndexError):
            skipped.append(idx)
    return serialize(pe), skipped


def infer_causes(mt: MinimizedTrace) -> tuple[tuple[AppliedAction, frozenset[Feature]], ...]:
    """Root-cause feature set per retained action, from its source kind and
    the substitute (if any) that replaced it."""
    return _causes_for(mt.actions, mt.origin_kinds, mt.substitutions)


def _causes_for(
    actions: tuple[AppliedAction, ...],
    origin_kinds: tuple[ActionKind, ...],
    substitutions: dict[int, ActionKind | None],
) -> tuple[tuple[AppliedAction, frozenset[Feature]], ...]:
    subs_in_order = [substitutions[pos] for pos in sorted(substitutions)]
    return tuple(
        (act, infer_feature(origin, sub))
        for act, origin, sub in zip(actions, origin_kinds, subs_in_order)
    )


def minimize(
    trace: Trace,
    oracle: Oracle,
    budget: Budget | None = None,
    fixed_point: bool = False,
) -> MinimizedTrace:
    """Reduce ``trace`` to essential actions against ``oracle``.

    ``budget`` meters the reduction's own oracle calls; when omitted, a
    fresh budget sized to the worst-case call count is created. With
    ``fixed_point`` the pass repeats until no position changes, for
    comparing against exhaustive enumeration on adversarial oracles.
    """
    n = len(trace.actions)
    if budget is None:
        passes = (n + 1) if fixed_point else 1
        budget = Budget(max_attempts=(n * (1 + MAX_SUBSTITUTES) + 1) * passes)

    def probe(actions) -> bool:
        data, _ = replay(trace.original, actions)
        return scan(oracle, data, budget, phase="minimization").label is Label.BENIGN

    full, skipped = replay(trace.original, trace.actions)
    if scan(oracle, full, budget, phase="minimization").label is not Label.BENIGN:
        raise NonReplayableTrace("replaying the full trace is not evasive")

    # (source position, current action, source kind, substitute or None);
    # positions that were no-ops in the full replay start out dropped
    kept: list[tuple[int, AppliedAction, ActionKind, ActionKind | None]] = [
        (i, act, act.kind, None)
        for i, act in enumerate(trace.actions)
        if i not in skipped
    ]

    while True:
        changed = False
        surviving: list[tuple[int, AppliedAction, ActionKind, ActionKind | None]] = []
        for cursor in range(len(kept)):
            pos, act, origin, already = kept[cursor]
            tail = [entry[1] for entry in kept[cursor + 1 :]]
            decided = [entry[1] for entry in surviving]

            if probe(decided + tail):
                changed = True
                continue  # dropped

            replaced = False
            if not already:  # a substituted action is already at minimum footprint
                try:
                    candidates = micro_candidates(origin)
                except InvalidSubstitute:
                    candidates = ()
                for micro in candidates:
                    sub = build_substitute(act, micro)
                    if probe(decided + [sub] + tail):
                        surviving.append((pos, sub, origin, micro))
                        changed = replaced = True
                        break
            if not replaced:
                surviving.append((pos, act, origin, already))
        kept = surviving
        if not fixed_point or not changed:
            break

    final_actions = tuple(entry[1] for entry in kept)
    origin_kinds = tuple(entry[2] for entry in kept)
    substitutions = {entry[0]: entry[3] for entry in kept}
    final_sample, _ = replay(trace.original, final_actions)
    return MinimizedTrace(
        actions=final_actions,
        origin_kinds=origin_kinds,
        substitutions=substitutions,
        causes=_causes_for(final_actions, origin_kinds, substitutions),
        final_sample=final_sample,
        bytes_changed=count_changed_bytes(trace.original, final_sample),
        oracle_ref=trace.oracle_ref,
    )


def brute_force_minimal(
    trace: Trace,
    oracle: Oracle,
    budget: Budget | None = None,
    max_len: int = BRUTE_FORCE_CAP,
) -> set[frozenset[int]]:
    """All inclusion-minimal evasive position subsets, by exhaustive
    enumeration without substitution. Test oracle for the greedy pass."""
    n = len(trace.actions)
    if n > min(max_len, BRUTE_FORCE_CAP):
        raise TraceTooLong(f"{n} actions exceed the enumeration cap")
    evasive: list[frozenset[int]] = []
    for size in range(n + 1):
        for positions in itertools.combinations(range(n), size):
            subset = frozenset(positions)
            chosen = [trace.actions[i] for i in sorted(subset)]
            data, _ = replay(trace.original, chosen)
            if scan(oracle, data, budget, phase="minimization").label is Label.BENIGN:
                evasive.append(subset)
    return {s for s in evasive if not any(t < s for t in evasive)}
