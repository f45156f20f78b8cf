"""Thompson-sampling arm pool over action-content pairs.

Every arm holds a Beta(alpha, beta) posterior over "this transformation
evades", starting uninformed at Beta(1, 1). The pool begins with one
randomized-payload parent arm per macro action kind; concrete payloads that
prove essential are promoted to child arms carrying the exact content, so
proven content is re-selectable as-is. Failures push beta up on the pulled
arm only; essential outcomes push alpha up on the arm and its parent.

Selection and updates serialize behind one lock: posterior draws consume a
shared generator, so concurrent selectors see internally consistent
posteriors and reproducible draw order.
"""

from __future__ import annotations

import random
import threading
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field

from .actions import ActionKind, ContentPayload, NamePayload, Payload
from .errors import BanditError, EmptyKinds, NoApplicableArm, UnknownArm


class RandomizedPayload:
    """Marker for parent arms that draw fresh content on every pull."""

    _instance: RandomizedPayload | None = None

    def __new__(cls) -> RandomizedPayload:
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "RANDOMIZED"


RANDOMIZED = RandomizedPayload()

ArmPayload = ContentPayload | NamePayload | RandomizedPayload | None


@dataclass
class Arm:
    arm_id: int
    kind: ActionKind
    payload: ArmPayload
    alpha: int = 1
    beta: int = 1
    parent: int | None = None

    @property
    def concrete(self) -> bool:
        return isinstance(self.payload, (ContentPayload, NamePayload))

    @property
    def posterior_mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)


def beta_sample(alpha: int, beta: int, rng: random.Random) -> float:
    if alpha < 1 or beta < 1:
        raise BanditError(f"degenerate posterior Beta({alpha}, {beta})")
    return rng.betavariate(alpha, beta)


class ArmPool:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self._arms: dict[int, Arm] = {}
        self._next_id = 0
        self._identity: dict[tuple[ActionKind, Payload], int] = {}
        self._parent_for_kind: dict[ActionKind, int] = {}
        self._lock = threading.Lock()

    # ------------------------------------------------------------------

    def _new_arm(self, kind: ActionKind, payload: ArmPayload, parent: int | None) -> Arm:
        arm = Arm(self._next_id, kind, payload, parent=parent)
        self._arms[arm.arm_id] = arm
        self._next_id += 1
        return arm

    def arm(self, arm_id: int) -> Arm:
        try:
            return self._arms[arm_id]
        except KeyError:
            raise UnknownArm(f"no arm {arm_id}") from None

    def arms(self) -> list[Arm]:
        with self._lock:
            return sorted(self._arms.values(), key=lambda a: a.arm_id)

    def __len__(self) -> int:
        return len(self._arms)

    # ------------------------------------------------------------------

    def select(self, arm_filter: Callable[[Arm], bool]) -> int:
        """Thompson step: sample each eligible arm's posterior, take the max.

        Ties break toward the lowest arm id. Draws happen in ascending arm-id
        order so equal seeds reproduce equal pull sequences.
        """
        with self._lock:
            eligible = [
                (a.arm_id, a.alpha, a.beta)
                for a in sorted(self._arms.values(), key=lambda a: a.arm_id)
                if arm_filter(a)
            ]
            if not eligible:
                raise NoApplicableArm("filter rejected every arm")
            best_id, best_draw = -1, -1.0
            for arm_id, alpha, beta in eligible:
                draw = beta_sample(alpha, beta, self.rng)
                if draw > best_draw:
                    best_id, best_draw = arm_id, draw
            return best_id

    def select_uniform(self, arm_filter: Callable[[Arm], bool], rng: random.Random) -> int:
        """Learning-free baseline: uniform choice among eligible arms."""
        with self._lock:
            eligible = [
                a.arm_id
                for a in sorted(self._arms.values(), key=lambda a: a.arm_id)
                if arm_filter(a)
            ]
        if not eligible:
            raise NoApplicableArm("filter rejected every arm")
        return rng.choice(eligible)

    # ------------------------------------------------------------------

    def record_failure(self, arm_id: int) -> None:
        with self._lock:
            self.arm(arm_id).beta += 1

    def record_essential(self, arm_id: int) -> None:
        with self._lock:
            arm = self.arm(arm_id)
            arm.alpha += 1
            if arm.parent is not None:
                self.arm(arm.parent).alpha += 1

    def find_arm(self, kind: ActionKind, payload: Payload) -> int | None:
        with self._lock:
            return self._identity.get((kind, payload))

    def add_content_arm(self, kind: ActionKind, payload: Payload) -> int:
        """Child arm for a concrete (kind, payload) pair; dedupes exact repeats."""
        if not isinstance(payload, (ContentPayload, NamePayload)):
            raise BanditError("content arms need a concrete payload")
        with self._lock:
            existing = self._identity.get((kind, payload))
            if existing is not None:
                return existing
            parent = self._parent_for_kind.get(kind)
            if parent is None:
                raise BanditError(f"no parent arm for kind {kind.value}")
            arm = self._new_arm(kind, payload, parent)
            self._identity[(kind, payload)] = arm.arm_id
            return arm.arm_id


def init_pool(
    kinds: Iterable[ActionKind],
    rng: random.Random | int = 0,
    include_micros: bool = False,
) -> ArmPool:
    """Fresh pool: one randomized parent arm per macro kind, Beta(1, 1).

    Micro kinds stay out of the pool unless ``include_micros`` asks for
    them; by default they exist only as the minimizer's substitutes.
    """
    # canonical order regardless of the container handed in, so arm ids
    # are stable for a given kind set
    declaration = {kind: i for i, kind in enumerate(ActionKind)}
    kinds = sorted(set(kinds), key=declaration.__getitem__)
    if not kinds:
        raise EmptyKinds("no action kinds given")
    if isinstance(rng, int):
        rng = random.Random(rng)
    pool = ArmPool(rng)
    for kind in kinds:
        if kind.is_micro and not include_micros:
            continue
        payload: ArmPayload = None if kind.is_micro else RANDOMIZED
        arm = pool._new_arm(kind, payload, None)
        if not kind.is_micro:
            pool._parent_for_kind[kind] = arm.arm_id
    if not pool._arms:
        raise EmptyKinds("every kind was filtered out")
    return pool


# ----------------------------------------------------------------------
# snapshots


def _payload_token(payload: ArmPayload) -> str:
    if payload is RANDOMIZED:
        return "*"
    if payload is None:
        return "-"
    if isinstance(payload, ContentPayload):
        return f"c:{payload.content_id}"
    return f"n:{payload.name_id}"


def export_snapshot(pool: ArmPool) -> str:
    """One line per arm: arm_id kind payload_id alpha beta parent_id."""
    lines = []
    for a in pool.arms():
        parent = "-" if a.parent is None else str(a.parent)
        lines.append(
            f"{a.arm_id} {a.kind.value} {_payload_token(a.payload)} {a.alpha} {a.beta} {parent}"
        )
    return "\n".join(lines) + "\n"


def import_snapshot(
    text: str,
    rng: random.Random | int,
    resolver: Callable[[ActionKind, str], Payload],
) -> ArmPool:
    """Rebuild a pool from its snapshot; ``resolver`` maps payload tokens
    (the part after ``c:`` or ``n:``) back to concrete payloads."""
    if isinstance(rng, int):
        rng = random.Random(rng)
    pool = ArmPool(rng)
    max_id = -1
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise BanditError(f"snapshot line {lineno}: expected 6 fields")
        arm_id, kind_s, token, alpha_s, beta_s, parent_s = parts
        try:
            kind = ActionKind(kind_s)
            arm = Arm(
                int(arm_id),
                kind,
                RANDOMIZED
                if token == "*"
                else None
                if token == "-"
                else resolver(kind, token.split(":", 1)[1]),
                int(alpha_s),
                int(beta_s),
                None if parent_s == "-" else int(parent_s),
            )
        except (ValueError, IndexError) as exc:
            raise BanditError(f"snapshot line {lineno}: {exc}") from exc
        pool._arms[arm.arm_id] = arm
        max_id = max(max_id, arm.arm_id)
        if arm.payload is RANDOMIZED:
            pool._parent_for_kind[arm.kind] = arm.arm_id
        if arm.concrete:
            pool._identity[(arm.kind, arm.payload)] = arm.arm_id
    pool._next_id = max_id + 1
    return pool
