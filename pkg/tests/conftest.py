from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from pebandit.fixtures import FixtureSpec, SectionSpec, build_fixture


def plain_spec(seed: int = 7, **kw) -> FixtureSpec:
    """Two-section PE32 workhorse: code with slack, data with slack."""
    defaults = dict(
        sections=(
            SectionSpec(b".text", "code", 1200, 1536),
            SectionSpec(b".data", "data", 700, 1024),
        ),
        seed=seed,
    )
    defaults.update(kw)
    return FixtureSpec(**defaults)


def rich_spec(seed: int = 7, **kw) -> FixtureSpec:
    """Fixture exercising every action: cert, debug, overlay, slack everywhere."""
    defaults = dict(
        sections=(
            SectionSpec(b".text", "code", 1200, 1536),
            SectionSpec(b".rdata", "rdata", 700, 1024),
            SectionSpec(b".data", "data", 300, 512),
        ),
        seed=seed,
        overlay=64,
        certificate=128,
        debug=True,
    )
    defaults.update(kw)
    return FixtureSpec(**defaults)


@pytest.fixture
def plain_pe() -> bytes:
    return build_fixture(plain_spec())


@pytest.fixture
def rich_pe() -> bytes:
    return build_fixture(rich_spec())
