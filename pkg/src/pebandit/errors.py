"""Exception hierarchy shared across the package."""

from __future__ import annotations


class PebanditError(Exception):
    """Base class for all errors raised by this package."""


class PeError(PebanditError):
    """Base class for PE parsing and layout errors."""


class MalformedPe(PeError):
    """Input bytes violate a structural rule the rewriter relies on."""


class LayoutConflict(PeError):
    """An edit would produce an inconsistent file layout."""


class InvalidSpec(PebanditError):
    """A fixture spec document is invalid."""


class NotApplicable(PebanditError):
    """An action cannot be applied to this binary."""


class InvalidSubstitute(PebanditError):
    """A substitute action is not a valid reduction of the given action."""


class BanditError(PebanditError):
    """Base class for arm-pool errors."""


class EmptyKinds(BanditError):
    """Pool initialisation was given no action kinds."""


class UnknownArm(BanditError):
    """An arm id is not present in the pool."""


class NoApplicableArm(BanditError):
    """The applicability filter rejected every arm in the pool."""


class OracleError(PebanditError):
    """Base class for oracle gateway errors."""


class BudgetExhausted(OracleError):
    """The scan budget for this sample is used up."""


class RemoteUnavailable(OracleError):
    """The remote oracle did not produce a usable HTTP response."""


class ProtocolError(OracleError):
    """The remote oracle answered with a malformed body."""


class InvalidParams(OracleError):
    """A built-in oracle was configured with bad parameters."""


class OracleUnhealthy(OracleError):
    """The oracle failed its health check at campaign start."""


class MinimizeError(PebanditError):
    """Base class for trace-minimization errors."""


class NonReplayableTrace(MinimizeError):
    """Replaying the full trace did not reproduce an evasive sample."""


class TraceTooLong(MinimizeError):
    """The trace exceeds the exhaustive-search length cap."""


class CampaignError(PebanditError):
    """Base class for campaign-level errors."""


class NoDetectedSamples(CampaignError):
    """No input sample was labeled malicious by the oracle."""
