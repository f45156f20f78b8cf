"""Blackbox evasion search for PE binaries.

Rewrites Windows executables through a catalog of functionality-preserving
transformations, selects transformations with a Thompson-sampling bandit
against a hard-label oracle, minimizes successful traces, and infers which
detection features the evasion exploited.
"""

__version__ = "0.1.0"
