"""Invocation counters.

Used to prove the inference contract: embedding/evaluation must perform
zero BEV projections and zero position-regression loss evaluations.
"""

from collections import Counter

_counts: Counter = Counter()


def increment(name: str) -> None:
    _counts[name] += 1


def get(name: str) -> int:
    return _counts[name]


def reset() -> None:
    _counts.clear()


def snapshot() -> dict:
    return dict(_counts)
