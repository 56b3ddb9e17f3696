"""Lightweight work counters.

Render paths bump named counters (projection passes, depth sorts, composite
kernel launches) so tests and `--stats` output can prove how much work a code
path actually did, e.g. that the fused renderer projects and sorts exactly
once per view no matter how many experts contribute.
"""

from __future__ import annotations

from collections import Counter


class WorkCounters:
    def __init__(self):
        self._counts = Counter()

    def bump(self, name: str, amount: int = 1) -> None:
        self._counts[name] += amount

    def get(self, name: str) -> int:
        return self._counts[name]

    def snapshot(self) -> dict[str, int]:
        return dict(self._counts)

    def reset(self) -> None:
        self._counts.clear()


COUNTERS = WorkCounters()
