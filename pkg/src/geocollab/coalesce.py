"""Rate limiter for leader camera updates.

Cameras emit far more updates than followers need; forwarding every one
would flood the broadcast stream and the replay ring. The coalescer caps
forwarding at a configured rate and always forwards the LAST update of a
window, never an intermediate, so followers land exactly where the leader
did. Non-view actions flush any pending view first, which preserves the
relative order of views and scene mutations.

Pure state machine driven by an injectable clock, so tests run it on
virtual time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Any, Callable


@dataclass
class CoalesceResult:
    forward: list[tuple[str, dict[str, Any]]]  # (sender, payload) to sequence now
    flush_at: float | None = None  # when a held update becomes due, None if nothing pending


class ViewCoalescer:
    def __init__(self, rate_hz: float, clock: Callable[[], float] = time.monotonic):
        if rate_hz <= 0:
            raise ValueError("rate must be positive")
        self.min_interval = 1.0 / rate_hz
        self._clock = clock
        self._last_forward: float | None = None
        self._pending: tuple[str, dict[str, Any]] | None = None

    @property
    def pending_count(self) -> int:
        return 1 if self._pending is not None else 0

    def _window_open(self, now: float) -> bool:
        return self._last_forward is None or now - self._last_forward >= self.min_interval

    def offer_view(self, sender: str, payload: dict[str, Any]) -> CoalesceResult:
        """Submit one view update; either forwards it now or holds the latest."""
        now = self._clock()
        if self._pending is None and self._window_open(now):
            self._last_forward = now
            return CoalesceResult(forward=[(sender, payload)])
        # hold only the newest update; earlier ones in the window are superseded
        self._pending = (sender, payload)
        return CoalesceResult(forward=[], flush_at=(self._last_forward or now) + self.min_interval)

    def flush_due(self) -> CoalesceResult:
        """Forward the held update if its window has elapsed."""
        now = self._clock()
        if self._pending is None:
            return CoalesceResult(forward=[])
        if not self._window_open(now):
            return CoalesceResult(forward=[], flush_at=(self._last_forward or now) + self.min_interval)
        held, self._pending = self._pending, None
        self._last_forward = now
        return CoalesceResult(forward=[held])

    def flush_for_action(self) -> list[tuple[str, dict[str, Any]]]:
        """Release the held update early so a following action cannot overtake it."""
        if self._pending is None:
            return []
        held, self._pending = self._pending, None
        self._last_forward = self._clock()
        return [held]

    def reset(self) -> None:
        """Drop pending state, e.g. when leadership changes mid-window."""
        self._pending = None
        self._last_forward = None
