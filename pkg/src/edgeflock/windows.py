"""Tag-ordered sliding windows and bounded inboxes.

Both the reference engine and the distributed runtime consume tagged
item streams through these primitives, so window/tag semantics are
defined exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any


class WindowError(ValueError):
    """Duplicate tags and other stream-contract violations."""


@dataclass
class SlidingWindow:
    """Emits contiguous tag runs of fixed length, advancing by ``stride``.

    Out-of-order arrivals are buffered; a window [next_tag, next_tag +
    length) is emitted (tagged by its newest item) once every member tag
    is present.  Items older than the current window are counted and
    dropped; duplicate tags are an error.  ``skip_below`` declares that
    tags below a bound will never arrive, letting the window advance
    past a gap.
    """

    length: int
    stride: int = 1
    next_tag: int = 0
    pending: dict[int, Any] = field(default_factory=dict)
    late_drops: int = 0
    skipped: int = 0
    # Set after a task handoff: the buffer was lost, so realign to the
    # next arriving tag instead of stalling on tags already consumed.
    resync_on_next: bool = False
    last_resync: int = -1

    def __post_init__(self):
        if self.length < 1 or self.stride < 1:
            raise WindowError("window length and stride must be >= 1")

    @property
    def occupancy(self) -> int:
        return len(self.pending)

    def push(self, tag: int, item) -> list[tuple[int, list]]:
        """Add one item; return ready windows as (end_tag, items) pairs."""
        tag = int(tag)
        if self.resync_on_next:
            self.resync_on_next = False
            if tag > self.next_tag:
                self.next_tag = tag
                self.last_resync = tag
        if tag < self.next_tag:
            self.late_drops += 1
            return []
        if tag in self.pending:
            raise WindowError(f"duplicate tag {tag}")
        self.pending[tag] = item
        emitted = []
        while all((self.next_tag + i) in self.pending for i in range(self.length)):
            run = [self.pending[self.next_tag + i] for i in range(self.length)]
            emitted.append((self.next_tag + self.length - 1, run))
            for i in range(self.stride):
                self.pending.pop(self.next_tag + i, None)
            self.next_tag += self.stride
        return emitted

    def skip_below(self, tag: int) -> None:
        """Declare tags below ``tag`` permanently absent; advance past the gap."""
        if tag <= self.next_tag:
            return
        for t in [t for t in self.pending if t < tag]:
            del self.pending[t]
            self.skipped += 1
        self.next_tag = tag


@dataclass
class BoundedInbox:
    """Fixed-capacity FIFO with an almost-full watermark.

    ``offer`` refuses items beyond capacity (occupancy can never exceed
    it).  Crossing the watermark arms ``should_signal``; the owner sends
    one almost-full notice per crossing and re-arms after draining below
    the threshold.
    """

    capacity: int
    almost_full_threshold: int = 0
    items: list = field(default_factory=list)
    rejected: int = 0
    peak_occupancy: int = 0
    _armed: bool = True

    def __post_init__(self):
        if self.capacity < 1:
            raise WindowError("inbox capacity must be >= 1")
        if self.almost_full_threshold <= 0:
            self.almost_full_threshold = max(1, (self.capacity * 8) // 10)

    @property
    def occupancy(self) -> int:
        return len(self.items)

    @property
    def full(self) -> bool:
        return len(self.items) >= self.capacity

    def offer(self, item) -> bool:
        """Try to enqueue; False when full (item refused, counted)."""
        if self.full:
            self.rejected += 1
            return False
        self.items.append(item)
        self.peak_occupancy = max(self.peak_occupancy, len(self.items))
        return True

    def should_signal(self) -> bool:
        """True once per upward crossing of the almost-full watermark."""
        if len(self.items) >= self.almost_full_threshold and self._armed:
            self._armed = False
            return True
        if len(self.items) < self.almost_full_threshold:
            self._armed = True
        return False

    def take(self):
        if not self.items:
            raise WindowError("inbox empty")
        item = self.items.pop(0)
        if len(self.items) < self.almost_full_threshold:
            self._armed = True
        return item
