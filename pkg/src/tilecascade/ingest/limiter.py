from __future__ import annotations

import collections
import threading
import time


class RateLimiter:
    """Sliding-window limiter: at most ``rate`` acquisitions in any ``window`` seconds.

    ``clock`` and ``sleep`` are injectable so tests can drive it with a fake
    clock. Safe to share between threads.
    """

    def __init__(self, rate: float, window: float = 1.0, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0 or window <= 0:
            raise ValueError("rate and window must be positive")
        self.max_events = max(1, int(rate * window))
        self.window = float(window)
        self._clock = clock
        self._sleep = sleep
        self._events: collections.deque[float] = collections.deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Block until a slot is free; returns the timestamp recorded for this call."""
        while True:
            with self._lock:
                now = self._clock()
                while self._events and self._events[0] <= now - self.window:
                    self._events.popleft()
                if len(self._events) < self.max_events:
                    self._events.append(now)
                    return now
                wait = self._events[0] + self.window - now
            self._sleep(max(wait, 1e-6))

    def history(self) -> list[float]:
        with self._lock:
            return list(self._events)


def max_in_window(timestamps, window: float = 1.0) -> int:
    """Largest number of timestamps inside any half-open interval of length ``window``."""
    ts = sorted(timestamps)
    best = 0
    j = 0
    for i, t in enumerate(ts):
        while ts[j] <= t - window:
            j += 1
        best = max(best, i - j + 1)
    return best
