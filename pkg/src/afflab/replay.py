"""Prioritized experience replay for single-step picking transitions."""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import heightmap as hmap
from .affordance import Action
from .errors import BadIndex, DataError, EmptyBuffer
from .heightmap import Heightmap

EPS_PRIORITY = 1e-3
DUMP_MAGIC = b"ARB1"
# pixel, frame_pixel, value, angle_index, label, priority, heightmap blob length
_RECORD = struct.Struct("<iiiidiBdI")


@dataclass
class Transition:
    heightmap: Heightmap
    action: Action
    label: int
    priority: float = 1.0


class ReplayBuffer:
    """FIFO ring of transitions sampled with P(i) ~ priority_i ** alpha.

    Indices handed out by :meth:`sample` are absolute insertion counters, so
    an index stays meaningful (or detectably stale) after later pushes.
    """

    def __init__(self, capacity: int = 2000, alpha: float = 0.6):
        if capacity < 1 or alpha < 0:
            raise ValueError("need capacity >= 1 and alpha >= 0")
        self.capacity = capacity
        self.alpha = alpha
        self._items: deque[Transition] = deque()
        self._first = 0  # absolute index of _items[0]

    def __len__(self):
        return len(self._items)

    @property
    def live_indices(self) -> range:
        return range(self._first, self._first + len(self._items))

    def __getitem__(self, index: int) -> Transition:
        return self._items[self._slot(index)]

    def _slot(self, index: int) -> int:
        slot = index - self._first
        if not 0 <= slot < len(self._items):
            raise BadIndex(f"index {index} is not live (live: {self._first}..{self._first + len(self) - 1})")
        return slot

    def priorities(self) -> np.ndarray:
        return np.array([t.priority for t in self._items], dtype=np.float64)

    def push(self, t: Transition) -> int:
        if t.label not in (0, 1):
            raise ValueError("label must be 0 or 1")
        t.priority = float(self.priorities().max()) if self._items else 1.0
        self._items.append(t)
        if len(self._items) > self.capacity:
            self._items.popleft()
            self._first += 1
        return self._first + len(self._items) - 1

    def weights(self) -> np.ndarray:
        if not self._items:
            raise EmptyBuffer("replay buffer is empty")
        w = self.priorities() ** self.alpha
        return w / w.sum()

    def sample(self, n: int, rng) -> list[int]:
        if n < 1:
            raise ValueError("n must be >= 1")
        w = self.weights()
        slots = rng.choice(len(w), size=n, replace=True, p=w)
        return [self._first + int(s) for s in slots]

    def update_priority(self, index: int, td_error: float) -> None:
        if not np.isfinite(td_error):
            raise ValueError("td_error must be finite")
        self._items[self._slot(index)].priority = abs(float(td_error)) + EPS_PRIORITY

    # -- dump ---------------------------------------------------------------

    def dumps(self) -> bytes:
        out = [DUMP_MAGIC, struct.pack("<IdQI", self.capacity, self.alpha, self._first, len(self))]
        for t in self._items:
            a = t.action
            blob = hmap.dumps(t.heightmap)
            out.append(_RECORD.pack(a.pixel[0], a.pixel[1], a.frame_pixel[0], a.frame_pixel[1],
                                    a.value, a.angle_index, t.label, t.priority, len(blob)))
            out.append(blob)
        return b"".join(out)

    @classmethod
    def loads(cls, buf: bytes) -> "ReplayBuffer":
        if buf[:4] != DUMP_MAGIC:
            raise DataError("not a replay dump")
        capacity, alpha, first, n = struct.unpack_from("<IdQI", buf, 4)
        buf_ = cls(capacity, alpha)
        buf_._first = first
        off = 4 + struct.calcsize("<IdQI")
        for _ in range(n):
            r, c, fr, fc, value, k, label, pri, ln = _RECORD.unpack_from(buf, off)
            off += _RECORD.size
            hm = hmap.loads(buf[off:off + ln])
            off += ln
            buf_._items.append(Transition(hm, Action((r, c), k, value, (fr, fc)), label, pri))
        return buf_

    def save(self, path) -> None:
        Path(path).write_bytes(self.dumps())

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        return cls.loads(Path(path).read_bytes())
