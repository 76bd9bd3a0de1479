"""Sliding-window majority correction of per-frame detector categories."""
import logging
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Mapping, Optional, Tuple

from consistency_ft.errors import ConfigurationError, OrderingError
from consistency_ft.logic import ObjectId

logger = logging.getLogger(__name__)

DEFAULT_BUFFER_K = 5


@dataclass(frozen=True)
class FrameObservation:
    frame_index: int
    tracks: Mapping[ObjectId, str]
    # objects flagged False count as undetected in this frame
    presence: Optional[Mapping[ObjectId, bool]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.frame_index < 0:
            raise OrderingError(f"Negative frame index {self.frame_index}")

    def detected(self) -> Dict[ObjectId, str]:
        if self.presence is None:
            return dict(self.tracks)
        return {o: c for o, c in self.tracks.items() if self.presence.get(o, True)}


@dataclass
class TemporalBuffer:
    capacity: int = DEFAULT_BUFFER_K
    window: Deque[FrameObservation] = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigurationError(f"Buffer capacity must be positive, got {self.capacity}")
        self.window = deque(self.window, maxlen=self.capacity)

    @property
    def last_index(self) -> Optional[int]:
        return self.window[-1].frame_index if self.window else None


def _vote(history: List[str]) -> str:
    """Majority over ``history`` (oldest first); ties go to the most recently seen of the tied values."""
    counts = Counter(history)
    best = max(counts.values())
    for value in reversed(history):
        if counts[value] == best:
            return value
    raise AssertionError("unreachable")


def push_and_smooth(buf: TemporalBuffer, obs: FrameObservation) -> Tuple[TemporalBuffer, FrameObservation]:
    """Append ``obs`` to the window and return the buffer with the corrected observation for that frame."""
    if buf.last_index is not None and obs.frame_index <= buf.last_index:
        raise OrderingError(f"Frame {obs.frame_index} arrived after frame {buf.last_index}")
    buf.window.append(obs)
    fill_quorum = math.ceil(buf.capacity / 2)

    frames = [f.detected() for f in buf.window]
    newest = frames[-1]
    objects = sorted({o for f in frames for o in f})
    corrected = {}
    for obj in objects:
        history = [f[obj] for f in frames if obj in f]
        if obj in newest:
            counts = Counter(history)
            raw = newest[obj]
            corrected[obj] = raw if counts[raw] == max(counts.values()) else _vote(history)
        elif len(history) >= fill_quorum:
            corrected[obj] = _vote(history)
            logger.debug(f"frame {obs.frame_index}: filled missing {obj} as {corrected[obj]}")
    changed = {o for o in corrected if newest.get(o) != corrected[o]}
    if changed:
        logger.debug(f"frame {obs.frame_index}: corrected {', '.join(sorted(changed))}")
    return buf, FrameObservation(obs.frame_index, corrected, {o: True for o in corrected})


def smooth_stream(observations: List[FrameObservation], capacity: int = DEFAULT_BUFFER_K) -> List[FrameObservation]:
    buf = TemporalBuffer(capacity)
    out = []
    for obs in observations:
        buf, corrected = push_and_smooth(buf, obs)
        out.append(corrected)
    return out
