"""Deterministic in-process network with adversary hooks.

Every frame sent over a pipe created by :class:`SimNetwork` passes through
the adversary (observe, tamper, drop, replay, tear) and is logged to the
transcript as ``(event, step, actor, peer, message-type, digest)``. All
randomness used by actors on the network derives from the network seed,
and the scheduler is asyncio over in-memory queues, so the same seed and
scenario yield the same transcript hash.

Message-type labels are metadata supplied by the sender, standing in for a
privileged observer that knows the protocol; only ``data`` is on the wire.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

from .crypto import Entropy, sha256
from .errors import LivenessError
from .mock_tee import PlatformIdentity
from .transport import LocalCarrier, PipeEnd

logger = logging.getLogger(__name__)

DEFAULT_MAX_EVENTS = 200_000
DEFAULT_PATIENCE = 500  # scheduler rounds without a frame before declaring a stall


@dataclass(frozen=True)
class Frame:
    event: int
    src: str
    dst: str
    label: str
    data: bytes


@dataclass(frozen=True)
class TranscriptEntry:
    event: int
    step: str
    actor: str
    peer: str
    label: str
    digest: str
    action: str = "deliver"

    def line(self) -> str:
        return f"{self.event}\t{self.step}\t{self.actor}->{self.peer}\t{self.label}\t{self.digest}\t{self.action}"


Selector = Callable[[Frame], bool]


@dataclass
class Adversary:
    """Hook set; any hook left as None is inactive.

    ``tamper`` returns replacement bytes or None to leave the frame alone.
    ``replay`` frames are delivered twice. ``tear`` drops the frame and
    closes the link in both directions.
    """

    observe: Optional[Callable[[Frame], None]] = None
    tamper: Optional[Callable[[Frame], Optional[bytes]]] = None
    drop: Optional[Selector] = None
    replay: Optional[Selector] = None
    tear: Optional[Selector] = None
    fake_platform: Optional[PlatformIdentity] = None
    name: str = "adversary"


def match(label: Optional[str] = None, src: Optional[str] = None, dst: Optional[str] = None,
          nth: Optional[int] = None, prefix: bool = False) -> Selector:
    """Selector for frames by label/endpoints; ``nth`` picks one occurrence (0-based)."""
    seen = [0]

    def sel(frame: Frame) -> bool:
        if label is not None:
            if prefix and not frame.label.startswith(label):
                return False
            if not prefix and frame.label != label:
                return False
        if src is not None and not frame.src.startswith(src):
            return False
        if dst is not None and not frame.dst.startswith(dst):
            return False
        hit = nth is None or seen[0] == nth
        seen[0] += 1
        return hit

    return sel


def flip_byte(selector: Selector, offset: int = -1, mask: int = 0x01) -> Callable[[Frame], Optional[bytes]]:
    """Tamper hook XOR-ing one byte of every selected frame."""

    def tamper(frame: Frame) -> Optional[bytes]:
        if not frame.data or not selector(frame):
            return None
        buf = bytearray(frame.data)
        buf[offset % len(buf)] ^= mask
        return bytes(buf)

    return tamper


class SimNetwork(LocalCarrier):
    def __init__(self, seed: int = 0, adversary: Optional[Adversary] = None, max_events: int = DEFAULT_MAX_EVENTS):
        super().__init__()
        self.seed = seed
        self.entropy = Entropy(seed).child("simnet")
        self.adversary = adversary or Adversary()
        self.max_events = max_events
        self.transcript: List[TranscriptEntry] = []
        self.captured: List[Frame] = []
        self.step = "setup"
        self._event = 0

    def attach_adversary(self, adversary: Adversary) -> "SimNetwork":
        self.adversary = adversary
        return self

    def _tap(self):
        return self._intercept

    def _log(self, frame: Frame, data: bytes, action: str) -> None:
        self.transcript.append(
            TranscriptEntry(frame.event, self.step, frame.src, frame.dst, frame.label, sha256(data).hex()[:16], action)
        )

    def _intercept(self, end: PipeEnd, data: bytes, label: str) -> List[bytes]:
        self._event += 1
        if self._event > self.max_events:
            raise LivenessError(f"event bound {self.max_events} exceeded")
        frame = Frame(self._event, end.local, end.remote, label or "?", data)
        self.captured.append(frame)
        adv = self.adversary
        if adv.observe:
            adv.observe(frame)
        if adv.tear and adv.tear(frame):
            self._log(frame, data, "tear")
            end.close()
            return []
        if adv.drop and adv.drop(frame):
            self._log(frame, data, "drop")
            return []
        if adv.tamper:
            changed = adv.tamper(frame)
            if changed is not None and changed != data:
                data = changed
                self._log(frame, data, "tamper")
                return [data]
        if adv.replay and adv.replay(frame):
            self._log(frame, data, "replay")
            return [data, data]
        self._log(frame, data, "deliver")
        return [data]

    async def run_until_quiet(self, coro, patience: int = DEFAULT_PATIENCE):
        """Await ``coro``, raising LivenessError if the network stops moving first.

        Every actor is an in-memory coroutine, so when no frame is sent for
        ``patience`` consecutive scheduler rounds nothing can happen anymore
        and the awaited step is stuck (for example on a dropped message).
        """
        task = asyncio.ensure_future(coro)
        last, idle = self._event, 0
        while not task.done():
            await asyncio.sleep(0)
            if self._event != last:
                last, idle = self._event, 0
                continue
            idle += 1
            if idle > patience:
                task.cancel()
                await asyncio.gather(task, return_exceptions=True)
                raise LivenessError(f"no network progress for {patience} rounds at step {self.step}")
        return task.result()

    def frames(self, label: Optional[str] = None) -> List[Frame]:
        return [f for f in self.captured if label is None or f.label == label]

    def transcript_text(self) -> str:
        return "".join(e.line() + "\n" for e in self.transcript)

    def transcript_hash(self) -> str:
        return sha256(self.transcript_text().encode()).hex()
