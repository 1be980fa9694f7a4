"""Frame carriers.

Actors exchange whole frames over :class:`Stream` objects and never know
which carrier sits underneath: in-memory pipes (optionally tapped by the
simulated network) or TCP sockets with a 4-byte big-endian length prefix.
"""

from __future__ import annotations

import asyncio
import logging
import struct
from typing import Awaitable, Callable, Dict, List, Optional, Set, Tuple

from .errors import StreamClosed, UnknownDestination

logger = logging.getLogger(__name__)

MAX_FRAME = 256 * 1024 * 1024
_EOF = object()

Handler = Callable[["Stream"], Awaitable[None]]
# tap(sender, frame, label) -> frames actually delivered to the peer
Tap = Callable[["PipeEnd", bytes, str], List[bytes]]


class Stream:
    local: str = "?"
    remote: str = "?"

    async def send(self, frame: bytes, label: str = "") -> None:
        raise NotImplementedError

    async def recv(self) -> bytes:
        frame, _ = await self.recv_labeled()
        return frame

    async def recv_labeled(self) -> Tuple[bytes, str]:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    @property
    def closed(self) -> bool:
        raise NotImplementedError


class PipeEnd(Stream):
    def __init__(self, local: str, remote: str, tap: Optional[Tap] = None):
        self.local = local
        self.remote = remote
        self.peer: Optional[PipeEnd] = None
        self._inbox: asyncio.Queue = asyncio.Queue()
        self._tap = tap
        self._closed = False

    @property
    def closed(self) -> bool:
        return self._closed

    async def send(self, frame: bytes, label: str = "") -> None:
        if self._closed or self.peer is None or self.peer._closed:
            raise StreamClosed(f"{self.local}->{self.remote} closed")
        frames = self._tap(self, bytes(frame), label) if self._tap else [bytes(frame)]
        for f in frames:
            self.peer._inbox.put_nowait((f, label))
        await asyncio.sleep(0)

    async def recv_labeled(self) -> Tuple[bytes, str]:
        item = await self._inbox.get()
        if item is _EOF:
            self._inbox.put_nowait(_EOF)
            raise StreamClosed(f"{self.remote}->{self.local} closed")
        return item

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._inbox.put_nowait(_EOF)
        if self.peer is not None:
            self.peer._inbox.put_nowait(_EOF)
            self.peer._closed = True


def make_pipe(a: str, b: str, tap: Optional[Tap] = None) -> Tuple[PipeEnd, PipeEnd]:
    end_a, end_b = PipeEnd(a, b, tap), PipeEnd(b, a, tap)
    end_a.peer, end_b.peer = end_b, end_a
    return end_a, end_b


class TcpStream(Stream):
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, local: str, remote: str):
        self._reader = reader
        self._writer = writer
        self.local = local
        self.remote = remote
        self._closed = False

    @property
    def closed(self) -> bool:
        return self._closed

    async def send(self, frame: bytes, label: str = "") -> None:
        if self._closed:
            raise StreamClosed("socket closed")
        try:
            self._writer.write(struct.pack(">I", len(frame)) + frame)
            await self._writer.drain()
        except (ConnectionError, RuntimeError) as exc:
            self._closed = True
            raise StreamClosed(str(exc)) from exc

    async def recv_labeled(self) -> Tuple[bytes, str]:
        try:
            head = await self._reader.readexactly(4)
            (n,) = struct.unpack(">I", head)
            if n > MAX_FRAME:
                raise StreamClosed("oversized frame")
            return await self._reader.readexactly(n), ""
        except (asyncio.IncompleteReadError, ConnectionError) as exc:
            self._closed = True
            raise StreamClosed("socket closed") from exc

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self._writer.close()
            except RuntimeError:
                pass


class LocalCarrier:
    """In-process carrier: named listeners connected by in-memory pipes."""

    def __init__(self):
        self._listeners: Dict[str, Handler] = {}
        self._tasks: Set[asyncio.Task] = set()
        self.failures: List[BaseException] = []

    def _tap(self) -> Optional[Tap]:
        return None

    def pipe(self, a: str, b: str) -> Tuple[Stream, Stream]:
        return make_pipe(a, b, self._tap())

    def spawn(self, coro: Awaitable) -> asyncio.Task:
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._reap)
        return task

    def _reap(self, task: asyncio.Task) -> None:
        self._tasks.discard(task)
        if not task.cancelled() and task.exception() is not None:
            exc = task.exception()
            self.failures.append(exc)
            logger.debug("actor task failed: %r", exc)

    async def listen(self, address: str, handler: Handler) -> None:
        self._listeners[address] = handler

    async def connect(self, origin: str, address: str) -> Stream:
        handler = self._listeners.get(address)
        if handler is None:
            raise UnknownDestination(f"nothing listening on {address!r}")
        near, far = self.pipe(origin, address)
        self.spawn(_serve_and_close(handler, far))
        return near

    async def shutdown(self) -> None:
        for task in list(self._tasks):
            task.cancel()
        if self._tasks:
            await asyncio.gather(*self._tasks, return_exceptions=True)


async def _serve_and_close(handler: Handler, stream: Stream) -> None:
    try:
        await handler(stream)
    except StreamClosed:
        pass
    finally:
        stream.close()


class TcpCarrier(LocalCarrier):
    """Local names resolve in-process; ``host:port`` addresses go over TCP."""

    def __init__(self):
        super().__init__()
        self._servers: List[asyncio.AbstractServer] = []

    async def serve_tcp(self, host: str, port: int, handler: Handler) -> int:
        async def on_client(reader, writer):
            peer = writer.get_extra_info("peername")
            stream = TcpStream(reader, writer, f"{host}:{port}", f"{peer[0]}:{peer[1]}" if peer else "?")
            await _serve_and_close(handler, stream)

        server = await asyncio.start_server(on_client, host, port)
        self._servers.append(server)
        return server.sockets[0].getsockname()[1]

    async def connect(self, origin: str, address: str) -> Stream:
        if address in self._listeners:
            return await super().connect(origin, address)
        addr = address[len("tcp://"):] if address.startswith("tcp://") else address
        host, sep, port = addr.rpartition(":")
        if not sep:
            raise UnknownDestination(f"not a local name or host:port: {address!r}")
        try:
            reader, writer = await asyncio.open_connection(host, int(port))
        except OSError as exc:
            raise StreamClosed(f"cannot reach {address}: {exc}") from exc
        return TcpStream(reader, writer, origin, addr)

    async def shutdown(self) -> None:
        for server in self._servers:
            server.close()
            await server.wait_closed()
        await super().shutdown()


async def proxy(a: Stream, b: Stream) -> None:
    """Copy frames both ways until either side closes, then close both."""

    async def pump(src: Stream, dst: Stream):
        try:
            while True:
                frame, label = await src.recv_labeled()
                await dst.send(frame, label)
        except StreamClosed:
            pass
        finally:
            src.close()
            dst.close()

    await asyncio.gather(pump(a, b), pump(b, a))
