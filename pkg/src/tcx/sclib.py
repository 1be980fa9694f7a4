"""Secure channels between SC-VMs, brokered by the Root VM.

Usage inside an SC-VM mirrors the familiar client/server pattern::

    await lib.register("TEST_CLIENT")
    await lib.get_registered_vms()
    owner = await lib.get_self_owner()
    conn = await lib.dial("TEST_SERVER", [owner])
    await conn.write(b"Hello from client")
    buf = bytearray(32)
    n = await conn.read(buf)
    await conn.close()

``dial`` looks the name up at the Root VM, checks the peer's owner against
``valid_owners`` (empty means any owner), then runs a mutually
authenticated handshake straight to the peer VM through the host switch.
A listener may pass an ``owner_filter`` that sees the dialer's owner
certificate before the handshake completes.
"""

from __future__ import annotations

import asyncio
import logging
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Sequence, Union

from .channel import SecureChannel, client_handshake
from .control_plane import RootVmClient
from .errors import (
    ChannelClosed,
    ChannelDown,
    HandshakeFailure,
    OwnerRejected,
    UnknownName,
)
from .pki import Role, RoleCertificate, issued_by, verify_chain
from .protocol import Msg, pack, unpack

if TYPE_CHECKING:
    from .agent import ScVmAgent

logger = logging.getLogger(__name__)

MAX_CHUNK = 64 * 1024
OwnerFilter = Callable[[RoleCertificate], bool]


class ChannelEndpoint:
    """One end of an SC-VM to SC-VM channel with byte-stream semantics."""

    def __init__(self, channel: SecureChannel, peer_owner: RoleCertificate):
        self.channel = channel
        self.peer_owner = peer_owner
        self._pending = b""
        self._closed = False
        self.done = asyncio.Event()

    @property
    def local_certificate(self) -> RoleCertificate:
        return self.channel.local_certificate

    @property
    def peer_certificate(self) -> RoleCertificate:
        return self.channel.peer_certificate

    async def write(self, data: bytes) -> int:
        if self._closed:
            raise ChannelClosed("write on closed endpoint")
        data = bytes(data)
        for i in range(0, len(data), MAX_CHUNK):
            await self.channel.send(pack(Msg.STREAM_DATA, data=data[i : i + MAX_CHUNK]))
        return len(data)

    async def read(self, buf: Union[bytearray, memoryview]) -> int:
        """Fill up to ``len(buf)`` bytes; returns the count (short reads allowed)."""
        if self._closed:
            raise ChannelClosed("read on closed endpoint")
        while not self._pending:
            try:
                data = await self.channel.recv_skip_replays()
            except (ChannelClosed, ChannelDown) as exc:
                raise ChannelClosed(str(exc)) from exc
            msg, f = unpack(data)
            if msg == Msg.STREAM_DATA:
                self._pending = f["data"]
        n = min(len(buf), len(self._pending))
        buf[:n] = self._pending[:n]
        self._pending = self._pending[n:]
        return n

    async def read_bytes(self, limit: int = MAX_CHUNK) -> bytes:
        buf = bytearray(limit)
        n = await self.read(buf)
        return bytes(buf[:n])

    async def close(self) -> None:
        if not self._closed:
            self._closed = True
            await self.channel.close()
        self.done.set()


class Listener:
    def __init__(self, owner_filter: Optional[OwnerFilter] = None):
        self.owner_filter = owner_filter
        self._queue: asyncio.Queue = asyncio.Queue()
        self.closed = False

    async def accept(self) -> ChannelEndpoint:
        if self.closed:
            raise ChannelClosed("listener closed")
        return await self._queue.get()

    def close(self) -> None:
        self.closed = True


class SecureChannelLib:
    def __init__(self, agent: "ScVmAgent"):
        self._agent = agent
        self._root: Optional[RootVmClient] = None
        self._root_lock = asyncio.Lock()
        self._listener: Optional[Listener] = None
        self._dialer_owners: Dict[bytes, RoleCertificate] = {}

    @property
    def _secrets(self):
        secrets = self._agent.secrets
        if secrets is None:
            raise HandshakeFailure("SC-VM has no identity yet")
        return secrets

    async def _rootvm(self) -> RootVmClient:
        async with self._root_lock:
            if self._root is None or not self._root.channel.is_open:
                secrets = self._secrets
                expected = secrets.cert_rootvm.fingerprint

                def same_rootvm(cert):
                    if cert.fingerprint != expected:
                        raise HandshakeFailure("root VM is not the one that certified this SC-VM")

                stream = await self._agent.ctx.connect("rootvm")
                self._root = await RootVmClient.over(
                    stream, self._agent.credential, self._agent.trust_root, self._agent.clock,
                    self._agent.entropy, extra_check=same_rootvm,
                )
            return self._root

    async def register(self, name: str) -> None:
        await (await self._rootvm()).register(name)

    async def get_registered_vms(self) -> List[str]:
        return await (await self._rootvm()).list_names()

    async def get_self_owner(self) -> RoleCertificate:
        return self._secrets.cert_owner

    async def dial(self, name: str, valid_owners: Sequence[RoleCertificate] = ()) -> ChannelEndpoint:
        agent = self._agent
        entry = await (await self._rootvm()).lookup(name)
        secrets = self._secrets
        now = agent.clock()
        if not issued_by(entry.cert_vm, secrets.cert_rootvm) or not verify_chain(
            entry.cert_vm, agent.trust_root, now, Role.SC_VM
        ):
            raise HandshakeFailure(f"{name}: certificate not issued by this host's root VM")
        if not verify_chain(entry.cert_owner, agent.trust_root, now, Role.CONTAINER_OWNER):
            raise OwnerRejected(f"{name}: owner certificate does not verify")
        if valid_owners and entry.cert_owner.fingerprint not in {o.fingerprint for o in valid_owners}:
            raise OwnerRejected(f"{name} is owned by {entry.cert_owner.subject_name}, not an accepted owner")

        def is_registered_peer(cert):
            if cert.fingerprint != entry.cert_vm.fingerprint:
                raise HandshakeFailure(f"peer is not the VM registered as {name}")

        stream = await agent.ctx.connect(entry.cert_vm.subject_name)
        channel = await client_handshake(stream, agent.credential, is_registered_peer, agent.entropy)
        return ChannelEndpoint(channel, entry.cert_owner)

    async def listen(self, owner_filter: Optional[OwnerFilter] = None) -> Listener:
        self._listener = Listener(owner_filter)
        return self._listener

    async def _authorize_dialer(self, cert: RoleCertificate) -> None:
        listener = self._listener
        if listener is None or listener.closed:
            raise HandshakeFailure("no listener on this SC-VM")
        try:
            owner = await (await self._rootvm()).owner_of(cert)
        except UnknownName as exc:
            raise HandshakeFailure("dialer has no recorded owner") from exc
        if not verify_chain(owner, self._agent.trust_root, self._agent.clock(), Role.CONTAINER_OWNER):
            raise OwnerRejected("dialer's owner certificate does not verify")
        if listener.owner_filter is not None and not listener.owner_filter(owner):
            raise OwnerRejected(f"owner {owner.subject_name} refused by listener")
        self._dialer_owners[cert.fingerprint] = owner

    async def _incoming(self, channel: SecureChannel) -> None:
        owner = self._dialer_owners[channel.peer_certificate.fingerprint]
        endpoint = ChannelEndpoint(channel, owner)
        await self._listener._queue.put(endpoint)
        # keep the connection alive until the application closes it
        await endpoint.done.wait()
