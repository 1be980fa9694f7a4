"""Mutually authenticated secure channel over a frame Stream.

Handshake (signed ephemeral Diffie-Hellman)::

    C -> S  CLIENT_HELLO(eph_c, rand_c, cert_c | empty)
    S -> C  SERVER_HELLO(eph_s, rand_s, cert_s, sig_s, want_client_cert)
            sig_s = Sign(server, th1),  th1 = H(CLIENT_HELLO || eph_s || rand_s || cert_s)
    C -> S  CLIENT_FINISH(sig_c | empty)
            sig_c = Sign(client, th2),  th2 = H(th1 || sig_s)
    S -> C  HANDSHAKE_DONE  or  HANDSHAKE_ALERT(code, message)

Traffic keys come from HKDF(X25519(eph_c, eph_s), salt=th2). Each record is
``u32 length || seq(8) || ChaCha20-Poly1305(nonce = 0^4 || seq, aad = seq)``
and the plaintext starts with a content-type byte (application or close).
A record that fails authentication, or skips ahead in sequence, aborts the
channel. A record whose sequence number was already consumed is dropped
and reported as :class:`ReplayedRecord`; the channel stays up.
"""

from __future__ import annotations

import asyncio
import inspect
import logging
import struct
from typing import Awaitable, Callable, Optional, Union

from . import crypto
from .crypto import Entropy
from .errors import (
    ChannelAborted,
    ChannelClosed,
    ChannelDown,
    DecryptFailure,
    HandshakeFailure,
    ReplayedRecord,
    StreamClosed,
    TcxError,
    WireError,
)
from .pki import Credential, RoleCertificate
from .protocol import Msg, error_message, label as msg_label, pack, unpack
from .transport import Stream
from .wire import encode_fields

logger = logging.getLogger(__name__)

_HS_CTX = b"tcx-channel-handshake-v1"
_KEY_INFO = b"tcx-channel-v1"
RANDOM_SIZE = 16
CT_APP = 0x17
CT_CLOSE = 0x15

PeerCheck = Callable[[Optional[RoleCertificate]], Union[None, Awaitable[None]]]


async def _run_check(check: Optional[PeerCheck], cert: Optional[RoleCertificate]) -> None:
    if check is None:
        return
    result = check(cert)
    if inspect.isawaitable(result):
        await result


class SecureChannel:
    def __init__(
        self,
        stream: Stream,
        send_key: bytes,
        recv_key: bytes,
        local_certificate: Optional[RoleCertificate],
        peer_certificate: Optional[RoleCertificate],
        transcript_hash: bytes,
    ):
        self.stream = stream
        self._send_key = send_key
        self._recv_key = recv_key
        self.local_certificate = local_certificate
        self.peer_certificate = peer_certificate
        self.transcript_hash = transcript_hash
        self._send_seq = 0
        self._recv_seq = 0
        self._state = "open"  # open | closed | aborted
        self._peer_closed = False
        self._request_lock = asyncio.Lock()
        self.on_send: Optional[Callable[[bytes], None]] = None

    @property
    def is_open(self) -> bool:
        return self._state == "open" and not self._peer_closed

    def _record(self, content_type: int, data: bytes) -> bytes:
        seq = struct.pack(">Q", self._send_seq)
        self._send_seq += 1
        body = seq + crypto.aead_seal(self._send_key, b"\x00" * 4 + seq, bytes([content_type]) + data, seq)
        return struct.pack(">I", len(body)) + body

    async def send(self, data: bytes, label: Optional[str] = None) -> None:
        if self._state == "aborted":
            raise ChannelAborted("channel was aborted")
        if self._state == "closed":
            raise ChannelClosed("send on closed channel")
        if self.on_send is not None:
            self.on_send(data)
        try:
            await self.stream.send(self._record(CT_APP, data), msg_label(data) if label is None else label)
        except StreamClosed as exc:
            self._state = "aborted"
            raise ChannelDown(str(exc)) from exc

    def _abort(self, why: str) -> ChannelAborted:
        self._state = "aborted"
        self.stream.close()
        return ChannelAborted(why)

    async def recv(self) -> bytes:
        """Next application payload.

        Raises ChannelClosed after the peer's close, ChannelDown if the
        carrier vanished without one, ChannelAborted on any integrity fault,
        and ReplayedRecord for a duplicate (which is dropped).
        """
        if self._state == "aborted":
            raise ChannelAborted("channel was aborted")
        if self._state == "closed" or self._peer_closed:
            raise ChannelClosed("channel is closed")
        try:
            frame = await self.stream.recv()
        except StreamClosed as exc:
            self._state = "aborted"
            raise ChannelDown("transport closed without close_notify") from exc
        if len(frame) < 4 + 8 or struct.unpack(">I", frame[:4])[0] != len(frame) - 4:
            raise self._abort("malformed record")
        seq_bytes, ct = frame[4:12], frame[12:]
        seq = struct.unpack(">Q", seq_bytes)[0]
        try:
            plain = crypto.aead_open(self._recv_key, b"\x00" * 4 + seq_bytes, ct, seq_bytes)
        except DecryptFailure:
            raise self._abort(f"record {seq} failed authentication")
        if seq < self._recv_seq:
            raise ReplayedRecord(f"record {seq} already received")
        if seq > self._recv_seq:
            raise self._abort(f"record gap: expected {self._recv_seq}, got {seq}")
        self._recv_seq += 1
        if not plain:
            raise self._abort("empty record")
        ctype, data = plain[0], plain[1:]
        if ctype == CT_CLOSE:
            self._peer_closed = True
            raise ChannelClosed("peer closed the channel")
        if ctype != CT_APP:
            raise self._abort(f"unknown content type {ctype}")
        return data

    async def recv_skip_replays(self, on_replay: Optional[Callable[[ReplayedRecord], None]] = None) -> bytes:
        while True:
            try:
                return await self.recv()
            except ReplayedRecord as exc:
                logger.info("dropped replayed record: %s", exc)
                if on_replay is not None:
                    on_replay(exc)

    async def request(self, data: bytes, expect: Msg) -> dict:
        """Send one message and unpack the reply, raising on ERROR replies."""
        async with self._request_lock:
            await self.send(data)
            reply = await self.recv_skip_replays()
        return unpack(reply, expect)[1]

    async def close(self) -> None:
        if self._state == "open":
            self._state = "closed"
            if not self._peer_closed:
                try:
                    await self.stream.send(self._record(CT_CLOSE, b""), "CLOSE_NOTIFY")
                except StreamClosed:
                    pass
        self.stream.close()


def _derive(shared: bytes, th2: bytes):
    okm = crypto.hkdf(shared, _KEY_INFO, 64, salt=th2)
    return okm[:32], okm[32:]


def _check_possession(cert: RoleCertificate, signature: bytes, data: bytes) -> None:
    if not crypto.verify(cert.public_key, signature, _HS_CTX, data):
        raise HandshakeFailure(f"{cert.subject_name}: handshake signature invalid")


async def _alert(stream: Stream, exc: BaseException) -> None:
    code = exc.code if isinstance(exc, TcxError) else "HandshakeFailure"
    try:
        await stream.send(pack(Msg.HANDSHAKE_ALERT, code=code, message=str(exc)), "HANDSHAKE_ALERT")
    except StreamClosed:
        pass


async def client_handshake(
    stream: Stream,
    credential: Optional[Credential],
    verify_server: Optional[PeerCheck],
    entropy: Optional[Entropy] = None,
) -> SecureChannel:
    entropy = entropy or Entropy()
    eph = crypto.dh_key(entropy)
    my_cert = credential.certificate if credential else None
    hello = pack(
        Msg.CLIENT_HELLO,
        ephemeral=crypto.public_bytes(eph),
        random=entropy.bytes(RANDOM_SIZE),
        certificate=my_cert.to_bytes() if my_cert else b"",
    )
    try:
        await stream.send(hello, "CLIENT_HELLO")
        _, sh = unpack(await stream.recv(), Msg.SERVER_HELLO)
    except StreamClosed as exc:
        raise HandshakeFailure(f"transport closed during handshake: {exc}") from exc
    except WireError as exc:
        raise HandshakeFailure(f"bad SERVER_HELLO: {exc}") from exc
    try:
        server_cert = RoleCertificate.from_bytes(sh["certificate"])
        th1 = crypto.sha256(hello, encode_fields(sh["ephemeral"], sh["random"], sh["certificate"]))
        _check_possession(server_cert, sh["signature"], th1)
        await _run_check(verify_server, server_cert)
        if sh["want_client_cert"] and credential is None:
            raise HandshakeFailure("server requires a client certificate")
        th2 = crypto.sha256(th1, sh["signature"])
        shared = crypto.dh(eph, sh["ephemeral"])
    except TcxError as exc:
        await _alert(stream, exc)
        stream.close()
        raise
    finish_sig = crypto.sign(credential.signing_key, _HS_CTX, th2) if credential else b""
    try:
        await stream.send(pack(Msg.CLIENT_FINISH, signature=finish_sig), "CLIENT_FINISH")
        unpack(await stream.recv(), Msg.HANDSHAKE_DONE)
    except StreamClosed as exc:
        raise HandshakeFailure(f"transport closed during handshake: {exc}") from exc
    except WireError as exc:
        raise HandshakeFailure(str(exc)) from exc
    c2s, s2c = _derive(shared, th2)
    return SecureChannel(stream, c2s, s2c, my_cert, server_cert, th2)


async def server_handshake(
    stream: Stream,
    credential: Credential,
    verify_client: Optional[PeerCheck],
    entropy: Optional[Entropy] = None,
    require_client_cert: bool = False,
) -> SecureChannel:
    """Run the server side; ``verify_client`` receives None for anonymous clients."""
    entropy = entropy or Entropy()
    try:
        hello = await stream.recv()
        _, ch = unpack(hello, Msg.CLIENT_HELLO)
    except StreamClosed as exc:
        raise HandshakeFailure("transport closed during handshake") from exc
    except WireError as exc:
        await _alert(stream, HandshakeFailure(str(exc)))
        raise HandshakeFailure(f"bad CLIENT_HELLO: {exc}") from exc
    eph = crypto.dh_key(entropy)
    my_cert = credential.certificate.to_bytes()
    eph_pub, rand = crypto.public_bytes(eph), entropy.bytes(RANDOM_SIZE)
    th1 = crypto.sha256(hello, encode_fields(eph_pub, rand, my_cert))
    sig = crypto.sign(credential.signing_key, _HS_CTX, th1)
    try:
        await stream.send(
            pack(
                Msg.SERVER_HELLO,
                ephemeral=eph_pub,
                random=rand,
                certificate=my_cert,
                signature=sig,
                want_client_cert=int(require_client_cert),
            ),
            "SERVER_HELLO",
        )
        msg, fin = unpack(await stream.recv())
    except StreamClosed as exc:
        raise HandshakeFailure("transport closed during handshake") from exc
    except WireError as exc:
        raise HandshakeFailure(str(exc)) from exc
    if msg == Msg.HANDSHAKE_ALERT:
        raise HandshakeFailure(f"client aborted: {fin['code']}: {fin['message']}")
    th2 = crypto.sha256(th1, sig)
    try:
        if msg != Msg.CLIENT_FINISH:
            raise HandshakeFailure(f"expected CLIENT_FINISH, got {msg.name}")
        client_cert = None
        if ch["certificate"]:
            client_cert = RoleCertificate.from_bytes(ch["certificate"])
            _check_possession(client_cert, fin["signature"], th2)
        elif require_client_cert:
            raise HandshakeFailure("client certificate required")
        await _run_check(verify_client, client_cert)
        shared = crypto.dh(eph, ch["ephemeral"])
    except TcxError as exc:
        await _alert(stream, exc)
        stream.close()
        raise
    await stream.send(pack(Msg.HANDSHAKE_DONE), "HANDSHAKE_DONE")
    c2s, s2c = _derive(shared, th2)
    return SecureChannel(stream, s2c, c2s, credential.certificate, client_cert, th2)


Dispatch = Callable[[bytes], Awaitable[bytes]]


async def serve_requests(channel: SecureChannel, dispatch: Dispatch) -> None:
    """Answer request messages until the peer goes away; errors become ERROR replies."""
    while True:
        try:
            data = await channel.recv_skip_replays()
        except (ChannelClosed, ChannelDown, ChannelAborted):
            return
        try:
            reply = await dispatch(data)
        except TcxError as exc:
            logger.debug("request failed: %r", exc)
            reply = error_message(exc)
        try:
            await channel.send(reply)
        except (ChannelDown, ChannelClosed, ChannelAborted):
            return
