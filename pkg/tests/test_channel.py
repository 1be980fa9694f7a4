import asyncio

import pytest

from tcx.channel import client_handshake, serve_requests, server_handshake
from tcx.control_plane import SIM_EPOCH, fixed_clock, peer_check
from tcx.crypto import Entropy
from tcx.errors import (
    CertificateRejected,
    ChannelAborted,
    ChannelClosed,
    ChannelDown,
    HandshakeFailure,
    ReplayedRecord,
    StreamClosed,
    UnknownName,
)
from tcx.pki import Role, build_hierarchy, default_lifetime, new_credential
from tcx.protocol import Msg, pack, unpack
from tcx.transport import LocalCarrier, TcpCarrier, make_pipe, proxy

H = build_hierarchy(b"channel tests")
CLOCK = fixed_clock()
HOST = new_credential(H.deploy_ca, "host-1", Role.HOST_SYSTEM, default_lifetime(Role.HOST_SYSTEM, SIM_EPOCH), Entropy(1))
DEPLOY = new_credential(H.deploy_ca, "deploy", Role.DEPLOY_SYSTEM, default_lifetime(Role.DEPLOY_SYSTEM, SIM_EPOCH), Entropy(2))
OWNER = new_credential(H.owner_ca, "alice", Role.CONTAINER_OWNER, default_lifetime(Role.CONTAINER_OWNER, SIM_EPOCH), Entropy(3))


def run(coro):
    return asyncio.run(coro)


async def pair(tap=None, server_cred=DEPLOY, client_cred=OWNER, server_role=Role.DEPLOY_SYSTEM, **kw):
    a, b = make_pipe("client", "server", tap)
    check = peer_check(H.trust_root, CLOCK, server_role)
    server = asyncio.ensure_future(server_handshake(b, server_cred, None, Entropy(10), **kw))
    client = await client_handshake(a, client_cred, check, Entropy(11))
    return client, await server


def test_pipe_roundtrip_and_eof():
    async def go():
        a, b = make_pipe("a", "b")
        await a.send(b"one", "L")
        assert await b.recv_labeled() == (b"one", "L")
        a.close()
        with pytest.raises(StreamClosed):
            await b.recv()
        with pytest.raises(StreamClosed):
            await b.send(b"x")

    run(go())


def test_tcp_carrier_roundtrip():
    async def go():
        carrier = TcpCarrier()

        async def echo(stream):
            await stream.send(await stream.recv() * 2)

        port = await carrier.serve_tcp("127.0.0.1", 0, echo)
        s = await carrier.connect("t", f"127.0.0.1:{port}")
        await s.send(b"ab")
        assert await s.recv() == b"abab"
        s.close()
        await carrier.shutdown()

    run(go())


def test_local_carrier_unknown_address():
    async def go():
        from tcx.errors import UnknownDestination

        with pytest.raises(UnknownDestination):
            await LocalCarrier().connect("x", "nowhere")

    run(go())


def test_handshake_and_bidirectional_traffic():
    async def go():
        c, s = await pair()
        assert c.peer_certificate.fingerprint == DEPLOY.fingerprint
        assert s.peer_certificate.fingerprint == OWNER.fingerprint
        assert c.transcript_hash == s.transcript_hash
        await c.send(b"ping")
        assert await s.recv() == b"ping"
        await s.send(b"pong")
        assert await c.recv() == b"pong"

    run(go())


def test_wrong_server_role_rejected():
    async def go():
        with pytest.raises(CertificateRejected) as info:
            await pair(server_cred=HOST, server_role=Role.ROOT_VM)
        assert info.value.reason == "WrongRole"

    run(go())


def test_server_rejection_reaches_client_as_same_class():
    async def go():
        a, b = make_pipe("c", "s")

        def refuse(cert):
            raise CertificateRejected("WrongRole", "no owners here")

        server = asyncio.ensure_future(server_handshake(b, DEPLOY, refuse, Entropy(1)))
        with pytest.raises(CertificateRejected):
            await client_handshake(a, OWNER, None, Entropy(2))
        with pytest.raises(CertificateRejected):
            await server

    run(go())


def test_required_client_certificate():
    async def go():
        with pytest.raises(HandshakeFailure):
            await pair(client_cred=None, require_client_cert=True)

    run(go())


def test_tampered_record_aborts():
    def tap(end, frame, label):
        if label == "secret":
            frame = frame[:-1] + bytes([frame[-1] ^ 1])
        return [frame]

    async def go():
        c, s = await pair(tap)
        await c.send(b"payload", "secret")
        with pytest.raises(ChannelAborted):
            await s.recv()
        with pytest.raises(ChannelAborted):
            await s.recv()

    run(go())


def test_replayed_record_dropped_channel_survives():
    def tap(end, frame, label):
        return [frame, frame] if label == "dup" else [frame]

    async def go():
        c, s = await pair(tap)
        await c.send(b"first", "dup")
        await c.send(b"second")
        assert await s.recv() == b"first"
        with pytest.raises(ReplayedRecord):
            await s.recv()
        assert await s.recv() == b"second"

    run(go())


def test_dropped_record_is_a_gap():
    def tap(end, frame, label):
        return [] if label == "lost" else [frame]

    async def go():
        c, s = await pair(tap)
        await c.send(b"gone", "lost")
        await c.send(b"next")
        with pytest.raises(ChannelAborted):
            await s.recv()

    run(go())


def test_close_notify_vs_abrupt_eof():
    async def go():
        c, s = await pair()
        await c.close()
        with pytest.raises(ChannelClosed):
            await s.recv()
        c, s = await pair()
        c.stream.close()
        with pytest.raises(ChannelDown):
            await s.recv()

    run(go())


def test_serve_requests_turns_errors_into_replies():
    async def dispatch(data):
        msg, f = unpack(data)
        if f["name"] == "bad":
            raise UnknownName("bad")
        return pack(Msg.BINDING, name=f["name"], cert_vm=b"", cert_owner=b"")

    async def go():
        c, s = await pair()
        task = asyncio.ensure_future(serve_requests(s, dispatch))
        reply = await c.request(pack(Msg.LOOKUP, name="ok"), Msg.BINDING)
        assert reply["name"] == "ok"
        with pytest.raises(UnknownName):
            await c.request(pack(Msg.LOOKUP, name="bad"), Msg.BINDING)
        await c.close()
        await task

    run(go())


def test_proxy_relays_and_closes_both_sides():
    async def go():
        a1, a2 = make_pipe("a", "p")
        b1, b2 = make_pipe("p", "b")
        task = asyncio.ensure_future(proxy(a2, b1))
        await a1.send(b"x")
        assert await b2.recv() == b"x"
        a1.close()
        await task
        with pytest.raises(StreamClosed):
            await b2.recv()

    run(go())
