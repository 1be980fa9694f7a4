"""Scenario scripts, adversarial hosts and the reference sclib client and server.

A scenario script is plain text, one directive per line (``#`` comments)::

    adversary tamper label=OWNER_COMMAND:Exec src=host offset=-1
    adversary fake-platform
    host replaying-reports
    boot-override scvm kernel
    owner alice
    deploy
    upload alice
    create alice
    expect RootVmNotValid

Configuration directives (``adversary``, ``host``, ``boot-override``) must
precede actions. ``expect CODE[:REASON]`` applies to the action right
before it: that action must fail with the given error code (and reason or
boot stage, when given). Any other failure ends the run.

Actions: ``owner NAME``, ``deploy``, ``revoke``, ``upload NAME``,
``create NAME [bogus-measurement]``, ``load-key NAME [wrong-key]``,
``exec NAME ENTRY``, ``status NAME``, ``stop NAME``, ``check-output NAME``,
``intrude NAME VICTIM``, ``rejected NAME CODE``, ``listings CLIENT SERVER``.
"""

from __future__ import annotations

import asyncio
import logging
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from . import crypto
from .agent import RuntimeProxy
from .channel import server_handshake
from .control_plane import HostService
from .crypto import Entropy
from .errors import TcxError, WireError, error_from_code
from .fixtures import DATA_DIR, REFERENCE_ENTRY, reference_expected_output
from .images import ImageKey
from .mock_tee import SealedInjection, VendorRoot, create_platform
from .owner import OwnerClient, VmRecord
from .simnet import Adversary, SimNetwork, TranscriptEntry, flip_byte, match
from .testbed import Testbed
from .transport import Stream

logger = logging.getLogger(__name__)

SCENARIO_DIR = DATA_DIR / "scenarios"


# -- adversarial hosts ---------------------------------------------------------


class ReplayingHost(HostService):
    """Answers attestation requests with the first report it produced for each VM kind."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._kinds: Dict[str, str] = {}
        self._stash: Dict[str, object] = {}

    async def launch(self, kind: str, image_id: str = "") -> str:
        vm_id = await super().launch(kind, image_id)
        self._kinds[vm_id] = kind
        return vm_id

    async def attest(self, vm_id, nonce):
        report = await super().attest(vm_id, nonce)
        return self._stash.setdefault(self._kinds.get(vm_id, "?"), report)


class ImpersonatingHost(HostService):
    """Answers connections for the Root VM itself, using its own host certificate."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.route_overrides["rootvm"] = self._pose_as_rootvm

    async def _pose_as_rootvm(self, stream: Stream) -> None:
        try:
            await server_handshake(stream, self.credential, None, self.entropy)
        except TcxError as exc:
            logger.debug("impostor handshake ended: %r", exc)


class RewrappingHost(HostService):
    """Re-wraps every sealed injection under its own Diffie-Hellman share."""

    async def inject(self, vm_id: str, sealed: SealedInjection) -> None:
        mine = crypto.public_bytes(crypto.dh_key(self.entropy))
        forged = SealedInjection(mine, sealed.platform_id, sealed.vm_id, sealed.nonce, sealed.ciphertext)
        await super().inject(vm_id, forged)


HOSTS = {
    "honest": HostService,
    "replaying-reports": ReplayingHost,
    "impersonate-rootvm": ImpersonatingHost,
    "rewrap-injections": RewrappingHost,
}


def fake_platform_identity(seed: int = 0):
    """A platform built by the attacker: well-formed, but endorsed by a vendor key it made up."""
    return create_platform(Entropy(seed).child("fake-platform").bytes(32), VendorRoot.generate(b"attacker vendor"))


@dataclass(frozen=True)
class TeeVerdict:
    outcome: str  # "deployed" or "attack_blocked"
    reason: str = ""


async def _fake_tee(mode: str, seed: int) -> TeeVerdict:
    adversary = Adversary(fake_platform=fake_platform_identity(seed)) if mode == "fake-platform" else None
    host_cls = RewrappingHost if mode == "rewrap" else HostService
    async with Testbed(seed, adversary=adversary, host_cls=host_cls) as tb:
        try:
            await tb.deploy_rootvm()
        except TcxError as exc:
            return TeeVerdict("attack_blocked", str(getattr(exc, "reason", "") or exc.code))
    return TeeVerdict("deployed")


def fake_tee_scenario(mode: str = "fake-platform", seed: int = 0) -> TeeVerdict:
    """Deploy a Root VM on an honest platform, a fake platform, or through a re-wrapping host."""
    if mode not in ("honest", "fake-platform", "rewrap"):
        raise ValueError(mode)
    return asyncio.run(_fake_tee(mode, seed))


# -- reference sclib programs -------------------------------------------------


async def listing_client(lib, log: List[str]) -> None:
    await lib.register("TEST_CLIENT")
    await lib.get_registered_vms()

    owner = await lib.get_self_owner()

    valid_owners = [owner]
    conn = await lib.dial("TEST_SERVER", valid_owners)

    await conn.write(b"Hello from client")
    buf = bytearray(32)
    n = await conn.read(buf)
    buf = buf[:n]
    log.append("Got from server: " + buf.decode())

    await conn.close()


async def listing_server(lib, log: List[str], connections: int = 1) -> None:
    await lib.register("TEST_SERVER")
    await lib.get_registered_vms()

    listener = await lib.listen()

    for _ in range(connections):
        try:
            conn = await listener.accept()
        except TcxError:
            continue

        buf = bytearray(32)
        n = await conn.read(buf)
        buf = buf[:n]
        log.append("Got from client: " + buf.decode())

        await conn.write(b"Hello from server")

        await conn.close()


async def run_listings(tb: Testbed, client_owner: OwnerClient, server_owner: OwnerClient) -> Tuple[List[str], List[str]]:
    """Create one SC-VM per owner and run the two programs inside them."""
    server_rec, _ = await tb.provision_vm(server_owner, "listing-server")
    client_rec, _ = await tb.provision_vm(client_owner, "listing-client")
    server_lib = tb.agent(server_rec.vm_id).sclib
    client_lib = tb.agent(client_rec.vm_id).sclib
    server_log: List[str] = []
    client_log: List[str] = []
    server = asyncio.ensure_future(listing_server(server_lib, server_log))
    while server_lib._listener is None and not server.done():
        await asyncio.sleep(0)
    if server.done():
        server.result()
    try:
        await listing_client(client_lib, client_log)
    except BaseException:
        server.cancel()
        raise
    await server
    return client_log, server_log


# -- script runner ---------------------------------------------------------------


@dataclass
class StepOutcome:
    line: int
    action: str
    ok: bool
    code: str = ""
    detail: str = ""


@dataclass
class ScenarioResult:
    name: str
    seed: int
    steps: List[StepOutcome] = field(default_factory=list)
    transcript: List[TranscriptEntry] = field(default_factory=list)
    transcript_hash: str = ""
    completed: bool = False
    error: Optional[str] = None
    outputs: Dict[str, bytes] = field(default_factory=dict)

    def summary(self) -> str:
        lines = [f"scenario {self.name} seed={self.seed}"]
        for s in self.steps:
            status = "ok" if s.ok else f"error {s.code}"
            lines.append(f"  {s.line:>3}: {s.action} -> {status}")
        lines.append(f"  transcript {len(self.transcript)} frames sha256={self.transcript_hash}")
        lines.append("  completed" if self.completed else f"  stopped: {self.error}")
        return "\n".join(lines)


@dataclass
class _Directive:
    line: int
    words: List[str]

    @property
    def text(self) -> str:
        return " ".join(self.words)


def parse_script(text: str) -> List[_Directive]:
    out = []
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            out.append(_Directive(i, shlex.split(line)))
    return out


def _kv(words: List[str]) -> Dict[str, str]:
    out = {}
    for w in words:
        key, sep, value = w.partition("=")
        if not sep:
            raise WireError(f"expected key=value, got {w!r}")
        out[key] = value
    return out


def _selector(args: Dict[str, str]):
    return match(
        label=args.get("label"),
        src=args.get("src"),
        dst=args.get("dst"),
        nth=int(args["nth"]) if "nth" in args else None,
        prefix=args.get("prefix", "0") not in ("0", "", "no"),
    )


def _configure(directives: List[_Directive], seed: int):
    adversary = Adversary()
    host_cls = HostService
    overrides: Dict[str, str] = {}
    actions = []
    for d in directives:
        head = d.words[0]
        if head in ("adversary", "host", "boot-override"):
            if actions:
                raise WireError(f"line {d.line}: configuration after the first action")
            if head == "host":
                host_cls = HOSTS[d.words[1]]
            elif head == "boot-override":
                overrides[d.words[1]] = d.words[2]
            else:
                kind, args = d.words[1], _kv(d.words[2:])
                if kind == "fake-platform":
                    adversary.fake_platform = fake_platform_identity(seed)
                elif kind == "tamper":
                    adversary.tamper = flip_byte(_selector(args), int(args.get("offset", "-1")))
                elif kind in ("drop", "replay", "tear"):
                    setattr(adversary, kind, _selector(args))
                else:
                    raise WireError(f"line {d.line}: unknown adversary hook {kind!r}")
        else:
            actions.append(d)
    return adversary, host_cls, overrides, actions


def _boot_overrides(tb: Testbed, overrides: Dict[str, str]):
    out = {}
    for kind, what in overrides.items():
        honest = tb.boot_images[kind].pinned()
        if what == "kernel":
            out[kind] = honest.replace(kernel=honest.kernel + b"\n# backdoor\n")
        elif what == "params":
            out[kind] = honest.replace(params=honest.params + b" init=/bin/sh")
        elif what == "fs":
            out[kind] = honest.replace(fs_image=honest.fs_image + b"\x00backdoor")
        elif what == "rebuild":
            out[kind] = honest.replace(kernel=honest.kernel + b"\n# backdoor\n", firmware_payload=None)
        else:
            raise WireError(f"unknown boot override {what!r}")
    return out


@dataclass
class _OwnerState:
    client: OwnerClient
    image_id: str = ""
    key: Optional[ImageKey] = None
    record: Optional[VmRecord] = None
    proxy: Optional[RuntimeProxy] = None
    output: bytes = b""


class _Runner:
    def __init__(self, tb: Testbed, result: ScenarioResult):
        self.tb = tb
        self.result = result
        self.owners: Dict[str, _OwnerState] = {}

    def owner(self, name: str) -> _OwnerState:
        try:
            return self.owners[name]
        except KeyError:
            raise WireError(f"unknown owner {name!r}") from None

    async def proxy(self, st: _OwnerState) -> RuntimeProxy:
        if st.proxy is None:
            st.proxy = await st.client.connect_vm(st.record)
        return st.proxy

    async def command(self, st: _OwnerState, verb: str, arg: bytes = b""):
        result = await (await self.proxy(st)).oci(verb, arg)
        if not result.ok:
            raise error_from_code(result.code, result.output.decode(errors="replace"))
        return result

    async def run(self, d: _Directive) -> None:
        w = d.words
        act = w[0]
        tb = self.tb
        if act == "owner":
            self.owners[w[1]] = _OwnerState(await tb.new_owner(w[1]))
        elif act == "deploy":
            await tb.deploy_rootvm()
        elif act == "revoke":
            tb.deploy.revoke(tb.deploy.deployed[-1].certificate.fingerprint)
        elif act == "upload":
            st = self.owner(w[1])
            image, st.key = tb.seal_reference(w[1])
            st.image_id = await st.client.upload_image(image.to_bytes())
        elif act == "create":
            st = self.owner(w[1])
            expected = tb.known_good["scvm"]
            if "bogus-measurement" in w[2:]:
                expected = crypto.sha256(b"not the SC-VM you are looking for")
            st.record = await st.client.create_vm(st.image_id, expected)
        elif act == "load-key":
            st = self.owner(w[1])
            key = st.key
            if "wrong-key" in w[2:]:
                key = ImageKey(crypto.sha256(b"wrong", key.key), key.image_id)
            await self.command(st, "create", key.to_bytes())
        elif act == "exec":
            st = self.owner(w[1])
            entry = w[2] if len(w) > 2 else REFERENCE_ENTRY
            st.output = (await self.command(st, "start", entry.encode())).output
            self.result.outputs[w[1]] = st.output
        elif act == "status":
            await self.command(self.owner(w[1]), "state")
        elif act == "stop":
            await self.command(self.owner(w[1]), "kill")
        elif act == "check-output":
            if self.owner(w[1]).output != reference_expected_output():
                raise TcxError("workload output differs from the reference transcript")
        elif act == "intrude":
            intruder, victim = self.owner(w[1]), self.owner(w[2])
            await intruder.client.connect_vm(victim.record)
        elif act == "rejected":
            agent = tb.agent(self.owner(w[1]).record.vm_id)
            if w[2] not in agent.core.rejections:
                raise TcxError(f"agent did not record {w[2]}: {agent.core.rejections}")
        elif act == "listings":
            client_log, server_log = await run_listings(tb, self.owner(w[1]).client, self.owner(w[2]).client)
            self.result.outputs["client"] = "\n".join(client_log).encode()
            self.result.outputs["server"] = "\n".join(server_log).encode()
        else:
            raise WireError(f"line {d.line}: unknown action {act!r}")


def _matches(exc: TcxError, expect: str) -> bool:
    code, _, reason = expect.partition(":")
    if exc.code != code:
        return False
    if not reason:
        return True
    detail = getattr(exc, "reason", None) or getattr(exc, "stage", None)
    return str(detail) == reason


async def run_scenario_async(script: str, seed: int = 0, name: str = "script") -> ScenarioResult:
    directives = parse_script(script)
    result = ScenarioResult(name, seed)
    adversary, host_cls, overrides, actions = _configure(directives, seed)
    tb = Testbed(seed, adversary=adversary, host_cls=host_cls)
    if overrides:
        tb.host.boot_images.update(_boot_overrides(tb, overrides))
    net: SimNetwork = tb.network
    runner = _Runner(tb, result)
    await tb.start()
    try:
        i = 0
        while i < len(actions):
            d = actions[i]
            expect = None
            if i + 1 < len(actions) and actions[i + 1].words[0] == "expect":
                expect = actions[i + 1].words[1]
                i += 1
            if d.words[0] == "expect":
                result.error = f"line {d.line}: expect without a preceding action"
                break
            i += 1
            net.step = f"{d.line}:{d.words[0]}"
            try:
                await net.run_until_quiet(runner.run(d))
            except TcxError as exc:
                code = exc.code if type(exc) is not TcxError else "Error"
                result.steps.append(StepOutcome(d.line, d.text, False, code, str(exc)))
                if expect is None or not _matches(exc, expect):
                    result.error = f"line {d.line}: {d.text}: {code}: {exc}"
                    break
                continue
            result.steps.append(StepOutcome(d.line, d.text, True))
            if expect is not None:
                result.error = f"line {d.line}: {d.text}: expected {expect} but it succeeded"
                break
        else:
            result.completed = True
    finally:
        await tb.close()
        result.transcript = list(net.transcript)
        result.transcript_hash = net.transcript_hash()
    return result


def run_scenario(script: str, seed: int = 0, name: str = "script") -> ScenarioResult:
    return asyncio.run(run_scenario_async(script, seed, name))


def named_scenarios() -> Dict[str, Path]:
    return {p.stem: p for p in sorted(SCENARIO_DIR.glob("*.tcxs"))}


def run_named(name: str, seed: int = 0) -> ScenarioResult:
    path = named_scenarios()[name]
    return run_scenario(path.read_text(), seed, name)
