"""SC-VM agent and the owner-side runtime proxy.

The agent's phase machine::

    Booted --(secret bundle injected)--> Identified --LoadImage--> ImageLoaded
           --Exec--> Running --Stop--> Stopped

``Status`` is answered in every phase. Any other command outside its phase
is refused with WrongPhase and leaves the state untouched. Commands carry
strictly increasing sequence numbers; a stale number is ReplayedCommand.

Workload scripts are plain text inside the image, one step per line::

    # comment
    echo TEXT           write TEXT and a newline
    cat LAYER           write the layer's bytes
    sha256 LAYER        write "<hex>  LAYER" and a newline
    layers              write "<layer> <length>" per layer
    write LAYER TEXT    store TEXT and a newline, zero padded, over the layer's first block
    peek LAYER          write the layer's first block with trailing zero bytes removed
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .channel import SecureChannel, server_handshake
from .control_plane import (
    ROOT_CA_PATH,
    GuestContext,
    SecretBundle,
)
from .crypto import sha256
from .errors import (
    ChannelAborted,
    ChannelClosed,
    ChannelDown,
    HandshakeFailure,
    IntegrityFailure,
    NotProvisioned,
    OwnerMismatch,
    ReplayedCommand,
    ReplayedRecord,
    StreamClosed,
    TcxError,
    WireError,
    WorkloadError,
    WrongPhase,
)
from .images import BLOCK_SIZE, BlockDevice, ImageKey, SealedImage, open_image
from .pki import Role, RoleCertificate, issued_by, verify_chain
from .protocol import Msg, pack, unpack
from .transport import Stream

logger = logging.getLogger(__name__)


class Phase(str, enum.Enum):
    BOOTED = "Booted"
    IDENTIFIED = "Identified"
    IMAGE_LOADED = "ImageLoaded"
    RUNNING = "Running"
    STOPPED = "Stopped"


class CommandKind(str, enum.Enum):
    LOAD_IMAGE = "LoadImage"
    EXEC = "Exec"
    STATUS = "Status"
    STOP = "Stop"


# (phase, command) -> next phase; Status is handled separately
TRANSITIONS: Dict[Tuple[Phase, CommandKind], Phase] = {
    (Phase.IDENTIFIED, CommandKind.LOAD_IMAGE): Phase.IMAGE_LOADED,
    (Phase.IMAGE_LOADED, CommandKind.EXEC): Phase.RUNNING,
    (Phase.RUNNING, CommandKind.STOP): Phase.STOPPED,
}

ALLOWED_EDGES = frozenset(
    {(Phase.BOOTED, Phase.IDENTIFIED)} | {(p, q) for (p, _), q in TRANSITIONS.items()}
)


@dataclass(frozen=True)
class OwnerCommand:
    seq: int
    kind: CommandKind
    argument: bytes = field(default=b"", repr=False)

    def to_message(self) -> bytes:
        return pack(Msg.OWNER_COMMAND, seq=self.seq, kind=self.kind.value, argument=self.argument)

    @classmethod
    def from_message(cls, data: bytes) -> "OwnerCommand":
        _, f = unpack(data, Msg.OWNER_COMMAND)
        try:
            kind = CommandKind(f["kind"])
        except ValueError as exc:
            raise WireError(f"unknown command kind {f['kind']!r}") from exc
        return cls(f["seq"], kind, f["argument"])


@dataclass(frozen=True)
class CommandResult:
    seq: int
    ok: bool
    phase: Phase
    code: str = ""
    output: bytes = b""

    def to_message(self) -> bytes:
        return pack(
            Msg.COMMAND_RESULT, seq=self.seq, ok=int(self.ok), phase=self.phase.value, code=self.code, output=self.output
        )

    @classmethod
    def from_message(cls, data: bytes) -> "CommandResult":
        _, f = unpack(data, Msg.COMMAND_RESULT)
        return cls(f["seq"], bool(f["ok"]), Phase(f["phase"]), f["code"], f["output"])


@dataclass
class AgentState:
    phase: Phase = Phase.BOOTED
    secrets: Optional[SecretBundle] = None
    image_handle: Optional[BlockDevice] = None


def run_workload(device: BlockDevice, entry: str) -> bytes:
    """Interpret the script stored in layer ``entry``; every read is authenticated."""
    try:
        script = device.read_layer(entry).decode("utf-8")
    except KeyError:
        raise WorkloadError(f"entry {entry!r} is not a layer of the image") from None
    except UnicodeDecodeError as exc:
        raise WorkloadError(f"entry {entry!r} is not a text script") from exc
    out: List[bytes] = []
    for lineno, raw in enumerate(script.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        op, _, rest = line.partition(" ")
        rest = rest.strip()
        try:
            if op == "echo":
                out.append(rest.encode() + b"\n")
            elif op == "cat":
                out.append(device.read_layer(rest))
            elif op == "sha256":
                out.append(f"{sha256(device.read_layer(rest)).hex()}  {rest}\n".encode())
            elif op == "layers":
                out.extend(f"{e.layer_id} {e.length}\n".encode() for e in device.layers)
            elif op == "write":
                layer, _, body = rest.partition(" ")
                data = body.encode() + b"\n"
                if len(data) > BLOCK_SIZE:
                    raise WorkloadError(f"line {lineno}: write longer than one block")
                device.write(device.layer(layer).first_block, data.ljust(BLOCK_SIZE, b"\x00"))
            elif op == "peek":
                out.append(device.read(device.layer(rest).first_block).rstrip(b"\x00"))
            else:
                raise WorkloadError(f"line {lineno}: unknown step {op!r}")
        except KeyError as exc:
            raise WorkloadError(f"line {lineno}: no layer {exc.args[0]!r}") from None
        except ValueError as exc:
            raise WorkloadError(f"line {lineno}: {exc}") from None
    return b"".join(out)


class CommandSession:
    """Sequence-number window of one owner channel."""

    def __init__(self, core: "AgentCore"):
        self.core = core
        self.last_seq = 0

    def handle(self, cmd: OwnerCommand) -> CommandResult:
        if cmd.seq <= self.last_seq:
            self.core.rejections.append(ReplayedCommand.code)
            return CommandResult(cmd.seq, False, self.core.phase, ReplayedCommand.code, b"")
        self.last_seq = cmd.seq
        return self.core.apply(cmd)


class AgentCore:
    """The command state machine, independent of any transport."""

    def __init__(self, disk: Optional[bytes]):
        self.state = AgentState()
        self.disk = disk
        self.rejections: List[str] = []
        self._session = CommandSession(self)

    @property
    def phase(self) -> Phase:
        return self.state.phase

    def identify(self, bundle: SecretBundle) -> None:
        if self.state.phase != Phase.BOOTED:
            raise WrongPhase("secrets already injected")
        self.state.secrets = bundle
        self.state.phase = Phase.IDENTIFIED

    def session(self) -> CommandSession:
        return CommandSession(self)

    def handle(self, cmd: OwnerCommand) -> CommandResult:
        """Handle through the core's own default session."""
        return self._session.handle(cmd)

    def apply(self, cmd: OwnerCommand) -> CommandResult:
        """Run a command whose sequence number was already accepted."""
        try:
            output = self._apply(cmd)
        except TcxError as exc:
            self.rejections.append(exc.code)
            return CommandResult(cmd.seq, False, self.phase, exc.code, str(exc).encode())
        return CommandResult(cmd.seq, True, self.phase, "", output)

    def _apply(self, cmd: OwnerCommand) -> bytes:
        phase = self.state.phase
        if cmd.kind == CommandKind.STATUS:
            return phase.value.encode()
        nxt = TRANSITIONS.get((phase, cmd.kind))
        if nxt is None:
            raise WrongPhase(f"{cmd.kind.value} not allowed in phase {phase.value}")
        output = b""
        if cmd.kind == CommandKind.LOAD_IMAGE:
            self.state.image_handle = self._load(cmd.argument)
        elif cmd.kind == CommandKind.EXEC:
            output = run_workload(self.state.image_handle, cmd.argument.decode("utf-8", "replace"))
        elif cmd.kind == CommandKind.STOP:
            self.state.image_handle = None
        self.state.phase = nxt
        return output

    def _load(self, key_bytes: bytes) -> BlockDevice:
        if self.disk is None:
            raise IntegrityFailure(None, "no image attached to this VM")
        key = ImageKey.from_bytes(key_bytes)
        device = open_image(SealedImage.from_bytes(self.disk), None, key)
        device.verify_all()
        return device


class ScVmAgent:
    """Guest program of an SC-VM."""

    def __init__(self, ctx: GuestContext):
        from .sclib import SecureChannelLib

        self.ctx = ctx
        self.trust_root = RoleCertificate.from_bytes(ctx.files[ROOT_CA_PATH])
        self.entropy = ctx.entropy
        self.clock = ctx.clock
        self.core = AgentCore(ctx.disk)
        self.events: List[str] = []
        self.sclib = SecureChannelLib(self)
        ctx.vm.on_secret(self._on_bundle)

    @property
    def phase(self) -> Phase:
        return self.core.phase

    @property
    def secrets(self) -> Optional[SecretBundle]:
        return self.core.state.secrets

    def _on_bundle(self, plaintext: bytes) -> None:
        bundle = SecretBundle.from_payload(plaintext, self.ctx.vm.vm_id, self.trust_root, self.clock())
        self.core.identify(bundle)
        self._credential = bundle.credential()

    @property
    def credential(self):
        if self.secrets is None:
            raise NotProvisioned("SC-VM has not received its secrets")
        return self._credential

    async def _authorize(self, cert: Optional[RoleCertificate]) -> None:
        secrets = self.secrets
        if cert is None:
            raise HandshakeFailure("client certificate required")
        if cert.role == Role.CONTAINER_OWNER:
            if not verify_chain(cert, self.trust_root, self.clock(), Role.CONTAINER_OWNER):
                raise HandshakeFailure("owner certificate does not verify")
            if cert.fingerprint != secrets.cert_owner.fingerprint:
                raise OwnerMismatch(f"{cert.subject_name} is not the owner of this VM")
            return
        if cert.role == Role.SC_VM:
            if not issued_by(cert, secrets.cert_rootvm) or not verify_chain(cert, self.trust_root, self.clock(), Role.SC_VM):
                raise HandshakeFailure("SC-VM certificate not issued by this host's root VM")
            await self.sclib._authorize_dialer(cert)
            return
        raise HandshakeFailure(f"role {cert.role.name} may not connect to an SC-VM")

    async def serve(self, stream: Stream) -> None:
        channel = await server_handshake(
            stream, self.credential, self._authorize, self.entropy, require_client_cert=True
        )
        if channel.peer_certificate.role == Role.CONTAINER_OWNER:
            await self._owner_loop(channel)
        else:
            await self.sclib._incoming(channel)

    async def _owner_loop(self, channel: SecureChannel) -> None:
        session = self.core.session()
        while True:
            try:
                data = await channel.recv()
            except ReplayedRecord:
                self.events.append(ReplayedCommand.code)
                self.core.rejections.append(ReplayedCommand.code)
                continue
            except (ChannelClosed, ChannelDown, ChannelAborted) as exc:
                self.events.append(type(exc).__name__)
                return
            try:
                result = session.handle(OwnerCommand.from_message(data))
            except WireError as exc:
                await channel.send(pack(Msg.ERROR, code=exc.code, message=str(exc)))
                continue
            try:
                await channel.send(result.to_message())
            except (ChannelDown, ChannelClosed, StreamClosed):
                return


# -- owner side ----------------------------------------------------------------


class Runtime:
    """Executes OwnerCommands somewhere; returns the raw result."""

    async def execute(self, cmd: OwnerCommand) -> CommandResult:
        raise NotImplementedError


class RemoteRuntime(Runtime):
    def __init__(self, channel: SecureChannel):
        self.channel = channel

    async def execute(self, cmd: OwnerCommand) -> CommandResult:
        try:
            await self.channel.send(cmd.to_message())
            data = await self.channel.recv_skip_replays()
        except (ChannelClosed, ChannelAborted, StreamClosed) as exc:
            raise ChannelDown(str(exc)) from exc
        return CommandResult.from_message(data)

    async def close(self) -> None:
        await self.channel.close()


class LocalRuntime(Runtime):
    """Runs the same state machine in-process, as a locally running container would."""

    def __init__(self, disk: Optional[bytes], bundle: Optional[SecretBundle] = None):
        self.core = AgentCore(disk)
        self.core.state.phase = Phase.IDENTIFIED
        self.core.state.secrets = bundle

    async def execute(self, cmd: OwnerCommand) -> CommandResult:
        return self.core.handle(cmd)


class RuntimeProxy:
    """Translates container-runtime verbs into OwnerCommands.

    ``create`` loads the image key, ``start`` runs the entry, ``state`` asks
    for status and ``kill`` stops. Results are surfaced unchanged and the
    encoded responses are kept in ``transcript``.
    """

    VERBS = {
        "create": CommandKind.LOAD_IMAGE,
        "start": CommandKind.EXEC,
        "state": CommandKind.STATUS,
        "kill": CommandKind.STOP,
    }

    def __init__(self, runtime: Runtime, first_seq: int = 1):
        self.runtime = runtime
        self._seq = first_seq
        self.transcript: List[bytes] = []

    async def command(self, kind: CommandKind, argument: bytes = b"") -> CommandResult:
        cmd = OwnerCommand(self._seq, kind, argument)
        self._seq += 1
        result = await self.runtime.execute(cmd)
        self.transcript.append(result.to_message())
        return result

    async def oci(self, verb: str, argument: bytes = b"") -> CommandResult:
        try:
            kind = self.VERBS[verb]
        except KeyError:
            raise ValueError(f"unsupported runtime verb {verb!r}") from None
        return await self.command(kind, argument)

    async def create(self, image_key: ImageKey) -> CommandResult:
        return await self.oci("create", image_key.to_bytes())

    async def start(self, entry: str) -> CommandResult:
        return await self.oci("start", entry.encode())

    async def state(self) -> CommandResult:
        return await self.oci("state")

    async def kill(self) -> CommandResult:
        return await self.oci("kill")
