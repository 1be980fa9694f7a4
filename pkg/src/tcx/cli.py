"""``tcx``: the Container Owner's command-line tool.

Artifacts live under ``--state-dir`` (default ``./.tcx``)::

    owner.key          Ed25519 private key (hex)
    owner.cert         owner certificate (canonical binary)
    root_ca.cert       Root CA certificate pinned at ``owner init``
    vendor_root.pub    simulated silicon vendor key pinned at ``owner init``
    vms/<vm_id>.json   attested SC-VM records written by ``vm create``
    config.json        optional defaults (see below)

Option values resolve as: command-line flag, then ``TCX_*`` environment
variable (``TCX_HOST``, ``TCX_DEPLOY``, ``TCX_STATE_DIR``, ``TCX_CONFIG``,
``TCX_TRANSCRIPT``, ``TCX_EXPECTED_MEASUREMENT``, ``TCX_IMAGE_KEY``), then the JSON config file, then the built-in default. The config file is a
flat object keyed by option name, e.g. ``{"host": "127.0.0.1:7700"}``.

Exit codes: 0 success, 2 verification failure, 3 transport failure,
4 usage error, 1 anything else.
"""

from __future__ import annotations

import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import click

from .agent import CommandResult, RuntimeProxy
from .control_plane import fixed_clock
from .crypto import Entropy
from .errors import (
    AttestationFailed,
    BootRejected,
    ChannelAborted,
    ChannelClosed,
    ChannelDown,
    DecryptFailure,
    HandshakeFailure,
    IntegrityFailure,
    InvalidValidList,
    RootVmNotValid,
    StreamClosed,
    TcxError,
    UnknownDestination,
    error_from_code,
)
from .fixtures import boot_measurements
from .images import ImageKey, SealedImage, layers_from_directory, open_image, seal_image
from .owner import OwnerClient, VmRecord
from .pki import Credential, RoleCertificate, ValidRootVmList
from .transport import TcpCarrier

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_VERIFY = 2
EXIT_TRANSPORT = 3
EXIT_USAGE = 4

VERIFICATION_ERRORS = (
    AttestationFailed,
    BootRejected,
    DecryptFailure,
    HandshakeFailure,
    IntegrityFailure,
    InvalidValidList,
    RootVmNotValid,
)
TRANSPORT_ERRORS = (ChannelAborted, ChannelClosed, ChannelDown, StreamClosed, UnknownDestination, OSError)

OWNER_KEY = "owner.key"
OWNER_CERT = "owner.cert"
ROOT_CA = "root_ca.cert"
VENDOR_ROOT = "vendor_root.pub"
VM_DIR = "vms"
CONFIG = "config.json"


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, click.UsageError):
        return EXIT_USAGE
    if isinstance(exc, VERIFICATION_ERRORS):
        return EXIT_VERIFY
    if isinstance(exc, TRANSPORT_ERRORS):
        return EXIT_TRANSPORT
    return EXIT_FAILURE


class _FlatDefaults(dict):
    """Config mapping that hands the same flat dict to every subcommand."""

    def get(self, key, default=None):
        if key in self:
            return dict.get(self, key)
        return self if key in _COMMAND_NAMES else default


_COMMAND_NAMES = set()


class State:
    def __init__(self, root: Path, transcript: Optional[Path]):
        self.root = root
        self.transcript = transcript
        self.carrier = TcpCarrier()
        self.clock = fixed_clock()
        self.entropy = Entropy()

    def path(self, name: str) -> Path:
        return self.root / name

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise click.UsageError(f"{p} missing; run `tcx owner init` first")
        return p

    def trust_root(self) -> RoleCertificate:
        return RoleCertificate.from_bytes(self.need(ROOT_CA).read_bytes())

    def vendor_root(self) -> bytes:
        return bytes.fromhex(self.need(VENDOR_ROOT).read_text().strip())

    def owner(self, host: str, deploy: Optional[str] = None) -> OwnerClient:
        cert = RoleCertificate.from_bytes(self.need(OWNER_CERT).read_bytes())
        key = bytes.fromhex(self.need(OWNER_KEY).read_text().strip())
        return OwnerClient(
            Credential.from_parts(cert, key), self.trust_root(), self.vendor_root(), self.carrier,
            host_address=host, deploy_address=deploy or host, entropy=self.entropy, clock=self.clock,
            origin="tcx-cli",
        )

    def save_vm(self, record: VmRecord, host: str) -> Path:
        d = self.path(VM_DIR)
        d.mkdir(parents=True, exist_ok=True)
        body = json.loads(record.to_json())
        body["host"] = host
        p = d / f"{record.vm_id}.json"
        p.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return p

    def load_vm(self, vm_id: str):
        p = self.path(VM_DIR) / f"{vm_id}.json"
        if not p.exists():
            raise click.UsageError(f"no record for VM {vm_id} under {self.root}")
        text = p.read_text()
        return VmRecord.from_json(text), json.loads(text).get("host")

    def write_transcript(self, owner: OwnerClient) -> None:
        if self.transcript is None:
            return
        with self.transcript.open("a") as fh:
            for label, data in owner.sent:
                fh.write(f"{label}\t{len(data)}\t{data.hex()}\n")


def _run(coro):
    return asyncio.run(coro)


async def _closing(state: State, coro):
    try:
        return await coro
    finally:
        await state.carrier.shutdown()


def _require(result: CommandResult) -> CommandResult:
    if not result.ok:
        raise error_from_code(result.code, result.output.decode(errors="replace"))
    return result


@click.group()
@click.option("--state-dir", type=click.Path(file_okay=False, path_type=Path), default=".tcx", show_default=True,
              envvar="TCX_STATE_DIR", help="Directory holding keys, certificates and VM records.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), envvar="TCX_CONFIG",
              help="JSON defaults file (default: <state-dir>/config.json).")
@click.option("--transcript", type=click.Path(dir_okay=False, path_type=Path), envvar="TCX_TRANSCRIPT",
              help="Append every message this invocation sends (label, length, hex).")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx: click.Context, state_dir: Path, config_path: Optional[Path], transcript: Optional[Path], verbose: int):
    """Container Owner tool for the simulated confidential-container platform."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    path = config_path or state_dir / CONFIG
    if path.exists():
        try:
            ctx.default_map = _FlatDefaults(json.loads(path.read_text()))
        except ValueError as exc:
            raise click.UsageError(f"bad config file {path}: {exc}")
    elif config_path is not None:
        raise click.UsageError(f"config file {config_path} not found")
    ctx.obj = State(state_dir, transcript)


pass_state = click.make_pass_decorator(State)
host_option = click.option("--host", envvar="TCX_HOST", help="Host Service address (host:port).")


# -- owner ---------------------------------------------------------------------


@main.group()
def owner():
    """Owner identity."""


@owner.command("init")
@click.argument("name")
@click.option("--deploy", envvar="TCX_DEPLOY", required=True, help="Deploy Service address (host:port).")
@click.option("--force", is_flag=True, help="Overwrite an existing identity.")
@pass_state
def owner_init(state: State, name: str, deploy: str, force: bool):
    """Create an owner key pair and enroll it with the Deploy Service."""
    if state.path(OWNER_KEY).exists() and not force:
        raise click.UsageError(f"{state.path(OWNER_KEY)} exists; pass --force to replace it")

    async def go():
        return await OwnerClient.enroll(state.carrier, name, deploy, state.entropy, state.clock, origin="tcx-cli")

    client = _run(_closing(state, go()))
    state.root.mkdir(parents=True, exist_ok=True)
    key_path = state.path(OWNER_KEY)
    key_path.write_text(client.credential.private_bytes().hex() + "\n")
    key_path.chmod(0o600)
    state.path(OWNER_CERT).write_bytes(client.certificate.to_bytes())
    state.path(ROOT_CA).write_bytes(client.trust_root.to_bytes())
    state.path(VENDOR_ROOT).write_text(client.vendor_root.hex() + "\n")
    click.echo(f"enrolled {name}: {client.certificate.fingerprint.hex()}")


# -- image ---------------------------------------------------------------------


@main.group()
def image():
    """Sealed container images."""


@image.command("seal")
@click.argument("directory", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--key-out", type=click.Path(dir_okay=False, path_type=Path), required=True)
def image_seal(directory: Path, out: Path, key_out: Path):
    """Seal every file under DIRECTORY into an encrypted, tagged image."""
    layers = layers_from_directory(directory)
    if not layers:
        raise click.UsageError(f"{directory} has no files")
    key = ImageKey.generate()
    sealed = seal_image(layers, key)
    out.write_bytes(sealed.to_bytes())
    key_out.write_text(key.to_bytes().hex() + "\n")
    key_out.chmod(0o600)
    click.echo(f"image {sealed.image_id.hex()} ({sealed.block_count} blocks, {len(layers)} layers)")


def _read_key(path: Path) -> ImageKey:
    return ImageKey.from_bytes(bytes.fromhex(path.read_text().strip()))


@image.command("inspect")
@click.argument("path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
def image_inspect(path: Path):
    """Print the header of a sealed image (no key needed)."""
    click.echo(SealedImage.from_bytes(path.read_bytes()).describe())


@image.command("verify")
@click.argument("path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--key", "key_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
def image_verify(path: Path, key_path: Path):
    """Authenticate every block of a sealed image under its key."""
    sealed = SealedImage.from_bytes(path.read_bytes())
    open_image(sealed, None, _read_key(key_path)).verify_all()
    click.echo(f"ok: {sealed.block_count} blocks authenticated")


@image.command("upload")
@click.argument("host")
@click.argument("path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@pass_state
def image_upload(state: State, host: str, path: Path):
    """Upload a sealed image to the Host Service at HOST; prints the image id."""
    client = state.owner(host)
    try:
        image_id = _run(_closing(state, client.upload_image(path.read_bytes())))
    finally:
        state.write_transcript(client)
    click.echo(image_id)


# -- vm --------------------------------------------------------------------------


@main.group()
def vm():
    """SC-VM lifecycle."""


@vm.command("create")
@click.argument("host")
@click.argument("image_id")
@click.option("--expected-measurement", envvar="TCX_EXPECTED_MEASUREMENT", required=True, help="Launch measurement (hex) the SC-VM must attest to.")
@pass_state
def vm_create(state: State, host: str, image_id: str, expected_measurement: str):
    """Create an SC-VM for IMAGE_ID and verify its attestation evidence locally."""
    try:
        expected = bytes.fromhex(expected_measurement)
    except ValueError:
        raise click.BadParameter("not hex", param_hint="--expected-measurement")
    client = state.owner(host)
    try:
        record = _run(_closing(state, client.create_vm(image_id, expected)))
    finally:
        state.write_transcript(client)
    state.save_vm(record, host)
    click.echo(record.vm_id)


def _vm_command(state: State, vm_id: str, host: Optional[str], verb: str, argument: bytes = b"") -> CommandResult:
    record, saved_host = state.load_vm(vm_id)
    host = host or saved_host
    if not host:
        raise click.UsageError("no --host given and none recorded for this VM")
    client = state.owner(host)

    async def go():
        proxy: RuntimeProxy = await client.connect_vm(record)
        try:
            return _require(await proxy.oci(verb, argument))
        finally:
            await proxy.runtime.close()

    try:
        return _run(_closing(state, go()))
    finally:
        state.write_transcript(client)


@vm.command("load-key")
@click.argument("vm_id")
@click.option("--key", "key_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True,
              envvar="TCX_IMAGE_KEY")
@host_option
@pass_state
def vm_load_key(state: State, vm_id: str, key_path: Path, host: Optional[str]):
    """Send the image key to the attested SC-VM, which opens and verifies the image."""
    result = _vm_command(state, vm_id, host, "create", _read_key(key_path).to_bytes())
    click.echo(f"phase: {result.phase.value}")


@vm.command("exec")
@click.argument("vm_id")
@click.argument("entry")
@host_option
@pass_state
def vm_exec(state: State, vm_id: str, entry: str, host: Optional[str]):
    """Run the workload ENTRY inside the SC-VM and print its output."""
    result = _vm_command(state, vm_id, host, "start", entry.encode())
    sys.stdout.buffer.write(result.output)
    sys.stdout.flush()


@vm.command("status")
@click.argument("vm_id")
@host_option
@pass_state
def vm_status(state: State, vm_id: str, host: Optional[str]):
    result = _vm_command(state, vm_id, host, "state")
    click.echo(f"phase: {result.phase.value}")


@vm.command("stop")
@click.argument("vm_id")
@host_option
@pass_state
def vm_stop(state: State, vm_id: str, host: Optional[str]):
    result = _vm_command(state, vm_id, host, "kill")
    click.echo(f"phase: {result.phase.value}")


# -- boot / cert -------------------------------------------------------------------


@main.group()
def boot():
    """Measured boot artifacts."""


@boot.command("measure")
@click.option("--kind", type=click.Choice(["scvm", "rootvm"]), default="scvm", show_default=True)
@pass_state
def boot_measure(state: State, kind: str):
    """Recompute the reference launch measurement from the pinned trust anchors."""
    click.echo(boot_measurements(state.trust_root(), state.vendor_root())[kind].hex())


@main.group()
def cert():
    """Certificates and valid lists."""


@cert.command("dump")
@click.argument("path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
def cert_dump(path: Path):
    """Print a certificate or a valid Root VM list in readable form."""
    data = path.read_bytes()
    try:
        click.echo(RoleCertificate.from_bytes(data).describe())
        return
    except TcxError:
        pass
    vlist = ValidRootVmList.from_bytes(data)
    click.echo(f"valid root VM list issued_at={vlist.issued_at} entries={len(vlist.entries)}")
    for fp in vlist.entries:
        click.echo(f"  {fp.hex()}")


# -- testbed / sim -------------------------------------------------------------------


@main.group()
def testbed():
    """Local deployment for trying the tool."""


async def serve_testbed(seed: int, listen: str, port: int, on_ready=None, stop: Optional[asyncio.Event] = None):
    """Run Deploy Service plus Host Service behind one TCP port and deploy a Root VM."""
    from .testbed import Testbed

    tb = Testbed(seed, carrier=TcpCarrier())
    await tb.start()
    tb.host.route_overrides["deploy"] = tb.deploy.serve_channel
    handle = await tb.deploy_rootvm()
    bound = await tb.carrier.serve_tcp(listen, port, tb.host.handle_connection)
    if on_ready is not None:
        on_ready(tb, bound, handle)
    try:
        await (stop.wait() if stop is not None else asyncio.Event().wait())
    finally:
        await tb.close()


@testbed.command("serve")
@click.option("--listen", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=7700, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--port-file", type=click.Path(dir_okay=False, path_type=Path), help="Write the bound port here.")
def testbed_serve(listen: str, port: int, seed: int, port_file: Optional[Path]):
    """Serve host, deploy and Root VM endpoints on one port (until interrupted)."""

    def ready(tb, bound, handle):
        if port_file is not None:
            port_file.write_text(f"{bound}\n")
        click.echo(f"listening on {listen}:{bound}")
        click.echo(f"root VM {handle.vm_id}")
        click.echo(f"scvm measurement {tb.known_good['scvm'].hex()}")
        sys.stdout.flush()

    try:
        _run(serve_testbed(seed, listen, port, ready))
    except KeyboardInterrupt:
        pass


@main.group()
def sim():
    """Deterministic network simulation."""


@sim.command("run")
@click.argument("script", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--transcript-out", type=click.Path(dir_okay=False, path_type=Path), help="Write the frame transcript.")
def sim_run(script: Path, seed: int, transcript_out: Optional[Path]):
    """Run a scenario script; exit 0 when every step behaves as scripted."""
    from .scenarios import run_scenario

    result = run_scenario(script.read_text(), seed, script.stem)
    click.echo(result.summary())
    if transcript_out is not None:
        transcript_out.write_text("".join(e.line() + "\n" for e in result.transcript))
    if not result.completed:
        raise click.exceptions.Exit(EXIT_VERIFY)


_COMMAND_NAMES.update(["owner", "image", "vm", "boot", "cert", "testbed", "sim"])
for group in (owner, image, vm, boot, cert, testbed, sim):
    _COMMAND_NAMES.update(group.commands)


def run(argv=None) -> int:
    """Invoke the CLI and map failures onto exit codes."""
    try:
        rv = main.main(args=argv, prog_name="tcx", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_FAILURE
    except click.ClickException as exc:
        exc.show()
        return exit_code_for(exc)
    except (TcxError, OSError) as exc:
        code = exit_code_for(exc)
        kind = {EXIT_VERIFY: "verification failed", EXIT_TRANSPORT: "transport failure"}.get(code, "error")
        click.echo(f"tcx: {kind}: {type(exc).__name__}: {exc}", err=True)
        return code
    return rv if isinstance(rv, int) else EXIT_OK


def entry() -> None:
    sys.exit(run())
