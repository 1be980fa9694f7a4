import json

import pytest

from helpers import Server, tcx
from tcx.cli import EXIT_OK, EXIT_TRANSPORT, EXIT_USAGE, EXIT_VERIFY
from tcx.fixtures import REFERENCE_ENTRY, REFERENCE_IMAGE_DIR, reference_expected_output


@pytest.fixture(scope="module")
def server():
    with Server(seed=4) as s:
        yield s


@pytest.fixture
def owner(tmp_path, server, capsysbinary):
    state = tmp_path / "state"
    code, out, _ = tcx(capsysbinary, "--state-dir", state, "owner", "init", "alice", "--deploy", server.address)
    assert code == EXIT_OK, out
    return state


def sealed(tmp_path, capsysbinary):
    img, key = tmp_path / "img.tcx", tmp_path / "img.key"
    code, out, _ = tcx(capsysbinary, "image", "seal", REFERENCE_IMAGE_DIR, "--out", img, "--key-out", key)
    assert code == EXIT_OK
    return img, key


def test_full_script(tmp_path, server, owner, capsysbinary):
    s = ["--state-dir", owner]
    trace = tmp_path / "trace.txt"
    img, key = sealed(tmp_path, capsysbinary)
    code, out, _ = tcx(capsysbinary, *s, "image", "upload", server.address, img)
    assert code == EXIT_OK
    image_id = out.decode().strip()
    code, out, _ = tcx(capsysbinary, *s, "boot", "measure")
    measurement = out.decode().strip()
    assert measurement == server.tb.known_good["scvm"].hex()
    code, out, err = tcx(
        capsysbinary, *s, "--transcript", trace, "vm", "create", server.address, image_id,
        "--expected-measurement", measurement,
    )
    assert code == EXIT_OK, err
    vm_id = out.decode().strip()
    assert (owner / "vms" / f"{vm_id}.json").exists()
    assert "LoadImage" not in trace.read_text()
    code, out, _ = tcx(capsysbinary, *s, "--transcript", trace, "vm", "load-key", vm_id, "--key", key)
    assert (code, out) == (EXIT_OK, b"phase: ImageLoaded\n")
    code, out, _ = tcx(capsysbinary, *s, "vm", "exec", vm_id, REFERENCE_ENTRY)
    assert code == EXIT_OK
    assert out == reference_expected_output()
    assert tcx(capsysbinary, *s, "vm", "status", vm_id)[1] == b"phase: Running\n"
    assert tcx(capsysbinary, *s, "vm", "stop", vm_id)[1] == b"phase: Stopped\n"
    code, _, err = tcx(capsysbinary, *s, "vm", "exec", vm_id, REFERENCE_ENTRY)
    assert code != EXIT_OK and "WrongPhase" in err
    labels = [line.split("\t")[0] for line in trace.read_text().splitlines()]
    assert labels.index("CREATE_SCVM") < labels.index("OWNER_COMMAND:LoadImage")


def test_wrong_measurement_never_sends_key(tmp_path, server, owner, capsysbinary):
    s = ["--state-dir", owner]
    trace = tmp_path / "trace.txt"
    img, key = sealed(tmp_path, capsysbinary)
    image_id = tcx(capsysbinary, *s, "image", "upload", server.address, img)[1].decode().strip()
    code, _, err = tcx(
        capsysbinary, *s, "--transcript", trace, "vm", "create", server.address, image_id,
        "--expected-measurement", "00" * 32,
    )
    assert code == EXIT_VERIFY
    assert "WrongMeasurement" in err
    raw_key = bytes.fromhex(key.read_text().strip())
    body = trace.read_text()
    assert "LoadImage" not in body
    assert raw_key.hex() not in body and raw_key[16:].hex() not in body
    assert not list((owner / "vms").glob("*.json")) if (owner / "vms").exists() else True


def test_exit_codes(tmp_path, server, owner, capsysbinary):
    s = ["--state-dir", owner]
    assert tcx(capsysbinary, *s, "vm", "create", server.address, "x", "--expected-measurement", "zz")[0] == EXIT_USAGE
    assert tcx(capsysbinary, *s, "no-such-command")[0] == EXIT_USAGE
    assert tcx(capsysbinary, "--state-dir", tmp_path / "empty", "boot", "measure")[0] == EXIT_USAGE
    code = tcx(capsysbinary, *s, "vm", "create", "127.0.0.1:1", "x", "--expected-measurement", "00")[0]
    assert code == EXIT_TRANSPORT


def test_config_precedence(tmp_path, server, owner, capsysbinary, monkeypatch):
    s = ["--state-dir", owner]
    img, _ = sealed(tmp_path, capsysbinary)
    image_id = tcx(capsysbinary, *s, "image", "upload", server.address, img)[1].decode().strip()
    measurement = server.tb.known_good["scvm"].hex()
    (owner / "config.json").write_text(json.dumps({"expected_measurement": "00" * 32}))
    # config alone: wrong measurement
    code, _, _ = tcx(capsysbinary, *s, "vm", "create", server.address, image_id)
    assert code == EXIT_VERIFY
    # env beats config
    monkeypatch.setenv("TCX_EXPECTED_MEASUREMENT", measurement)
    code, _, err = tcx(capsysbinary, *s, "vm", "create", server.address, image_id)
    assert code == EXIT_OK, err
    # flag beats env
    code, _, _ = tcx(capsysbinary, *s, "vm", "create", server.address, image_id, "--expected-measurement", "11" * 32)
    assert code == EXIT_VERIFY
    vm_id = tcx(capsysbinary, *s, "vm", "create", server.address, image_id)[1].decode().strip()
    # recorded host, then env override, then flag override
    assert tcx(capsysbinary, *s, "vm", "status", vm_id)[0] == EXIT_OK
    monkeypatch.setenv("TCX_HOST", "127.0.0.1:1")
    assert tcx(capsysbinary, *s, "vm", "status", vm_id)[0] == EXIT_TRANSPORT
    assert tcx(capsysbinary, *s, "vm", "status", vm_id, "--host", server.address)[0] == EXIT_OK


def test_revoked_rootvm(tmp_path, owner, capsysbinary):
    with Server(seed=9) as srv:
        state = tmp_path / "s2"
        assert tcx(capsysbinary, "--state-dir", state, "owner", "init", "bob", "--deploy", srv.address)[0] == EXIT_OK
        img, _ = sealed(tmp_path, capsysbinary)
        image_id = tcx(capsysbinary, "--state-dir", state, "image", "upload", srv.address, img)[1].decode().strip()
        srv.call(srv.tb.deploy.revoke, srv.handle.certificate.fingerprint)
        code, _, err = tcx(
            capsysbinary, "--state-dir", state, "vm", "create", srv.address, image_id,
            "--expected-measurement", srv.tb.known_good["scvm"].hex(),
        )
        assert code != EXIT_OK
        assert "root VM not in valid list" in err


def test_image_commands(tmp_path, capsysbinary):
    img, key = sealed(tmp_path, capsysbinary)
    code, out, _ = tcx(capsysbinary, "image", "inspect", img)
    assert code == EXIT_OK and b"block_count: 6" in out
    assert tcx(capsysbinary, "image", "verify", img, "--key", key)[0] == EXIT_OK
    data = bytearray(img.read_bytes())
    data[-40] ^= 1
    img.write_bytes(bytes(data))
    code, _, err = tcx(capsysbinary, "image", "verify", img, "--key", key)
    assert code == EXIT_VERIFY and "IntegrityFailure" in err


def test_cert_dump(owner, capsysbinary):
    code, out, _ = tcx(capsysbinary, "cert", "dump", owner / "owner.cert")
    assert code == EXIT_OK
    assert b"role:        CONTAINER_OWNER" in out and b"subject:     alice" in out


def test_sim_run(tmp_path, capsysbinary):
    from tcx.scenarios import named_scenarios

    out_file = tmp_path / "t.txt"
    code, out, _ = tcx(capsysbinary, "sim", "run", named_scenarios()["fake_platform"], "--transcript-out", out_file)
    assert code == EXIT_OK and b"completed" in out
    assert out_file.read_text().count("\n") > 10
    bad = tmp_path / "bad.tcxs"
    bad.write_text("owner alice\nexpect WrongKey\n")
    assert tcx(capsysbinary, "sim", "run", bad)[0] == EXIT_VERIFY
