"""Message catalogue shared by every actor.

An application message is one type byte followed by the canonical
length-prefixed encoding of its fields. Field kinds: ``b`` raw bytes,
``s`` UTF-8 text, ``i`` unsigned 64-bit integer, ``L`` list of text.
See docs/protocol.md for the conversation each message belongs to.
"""

from __future__ import annotations

import enum
from typing import Dict, Tuple

from .errors import TcxError, WireError, error_from_code
from .wire import (
    decode_fields,
    decode_str_list,
    encode_fields,
    encode_str_list,
    read_text,
    read_u64,
    text,
    u64,
)


class Msg(enum.IntEnum):
    ROUTE = 0x01
    ROUTE_OK = 0x02
    ROUTE_ERR = 0x03

    CLIENT_HELLO = 0x10
    SERVER_HELLO = 0x11
    CLIENT_FINISH = 0x12
    HANDSHAKE_DONE = 0x13
    HANDSHAKE_ALERT = 0x14

    ERROR = 0x20
    OK = 0x21

    UPLOAD_IMAGE = 0x30
    IMAGE_STORED = 0x31
    FETCH_IMAGE = 0x32
    IMAGE_DATA = 0x33
    LAUNCH_VM = 0x34
    VM_LAUNCHED = 0x35
    ATTEST = 0x36
    REPORT = 0x37
    INJECT = 0x38

    ENROLL_OWNER = 0x40
    CERTIFICATE = 0x41
    GET_VALID_LIST = 0x42
    VALID_LIST = 0x43
    GET_TRUST_BUNDLE = 0x44
    TRUST_BUNDLE = 0x45

    GET_ROOTVM_CERT = 0x50
    CREATE_SCVM = 0x51
    SCVM_CREATED = 0x52
    REGISTER = 0x53
    LOOKUP = 0x54
    BINDING = 0x55
    LIST_NAMES = 0x56
    NAMES = 0x57
    OWNER_OF = 0x58

    OWNER_COMMAND = 0x60
    COMMAND_RESULT = 0x61

    STREAM_DATA = 0x70

    # Payloads that only ever travel inside a SealedInjection.
    ROOTVM_PROVISION = 0x80
    SECRET_BUNDLE = 0x81


SCHEMA: Dict[Msg, Tuple[str, ...]] = {
    Msg.ROUTE: ("destination:s",),
    Msg.ROUTE_OK: (),
    Msg.ROUTE_ERR: ("code:s", "message:s"),
    Msg.CLIENT_HELLO: ("ephemeral:b", "random:b", "certificate:b"),
    Msg.SERVER_HELLO: ("ephemeral:b", "random:b", "certificate:b", "signature:b", "want_client_cert:i"),
    Msg.CLIENT_FINISH: ("signature:b",),
    Msg.HANDSHAKE_DONE: (),
    Msg.HANDSHAKE_ALERT: ("code:s", "message:s"),
    Msg.ERROR: ("code:s", "message:s"),
    Msg.OK: (),
    Msg.UPLOAD_IMAGE: ("data:b",),
    Msg.IMAGE_STORED: ("image_id:s",),
    Msg.FETCH_IMAGE: ("image_id:s",),
    Msg.IMAGE_DATA: ("data:b",),
    Msg.LAUNCH_VM: ("kind:s", "image_id:s"),
    Msg.VM_LAUNCHED: ("vm_id:s",),
    Msg.ATTEST: ("vm_id:s", "nonce:b"),
    Msg.REPORT: ("report:b",),
    Msg.INJECT: ("vm_id:s", "sealed:b"),
    Msg.ENROLL_OWNER: ("name:s", "public_key:b", "proof:b"),
    Msg.CERTIFICATE: ("certificate:b",),
    Msg.GET_VALID_LIST: (),
    Msg.VALID_LIST: ("valid_list:b",),
    Msg.GET_TRUST_BUNDLE: (),
    Msg.TRUST_BUNDLE: ("root_ca:b", "vendor_root:b"),
    Msg.GET_ROOTVM_CERT: (),
    Msg.CREATE_SCVM: ("image_id:s", "owner_nonce:b"),
    Msg.SCVM_CREATED: ("vm_id:s", "cert_vm:b", "report:b"),
    Msg.REGISTER: ("name:s",),
    Msg.LOOKUP: ("name:s",),
    Msg.BINDING: ("name:s", "cert_vm:b", "cert_owner:b"),
    Msg.LIST_NAMES: (),
    Msg.NAMES: ("names:L",),
    Msg.OWNER_OF: ("vm_fingerprint:b",),
    Msg.OWNER_COMMAND: ("seq:i", "kind:s", "argument:b"),
    Msg.COMMAND_RESULT: ("seq:i", "ok:i", "phase:s", "code:s", "output:b"),
    Msg.STREAM_DATA: ("data:b",),
    Msg.ROOTVM_PROVISION: ("cert_rootvm:b", "private_key:b", "signer:b", "signature:b"),
    Msg.SECRET_BUNDLE: ("cert_rootvm:b", "cert_vm:b", "private_key:b", "cert_owner:b", "signature:b"),
}


def field_names(msg: Msg) -> Tuple[str, ...]:
    return tuple(f.split(":")[0] for f in SCHEMA[msg])


def _encode(kind: str, value) -> bytes:
    if kind == "b":
        return bytes(value)
    if kind == "s":
        return text(value)
    if kind == "i":
        return u64(int(value))
    if kind == "L":
        return encode_str_list(value)
    raise ValueError(kind)


def _decode(kind: str, raw: bytes):
    if kind == "b":
        return raw
    if kind == "s":
        return read_text(raw)
    if kind == "i":
        return read_u64(raw)
    if kind == "L":
        return decode_str_list(raw)
    raise ValueError(kind)


def pack(msg: Msg, **fields) -> bytes:
    layout = SCHEMA[msg]
    names = [f.split(":")[0] for f in layout]
    unknown = set(fields) - set(names)
    if unknown:
        raise ValueError(f"{msg.name}: unknown fields {sorted(unknown)}")
    out = []
    for f in layout:
        name, kind = f.split(":")
        if name not in fields:
            raise ValueError(f"{msg.name}: missing field {name}")
        out.append(_encode(kind, fields[name]))
    return bytes([msg]) + encode_fields(*out)


def unpack(data: bytes, expect: Msg = None) -> Tuple[Msg, dict]:
    if not data:
        raise WireError("empty message")
    try:
        msg = Msg(data[0])
    except ValueError as exc:
        raise WireError(f"unknown message type 0x{data[0]:02x}") from exc
    layout = SCHEMA[msg]
    raw = decode_fields(data[1:], len(layout))
    values = {}
    for f, r in zip(layout, raw):
        name, kind = f.split(":")
        values[name] = _decode(kind, r)
    if expect is not None and msg != expect:
        if msg in (Msg.ERROR, Msg.ROUTE_ERR, Msg.HANDSHAKE_ALERT):
            raise error_from_code(values["code"], values["message"])
        raise WireError(f"expected {expect.name}, got {msg.name}")
    return msg, values


def error_message(exc: BaseException) -> bytes:
    code = exc.code if isinstance(exc, TcxError) else "InternalError"
    return pack(Msg.ERROR, code=code, message=str(exc))


def label(data: bytes) -> str:
    """Human-readable message type for transcripts; never raises."""
    if not data:
        return "EMPTY"
    try:
        msg = Msg(data[0])
    except ValueError:
        return f"0x{data[0]:02x}"
    if msg == Msg.OWNER_COMMAND:
        try:
            return f"OWNER_COMMAND:{unpack(data)[1]['kind']}"
        except TcxError:
            pass
    return msg.name
