import pytest
from hypothesis import given, strategies as st

from tcx.errors import (
    AttestationFailed,
    CertificateRejected,
    OwnerMismatch,
    TcxError,
    WireError,
    error_from_code,
)
from tcx.protocol import SCHEMA, Msg, error_message, field_names, label, pack, unpack

KIND_STRATEGY = {
    "b": st.binary(max_size=64),
    "s": st.text(max_size=20),
    "i": st.integers(min_value=0, max_value=2**64 - 1),
    "L": st.lists(st.text(max_size=8), max_size=5),
}


@st.composite
def messages(draw):
    msg = draw(st.sampled_from(sorted(SCHEMA)))
    fields = {}
    for f in SCHEMA[msg]:
        name, kind = f.split(":")
        fields[name] = draw(KIND_STRATEGY[kind])
    return msg, fields


@given(messages())
def test_pack_unpack_roundtrip(m):
    msg, fields = m
    data = pack(msg, **fields)
    got_msg, got = unpack(data)
    assert got_msg == msg
    assert got == fields
    assert pack(got_msg, **got) == data


def test_every_message_type_has_a_schema():
    assert set(SCHEMA) == set(Msg)


def test_pack_rejects_missing_and_unknown_fields():
    with pytest.raises(ValueError):
        pack(Msg.REGISTER)
    with pytest.raises(ValueError):
        pack(Msg.REGISTER, name="x", extra=1)


def test_unpack_rejects_garbage():
    with pytest.raises(WireError):
        unpack(b"")
    with pytest.raises(WireError):
        unpack(b"\xff")
    with pytest.raises(WireError):
        unpack(pack(Msg.REGISTER, name="x") + b"\x00")


def test_error_reply_is_raised_as_original_class():
    data = error_message(OwnerMismatch("not yours"))
    with pytest.raises(OwnerMismatch, match="not yours"):
        unpack(data, Msg.OK)


@pytest.mark.parametrize(
    "exc",
    [AttestationFailed("StaleNonce", "old report"), CertificateRejected("WrongRole", "host cert")],
)
def test_structured_errors_keep_reason(exc):
    back = error_from_code(exc.code, str(exc))
    assert type(back) is type(exc)
    assert back.reason == exc.reason


def test_unknown_error_code_is_generic():
    back = error_from_code("SomethingNew", "msg")
    assert isinstance(back, TcxError)


def test_unexpected_type_is_wire_error():
    with pytest.raises(WireError):
        unpack(pack(Msg.OK), Msg.NAMES)


def test_labels():
    assert label(pack(Msg.OWNER_COMMAND, seq=1, kind="LoadImage", argument=b"k")) == "OWNER_COMMAND:LoadImage"
    assert label(pack(Msg.REGISTER, name="n")) == "REGISTER"
    assert label(b"") == "EMPTY"
    assert label(b"\xee") == "0xee"


def test_field_names():
    assert field_names(Msg.OWNER_COMMAND) == ("seq", "kind", "argument")
