"""Wire messages: schema, newline-delimited JSON codec, validation.

Three message types travel between nodes: information (mean + covariance
for one time step), gradient (loss gradient vector for one time step) and
control (period-switch action). Field presence is validated exactly per
type; unknown or missing fields reject the message.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import MalformedMessage

TYPE_INFORMATION = "information"
TYPE_GRADIENT = "gradient"
TYPE_CONTROL = "control"

ACTION_TO_INFORMATION = "to_information"
ACTION_TO_BACKPROPAGATION = "to_backpropagation"
_ACTIONS = (ACTION_TO_INFORMATION, ACTION_TO_BACKPROPAGATION)

_COMMON_FIELDS = {"sender", "recipient", "type"}
_FIELDS_BY_TYPE = {
    TYPE_INFORMATION: _COMMON_FIELDS | {"time_stamp", "mean", "cov"},
    TYPE_GRADIENT: _COMMON_FIELDS | {"time_stamp", "gradient"},
    TYPE_CONTROL: _COMMON_FIELDS | {"action"},
}


@dataclass
class Message:
    """One wire message; unused fields stay None per the type's schema."""

    sender: str
    recipient: str
    type: str
    time_stamp: int | None = None
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None
    gradient: np.ndarray | None = None
    action: str | None = None

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        if (self.sender, self.recipient, self.type, self.time_stamp, self.action) != (
            other.sender,
            other.recipient,
            other.type,
            other.time_stamp,
            other.action,
        ):
            return False
        for a, b in ((self.mean, other.mean), (self.cov, other.cov), (self.gradient, other.gradient)):
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


def information_message(sender, recipient, step, mean, cov) -> Message:
    return Message(
        sender=sender,
        recipient=recipient,
        type=TYPE_INFORMATION,
        time_stamp=int(step),
        mean=np.asarray(mean, dtype=float),
        cov=np.asarray(cov, dtype=float),
    )


def gradient_message(sender, recipient, step, gradient) -> Message:
    return Message(
        sender=sender,
        recipient=recipient,
        type=TYPE_GRADIENT,
        time_stamp=int(step),
        gradient=np.asarray(gradient, dtype=float),
    )


def control_message(sender, recipient, action) -> Message:
    return Message(sender=sender, recipient=recipient, type=TYPE_CONTROL, action=action)


def encode(msg: Message) -> bytes:
    """One JSON object per message, newline terminated. Matrices are
    row-major nested arrays; floats round-trip bit exactly."""
    _validate(msg)
    doc = {"sender": msg.sender, "recipient": msg.recipient, "type": msg.type}
    if msg.type == TYPE_INFORMATION:
        doc["time_stamp"] = msg.time_stamp
        doc["mean"] = msg.mean.tolist()
        doc["cov"] = msg.cov.tolist()
    elif msg.type == TYPE_GRADIENT:
        doc["time_stamp"] = msg.time_stamp
        doc["gradient"] = msg.gradient.tolist()
    else:
        doc["action"] = msg.action
    return (json.dumps(doc, separators=(",", ":")) + "\n").encode("utf-8")


def decode(data, offset: int = 0) -> Message:
    """Parse one message line. Raises MalformedMessage carrying the byte
    offset of the failure within the surrounding stream."""
    if isinstance(data, (bytes, bytearray)):
        text = bytes(data).decode("utf-8", errors="replace")
    else:
        text = str(data)
    text = text.strip("\n")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedMessage(
            f"invalid JSON: {exc.msg}", offset=offset + exc.pos
        ) from exc
    return _from_dict(doc, offset)


def decode_stream(data: bytes):
    """Decode a byte stream of newline-delimited messages."""
    messages = []
    offset = 0
    for line in bytes(data).split(b"\n"):
        if line.strip():
            messages.append(decode(line, offset=offset))
        offset += len(line) + 1
    return messages


def _fail(reason, offset):
    raise MalformedMessage(reason, offset=offset)


def _finite_vector(value, name, offset):
    if not isinstance(value, list) or not value:
        _fail(f"{name} must be a non-empty array", offset)
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        _fail(f"{name} must contain numbers", offset)
        raise
    if arr.ndim != 1 or not np.all(np.isfinite(arr)):
        _fail(f"{name} must be a flat array of finite numbers", offset)
    return arr


def _from_dict(doc, offset) -> Message:
    if not isinstance(doc, dict):
        _fail("message must be a JSON object", offset)
    mtype = doc.get("type")
    if mtype not in _FIELDS_BY_TYPE:
        _fail(f"unknown message type {mtype!r}", offset)
    expected = _FIELDS_BY_TYPE[mtype]
    got = set(doc)
    if got != expected:
        missing = expected - got
        extra = got - expected
        _fail(
            f"{mtype} message fields mismatch: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}",
            offset,
        )
    for key in ("sender", "recipient"):
        if not isinstance(doc[key], str) or not doc[key]:
            _fail(f"{key} must be a non-empty string", offset)

    msg = Message(sender=doc["sender"], recipient=doc["recipient"], type=mtype)
    if mtype == TYPE_CONTROL:
        if doc["action"] not in _ACTIONS:
            _fail(f"unknown control action {doc['action']!r}", offset)
        msg.action = doc["action"]
        return msg

    ts = doc["time_stamp"]
    if not isinstance(ts, int) or isinstance(ts, bool):
        _fail("time_stamp must be an integer step index", offset)
    msg.time_stamp = ts

    if mtype == TYPE_GRADIENT:
        msg.gradient = _finite_vector(doc["gradient"], "gradient", offset)
        return msg

    msg.mean = _finite_vector(doc["mean"], "mean", offset)
    cov = doc["cov"]
    n = len(msg.mean)
    if (
        not isinstance(cov, list)
        or len(cov) != n
        or any(not isinstance(row, list) or len(row) != n for row in cov)
    ):
        _fail(f"cov must be a {n}x{n} nested array", offset)
    arr = np.asarray(cov, dtype=float)
    if not np.all(np.isfinite(arr)):
        _fail("cov must contain finite numbers", offset)
    msg.cov = arr
    return msg


def _validate(msg: Message):
    if msg.type not in _FIELDS_BY_TYPE:
        raise MalformedMessage(f"unknown message type {msg.type!r}")
    if msg.type == TYPE_CONTROL:
        ok = (
            msg.action in _ACTIONS
            and msg.time_stamp is None
            and msg.mean is None
            and msg.cov is None
            and msg.gradient is None
        )
    elif msg.type == TYPE_GRADIENT:
        ok = (
            isinstance(msg.time_stamp, int)
            and msg.gradient is not None
            and msg.mean is None
            and msg.cov is None
            and msg.action is None
        )
    else:
        ok = (
            isinstance(msg.time_stamp, int)
            and msg.mean is not None
            and msg.cov is not None
            and msg.cov.shape == (len(msg.mean), len(msg.mean))
            and msg.gradient is None
            and msg.action is None
        )
    if not ok:
        raise MalformedMessage(f"fields inconsistent with type {msg.type!r}")
    for arr in (msg.mean, msg.cov, msg.gradient):
        if arr is not None and not np.all(np.isfinite(arr)):
            raise MalformedMessage("non-finite values cannot be encoded")
