"""Binary framing for protocol messages.

Frame layout (little-endian)::

    magic    4 bytes  b"DPHY"
    version  1 byte   currently 1
    type     1 byte   MessageType
    length   4 bytes  payload length (uint32)
    payload  length bytes

CONTRIBUTION payloads are the p masked ring elements as uint64, so a
client's upload is 8p + 10 bytes whatever the number of clients.
"""

import json
import logging
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import ClassVar, Iterable

import numpy as np

from errors import FrameError
from voting import HyperparameterGrid

logger = logging.getLogger(__name__)


class MessageType(IntEnum):
    """Round message types."""
    GRID_ANNOUNCE = 1
    SEED_EXCHANGE = 2
    CONTRIBUTION = 3
    AGGREGATE = 4
    ABORT = 5


@dataclass(frozen=True)
class RoundMessage:
    """One framed protocol message."""

    MAGIC: ClassVar[bytes] = b"DPHY"
    VERSION: ClassVar[int] = 1
    HEADER: ClassVar[struct.Struct] = struct.Struct("<4sBBI")

    msg_type: MessageType
    payload: bytes

    def encode(self) -> bytes:
        return self.HEADER.pack(self.MAGIC, self.VERSION, int(self.msg_type), len(self.payload)) + self.payload

    @classmethod
    def parse_header(cls, header: bytes) -> tuple[MessageType, int]:
        """Validate a 10-byte header; returns (type, payload length)."""
        if len(header) != cls.HEADER.size:
            raise FrameError(f"Truncated frame header: {len(header)} of {cls.HEADER.size} bytes")
        magic, version, raw_type, length = cls.HEADER.unpack(header)
        if magic != cls.MAGIC:
            raise FrameError(f"Invalid frame magic: {magic!r}")
        if version != cls.VERSION:
            raise FrameError(f"Unsupported frame version: {version}")
        try:
            msg_type = MessageType(raw_type)
        except ValueError:
            raise FrameError(f"Unknown message type: {raw_type}") from None
        return msg_type, length

    @classmethod
    def decode(cls, data: bytes) -> "RoundMessage":
        msg_type, length = cls.parse_header(data[: cls.HEADER.size])
        payload = data[cls.HEADER.size:]
        if len(payload) != length:
            raise FrameError(f"Payload length mismatch: header says {length}, got {len(payload)}")
        return cls(msg_type, payload)

    def expect(self, msg_type: MessageType) -> "RoundMessage":
        if self.msg_type != msg_type:
            raise FrameError(f"Expected {msg_type.name}, got {self.msg_type.name}")
        return self


FRAME_HEADER_SIZE = RoundMessage.HEADER.size


def contribution_message(ring: np.ndarray) -> RoundMessage:
    return RoundMessage(MessageType.CONTRIBUTION, np.asarray(ring, dtype="<u8").tobytes())


def read_contribution(message: RoundMessage) -> np.ndarray:
    message.expect(MessageType.CONTRIBUTION)
    if len(message.payload) % 8:
        raise FrameError(f"Contribution payload of {len(message.payload)} bytes is not whole ring elements")
    return np.frombuffer(message.payload, dtype="<u8").astype(np.uint64)


def aggregate_message(values: np.ndarray) -> RoundMessage:
    return RoundMessage(MessageType.AGGREGATE, np.asarray(values, dtype="<f8").tobytes())


def read_aggregate(message: RoundMessage) -> np.ndarray:
    message.expect(MessageType.AGGREGATE)
    if len(message.payload) % 8:
        raise FrameError(f"Aggregate payload of {len(message.payload)} bytes is not whole float64 values")
    return np.frombuffer(message.payload, dtype="<f8").astype(np.float64)


_SEED_PAIR = struct.Struct("<II")


def seed_exchange_message(i: int, j: int, seed: int) -> RoundMessage:
    return RoundMessage(MessageType.SEED_EXCHANGE, _SEED_PAIR.pack(i, j) + seed.to_bytes(16, "little"))


def read_seed_exchange(message: RoundMessage) -> tuple[int, int, int]:
    message.expect(MessageType.SEED_EXCHANGE)
    if len(message.payload) != _SEED_PAIR.size + 16:
        raise FrameError(f"Seed exchange payload must be {_SEED_PAIR.size + 16} bytes")
    i, j = _SEED_PAIR.unpack(message.payload[: _SEED_PAIR.size])
    return i, j, int.from_bytes(message.payload[_SEED_PAIR.size:], "little")


def grid_announce_message(round_id: str, grid: HyperparameterGrid, k: int) -> RoundMessage:
    body = {"round_id": round_id, "k": k, "candidates": json.loads(grid.to_json())}
    return RoundMessage(MessageType.GRID_ANNOUNCE, json.dumps(body, sort_keys=True).encode("utf-8"))


def read_grid_announce(message: RoundMessage) -> tuple[str, HyperparameterGrid, int]:
    message.expect(MessageType.GRID_ANNOUNCE)
    try:
        body = json.loads(message.payload.decode("utf-8"))
        return body["round_id"], HyperparameterGrid(tuple(body["candidates"])), int(body["k"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FrameError(f"Malformed grid announcement: {e}") from e


def abort_message(round_id: str, dropouts: Iterable[int]) -> RoundMessage:
    body = {"round_id": round_id, "dropouts": sorted(dropouts)}
    return RoundMessage(MessageType.ABORT, json.dumps(body, sort_keys=True).encode("utf-8"))


def read_abort(message: RoundMessage) -> tuple[str, frozenset[int]]:
    message.expect(MessageType.ABORT)
    try:
        body = json.loads(message.payload.decode("utf-8"))
        return body["round_id"], frozenset(body["dropouts"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FrameError(f"Malformed abort message: {e}") from e


@dataclass(frozen=True)
class CommunicationCost:
    """Bytes moved by one successful round."""

    per_client_upload: int
    coordinator_ingress: int
    aggregate_broadcast: int


def communication_cost(p: int, n: int) -> CommunicationCost:
    """Upload per client is linear in p and independent of n."""
    upload = FRAME_HEADER_SIZE + 8 * p
    return CommunicationCost(
        per_client_upload=upload,
        coordinator_ingress=n * upload,
        aggregate_broadcast=FRAME_HEADER_SIZE + 8 * p,
    )
