"""Client/coordinator channels for protocol rounds.

Both transports move the same framed bytes, so a round produces identical
transcripts over either. The socket transport uses one local stream pair
per client and plain framing with no TLS: this is a simulation tool.
"""

import logging
import socket
from abc import ABC, abstractmethod
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Optional, Sequence

from errors import FrameError, InvalidParameterError
from wire import RoundMessage

logger = logging.getLogger(__name__)


class Transport(ABC):
    """One channel per client, opened fresh for every round attempt."""

    name = "abstract"

    def __init__(self) -> None:
        self.logger = logging.getLogger(__name__)
        self.participants: tuple[int, ...] = ()
        self.hung_up: set[int] = set()

    def open(self, participants: Sequence[int]) -> None:
        self.close()
        self.participants = tuple(participants)
        self.hung_up = set()
        self._open_channels()

    @abstractmethod
    def _open_channels(self) -> None:
        ...

    @abstractmethod
    def send(self, sender: int, frame: bytes) -> None:
        """Deliver one frame from a client to the coordinator."""

    @abstractmethod
    def hang_up(self, sender: int) -> None:
        """Client leaves the round without sending."""

    @abstractmethod
    def collect(self) -> dict[int, Optional[bytes]]:
        """Coordinator side: one frame per participant, None if it never arrived."""

    @abstractmethod
    def broadcast(self, frame: bytes) -> dict[int, bytes]:
        """Coordinator sends to every live client; returns what each received."""

    def close(self) -> None:
        pass

    def __enter__(self) -> "Transport":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def _check_sender(self, sender: int) -> None:
        if sender not in self.participants:
            raise InvalidParameterError("sender", sender, "not a participant of this round")


class MemoryTransport(Transport):
    """In-process mailboxes."""

    name = "memory"

    def _open_channels(self) -> None:
        self._inbox: dict[int, Optional[bytes]] = {pid: None for pid in self.participants}

    def send(self, sender: int, frame: bytes) -> None:
        self._check_sender(sender)
        if self._inbox[sender] is not None:
            raise FrameError(f"Participant {sender} already delivered a frame this round")
        self._inbox[sender] = bytes(frame)

    def hang_up(self, sender: int) -> None:
        self._check_sender(sender)
        self.hung_up.add(sender)
        self._inbox[sender] = None

    def collect(self) -> dict[int, Optional[bytes]]:
        return {pid: self._inbox[pid] for pid in self.participants}

    def broadcast(self, frame: bytes) -> dict[int, bytes]:
        return {pid: bytes(frame) for pid in self.participants if pid not in self.hung_up}


def recv_exact(sock: socket.socket, num_bytes: int) -> Optional[bytes]:
    """Read exactly ``num_bytes``; None if the peer closed before sending anything."""
    buffer = bytearray()
    while len(buffer) < num_bytes:
        chunk = sock.recv(num_bytes - len(buffer))
        if not chunk:
            if not buffer:
                return None
            raise FrameError(f"Connection closed after {len(buffer)} of {num_bytes} bytes")
        buffer.extend(chunk)
    return bytes(buffer)


def read_frame(sock: socket.socket) -> Optional[bytes]:
    """Read one length-prefixed frame; None on a clean close."""
    header = recv_exact(sock, RoundMessage.HEADER.size)
    if header is None:
        return None
    _, length = RoundMessage.parse_header(header)
    payload = recv_exact(sock, length) if length else b""
    if payload is None:
        raise FrameError("Connection closed between frame header and payload")
    return header + payload


class SocketTransport(Transport):
    """Stream sockets (one local pair per client) carrying framed messages.

    Every receiving end is drained on a worker thread while the other end
    writes, so frames larger than the kernel socket buffer do not stall.
    """

    name = "socket"

    def __init__(self, timeout: float = 5.0) -> None:
        super().__init__()
        self.timeout = timeout
        self._client_end: dict[int, socket.socket] = {}
        self._coordinator_end: dict[int, socket.socket] = {}
        self._uploads: dict[int, Future] = {}
        self._pool: Optional[ThreadPoolExecutor] = None

    def _open_channels(self) -> None:
        self._pool = ThreadPoolExecutor(
            max_workers=len(self.participants) + 1, thread_name_prefix="dphype-socket"
        )
        for pid in self.participants:
            client, coordinator = socket.socketpair()
            client.settimeout(self.timeout)
            coordinator.settimeout(self.timeout)
            self._client_end[pid] = client
            self._coordinator_end[pid] = coordinator

    def send(self, sender: int, frame: bytes) -> None:
        self._check_sender(sender)
        if sender in self._uploads:
            raise FrameError(f"Participant {sender} already delivered a frame this round")
        self._uploads[sender] = self._pool.submit(read_frame, self._coordinator_end[sender])
        try:
            self._client_end[sender].sendall(frame)
        except OSError as e:
            raise FrameError(f"Participant {sender} could not send {len(frame)} bytes: {e}") from e

    def hang_up(self, sender: int) -> None:
        self._check_sender(sender)
        self.hung_up.add(sender)
        sock = self._client_end.pop(sender)
        sock.close()

    def collect(self) -> dict[int, Optional[bytes]]:
        received: dict[int, Optional[bytes]] = {}
        for pid in self.participants:
            try:
                upload = self._uploads.get(pid)
                received[pid] = upload.result() if upload else read_frame(self._coordinator_end[pid])
            except socket.timeout:
                self.logger.debug(f"Timed out waiting for participant {pid}")
                received[pid] = None
            except OSError as e:
                raise FrameError(f"Channel to participant {pid} failed: {e}") from e
        return received

    def broadcast(self, frame: bytes) -> dict[int, bytes]:
        delivered: dict[int, bytes] = {}
        for pid in self.participants:
            if pid in self.hung_up:
                continue
            echo = self._pool.submit(read_frame, self._client_end[pid])
            try:
                self._coordinator_end[pid].sendall(frame)
                echoed = echo.result()
            except OSError as e:
                raise FrameError(f"Broadcast of {len(frame)} bytes to participant {pid} failed: {e}") from e
            if echoed is not None:
                delivered[pid] = echoed
        return delivered

    def close(self) -> None:
        for sock in list(self._client_end.values()) + list(self._coordinator_end.values()):
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self._client_end.clear()
        self._coordinator_end.clear()
        self._uploads.clear()
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None


TRANSPORTS = {
    MemoryTransport.name: MemoryTransport,
    SocketTransport.name: SocketTransport,
}


def make_transport(name: str) -> Transport:
    try:
        return TRANSPORTS[name]()
    except KeyError:
        raise InvalidParameterError("transport", name, f"expected one of {sorted(TRANSPORTS)}") from None
