"""Client side of the pixel-gradient exchange protocol.

An external guidance process (the bridge) receives rendered images and
returns per-pixel loss gradients; the kernel backpropagates them exactly
like its internal image losses. Frames on the stream socket are:

    [u32 LE header length][UTF-8 JSON header][u32 LE payload length][payload]

Request headers are {"type": "grad_request", "view_id", "width", "height",
"iter_progress"} with a float32 little-endian row-major render payload;
responses mirror the dimensions with a gradient payload of the same
encoding. The byte encoding is exact: float32 buffers pass through
untouched.
"""

from __future__ import annotations

import json
import socket
import struct

import numpy as np

DEFAULT_TIMEOUT = 120.0
_MAX_HEADER = 1 << 20
_MAX_PAYLOAD = 1 << 30


class BridgeError(Exception):
    """Base class for guidance bridge failures."""


class BridgeTimeoutError(BridgeError):
    """The bridge did not answer within the configured timeout."""


class BridgeProtocolError(BridgeError):
    """Malformed frame, unexpected type, or remote-reported error."""


class BridgeDimensionError(BridgeError):
    """Gradient buffer dimensions do not match the request."""


def encode_image_f32(image: np.ndarray) -> bytes:
    """Row-major little-endian float32 bytes of an image."""
    return np.ascontiguousarray(image, dtype="<f4").tobytes()


def decode_image_f32(payload: bytes, width: int, height: int) -> np.ndarray:
    data = np.frombuffer(payload, dtype="<f4")
    if data.size != width * height:
        raise BridgeDimensionError(
            f"payload holds {data.size} floats, expected {width * height}")
    return data.reshape(height, width).astype(float)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        try:
            chunk = sock.recv(remaining)
        except socket.timeout:
            raise BridgeTimeoutError("timed out waiting for bridge data") from None
        if not chunk:
            raise BridgeProtocolError("bridge closed the connection mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def write_frame(sock: socket.socket, header: dict, payload: bytes = b"") -> None:
    head = json.dumps(header).encode("utf-8")
    sock.sendall(struct.pack("<I", len(head)) + head
                 + struct.pack("<I", len(payload)) + payload)


def read_frame(sock: socket.socket) -> tuple[dict, bytes]:
    (head_len,) = struct.unpack("<I", _recv_exact(sock, 4))
    if head_len > _MAX_HEADER:
        raise BridgeProtocolError(f"header length {head_len} exceeds limit")
    try:
        header = json.loads(_recv_exact(sock, head_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BridgeProtocolError(f"undecodable frame header: {exc}") from None
    if not isinstance(header, dict):
        raise BridgeProtocolError("frame header must be a JSON object")
    (payload_len,) = struct.unpack("<I", _recv_exact(sock, 4))
    if payload_len > _MAX_PAYLOAD:
        raise BridgeProtocolError(f"payload length {payload_len} exceeds limit")
    return header, _recv_exact(sock, payload_len)


def connect(address: str, timeout: float = DEFAULT_TIMEOUT) -> socket.socket:
    """Open a stream socket to `host:port` or `unix:/path`."""
    if address.startswith("unix:"):
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        target = address[len("unix:"):]
    else:
        host, _, port = address.rpartition(":")
        if not host:
            raise ValueError(f"bridge address {address!r} is not host:port or unix:path")
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        target = (host, int(port))
    sock.settimeout(timeout)
    try:
        sock.connect(target)
    except (ConnectionError, OSError) as exc:
        sock.close()
        raise BridgeError(f"cannot reach bridge at {address}: {exc}") from None
    return sock


class GuidanceClient:
    """Single persistent connection to a bridge; requests are sequential."""

    def __init__(self, address: str, timeout: float = DEFAULT_TIMEOUT):
        self.address = address
        self.timeout = timeout
        self._sock: socket.socket | None = None

    def _socket(self) -> socket.socket:
        if self._sock is None:
            self._sock = connect(self.address, self.timeout)
        return self._sock

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def request_gradient(self, render: np.ndarray, view_id: str,
                         iter_progress: float) -> np.ndarray:
        """Send a render, receive the pixel-gradient buffer of equal size."""
        height, width = render.shape
        header = {
            "type": "grad_request",
            "view_id": view_id,
            "width": width,
            "height": height,
            "iter_progress": float(iter_progress),
        }
        sock = self._socket()
        try:
            write_frame(sock, header, encode_image_f32(render))
            reply, payload = read_frame(sock)
        except BridgeError:
            self.close()
            raise
        if reply.get("type") == "error":
            raise BridgeProtocolError(f"bridge error: {reply.get('message', '?')}")
        if reply.get("type") != "grad_response":
            raise BridgeProtocolError(f"unexpected frame type {reply.get('type')!r}")
        if reply.get("width") != width or reply.get("height") != height:
            raise BridgeDimensionError(
                f"bridge returned {reply.get('width')}x{reply.get('height')} "
                f"for a {width}x{height} request")
        return decode_image_f32(payload, width, height)
