"""Edge server and device-side clients speaking the binary protocol.

``handle_message`` is the whole server-side application logic; the TCP
server and the loopback transport both route through it, so socket and
in-process runs behave identically.
"""
from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time

import numpy as np

from . import protocol as wire
from .cache import CacheState, EdgeUnavailable, run_trace_entropy

logger = logging.getLogger(__name__)


class EdgeRefused(EdgeUnavailable):
    """The edge answered with an ERROR message."""

    def __init__(self, code, text):
        super().__init__(f"edge error {code}: {text}")
        self.code = code


class EdgeApp:
    """Read-only model store plus encoder; turns requests into replies."""

    def __init__(self, bundle):
        self.bundle = bundle
        self._blobs = {k: wire.serialize_model(m) for k, m in enumerate(bundle.submodels, start=1)}

    def handle(self, msg: wire.WireMessage) -> wire.WireMessage:
        try:
            if msg.msg_type == wire.MsgType.INFER_REQ:
                frame = wire.parse_infer_request(msg.payload)
                expected = self.bundle.encoder["enc.W"].shape[0]
                if frame.ndim != 1 or frame.shape[0] != expected or not np.all(np.isfinite(frame)):
                    return wire.error_message(wire.ErrorCode.MALFORMED,
                                              f"expected {expected} finite values")
                label, k, probs = self.bundle.infer(frame)
                return wire.infer_response(label, k, probs)
            if msg.msg_type == wire.MsgType.MODEL_REQ:
                k = wire.parse_model_request(msg.payload)
                if k not in self._blobs:
                    return wire.error_message(wire.ErrorCode.UNKNOWN_PARTITION,
                                              f"no partition {k}")
                return wire.WireMessage(wire.MsgType.MODEL_RESP, self._blobs[k])
            return wire.error_message(wire.ErrorCode.UNSUPPORTED,
                                      f"cannot serve {msg.msg_type.name}")
        except wire.ProtocolError as exc:
            return wire.error_message(wire.ErrorCode.MALFORMED, str(exc))


def handle_message(bundle, msg):
    return EdgeApp(bundle).handle(msg)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        app = self.server.app
        sock = self.request
        while True:
            try:
                msg = wire.recv_message(sock)
            except wire.ProtocolError as exc:
                # header is unusable, so the stream cannot be resynchronised
                try:
                    wire.send_message(sock, wire.error_message(wire.ErrorCode.MALFORMED, str(exc)))
                except OSError:
                    pass
                return
            except OSError:
                return
            if msg is None:
                return
            try:
                wire.send_message(sock, app.handle(msg))
            except OSError:
                return


class EdgeServer(socketserver.ThreadingTCPServer):
    """Threaded TCP edge server; one handler thread per device connection."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, bundle, host="127.0.0.1", port=0):
        self.app = EdgeApp(bundle)
        super().__init__((host, port), _Handler)

    @property
    def address(self):
        return self.server_address[:2]

    def start(self):
        """Serve on a daemon thread; returns the thread."""
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t

    def stop(self):
        self.shutdown()
        self.server_close()


def edge_serve(bundle, host="127.0.0.1", port=0):
    """Run the edge server in the foreground until interrupted."""
    with EdgeServer(bundle, host, port) as server:
        logger.info("edge serving on %s:%d", *server.address)
        server.serve_forever()


# -- device side ---------------------------------------------------------------

class _ClientBase:
    def _exchange(self, msg):
        raise NotImplementedError

    def _checked(self, msg, expected):
        reply = self._exchange(msg)
        if reply.msg_type == wire.MsgType.ERROR:
            code, text = wire.parse_error(reply.payload)
            raise EdgeRefused(code, text)
        if reply.msg_type != expected:
            raise wire.ProtocolError(f"expected {expected.name}, got {reply.msg_type.name}")
        return reply

    def infer(self, frame):
        reply = self._checked(wire.infer_request(np.asarray(frame, np.float32)),
                              wire.MsgType.INFER_RESP)
        return wire.parse_infer_response(reply.payload)

    def fetch(self, k):
        reply = self._checked(wire.model_request(k), wire.MsgType.MODEL_RESP)
        return wire.deserialize_model(reply.payload)


class LoopbackEdge(_ClientBase):
    """In-process transport: full encode/decode round trip, no sockets."""

    def __init__(self, bundle):
        self.app = EdgeApp(bundle)

    def _exchange(self, msg):
        request = wire.decode_message(wire.encode_message(msg))
        return wire.decode_message(wire.encode_message(self.app.handle(request)))


class RemoteEdge(_ClientBase):
    """Blocking socket client with bounded reconnect/backoff."""

    def __init__(self, host, port, retries=3, backoff=0.05, timeout=5.0):
        self.host, self.port = host, port
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self._sock = None

    def connect(self):
        self._with_retries(self._ensure)
        return self

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _ensure(self):
        if self._sock is None:
            self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        return self._sock

    def _with_retries(self, fn):
        last = None
        for attempt in range(self.retries + 1):
            try:
                return fn()
            except (OSError, wire.FramingError) as exc:
                last = exc
                self.close()
                if attempt < self.retries:
                    time.sleep(self.backoff * (2 ** attempt))
        raise EdgeUnavailable(f"edge {self.host}:{self.port} unreachable: {last}")

    def _exchange(self, msg):
        def once():
            sock = self._ensure()
            wire.send_message(sock, msg)
            reply = wire.recv_message(sock)
            if reply is None:
                raise wire.FramingError("edge closed the connection")
            return reply
        return self._with_retries(once)


def device_loop(frames, labels, state: CacheState, edge):
    """Device inference loop over any edge client; see ``run_trace_entropy``."""
    return run_trace_entropy(frames, labels, edge, state)
