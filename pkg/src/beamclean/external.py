"""External prior providers: line-delimited JSON over stdio pipes or TCP.

Wire protocol (one JSON object per line):
    handshake  provider -> client   {"V": int, "name": str}
    request    client  -> provider  {"rid": int, "context": [int]}
    response   provider -> client   {"rid": int, "logprobs": [V floats]}
    error      provider -> client   {"rid": int, "error": str}

Request ids increase monotonically per connection and responses are matched
to requests by rid. Both halves live here: ExternalPrior is the client used
by the decoder; serve_prior / serve_prior_tcp wrap any PriorModel as a
provider, so a trained n-gram file can be served out-of-process.
"""

from __future__ import annotations

import json
import selectors
import shlex
import socket
import socketserver
import subprocess
import sys
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ParameterError, PriorProtocolError
from .priors import PriorModel

_NORMALIZATION_TOL = 1e-6
DEFAULT_TIMEOUT = 30.0


class _LineTransport:
    """Blocking line-oriented channel with a read timeout."""

    def send_line(self, line: str) -> None:
        raise NotImplementedError

    def recv_line(self, timeout: float) -> str:
        raise NotImplementedError

    def close(self) -> None:
        pass


class _SubprocessTransport(_LineTransport):
    def __init__(self, command: str):
        self.proc = subprocess.Popen(
            shlex.split(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self._sel = selectors.DefaultSelector()
        self._sel.register(self.proc.stdout, selectors.EVENT_READ)
        self._buf = ""

    def send_line(self, line: str) -> None:
        if self.proc.poll() is not None:
            raise PriorProtocolError("provider process exited")
        self.proc.stdin.write(line + "\n")
        self.proc.stdin.flush()

    def recv_line(self, timeout: float) -> str:
        while "\n" not in self._buf:
            if not self._sel.select(timeout):
                raise PriorProtocolError(f"provider timed out after {timeout}s")
            chunk = self.proc.stdout.readline()
            if chunk == "":
                raise PriorProtocolError("provider closed its output stream")
            self._buf += chunk
        line, self._buf = self._buf.split("\n", 1)
        return line

    def close(self) -> None:
        try:
            self._sel.close()
            if self.proc.poll() is None:
                self.proc.terminate()
                self.proc.wait(timeout=5)
        except Exception:
            pass


class _TcpTransport(_LineTransport):
    def __init__(self, host: str, port: int, timeout: float):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self._file = self.sock.makefile("r", encoding="utf-8")

    def send_line(self, line: str) -> None:
        self.sock.sendall((line + "\n").encode("utf-8"))

    def recv_line(self, timeout: float) -> str:
        self.sock.settimeout(timeout)
        try:
            line = self._file.readline()
        except (socket.timeout, TimeoutError) as exc:
            raise PriorProtocolError(f"provider timed out after {timeout}s") from exc
        if line == "":
            raise PriorProtocolError("provider closed the connection")
        return line.rstrip("\n")

    def close(self) -> None:
        try:
            self._file.close()
            self.sock.close()
        except OSError:
            pass


class ExternalPrior(PriorModel):
    """Client half of the wire protocol, usable anywhere a PriorModel is.

    Accepts endpoints of the form ``tcp:HOST:PORT`` or ``cmd:SHELL-COMMAND``.
    """

    kind = "external"

    def __init__(self, endpoint: str, timeout: float = DEFAULT_TIMEOUT):
        self.endpoint = endpoint
        self.timeout = timeout
        self._rid = 0
        if endpoint.startswith("tcp:"):
            _, host, port = endpoint.split(":", 2)
            self._transport: _LineTransport = _TcpTransport(host, int(port), timeout)
        elif endpoint.startswith("cmd:"):
            self._transport = _SubprocessTransport(endpoint[4:])
        else:
            raise ParameterError(f"unknown prior endpoint {endpoint!r} (tcp:... or cmd:...)")
        hello = self._read_json()
        if "V" not in hello:
            raise PriorProtocolError(f"bad handshake: {hello!r}")
        self.vocab_size = int(hello["V"])
        self.name = str(hello.get("name", ""))

    def _read_json(self) -> dict:
        line = self._transport.recv_line(self.timeout)
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise PriorProtocolError(f"provider sent invalid JSON: {line!r}") from exc

    def next_token_logprobs(self, context: Sequence[int]) -> np.ndarray:
        self._rid += 1
        rid = self._rid
        self._transport.send_line(json.dumps({"rid": rid, "context": [int(t) for t in context]}))
        reply = self._read_json()
        if reply.get("rid") != rid:
            raise PriorProtocolError(f"rid mismatch: sent {rid}, got {reply.get('rid')!r}")
        if "error" in reply:
            raise PriorProtocolError(f"provider error: {reply['error']}")
        vec = np.asarray(reply.get("logprobs", ()), dtype=np.float64)
        if vec.shape != (self.vocab_size,):
            raise PriorProtocolError(
                f"expected {self.vocab_size} logprobs, got shape {vec.shape}"
            )
        if abs(logsumexp(vec)) > _NORMALIZATION_TOL:
            raise PriorProtocolError("provider returned an unnormalized distribution")
        return vec

    def close(self) -> None:
        self._transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve_prior(prior: PriorModel, name: str = "prior", reader=None, writer=None) -> None:
    """Run the provider loop over text streams (defaults: stdin/stdout)."""
    reader = reader if reader is not None else sys.stdin
    writer = writer if writer is not None else sys.stdout
    writer.write(json.dumps({"V": prior.vocab_size, "name": name}) + "\n")
    writer.flush()
    for line in reader:
        line = line.strip()
        if not line:
            continue
        rid = None
        try:
            req = json.loads(line)
            rid = req.get("rid")
            vec = prior.next_token_logprobs([int(t) for t in req["context"]])
            writer.write(json.dumps({"rid": rid, "logprobs": [float(x) for x in vec]}) + "\n")
        except Exception as exc:  # report, keep serving
            writer.write(json.dumps({"rid": rid, "error": str(exc)}) + "\n")
        writer.flush()


def serve_prior_tcp(prior: PriorModel, host: str, port: int, name: str = "prior"):
    """Serve the protocol over TCP, one serial session per connection.

    Returns the server object; call ``serve_forever()`` on it (or use it from
    a thread and call ``shutdown()`` to stop).
    """

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            reader = (raw.decode("utf-8") for raw in self.rfile)

            class W:
                def write(_, s):
                    self.wfile.write(s.encode("utf-8"))

                def flush(_):
                    self.wfile.flush()

            try:
                serve_prior(prior, name=name, reader=reader, writer=W())
            except (BrokenPipeError, ConnectionResetError):
                pass

    class Server(socketserver.ThreadingTCPServer):
        allow_reuse_address = True
        daemon_threads = True

    return Server((host, port), Handler)
