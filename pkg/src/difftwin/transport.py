"""Message transports: deterministic in-memory bus and a TCP hub.

Both provide the same semantics: per-pair FIFO delivery, lockstep rounds
until quiescence, and phase barriers (a round set completes before the
next batch of control messages is injected). The in-memory bus drives
node objects directly; the TCP hub drives one subprocess per node with
newline-delimited JSON frames.
"""

from __future__ import annotations

import json
import socket
import subprocess
import sys
from dataclasses import dataclass, field

from .errors import ConfigError, MalformedMessage
from .protocol import Message, decode, encode

MAX_ROUNDS = 1000


@dataclass
class MessageStats:
    """Counts per (sender, recipient, type) and per step for diagnostics."""

    records: list = field(default_factory=list)

    def note(self, msg: Message):
        self.records.append((msg.sender, msg.recipient, msg.type, msg.time_stamp))

    def count(self, type_=None, sender=None, recipient=None, step=None) -> int:
        total = 0
        for s, r, t, ts in self.records:
            if type_ is not None and t != type_:
                continue
            if sender is not None and s != sender:
                continue
            if recipient is not None and r != recipient:
                continue
            if step is not None and ts != step:
                continue
            total += 1
        return total

    def reset(self):
        self.records.clear()


class InMemoryBus:
    """Deterministic lockstep router over in-process node objects."""

    def __init__(self):
        self.nodes = {}
        self.order = []
        self.queues = {}
        self.stats = MessageStats()
        self.last_round_count = 0

    def register(self, name: str, node):
        if name in self.nodes:
            raise ConfigError(f"duplicate node name {name!r}")
        self.nodes[name] = node
        self.order.append(name)
        self.queues[name] = []

    def post(self, msg: Message):
        if msg.recipient not in self.queues:
            raise ConfigError(f"message to unknown recipient {msg.recipient!r}")
        self.stats.note(msg)
        self.queues[msg.recipient].append(msg)

    def post_all(self, msgs):
        for m in msgs:
            self.post(m)

    def run_until_quiescent(self, kick=True, max_rounds: int = MAX_ROUNDS) -> int:
        """Pump nodes in registration order until no messages remain.

        With kick=True every node is pumped once even with an empty inbox,
        letting locally dirtied state (sensor ingest, updates) generate the
        first messages. Returns the number of rounds run.
        """
        rounds = 0
        pending = set(self.order) if kick else {n for n in self.order if self.queues[n]}
        while pending or any(self.queues[n] for n in self.order):
            rounds += 1
            if rounds > max_rounds:
                raise RuntimeError(f"message exchange did not settle in {max_rounds} rounds")
            for name in self.order:
                inbox = self.queues[name]
                if not inbox and name not in pending:
                    continue
                self.queues[name] = []
                out = self.nodes[name].pump(inbox)
                self.post_all(out)
            pending = set()
        self.last_round_count = rounds
        return rounds


# -- TCP transport -----------------------------------------------------------


def _send_frame(sock_file, doc: dict):
    sock_file.write(json.dumps(doc, separators=(",", ":")) + "\n")
    sock_file.flush()


def _recv_frame(sock_file) -> dict:
    line = sock_file.readline()
    if not line:
        raise ConnectionError("peer closed the connection")
    return json.loads(line)


class TcpHub:
    """Star-topology hub: one subprocess per node, lockstep rounds.

    Frames are single JSON lines. Wire messages between nodes use the
    exact information/gradient/control schema; hub frames {"kind": ...}
    carry initialization, round batches, calls, and shutdown.
    """

    def __init__(self, node_configs: dict, local_nodes: dict | None = None, host: str = "127.0.0.1"):
        self.stats = MessageStats()
        self.local_nodes = dict(local_nodes or {})
        self.order = sorted(list(node_configs) + list(self.local_nodes))
        self._remote = sorted(node_configs)
        self._procs = {}
        self._files = {}
        server = socket.create_server((host, 0))
        port = server.getsockname()[1]
        try:
            for name in self._remote:
                proc = subprocess.Popen(
                    [sys.executable, "-m", "difftwin.nodeproc", "--host", host, "--port", str(port), "--name", name],
                    stdout=subprocess.DEVNULL,
                )
                self._procs[name] = proc
            pending = set(self._remote)
            while pending:
                conn, _ = server.accept()
                fh = conn.makefile("rw", encoding="utf-8", newline="\n")
                hello = _recv_frame(fh)
                name = hello["name"]
                if name not in pending:
                    raise ConfigError(f"unexpected hello from {name!r}")
                pending.discard(name)
                self._files[name] = fh
                _send_frame(fh, {"kind": "init", "config": node_configs[name]})
        finally:
            server.close()

    def call(self, name: str, method: str, **kwargs):
        fh = self._files[name]
        _send_frame(fh, {"kind": "call", "method": method, "args": kwargs})
        ret = _recv_frame(fh)
        if ret.get("kind") != "ret":
            raise MalformedMessage(f"unexpected reply {ret!r}")
        if "error" in ret:
            raise RuntimeError(f"{name}: {ret['error']}")
        return ret.get("value")

    def run_until_quiescent(self, initial: dict | None = None, kick=True, max_rounds=MAX_ROUNDS) -> int:
        """Lockstep rounds: send each node its inbox batch, gather outputs,
        route, repeat until no node emits anything."""
        queues = {n: [] for n in self.order}
        for msg in initial or []:
            self.stats.note(msg)
            queues[msg.recipient].append(msg)
        rounds = 0
        pending = set(self.order) if kick else {n for n in self.order if queues[n]}
        while pending or any(queues.values()):
            rounds += 1
            if rounds > max_rounds:
                raise RuntimeError(f"message exchange did not settle in {max_rounds} rounds")
            emitted = []
            for name in self.order:
                inbox, queues[name] = queues[name], []
                if not inbox and name not in pending:
                    continue
                if name in self.local_nodes:
                    emitted.extend(self.local_nodes[name].pump(inbox))
                    continue
                fh = self._files[name]
                _send_frame(
                    fh,
                    {
                        "kind": "round",
                        "msgs": [encode(m).decode("utf-8").rstrip("\n") for m in inbox],
                    },
                )
                ret = _recv_frame(fh)
                for line in ret["msgs"]:
                    emitted.append(decode(line))
            for msg in emitted:
                self.stats.note(msg)
                queues[msg.recipient].append(msg)
            pending = set()
        return rounds

    def close(self):
        for name, fh in self._files.items():
            try:
                _send_frame(fh, {"kind": "shutdown"})
            except (OSError, ValueError):
                pass
        for proc in self._procs.values():
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()
        for fh in self._files.values():
            try:
                fh.close()
            except OSError:
                pass
