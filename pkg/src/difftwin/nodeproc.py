"""Subprocess entry point for one node behind the TCP transport.

Connects to the hub, receives its configuration, and serves lockstep
rounds plus a small set of driver calls (horizon, sensor ingestion,
setpoints, diagnostics) as newline-delimited JSON frames.
"""

from __future__ import annotations

import argparse
import json
import math
import socket
import sys

from .configs import build_node
from .protocol import decode, encode


def _send(fh, doc):
    fh.write(json.dumps(doc, separators=(",", ":")) + "\n")
    fh.flush()


def serve(host: str, port: int, name: str) -> int:
    sock = socket.create_connection((host, port))
    fh = sock.makefile("rw", encoding="utf-8", newline="\n")
    _send(fh, {"kind": "hello", "name": name})
    init = json.loads(fh.readline())
    if init.get("kind") != "init":
        return 2
    node = build_node(init["config"])

    while True:
        line = fh.readline()
        if not line:
            return 0
        frame = json.loads(line)
        kind = frame.get("kind")
        if kind == "shutdown":
            return 0
        if kind == "round":
            inbox = [decode(m) for m in frame["msgs"]]
            out = node.pump(inbox)
            _send(fh, {"kind": "out", "msgs": [encode(m).decode().rstrip("\n") for m in out]})
        elif kind == "call":
            method = frame["method"]
            args = frame.get("args", {})
            try:
                if method == "ensure_horizon":
                    value = len(node.ensure_horizon(float(args["now"])))
                elif method == "observe":
                    node.observe_sensor(int(args["step"]), args["sensor_id"], args["values"])
                    value = True
                elif method == "setpoints":
                    value = node.setpoints()
                elif method == "max_param_grad":
                    totals = node.accumulated_parameter_gradients()
                    value = max((abs(v) for v in totals.values()), default=0.0)
                elif method == "state_rows":
                    step = int(args["step"])
                    rec = node.steps.get(step)
                    value = []
                    if rec is not None and rec.result is not None:
                        lay = node.layout
                        for coord in lay.names:
                            ix = lay.cur(coord)
                            value.append(
                                [
                                    coord,
                                    float(rec.result.map[ix]),
                                    math.sqrt(max(float(rec.result.post_cov[ix, ix]), 0.0)),
                                ]
                            )
                else:
                    _send(fh, {"kind": "ret", "error": f"unknown method {method!r}"})
                    continue
                _send(fh, {"kind": "ret", "value": value})
            except Exception as exc:  # noqa: BLE001 - reported to the hub
                _send(fh, {"kind": "ret", "error": f"{type(exc).__name__}: {exc}"})
        else:
            _send(fh, {"kind": "ret", "error": f"unknown frame kind {kind!r}"})


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, required=True)
    parser.add_argument("--name", required=True)
    args = parser.parse_args()
    return serve(args.host, args.port, args.name)


if __name__ == "__main__":
    sys.exit(main())
