"""Scenario runner: wires facility, process nodes and the loss node.

The runner owns the simulated clock. Each 30 s window: switch the network
back to the information period (applying parameter updates), ingest the
previous window's sensor readings, exchange information to quiescence,
push setpoints and advance the facility, then run one backpropagation
half-period. Deterministic round-robin delivery makes identical
(seed, config) runs bitwise identical; the TCP transport reproduces the
same rounds across processes behind phase barriers.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

from .configs import LOSS_NODE_NAME, build_node, demo_configs
from .facility import Facility, FacilityParams, ScenarioSpec
from .facility.articles import CATALOG
from .facility.probe import magsorter_sweep, siever_speed_sweep, siever_step_response
from .lossnode import LossNode, LossSpec
from .models.io import mlp_to_dict, siever_fit_to_dict
from .models.layouts import MATERIALS, SIZES
from .models.mlp import mlp_train
from .models.siever import fit_splits, fit_step_response
from .transport import InMemoryBus, TcpHub

SETPOINT_PARAMS = {"siever": ("speed", "speed"), "magsorter": ("height", "height")}


def prepare_models(params: FacilityParams, seed: int) -> tuple:
    """Train the sorter network and fit the drum kernels/splits from
    deterministic facility probes; returns (mlp_doc, siever_fit_doc)."""
    x, y = magsorter_sweep(params, seed=seed)
    mlp = mlp_train((x, y), epochs=4000, seed=seed, hidden=(16, 16))
    responses = siever_step_response(params, seed=seed + 1)
    kernels = fit_step_response(responses, step_index=4)
    records = siever_speed_sweep(params, seed=seed + 2)
    splits = fit_splits(records)
    return mlp_to_dict(mlp), siever_fit_to_dict(kernels, splits, slots=8)


@dataclass
class RunConfig:
    scenario: ScenarioSpec
    out_dir: str
    transport: str = "memory"
    optimize: bool = True
    activation_delay: float = 300.0
    switch_interval: float = 15.0
    initial_speed: float = 12.0
    initial_height: float = 14.0
    model_seed: int = 123
    facility_params: FacilityParams = field(default_factory=FacilityParams)
    mlp_doc: dict | None = None
    siever_fit_doc: dict | None = None
    write_states: bool = True


@dataclass
class WindowRow:
    window: int
    time_s: float
    phase: str
    speed: float
    height: float
    loss: float | None
    info_msgs: int
    info_rounds: int
    grad_msgs: int
    grad_rounds: int
    max_info_per_pair_step: int
    max_info_per_step: int
    siever_grad: float


@dataclass
class RunResult:
    rows: list
    final_setpoints: dict
    states_path: str | None
    run_path: str
    max_grad_rounds: int = 0

    def setpoint_series(self, name: str):
        return [(r.window, getattr(r, name)) for r in self.rows]

    def tail_rows(self, seconds: float, dt: float = 30.0):
        n = int(seconds // dt)
        return self.rows[-n:]


# -- truth mapping for state logging ------------------------------------------


def _truth_map(machine: str):
    """coord -> (sensor location, article filter) for ground-truth joins."""
    mapping = {}
    if machine == "siever":
        for p in SIZES:
            mapping[f"hist.{p}.0"] = ("siever_in", lambda a, p=p: a.size == p)
            for o in SIZES:
                mapping[f"out.{o}.{p}"] = (f"siever_out_{o}", lambda a, p=p: a.size == p)
    elif machine == "conveyor":
        for p in SIZES:
            mapping[f"hist.{p}.0"] = ("siever_out_M", lambda a, p=p: a.size == p)
            mapping[f"out.{p}"] = ("mag_in", lambda a, p=p: a.size == p)
    elif machine == "magsorter":
        for m in MATERIALS:
            for p in SIZES:
                mapping[f"in.{m}.{p}"] = (
                    "mag_in",
                    lambda a, m=m, p=p: a.ferromagnetic == m and a.size == p,
                )
                for o in ("NFM", "FM"):
                    mapping[f"out.{m}.{o}.{p}"] = (
                        f"mag_out_{o}",
                        lambda a, m=m, p=p: a.ferromagnetic == m and a.size == p,
                    )
    return mapping


def _truth_flow(readings, location, article_filter) -> float:
    reading = readings[location]
    total = 0.0
    for name, mass in reading.class_masses.items():
        art = next(a for a in CATALOG if a.name == name)
        if article_filter(art):
            total += mass
    return total / reading.dt


# -- node handles: shared loop over both transports -----------------------------


class _MemoryHandles:
    def __init__(self, node_cfgs, loss_node):
        self.bus = InMemoryBus()
        self.nodes = {}
        for name in sorted(list(node_cfgs) + [loss_node.name]):
            if name == loss_node.name:
                self.bus.register(name, loss_node)
            else:
                node = build_node(node_cfgs[name])
                self.nodes[name] = node
                self.bus.register(name, node)
        self.stats = self.bus.stats

    def ensure_horizon(self, now):
        for name in sorted(self.nodes):
            self.nodes[name].ensure_horizon(now)

    def observe(self, name, step, sensor_id, values):
        self.nodes[name].observe_sensor(step, sensor_id, values)

    def setpoints(self):
        out = {}
        for name, node in self.nodes.items():
            out.update({(name, p): v for p, v in node.setpoints().items()})
        return out

    def quiesce(self, msgs=(), kick=False):
        self.bus.post_all(msgs)
        return self.bus.run_until_quiescent(kick=kick)

    def siever_grad(self) -> float:
        node = self.nodes.get("siever")
        if node is None:
            return 0.0
        totals = node.accumulated_parameter_gradients()
        return max((abs(v) for v in totals.values()), default=0.0)

    def state_rows(self, name, step):
        node = self.nodes[name]
        rec = node.steps.get(step)
        if rec is None or rec.result is None:
            return []
        lay = node.layout
        rows = []
        for coord in lay.names:
            ix = lay.cur(coord)
            rows.append(
                (coord, float(rec.result.map[ix]), math.sqrt(max(rec.result.post_cov[ix, ix], 0.0)))
            )
        return rows

    def close(self):
        pass


class _TcpHandles:
    def __init__(self, node_cfgs, loss_node):
        self.hub = TcpHub(node_cfgs, local_nodes={loss_node.name: loss_node})
        self.names = sorted(node_cfgs)
        self.stats = self.hub.stats

    def ensure_horizon(self, now):
        for name in self.names:
            self.hub.call(name, "ensure_horizon", now=now)

    def observe(self, name, step, sensor_id, values):
        self.hub.call(name, "observe", step=step, sensor_id=sensor_id, values=values)

    def setpoints(self):
        out = {}
        for name in self.names:
            for p, v in self.hub.call(name, "setpoints").items():
                out[(name, p)] = v
        return out

    def quiesce(self, msgs=(), kick=False):
        return self.hub.run_until_quiescent(initial=list(msgs), kick=kick)

    def siever_grad(self) -> float:
        return float(self.hub.call("siever", "max_param_grad"))

    def state_rows(self, name, step):
        return [tuple(r) for r in self.hub.call(name, "state_rows", step=step)]

    def close(self):
        self.hub.close()


def run(config: RunConfig) -> RunResult:
    os.makedirs(config.out_dir, exist_ok=True)
    mlp_doc = config.mlp_doc
    fit_doc = config.siever_fit_doc
    if mlp_doc is None or fit_doc is None:
        mlp_doc, fit_doc = prepare_models(config.facility_params, config.model_seed)

    node_cfgs = demo_configs(
        mlp_doc,
        fit_doc,
        initial_speed=config.initial_speed,
        initial_height=config.initial_height,
    )
    activation = config.activation_delay if config.optimize else math.inf
    loss_node = LossNode(
        LossSpec(node="magsorter"),
        list(node_cfgs),
        name=LOSS_NODE_NAME,
        switch_interval=config.switch_interval,
        activation_delay=activation,
    )
    handles = (
        _TcpHandles(node_cfgs, loss_node)
        if config.transport == "tcp"
        else _MemoryHandles(node_cfgs, loss_node)
    )
    facility = Facility(config.scenario, config.facility_params)
    truth_maps = {name: _truth_map(cfg["machine"]) for name, cfg in node_cfgs.items()}

    dt = 30.0
    windows = int(config.scenario.duration_s // dt)
    rows = []
    states_path = os.path.join(config.out_dir, "states.csv") if config.write_states else None
    run_path = os.path.join(config.out_dir, "run.csv")
    states_file = open(states_path, "w", newline="") if states_path else None
    states_writer = None
    if states_file:
        states_writer = csv.writer(states_file)
        states_writer.writerow(
            ["window", "time_s", "node", "coord", "mean", "std", "truth"]
        )

    readings_prev = None
    max_grad_rounds = 0
    final = {"speed": config.initial_speed, "height": config.initial_height}
    try:
        for k in range(windows + 1):
            t0 = k * dt
            handles.ensure_horizon(t0)

            # Phase switch back to information: apply updates, unfreeze.
            mark = len(handles.stats.records)
            switch_msgs = loss_node.on_clock(t0) if k > 0 else []
            if switch_msgs:
                handles.quiesce(switch_msgs, kick=False)

            # Previous window's sensor readings feed step k-1.
            if readings_prev is not None:
                for name in sorted(node_cfgs):
                    for sensor in node_cfgs[name]["sensors"]:
                        sid = sensor["id"]
                        handles.observe(
                            name, k - 1, sid, [readings_prev[sid].total_flow]
                        )
            info_rounds = handles.quiesce(kick=True)
            info_records = [
                r for r in handles.stats.records[mark:] if r[2] == "information"
            ]
            pair_step, per_step = {}, {}
            for s, r_, t_, ts in info_records:
                pair_step[(s, r_, ts)] = pair_step.get((s, r_, ts), 0) + 1
                per_step[ts] = per_step.get(ts, 0) + 1

            if states_writer and readings_prev is not None:
                for name in sorted(node_cfgs):
                    tm = truth_maps[name]
                    for coord, mean, std in handles.state_rows(name, k - 1):
                        truth = ""
                        if coord in tm:
                            loc, flt = tm[coord]
                            truth = f"{_truth_flow(readings_prev, loc, flt):.9g}"
                        states_writer.writerow(
                            [k - 1, t0 - dt, name, coord, f"{mean:.9g}", f"{std:.9g}", truth]
                        )

            if k == windows:
                break

            # Push setpoints and simulate window k.
            for (name, pname), value in sorted(handles.setpoints().items()):
                facility.set_setpoint(SETPOINT_PARAMS[name][1], value)
            readings_prev = facility.advance_window()

            # Backpropagation half-period in the middle of the window.
            mark = len(handles.stats.records)
            grad_rounds = 0
            back_msgs = loss_node.on_clock(t0 + config.switch_interval)
            if back_msgs:
                grad_rounds = handles.quiesce(back_msgs, kick=False)
                max_grad_rounds = max(max_grad_rounds, grad_rounds)
            grad_records = [
                r for r in handles.stats.records[mark:] if r[2] == "gradient"
            ]

            sp = handles.setpoints()
            rows.append(
                WindowRow(
                    window=k,
                    time_s=t0,
                    phase=config.scenario.phase_at(t0),
                    speed=sp.get(("siever", "speed"), float("nan")),
                    height=sp.get(("magsorter", "height"), float("nan")),
                    loss=loss_node.last_loss,
                    info_msgs=len(info_records),
                    info_rounds=info_rounds,
                    grad_msgs=len(grad_records),
                    grad_rounds=grad_rounds,
                    max_info_per_pair_step=max(pair_step.values(), default=0),
                    max_info_per_step=max(per_step.values(), default=0),
                    siever_grad=handles.siever_grad() if back_msgs else 0.0,
                )
            )
        for (name, pname), value in handles.setpoints().items():
            final[pname] = value
    finally:
        if states_file:
            states_file.close()
        handles.close()

    with open(run_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "window",
                "time_s",
                "phase",
                "speed",
                "height",
                "loss",
                "info_msgs",
                "info_rounds",
                "grad_msgs",
                "grad_rounds",
                "max_info_per_pair_step",
                "max_info_per_step",
                "siever_grad",
            ]
        )
        for r in rows:
            writer.writerow(
                [
                    r.window,
                    f"{r.time_s:.9g}",
                    r.phase,
                    f"{r.speed:.9g}",
                    f"{r.height:.9g}",
                    "" if r.loss is None else f"{r.loss:.9g}",
                    r.info_msgs,
                    r.info_rounds,
                    r.grad_msgs,
                    r.grad_rounds,
                    r.max_info_per_pair_step,
                    r.max_info_per_step,
                    f"{r.siever_grad:.9g}",
                ]
            )

    return RunResult(
        rows=rows,
        final_setpoints=final,
        states_path=states_path,
        run_path=run_path,
        max_grad_rounds=max_grad_rounds,
    )
