"""Loss node: period scheduling, objective evaluation, seed gradients.

The facility is optimized for purity-weighted profit at one sorter: each
outlet contributes minus squared-purity times its correctly sorted mass
flow, where purity is the correctly sorted fraction of the outlet's total
flow. The loss node receives information messages from the target node,
schedules alternating information/backpropagation periods, and seeds the
gradient avalanche for the current step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .protocol import (
    ACTION_TO_BACKPROPAGATION,
    ACTION_TO_INFORMATION,
    TYPE_INFORMATION,
    Message,
    control_message,
    gradient_message,
)

EPS_FLOW = 1e-9  # kg/s; totals at or below this contribute nothing

# Exchange-format coordinate names for the loss: material, outlet, size.
LOSS_COORDS = tuple(
    f"out.{m}.{o}.{p}" for m in ("NFM", "FM") for o in ("NFM", "FM") for p in ("S", "M", "L")
)


@dataclass(frozen=True)
class LossSpec:
    """Target node and the coordinate names of its exchange format."""

    node: str
    coords: tuple = LOSS_COORDS
    target_size: str = "M"

    def __post_init__(self):
        for m, o in (("NFM", "NFM"), ("FM", "FM")):
            name = f"out.{m}.{o}.{self.target_size}"
            if name not in self.coords:
                raise ConfigError(f"loss coordinate {name!r} missing from exchange format")

    def index(self, name: str) -> int:
        return self.coords.index(name)


def _outlet_terms(spec: LossSpec, outlet: str):
    """Indices of (tp_coord, all outlet coords) for one outlet."""
    tp = spec.index(f"out.{outlet}.{outlet}.{spec.target_size}")
    total = [
        spec.index(f"out.{m}.{outlet}.{p}")
        for m in ("NFM", "FM")
        for p in ("S", "M", "L")
    ]
    return tp, total


def loss_evaluate(values, spec: LossSpec) -> float:
    """Purity-weighted profit, negated: per outlet -(tp/total)^2 * tp.

    Outlets whose total flow is at or below EPS_FLOW contribute zero
    (guard against division by vanishing totals).
    """
    v = np.asarray(values, dtype=float)
    total_loss = 0.0
    for outlet in ("NFM", "FM"):
        tp_ix, tot_ix = _outlet_terms(spec, outlet)
        tp = v[tp_ix]
        total = float(np.sum(v[tot_ix]))
        if total <= EPS_FLOW:
            continue
        total_loss -= (tp / total) ** 2 * tp
    return total_loss


def loss_gradients(values, spec: LossSpec) -> np.ndarray:
    """Analytic gradient of loss_evaluate with respect to the exchange
    coordinates; zero inside the guarded region."""
    v = np.asarray(values, dtype=float)
    grad = np.zeros(len(spec.coords))
    for outlet in ("NFM", "FM"):
        tp_ix, tot_ix = _outlet_terms(spec, outlet)
        tp = v[tp_ix]
        total = float(np.sum(v[tot_ix]))
        if total <= EPS_FLOW:
            continue
        # term = -tp^3 / total^2
        for ix in tot_ix:
            grad[ix] += 2.0 * tp**3 / total**3
        grad[tp_ix] += -3.0 * tp**2 / total**2
    return grad


class LossNode:
    """Single-threaded pseudo-neighbor owning the phase clock.

    Registered at the target node like any neighbor; consumes information
    messages, never sends any, and seeds gradients after each switch to
    the backpropagation period.
    """

    def __init__(
        self,
        spec: LossSpec,
        node_names,
        name: str = "loss",
        switch_interval: float = 15.0,
        activation_delay: float = 300.0,
        dt: float = 30.0,
    ):
        self.name = name
        self.spec = spec
        self.node_names = sorted(node_names)
        if spec.node not in self.node_names:
            raise ConfigError(f"loss target {spec.node!r} not among nodes")
        self.switch_interval = switch_interval
        self.activation_delay = activation_delay
        self.dt = dt
        self.enabled = False
        self.period = "information"
        self.estimates: dict[int, np.ndarray] = {}
        self.last_loss: float | None = None
        self.switch_count = 0

    # -- message-side behavior -------------------------------------------

    def handle_message(self, msg: Message):
        if msg.type == TYPE_INFORMATION and msg.sender == self.spec.node:
            if len(msg.mean) != len(self.spec.coords):
                raise ConfigError(
                    f"information dim {len(msg.mean)} vs loss format {len(self.spec.coords)}"
                )
            self.estimates[msg.time_stamp] = np.asarray(msg.mean, dtype=float)

    def pump(self, inbox) -> list:
        for msg in inbox:
            self.handle_message(msg)
        return []

    # -- scheduling ---------------------------------------------------------

    def on_clock(self, now: float) -> list:
        """Control and gradient messages due at a switch boundary.

        Call at multiples of switch_interval. Before the activation delay
        nothing is emitted; afterwards the half-steps alternate between
        backpropagation (with seed gradients for the current step) and
        information periods.
        """
        self.enabled = now >= self.activation_delay
        if not self.enabled:
            return []
        phase = int(round(now / self.switch_interval))
        to_backprop = phase % 2 == 1
        out = []
        action = ACTION_TO_BACKPROPAGATION if to_backprop else ACTION_TO_INFORMATION
        new_period = "backpropagation" if to_backprop else "information"
        if new_period != self.period:
            self.switch_count += 1
        self.period = new_period
        for nb in self.node_names:
            out.append(control_message(self.name, nb, action))
        if to_backprop:
            step = int(now // self.dt)
            out.extend(self.seed_gradients(step))
        self._prune(int(now // self.dt))
        return out

    def seed_gradients(self, step: int) -> list:
        est = self.estimates.get(step)
        if est is None:
            return []
        self.last_loss = loss_evaluate(est, self.spec)
        grad = loss_gradients(est, self.spec)
        if not np.any(grad):
            return []
        return [gradient_message(self.name, self.spec.node, step, grad)]

    def _prune(self, current: int):
        for k in [k for k in self.estimates if k < current - 2]:
            del self.estimates[k]
