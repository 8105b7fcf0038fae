"""Gray-box sieving drum model.

Outlet flows are speed-dependent split fractions of the input history
convolved with a per-outlet residence-time kernel (dead time plus
exponential mixing). Split fractions are linear in drum speed, passed
through a smooth clamp to [0, 1] and smoothly renormalized so they sum to
at most one. Fit helpers recover kernels from step responses and split
coefficients from speed sweeps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, FitIllConditioned
from .base import DifferentiableModel
from .layouts import (
    OUTLETS_SIEVER,
    SIZES,
    STEP_SECONDS,
    StateLayout,
    hist_name,
    siever_layout,
)

OUTLET_ROW_STD = 2e-3  # model slack on each outlet-flow relation, kg/s
_CLAMP_SHARPNESS = 2000.0
_RENORM_EPS = 1e-4


@dataclass(frozen=True)
class ResidenceKernel:
    """Discretized residence-time distribution over history slots.

    The continuous residence time is dead_time + Exp(tau); the slot weights
    account for uniform entry phase within a window and are renormalized so
    they sum to one (mass preservation).
    """

    dead_time: float
    tau: float
    weights: np.ndarray

    @staticmethod
    def from_parameters(
        dead_time: float,
        tau: float,
        slots: int,
        dt: float = STEP_SECONDS,
    ) -> "ResidenceKernel":
        if dead_time < 0 or tau < 0:
            raise ConfigError("dead_time and tau must be non-negative")
        if dead_time > slots * dt:
            raise ConfigError(
                f"dead time {dead_time}s not representable in {slots} slots of {dt}s"
            )

        def phi(v):
            # Antiderivative of the residence CDF, zero at the dead time.
            z = np.maximum(np.asarray(v, dtype=float) - dead_time, 0.0)
            if tau <= 1e-9:
                return z
            return z + tau * (np.exp(-z / tau) - 1.0)

        # w_h averages the CDF mass of slot h over the uniform entry phase:
        # w_h = G((h+1) dt) - G(h dt) with G(c) = (phi(c) - phi(c - dt)) / dt.
        edges = np.arange(slots + 1) * dt
        g = (phi(edges) - phi(edges - dt)) / dt
        weights = np.diff(g)
        weights = np.maximum(weights, 0.0)
        total = weights.sum()
        if total <= 0:
            raise ConfigError("kernel has no mass within the history horizon")
        weights = weights / total
        weights.setflags(write=False)
        return ResidenceKernel(dead_time=float(dead_time), tau=float(tau), weights=weights)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < -1e-15):
            raise ConfigError("kernel weights must be non-negative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError("kernel weights must sum to one")


def smooth_clamp(u):
    """Smooth clamp of u to (0, 1): identity away from the edges, logistic
    saturation near them. Returns (value, derivative)."""
    k = _CLAMP_SHARPNESS
    # (softplus(k u) - softplus(k (u - 1))) / k, stable for large |u|
    a = np.logaddexp(0.0, k * np.asarray(u, dtype=float))
    b = np.logaddexp(0.0, k * (np.asarray(u, dtype=float) - 1.0))
    val = (a - b) / k
    dval = _sigmoid(k * np.asarray(u)) - _sigmoid(k * (np.asarray(u) - 1.0))
    return val, dval


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def _smoothmax1(s):
    """Smooth max(1, s) with derivative; keeps renormalization differentiable."""
    eps = _RENORM_EPS
    root = math.sqrt((s - 1.0) ** 2 + eps**2)
    val = 0.5 * (1.0 + s + root)
    dval = 0.5 * (1.0 + (s - 1.0) / root)
    return val, dval


def split_fractions(coeffs: dict, speed: float, sizes=SIZES, outlets=OUTLETS_SIEVER):
    """Per-(outlet, size) split fractions at a drum speed.

    coeffs maps (outlet, size) -> (intercept, slope). Linear values are
    smooth-clamped to [0, 1] and renormalized per size class so the outlet
    fractions sum to at most one. Returns (fractions, d/d_speed), both as
    dicts keyed by (outlet, size).
    """
    fractions, derivs = {}, {}
    for p in sizes:
        raw_vals, raw_ds = {}, {}
        for o in outlets:
            a, b = coeffs[(o, p)]
            v, dv = smooth_clamp(a + b * speed)
            raw_vals[o] = float(v)
            raw_ds[o] = float(dv) * b
        s = sum(raw_vals.values())
        ds = sum(raw_ds.values())
        denom, ddenom = _smoothmax1(s)
        for o in outlets:
            fractions[(o, p)] = raw_vals[o] / denom
            derivs[(o, p)] = (raw_ds[o] * denom - raw_vals[o] * ddenom * ds) / denom**2
    return fractions, derivs


class SieverModel(DifferentiableModel):
    """Within-step outlet rows: out[o][p] = split(speed) * (kernel * history)."""

    def __init__(self, layout: StateLayout, kernels: dict, split_coeffs: dict, row_std: float):
        self.layout = layout
        self.kernels = dict(kernels)
        self.split_coeffs = dict(split_coeffs)
        self.outlets = tuple(OUTLETS_SIEVER)
        self.sizes = tuple(layout.hist_classes)
        for o in self.outlets:
            if o not in self.kernels:
                raise ConfigError(f"missing residence kernel for outlet {o!r}")
            if len(self.kernels[o].weights) != layout.history_len:
                raise ConfigError("kernel length disagrees with history length")
        self.out_dim = len(self.outlets) * len(self.sizes)
        self.noise_cov = row_std**2 * np.eye(self.out_dim)
        self._speed_ix = layout.cur("speed")
        self._hist_ix = {
            p: np.array([layout.cur(hist_name(p, h)) for h in range(layout.history_len)])
            for p in self.sizes
        }
        self._out_ix = {
            (o, p): layout.cur(f"out.{o}.{p}") for o in self.outlets for p in self.sizes
        }

    def _rows(self):
        return [(o, p) for o in self.outlets for p in self.sizes]

    def evaluate(self, x):
        speed = x[self._speed_ix]
        frac, _ = split_fractions(self.split_coeffs, speed, self.sizes, self.outlets)
        r = np.zeros(self.out_dim)
        for i, (o, p) in enumerate(self._rows()):
            r[i] = x[self._out_ix[(o, p)]] - frac[(o, p)] * self.evaluate_conv(o, p, x)
        return r

    def evaluate_conv(self, o, p, x):
        """Per-outlet kernel convolved with the size class's input history."""
        return float(self.kernels[o].weights @ x[self._hist_ix[p]])

    def jacobian(self, x):
        speed = x[self._speed_ix]
        frac, dfrac = split_fractions(self.split_coeffs, speed, self.sizes, self.outlets)
        jac = np.zeros((self.out_dim, self.layout.dim))
        for i, (o, p) in enumerate(self._rows()):
            conv = self.evaluate_conv(o, p, x)
            jac[i, self._out_ix[(o, p)]] = 1.0
            jac[i, self._hist_ix[p]] = -frac[(o, p)] * self.kernels[o].weights
            jac[i, self._speed_ix] = -dfrac[(o, p)] * conv
        return jac


def siever_model(
    kernels: dict,
    split_coeffs: dict,
    layout: StateLayout | None = None,
    row_std: float = OUTLET_ROW_STD,
) -> SieverModel:
    """Gray-box process model relating outlet flows to split(speed) times
    the kernel-convolved input history, per size class and outlet."""
    layout = layout or siever_layout()
    return SieverModel(layout, kernels, split_coeffs, row_std)


def _step_response_sse(response, step_index, dead_time, tau, slots, dt):
    kernel = ResidenceKernel.from_parameters(dead_time, tau, slots, dt)
    cum = np.cumsum(kernel.weights)
    predicted = np.zeros_like(response)
    for k in range(len(response)):
        lag = k - step_index
        if lag < 0:
            predicted[k] = 0.0
        elif lag < slots:
            predicted[k] = cum[lag]
        else:
            predicted[k] = 1.0
    return float(np.sum((response - predicted) ** 2))


def fit_step_response(
    responses: dict,
    step_index: int,
    slots: int = 8,
    dt: float = STEP_SECONDS,
) -> dict:
    """Recover (dead_time, tau) per outlet from normalized step responses.

    responses maps outlet -> flow series for a 0-to-plateau input step at
    window `step_index`; each series is normalized by its final plateau.
    Least-squares over a coarse grid with two local refinement passes.
    """
    fitted = {}
    for outlet, series in responses.items():
        y = np.asarray(series, dtype=float)
        plateau = float(np.mean(y[-max(2, len(y) // 4) :]))
        if plateau <= 0:
            raise FitIllConditioned(f"outlet {outlet!r} step response has no plateau")
        y = y / plateau

        lo_d, hi_d = 0.0, (slots - 1) * dt
        lo_t, hi_t = 0.1, 2.0 * dt
        best = None
        for refine in range(3):
            ds = np.linspace(lo_d, hi_d, 25)
            ts = np.linspace(lo_t, hi_t, 25)
            for d in ds:
                for t in ts:
                    sse = _step_response_sse(y, step_index, d, t, slots, dt)
                    if best is None or sse < best[0]:
                        best = (sse, d, t)
            _, d0, t0 = best
            span_d = (hi_d - lo_d) / 8.0
            span_t = (hi_t - lo_t) / 8.0
            lo_d, hi_d = max(0.0, d0 - span_d), min((slots - 1) * dt, d0 + span_d)
            lo_t, hi_t = max(0.01, t0 - span_t), t0 + span_t
        _, d0, t0 = best
        fitted[outlet] = ResidenceKernel.from_parameters(d0, t0, slots, dt)
    return fitted


def fit_splits(records) -> dict:
    """Linear split coefficients from a speed sweep.

    records is an iterable of (speed, size, outlet, fraction) rows; returns
    (outlet, size) -> (intercept, slope) by least squares per pair. Raises
    FitIllConditioned when a pair has fewer than two distinct speeds.
    """
    grouped = {}
    for speed, size, outlet, fraction in records:
        grouped.setdefault((outlet, size), []).append((float(speed), float(fraction)))
    coeffs = {}
    for key, rows in grouped.items():
        speeds = np.array([r[0] for r in rows])
        fracs = np.array([r[1] for r in rows])
        design = np.column_stack([np.ones_like(speeds), speeds])
        if np.linalg.matrix_rank(design) < 2:
            raise FitIllConditioned(
                f"split fit for {key} needs at least two distinct speeds"
            )
        sol, *_ = np.linalg.lstsq(design, fracs, rcond=None)
        coeffs[key] = (float(sol[0]), float(sol[1]))
    return coeffs
