"""Calibration probes: isolated-machine experiments for model fitting.

These drive the same routing math as the full simulator but on isolated
machines, producing the sorter training dataset, drum step responses and
the speed-sweep split measurements. All deterministic for a fixed seed.
"""

from __future__ import annotations

import numpy as np

from ..models.layouts import SIZES, STEP_SECONDS
from .articles import CATALOG
from .truth import FacilityParams, siever_split

FM_MIX = ("fm_can", "fm_cap")
NFM_MIX = ("plastic_bottle", "coffee_cup", "paper_ball", "nfm_cap")


def _mix_draw(rng, names, total_flow, dt):
    """Poisson-sample a mass mix: equal flow share per class in the mix."""
    masses = {n: a.mass for n in names for a in CATALOG if a.name == n}
    share = total_flow / len(names)
    mass_total = 0.0
    count_total = 0
    for n in names:
        lam = share / masses[n] * dt
        k = int(rng.poisson(lam))
        mass_total += k * masses[n]
        count_total += k
    return mass_total, count_total


def magsorter_sweep(
    params: FacilityParams,
    seed: int,
    heights=None,
    draws_per_height: int = 20,
    windows_per_draw: int = 4,
    dt: float = STEP_SECONDS,
):
    """Training dataset for the sorter network.

    Rows: (realized FM input flow, realized NFM input flow, height) ->
    (TP at FM outlet, FP at FM outlet, TP at NFM outlet, FP at NFM outlet),
    all kg/s, realized by article-level Bernoulli routing integrated over
    several windows per sample to tame counting noise.
    """
    rng = np.random.default_rng(seed)
    if heights is None:
        lo, hi = params.height_range
        heights = np.arange(lo, hi + 1e-9, 0.5)
    x_rows, y_rows = [], []
    masses = {a.name: a.mass for a in CATALOG}
    span = dt * windows_per_draw
    for h in heights:
        pc = params.magnet.p_capture(float(h))
        pd = params.magnet.p_drag(float(h))
        for _ in range(draws_per_height):
            fm_flow = rng.uniform(0.002, 0.045)
            nfm_flow = rng.uniform(0.002, 0.045)
            in_fm = in_nfm = 0.0
            tp_fm = fp_fm = tp_nfm = fp_nfm = 0.0
            for names, flow, is_fm in ((FM_MIX, fm_flow, True), (NFM_MIX, nfm_flow, False)):
                share = flow / len(names)
                for n in names:
                    k = int(rng.poisson(share / masses[n] * span))
                    if not k:
                        continue
                    mass = k * masses[n]
                    kept = k - int(rng.binomial(k, params.mag_loss_prob))
                    to_fm = int(rng.binomial(kept, pc if is_fm else pd))
                    at_fm = to_fm * masses[n]
                    at_nfm = (kept - to_fm) * masses[n]
                    if is_fm:
                        in_fm += mass
                        tp_fm += at_fm
                        fp_nfm += at_nfm
                    else:
                        in_nfm += mass
                        fp_fm += at_fm
                        tp_nfm += at_nfm
            x_rows.append([in_fm / span, in_nfm / span, float(h)])
            y_rows.append([tp_fm / span, fp_fm / span, tp_nfm / span, fp_nfm / span])
    return np.asarray(x_rows), np.asarray(y_rows)


def siever_step_response(
    params: FacilityParams,
    seed: int,
    flow: float = 0.08,
    windows: int = 16,
    step_window: int = 4,
    repeats: int = 60,
    dt: float = STEP_SECONDS,
):
    """Averaged per-outlet responses to 0-to-flow input steps.

    Each outlet is probed with its matching size class (where its split
    fraction, and therefore the signal, is largest). Returns dict
    outlet -> flow series (kg/s per window, averaged over repeats), for
    fitting the per-outlet residence kernels.
    """
    rng = np.random.default_rng(seed)
    frac = siever_split(params, 12.0)
    responses = {}
    for size in SIZES:
        art = next(a for a in CATALOG if a.size == size and a.name != "fm_can")
        series = np.zeros(windows)
        p_match = frac[(size, size)]
        for _ in range(repeats):
            for w in range(step_window, windows):
                t0 = w * dt
                k = int(rng.poisson(flow / art.mass * dt))
                if not k:
                    continue
                n_match = int(rng.binomial(k, p_match))
                if not n_match:
                    continue
                times = t0 + rng.uniform(0.0, dt, n_match)
                dead, tau = params.residence[size]
                exits = times + dead + rng.exponential(tau, n_match)
                for te in exits:
                    wi = int(te // dt)
                    if wi < windows:
                        series[wi] += art.mass
        responses[size] = series / repeats / dt
    return responses


def siever_speed_sweep(
    params: FacilityParams,
    seed: int,
    speeds=(5.0, 9.0, 13.0, 17.0, 21.0),
    windows: int = 60,
    dt: float = STEP_SECONDS,
):
    """Long-run outlet mass fractions per (speed, size, outlet).

    Returns records (speed, size, outlet, fraction) for fit_splits. Flows
    use the static scenario mix; fractions are outlet mass over input mass
    per size class after discarding a warm-up margin.
    """
    rng = np.random.default_rng(seed)
    records = []
    for speed in speeds:
        frac = siever_split(params, float(speed))
        in_mass = {p: 0.0 for p in SIZES}
        out_mass = {(o, p): 0.0 for o in SIZES for p in SIZES}
        for _ in range(windows):
            for art in CATALOG:
                lam = art.flow_static / art.mass * dt
                k = int(rng.poisson(lam))
                if not k:
                    continue
                in_mass[art.size] += k * art.mass
                p_out = [frac[(o, art.size)] for o in SIZES]
                draws = rng.random(k)
                cum = np.cumsum(p_out)
                outlet_ix = (draws[:, None] > cum[None, :]).sum(axis=1)
                for oi, o in enumerate(SIZES):
                    n_out = int(np.sum(outlet_ix == oi))
                    out_mass[(o, art.size)] += n_out * art.mass
        for p in SIZES:
            for o in SIZES:
                if in_mass[p] > 0:
                    records.append((float(speed), p, o, out_mass[(o, p)] / in_mass[p]))
    return records
