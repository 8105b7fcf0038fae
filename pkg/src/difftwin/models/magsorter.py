"""Black-box magnetic sorter model.

Stacks four network rows predicting the per-outlet true/false-positive
totals from the class input totals and the magnet height, six per-size
mass-conservation rows, two input-independence rows and six
output-independence rows. Independence between size class and
ferromagnetism links the size-resolved state to the size-blind network.
"""

from __future__ import annotations

import numpy as np

from .base import DifferentiableModel
from .layouts import MATERIALS, SIZES, StateLayout, magsorter_layout
from .mlp import MlpModel, mlp_forward, mlp_jacobian

CONSERVATION_VAR = 1e-4  # (kg/s)^2
INDEPENDENCE_VAR = 1e-8  # (kg^2/s^2)^2


class MagsorterModel(DifferentiableModel):
    def __init__(self, mlp: MlpModel, layout: StateLayout):
        if mlp.residual_cov is None:
            raise ValueError("magsorter model needs a trained network with residual_cov")
        self.mlp = mlp
        self.layout = layout
        self.out_dim = 4 + 6 + 2 + 6
        cov = np.zeros((self.out_dim, self.out_dim))
        cov[:4, :4] = mlp.residual_cov
        cov[4:10, 4:10] = CONSERVATION_VAR * np.eye(6)
        cov[10:, 10:] = INDEPENDENCE_VAR * np.eye(8)
        self.noise_cov = cov

        lay = layout
        self._in = {(m, p): lay.cur(f"in.{m}.{p}") for m in MATERIALS for p in SIZES}
        self._out = {
            (m, o, p): lay.cur(f"out.{m}.{o}.{p}")
            for m in MATERIALS
            for o in ("NFM", "FM")
            for p in SIZES
        }
        self._height = lay.cur("height")

        # Network target rows: totals over sizes per (material, outlet).
        # Output order: TP at FM outlet, FP at FM outlet, TP at NFM outlet,
        # FP at NFM outlet; "TP" means material matching the outlet.
        dim = lay.dim
        self._targets = np.zeros((4, dim))
        for p in SIZES:
            self._targets[0, self._out[("FM", "FM", p)]] = 1.0
            self._targets[1, self._out[("NFM", "FM", p)]] = 1.0
            self._targets[2, self._out[("NFM", "NFM", p)]] = 1.0
            self._targets[3, self._out[("FM", "NFM", p)]] = 1.0
        self._u_rows = np.zeros((3, dim))
        for p in SIZES:
            self._u_rows[0, self._in[("FM", p)]] = 1.0
            self._u_rows[1, self._in[("NFM", p)]] = 1.0
        self._u_rows[2, self._height] = 1.0

    def _network_input(self, x):
        return self._u_rows @ x

    def evaluate(self, x):
        r = np.zeros(self.out_dim)
        u = self._network_input(x)
        r[:4] = mlp_forward(self.mlp, u) - self._targets @ x

        # Mass conservation per material and size: input equals the sum of
        # that material over both outlets.
        row = 4
        for m in MATERIALS:
            for p in SIZES:
                r[row] = (
                    x[self._in[(m, p)]]
                    - x[self._out[(m, "NFM", p)]]
                    - x[self._out[(m, "FM", p)]]
                )
                row += 1

        # Input independence: the NFM share is the same across size classes.
        for pa, pb in (("S", "M"), ("M", "L")):
            ta = x[self._in[("NFM", pa)]] + x[self._in[("FM", pa)]]
            tb = x[self._in[("NFM", pb)]] + x[self._in[("FM", pb)]]
            r[row] = x[self._in[("NFM", pa)]] * tb - x[self._in[("NFM", pb)]] * ta
            row += 1

        # Output independence: each material's size distribution is the same
        # at both outlets (capture fraction independent of size).
        for m in MATERIALS:
            tp = sum(x[self._out[(m, m, p)]] for p in SIZES)
            other = "FM" if m == "NFM" else "NFM"
            fp = sum(x[self._out[(m, other, p)]] for p in SIZES)
            for p in SIZES:
                r[row] = x[self._out[(m, other, p)]] * tp - x[self._out[(m, m, p)]] * fp
                row += 1
        return r

    def jacobian(self, x):
        jac = np.zeros((self.out_dim, self.layout.dim))
        u = self._network_input(x)
        jac[:4, :] = mlp_jacobian(self.mlp, u) @ self._u_rows - self._targets

        row = 4
        for m in MATERIALS:
            for p in SIZES:
                jac[row, self._in[(m, p)]] = 1.0
                jac[row, self._out[(m, "NFM", p)]] = -1.0
                jac[row, self._out[(m, "FM", p)]] = -1.0
                row += 1

        for pa, pb in (("S", "M"), ("M", "L")):
            na, fa = self._in[("NFM", pa)], self._in[("FM", pa)]
            nb, fb = self._in[("NFM", pb)], self._in[("FM", pb)]
            ta = x[na] + x[fa]
            tb = x[nb] + x[fb]
            # r = x[na] * tb - x[nb] * ta
            jac[row, na] = tb - x[nb]
            jac[row, fa] = -x[nb]
            jac[row, nb] = x[na] - ta
            jac[row, fb] = x[na]
            row += 1

        for m in MATERIALS:
            other = "FM" if m == "NFM" else "NFM"
            tp_ix = [self._out[(m, m, p)] for p in SIZES]
            fp_ix = [self._out[(m, other, p)] for p in SIZES]
            tp = sum(x[i] for i in tp_ix)
            fp = sum(x[i] for i in fp_ix)
            for p in SIZES:
                a = self._out[(m, other, p)]  # row's FP-side coordinate
                b = self._out[(m, m, p)]  # row's TP-side coordinate
                # r = x[a] * tp - x[b] * fp
                for i in tp_ix:
                    jac[row, i] += x[a]
                for i in fp_ix:
                    jac[row, i] += -x[b]
                jac[row, a] += tp
                jac[row, b] += -fp
                row += 1
        return jac


def magsorter_model(mlp: MlpModel, layout: StateLayout | None = None) -> MagsorterModel:
    """Process model for the magnetic sorter: network prediction rows plus
    conservation and independence constraints."""
    return MagsorterModel(mlp, layout or magsorter_layout())
