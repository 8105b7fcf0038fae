"""Differentiable model building blocks for fusion residual rows.

A model exposes out_dim, noise_cov, evaluate(x) and jacobian(x) over the
concatenated per-step state [x_next; x_cur]. Models are immutable after
construction and evaluation is pure.
"""

from __future__ import annotations

import numpy as np


class DifferentiableModel:
    """Base: residual rows f(x) with analytic Jacobian and noise covariance."""

    out_dim: int
    noise_cov: np.ndarray

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class LinearRowsModel(DifferentiableModel):
    """Constant-Jacobian rows A x (+ optional offset)."""

    def __init__(self, matrix, noise_cov, offset=None):
        self.matrix = np.asarray(matrix, dtype=float)
        self.out_dim = self.matrix.shape[0]
        self.noise_cov = np.asarray(noise_cov, dtype=float)
        self.offset = (
            np.zeros(self.out_dim) if offset is None else np.asarray(offset, dtype=float)
        )

    def evaluate(self, x):
        return self.matrix @ x + self.offset

    def jacobian(self, x):
        return self.matrix


class StackedModel(DifferentiableModel):
    """Vertical stack of model blocks with block-diagonal noise."""

    def __init__(self, blocks):
        self.blocks = list(blocks)
        self.out_dim = sum(b.out_dim for b in self.blocks)
        cov = np.zeros((self.out_dim, self.out_dim))
        off = 0
        for b in self.blocks:
            m = b.out_dim
            cov[off : off + m, off : off + m] = b.noise_cov
            off += m
        self.noise_cov = cov

    def evaluate(self, x):
        return np.concatenate([b.evaluate(x) for b in self.blocks])

    def jacobian(self, x):
        return np.vstack([b.jacobian(x) for b in self.blocks])


def fd_jacobian(model: DifferentiableModel, x, h=1e-6) -> np.ndarray:
    """Central finite-difference Jacobian, the conformance oracle for
    every concrete model's analytic jacobian()."""
    x = np.asarray(x, dtype=float)
    jac = np.zeros((model.out_dim, x.shape[0]))
    for k in range(x.shape[0]):
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        jac[:, k] = (model.evaluate(xp) - model.evaluate(xm)) / (2.0 * h)
    return jac
