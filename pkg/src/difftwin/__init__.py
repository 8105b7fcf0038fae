"""Decentralized digital twin for process chains.

Networked process nodes infer their physical state by differentiable
Gaussian data fusion (MAP estimation with covariance-intersection
weighting) and optimize machine setpoints by backpropagating loss
gradients through the fusion Jacobians, demonstrated on a simulated
plastic-sorting chain.
"""

__version__ = "0.1.0"
