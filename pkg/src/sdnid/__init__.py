"""Continuous-time neural state-space identification with state-derivative
normalization.

The state network output is divided by a normalization factor ``tau`` so
that hidden states and their derivatives live on comparable scales. The
package contains a small reverse-mode autodiff engine, a differentiable RK4
solver, the residual state/output/encoder networks, the truncated
simulation-error training loop and three ways to choose ``tau``.
"""

__version__ = "0.1.0"
