"""Sparse hyperbolic-cross regression of optimal feedback laws.

Pipeline: open-loop solves (reduced gradient + Barzilai-Borwein) give value
and gradient samples, a weighted LASSO fits a hyperbolic-cross polynomial
value model, and the feedback u(x) = -1/(2 beta) g(x)^T grad V(x) closes
the loop.
"""

__version__ = "0.1.0"
