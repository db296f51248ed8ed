# utils/numdiff.py
from typing import Callable

import numpy as np

Objective = Callable[[np.ndarray], float]


def fd_steps(x: np.ndarray, rel: float) -> np.ndarray:
    return rel * np.maximum(1.0, np.abs(x))


def central_gradient(f: Objective, x: np.ndarray, rel: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    h = fd_steps(x, rel)
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h[k]
        g[k] = (f(x + e) - f(x - e)) / (2 * h[k])
    return g


def central_hessian(f: Objective, x: np.ndarray, rel: float = 1e-4) -> np.ndarray:
    """Symmetric second differences; 2n² + 1 evaluations."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h = fd_steps(x, rel)
    f0 = f(x)
    H = np.zeros((n, n))
    for k in range(n):
        ek = np.zeros(n)
        ek[k] = h[k]
        H[k, k] = (f(x + ek) - 2 * f0 + f(x - ek)) / h[k] ** 2
        for l in range(k):
            el = np.zeros(n)
            el[l] = h[l]
            H[k, l] = H[l, k] = (
                f(x + ek + el) - f(x + ek - el) - f(x - ek + el) + f(x - ek - el)
            ) / (4 * h[k] * h[l])
    return H


def hessian_from_gradient(grad: Callable[[np.ndarray], np.ndarray], x: np.ndarray, rel: float = 1e-5) -> np.ndarray:
    """Hessian as the symmetrized central-difference Jacobian of an analytic gradient."""
    x = np.asarray(x, dtype=float)
    h = fd_steps(x, rel)
    J = np.zeros((x.size, x.size))
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h[k]
        J[:, k] = (grad(x + e) - grad(x - e)) / (2 * h[k])
    return 0.5 * (J + J.T)
