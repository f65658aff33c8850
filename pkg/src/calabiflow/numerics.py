"""Shared numerical kernels: finite-difference operators on uniform grids,
cumulative Simpson quadrature, and bracketed root refinement.

Derivative operators follow one convention throughout the package:
4th-order central stencils in the interior, 3rd-order one-sided stencils at
the rows too close to the boundary for the centered stencil to fit.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import RootNotFoundError

# interior central half-width per derivative order (4th-order accuracy)
_HALF_WIDTH = {1: 2, 2: 2, 3: 3, 4: 3, 5: 4}


def fornberg_weights(x: np.ndarray, x0: float, m: int) -> np.ndarray:
    """Finite-difference weights for the m-th derivative at x0 on nodes x.

    Classical recursive algorithm (Fornberg 1988). Returns the weight of each
    node; accuracy is len(x) - m for generic node placement.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if m >= n:
        raise ValueError("need at least m+1 nodes for an m-th derivative")
    c = np.zeros((n, m + 1))
    c[0, 0] = 1.0
    c1 = 1.0
    c4 = x[0] - x0
    for i in range(1, n):
        mn = min(i, m)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - x0
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, m]


@lru_cache(maxsize=64)
def derivative_matrix(n_nodes: int, h: float, order: int) -> sp.csr_matrix:
    """Sparse derivative operator for a uniform grid of n_nodes spaced h.

    Interior rows carry the 4th-order central stencil; the outermost rows on
    each side (where that stencil does not fit) use 3rd-order one-sided
    stencils built from the first/last order+3 nodes.
    """
    hw = _HALF_WIDTH[order]
    if n_nodes < 2 * hw + 1 or n_nodes < order + 3:
        raise ValueError(f"grid too small for order-{order} operator")
    offsets = np.arange(-hw, hw + 1)
    central = fornberg_weights(offsets * h, 0.0, order)

    rows, cols, vals = [], [], []
    n_edge = order + 3  # one-sided 3rd-order stencil width
    edge_nodes = np.arange(n_edge) * h
    for i in range(hw):
        w_lo = fornberg_weights(edge_nodes, i * h, order)
        rows.extend([i] * n_edge)
        cols.extend(range(n_edge))
        vals.extend(w_lo)
        w_hi = fornberg_weights(edge_nodes, (n_edge - 1 - i) * h, order)
        rows.extend([n_nodes - 1 - i] * n_edge)
        cols.extend(range(n_nodes - n_edge, n_nodes))
        vals.extend(w_hi)
    for i in range(hw, n_nodes - hw):
        rows.extend([i] * len(offsets))
        cols.extend(i + offsets)
        vals.extend(central)
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n_nodes, n_nodes))
    mat.sum_duplicates()
    return mat


def cumulative_simpson(y: np.ndarray, h: float) -> np.ndarray:
    """Cumulative integral of samples y on a uniform grid of spacing h.

    At even indices the values coincide exactly with composite Simpson; the
    half-panels in between use the 3-point Newton-Cotes rules
      int_{x0}^{x1} = h(5 y0 + 8 y1 - y2)/12,
      int_{x1}^{x2} = h(-y0 + 8 y1 + 5 y2)/12,
    whose sum reproduces the Simpson panel. Global accuracy O(h^4).
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n < 3:
        raise ValueError("need at least 3 samples")
    # rules anchored on the triple (i, i+1, i+2); fwd/bwd integrate its
    # first/second half-panel
    fwd = h * (5.0 * y[:-2] + 8.0 * y[1:-1] - y[2:]) / 12.0
    bwd = h * (-y[:-2] + 8.0 * y[1:-1] + 5.0 * y[2:]) / 12.0
    inc = np.empty(n - 1)
    if n % 2 == 1:
        inc[0::2] = fwd[0::2]      # even panel [i, i+1] from triple at i
        inc[1::2] = bwd[0::2]      # odd panel [i, i+1] from triple at i-1
    else:                          # even node count: the last (even) panel
        inc[0:-1:2] = fwd[0::2]    # lacks a forward triple; use the trailing
        inc[1::2] = bwd[0::2]      # backward one instead
        inc[-1] = bwd[-1]
    out = np.zeros(n)
    np.cumsum(inc, out=out[1:])
    return out


def bisect_root(f, lo: float, hi: float, *, f_lo: float | None = None,
                f_hi: float | None = None, iters: int = 200,
                xtol: float = 0.0) -> float:
    """Plain bisection on a bracketed sign change; returns the midpoint."""
    flo = f(lo) if f_lo is None else f_lo
    fhi = f(hi) if f_hi is None else f_hi
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise RootNotFoundError(f"no sign change on [{lo}, {hi}]")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0:
            return mid
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi, fhi = mid, fm
        if hi - lo <= xtol:
            break
    return 0.5 * (lo + hi)


def scan_sign_changes(f, grid: np.ndarray) -> list[tuple[float, float]]:
    """Brackets [x_i, x_{i+1}] over which f changes sign on the given grid."""
    vals = np.array([f(x) for x in grid])
    brackets = []
    for i in range(len(grid) - 1):
        if vals[i] == 0.0:
            brackets.append((grid[i], grid[i]))
        elif vals[i + 1] != 0.0 and np.sign(vals[i]) != np.sign(vals[i + 1]):
            brackets.append((grid[i], grid[i + 1]))
    if vals[-1] == 0.0:
        brackets.append((grid[-1], grid[-1]))
    return brackets
