"""Central finite-difference gradient oracle shared by the test suite.

Independent of the tape: it only re-runs a scalar-valued forward closure
while nudging raw numpy buffers, so it can verify any analytic gradient
the library produces.
"""

import numpy as np


def finite_diff_grad(forward, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``forward()`` w.r.t. every element of arr."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = forward()
        flat[i] = orig - h
        fm = forward()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Relative error with a floor absorbing finite-difference noise near zero."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
