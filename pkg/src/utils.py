"""
Numeric helpers shared by the probes, the model and the export code
"""

import numpy as np


def row_spread(matrix):
    """Largest pairwise row difference in the infinity norm"""
    m = np.asarray(matrix, dtype=np.float64)
    m = m.reshape(-1, m.shape[-1])
    if m.shape[0] < 2:
        return 0.0
    return float(np.max(m.max(axis=0) - m.min(axis=0)))


def min_pairwise_gap(values):
    """min_{i != j} |v_i - v_j|"""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size < 2:
        return float("inf")
    return float(np.min(np.diff(v)))
