"""
Positional Information Carriers
Includes: absolute table (APE), T5-style Toeplitz bias B, Shaw-style relative
vectors, and the per-head Toeplitz multiplier C used by URPE attention
"""

import logging

import numpy as np

import config
from exceptions import CapacityError, ContractError, DimensionError
from tensor_engine import Tensor, gather, matmul, mul, resolve_dtype, transpose

logger = logging.getLogger(__name__)


def offset_index(n, n_max):
    """Storage slot of offset i - j for every cell of an n x n matrix"""
    positions = np.arange(n)
    return np.subtract.outer(positions, positions) + (n_max - 1)


def causal_keep_mask(n):
    """Cells kept by causal URPE: C[i][j] is zeroed for i > j"""
    return np.triu(np.ones((n, n), dtype=bool))


def _check_length(n, n_max, what):
    if n < 1:
        raise DimensionError(f"{what}: sequence length must be positive, got {n}")
    if n > n_max:
        raise CapacityError(f"{what}: sequence length {n} exceeds n_max={n_max}")


class APETable:
    """
    Learnable absolute position embeddings E, added to the token embeddings

    Args:
        n_max (int): number of rows (longest supported sequence)
        d (int): model dimension
        rng (np.random.Generator): initializer
    """

    def __init__(self, n_max, d, rng, dtype=None, std=config.EMBEDDING_STD):
        self.n_max = n_max
        data = rng.normal(0.0, std, size=(n_max, d)).astype(resolve_dtype(dtype))
        self.embeddings = Tensor(data, requires_grad=True)

    def rows(self, n):
        """First n rows as an [n x d] tensor"""
        _check_length(n, self.n_max, "APE")
        return gather(self.embeddings, np.arange(n))


class ToeplitzParam:
    """
    Flat vector of 2*n_max - 1 values indexed by offset k = i - j

    values[k + n_max - 1] is the entry on diagonal k of every materialized
    matrix.
    """

    def __init__(self, n_max, fill=0.0, dtype=None, values=None):
        if n_max < 1:
            raise DimensionError(f"n_max must be positive, got {n_max}")
        self.n_max = n_max
        if values is None:
            values = np.full(2 * n_max - 1, fill, dtype=resolve_dtype(dtype))
        values = np.asarray(values, dtype=resolve_dtype(dtype))
        if values.shape != (2 * n_max - 1,):
            raise DimensionError("Toeplitz values need 2*n_max-1 entries", values.shape, (2 * n_max - 1,))
        self.values = Tensor(values, requires_grad=True)

    @property
    def degrees_of_freedom(self):
        return self.values.size

    def slot(self, offset):
        """Storage index of offset k = i - j"""
        if abs(offset) > self.n_max - 1:
            raise CapacityError(f"offset {offset} outside +-{self.n_max - 1}")
        return offset + self.n_max - 1

    def set_offset(self, offset, value):
        self.values.data[self.slot(offset)] = value


def materialize_toeplitz(p, n):
    """
    Build the n x n matrix M[i][j] = values[(i - j) + n_max - 1]

    Gradients flow back to the offset entries; each offset collects the sum
    over its diagonal.
    """
    _check_length(n, p.n_max, "Toeplitz")
    return gather(p.values, offset_index(n, p.n_max))


class ShawRPEParam:
    """
    Relative vectors r_k, one row per clipped offset k

    Args:
        n_max (int): longest supported sequence
        head_dim (int): d_H
        rng (np.random.Generator): optional; zero init when omitted or std == 0
    """

    def __init__(self, n_max, head_dim, rng=None, dtype=None, std=0.0):
        self.n_max = n_max
        shape = (2 * n_max - 1, head_dim)
        if rng is None or std == 0.0:
            data = np.zeros(shape, dtype=resolve_dtype(dtype))
        else:
            data = rng.normal(0.0, std, size=shape).astype(resolve_dtype(dtype))
        self.rel_vectors = Tensor(data, requires_grad=True)


def shaw_bias_from_queries(p, Q):
    """B[i][j] = q_i . r_{i-j} for queries Q = X W_Q of shape [..., n, d_H]"""
    n = Q.shape[-2]
    _check_length(n, p.n_max, "Shaw RPE")
    if Q.shape[-1] != p.rel_vectors.shape[1]:
        raise DimensionError("Shaw relative vectors must match the head dim", Q.shape, p.rel_vectors.shape)
    scores = matmul(Q, transpose(p.rel_vectors))
    cols = np.clip(offset_index(n, p.n_max), 0, 2 * p.n_max - 2)
    rows = np.arange(n)[:, None]
    index = (rows, cols) if Q.ndim == 2 else (slice(None), rows, cols)
    return gather(scores, index)


def shaw_bias(p, X, W_Q):
    """
    Shaw-style bias b_ij = X_i W_Q r_{i-j}^T

    Args:
        p (ShawRPEParam): relative vectors
        X (Tensor): [n x d] input
        W_Q (Tensor): [d x d_H] query projection
    """
    return shaw_bias_from_queries(p, matmul(X, W_Q))


class URPEMultiplier:
    """
    One Toeplitz C per attention head, shared by every layer

    Every value starts at 1, so a fresh URPE model computes exactly what its
    RPE backbone computes.
    """

    def __init__(self, num_heads, n_max, causal=False, dtype=None):
        if num_heads < 1:
            raise DimensionError(f"need at least one head, got {num_heads}")
        self.n_max = n_max
        self.causal = bool(causal)
        self.per_head = [ToeplitzParam(n_max, fill=1.0, dtype=dtype) for _ in range(num_heads)]

    @property
    def num_heads(self):
        return len(self.per_head)

    def param_count(self):
        return sum(p.degrees_of_freedom for p in self.per_head)

    def parameters(self):
        return {f"urpe.C.h{h}": p.values for h, p in enumerate(self.per_head)}


def materialize_urpe_c(m, head, n):
    """
    Materialize C for one head

    In causal mode the strictly lower triangle is forced to exactly 0 and
    passes no gradient back.
    """
    if not 0 <= head < m.num_heads:
        raise ContractError(f"head {head} outside 0..{m.num_heads - 1}")
    C = materialize_toeplitz(m.per_head[head], n)
    if m.causal:
        C = mul(C, Tensor(causal_keep_mask(n).astype(C.dtype)))
    return C


def urpe_param_count(num_heads, n_max):
    """New learnable scalars URPE adds when C is layer-shared: H * (2 n_max - 1)"""
    if num_heads < 1 or n_max < 1:
        raise DimensionError(f"heads and n_max must be positive, got H={num_heads}, n_max={n_max}")
    return num_heads * (2 * n_max - 1)
