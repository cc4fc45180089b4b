"""
Attention Variants
Builds the attention matrix and the multi-head attention layer for vanilla
attention, RPE attention (Toeplitz or Shaw bias B added to the logits) and
URPE attention (softmax entry-wise multiplied by a Toeplitz C)
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from exceptions import DimensionError
from positional_encodings import (
    causal_keep_mask,
    materialize_toeplitz,
    materialize_urpe_c,
    shaw_bias_from_queries,
)
from tensor_engine import Tensor, add, matmul, mul, resolve_dtype, scale, softmax_rows, transpose

logger = logging.getLogger(__name__)

PE_KINDS = ("none", "ape", "rpe_toeplitz", "rpe_shaw")


@dataclass
class HeadParams:
    """Projections of one head; optional key bias c_K [d_H] and value bias c_V [1]"""
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    c_K: Tensor = None
    c_V: Tensor = None


class AttentionParams:
    """
    Per-head W_Q, W_K, W_V [d x d_H] and W_O [d_H x d], plus optional biases

    Args:
        heads (list[HeadParams]): one entry per head
        c_O (Tensor): optional output bias [d]
        scale_qk (bool): divide the query-key logits by sqrt(d_H)
    """

    def __init__(self, heads, c_O=None, scale_qk=False):
        if not heads:
            raise DimensionError("attention needs at least one head")
        d, d_H = heads[0].W_Q.shape
        for h, hp in enumerate(heads):
            for name, expected in (("W_Q", (d, d_H)), ("W_K", (d, d_H)), ("W_V", (d, d_H)), ("W_O", (d_H, d))):
                if getattr(hp, name).shape != expected:
                    raise DimensionError(f"head {h} {name} shape", getattr(hp, name).shape, expected)
            if hp.c_K is not None and hp.c_K.shape != (d_H,):
                raise DimensionError(f"head {h} c_K shape", hp.c_K.shape, (d_H,))
            if hp.c_V is not None and hp.c_V.shape != (1,):
                raise DimensionError(f"head {h} c_V must be a single scalar", hp.c_V.shape)
        if c_O is not None and c_O.shape != (d,):
            raise DimensionError("c_O shape", c_O.shape, (d,))
        self.heads = list(heads)
        self.c_O = c_O
        self.scale_qk = bool(scale_qk)

    @property
    def num_heads(self):
        return len(self.heads)

    @property
    def model_dim(self):
        return self.heads[0].W_Q.shape[0]

    @property
    def head_dim(self):
        return self.heads[0].W_Q.shape[1]

    @classmethod
    def initialize(cls, d, num_heads, head_dim, rng, dtype=None, use_bias=False, scale_qk=True):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) projections; biases start at 0"""
        dtype = resolve_dtype(dtype)

        def uniform(fan_in, shape):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

        heads = []
        for _ in range(num_heads):
            heads.append(HeadParams(
                W_Q=uniform(d, (d, head_dim)),
                W_K=uniform(d, (d, head_dim)),
                W_V=uniform(d, (d, head_dim)),
                W_O=uniform(head_dim, (head_dim, d)),
                c_K=Tensor(np.zeros(head_dim, dtype=dtype), requires_grad=True) if use_bias else None,
                c_V=Tensor(np.zeros(1, dtype=dtype), requires_grad=True) if use_bias else None,
            ))
        c_O = Tensor(np.zeros(d, dtype=dtype), requires_grad=True) if use_bias else None
        return cls(heads, c_O=c_O, scale_qk=scale_qk)

    @classmethod
    def zeros(cls, d, num_heads, head_dim, dtype=None, use_bias=False, scale_qk=False):
        """All-zero parameters, the starting point of the hand-built constructions"""
        dtype = resolve_dtype(dtype)

        def zero(shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        heads = [
            HeadParams(
                W_Q=zero((d, head_dim)), W_K=zero((d, head_dim)),
                W_V=zero((d, head_dim)), W_O=zero((head_dim, d)),
                c_K=zero((head_dim,)) if use_bias else None,
                c_V=zero((1,)) if use_bias else None,
            )
            for _ in range(num_heads)
        ]
        return cls(heads, c_O=zero((d,)) if use_bias else None, scale_qk=scale_qk)

    def parameters(self, prefix="attn"):
        params = {}
        for h, hp in enumerate(self.heads):
            for name in ("W_Q", "W_K", "W_V", "W_O", "c_K", "c_V"):
                value = getattr(hp, name)
                if value is not None:
                    params[f"{prefix}.h{h}.{name}"] = value
        if self.c_O is not None:
            params[f"{prefix}.c_O"] = self.c_O
        return params


@dataclass
class PEDescriptor:
    """
    Which positional carriers an attention layer uses

    kind selects the logit bias B: rpe_toeplitz reads ``toeplitz`` (one
    ToeplitzParam per head), rpe_shaw reads ``shaw`` (one ShawRPEParam per
    head); none and ape add no bias. A non-None ``urpe`` switches on the
    entry-wise C path.
    """
    kind: str = "none"
    urpe: object = None
    toeplitz: list = field(default_factory=list)
    shaw: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in PE_KINDS:
            raise ValueError(f"unknown positional encoding kind: {self.kind}")


def _cached(cache, key, build):
    if cache is None:
        return build()
    if key not in cache:
        cache[key] = build()
    return cache[key]


def attn_logits(X, params, pe, head, cache=None):
    """Pre-softmax scores X W_Q (X W_K + 1 c_K^T)^T [/ sqrt(d_H)] + B"""
    hp = params.heads[head]
    n = X.shape[-2]
    Q = matmul(X, hp.W_Q)
    K = matmul(X, hp.W_K)
    if hp.c_K is not None:
        K = add(K, hp.c_K)
    logits = matmul(Q, transpose(K))
    if params.scale_qk:
        logits = scale(logits, 1.0 / math.sqrt(params.head_dim))
    if pe.kind == "rpe_toeplitz":
        carrier = pe.toeplitz[head]
        B = _cached(cache, ("B", id(carrier), n), lambda: materialize_toeplitz(carrier, n))
        logits = add(logits, B)
    elif pe.kind == "rpe_shaw":
        logits = add(logits, shaw_bias_from_queries(pe.shaw[head], Q))
    return logits


def attn_matrix(X, params, pe, head, cache=None):
    """
    Per-head attention matrix

    softmax(logits) for vanilla / RPE, softmax(logits) * C for URPE. There is
    no renormalization after the C product, so URPE rows need not sum to 1.

    Args:
        X (Tensor): [n x d] or [batch x n x d]
        params (AttentionParams): layer parameters
        pe (PEDescriptor): positional carriers
        head (int): head index
        cache (dict): optional per-forward store of materialized B / C
    """
    n = X.shape[-2]
    logits = attn_logits(X, params, pe, head, cache=cache)
    # causal C keeps j >= i (zero below the diagonal); the masked cells also drop out of the softmax sum
    mask = causal_keep_mask(n) if pe.urpe is not None and pe.urpe.causal else None
    A = softmax_rows(logits, mask=mask)
    if pe.urpe is not None:
        C = _cached(cache, ("C", id(pe.urpe), head, n), lambda: materialize_urpe_c(pe.urpe, head, n))
        A = mul(A, C)
    return A


def attn_delta(X, params, pe, cache=None):
    """sum_h A^h (X W_V^h + c_V^h 1) W_O^h + 1 c_O^T, without the residual"""
    total = None
    for head, hp in enumerate(params.heads):
        A = attn_matrix(X, params, pe, head, cache=cache)
        V = matmul(X, hp.W_V)
        if hp.c_V is not None:
            V = add(V, hp.c_V)
        out = matmul(matmul(A, V), hp.W_O)
        total = out if total is None else add(total, out)
    if params.c_O is not None:
        total = add(total, params.c_O)
    return total


def attn_layer(X, params, pe, cache=None):
    """Residual multi-head attention: X + attn_delta(X)"""
    if X.shape[-1] != params.model_dim:
        raise DimensionError("input width must match the attention model dim", X.shape, (params.model_dim,))
    return add(X, attn_delta(X, params, pe, cache=cache))


def right_stochastic_check(A, tol):
    """
    True iff every row sums to 1 within tol and no entry is below -tol

    Args:
        A: square matrix (Tensor or array), optionally batched
        tol (float): tolerance
    """
    data = A.data if isinstance(A, Tensor) else np.asarray(A)
    if data.ndim < 2 or data.shape[-1] != data.shape[-2]:
        raise DimensionError("right_stochastic_check needs square matrices", data.shape)
    row_sums = data.sum(axis=-1)
    return bool(np.all(np.abs(row_sums - 1.0) <= tol) and np.all(data >= -tol))
