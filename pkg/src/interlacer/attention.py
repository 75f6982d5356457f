"""Softmax attention, ReLU-kernel linear attention and the PCT block.

Both attention variants are single-head and see only point features; point
positions never enter here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError
from .nn import MLP, Module, glorot, param
from .tensor import Tensor, as_tensor, matmul, softmax_rows, where


@dataclass
class AttentionParams:
    """Query/key/value projections: ``w_q``, ``w_k`` are d x d_qk, ``w_v`` is d x d_v."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    def __post_init__(self):
        d = self.w_q.shape[0]
        if self.w_k.shape != self.w_q.shape or self.w_v.shape[0] != d:
            raise DimensionError(
                f"attention params: W_Q {self.w_q.shape}, W_K {self.w_k.shape}, W_V {self.w_v.shape}"
            )

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def qk_dim(self) -> int:
        return self.w_q.shape[1]


def _relu(t: Tensor) -> Tensor:
    return t.relu()


@dataclass
class FeatureMap:
    """Row-wise kernel feature map; with ReLU the output width equals d_qk."""

    phi: Callable[[Tensor], Tensor] = field(default=_relu)
    m: int | None = None


def _check_input(x: Tensor, p: AttentionParams) -> None:
    if x.ndim != 2 or x.shape[1] != p.d:
        raise DimensionError(f"attention: input {x.shape} does not match W_Q {p.w_q.shape}")
    if x.shape[0] < 1:
        raise DimensionError("attention: need at least one point")


def softmax_attention(x: Tensor, p: AttentionParams, block_rows: int | None = None) -> Tensor:
    """``D^-1 A V`` with ``A = exp(Q K^T / sqrt(d_qk))``, Theta(N^2) time.

    ``block_rows`` evaluates query rows in blocks to bound memory; it is only
    honoured when no gradient is being recorded.
    """
    x = as_tensor(x)
    _check_input(x, p)
    scale = 1.0 / np.sqrt(p.qk_dim)
    q = matmul(x, p.w_q)
    k = matmul(x, p.w_k)
    v = matmul(x, p.w_v)
    if block_rows and not (q.requires_grad or k.requires_grad or v.requires_grad):
        return Tensor(_blocked_softmax_attention(q.data, k.data, v.data, scale, block_rows))
    logits = matmul(q, k.T).scale(scale)
    return matmul(softmax_rows(logits), v)


def _blocked_softmax_attention(q, k, v, scale, block_rows):
    out = np.empty((q.shape[0], v.shape[1]), dtype=v.dtype)
    kt = np.ascontiguousarray(k.T * k.dtype.type(scale))
    for start in range(0, q.shape[0], block_rows):
        # each block is wrapped as a Tensor so allocation accounting sees it
        s = Tensor(q[start:start + block_rows] @ kt)
        s.data -= s.data.max(axis=1, keepdims=True)
        # subnormal exp outputs are ~100x slower in BLAS; e^-80 is negligible anyway
        np.maximum(s.data, -80.0, out=s.data)
        np.exp(s.data, out=s.data)
        # normalise the narrow output rather than the full block
        block = s.data @ v
        block /= s.data.sum(axis=1, keepdims=True)
        out[start:start + block_rows] = block
    return out


def performer_attention(x: Tensor, p: AttentionParams, fm: FeatureMap | None = None) -> Tensor:
    """Linear attention ``D^-1 Q'((K')^T V)`` with ``D = Q'((K')^T 1)``.

    Rows whose normaliser is exactly zero (all kernel features vanish) return
    their own value row. No N x N intermediate is ever formed.
    """
    fm = fm or FeatureMap()
    x = as_tensor(x)
    _check_input(x, p)
    v = matmul(x, p.w_v)
    qf = fm.phi(matmul(x, p.w_q))
    kf = fm.phi(matmul(x, p.w_k))
    kv = matmul(kf.T, v)  # m x d_v
    num = matmul(qf, kv)
    ksum = kf.sum(axis=0, keepdims=True)  # 1 x m
    den = matmul(qf, ksum.T)  # N x 1
    degenerate = den.data == 0
    if not degenerate.any():
        return num / den
    safe = where(degenerate, np.ones((1, 1), dtype=den.dtype), den)
    return where(degenerate, v, num / safe)


class PCTBlock(Module):
    """Attention with an output projection, residual add, then a residual per-point MLP.

    ``kind`` selects ``"performer"`` (linear) or ``"softmax"`` (quadratic) attention.
    With ``zero_out=True`` both output projections start at zero and the
    block is the identity map.
    """

    def __init__(self, d: int, rng: np.random.Generator, qk_dim: int = 16, value_dim: int = 64,
                 hidden: int = 64, kind: str = "performer", zero_out: bool = False,
                 dtype=np.float64):
        if kind not in ("performer", "softmax"):
            raise ValueError(f"unknown attention kind {kind!r}")
        self.kind = kind
        self.w_q = param(glorot(rng, d, qk_dim, dtype))
        self.w_k = param(glorot(rng, d, qk_dim, dtype))
        self.w_v = param(glorot(rng, d, value_dim, dtype))
        self.w_o = param(np.zeros((value_dim, d), dtype) if zero_out else glorot(rng, value_dim, d, dtype))
        self.mlp = MLP([d, hidden, d], rng, zero_last=zero_out, dtype=dtype)
        self._block_rows: int | None = None

    @property
    def attention_params(self) -> AttentionParams:
        return AttentionParams(self.w_q, self.w_k, self.w_v)

    def attend(self, x: Tensor) -> Tensor:
        if self.kind == "performer":
            return performer_attention(x, self.attention_params)
        return softmax_attention(x, self.attention_params, block_rows=self._block_rows)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + matmul(self.attend(x), self.w_o)
        return x + self.mlp(x)


def pct_block(x: Tensor, block: PCTBlock) -> Tensor:
    return block(x)
