"""Combine a generated weight with adapter updates into one dense weight.

All combinators accept arrays or :class:`~recast.tensor.Tensor` operands
and return a Tensor, so gradients reach the adapter factors and, through the
generated weight, the coefficients.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .exceptions import ShapeError, UndefinedMetricError
from .tensor import Tensor, add, as_tensor, make_node, matmul, mul

ADAPTER_KINDS = ("lora", "mask", "dora", "rosa")


def _binary(M: Tensor, what: str) -> None:
    if not np.all((M.data == 0) | (M.data == 1)):
        raise ValueError(f"{what} must contain only 0 and 1")


def _low_rank(W: Tensor, B, A) -> Tensor:
    B, A = as_tensor(B), as_tensor(A)
    if B.ndim != 2 or A.ndim != 2 or B.shape[1] != A.shape[0] or (B.shape[0], A.shape[1]) != W.shape:
        raise ShapeError(f"low-rank factors {B.shape} x {A.shape} do not produce a {W.shape} update")
    return matmul(B, A)


def combine_lora(W_recast, B, A) -> Tensor:
    """``W_recast + B A``."""
    W = as_tensor(W_recast)
    return add(W, _low_rank(W, B, A))


def combine_mask(W_recast, M) -> Tensor:
    """``W_recast * M`` for a binary mask ``M``."""
    W, M = as_tensor(W_recast), as_tensor(M)
    if M.shape != W.shape:
        raise ShapeError(f"mask shape {M.shape} does not match weight {W.shape}")
    _binary(M, "mask")
    return mul(W, M)


def rescale_to_norm(D, W, axis: Optional[int] = None) -> Tensor:
    """``D * (||W|| / ||D||)`` with Frobenius norms, or per column when ``axis=0``."""
    D, W = as_tensor(D), as_tensor(W)
    if D.shape != W.shape:
        raise ShapeError(f"direction {D.shape} and magnitude source {W.shape} differ")
    keep = axis is not None
    nW = np.sqrt((W.data**2).sum(axis=axis, keepdims=keep))
    nD = np.sqrt((D.data**2).sum(axis=axis, keepdims=keep))
    if np.any(nD == 0):
        raise UndefinedMetricError("cannot normalise a zero-norm direction")
    ratio = nW / nD
    out = D.data * ratio

    def grad_fn(g):
        gd = (g * D.data).sum(axis=axis, keepdims=keep)
        grad_D = ratio * g - nW * gd * D.data / nD**3
        with np.errstate(invalid="ignore", divide="ignore"):
            grad_W = np.where(nW > 0, gd / nD * W.data / nW, 0.0)
        return grad_D, grad_W

    return make_node(out, (D, W), grad_fn, "rescale_to_norm")


def combine_dora(W_recast, B, A, column_wise: bool = False) -> Tensor:
    """``||W|| * (W + B A) / ||W + B A||``; whole-matrix Frobenius norm unless ``column_wise``."""
    W = as_tensor(W_recast)
    D = add(W, _low_rank(W, B, A))
    return rescale_to_norm(D, W, axis=0 if column_wise else None)


def combine_rosa(W_recast, S, B, A) -> Tensor:
    """``W_recast + S * W_recast + B A`` for a binary mask ``S``."""
    W, S = as_tensor(W_recast), as_tensor(S)
    if S.shape != W.shape:
        raise ShapeError(f"sparse mask shape {S.shape} does not match weight {W.shape}")
    _binary(S, "sparse mask")
    return add(add(W, mul(S, W)), _low_rank(W, B, A))


@dataclass
class AdapterSpec:
    """Which adapter to attach and its size.

    ``rank`` applies to lora, dora and rosa; ``sparsity`` is the fraction of
    ones in the rosa mask.
    """

    kind: str
    rank: int = 1
    sparsity: float = 0.01
    column_wise: bool = False

    def __post_init__(self):
        if self.kind not in ADAPTER_KINDS:
            raise ValueError(f"adapter kind must be one of {ADAPTER_KINDS}, got {self.kind!r}")
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValueError(f"sparsity must lie in [0, 1], got {self.sparsity}")

    def init_params(self, shape, seed: int = 0) -> Dict[str, Tensor]:
        """B = 0, A random, mask of ones, rosa mask drawn at ``sparsity``.

        Every kind except rosa starts as the identity; rosa's fixed binary
        mask adds ``S * W`` from the start.
        """
        rng = np.random.default_rng(seed)
        d_out, d_in = shape
        if self.kind == "mask":
            return {"M": Tensor(np.ones(shape))}
        params = {
            "B": Tensor(np.zeros((d_out, self.rank)), requires_grad=True, name="B"),
            "A": Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), (self.rank, d_in)), requires_grad=True, name="A"),
        }
        if self.kind == "rosa":
            S = np.zeros(d_out * d_in)
            S[rng.choice(S.size, size=int(round(self.sparsity * S.size)), replace=False)] = 1.0
            params["S"] = Tensor(S.reshape(shape))
        return params

    def n_params(self, shape) -> int:
        """Trainable adapter parameters (masks are counted at one per entry)."""
        d_out, d_in = shape
        if self.kind == "mask":
            return d_out * d_in
        return self.rank * (d_out + d_in)

    def apply(self, W_recast, params: Dict[str, Tensor]) -> Tensor:
        if self.kind == "lora":
            return combine_lora(W_recast, params["B"], params["A"])
        if self.kind == "mask":
            return combine_mask(W_recast, params["M"])
        if self.kind == "dora":
            return combine_dora(W_recast, params["B"], params["A"], column_wise=self.column_wise)
        return combine_rosa(W_recast, params["S"], params["B"], params["A"])


def merge(combined) -> np.ndarray:
    """Export a combined weight as a plain dense array for deployment."""
    return np.array(combined.data if isinstance(combined, Tensor) else combined, dtype=np.float64)
