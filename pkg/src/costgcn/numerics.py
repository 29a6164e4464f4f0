"""Dense float32 kernels shared by every other module.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 in C (row-major)
order. Functions here never mutate their inputs.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float32
BN_EPS = 1e-5


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(as_tensor(x), DTYPE(0))


def batchnorm_inference(x, gamma, beta, mean, var, eps: float = BN_EPS) -> np.ndarray:
    """Inference-mode batch norm over the leading (channel) axis of ``x``."""
    x = as_tensor(x)
    c = x.shape[0]
    for name, p in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if np.shape(p) != (c,):
            raise DimensionError(f"batchnorm {name} has shape {np.shape(p)}, expected ({c},)")
    scale, shift = bn_affine(gamma, beta, mean, var, eps)
    bcast = (c,) + (1,) * (x.ndim - 1)
    return x * scale.reshape(bcast) + shift.reshape(bcast)


def bn_affine(gamma, beta, mean, var, eps: float = BN_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Fold inference BN into ``y = scale * x + shift``."""
    gamma = as_tensor(gamma)
    inv = gamma / np.sqrt(as_tensor(var) + DTYPE(eps))
    return inv.astype(DTYPE), (as_tensor(beta) - as_tensor(mean) * inv).astype(DTYPE)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with max subtraction."""
    x = as_tensor(x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
