"""Continual temporal primitives: streaming convolution, delay lines, pooling.

Temporal convolutions use the causal cross-correlation convention

    y[t] = bias + sum_{k=0}^{K-1} W[..., k] @ x[t - (K - 1 - k) * d]

so tap ``K-1`` weights the newest frame and tap ``0`` the oldest. Clip outputs
are indexed by the first frame of their window; step outputs are emitted when
their newest frame arrives.
"""
from __future__ import annotations

import math
from collections import deque
from typing import Literal

import numpy as np

from .numerics import DTYPE, DimensionError, as_tensor

WarmupPolicy = Literal["strict", "zeros"]


class ConfigError(ValueError):
    """Invalid layer or network configuration."""


class ShortSequenceError(ValueError):
    """Input is shorter than the receptive field, so no output exists."""

    def __init__(self, length: int, required: int):
        super().__init__(f"sequence of {length} frames is shorter than the required minimum of {required}")
        self.length = length
        self.required = required


def effective_kernel(K: int, dilation: int = 1) -> int:
    return (K - 1) * dilation + 1


def conv_output_length(T: int, K: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    span = T + 2 * padding - effective_kernel(K, dilation)
    return span // stride + 1 if span >= 0 else 0


def temporal_conv_clip(x, kernel, bias=None, stride: int = 1, dilation: int = 1, padding: int = 0) -> np.ndarray:
    """Temporal (K x 1) convolution of ``x`` with shape (C_in, T, V).

    ``kernel`` has shape (C_out, C_in, K); returns (C_out, T', V).
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if x.ndim != 3:
        raise DimensionError(f"expected (C_in, T, V) input, got {x.shape}")
    C_out, C_in, K = kernel.shape
    if x.shape[0] != C_in:
        raise DimensionError(f"input has {x.shape[0]} channels, kernel expects {C_in}")
    _, T, V = x.shape
    T_out = conv_output_length(T, K, stride, dilation, padding)
    if T_out <= 0:
        raise ShortSequenceError(T, effective_kernel(K, dilation) - 2 * padding)
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (0, 0)))
    out = np.zeros((C_out, T_out * V), dtype=DTYPE)
    last = (T_out - 1) * stride + 1
    taps = np.ascontiguousarray(kernel.transpose(2, 0, 1))  # strided views would miss the BLAS path
    for k in range(K):
        start = k * dilation
        window = x[:, start:start + last:stride, :].reshape(C_in, T_out * V)
        out += taps[k] @ window
    if bias is not None:
        out += as_tensor(bias)[:, None]
    return out.reshape(C_out, T_out, V)


class CoConv:
    """Streaming temporal convolution that caches partial sums instead of frames.

    Each incoming frame is multiplied by all K taps at once; the products are
    added into rotating accumulator slots for the outputs they will contribute
    to. The slot belonging to the current frame is complete after the newest
    tap is added and is emitted (plus bias) if it falls on the stride grid.
    """

    def __init__(self, kernel, bias=None, dilation: int = 1, stride: int = 1, V: int | None = None,
                 warmup_policy: WarmupPolicy = "strict"):
        kernel = as_tensor(kernel)
        if kernel.ndim != 3 or kernel.shape[2] < 1:
            raise DimensionError(f"kernel must be (C_out, C_in, K), got {kernel.shape}")
        if dilation < 1 or stride < 1:
            raise ConfigError("dilation and stride must be positive")
        if warmup_policy not in ("strict", "zeros"):
            raise ConfigError(f"unknown warm-up policy {warmup_policy!r}")
        self.C_out, self.C_in, self.K = kernel.shape
        self.dilation = dilation
        self.stride = stride
        self.k_eff = effective_kernel(self.K, dilation)
        self.bias = np.zeros(self.C_out, DTYPE) if bias is None else as_tensor(bias)
        self.warmup_policy = warmup_policy
        # (K * C_out, C_in): one matmul yields every tap's product for a frame.
        self._w = np.ascontiguousarray(kernel.transpose(2, 0, 1).reshape(self.K * self.C_out, self.C_in))
        self._offsets = np.array([(self.K - 1 - k) * dilation for k in range(self.K - 1)], dtype=np.int64)
        self.slots = self.k_eff - 1
        self.V = V
        self.acc: np.ndarray | None = None
        if V is not None:
            self.acc = np.zeros((self.slots, self.C_out, V), dtype=DTYPE)
        self.steps_seen = self.slots if warmup_policy == "zeros" else 0

    @property
    def stride_phase(self) -> int:
        return max(self.steps_seen - self.slots, 0) % self.stride

    @property
    def state_size(self) -> int:
        """Number of cached reals."""
        return 0 if self.acc is None else self.acc.size

    def step(self, x_t) -> np.ndarray | None:
        x_t = as_tensor(x_t)
        if x_t.ndim != 2 or x_t.shape[0] != self.C_in or (self.V is not None and x_t.shape[1] != self.V):
            raise DimensionError(f"frame shape {x_t.shape} does not match ({self.C_in}, {self.V})")
        if self.acc is None:
            self.V = x_t.shape[1]
            self.acc = np.zeros((self.slots, self.C_out, self.V), dtype=DTYPE)
        t = self.steps_seen
        prods = (self._w @ x_t).reshape(self.K, self.C_out, -1)
        if self.slots:
            cur = t % self.slots
            out = self.acc[cur] + prods[-1]
            self.acc[cur] = 0
            self.acc[(t + self._offsets) % self.slots] += prods[:-1]
        else:
            out = prods[0]
        self.steps_seen = t + 1
        if t < self.slots or (t - self.slots) % self.stride:
            return None
        out += self.bias[:, None]
        return out


def co_conv_init(kernel, bias, dilation: int, stride: int, V: int, warmup_policy: WarmupPolicy = "strict") -> CoConv:
    return CoConv(kernel, bias, dilation=dilation, stride=stride, V=V, warmup_policy=warmup_policy)


def co_conv_step(state: CoConv, x_t) -> np.ndarray | None:
    return state.step(x_t)


def compute_delay(k_T: int, d_T: int = 1, p_T: int = 0) -> int:
    """Residual delay (in frames) that realigns an unpadded conv with its padded twin."""
    delay = k_T + (k_T - 1) * (d_T - 1) - p_T - 1
    if delay < 0:
        raise ConfigError(f"padding {p_T} exceeds causal extent of kernel {k_T} with dilation {d_T}")
    return delay


class DelayLine:
    """FIFO that returns what was pushed ``n`` steps earlier."""

    def __init__(self, n: int):
        if n < 0:
            raise ConfigError("delay must be non-negative")
        self.n = n
        self.queue: deque = deque()

    def __len__(self) -> int:
        return len(self.queue)

    def step(self, x):
        self.queue.append(x)
        if len(self.queue) > self.n:
            return self.queue.popleft()
        return None


def delay_step(line: DelayLine, x):
    return line.step(x)


class CoPool:
    """Sliding-window temporal mean over the last ``window`` inputs."""

    def __init__(self, window: int):
        if window < 1:
            raise ConfigError("pool window must be positive")
        self.window = window
        self.buf: np.ndarray | None = None
        self.total: np.ndarray | None = None
        self.steps_seen = 0

    @property
    def state_size(self) -> int:
        return 0 if self.buf is None else self.buf.size + self.total.size

    def step(self, x) -> np.ndarray:
        x = as_tensor(x)
        if self.buf is None:
            self.buf = np.zeros((self.window,) + x.shape, dtype=DTYPE)
            self.total = np.zeros(x.shape, dtype=np.float64)
        i = self.steps_seen % self.window
        if self.steps_seen >= self.window:
            self.total -= self.buf[i]
        self.buf[i] = x
        self.total += x
        self.steps_seen += 1
        n = min(self.steps_seen, self.window)
        if i == self.window - 1:
            # resync so float64 add/subtract drift never accumulates
            self.total = self.buf[:n].sum(axis=0, dtype=np.float64)
        return (self.total / n).astype(DTYPE)


def co_avgpool_step(state: CoPool, x) -> np.ndarray:
    return state.step(x)


def network_stride(strides) -> int:
    return math.prod(int(s) for s in strides)
