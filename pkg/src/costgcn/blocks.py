"""Spatial operators and spatio-temporal blocks in clip and continual form.

Feature layout is channels-first: a frame is (C, V), a clip is (C, T, V).
Node aggregation multiplies on the right, ``Y = X @ A`` for X of shape (C, V),
so column j of the output collects from every i with ``A[i, j] != 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Union

import numpy as np

from .continual import CoConv, ConfigError, DelayLine, ShortSequenceError, compute_delay, \
    conv_output_length, effective_kernel, temporal_conv_clip
from .numerics import DTYPE, DimensionError, as_tensor, bn_affine, relu, softmax_rows

AttentionScope = Literal["global", "frame"]
ResidualKind = Literal["none", "identity", "linear"]


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5
    scale: np.ndarray = field(init=False, repr=False)
    shift: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.scale, self.shift = bn_affine(self.gamma, self.beta, self.mean, self.var, self.eps)

    @classmethod
    def identity(cls, C: int) -> "BatchNorm":
        return cls(np.ones(C, DTYPE), np.zeros(C, DTYPE), np.zeros(C, DTYPE), np.ones(C, DTYPE), eps=0.0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        bcast = (-1,) + (1,) * (x.ndim - 1)
        return x * self.scale.reshape(bcast) + self.shift.reshape(bcast)


def _residual(h: np.ndarray, res: np.ndarray | None, C_out: int) -> np.ndarray:
    """Identity when ``res`` is None (channel widths must agree), else ``res @ h``."""
    if res is None:
        if h.shape[0] != C_out:
            raise DimensionError(f"identity residual needs C_in == C_out, got {h.shape[0]} and {C_out}")
        return h
    if h.ndim == 2:
        return res @ h
    return (res @ h.reshape(h.shape[0], -1)).reshape((res.shape[0],) + h.shape[1:])


def _check_channels(h: np.ndarray, C_in: int):
    if h.shape[0] != C_in:
        raise DimensionError(f"input has {h.shape[0]} channels, layer expects {C_in}")


@dataclass
class GcParams:
    """Graph convolution: ``W`` (3, C_out, C_in), edge importance ``M`` (3, V, V)."""

    W: np.ndarray
    M: np.ndarray
    bn: BatchNorm
    res: np.ndarray | None = None

    @property
    def C_out(self) -> int:
        return self.W.shape[1]

    @property
    def C_in(self) -> int:
        return self.W.shape[2]

    def mix(self, adj: np.ndarray) -> np.ndarray:
        if adj.shape != self.M.shape:
            raise DimensionError(f"adjacency {adj.shape} vs edge importance {self.M.shape}")
        return adj * self.M

    def frame(self, h, adj, mix=None):
        h = as_tensor(h)
        _check_channels(h, self.C_in)
        mix = self.mix(adj) if mix is None else mix
        agg = (np.matmul(self.W, h) @ mix).sum(axis=0)
        return relu(_residual(h, self.res, self.C_out) + self.bn(agg))

    def clip(self, H, adj, scope: AttentionScope = "frame", mix=None):
        H = as_tensor(H)
        _check_channels(H, self.C_in)
        C, T, V = H.shape
        mix = self.mix(adj) if mix is None else mix
        wh = (self.W.reshape(-1, C) @ H.reshape(C, T * V)).reshape(3, self.C_out * T, V)
        agg = (wh @ mix).sum(axis=0).reshape(self.C_out, T, V)
        return relu(_residual(H, self.res, self.C_out) + self.bn(agg))


@dataclass
class AgcParams:
    """Adaptive graph convolution with learned ``B`` and data-dependent attention."""

    W: np.ndarray
    B: np.ndarray
    theta: np.ndarray  # (3, C_e, C_in)
    phi: np.ndarray
    bn: BatchNorm
    res: np.ndarray | None = None

    def __post_init__(self):
        if self.theta.shape[1] < 1:
            raise ConfigError("embedding dimension must be positive")

    @property
    def C_out(self) -> int:
        return self.W.shape[1]

    @property
    def C_in(self) -> int:
        return self.W.shape[2]

    def attention(self, h) -> np.ndarray:
        """Per-subset row-stochastic (3, V, V) attention from a single frame."""
        a = np.matmul(self.theta, h)
        b = np.matmul(self.phi, h)
        return softmax_rows(np.matmul(np.swapaxes(a, -1, -2), b))

    def attention_global(self, H) -> np.ndarray:
        """Attention from the whole clip, embeddings flattened to (C_e * T, V)."""
        C, T, V = H.shape
        flat = H.reshape(C, T * V)
        a = (self.theta.reshape(-1, C) @ flat).reshape(3, -1, V)
        b = (self.phi.reshape(-1, C) @ flat).reshape(3, -1, V)
        return softmax_rows(np.matmul(np.swapaxes(a, -1, -2), b))

    def frame(self, h, adj, mix=None):
        h = as_tensor(h)
        _check_channels(h, self.C_in)
        graph = (adj + self.B if mix is None else mix) + self.attention(h)
        agg = (np.matmul(self.W, h) @ graph).sum(axis=0)
        return relu(_residual(h, self.res, self.C_out) + self.bn(agg))

    def clip(self, H, adj, scope: AttentionScope = "frame", mix=None):
        H = as_tensor(H)
        _check_channels(H, self.C_in)
        C, T, V = H.shape
        static = adj + self.B if mix is None else mix
        wh = (self.W.reshape(-1, C) @ H.reshape(C, T * V)).reshape(3, self.C_out, T, V)
        if scope == "global":
            graph = static + self.attention_global(H)
            agg = (wh.reshape(3, self.C_out * T, V) @ graph).sum(axis=0)
        elif scope == "frame":
            flat = H.reshape(C, T * V)
            a = (self.theta.reshape(-1, C) @ flat).reshape(3, -1, T, V).transpose(0, 2, 3, 1)
            b = (self.phi.reshape(-1, C) @ flat).reshape(3, -1, T, V).transpose(0, 2, 1, 3)
            graph = static[:, None] + softmax_rows(np.matmul(a, b))  # (3, T, V, V)
            agg = np.matmul(wh.transpose(0, 2, 1, 3), graph).sum(axis=0).transpose(1, 0, 2)
        else:
            raise ConfigError(f"unknown attention scope {scope!r}")
        agg = np.ascontiguousarray(agg).reshape(self.C_out, T, V)
        return relu(_residual(H, self.res, self.C_out) + self.bn(agg))


@dataclass
class SsaParams:
    """Multi-head spatial self-attention.

    ``Wq``/``Wk`` are (S, d_k, C_in), ``Wv`` is (S, d_v, C_in) and ``Wo`` is
    (C_out, S * d_v) applied to the head outputs stacked along channels.
    """

    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    bn: BatchNorm
    res: np.ndarray | None = None

    def __post_init__(self):
        if self.Wq.shape != self.Wk.shape:
            raise DimensionError(f"query {self.Wq.shape} and key {self.Wk.shape} projections differ")
        if self.Wq.shape[0] < 1:
            raise ConfigError("at least one attention head is required")
        if self.Wo.shape[1] != self.Wv.shape[0] * self.Wv.shape[1]:
            raise DimensionError(f"output projection {self.Wo.shape} does not match {self.Wv.shape[0]} heads "
                                 f"of width {self.Wv.shape[1]}")

    @property
    def C_out(self) -> int:
        return self.Wo.shape[0]

    @property
    def C_in(self) -> int:
        return self.Wq.shape[2]

    def _heads(self, h):
        q = np.matmul(self.Wq, h)
        k = np.matmul(self.Wk, h)
        v = np.matmul(self.Wv, h)
        logits = np.matmul(np.swapaxes(q, -1, -2), k) / DTYPE(np.sqrt(self.Wq.shape[1]))
        attn = softmax_rows(logits)
        return np.matmul(v, np.swapaxes(attn, -1, -2))

    def frame(self, h, adj=None, mix=None):
        h = as_tensor(h)
        _check_channels(h, self.C_in)
        heads = self._heads(h)
        out = self.Wo @ heads.reshape(-1, h.shape[1])
        return relu(_residual(h, self.res, self.C_out) + self.bn(out))

    def clip(self, H, adj=None, scope: AttentionScope = "frame", mix=None):
        H = as_tensor(H)
        _check_channels(H, self.C_in)
        C, T, V = H.shape
        frames = np.ascontiguousarray(H.transpose(1, 0, 2))  # (T, C, V)
        heads = self._heads(frames[:, None])  # (T, S, d_v, V)
        out = np.matmul(self.Wo, heads.reshape(T, -1, V))  # (T, C_out, V)
        out = np.ascontiguousarray(out.transpose(1, 0, 2))
        return relu(_residual(H, self.res, self.C_out) + self.bn(out))


SpatialParams = Union[GcParams, AgcParams, SsaParams]


def gc_forward(h_t, adj, p: GcParams) -> np.ndarray:
    return p.frame(h_t, adj)


def agc_attention(h_t, p: AgcParams, subset: int) -> np.ndarray:
    """Attention matrix of partition subset ``subset`` (1, 2 or 3) for one frame."""
    if subset not in (1, 2, 3):
        raise ValueError("subset must be 1, 2 or 3")
    return p.attention(as_tensor(h_t))[subset - 1]


def agc_forward(h_t, adj, p: AgcParams) -> np.ndarray:
    return p.frame(h_t, adj)


def ssa_forward(h_t, p: SsaParams) -> np.ndarray:
    return p.frame(h_t)


@dataclass
class BlockParams:
    """One spatio-temporal block.

    ``delay`` is the residual delay in input frames; ``None`` means "aligned with
    this block's own padding", i.e. ``compute_delay(K, dilation, padding)``.
    """

    spatial: SpatialParams
    tcn_kernel: np.ndarray  # (C_out, C_out, K)
    tcn_bias: np.ndarray
    tcn_bn: BatchNorm
    residual: ResidualKind = "identity"
    res: np.ndarray | None = None
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    delay: int | None = None

    def __post_init__(self):
        C = self.spatial.C_out
        if self.tcn_kernel.shape[:2] != (C, C):
            raise DimensionError(f"temporal kernel {self.tcn_kernel.shape} does not match spatial width {C}")
        if self.residual == "linear" and (self.res is None or self.res.shape != (C, self.spatial.C_in)):
            raise DimensionError("linear residual needs a (C_out, C_in) matrix")
        if self.residual == "identity" and self.spatial.C_in != C:
            raise DimensionError("identity residual needs C_in == C_out")
        if self.residual_delay < 0 or self.residual_offset < 0:
            raise ConfigError("residual delay is inconsistent with kernel and padding")

    @property
    def C_in(self) -> int:
        return self.spatial.C_in

    @property
    def C_out(self) -> int:
        return self.spatial.C_out

    @property
    def K(self) -> int:
        return self.tcn_kernel.shape[2]

    @property
    def k_eff(self) -> int:
        return effective_kernel(self.K, self.dilation)

    @property
    def residual_delay(self) -> int:
        return compute_delay(self.K, self.dilation, self.padding) if self.delay is None else self.delay

    @property
    def residual_offset(self) -> int:
        """Input frame of the residual for output 0, relative to the unpadded input."""
        return self.k_eff - 1 - self.padding - self.residual_delay

    def block_residual(self, h):
        if self.residual == "none":
            return None
        return _residual(h, self.res if self.residual == "linear" else None, self.C_out)


def st_block_clip(H, adj, p: BlockParams, padding: int | None = None, scope: AttentionScope = "frame",
                  mix=None) -> np.ndarray:
    """Clip-mode block: spatial op over all frames, temporal conv, BN, residual, ReLU."""
    H = as_tensor(H)
    pad = p.padding if padding is None else padding
    T = H.shape[1]
    T_out = conv_output_length(T, p.K, p.stride, p.dilation, pad)
    if T_out <= 0:
        raise ShortSequenceError(T, p.k_eff - 2 * pad)
    g = p.spatial.clip(H, adj, scope=scope, mix=mix)
    z = p.tcn_bn(temporal_conv_clip(g, p.tcn_kernel, p.tcn_bias, p.stride, p.dilation, pad))
    if p.residual == "none":
        return relu(z)
    offset = p.k_eff - 1 - pad - p.residual_delay
    last = offset + (T_out - 1) * p.stride
    if offset < 0 or last >= T:
        raise ConfigError(f"residual window [{offset}, {last}] falls outside the {T}-frame input")
    r = p.block_residual(np.ascontiguousarray(H[:, offset:last + 1:p.stride]))
    return relu(r + z)


class CoBlock:
    """Continual block: per-frame spatial op, streaming conv, delayed residual."""

    def __init__(self, p: BlockParams, adj, V: int | None = None):
        if p.padding:
            raise ConfigError("continual blocks require zero temporal padding")
        self.p = p
        self.adj = adj
        if isinstance(p.spatial, GcParams):
            self._mix = p.spatial.mix(adj)
        elif isinstance(p.spatial, AgcParams):
            self._mix = adj + p.spatial.B
        else:
            self._mix = None
        self.conv = CoConv(p.tcn_kernel, p.tcn_bias, dilation=p.dilation, stride=p.stride, V=V)
        self.delay = DelayLine(p.residual_delay) if p.residual != "none" else None

    @property
    def state_size(self) -> int:
        stored = 0 if self.delay is None else sum(x.size for x in self.delay.queue)
        return self.conv.state_size + stored

    def step(self, x_t) -> np.ndarray | None:
        x_t = as_tensor(x_t)
        g = self.p.spatial.frame(x_t, self.adj, mix=self._mix)
        r = None if self.delay is None else self.delay.step(self.p.block_residual(x_t))
        z = self.conv.step(g)
        if z is None:
            return None
        z = self.p.tcn_bn(z)
        if self.delay is None:
            return relu(z)
        if r is None:
            raise ConfigError("delayed residual unavailable when the convolution emitted")
        return relu(r + z)


def co_st_block_step(state: CoBlock, x_t) -> np.ndarray | None:
    return state.step(x_t)
