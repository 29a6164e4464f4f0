"""Full models: configs, presets, Reg -> Co conversion, clip and step inference."""
from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .blocks import AgcParams, BatchNorm, BlockParams, CoBlock, GcParams, SsaParams, st_block_clip
from .continual import ConfigError, CoPool, ShortSequenceError, compute_delay, conv_output_length, \
    effective_kernel, network_stride
from .graph import SkeletonGraph, adjacency_set, build_skeleton
from .io import WeightStore
from .numerics import DTYPE, DimensionError, as_tensor

log = logging.getLogger(__name__)

SpatialKind = Literal["gc", "agc", "ssa"]
Variant = Literal["reg", "co", "co_star"]

PRESET_NAMES = ("stgcn", "agcn", "str")
VARIANTS = ("reg", "co", "co_star")

# 64 x 4 -> 128 x 3 -> 256 x 3, stride two entering the 128 and 256 stages.
CHANNEL_PLAN = [(64, 1), (64, 1), (64, 1), (64, 1), (128, 2), (128, 1), (128, 1), (256, 2), (256, 1), (256, 1)]
SSA_FROM_BLOCK = 3  # S-TR keeps graph convolutions in its first three blocks
SSA_HEADS = 8


class WeightError(KeyError):
    """A tensor required by the config is missing or has the wrong shape."""

    def __init__(self, name: str, message: str):
        super().__init__(name)
        self.name = name
        self.message = message

    def __str__(self) -> str:
        return f"{self.name}: {self.message}"


class ModeError(ValueError):
    """Operation not available for this kind of config (e.g. streaming a padded model)."""


@dataclass
class BlockSpec:
    spatial: SpatialKind
    C_in: int
    C_out: int
    stride: int = 1
    K: int = 9
    dilation: int = 1
    padding: Literal["equal", "zero"] = "equal"
    residual: Literal["none", "identity", "linear"] = "identity"
    delay: int | None = None
    embed: int | None = None   # AGC embedding width, default C_out // 4
    heads: int | None = None   # SSA
    d_k: int | None = None     # SSA per-head key width
    d_v: int | None = None     # SSA per-head value width

    @property
    def k_eff(self) -> int:
        return effective_kernel(self.K, self.dilation)

    @property
    def pad(self) -> int:
        return (self.k_eff - 1) // 2 if self.padding == "equal" else 0

    @property
    def residual_delay(self) -> int:
        return compute_delay(self.K, self.dilation, self.pad) if self.delay is None else self.delay

    @property
    def embed_dim(self) -> int:
        return self.embed or max(self.C_out // 4, 1)

    @property
    def ssa_dims(self) -> tuple[int, int, int]:
        heads = self.heads or SSA_HEADS
        d_k = self.d_k or max(self.C_out // (4 * heads), 1)
        d_v = self.d_v or max(self.C_out // heads, 1)
        return heads, d_k, d_v


@dataclass
class NetworkConfig:
    name: str
    graph: str | dict
    num_classes: int
    blocks: list[BlockSpec]
    T_ref: int = 300
    in_channels: int = 3
    persons: int = 1
    input_bn: bool = False
    pool_window: int | None = None
    attention_scope: Literal["global", "frame"] = "frame"
    variant: str = "custom"

    def __post_init__(self):
        self.blocks = [b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks]
        self.validate()

    def validate(self) -> None:
        if not self.blocks:
            raise ConfigError("a network needs at least one block")
        if self.blocks[0].C_in != self.in_channels:
            raise ConfigError(f"block 0 takes {self.blocks[0].C_in} channels but input has {self.in_channels}")
        for i, (a, b) in enumerate(zip(self.blocks, self.blocks[1:])):
            if a.C_out != b.C_in:
                raise ConfigError(f"block {i} outputs {a.C_out} channels but block {i + 1} expects {b.C_in}")
        for i, b in enumerate(self.blocks):
            if b.spatial not in ("gc", "agc", "ssa"):
                raise ConfigError(f"block {i}: unknown spatial kind {b.spatial!r}")
            if min(b.C_in, b.C_out, b.stride, b.K, b.dilation) < 1:
                raise ConfigError(f"block {i}: sizes, stride, K and dilation must be positive")
            if b.padding not in ("equal", "zero"):
                raise ConfigError(f"block {i}: padding must be 'equal' or 'zero'")
            if b.padding == "equal" and b.k_eff % 2 == 0:
                raise ConfigError(f"block {i}: equal padding needs an odd effective kernel, got {b.k_eff}")
            if b.residual == "identity" and (b.C_in != b.C_out):
                raise ConfigError(f"block {i}: identity residual needs C_in == C_out")
            if b.residual not in ("none", "identity", "linear"):
                raise ConfigError(f"block {i}: unknown residual kind {b.residual!r}")
            if not 0 <= b.residual_delay <= b.k_eff - 1 - b.pad:
                raise ConfigError(f"block {i}: residual delay {b.residual_delay} outside [0, {b.k_eff - 1 - b.pad}]")
        if self.attention_scope not in ("global", "frame"):
            raise ConfigError(f"unknown attention scope {self.attention_scope!r}")
        if self.pool_window is not None and self.pool_window < 1:
            raise ConfigError("pool window must be positive")

    @property
    def skeleton(self) -> SkeletonGraph:
        return build_skeleton(self.graph)

    @property
    def V(self) -> int:
        return self.skeleton.V

    @property
    def strides(self) -> list[int]:
        return [b.stride for b in self.blocks]

    @property
    def network_stride(self) -> int:
        return network_stride(self.strides)

    @property
    def is_continual(self) -> bool:
        return all(b.padding == "zero" for b in self.blocks)

    @property
    def window(self) -> int:
        """Continual pooling window in final-block outputs."""
        return self.pool_window or math.ceil(self.T_ref / self.network_stride)

    @property
    def C_last(self) -> int:
        return self.blocks[-1].C_out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [{k: v for k, v in b.items() if v is not None} for b in d["blocks"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _regular_config(name: str, graph, num_classes: int, T_ref: int, plan, spatial_of, in_channels: int = 3,
                    K: int = 9, input_bn: bool = True) -> NetworkConfig:
    blocks = []
    C_in = in_channels
    for i, (C_out, stride) in enumerate(plan):
        if i == 0:
            residual = "none"
        elif C_in == C_out and stride == 1:
            residual = "identity"
        else:
            residual = "linear"
        blocks.append(BlockSpec(spatial=spatial_of(i), C_in=C_in, C_out=C_out, stride=stride, K=K,
                                padding="equal", residual=residual))
        C_in = C_out
    return NetworkConfig(name=name, graph=graph, num_classes=num_classes, blocks=blocks, T_ref=T_ref,
                         in_channels=in_channels, input_bn=input_bn,
                         attention_scope="global" if name == "agcn" else "frame", variant="reg")


def _spatial_plan(name: str, ssa_from: int = SSA_FROM_BLOCK):
    if name == "stgcn":
        return lambda i: "gc"
    if name == "agcn":
        return lambda i: "agc"
    if name == "str":
        return lambda i: "gc" if i < ssa_from else "ssa"
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")


def preset(name: str, variant: Variant = "reg", graph: str = "ntu25") -> NetworkConfig:
    """Ten-block reference architectures on NTU-25 (60 classes) or OpenPose-18 (400)."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    classes = {"ntu25": 60, "openpose18": 400}.get(graph)
    if classes is None:
        raise ConfigError(f"presets are defined for ntu25 and openpose18, not {graph!r}")
    cfg = _regular_config(name, graph, classes, 300, CHANNEL_PLAN, _spatial_plan(name))
    return cfg if variant == "reg" else convert(cfg, variant)[0]


TINY_GRAPH = {"V": 5, "edges": [[0, 1], [1, 2], [2, 3], [3, 4]], "center": 2}


def reduced_preset(name: str, variant: Variant = "reg", scale: Literal["tiny", "small"] = "tiny") -> NetworkConfig:
    """Scaled-down versions of the presets for fast checks.

    tiny: 5-joint path, 3 blocks of width 8/8/16 with K=5 and a stride-2 middle block.
    small: NTU-25 skeleton, 4 blocks of width 16/16/32/32 with K=9.
    """
    if scale == "tiny":
        plan, graph, K, T_ref = [(8, 1), (8, 2), (16, 1)], TINY_GRAPH, 5, 64
    elif scale == "small":
        plan, graph, K, T_ref = [(16, 1), (16, 1), (32, 2), (32, 1)], "ntu25", 9, 64
    else:
        raise ConfigError(f"unknown scale {scale!r}")
    cfg = _regular_config(name, graph, 4, T_ref, plan, _spatial_plan(name, ssa_from=1), K=K)
    for b in cfg.blocks:
        if b.spatial == "ssa":
            b.heads = 2
    cfg.name = f"{name}-{scale}"
    cfg.validate()
    return cfg if variant == "reg" else convert(cfg, variant)[0]


@dataclass
class DelayReport:
    target: str
    blocks: list[dict] = field(default_factory=list)
    total_delay: int = 0
    network_stride: int = 1
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def convert(config: NetworkConfig, target: Literal["co", "co_star"]) -> tuple[NetworkConfig, DelayReport]:
    """Drop temporal padding (and for ``co_star`` all strides); delay residuals to match.

    Weights are untouched: the converted config names and shapes every tensor
    exactly like the source.
    """
    if target not in ("co", "co_star"):
        raise ConfigError(f"conversion target must be 'co' or 'co_star', not {target!r}")
    out = copy.deepcopy(config)
    report = DelayReport(target=target)
    for i, b in enumerate(out.blocks):
        reg_pad = b.pad
        b.delay = b.residual_delay
        b.padding = "zero"
        if target == "co_star":
            b.stride = 1
        report.blocks.append({"block": i, "K": b.K, "dilation": b.dilation, "padding": reg_pad,
                              "delay": b.delay, "stride": b.stride})
    out.attention_scope = "frame"
    out.variant = target
    if target == "co_star" and network_stride(config.strides) != 1:
        msg = ("stride reduction changes what the network computes (model shift); "
               "accuracy of the converted weights is not preserved without fine-tuning")
        report.warnings.append(msg)
        warnings.warn(msg, stacklevel=2)
    if any(b.spatial == "agc" for b in config.blocks) and config.attention_scope == "global":
        report.warnings.append("AGC attention switched from whole-clip to per-frame scope")
    out.validate()
    report.total_delay = total_delay(out)
    report.network_stride = out.network_stride
    return out, report


def total_delay(config: NetworkConfig) -> int:
    """Input frames between the first frame and the first prediction.

    Each block adds its unpadded receptive offset ``K_eff - 1`` measured at the
    cumulative stride of the blocks before it; prediction ``n`` is stamped with
    input frame ``total_delay + n * network_stride``.
    """
    total = 0
    rate = 1
    for b in config.blocks:
        total += (b.k_eff - 1) * rate
        rate *= b.stride
    return total


def min_clip_length(config: NetworkConfig) -> int:
    need = 1
    for b in reversed(config.blocks):
        need = max((need - 1) * b.stride + b.k_eff - 2 * b.pad, 1)
    return need


def param_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every tensor the config consumes, in canonical order."""
    V = config.V
    shapes: dict[str, tuple[int, ...]] = {}

    def bn(prefix, C):
        for k in ("gamma", "beta", "mean", "var"):
            shapes[f"{prefix}.{k}"] = (C,)

    if config.input_bn:
        bn("data_bn", config.in_channels * V)
    for i, b in enumerate(config.blocks):
        p = f"blocks.{i}"
        if b.spatial in ("gc", "agc"):
            shapes[f"{p}.spatial.W"] = (3, b.C_out, b.C_in)
        if b.spatial == "gc":
            shapes[f"{p}.spatial.M"] = (3, V, V)
        elif b.spatial == "agc":
            shapes[f"{p}.spatial.B"] = (3, V, V)
            shapes[f"{p}.spatial.theta"] = (3, b.embed_dim, b.C_in)
            shapes[f"{p}.spatial.phi"] = (3, b.embed_dim, b.C_in)
        else:
            heads, d_k, d_v = b.ssa_dims
            shapes[f"{p}.spatial.q"] = (heads, d_k, b.C_in)
            shapes[f"{p}.spatial.k"] = (heads, d_k, b.C_in)
            shapes[f"{p}.spatial.v"] = (heads, d_v, b.C_in)
            shapes[f"{p}.spatial.out"] = (b.C_out, heads * d_v)
        if b.C_in != b.C_out:
            shapes[f"{p}.spatial.res"] = (b.C_out, b.C_in)
        bn(f"{p}.spatial.bn", b.C_out)
        shapes[f"{p}.tcn.kernel"] = (b.C_out, b.C_out, b.K)
        shapes[f"{p}.tcn.bias"] = (b.C_out,)
        bn(f"{p}.tcn.bn", b.C_out)
        if b.residual == "linear":
            shapes[f"{p}.res.weight"] = (b.C_out, b.C_in)
    shapes["fc.weight"] = (config.num_classes, config.C_last)
    shapes["fc.bias"] = (config.num_classes,)
    return shapes


def init_random(config: NetworkConfig, seed: int = 0) -> WeightStore:
    """Shape-correct random weights scaled to keep activations O(1)."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "gamma":
            w = rng.uniform(0.8, 1.2, shape)
        elif leaf in ("beta", "mean", "bias"):
            w = rng.normal(0, 0.05, shape)
        elif leaf == "var":
            w = rng.uniform(0.5, 1.5, shape)
        elif leaf == "M":
            w = rng.uniform(0.5, 1.5, shape)
        elif leaf == "B":
            w = rng.normal(0, 0.05, shape)
        elif leaf == "kernel":
            w = rng.normal(0, 1 / math.sqrt(shape[1] * shape[2]), shape)
        elif leaf == "W":
            w = rng.normal(0, 1 / math.sqrt(3 * shape[2]), shape)
        else:
            w = rng.normal(0, 1 / math.sqrt(shape[-1]), shape)
        out[name] = w.astype(DTYPE)
    return WeightStore(out)


def _bn(store, prefix) -> BatchNorm:
    return BatchNorm(store[f"{prefix}.gamma"], store[f"{prefix}.beta"], store[f"{prefix}.mean"],
                     store[f"{prefix}.var"])


class Model:
    """A config bound to a validated weight store."""

    def __init__(self, config: NetworkConfig, weights: WeightStore):
        self.config = config
        expected = param_shapes(config)
        for name, shape in expected.items():
            if name not in weights:
                raise WeightError(name, "missing from weight store")
            if tuple(weights[name].shape) != shape:
                raise WeightError(name, f"has shape {list(weights[name].shape)}, config needs {list(shape)}")
        extra = sorted(set(weights) - set(expected))
        if extra:
            log.warning("ignoring %d unused tensors, e.g. %s", len(extra), extra[0])
        self.weights = weights
        self.graph = config.skeleton
        self.adj = adjacency_set(self.graph)
        self.data_bn = _bn(weights, "data_bn") if config.input_bn else None
        self.blocks = [self._block(i, b) for i, b in enumerate(config.blocks)]
        self.fc_weight = weights["fc.weight"]
        self.fc_bias = weights["fc.bias"]

    def _block(self, i: int, b: BlockSpec) -> BlockParams:
        w = self.weights
        p = f"blocks.{i}"
        res = w[f"{p}.spatial.res"] if b.C_in != b.C_out else None
        bn = _bn(w, f"{p}.spatial.bn")
        if b.spatial == "gc":
            spatial = GcParams(w[f"{p}.spatial.W"], w[f"{p}.spatial.M"], bn, res)
        elif b.spatial == "agc":
            spatial = AgcParams(w[f"{p}.spatial.W"], w[f"{p}.spatial.B"], w[f"{p}.spatial.theta"],
                                w[f"{p}.spatial.phi"], bn, res)
        else:
            spatial = SsaParams(w[f"{p}.spatial.q"], w[f"{p}.spatial.k"], w[f"{p}.spatial.v"],
                                w[f"{p}.spatial.out"], bn, res)
        return BlockParams(spatial=spatial, tcn_kernel=w[f"{p}.tcn.kernel"], tcn_bias=w[f"{p}.tcn.bias"],
                           tcn_bn=_bn(w, f"{p}.tcn.bn"), residual=b.residual,
                           res=w[f"{p}.res.weight"] if b.residual == "linear" else None,
                           stride=b.stride, dilation=b.dilation, padding=b.pad, delay=b.residual_delay)

    def input_norm(self, x: np.ndarray) -> np.ndarray:
        """Apply the optional input BN to (C0, [T,] V) data, one channel per (c, v)."""
        if self.data_bn is None:
            return x
        C, V = self.config.in_channels, self.graph.V
        scale = self.data_bn.scale.reshape(C, V)
        shift = self.data_bn.shift.reshape(C, V)
        if x.ndim == 3:
            return x * scale[:, None] + shift[:, None]
        return x * scale + shift

    def head(self, pooled: np.ndarray) -> np.ndarray:
        return self.fc_weight @ pooled + self.fc_bias


def _check_input(model: Model, x: np.ndarray, ndim: int, what: str):
    C0, V = model.config.in_channels, model.graph.V
    if x.ndim != ndim or x.shape[0] != C0 or x.shape[-2] != V:
        layout = "(C0, T, V, M)" if ndim == 4 else "(C0, V, M)"
        raise DimensionError(f"{what} of shape {list(x.shape)} does not match {layout} with C0={C0}, V={V}")


def forward_features(model: Model, clip) -> np.ndarray:
    """Per-person final-block features, shape (M, C_last, T', V)."""
    clip = as_tensor(clip)
    _check_input(model, clip, 4, "clip")
    T = clip.shape[1]
    need = min_clip_length(model.config)
    if T < need:
        raise ShortSequenceError(T, need)
    feats = []
    for m in range(clip.shape[3]):
        x = model.input_norm(np.ascontiguousarray(clip[..., m]))
        for p in model.blocks:
            x = st_block_clip(x, model.adj, p, scope=model.config.attention_scope)
        feats.append(x)
    return np.stack(feats)


def forward_clip(model: Model, clip) -> np.ndarray:
    """Logits for a (C0, T, V, M) clip: blocks per person, global mean, FC."""
    feats = forward_features(model, clip)
    pooled = feats.mean(axis=(2, 3), dtype=np.float64).mean(axis=0).astype(DTYPE)
    return model.head(pooled)


@dataclass
class Prediction:
    logits: np.ndarray
    frame_index: int


class StreamState:
    """Everything one stream carries between frames."""

    def __init__(self, model: Model, persons: int = 1):
        if not model.config.is_continual:
            raise ModeError("streaming needs a continual config without temporal padding; run `convert` first")
        if persons < 1:
            raise ConfigError("persons must be positive")
        self.persons = persons
        self.blocks = [[CoBlock(p, model.adj, V=model.graph.V) for p in model.blocks] for _ in range(persons)]
        self.pool = CoPool(model.config.window)
        self.frames_seen = 0
        self.emitted = 0

    @property
    def state_size(self) -> int:
        """Cached reals across conv accumulators, delay lines and the pool."""
        return sum(b.state_size for path in self.blocks for b in path) + self.pool.state_size


def init_stream(model: Model, persons: int = 1) -> StreamState:
    return StreamState(model, persons)


def forward_step(model: Model, state: StreamState, frame) -> Prediction | None:
    """Feed one (C0, V, M) frame; returns a prediction when the last block emits."""
    frame = as_tensor(frame)
    if frame.ndim == 2:
        frame = frame[:, :, None]
    _check_input(model, frame, 3, "frame")
    if frame.shape[2] != state.persons:
        raise DimensionError(f"frame carries {frame.shape[2]} bodies, stream was opened for {state.persons}")
    index = state.frames_seen
    state.frames_seen += 1
    finals = []
    for m, path in enumerate(state.blocks):
        x = model.input_norm(frame[..., m])
        for block in path:
            x = block.step(x)
            if x is None:
                break
        finals.append(x)
    if finals[0] is None:
        return None
    feat = np.stack(finals).mean(axis=(0, 2), dtype=np.float64).astype(DTYPE)
    logits = model.head(state.pool.step(feat))
    state.emitted += 1
    return Prediction(logits=logits, frame_index=index)


def aligned_clip_window(config: NetworkConfig, n: int) -> tuple[int, int]:
    """Input frame range [start, stop) whose padding-free clip output equals emission ``n``."""
    s = config.network_stride
    stop = total_delay(config) + n * s + 1
    start = max(0, n + 1 - config.window) * s
    return start, stop


def aligned_clip_logits(model: Model, clip, n: int) -> np.ndarray:
    start, stop = aligned_clip_window(model.config, n)
    return forward_clip(model, as_tensor(clip)[:, start:stop])
