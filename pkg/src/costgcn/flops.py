"""Analytical cost model: FLOPs per prediction, parameters and continual state.

Convention: one multiply-add is 2 FLOPs, batch norm 2 per element, ReLU and
plain additions 1 per element, softmax 5 per element.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .continual import ConfigError, conv_output_length
from .network import BlockSpec, NetworkConfig, convert, param_shapes

BYTES_PER_REAL = 4
MAC = 2
BN = 2
SOFTMAX = 5

_BUFFERS = ("mean", "var")


@dataclass
class FlopsReport:
    clip_flops: int
    step_flops_per_pred: int
    params: int
    state_bytes: int
    frames_per_pred: int
    T: int

    @property
    def reduction_factor(self) -> float:
        return self.clip_flops / self.step_flops_per_pred if self.step_flops_per_pred else math.inf

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reduction_factor"] = self.reduction_factor
        return d

    def table(self) -> str:
        rows = [
            ("clip FLOPs / pred", f"{self.clip_flops / 1e9:.3f} G", f"T={self.T}"),
            ("step FLOPs / pred", f"{self.step_flops_per_pred / 1e9:.4f} G", f"{self.frames_per_pred} frames/pred"),
            ("reduction", f"{self.reduction_factor:.1f}x", ""),
            ("params", f"{self.params / 1e6:.3f} M", f"{self.params}"),
            ("state memory", f"{self.state_bytes / 1024:.1f} KiB", f"{self.state_bytes} bytes"),
        ]
        w0 = max(len(r[0]) for r in rows)
        w1 = max(len(r[1]) for r in rows)
        return "\n".join(f"{a:<{w0}}  {b:>{w1}}  {c}".rstrip() for a, b, c in rows)


def linear_flops(C_in: int, C_out: int, n: int = 1, bias: bool = True) -> int:
    """A dense C_in -> C_out map applied at ``n`` positions."""
    return n * (MAC * C_in * C_out + (C_out if bias else 0))


def linear_params(C_in: int, C_out: int, bias: bool = True) -> int:
    return C_in * C_out + (C_out if bias else 0)


def spatial_frame_flops(b: BlockSpec, V: int) -> int:
    """Spatial operator, its BN, inner residual and ReLU on one frame."""
    C_in, C_out = b.C_in, b.C_out
    if b.spatial in ("gc", "agc"):
        f = 3 * MAC * C_out * C_in * V + 3 * MAC * C_out * V * V + 2 * C_out * V
        if b.spatial == "agc":
            C_e = b.embed_dim
            f += 3 * 2 * MAC * C_e * C_in * V      # theta, phi
            f += 3 * MAC * C_e * V * V              # embedding products
            f += 3 * SOFTMAX * V * V + 3 * V * V    # softmax, add static graph
    else:
        S, d_k, d_v = b.ssa_dims
        f = S * (2 * d_k + d_v) * MAC * C_in * V    # q, k, v
        f += S * (MAC * d_k + 1 + SOFTMAX) * V * V  # logits, scale, softmax
        f += S * MAC * d_v * V * V                  # attention @ values
        f += MAC * C_out * S * d_v * V              # output projection
    if C_in != C_out:
        f += MAC * C_out * C_in * V
    f += C_out * V + BN * C_out * V + C_out * V     # residual add, BN, ReLU
    return f


def _agc_global_correction(b: BlockSpec, V: int, T: int) -> int:
    """Whole-clip attention runs one softmax instead of T."""
    if b.spatial != "agc" or T < 1:
        return 0
    return -(T - 1) * 3 * (SOFTMAX + 1) * V * V


def temporal_output_flops(b: BlockSpec, V: int) -> int:
    """Everything after the conv products for one output frame: bias, BN, residual, ReLU."""
    C_in, C_out = b.C_in, b.C_out
    f = C_out * V + BN * C_out * V + C_out * V
    if b.residual == "linear":
        f += MAC * C_out * C_in * V
    if b.residual != "none":
        f += C_out * V
    return f


def temporal_products(b: BlockSpec, V: int) -> int:
    """FLOPs of the K channel-mixing products for one frame."""
    return b.K * MAC * b.C_out * b.C_out * V


def _input_flops(config: NetworkConfig) -> int:
    return BN * config.in_channels * config.V if config.input_bn else 0


def _fc_flops(config: NetworkConfig) -> int:
    return linear_flops(config.C_last, config.num_classes)


def count_clip(config: NetworkConfig, T: int) -> int:
    """FLOPs for one prediction from a T-frame clip (one body)."""
    V = config.V
    total = _input_flops(config) * T
    T_in = T
    for b in config.blocks:
        T_out = conv_output_length(T_in, b.K, b.stride, b.dilation, b.pad)
        if T_out <= 0:
            raise ConfigError(f"T={T} is too short for this config")
        total += spatial_frame_flops(b, V) * T_in + _agc_global_correction(b, V, T_in)
        total += temporal_products(b, V) * T_out + temporal_output_flops(b, V) * T_out
        T_in = T_out
    total += config.C_last * T_in * V + config.C_last  # global mean
    return total + _fc_flops(config)


def count_step(config: NetworkConfig) -> int:
    """FLOPs per prediction in continual step mode, independent of clip length."""
    if not config.is_continual:
        raise ConfigError("step-mode cost needs a continual config without padding; convert it first")
    V = config.V
    rate = config.network_stride  # inputs to the current block per prediction
    total = _input_flops(config) * rate
    for b in config.blocks:
        total += (spatial_frame_flops(b, V) + temporal_products(b, V)) * rate
        rate //= b.stride
        total += temporal_output_flops(b, V) * rate
    # mean over joints, sliding pool update (add, subtract, scale)
    total += config.C_last * V + 3 * config.C_last
    return total + _fc_flops(config)


def count_params(config: NetworkConfig) -> int:
    """Learnable parameters; BN running statistics are buffers and not counted."""
    return sum(math.prod(shape) for name, shape in param_shapes(config).items()
               if name.rsplit(".", 1)[1] not in _BUFFERS)


def state_reals(config: NetworkConfig) -> dict[str, int]:
    V = config.V
    conv = sum((b.k_eff - 1) * b.C_out * V for b in config.blocks)
    delay = sum(b.residual_delay * b.C_out * V for b in config.blocks if b.residual != "none")
    # ring buffer of the last `window` pooled features plus their running sum
    pool = (config.window + 1) * config.C_last
    return {"conv": conv * config.persons, "delay": delay * config.persons, "pool": pool}


def count_state(config: NetworkConfig) -> int:
    """Bytes of continual state carried between frames."""
    if not config.is_continual:
        raise ConfigError("state memory is defined for continual configs only")
    return BYTES_PER_REAL * sum(state_reals(config).values())


def report(config: NetworkConfig, T: int | None = None, reference: NetworkConfig | None = None) -> FlopsReport:
    """Full cost summary.

    ``reference`` is the regular model whose clip cost the continual one is
    compared against; by default that is ``config`` itself. A regular config is
    converted to ``co`` for the step-mode numbers.
    """
    T = T or config.T_ref
    clip_cfg = reference or config
    step_cfg = config if config.is_continual else convert(config, "co")[0]
    return FlopsReport(
        clip_flops=count_clip(clip_cfg, T),
        step_flops_per_pred=count_step(step_cfg),
        params=count_params(config),
        state_bytes=count_state(step_cfg),
        frames_per_pred=step_cfg.network_stride,
        T=T,
    )
