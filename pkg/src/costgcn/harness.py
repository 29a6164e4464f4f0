"""Executable clip/step equivalence checks and the throughput benchmark."""
from __future__ import annotations

import copy
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .blocks import CoBlock, st_block_clip
from .network import (Model, NetworkConfig, aligned_clip_logits, convert, forward_clip, forward_step,
                      init_random, init_stream, preset, reduced_preset, total_delay)
from .numerics import DTYPE

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_diff: float
    emissions: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(self.emissions > 0 and self.max_diff <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<14} max|diff| = {self.max_diff:.3e}  ({self.emissions} emissions)"


@dataclass
class VerifyReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _stream_model(model: Model, corrupt_delay: int) -> Model:
    if not corrupt_delay:
        return model
    cfg = copy.deepcopy(model.config)
    for b in cfg.blocks:
        if b.residual != "none":
            b.delay = (b.residual_delay + corrupt_delay) % b.k_eff
            break
    return Model(cfg, model.weights)


def check_block(model: Model, index: int, T: int, rng: np.random.Generator, corrupt_delay: int = 0) -> CheckResult:
    """Single block of ``model``: step outputs vs the padding-free clip output."""
    p = model.blocks[index]
    adj = model.adj
    x = rng.normal(size=(p.C_in, T, model.graph.V)).astype(DTYPE)
    ref = st_block_clip(x, adj, p, scope="frame")
    q = _stream_model(model, corrupt_delay).blocks[index]
    co = CoBlock(q, adj, V=model.graph.V)
    outs = [y for y in (co.step(x[:, t]) for t in range(T)) if y is not None]
    kind = model.config.blocks[index].spatial
    if not outs or len(outs) != ref.shape[1]:
        return CheckResult(f"block:{kind}", float("inf"), len(outs))
    diff = float(np.abs(np.stack(outs, axis=1) - ref).max())
    return CheckResult(f"block:{kind}", diff, len(outs))


def check_network(model: Model, T: int, rng: np.random.Generator, persons: int = 1,
                  corrupt_delay: int = 0) -> CheckResult:
    """Every emission of a stream vs the clip output on its aligned input window."""
    clip = rng.normal(size=(model.config.in_channels, T, model.graph.V, persons)).astype(DTYPE)
    stream_model = _stream_model(model, corrupt_delay)
    state = init_stream(stream_model, persons)
    diff = 0.0
    n = 0
    expected_index = total_delay(model.config)
    for t in range(T):
        pred = forward_step(stream_model, state, clip[:, t])
        if pred is None:
            continue
        if pred.frame_index != expected_index:
            return CheckResult("network", float("inf"), n)
        diff = max(diff, float(np.abs(pred.logits - aligned_clip_logits(model, clip, n)).max()))
        n += 1
        expected_index += model.config.network_stride
    return CheckResult("network", diff, n)


def verify(name: str, seed: int = 0, scale: str = "tiny", T: int = 64, corrupt_delay: int = 0) -> VerifyReport:
    """Equivalence suite for a reduced preset: each distinct block kind, then the full stack."""
    rng = np.random.default_rng(seed)
    cfg = reduced_preset(name, "co", scale)
    model = Model(cfg, init_random(cfg, seed))
    report = VerifyReport()
    seen = set()
    for i, b in enumerate(cfg.blocks):
        if b.spatial in seen:
            continue
        seen.add(b.spatial)
        # prefer a block with a residual so the delay is exercised
        j = next((k for k, c in enumerate(cfg.blocks) if c.spatial == b.spatial and c.residual != "none"), i)
        report.checks.append(check_block(model, j, T, rng, corrupt_delay))
    report.checks.append(check_network(model, T, rng, corrupt_delay=corrupt_delay))
    return report


@dataclass
class BenchResult:
    name: str
    variant: str
    T: int
    clip_seconds: float
    clip_preds_per_s: float
    step_seconds_per_frame: float
    step_preds_per_s: float
    frames: int
    emissions: int
    reps: int

    @property
    def speedup(self) -> float:
        return self.step_preds_per_s / self.clip_preds_per_s

    def lines(self) -> list[str]:
        return [
            f"preset          {self.name} ({self.variant} stream vs reg clip, T={self.T})",
            f"clip  mode      {self.clip_preds_per_s:10.2f} preds/s  (median {self.clip_seconds * 1e3:.1f} ms/pred)",
            f"step  mode      {self.step_preds_per_s:10.2f} preds/s  "
            f"({self.step_seconds_per_frame * 1e3:.2f} ms/frame, {self.emissions} preds over {self.frames} frames)",
            f"speedup         {self.speedup:10.1f}x  (median of {self.reps} reps)",
        ]


def bench(name: str, variant: str = "co", frames: int = 200, reps: int = 5, seed: int = 0,
          config: NetworkConfig | None = None) -> BenchResult:
    """Predictions per second: regular clip inference vs continual step inference.

    Clip mode re-runs the regular model on a full T_ref window for every
    prediction; step mode feeds ``frames`` new frames per repetition into one
    warmed-up stream. Timings are medians over ``reps`` after a warm-up pass.
    """
    if reps < 1 or frames < 1:
        raise ValueError("reps and frames must be positive")
    reg = config or preset(name, "reg")
    stream_cfg = reg if reg.is_continual else convert(reg, "co" if variant == "reg" else variant)[0]
    weights = init_random(reg, seed)
    clip_model = Model(reg, weights)
    step_model = Model(stream_cfg, weights)
    rng = np.random.default_rng(seed)
    T = reg.T_ref
    V, C0 = reg.V, reg.in_channels
    clip = rng.normal(size=(C0, T, V, 1)).astype(DTYPE)

    forward_clip(clip_model, clip)
    clip_times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        forward_clip(clip_model, clip)
        clip_times.append(time.perf_counter() - t0)
    clip_s = statistics.median(clip_times)

    state = init_stream(step_model)
    warm = total_delay(stream_cfg) + stream_cfg.network_stride
    for f in rng.normal(size=(warm, C0, V, 1)).astype(DTYPE):
        forward_step(step_model, state, f)
    rates, per_frame = [], []
    emissions = 0
    for _ in range(reps):
        batch = rng.normal(size=(frames, C0, V, 1)).astype(DTYPE)
        n = 0
        t0 = time.perf_counter()
        for f in batch:
            if forward_step(step_model, state, f) is not None:
                n += 1
        dt = time.perf_counter() - t0
        rates.append(n / dt)
        per_frame.append(dt / frames)
        emissions += n
    return BenchResult(name=name, variant=stream_cfg.variant, T=T, clip_seconds=clip_s,
                       clip_preds_per_s=1.0 / clip_s, step_seconds_per_frame=statistics.median(per_frame),
                       step_preds_per_s=statistics.median(rates), frames=frames * reps,
                       emissions=emissions, reps=reps)

