import numpy as np
import pytest

from costgcn.blocks import AgcParams, BatchNorm, BlockParams, GcParams, SsaParams
from costgcn.graph import adjacency_set, build_skeleton

PATH5 = {"V": 5, "edges": [[0, 1], [1, 2], [2, 3], [3, 4]], "center": 2}


def rand_bn(rng, C):
    return BatchNorm(rng.normal(1, 0.1, C).astype(np.float32), rng.normal(0, 0.1, C).astype(np.float32),
                     rng.normal(0, 0.1, C).astype(np.float32), rng.uniform(0.5, 1.5, C).astype(np.float32))


def rand_spatial(rng, kind, C_in, C_out, V, heads=2):
    f = lambda *s: (rng.normal(size=s) / np.sqrt(s[-1])).astype(np.float32)
    res = None if C_in == C_out else f(C_out, C_in)
    if kind == "gc":
        return GcParams(f(3, C_out, C_in), rng.uniform(0.5, 1.5, (3, V, V)).astype(np.float32), rand_bn(rng, C_out), res)
    if kind == "agc":
        ce = max(C_out // 4, 1)
        return AgcParams(f(3, C_out, C_in), (0.1 * rng.normal(size=(3, V, V))).astype(np.float32),
                         f(3, ce, C_in), f(3, ce, C_in), rand_bn(rng, C_out), res)
    if kind == "ssa":
        dk, dv = 3, 4
        return SsaParams(f(heads, dk, C_in), f(heads, dk, C_in), f(heads, dv, C_in), f(C_out, heads * dv),
                         rand_bn(rng, C_out), res)
    raise ValueError(kind)


def rand_block(rng, kind, C_in, C_out, V, K=3, stride=1, dilation=1, padding=0, delay=None, residual=None):
    if residual is None:
        residual = "identity" if C_in == C_out else "linear"
    res = (rng.normal(size=(C_out, C_in)) / np.sqrt(C_in)).astype(np.float32) if residual == "linear" else None
    return BlockParams(
        spatial=rand_spatial(rng, kind, C_in, C_out, V),
        tcn_kernel=(rng.normal(size=(C_out, C_out, K)) / np.sqrt(C_out * K)).astype(np.float32),
        tcn_bias=rng.normal(0, 0.1, C_out).astype(np.float32),
        tcn_bn=rand_bn(rng, C_out), residual=residual, res=res,
        stride=stride, dilation=dilation, padding=padding, delay=delay)


@pytest.fixture
def path5_adj():
    return adjacency_set(build_skeleton(PATH5))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; echoed now and in the run summary."""
    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} -- {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
