"""Independent reference implementations used only by the tests."""
import numpy as np


def conv_loop(x, kernel, bias=None, stride=1, dilation=1, padding=0):
    """Direct sliding-window cross-correlation; x (C_in, T, V), kernel (C_out, C_in, K)."""
    x = np.asarray(x, dtype=np.float64)
    C_in, T, V = x.shape
    C_out, _, K = kernel.shape
    xp = np.zeros((C_in, T + 2 * padding, V))
    xp[:, padding:padding + T] = x
    span = (K - 1) * dilation + 1
    outs = []
    t = 0
    while t + span <= xp.shape[1]:
        y = np.zeros((C_out, V)) if bias is None else np.repeat(np.asarray(bias, float)[:, None], V, 1)
        for o in range(C_out):
            for c in range(C_in):
                for k in range(K):
                    y[o] += kernel[o, c, k] * xp[c, t + k * dilation]
        outs.append(y)
        t += stride
    return np.stack(outs, axis=1) if outs else np.zeros((C_out, 0, V))


def run_stream(step, frames):
    """Feed (C, T, V) frame by frame; return emitted outputs stacked on axis 1."""
    outs = [o for o in (step(frames[:, t]) for t in range(frames.shape[1])) if o is not None]
    return np.stack(outs, axis=1) if outs else None
