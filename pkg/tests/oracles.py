"""Independent reference implementations used as test oracles (plain loops, no engine code)."""

import numpy as np


def conv1d_loops(x, w, b, stride=1, dilation=1, pad_left=0, pad_right=0):
    """x [C_in, L], w [C_out, C_in, K], b [C_out] -> [C_out, L_out]; zero padding."""
    c_in, length = x.shape
    c_out, _, k = w.shape
    l_out = (length + pad_left + pad_right - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((c_out, l_out))
    for o in range(c_out):
        for t in range(l_out):
            acc = b[o] if b is not None else 0.0
            for c in range(c_in):
                for j in range(k):
                    pos = t * stride - pad_left + j * dilation
                    if 0 <= pos < length:
                        acc += w[o, c, j] * x[c, pos]
            out[o, t] = acc
    return out


def equispaced_blocks(x, w, b):
    """Single-channel equispaced conv as reshape-then-dot: x [L], w [K], L divisible by K."""
    k = len(w)
    return x.reshape(-1, k) @ w + b


def weighted_sum(planes, weights, bias):
    """planes [B, H, W]; explicit per-element channel sum."""
    nb, h, w = planes.shape
    out = np.full((h, w), float(bias))
    for i in range(h):
        for j in range(w):
            for c in range(nb):
                out[i, j] += weights[c] * planes[c, i, j]
    return out


def adam_scalar(w0, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    w, m, v = w0, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        w = w - lr * mhat / (vhat ** 0.5 + eps)
    return w


def metrics_loops(pred, target):
    se = ae = 0.0
    n = 0
    for idx in np.ndindex(pred.shape):
        d = pred[idx] - target[idx]
        se += d * d
        ae += abs(d)
        n += 1
    return se / n, ae / n
