"""Loop-based numpy references used as independent oracles in tests.

Nothing here touches the tape or the library's layer code.
"""

import math

import numpy as np


def gelu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


def layer_norm(x, gamma, beta, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def linear(x, w, b=None):
    out = np.einsum("...i,io->...o", x, w)
    return out if b is None else out + b


def mlp(x, w1, b1, w2, b2):
    return linear(gelu(linear(x, w1, b1)), w2, b2)


def softmax_rows(z):
    out = np.empty_like(z)
    for idx in np.ndindex(z.shape[:-1]):
        row = z[idx]
        e = np.exp(row - row.max())
        out[idx] = e / e.sum()
    return out


def mha(x, wq, wk, wv, wo, heads, fused_delta=None):
    """Per-batch, per-head loop. ``fused_delta`` [B, h, N, N] is added to the logits."""
    b, n, d = x.shape
    dh = d // heads
    y = np.zeros((b, n, d))
    logits = np.zeros((b, heads, n, n))
    weights = np.zeros((b, heads, n, n))
    for bi in range(b):
        q, k, v = x[bi] @ wq, x[bi] @ wk, x[bi] @ wv
        out = np.zeros((n, d))
        for hi in range(heads):
            cols = slice(hi * dh, (hi + 1) * dh)
            z = q[:, cols] @ k[:, cols].T / math.sqrt(dh)
            logits[bi, hi] = z
            if fused_delta is not None:
                z = z + fused_delta[bi, hi]
            a = softmax_rows(z)
            weights[bi, hi] = a
            # sum_i H_i W_i^o with W_i^o the head's row block of the output projection
            out += (a @ v[:, cols]) @ wo[cols, :]
        y[bi] = out
    return y, logits, weights


def fusion_delta(z, prev, w1, b1, w2, b2):
    """Scalar loops over every (batch, query, key) cell of the 2h -> r -> h MLP."""
    bsz, h, n, _ = z.shape
    r = w1.shape[1]
    out = np.zeros_like(z)
    for bi in range(bsz):
        for i in range(n):
            for j in range(n):
                s = [z[bi, c, i, j] for c in range(h)] + [prev[bi, c, i, j] for c in range(h)]
                hidden = []
                for k in range(r):
                    acc = b1[k] + sum(s[c] * w1[c, k] for c in range(2 * h))
                    hidden.append(acc * 0.5 * (1 + math.erf(acc / math.sqrt(2))))
                for c in range(h):
                    out[bi, c, i, j] = b2[c] + sum(hidden[k] * w2[k, c] for k in range(r))
    return out


def cubic_weight(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def bicubic_direct(img, out_size):
    """Direct 2-D convolution: each output pixel sums a clamped 4x4 source neighbourhood."""
    c, h, w = img.shape
    out = np.zeros((c, out_size, out_size))
    for oy in range(out_size):
        sy = (oy + 0.5) * h / out_size - 0.5
        for ox in range(out_size):
            sx = (ox + 0.5) * w / out_size - 0.5
            y0, x0 = math.floor(sy), math.floor(sx)
            for dy in range(-1, 3):
                for dx in range(-1, 3):
                    yy, xx = y0 + dy, x0 + dx
                    wgt = cubic_weight(sy - yy) * cubic_weight(sx - xx)
                    out[:, oy, ox] += wgt * img[:, min(max(yy, 0), h - 1), min(max(xx, 0), w - 1)]
    return np.clip(out, 0, 1)
