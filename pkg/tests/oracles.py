"""Slow, loop-based reference implementations used only by the tests.

Nothing here calls into the package; each function spells out its
definition with explicit Python loops.
"""

import math

import numpy as np


def conv2d_direct(x, kernels, bias=None):
    """Zero-padded 'same' convolution of (H, W, Cin) by (k, k, Cin, Cout)."""
    h, w, cin = x.shape
    k, _, _, cout = kernels.shape
    p = k // 2
    out = np.zeros((h, w, cout))
    for r in range(h):
        for c in range(w):
            for o in range(cout):
                acc = 0.0
                for i in range(k):
                    for j in range(k):
                        rr, cc = r + i - p, c + j - p
                        if 0 <= rr < h and 0 <= cc < w:
                            for ch in range(cin):
                                acc += x[rr, cc, ch] * kernels[i, j, ch, o]
                if bias is not None:
                    acc += bias[o]
                out[r, c, o] = acc
    return out


def global_pool_direct(x, mode):
    h, w, c = x.shape
    out = np.zeros((1, 1, c))
    for ch in range(c):
        vals = [x[r, col, ch] for r in range(h) for col in range(w)]
        out[0, 0, ch] = sum(vals) / len(vals) if mode == "avg" else max(vals)
    return out


def channel_pool_direct(x, mode):
    h, w, c = x.shape
    out = np.zeros((h, w, 1))
    for r in range(h):
        for col in range(w):
            vals = [x[r, col, ch] for ch in range(c)]
            out[r, col, 0] = sum(vals) / c if mode == "avg" else max(vals)
    return out


def linear_direct(vec, weights, bias):
    d_in, d_out = weights.shape
    return np.array([sum(vec[i] * weights[i, o] for i in range(d_in)) + bias[o] for o in range(d_out)])


def softmax_direct(logits):
    exps = [math.exp(v) for v in logits]
    total = sum(exps)
    return np.array([e / total for e in exps])


def broadcast_concat_direct(visual, attrs):
    h, w, c = visual.shape
    out = np.zeros((h, w, c + len(attrs)))
    for r in range(h):
        for col in range(w):
            for ch in range(c):
                out[r, col, ch] = visual[r, col, ch]
            for a, v in enumerate(attrs):
                out[r, col, c + a] = v
    return out


def sigmoid_scalar(v):
    return 1.0 / (1.0 + math.exp(-v))


def cam_direct(hybrid, weight, bias):
    """Channel attention map from loops: sigmoid(MLP(avg) + MLP(max))."""
    avg = global_pool_direct(hybrid, "avg")[0, 0]
    mx = global_pool_direct(hybrid, "max")[0, 0]
    a = linear_direct(avg, weight, bias)
    m = linear_direct(mx, weight, bias)
    return np.array([sigmoid_scalar(a[o] + m[o]) for o in range(len(a))]).reshape(1, 1, -1)


def psam_direct(hybrid, kernels, biases):
    """Spatial attention map from loops over {k: kernel (k,k,2,1)} and {k: bias (1,)}."""
    pooled = np.concatenate([channel_pool_direct(hybrid, "avg"), channel_pool_direct(hybrid, "max")], axis=-1)
    total = np.zeros(pooled.shape[:2] + (1,))
    for k in kernels:
        total += conv2d_direct(pooled, kernels[k], biases[k])
    h, w, _ = total.shape
    out = np.zeros_like(total)
    for r in range(h):
        for c in range(w):
            out[r, c, 0] = sigmoid_scalar(total[r, c, 0])
    return out


def adam_scalar(x0, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Hand-stepped scalar Adam; returns the iterates after each step."""
    x, m, v, out = x0, 0.0, 0.0, []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(x)
    return out
