"""Independent straight-line re-implementations used as test oracles."""

import math

import numpy as np


def softmax_list(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def expert_oracle(expert, x):
    d, f = expert.w_up.shape
    hidden = []
    for j in range(f):
        a = sum(x[i] * expert.w_up[i, j] for i in range(d))
        g = sum(x[i] * expert.w_gate[i, j] for i in range(d))
        hidden.append(a * g / (1.0 + math.exp(-g)))
    return [sum(hidden[j] * expert.w_down[j, o] for j in range(f)) for o in range(d)]


def moe_oracle(weights, layer, x):
    """y = sum_shared g_i E_i(x) + sum_{j in topk routed} g_j E_j(x), by explicit loops."""
    cfg = weights.config
    lw = weights.layers[layer]
    x = [float(v) for v in x]
    logits = [sum(x[i] * lw.router[i, e] for i in range(cfg.d_model)) for e in range(cfg.n_experts)]
    g = softmax_list(logits)
    m = cfg.n_shared
    order = sorted(range(cfg.n_routed), key=lambda j: (-g[m + j], j))
    chosen = order[:cfg.top_k]
    y = [0.0] * cfg.d_model
    for i in range(m):
        out = expert_oracle(lw.shared[i], x)
        y = [a + g[i] * b for a, b in zip(y, out)]
    for j in chosen:
        out = expert_oracle(lw.routed[j], x)
        y = [a + g[m + j] * b for a, b in zip(y, out)]
    return np.array(y), sorted(chosen), g


def nll_oracle(logprobs, tokens):
    total = 0.0
    for i in range(1, len(tokens)):
        total -= float(logprobs[i - 1][tokens[i]])
    return total / (len(tokens) - 1)


def weighted_gram_oracle(x, c):
    dim = x.shape[1]
    h = np.zeros((dim, dim))
    for xi, ci in zip(x, c):
        h += ci * np.outer(xi, xi)
    return h


def weighted_loss_oracle(w, w_hat, x, c):
    total = 0.0
    for xi, ci in zip(x, c):
        r = (w - w_hat) @ xi
        total += ci * float(r @ r)
    return total


def awq_grid_oracle(w, x, weights, grid_size, spec):
    """Loss at every grid exponent, recomputed with explicit loops."""
    act = np.abs(x).mean(axis=0)
    losses = []
    for alpha in np.linspace(0, 1, grid_size):
        s = np.ones(x.shape[1])
        for j in range(x.shape[1]):
            if act[j] > 0:
                s[j] = min(max(act[j] ** alpha, 1e-4), 1e4)
        ws = w * s
        steps = np.abs(ws).max(axis=1) / spec.q_max
        q = np.clip(np.round(ws / steps[:, None]), -spec.q_max, spec.q_max) * steps[:, None]
        eff = q / s
        loss = 0.0
        for i, xi in enumerate(x):
            loss += (1.0 if weights is None else weights[i]) * np.sum(((w - eff) @ xi) ** 2)
        losses.append(loss)
    return losses
