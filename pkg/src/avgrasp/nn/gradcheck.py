"""Finite-difference verification of the hand-written backward passes."""

from __future__ import annotations

import numpy as np

from .layers import ReLU
from .network import Network


def _relu_layers(net: Network):
    out = []
    for m in net._modules:
        stack = list(m.layers)
        while stack:
            l = stack.pop()
            if hasattr(l, "layers"):
                stack.extend(l.layers)
            elif hasattr(l, "conv1"):
                stack.extend([l.conv1, l.bn1, l.act1, l.conv2, l.bn2, l.act_out])
                if l.skip_conv is not None:
                    stack.extend([l.skip_conv, l.skip_bn])
            elif isinstance(l, ReLU):
                out.append(l)
    return out


def _loss_and_pattern(net: Network, relus, state, view, pixel, target):
    q = net.forward(state, view, training=True)
    diff = q[0, 0, pixel[0], pixel[1]] - target
    pattern = [l._mask.copy() for l in relus if l._mask is not None]
    pattern.append(np.sign(diff))
    return float(np.abs(diff)), pattern


def _same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(net: Network, state, view, pixel, target,
               h: float = 1e-3, max_params_per_array: int = 6, rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Evaluates a subset of entries from every parameter array with step h in
    both directions. Entries whose perturbation flips a ReLU activation
    pattern (or the sign of the residual) are skipped: the loss is not
    differentiable across such a kink, so the difference quotient measures
    nothing there. Build the network with dtype float64.
    """
    rng = rng or np.random.default_rng(0)
    state = np.asarray(state, dtype=net.dtype)
    view = np.asarray(view, dtype=net.dtype)
    relus = _relu_layers(net)

    q = net.forward(state, view, training=True)
    diff = q[0, 0, pixel[0], pixel[1]] - target
    dq = np.zeros_like(q)
    dq[0, 0, pixel[0], pixel[1]] = np.sign(diff)
    net.backward(dq)
    analytic = [g.copy() for g in net.gradients()]

    worst = 0.0
    checked = 0
    for p, g in zip(net.parameters(), analytic):
        flat_idx = rng.choice(p.size, size=min(max_params_per_array, p.size), replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape)
            orig = p[idx]
            p[idx] = orig + h
            lp, pat_p = _loss_and_pattern(net, relus, state, view, pixel, target)
            p[idx] = orig - h
            lm, pat_m = _loss_and_pattern(net, relus, state, view, pixel, target)
            p[idx] = orig
            if not _same_pattern(pat_p, pat_m):
                continue
            numeric = (lp - lm) / (2 * h)
            denom = max(abs(numeric), abs(g[idx]), 1e-8)
            worst = max(worst, abs(numeric - g[idx]) / denom)
            checked += 1
    if checked == 0:
        raise RuntimeError("no differentiable parameters sampled")
    return worst
