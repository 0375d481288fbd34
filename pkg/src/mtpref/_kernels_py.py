"""Pure numpy implementations of the sampling and gradient kernels.

Sampling and GAE mirror the floating-point operations of ``_kernels.pyx``, so both
backends produce identical paths and advantages for the same inputs.  Gradient
accumulation sums in a different order and agrees to rounding.
"""
import numpy as np


def sample_paths(pol_cdf, trans_cdf, contexts, uniforms):
    n = contexts.shape[0]
    horizon = uniforms.shape[1] // 2
    states = np.zeros((n, horizon + 1), dtype=np.int64)
    actions = np.zeros((n, horizon), dtype=np.int64)
    x = np.zeros(n, dtype=np.int64)
    for h in range(horizon):
        cdf = pol_cdf[contexts, x]
        y = np.argmax(uniforms[:, 2 * h, None] < cdf, axis=1)
        cdf = trans_cdf[contexts, x, y]
        x = np.argmax(uniforms[:, 2 * h + 1, None] < cdf, axis=1)
        actions[:, h] = y
        states[:, h + 1] = x
    return states, actions


def gae(rewards, values, lam):
    n, horizon = rewards.shape
    adv = np.zeros((n, horizon))
    running = np.zeros(n)
    for h in range(horizon - 1, -1, -1):
        delta = rewards[:, h] + values[:, h + 1] - values[:, h]
        running = delta + lam * running
        adv[:, h] = running
    return adv


def accumulate_logprob_grad(contexts, states, actions, weights, probs, grad):
    np.add.at(grad, (contexts, states), -weights[:, None] * probs[contexts, states])
    np.add.at(grad, (contexts, states, actions), weights)
