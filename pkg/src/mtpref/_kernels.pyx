# cython: language_level=3
"""Compiled kernels for trajectory sampling, GAE and softmax policy-gradient accumulation."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def sample_paths(const double[:, :, ::1] pol_cdf, const double[:, :, :, ::1] trans_cdf,
                 const cnp.int64_t[::1] contexts, const double[:, ::1] uniforms):
    cdef Py_ssize_t n = contexts.shape[0]
    cdef Py_ssize_t horizon = uniforms.shape[1] // 2
    cdef Py_ssize_t n_actions = pol_cdf.shape[2]
    cdef Py_ssize_t n_states = trans_cdf.shape[3]
    states_arr = np.zeros((n, horizon + 1), dtype=np.int64)
    actions_arr = np.zeros((n, horizon), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] states = states_arr
    cdef cnp.int64_t[:, ::1] actions = actions_arr
    cdef Py_ssize_t i, h, j, c, x, y
    cdef double u
    with nogil:
        for i in range(n):
            c = contexts[i]
            x = 0
            for h in range(horizon):
                u = uniforms[i, 2 * h]
                y = 0
                for j in range(n_actions):
                    if u < pol_cdf[c, x, j]:
                        y = j
                        break
                u = uniforms[i, 2 * h + 1]
                j = 0
                for j in range(n_states):
                    if u < trans_cdf[c, x, y, j]:
                        break
                else:
                    j = 0
                actions[i, h] = y
                x = j
                states[i, h + 1] = x
    return states_arr, actions_arr


def gae(const double[:, ::1] rewards, const double[:, ::1] values, double lam):
    cdef Py_ssize_t n = rewards.shape[0]
    cdef Py_ssize_t horizon = rewards.shape[1]
    adv_arr = np.zeros((n, horizon))
    cdef double[:, ::1] adv = adv_arr
    cdef Py_ssize_t i, h
    cdef double running, delta, scaled
    with nogil:
        for i in range(n):
            running = 0.0
            for h in range(horizon - 1, -1, -1):
                delta = rewards[i, h] + values[i, h + 1]
                delta = delta - values[i, h]
                scaled = lam * running
                running = delta + scaled
                adv[i, h] = running
    return adv_arr


def accumulate_logprob_grad(const cnp.int64_t[::1] contexts, const cnp.int64_t[::1] states,
                            const cnp.int64_t[::1] actions, const double[::1] weights,
                            const double[:, :, ::1] probs, double[:, :, ::1] grad):
    cdef Py_ssize_t m = contexts.shape[0]
    cdef Py_ssize_t n_actions = probs.shape[2]
    cdef Py_ssize_t i, a, c, x
    cdef double w
    with nogil:
        for i in range(m):
            c = contexts[i]
            x = states[i]
            w = weights[i]
            for a in range(n_actions):
                grad[c, x, a] -= w * probs[c, x, a]
            grad[c, x, actions[i]] += w
