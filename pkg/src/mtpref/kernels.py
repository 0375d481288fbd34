"""Hot-loop kernels with a compiled backend and a numpy fallback.

The Cython extension ``mtpref._kernels`` is used when it was built; otherwise, or when
``MTPREF_PURE_PYTHON=1`` is set, the numpy versions in ``_kernels_py`` are used.
``BACKEND`` names the active implementation.
"""
import os

import numpy as np

from . import _kernels_py

_compiled = None
if not os.environ.get("MTPREF_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"


def backends() -> dict:
    """Every available implementation keyed by name (for benchmarks and parity tests)."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def row_cdf(probs: np.ndarray) -> np.ndarray:
    """Cumulative sums along the last axis, with each non-empty row closed at exactly 1."""
    cdf = np.cumsum(probs, axis=-1)
    total = cdf[..., -1:]
    with np.errstate(invalid="ignore", divide="ignore"):
        cdf = np.where(total > 0, cdf / np.where(total > 0, total, 1.0), 0.0)
    last = probs.shape[-1] - 1 - np.argmax(probs[..., ::-1] > 0, axis=-1)
    np.put_along_axis(cdf, last[..., None], np.where(total > 0, 1.0, 0.0), axis=-1)
    after = np.arange(probs.shape[-1]) > last[..., None]
    cdf = np.where(after & (total > 0), 1.0, cdf)
    return np.ascontiguousarray(cdf)


def sample_paths(pol_cdf, trans_cdf, contexts, uniforms):
    """Sample state/action index paths from inverse-CDF uniforms, two per step."""
    return _impl.sample_paths(np.ascontiguousarray(pol_cdf), np.ascontiguousarray(trans_cdf),
                              np.ascontiguousarray(contexts, dtype=np.int64),
                              np.ascontiguousarray(uniforms))


def gae(rewards, values, lam: float):
    """Generalized advantage estimates; ``values`` carries the terminal bootstrap in its last column."""
    return _impl.gae(np.ascontiguousarray(rewards, dtype=np.float64),
                     np.ascontiguousarray(values, dtype=np.float64), float(lam))


def accumulate_logprob_grad(contexts, states, actions, weights, probs, grad):
    """In place: ``grad[c, x] += w * (onehot(y) - probs[c, x])`` for every visited step."""
    _impl.accumulate_logprob_grad(np.ascontiguousarray(contexts, dtype=np.int64),
                                  np.ascontiguousarray(states, dtype=np.int64),
                                  np.ascontiguousarray(actions, dtype=np.int64),
                                  np.ascontiguousarray(weights, dtype=np.float64),
                                  np.ascontiguousarray(probs), grad)
