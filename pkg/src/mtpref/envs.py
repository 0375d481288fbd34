"""Seeded desk-scale environments."""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .cmdp import Cmdp, build_cmdp
from .preference import TerminalPreference, bt_preference, matrix_preference

MAX_HORIZON = 6
MAX_STATES = 8
MAX_ACTIONS = 6
MAX_CONTEXTS = 8


def _check_range(name, value, lo, hi):
    if not lo <= value <= hi:
        raise ValueError(f"{name} = {value} outside [{lo}, {hi}]")


def gen_random_cmdp(seed: int, H: int, states_per_layer: int, num_actions: int, num_contexts: int = 1,
                    perturbation: float = 0.0) -> tuple[Cmdp, TerminalPreference]:
    """Random layered CMDP with a uniform reference policy and a matrix preference.

    Each transition row is a symmetric Dirichlet(1) draw over a random subset of at
    least two successors; any next-layer state left without an incoming row is attached
    to a random row so that every state is reachable under ``mu`` in every context.
    Preferences start as ``sigmoid(s_i - s_j)`` of latent scores; ``perturbation``
    adds uniform noise in ``[-eps, eps]`` to the upper triangle (clipped to [0, 1]),
    which generally breaks the Bradley-Terry structure.
    """
    _check_range("H", H, 1, MAX_HORIZON)
    _check_range("states_per_layer", states_per_layer, 1, MAX_STATES)
    _check_range("num_actions", num_actions, 1, MAX_ACTIONS)
    _check_range("num_contexts", num_contexts, 1, MAX_CONTEXTS)
    if perturbation < 0:
        raise ValueError("perturbation must be non-negative")
    rng = np.random.default_rng(seed)
    layers = [["x1"]] + [[f"h{h}s{i}" for i in range(states_per_layer)] for h in range(2, H + 2)]
    sizes = [len(layer) for layer in layers]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    S, S_nt, A, C = offsets[-1], offsets[-2], num_actions, num_contexts
    T = np.zeros((C, S_nt, A, S))
    for c in range(C):
        for h in range(H):
            n_next = sizes[h + 1]
            rows = [(x, y) for x in range(offsets[h], offsets[h + 1]) for y in range(A)]
            succ = {}
            for row in rows:
                k = int(rng.integers(min(2, n_next), n_next + 1))
                succ[row] = set(rng.choice(n_next, size=k, replace=False).tolist())
            covered = set().union(*succ.values())
            for s in range(n_next):
                if s not in covered:
                    succ[rows[int(rng.integers(len(rows)))]].add(s)
            for (x, y), targets in succ.items():
                targets = sorted(targets)
                w = rng.dirichlet(np.ones(len(targets)))
                T[c, x, y, offsets[h + 1] + np.array(targets)] = w
    mu = np.full((C, S_nt, A), 1.0 / A)
    ctx_probs = rng.dirichlet(np.ones(C)) if C > 1 else np.ones(1)
    cmdp = build_cmdp([f"c{c}" for c in range(C)], ctx_probs, layers, [f"a{y}" for y in range(A)], T, mu)
    scores = rng.normal(size=(C, sizes[-1]))
    upper = expit(scores[:, :, None] - scores[:, None, :])
    if perturbation > 0:
        upper = np.clip(upper + rng.uniform(-perturbation, perturbation, size=upper.shape), 0.0, 1.0)
    return cmdp, matrix_preference(upper)


CHAIN_ACTIONS = ("raise", "hold", "concede")


def gen_bt_chain(seed: int, H: int, prices=(0.0, 1.0, 2.0, 3.0, 4.0)) -> tuple[Cmdp, TerminalPreference]:
    """Negotiation chain: the agent pushes an offer level up or down over ``H`` turns.

    Levels index ``prices`` (raw sale-price units, so one level is one unit of
    Bradley-Terry score); the deal starts at the middle level.  ``raise`` moves up
    one level unless the counterpart resists, ``hold`` keeps the level unless the
    counterpart pushes it down, ``concede`` moves down one level.  Resistance
    probabilities are drawn per (turn, level) from ``seed``.  Final states carry the
    price of their level as a Bradley-Terry reward.
    """
    _check_range("H", H, 1, MAX_HORIZON)
    prices = np.asarray(prices, dtype=np.float64)
    K = len(prices)
    if K < 2:
        raise ValueError("need at least two price levels")
    rng = np.random.default_rng(seed)
    start = K // 2
    levels = [[start]] + [list(range(max(0, start - h), min(K - 1, start + h) + 1)) for h in range(1, H + 1)]
    layers = [[f"t{h + 1}p{k}" for k in lv] for h, lv in enumerate(levels)]
    sizes = [len(lv) for lv in levels]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    S, S_nt = offsets[-1], offsets[-2]
    T = np.zeros((1, S_nt, len(CHAIN_ACTIONS), S))
    for h in range(H):
        nxt = {k: offsets[h + 1] + i for i, k in enumerate(levels[h + 1])}
        for i, k in enumerate(levels[h]):
            x = offsets[h] + i
            up, down = min(k + 1, K - 1), max(k - 1, 0)
            p_up = rng.uniform(0.5, 0.9)
            p_hold = rng.uniform(0.6, 0.95)
            rows = (
                ((up, p_up), (k, 1.0 - p_up)),
                ((k, p_hold), (down, 1.0 - p_hold)),
                ((down, 1.0),),
            )
            for y, row in enumerate(rows):
                for level, p in row:
                    T[0, x, y, nxt[level]] += p
    mu = np.full((1, S_nt, len(CHAIN_ACTIONS)), 1.0 / len(CHAIN_ACTIONS))
    cmdp = build_cmdp(["deal"], [1.0], layers, CHAIN_ACTIONS, T, mu)
    rewards = prices[np.array(levels[-1])][None, :]
    return cmdp, bt_preference(rewards)


def chain_rewards(pref: TerminalPreference) -> np.ndarray:
    """Bradley-Terry scores of a chain rescaled to [0, 1] (lowest price 0, highest 1).

    This is the reward handed to reward-based baselines, which need values in [0, 1].
    """
    if pref.rewards is None:
        raise ValueError("preference has no Bradley-Terry rewards")
    r = pref.rewards
    lo, hi = r.min(), r.max()
    if hi == lo:
        return np.zeros_like(r)
    return (r - lo) / (hi - lo)


def single_turn_instance(p_win: float = 0.8) -> tuple[Cmdp, TerminalPreference]:
    """Horizon-1, two-action instance: action ``a`` lands on ``xA``, ``b`` on ``xB``, ``P(xA > xB) = p_win``."""
    T = np.zeros((1, 1, 2, 3))
    T[0, 0, 0, 1] = 1.0
    T[0, 0, 1, 2] = 1.0
    cmdp = build_cmdp(["c"], [1.0], [["x1"], ["xA", "xB"]], ["a", "b"], T, np.full((1, 1, 2), 0.5))
    return cmdp, matrix_preference(np.array([[[0.5, p_win], [1 - p_win, 0.5]]]))
