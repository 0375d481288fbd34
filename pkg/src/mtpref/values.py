"""Exact regularized value functions by backward induction.

Every table is computed layer by layer in double precision; nothing here samples.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .cmdp import Cmdp, Policy, SupportViolation, reach_all, state_kl, trajectory_kl
from .preference import TerminalPreference, regularized_preference, state_preferences


@dataclass(frozen=True, eq=False)
class TerminalReward:
    """Reward on final states, ``r[c, i]`` in [0, 1]."""

    r: np.ndarray

    def __post_init__(self):
        r = np.atleast_2d(np.array(self.r, dtype=np.float64))
        if not np.all(np.isfinite(r)) or r.min() < 0.0 or r.max() > 1.0:
            raise ValueError("terminal rewards must lie in [0, 1]")
        r.setflags(write=False)
        object.__setattr__(self, "r", r)


@dataclass(frozen=True, eq=False)
class QTable:
    q: np.ndarray  # (C, S_nt, A)
    kind: str
    alpha: float


@dataclass(frozen=True, eq=False)
class VTable:
    v: np.ndarray  # (C, S)
    kind: str
    alpha: float

    def initial(self, cmdp: Cmdp) -> float:
        """Value of the initial state, averaged over contexts."""
        return float(cmdp.context_probs @ self.v[:, 0])


def reference_kl(cmdp: Cmdp, pi: Policy) -> np.ndarray:
    """``KL(pi(.|x) || mu(.|x))`` per context and non-final state; raises on support violations."""
    kl = state_kl(pi.probs, cmdp.reference_probs)
    if np.any(np.isinf(kl)):
        c, x = np.argwhere(np.isinf(kl))[0]
        raise SupportViolation(f"policy leaves the reference support at context {c}, "
                               f"state {cmdp.state_ids[x]}")
    return kl


def generic_qv(cmdp: Cmdp, pi: Policy, reward: TerminalReward | np.ndarray, alpha: float,
               kind: str = "reward") -> tuple[QTable, VTable]:
    """Regularized Q and V of ``pi`` for a final-state reward.

    ``V(x_{H+1}) = r``, ``Q(x, y) = E[V(x')] - alpha KL(pi || mu)(x)``,
    ``V(x) = sum_y pi(y|x) Q(x, y)``.
    """
    cmdp.check_policy(pi)
    r = reward.r if isinstance(reward, TerminalReward) else np.asarray(reward, dtype=np.float64)
    kl = reference_kl(cmdp, pi)
    C, A = cmdp.n_contexts, cmdp.n_actions
    V = np.zeros((C, cmdp.n_states))
    Q = np.zeros((C, cmdp.n_nonterminal, A))
    V[:, cmdp.terminal_slice] = r
    T = cmdp.transitions
    for h in range(cmdp.horizon - 1, -1, -1):
        sl, nsl = cmdp.layer_slices[h], cmdp.layer_slices[h + 1]
        Q[:, sl] = np.einsum("cxas,cs->cxa", T[:, sl, :, nsl], V[:, nsl]) - alpha * kl[:, sl, None]
        V[:, sl] = np.einsum("cxa,cxa->cx", pi.probs[:, sl], Q[:, sl])
    return QTable(Q, kind, alpha), VTable(V, kind, alpha)


def preference_qv(cmdp: Cmdp, pref: TerminalPreference, pi: Policy, opponent: Policy,
                  alpha: float) -> tuple[QTable, VTable]:
    """Q and V of ``pi`` against ``opponent``, the opponent restarting from the initial state."""
    r = state_preferences(cmdp, pref, opponent)
    return generic_qv(cmdp, pi, r, alpha, kind="preference")


def value_difference_check(cmdp: Cmdp, pref: TerminalPreference, pi: Policy, pi_prime: Policy,
                           pi_bar: Policy, alpha: float) -> tuple[float, float]:
    """Both sides of the preference value-difference identity.

    ``lhs = P_a(pi > pi_bar) - P_a(pi' > pi_bar)``;
    ``rhs = E_{pi'}[sum_h <pi - pi', Q^{pi, pi_bar}>(x_h) + a KL(pi'||mu)(x_h) - a KL(pi||mu)(x_h)]``.
    """
    lhs = (regularized_preference(cmdp, pref, alpha, pi, pi_bar)
           - regularized_preference(cmdp, pref, alpha, pi_prime, pi_bar))
    Q, _ = preference_qv(cmdp, pref, pi, pi_bar, alpha)
    S_nt = cmdp.n_nonterminal
    rho = reach_all(cmdp, pi_prime)[:, :S_nt]
    adv = np.einsum("cxa,cxa->cx", pi.probs - pi_prime.probs, Q.q)
    local = adv + alpha * reference_kl(cmdp, pi_prime) - alpha * reference_kl(cmdp, pi)
    rhs = float(cmdp.context_probs @ (rho * local).sum(axis=1))
    return lhs, rhs


def _soft_row(log_mu: np.ndarray, q: np.ndarray, alpha: float):
    z = log_mu + q / alpha
    m = z.max(axis=-1, keepdims=True)
    w = np.exp(z - m)
    s = w.sum(axis=-1, keepdims=True)
    return alpha * (m[..., 0] + np.log(s[..., 0])), w / s


def soft_best_response(cmdp: Cmdp, reward: TerminalReward | np.ndarray, alpha: float) -> tuple[Policy, VTable]:
    """KL-regularized optimal policy for a final-state reward.

    ``V(x) = alpha log sum_y mu(y|x) exp(Q(x, y) / alpha)`` with ``Q(x, y) = E[V(x')]``,
    and ``pi*(y|x)`` proportional to ``mu(y|x) exp(Q(x, y) / alpha)``.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    r = reward.r if isinstance(reward, TerminalReward) else np.asarray(reward, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_mu = np.log(cmdp.reference_probs)
    V = np.zeros((cmdp.n_contexts, cmdp.n_states))
    pi = np.zeros_like(cmdp.reference_probs)
    V[:, cmdp.terminal_slice] = r
    T = cmdp.transitions
    for h in range(cmdp.horizon - 1, -1, -1):
        sl, nsl = cmdp.layer_slices[h], cmdp.layer_slices[h + 1]
        q = np.einsum("cxas,cs->cxa", T[:, sl, :, nsl], V[:, nsl])
        V[:, sl], pi[:, sl] = _soft_row(log_mu[:, sl], q, alpha)
    return Policy(pi), VTable(V, "soft_optimal", alpha)


def hard_best_response(cmdp: Cmdp, reward: np.ndarray) -> tuple[Policy, VTable]:
    """Unregularized optimal deterministic policy over the reference support."""
    V = np.zeros((cmdp.n_contexts, cmdp.n_states))
    pi = np.zeros_like(cmdp.reference_probs)
    V[:, cmdp.terminal_slice] = reward
    T = cmdp.transitions
    for h in range(cmdp.horizon - 1, -1, -1):
        sl, nsl = cmdp.layer_slices[h], cmdp.layer_slices[h + 1]
        q = np.einsum("cxas,cs->cxa", T[:, sl, :, nsl], V[:, nsl])
        q = np.where(cmdp.support[:, sl], q, -np.inf)
        best = np.argmax(q, axis=-1)
        V[:, sl] = np.take_along_axis(q, best[..., None], axis=-1)[..., 0]
        np.put_along_axis(pi[:, sl], best[..., None], 1.0, axis=-1)
    return Policy(pi), VTable(V, "hard_optimal", 0.0)


def exploitability(cmdp: Cmdp, pref: TerminalPreference, pi: Policy, alpha: float) -> float:
    """``max_pi' P_a(pi' > pi) - 1/2``: zero exactly at the regularized Nash equilibrium."""
    r = state_preferences(cmdp, pref, pi)
    _, V = soft_best_response(cmdp, r, alpha)
    return V.initial(cmdp) + alpha * trajectory_kl(cmdp, pi, cmdp.reference_policy, strict=True) - 0.5


def unregularized_exploitability(cmdp: Cmdp, pref: TerminalPreference, pi: Policy) -> float:
    """``max_pi' P(pi' > pi) - 1/2`` (informational)."""
    _, V = hard_best_response(cmdp, state_preferences(cmdp, pref, pi))
    return V.initial(cmdp) - 0.5


def q_magnitude_bound(cmdp: Cmdp, alpha: float) -> float:
    """``max{4 alpha H log(1/mu_min), 1}``, the Q-magnitude constant of the convergence bounds."""
    return max(4.0 * alpha * cmdp.horizon * math.log(1.0 / cmdp.mu_min), 1.0)


def shifted_q_range(cmdp: Cmdp, alpha: float) -> tuple[float, float]:
    """Analytic range of ``Q - alpha log(pi_t / mu)`` along a run with the decaying schedule."""
    log_mu_min = math.log(cmdp.mu_min)
    H = cmdp.horizon
    return alpha * (H + 1) * log_mu_min, 2.0 - alpha * H * log_mu_min


def shifted_q(cmdp: Cmdp, q: QTable, pi: Policy) -> np.ndarray:
    """``Q - alpha log(pi / mu)`` on the reference support, ``nan`` elsewhere."""
    with np.errstate(divide="ignore", invalid="ignore"):
        shift = q.alpha * (np.log(pi.probs) - np.log(cmdp.reference_probs))
        return np.where(cmdp.support, q.q - shift, np.nan)


def write_q_csv(path, cmdp: Cmdp, table: QTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["context", "layer", "state", "action", "value"])
        for c, cid in enumerate(cmdp.context_ids):
            for x in range(cmdp.n_nonterminal):
                for y, a in enumerate(cmdp.action_ids):
                    w.writerow([cid, int(cmdp.state_layer[x]), cmdp.state_ids[x], a, repr(float(table.q[c, x, y]))])


def write_v_csv(path, cmdp: Cmdp, table: VTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["context", "layer", "state", "value"])
        for c, cid in enumerate(cmdp.context_ids):
            for x in range(cmdp.n_states):
                w.writerow([cid, int(cmdp.state_layer[x]), cmdp.state_ids[x], repr(float(table.v[c, x]))])
