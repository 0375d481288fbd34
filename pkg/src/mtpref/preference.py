"""Final-state preference models and policy-level preference quantities."""
from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path

import numpy as np
from scipy.special import expit

from .cmdp import Cmdp, Policy, ValidationError, reach_all, terminal_marginals, trajectory_kl

SYMMETRY_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TerminalPreference:
    """``matrix[c, i, j]`` is the probability final state ``i`` beats final state ``j``.

    ``rewards`` is kept for the Bradley-Terry form (``form == "bt"``).
    """

    form: str
    matrix: np.ndarray
    rewards: np.ndarray | None = None

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if self.rewards is not None:
            r = np.array(self.rewards, dtype=np.float64)
            r.setflags(write=False)
            object.__setattr__(self, "rewards", r)

    @property
    def n_contexts(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_terminal(self) -> int:
        return self.matrix.shape[1]

    def check(self, cmdp: Cmdp) -> None:
        if self.matrix.shape != (cmdp.n_contexts, cmdp.n_terminal, cmdp.n_terminal):
            raise ValidationError([f"preference shape {self.matrix.shape} does not match the model's "
                                   f"{cmdp.n_contexts} contexts and {cmdp.n_terminal} final states"])


def _complete(upper: np.ndarray) -> np.ndarray:
    """Fill the lower triangle as ``1 - upper`` and the diagonal with 0.5."""
    n = upper.shape[-1]
    iu = np.triu_indices(n, k=1)
    m = np.full(upper.shape, 0.5)
    m[..., iu[0], iu[1]] = upper[..., iu[0], iu[1]]
    m[..., iu[1], iu[0]] = 1.0 - upper[..., iu[0], iu[1]]
    return m


def matrix_preference(upper) -> TerminalPreference:
    """Build from a ``(C, n, n)`` array; only the strict upper triangle is read."""
    upper = np.asarray(upper, dtype=np.float64)
    if upper.ndim != 3 or upper.shape[1] != upper.shape[2]:
        raise ValidationError([f"preference matrix must have shape (C, n, n), got {upper.shape}"])
    iu = np.triu_indices(upper.shape[1], k=1)
    vals = upper[:, iu[0], iu[1]]
    if not np.all(np.isfinite(vals)) or np.any(vals < 0) or np.any(vals > 1):
        raise ValidationError(["preference probabilities must lie in [0, 1]"])
    return TerminalPreference("matrix", _complete(upper))


def bt_preference(rewards) -> TerminalPreference:
    """Bradley-Terry preferences ``sigmoid(r(i) - r(j))`` from final-state rewards ``(C, n)``."""
    r = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    if not np.all(np.isfinite(r)):
        raise ValidationError(["Bradley-Terry rewards must be finite"])
    upper = expit(r[:, :, None] - r[:, None, :])
    return TerminalPreference("bt", _complete(upper), rewards=r)


def validate_preference(raw, cmdp: Cmdp) -> TerminalPreference:
    """Parse a preference document holding either ``matrix`` or ``bt_rewards`` entries."""
    if not isinstance(raw, dict):
        if isinstance(raw, Path) or not str(raw).lstrip().startswith("{"):
            raw = Path(raw).read_text()
        raw = json.loads(raw, parse_float=Decimal)
    ctx = {c: i for i, c in enumerate(cmdp.context_ids)}
    term = {s: i for i, s in enumerate(cmdp.layers[-1])}
    C, n = cmdp.n_contexts, cmdp.n_terminal
    violations = []
    if ("matrix" in raw) == ("bt_rewards" in raw):
        raise ValidationError(["preference document needs exactly one of 'matrix' or 'bt_rewards'"])
    if "bt_rewards" in raw:
        r = np.full((C, n), np.nan)
        for e in raw["bt_rewards"]:
            try:
                r[ctx[e["context"]], term[e["state"]]] = float(e["reward"])
            except KeyError as exc:
                violations.append(f"bt_rewards entry refers to unknown id {exc}")
        if np.isnan(r).any():
            violations.append("bt_rewards must cover every (context, final state)")
        if violations:
            raise ValidationError(violations)
        return bt_preference(r)
    upper = np.full((C, n, n), np.nan)
    for e in raw["matrix"]:
        try:
            c, i, j = ctx[e["context"]], term[e["x"]], term[e["x_prime"]]
        except KeyError as exc:
            violations.append(f"matrix entry refers to unknown id {exc}")
            continue
        p = float(e["prob"])
        if i == j:
            if p != 0.5:
                violations.append(f"diagonal entry ({e['context']}, {e['x']}) must be 0.5")
            continue
        if i > j:
            violations.append(f"matrix entry ({e['context']}, {e['x']}, {e['x_prime']}) is below the diagonal; "
                              "give the upper triangle only")
            continue
        upper[c, i, j] = p
    iu = np.triu_indices(n, k=1)
    if np.isnan(upper[:, iu[0], iu[1]]).any():
        violations.append("matrix must cover the full upper triangle for every context")
    if violations:
        raise ValidationError(violations)
    return matrix_preference(upper)


def preference_to_dict(cmdp: Cmdp, pref: TerminalPreference) -> dict:
    names = cmdp.layers[-1]
    if pref.form == "bt":
        return {"bt_rewards": [{"context": cid, "state": s, "reward": float(pref.rewards[c, i])}
                               for c, cid in enumerate(cmdp.context_ids) for i, s in enumerate(names)]}
    n = len(names)
    return {"matrix": [{"context": cid, "x": names[i], "x_prime": names[j], "prob": float(pref.matrix[c, i, j])}
                       for c, cid in enumerate(cmdp.context_ids)
                       for i in range(n) for j in range(i + 1, n)]}


def state_preferences(cmdp: Cmdp, pref: TerminalPreference, opponent: Policy) -> np.ndarray:
    """``P(x > opponent)`` for every context and final state ``x``, shape ``(C, n_terminal)``."""
    d = terminal_marginals(cmdp, opponent)
    return np.einsum("cij,cj->ci", pref.matrix, d)


def state_vs_policy_preference(cmdp: Cmdp, pref: TerminalPreference, x, opponent: Policy, context=0) -> float:
    """Probability that final state ``x`` (global index or id) beats a trajectory of ``opponent``."""
    c = cmdp.context_index(context)
    xi = cmdp.state_index[x] if not isinstance(x, (int, np.integer)) else int(x)
    tsl = cmdp.terminal_slice
    if not tsl.start <= xi < tsl.stop:
        raise ValueError(f"state {x!r} is not a final state")
    d = reach_all(cmdp, opponent)[c, tsl]
    return float(pref.matrix[c, xi - tsl.start] @ d)


def policy_preference(cmdp: Cmdp, pref: TerminalPreference, pi: Policy, pi_prime: Policy) -> float:
    """``P(pi > pi_prime)``, averaged over the context distribution."""
    d1 = terminal_marginals(cmdp, pi)
    d2 = terminal_marginals(cmdp, pi_prime)
    per_ctx = np.einsum("ci,cij,cj->c", d1, pref.matrix, d2)
    return float(cmdp.context_probs @ per_ctx)


def regularized_preference(cmdp: Cmdp, pref: TerminalPreference, alpha: float, pi: Policy, pi_prime: Policy) -> float:
    """``P(pi > pi') - alpha KL(pi || mu) + alpha KL(pi' || mu)`` over trajectory distributions."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    mu = cmdp.reference_policy
    return (policy_preference(cmdp, pref, pi, pi_prime)
            - alpha * trajectory_kl(cmdp, pi, mu, strict=True)
            + alpha * trajectory_kl(cmdp, pi_prime, mu, strict=True))
