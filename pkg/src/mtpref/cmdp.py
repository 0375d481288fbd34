"""Layered finite-horizon contextual MDPs, tabular policies and exact trajectory computations.

States are indexed globally: layer 1 holds the single initial state (index 0), layer
``H + 1`` holds the final states.  All tables are dense numpy arrays:

* ``transitions[c, x, y, x']`` for non-final ``x`` (shape ``(C, S_nt, A, S)``)
* ``policy.probs[c, x, y]`` for non-final ``x`` (shape ``(C, S_nt, A)``)
* reach probabilities ``rho[c, x]`` over all states (shape ``(C, S)``)
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels

ROW_TOL = Decimal("1e-12")
FLOAT_ROW_TOL = 1e-12
DEFAULT_ENUMERATION_CAP = 10**6


class ValidationError(ValueError):
    """Raised with every violated model invariant and its location."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("invalid model:\n  " + "\n  ".join(self.violations))


class DimensionMismatch(ValueError):
    pass


class ExplosionError(RuntimeError):
    pass


class SupportViolation(ValueError):
    pass


class DegenerateRow(FloatingPointError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Policy:
    """Action distribution for every (context, non-final state)."""

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", _readonly(self.probs))

    @property
    def shape(self):
        return self.probs.shape

    def log(self) -> np.ndarray:
        """Elementwise log with ``-inf`` on zero entries."""
        with np.errstate(divide="ignore"):
            return np.log(self.probs)

    def row(self, context: int, state: int) -> np.ndarray:
        return self.probs[context, state]


@dataclass(frozen=True, eq=False)
class Cmdp:
    context_ids: tuple
    context_probs: np.ndarray
    layers: tuple
    action_ids: tuple
    transitions: np.ndarray
    reference_probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "context_probs", _readonly(self.context_probs))
        object.__setattr__(self, "transitions", _readonly(self.transitions))
        object.__setattr__(self, "reference_probs", _readonly(self.reference_probs))

    @property
    def horizon(self) -> int:
        return len(self.layers) - 1

    @property
    def n_contexts(self) -> int:
        return len(self.context_ids)

    @property
    def n_actions(self) -> int:
        return len(self.action_ids)

    @cached_property
    def layer_sizes(self) -> tuple:
        return tuple(len(layer) for layer in self.layers)

    @cached_property
    def layer_slices(self) -> tuple:
        """Global index slice of each layer, ``layer_slices[0]`` is the initial layer."""
        bounds = np.concatenate([[0], np.cumsum(self.layer_sizes)])
        return tuple(slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]))

    @property
    def n_states(self) -> int:
        return sum(self.layer_sizes)

    @property
    def n_nonterminal(self) -> int:
        return self.n_states - self.layer_sizes[-1]

    @property
    def terminal_slice(self) -> slice:
        return self.layer_slices[-1]

    @property
    def n_terminal(self) -> int:
        return self.layer_sizes[-1]

    @cached_property
    def state_ids(self) -> tuple:
        return tuple(s for layer in self.layers for s in layer)

    @cached_property
    def state_index(self) -> dict:
        return {s: i for i, s in enumerate(self.state_ids)}

    @cached_property
    def state_layer(self) -> np.ndarray:
        """Layer number (1-based) of each global state."""
        return np.repeat(np.arange(1, self.horizon + 2), self.layer_sizes)

    @property
    def reference_policy(self) -> Policy:
        return Policy(self.reference_probs)

    @cached_property
    def support(self) -> np.ndarray:
        return self.reference_probs > 0

    @cached_property
    def mu_min(self) -> float:
        """Smallest positive reference probability."""
        return float(self.reference_probs[self.support].min())

    @cached_property
    def transition_cdf(self) -> np.ndarray:
        return kernels.row_cdf(self.transitions)

    def uniform_policy(self) -> Policy:
        """Uniform over the reference support in every state."""
        w = self.support.astype(np.float64)
        return Policy(w / w.sum(axis=-1, keepdims=True))

    def check_policy(self, policy: Policy) -> None:
        expected = (self.n_contexts, self.n_nonterminal, self.n_actions)
        if policy.probs.shape != expected:
            raise DimensionMismatch(f"policy shape {policy.probs.shape} does not match model {expected}")

    def context_index(self, context) -> int:
        if isinstance(context, (int, np.integer)):
            if not 0 <= context < self.n_contexts:
                raise IndexError(f"context {context} out of range")
            return int(context)
        return self.context_ids.index(context)


# --------------------------------------------------------------------------- construction


def build_cmdp(context_ids, context_probs, layers, action_ids, transitions, reference_probs) -> Cmdp:
    """Validate dense arrays and return a :class:`Cmdp`.

    Raises :class:`ValidationError` listing every violation found.
    """
    context_probs = np.asarray(context_probs, dtype=np.float64)
    transitions = np.asarray(transitions, dtype=np.float64)
    reference_probs = np.asarray(reference_probs, dtype=np.float64)
    layers = tuple(tuple(layer) for layer in layers)
    violations = []

    C, A = len(context_ids), len(action_ids)
    sizes = [len(layer) for layer in layers]
    S = sum(sizes)
    if len(layers) < 2:
        violations.append("need at least two layers (horizon >= 1)")
    elif sizes[0] != 1:
        violations.append(f"layer 1 must hold exactly one initial state, got {sizes[0]}")
    ids = [s for layer in layers for s in layer]
    if len(set(ids)) != len(ids):
        violations.append("state ids are not unique across layers")
    S_nt = S - (sizes[-1] if sizes else 0)
    if context_probs.shape != (C,):
        violations.append(f"context probabilities have shape {context_probs.shape}, expected {(C,)}")
    if transitions.shape != (C, S_nt, A, S):
        violations.append(f"transitions have shape {transitions.shape}, expected {(C, S_nt, A, S)}")
    if reference_probs.shape != (C, S_nt, A):
        violations.append(f"reference policy has shape {reference_probs.shape}, expected {(C, S_nt, A)}")
    if violations:
        raise ValidationError(violations)

    if np.any(context_probs < 0) or abs(context_probs.sum() - 1.0) > FLOAT_ROW_TOL:
        violations.append(f"context distribution sums to {context_probs.sum()!r}")
    layer_of = np.repeat(np.arange(len(sizes)), sizes)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    for c in range(C):
        for x in range(S_nt):
            mu_row = reference_probs[c, x]
            if np.any(mu_row < 0) or abs(mu_row.sum() - 1.0) > FLOAT_ROW_TOL:
                violations.append(f"reference row ({context_ids[c]}, {ids[x]}) is not a distribution")
            h = layer_of[x]
            for y in range(A):
                row = transitions[c, x, y]
                if mu_row[y] == 0 and not row.any():
                    continue
                where = f"({context_ids[c]}, {ids[x]}, {action_ids[y]})"
                if np.any(row < 0):
                    violations.append(f"transition row {where} has negative entries")
                if abs(row.sum() - 1.0) > FLOAT_ROW_TOL:
                    violations.append(f"transition row {where} sums to {row.sum()!r}")
                outside = np.ones(S, dtype=bool)
                outside[bounds[h + 1]:bounds[h + 2]] = False
                if np.any(row[outside] != 0):
                    violations.append(f"transition row {where} leaves layer {h + 1} for a non-adjacent layer")
    if not violations:
        reach = _reach_all(transitions, reference_probs, sizes)
        reachable = (reach > 0).any(axis=0)
        for x in np.nonzero(~reachable)[0]:
            violations.append(f"state {ids[x]} (layer {layer_of[x] + 1}) is unreachable under mu")
    if violations:
        raise ValidationError(violations)
    return Cmdp(tuple(context_ids), context_probs, layers, tuple(action_ids), transitions, reference_probs)


def _dec(v) -> Decimal:
    if isinstance(v, Decimal):
        return v
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return Decimal(repr(v)) if isinstance(v, float) else Decimal(v)
    if isinstance(v, str):
        try:
            d = Decimal(v)
        except InvalidOperation:
            pass
        else:
            if d.is_finite():
                return d
    raise ValidationError([f"expected a probability literal, got {v!r}"])


def validate_cmdp(raw) -> Cmdp:
    """Parse and validate a CMDP document (dict, JSON text or path).

    Row sums are checked in exact decimal arithmetic on the literals as written,
    before conversion to float.
    """
    raw = _load_document(raw)
    violations = []
    try:
        contexts = raw["contexts"]
        horizon = int(raw["horizon"])
        layers = [list(layer) for layer in raw["layers"]]
        actions = list(raw["actions"])
        trans_entries = raw["transitions"]
        ref_entries = raw["reference_policy"]
    except (KeyError, TypeError) as exc:
        raise ValidationError([f"missing or malformed field: {exc}"]) from None
    if len(layers) != horizon + 1:
        violations.append(f"horizon {horizon} needs {horizon + 1} layers, got {len(layers)}")
    ctx_ids = [c["id"] for c in contexts]
    ctx_dec = [_dec(c["prob"]) for c in contexts]
    if abs(sum(ctx_dec, Decimal(0)) - 1) > ROW_TOL:
        violations.append(f"context probabilities sum to {sum(ctx_dec, Decimal(0))}")
    state_pos = {}
    for h, layer in enumerate(layers):
        for s in layer:
            if s in state_pos:
                violations.append(f"state id {s!r} appears twice")
            state_pos[s] = h
    ids = [s for layer in layers for s in layer]
    index = {s: i for i, s in enumerate(ids)}
    ctx_index = {c: i for i, c in enumerate(ctx_ids)}
    act_index = {a: i for i, a in enumerate(actions)}
    C, A, S = len(ctx_ids), len(actions), len(ids)
    S_nt = S - (len(layers[-1]) if layers else 0)
    T = np.zeros((C, S_nt, A, S))
    mu = np.zeros((C, S_nt, A))
    seen_rows = set()

    for e in trans_entries:
        try:
            c, x, y = ctx_index[e["context"]], index[e["state"]], act_index[e["action"]]
        except KeyError as exc:
            violations.append(f"transition entry refers to unknown id {exc}")
            continue
        where = f"({e['context']}, {e['state']}, {e['action']})"
        if x >= S_nt:
            violations.append(f"transition row {where} starts from a final state")
            continue
        if (c, x, y) in seen_rows:
            violations.append(f"transition row {where} given twice")
        seen_rows.add((c, x, y))
        total = Decimal(0)
        for nxt, p in e["next"]:
            pd = _dec(p)
            if nxt not in index:
                violations.append(f"transition row {where} targets unknown state {nxt!r}")
                continue
            if state_pos[nxt] != state_pos[e["state"]] + 1:
                violations.append(f"transition row {where} jumps from layer {state_pos[e['state']] + 1} "
                                  f"to layer {state_pos[nxt] + 1}")
            if pd < 0:
                violations.append(f"transition row {where} has negative probability {pd}")
            total += pd
            T[c, x, y, index[nxt]] += float(pd)
        if abs(total - 1) > ROW_TOL:
            violations.append(f"transition row {where} sums to {total}")

    seen_ref = set()
    for e in ref_entries:
        try:
            c, x = ctx_index[e["context"]], index[e["state"]]
        except KeyError as exc:
            violations.append(f"reference policy entry refers to unknown id {exc}")
            continue
        where = f"({e['context']}, {e['state']})"
        probs = [_dec(p) for p in e["probs"]]
        if x >= S_nt or len(probs) != A:
            violations.append(f"reference row {where} is malformed")
            continue
        seen_ref.add((c, x))
        if any(p < 0 for p in probs) or abs(sum(probs, Decimal(0)) - 1) > ROW_TOL:
            violations.append(f"reference row {where} sums to {sum(probs, Decimal(0))}")
        mu[c, x] = [float(p) for p in probs]

    for c in range(C):
        for x in range(S_nt):
            if (c, x) not in seen_ref:
                violations.append(f"reference row ({ctx_ids[c]}, {ids[x]}) is missing")
                continue
            for y in range(A):
                if mu[c, x, y] > 0 and (c, x, y) not in seen_rows:
                    violations.append(f"transition row ({ctx_ids[c]}, {ids[x]}, {actions[y]}) is missing")
    if violations:
        raise ValidationError(violations)
    return build_cmdp(ctx_ids, [float(p) for p in ctx_dec], layers, actions, T, mu)


def _load_document(raw):
    if isinstance(raw, dict):
        return raw
    if isinstance(raw, Path) or (isinstance(raw, str) and not raw.lstrip().startswith("{")):
        raw = Path(raw).read_text()
    return json.loads(raw, parse_float=Decimal)


def cmdp_to_dict(cmdp: Cmdp) -> dict:
    """Serialize to the JSON document format read by :func:`validate_cmdp`."""
    ids = cmdp.state_ids
    trans = []
    for c, cid in enumerate(cmdp.context_ids):
        for x in range(cmdp.n_nonterminal):
            for y, a in enumerate(cmdp.action_ids):
                row = cmdp.transitions[c, x, y]
                nz = np.nonzero(row)[0]
                if len(nz) == 0:
                    continue
                trans.append({"context": cid, "state": ids[x], "action": a,
                              "next": [[ids[s], float(row[s])] for s in nz]})
    ref = [{"context": cid, "state": ids[x], "probs": [float(p) for p in cmdp.reference_probs[c, x]]}
           for c, cid in enumerate(cmdp.context_ids) for x in range(cmdp.n_nonterminal)]
    return {
        "contexts": [{"id": cid, "prob": float(p)} for cid, p in zip(cmdp.context_ids, cmdp.context_probs)],
        "horizon": cmdp.horizon,
        "layers": [list(layer) for layer in cmdp.layers],
        "actions": list(cmdp.action_ids),
        "transitions": trans,
        "reference_policy": ref,
    }


def make_policy(cmdp: Cmdp, probs) -> Policy:
    """Wrap and validate a probability table against ``cmdp``."""
    pol = Policy(np.asarray(probs, dtype=np.float64))
    cmdp.check_policy(pol)
    p = pol.probs
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > FLOAT_ROW_TOL):
        raise ValidationError(["policy rows must be distributions"])
    return pol


# --------------------------------------------------------------------------- reach probabilities


class ReachProbs(NamedTuple):
    context: int
    rho: np.ndarray


def _reach_all(transitions, probs, sizes) -> np.ndarray:
    C = transitions.shape[0]
    S = sum(sizes)
    rho = np.zeros((C, S))
    rho[:, 0] = 1.0
    start = 0
    for h in range(len(sizes) - 1):
        sl = slice(start, start + sizes[h])
        nsl = slice(start + sizes[h], start + sizes[h] + sizes[h + 1])
        w = rho[:, sl, None] * probs[:, sl, :]
        rho[:, nsl] = np.einsum("cxa,cxas->cs", w, transitions[:, sl, :, nsl])
        start += sizes[h]
    return rho


def reach_all(cmdp: Cmdp, policy: Policy) -> np.ndarray:
    """Reach probabilities for every context, shape ``(C, S)``."""
    cmdp.check_policy(policy)
    return _reach_all(cmdp.transitions, policy.probs, cmdp.layer_sizes)


def reach_probabilities(cmdp: Cmdp, policy: Policy, context=0) -> ReachProbs:
    c = cmdp.context_index(context)
    return ReachProbs(c, reach_all(cmdp, policy)[c])


def terminal_marginals(cmdp: Cmdp, policy: Policy) -> np.ndarray:
    """Distribution over final states per context, shape ``(C, n_terminal)``."""
    return reach_all(cmdp, policy)[:, cmdp.terminal_slice]


# --------------------------------------------------------------------------- trajectories


@dataclass(frozen=True)
class Trajectory:
    context: int
    states: tuple
    actions: tuple
    prob: float = field(default=float("nan"))

    @property
    def terminal(self) -> int:
        return self.states[-1]

    def steps(self) -> tuple:
        """Interleaved ``(x_1, y_1, ..., x_H, y_H, x_{H+1})``."""
        out = []
        for x, y in zip(self.states, self.actions):
            out += [x, y]
        out.append(self.states[-1])
        return tuple(out)


class PathArrays(NamedTuple):
    states: np.ndarray   # (N, H + 1) global state indices
    actions: np.ndarray  # (N, H)
    probs: np.ndarray    # (N,)


def enumerate_paths(cmdp: Cmdp, policy: Policy, context=0, cap: int = DEFAULT_ENUMERATION_CAP) -> PathArrays:
    """All positive-probability trajectories of one context as arrays."""
    cmdp.check_policy(policy)
    c = cmdp.context_index(context)
    pi = policy.probs[c]
    T = cmdp.transitions[c]
    states = np.zeros((1, 1), dtype=np.int64)
    actions = np.zeros((1, 0), dtype=np.int64)
    probs = np.ones(1)
    for h in range(cmdp.horizon):
        sl, nsl = cmdp.layer_slices[h], cmdp.layer_slices[h + 1]
        joint = pi[sl, :, None] * T[sl, :, nsl]  # (n_h, A, n_{h+1})
        n_h = joint.shape[0]
        flat = joint.reshape(n_h, -1)
        counts = np.count_nonzero(flat, axis=1)
        cur = states[:, -1] - sl.start
        total = int(counts[cur].sum())
        if total > cap:
            raise ExplosionError(f"{total} trajectories at step {h + 1} exceed the cap of {cap}")
        width = max(int(counts.max()), 1)
        pair = np.zeros((n_h, width), dtype=np.int64)
        for x in range(n_h):
            nz = np.nonzero(flat[x])[0]
            pair[x, :len(nz)] = nz
        rep = np.repeat(np.arange(len(cur)), counts[cur])
        starts = np.concatenate([[0], np.cumsum(counts[cur])[:-1]])
        within = np.arange(total) - np.repeat(starts, counts[cur])
        code = pair[cur[rep], within]
        n_next = nsl.stop - nsl.start
        a, s = np.divmod(code, n_next)
        probs = probs[rep] * flat[cur[rep], code]
        states = np.column_stack([states[rep], s + nsl.start])
        actions = np.column_stack([actions[rep], a])
    return PathArrays(states, actions, probs)


def enumerate_trajectories(cmdp: Cmdp, policy: Policy, context=0,
                           cap: int = DEFAULT_ENUMERATION_CAP) -> list:
    """Every trajectory with positive probability, as :class:`Trajectory` objects.

    Raises :class:`ExplosionError` when the count exceeds ``cap``.
    """
    c = cmdp.context_index(context)
    paths = enumerate_paths(cmdp, policy, c, cap)
    return [Trajectory(c, tuple(map(int, s)), tuple(map(int, a)), float(p))
            for s, a, p in zip(paths.states, paths.actions, paths.probs)]


class PathBatch(NamedTuple):
    contexts: np.ndarray  # (N,)
    states: np.ndarray    # (N, H + 1)
    actions: np.ndarray   # (N, H)


def sample_paths(cmdp: Cmdp, policy: Policy, contexts, rng: np.random.Generator) -> PathBatch:
    """Sample one trajectory per entry of ``contexts`` (context indices)."""
    cmdp.check_policy(policy)
    contexts = np.ascontiguousarray(contexts, dtype=np.int64)
    u = rng.random((len(contexts), 2 * cmdp.horizon))
    states, actions = kernels.sample_paths(kernels.row_cdf(policy.probs), cmdp.transition_cdf, contexts, u)
    return PathBatch(contexts, states, actions)


def sample_contexts(cmdp: Cmdp, n: int, rng: np.random.Generator) -> np.ndarray:
    if cmdp.n_contexts == 1:
        return np.zeros(n, dtype=np.int64)
    return rng.choice(cmdp.n_contexts, size=n, p=cmdp.context_probs).astype(np.int64)


def sample_trajectory(cmdp: Cmdp, policy: Policy, context, rng: np.random.Generator) -> Trajectory:
    c = cmdp.context_index(context)
    batch = sample_paths(cmdp, policy, [c], rng)
    return Trajectory(c, tuple(map(int, batch.states[0])), tuple(map(int, batch.actions[0])))


# --------------------------------------------------------------------------- divergences and mixtures


def state_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) over the last axis; ``0 log 0/q = 0`` and ``p log p/0 = inf``.

    Computed as ``sum p (r - 1 - log r)`` with ``r = q / p`` (the term is ``q`` where
    ``p = 0``), which equals the KL for normalized rows while keeping every term
    non-negative, so tiny divergences do not cancel to negative noise.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    pos = p > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(pos, (q - p) / np.where(pos, p, 1.0), 0.0)
        term = np.where(pos, p * (u - np.log1p(u)), q)
        term = np.where(pos & (q <= 0), np.inf, term)
    return term.sum(axis=-1)


def trajectory_kl(cmdp: Cmdp, pi: Policy, pi_prime: Policy, strict: bool = False) -> float:
    """KL between trajectory distributions, averaged over contexts, in nats.

    Uses the per-state decomposition weighted by reach probabilities of ``pi``.
    If ``pi`` puts mass outside the support of ``pi_prime`` at a reachable state the
    result is ``inf``; with ``strict=True`` a :class:`SupportViolation` is raised instead.
    """
    cmdp.check_policy(pi)
    cmdp.check_policy(pi_prime)
    rho = reach_all(cmdp, pi)[:, :cmdp.n_nonterminal]
    kl = state_kl(pi.probs, pi_prime.probs)
    reached = rho > 0
    if np.any(np.isinf(kl) & reached):
        if strict:
            bad = np.argwhere(np.isinf(kl) & reached)[0]
            raise SupportViolation(f"support mismatch at context {bad[0]}, state {cmdp.state_ids[bad[1]]}")
        return math.inf
    per_ctx = np.where(reached, rho * np.where(reached, kl, 0.0), 0.0).sum(axis=1)
    return float(cmdp.context_probs @ per_ctx)


def mixture_policy(cmdp: Cmdp, pi1: Policy, pi2: Policy, coeff: float) -> Policy:
    """Policy whose reach probabilities are ``coeff * rho1 + (1 - coeff) * rho2``.

    At states unreachable under both inputs the reference row is used.
    """
    if not 0.0 <= coeff <= 1.0:
        raise ValueError("coeff must lie in [0, 1]")
    S_nt = cmdp.n_nonterminal
    r1 = reach_all(cmdp, pi1)[:, :S_nt, None]
    r2 = reach_all(cmdp, pi2)[:, :S_nt, None]
    num = coeff * r1 * pi1.probs + (1.0 - coeff) * r2 * pi2.probs
    den = coeff * r1 + (1.0 - coeff) * r2
    with np.errstate(invalid="ignore", divide="ignore"):
        mixed = np.where(den > 0, num / np.where(den > 0, den, 1.0), cmdp.reference_probs)
    return Policy(mixed / mixed.sum(axis=-1, keepdims=True))


def geometric_mixture(pi: Policy, mu: Policy, beta: float) -> Policy:
    """Per-state normalized ``pi^(1 - beta) * mu^beta``, restricted to the support of ``mu``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if beta == 0.0:
        return pi
    if beta == 1.0:
        return mu
    support = mu.probs > 0
    w = np.where(support, np.power(pi.probs, 1.0 - beta) * np.power(mu.probs, beta), 0.0)
    z = w.sum(axis=-1, keepdims=True)
    if np.any(z <= 0):
        raise DegenerateRow("geometric mixture has an empty row")
    return Policy(w / z)
