"""Sampled actor-critic self-play on tabular softmax policies.

Each step samples pairs of trajectories from the current policy, draws a Bernoulli
preference outcome between their final states, estimates advantages with GAE over a
turn-level value table, and takes one plain gradient step on

    L_policy = -A log pi(y|x) + alpha KL(pi(.|x) || mu(.|x))
    L_value  = (V_target - v(x))^2

Losses are summed over the turns of a trajectory and averaged over trajectories.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .cmdp import Cmdp, Policy, PathBatch, sample_contexts, sample_paths, state_kl
from .preference import TerminalPreference, policy_preference
from .solvers import NashCertificate, nash_solve
from .values import exploitability

TRACE_COLUMNS = ("step", "exploitability", "pref_vs_nash", "policy_loss", "value_loss", "grad_norm")


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class SoftmaxPolicyParams:
    theta: np.ndarray  # (C, S_nt, A)

    @classmethod
    def zeros(cls, cmdp: Cmdp) -> "SoftmaxPolicyParams":
        return cls(np.zeros((cmdp.n_contexts, cmdp.n_nonterminal, cmdp.n_actions)))

    def probs(self, support: np.ndarray) -> np.ndarray:
        return masked_softmax(self.theta, support)

    def policy(self, cmdp: Cmdp) -> Policy:
        return Policy(self.probs(cmdp.support))


@dataclass
class ValueParams:
    v: np.ndarray  # (C, S)

    @classmethod
    def zeros(cls, cmdp: Cmdp) -> "ValueParams":
        return cls(np.zeros((cmdp.n_contexts, cmdp.n_states)))


@dataclass
class PgConfig:
    alpha: float = 0.1
    gae_lambda: float = 1.0
    batch_size: int = 16
    policy_lr: float = 0.05
    value_lr: float = 0.1
    normalize_advantage: bool = False
    steps: int = 1000
    seed: int = 0
    eval_every: int = 1000
    exact_payoff: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.policy_lr <= 0 or self.value_lr <= 0:
            raise ValueError("step sizes must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.batch_size < 1 or self.steps < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be positive, steps non-negative")


def masked_softmax(theta: np.ndarray, support: np.ndarray) -> np.ndarray:
    z = np.where(support, theta, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


@dataclass
class SelfPlayBatch:
    contexts: np.ndarray  # (B,)
    first: PathBatch
    second: PathBatch
    z: np.ndarray         # (B,) outcome for the first trajectory
    payoffs: np.ndarray   # (2, B): z and 1 - z


def sample_selfplay_batch(cmdp: Cmdp, pref: TerminalPreference, theta: SoftmaxPolicyParams, batch: int,
                          rng: np.random.Generator, exact_payoff: bool = False) -> SelfPlayBatch:
    """Two independent trajectories per sampled context plus a Bernoulli preference draw."""
    policy = theta.policy(cmdp)
    ctx = sample_contexts(cmdp, batch, rng)
    paths = sample_paths(cmdp, policy, np.concatenate([ctx, ctx]), rng)
    first = PathBatch(ctx, paths.states[:batch], paths.actions[:batch])
    second = PathBatch(ctx, paths.states[batch:], paths.actions[batch:])
    t0 = cmdp.terminal_slice.start
    p = pref.matrix[ctx, first.states[:, -1] - t0, second.states[:, -1] - t0]
    z = p.copy() if exact_payoff else (rng.random(batch) < p).astype(np.float64)
    return SelfPlayBatch(ctx, first, second, z, np.stack([z, 1.0 - z]))


class Advantages(NamedTuple):
    advantages: np.ndarray  # (N, H)
    targets: np.ndarray     # (N, H)


def batch_advantages(cmdp: Cmdp, paths: PathBatch, payoffs: np.ndarray, policy: Policy, v: ValueParams,
                     alpha: float, lam: float) -> Advantages:
    """GAE with per-turn reward ``-alpha KL(pi(.|x_h) || mu(.|x_h))`` and terminal bootstrap ``payoff``."""
    H = cmdp.horizon
    kl = state_kl(policy.probs, cmdp.reference_probs)
    ctx = paths.contexts[:, None]
    rewards = -alpha * kl[ctx, paths.states[:, :H]]
    values = v.v[ctx, paths.states].copy()
    values[:, H] = payoffs
    adv = kernels.gae(rewards, values, lam)
    return Advantages(adv, adv + values[:, :H])


def gae_advantages(cmdp: Cmdp, trajectory, payoff: float, policy: Policy, v: ValueParams,
                   alpha: float, lam: float) -> Advantages:
    """Per-turn advantages and value targets for a single trajectory."""
    paths = PathBatch(np.array([trajectory.context]), np.array([trajectory.states]),
                      np.array([trajectory.actions]))
    a = batch_advantages(cmdp, paths, np.array([payoff], dtype=np.float64), policy, v, alpha, lam)
    return Advantages(a.advantages[0], a.targets[0])


class StepData(NamedTuple):
    """Flattened visited turns of a batch."""

    contexts: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    advantages: np.ndarray
    targets: np.ndarray
    n_trajectories: int


def flatten_steps(paths: PathBatch, adv: Advantages) -> StepData:
    H = paths.actions.shape[1]
    ctx = np.repeat(paths.contexts, H)
    return StepData(ctx, paths.states[:, :H].ravel(), paths.actions.ravel(),
                    adv.advantages.ravel(), adv.targets.ravel(), paths.contexts.shape[0])


def policy_loss(cmdp: Cmdp, theta: np.ndarray, steps: StepData, alpha: float) -> float:
    probs = masked_softmax(theta, cmdp.support)
    logp = np.log(probs[steps.contexts, steps.states, steps.actions])
    kl = state_kl(probs, cmdp.reference_probs)[steps.contexts, steps.states]
    return float((-steps.advantages * logp + alpha * kl).sum() / steps.n_trajectories)


def policy_grad(cmdp: Cmdp, theta: np.ndarray, steps: StepData, alpha: float) -> np.ndarray:
    """Closed-form gradient of :func:`policy_loss` with advantages held fixed."""
    support = cmdp.support
    probs = masked_softmax(theta, support)
    grad = np.zeros_like(theta)
    kernels.accumulate_logprob_grad(steps.contexts, steps.states, steps.actions, -steps.advantages, probs, grad)
    visits = np.zeros(theta.shape[:2])
    np.add.at(visits, (steps.contexts, steps.states), 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.where(support, np.log(probs) - np.log(cmdp.reference_probs), 0.0)
    kl = (probs * log_ratio).sum(axis=-1, keepdims=True)
    grad += alpha * visits[..., None] * probs * (log_ratio - kl)
    return np.where(support, grad, 0.0) / steps.n_trajectories


def value_loss(v: np.ndarray, steps: StepData) -> float:
    return float(((steps.targets - v[steps.contexts, steps.states]) ** 2).sum() / steps.n_trajectories)


def value_grad(v: np.ndarray, steps: StepData) -> np.ndarray:
    grad = np.zeros_like(v)
    np.add.at(grad, (steps.contexts, steps.states), -2.0 * (steps.targets - v[steps.contexts, steps.states]))
    return grad / steps.n_trajectories


def pg_update(cmdp: Cmdp, theta: SoftmaxPolicyParams, v: ValueParams, steps: StepData,
              config: PgConfig) -> tuple[SoftmaxPolicyParams, ValueParams, dict]:
    """One plain gradient step on both losses."""
    if config.normalize_advantage and steps.advantages.size > 1:
        a = steps.advantages
        steps = steps._replace(advantages=(a - a.mean()) / (a.std() + 1e-8))
    g_pi = policy_grad(cmdp, theta.theta, steps, config.alpha)
    g_v = value_grad(v.v, steps)
    if not (np.all(np.isfinite(g_pi)) and np.all(np.isfinite(g_v))):
        raise NonFiniteGradient(f"non-finite gradient: policy {np.abs(g_pi).max()}, value {np.abs(g_v).max()}")
    stats = {
        "policy_loss": policy_loss(cmdp, theta.theta, steps, config.alpha),
        "value_loss": value_loss(v.v, steps),
        "grad_norm": float(np.linalg.norm(g_pi)),
    }
    return (SoftmaxPolicyParams(theta.theta - config.policy_lr * g_pi),
            ValueParams(v.v - config.value_lr * g_v), stats)


@dataclass
class PgTrace:
    config: PgConfig
    rows: list = field(default_factory=list)
    theta: SoftmaxPolicyParams | None = None
    value: ValueParams | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in self.rows:
                w.writerow([r["step"]] + [repr(float(r[k])) for k in TRACE_COLUMNS[1:]])


def pg_train(cmdp: Cmdp, pref: TerminalPreference, config: PgConfig,
             nash: Policy | NashCertificate | None = None) -> PgTrace:
    """Train from ``theta = 0`` and evaluate the exact induced policy every ``eval_every`` steps."""
    if nash is None:
        nash = nash_solve(cmdp, pref, config.alpha).policy
    elif isinstance(nash, NashCertificate):
        nash = nash.policy
    rng = np.random.default_rng(config.seed)
    theta = SoftmaxPolicyParams.zeros(cmdp)
    v = ValueParams.zeros(cmdp)
    trace = PgTrace(config)
    acc = {"policy_loss": 0.0, "value_loss": 0.0, "grad_norm": 0.0}
    n_acc = 0

    def evaluate(step):
        pol = theta.policy(cmdp)
        row = {"step": step,
               "exploitability": exploitability(cmdp, pref, pol, config.alpha),
               "pref_vs_nash": policy_preference(cmdp, pref, pol, nash)}
        row.update({k: (acc[k] / n_acc if n_acc else 0.0) for k in acc})
        trace.rows.append(row)

    evaluate(0)
    for step in range(1, config.steps + 1):
        batch = sample_selfplay_batch(cmdp, pref, theta, config.batch_size, rng, config.exact_payoff)
        policy = theta.policy(cmdp)
        paths = PathBatch(np.concatenate([batch.first.contexts, batch.second.contexts]),
                          np.concatenate([batch.first.states, batch.second.states]),
                          np.concatenate([batch.first.actions, batch.second.actions]))
        adv = batch_advantages(cmdp, paths, batch.payoffs.ravel(), policy, v, config.alpha, config.gae_lambda)
        theta, v, stats = pg_update(cmdp, theta, v, flatten_steps(paths, adv), config)
        for k in acc:
            acc[k] += stats[k]
        n_acc += 1
        if step % config.eval_every == 0 or step == config.steps:
            evaluate(step)
            acc = dict.fromkeys(acc, 0.0)
            n_acc = 0
    trace.theta, trace.value = theta, v
    return trace
