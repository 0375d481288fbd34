"""Mirror-descent policy optimization: MTPO, MTPO-tau and multi-turn RLHF.

Iterations are 0-based: ``policy_0 = mu`` and step ``t`` maps ``policy_t`` to
``policy_{t+1}`` with learning rate ``eta_t``.  Under the decaying schedule
``eta_t = 2 / (alpha (t + 2))`` the first step has ``alpha * eta_0 = 1``.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cmdp import Cmdp, DegenerateRow, Policy, geometric_mixture, reach_all, state_kl, trajectory_kl
from .preference import TerminalPreference, regularized_preference, state_preferences
from .values import (
    TerminalReward,
    exploitability,
    generic_qv,
    q_magnitude_bound,
    shifted_q,
    shifted_q_range,
    soft_best_response,
    unregularized_exploitability,
)

logger = logging.getLogger(__name__)

ALGORITHMS = ("mtpo", "mtpo_tau", "rlhf_md")
FI_TOL = 1e-8
SELFPLAY_TOL = 1e-12
TRACE_COLUMNS = ("t", "eta", "kl_to_nash", "fixedpoint_residual", "exploitability", "selfplay_pref",
                 "fi_slack", "bound_margin")


class BoundViolation(AssertionError):
    """A theorem bound or exact inequality failed during a diagnosed run."""

    def __init__(self, iteration: int, check: str, slack: float, trace=None):
        self.iteration = iteration
        self.check = check
        self.slack = slack
        self.trace = trace
        super().__init__(f"{check} violated at iteration {iteration}: slack {slack:.3e}")


class NotConverged(RuntimeError):
    def __init__(self, cap: int, residual: float):
        self.cap = cap
        self.residual = residual
        super().__init__(f"no fixed point within {cap} iterations (residual {residual:.3e})")


class MissingReward(ValueError):
    pass


def lr_schedule(t: int, alpha: float) -> float:
    """``eta_t = 2 / (alpha (t + 2))``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return 2.0 / (alpha * (t + 2))


@dataclass
class SolverConfig:
    algorithm: str = "mtpo"
    alpha: float = 0.1
    iterations: int = 100
    schedule: str = "decay"
    eta: float | None = None
    rlhf_reward: TerminalReward | None = None
    diagnostics: bool = True
    tolerance: float = 1e-8
    record_policies: bool = True

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.schedule == "constant":
            if self.eta is None or self.eta <= 0:
                raise ValueError("constant schedule needs a positive eta")
            if self.alpha * self.eta > 1.0:
                raise ValueError(f"alpha * eta = {self.alpha * self.eta} exceeds 1")
        elif self.schedule != "decay":
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.algorithm == "rlhf_md" and self.rlhf_reward is None:
            raise MissingReward("rlhf_md needs rlhf_reward")

    def eta_at(self, t: int) -> float:
        return lr_schedule(t, self.alpha) if self.schedule == "decay" else float(self.eta)

    def echo(self) -> dict:
        d = asdict(self)
        d["rlhf_reward"] = None if self.rlhf_reward is None else self.rlhf_reward.r.tolist()
        return d


# --------------------------------------------------------------------------- update rules


def _normalize_log(z: np.ndarray, support: np.ndarray) -> np.ndarray:
    z = np.where(support, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DegenerateRow("update row has no finite log-mass")
    w = np.exp(z - m)
    s = w.sum(axis=-1, keepdims=True)
    p = w / s
    if np.any(p[support] <= 0):
        raise DegenerateRow("update underflowed a supported action to zero")
    return p


def md_step(cmdp: Cmdp, pi_t: Policy, q, eta: float, alpha: float) -> Policy:
    """``pi_{t+1}`` proportional to ``mu^(alpha eta) pi_t^(1 - alpha eta) exp(eta Q)``, in log space."""
    beta = alpha * eta
    if beta > 1.0 + 1e-15:
        raise ValueError(f"alpha * eta = {beta} exceeds 1")
    q = getattr(q, "q", q)
    if not np.all(np.isfinite(q)):
        raise ValueError("Q must be finite")
    support = cmdp.support
    with np.errstate(divide="ignore"):
        log_mu = np.log(cmdp.reference_probs)
        log_pi = np.log(pi_t.probs)
    z = beta * np.where(support, log_mu, 0.0) + eta * q
    if beta < 1.0:
        z = z + (1.0 - beta) * np.where(support, log_pi, 0.0)
        z = np.where(support & (pi_t.probs <= 0), -np.inf, z)
    return Policy(_normalize_log(z, support))


def _tilt(cmdp: Cmdp, base: Policy, q: np.ndarray, eta: float) -> Policy:
    with np.errstate(divide="ignore"):
        z = np.log(base.probs) + eta * q
    return Policy(_normalize_log(z, cmdp.support))


def selfplay_q(cmdp: Cmdp, pref: TerminalPreference, pi: Policy, alpha: float):
    """Reward ``P(x > pi)`` and the self-play tables ``Q^{pi, pi}``, ``V^{pi, pi}``."""
    r = state_preferences(cmdp, pref, pi)
    Q, V = generic_qv(cmdp, pi, r, alpha, kind="preference")
    return r, Q, V


def mtpo_iteration(cmdp: Cmdp, pref: TerminalPreference, pi_t: Policy, t: int, config: SolverConfig) -> Policy:
    eta = config.eta_at(t)
    _, Q, _ = selfplay_q(cmdp, pref, pi_t, config.alpha)
    return md_step(cmdp, pi_t, Q, eta, config.alpha)


def mtpo_tau_iteration(cmdp: Cmdp, pref: TerminalPreference, pi_t: Policy, t: int, config: SolverConfig) -> Policy:
    eta = config.eta_at(t)
    mixed = geometric_mixture(pi_t, cmdp.reference_policy, config.alpha * eta)
    _, Q, _ = selfplay_q(cmdp, pref, mixed, config.alpha)
    return _tilt(cmdp, mixed, Q.q, eta)


def rlhf_md_iteration(cmdp: Cmdp, reward: TerminalReward, pi_t: Policy, t: int, config: SolverConfig) -> Policy:
    if reward is None:
        raise MissingReward("rlhf_md needs a terminal reward")
    Q, _ = generic_qv(cmdp, pi_t, reward, config.alpha, kind="rlhf")
    return md_step(cmdp, pi_t, Q, config.eta_at(t), config.alpha)


def fixed_point_residual(cmdp: Cmdp, pi: Policy, q: np.ndarray, alpha: float) -> float:
    """``max |pi(y|x) - normalize(mu(y|x) exp(Q(x, y) / alpha))|`` over all states and actions."""
    with np.errstate(divide="ignore"):
        target = _normalize_log(np.log(cmdp.reference_probs) + q / alpha, cmdp.support)
    return float(np.max(np.abs(pi.probs - target)))


# --------------------------------------------------------------------------- traces


@dataclass
class IterationRecord:
    t: int
    eta: float
    kl_to_nash: float | None = None
    fixedpoint_residual: float | None = None
    exploitability: float | None = None
    selfplay_pref: float | None = None
    fi_slack: float | None = None
    bound_margin: float | None = None
    mixture_slack: float | None = None
    q_shift_max: float | None = None
    q_range_slack: float | None = None
    kl_mixture_to_nash: float | None = None
    unregularized_exploitability: float | None = None


@dataclass
class SolverTrace:
    config: SolverConfig
    records: list = field(default_factory=list)
    policies: list = field(default_factory=list)
    final_policy: Policy | None = None
    reference: Policy | None = None
    q_bar: float | None = None
    reference_kl_to_mu: float | None = None
    wall_time: float = 0.0

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records])

    def policy_at(self, t: int) -> Policy:
        return self.policies[t]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in self.records:
                w.writerow(["" if getattr(r, k) is None else repr(getattr(r, k)) for k in TRACE_COLUMNS])

    def summary(self, cmdp: Cmdp, pref: TerminalPreference | None = None, include_time: bool = True) -> dict:
        final = self.final_policy
        out = {
            "config": self.config.echo(),
            "iterations": len(self.records),
            "q_bar": self.q_bar,
            "measured_q_shift_max": _nanmax(self.column("q_shift_max")),
            "reference_kl_to_mu": self.reference_kl_to_mu,
            "final_policy_sha256": policy_hash(final),
        }
        if pref is not None and self.config.algorithm != "rlhf_md":
            out["final_exploitability"] = exploitability(cmdp, pref, final, self.config.alpha)
        if self.reference is not None:
            out["final_kl_to_reference"] = trajectory_kl(cmdp, self.reference, final)
        if include_time:
            out["wall_time_s"] = self.wall_time
        return out


def _nanmax(a: np.ndarray):
    a = a[~np.isnan(a)]
    return float(a.max()) if a.size else None


def policy_hash(policy: Policy) -> str:
    return hashlib.sha256(np.ascontiguousarray(policy.probs).tobytes()).hexdigest()


# --------------------------------------------------------------------------- run orchestration


def _expected_sq_norm(cmdp: Cmdp, rho_ref: np.ndarray, values: np.ndarray) -> float:
    """``E_ref[sum_h ||values(x_h, .)||_inf^2]`` over the reference support."""
    norm = np.max(np.where(cmdp.support, np.abs(values), 0.0), axis=-1)
    return float(cmdp.context_probs @ (rho_ref * norm**2).sum(axis=1))


def _initial_value(cmdp: Cmdp, V) -> float:
    return float(cmdp.context_probs @ V.v[:, 0])


def run(cmdp: Cmdp, objective, config: SolverConfig, reference_nash: Policy | None = None,
        init: Policy | None = None) -> SolverTrace:
    """Iterate the configured algorithm from ``mu`` and record diagnostics.

    ``objective`` is a :class:`TerminalPreference` for ``mtpo``/``mtpo_tau``; for
    ``rlhf_md`` it may be ``None`` (the reward comes from the config).  For ``rlhf_md``
    the reference defaults to the soft-optimal policy.  With ``config.diagnostics`` every
    exact inequality and theorem bound is asserted per iteration; a failure raises
    :class:`BoundViolation` carrying the partial trace.
    """
    alpha = config.alpha
    algo = config.algorithm
    mu = cmdp.reference_policy
    pref = objective if algo != "rlhf_md" else None
    reward = config.rlhf_reward
    if algo != "rlhf_md" and pref is None:
        raise ValueError(f"{algo} needs a terminal preference")
    if algo == "rlhf_md":
        soft_opt, V_opt = soft_best_response(cmdp, reward, alpha)
        if reference_nash is None:
            reference_nash = soft_opt
    trace = SolverTrace(config=config, reference=reference_nash)
    trace.q_bar = q_magnitude_bound(cmdp, alpha)
    H = cmdp.horizon
    S_nt = cmdp.n_nonterminal
    lo, hi = shifted_q_range(cmdp, alpha)
    bound_const = 9.0 if algo == "mtpo_tau" else 32.0
    decaying = config.schedule == "decay" and init is None
    ref = reference_nash
    if ref is not None:
        rho_ref = reach_all(cmdp, ref)[:, :S_nt]
        kl_ref_mu_state = state_kl(ref.probs, mu.probs)
        trace.reference_kl_to_mu = trajectory_kl(cmdp, ref, mu)
        if config.diagnostics and algo != "rlhf_md":
            margin = 1.0 / (2.0 * alpha) - trace.reference_kl_to_mu
            if margin < -FI_TOL:
                raise BoundViolation(0, "KL(nash || mu) <= 1/(2 alpha)", margin, trace)

    def fail(t, check, slack):
        trace.wall_time = time.perf_counter() - start
        raise BoundViolation(t, check, slack, trace)

    pi = init if init is not None else mu
    start = time.perf_counter()
    for t in range(config.iterations):
        eta = config.eta_at(t)
        beta = alpha * eta
        rec = IterationRecord(t=t, eta=eta)
        if config.record_policies:
            trace.policies.append(pi)

        if algo == "mtpo":
            r, Q, V = selfplay_q(cmdp, pref, pi, alpha)
            played = pi
            nxt = md_step(cmdp, pi, Q, eta, alpha)
        elif algo == "mtpo_tau":
            played = geometric_mixture(pi, mu, beta)
            r, Q, V = selfplay_q(cmdp, pref, played, alpha)
            nxt = _tilt(cmdp, played, Q.q, eta)
        else:
            r = reward.r
            Q, V = generic_qv(cmdp, pi, reward, alpha, kind="rlhf")
            played = pi
            nxt = md_step(cmdp, pi, Q, eta, alpha)

        if algo == "mtpo_tau":
            own_r, own_Q, _ = selfplay_q(cmdp, pref, pi, alpha)
            rec.fixedpoint_residual = fixed_point_residual(cmdp, pi, own_Q.q, alpha)
        else:
            rec.fixedpoint_residual = fixed_point_residual(cmdp, pi, Q.q, alpha)

        if pref is not None:
            rec.selfplay_pref = regularized_preference(cmdp, pref, alpha, pi, pi)
            rec.exploitability = exploitability(cmdp, pref, pi, alpha)
            rec.unregularized_exploitability = unregularized_exploitability(cmdp, pref, pi)
            if config.diagnostics and abs(rec.selfplay_pref - 0.5) > SELFPLAY_TOL:
                fail(t, "self-play symmetry", SELFPLAY_TOL - abs(rec.selfplay_pref - 0.5))
        else:
            rec.exploitability = _initial_value(cmdp, V_opt) - _initial_value(cmdp, V)

        if algo != "mtpo_tau":
            sq = shifted_q(cmdp, Q, pi)
            rec.q_shift_max = float(np.nanmax(np.abs(sq)))
            if decaying:
                rec.q_range_slack = float(min(hi - np.nanmax(sq), np.nanmin(sq) - lo))
                if config.diagnostics and rec.q_range_slack < -FI_TOL:
                    fail(t, "shifted Q range", rec.q_range_slack)

        if ref is not None:
            kl_t = trajectory_kl(cmdp, ref, pi)
            kl_next = trajectory_kl(cmdp, ref, nxt)
            rec.kl_to_nash = kl_t
            if algo == "mtpo_tau":
                quad = _expected_sq_norm(cmdp, rho_ref, np.where(cmdp.support, Q.q, 0.0))
            else:
                quad = _expected_sq_norm(cmdp, rho_ref, np.nan_to_num(shifted_q(cmdp, Q, pi)))
            _, V_ref = generic_qv(cmdp, ref, r, alpha)
            gap = _initial_value(cmdp, V) - _initial_value(cmdp, V_ref)
            rhs = (1.0 - beta) * kl_t + 2.0 * eta**2 * quad + eta * gap
            rec.fi_slack = rhs - kl_next
            if config.diagnostics and rec.fi_slack < -FI_TOL:
                fail(t, "fundamental inequality", rec.fi_slack)
            if algo == "mtpo_tau":
                kl_mix = state_kl(ref.probs, played.probs)
                kl_cur = state_kl(ref.probs, pi.probs)
                slack = (1.0 - beta) * kl_cur + beta * kl_ref_mu_state - kl_mix
                rec.mixture_slack = float(slack.min())
                rec.kl_mixture_to_nash = trajectory_kl(cmdp, ref, played)
                if config.diagnostics and rec.mixture_slack < -FI_TOL:
                    fail(t, "mixture KL recursion", rec.mixture_slack)
            if decaying:
                bound = bound_const * H * trace.q_bar**2 / (alpha**2 * (t + 1))
                measured = rec.kl_mixture_to_nash if algo == "mtpo_tau" else kl_t
                rec.bound_margin = bound - measured
                if config.diagnostics and rec.bound_margin < 0:
                    fail(t, "convergence bound", rec.bound_margin)
        trace.records.append(rec)
        pi = nxt
    trace.final_policy = pi
    trace.wall_time = time.perf_counter() - start
    return trace


# --------------------------------------------------------------------------- Nash solving


@dataclass
class NashCertificate:
    policy: Policy
    residual: float
    exploitability: float
    iterations_used: int
    alpha: float
    tolerance: float

    def to_dict(self, cmdp: Cmdp) -> dict:
        return {
            "residual": self.residual,
            "exploitability": self.exploitability,
            "iterations_used": self.iterations_used,
            "alpha": self.alpha,
            "tolerance": self.tolerance,
            "kl_to_mu": trajectory_kl(cmdp, self.policy, cmdp.reference_policy),
            "policy_sha256": policy_hash(self.policy),
            "policy": self.policy.probs.tolist(),
        }


def nash_solve(cmdp: Cmdp, pref: TerminalPreference, alpha: float, tolerance: float = 1e-8,
               eta: float | None = None, max_iter: int = 200_000, algorithm: str = "mtpo") -> NashCertificate:
    """Run MTPO (or MTPO-tau) until the fixed-point residual drops below ``tolerance``.

    With ``eta`` given the step is constant; otherwise ``alpha * eta`` starts at 1/2 and is
    halved whenever the residual grows, growing back slowly while it shrinks.

    For MTPO-tau the certified policy is the geometric mixture the iteration plays, with
    weight ``alpha eta / (1 + alpha eta)`` on ``mu``.  With that weight the mixture's fixed
    point is exactly the regularized Nash for any step size; the plain ``alpha eta`` weight
    settles at a point biased by ``O(alpha eta)``.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if eta is not None and alpha * eta > 1.0:
        raise ValueError("alpha * eta must not exceed 1")
    if algorithm not in ("mtpo", "mtpo_tau"):
        raise ValueError(f"nash_solve supports mtpo and mtpo_tau, not {algorithm!r}")
    mu = cmdp.reference_policy
    beta = alpha * eta if eta is not None else 0.5
    pi = mu
    prev = math.inf
    for it in range(max_iter + 1):
        cand = pi if algorithm == "mtpo" else geometric_mixture(pi, mu, beta / (1.0 + beta))
        _, Q, _ = selfplay_q(cmdp, pref, cand, alpha)
        res = fixed_point_residual(cmdp, cand, Q.q, alpha)
        if res <= tolerance:
            expl = exploitability(cmdp, pref, cand, alpha)
            return NashCertificate(cand, res, expl, it, alpha, tolerance)
        if it == max_iter:
            break
        if eta is None:
            if res > prev:
                beta *= 0.5
            else:
                beta = min(1.0, beta * 1.05)
        prev = res
        if algorithm == "mtpo":
            pi = md_step(cmdp, pi, Q, beta / alpha, alpha)
        else:
            mixed = geometric_mixture(pi, mu, beta / (1.0 + beta))
            _, Qm, _ = selfplay_q(cmdp, pref, mixed, alpha)
            pi = _tilt(cmdp, mixed, Qm.q, beta / alpha)
    raise NotConverged(max_iter, res)
