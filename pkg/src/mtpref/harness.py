"""Config-driven experiments: solver runs, Nash certificates, PG training, side-by-side
matrices and convergence reports.

An experiment directory looks like::

    config.json                 canonical echo of the parsed config
    environment/cmdp.json       the model, re-loadable with validate_cmdp
    environment/preference.json
    nash/certificate.json
    runs/<label>/trace.csv      one row per iteration
    runs/<label>/summary.json
    runs/<label>/final_policy.json
    pg/<label>/trace.csv
    compare/side_by_side.csv
    MANIFEST.json               written last; lists every file with its sha256

Everything except ``MANIFEST.json`` is written through per-run directories, and no
file carries timestamps, so identical configs give byte-identical directories.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cmdp import Cmdp, Policy, ValidationError, cmdp_to_dict, make_policy, terminal_marginals, validate_cmdp
from .envs import chain_rewards, gen_bt_chain, gen_random_cmdp, single_turn_instance
from .pg import TRACE_COLUMNS as PG_COLUMNS
from .pg import PgConfig, pg_train
from .preference import TerminalPreference, policy_preference, preference_to_dict, validate_preference
from .solvers import ALGORITHMS, TRACE_COLUMNS, BoundViolation, SolverConfig, nash_solve, run
from .values import TerminalReward

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_BOUND, EXIT_CONFIG = 0, 1, 2
ANTISYMMETRY_TOL = 1e-10
KL_FLOOR = 1e-12  # below this the KL trace is rounding noise and is left out of slope fits

GENERATORS = {
    "random": (gen_random_cmdp, {"seed", "H", "states_per_layer", "num_actions", "num_contexts", "perturbation"}),
    "bt_chain": (gen_bt_chain, {"seed", "H", "prices"}),
    "single_turn": (single_turn_instance, {"p_win"}),
}
RUN_KEYS = {"label", "algorithm", "alpha", "iterations", "schedule", "eta", "diagnostics", "reference_nash", "reward"}
PG_KEYS = {"label"} | set(PgConfig.__dataclass_fields__)
TOP_KEYS = {"schema_version", "output_dir", "environment", "alpha", "nash", "runs", "pg", "compare"}
BUILTIN_POLICIES = ("mu", "nash")


class ConfigError(ValueError):
    """Malformed experiment config; nothing has been written."""


class MissingArtifacts(FileNotFoundError):
    pass


@dataclass
class RunSpec:
    label: str
    solver: SolverConfig
    reference_nash: bool = True


@dataclass
class PgSpec:
    label: str
    config: PgConfig


@dataclass
class ExperimentConfig:
    environment: dict
    output_dir: Path
    alpha: float = 0.1
    nash: dict = field(default_factory=dict)
    runs: list = field(default_factory=list)
    pg: list = field(default_factory=list)
    compare: list = field(default_factory=list)
    certify: bool = False
    base_dir: Path = Path(".")
    raw: dict = field(default_factory=dict)

    @property
    def needs_nash(self) -> bool:
        return (bool(self.pg) or "nash" in self.compare or self.certify
                or any(r.reference_nash and r.solver.algorithm != "rlhf_md" for r in self.runs))


@dataclass
class SideBySideMatrix:
    labels: list
    matrix: np.ndarray

    def to_text(self, digits: int = 4) -> str:
        width = max(8, max(len(s) for s in self.labels) + 1, digits + 4)
        lines = [" " * width + "".join(f"{s:>{width}}" for s in self.labels)]
        for s, row in zip(self.labels, self.matrix):
            lines.append(f"{s:<{width}}" + "".join(f"{v:>{width}.{digits}f}" for v in row))
        return "\n".join(lines) + "\n"


@dataclass
class ExperimentResult:
    exit_code: int
    output_dir: Path
    manifest: dict


# --------------------------------------------------------------------------- config


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _unknown(d: dict, allowed: set, where: str):
    extra = sorted(set(d) - allowed)
    _require(not extra, f"unknown keys in {where}: {extra}")


def load_config(source, sections=None) -> ExperimentConfig:
    """Parse and check an experiment config (dict, JSON text or path).

    ``sections`` optionally restricts the experiment to a subset of
    ``{"nash", "runs", "pg", "compare"}``; the CLI subcommands use this.
    """
    base = Path(".")
    try:
        if isinstance(source, dict):
            raw = source
        else:
            text = str(source)
            if isinstance(source, Path) or not text.lstrip().startswith("{"):
                base = Path(source).resolve().parent
                text = Path(source).read_text()
            raw = json.loads(text)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    _require(isinstance(raw, dict), "config must be a JSON object")
    _unknown(raw, TOP_KEYS, "config")
    _require(raw.get("schema_version") == SCHEMA_VERSION,
             f"schema_version must be {SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
    _require("environment" in raw and isinstance(raw["environment"], dict), "config needs an 'environment' object")
    out = os.environ.get("MTPREF_OUTPUT_DIR") or raw.get("output_dir")
    _require(isinstance(out, str) and out, "config needs 'output_dir' (or set MTPREF_OUTPUT_DIR)")
    alpha = raw.get("alpha", 0.1)
    _require(isinstance(alpha, (int, float)) and alpha > 0, "alpha must be a positive number")
    cfg = ExperimentConfig(environment=raw["environment"], output_dir=(base / out).resolve(), alpha=float(alpha),
                           base_dir=base, raw=raw)
    _check_environment(cfg)

    nash = raw.get("nash", {})
    _require(isinstance(nash, dict), "'nash' must be an object")
    _unknown(nash, {"tolerance", "algorithm", "max_iter"}, "nash")
    _require(nash.get("algorithm", "mtpo") in ("mtpo", "mtpo_tau"), "nash.algorithm must be mtpo or mtpo_tau")
    cfg.nash = nash
    cfg.certify = "nash" in raw

    labels = set(BUILTIN_POLICIES)
    for i, r in enumerate(raw.get("runs", [])):
        _require(isinstance(r, dict), f"runs[{i}] must be an object")
        _unknown(r, RUN_KEYS, f"runs[{i}]")
        label = r.get("label", r.get("algorithm", f"run{i}"))
        _require(isinstance(label, str) and label.isidentifier() and label not in labels,
                 f"runs[{i}] label {label!r} must be a unique identifier")
        labels.add(label)
        _require(r.get("algorithm") in ALGORITHMS, f"runs[{i}].algorithm must be one of {ALGORITHMS}")
        try:
            solver = SolverConfig(algorithm=r["algorithm"], alpha=float(r.get("alpha", cfg.alpha)),
                                  iterations=int(r.get("iterations", 100)), schedule=r.get("schedule", "decay"),
                                  eta=r.get("eta"), diagnostics=bool(r.get("diagnostics", True)),
                                  rlhf_reward=_placeholder_reward(r), record_policies=False)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"runs[{i}]: {exc}") from exc
        cfg.runs.append(RunSpec(label, solver, bool(r.get("reference_nash", True))))

    for i, p in enumerate(raw.get("pg", [])):
        _require(isinstance(p, dict), f"pg[{i}] must be an object")
        _unknown(p, PG_KEYS, f"pg[{i}]")
        label = p.get("label", f"pg{i}")
        _require(isinstance(label, str) and label.isidentifier() and label not in labels,
                 f"pg[{i}] label {label!r} must be a unique identifier")
        labels.add(label)
        kw = {k: v for k, v in p.items() if k != "label"}
        kw.setdefault("alpha", cfg.alpha)
        try:
            cfg.pg.append(PgSpec(label, PgConfig(**kw)))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"pg[{i}]: {exc}") from exc

    compare = raw.get("compare", [])
    _require(isinstance(compare, list) and all(isinstance(s, str) for s in compare), "'compare' must be a list of labels")
    missing = [s for s in compare if s not in labels]
    _require(not missing, f"compare refers to unknown policies {missing}")
    _require(not compare or len(compare) >= 2, "compare needs at least two policies")
    cfg.compare = compare

    if sections is not None:
        sections = set(sections)
        if "runs" not in sections and "compare" not in sections:
            cfg.runs = []
        if "pg" not in sections and not ("compare" in sections and any(s.label in compare for s in cfg.pg)):
            cfg.pg = []
        if "compare" not in sections:
            cfg.compare = []
        cfg.certify = "nash" in sections
    return cfg


def _placeholder_reward(r: dict):
    if r.get("algorithm") != "rlhf_md":
        return None
    reward = r.get("reward")
    _require(reward is not None, "rlhf_md runs need 'reward': \"bt\" or a (contexts x final states) list")
    if reward == "bt":
        return TerminalReward(np.zeros((1, 1)))  # resolved once the environment exists
    try:
        return TerminalReward(np.asarray(reward, dtype=np.float64))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad rlhf reward: {exc}") from exc


def _check_environment(cfg: ExperimentConfig) -> None:
    env = cfg.environment
    if "generator" in env:
        _require(env["generator"] in GENERATORS, f"unknown generator {env['generator']!r}; "
                                                 f"expected one of {sorted(GENERATORS)}")
        _unknown(env, GENERATORS[env["generator"]][1] | {"generator"}, "environment")
    else:
        _unknown(env, {"cmdp", "preference"}, "environment")
        for key in ("cmdp", "preference"):
            _require(key in env, f"environment needs 'generator' or both 'cmdp' and 'preference' paths")
            _require((cfg.base_dir / env[key]).is_file(), f"environment.{key} file not found: {env[key]}")


def build_environment(cfg: ExperimentConfig) -> tuple[Cmdp, TerminalPreference]:
    env = cfg.environment
    try:
        if "generator" in env:
            fn = GENERATORS[env["generator"]][0]
            kw = {k: v for k, v in env.items() if k != "generator"}
            if "prices" in kw:
                kw["prices"] = tuple(kw["prices"])
            cmdp, pref = fn(**kw)
        else:
            cmdp = validate_cmdp(cfg.base_dir / env["cmdp"])
            pref = validate_preference(cfg.base_dir / env["preference"], cmdp)
    except (ValidationError, ValueError, TypeError) as exc:
        raise ConfigError(f"environment: {exc}") from exc
    for spec in cfg.runs:
        s = spec.solver
        if s.algorithm != "rlhf_md":
            continue
        raw = next(r for r in cfg.raw.get("runs", []) if r.get("label", r.get("algorithm")) == spec.label)
        if raw.get("reward") == "bt":
            _require(pref.form == "bt", f"run {spec.label}: reward 'bt' needs a Bradley-Terry environment")
            try:
                s.rlhf_reward = TerminalReward(chain_rewards(pref))
            except ValueError as exc:
                raise ConfigError(f"run {spec.label}: {exc}") from exc
        _require(s.rlhf_reward.r.shape == (cmdp.n_contexts, cmdp.n_terminal),
                 f"run {spec.label}: reward shape {s.rlhf_reward.r.shape} does not match the environment")
    return cmdp, pref


# --------------------------------------------------------------------------- writing


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _write(root: Path, rel: str, text: str, written: list) -> None:
    path = root / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    written.append(rel)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _trace_csv(trace) -> str:
    rows = [["" if getattr(r, k) is None else repr(getattr(r, k)) for k in TRACE_COLUMNS] for r in trace.records]
    return _csv_text(TRACE_COLUMNS, rows)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _run_one(args):
    cmdp, pref, spec, nash = args
    obj = pref if spec.solver.algorithm != "rlhf_md" else None
    ref = nash if (spec.reference_nash and spec.solver.algorithm != "rlhf_md") else None
    try:
        return run(cmdp, obj, spec.solver, reference_nash=ref), None
    except BoundViolation as exc:
        return exc.trace, {"iteration": exc.iteration, "check": exc.check, "slack": exc.slack}


def _jobs() -> int:
    try:
        return max(1, int(os.environ.get("MTPREF_JOBS", "1")))
    except ValueError:
        return 1


def side_by_side(cmdp: Cmdp, pref: TerminalPreference, policies) -> SideBySideMatrix:
    """Exact ``M[i, j] = P(pi_i > pi_j)`` for a labeled list of policies."""
    policies = list(policies)
    if len(policies) < 2:
        raise ValueError("side_by_side needs at least two policies")
    labels = [lbl for lbl, _ in policies]
    n = len(policies)
    M = np.empty((n, n))
    for i, (_, p) in enumerate(policies):
        for j, (_, q) in enumerate(policies):
            M[i, j] = policy_preference(cmdp, pref, p, q)
    err = max(np.abs(M + M.T - 1.0).max(), np.abs(np.diag(M) - 0.5).max())
    if err > ANTISYMMETRY_TOL:
        raise AssertionError(f"side-by-side matrix breaks anti-symmetry by {err:.3e}")
    return SideBySideMatrix(labels, M)


def expected_terminal_reward(cmdp: Cmdp, rewards: np.ndarray, policy: Policy) -> float:
    d = terminal_marginals(cmdp, policy)
    return float(cmdp.context_probs @ (d * rewards).sum(axis=1))


def run_experiment(config, sections=None) -> ExperimentResult:
    """Execute an experiment.  Exit code 0 on success, 1 if a diagnosed bound failed,
    2 for a malformed config (in which case nothing is written)."""
    if not isinstance(config, ExperimentConfig):
        config = load_config(config, sections)
    cmdp, pref = build_environment(config)
    root = Path(config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    stale = root / "MANIFEST.json"
    if stale.exists():
        stale.unlink()
    written: list = []
    failures: list = []
    policies: dict = {"mu": cmdp.reference_policy}
    stage = "setup"
    try:
        _write(root, "config.json", _dumps(config.raw), written)
        _write(root, "environment/cmdp.json", _dumps(cmdp_to_dict(cmdp)), written)
        _write(root, "environment/preference.json", _dumps(preference_to_dict(cmdp, pref)), written)

        nash = None
        if config.needs_nash:
            stage = "nash"
            cert = nash_solve(cmdp, pref, config.alpha, tolerance=config.nash.get("tolerance", 1e-8),
                              max_iter=config.nash.get("max_iter", 200_000),
                              algorithm=config.nash.get("algorithm", "mtpo"))
            nash = cert.policy
            policies["nash"] = nash
            _write(root, "nash/certificate.json", _dumps(cert.to_dict(cmdp)), written)

        stage = "runs"
        jobs = [(cmdp, pref, spec, nash if spec.solver.alpha == config.alpha else None) for spec in config.runs]
        if _jobs() > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=_jobs()) as ex:
                results = list(ex.map(_run_one, jobs))
        else:
            results = [_run_one(j) for j in jobs]
        for spec, (trace, failure) in zip(config.runs, results):
            d = f"runs/{spec.label}"
            _write(root, f"{d}/trace.csv", _trace_csv(trace), written)
            if failure is not None:
                failures.append({"stage": "runs", "run": spec.label, **failure})
                logger.error("run %s: %s violated at iteration %d", spec.label, failure["check"], failure["iteration"])
                continue
            policies[spec.label] = trace.final_policy
            summary = trace.summary(cmdp, pref, include_time=False)
            summary["label"] = spec.label
            _write(root, f"{d}/summary.json", _dumps(summary), written)
            _write(root, f"{d}/final_policy.json", _dumps({"policy": trace.final_policy.probs.tolist()}), written)

        stage = "pg"
        for spec in config.pg:
            tr = pg_train(cmdp, pref, spec.config, nash=nash)
            pol = tr.theta.policy(cmdp)
            policies[spec.label] = pol
            tr_rows = [[r["step"]] + [repr(float(r[k])) for k in PG_COLUMNS[1:]] for r in tr.rows]
            _write(root, f"pg/{spec.label}/trace.csv", _csv_text(PG_COLUMNS, tr_rows), written)
            _write(root, f"pg/{spec.label}/final_policy.json", _dumps({"policy": pol.probs.tolist()}), written)

        stage = "compare"
        if config.compare:
            usable = [(s, policies[s]) for s in config.compare if s in policies]
            if len(usable) >= 2:
                sbs = side_by_side(cmdp, pref, usable)
                rows = [[a] + [repr(float(v)) for v in row] for a, row in zip(sbs.labels, sbs.matrix)]
                _write(root, "compare/side_by_side.csv", _csv_text(["policy"] + sbs.labels, rows), written)
                if pref.form == "bt":
                    r01 = chain_rewards(pref)
                    rew = [[s, repr(expected_terminal_reward(cmdp, r01, p))] for s, p in usable]
                    _write(root, "compare/expected_reward.csv", _csv_text(["policy", "expected_reward"], rew), written)
        stage = "done"
    except Exception as exc:
        _write_manifest(root, written, "failed", [{"stage": stage, "error": f"{type(exc).__name__}: {exc}"}],
                        EXIT_BOUND)
        raise

    code = EXIT_BOUND if failures else EXIT_OK
    manifest = _write_manifest(root, written, "failed" if failures else "complete", failures, code)
    return ExperimentResult(code, root, manifest)


def _write_manifest(root: Path, written: list, status: str, failures: list, code: int) -> dict:
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "status": status,
        "exit_code": code,
        "failures": failures,
        "files": [{"path": rel, "sha256": _sha256(root / rel)} for rel in sorted(written)],
    }
    (root / "MANIFEST.json").write_text(_dumps(manifest))
    return manifest


# --------------------------------------------------------------------------- report


def fit_loglog_slope(t: np.ndarray, kl: np.ndarray, floor: float = KL_FLOOR) -> float | None:
    """Least-squares slope of ``log KL`` against ``log(t + 1)`` over entries above ``floor``.

    Returns ``None`` when fewer than three usable points remain.
    """
    t = np.asarray(t, dtype=np.float64)
    kl = np.asarray(kl, dtype=np.float64)
    keep = np.isfinite(kl) & (kl > floor)
    if keep.sum() < 3:
        return None
    slope, _ = np.polyfit(np.log(t[keep] + 1.0), np.log(kl[keep]), 1)
    return float(slope)


def _read_csv(path: Path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _f(s) -> float:
    return float(s) if s not in ("", None) else math.nan


def report(exp_dir) -> str:
    """Summarize a finished experiment directory.

    Writes ``report.txt`` plus tidy CSVs under ``report/`` and returns the text.
    Raises :class:`MissingArtifacts` if the directory holds no completed experiment.
    """
    root = Path(exp_dir)
    mpath = root / "MANIFEST.json"
    if not mpath.is_file():
        raise MissingArtifacts(f"{root}: no MANIFEST.json")
    manifest = json.loads(mpath.read_text())
    files = [f["path"] for f in manifest["files"]]
    traces = sorted(p for p in files if p.startswith("runs/") and p.endswith("/trace.csv"))
    pg_traces = sorted(p for p in files if p.startswith("pg/") and p.endswith("/trace.csv"))
    if not traces and not pg_traces and "compare/side_by_side.csv" not in files and "nash/certificate.json" not in files:
        raise MissingArtifacts(f"{root}: manifest lists no results")
    for rel in files:
        if not (root / rel).is_file():
            raise MissingArtifacts(f"{root}: {rel} listed in the manifest is missing")

    lines = [f"status: {manifest['status']} (exit {manifest['exit_code']})", ""]
    for fail in manifest["failures"]:
        lines.append("FAILURE: " + ", ".join(f"{k}={fail[k]}" for k in sorted(fail)))
    if manifest["failures"]:
        lines.append("")

    if "nash/certificate.json" in files:
        cert = json.loads((root / "nash/certificate.json").read_text())
        lines += ["nash certificate",
                  f"  residual        {cert['residual']:.3e}",
                  f"  exploitability  {cert['exploitability']:.3e}",
                  f"  KL(nash || mu)  {cert['kl_to_mu']:.6f}  (limit 1/(2 alpha) = {0.5 / cert['alpha']:.6f})",
                  f"  iterations      {cert['iterations_used']}", ""]

    conv_rows, summary_rows = [], []
    if traces:
        lines.append("solver runs")
        lines.append(f"  {'run':<16}{'T':>6}{'final KL':>12}{'slope':>9}{'min margin':>13}{'min FI slack':>14}"
                     f"{'final expl':>12}")
    for rel in traces:
        label = rel.split("/")[1]
        rows = _read_csv(root / rel)
        t = np.array([int(r["t"]) for r in rows])
        kl = np.array([_f(r["kl_to_nash"]) for r in rows])
        margin = np.array([_f(r["bound_margin"]) for r in rows])
        slack = np.array([_f(r["fi_slack"]) for r in rows])
        expl = np.array([_f(r["exploitability"]) for r in rows])
        slope = fit_loglog_slope(t, kl)
        for r in rows:
            conv_rows.append([label, r["t"], r["kl_to_nash"], r["exploitability"], r["bound_margin"], r["fi_slack"]])

        def fmt(a, op):
            a = a[np.isfinite(a)]
            return f"{op(a):.3e}" if a.size else "-"

        last = lambda a: a[-1]  # noqa: E731
        summary_rows.append([label, len(rows), fmt(kl, last), "" if slope is None else f"{slope:.4f}",
                             fmt(margin, np.min), fmt(slack, np.min), fmt(expl, last)])
        s = summary_rows[-1]
        lines.append(f"  {label:<16}{s[1]:>6}{s[2]:>12}{(s[3] or '-'):>9}{s[4]:>13}{s[5]:>14}{s[6]:>12}")
    if traces:
        lines += ["  slope: least-squares fit of log KL-to-Nash vs log(t+1) above 1e-12; a 1/t rate has slope -1", ""]

    pg_rows = []
    for rel in pg_traces:
        label = rel.split("/")[1]
        rows = _read_csv(root / rel)
        last = rows[-1]
        pg_rows.append([label, last["step"], last["exploitability"], last["pref_vs_nash"]])
    if pg_rows:
        lines.append("policy-gradient runs")
        for label, step, ex, pv in pg_rows:
            lines.append(f"  {label:<16} steps {step:>8}  exploitability {float(ex):.3e}  P(pg > nash) {float(pv):.4f}")
        lines.append("")

    sbs_rows = []
    if "compare/side_by_side.csv" in files:
        rows = _read_csv(root / "compare/side_by_side.csv")
        labels = [r["policy"] for r in rows]
        M = np.array([[float(r[c]) for c in labels] for r in rows])
        lines += ["side-by-side P(row > column)", SideBySideMatrix(labels, M).to_text().rstrip("\n"), ""]
        sbs_rows = [[a, b, repr(float(M[i, j]))] for i, a in enumerate(labels) for j, b in enumerate(labels)]
    if "compare/expected_reward.csv" in files:
        lines.append("expected final-state reward")
        for r in _read_csv(root / "compare/expected_reward.csv"):
            lines.append(f"  {r['policy']:<16}{float(r['expected_reward']):.6f}")
        lines.append("")

    text = "\n".join(lines).rstrip("\n") + "\n"
    (root / "report").mkdir(exist_ok=True)
    (root / "report/convergence.csv").write_text(
        _csv_text(["run", "t", "kl_to_nash", "exploitability", "bound_margin", "fi_slack"], conv_rows))
    (root / "report/runs.csv").write_text(
        _csv_text(["run", "iterations", "final_kl", "loglog_slope", "min_bound_margin", "min_fi_slack",
                   "final_exploitability"], summary_rows))
    (root / "report/side_by_side_long.csv").write_text(_csv_text(["row", "column", "prob"], sbs_rows))
    (root / "report.txt").write_text(text)
    return text


def load_policy(cmdp: Cmdp, path) -> Policy:
    return make_policy(cmdp, np.asarray(json.loads(Path(path).read_text())["policy"]))
