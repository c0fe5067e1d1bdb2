"""Multi-seed experiment driver: TOML config, CSV traces, summaries and bound re-checks.

Config schema (unknown keys are errors)::

    [experiment]
    env = "gambler"                 # required: gambler | nchain | frozenlake
    algorithms = ["RCPO", "CPO", "PCPO", "RVI"]
    seeds = [0, 1, 2, 3, 4]
    output_dir = "runs/gambler"     # RCPO_OUTPUT_DIR overrides it
    emit_plots = true
    eval_every = 1

    [env]                           # documented knobs of the chosen environment
    radius = 0.1

    [rcpo]                          # RcpoConfig fields
    delta = 0.01
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import tomli
import tomli_w

from .baselines import TRAINERS
from .envs import ENV_DEFAULTS, EnvSpec
from .solver import IterationRecord, RcpoConfig, initial_policy

OUTPUT_ENV_VAR = "RCPO_OUTPUT_DIR"
ALGORITHMS = ("RCPO", "CPO", "PCPO", "RVI")
DEFAULT_ITERATIONS = {"gambler": 100, "nchain": 150, "frozenlake": 100}
DEFAULT_SEEDS = (0, 1, 2, 3, 4)

TRACE_COLUMNS = (
    "algorithm",
    "seed",
    "iteration",
    "robust_reward_raw",
    "robust_utility_raw",
    "nominal_reward_raw",
    "nominal_utility_raw",
    "robust_reward_norm",
    "robust_utility_norm",
    "b",
    "realized_kl",
    "eps_reward",
    "eps_utility",
    "m_estimate",
    "thm_reward_rhs",
    "thm_utility_rhs",
    "reward_bound_ok",
    "utility_bound_ok",
    "kl_lemma_ok",
    "flags",
)
SUMMARY_COLUMNS = ("algorithm", "iteration", "metric", "mean", "std")
SUMMARY_METRICS = ("robust_reward_raw", "robust_utility_raw", "nominal_reward_raw", "nominal_utility_raw")
NOT_APPLICABLE = "not_applicable"


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvSpec
    algorithms: tuple[str, ...] = ALGORITHMS
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    rcpo: RcpoConfig = field(default_factory=RcpoConfig)
    output_dir: Path = Path("runs")
    emit_plots: bool = True
    eval_every: int = 1

    def __post_init__(self):
        if not self.algorithms:
            raise ConfigError("experiment.algorithms: must not be empty")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad:
            raise ConfigError(f"experiment.algorithms: unknown {bad}; expected a subset of {list(ALGORITHMS)}")
        if len(set(self.algorithms)) != len(self.algorithms):
            raise ConfigError("experiment.algorithms: duplicates")
        if not self.seeds:
            raise ConfigError("experiment.seeds: must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("experiment.seeds: must be distinct")
        if self.eval_every < 1:
            raise ConfigError("experiment.eval_every: must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        """Fully resolved config, loadable again by :func:`config_from_dict`."""
        return {
            "experiment": {
                "env": self.env.name,
                "algorithms": list(self.algorithms),
                "seeds": list(self.seeds),
                "output_dir": str(self.output_dir),
                "emit_plots": self.emit_plots,
                "eval_every": self.eval_every,
            },
            "env": self.env.resolved(),
            "rcpo": asdict(self.rcpo),
        }


_EXPERIMENT_KEYS = {"env", "algorithms", "seeds", "output_dir", "emit_plots", "eval_every"}
_RCPO_DEFAULTS = {f.name: f.default for f in fields(RcpoConfig)}


def _expect(value, kinds, name):
    # bool is an int subclass; reject it where a number is meant
    if isinstance(value, bool) and bool not in kinds:
        raise ConfigError(f"{name}: expected {' or '.join(k.__name__ for k in kinds)}, got bool")
    if not isinstance(value, kinds):
        raise ConfigError(f"{name}: expected {' or '.join(k.__name__ for k in kinds)}, got {type(value).__name__}")
    return value


def config_from_dict(raw: dict[str, Any], environ: dict[str, str] | None = None) -> ExperimentConfig:
    environ = os.environ if environ is None else environ
    unknown = set(raw) - {"experiment", "env", "rcpo"}
    if unknown:
        raise ConfigError(f"unknown top-level table(s): {sorted(unknown)}")
    exp = raw.get("experiment")
    if not isinstance(exp, dict):
        raise ConfigError("experiment: missing table [experiment]")
    unknown = set(exp) - _EXPERIMENT_KEYS
    if unknown:
        raise ConfigError(f"experiment: unknown key(s) {sorted(unknown)}")
    if "env" not in exp:
        raise ConfigError(f"experiment.env: missing required field; expected one of {sorted(ENV_DEFAULTS)}")
    env_name = _expect(exp["env"], (str,), "experiment.env")
    if env_name not in ENV_DEFAULTS:
        raise ConfigError(f"experiment.env: unknown environment {env_name!r}; expected one of {sorted(ENV_DEFAULTS)}")

    overrides = _expect(raw.get("env", {}), (dict,), "env")
    allowed = ENV_DEFAULTS[env_name]
    for key, value in overrides.items():
        if key not in allowed:
            raise ConfigError(f"env.{key}: unknown knob for {env_name}; expected one of {sorted(allowed)}")
        default = allowed[key]
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            _expect(value, (int, float), f"env.{key}")
    try:
        env = EnvSpec(env_name, dict(overrides))
    except ValueError as exc:
        raise ConfigError(f"env: {exc}") from exc

    rcpo_raw = _expect(raw.get("rcpo", {}), (dict,), "rcpo")
    for key in rcpo_raw:
        if key not in _RCPO_DEFAULTS:
            raise ConfigError(f"rcpo.{key}: unknown key; expected one of {sorted(_RCPO_DEFAULTS)}")
    rcpo_kwargs = dict(rcpo_raw)
    rcpo_kwargs.setdefault("max_iterations", DEFAULT_ITERATIONS[env_name])
    for key, value in rcpo_kwargs.items():
        default = _RCPO_DEFAULTS[key]
        if isinstance(default, bool):
            _expect(value, (bool,), f"rcpo.{key}")
        elif isinstance(default, int):
            _expect(value, (int,), f"rcpo.{key}")
        elif isinstance(default, float):
            _expect(value, (int, float), f"rcpo.{key}")
        elif isinstance(default, str):
            _expect(value, (str,), f"rcpo.{key}")
    try:
        rcpo = RcpoConfig(**rcpo_kwargs)
    except ValueError as exc:
        raise ConfigError(f"rcpo: {exc}") from exc

    algorithms = tuple(_expect(exp.get("algorithms", list(ALGORITHMS)), (list,), "experiment.algorithms"))
    for a in algorithms:
        _expect(a, (str,), "experiment.algorithms[]")
    seeds = tuple(_expect(exp.get("seeds", list(DEFAULT_SEEDS)), (list,), "experiment.seeds"))
    for s in seeds:
        _expect(s, (int,), "experiment.seeds[]")
    output_dir = environ.get(OUTPUT_ENV_VAR) or _expect(exp.get("output_dir", f"runs/{env_name}"), (str,), "experiment.output_dir")
    return ExperimentConfig(
        env=env,
        algorithms=algorithms,
        seeds=seeds,
        rcpo=rcpo,
        output_dir=Path(output_dir),
        emit_plots=_expect(exp.get("emit_plots", True), (bool,), "experiment.emit_plots"),
        eval_every=_expect(exp.get("eval_every", 1), (int,), "experiment.eval_every"),
    )


def load_config(path: str | os.PathLike, environ: dict[str, str] | None = None) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
    return config_from_dict(raw, environ)


def dump_config(config: ExperimentConfig) -> str:
    return tomli_w.dumps(config.to_dict())


# --------------------------------------------------------------------------- running


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_bool(value: bool, applicable: bool) -> str:
    if not applicable:
        return "na"
    return "true" if value else "false"


def trace_row(algorithm: str, seed: int, rec: IterationRecord, reward_scale: float, utility_scale: float) -> list[str]:
    applicable = NOT_APPLICABLE not in rec.flags
    return [
        algorithm,
        str(seed),
        str(rec.iteration),
        _fmt(rec.robust_reward_return * reward_scale),
        _fmt(rec.robust_utility_return * utility_scale),
        _fmt(rec.nominal_reward_return * reward_scale),
        _fmt(rec.nominal_utility_return * utility_scale),
        _fmt(rec.robust_reward_return),
        _fmt(rec.robust_utility_return),
        _fmt(rec.b),
        _fmt(rec.realized_kl_step),
        _fmt(rec.eps_reward),
        _fmt(rec.eps_utility),
        _fmt(rec.m_estimate),
        _fmt(rec.theorem_reward_rhs),
        _fmt(rec.theorem_utility_rhs),
        _fmt_bool(rec.bounds_hold[0], applicable),
        _fmt_bool(rec.bounds_hold[1], applicable),
        _fmt_bool(rec.kl_lemma_ok, applicable),
        ";".join(rec.flags),
    ]


def run_traces(config: ExperimentConfig) -> dict[tuple[str, int], list[IterationRecord]]:
    """Train every (algorithm, seed) pair.

    Seeds only enter through the initial-policy perturbation, so with
    ``init_noise = 0`` (and always for RVI) a run is computed once and shared
    by all seeds; the result is identical to recomputing it.
    """
    cmdp, u = config.env.build()
    traces: dict[tuple[str, int], list[IterationRecord]] = {}
    for algorithm in config.algorithms:
        trainer = TRAINERS[algorithm]
        seed_invariant = algorithm == "RVI" or config.rcpo.init_noise <= 0
        shared = None
        for seed in config.seeds:
            if seed_invariant and shared is not None:
                traces[(algorithm, seed)] = shared
                continue
            pi_0 = initial_policy(cmdp, config.rcpo, seed)
            _, trace = trainer(cmdp, u, config.rcpo, pi_0, eval_every=config.eval_every)
            traces[(algorithm, seed)] = trace
            shared = trace
    return traces


def write_trace(path: Path, traces: dict[tuple[str, int], list[IterationRecord]], reward_scale: float, utility_scale: float) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for (algorithm, seed), trace in traces.items():
            for rec in trace:
                writer.writerow(trace_row(algorithm, seed, rec, reward_scale, utility_scale))


def read_trace(path: str | os.PathLike) -> list[dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing trace file {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return list(reader)


def summarize(rows: list[dict[str, str]]) -> list[tuple[str, int, str, float, float]]:
    """Per (algorithm, iteration, metric): mean and population standard deviation across seeds."""
    groups: dict[tuple[str, int], list[dict[str, str]]] = {}
    order: list[tuple[str, int]] = []
    for row in rows:
        key = (row["algorithm"], int(row["iteration"]))
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(row)
    out = []
    for algorithm, iteration in order:
        group = groups[(algorithm, iteration)]
        for metric in SUMMARY_METRICS:
            values = np.array([float(r[metric]) for r in group])
            out.append((algorithm, iteration, metric, float(values.mean()), float(values.std())))
    return out


def write_summary(path: Path, rows: list[dict[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for algorithm, iteration, metric, mean, std in summarize(rows):
            writer.writerow([algorithm, iteration, metric, _fmt(mean), _fmt(std)])


def read_summary(path: str | os.PathLike) -> list[dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing summary file {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SUMMARY_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return list(reader)


def run_experiment(config: ExperimentConfig) -> Path:
    """Run all (algorithm, seed) pairs and write trace.csv, summary.csv, config_echo.toml (and plots)."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cmdp, _ = config.env.build()
    traces = run_traces(config)
    (out / "config_echo.toml").write_text(dump_config(config), encoding="utf-8")
    write_trace(out / "trace.csv", traces, cmdp.reward_scale, cmdp.utility_scale)
    write_summary(out / "summary.csv", read_trace(out / "trace.csv"))
    if config.emit_plots:
        from .plots import emit_plots

        emit_plots(out)
    return out


def read_config_echo(trace_dir: str | os.PathLike) -> dict[str, Any] | None:
    path = Path(trace_dir) / "config_echo.toml"
    if not path.is_file():
        return None
    with open(path, "rb") as fh:
        return tomli.load(fh)


# --------------------------------------------------------------------------- bound re-checks

BOUND_SLACK = 1e-6
CHECK_COLUMNS = ("kl_feasible", "reward_bound", "utility_bound", "kl_infeasible")


@dataclass
class BoundTally:
    algorithm: str
    rows: int = 0
    feasible: int = 0
    passed: dict[str, int] = field(default_factory=lambda: {c: 0 for c in CHECK_COLUMNS})
    checked: dict[str, int] = field(default_factory=lambda: {c: 0 for c in CHECK_COLUMNS})
    mismatches: int = 0

    def record(self, column: str, ok: bool) -> None:
        self.checked[column] += 1
        self.passed[column] += int(ok)

    @property
    def ok(self) -> bool:
        return self.mismatches == 0 and all(self.passed[c] == self.checked[c] for c in CHECK_COLUMNS)


def check_bounds(trace_dir: str | os.PathLike, delta: float | None = None) -> list[BoundTally]:
    """Recompute the per-iteration bound checks from trace.csv.

    The trust-region check on feasible rows and the utility bound are recomputed from the
    recorded columns; the reward bound is recomputed from consecutive rows and
    falls back to the recorded flag for rows without a predecessor. The
    infeasible-row KL check (heuristic constant) is taken from the recorded
    flag. Any recomputed value that disagrees with its recorded flag counts as
    a mismatch.
    """
    rows = read_trace(Path(trace_dir) / "trace.csv")
    if delta is None:
        echo = read_config_echo(trace_dir)
        delta = float(echo["rcpo"]["delta"]) if echo else RcpoConfig().delta
    tallies: dict[str, BoundTally] = {}
    previous: dict[tuple[str, str], dict[str, str]] = {}
    for row in rows:
        algorithm = row["algorithm"]
        tally = tallies.setdefault(algorithm, BoundTally(algorithm))
        tally.rows += 1
        key = (algorithm, row["seed"])
        prev = previous.get(key)
        previous[key] = row
        if NOT_APPLICABLE in row["flags"].split(";"):
            continue
        b = float(row["b"])
        feasible = b <= 0
        tally.feasible += int(feasible)
        kl = float(row["realized_kl"])
        recorded_kl = row["kl_lemma_ok"] == "true"
        if feasible:
            ok = kl <= delta + BOUND_SLACK
            tally.record("kl_feasible", ok)
            tally.mismatches += int(ok != recorded_kl)
        else:
            tally.record("kl_infeasible", recorded_kl)
        util_ok = float(row["robust_utility_norm"]) >= float(row["thm_utility_rhs"]) - BOUND_SLACK
        tally.mismatches += int(util_ok != (row["utility_bound_ok"] == "true"))
        recorded_reward = row["reward_bound_ok"] == "true"
        if prev is not None and int(row["iteration"]) == int(prev["iteration"]) + 1:
            gain = float(row["robust_reward_norm"]) - float(prev["robust_reward_norm"])
            reward_ok = gain >= float(row["thm_reward_rhs"]) - BOUND_SLACK
            tally.mismatches += int(reward_ok != recorded_reward)
        else:
            reward_ok = recorded_reward
        # the theorem statements cover feasible iterates; infeasible rows use the enlarged radius
        tally.record("reward_bound", reward_ok)
        tally.record("utility_bound", util_ok)
    if not tallies:
        raise ValueError(f"{trace_dir}: empty trace")
    return list(tallies.values())


def format_bound_table(tallies: list[BoundTally]) -> str:
    header = ["algorithm", "rows", "feasible", *CHECK_COLUMNS, "mismatches", "status"]
    lines = [header]
    for t in tallies:
        cells = [t.algorithm, str(t.rows), str(t.feasible)]
        for c in CHECK_COLUMNS:
            cells.append(f"{t.passed[c]}/{t.checked[c]}" if t.checked[c] else "n/a")
        applicable = any(t.checked.values())
        cells += [str(t.mismatches), ("PASS" if t.ok else "FAIL") if applicable else "n/a"]
        lines.append(cells)
    widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
    text = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in lines]
    text.append("M is estimated over materialized kernels (a lower bound), so the bound columns are necessary-condition checks; kl_infeasible uses a heuristic constant.")
    return "\n".join(text)


def gated(tallies: list[BoundTally], algorithms: tuple[str, ...] = ("RCPO",)) -> bool:
    """True when every gated algorithm passes; the theorems are statements about RCPO."""
    return all(t.ok for t in tallies if t.algorithm in algorithms)
