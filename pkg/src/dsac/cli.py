"""Command-line entry point: ``train``, ``evaluate``, ``verify`` and ``plot-data``.

Run configuration is a flat ``dotted.key = value`` text file; flags and
``--set key=value`` pairs override it.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import neuro as nn
from .agent import (
    AgentConfig,
    TrainConfig,
    evaluate,
    load_checkpoint,
    read_config_hash,
    train,
)
from .envs import chain_mdp, make_env, random_mdp
from .oracle import format_report, verify_mdp
from .risk import RiskSpec

log = logging.getLogger("dsac")

AGENT_KEYS = {f.name for f in fields(AgentConfig)} - {"risk", "scheme"}
RUN_KEYS = ("seeds", "steps", "eval_every", "eval_episodes", "checkpoint_every", "out")
RISK_NAMES = ("neutral", "var", "mean_variance", "cpw", "wang", "cvar")


# ---------------------------------------------------------------- config


@dataclass
class RunConfig:
    env: str = "pendulum"
    env_params: dict = field(default_factory=dict)
    agent: dict = field(default_factory=dict)
    scheme: str = "random"
    risk: str = "neutral"
    beta: float = 0.0
    seeds: tuple[int, ...] = (0,)
    steps: int = 50_000
    eval_every: int = 5_000
    eval_episodes: int = 10
    checkpoint_every: int = 0
    out: str = "runs/default"

    def risk_spec(self) -> RiskSpec:
        return RiskSpec.parse(self.risk, self.beta)

    def agent_config(self) -> AgentConfig:
        return AgentConfig(**self.agent, scheme=self.scheme, risk=self.risk_spec())

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(env=self.env, env_params=tuple(sorted(self.env_params.items())),
                           agent=self.agent_config(), seed=seed, steps=self.steps,
                           eval_every=self.eval_every, eval_episodes=self.eval_episodes,
                           checkpoint_every=self.checkpoint_every,
                           out=str(Path(self.out) / f"seed_{seed}"))

    def items(self) -> dict[str, object]:
        """Every resolved key, defaults included, in canonical order."""
        defaults = AgentConfig()
        out: dict[str, object] = {"env.name": self.env}
        out.update({f"env.{k}": v for k, v in sorted(self.env_params.items())})
        for k in sorted(AGENT_KEYS):
            out[f"agent.{k}"] = self.agent.get(k, getattr(defaults, k))
        out["fractions.scheme"] = self.scheme
        out["risk.kind"] = self.risk
        out["risk.beta"] = self.beta
        for k in RUN_KEYS:
            out[f"run.{k}"] = getattr(self, k)
        return out

    def serialize(self, include_out: bool = True) -> str:
        lines = []
        for key, value in self.items().items():
            if key == "run.out" and not include_out:
                continue
            lines.append(f"{key} = {_format_value(value)}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.serialize(include_out=False).encode()).hexdigest()[:16]


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _literal(text: str):
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _as_number(key: str, value, kind: type):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise nn.ConfigurationError(f"{key}: expected a number, got {value!r}")
    if kind is int:
        if float(value) != int(value):
            raise nn.ConfigurationError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    return float(value)


def _apply(cfg: RunConfig, key: str, raw: str, where: str) -> None:
    value = _literal(raw)
    section, _, name = key.partition(".")
    try:
        if section == "env" and name == "name":
            cfg.env = str(value)
        elif section == "env" and name:
            cfg.env_params[name] = value
        elif section == "agent" and name in AGENT_KEYS:
            kind = type(getattr(AgentConfig(), name))
            cfg.agent[name] = _as_number(key, value, kind)
        elif key == "fractions.scheme":
            cfg.scheme = str(value)
        elif key == "risk.kind":
            cfg.risk = str(value).lower()
        elif key == "risk.beta":
            cfg.beta = _as_number(key, value, float)
        elif key == "run.seeds":
            cfg.seeds = tuple(_as_number(key, _literal(s), int) for s in str(raw).split(",") if s.strip())
        elif section == "run" and name in RUN_KEYS:
            if name == "out":
                cfg.out = str(raw).strip()
            else:
                setattr(cfg, name, _as_number(key, value, int))
        else:
            raise nn.ConfigurationError(f"unknown key {key!r}")
    except nn.ConfigurationError as exc:
        raise nn.ConfigurationError(f"{where}: {exc}") from None


def validate(cfg: RunConfig) -> RunConfig:
    """Build every downstream object once so range errors surface before any work."""
    if cfg.risk not in RISK_NAMES:
        raise nn.ConfigurationError(f"risk.kind: unknown risk {cfg.risk!r}; expected one of {RISK_NAMES}")
    try:
        cfg.risk_spec()
    except ValueError as exc:
        raise nn.ConfigurationError(f"risk.beta: {exc}") from None
    cfg.agent_config()
    make_env(cfg.env, **cfg.env_params)
    if not cfg.seeds:
        raise nn.ConfigurationError("run.seeds: at least one seed is required")
    for name in ("steps", "eval_every", "eval_episodes", "checkpoint_every"):
        if getattr(cfg, name) < 0:
            raise nn.ConfigurationError(f"run.{name}: must be non-negative")
    return cfg


def parse_config(path: str | Path | None = None, overrides: list[tuple[str, str]] | None = None) -> RunConfig:
    """Resolve a config file plus ``(key, value)`` overrides into a validated RunConfig."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} does not exist")
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise nn.ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
            _apply(cfg, key.strip(), value, f"{path}:{lineno}")
    for key, value in overrides or []:
        _apply(cfg, key, value, "override")
    return validate(cfg)


def _split_assignment(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep:
        raise nn.ConfigurationError(f"--set expects key=value, got {text!r}")
    return key.strip(), value


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    overrides = [_split_assignment(s) for s in args.set]
    for flag, key in (("env", "env.name"), ("steps", "run.steps"), ("risk", "risk.kind"),
                      ("beta", "risk.beta"), ("seed", "run.seeds"), ("out", "run.out")):
        if getattr(args, flag) is not None:
            overrides.append((key, str(getattr(args, flag))))
    cfg = parse_config(args.config, overrides)
    digest = cfg.config_hash()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(f"# config_hash={digest}\n" + cfg.serialize())
    for seed in cfg.seeds:
        result = train(cfg.train_config(seed), config_hash=digest, resume=args.resume)
        last = result.last_eval
        status = f"eval return {last.mean:.3f}" if last is not None else "no evaluation"
        print(f"seed {seed}: {status}; metrics at {result.metrics_path}")
    return 0


def _latest_checkpoint(path: Path) -> Path:
    if path.is_file():
        return path
    found = sorted(path.rglob("checkpoint_*.npz"), key=lambda p: (str(p.parent), int(p.stem.split("_")[1])))
    if not found:
        raise FileNotFoundError(f"no checkpoint_<step>.npz under {path}")
    return found[-1]


def cmd_evaluate(args) -> int:
    ckpt_path = _latest_checkpoint(Path(args.checkpoint))
    ckpt = load_checkpoint(ckpt_path)
    env_name = args.env or ckpt.meta["env"]
    risk = RiskSpec.parse(args.risk or "neutral", args.beta or 0.0)
    env = make_env(env_name, seed=args.seed)
    summary = evaluate(ckpt, env, args.episodes, risk, seed=args.seed)
    out = Path(args.out) if args.out else ckpt_path.parent
    out.mkdir(parents=True, exist_ok=True)
    path = out / "summary.csv"
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={ckpt.meta.get('config_hash', '')}\n")
        writer = csv.writer(fh, lineterminator="\n")
        q_cols = [f"q{int(round(q * 100)):02d}" for q in summary.quantiles]
        writer.writerow(["checkpoint", "episodes", "empty", "mean", "std", "failure_rate", "risk",
                         "risk_value", *q_cols])
        writer.writerow([ckpt_path.name, summary.episodes, int(summary.empty), repr(summary.mean),
                         repr(summary.std), repr(summary.failure_rate), risk.label, repr(summary.risk_value),
                         *(repr(v) for v in summary.quantiles.values())])
    if summary.empty:
        warnings.warn("evaluated 0 episodes; the summary is empty", stacklevel=1)
        print(f"empty summary written to {path}")
    else:
        print(f"mean {summary.mean:.3f} std {summary.std:.3f} failure rate {summary.failure_rate:.3f} "
              f"({risk.label} {summary.risk_value:.3f}); written to {path}")
    return 0


def cmd_verify(args) -> int:
    if args.mdp == "chain":
        mdp = chain_mdp(gamma=args.gamma)
    else:
        mdp = random_mdp(np.random.default_rng(args.seed), 4, 3, args.gamma, reward_outcomes=2)
    results = verify_mdp(mdp, alpha=args.alpha, seed=args.seed, trials=args.trials)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256(f"{args.mdp}|{args.gamma!r}|{args.alpha!r}|{args.seed}|{args.trials}".encode()).hexdigest()[:16]
    report = format_report(results)
    (out / "verify_report.txt").write_text(f"# config_hash={digest}\n# mdp={mdp.name}\n" + report)
    with open(out / "verify.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={digest}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["check", "passed", "measured", "bound", "detail"])
        for r in results:
            writer.writerow([r.name, int(r.passed), repr(float(r.measured)), repr(float(r.bound)), r.detail])
    print(report, end="")
    return 0 if all(r.passed for r in results) else 1


def _read_metrics(path: Path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(rows)
    cols: dict[str, list[float]] = {name: [] for name in reader.fieldnames or []}
    for row in reader:
        for k, v in row.items():
            cols[k].append(float(v) if v != "" else np.nan)
    return {k: np.asarray(v) for k, v in cols.items()}


def band_table(runs: list[dict[str, np.ndarray]], metric: str) -> np.ndarray:
    """Rows ``(step, mean, variance, lower, upper)`` with a half-variance band."""
    steps = runs[0]["step"]
    for r in runs[1:]:
        if not np.array_equal(r["step"], steps):
            raise nn.ConfigurationError("runs were evaluated at different steps; cannot aggregate")
    values = np.stack([r[metric] for r in runs])
    mean = values.mean(axis=0)
    var = values.var(axis=0)
    return np.column_stack([steps, mean, var, mean - var / 2, mean + var / 2])


def cmd_plot_data(args) -> int:
    root = Path(args.runs)
    paths = sorted(root.rglob("metrics.csv"))
    if not paths:
        raise FileNotFoundError(f"no metrics.csv under {root}")
    hashes = {read_config_hash(p) for p in paths}
    if len(hashes) > 1:
        raise nn.ConfigurationError(f"metrics under {root} come from different configs: {sorted(hashes)}")
    digest = hashes.pop() or ""
    runs = [_read_metrics(p) for p in paths]
    if runs[0]["step"].size == 0:
        raise nn.StateError(f"metrics under {root} contain no evaluation rows")
    out = Path(args.out) if args.out else root
    out.mkdir(parents=True, exist_ok=True)
    metrics = args.metric or ["eval_return_mean", "failure_rate"]
    for metric in metrics:
        if metric not in runs[0] or metric == "step":
            raise nn.ConfigurationError(f"unknown metric {metric!r}")
        table = band_table(runs, metric)
        path = out / f"band_{metric}.csv"
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={digest}\n# seeds={len(runs)}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "mean", "variance", "lower", "upper"])
            for row in table:
                writer.writerow([int(row[0]), *(repr(float(v)) for v in row[1:])])
        print(f"{metric}: {len(runs)} runs -> {path}")
    return 0


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsac", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one agent per seed")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", help="seed or comma-separated seed list (overrides run.seeds)")
    p.add_argument("--steps", type=int)
    p.add_argument("--env")
    p.add_argument("--risk", choices=RISK_NAMES)
    p.add_argument("--beta", type=float)
    p.add_argument("--out")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="roll out a checkpoint's mean action")
    p.add_argument("checkpoint", help="checkpoint file or run directory")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--env")
    p.add_argument("--risk", choices=RISK_NAMES)
    p.add_argument("--beta", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify", help="check the distributional operator properties on a tabular MDP")
    p.add_argument("--mdp", choices=("chain", "random"), default="chain")
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("plot-data", help="aggregate per-seed metrics into mean and half-variance bands")
    p.add_argument("runs", help="directory containing per-seed metrics.csv files")
    p.add_argument("--metric", action="append", help="metric column (repeatable)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (nn.ConfigurationError, nn.StateError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (nn.NonFiniteError, RuntimeError) as exc:
        print(f"error: run halted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
