"""Replay buffer, the DSAC update, the training loop and evaluation rollouts."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import neuro as nn
from .actor import GaussianPolicy, min_critic_quantiles, policy_objective
from .critic import CriticPair, critic_objective, pairwise_td, soft_update
from .envs import Env, EnvFault, make_env
from .fractions import (
    SCHEMES,
    FractionProposalNet,
    FractionSet,
    fix_fractions,
    fqf_fraction_grad,
    net_fractions,
    random_fractions,
)
from .oracle import EmpiricalDist, dist_risk
from .risk import RiskSpec

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
METRIC_COLUMNS = ("step", "critic_loss_1", "critic_loss_2", "actor_loss", "eval_return_mean",
                  "eval_return_std", "failure_rate", "entropy_estimate")


# ---------------------------------------------------------------- replay


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    done: bool


@dataclass(frozen=True)
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling and FIFO eviction."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise nn.ConfigurationError("replay capacity must be positive")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def store(self, t: Transition) -> None:
        values = (np.asarray(t.s, float), np.asarray(t.a, float), float(t.r), np.asarray(t.s2, float))
        if not all(np.all(np.isfinite(v)) for v in values):
            raise nn.ConfigurationError("transition contains non-finite entries")
        i = self.inserted % self.capacity
        self.s[i], self.a[i], self.r[i], self.s2[i] = values
        self.done[i] = float(t.done)
        self.inserted += 1

    def indices(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        if len(self) == 0:
            raise nn.StateError("cannot sample from an empty replay buffer")
        return rng.integers(0, len(self), size=batch)

    def sample(self, batch: int, rng: np.random.Generator) -> Batch:
        idx = self.indices(batch, rng)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx])

    def oldest(self) -> Transition:
        i = 0 if self.inserted <= self.capacity else self.inserted % self.capacity
        return Transition(self.s[i].copy(), self.a[i].copy(), self.r[i], self.s2[i].copy(), bool(self.done[i]))

    def arrays(self) -> dict[str, np.ndarray]:
        n = len(self)
        return {"s": self.s[:n], "a": self.a[:n], "r": self.r[:n], "s2": self.s2[:n],
                "done": self.done[:n], "inserted": np.array(self.inserted)}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        n = len(arrays["r"])
        for key in ("s", "a", "r", "s2", "done"):
            getattr(self, key)[:n] = arrays[key]
        self.inserted = int(arrays["inserted"])


# ---------------------------------------------------------------- agent


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.99
    alpha: float = 0.2
    tau_soft: float = 0.005
    batch: int = 256
    warmup: int = 10_000
    buffer: int = 1_000_000
    critic_lr: float = 3e-4
    actor_lr: float = 3e-4
    fraction_lr: float = 1e-5
    n_fractions: int = 32
    kappa: float = 1.0
    critic_hidden: int = 256
    embedding: int = 64
    actor_hidden: int = 256
    scheme: str = "random"
    risk: RiskSpec = field(default_factory=RiskSpec)

    def __post_init__(self):
        checks = [
            (0.0 <= self.gamma < 1.0, "gamma must lie in [0, 1)"),
            (self.alpha >= 0.0, "alpha must be non-negative"),
            (0.0 < self.tau_soft <= 1.0, "tau_soft must lie in (0, 1]"),
            (self.batch >= 1, "batch must be positive"),
            (self.warmup >= 0, "warmup must be non-negative"),
            (self.buffer >= self.batch, "buffer must hold at least one batch"),
            (min(self.critic_lr, self.actor_lr, self.fraction_lr) >= 0.0, "learning rates must be non-negative"),
            (self.n_fractions >= 1, "n_fractions must be positive"),
            (self.kappa > 0.0, "kappa must be positive"),
            (min(self.critic_hidden, self.embedding, self.actor_hidden) >= 1, "layer widths must be positive"),
            (self.scheme in SCHEMES, f"scheme must be one of {SCHEMES}"),
        ]
        for ok, message in checks:
            if not ok:
                raise nn.ConfigurationError(message)


class DSACAgent:
    """Twin quantile critics with targets, a squashed-Gaussian policy and its target copy."""

    def __init__(self, state_dim: int, action_dim: int, config: AgentConfig, seed: int = 0):
        self.state_dim, self.action_dim, self.config = state_dim, action_dim, config
        init_seq, update_seq = np.random.SeedSequence(seed).spawn(2)
        init_rng = np.random.default_rng(init_seq)
        self.rng = np.random.default_rng(update_seq)
        c = config
        self.critics = CriticPair(state_dim, action_dim, init_rng, c.critic_hidden, c.embedding, c.tau_soft)
        self.policy = GaussianPolicy(state_dim, action_dim, init_rng, c.actor_hidden)
        self.policy_target = GaussianPolicy(state_dim, action_dim, init_rng, c.actor_hidden)
        nn.copy_parameters(self.policy_target, self.policy)
        self.policy_target.requires_grad_(False)
        self.critic_opts = [nn.Adam(q.named_parameters(), lr=c.critic_lr) for q in self.critics.online]
        self.actor_opt = nn.Adam(self.policy.named_parameters(), lr=c.actor_lr)
        self.fraction_net = None
        self.fraction_opt = None
        if c.scheme == "net":
            self.fraction_net = FractionProposalNet(state_dim + action_dim, c.n_fractions, init_rng)
            self.fraction_opt = nn.Adam(self.fraction_net.named_parameters(), lr=c.fraction_lr)
        self.counters = {"updates": 0, "critic_steps": 0, "actor_steps": 0, "soft_updates": 0, "fraction_steps": 0}

    def modules(self) -> dict[str, nn.Module]:
        out = {"policy": self.policy, "policy_target": self.policy_target}
        for k in range(2):
            out[f"critic{k}"] = self.critics.online[k]
            out[f"critic_target{k}"] = self.critics.target[k]
        if self.fraction_net is not None:
            out["fraction_net"] = self.fraction_net
        return out

    def optimizers(self) -> dict[str, nn.Adam]:
        out = {"critic_opt0": self.critic_opts[0], "critic_opt1": self.critic_opts[1], "actor_opt": self.actor_opt}
        if self.fraction_opt is not None:
            out["fraction_opt"] = self.fraction_opt
        return out

    def act(self, s: np.ndarray, deterministic: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        s = np.atleast_2d(s)
        if deterministic:
            return self.policy.deterministic(s)[0]
        return self.policy.sample(s, rng or self.rng).action.data[0]

    def fractions_for(self, s: np.ndarray, a: np.ndarray) -> FractionSet:
        n, b = self.config.n_fractions, s.shape[0]
        if self.config.scheme == "fix":
            return fix_fractions(n, batch=b)
        if self.config.scheme == "random":
            return random_fractions(n, self.rng, batch=b)
        return net_fractions(self.fraction_net, s, a)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, module in self.modules().items():
            for k, v in module.state_dict().items():
                out[f"{prefix}.{k}"] = v
        for prefix, opt in self.optimizers().items():
            for k, v in opt.state_dict().items():
                out[f"{prefix}.{k}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], with_optimizers: bool = True) -> None:
        for prefix, module in self.modules().items():
            module.load_state_dict(_strip(arrays, prefix))
        if with_optimizers:
            for prefix, opt in self.optimizers().items():
                opt.load_state_dict(_strip(arrays, prefix))


def _strip(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    head = prefix + "."
    return {k[len(head):]: v for k, v in arrays.items() if k.startswith(head)}


def _finite_or_raise(loss: nn.Tensor, what: str, diagnostics: dict) -> float:
    value = loss.item()
    if not np.isfinite(value):
        details = ", ".join(f"{k}={v:.4g}" for k, v in diagnostics.items())
        raise nn.NonFiniteError(f"{what} is non-finite; update aborted ({details})")
    return value


def dsac_update(agent: DSACAgent, batch: Batch) -> dict[str, float]:
    """One update in this order: fractions, target-policy action, twin-min target,
    pairwise TD errors, one step per critic, critic target blend, reparameterized
    policy step, policy target blend.  With the ``net`` scheme the fraction
    proposal net takes one step afterwards.
    """
    cfg, rng = agent.config, agent.rng
    fractions = agent.fractions_for(batch.s, batch.a)
    next_sample = agent.policy_target.sample(batch.s2, rng)
    tdms, target = pairwise_td(batch, fractions, agent.critics.online, agent.critics.target,
                               agent.policy_target, cfg.alpha, cfg.gamma, kappa=cfg.kappa,
                               next_sample=next_sample)
    diag = {"target_mean": float(np.mean(target)), "target_absmax": float(np.max(np.abs(target)))}
    critic_losses = []
    for k, (tdm, opt) in enumerate(zip(tdms, agent.critic_opts)):
        loss = critic_objective(tdm, fractions)
        critic_losses.append(_finite_or_raise(loss, f"critic {k + 1} loss", diag))
        opt.zero_grad()
        nn.backward(loss)
        opt.step()
        agent.counters["critic_steps"] += 1
    for tgt, src in zip(agent.critics.target, agent.critics.online):
        nn.polyak_update(tgt, src, cfg.tau_soft)
        agent.counters["soft_updates"] += 1

    actor_loss, draw = policy_objective(agent.policy, agent.critics.online, cfg.risk, fractions,
                                        batch.s, cfg.alpha, rng)
    actor_value = _finite_or_raise(actor_loss, "actor loss", diag)
    agent.actor_opt.zero_grad()
    nn.backward(actor_loss)
    agent.actor_opt.step()
    agent.counters["actor_steps"] += 1
    nn.polyak_update(agent.policy_target, agent.policy, cfg.tau_soft)
    agent.counters["soft_updates"] += 1

    if agent.fraction_net is not None:
        _fraction_step(agent, batch)
    agent.counters["updates"] += 1
    return {
        "critic_loss_1": critic_losses[0],
        "critic_loss_2": critic_losses[1],
        "actor_loss": actor_value,
        "entropy_estimate": float(-np.mean(draw.log_prob.data)),
        "target_mean": diag["target_mean"],
    }


def _fraction_step(agent: DSACAgent, batch: Batch) -> None:
    """Move the proposed fractions along the 1-Wasserstein gradient of the min-critic."""
    if agent.config.n_fractions < 2:
        return
    interior = agent.fraction_net.interior_taus(batch.s, batch.a)
    taus = interior.data
    b = taus.shape[0]
    full = np.concatenate([np.zeros((b, 1)), taus, np.ones((b, 1))], axis=1)
    mids = 0.5 * (full[:, 1:] + full[:, :-1])
    critics = agent.critics.online
    z_taus = min_critic_quantiles(critics, batch.s, batch.a, full).data
    z_mids = min_critic_quantiles(critics, batch.s, batch.a, mids).data
    grad = fqf_fraction_grad(z_taus, z_mids)
    surrogate = (interior * grad).sum() * (1.0 / b)
    agent.fraction_opt.zero_grad()
    nn.backward(surrogate)
    agent.fraction_opt.step()
    agent.counters["fraction_steps"] += 1


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalSummary:
    episodes: int
    mean: float
    std: float
    quantiles: dict[float, float]
    failure_rate: float
    risk_value: float
    empty: bool = False
    returns: np.ndarray = field(default_factory=lambda: np.zeros(0))


SUMMARY_LEVELS = (0.1, 0.25, 0.5, 0.75, 0.9)


def _as_actor(policy, env: Env) -> Callable[[np.ndarray], np.ndarray]:
    """Unit-box action function from a policy, a checkpoint or a plain callable."""
    if isinstance(policy, (str, Path)):
        policy = load_checkpoint(policy)
    if isinstance(policy, Checkpoint):
        policy = policy.policy_for(env)
    if isinstance(policy, GaussianPolicy):
        if policy.state_dim != env.spec.state_dim or policy.action_dim != env.spec.action_dim:
            raise nn.ConfigurationError(
                f"policy dims ({policy.state_dim}, {policy.action_dim}) do not match environment "
                f"{env.spec.name} ({env.spec.state_dim}, {env.spec.action_dim})")
        return lambda obs: policy.deterministic(obs[None])[0]
    if callable(policy):
        return policy
    raise TypeError(f"cannot evaluate a {type(policy).__name__}")


def evaluate(policy, env: Env, episodes: int, risk: RiskSpec | None = None, seed: int = 0) -> EvalSummary:
    """Roll out the mean action for ``episodes`` episodes; episode ``k`` is seeded from ``(seed, k)``.

    Returns are undiscounted episode sums; the failure rate counts episodes
    that ended in the environment's failure predicate.
    """
    risk = risk or RiskSpec()
    if episodes < 0:
        raise nn.ConfigurationError("episodes must be non-negative")
    act = _as_actor(policy, env)
    if episodes == 0:
        nan = float("nan")
        return EvalSummary(0, nan, nan, {q: nan for q in SUMMARY_LEVELS}, nan, nan, empty=True)
    returns, failures = np.zeros(episodes), 0
    for ep in range(episodes):
        # one seed per episode couples the k-th episode across policies
        obs = env.reset(int(np.random.SeedSequence([seed, ep]).generate_state(1)[0]))
        done, total, info = False, 0.0, {}
        while not done:
            obs, r, done, info = env.step(env.spec.scale_action(act(obs)))
            total += r
        returns[ep] = total
        failures += bool(info.get("failed"))
    dist = EmpiricalDist(returns, np.full(episodes, 1.0 / episodes))
    return EvalSummary(
        episodes=episodes,
        mean=float(returns.mean()),
        std=float(returns.std()),
        quantiles={q: float(np.quantile(returns, q)) for q in SUMMARY_LEVELS},
        failure_rate=failures / episodes,
        risk_value=dist_risk(dist, risk),
        returns=returns,
    )


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict[str, np.ndarray]

    def policy_for(self, env: Env) -> GaussianPolicy:
        m = self.meta
        if (m["env"], m["state_dim"], m["action_dim"]) != (env.spec.name, env.spec.state_dim, env.spec.action_dim):
            raise nn.ConfigurationError(
                f"checkpoint was trained on {m['env']} ({m['state_dim']}, {m['action_dim']}); "
                f"cannot evaluate on {env.spec.name} ({env.spec.state_dim}, {env.spec.action_dim})")
        policy = GaussianPolicy(m["state_dim"], m["action_dim"], np.random.default_rng(0), m["actor_hidden"])
        policy.load_state_dict(_strip(self.arrays, "policy"))
        return policy


def save_checkpoint(path: Path, agent: DSACAgent, meta: dict, extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = agent.state_arrays()
    for k, v in (extra or {}).items():
        arrays[f"extra.{k}"] = v
    meta = dict(meta, format=CHECKPOINT_FORMAT, state_dim=agent.state_dim, action_dim=agent.action_dim,
                actor_hidden=agent.config.actor_hidden, counters=agent.counters)
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(str(arrays.pop("meta")))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise nn.ConfigurationError(f"unsupported checkpoint format {meta.get('format')}")
    return Checkpoint(meta, arrays)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    env: str = "pendulum"
    env_params: tuple = ()
    agent: AgentConfig = field(default_factory=AgentConfig)
    seed: int = 0
    steps: int = 50_000
    eval_every: int = 5_000
    eval_episodes: int = 10
    checkpoint_every: int = 0
    out: str = "runs/default"


def config_fingerprint(obj) -> str:
    """Short stable hash of a dataclass (or any JSON-serializable value)."""
    payload = asdict(obj) if hasattr(obj, "__dataclass_fields__") else obj
    text = json.dumps(payload, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


class MetricsWriter:
    def __init__(self, path: Path, config_hash: str, append: bool = False):
        self.path = path
        if not append:
            with open(path, "w", newline="") as fh:
                fh.write(f"# config_hash={config_hash}\n")
                csv.writer(fh, lineterminator="\n").writerow(METRIC_COLUMNS)

    def write(self, row: dict) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])


def read_config_hash(path: Path) -> str | None:
    with open(path) as fh:
        first = fh.readline().strip()
    prefix = "# config_hash="
    return first[len(prefix):] if first.startswith(prefix) else None


def _env_state(env: Env) -> dict:
    return {"state": np.asarray(env.state).tolist(), "t": env.t, "rng": env.rng.bit_generator.state}


def _restore_env(env: Env, snap: dict) -> None:
    state = np.asarray(snap["state"])
    env.state = int(state) if state.ndim == 0 else state.astype(float)
    env.t = snap["t"]
    env.rng.bit_generator.state = snap["rng"]


@dataclass
class TrainResult:
    out: Path
    metrics_path: Path
    checkpoints: list[Path]
    agent: DSACAgent
    last_eval: EvalSummary | None


def train(run: TrainConfig, config_hash: str | None = None, resume: bool = False,
          on_eval: Callable[[int, EvalSummary], None] | None = None) -> TrainResult:
    """Alternate one environment step with one update after warmup.

    Writes ``metrics.csv`` (one row per evaluation) and
    ``checkpoint_<step>.npz`` files into ``run.out``.  With ``resume`` the
    latest checkpoint is restored, provided its config hash matches.
    """
    # the output directory is where a run lives, not what it computes
    config_hash = config_hash or config_fingerprint(replace(run, out=""))
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    cfg = run.agent
    env_seed, eval_seed, act_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(run.seed).spawn(3))
    env = make_env(run.env, seed=env_seed, **dict(run.env_params))
    eval_env = make_env(run.env, seed=eval_seed, **dict(run.env_params))
    agent = DSACAgent(env.spec.state_dim, env.spec.action_dim, cfg, seed=run.seed)
    buffer = ReplayBuffer(cfg.buffer, env.spec.state_dim, env.spec.action_dim)
    explore_rng = np.random.default_rng(act_seed)
    meta = {"config_hash": config_hash, "env": run.env}

    start, obs = 0, env.reset()
    last: dict[str, float] = {}
    checkpoints: list[Path] = []
    if resume and metrics_path.exists():
        found = read_config_hash(metrics_path)
        if found != config_hash:
            raise nn.ConfigurationError(f"cannot resume: run directory has config hash {found}, expected {config_hash}")
        latest = sorted(out.glob("checkpoint_*.npz"), key=lambda p: int(p.stem.split("_")[1]))
        if latest:
            ckpt = load_checkpoint(latest[-1])
            if ckpt.meta.get("config_hash") != config_hash:
                raise nn.ConfigurationError("cannot resume: checkpoint config hash differs")
            agent.load_state_arrays(ckpt.arrays)
            agent.counters = dict(ckpt.meta["counters"])
            buffer.load_arrays(_strip(ckpt.arrays, "extra.buffer"))
            resume_meta = ckpt.meta["resume"]
            _restore_env(env, resume_meta["env"])
            agent.rng.bit_generator.state = resume_meta["agent_rng"]
            explore_rng.bit_generator.state = resume_meta["explore_rng"]
            eval_env.rng.bit_generator.state = resume_meta["eval_rng"]
            obs, last, start = np.asarray(resume_meta["obs"]), resume_meta["last"], ckpt.meta["step"]
            checkpoints = latest
    writer = MetricsWriter(metrics_path, config_hash, append=resume and start > 0)

    def checkpoint(step: int) -> None:
        path = out / f"checkpoint_{step}.npz"
        resume_meta = {"env": _env_state(env), "agent_rng": agent.rng.bit_generator.state,
                       "explore_rng": explore_rng.bit_generator.state, "eval_rng": eval_env.rng.bit_generator.state,
                       "obs": np.asarray(obs).tolist(), "last": last}
        extra = {f"buffer.{k}": v for k, v in buffer.arrays().items()}
        save_checkpoint(path, agent, dict(meta, step=step, resume=resume_meta), extra)
        checkpoints.append(path)

    if start == 0:
        checkpoint(0)
    summary = None
    step = start
    try:
        for step in range(start + 1, run.steps + 1):
            if step <= cfg.warmup:
                action = explore_rng.uniform(-1.0, 1.0, size=env.spec.action_dim)
            else:
                action = agent.act(obs, rng=explore_rng)
            obs2, reward, done, info = env.step(env.spec.scale_action(action))
            # time-limit truncation keeps the bootstrap term
            buffer.store(Transition(obs, action, reward, obs2, info["failed"]))
            obs = env.reset() if done else obs2
            if step > cfg.warmup and len(buffer) >= cfg.batch:
                last = dsac_update(agent, buffer.sample(cfg.batch, agent.rng))
            if run.eval_every and step % run.eval_every == 0:
                summary = evaluate(agent.policy, eval_env, run.eval_episodes, cfg.risk, seed=eval_seed)
                writer.write(dict(last, step=step, eval_return_mean=summary.mean, eval_return_std=summary.std,
                                  failure_rate=summary.failure_rate))
                log.info("step %d: eval return %.3f +- %.3f, failure rate %.3f",
                         step, summary.mean, summary.std, summary.failure_rate)
                if on_eval is not None:
                    on_eval(step, summary)
            if run.checkpoint_every and step % run.checkpoint_every == 0 and step != run.steps:
                checkpoint(step)
    except (EnvFault, nn.NonFiniteError) as exc:
        dump = out / f"crash_{step}.npz"
        save_checkpoint(dump, agent, dict(meta, step=step, error=str(exc)))
        log.error("run halted at step %d: %s (state dumped to %s)", step, exc, dump)
        raise
    if run.steps > start:
        checkpoint(run.steps)
    return TrainResult(out, metrics_path, checkpoints, agent, summary)


def with_overrides(run: TrainConfig, **changes) -> TrainConfig:
    """Replace top-level or ``agent_``-prefixed fields."""
    agent_fields = {f.name for f in fields(AgentConfig)}
    agent_changes = {k[len("agent_"):]: v for k, v in changes.items() if k.startswith("agent_")
                     and k[len("agent_"):] in agent_fields}
    top = {k: v for k, v in changes.items() if not k.startswith("agent_")}
    return replace(run, agent=replace(run.agent, **agent_changes), **top)
