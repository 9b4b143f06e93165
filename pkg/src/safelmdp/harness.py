"""Experiment runner: configuration, the episode loop, metrics and persistence."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import __version__
from .agents import AGENTS, AgentConfig, make_agent
from .env import GridWorldMap, build_gridworld, gen_synthetic, sample_feature_step, sample_initial_state
from .oracle import evaluate_policy, optimal_safe_dp, optimal_safe_dp_randomized

VIOLATION_TOL = 1e-9
GOAL_RETURN = 6.0
STEP_RETURN = 0.01


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    experiment: str = "synthetic"
    agent: str = "slucb"
    K: int = 2000
    H: int = 3
    d: int = 5
    N: int = 100
    n_states: int = 10
    tau: float = 0.5
    sigma: float = 0.01
    lam: float = 1.0
    delta: float = 0.01
    beta: Optional[float] = None
    c_beta: float = 1.0
    kappa: Union[str, float] = "theoretical"
    penalty: Optional[float] = None
    seeds: list = field(default_factory=lambda: [0])
    repeats: int = 1
    warm_start: bool = False
    geometry: str = "star"
    share_across_steps: bool = False
    min_gap: float = 0.0
    map_path: Optional[str] = None
    anchor_actions: Optional[dict] = None
    slip: float = 0.05
    reward_fit: str = "distance"
    anchor_rule: str = "min_cost"
    max_enum: int = 8
    workers: int = 1
    output_dir: Optional[str] = None
    label: Optional[str] = None

    ENV_KEYS = ("experiment", "H", "d", "N", "n_states", "tau", "sigma", "geometry", "min_gap",
                "map_path", "anchor_actions", "slip", "reward_fit", "anchor_rule", "seeds", "repeats")

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.experiment not in ("synthetic", "gridworld"):
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.agent not in AGENTS:
            raise ConfigError(f"unknown agent {self.agent!r}; choose from {', '.join(AGENTS)}")
        if self.K < 1 or self.H < 1:
            raise ConfigError("K and H must be at least 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if self.agent == "lsvi_penalty" and self.penalty is None:
            raise ConfigError("the penalty agent needs a penalty weight")
        if self.geometry not in ("star", "finite"):
            raise ConfigError(f"unknown geometry {self.geometry!r}")
        if self.reward_fit not in ("distance", "lsq"):
            raise ConfigError(f"unknown reward fit {self.reward_fit!r}")
        if self.anchor_rule not in ("min_cost", "goalward"):
            raise ConfigError(f"unknown anchor rule {self.anchor_rule!r}")
        try:
            self.agent_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        data = dict(data)
        if data.get("anchor_actions"):
            data["anchor_actions"] = {int(k): int(v) for k, v in data["anchor_actions"].items()}
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def env_key(self) -> dict:
        return {k: getattr(self, k) for k in self.ENV_KEYS}

    def digest(self) -> str:
        data = self.to_dict()
        data.pop("output_dir", None)
        data.pop("workers", None)
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]

    def agent_config(self) -> AgentConfig:
        return AgentConfig(lam=self.lam, delta=self.delta, sigma=self.sigma, beta=self.beta,
                           c_beta=self.c_beta, kappa=self.kappa, K=self.K,
                           share_across_steps=self.share_across_steps, penalty=self.penalty or 0.0,
                           max_enum=self.max_enum, warm_start=self.warm_start)

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.agent == "lsvi_penalty":
            return f"lsvi_penalty({self.penalty:g})"
        return self.agent


def build_env(config: RunConfig, seed: int):
    rng = np.random.default_rng([seed, 0])
    if config.experiment == "synthetic":
        return gen_synthetic(d=config.d, H=config.H, n_states=config.n_states, N=config.N,
                             tau=config.tau, sigma=config.sigma, rng=rng, geometry=config.geometry,
                             min_gap=config.min_gap)
    gmap = GridWorldMap.load(config.map_path)
    return build_gridworld(gmap, H=config.H, tau=config.tau, sigma=config.sigma, slip=config.slip,
                           rng=rng, anchor_actions=config.anchor_actions,
                           reward_fit=config.reward_fit, anchor_rule=config.anchor_rule)


@dataclass
class EpisodeRecord:
    k: int
    run_id: str
    initial_state: int
    states: np.ndarray
    rewards: np.ndarray
    true_costs: np.ndarray
    expected_costs: np.ndarray
    violations: np.ndarray
    absorbed: np.ndarray
    policy_value: float
    optimal_value: float
    e1: Optional[bool] = None
    outcome: Optional[str] = None
    features: Optional[np.ndarray] = None

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())

    @property
    def steps(self) -> int:
        return int((~self.absorbed).sum())


class MetricsTable:
    """Per-episode metric series for a set of runs, aligned on the episode index."""

    def __init__(self, run_ids, K):
        self.run_ids = list(run_ids)
        self.K = K
        self.columns = {}

    def add(self, name, values):
        arr = np.asarray(values, dtype=float)
        if arr.shape != (len(self.run_ids), self.K):
            raise ValueError(f"metric {name} has shape {arr.shape}")
        self.columns[name] = arr

    def __getitem__(self, name):
        return self.columns[name]

    def mean(self, name):
        return self.columns[name].mean(axis=0)

    def std(self, name):
        return self.columns[name].std(axis=0)

    def to_csv(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, arr in self.columns.items():
            with open(out / f"{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["episode", "seed", "metric_value"])
                for i, rid in enumerate(self.run_ids):
                    for k in range(self.K):
                        w.writerow([k + 1, rid, repr(float(arr[i, k]))])


@dataclass
class RunResult:
    config: RunConfig
    table: MetricsTable
    records: list
    manifest: dict


def moving_average(x, window=100):
    x = np.asarray(x, dtype=float)
    c = np.cumsum(x, axis=-1)
    out = c.copy()
    out[..., window:] = c[..., window:] - c[..., :-window]
    n = np.minimum(np.arange(1, x.shape[-1] + 1), window)
    return out / n


def _episode_outcome(spec, states, final_state):
    if not spec.terminal.any():
        return None
    goal = spec.meta.get("goal")
    for s in list(states) + [final_state]:
        if spec.terminal[s]:
            return "goal" if s == goal else "danger"
    return "timeout"


def run_single(config: RunConfig, seed: int, repeat: int = 0, keep_features=False):
    """One agent on one environment; returns (records, invariant failures)."""
    spec = build_env(config, seed)
    agent = make_agent(config.agent, spec, config.agent_config())
    optimal = optimal_safe_dp_randomized(spec) if agent.randomized else optimal_safe_dp(spec)
    rng = np.random.default_rng([seed, 1, repeat])
    run_id = str(seed) if config.repeats == 1 else f"{seed}r{repeat}"
    H, S = spec.H, spec.n_states
    records, failures = [], []
    e1_so_far = True
    for k in range(config.K):
        agent.begin_episode()
        e1 = None
        if agent.uses_cost_model:
            e1 = _check_e1(agent, spec)
            e1_so_far &= e1
        values = evaluate_policy(spec, agent.mean_features())
        s = s1 = sample_initial_state(spec, rng)
        states = np.zeros(H, dtype=int)
        rewards, costs, exp_costs = np.zeros(H), np.zeros(H), np.zeros(H)
        absorbed = np.zeros(H, dtype=bool)
        feats = np.zeros((H, spec.d)) if keep_features else None
        for h in range(H):
            chosen = agent.act(s, h, rng)
            if chosen.policy is not None:
                mean_feat = chosen.policy @ agent.view.actions[s]
            else:
                mean_feat = chosen.feature
            obs = sample_feature_step(spec, chosen.feature, h, rng)
            states[h], rewards[h], costs[h] = s, obs.reward, obs.true_cost
            exp_costs[h] = float(mean_feat @ spec.gamma_at(h))
            absorbed[h] = spec.terminal[s]
            if keep_features:
                feats[h] = chosen.feature
            agent.observe(s, h, chosen, obs)
            s = obs.next_state
        measured = exp_costs if agent.randomized else costs
        violations = (measured > spec.tau + VIOLATION_TOL) & ~absorbed
        if agent.uses_cost_model and e1_so_far and violations.any():
            failures.append(f"run {run_id} episode {k + 1}: violation while the confidence event held")
        records.append(EpisodeRecord(
            k=k + 1, run_id=run_id, initial_state=int(s1), states=states, rewards=rewards,
            true_costs=costs, expected_costs=exp_costs, violations=violations, absorbed=absorbed,
            policy_value=float(values[0, s1]), optimal_value=float(optimal.values[0, s1]), e1=e1,
            outcome=_episode_outcome(spec, states, s), features=feats))
    return records, failures


def _check_e1(agent, spec) -> bool:
    """True cost parameter inside every confidence ellipsoid used this episode."""
    seen = set()
    ok = True
    for h in range(spec.H):
        key = (agent._ts(h), agent._tt(h))
        if key in seen:
            continue
        seen.add(key)
        conf = agent.confidence(h)
        live = ~spec.terminal & agent.ready[agent._tt(h)]
        radius = conf.confidence_radius(spec.gamma_at(h))
        ok &= bool(np.all(radius[live] <= agent.beta))
    return ok


def _run_job(args):
    config, seed, repeat = args
    return run_single(config, seed, repeat)


def provenance() -> str:
    try:
        sha = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"safelmdp {__version__} git:{sha or 'unknown'}"


def tabulate(records_by_run, K, gridworld=False) -> MetricsTable:
    run_ids = [recs[0].run_id for recs in records_by_run]
    table = MetricsTable(run_ids, K)
    rew = np.array([[r.episode_return for r in recs] for recs in records_by_run])
    pv = np.array([[r.policy_value for r in recs] for recs in records_by_run])
    ov = np.array([[r.optimal_value for r in recs] for recs in records_by_run])
    viol = np.array([[r.violations.sum() for r in recs] for recs in records_by_run])
    live_cost = [[np.where(r.absorbed, -np.inf, r.expected_costs).max() for r in recs] for recs in records_by_run]
    table.add("episode_reward", rew)
    table.add("episode_reward_ma100", moving_average(rew, 100))
    table.add("policy_value", pv)
    table.add("cumulative_regret", np.cumsum(ov - pv, axis=1))
    table.add("violations", viol)
    table.add("cumulative_violations", np.cumsum(viol, axis=1))
    table.add("max_expected_cost", np.maximum(np.array(live_cost), 0.0))
    if records_by_run[0][0].e1 is not None:
        table.add("e1_holds", np.array([[float(r.e1) for r in recs] for recs in records_by_run]))
    if gridworld:
        rep = frozen_lake_report([r for recs in records_by_run for r in recs])
        table.add("success", rep["per_run_success"])
        table.add("unit_return", rep["per_run_return"])
    return table


def run(config: RunConfig, write=True, keep_records=True) -> RunResult:
    """Run every (seed, repeat) of a configuration and collect its metrics."""
    start = time.time()
    jobs = [(config, seed, rep) for seed in config.seeds for rep in range(config.repeats)]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            outputs = list(pool.map(_run_job, jobs))
    else:
        outputs = [_run_job(j) for j in jobs]
    records_by_run = [o[0] for o in outputs]
    failures = [f for o in outputs for f in o[1]]
    table = tabulate(records_by_run, config.K, gridworld=config.experiment == "gridworld")
    neg = int((np.diff(table["cumulative_regret"], axis=1, prepend=0.0) < -1e-9).sum())
    manifest = {
        "config": config.to_dict(),
        "config_hash": config.digest(),
        "provenance": provenance(),
        "wall_clock_seconds": round(time.time() - start, 3),
        "runs": table.run_ids,
        "metrics": sorted(table.columns),
        "negative_regret_terms": neg,
        "invariant_failures": failures,
    }
    if write and config.output_dir:
        table.to_csv(config.output_dir)
        with open(Path(config.output_dir) / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
    return RunResult(config, table, [r for recs in records_by_run for r in recs] if keep_records else [],
                     manifest)


def compare(configs, write_dir=None) -> list:
    """Seed-aggregated reward and violation curves, one row per (agent, episode)."""
    configs = list(configs)
    if not configs:
        raise ConfigError("no configs to compare")
    ref = configs[0].env_key()
    for c in configs[1:]:
        if c.env_key() != ref:
            raise ConfigError("mismatched environments: configs must share the environment settings and seeds")
    rows = []
    results = []
    for c in configs:
        res = run(c, write=bool(c.output_dir), keep_records=False)
        results.append(res)
        t = res.table
        for k in range(c.K):
            rows.append({
                "agent": c.name, "episode": k + 1,
                "mean_reward": float(t.mean("episode_reward")[k]),
                "std_reward": float(t.std("episode_reward")[k]),
                "mean_cum_violations": float(t.mean("cumulative_violations")[k]),
                "std_cum_violations": float(t.std("cumulative_violations")[k]),
            })
    if write_dir:
        out = Path(write_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "compare.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return rows


def frozen_lake_report(records) -> dict:
    """Success rate and interaction-unit return per episode index, averaged over runs."""
    by_run = {}
    for r in records:
        by_run.setdefault(r.run_id, []).append(r)
    runs = sorted(by_run)
    K = max(len(v) for v in by_run.values())
    success = np.zeros((len(runs), K))
    ret = np.zeros((len(runs), K))
    for i, rid in enumerate(runs):
        for r in sorted(by_run[rid], key=lambda r: r.k):
            ok = r.outcome == "goal"
            success[i, r.k - 1] = float(ok)
            ret[i, r.k - 1] = GOAL_RETURN if ok else STEP_RETURN * r.steps
    order = {rid: i for i, rid in enumerate(runs)}
    # keep the caller's run order for table alignment
    first_seen = list(dict.fromkeys(r.run_id for r in records))
    idx = [order[rid] for rid in first_seen]
    return {
        "units": np.arange(1, K + 1),
        "success_rate": success.mean(axis=0),
        "average_return": ret.mean(axis=0),
        "per_run_success": success[idx],
        "per_run_return": ret[idx],
        "n_runs": len(runs),
    }
