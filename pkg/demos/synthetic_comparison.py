"""Compare the safe agent with the known-cost and penalty baselines on a few synthetic seeds.

Usage: python3 demos/synthetic_comparison.py [K]
"""
import sys

from safelmdp.harness import RunConfig, compare

K = int(sys.argv[1]) if len(sys.argv) > 1 else 300
common = dict(experiment="synthetic", K=K, seeds=[0, 1, 2], c_beta=0.0, kappa=1.0)
configs = [
    RunConfig(agent="slucb", **common),
    RunConfig(agent="lsvi_known_gamma", **common),
    RunConfig(agent="lsvi_penalty", penalty=0.9, **common),
]
rows = compare(configs)
for cfg in configs:
    tail = [r for r in rows if r["agent"] == cfg.name][-max(1, K // 4):]
    reward = sum(r["mean_reward"] for r in tail) / len(tail)
    print(f"{cfg.name:20s} reward {reward:.4f}  cumulative violations {tail[-1]['mean_cum_violations']:.1f}")
