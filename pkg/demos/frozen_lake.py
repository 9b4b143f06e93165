"""Randomized safe agent on the 10x10 frozen lake; prints success per interaction unit.

Usage: python3 demos/frozen_lake.py [K]
"""
import sys

import numpy as np

from safelmdp.harness import RunConfig, frozen_lake_report, run

K = int(sys.argv[1]) if len(sys.argv) > 1 else 3
cfg = RunConfig(experiment="gridworld", agent="rslucb", K=K, H=1000, tau=0.1, lam=1e-5, beta=0.4,
                kappa=1.0, share_across_steps=True, seeds=[0])
res = run(cfg, write=False)
rep = frozen_lake_report(res.records)
print("success by unit:", np.round(rep["success_rate"], 2).tolist())
print("return by unit: ", np.round(rep["average_return"], 2).tolist())
worst = max(float(np.where(r.absorbed, 0.0, r.expected_costs).max()) for r in res.records)
print(f"largest expected danger probability: {worst:.4f} (threshold {cfg.tau})")
