"""End-to-end acceptance checks, one test and one printed verdict per criterion.

Long-running: the whole module takes roughly a quarter of an hour on one core.
"""
import time
from importlib import resources

import numpy as np
import pytest
from scipy.optimize import linprog
from scipy.stats import spearmanr

from safelmdp.agents import AgentConfig, make_agent
from safelmdp.env import gen_synthetic
from safelmdp.harness import RunConfig, frozen_lake_report, run
from safelmdp.numerics import spd_inverse
from safelmdp.oracle import (
    brute_force_safe_values, grid_mixture_max, model_tables, optimal_safe_dp, optimal_safe_dp_randomized,
)
from safelmdp.safety import cost_ucb, warm_start_tau

import test_agents
import test_numerics
import test_safety
from conftest import random_finite_spec
from test_agents import play

CHECKPOINTS = (250, 500, 1000, 2000)
_cache = {}


@pytest.fixture
def verdict(capsys):
    def say(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return ok
    return say


def load(name, **overrides):
    path = resources.files("safelmdp").joinpath(f"data/configs/{name}.json")
    return RunConfig.load(str(path), **overrides)


def timed_run(name):
    if name not in _cache:
        t0 = time.time()
        res = run(load(name), write=False)
        _cache[name] = (res, time.time() - t0)
    return _cache[name]


def e1_runs(res):
    return res.table["e1_holds"].min(axis=1) == 1.0


def regret_slopes(res):
    R = res.table["cumulative_regret"][:, [k - 1 for k in CHECKPOINTS]]
    x = np.log(CHECKPOINTS)
    return np.array([np.polyfit(x, np.log(np.maximum(r, 1e-12)), 1)[0] for r in R])


def test_zero_violations_under_confidence_event(verdict):
    res, secs = timed_run("synthetic_slucb")
    held = e1_runs(res)
    viol = res.table["cumulative_violations"][:, -1]
    n, delta = len(held), res.config.delta
    allowed = delta + 3 * np.sqrt(delta * (1 - delta) / n)
    frac_fail = 1 - held.mean()
    ok = viol[held].sum() == 0 and frac_fail <= allowed and secs <= 300
    ok &= res.manifest["invariant_failures"] == []
    verdict("1 zero violations", ok,
            f"violations in E1 runs {int(viol[held].sum())}, all runs {int(viol.sum())}; "
            f"E1 failed in {frac_fail:.3f} of {n} runs (allowed {allowed:.3f}); {secs:.0f}s (target 300s)")
    assert ok


def test_randomized_expected_cost_under_confidence_event(verdict):
    res, secs = timed_run("synthetic_rslucb")
    held = e1_runs(res)
    worst = max(float(np.where(r.absorbed, -np.inf, r.expected_costs).max())
                for r in res.records if held[res.table.run_ids.index(r.run_id)])
    tau = res.config.tau
    ok = bool(held.any()) and worst <= tau + 1e-9
    verdict("2 randomized expected cost", ok,
            f"max expected cost {worst:.6f} vs tau {tau} over {int(held.sum())}/{len(held)} E1 runs; {secs:.0f}s")
    assert ok


def test_sublinear_regret(verdict):
    res, _ = timed_run("synthetic_slucb_tuned")
    slopes = regret_slopes(res)
    info = ""
    if "synthetic_slucb" in _cache:
        info = f"; theoretical-radius run slope {regret_slopes(_cache['synthetic_slucb'][0]).mean():.3f}"
    ok = slopes.mean() <= 0.85
    verdict("3 sublinear regret", ok,
            f"mean log-log slope {slopes.mean():.3f} (min {slopes.min():.3f}, max {slopes.max():.3f}){info}")
    assert ok


def test_baseline_ordering(verdict):
    tail = slice(-500, None)
    known = timed_run("synthetic_known_gamma")[0].table.mean("episode_reward")[tail].mean()
    slucb = timed_run("synthetic_slucb_tuned")[0].table.mean("episode_reward")[tail].mean()
    lams = [0.8, 0.85, 0.9, 0.95]
    viol = [timed_run(f"synthetic_penalty_{int(round(100 * l))}")[0].table["cumulative_violations"][:, -1]
            for l in lams]
    means = [float(v.mean()) for v in viol]
    rho = spearmanr(lams, means).statistic
    ok = known >= slucb and rho <= 0 and all(v.min() > 0 for v in viol)
    verdict("4 baseline ordering", ok,
            f"last-quarter reward known-gamma {known:.4f} vs slucb {slucb:.4f}; "
            f"penalty violations {[round(m, 1) for m in means]} (spearman {rho:.2f}, "
            f"min per seed {[int(v.min()) for v in viol]})")
    assert ok


def _lp_value(q, c, tau):
    res = linprog(-q, A_ub=[c], b_ub=[tau], A_eq=[np.ones(len(q))], b_eq=[1.0], bounds=[(0, None)] * len(q))
    return -res.fun


def test_oracle_equivalence(verdict):
    rng = np.random.default_rng(2024)
    gaps = []
    for _ in range(50):
        S, A, H = (int(x) for x in rng.integers(1, 4, size=3))
        spec = random_finite_spec(rng, S=S, A=A, H=H, tau=float(rng.uniform(0.2, 0.8)))
        gaps.append(np.max(np.abs(optimal_safe_dp(spec).values[0] - brute_force_safe_values(spec))))
    exact = max(gaps) <= 1e-12
    grid_gaps, lp_gaps = [], []
    for _ in range(5):
        spec = random_finite_spec(rng, S=2, A=4, H=1)
        val = optimal_safe_dp_randomized(spec).values[0]
        _, _, _, r, c = model_tables(spec)
        for s in range(2):
            grid_gaps.append(val[s] - grid_mixture_max(r[0, s], c[0, s], spec.tau, 0.002))
            lp_gaps.append(abs(val[s] - _lp_value(r[0, s], c[0, s], spec.tau)))
    grid_ok = max(grid_gaps) <= 1e-4
    ok = exact and grid_ok
    verdict("5 oracle equivalence", ok,
            f"DP vs enumeration max gap {max(gaps):.1e} on 50 instances; four-action grid (step 0.002) "
            f"within 1e-4 on {sum(g <= 1e-4 for g in grid_gaps)}/{len(grid_gaps)}, worst {max(grid_gaps):.1e}; "
            f"linear program agreement {max(lp_gaps):.1e}")
    assert ok


def test_endpoint_argmax_tractable(verdict):
    worst, checked = -np.inf, 0
    grid = np.arange(0, 1001) / 1000
    for seed in range(10):
        spec = gen_synthetic(rng=500 + seed, N=10)
        agent = make_agent("slucb", spec, AgentConfig(K=50))
        rng = np.random.default_rng(seed)
        play(agent, spec, int(rng.integers(1, 40)), rng)
        agent.begin_episode()
        for _ in range(10):
            h, s = int(rng.integers(spec.H)), int(rng.integers(spec.n_states))
            st = agent.confidence(h).state(s)
            w = agent.weights[h]
            kap = agent.kappas(agent._tt(h))[s]
            A_inv = spd_inverse(agent.cfg.lam * np.eye(spec.d) + agent.gram[agent._ts(h)])
            g = spec.geometries[s]
            best = -np.inf
            for e in [g.anchor] + list(g.endpoints):
                X = grid[:, None] * e + (1 - grid[:, None]) * g.anchor
                X = X[cost_ucb(st, X) <= spec.tau]
                if len(X):
                    vals = X @ w + kap * agent.beta * np.sqrt(np.einsum("ni,ij,nj->n", X, A_inv, X))
                    best = max(best, vals.max())
            chosen = agent._objective[h][s][agent._choice[h, s]]
            worst = max(worst, best - chosen)
            checked += 1
    ok = checked == 100 and worst <= 1e-9
    verdict("6 endpoint argmax", ok, f"largest grid advantage {worst:.1e} over {checked} snapshots")
    assert ok


class _Anchor:
    tau, sigma = 0.5, 0.01

    def tau_at(self, h, s):
        return 0.2


def test_warm_start_sample_counts(verdict):
    K = 10_000
    lo, hi = 16 * np.log(K) / 0.09, 64 * np.log(K) / 0.09
    counts = np.array([warm_start_tau(_Anchor(), 0, 0, K, np.random.default_rng(t)).samples for t in range(100)])
    inside = int(((counts >= lo) & (counts <= hi)).sum())
    ok = inside >= 98
    verdict("7 warm start", ok,
            f"{inside}/100 trials in [{lo:.0f}, {hi:.0f}]; counts {counts.min()}..{counts.max()}")
    assert ok


def test_frozen_lake(verdict):
    res, secs = timed_run("frozen_lake")
    rep = frozen_lake_report(res.records)
    curve = rep["success_rate"]
    trend = np.polyfit(np.arange(len(curve)), curve, 1)[0]
    worst = max(float(np.where(r.absorbed, -np.inf, r.expected_costs).max()) for r in res.records)
    ok = trend >= 0 and curve[-1] >= 0.5 and worst <= 0.1 + 1e-9
    verdict("8 frozen lake", ok,
            f"success by unit {np.round(curve, 2).tolist()} (trend {trend:+.3f}, final {curve[-1]:.2f}); "
            f"max danger probability {worst:.4f}; {rep['n_runs']} runs in {secs:.0f}s (target 600s)")
    assert ok


BATTERIES = [
    ("projection identities", test_numerics.test_projection_recomposition_battery),
    ("norm domination", test_numerics.test_norm_domination_battery),
    ("ridge incremental vs scratch", test_numerics.test_ridge_incremental_vs_scratch_battery),
    ("cost bound affine along segments", test_safety.test_cost_ucb_affine_along_segments_battery),
    ("optimism surrogate", test_agents.test_optimism_surrogate_battery),
]


def test_property_batteries(verdict):
    failed = []
    for name, fn in BATTERIES:
        try:
            fn()
        except AssertionError:
            failed.append(name)
    ok = not failed
    verdict("9 property batteries", ok,
            f"{len(BATTERIES) - len(failed)}/{len(BATTERIES)} pass" + (f"; failing: {', '.join(failed)}" if failed else ""))
    assert ok
