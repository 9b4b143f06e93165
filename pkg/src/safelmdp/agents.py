"""Episodic least-squares value iteration agents.

All agents share the same bookkeeping: per-step (or pooled) sums of the
feature Gram matrix, reward and cost targets, and a feature-by-next-state
matrix so the regression target ``r + V_{h+1}(s')`` can be rebuilt for any
value vector without replaying history.  At the start of every episode the
agent runs a backward pass and freezes its policy for the whole episode.

* ``SlucbAgent`` plays the best action inside the estimated safe set with
  an inflated exploration bonus.
* ``RslucbAgent`` plays a randomized policy whose mean feature is estimated
  safe.
* ``LsviKnownGammaAgent`` knows the true cost parameter (an oracle baseline).
* ``LsviPenaltyAgent`` ignores safety and learns from ``r - penalty*z``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import numpy as np

from .env import FiniteSet, LinearMdpSpec, StarConvex, action_table
from .numerics import quad_norms, spd_inverse
from .safety import ConfidenceBatch, SafeMixtureSolver, TauEstimator


def kappa(tau: float, tau_h_s: float, H: int) -> float:
    """Bonus inflation that compensates for optimizing over a shrunken safe set."""
    gap = tau - tau_h_s
    if not gap > 0:
        raise ValueError("anchor cost must be below the threshold")
    return 2.0 * H / gap + 1.0


def beta_default(sigma, d, lam, delta, T, H, c_beta=1.0) -> float:
    noise_term = sigma * np.sqrt(d * np.log((2 + 2 * T / lam) / delta)) + np.sqrt(lam * d)
    value_term = c_beta * d * H * np.sqrt(np.log(d * T / delta))
    return float(max(noise_term, value_term))


@dataclass
class AgentConfig:
    lam: float = 1.0
    delta: float = 0.01
    sigma: float = 0.01
    beta: Optional[float] = None
    c_beta: float = 1.0
    kappa: Union[str, float] = "theoretical"
    K: int = 1
    share_across_steps: bool = False
    penalty: float = 0.0
    max_enum: int = 8
    warm_start: bool = False

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if not 0 < self.delta < 0.5:
            raise ValueError("delta must lie in (0, 0.5)")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.beta is not None and self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.kappa != "theoretical" and not float(self.kappa) >= 1:
            raise ValueError("kappa must be 'theoretical' or a number >= 1")
        if self.K < 1:
            raise ValueError("K must be at least 1")

    def resolve_beta(self, d, H) -> float:
        if self.beta is not None:
            return float(self.beta)
        return beta_default(self.sigma, d, self.lam, self.delta, self.K * H, H, self.c_beta)


class ChosenAction(NamedTuple):
    handle: object  # action index, (segment, alpha), or None for a star-convex anchor
    feature: np.ndarray
    policy: Optional[np.ndarray] = None  # distribution over the action list, if randomized


class AgentView:
    """The parts of a model an agent may see: features, anchors and anchor costs."""

    def __init__(self, spec: LinearMdpSpec):
        self.d, self.H, self.S = spec.d, spec.H, spec.n_states
        self.tau = spec.tau
        self.geometries = spec.geometries
        self.anchors = spec.anchors
        self.tau_h_s = spec.tau_h_s.copy()
        self.terminal = spec.terminal.copy()
        self.stationary = spec.stationary
        self.star = all(isinstance(g, StarConvex) for g in spec.geometries)
        if not self.star and not all(isinstance(g, FiniteSet) for g in spec.geometries):
            raise ValueError("mixed geometries are not supported")
        # padded action tables: (S, n_max, d) and validity mask
        self.actions, self.action_mask = action_table(spec)
        self.anchor_index = np.array([g.anchor_index for g in spec.geometries])
        if self.star:
            self.endpoints = self.actions[:, 1:, :]
            self.endpoint_mask = self.action_mask[:, 1:]


def _masked_argmax(values, mask):
    """Row-wise argmax over ``mask``; ties go to the lowest index."""
    v = np.where(mask, values, -np.inf)
    j = np.argmax(v, axis=1)
    return j, v[np.arange(len(j)), j]


class LinearAgent:
    """Shared regression bookkeeping and the episode-level backward pass."""

    uses_cost_model = False
    randomized = False

    def __init__(self, view: AgentView, config: AgentConfig):
        self.view = view
        self.cfg = config
        d, H, S = view.d, view.H, view.S
        if config.share_across_steps and not view.stationary:
            raise ValueError("pooling across steps needs a stationary model")
        self.n_stats = 1 if config.share_across_steps else H
        self.n_tau = 1 if view.stationary else H
        self.beta = config.resolve_beta(d, H)
        self.gram = np.zeros((self.n_stats, d, d))
        self.reward_target = np.zeros((self.n_stats, d))
        self.cost_target = np.zeros((self.n_stats, d))
        self.next_map = np.zeros((self.n_stats, d, S))
        self.n_samples = np.zeros(self.n_stats, dtype=int)
        self.tau_h_s = view.tau_h_s.copy()
        self.ready = np.ones((self.n_tau, S), dtype=bool)
        self.estimators = None
        if config.warm_start:
            self.ready[:] = view.terminal[None, :]
            # anchor costs are unknown until their warm-up finishes
            self.tau_h_s[~self.ready] = 0.0
            self.estimators = [[TauEstimator(view.tau, max(config.K, 2)) for _ in range(S)]
                               for _ in range(self.n_tau)]
        self.k = 0
        self._cache = {}
        self.weights = None
        self.targets = None
        self.values = None

    # -- indexing helpers
    def _ts(self, h):
        return 0 if self.n_stats == 1 else h

    def _tt(self, h):
        return 0 if self.n_tau == 1 else h

    def kappas(self, tt) -> np.ndarray:
        v = self.view
        gap = v.tau - self.tau_h_s[tt]
        if self.cfg.kappa == "theoretical":
            with np.errstate(divide="ignore"):
                kap = 2.0 * v.H / gap + 1.0
        else:
            kap = np.full(v.S, float(self.cfg.kappa))
        return np.where(v.terminal | ~self.ready[tt], 1.0, kap)

    # -- data
    def observe(self, s, h, chosen: ChosenAction, obs) -> None:
        phi = chosen.feature
        t = self._ts(h)
        self.gram[t] += np.outer(phi, phi)
        self.reward_target[t] += self._reward_signal(obs) * phi
        self.cost_target[t] += obs.noisy_cost * phi
        self.next_map[t][:, obs.next_state] += phi
        self.n_samples[t] += 1
        if self.estimators is not None and chosen.handle == "warmup":
            tt = self._tt(h)
            est = self.estimators[tt][s]
            if est.add(obs.noisy_cost):
                self.ready[tt, s] = True
                self.tau_h_s[tt, s] = est.result.conservative_tau(self.view.tau)

    def _reward_signal(self, obs):
        return obs.reward

    def confidence(self, h) -> ConfidenceBatch:
        """Cost bounds for every state at step ``h`` (cached within an episode)."""
        t, tt = self._ts(h), self._tt(h)
        key = ("conf", t, tt)
        if key in self._cache:
            return self._cache[key]
        self._cache[key] = ConfidenceBatch(
            self.view.anchors, self.tau_h_s[tt], self.gram[t], self.cost_target[t],
            self.view.tau, self.beta, self.cfg.lam)
        return self._cache[key]

    # -- planning
    def begin_episode(self) -> None:
        v = self.view
        H, S = v.H, v.S
        lam_eye = self.cfg.lam * np.eye(v.d)
        inv = [spd_inverse(lam_eye + g) for g in self.gram]
        self.weights = np.zeros((H, v.d))
        self.targets = np.zeros((H, v.d))
        self.values = np.zeros((H + 1, S))
        self._begin_plan()
        for h in range(H - 1, -1, -1):
            t = self._ts(h)
            b = self.reward_target[t] + self.next_map[t] @ self.values[h + 1]
            w = inv[t] @ b
            self.targets[h], self.weights[h] = b, w
            self.values[h] = np.minimum(self._plan_step(h, w, inv[t]), H)
        self.k += 1

    def _begin_plan(self):
        self._cache = {}

    def _plan_step(self, h, w, A_inv) -> np.ndarray:
        raise NotImplementedError

    def _warmup_action(self, s, h) -> Optional[ChosenAction]:
        if self.estimators is None or self.ready[self._tt(h), s]:
            return None
        return ChosenAction("warmup", self.view.anchors[s])

    def mean_features(self) -> np.ndarray:
        """(H, S, d) expected feature of the frozen policy."""
        raise NotImplementedError


class _DeterministicAgent(LinearAgent):
    """Argmax of the optimistic Q over a per-state candidate set."""

    def _kappa_for_bonus(self, tt):
        return np.ones(self.view.S)

    def _candidates(self, h):
        """Return ``(features (S, n, d), mask (S, n), handles)`` for step ``h``."""
        raise NotImplementedError

    def _plan_step(self, h, w, A_inv):
        feats, mask, handles = self._candidates(h)
        kap = self._kappa_for_bonus(self._tt(h))
        key = ("bonus", self._ts(h), id(feats))
        if key not in self._cache:
            self._cache[key] = quad_norms(feats, A_inv)
        f = feats @ w + kap[:, None] * self.beta * self._cache[key]
        j, best = _masked_argmax(f, mask)
        self._choice[h] = j
        self._chosen_feat[h] = feats[np.arange(len(j)), j]
        self._handles[h] = handles
        self._objective[h] = f
        return best

    def _begin_plan(self):
        super()._begin_plan()
        H, S, d = self.view.H, self.view.S, self.view.d
        self._choice = np.zeros((H, S), dtype=int)
        self._chosen_feat = np.zeros((H, S, d))
        self._handles = [None] * H
        self._objective = [None] * H

    def _star_or_finite(self, alpha_or_mask):
        """Shared candidate construction for star (alpha array) and finite (mask) geometry."""
        v = self.view
        if v.star:
            alpha = alpha_or_mask
            a = v.anchors[:, None, :]
            seg = alpha[..., None] * v.endpoints + (1 - alpha[..., None]) * a
            feats = np.concatenate([a, seg], axis=1)
            mask = np.concatenate([np.ones((v.S, 1), bool), v.endpoint_mask], axis=1)
            return feats, mask, alpha
        mask = alpha_or_mask & v.action_mask
        mask[np.arange(v.S), v.anchor_index] = True
        return v.actions, mask, None

    def act(self, s, h, rng=None) -> ChosenAction:
        warm = self._warmup_action(s, h)
        if warm is not None:
            return warm
        j = int(self._choice[h, s])
        feat = self._chosen_feat[h, s]
        if self.view.star:
            handle = None if j == 0 else (j - 1, float(self._handles[h][s, j - 1]))
        else:
            handle = j
        return ChosenAction(handle, feat)

    def mean_features(self):
        out = self._chosen_feat.copy()
        if self.estimators is not None:
            for h in range(self.view.H):
                nr = ~self.ready[self._tt(h)]
                out[h, nr] = self.view.anchors[nr]
        return out


class SlucbAgent(_DeterministicAgent):
    uses_cost_model = True

    def _kappa_for_bonus(self, tt):
        return self.kappas(tt)

    def _candidates(self, h):
        key = (self._ts(h), self._tt(h))
        if key not in self._cache:
            v = self.view
            conf = self.confidence(h)
            ready = self.ready[self._tt(h)] & ~v.terminal
            if v.star:
                alpha = conf.max_alpha(v.endpoints)
                alpha[~ready] = 0.0
                self._cache[key] = self._star_or_finite(alpha)
            else:
                safe = conf.ucb(v.actions) <= v.tau
                safe[~ready] = False
                self._cache[key] = self._star_or_finite(safe)
        return self._cache[key]


class LsviKnownGammaAgent(_DeterministicAgent):
    """Optimistic LSVI restricted to the true safe set."""

    def __init__(self, view: AgentView, config: AgentConfig, gamma):
        super().__init__(view, config)
        self.gamma = np.asarray(gamma, dtype=float)
        self.estimators = None
        self.ready[:] = True

    def _candidates(self, h):
        key = self._tt(h)
        if key not in self._cache:
            v = self.view
            g = self.gamma[0 if len(self.gamma) == 1 else h]
            if v.star:
                c_end = v.endpoints @ g
                c0 = (v.anchors @ g)[:, None]
                with np.errstate(divide="ignore", invalid="ignore"):
                    alpha = np.where(c_end <= v.tau, 1.0, (v.tau - c0) / (c_end - c0))
                alpha = np.clip(alpha, 0.0, 1.0)
                alpha[v.terminal] = 0.0
                self._cache[key] = self._star_or_finite(alpha)
            else:
                safe = v.actions @ g <= v.tau
                safe[v.terminal] = False
                self._cache[key] = self._star_or_finite(safe)
        return self._cache[key]


class LsviPenaltyAgent(_DeterministicAgent):
    """Unconstrained optimistic LSVI on the penalized signal ``r - penalty*z``."""

    def __init__(self, view: AgentView, config: AgentConfig):
        super().__init__(view, config)
        self.penalty = float(config.penalty)
        self.estimators = None
        self.ready[:] = True

    def _reward_signal(self, obs):
        return obs.reward - self.penalty * obs.noisy_cost

    def _candidates(self, h):
        if "all" not in self._cache:
            v = self.view
            if v.star:
                # the objective is convex along a segment, so endpoints suffice
                alpha = np.ones(v.endpoints.shape[:2])
                self._cache["all"] = self._star_or_finite(alpha)
            else:
                self._cache["all"] = self._star_or_finite(np.ones((v.S, v.actions.shape[1]), bool))
        return self._cache["all"]


class RslucbAgent(LinearAgent):
    """Randomized policies constrained in expectation through the cost bound."""

    uses_cost_model = True
    randomized = True

    def _begin_plan(self):
        super()._begin_plan()
        v = self.view
        self._policy = np.zeros((v.H, v.S, v.actions.shape[1]))

    def _solver(self, h):
        key = (self._ts(h), self._tt(h))
        if key not in self._cache:
            v = self.view
            conf = self.confidence(h)
            ready = self.ready[self._tt(h)] & ~v.terminal
            groups = {}
            for s in np.flatnonzero(ready):
                n = int(v.action_mask[s].sum())
                groups.setdefault(n, []).append(s)
            solvers = []
            for n, states in groups.items():
                states = np.array(states)
                others = np.array([[i for i in range(n) if i != v.anchor_index[s]] for s in states],
                                  dtype=int).reshape(len(states), n - 1)
                if n == 1:
                    solvers.append((states, others, None))
                    continue
                X = v.actions[states[:, None], others]  # (B, m, d)
                sub = _subset(conf, states)
                p = sub.linear_part(X) - sub.tau_h_s[:, None]
                U = sub.orth(X)
                M = np.einsum("bid,bde,bje->bij", U, sub.inv, U)
                solver = SafeMixtureSolver(p, M, v.tau - sub.tau_h_s, self.beta, self.cfg.max_enum)
                solvers.append((states, others, solver))
            self._cache[key] = solvers
        return self._cache[key]

    def _plan_step(self, h, w, A_inv):
        v = self.view
        kap = self.kappas(self._tt(h))
        key = ("bonus", self._ts(h))
        if key not in self._cache:
            self._cache[key] = quad_norms(v.actions, A_inv)
        q = v.actions @ w + kap[:, None] * self.beta * self._cache[key]
        S = v.S
        pol = self._policy[h]
        pol[:] = 0.0
        pol[np.arange(S), v.anchor_index] = 1.0
        value = q[np.arange(S), v.anchor_index].copy()
        for states, others, solver in self._solver(h):
            if solver is None:
                continue
            q0 = q[states, v.anchor_index[states]]
            c = q[states[:, None], others] - q0[:, None]
            x, gain = solver.solve(c)
            pol[states[:, None], others] = x
            pol[states, v.anchor_index[states]] = np.maximum(0.0, 1.0 - x.sum(axis=1))
            value[states] = q0 + gain
        self._q = q
        return value

    def act(self, s, h, rng) -> ChosenAction:
        warm = self._warmup_action(s, h)
        if warm is not None:
            return warm
        theta = self._policy[h, s]
        theta = theta / theta.sum()
        a = int(rng.choice(len(theta), p=theta))
        if self.view.star:
            handle = None if a == 0 else (a - 1, 1.0)
        else:
            handle = a
        return ChosenAction(handle, self.view.actions[s, a], theta.copy())

    def policy(self, h, s) -> np.ndarray:
        return self._policy[h, s]

    def mean_features(self):
        out = np.einsum("hsa,sad->hsd", self._policy, self.view.actions)
        if self.estimators is not None:
            for h in range(self.view.H):
                nr = ~self.ready[self._tt(h)]
                out[h, nr] = self.view.anchors[nr]
        return out


def _subset(conf: ConfidenceBatch, states) -> ConfidenceBatch:
    sub = object.__new__(ConfidenceBatch)
    for name in ("anchor_norm", "unit", "tau_h_s", "proj", "completed", "inv", "gamma_hat"):
        setattr(sub, name, getattr(conf, name)[states])
    sub.tau, sub.beta, sub.lam = conf.tau, conf.beta, conf.lam
    return sub


AGENTS = ("slucb", "rslucb", "lsvi_known_gamma", "lsvi_penalty")


def make_agent(name: str, spec: LinearMdpSpec, config: AgentConfig) -> LinearAgent:
    view = AgentView(spec)
    if name == "slucb":
        return SlucbAgent(view, config)
    if name == "rslucb":
        return RslucbAgent(view, config)
    if name == "lsvi_known_gamma":
        return LsviKnownGammaAgent(view, config, spec.gamma)
    if name == "lsvi_penalty":
        return LsviPenaltyAgent(view, config)
    raise ValueError(f"unknown agent {name!r}")


# thin functional entry points

def backward_pass_slucb(agent: SlucbAgent) -> np.ndarray:
    agent.begin_episode()
    return agent.weights


def backward_pass_rslucb(agent: RslucbAgent) -> np.ndarray:
    agent.begin_episode()
    return agent.weights


def safe_argmax_q(agent: _DeterministicAgent, s, h) -> ChosenAction:
    return agent.act(s, h)


def act_rslucb(agent: RslucbAgent, s, h, rng) -> ChosenAction:
    return agent.act(s, h, rng)


def act_lsvi_known_gamma(agent: LsviKnownGammaAgent, s, h) -> ChosenAction:
    return agent.act(s, h)


def act_lsvi_penalty(agent: LsviPenaltyAgent, s, h) -> ChosenAction:
    return agent.act(s, h)
