"""Ground-truth linear MDPs and trajectory sampling.

Time steps are 0-based throughout (``h = 0 .. H-1``).  A spec whose
transition, reward and cost parameters do not depend on ``h`` is stored with
a leading axis of length one (``stationary=True``); use the ``*_at``
accessors rather than indexing the arrays directly.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from typing import NamedTuple, Sequence, Union

import numpy as np
from scipy.optimize import lsq_linear

from .numerics import DegenerateAnchorError

PROB_TOL = 1e-8
NEG_TOL = 1e-10
RANGE_TOL = 1e-9


class InvalidModelError(ValueError):
    """A generated or loaded model breaks a structural invariant."""


@dataclass(frozen=True)
class FiniteSet:
    features: np.ndarray  # (A, d)
    anchor_index: int = 0

    @property
    def anchor(self) -> np.ndarray:
        return self.features[self.anchor_index]

    @property
    def n_actions(self) -> int:
        return len(self.features)

    def feature(self, action) -> np.ndarray:
        return self.features[int(action)]

    def action_list(self) -> np.ndarray:
        return self.features


@dataclass(frozen=True)
class StarConvex:
    """Union of the segments ``[anchor, endpoints[i]]``.

    An action is ``(i, alpha)`` with feature ``alpha*endpoints[i] +
    (1-alpha)*anchor``; ``None`` denotes the anchor itself.
    """

    anchor: np.ndarray  # (d,)
    endpoints: np.ndarray  # (N, d)

    anchor_index = 0

    @property
    def n_segments(self) -> int:
        return len(self.endpoints)

    def feature(self, action) -> np.ndarray:
        if action is None:
            return self.anchor
        i, alpha = action
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("mixing weight outside [0, 1]")
        return alpha * self.endpoints[i] + (1.0 - alpha) * self.anchor

    def action_list(self) -> np.ndarray:
        """Anchor followed by the endpoints.

        Rewards, costs and transitions are linear in the feature, so any
        distribution over segment points is matched in expectation by a
        distribution over this finite list.
        """
        return np.vstack([self.anchor[None, :], self.endpoints])


ActionGeometry = Union[FiniteSet, StarConvex]


class StepObservation(NamedTuple):
    next_state: int
    reward: float
    noisy_cost: float
    true_cost: float


@dataclass
class LinearMdpSpec:
    d: int
    H: int
    mu: np.ndarray  # (H or 1, d, S); row i is the measure mu^(i) over states
    theta: np.ndarray  # (H or 1, d)
    gamma: np.ndarray  # (H or 1, d)
    tau: float
    geometries: list
    sigma: float = 0.0
    initial_dist: np.ndarray = None
    terminal: np.ndarray = None
    stationary: bool = False
    bounded: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        S = self.mu.shape[-1]
        if self.initial_dist is None:
            self.initial_dist = np.full(S, 1.0 / S)
        if self.terminal is None:
            self.terminal = np.zeros(S, dtype=bool)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        for g in self.geometries:
            if not np.linalg.norm(g.anchor) > 0:
                raise DegenerateAnchorError("degenerate anchor")
        self.anchors = np.array([g.anchor for g in self.geometries])
        self.tau_h_s = np.einsum("hd,sd->hs", self.gamma, self.anchors)

    @property
    def n_states(self) -> int:
        return self.mu.shape[-1]

    def _t(self, h: int) -> int:
        if not 0 <= h < self.H:
            raise IndexError(f"time step {h} outside [0, {self.H})")
        return 0 if self.stationary else h

    def mu_at(self, h):
        return self.mu[self._t(h)]

    def theta_at(self, h):
        return self.theta[self._t(h)]

    def gamma_at(self, h):
        return self.gamma[self._t(h)]

    def tau_at(self, h, s):
        return self.tau_h_s[self._t(h), s]

    def feature(self, s, action) -> np.ndarray:
        return self.geometries[s].feature(action)

    def to_dict(self) -> dict:
        geoms = []
        for g in self.geometries:
            if isinstance(g, FiniteSet):
                geoms.append({"kind": "finite", "features": g.features.tolist(),
                              "anchor_index": int(g.anchor_index)})
            else:
                geoms.append({"kind": "star_convex", "anchor": g.anchor.tolist(),
                              "endpoints": g.endpoints.tolist()})
        return {
            "d": self.d, "H": self.H, "tau": self.tau, "sigma": self.sigma,
            "stationary": self.stationary, "bounded": self.bounded,
            "mu": self.mu.tolist(), "theta": self.theta.tolist(),
            "gamma": self.gamma.tolist(), "geometries": geoms,
            "initial_dist": self.initial_dist.tolist(),
            "terminal": self.terminal.tolist(), "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LinearMdpSpec":
        geoms = []
        for g in data["geometries"]:
            if g["kind"] == "finite":
                geoms.append(FiniteSet(np.array(g["features"], float), int(g["anchor_index"])))
            elif g["kind"] == "star_convex":
                geoms.append(StarConvex(np.array(g["anchor"], float), np.array(g["endpoints"], float)))
            else:
                raise InvalidModelError(f"unknown geometry kind {g['kind']!r}")
        return cls(
            d=int(data["d"]), H=int(data["H"]),
            mu=np.array(data["mu"], float), theta=np.array(data["theta"], float),
            gamma=np.array(data["gamma"], float), tau=float(data["tau"]),
            geometries=geoms, sigma=float(data.get("sigma", 0.0)),
            initial_dist=np.array(data["initial_dist"], float),
            terminal=np.array(data["terminal"], bool),
            stationary=bool(data.get("stationary", False)),
            bounded=bool(data.get("bounded", True)), meta=data.get("meta", {}),
        )


def save_spec(spec: LinearMdpSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(spec.to_dict(), fh)


def load_spec(path) -> LinearMdpSpec:
    with open(path) as fh:
        return LinearMdpSpec.from_dict(json.load(fh))


def action_table(spec: LinearMdpSpec):
    """Per-state finite action lists padded to a common length.

    Returns ``(features (S, n, d), mask (S, n))``; padding rows repeat the
    anchor and are masked out.
    """
    lists = [g.action_list() for g in spec.geometries]
    n_max = max(len(x) for x in lists)
    feats = np.repeat(spec.anchors[:, None, :], n_max, axis=1)
    mask = np.zeros((spec.n_states, n_max), dtype=bool)
    for s, x in enumerate(lists):
        feats[s, : len(x)] = x
        mask[s, : len(x)] = True
    return feats, mask


# -- dynamics -----------------------------------------------------------------

def feature_transition_probs(spec: LinearMdpSpec, phi, h: int) -> np.ndarray:
    p = np.asarray(phi) @ spec.mu_at(h)
    total = p.sum(axis=-1)
    if np.any(np.abs(total - 1.0) > PROB_TOL) or np.any(p < -PROB_TOL):
        raise InvalidModelError("invalid model: transition vector is not a distribution")
    p = np.clip(p, 0.0, None)
    return p / p.sum(axis=-1, keepdims=True)


def transition_probs(spec: LinearMdpSpec, s: int, a, h: int) -> np.ndarray:
    return feature_transition_probs(spec, spec.feature(s, a), h)


def sample_feature_step(spec: LinearMdpSpec, phi, h: int, rng) -> StepObservation:
    p = feature_transition_probs(spec, phi, h)
    nxt = int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), p.size - 1))
    reward = float(phi @ spec.theta_at(h))
    cost = float(phi @ spec.gamma_at(h))
    noise = spec.sigma * rng.standard_normal() if spec.sigma > 0 else 0.0
    return StepObservation(nxt, reward, cost + noise, cost)


def sample_step(spec: LinearMdpSpec, s: int, a, h: int, rng) -> StepObservation:
    """Draw one transition; the reward is exact, only the cost is noisy."""
    return sample_feature_step(spec, spec.feature(s, a), h, rng)


def sample_initial_state(spec: LinearMdpSpec, rng) -> int:
    return int(rng.choice(spec.n_states, p=spec.initial_dist))


# -- validation ---------------------------------------------------------------

def validate_spec(spec: LinearMdpSpec) -> list:
    """Return a list of human-readable invariant failures (empty if valid)."""
    problems = []
    sq = np.sqrt(spec.d)
    n_t = 1 if spec.stationary else spec.H
    for t in range(n_t):
        mu, th, ga = spec.mu[t], spec.theta[t], spec.gamma[t]
        if spec.bounded:
            if np.linalg.norm(th) > sq + 1e-12:
                problems.append(f"h={t}: |theta| exceeds sqrt(d)")
            if np.linalg.norm(ga) > sq + 1e-12:
                problems.append(f"h={t}: |gamma| exceeds sqrt(d)")
            if np.linalg.norm(mu.sum(axis=1)) > sq + 1e-12:
                problems.append(f"h={t}: |mu(S)| exceeds sqrt(d)")
        for s, g in enumerate(spec.geometries):
            feats = g.action_list()
            p = feats @ mu
            if np.any(np.abs(p.sum(axis=1) - 1.0) > PROB_TOL):
                problems.append(f"h={t} s={s}: transition mass does not sum to 1")
            if np.any(p < -NEG_TOL):
                problems.append(f"h={t} s={s}: negative transition probability")
            r, c = feats @ th, feats @ ga
            if np.any(r < -RANGE_TOL) or np.any(r > 1 + RANGE_TOL):
                problems.append(f"h={t} s={s}: reward outside [0, 1]")
            if np.any(c < -RANGE_TOL) or np.any(c > 1 + RANGE_TOL):
                problems.append(f"h={t} s={s}: cost outside [0, 1]")
            if spec.bounded and np.any(np.linalg.norm(feats, axis=1) > 1 + 1e-12):
                problems.append(f"s={s}: feature norm exceeds 1")
            if not spec.terminal[s] and not spec.tau_h_s[t, s] < spec.tau:
                problems.append(f"h={t} s={s}: anchor cost {spec.tau_h_s[t, s]:.4g} not below tau")
    if abs(spec.initial_dist.sum() - 1.0) > PROB_TOL:
        problems.append("initial distribution does not sum to 1")
    return problems


# -- synthetic star-convex generator -------------------------------------------

def _unit_interval_on_simplex(v):
    # On the simplex <v + c*1, phi> = <v, phi> + c, so an affine map of the
    # coordinates sends the range over the whole simplex onto [0, 1].
    lo, hi = v.min(), v.max()
    return (v - lo) / (hi - lo)


def gen_synthetic(d=5, H=3, n_states=10, N=100, tau=0.5, sigma=0.01, rng=None,
                  geometry="star", min_gap=0.0, max_resamples=10_000, max_redraws=20) -> LinearMdpSpec:
    """Random linear MDP with simplex features.

    ``geometry="star"`` gives each state a finite star-convex feature set of
    ``N`` segments; ``geometry="finite"`` gives ``N`` discrete actions plus
    the anchor.  Anchors are drawn uniformly on the simplex until their cost
    is below ``tau - min_gap`` at every step.  When the per-step cost
    parameters leave no such point (the low-cost corners of different steps
    can be disjoint), the whole model is redrawn, up to ``max_redraws`` times.
    """
    if d < 2 or N < 1:
        raise ValueError("need d >= 2 and N >= 1")
    if geometry not in ("star", "finite"):
        raise ValueError(f"unknown geometry {geometry!r}")
    rng = np.random.default_rng(rng)
    for _draw in range(max_redraws):
        mu = rng.dirichlet(np.ones(n_states), size=(H, d))  # (H, d, S)
        theta = np.array([_unit_interval_on_simplex(rng.standard_normal(d)) for _ in range(H)])
        gamma = np.array([_unit_interval_on_simplex(rng.standard_normal(d)) for _ in range(H)])
        anchors = []
        for _ in range(n_states):
            cand = rng.dirichlet(np.ones(d), size=max_resamples)
            ok = np.flatnonzero(np.all(cand @ gamma.T < tau - min_gap, axis=1))
            if ok.size == 0:
                break
            anchors.append(cand[ok[0]])
        else:
            break
    else:
        raise InvalidModelError("no valid anchor found")
    geoms = []
    for anchor in anchors:
        endpoints = rng.dirichlet(np.ones(d), size=N)
        if geometry == "star":
            geoms.append(StarConvex(anchor, endpoints))
        else:
            geoms.append(FiniteSet(np.vstack([anchor, endpoints]), 0))
    spec = LinearMdpSpec(d=d, H=H, mu=mu, theta=theta, gamma=gamma, tau=tau,
                         geometries=geoms, sigma=sigma,
                         meta={"generator": "synthetic", "geometry": geometry})
    problems = validate_spec(spec)
    if problems:
        raise InvalidModelError("; ".join(problems))
    return spec


# -- gridworld ----------------------------------------------------------------

# left, right, down, up
MOVES = ((0, -1), (0, 1), (1, 0), (-1, 0))
ACTION_NAMES = ("left", "right", "down", "up")
_ORTHOGONAL = {0: (2, 3), 1: (2, 3), 2: (0, 1), 3: (0, 1)}


@dataclass(frozen=True)
class GridWorldMap:
    rows: tuple  # tuple of strings

    @classmethod
    def parse(cls, text: str) -> "GridWorldMap":
        rows = tuple(line.strip() for line in text.strip().splitlines() if line.strip())
        if not rows or len({len(r) for r in rows}) != 1:
            raise ValueError("map rows must be non-empty and of equal length")
        bad = set("".join(rows)) - set("SGD.")
        if bad:
            raise ValueError(f"unknown map characters {sorted(bad)}")
        flat = "".join(rows)
        if flat.count("G") != 1:
            raise ValueError("map needs exactly one goal")
        if flat.count("D") < 1:
            raise ValueError("map needs at least one danger cell")
        if flat.count("S") != 1:
            raise ValueError("map needs exactly one start cell")
        return cls(rows)

    @classmethod
    def load(cls, path=None) -> "GridWorldMap":
        if path is None:
            text = resources.files("safelmdp").joinpath("data/frozen_lake_10x10.txt").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        return cls.parse(text)

    @property
    def shape(self):
        return len(self.rows), len(self.rows[0])

    def cells(self, char) -> list:
        return [i for i, ch in enumerate("".join(self.rows)) if ch == char]

    def target(self, s: int, a: int) -> int:
        nrow, ncol = self.shape
        r, c = divmod(s, ncol)
        dr, dc = MOVES[a]
        r2, c2 = r + dr, c + dc
        if 0 <= r2 < nrow and 0 <= c2 < ncol:
            return r2 * ncol + c2
        return s

    def transition_template(self, slip=0.05) -> np.ndarray:
        """Tabular kernel (S, 4, S); goal and danger cells absorb."""
        nrow, ncol = self.shape
        S = nrow * ncol
        P = np.zeros((S, 4, S))
        absorbing = set(self.cells("G")) | set(self.cells("D"))
        for s in range(S):
            for a in range(4):
                if s in absorbing:
                    P[s, a, s] = 1.0
                    continue
                P[s, a, self.target(s, a)] += 1.0 - 2 * slip
                for o in _ORTHOGONAL[a]:
                    P[s, a, self.target(s, o)] += slip
        return P

    def goal_distance(self) -> np.ndarray:
        """Shortest-path length to the goal through non-danger cells."""
        S = self.shape[0] * self.shape[1]
        danger = set(self.cells("D"))
        dist = np.full(S, np.inf)
        goal = self.cells("G")[0]
        dist[goal] = 0
        queue = deque([goal])
        while queue:
            s = queue.popleft()
            for a in range(4):
                t = self.target(s, a)
                if t not in danger and dist[t] == np.inf:
                    dist[t] = dist[s] + 1
                    queue.append(t)
        return dist


def build_gridworld(gmap: GridWorldMap = None, H=1000, tau=0.1, sigma=0.01, slip=0.05,
                    rng=None, anchor_actions=None, goal_reward=1.0, other_reward=0.01,
                    reward_fit="distance", anchor_rule="min_cost", max_attempts=100) -> LinearMdpSpec:
    """Frozen-lake style grid embedded as a linear MDP with ``d = |S|``.

    Features solve ``mu^T phi = p(.|s,a)`` for Gaussian ``mu``; the cost is
    the probability of landing in a danger cell.  Rewards are
    ``p(.|s,a) @ u`` for a per-landing-cell value ``u``, so they cannot hit
    ``goal_reward`` on the goal-ward move and ``other_reward`` elsewhere
    exactly.  ``reward_fit="distance"`` ramps ``u`` from ``other_reward`` to
    ``goal_reward`` as the grid distance to the goal shrinks, which ranks the
    goal-ward move first in every cell; ``"lsq"`` fits ``u`` in [0, 1] by
    bounded least squares against those targets.  The absorbing goal pays
    ``goal_reward`` forever.
    ``anchor_actions`` maps cell index to the known safe action.  Unlisted
    cells follow ``anchor_rule``: ``"min_cost"`` takes the lowest-cost
    action (lowest index on ties), ``"goalward"`` the safe action landing
    nearest the goal.
    """
    gmap = gmap or GridWorldMap.load()
    rng = np.random.default_rng(rng)
    P = gmap.transition_template(slip)
    S = P.shape[0]
    goal = gmap.cells("G")[0]
    danger = np.zeros(S, dtype=bool)
    danger[gmap.cells("D")] = True
    terminal = danger.copy()
    terminal[goal] = True

    for _attempt in range(max_attempts):
        mu = rng.standard_normal((S, S))  # (d, S): column s is mu*(s)
        if np.linalg.cond(mu) < 1e8:
            break
    else:
        raise InvalidModelError("could not draw an invertible measure matrix")
    # phi(s, a) solves mu^T phi = p(.|s, a)
    feats = np.linalg.solve(mu.T, P.reshape(S * 4, S).T).T.reshape(S, 4, S)

    dist = gmap.goal_distance()
    free = np.flatnonzero(~terminal)
    u = np.zeros(S)
    u[goal] = goal_reward
    residual = None
    if reward_fit == "distance":
        reach = free[np.isfinite(dist[free])]
        far = dist[reach].max()
        u[reach] = other_reward + (goal_reward - other_reward) * (1.0 - dist[reach] / far)
    elif reward_fit == "lsq":
        rows, targets = [], []
        for s in free:
            best = int(np.argmin([dist[gmap.target(s, a)] for a in range(4)]))
            for a in range(4):
                rows.append(P[s, a])
                targets.append(goal_reward if a == best else other_reward)
        rows, targets = np.array(rows), np.array(targets)
        fit = lsq_linear(rows[:, free], targets - rows @ u, bounds=(0.0, 1.0))
        u[free] = fit.x
        residual = float(fit.cost)
    else:
        raise ValueError(f"unknown reward fit {reward_fit!r}")
    theta = mu @ u
    gamma = mu @ danger.astype(float)

    true_cost = P @ danger.astype(float)  # (S, 4)
    anchor_actions = dict(anchor_actions or {})
    geoms = []
    for s in range(S):
        if terminal[s]:
            a0 = 0
        elif s in anchor_actions:
            a0 = int(anchor_actions[s])
        elif anchor_rule == "min_cost":
            a0 = int(np.argmin(true_cost[s]))
        elif anchor_rule == "goalward":
            ok = np.flatnonzero(true_cost[s] < tau)
            a0 = int(ok[np.argmin([dist[gmap.target(s, a)] for a in ok])]) if len(ok) else 0
        else:
            raise ValueError(f"unknown anchor rule {anchor_rule!r}")
        if not terminal[s] and not true_cost[s, a0] < tau:
            raise InvalidModelError(f"cell {s} has no safe action below tau")
        geoms.append(FiniteSet(feats[s], a0))

    init = np.zeros(S)
    init[gmap.cells("S")[0]] = 1.0
    spec = LinearMdpSpec(
        d=S, H=H, mu=mu[None], theta=theta[None], gamma=gamma[None], tau=tau,
        geometries=geoms, sigma=sigma, initial_dist=init, terminal=terminal,
        stationary=True, bounded=False,
        meta={"generator": "gridworld", "map": list(gmap.rows), "goal": goal,
              "danger": np.flatnonzero(danger).tolist(), "reward_fit": reward_fit, "reward_fit_residual": residual},
    )
    return spec
