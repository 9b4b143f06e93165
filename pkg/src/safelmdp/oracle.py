"""Exact safe-optimal planning and policy evaluation on the true model.

These routines see the full ground truth and are used for regret and as
test references.  Terminal (absorbing) states carry no safety constraint:
every action there is the same self-loop.
"""
from __future__ import annotations

import itertools
from typing import NamedTuple, Optional

import numpy as np

from .env import LinearMdpSpec, StarConvex, action_table

REGRET_TOL = 1e-9


class OptimalSolution(NamedTuple):
    weights: np.ndarray  # (H, d): Q*_h(s, a) = <w_h, phi(s, a)>
    values: np.ndarray  # (H+1, S), last row zero
    features: np.ndarray  # (H, S, d) mean feature of the optimal policy
    policy: Optional[np.ndarray]  # (H, S, n) over the padded action list, or None


class ActionDistribution(NamedTuple):
    """Per-(h, s) distributions over the padded action list of ``action_table``."""

    weights: np.ndarray  # (H, S, n)


def model_tables(spec: LinearMdpSpec):
    """Transition, reward and cost tables over the padded action lists.

    Returns ``(feats, mask, P, r, c)`` with ``P`` of shape (T, S, n, S) and
    ``r``, ``c`` of shape (T, S, n); ``T`` is 1 for stationary specs.
    """
    feats, mask = action_table(spec)
    P = np.einsum("sad,tdj->tsaj", feats, spec.mu)
    r = np.einsum("sad,td->tsa", feats, spec.theta)
    c = np.einsum("sad,td->tsa", feats, spec.gamma)
    return feats, mask, P, r, c


def _t(spec, h):
    return 0 if spec.stationary else h


def _true_safe_alpha(cost_end, cost_anchor, tau):
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(cost_end <= tau, 1.0, (tau - cost_anchor[:, None]) / (cost_end - cost_anchor[:, None]))
    return np.clip(alpha, 0.0, 1.0)


def optimal_safe_dp(spec: LinearMdpSpec) -> OptimalSolution:
    """Backward induction over deterministic policies that respect the cost threshold."""
    H, S, d = spec.H, spec.n_states, spec.d
    feats, mask = action_table(spec)
    star = isinstance(spec.geometries[0], StarConvex)
    V = np.zeros((H + 1, S))
    W = np.zeros((H, d))
    chosen = np.zeros((H, S, d))
    policy = None if star else np.zeros((H, S, feats.shape[1]))
    for h in range(H - 1, -1, -1):
        w = spec.theta_at(h) + spec.mu_at(h) @ V[h + 1]
        g = spec.gamma_at(h)
        if star:
            ends = feats[:, 1:, :]
            alpha = _true_safe_alpha(ends @ g, spec.anchors @ g, spec.tau)
            alpha[spec.terminal] = 1.0
            a = spec.anchors[:, None, :]
            cand = np.concatenate([a, alpha[..., None] * ends + (1 - alpha[..., None]) * a], axis=1)
            ok = mask
        else:
            cand = feats
            ok = mask & ((feats @ g <= spec.tau) | spec.terminal[:, None])
            ok[np.arange(S), [gg.anchor_index for gg in spec.geometries]] = True
        vals = np.where(ok, cand @ w, -np.inf)
        j = np.argmax(vals, axis=1)
        V[h] = vals[np.arange(S), j]
        W[h] = w
        chosen[h] = cand[np.arange(S), j]
        if policy is not None:
            policy[h, np.arange(S), j] = 1.0
    return OptimalSolution(W, V, chosen, policy)


def best_constrained_mixture(q, c, tau, mask=None):
    """Max of ``q @ theta`` over distributions with ``c @ theta <= tau``.

    One linear constraint on the simplex, so some optimal vertex mixes at
    most two actions; rows are solved by enumerating singletons and pairs.
    Returns ``(theta, value)``.  Rows without any feasible point fall back
    to the cheapest action.
    """
    q = np.atleast_2d(q)
    c = np.atleast_2d(c)
    B, n = q.shape
    mask = np.ones((B, n), bool) if mask is None else np.atleast_2d(mask)
    feas = mask & (c <= tau)
    single = np.where(feas, q, -np.inf)
    j = np.argmax(single, axis=1)
    best = single[np.arange(B), j]
    theta = np.zeros((B, n))
    theta[np.arange(B), j] = 1.0
    none = ~feas.any(axis=1)
    if none.any():
        jc = np.argmin(np.where(mask, c, np.inf), axis=1)
        theta[none] = 0.0
        theta[np.flatnonzero(none), jc[none]] = 1.0
        best[none] = q[np.flatnonzero(none), jc[none]]
    ci, cj = c[:, :, None], c[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (tau - ci) / (cj - ci)  # weight on j, binding constraint
        ok = feas[:, :, None] & mask[:, None, :] & (cj > tau) & (t >= 0) & (t <= 1)
        pair = np.where(ok, (1 - t) * q[:, :, None] + t * q[:, None, :], -np.inf)
    flat = pair.reshape(B, -1)
    k = np.argmax(flat, axis=1)
    pv = flat[np.arange(B), k]
    better = pv > best
    for b in np.flatnonzero(better):
        i, jj = divmod(int(k[b]), n)
        theta[b] = 0.0
        theta[b, i], theta[b, jj] = 1 - t[b, i, jj], t[b, i, jj]
        best[b] = pv[b]
    return theta, best


def optimal_safe_dp_randomized(spec: LinearMdpSpec) -> OptimalSolution:
    """Backward induction over randomized policies safe in expectation at every step."""
    H, S, d = spec.H, spec.n_states, spec.d
    feats, mask = action_table(spec)
    V = np.zeros((H + 1, S))
    W = np.zeros((H, d))
    policy = np.zeros((H, S, feats.shape[1]))
    for h in range(H - 1, -1, -1):
        w = spec.theta_at(h) + spec.mu_at(h) @ V[h + 1]
        q = feats @ w
        c = feats @ spec.gamma_at(h)
        c = np.where(spec.terminal[:, None], 0.0, c)
        theta, best = best_constrained_mixture(q, c, spec.tau, mask)
        policy[h], V[h], W[h] = theta, best, w
    chosen = np.einsum("hsa,sad->hsd", policy, feats)
    return OptimalSolution(W, V, chosen, policy)


def evaluate_policy(spec: LinearMdpSpec, policy) -> np.ndarray:
    """Exact values (H+1, S) of a policy.

    ``policy`` is either an (H, S, d) array of per-(h, s) mean features or an
    ``ActionDistribution``.  By linearity a randomized policy is fully
    described by its mean feature.
    """
    S = spec.n_states
    if isinstance(policy, ActionDistribution):
        feats, _ = action_table(spec)
        policy = np.einsum("hsa,sad->hsd", policy.weights, feats)
    policy = np.asarray(policy, dtype=float)
    H = policy.shape[0]
    V = np.zeros((H + 1, S))
    for h in range(H - 1, -1, -1):
        phi = policy[h]
        V[h] = phi @ spec.theta_at(h) + (phi @ spec.mu_at(h)) @ V[h + 1]
    return V


def check_event_e1(spec: LinearMdpSpec, safety_states, beta=None) -> dict:
    """Whether the true complement cost parameter lies in each confidence ellipsoid.

    ``safety_states`` maps keys ``(h, s)`` (any extra key fields are kept)
    to ``SafetyState``; the step index is the first element of the key.
    """
    out = {}
    for key, st in safety_states.items():
        h = key[0]
        b = st.beta if beta is None else beta
        diff = st.proj @ spec.gamma_at(h) - st.gamma_hat
        radius = np.sqrt(max(float(diff @ st.completed_gram() @ diff), 0.0))
        out[key] = bool(radius <= b)
    return out


def regret(initial_states, optimal: OptimalSolution, policy_values, strict=True) -> np.ndarray:
    """Cumulative pseudo-regret from the per-episode initial-state values."""
    s1 = np.asarray(initial_states, dtype=int)
    terms = optimal.values[0, s1] - np.asarray(policy_values, dtype=float)
    if strict and np.any(terms < -REGRET_TOL):
        raise ValueError("negative regret term: policy beats the safe optimum")
    return np.cumsum(terms)


# -- brute-force validators -----------------------------------------------------

def brute_force_safe_values(spec: LinearMdpSpec, max_policies=200_000) -> np.ndarray:
    """Best initial value per state over all deterministic safe finite-action policies."""
    H, S = spec.H, spec.n_states
    feats, mask, P, r, c = model_tables(spec)
    choices = []
    for h in range(H):
        t = _t(spec, h)
        for s in range(S):
            ok = mask[s] & ((c[t, s] <= spec.tau) | spec.terminal[s])
            ok[spec.geometries[s].anchor_index] = True
            choices.append(np.flatnonzero(ok))
    total = int(np.prod([len(x) for x in choices]))
    if total > max_policies:
        raise ValueError("too many policies to enumerate")
    pols = np.array(list(itertools.product(*choices))).reshape(total, H, S)
    V = np.zeros((total, S))
    ss = np.arange(S)
    for h in range(H - 1, -1, -1):
        t = _t(spec, h)
        a = pols[:, h, :]
        V = r[t, ss, a] + np.einsum("psj,pj->ps", P[t, ss, a], V)
    return V.max(axis=0)


def grid_mixture_max(q, c, tau, step):
    """Dense simplex-grid optimum of ``q @ theta`` subject to ``c @ theta <= tau``."""
    q, c = np.asarray(q, float), np.asarray(c, float)
    n = len(q)
    m = int(round(1 / step))
    if n == 1:
        return float(q[0]) if c[0] <= tau else -np.inf
    free = min(n - 1, 2)
    best = -np.inf
    for prefix in itertools.product(range(m + 1), repeat=n - 1 - free):
        rem = m - sum(prefix)
        if rem < 0:
            continue
        grids = np.meshgrid(*[np.arange(rem + 1)] * free, indexing="ij")
        G = np.stack([g.ravel() for g in grids], axis=1)
        G = G[G.sum(axis=1) <= rem]
        last = rem - G.sum(axis=1)
        theta = np.column_stack([np.tile(np.array(prefix, dtype=int), (len(G), 1)), G, last]) / m
        ok = theta @ c <= tau + 1e-12
        if ok.any():
            best = max(best, float((theta[ok] @ q).max()))
    return best
