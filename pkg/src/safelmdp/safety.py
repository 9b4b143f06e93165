"""Cost confidence sets built in the orthogonal complement of a safe anchor.

The cost of the anchor feature is known, so only the component of the cost
parameter orthogonal to the anchor has to be learned.  ``SafetyState`` holds
that regression for one (step, state) pair; ``SafeMixtureSolver`` maximizes
a linear objective over the distributions whose mean feature passes the
cost upper bound.
"""
from __future__ import annotations

import itertools
import warnings
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .numerics import SingularGramError, complement_projector, normalize


class SafetyState:
    """Complement-space cost regression for one anchor.

    ``gram_orth`` is ``lam*(I - a a^T) + sum P x x^T P`` (rank ``d-1`` along
    the anchor); solves and norms use the completion ``gram_orth + lam*a a^T``,
    which agrees with any pseudo-inverse on vectors orthogonal to the anchor.
    """

    def __init__(self, anchor, tau: float, tau_h_s: float, beta: float, lam: float = 1.0):
        self.anchor = np.asarray(anchor, dtype=float)
        self.unit = normalize(self.anchor)
        self.anchor_norm = float(np.linalg.norm(self.anchor))
        self.proj = complement_projector(self.anchor)
        self.tau = float(tau)
        self.tau_h_s = float(tau_h_s)
        self.beta = float(beta)
        self.lam = float(lam)
        self.gram_orth = lam * self.proj.copy()
        self.target_orth = np.zeros(self.anchor.size)
        self._factor = None
        self._gamma_hat = None

    @classmethod
    def from_moments(cls, anchor, gram, cost_target, tau, tau_h_s, beta, lam=1.0):
        """Build from raw sums ``gram = sum x x^T`` and ``cost_target = sum z x``.

        Every sample ``x`` with cost observation ``z`` enters projected with
        this state's anchor, so one set of moments serves all states at a step.
        """
        st = cls(anchor, tau, tau_h_s, beta, lam)
        P = st.proj
        st.gram_orth = lam * P + P @ gram @ P
        coef = tau_h_s / st.anchor_norm
        st.target_orth = P @ (np.asarray(cost_target) - coef * (gram @ st.unit))
        return st

    def copy(self) -> "SafetyState":
        st = SafetyState(self.anchor, self.tau, self.tau_h_s, self.beta, self.lam)
        st.gram_orth = self.gram_orth.copy()
        st.target_orth = self.target_orth.copy()
        return st

    def completed_gram(self) -> np.ndarray:
        return self.gram_orth + self.lam * np.outer(self.unit, self.unit)

    def _fac(self):
        if self._factor is None:
            try:
                self._factor = cho_factor(self.completed_gram(), lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise SingularGramError("cost gram is not positive definite") from exc
        return self._factor

    def inverse(self) -> np.ndarray:
        return cho_solve(self._fac(), np.eye(self.anchor.size), check_finite=False)

    @property
    def gamma_hat(self) -> np.ndarray:
        """Estimate of the complement component of the cost parameter."""
        if self._gamma_hat is None:
            self._gamma_hat = self.proj @ cho_solve(self._fac(), self.target_orth, check_finite=False)
        return self._gamma_hat

    def known_part(self, phi) -> np.ndarray:
        """Cost carried by the anchor direction, known exactly."""
        return (np.asarray(phi) @ self.unit) / self.anchor_norm * self.tau_h_s

    def linear_part(self, phi) -> np.ndarray:
        return self.known_part(phi) + np.asarray(phi) @ self.gamma_hat

    def bonus_norm(self, phi) -> np.ndarray:
        orth = np.asarray(phi) @ self.proj
        sol = cho_solve(self._fac(), np.atleast_2d(orth).T, check_finite=False)
        q = np.einsum("ij,ji->i", np.atleast_2d(orth), sol)
        out = np.sqrt(np.maximum(q, 0.0))
        return out[0] if np.ndim(phi) == 1 else out

    def _invalidate(self):
        self._factor = None
        self._gamma_hat = None


def orth_cost_observation(z, phi, state: SafetyState):
    """Remove the known anchor-direction share from a cost observation."""
    return z - state.known_part(phi)


def update_safety(state: SafetyState, phi, z) -> SafetyState:
    phi = np.asarray(phi, dtype=float)
    if not (np.all(np.isfinite(phi)) and np.isfinite(z)):
        raise ValueError("non-finite value in safety update")
    orth = state.proj @ phi
    state.gram_orth += np.outer(orth, orth)
    state.target_orth += orth_cost_observation(z, phi, state) * orth
    state._invalidate()
    return state


def cost_ucb(state: SafetyState, phi):
    """Upper confidence bound on the cost of ``phi`` (vector or rows)."""
    return state.linear_part(phi) + state.beta * state.bonus_norm(phi)


def is_safe_estimate(state: SafetyState, phi):
    return cost_ucb(state, phi) <= state.tau


def max_safe_alpha(state: SafetyState, endpoint):
    """Largest alpha with ``alpha*endpoint + (1-alpha)*anchor`` estimated safe.

    The bound is affine in alpha along the segment (the anchor contributes
    only its known cost), so the crossing point has a closed form.
    """
    M = np.asarray(cost_ucb(state, endpoint), dtype=float)
    gap = state.tau - state.tau_h_s
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(M <= state.tau, 1.0, gap / (M - state.tau_h_s))
    alpha = np.clip(alpha, 0.0, 1.0)
    return float(alpha) if alpha.ndim == 0 else alpha


# -- randomized safe policies -------------------------------------------------

class SafePolicy(NamedTuple):
    weights: np.ndarray  # probability vector over the action list
    value: float


def _supports(m):
    for size in range(1, m + 1):
        yield from itertools.combinations(range(m), size)


def _real_roots(a, b, c):
    """Real roots of a*w^2 + b*w + c (vectorized); NaN where absent."""
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (np.abs(a) > 1e-300)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(ok, (-b + sq) / (2 * a), np.nan)
        r2 = np.where(ok, (-b - sq) / (2 * a), np.nan)
    return r1, r2


class SafeMixtureSolver:
    """Exact maximizer of ``c^T x`` over ``{x >= 0, sum x <= 1, p^T x + beta*sqrt(x^T M x) <= delta}``.

    Problems are batched over a leading axis.  ``x`` holds the weights of
    the non-anchor actions; the anchor takes the remaining mass.  Every
    optimum is a KKT point on some support, so the solver enumerates
    supports in closed form and keeps the best primal-feasible candidate.
    The support-dependent factorizations do not involve ``c``, so they are
    computed once and reused across objectives.
    """

    def __init__(self, p, M, delta, beta, max_enum=8):
        self.p = np.atleast_2d(np.asarray(p, dtype=float))
        self.M = np.asarray(M, dtype=float).reshape(self.p.shape + (self.p.shape[1],))
        self.delta = np.broadcast_to(np.asarray(delta, dtype=float), self.p.shape[:1]).copy()
        self.beta = float(beta)
        self.B, self.m = self.p.shape
        self.use_enum = self.m <= max_enum
        if self.use_enum:
            self._prepare()

    def _prepare(self):
        # supports of equal size are stacked: arrays carry a leading (n_supports,) axis
        self._groups = []
        scale = np.maximum(np.trace(self.M, axis1=1, axis2=2), 1.0)
        for k in range(1, self.m + 1):
            idx = np.array(list(itertools.combinations(range(self.m), k)))  # (n, k)
            MS = self.M[:, idx[:, :, None], idx[:, None, :]].transpose(1, 0, 2, 3)  # (n, B, k, k)
            MS = MS + (1e-12 * scale)[None, :, None, None] * np.eye(k)
            Minv = np.linalg.inv(MS)
            pS = self.p[:, idx].transpose(1, 0, 2)  # (n, B, k)
            Mp = (Minv @ pS[..., None])[..., 0]
            M1 = Minv.sum(axis=-1)
            dm = self.delta[None, :, None] - pS
            self._groups.append({
                "idx": idx, "MS": MS, "Minv": Minv, "pS": pS, "Mp": Mp, "M1": M1, "dm": dm,
                "pMp": (pS * Mp).sum(-1), "B1": (dm * M1).sum(-1), "C1": (dm * Mp).sum(-1),
            })
        h = self.p + self.beta * np.sqrt(np.maximum(np.einsum("bii->bi", self.M), 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(h > 0, np.minimum(1.0, self.delta[:, None] / h), 1.0)
        # single action mixed with the anchor up to the binding point: (m, B, m)
        self._singles = np.einsum("bi,ij->ibj", t, np.eye(self.m))

    def constraint(self, x):
        q = np.einsum("...bi,bij,...bj->...b", x, self.M, x)
        return np.einsum("bi,...bi->...b", self.p, x) + self.beta * np.sqrt(np.maximum(q, 0.0))

    def _make_feasible(self, x):
        x = np.clip(x, 0.0, None)
        g = self.constraint(x)
        s = x.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            f1 = np.where(g > self.delta, self.delta / g, 1.0)
            f2 = np.where(s > 1.0, 1.0 / s, 1.0)
        return x * np.minimum(f1, f2)[:, None]

    def _candidates(self, c):
        """Closed-form KKT candidates, shape (n_candidates, B, m); NaN rows are invalid."""
        B, m = c.shape
        beta2 = self.beta ** 2
        out = [self._singles]
        if beta2 == 0:
            # linear constraint: optimal vertices mix at most two actions
            for i, j in itertools.combinations(range(m), 2):
                a = (self.delta - self.p[:, j]) / (self.p[:, i] - self.p[:, j])
                x = np.zeros((1, B, m))
                x[0, :, i], x[0, :, j] = a, 1 - a
                out.append(x)
            return np.concatenate(out)
        for g in self._groups:
            idx = g["idx"]
            n, k = idx.shape
            cS = c[:, idx].transpose(1, 0, 2)  # (n, B, k)
            Mc = (g["Minv"] @ cS[..., None])[..., 0]
            cMc = (cS * Mc).sum(-1)
            cMp = (cS * g["Mp"]).sum(-1)
            ys = []
            # cone constraint active, simplex slack: scale y onto the cone boundary
            for w in _real_roots(cMc, -2 * cMp, g["pMp"] - beta2):
                y = w[..., None] * Mc - g["Mp"]
                t = self.delta[None, :] / ((g["pS"] * y).sum(-1) + beta2)
                y = t[..., None] * y
                y[~((w > 0) & (t > 0))] = np.nan
                ys.append(y)
            # both constraints active
            A1 = (g["dm"] * Mc).sum(-1)
            B1, C1 = g["B1"], g["C1"]
            g1 = Mc - (A1 / B1)[..., None] * g["M1"]
            g0 = ((C1 + beta2) / B1)[..., None] * g["M1"] - g["Mp"]
            Mg1 = (g["MS"] @ g1[..., None])[..., 0]
            Mg0 = (g["MS"] @ g0[..., None])[..., 0]
            a2 = (g1 * Mg1).sum(-1)
            a1 = 2 * (g1 * Mg0).sum(-1)
            a0 = (g0 * Mg0).sum(-1) - beta2
            for w in _real_roots(a2, a1, a0):
                y = w[..., None] * g1 + g0
                tot = y.sum(-1)
                y = y / tot[..., None]
                y[~(tot > 0)] = np.nan
                ys.append(y)
            for y in ys:
                x = np.zeros((n, B, m))
                rows = np.arange(n)[:, None, None]
                x[rows, np.arange(B)[None, :, None], idx[:, None, :]] = y
                out.append(x)
        return np.concatenate(out)

    def solve(self, c):
        """Return ``(x, value)`` for objective rows ``c`` of shape (B, m)."""
        c = np.atleast_2d(np.asarray(c, dtype=float))
        if not self.use_enum:
            return self._solve_cvx(c)
        B, m = c.shape
        tol = 1e-9
        with np.errstate(all="ignore"):
            X = self._candidates(c)
            valid = np.all(np.isfinite(X), axis=-1)
            X = np.where(valid[..., None], X, 0.0)
            feas = valid & np.all(X >= -tol, axis=-1) & (X.sum(-1) <= 1 + tol)
            feas &= self.constraint(np.clip(X, 0.0, None)) <= self.delta + tol * (1 + np.abs(self.delta))
            vals = np.where(feas, (X * c[None]).sum(-1), -np.inf)
        j = np.argmax(vals, axis=0)
        best = vals[j, np.arange(B)]
        x = np.where((best > 0)[:, None], X[j, np.arange(B)], 0.0)
        x = self._make_feasible(x)
        return x, (c * x).sum(-1)

    def _solve_cvx(self, c):
        import cvxpy as cp

        B, m = c.shape
        xs = np.zeros((B, m))
        for b in range(B):
            x = cp.Variable(m)
            L = np.linalg.cholesky(self.M[b] + 1e-12 * np.eye(m))
            cons = [x >= 0, cp.sum(x) <= 1,
                    self.p[b] @ x + self.beta * cp.norm(L.T @ x) <= self.delta[b]]
            prob = cp.Problem(cp.Maximize(c[b] @ x), cons)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                prob.solve(solver=cp.CLARABEL)
            if x.value is not None:
                xs[b] = x.value
        x = self._make_feasible(xs)
        val = np.einsum("bi,bi->b", c, x)
        return np.where((val >= 0)[:, None], x, 0.0), np.maximum(val, 0.0)


def mixture_problem(state: SafetyState, action_features, anchor_index=0):
    """Reduced data ``(p, M, delta, others)`` for one state's randomized problem."""
    F = np.asarray(action_features, dtype=float)
    others = np.array([i for i in range(len(F)) if i != anchor_index], dtype=int)
    X = F[others]
    lin = state.linear_part(X)
    U = X @ state.proj
    M = U @ state.inverse() @ U.T
    p = lin - state.tau_h_s
    return p, M, state.tau - state.tau_h_s, others


def safe_policy_max(state: SafetyState, q_values, action_features, anchor_index=0,
                    max_enum=8) -> SafePolicy:
    """Best distribution over a finite action list whose mean feature is estimated safe."""
    q = np.asarray(q_values, dtype=float)
    p, M, delta, others = mixture_problem(state, action_features, anchor_index)
    weights = np.zeros(len(q))
    if others.size == 0:
        weights[anchor_index] = 1.0
        return SafePolicy(weights, float(q[anchor_index]))
    solver = SafeMixtureSolver(p[None], M[None], delta, state.beta, max_enum=max_enum)
    x, gain = solver.solve((q[others] - q[anchor_index])[None])
    weights[others] = x[0]
    weights[anchor_index] = max(0.0, 1.0 - x[0].sum())
    return SafePolicy(weights, float(q[anchor_index] + gain[0]))


def mixture_constraint(state: SafetyState, weights, action_features) -> float:
    """Cost upper bound of the mean feature of a distribution (the constraint value)."""
    mean = np.asarray(weights) @ np.asarray(action_features)
    return float(cost_ucb(state, mean))


# -- unknown anchor cost --------------------------------------------------------

class TauEstimate(NamedTuple):
    tau_hat: float
    samples: int
    conservative_gap: float

    def conservative_tau(self, tau: float) -> float:
        """Upper estimate of the anchor cost to use in place of the true one."""
        return tau - self.conservative_gap


def warm_start_tau(spec, s, h, K, rng, min_gap=None, max_samples=10_000_000, chunk=4096) -> TauEstimate:
    """Play the anchor at (s, h) until the empirical gap test passes.

    Stops at the first ``k`` with ``tau_hat + 6*sqrt(log K / k) <= tau``.
    With ``min_gap`` given, running past ``64 log K / min_gap^2`` plays is an
    error (the gap is smaller than promised).
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    logK = np.log(K)
    limit = max_samples if min_gap is None else int(np.ceil(64 * logK / min_gap ** 2))
    true_cost = float(spec.tau_at(h, s))
    total, k = 0.0, 0
    while k < limit:
        n = min(chunk, limit - k)
        noise = spec.sigma * rng.standard_normal(n) if spec.sigma > 0 else np.zeros(n)
        sums = total + np.cumsum(true_cost + noise)
        ks = k + np.arange(1, n + 1)
        hit = np.flatnonzero(sums / ks + 6 * np.sqrt(logK / ks) <= spec.tau)
        if hit.size:
            j = hit[0]
            kk = int(ks[j])
            return TauEstimate(float(sums[j] / kk), kk, 4 * np.sqrt(logK / kk))
        total, k = float(sums[-1]), int(ks[-1])
    raise ValueError("gap too small")


class TauEstimator:
    """Online form of the warm-start rule, fed one anchor cost at a time."""

    def __init__(self, tau: float, K: int):
        self.tau = tau
        self.logK = np.log(K)
        self.total = 0.0
        self.samples = 0
        self.result = None

    @property
    def done(self) -> bool:
        return self.result is not None

    def add(self, z: float) -> bool:
        if self.done:
            return True
        self.total += z
        self.samples += 1
        k = self.samples
        if self.total / k + 6 * np.sqrt(self.logK / k) <= self.tau:
            self.result = TauEstimate(self.total / k, k, 4 * np.sqrt(self.logK / k))
        return self.done


class ConfidenceBatch:
    """All states' cost bounds at one step, built from shared moments.

    Row ``s`` agrees with ``SafetyState.from_moments(anchors[s], ...)``; the
    batched form avoids a Python loop over states.
    """

    def __init__(self, anchors, tau_h_s, gram, cost_target, tau, beta, lam=1.0):
        anchors = np.asarray(anchors, dtype=float)
        S, d = anchors.shape
        self.anchor_norm = np.linalg.norm(anchors, axis=1)
        if np.any(self.anchor_norm <= 0):
            raise ValueError("degenerate anchor")
        self.unit = anchors / self.anchor_norm[:, None]
        self.tau = float(tau)
        self.tau_h_s = np.asarray(tau_h_s, dtype=float)
        self.beta = float(beta)
        self.lam = float(lam)
        P = np.eye(d) - np.einsum("si,sj->sij", self.unit, self.unit)
        self.proj = P
        self.completed = lam * np.eye(d) + P @ gram @ P
        self.inv = np.linalg.inv(self.completed)
        coef = self.tau_h_s / self.anchor_norm
        r = np.asarray(cost_target)[None, :] - coef[:, None] * (self.unit @ gram)
        r = np.einsum("sij,sj->si", P, r)
        self.gamma_hat = np.einsum("sij,sjk,sk->si", P, self.inv, r)

    def known_part(self, F):
        """``F`` has shape (S, n, d)."""
        return np.einsum("snd,sd->sn", F, self.unit) * (self.tau_h_s / self.anchor_norm)[:, None]

    def linear_part(self, F):
        return self.known_part(F) + np.einsum("snd,sd->sn", F, self.gamma_hat)

    def orth(self, F):
        return F - np.einsum("snd,sd->sn", F, self.unit)[..., None] * self.unit[:, None, :]

    def bonus_norm(self, F):
        U = self.orth(F)
        q = np.einsum("sni,sij,snj->sn", U, self.inv, U)
        return np.sqrt(np.maximum(q, 0.0))

    def ucb(self, F):
        return self.linear_part(F) + self.beta * self.bonus_norm(F)

    def max_alpha(self, E):
        M = self.ucb(E)
        gap = (self.tau - self.tau_h_s)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = np.where(M <= self.tau, 1.0, gap / (M - self.tau_h_s[:, None]))
        return np.clip(alpha, 0.0, 1.0)

    def confidence_radius(self, gamma_true):
        """Distance of the true complement cost parameter from each estimate, in the gram norm."""
        diff = np.einsum("sij,j->si", self.proj, gamma_true) - self.gamma_hat
        q = np.einsum("si,sij,sj->s", diff, self.completed, diff)
        return np.sqrt(np.maximum(q, 0.0))

    def state(self, s) -> SafetyState:
        st = SafetyState(self.unit[s] * self.anchor_norm[s], self.tau, self.tau_h_s[s], self.beta, self.lam)
        st.gram_orth = self.completed[s] - self.lam * np.outer(self.unit[s], self.unit[s])
        st.target_orth = np.einsum("ij,j->i", self.completed[s], self.gamma_hat[s])
        return st
