"""Small dense linear algebra used throughout the package.

Anchored projections split a feature into its component along a known safe
feature and the orthogonal remainder.  ``RidgeState`` accumulates the Gram
matrix and target of a regularized least-squares problem and keeps a
Cholesky factorization for solves and inverse-Gram norms.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

#: Solves are refused once the 2-norm condition estimate exceeds this.
MAX_CONDITION = 1e12


class DegenerateAnchorError(ValueError):
    """Raised when an anchor (safe) feature has zero norm."""


class SingularGramError(np.linalg.LinAlgError):
    """Raised when a Gram matrix is too ill-conditioned to solve with."""


def normalize(x):
    x = np.asarray(x, dtype=float)
    nrm = np.linalg.norm(x)
    if not nrm > 0.0:
        raise DegenerateAnchorError("degenerate anchor")
    return x / nrm


class ProjectionSplit(NamedTuple):
    parallel: np.ndarray
    orthogonal: np.ndarray


def project_onto_anchor(x, anchor) -> ProjectionSplit:
    """Split ``x`` into its projection on span(anchor) and the remainder.

    ``x`` may be a single vector or a stack of row vectors.
    """
    a = normalize(anchor)
    x = np.asarray(x, dtype=float)
    coef = x @ a
    parallel = np.multiply.outer(coef, a)
    return ProjectionSplit(parallel, x - parallel)


def complement_projector(anchor) -> np.ndarray:
    """Matrix of the orthogonal projection onto the complement of ``anchor``."""
    a = normalize(anchor)
    return np.eye(a.size) - np.outer(a, a)


def _check_finite(*arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite value in ridge update")


class RidgeState:
    """Regularized least squares ``A = lam*I + sum x x^T``, ``b = sum y x``.

    The factorization is refreshed lazily: updates only touch the sums and
    the next solve/norm query re-factors from scratch.
    """

    def __init__(self, d: int, lam: float = 1.0):
        if lam <= 0:
            raise ValueError("lambda must be positive")
        self.lam = float(lam)
        self.gram = lam * np.eye(d)
        self.target = np.zeros(d)
        self._factor = None

    @property
    def d(self) -> int:
        return self.target.size

    @classmethod
    def from_moments(cls, gram, target, lam):
        """Build a state whose Gram already includes the ``lam*I`` term."""
        state = cls(len(target), lam)
        state.gram = np.array(gram, dtype=float)
        state.target = np.array(target, dtype=float)
        return state

    def copy(self) -> "RidgeState":
        return RidgeState.from_moments(self.gram, self.target, self.lam)

    def update(self, x, y) -> "RidgeState":
        x = np.asarray(x, dtype=float)
        _check_finite(x, y)
        self.gram += np.outer(x, x)
        self.target += y * x
        self._factor = None
        return self

    def update_batch(self, X, y) -> "RidgeState":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float)
        _check_finite(X, y)
        self.gram += X.T @ X
        self.target += X.T @ y
        self._factor = None
        return self

    def factor(self):
        if self._factor is None:
            try:
                c, lower = cho_factor(self.gram, lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise SingularGramError("gram is not positive definite") from exc
            diag = np.abs(np.diag(c))
            # (max/min pivot)^2 is a cheap lower estimate of cond_2(A)
            if diag.min() == 0.0 or (diag.max() / diag.min()) ** 2 > MAX_CONDITION:
                raise SingularGramError("gram is numerically singular")
            self._factor = (c, lower)
        return self._factor

    def solve(self, rhs=None) -> np.ndarray:
        rhs = self.target if rhs is None else rhs
        return cho_solve(self.factor(), rhs, check_finite=False)

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.d))

    def inv_norm(self, x) -> np.ndarray:
        """sqrt(x^T A^-1 x) for a vector or each row of a matrix."""
        x = np.asarray(x, dtype=float)
        sol = cho_solve(self.factor(), np.atleast_2d(x).T, check_finite=False)
        q = np.einsum("ij,ji->i", np.atleast_2d(x), sol)
        out = np.sqrt(np.maximum(q, 0.0))
        return out[0] if x.ndim == 1 else out


def ridge_update(state: RidgeState, x, y) -> RidgeState:
    return state.update(x, y)


def ridge_solve(state: RidgeState) -> np.ndarray:
    return state.solve()


def inv_weighted_norm(state: RidgeState, x):
    return state.inv_norm(x)


def quad_norms(X, A_inv) -> np.ndarray:
    """sqrt(x^T A_inv x) over the last axis of ``X`` (any leading shape)."""
    q = np.einsum("...i,ij,...j->...", X, A_inv, X)
    return np.sqrt(np.maximum(q, 0.0))


def spd_inverse(A) -> np.ndarray:
    """Inverse of a (stack of) SPD matrices via Cholesky."""
    A = np.asarray(A, dtype=float)
    L = np.linalg.cholesky(A)
    eye = np.broadcast_to(np.eye(A.shape[-1]), A.shape)
    Linv = np.linalg.solve(L, eye)
    return np.swapaxes(Linv, -1, -2) @ Linv
