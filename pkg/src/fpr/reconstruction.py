"""Ridge reconstruction of probe columns from gallery columns and the FPR distance.

Given probe features X (d x N) and gallery features Y (d x M)::

    W = (Y^T Y + beta I)^-1 Y^T X          (M x N)
    e_n = || x_n - Y w_n ||_2
    distance = sum_n h_n e_n

All arithmetic here is float64 regardless of the storage dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .features import DEFAULT_PYRAMID, PatchGeometry, PyramidSpec, SpatialFeatureSet, pyramid_pool

GRAD_EPS = 1e-9


class SingularGramError(np.linalg.LinAlgError):
    pass


class NonDifferentiableError(ValueError):
    """Some residual norm is (numerically) zero, where the norm has a kink."""

    def __init__(self, locations):
        self.locations = list(locations)
        super().__init__(f"residual norm below {GRAD_EPS:g} at columns {self.locations}")


@dataclass(frozen=True)
class RidgeParams:
    beta: float = 0.01
    # beta == 0 is only accepted together with this flag; it switches to a
    # rank-revealing least-squares solve returning the minimum-norm W.
    allow_min_norm: bool = False

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")
        if self.beta == 0 and not self.allow_min_norm:
            raise ValueError("beta == 0 requires allow_min_norm=True")


@dataclass
class MatchResult:
    distance: float
    errors: np.ndarray
    weights_used: np.ndarray
    coefficients: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {
            "distance": float(self.distance),
            "errors": [float(v) for v in self.errors],
            "weights": [float(v) for v in self.weights_used],
        }


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or 0 in a.shape:
        raise ValueError(f"{name} must be a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


class GalleryFactor:
    """Factorizations of one gallery's Y, reusable across any number of probes.

    Coefficients use the Cholesky factor of the M x M matrix ``A = Y^T Y + beta I``.
    Residuals use the equivalent d x d form ``X - Y W = beta (Y Y^T + beta I)^-1 X``,
    which avoids the cancellation in ``X - Y W`` when X is well reconstructed.
    """

    def __init__(self, Y, ridge: RidgeParams = RidgeParams()):
        self.Y = _as_matrix(Y, "Y")
        self.ridge = ridge
        self._primal = None
        self._dual = None

    @property
    def beta(self) -> float:
        return self.ridge.beta

    def _factor(self, mat: np.ndarray):
        mat[np.diag_indices_from(mat)] += self.beta
        try:
            return linalg.cho_factor(mat, lower=False, check_finite=False)
        except linalg.LinAlgError as exc:
            raise SingularGramError("ridge system is not positive definite") from exc

    @property
    def primal(self):
        if self._primal is None and self.beta > 0:
            self._primal = self._factor(self.Y.T @ self.Y)
        return self._primal

    @property
    def dual(self):
        if self._dual is None and self.beta > 0:
            self._dual = self._factor(self.Y @ self.Y.T)
        return self._dual

    def _check(self, X) -> np.ndarray:
        X = _as_matrix(X, "X")
        if X.shape[0] != self.Y.shape[0]:
            raise ValueError(f"X has d={X.shape[0]} rows, Y has d={self.Y.shape[0]}")
        return X

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Return ``(Y^T Y + beta I)^-1 rhs`` (pseudo-inverse when beta == 0)."""
        if self.beta == 0:
            return np.linalg.pinv(self.Y.T @ self.Y) @ rhs
        return linalg.cho_solve(self.primal, rhs, check_finite=False)

    def coefficients(self, X) -> np.ndarray:
        X = self._check(X)
        if self.beta == 0:
            # rank-revealing least squares; minimum-norm W
            return np.linalg.lstsq(self.Y, X, rcond=None)[0]
        return linalg.cho_solve(self.primal, self.Y.T @ X, check_finite=False)

    def residual(self, X) -> np.ndarray:
        X = self._check(X)
        if self.beta == 0:
            return X - self.Y @ self.coefficients(X)
        return self.beta * linalg.cho_solve(self.dual, X, check_finite=False)


def ridge_coefficients(X, Y, params: RidgeParams = RidgeParams()) -> np.ndarray:
    """Solve ``(Y^T Y + beta I) W = Y^T X`` for all N columns with one factorization."""
    return GalleryFactor(Y, params).coefficients(X)


def residual_errors(X, Y, W, squared: bool = False) -> np.ndarray:
    """Per-column Euclidean norm of ``X - Y W`` (or its square)."""
    X = _as_matrix(X, "X")
    Y = _as_matrix(Y, "Y")
    W = _as_matrix(W, "W")
    if Y.shape[0] != X.shape[0] or W.shape != (Y.shape[1], X.shape[1]):
        raise ValueError(f"shape mismatch: X {X.shape}, Y {Y.shape}, W {W.shape}")
    return _column_norms(X - Y @ W, squared)


def avg_distance(e) -> float:
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    if e.size == 0:
        raise ValueError("error vector is empty")
    return float(np.sum(e) / e.size)


def fpr_distance(e, h, normalize: bool = False) -> float:
    """Foreground-weighted error ``sum_n e_n h_n``; divided by ``sum_n h_n`` if ``normalize``."""
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    if e.shape != h.shape:
        raise ValueError(f"errors ({e.size}) and weights ({h.size}) differ in length")
    if e.size == 0:
        raise ValueError("error vector is empty")
    if np.any(h < 0) or np.any(h > 1):
        raise ValueError("foreground weights must lie in [0, 1]")
    total = float(np.dot(e, h))
    if normalize:
        mass = float(np.sum(h))
        if mass == 0:
            raise ValueError("cannot normalize: foreground weights sum to zero")
        total /= mass
    return total


def _column_norms(R: np.ndarray, squared: bool) -> np.ndarray:
    sq = np.einsum("ij,ij->j", R, R)
    return sq if squared else np.sqrt(sq)


def reconstruct(
    X,
    factor: GalleryFactor,
    h=None,
    normalize: bool = False,
    squared: bool = False,
    with_coefficients: bool = False,
) -> MatchResult:
    e = _column_norms(factor.residual(X), squared)
    W = factor.coefficients(X) if with_coefficients else None
    if h is None:
        # unweighted baseline: plain average error
        return MatchResult(avg_distance(e), e, np.ones(e.size), W)
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    return MatchResult(fpr_distance(e, h, normalize), e, h, W)


def fpr_match(
    probe,
    gallery,
    spec: PyramidSpec = DEFAULT_PYRAMID,
    ridge: RidgeParams = RidgeParams(),
    classifier=None,
    normalize: bool = False,
    squared: bool = False,
    geometry: Optional[PatchGeometry] = None,
) -> MatchResult:
    """Match a probe feature map against a gallery feature map.

    Either argument may already be a :class:`SpatialFeatureSet`.  Without a
    classifier the result is the unweighted average error over probe columns.
    """
    xs = probe if isinstance(probe, SpatialFeatureSet) else pyramid_pool(probe, spec, geometry)
    ys = gallery if isinstance(gallery, SpatialFeatureSet) else pyramid_pool(gallery, spec, geometry)
    h = None
    if classifier is not None:
        from .foreground import foreground_probs

        h = foreground_probs(xs, classifier)
    return reconstruct(
        xs.columns, GalleryFactor(ys.columns, ridge), h, normalize, squared, with_coefficients=True
    )


@dataclass
class DistanceGradients:
    dX: np.ndarray
    dY: np.ndarray
    dH: np.ndarray
    distance: float
    errors: np.ndarray


def distance_gradients(
    X, Y, H, ridge: RidgeParams = RidgeParams(), clamp: bool = False, factor: GalleryFactor | None = None
) -> DistanceGradients:
    """Analytic gradients of ``D = sum_n h_n ||x_n - Y w_n||`` with W the ridge solution.

    With ``R = X - Y W``, ``G = R diag(h / e)`` and ``Z = A^-1 Y^T G``::

        dD/dX = G - Y Z
        dD/dY = -G W^T - R Z^T + Y Z W^T
        dD/dH = e

    Raises :class:`NonDifferentiableError` where ``e_n < 1e-9`` unless ``clamp``,
    which replaces ``e_n`` by ``max(e_n, 1e-9)`` in the gradient only.
    """
    X = _as_matrix(X, "X")
    factor = factor or GalleryFactor(Y, ridge)
    Y = factor.Y
    H = np.asarray(H, dtype=np.float64).reshape(-1)
    if H.size != X.shape[1]:
        raise ValueError(f"H has {H.size} entries, X has {X.shape[1]} columns")
    W = factor.coefficients(X)
    R = factor.residual(X)
    e = _column_norms(R, False)
    small = np.flatnonzero(e < GRAD_EPS)
    if small.size and not clamp:
        raise NonDifferentiableError(small.tolist())
    G = R * (H / np.maximum(e, GRAD_EPS))
    Z = factor.solve(Y.T @ G)
    dX = G - Y @ Z
    dY = -G @ W.T - R @ Z.T + Y @ (Z @ W.T)
    return DistanceGradients(dX, dY, e.copy(), float(np.dot(H, e)), e)


def distance_matrix(
    probes: list[np.ndarray],
    galleries: list[GalleryFactor],
    weights: Optional[list[Optional[np.ndarray]]] = None,
    normalize: bool = False,
    squared: bool = False,
) -> np.ndarray:
    """FPR distance of every probe against every gallery, shape (P, G).

    All probe columns are solved against one gallery factor in a single call.
    A ``None`` weight vector means the unweighted average error for that probe.
    """
    weights = weights if weights is not None else [None] * len(probes)
    if len(weights) != len(probes):
        raise ValueError("one weight vector (or None) is needed per probe")
    sizes = [np.shape(X)[1] for X in probes]
    splits = np.cumsum(sizes)[:-1]
    X_all = np.hstack([np.asarray(X, dtype=np.float64) for X in probes])
    out = np.empty((len(probes), len(galleries)))
    for j, factor in enumerate(galleries):
        e_all = _column_norms(factor.residual(X_all), squared)
        for i, (e, h) in enumerate(zip(np.split(e_all, splits), weights)):
            out[i, j] = avg_distance(e) if h is None else fpr_distance(e, h, normalize)
    return out
