"""Per-column foreground probabilities, mask-derived labels and the generator loss."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import SpatialFeatureSet
from .tensor_io import atomic_write_text, read_tensor, write_tensor

DEFAULT_TAU = 0.35
PROB_CLIP = 1e-12


@dataclass
class ForegroundClassifier:
    """Two-way linear classifier (a 1x1 convolution) followed by softmax."""

    weight: np.ndarray  # (2, d)
    bias: np.ndarray  # (2,)
    fg_index: int = 1

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.weight.shape[0] != 2 or self.bias.shape != (2,):
            raise ValueError(f"classifier needs a 2 x d weight and 2 biases, got {self.weight.shape}")
        if self.fg_index not in (0, 1):
            raise ValueError("fg_index must be 0 or 1")
        if not np.all(np.isfinite(self.weight)) or not np.all(np.isfinite(self.bias)):
            raise ValueError("classifier parameters must be finite")

    @property
    def d(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> "ForegroundClassifier":
        return ForegroundClassifier(self.weight.copy(), self.bias.copy(), self.fg_index)

    @classmethod
    def zeros(cls, d: int) -> "ForegroundClassifier":
        return cls(np.zeros((2, d)), np.zeros(2))


@dataclass
class SpatialLabels:
    labels: np.ndarray  # (N,) in {0, 1}
    mask_means: np.ndarray  # (N,)


def _columns(features) -> np.ndarray:
    if isinstance(features, SpatialFeatureSet):
        return features.columns
    X = np.asarray(features, dtype=np.float64)
    return X[:, None] if X.ndim == 1 else X


def class_probs(features, clf: ForegroundClassifier) -> np.ndarray:
    """Softmax over the two logits per column; returns a (2, N) array."""
    X = _columns(features)
    if X.shape[0] != clf.d:
        raise ValueError(f"features have d={X.shape[0]}, classifier expects d={clf.d}")
    logits = clf.weight @ X + clf.bias[:, None]
    logits -= logits.max(axis=0, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=0, keepdims=True)


def foreground_probs(features, clf: ForegroundClassifier) -> np.ndarray:
    """Vector H of foreground probabilities, aligned with the feature columns."""
    return class_probs(features, clf)[clf.fg_index]


def mask_labels(mask, fset: SpatialFeatureSet, tau: float = DEFAULT_TAU) -> SpatialLabels:
    """Average the mask over each column's receptive rectangle; label 1 iff the mean exceeds tau."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[:, :, 0]
    if m.ndim != 2:
        raise ValueError(f"mask must be H x W, got shape {m.shape}")
    if np.any(m < 0) or np.any(m > 1):
        raise ValueError("mask values must lie in [0, 1]")
    r0, r1, c0, c1 = fset.rects.T
    if r0.min() < 0 or c0.min() < 0 or r1.max() >= m.shape[0] or c1.max() >= m.shape[1]:
        raise ValueError(
            f"receptive rectangles exceed the {m.shape[0]}x{m.shape[1]} mask"
        )
    # summed-area table with a zero border
    sat = np.zeros((m.shape[0] + 1, m.shape[1] + 1))
    sat[1:, 1:] = m.cumsum(axis=0).cumsum(axis=1)
    sums = sat[r1 + 1, c1 + 1] - sat[r0, c1 + 1] - sat[r1 + 1, c0] + sat[r0, c0]
    means = sums / ((r1 - r0 + 1) * (c1 - c0 + 1))
    return SpatialLabels((means > tau).astype(np.int64), means)


@dataclass
class FpgLossResult:
    loss: float
    d_weight: np.ndarray
    d_bias: np.ndarray
    d_X: np.ndarray


def fpg_loss(features, clf: ForegroundClassifier, labels: SpatialLabels | np.ndarray) -> FpgLossResult:
    """Binary cross-entropy of the foreground probabilities against the mask labels.

    ``loss = -sum_n [y_n log h_n + (1 - y_n) log(1 - h_n)]`` with h clipped to
    ``[1e-12, 1 - 1e-12]`` inside the logs (the clipped region has zero gradient).
    """
    X = _columns(features)
    y = np.asarray(labels.labels if isinstance(labels, SpatialLabels) else labels, dtype=np.float64)
    if y.shape != (X.shape[1],):
        raise ValueError(f"{y.size} labels for {X.shape[1]} feature columns")
    p = class_probs(X, clf)
    h = p[clf.fg_index]
    hc = np.clip(h, PROB_CLIP, 1.0 - PROB_CLIP)
    loss = -float(np.sum(y * np.log(hc) + (1.0 - y) * np.log(1.0 - hc)))

    inside = (h > PROB_CLIP) & (h < 1.0 - PROB_CLIP)
    dl_dh = np.where(inside, -(y / hc) + (1.0 - y) / (1.0 - hc), 0.0)
    return FpgLossResult(loss, *_chain(X, clf, h, dl_dh))


def _chain(X, clf, h, d_h):
    # dh/dlogit_fg = h (1 - h) = -dh/dlogit_bg
    g = np.asarray(d_h, dtype=np.float64) * h * (1.0 - h)
    sign = np.zeros((2, 1))
    sign[clf.fg_index] = 1.0
    sign[1 - clf.fg_index] = -1.0
    d_logits = sign * g
    return d_logits @ X.T, d_logits.sum(axis=1), clf.weight.T @ d_logits


def probs_backward(features, clf: ForegroundClassifier, d_h: np.ndarray):
    """Chain a gradient on H back to (d_weight, d_bias, d_X)."""
    X = _columns(features)
    return _chain(X, clf, foreground_probs(X, clf), d_h)


def pyramid_layout(values: np.ndarray, fset: SpatialFeatureSet) -> list[np.ndarray]:
    """Scatter a per-column vector into one (rows x cols) grid per pyramid level."""
    values = np.asarray(values).reshape(-1)
    grids = []
    for k in range(int(fset.level.max()) + 1):
        sel = fset.level == k
        cells = fset.cell[sel]
        grid = np.zeros((cells[:, 0].max() + 1, cells[:, 1].max() + 1))
        grid[cells[:, 0], cells[:, 1]] = values[sel]
        grids.append(grid)
    return grids


def save_classifier(directory: str | os.PathLike, clf: ForegroundClassifier) -> None:
    directory = Path(directory)
    write_tensor(directory / "classifier_weight.fprt", clf.weight)
    write_tensor(directory / "classifier_bias.fprt", clf.bias)
    atomic_write_text(directory / "classifier.txt", f"d={clf.d}\nfg_index={clf.fg_index}\n")


def load_classifier(directory: str | os.PathLike) -> ForegroundClassifier:
    directory = Path(directory)
    meta = {}
    for line in (directory / "classifier.txt").read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = int(value)
    weight = read_tensor(directory / "classifier_weight.fprt").astype(np.float64)
    bias = read_tensor(directory / "classifier_bias.fprt").astype(np.float64)
    if weight.shape != (2, meta["d"]):
        raise ValueError(f"classifier weight {weight.shape} does not match header d={meta['d']}")
    return ForegroundClassifier(weight, bias, meta["fg_index"])
