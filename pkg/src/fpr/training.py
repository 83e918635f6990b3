"""Desk-scale end-to-end training: PK batches, batch-hard triplet loss over FPR
distances plus the foreground generator loss, plain gradient descent, and a
finite-difference gradient auditor.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .features import (
    DEFAULT_PYRAMID,
    ExtractorParams,
    PyramidSpec,
    SpatialFeatureSet,
    embed_backward,
    extract,
    load_extractor,
    pool_backward,
    save_extractor,
)
from .foreground import (
    ForegroundClassifier,
    SpatialLabels,
    foreground_probs,
    fpg_loss,
    load_classifier,
    mask_labels,
    probs_backward,
    save_classifier,
)
from .reconstruction import GRAD_EPS, GalleryFactor, RidgeParams, distance_gradients, distance_matrix
from .tensor_io import DatasetManifest, atomic_write_text, read_tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    P: int = 16
    K: int = 4
    margin: float = 0.3
    alpha: float = 0.02
    tau: float = 0.35
    beta: float = 0.01
    learning_rate: float = 1e-3
    epochs: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.P < 2 or self.K < 2:
            raise ValueError("batch-hard mining needs P >= 2 and K >= 2")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must be in [0, 1]")
        if self.beta <= 0:
            raise ValueError("training needs beta > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def ridge(self) -> RidgeParams:
        return RidgeParams(self.beta)


@dataclass
class TrainState:
    extractor: ExtractorParams
    classifier: ForegroundClassifier
    epoch: int = 0
    # one (L_tri, L_fpg, L_total) row of batch means per completed epoch
    history: list[tuple[float, float, float]] = field(default_factory=list)

    def copy(self) -> "TrainState":
        return TrainState(self.extractor.copy(), self.classifier.copy(), self.epoch, list(self.history))

    @classmethod
    def initial(
        cls,
        seed: int,
        patch_height: int = 8,
        patch_width: int = 8,
        stride: int = 4,
        out_channels: int = 32,
        in_channels: int = 1,
    ) -> "TrainState":
        rng = np.random.default_rng(seed)
        ext = ExtractorParams.random(rng, patch_height, patch_width, stride, out_channels, in_channels)
        return cls(ext, ForegroundClassifier.zeros(out_channels))


class TrainingDiverged(RuntimeError):
    pass


# -- parameter vector view ----------------------------------------------------

def _param_arrays(state: TrainState) -> list[np.ndarray]:
    return [state.extractor.projection, state.extractor.bias, state.classifier.weight, state.classifier.bias]


def param_names(state: TrainState) -> list[str]:
    names = ["extractor.projection", "extractor.bias", "classifier.weight", "classifier.bias"]
    out = []
    for name, arr in zip(names, _param_arrays(state)):
        out.extend(f"{name}{list(idx)}" for idx in np.ndindex(arr.shape))
    return out


def get_params(state: TrainState) -> np.ndarray:
    return np.concatenate([a.ravel() for a in _param_arrays(state)])


def set_params(state: TrainState, theta: np.ndarray) -> None:
    off = 0
    for arr in _param_arrays(state):
        arr[...] = theta[off : off + arr.size].reshape(arr.shape)
        off += arr.size


def num_extractor_params(state: TrainState) -> int:
    return state.extractor.projection.size + state.extractor.bias.size


# -- sampling and triplet loss -------------------------------------------------

def pk_sample(manifest: DatasetManifest, P: int, K: int, rng: np.random.Generator) -> list[int]:
    """Indices of P distinct identities with K entries each, grouped by identity.

    Identities with fewer than K entries are sampled with replacement.
    """
    groups = manifest.by_identity()
    if len(groups) < P:
        raise ValueError(f"manifest has {len(groups)} identities, batch needs P={P}")
    ids = list(groups)
    chosen = rng.choice(len(ids), size=P, replace=False)
    batch = []
    for c in chosen:
        members = groups[ids[c]]
        pick = rng.choice(len(members), size=K, replace=len(members) < K)
        batch.extend(members[i] for i in pick)
    return batch


@dataclass
class TripletResult:
    loss: float
    grad: np.ndarray  # d loss / d dist
    hardest_pos: np.ndarray
    hardest_neg: np.ndarray
    active: np.ndarray


def batch_hard_triplet(dist, ids, margin: float) -> TripletResult:
    """Sum over anchors of ``max(0, margin + max_pos D - min_neg D)``.

    Row a of ``dist`` holds D(a, .) with a as the probe.  Positives exclude the
    anchor itself; ties resolve to the lowest index.
    """
    dist = np.asarray(dist, dtype=np.float64)
    ids = np.asarray(ids)
    n = ids.size
    if dist.shape != (n, n):
        raise ValueError(f"distance matrix {dist.shape} does not match {n} labels")
    if not np.all(np.isfinite(dist)):
        raise ValueError("distance matrix has non-finite entries")
    _, counts = np.unique(ids, return_counts=True)
    if np.any(counts < 2):
        raise ValueError("every identity in the batch needs at least two samples")
    if counts.size < 2:
        raise ValueError("batch needs at least two identities")

    same = ids[:, None] == ids[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(same, np.inf, dist), axis=1)
    rows = np.arange(n)
    z = margin + dist[rows, pos] - dist[rows, neg]
    active = z > 0
    grad = np.zeros_like(dist)
    np.add.at(grad, (rows[active], pos[active]), 1.0)
    np.add.at(grad, (rows[active], neg[active]), -1.0)
    # plain left-to-right sum in anchor order, independent of numpy's pairwise summation
    return TripletResult(float(sum(z[active].tolist())), grad, pos, neg, active)


# -- full objective -----------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray
    mask: Optional[np.ndarray]
    identity: int


def load_samples(manifest: DatasetManifest, indices: Optional[Sequence[int]] = None) -> list[Sample]:
    idx = range(len(manifest)) if indices is None else indices
    out = []
    for i in idx:
        e = manifest.entries[i]
        mask = read_tensor(e.mask_path) if e.mask_path else None
        out.append(Sample(read_tensor(e.tensor_path).astype(np.float64), mask, e.identity))
    return out


@dataclass
class LossResult:
    total: float
    triplet: float
    fpg: float
    grad: np.ndarray  # flat, aligned with get_params
    signature: tuple = ()
    n_clamped: int = 0


def _signature(sets: list[SpatialFeatureSet], trip: TripletResult, hs: list[np.ndarray]) -> tuple:
    # every discrete choice the analytic gradient depends on
    parts = [s.argmax.tobytes() for s in sets]
    parts += [trip.hardest_pos.tobytes(), trip.hardest_neg.tobytes(), trip.active.tobytes()]
    parts += [((h > 1e-12) & (h < 1 - 1e-12)).tobytes() for h in hs]
    return tuple(parts)


def total_loss(
    samples: list[Sample],
    state: TrainState,
    config: TrainConfig,
    spec: PyramidSpec = DEFAULT_PYRAMID,
    fixed_h: Optional[list[np.ndarray]] = None,
    need_grad: bool = True,
) -> LossResult:
    """``L_total = L_tri + alpha * L_fpg`` on one batch, with its gradient.

    ``L_fpg`` is summed over all columns of all batch images.  With ``fixed_h``
    the foreground weights are held constant (no gradient flows through them) and
    the classifier term is dropped.
    """
    ext, clf = state.extractor, state.classifier
    ridge = config.ridge
    sets = [extract(s.image, ext, spec) for s in samples]
    Xs = [s.columns for s in sets]
    hs = fixed_h if fixed_h is not None else [foreground_probs(X, clf) for X in Xs]
    factors = [GalleryFactor(X, ridge) for X in Xs]
    dist = distance_matrix(Xs, factors, hs)
    ids = [s.identity for s in samples]
    trip = batch_hard_triplet(dist, ids, config.margin)

    fpg_total = 0.0
    fpg_parts = []
    if fixed_h is None:
        for s, fset, X in zip(samples, sets, Xs):
            if s.mask is None:
                raise ValueError("training samples need masks for the foreground loss")
            labels = mask_labels(s.mask, fset, config.tau)
            res = fpg_loss(X, clf, labels)
            fpg_total += res.loss
            fpg_parts.append(res)
    total = trip.loss + config.alpha * fpg_total
    sig = _signature(sets, trip, hs) if fixed_h is None else _signature(sets, trip, [])
    if not need_grad:
        return LossResult(total, trip.loss, fpg_total, np.empty(0), sig)

    dX = [np.zeros_like(X) for X in Xs]
    dH = [np.zeros(X.shape[1]) for X in Xs]
    n_clamped = 0
    # fixed anchor order keeps the accumulation deterministic
    for a in np.flatnonzero(trip.active):
        for j, coef in ((trip.hardest_pos[a], 1.0), (trip.hardest_neg[a], -1.0)):
            g = distance_gradients(Xs[a], None, hs[a], ridge, clamp=True, factor=factors[j])
            n_clamped += int(np.sum(g.errors < GRAD_EPS))
            dX[a] += coef * g.dX
            dX[j] += coef * g.dY
            dH[a] += coef * g.dH

    d_cw = np.zeros_like(clf.weight)
    d_cb = np.zeros_like(clf.bias)
    if fixed_h is None:
        for i, X in enumerate(Xs):
            w, b, x = probs_backward(X, clf, dH[i])
            d_cw += w
            d_cb += b
            dX[i] += x
            f = fpg_parts[i]
            d_cw += config.alpha * f.d_weight
            d_cb += config.alpha * f.d_bias
            dX[i] += config.alpha * f.d_X

    d_proj = np.zeros_like(ext.projection)
    d_bias = np.zeros_like(ext.bias)
    for s, fset, g in zip(samples, sets, dX):
        gp, gb = embed_backward(s.image, ext, pool_backward(fset, g))
        d_proj += gp
        d_bias += gb
    grad = np.concatenate([d_proj.ravel(), d_bias.ravel(), d_cw.ravel(), d_cb.ravel()])
    return LossResult(total, trip.loss, fpg_total, grad, sig, n_clamped)


def toy_batch(
    seed: int,
    n_ids: int = 2,
    per_id: int = 2,
    size: int = 8,
    patch: int = 4,
    stride: int = 2,
    out_channels: int = 8,
) -> tuple[list[Sample], TrainState]:
    """Small occluded batch plus a state with a random classifier, for gradient audits."""
    from .tensor_io import IdentityPattern, occlude

    rng = np.random.default_rng(seed)
    samples = []
    for pid in range(n_ids):
        pattern = IdentityPattern.sample(rng, 1)
        for k in range(per_id):
            img = pattern.render(rng, size, size)
            img, mask = occlude(img, 0.25 if k % 2 else 0.0, rng)
            samples.append(Sample(img.astype(np.float64), mask, pid))
    state = TrainState.initial(seed, patch, patch, stride, out_channels)
    state.classifier = ForegroundClassifier(
        rng.normal(0.0, 0.5, (2, out_channels)), rng.normal(0.0, 0.1, 2)
    )
    return samples, state


# -- gradient audit -------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    n_checked: int
    n_kinks: int
    coordinates: list[int]
    analytic: list[float]
    numeric: list[float]
    rel_errors: list[float]
    kink_flags: list[bool]

    def to_dict(self) -> dict:
        return asdict(self)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    """``|a - b| / max(|a|, |b|, floor)``; the floor keeps exact zeros from dividing by zero."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    samples: list[Sample],
    state: TrainState,
    config: TrainConfig,
    spec: PyramidSpec = DEFAULT_PYRAMID,
    n_probes: int = 100,
    eps: float = 1e-5,
    seed: int = 0,
    freeze_h: bool = False,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic and central-difference partial derivatives of ``L_total``.

    Coordinates are drawn without replacement from all parameters (only the
    extractor when ``freeze_h``).  A coordinate whose +-eps evaluations change any
    discrete choice (pool winner, hardest pair, hinge activity, probability clip)
    is flagged as a kink and left out of the error statistics.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must be in [1e-7, 1e-3]")
    work = state.copy()
    theta0 = get_params(work)
    fixed_h = None
    if freeze_h:
        fixed_h = [foreground_probs(extract(s.image, work.extractor, spec).columns, work.classifier)
                   for s in samples]
    base = total_loss(samples, work, config, spec, fixed_h)
    pool = num_extractor_params(work) if freeze_h else theta0.size
    rng = np.random.default_rng(seed)
    coords = np.sort(rng.choice(pool, size=min(n_probes, pool), replace=False))

    analytic, numeric, errs, kinks = [], [], [], []
    for c in coords:
        vals, sigs = [], []
        for step in (eps, -eps):
            theta = theta0.copy()
            theta[c] += step
            set_params(work, theta)
            r = total_loss(samples, work, config, spec, fixed_h, need_grad=False)
            vals.append(r.total)
            sigs.append(r.signature)
        set_params(work, theta0)
        fd = (vals[0] - vals[1]) / (2 * eps)
        a = float(base.grad[c])
        kink = any(s != base.signature for s in sigs)
        analytic.append(a)
        numeric.append(fd)
        errs.append(relative_error(a, fd, floor))
        kinks.append(kink)
    good = [e for e, k in zip(errs, kinks) if not k]
    return GradCheckReport(
        max_rel_error=max(good) if good else 0.0,
        mean_rel_error=float(np.mean(good)) if good else 0.0,
        n_checked=len(good),
        n_kinks=int(sum(kinks)),
        coordinates=[int(c) for c in coords],
        analytic=analytic,
        numeric=numeric,
        rel_errors=errs,
        kink_flags=kinks,
    )


# -- training loop ----------------------------------------------------------------

def train_toy(
    manifest: DatasetManifest,
    config: TrainConfig,
    spec: PyramidSpec = DEFAULT_PYRAMID,
    state: Optional[TrainState] = None,
    checkpoint_dir: Optional[str | os.PathLike] = None,
    on_epoch: Optional[Callable[[TrainState], None]] = None,
) -> TrainState:
    """Fixed-rate gradient descent over PK batches.

    One epoch is ``max(1, n_identities // P)`` batches.  Deterministic for a given
    seed; the sampling stream is independent of the initialization stream.
    """
    config.validate()
    if state is None:
        sample_img = read_tensor(manifest.entries[0].tensor_path)
        channels = 1 if sample_img.ndim == 2 else sample_img.shape[2]
        state = TrainState.initial(config.seed, in_channels=channels)
    state = state.copy()
    samples = load_samples(manifest)
    if any(s.mask is None for s in samples):
        raise ValueError("train manifest entries need mask paths")
    n_ids = len(manifest.by_identity())
    batches = max(1, n_ids // config.P)
    rng = np.random.default_rng([config.seed, 1])

    for _ in range(config.epochs):
        rows = []
        for b in range(batches):
            idx = pk_sample(manifest, config.P, config.K, rng)
            where = f"epoch {state.epoch + 1}, batch {b + 1}"
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    res = total_loss([samples[i] for i in idx], state, config, spec)
            except (np.linalg.LinAlgError, ValueError) as exc:
                # blown-up parameters surface as singular systems or non-finite distances
                raise TrainingDiverged(f"training diverged at {where}: {exc}") from exc
            if not np.isfinite(res.total) or not np.all(np.isfinite(res.grad)):
                raise TrainingDiverged(f"non-finite loss at {where}")
            theta = get_params(state) - config.learning_rate * res.grad
            if not np.all(np.isfinite(theta)):
                raise TrainingDiverged(f"non-finite parameters after {where}")
            set_params(state, theta)
            rows.append((res.triplet, res.fpg, res.total))
        state.epoch += 1
        state.history.append(tuple(float(v) for v in np.mean(rows, axis=0)))
        log.info("epoch %d: L_tri=%.4f L_fpg=%.4f L_total=%.4f", state.epoch, *state.history[-1])
        if on_epoch is not None:
            on_epoch(state)
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, state, config_text=repr(config))
    return state


# -- checkpoints ----------------------------------------------------------------

def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "l_tri", "l_fpg", "l_total"])
    for i, row in enumerate(history, start=1):
        w.writerow([i] + [repr(float(v)) for v in row])
    return buf.getvalue()


def save_checkpoint(directory: str | os.PathLike, state: TrainState, config_text: str = "") -> None:
    """Extractor and classifier tensors, ``loss_history.csv`` and a ``meta.txt`` summary."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_extractor(directory, state.extractor)
    save_classifier(directory, state.classifier)
    hist = history_csv(state.history)
    atomic_write_text(directory / "loss_history.csv", hist)
    digest = hashlib.sha256(config_text.encode("utf-8")).hexdigest()
    atomic_write_text(
        directory / "meta.txt",
        f"epoch={state.epoch}\nconfig_sha256={digest}\n[loss_history]\n{hist}",
    )


def load_checkpoint(directory: str | os.PathLike) -> TrainState:
    directory = Path(directory)
    ext = load_extractor(directory)
    clf = load_classifier(directory)
    epoch = 0
    for line in (directory / "meta.txt").read_text(encoding="utf-8").splitlines():
        if line.startswith("epoch="):
            epoch = int(line.split("=", 1)[1])
            break
    history = []
    hist_path = directory / "loss_history.csv"
    if hist_path.exists():
        rows = list(csv.reader(hist_path.read_text(encoding="utf-8").splitlines()))
        history = [tuple(float(v) for v in r[1:]) for r in rows[1:]]
    return TrainState(ext, clf, epoch, history)
