"""Linear patch-embedding extractor and spatial pyramid max pooling.

A feature map is an ``(h, w, d)`` array.  Pooling turns it into a ``d x N`` column
matrix where N depends on the map size, so probe and gallery never need to agree
on shape.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor_io import atomic_write_text, read_tensor, write_tensor


@dataclass
class ExtractorParams:
    patch_height: int
    patch_width: int
    stride: int
    projection: np.ndarray  # (d, patch_height * patch_width * in_channels)
    bias: np.ndarray  # (d,)

    def __post_init__(self):
        self.projection = np.asarray(self.projection, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if min(self.patch_height, self.patch_width, self.stride) < 1:
            raise ValueError("patch size and stride must be positive")
        if self.projection.ndim != 2 or self.projection.shape[0] != self.bias.size:
            raise ValueError(
                f"projection {self.projection.shape} and bias {self.bias.shape} disagree"
            )
        if self.projection.shape[1] % (self.patch_height * self.patch_width):
            raise ValueError("projection width is not a multiple of the patch area")
        if not np.all(np.isfinite(self.projection)) or not np.all(np.isfinite(self.bias)):
            raise ValueError("extractor parameters must be finite")

    @property
    def out_channels(self) -> int:
        return self.projection.shape[0]

    @property
    def in_channels(self) -> int:
        return self.projection.shape[1] // (self.patch_height * self.patch_width)

    @property
    def geometry(self) -> "PatchGeometry":
        return PatchGeometry(self.patch_height, self.patch_width, self.stride)

    def output_shape(self, height: int, width: int) -> tuple[int, int, int]:
        return (
            (height - self.patch_height) // self.stride + 1,
            (width - self.patch_width) // self.stride + 1,
            self.out_channels,
        )

    def copy(self) -> "ExtractorParams":
        return ExtractorParams(
            self.patch_height, self.patch_width, self.stride,
            self.projection.copy(), self.bias.copy(),
        )

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        patch_height: int = 8,
        patch_width: int = 8,
        stride: int = 4,
        out_channels: int = 32,
        in_channels: int = 1,
    ) -> "ExtractorParams":
        """Gaussian projection scaled by 1/sqrt(fan_in), zero bias.

        Values are rounded through float32 so a checkpoint of the initial state is exact.
        """
        fan_in = patch_height * patch_width * in_channels
        proj = rng.normal(0.0, 1.0 / math.sqrt(fan_in), (out_channels, fan_in))
        proj = proj.astype(np.float32).astype(np.float64)
        return cls(patch_height, patch_width, stride, proj, np.zeros(out_channels))


class PatchGeometry(NamedTuple):
    patch_height: int = 1
    patch_width: int = 1
    stride: int = 1


class Rect(NamedTuple):
    """Inclusive pixel rectangle."""

    row0: int
    row1: int
    col0: int
    col1: int

    @property
    def area(self) -> int:
        return (self.row1 - self.row0 + 1) * (self.col1 - self.col0 + 1)


@dataclass(frozen=True)
class PoolLevel:
    kernel: int
    stride: int


@dataclass(frozen=True)
class PyramidSpec:
    levels: tuple[PoolLevel, ...] = (PoolLevel(1, 1), PoolLevel(2, 2), PoolLevel(4, 4))

    def __post_init__(self):
        if not self.levels:
            raise ValueError("pyramid needs at least one level")
        for lv in self.levels:
            if lv.kernel < 1 or lv.stride < 1:
                raise ValueError(f"kernel and stride must be positive, got {lv}")

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[int, int]]) -> "PyramidSpec":
        return cls(tuple(PoolLevel(int(k), int(s)) for k, s in pairs))

    def to_string(self) -> str:
        return ",".join(f"{lv.kernel}/{lv.stride}" for lv in self.levels)

    @classmethod
    def parse(cls, text: str) -> "PyramidSpec":
        """Parse ``"1/1,2/2,4/4"`` (kernel/stride per level)."""
        pairs = []
        for item in text.split(","):
            item = item.strip()
            if not item:
                continue
            k, _, s = item.partition("/")
            pairs.append((int(k), int(s or k)))
        return cls.from_pairs(pairs)

    def cells(self, h: int, w: int) -> list[tuple[int, int]]:
        return [(level_cells(h, lv), level_cells(w, lv)) for lv in self.levels]

    def num_columns(self, h: int, w: int) -> int:
        return sum(a * b for a, b in self.cells(h, w))


DEFAULT_PYRAMID = PyramidSpec()


def level_cells(size: int, level: PoolLevel) -> int:
    """Ceil-mode window count along one axis; the last window always starts inside the map."""
    n = math.ceil((size - level.kernel) / level.stride) + 1
    return max(1, min(n, math.ceil(size / level.stride)))


@dataclass
class SpatialFeatureSet:
    """Pooled columns plus per-column provenance.

    ``argmax[c, n]`` is the flat ``row * w + col`` map index that won the max for
    channel c of column n; training routes gradients through it.
    """

    columns: np.ndarray  # (d, N)
    level: np.ndarray  # (N,)
    cell: np.ndarray  # (N, 2) row, col within the level grid
    rects: np.ndarray  # (N, 4) row0, row1, col0, col1 in image pixels, inclusive
    argmax: np.ndarray  # (d, N)
    map_shape: tuple[int, int]
    image_shape: tuple[int, int]

    @property
    def d(self) -> int:
        return self.columns.shape[0]

    @property
    def n(self) -> int:
        return self.columns.shape[1]

    def level_slices(self) -> list[slice]:
        out = []
        for k in range(int(self.level.max()) + 1):
            idx = np.flatnonzero(self.level == k)
            out.append(slice(int(idx[0]), int(idx[-1]) + 1))
        return out


def _patches(image: np.ndarray, ph: int, pw: int, stride: int) -> np.ndarray:
    """(h, w, ph * pw * C) view of strided patches, flattened in (row, col, channel) order."""
    win = sliding_window_view(image, (ph, pw), axis=(0, 1))[::stride, ::stride]
    # win: (h, w, C, ph, pw) -> (h, w, ph, pw, C)
    win = np.moveaxis(win, 2, -1)
    h, w = win.shape[:2]
    return win.reshape(h, w, -1)


def as_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"image must be H x W or H x W x C, got shape {img.shape}")
    return img


def embed_patches(image, params: ExtractorParams) -> np.ndarray:
    """Project every strided patch: ``out[i, j] = projection @ vec(patch_ij) + bias``."""
    img = as_image(image)
    H, W, C = img.shape
    if H < params.patch_height or W < params.patch_width:
        raise ValueError(
            f"image {H}x{W} is smaller than the {params.patch_height}x{params.patch_width} patch"
        )
    if C != params.in_channels:
        raise ValueError(f"image has {C} channels, extractor expects {params.in_channels}")
    patches = _patches(img, params.patch_height, params.patch_width, params.stride)
    return patches @ params.projection.T + params.bias


def _window_bounds(size: int, level: PoolLevel) -> list[tuple[int, int]]:
    return [
        (i * level.stride, min(i * level.stride + level.kernel, size))
        for i in range(level_cells(size, level))
    ]


def pyramid_pool(
    fmap,
    spec: PyramidSpec = DEFAULT_PYRAMID,
    geometry: PatchGeometry | ExtractorParams | None = None,
    image_shape: Optional[tuple[int, int]] = None,
) -> SpatialFeatureSet:
    """Max-pool ``fmap`` at every pyramid level and concatenate the cells as columns.

    ``geometry`` describes how map locations relate to image pixels (identity by
    default); ``image_shape`` bounds the provenance rectangles and defaults to the
    smallest image that geometry could have produced the map from.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim == 2:
        fmap = fmap[:, :, None]
    if fmap.ndim != 3 or min(fmap.shape) < 1:
        raise ValueError(f"feature map must be non-empty h x w x d, got {fmap.shape}")
    if isinstance(geometry, ExtractorParams):
        geometry = geometry.geometry
    geometry = geometry or PatchGeometry()
    h, w, d = fmap.shape
    if image_shape is None:
        image_shape = (
            (h - 1) * geometry.stride + geometry.patch_height,
            (w - 1) * geometry.stride + geometry.patch_width,
        )
    img_h, img_w = image_shape

    flat = fmap.reshape(h * w, d)
    cols, argmax, levels, cells, rects = [], [], [], [], []
    for k, lv in enumerate(spec.levels):
        for r, (r0, r1) in enumerate(_window_bounds(h, lv)):
            for c, (c0, c1) in enumerate(_window_bounds(w, lv)):
                idx = (np.arange(r0, r1)[:, None] * w + np.arange(c0, c1)[None, :]).reshape(-1)
                # np.argmax returns the first maximum: ties go to the lowest flat index
                best = np.argmax(flat[idx], axis=0)
                winner = idx[best]
                cols.append(flat[winner, np.arange(d)])
                argmax.append(winner)
                levels.append(k)
                cells.append((r, c))
                rects.append((
                    r0 * geometry.stride,
                    min((r1 - 1) * geometry.stride + geometry.patch_height, img_h) - 1,
                    c0 * geometry.stride,
                    min((c1 - 1) * geometry.stride + geometry.patch_width, img_w) - 1,
                ))
    return SpatialFeatureSet(
        columns=np.array(cols).T.copy(),
        level=np.array(levels, dtype=np.int64),
        cell=np.array(cells, dtype=np.int64),
        rects=np.array(rects, dtype=np.int64),
        argmax=np.array(argmax, dtype=np.int64).T.copy(),
        map_shape=(h, w),
        image_shape=(int(img_h), int(img_w)),
    )


def receptive_rect(fset: SpatialFeatureSet, column: int) -> Rect:
    if not 0 <= column < fset.n:
        raise IndexError(f"column {column} out of range for {fset.n} columns")
    return Rect(*(int(v) for v in fset.rects[column]))


def pool_backward(fset: SpatialFeatureSet, grad_columns: np.ndarray) -> np.ndarray:
    """Route a ``d x N`` column gradient back onto the ``(h, w, d)`` feature map."""
    h, w = fset.map_shape
    d = fset.d
    grad = np.zeros((h * w, d))
    chan = np.broadcast_to(np.arange(d)[:, None], fset.argmax.shape)
    np.add.at(grad, (fset.argmax.ravel(), chan.ravel()), np.asarray(grad_columns).ravel())
    return grad.reshape(h, w, d)


def embed_backward(image, params: ExtractorParams, grad_map: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a loss w.r.t. (projection, bias) given its gradient on the feature map."""
    patches = _patches(as_image(image), params.patch_height, params.patch_width, params.stride)
    q = patches.shape[-1]
    g = grad_map.reshape(-1, params.out_channels)
    return g.T @ patches.reshape(-1, q), g.sum(axis=0)


def extract(image, params: ExtractorParams, spec: PyramidSpec = DEFAULT_PYRAMID) -> SpatialFeatureSet:
    """Image -> patch embedding -> pyramid columns, with provenance in image pixels."""
    img = as_image(image)
    fmap = embed_patches(img, params)
    return pyramid_pool(fmap, spec, params.geometry, img.shape[:2])


def save_extractor(directory: str | os.PathLike, params: ExtractorParams) -> None:
    directory = Path(directory)
    write_tensor(directory / "extractor_projection.fprt", params.projection)
    write_tensor(directory / "extractor_bias.fprt", params.bias)
    atomic_write_text(
        directory / "extractor.txt",
        f"patch_height={params.patch_height}\npatch_width={params.patch_width}\n"
        f"stride={params.stride}\nout_channels={params.out_channels}\n"
        f"in_channels={params.in_channels}\n",
    )


def _read_sidecar(path: Path) -> dict[str, int]:
    meta = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = int(value)
    return meta


def load_extractor(directory: str | os.PathLike) -> ExtractorParams:
    directory = Path(directory)
    meta = _read_sidecar(directory / "extractor.txt")
    proj = read_tensor(directory / "extractor_projection.fprt").astype(np.float64)
    bias = read_tensor(directory / "extractor_bias.fprt").astype(np.float64)
    expected = (meta["out_channels"], meta["patch_height"] * meta["patch_width"] * meta["in_channels"])
    if proj.shape != expected:
        raise ValueError(f"projection shape {proj.shape} does not match sidecar {expected}")
    return ExtractorParams(meta["patch_height"], meta["patch_width"], meta["stride"], proj, bias)
