"""FPRT tensor files, dataset manifests and the synthetic occluded-person generator.

FPRT layout (little-endian, no padding)::

    b"FPRT" | version u8 (=1) | dtype u8 (=1, f32) | rank u8 (1..4) | rank x u32 dims | f32 payload
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

MAGIC = b"FPRT"
VERSION = 1
DTYPE_F32 = 1
MAX_RANK = 4

_HEADER = struct.Struct("<4sBBB")


class TensorFormatError(ValueError):
    """Header is not a valid FPRT header (magic, version, dtype or rank)."""


class TensorLengthError(TensorFormatError):
    """Payload length disagrees with the header dims."""


class TensorContentError(ValueError):
    """Payload holds NaN or Inf."""


class ManifestError(ValueError):
    pass


def _check_dims(shape: Iterable[int]) -> tuple[int, ...]:
    dims = tuple(int(s) for s in shape)
    if not 1 <= len(dims) <= MAX_RANK:
        raise ValueError(f"tensor rank must be in [1, {MAX_RANK}], got {len(dims)}")
    if any(s <= 0 for s in dims):
        raise ValueError(f"tensor dims must be positive, got {dims}")
    if any(s >= 2**32 for s in dims):
        raise ValueError(f"tensor dim does not fit in u32: {dims}")
    return dims


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_tensor(values, dims: Optional[Iterable[int]] = None) -> bytes:
    arr = np.asarray(values)
    if dims is None:
        dims = arr.shape
    dims = _check_dims(dims)
    flat = arr.reshape(-1)
    if flat.size != math.prod(dims):
        raise ValueError(f"dims {dims} need {math.prod(dims)} values, got {flat.size}")
    payload = np.ascontiguousarray(flat, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise TensorContentError("tensor contains non-finite values")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, len(dims))
    return header + struct.pack(f"<{len(dims)}I", *dims) + payload.tobytes()


def decode_tensor(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < _HEADER.size:
        raise TensorFormatError(f"{source}: file too short for FPRT header")
    magic, version, dtype, rank = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TensorFormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError(f"{source}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise TensorFormatError(f"{source}: unsupported dtype code {dtype}")
    if not 1 <= rank <= MAX_RANK:
        raise TensorFormatError(f"{source}: invalid rank {rank}")
    off = _HEADER.size
    if len(data) < off + 4 * rank:
        raise TensorLengthError(f"{source}: truncated dims block")
    dims = struct.unpack_from(f"<{rank}I", data, off)
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"{source}: zero-length dim in {dims}")
    off += 4 * rank
    expected = 4 * math.prod(dims)
    if len(data) - off != expected:
        raise TensorLengthError(
            f"{source}: payload has {len(data) - off} bytes, dims {dims} need {expected}"
        )
    arr = np.frombuffer(data, dtype="<f4", offset=off).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise TensorContentError(f"{source}: payload contains NaN or Inf")
    return arr.astype(np.float32)


def write_tensor(path: str | os.PathLike, tensor, dims: Optional[Iterable[int]] = None) -> None:
    """Write ``tensor`` as an FPRT file.

    ``dims`` may be given to reinterpret a flat value list; otherwise the array shape is used.
    """
    data = encode_tensor(tensor, dims)
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"cannot write tensor {path}: parent directory missing")
    try:
        atomic_write_bytes(path, data)
    except OSError as exc:
        raise OSError(f"cannot write tensor {path}: {exc}") from exc


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read tensor {path}: {exc}") from exc
    return decode_tensor(data, str(path))


# -- manifests ---------------------------------------------------------------

SPLITS = ("train", "gallery", "probe")


@dataclass(frozen=True)
class ManifestEntry:
    tensor_path: str
    identity: int
    camera: int
    mask_path: Optional[str] = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    split: Optional[str] = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def identities(self) -> list[int]:
        return sorted({e.identity for e in self.entries})

    def by_identity(self) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = {}
        for i, e in enumerate(self.entries):
            groups.setdefault(e.identity, []).append(i)
        return dict(sorted(groups.items()))


def _parse_nonneg(text: str, what: str, lineno: int, path) -> int:
    try:
        value = int(text)
    except ValueError:
        raise ManifestError(f"{path}:{lineno}: {what} is not an integer: {text!r}") from None
    if value < 0:
        raise ManifestError(f"{path}:{lineno}: {what} must be >= 0, got {value}")
    return value


def load_manifest(
    path: str | os.PathLike, split: Optional[str] = None, check_files: bool = True
) -> DatasetManifest:
    """Parse a tab-separated manifest.

    Relative tensor and mask paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if split is None and path.stem in SPLITS:
        split = path.stem
    base = path.parent
    entries = []
    text = path.read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            missing = ["identity", "camera"][len(parts) - 1 :]
            raise ManifestError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
        if len(parts) > 4:
            raise ManifestError(f"{path}:{lineno}: expected at most 4 fields, got {len(parts)}")
        if not parts[0]:
            raise ManifestError(f"{path}:{lineno}: empty tensor_path")
        identity = _parse_nonneg(parts[1], "identity", lineno, path)
        camera = _parse_nonneg(parts[2], "camera", lineno, path)
        tensor_path = str(base / parts[0])
        mask_path = str(base / parts[3]) if len(parts) == 4 and parts[3] else None
        entries.append(ManifestEntry(tensor_path, identity, camera, mask_path))

    if check_files:
        bad = []
        for e in entries:
            for p in (e.tensor_path, e.mask_path):
                if p is not None and not os.access(p, os.R_OK):
                    bad.append(p)
        if bad:
            raise ManifestError(f"{path}: unreadable tensor paths: {', '.join(bad)}")
    return DatasetManifest(entries, split)


def format_manifest(entries: Iterable[ManifestEntry], base: str | os.PathLike | None = None) -> str:
    lines = []
    for e in entries:
        paths = [e.tensor_path] + ([e.mask_path] if e.mask_path else [])
        if base is not None:
            paths = [os.path.relpath(p, base) for p in paths]
        fields = [paths[0], str(e.identity), str(e.camera)] + paths[1:]
        lines.append("\t".join(fields))
    return "".join(line + "\n" for line in lines)


def write_manifest(path: str | os.PathLike, manifest: DatasetManifest) -> None:
    path = Path(path)
    atomic_write_text(path, format_manifest(manifest.entries, base=path.parent))


# -- synthetic occluded-person data -------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    num_identities: int = 10
    images_per_identity: int = 4
    image_height: int = 48
    image_width: int = 16
    channels: int = 1
    occlusion_fraction: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.num_identities < 2:
            raise ValueError("num_identities must be >= 2")
        if self.images_per_identity < 2:
            raise ValueError("images_per_identity must be >= 2")
        if self.image_height < 1 or self.image_width < 1 or self.channels < 1:
            raise ValueError("image dims and channels must be positive")
        if not 0.0 <= self.occlusion_fraction < 1.0:
            raise ValueError(
                f"occlusion_fraction must be in [0, 1), got {self.occlusion_fraction}"
            )
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class IdentityPattern:
    """Smooth per-identity appearance: a normalized sum of low-frequency plane waves."""

    amplitudes: np.ndarray  # (C, n_waves)
    freq_y: np.ndarray
    freq_x: np.ndarray
    phases: np.ndarray

    @classmethod
    def sample(
        cls,
        rng: np.random.Generator,
        channels: int,
        n_waves: int = 4,
        freq_y: tuple[float, float] = (4.0, 12.0),
        freq_x: tuple[float, float] = (1.0, 4.0),
    ) -> "IdentityPattern":
        """Frequencies are cycles per image height / width."""
        shape = (channels, n_waves)
        amp = rng.uniform(0.3, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
        return cls(
            amplitudes=amp,
            freq_y=rng.uniform(*freq_y, shape),
            freq_x=rng.uniform(*freq_x, shape) * rng.choice([-1.0, 1.0], shape),
            phases=rng.uniform(0.0, 2 * np.pi, shape),
        )

    def render(
        self,
        rng: np.random.Generator,
        height: int,
        width: int,
        jitter: int = 2,
        noise: float = 0.1,
    ) -> np.ndarray:
        dy, dx = rng.integers(-jitter, jitter + 1, size=2)
        yy = (np.arange(height)[:, None] + dy) / height
        xx = (np.arange(width)[None, :] + dx) / width
        channels = self.amplitudes.shape[0]
        img = np.empty((height, width, channels))
        for c in range(channels):
            a = self.amplitudes[c]
            arg = 2 * np.pi * (self.freq_y[c][:, None, None] * yy + self.freq_x[c][:, None, None] * xx)
            waves = np.cos(arg + self.phases[c][:, None, None])
            img[:, :, c] = np.tensordot(a, waves, axes=1) / np.sqrt(0.5 * np.sum(a**2))
        img += rng.normal(0.0, noise, img.shape)
        return img.astype(np.float32)


def occluder_shape(height: int, width: int, fraction: float, rng: np.random.Generator) -> tuple[int, int]:
    """Pick (rows, cols) of a rectangle whose area is as close as possible to ``fraction`` of the image.

    Candidates at least half the image width are preferred (wide occluders such as
    bags, counters, other pedestrians); among near-optimal candidates one is drawn at random.
    """
    target = fraction * height * width
    if target <= 0:
        return 0, 0
    cands = []
    for cols in range(1, width + 1):
        rows = min(height, max(1, round(target / cols)))
        cands.append((abs(rows * cols - target), rows, cols))
    best = min(c[0] for c in cands)
    tol = max(best, 0.02 * target)
    good = [(r, c) for err, r, c in cands if err <= tol and 2 * c >= width]
    if not good:
        good = [(r, c) for err, r, c in cands if err <= tol]
    return good[int(rng.integers(len(good)))]


def occlude(
    image: np.ndarray, fraction: float, rng: np.random.Generator, low: float = 2.0, high: float = 4.0
) -> tuple[np.ndarray, np.ndarray]:
    """Paste a uniform-noise rectangle over ``image``; return (occluded image, person mask).

    The mask is 1 on person pixels and 0 under the occluder.
    """
    height, width = image.shape[:2]
    mask = np.ones((height, width), dtype=np.float32)
    out = np.array(image, dtype=np.float32, copy=True)
    rows, cols = occluder_shape(height, width, fraction, rng)
    if rows == 0:
        return out, mask
    r0 = int(rng.integers(0, height - rows + 1))
    c0 = int(rng.integers(0, width - cols + 1))
    out[r0 : r0 + rows, c0 : c0 + cols, :] = rng.uniform(low, high, (rows, cols, out.shape[2]))
    mask[r0 : r0 + rows, c0 : c0 + cols] = 0.0
    return out, mask


def sample_patterns(config: SynthConfig) -> tuple[list[IdentityPattern], list[IdentityPattern]]:
    """Identity patterns for the training identities and the disjoint test identities."""
    pattern_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(4)[0])
    patterns = [
        IdentityPattern.sample(pattern_rng, config.channels) for _ in range(2 * config.num_identities)
    ]
    return patterns[: config.num_identities], patterns[config.num_identities :]


def generate_synthetic(config: SynthConfig, out_dir: str | os.PathLike) -> dict[str, DatasetManifest]:
    """Write train/gallery/probe tensors plus manifests under ``out_dir``.

    Training identities are ``0..n-1``; gallery and probe share the disjoint identities
    ``n..2n-1``.  Gallery images are clean; every probe and every odd-indexed training
    image carries an occluder.  Masks accompany train and probe images.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(config.seed).spawn(4)
    train_patterns, test_patterns = sample_patterns(config)
    n = config.num_identities
    H, W = config.image_height, config.image_width

    manifests = {}
    for split, child in zip(SPLITS, children[1:]):
        rng = np.random.default_rng(child)
        split_dir = out / split
        split_dir.mkdir(exist_ok=True)
        patterns = train_patterns if split == "train" else test_patterns
        offset = 0 if split == "train" else n
        entries = []
        for pid, pattern in enumerate(patterns):
            identity = pid + offset
            for k in range(config.images_per_identity):
                img = pattern.render(rng, H, W)
                mask = None
                if split == "probe" or (split == "train" and k % 2 == 1):
                    img, mask = occlude(img, config.occlusion_fraction, rng)
                elif split == "train":
                    mask = np.ones((H, W), dtype=np.float32)
                camera = 1 + k % 2 if split == "probe" else k % 2
                stem = f"{identity:04d}_{k:02d}"
                tpath = split_dir / f"{stem}.fprt"
                write_tensor(tpath, img)
                mpath = None
                if mask is not None:
                    mpath = split_dir / f"{stem}_mask.fprt"
                    write_tensor(mpath, mask)
                entries.append(
                    ManifestEntry(str(tpath), identity, camera, str(mpath) if mpath else None)
                )
        manifest = DatasetManifest(entries, split)
        write_manifest(out / f"{split}.txt", manifest)
        manifests[split] = manifest
    return manifests
