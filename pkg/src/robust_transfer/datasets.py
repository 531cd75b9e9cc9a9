"""Datasets, the IDX file format, image transforms and a synthetic
source/target domain pair."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    num_labels: Optional[int] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, c, h, w), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.num_labels is None:
            self.num_labels = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_labels):
            raise ValueError(f"labels outside [0, {self.num_labels})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, name: Optional[str] = None) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], name or self.name, self.num_labels)


# ---------------------------------------------------------------------------
# IDX

def _read_header(raw: bytes, path, magic: int, kind: str):
    if len(raw) < 8:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IdxMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x} for {kind}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise IdxTruncatedError(f"{path}: truncated dimension fields")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    payload = raw[4 + 4 * ndim:]
    expected = int(np.prod(dims))
    if len(payload) < expected:
        raise IdxTruncatedError(f"{path}: payload has {len(payload)} bytes, header promises {expected}")
    return dims, np.frombuffer(payload[:expected], dtype=np.uint8)


def load_idx(images_path, labels_path, name: Optional[str] = None,
             num_labels: Optional[int] = None) -> Dataset:
    """Read a big-endian IDX image/label file pair; pixels become byte/255."""
    dims, pixels = _read_header(Path(images_path).read_bytes(), images_path, IDX_IMAGES_MAGIC, "images")
    ldims, labels = _read_header(Path(labels_path).read_bytes(), labels_path, IDX_LABELS_MAGIC, "labels")
    if dims[0] != ldims[0]:
        raise IdxCountMismatchError(f"{images_path} holds {dims[0]} images but {labels_path} "
                                    f"holds {ldims[0]} labels")
    images = pixels.reshape(dims[0], 1, dims[1], dims[2]) / 255.0
    return Dataset(images, labels.astype(np.int64), name or Path(images_path).stem, num_labels)


def write_idx(data: Dataset, images_path, labels_path) -> None:
    """Write single-channel images (rounded to bytes) and labels as IDX."""
    n, c, h, w = data.images.shape
    if c != 1:
        raise ValueError("IDX export supports single-channel images only")
    pixels = np.rint(data.images[:, 0] * 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n)
                                  + data.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# transforms (operate on the last two axes)

def _axis_weights(old: int, new: int):
    if new == 1:
        pos = np.array([(old - 1) / 2.0])
    else:
        pos = np.arange(new) * ((old - 1) / (new - 1))
    lo = np.floor(pos).astype(int)
    lo = np.minimum(lo, old - 1)
    hi = np.minimum(lo + 1, old - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_resize(image, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resampling with corner-aligned sample positions.

    Output pixel ``i`` samples input coordinate ``i * (old - 1) / (new - 1)``;
    a single output row/column samples the centre.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    if new_h < 1 or new_w < 1:
        raise ValueError("output extents must be >= 1")
    if (new_h, new_w) == (h, w):
        return image.copy()
    r0, r1, fr = _axis_weights(h, new_h)
    c0, c1, fc = _axis_weights(w, new_w)
    rows = image[..., r0, :] * (1 - fr)[:, None] + image[..., r1, :] * fr[:, None]
    return rows[..., c0] * (1 - fc) + rows[..., c1] * fc


def low_res(image, target_size) -> np.ndarray:
    """Down-sample to ``target_size`` then back up to the original extents."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    th, tw = (target_size, target_size) if np.isscalar(target_size) else target_size
    if th > h or tw > w:
        raise ValueError(f"target {th}x{tw} larger than image {h}x{w}")
    return np.clip(bilinear_resize(bilinear_resize(image, th, tw), h, w), 0.0, 1.0)


def highest_frequency_mask(h: int, w: int, num_zeroed: int) -> np.ndarray:
    """Boolean (h, w) mask over the unshifted DFT grid of coefficients to drop.

    Coefficients are ranked by distance from the centre of the shifted
    spectrum (largest first, ties by lexicographic shifted index); the first
    ``num_zeroed`` are taken and the set is closed under conjugation so the
    filtered image stays real.
    """
    total = h * w
    if not 0 <= num_zeroed < total:
        raise ValueError(f"num_zeroed must lie in [0, {total}), got {num_zeroed}")
    fy = np.fft.fftshift(np.fft.fftfreq(h) * h)
    fx = np.fft.fftshift(np.fft.fftfreq(w) * w)
    radius = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2).ravel()
    flat_index = np.arange(total)
    order = np.lexsort((flat_index, -radius))[:num_zeroed]
    shifted = np.zeros(total, dtype=bool)
    shifted[order] = True
    mask = np.fft.ifftshift(shifted.reshape(h, w))
    conj = np.roll(mask[::-1, ::-1], shift=(1, 1), axis=(0, 1))
    return mask | conj


def low_pass(image, num_zeroed: int = 1024) -> np.ndarray:
    """Zero the highest radial frequencies of every channel, clamp to [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    mask = highest_frequency_mask(*image.shape[-2:], num_zeroed)
    spectrum = np.fft.fft2(image, axes=(-2, -1))
    spectrum[..., mask] = 0
    out = np.fft.ifft2(spectrum, axes=(-2, -1))
    residue = np.abs(out.imag).max(initial=0.0)
    if residue > 1e-10:
        raise ArithmeticError(f"low_pass produced an imaginary residue of {residue:g}")
    return np.clip(out.real, 0.0, 1.0)


def total_variation(image) -> float:
    image = np.asarray(image, dtype=np.float64)
    return float(np.abs(np.diff(image, axis=-1)).sum() + np.abs(np.diff(image, axis=-2)).sum())


def map_images(data: Dataset, fn, name: Optional[str] = None) -> Dataset:
    return replace(data, images=fn(data.images), name=name or data.name)


def resize_dataset(data: Dataset, h: int, w: int) -> Dataset:
    if data.images.shape[-2:] == (h, w):
        return data
    return map_images(data, lambda im: np.clip(bilinear_resize(im, h, w), 0.0, 1.0))


# ---------------------------------------------------------------------------
# synthetic domain pair

@dataclass(frozen=True)
class DomainPairConfig:
    """Class-conditional images built from a smooth *shape* (a few Gaussian
    blobs, jittered per sample) plus a faint high-frequency *texture* that is
    perfectly class-aligned in the source domain.

    ``distance`` in [0, 1] moves the target away from the source: each target
    sample keeps its class texture with probability ``1 - distance`` (else a
    random class's texture is used) and contrast shrinks by
    ``contrast_shift * distance``.  ``distance = 0`` reproduces the source
    distribution.
    """
    num_labels: int = 10
    train_per_class: int = 200
    test_per_class: int = 50
    image_size: int = 16
    blobs: int = 3
    blob_sigma: float = 2.0
    shape_amplitude: float = 0.6
    jitter: int = 2
    texture_amplitude: float = 0.03
    noise: float = 0.03
    background: float = 0.1
    distance: float = 1.0
    contrast_shift: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.num_labels < 2:
            raise ValueError("need at least two labels")
        if not 0 <= self.distance <= 1:
            raise ValueError("distance must lie in [0, 1]")


@dataclass
class _Templates:
    shapes: np.ndarray
    textures: np.ndarray = field(repr=False)


def _templates(cfg: DomainPairConfig) -> _Templates:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s]
    margin = cfg.jitter + 1
    shapes = np.zeros((cfg.num_labels, s, s))
    for c in range(cfg.num_labels):
        for _ in range(cfg.blobs):
            cy, cx = rng.uniform(margin, s - 1 - margin, size=2)
            shapes[c] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * cfg.blob_sigma ** 2))
        shapes[c] /= shapes[c].max()
    textures = rng.choice([-1.0, 1.0], size=(cfg.num_labels, s, s))
    return _Templates(shapes, textures)


def _render(cfg, templates, labels, texture_ids, contrast, rng):
    n, s = len(labels), cfg.image_size
    shifts = rng.integers(-cfg.jitter, cfg.jitter + 1, size=(n, 2))
    amps = rng.uniform(0.7, 1.3, size=n)
    images = np.empty((n, 1, s, s))
    noise = rng.standard_normal((n, s, s)) * cfg.noise
    for i in range(n):
        shape = np.roll(templates.shapes[labels[i]], tuple(shifts[i]), axis=(0, 1))
        img = (cfg.background + cfg.shape_amplitude * amps[i] * shape
               + cfg.texture_amplitude * templates.textures[texture_ids[i]] + noise[i])
        images[i, 0] = 0.5 + (img - 0.5) * contrast
    return np.clip(images, 0.0, 1.0)


def _domain(cfg, templates, per_class, key, shift):
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=key))
    labels = np.repeat(np.arange(cfg.num_labels), per_class)
    rng.shuffle(labels)
    texture_ids = labels.copy()
    if shift > 0:
        swap = rng.random(len(labels)) < shift
        texture_ids[swap] = rng.integers(0, cfg.num_labels, size=int(swap.sum()))
    contrast = 1.0 - cfg.contrast_shift * shift
    return _render(cfg, templates, labels, texture_ids, contrast, rng), labels


def synth_domain_pair(cfg: DomainPairConfig, split: str = "train") -> tuple[Dataset, Dataset]:
    """``(source, target)`` datasets for ``split`` in {'train', 'test'}.

    Class templates depend only on ``cfg.seed``; sample draws depend on the
    seed, the split and the domain, so every combination is reproducible.
    """
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    split_id = 0 if split == "train" else 1
    per_class = cfg.train_per_class if split == "train" else cfg.test_per_class
    templates = _templates(cfg)
    src_x, src_y = _domain(cfg, templates, per_class, (1, split_id), 0.0)
    tgt_x, tgt_y = _domain(cfg, templates, per_class, (2, split_id), cfg.distance)
    return (Dataset(src_x, src_y, f"synth-source-{split}", cfg.num_labels),
            Dataset(tgt_x, tgt_y, f"synth-target-{split}", cfg.num_labels))
