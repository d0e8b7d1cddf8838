"""Synthetic glyph datasets and IDX file ingestion."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DatasetError, IdxLengthMismatchError, IdxMagicError
from .rng import substream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_SPLIT_KEYS = {"train": 0, "test": 1, "idx": 2}


@dataclass
class Dataset:
    images: np.ndarray  # [n, H*W] in [0, 1]
    labels: np.ndarray  # [n] int64
    H: int
    W: int
    k: int
    split: str = "train"
    seed: int | None = None

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, index):
        index = np.asarray(index)
        return replace(self, images=self.images[index], labels=self.labels[index])

    def holdout_split(self, fraction, rng):
        """Split into (fit, holdout) with ``round(fraction * n)`` holdout examples."""
        n = len(self)
        perm = rng.permutation(n)
        n_hold = int(round(fraction * n))
        return self.subset(np.sort(perm[n_hold:])), self.subset(np.sort(perm[:n_hold]))


def _templates(g):
    t = max(1, g // 3)
    lo = (g - t) // 2
    eye = np.eye(g)
    glyphs = []
    hbar = np.zeros((g, g))
    hbar[lo:lo + t, :] = 1
    glyphs.append(hbar)
    glyphs.append(hbar.T.copy())
    glyphs.append(np.maximum(hbar, hbar.T))
    square = np.ones((g, g))
    square[1:-1, 1:-1] = 0
    glyphs.append(square)
    diag = np.clip(eye + np.eye(g, k=1), 0, 1)
    glyphs.append(diag)
    glyphs.append(diag[:, ::-1].copy())
    glyphs.append(np.clip(eye + eye[:, ::-1], 0, 1))
    ell = np.zeros((g, g))
    ell[:, :t] = 1
    ell[-t:, :] = 1
    glyphs.append(ell)
    tee = np.zeros((g, g))
    tee[:t, :] = 1
    tee[:, lo:lo + t] = 1
    glyphs.append(tee)
    return glyphs


def glyph_size(H, W):
    return max(4, min(H, W) // 2)


def num_templates(H=12, W=12):
    return len(_templates(glyph_size(H, W)))


def generate_shapes(seed, n, H=12, W=12, k=4, noise_std=0.1, split="train"):
    """Balanced dataset of jittered binary glyphs with clamped Gaussian pixel noise.

    ``split`` selects an independent random substream, so train and test sets
    generated from the same seed never share draws.
    """
    if H < 8 or W < 8:
        raise DatasetError(f"grid must be at least 8x8, got {H}x{W}")
    g = glyph_size(H, W)
    glyphs = _templates(g)
    if not 1 <= k <= len(glyphs):
        raise DatasetError(f"k={k} classes requested but only {len(glyphs)} templates exist")
    if n < 0 or noise_std < 0:
        raise DatasetError(f"need n >= 0 and noise_std >= 0, got n={n}, noise_std={noise_std}")
    rng = substream(seed, "data", _SPLIT_KEYS.get(split, 3))
    labels = rng.permutation(np.arange(n) % k)
    rows = rng.integers(0, H - g + 1, size=n)
    cols = rng.integers(0, W - g + 1, size=n)
    images = np.zeros((n, H, W))
    for i in range(n):
        images[i, rows[i]:rows[i] + g, cols[i]:cols[i] + g] = glyphs[labels[i]]
    if noise_std > 0:
        images += rng.normal(0.0, noise_std, size=images.shape)
    images = np.clip(images, 0.0, 1.0)
    return Dataset(images.reshape(n, H * W), labels.astype(np.int64), H, W, k, split, seed)


def _read_idx(path, expected_magic, ndim):
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 4 * ndim:
        raise DatasetError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    count = int(np.prod(dims))
    if body.size < count:
        raise DatasetError(f"{path}: header declares {count} bytes of data, file holds {body.size}")
    return dims, body[:count].reshape(dims)


def load_idx(images_path, labels_path, max_n=None, k=None):
    """Read an IDX image/label pair (u8 pixels, scaled by 1/255)."""
    (n_img, H, W), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise IdxLengthMismatchError(f"{images_path} holds {n_img} images but {labels_path} holds {n_lab} labels")
    if max_n is not None:
        pixels, labels = pixels[:max_n], labels[:max_n]
    labels = labels.astype(np.int64)
    if k is None:
        k = int(labels.max()) + 1 if labels.size else 0
    images = pixels.reshape(pixels.shape[0], H * W).astype(np.float64) / 255.0
    return Dataset(images, labels, int(H), int(W), int(k), "idx", None)


def write_idx(images_path, labels_path, images_u8, labels_u8):
    """Write an IDX pair; ``images_u8`` has shape ``[n, H, W]``."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    n, H, W = images_u8.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, H, W) + images_u8.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels_u8.shape[0]) + labels_u8.tobytes())
