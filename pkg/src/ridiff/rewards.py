"""Differentiable reward functions over batches of flattened images.

Images are ``(batch, H*W)`` tensors with pixels in [0, 1]. Every reward
returns one value per row.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from . import tensor as T
from .corpus import COND_DIM, IMAGE_SIDE
from .errors import ContractError

# ITU-T T.81 Annex K luminance table
LUMINANCE_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)


def quality_table(quality: int, base=LUMINANCE_TABLE) -> np.ndarray:
    """IJG quality scaling: 5000/q below 50, 200 - 2q otherwise, entries in [1, 255]."""
    if not 1 <= quality <= 100:
        raise ContractError(f"JPEG quality must lie in [1, 100], got {quality}")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    return np.clip((np.asarray(base) * scale + 50) // 100, 1, 255).astype(np.int64)


@dataclass(frozen=True)
class JpegPipelineConfig:
    quality: int = 80
    block: int = 8
    table: tuple = field(default=tuple(map(tuple, LUMINANCE_TABLE.tolist())))
    temperature: float = 1.0

    def scaled_table(self) -> np.ndarray:
        return quality_table(self.quality, np.array(self.table))


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II matrix; row u is the u-th basis vector."""
    k = np.arange(n)
    D = np.cos(np.pi * (2 * k[None, :] + 1) * k[:, None] / (2 * n)) * np.sqrt(2.0 / n)
    D[0] /= np.sqrt(2.0)
    return D


def block_dct_matrix(height: int, width: int, block: int = 8) -> np.ndarray:
    """Row-major operator applying a 2-D DCT to every block of an image.

    Coefficient (u, v) of block (i, j) lands at pixel position
    ``(block*i + u, block*j + v)``.
    """
    D = dct_matrix(block)
    Dh = np.kron(np.eye(height // block), D)
    Dw = np.kron(np.eye(width // block), D)
    return np.kron(Dh, Dw)


def _check_size(height, width, block):
    if height % block or width % block:
        raise ContractError(f"image {height}x{width} is not divisible into {block}x{block} blocks")


@functools.lru_cache(maxsize=32)
def _codec(height, width, cfg: JpegPipelineConfig):
    _check_size(height, width, cfg.block)
    M = block_dct_matrix(height, width, cfg.block)
    q = np.tile(cfg.scaled_table(), (height // cfg.block, width // cfg.block)).reshape(-1).astype(np.float64)
    enc = M.T * (255.0 / q)[None, :]
    dec = (q / 255.0)[:, None] * M
    return enc, dec


def soft_round(x, temperature: float = 1.0):
    """``x - tau * sin(2 pi x) / (2 pi)``: monotone for tau <= 1, error below 1/2."""
    return x - T.scalar_mul(T.sin(T.scalar_mul(x, 2 * np.pi)), temperature / (2 * np.pi))


def _as_batch(img, size):
    img = T.as_tensor(img)
    if img.ndim == 2 and size is None and img.shape[1] != IMAGE_SIDE * IMAGE_SIDE:
        # a single (H, W) image
        h, w = img.shape
        return img.reshape(1, h * w), (h, w), True
    h, w = size or (IMAGE_SIDE, IMAGE_SIDE)
    if img.ndim == 1:
        img = img.reshape(1, img.shape[0])
    if img.shape[1] != h * w:
        raise ContractError(f"expected rows of {h * w} pixels, got shape {img.shape}")
    return img, (h, w), False


def diff_jpeg(img, cfg: JpegPipelineConfig = None, size=None):
    """Differentiable JPEG round trip (luminance only) of a batch of images."""
    cfg = cfg or JpegPipelineConfig()
    x, (h, w), single = _as_batch(img, size)
    _check_size(h, w, cfg.block)
    enc, dec = _codec(h, w, cfg)
    coef = T.matmul(x - 0.5, T.Tensor(enc))
    rec = T.matmul(soft_round(coef, cfg.temperature), T.Tensor(dec)) + 0.5
    return rec.reshape(h, w) if single else rec


def jpeg_reference(img: np.ndarray, quality: int = 80, table=LUMINANCE_TABLE, block: int = 8):
    """Hard-rounding JPEG round trip of one (H, W) image, plus quantized coefficients."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    _check_size(h, w, block)
    q = quality_table(quality, table)
    out = np.empty_like(img)
    levels = np.empty_like(img)
    for i in range(0, h, block):
        for j in range(0, w, block):
            blk = (img[i:i + block, j:j + block] - 0.5) * 255.0
            c = np.round(scipy.fft.dctn(blk, norm="ortho") / q)
            levels[i:i + block, j:j + block] = c
            out[i:i + block, j:j + block] = scipy.fft.idctn(c * q, norm="ortho") / 255.0 + 0.5
    return out, levels


def reward_compress(img, cfg: JpegPipelineConfig = None):
    """``-||img - C(img)||^2`` per row, with C the differentiable JPEG round trip."""
    x, size, single = _as_batch(img, None)
    d = x - diff_jpeg(x, cfg, size)
    r = -T.tsum(T.square(d), axis=1)
    return r.reshape(()) if single else r


# -- frozen scorers -----------------------------------------------------
@functools.lru_cache(maxsize=4)
def _feature_mats(side: int = IMAGE_SIDE, patch: int = 4):
    n = side * side
    idx = np.arange(n).reshape(side, side)
    n_p = (side // patch) ** 2
    pool = np.zeros((n, n_p))
    for pi in range(side // patch):
        for pj in range(side // patch):
            cells = idx[pi * patch:(pi + 1) * patch, pj * patch:(pj + 1) * patch].reshape(-1)
            pool[cells, pi * (side // patch) + pj] = 1.0 / patch**2
    dh = np.zeros((n, n))
    dv = np.zeros((n, n))
    for i in range(side):
        for j in range(side):
            if j + 1 < side:
                dh[idx[i, j + 1], idx[i, j]] += 1.0
                dh[idx[i, j], idx[i, j]] -= 1.0
            if i + 1 < side:
                dv[idx[i + 1, j], idx[i, j]] += 1.0
                dv[idx[i, j], idx[i, j]] -= 1.0
    return pool, dh, dv


def patch_features(img):
    """Per 4x4 patch: centred mean intensity and local gradient energy."""
    pool, dh, dv = _feature_mats()
    means = T.matmul(img, T.Tensor(pool)) - 0.5
    gx = T.matmul(img, T.Tensor(dh))
    gy = T.matmul(img, T.Tensor(dv))
    energy = T.matmul(T.square(gx) + T.square(gy), T.Tensor(pool))
    return T.concat([means, T.scalar_mul(energy, 4.0)], axis=1)


class FrozenScorer:
    """Two-layer SiLU MLP with fixed random weights."""

    def __init__(self, d_in: int, seed, hidden: int = 32):
        rng = np.random.default_rng(seed)
        self.W1 = rng.standard_normal((d_in, hidden)) * 2.0 / np.sqrt(d_in)
        self.b1 = rng.standard_normal(hidden) * 0.5
        self.w2 = rng.standard_normal((hidden, 1)) / np.sqrt(hidden)
        self.b2 = 0.0

    def __call__(self, feats):
        h = T.matmul(feats, T.Tensor(self.W1))
        h = T.silu(h + T.Tensor(np.broadcast_to(self.b1, h.shape)))
        out = T.matmul(h, T.Tensor(self.w2)) + self.b2
        return out.reshape(out.shape[0])


def reward_smooth(img, scorer: FrozenScorer):
    """Prompt-independent proxy score of an image batch."""
    return scorer(patch_features(T.as_tensor(img)))


def reward_pref(img, cond, scorer: FrozenScorer):
    """Condition-aware proxy score; ``cond`` holds one embedding per row."""
    img = T.as_tensor(img)
    cond = np.broadcast_to(np.asarray(cond, dtype=np.float64), (img.shape[0], COND_DIM))
    return scorer(T.concat([patch_features(img), T.Tensor(cond)], axis=1))


@dataclass
class RewardTask:
    name: str
    fn: object  # (img, cond) -> Tensor of shape (batch,)
    higher_is_better: bool = True
    scale: float = 1.0

    def __call__(self, img, cond=None):
        r = self.fn(img, cond)
        return r if self.scale == 1.0 else T.scalar_mul(r, self.scale)


REWARD_NAMES = ("smooth", "pref", "compress")


def make_reward_tasks(seed: int = 0, jpeg: JpegPipelineConfig = None, scales=None) -> dict:
    """The three frozen reward tasks keyed by name."""
    jpeg = jpeg or JpegPipelineConfig()
    scales = dict(scales or {})
    unknown = set(scales) - set(REWARD_NAMES)
    if unknown:
        raise ContractError(f"unknown reward names {sorted(unknown)}")
    smooth = FrozenScorer(32, [seed, 11])
    pref = FrozenScorer(32 + COND_DIM, [seed, 12])
    return {
        "smooth": RewardTask("smooth", lambda img, c: reward_smooth(img, smooth), True, scales.get("smooth", 1.0)),
        "pref": RewardTask("pref", lambda img, c: reward_pref(img, c, pref), True, scales.get("pref", 1.0)),
        "compress": RewardTask("compress", lambda img, c: reward_compress(img, jpeg), True, scales.get("compress", 1.0)),
    }
