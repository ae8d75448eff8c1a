"""Held-out evaluation, forgetting, and desk-scale quality metrics."""

from __future__ import annotations

import hashlib
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .diffusion import ddim_sample
from .errors import ContractError, NumericError
from .rewards import block_dct_matrix, jpeg_reference

METRICS = ("smooth_score", "pref_score", "lossless_bytes", "lossy_bytes", "align_score", "feat_fd")
HIGHER_IS_BETTER = {
    "smooth_score": True,
    "pref_score": True,
    "lossless_bytes": False,
    "lossy_bytes": False,
    "align_score": True,
    "feat_fd": False,
}
TARGET_METRICS = {
    "smooth": ("smooth_score",),
    "pref": ("pref_score",),
    "compress": ("lossless_bytes", "lossy_bytes"),
}
GENERAL_METRICS = ("align_score", "feat_fd")

LOSSY_HEADER_BYTES = 20
LOSSY_BYTES_PER_COEF = 2
EVAL_STREAM = 0xE7A1


# -- compression sizes --------------------------------------------------
def _to_u8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def lossless_bytes(img) -> int:
    """Deflate size (level 9) of the 8-bit image after PNG-style Sub filtering."""
    u8 = _to_u8(img)
    if u8.ndim == 1:
        side = int(round(np.sqrt(u8.size)))
        u8 = u8.reshape(side, side)
    sub = np.diff(u8.astype(np.int16), axis=1, prepend=0).astype(np.uint8)
    rows = np.concatenate([np.ones((u8.shape[0], 1), np.uint8), sub], axis=1)
    return len(zlib.compress(rows.tobytes(), 9))


def lossy_bytes(img, quality: int = 80) -> int:
    """Size proxy: header plus a fixed cost per nonzero quantized DCT coefficient."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 1:
        side = int(round(np.sqrt(img.size)))
        img = img.reshape(side, side)
    _, levels = jpeg_reference(np.clip(img, 0.0, 1.0), quality)
    return LOSSY_HEADER_BYTES + LOSSY_BYTES_PER_COEF * int(np.count_nonzero(levels))


# -- frozen features ----------------------------------------------------
class FeatureExtractor:
    """Random projection of patch means and log block-DCT spectra (fixed once seeded)."""

    def __init__(self, seed: int = 0, dim: int = 32, side: int = 16):
        from .rewards import _feature_mats

        self.side = side
        self.pool = _feature_mats(side)[0]
        self.dct = block_dct_matrix(side, side)
        n_raw = self.pool.shape[1] + 64
        rng = np.random.default_rng([seed, 0xFEA7])
        self.proj = rng.standard_normal((n_raw, dim)) / np.sqrt(n_raw)

    def raw(self, imgs) -> np.ndarray:
        x = np.asarray(imgs, dtype=np.float64).reshape(-1, self.side * self.side)
        means = x @ self.pool - 0.5
        coef = ((x - 0.5) @ self.dct.T).reshape(-1, self.side // 8, 8, self.side // 8, 8)
        energy = np.log1p(10.0 * (coef**2).mean(axis=(1, 3))).reshape(len(x), 64)
        return np.concatenate([means * 4.0, energy], axis=1)

    def __call__(self, imgs) -> np.ndarray:
        return self.raw(imgs) @ self.proj


class AlignHead:
    """Least-squares map from image features to condition embeddings, fit once."""

    def __init__(self, extractor: FeatureExtractor, imgs, embeddings):
        self.extractor = extractor
        F = extractor(imgs)
        X = np.concatenate([F, np.ones((len(F), 1))], axis=1)
        self.M, *_ = np.linalg.lstsq(X, np.asarray(embeddings, dtype=np.float64), rcond=None)

    def predict(self, imgs) -> np.ndarray:
        F = self.extractor(imgs)
        return np.concatenate([F, np.ones((len(F), 1))], axis=1) @ self.M


def align_score(img, cond, head: AlignHead) -> np.ndarray:
    """Cosine similarity between projected image features and condition embeddings."""
    img = np.asarray(img, dtype=np.float64).reshape(-1, head.extractor.side**2)
    p = head.predict(img)
    c = np.broadcast_to(np.asarray(cond, dtype=np.float64), p.shape)
    den = np.linalg.norm(p, axis=1) * np.linalg.norm(c, axis=1)
    return np.clip(np.sum(p * c, axis=1) / np.maximum(den, 1e-300), -1.0, 1.0)


def _psd_sqrt(S):
    w, V = np.linalg.eigh((S + S.T) / 2)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_distance(mu1, S1, mu2, S2) -> float:
    """``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`` via symmetric eigen-decompositions."""
    r1 = _psd_sqrt(S1)
    w = np.linalg.eigvalsh(r1 @ S2 @ r1)
    tr_sqrt = np.sum(np.sqrt(np.clip(w, 0.0, None)))
    d = np.asarray(mu1) - np.asarray(mu2)
    return float(d @ d + np.trace(S1) + np.trace(S2) - 2.0 * tr_sqrt)


def gaussian_fit(feats, ridge: float = 1e-6):
    feats = np.asarray(feats, dtype=np.float64)
    if len(feats) < 2:
        raise ContractError("gaussian_fit: need at least two samples")
    return feats.mean(axis=0), np.cov(feats, rowvar=False) + ridge * np.eye(feats.shape[1])


def feature_fd(feats_a, feats_b) -> float:
    return frechet_distance(*gaussian_fit(feats_a), *gaussian_fit(feats_b))


def feat_fd(generated, reference, extractor: FeatureExtractor) -> float:
    if len(generated) == 0 or len(reference) == 0:
        raise ContractError("feat_fd: both sets must be nonempty")
    return feature_fd(extractor(generated), extractor(reference))


# -- evaluation ---------------------------------------------------------
@dataclass
class EvalContext:
    """Everything frozen that evaluation needs besides the model."""

    rewards: dict
    extractor: FeatureExtractor
    align_head: AlignHead
    reference: np.ndarray  # reference images for feat_fd
    schedule: object
    quality: int = 80

    @classmethod
    def build(cls, corpus, rewards, schedule, n_reference: int = 512, quality: int = 80, seed=None):
        seed = corpus.seed if seed is None else seed
        extractor = FeatureExtractor(seed)
        imgs, embs = corpus.stacked()
        head = AlignHead(extractor, imgs, embs)
        pick = np.random.default_rng([seed, 0x2EF]).choice(len(imgs), size=min(n_reference, len(imgs)), replace=False)
        return cls(rewards, extractor, head, imgs[np.sort(pick)], schedule, quality)


@dataclass
class MetricsRecord:
    task_index: int
    values: dict
    n_samples: int
    seed: int
    noise_hash: str = ""
    samples: np.ndarray = field(default=None, repr=False, compare=False)


def eval_noise(conditions, n_per_condition: int, seed: int, pixels: int = 256) -> np.ndarray:
    rng = np.random.default_rng([seed, EVAL_STREAM])
    return rng.standard_normal((len(conditions), n_per_condition, pixels))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("RID_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(model, conditions, ctx: EvalContext, n_per_condition: int = 16, seed: int = 0,
             task_index: int = 0) -> MetricsRecord:
    """Sample every (condition, fixed noise) pair and average all six metrics."""
    if not conditions:
        raise ContractError("evaluate: no conditions")
    zN = eval_noise(conditions, n_per_condition, seed)
    h = hashlib.sha256(zN.tobytes())
    for c in conditions:
        h.update(f"{c.class_id}:{c.style!r};".encode())

    def run(i):
        emb = np.repeat(conditions[i].embedding[None], n_per_condition, 0)
        with T.no_grad():
            img = ddim_sample(model, zN[i], emb, ctx.schedule).image
            smooth = ctx.rewards["smooth"].fn(img, emb).data
            pref = ctx.rewards["pref"].fn(img, emb).data
        return img.data, emb, smooth, pref

    n_threads = min(_threads(), len(conditions))
    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            parts = list(pool.map(run, range(len(conditions))))
    else:
        parts = [run(i) for i in range(len(conditions))]

    imgs = np.concatenate([p[0] for p in parts])
    embs = np.concatenate([p[1] for p in parts])
    values = {
        "smooth_score": float(np.mean(np.concatenate([p[2] for p in parts]))),
        "pref_score": float(np.mean(np.concatenate([p[3] for p in parts]))),
        "lossless_bytes": float(np.mean([lossless_bytes(x) for x in imgs])),
        "lossy_bytes": float(np.mean([lossy_bytes(x, ctx.quality) for x in imgs])),
        "align_score": float(np.mean(align_score(imgs, embs, ctx.align_head))),
        "feat_fd": feat_fd(imgs, ctx.reference, ctx.extractor),
    }
    for k, v in values.items():
        if not np.isfinite(v):
            raise NumericError(f"evaluate: metric {k} is not finite")
    return MetricsRecord(task_index, values, len(imgs), seed, h.hexdigest(), imgs)


# -- forgetting ---------------------------------------------------------
@dataclass
class MetricsHistory:
    records: list = field(default_factory=list)
    directions: dict = field(default_factory=lambda: dict(HIGHER_IS_BETTER))
    active_from: dict = field(default_factory=lambda: {m: 0 for m in GENERAL_METRICS})

    def values(self, metric: str) -> list:
        return [r.values[metric] for r in self.records]

    def activate(self, reward_names, task_index: int):
        for name in reward_names:
            for m in TARGET_METRICS.get(name, ()):
                self.active_from.setdefault(m, task_index)


def forgetting_from_values(values, higher_is_better: bool, active_from: int = 0):
    """Largest drop from any eligible checkpoint to the last one; ``None`` if never active."""
    values = list(values)
    last = len(values) - 1
    if active_from is None or active_from > last or last < 0:
        return None
    final = values[last]
    drops = [(v - final) if higher_is_better else (final - v) for v in values[active_from:]]
    return max(drops)


def forgetting(history: MetricsHistory, metric: str, higher_is_better=None):
    hib = history.directions[metric] if higher_is_better is None else higher_is_better
    return forgetting_from_values(history.values(metric), hib, history.active_from.get(metric))
