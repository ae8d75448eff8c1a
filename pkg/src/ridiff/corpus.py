"""Procedural texture corpus with (class, style) conditions.

Each class is a texture family whose look is steered by a continuous style
in [0, 1]. A subset of styles per class is held out as test conditions so
evaluation always runs on conditions never seen during fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

IMAGE_SIDE = 16
COND_DIM = 16
FAMILIES = ("gradient", "stripes", "checkers", "blobs")


def condition_embedding(class_id: int, style: float, seed: int, dim: int = COND_DIM) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xC0DE, class_id])
    base = rng.standard_normal(dim)
    direction = rng.standard_normal(dim)
    emb = base + 2.0 * (style - 0.5) * direction
    # the affine part rounds away tiny style gaps; 2*style is exact, so distinct styles stay distinct
    emb[-1] = 2.0 * style
    return emb


@dataclass(frozen=True)
class Condition:
    class_id: int
    style: float
    embedding: np.ndarray = field(compare=False, hash=False, repr=False)

    @classmethod
    def make(cls, class_id: int, style: float, seed: int) -> "Condition":
        emb = condition_embedding(class_id, style, seed)
        emb.setflags(write=False)
        return cls(int(class_id), float(style), emb)


@dataclass
class Corpus:
    seed: int
    train_conditions: list
    test_conditions: list
    images: dict

    def stacked(self, conditions=None):
        """All images of ``conditions`` (default: train split) with per-image embeddings."""
        conds = self.train_conditions if conditions is None else conditions
        imgs = np.concatenate([self.images[c] for c in conds])
        embs = np.concatenate([np.repeat(c.embedding[None], len(self.images[c]), 0) for c in conds])
        return imgs, embs

    @property
    def n_classes(self) -> int:
        return len({c.class_id for c in self.train_conditions})


def _texture(family: int, style: float, rng, side: int = IMAGE_SIDE) -> np.ndarray:
    y, x = np.mgrid[0:side, 0:side].astype(np.float64)
    if family == 0:
        theta = np.pi * style
        cx, cy = rng.uniform(4, side - 4, size=2)
        v = np.cos(theta) * (x - cx) + np.sin(theta) * (y - cy)
        img = 0.5 + rng.uniform(0.3, 0.45) * np.clip(v / 8.0, -1.0, 1.0)
    elif family == 1:
        freq = 1.0 + 3.0 * style
        phase = rng.uniform(0, 2 * np.pi)
        img = 0.5 + rng.uniform(0.3, 0.45) * np.sin(2 * np.pi * freq * x / side + phase)
    elif family == 2:
        cell = 2.0 + 4.0 * style
        ox, oy = rng.uniform(0, 2 * cell, size=2)
        wave = np.sin(np.pi * (x + ox) / cell) * np.sin(np.pi * (y + oy) / cell)
        img = 0.5 + rng.uniform(0.3, 0.45) * np.tanh(3.0 * wave)
    else:
        radius = 2.0 + 5.0 * style
        cx, cy = rng.uniform(3, side - 3, size=2)
        d2 = (x - cx) ** 2 + (y - cy) ** 2
        img = 0.08 + rng.uniform(0.7, 0.85) * np.exp(-d2 / (2 * radius**2))
    return np.clip(img, 0.0, 1.0)


def held_out_styles(styles_per_class: int, test_fraction: float) -> np.ndarray:
    """Indices of held-out styles: evenly spaced, never the endpoints when avoidable."""
    n_test = max(1, int(round(styles_per_class * test_fraction)))
    if n_test >= styles_per_class:
        raise ContractError("test_fraction leaves no training styles")
    pos = (np.arange(n_test) + 0.5) * styles_per_class / n_test
    return np.unique(np.clip(np.floor(pos).astype(int), 0, styles_per_class - 1))


def generate_corpus(
    seed: int = 0,
    K: int = 4,
    styles_per_class: int = 16,
    images_per_condition: int = 64,
    test_fraction: float = 0.125,
) -> Corpus:
    if K < 2:
        raise ContractError("generate_corpus: K must be at least 2")
    if styles_per_class < 2 or images_per_condition < 1:
        raise ContractError("generate_corpus: styles_per_class >= 2 and images_per_condition >= 1 required")
    if not 0.0 < test_fraction < 1.0:
        raise ContractError("generate_corpus: test_fraction must lie in (0, 1)")

    styles = np.linspace(0.0, 1.0, styles_per_class)
    test_idx = set(held_out_styles(styles_per_class, test_fraction).tolist())
    train, test, images = [], [], {}
    for k in range(K):
        for j, s in enumerate(styles):
            cond = Condition.make(k, s, seed)
            rng = np.random.default_rng([seed, k, j])
            stack = np.stack([_texture(k % len(FAMILIES), s, rng) for _ in range(images_per_condition)])
            stack.setflags(write=False)
            images[cond] = stack
            (test if j in test_idx else train).append(cond)
    return Corpus(seed=seed, train_conditions=train, test_conditions=test, images=images)
