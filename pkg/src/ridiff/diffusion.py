"""Conditional pixel-space diffusion: schedule, MLP denoiser, DDPM pretraining, DDIM sampling.

The model works in a "data space" obtained from pixels by a scaled logit, so
the smooth clamp applied to sampler output (a scaled sigmoid) is the exact
inverse of the corpus transform.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adapters import LoraGroup, expand_group, lora_forward, trainable_params
from .corpus import COND_DIM, IMAGE_SIDE
from .errors import ContractError, DimensionError, NumericError, TrainingError

log = logging.getLogger(__name__)

PIXELS = IMAGE_SIDE * IMAGE_SIDE
CLAMP_SCALE = 2.0
PIXEL_EPS = 0.02


def to_data(img: np.ndarray) -> np.ndarray:
    """Pixels in [0, 1] -> data space (inverse of :func:`to_image`)."""
    p = np.clip(img, PIXEL_EPS, 1.0 - PIXEL_EPS)
    return np.log(p / (1.0 - p)) / CLAMP_SCALE


def to_image(z):
    """Smooth differentiable clamp of a data-space tensor into (0, 1)."""
    return T.sigmoid(T.scalar_mul(z, CLAMP_SCALE))


# -- schedule -----------------------------------------------------------
@dataclass(frozen=True)
class NoiseSchedule:
    N: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def abar(self, t):
        """alpha_bar at step t in [0, N]; t = 0 gives 1."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]


def build_schedule(N: int = 50, beta_min: float = 0.02, beta_max: float = 0.25) -> NoiseSchedule:
    if N < 2:
        raise ContractError(f"build_schedule: N must be >= 2, got {N}")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ContractError(f"build_schedule: need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, N)
    alpha = 1.0 - beta
    return NoiseSchedule(N=N, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DimensionError(f"q_sample: x0 {x0.shape} and eps {eps.shape} differ")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.N):
        raise ContractError(f"q_sample: t must lie in [1, {schedule.N}]")
    ab = schedule.abar(t)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# -- denoiser -----------------------------------------------------------
def timestep_embedding(t, n_steps: int, dim: int = 32) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * (1000.0 / n_steps)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser:
    """MLP noise predictor ``eps(x_t, t, c)`` built from LoRA-capable layers.

    Layer 0 projects the condition embedding; layers 1..n_hidden are SiLU
    hidden layers over ``[x, temb(t), proj(c)]``; the last layer maps back to
    pixel space. A host-only linear ``skip`` adds a direct read of ``x_t`` and
    of ``x_t / sqrt(1 - abar_t)``, which lets the low-noise steps denoise with
    a near-linear filter. Adapters never touch the skip.

    The output ``F`` is turned into a noise estimate by
    ``eps = sqrt(abar_t) F + sqrt(1 - abar_t) x_t``, so ``F`` is a velocity
    target with unit scale at every step.
    """

    def __init__(self, layers, alpha_bar, t_dim: int = 32, c_dim: int = COND_DIM, skip=None):
        self.layers = list(layers)
        pixels = self.layers[-1].d_out
        self.skip = np.zeros((pixels, 2 * pixels)) if skip is None else np.asarray(skip, dtype=np.float64)
        if self.skip.shape != (pixels, 2 * pixels):
            raise DimensionError(f"Denoiser: skip shape {self.skip.shape} != {(pixels, 2 * pixels)}")
        self.alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        self.n_steps = len(self.alpha_bar)
        self.t_dim = t_dim
        self.c_dim = c_dim
        self.forward_calls = 0
        self.sample_forwards = 0

    @classmethod
    def init(cls, schedule: "NoiseSchedule", seed=0, hidden: int = 256, n_hidden: int = 3, t_dim: int = 32,
             c_dim: int = COND_DIM, pixels: int = PIXELS):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        dims = [(c_dim, c_dim), (pixels + t_dim + c_dim, hidden)]
        dims += [(hidden, hidden)] * (n_hidden - 1) + [(hidden, pixels)]
        layers = []
        for i, (d_in, d_out) in enumerate(dims):
            scale = 0.1 if i == len(dims) - 1 else 1.0
            W = rng.standard_normal((d_out, d_in)) * scale / np.sqrt(d_in)
            layers.append(LoraGroup(W=W, bias=np.zeros(d_out)))
        skip = rng.standard_normal((pixels, 2 * pixels)) * 0.1 / np.sqrt(hidden + 2 * pixels)
        return cls(layers, schedule.alpha_bar, t_dim=t_dim, c_dim=c_dim, skip=skip)

    # -- parameter views ---------------------------------------------------
    def named_params(self) -> dict:
        out = {"skip.W": self.skip}
        for i, g in enumerate(self.layers):
            out[f"layer{i}.W"] = g.W
            if g.bias is not None:
                out[f"layer{i}.bias"] = g.bias
            for p in g.pairs:
                out[f"layer{i}.lora{p.task_id}.A"] = p.A
                out[f"layer{i}.lora{p.task_id}.B"] = p.B
        return out

    def _resolve(self, name):
        layer, rest = name.split(".", 1)
        if layer == "skip":
            return self, "skip", None
        g = self.layers[int(layer[len("layer"):])]
        if rest in ("W", "bias"):
            return g, rest, None
        tag, mat = rest.split(".")
        task = int(tag[len("lora"):])
        pair = next(p for p in g.pairs if p.task_id == task)
        return pair, mat, pair

    def set_param(self, name: str, value: np.ndarray):
        obj, attr, _ = self._resolve(name)
        cur = getattr(obj, attr)
        if cur.shape != value.shape:
            raise DimensionError(f"set_param {name}: shape {value.shape} != {cur.shape}")
        setattr(obj, attr, value)

    def is_frozen(self, name: str) -> bool:
        _, _, pair = self._resolve(name)
        return pair is None or pair.frozen

    @property
    def active_task(self):
        pair = self.layers[0].active_pair
        return pair.task_id if pair is not None else None

    @property
    def n_tasks(self) -> int:
        return len(self.layers[0].pairs)

    def expand(self, rank: int = 4, seed=0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        for g in self.layers:
            expand_group(g, rank, rng)
        return self

    def copy(self) -> "Denoiser":
        return copy.deepcopy(self)

    def leaves(self, names) -> dict:
        """Fresh tracked leaf tensors for ``names``."""
        params = self.named_params()
        return {n: T.Tensor(params[n], requires_grad=True) for n in names}

    # -- forward -------------------------------------------------------------
    def forward(self, x, t, cond, leaves=None):
        x = T.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.layers[-1].d_out:
            raise DimensionError(f"Denoiser.forward: input {x.shape}, expected (batch, {self.layers[-1].d_out})")
        batch = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (batch,))
        cond = np.broadcast_to(np.asarray(cond, dtype=np.float64), (batch, self.c_dim))
        per_layer = [{} for _ in self.layers]
        leaves = dict(leaves or {})
        skip = leaves.pop("skip.W", None) or T.Tensor(self.skip)
        for name, leaf in leaves.items():
            layer, rest = name.split(".", 1)
            per_layer[int(layer[len("layer"):])][rest] = leaf

        temb = T.Tensor(timestep_embedding(t, self.n_steps, self.t_dim))
        c = lora_forward(self.layers[0], T.Tensor(cond), per_layer[0])
        h = T.concat([x, temb, c], axis=1)
        for i in range(1, len(self.layers) - 1):
            h = T.silu(lora_forward(self.layers[i], h, per_layer[i]))
        ab = self.alpha_bar[t - 1][:, None]
        x_gain = T.mul(x, T.Tensor(np.broadcast_to(1.0 / np.sqrt(1.0 - ab), x.shape)))
        out = lora_forward(self.layers[-1], h, per_layer[-1])
        out = out + T.concat([x, x_gain], axis=1) @ T.transpose(skip)
        a = T.Tensor(np.broadcast_to(np.sqrt(ab), out.shape))
        s = T.Tensor(np.broadcast_to(np.sqrt(1.0 - ab), out.shape))
        out = T.mul(out, a) + T.mul(x, s)
        self.forward_calls += 1
        self.sample_forwards += batch
        return out


# -- pretraining --------------------------------------------------------
@dataclass
class PretrainConfig:
    epochs: int = 100
    batch: int = 128
    lr: float = 2e-3
    seed: int = 0
    hidden: int = 256
    n_hidden: int = 3
    log_every: int = 0


@dataclass
class PretrainResult:
    model: Denoiser
    final_loss: float
    losses: list = field(default_factory=list)


class Adam:
    def __init__(self, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m, self.v, self.k = {}, {}, 0

    def step(self, params: dict, grads: dict, lr=None) -> dict:
        lr = self.lr if lr is None else lr
        self.k += 1
        out = {}
        for n, g in grads.items():
            m = self.m.get(n, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(n, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[n], self.v[n] = m, v
            mh = m / (1 - self.b1**self.k)
            vh = v / (1 - self.b2**self.k)
            out[n] = params[n] - lr * mh / (np.sqrt(vh) + self.eps)
        return out


def denoising_loss(model: Denoiser, x0, t, eps, cond, schedule, leaves=None):
    """Noise-regression error weighted per row by 1 / alpha_bar_t.

    With the velocity skip in :class:`Denoiser` this equals the unweighted
    error of the MLP output against its velocity target, so every step
    contributes at the same scale.
    """
    xt = q_sample(x0, t, eps, schedule)
    pred = model.forward(T.Tensor(xt), t, cond, leaves)
    ab = schedule.abar(np.asarray(t))
    w = np.broadcast_to(np.sqrt(1.0 / ab)[:, None], pred.shape)
    resid = T.mul(T.sub(pred, T.Tensor(eps)), T.Tensor(w))
    return T.mean(T.square(resid))


def pretrain(corpus, config: PretrainConfig = None, schedule: NoiseSchedule = None) -> PretrainResult:
    """Fit the task-0 model by noise-prediction regression on the train split."""
    config = config or PretrainConfig()
    schedule = schedule or build_schedule()
    imgs, embs = corpus.stacked()
    if len(imgs) == 0:
        raise ContractError("pretrain: corpus has no training images")
    data = to_data(imgs.reshape(len(imgs), -1))

    init_rng = np.random.default_rng([config.seed, 1])
    order_rng = np.random.default_rng([config.seed, 2])
    noise_rng = np.random.default_rng([config.seed, 3])
    model = Denoiser.init(schedule, init_rng, hidden=config.hidden, n_hidden=config.n_hidden)
    names = list(model.named_params())
    opt = Adam(config.lr)
    steps_per_epoch = max(1, len(data) // config.batch)
    total = config.epochs * steps_per_epoch
    losses = []
    it = 0
    for epoch in range(config.epochs):
        perm = order_rng.permutation(len(data))
        for s in range(steps_per_epoch):
            idx = perm[s * config.batch:(s + 1) * config.batch]
            t = noise_rng.integers(1, schedule.N + 1, size=len(idx))
            eps = noise_rng.standard_normal(data[idx].shape)
            leaves = model.leaves(names)
            loss = denoising_loss(model, data[idx], t, eps, embs[idx], schedule, leaves)
            if not np.isfinite(loss.data):
                raise TrainingError(f"pretrain diverged at iteration {it}", iteration=it)
            grads = T.backward(loss)
            # cosine decay keeps the late iterates quiet
            lr = config.lr * 0.5 * (1 + np.cos(np.pi * it / total))
            new = opt.step(model.named_params(), {n: grads[leaves[n]] for n in names}, lr=lr)
            for n, v in new.items():
                model.set_param(n, v)
            losses.append(float(loss.data))
            it += 1
        if config.log_every and (epoch + 1) % config.log_every == 0:
            log.info("pretrain epoch %d loss %.4f", epoch + 1, np.mean(losses[-steps_per_epoch:]))
    model.forward_calls = model.sample_forwards = 0
    return PretrainResult(model=model, final_loss=losses[-1], losses=losses)


# -- sampling -----------------------------------------------------------
@dataclass
class SampleTrace:
    image: T.Tensor  # (batch, pixels) in (0, 1)
    z1: np.ndarray  # data-space latent entering the last step
    forward_count: int
    latents: list = field(default_factory=list)


def ddim_update(x, eps, t: int, schedule: NoiseSchedule):
    """One deterministic DDIM step t -> t-1; works on arrays and Tensors."""
    ab_t, ab_prev = float(schedule.abar(t)), float(schedule.abar(t - 1))
    x0 = (x - eps * np.sqrt(1.0 - ab_t)) * (1.0 / np.sqrt(ab_t))
    if t == 1:
        return x0
    return x0 * np.sqrt(ab_prev) + eps * np.sqrt(1.0 - ab_prev)


def last_step(model: Denoiser, z1, cond, schedule: NoiseSchedule, leaves=None):
    """Final denoising step from ``z1`` to the clamped image (tracked if ``leaves``)."""
    z1 = T.stop_gradient(T.as_tensor(z1))
    eps = model.forward(z1, 1, cond, leaves)
    return to_image(ddim_update(z1, eps, 1, schedule))


def run_to_z1(model: Denoiser, zN, cond, schedule: NoiseSchedule, keep_latents=False):
    """Untracked steps N..2; returns (z1, latents)."""
    x = np.asarray(zN, dtype=np.float64)
    latents = [x] if keep_latents else []
    with T.no_grad():
        for t in range(schedule.N, 1, -1):
            eps = model.forward(T.Tensor(x), t, cond).data
            x = ddim_update(x, eps, t, schedule)
            if not np.all(np.isfinite(x)):
                raise NumericError(f"ddim_sample: non-finite latent at step {t}")
            if keep_latents:
                latents.append(x)
    return x, latents


def ddim_sample(model: Denoiser, zN, cond, schedule: NoiseSchedule, grad_mode: str = "none",
                leaves=None, keep_latents: bool = False) -> SampleTrace:
    """Deterministic (eta = 0) DDIM from step N down to an image.

    ``zN`` is ``(batch, pixels)``; ``cond`` one embedding per row. With
    ``grad_mode="last_step"`` only the final denoiser application is recorded,
    against the tracked ``leaves`` (default: the model's trainable pair).
    """
    if grad_mode not in ("none", "last_step"):
        raise ContractError(f"ddim_sample: unknown grad_mode {grad_mode!r}")
    zN = np.asarray(zN, dtype=np.float64)
    if zN.ndim != 2 or zN.shape[1] != model.layers[-1].d_out:
        raise DimensionError(f"ddim_sample: z_N shape {zN.shape} is not (batch, {model.layers[-1].d_out})")
    z1, latents = run_to_z1(model, zN, cond, schedule, keep_latents)
    if grad_mode == "last_step":
        if leaves is None:
            leaves = model.leaves(trainable_params(model))
        img = last_step(model, z1, cond, schedule, leaves)
    else:
        with T.no_grad():
            img = last_step(model, z1, cond, schedule)
    if not np.all(np.isfinite(img.data)):
        raise NumericError("ddim_sample: non-finite latent at step 1")
    return SampleTrace(image=img, z1=z1, forward_count=schedule.N, latents=latents)
