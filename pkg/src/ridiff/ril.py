"""Reward fine-tuning across a task sequence: baseline, EMA last-step distillation, joint tuning, soups."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adapters import LoraGroup, merge_dense, trainable_params
from .diffusion import Denoiser, NoiseSchedule, ddim_sample, last_step, run_to_z1
from .errors import ContractError, TrainingError
from .metrics import MetricsHistory, evaluate
from .rewards import REWARD_NAMES

log = logging.getLogger(__name__)

METHODS = ("baseline", "rid", "rid_fullstep", "joint")
JOINT_WEIGHTS = {"smooth": 0.01, "pref": 2.0, "compress": 1.0}

# RNG purposes; every stream is default_rng([seed, purpose, task])
STREAM_ADAPTER = 101
STREAM_ORDER = 102
STREAM_NOISE = 103


# -- teacher ------------------------------------------------------------
@dataclass
class EmaTeacher:
    model: Denoiser
    alpha: float = 0.99

    @classmethod
    def of(cls, student: Denoiser, alpha: float = 0.99) -> "EmaTeacher":
        _check_alpha(alpha)
        return cls(student.copy(), alpha)


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"EMA momentum must lie in [0, 1], got {alpha}")


def _check_mirror(teacher_params: dict, student_params: dict):
    if teacher_params.keys() != student_params.keys():
        raise ContractError("teacher and student parameter names differ")
    for n, v in student_params.items():
        if teacher_params[n].shape != v.shape:
            raise ContractError(f"teacher/student shape mismatch at {n}: {teacher_params[n].shape} vs {v.shape}")


def ema_update(teacher: EmaTeacher, student: Denoiser, alpha: float = None) -> EmaTeacher:
    """``teacher = alpha * teacher + (1 - alpha) * student`` for every parameter."""
    alpha = teacher.alpha if alpha is None else alpha
    _check_alpha(alpha)
    tp, sp = teacher.model.named_params(), student.named_params()
    _check_mirror(tp, sp)
    for n, s in sp.items():
        t = tp[n]
        # equal arrays stay bitwise equal instead of picking up rounding noise
        if t is s or np.array_equal(t, s):
            continue
        teacher.model.set_param(n, alpha * t + (1.0 - alpha) * s)
    return teacher


# -- batches and optimizer ----------------------------------------------
@dataclass
class Batch:
    cond: np.ndarray  # (b, c_dim)
    zN: np.ndarray  # (b, pixels)

    def __len__(self):
        return len(self.cond)


def make_batch(conditions, size: int, order_rng, noise_rng, pixels: int = 256) -> Batch:
    if size < 1 or not conditions:
        raise ContractError("make_batch: need a positive size and at least one condition")
    pick = order_rng.integers(0, len(conditions), size=size)
    cond = np.stack([conditions[i].embedding for i in pick])
    return Batch(cond, noise_rng.standard_normal((size, pixels)))


class SGD:
    """Plain gradient descent on the model's trainable adapter pair."""

    def __init__(self, lr: float):
        if not lr > 0:
            raise ContractError(f"SGD: lr must be positive, got {lr}")
        self.lr = lr

    def step(self, model: Denoiser, leaves: dict, grads: T.GradMap):
        params = model.named_params()
        for n, leaf in leaves.items():
            if model.is_frozen(n):
                raise ContractError(f"SGD: refusing to update frozen parameter {n}")
            g = grads.get(leaf)
            if g is not None:
                model.set_param(n, params[n] - self.lr * g)


@dataclass
class StepStats:
    loss: float
    reward: float
    distill: float = 0.0
    forwards: int = 0


def _finite(loss, what):
    if not np.isfinite(loss.data):
        raise TrainingError(f"{what}: non-finite loss")


def _forwards(*models):
    return sum(m.sample_forwards for m in models)


def _apply(model, loss, leaves, opt):
    grads = T.backward(loss)
    opt.step(model, leaves, grads)


# -- steps --------------------------------------------------------------
def baseline_step(model: Denoiser, batch: Batch, reward, opt: SGD, schedule: NoiseSchedule) -> StepStats:
    """Maximize the mean reward through the last sampling step only."""
    if len(batch) == 0:
        raise ContractError("baseline_step: empty batch")
    before = _forwards(model)
    leaves = model.leaves(trainable_params(model))
    img = ddim_sample(model, batch.zN, batch.cond, schedule, grad_mode="last_step", leaves=leaves).image
    r = reward(img, batch.cond)
    loss = -T.mean(r)
    _finite(loss, "baseline_step")
    _apply(model, loss, leaves, opt)
    return StepStats(float(loss.data), float(np.mean(r.data)), 0.0, _forwards(model) - before)


def distill_distance(img, img_t):
    """Mean over the batch of the squared pixel distance to the teacher image."""
    return T.mean(T.tsum(T.square(img - T.stop_gradient(T.as_tensor(img_t))), axis=1))


def rid_loss(model: Denoiser, teacher: EmaTeacher, z1, cond, reward, lam: float, schedule, leaves):
    """Reward term, distillation term and their combination from a shared ``z1``.

    Returns ``(loss, reward_values, distill)``; the teacher pass is untracked.
    """
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    _check_mirror(teacher.model.named_params(), model.named_params())
    img = last_step(model, z1, cond, schedule, leaves)
    with T.no_grad():
        img_t = last_step(teacher.model, z1, cond, schedule).data
    r = reward(img, cond)
    d = distill_distance(img, img_t)
    loss = -T.mean(r)
    if lam != 0:
        loss = loss + T.scalar_mul(d, lam)
    return loss, r, d


def rid_step(model: Denoiser, teacher: EmaTeacher, batch: Batch, reward, lam: float, opt: SGD,
             schedule: NoiseSchedule, alpha: float = None) -> StepStats:
    """One distilled update, then an EMA refresh of the teacher."""
    if len(batch) == 0:
        raise ContractError("rid_step: empty batch")
    before = _forwards(model, teacher.model)
    z1, _ = run_to_z1(model, batch.zN, batch.cond, schedule)
    leaves = model.leaves(trainable_params(model))
    loss, r, d = rid_loss(model, teacher, z1, batch.cond, reward, lam, schedule, leaves)
    _finite(loss, "rid_step")
    _apply(model, loss, leaves, opt)
    ema_update(teacher, model, alpha)
    return StepStats(float(loss.data), float(np.mean(r.data)), float(d.data), _forwards(model, teacher.model) - before)


def _fullstep(model, teacher, batch, schedule, leaves):
    _check_mirror(teacher.model.named_params(), model.named_params())
    before = _forwards(model, teacher.model)
    img = ddim_sample(model, batch.zN, batch.cond, schedule, grad_mode="last_step", leaves=leaves).image
    with T.no_grad():
        img_t = ddim_sample(teacher.model, batch.zN, batch.cond, schedule).image.data
    return img, distill_distance(img, img_t), _forwards(model, teacher.model) - before


def fullstep_distill_loss(model: Denoiser, teacher: EmaTeacher, batch: Batch, schedule: NoiseSchedule, leaves=None):
    """Distance between final images when both models denoise the same ``z_N``.

    Returns ``(loss, forwards)``. Only the student's final step is tracked.
    """
    if leaves is None:
        leaves = model.leaves(trainable_params(model))
    _, d, fw = _fullstep(model, teacher, batch, schedule, leaves)
    return d, fw


def rid_fullstep_step(model, teacher, batch, reward, lam, opt, schedule, alpha=None) -> StepStats:
    """Ablation: reward plus full-trajectory distillation."""
    leaves = model.leaves(trainable_params(model))
    img, d, fw = _fullstep(model, teacher, batch, schedule, leaves)
    r = reward(img, batch.cond)
    loss = -T.mean(r)
    if lam != 0:
        loss = loss + T.scalar_mul(d, lam)
    _finite(loss, "rid_fullstep_step")
    _apply(model, loss, leaves, opt)
    ema_update(teacher, model, alpha)
    return StepStats(float(loss.data), float(np.mean(r.data)), float(d.data), fw)


def joint_reward(rewards: dict, weights: dict = None):
    """Weighted sum of reward tasks; zero-weight terms are dropped."""
    weights = dict(JOINT_WEIGHTS if weights is None else weights)
    unknown = set(weights) - set(rewards)
    if unknown:
        raise ContractError(f"joint weights name unknown rewards {sorted(unknown)}")
    terms = [(rewards[n], w) for n, w in weights.items() if w != 0]

    def fn(img, cond):
        total = None
        for task, w in terms:
            r = task(img, cond)
            r = r if w == 1 else T.scalar_mul(r, w)
            total = r if total is None else total + r
        return total

    return fn, [n for n, w in weights.items() if w != 0]


def joint_step(model: Denoiser, batch: Batch, rewards: dict, opt: SGD, schedule: NoiseSchedule,
               weights: dict = None) -> StepStats:
    fn, active = joint_reward(rewards, weights)
    if not active:
        # nothing to optimize: zero loss, zero gradient
        return StepStats(0.0, 0.0, 0.0, 0)
    return baseline_step(model, batch, fn, opt, schedule)


# -- task sequences -----------------------------------------------------
@dataclass
class TaskRunConfig:
    method: str = "rid"
    reward: str = "smooth"
    epochs: int = 6
    batch: int = 8
    lr: float = 0.02
    lam: float = 0.1
    ema_momentum: float = 0.99
    joint_weights: dict = None
    persist_teacher: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}")
        if self.method != "joint" and self.reward not in REWARD_NAMES:
            raise ContractError(f"unknown reward {self.reward!r}")
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")
        _check_alpha(self.ema_momentum)
        if self.epochs < 0 or self.batch < 1 or not self.lr > 0:
            raise ContractError("epochs >= 0, batch >= 1 and lr > 0 required")

    def reward_names(self):
        if self.method == "joint":
            w = JOINT_WEIGHTS if self.joint_weights is None else self.joint_weights
            return [n for n, v in w.items() if v != 0]
        return [self.reward]


def train_task(model: Denoiser, cfg: TaskRunConfig, rewards: dict, conditions, schedule: NoiseSchedule,
               seed: int = 0, task: int = 1, teacher: EmaTeacher = None) -> list:
    """Run ``cfg.epochs`` passes over ``conditions`` for the active adapter pair."""
    order_rng = np.random.default_rng([seed, STREAM_ORDER, task])
    noise_rng = np.random.default_rng([seed, STREAM_NOISE, task])
    steps = max(1, -(-len(conditions) // cfg.batch))
    opt = SGD(cfg.lr)
    pixels = model.layers[-1].d_out
    stats = []
    for _ in range(cfg.epochs):
        for _ in range(steps):
            b = make_batch(conditions, cfg.batch, order_rng, noise_rng, pixels)
            try:
                if cfg.method == "baseline":
                    s = baseline_step(model, b, rewards[cfg.reward], opt, schedule)
                elif cfg.method == "joint":
                    s = joint_step(model, b, rewards, opt, schedule, cfg.joint_weights)
                elif cfg.method == "rid":
                    s = rid_step(model, teacher, b, rewards[cfg.reward], cfg.lam, opt, schedule)
                else:
                    s = rid_fullstep_step(model, teacher, b, rewards[cfg.reward], cfg.lam, opt, schedule)
            except TrainingError as e:
                raise TrainingError(str(e), iteration=len(stats), task=task) from e
            stats.append(s)
    return stats


def snapshot(model: Denoiser) -> dict:
    return {n: v.copy() for n, v in model.named_params().items()}


def _sync_teacher(teacher: EmaTeacher, student: Denoiser):
    """Give a persistent teacher the student's freshly added pair."""
    for tg, sg in zip(teacher.model.layers, student.layers):
        for p in tg.pairs:
            p.frozen = True
        tg.pairs.append(copy.deepcopy(sg.pairs[-1]))


@dataclass
class SequenceResult:
    model: Denoiser
    checkpoints: list = field(default_factory=list)
    history: MetricsHistory = field(default_factory=MetricsHistory)
    stats: list = field(default_factory=list)


def run_sequence(tasks, pretrained: Denoiser, corpus, rewards: dict, schedule: NoiseSchedule, eval_ctx,
                 seed: int = 0, rank: int = 4, eval_samples: int = 16, eval_seed: int = None,
                 on_checkpoint=None) -> SequenceResult:
    """Fine-tune a copy of ``pretrained`` on each task in turn, evaluating after each one."""
    eval_seed = seed if eval_seed is None else eval_seed
    model = pretrained.copy()
    model.forward_calls = model.sample_forwards = 0
    res = SequenceResult(model)
    rec = evaluate(model, corpus.test_conditions, eval_ctx, eval_samples, eval_seed, task_index=0)
    res.history.records.append(rec)
    teacher = None
    for t, cfg in enumerate(tasks, start=1):
        model.expand(rank, np.random.default_rng([seed, STREAM_ADAPTER, t]))
        if cfg.method in ("rid", "rid_fullstep"):
            if teacher is None or not cfg.persist_teacher:
                teacher = EmaTeacher.of(model, cfg.ema_momentum)
            else:
                _sync_teacher(teacher, model)
                teacher.alpha = cfg.ema_momentum
        log.info("task %d: %s on %s", t, cfg.method, ",".join(cfg.reward_names()))
        res.stats.append(train_task(model, cfg, rewards, corpus.train_conditions, schedule, seed, t, teacher))
        ckpt = snapshot(model)
        res.checkpoints.append(ckpt)
        rec = evaluate(model, corpus.test_conditions, eval_ctx, eval_samples, eval_seed, task_index=t)
        res.history.records.append(rec)
        res.history.activate(cfg.reward_names(), t)
        if on_checkpoint is not None:
            on_checkpoint(t, model, rec)
    return res


# -- soups --------------------------------------------------------------
def model_soup(models, coefficients) -> Denoiser:
    """Convex combination of dense-merged models; the result carries no adapter pairs."""
    models = list(models)
    coefficients = [float(c) for c in coefficients]
    if not models or len(models) != len(coefficients):
        raise ContractError("model_soup: need one coefficient per model")
    if abs(sum(coefficients) - 1.0) > 1e-9:
        raise ContractError(f"model_soup: coefficients sum to {sum(coefficients)}, not 1")
    ref = models[0]
    for m in models[1:]:
        if len(m.layers) != len(ref.layers) or not np.array_equal(m.alpha_bar, ref.alpha_bar):
            raise ContractError("model_soup: models have different structure or schedules")
    skip = None
    for m, c in zip(models, coefficients):
        if c != 0:
            s = m.skip if c == 1 else c * m.skip
            skip = s if skip is None else skip + s
    layers = []
    for i, g0 in enumerate(ref.layers):
        W = bias = None
        for m, c in zip(models, coefficients):
            g = m.layers[i]
            if g.W.shape != g0.W.shape:
                raise ContractError(f"model_soup: layer {i} shape mismatch {g.W.shape} vs {g0.W.shape}")
            if c == 0:
                continue
            w = merge_dense(g)
            w = w if c == 1 else c * w
            b = g.bias if c == 1 else c * g.bias
            W = w if W is None else W + w
            bias = b if bias is None else bias + b
        layers.append(LoraGroup(W=W.copy(), bias=bias.copy()))
    return Denoiser(layers, ref.alpha_bar.copy(), ref.t_dim, ref.c_dim, skip=skip.copy())
