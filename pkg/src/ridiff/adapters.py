"""Task-indexed low-rank adapter groups.

A layer holds a frozen host weight ``W`` (plus bias) and one ``(A_t, B_t)``
pair per task; its output is ``W x + sum_t A_t B_t x``. Only the newest pair
is ever trainable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError


@dataclass
class LoraPair:
    A: np.ndarray  # (d_out, r), expansion
    B: np.ndarray  # (r, d_in), reduction
    task_id: int
    frozen: bool = False

    @property
    def rank(self) -> int:
        return self.A.shape[1]


@dataclass
class LoraGroup:
    W: np.ndarray
    bias: np.ndarray | None = None
    pairs: list = field(default_factory=list)

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def active_pair(self):
        if self.pairs and not self.pairs[-1].frozen:
            return self.pairs[-1]
        return None


def expand_group(group: LoraGroup, rank: int = 4, seed=0) -> LoraGroup:
    """Freeze existing pairs and append a zero-effect pair for the next task.

    ``B`` starts at zero; ``A`` is uniform in +-sqrt(6 / rank), rank being
    the fan-in of ``A``. ``seed`` may be an int or a numpy Generator.
    """
    if rank < 1:
        raise ContractError(f"expand_group: rank must be >= 1, got {rank}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for p in group.pairs:
        p.frozen = True
    bound = np.sqrt(6.0 / rank)
    A = rng.uniform(-bound, bound, size=(group.d_out, rank))
    B = np.zeros((rank, group.d_in))
    task_id = group.pairs[-1].task_id + 1 if group.pairs else 1
    group.pairs.append(LoraPair(A=A, B=B, task_id=task_id))
    return group


def lora_forward(group: LoraGroup, x, leaves=None):
    """Row-batched layer output: ``x @ W.T + sum_t (x @ B_t.T) @ A_t.T + bias``.

    ``x`` is ``(batch, d_in)``. ``leaves`` maps local names (``"W"``,
    ``"bias"``, ``"lora{t}.A"``, ``"lora{t}.B"``) to tracked Tensors that
    replace the stored arrays; everything else enters as a constant.
    """
    leaves = leaves or {}
    x = T.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != group.d_in:
        raise DimensionError(f"lora_forward: input {x.shape} does not match layer ({group.d_out}, {group.d_in})")

    def get(name, arr):
        return leaves.get(name) or T.Tensor(arr)

    out = x @ T.transpose(get("W", group.W))
    for p in group.pairs:
        A = get(f"lora{p.task_id}.A", p.A)
        B = get(f"lora{p.task_id}.B", p.B)
        out = out + (x @ T.transpose(B)) @ T.transpose(A)
    if group.bias is not None:
        out = out + T.broadcast_to(get("bias", group.bias), out.shape)
    return out


def merge_dense(group: LoraGroup) -> np.ndarray:
    merged = group.W.copy()
    for p in group.pairs:
        merged = merged + p.A @ p.B
    return merged


def trainable_params(model, task=None) -> list:
    """Names of the active task's A and B matrices in every layer.

    Host weights, biases and frozen pairs are never included.
    """
    active = model.active_task
    if active is None or (task is not None and task != active):
        raise ContractError(f"trainable_params: task {task} is not the active task ({active})")
    return [n for n in model.named_params() if f".lora{active}." in n]
