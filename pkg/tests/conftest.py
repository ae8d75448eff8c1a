from dataclasses import dataclass

import numpy as np
import pytest

from ridiff.corpus import generate_corpus
from ridiff.diffusion import PretrainConfig, build_schedule, pretrain
from ridiff.metrics import EvalContext
from ridiff.rewards import JpegPipelineConfig, make_reward_tasks


@dataclass
class World:
    corpus: object
    schedule: object
    rewards: dict
    ctx: object
    model: object


@pytest.fixture(scope="session")
def small_world():
    """A quickly pretrained toy setup shared by training and CLI tests."""
    corpus = generate_corpus(1, K=2, styles_per_class=8, images_per_condition=8, test_fraction=0.25)
    schedule = build_schedule(8)
    model = pretrain(corpus, PretrainConfig(epochs=40, batch=32, hidden=32, n_hidden=2, seed=1), schedule).model
    rewards = make_reward_tasks(1, JpegPipelineConfig(quality=10), {"compress": 5.0})
    ctx = EvalContext.build(corpus, rewards, schedule, n_reference=64)
    return World(corpus, schedule, rewards, ctx, model)


def params_equal(a, b) -> bool:
    pa, pb = a.named_params(), b.named_params()
    return pa.keys() == pb.keys() and all(pa[k].tobytes() == pb[k].tobytes() for k in pa)


def rngs(seed=0):
    return np.random.default_rng([seed, 1]), np.random.default_rng([seed, 2])


# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(n: int, ok: bool, detail: str = ""):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
