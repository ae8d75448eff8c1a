import numpy as np
import pytest
from conftest import params_equal, rngs
from hypothesis import given, settings, strategies as st

from ridiff import ril
from ridiff.adapters import merge_dense
from ridiff.corpus import COND_DIM
from ridiff.diffusion import Denoiser, build_schedule, ddim_sample
from ridiff.errors import ContractError, TrainingError


def fresh(world, tasks=1):
    m = world.model.copy()
    for t in range(tasks):
        m.expand(4, np.random.default_rng([7, t]))
    # give the active pair a nonzero B so reductions are not vacuous
    for g in m.layers:
        g.active_pair.B = np.random.default_rng(3).standard_normal(g.active_pair.B.shape) * 0.01
    m.forward_calls = m.sample_forwards = 0
    return m


def batch(world, size=4, seed=0):
    o, n = rngs(seed)
    return ril.make_batch(world.corpus.train_conditions, size, o, n)


# -- EMA ----------------------------------------------------------------
def _scalar_model(value):
    from ridiff.adapters import LoraGroup

    g = LoraGroup(W=np.full((256, 4), value))
    return Denoiser([LoraGroup(W=np.full((16, 16), value)), g], np.array([0.9, 0.5]), t_dim=2, c_dim=16,
                    skip=np.full((256, 512), value))


def test_ema_hand_examples():
    teacher = ril.EmaTeacher(_scalar_model(1.0), 0.9)
    ril.ema_update(teacher, _scalar_model(0.0))
    for v in teacher.model.named_params().values():
        np.testing.assert_allclose(v, 0.9, rtol=0, atol=1e-15)
    teacher = ril.EmaTeacher(_scalar_model(1.0))
    ril.ema_update(teacher, _scalar_model(0.0), alpha=1.0)
    assert all((v == 1.0).all() for v in teacher.model.named_params().values())
    ril.ema_update(teacher, _scalar_model(0.25), alpha=0.0)
    assert all((v == 0.25).all() for v in teacher.model.named_params().values())


@pytest.mark.parametrize("alpha", [-0.1, 1.5])
def test_ema_alpha_range(alpha):
    with pytest.raises(ContractError):
        ril.ema_update(ril.EmaTeacher(_scalar_model(1.0)), _scalar_model(0.0), alpha)
    with pytest.raises(ContractError):
        ril.EmaTeacher.of(_scalar_model(0.0), alpha)


def test_ema_requires_mirrored_params(small_world):
    teacher = ril.EmaTeacher.of(small_world.model)
    student = small_world.model.copy().expand(2, 0)
    with pytest.raises(ContractError):
        ril.ema_update(teacher, student)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([0.0, 0.5, 0.9, 1.0]), st.integers(0, 50), st.integers(0, 10**6))
def test_ema_contraction(alpha, k, seed):
    r = np.random.default_rng(seed)
    s = build_schedule(3)
    student = Denoiser.init(s, r, hidden=4, n_hidden=1)
    teacher = ril.EmaTeacher(Denoiser.init(s, r, hidden=4, n_hidden=1), alpha)
    start = {n: v.copy() for n, v in teacher.model.named_params().items()}
    for _ in range(k):
        ril.ema_update(teacher, student)
    for n, v in student.named_params().items():
        want = alpha**k * (start[n] - v)
        np.testing.assert_allclose(teacher.model.named_params()[n] - v, want, rtol=0, atol=1e-12)


# -- single steps -------------------------------------------------------
def test_make_batch_is_seeded(small_world):
    a, b = batch(small_world), batch(small_world)
    assert a.cond.tobytes() == b.cond.tobytes() and a.zN.tobytes() == b.zN.tobytes()
    with pytest.raises(ContractError):
        ril.make_batch([], 2, *rngs())


def test_baseline_step_counts_and_freezing(small_world):
    m = fresh(small_world, tasks=2)
    before = {n: v.copy() for n, v in m.named_params().items()}
    b = batch(small_world)
    st_ = ril.baseline_step(m, b, small_world.rewards["compress"], ril.SGD(0.05), small_world.schedule)
    assert st_.forwards == small_world.schedule.N * len(b)
    after = m.named_params()
    changed = {n for n in before if before[n].tobytes() != after[n].tobytes()}
    assert changed and all(".lora2." in n for n in changed)
    for n in before:
        if m.is_frozen(n):
            assert before[n].tobytes() == after[n].tobytes()


def test_sgd_refuses_frozen(small_world):
    m = fresh(small_world)
    leaves = m.leaves(["layer0.W"])
    with pytest.raises(ContractError):
        ril.SGD(0.1).step(m, leaves, {})
    with pytest.raises(ContractError):
        ril.SGD(0.0)


def test_rid_step_counts_and_first_distill_zero(small_world):
    m = fresh(small_world)
    teacher = ril.EmaTeacher.of(m)
    b = batch(small_world)
    s = ril.rid_step(m, teacher, b, small_world.rewards["smooth"], 0.1, ril.SGD(0.05), small_world.schedule)
    assert s.distill == 0.0
    assert s.forwards == (small_world.schedule.N + 1) * len(b)
    s2 = ril.rid_step(m, teacher, b, small_world.rewards["smooth"], 0.1, ril.SGD(0.05), small_world.schedule)
    assert s2.distill > 0.0


def test_rid_step_mirror_mismatch(small_world):
    m = fresh(small_world)
    teacher = ril.EmaTeacher.of(small_world.model)
    with pytest.raises(ContractError):
        ril.rid_step(m, teacher, batch(small_world), small_world.rewards["smooth"], 0.1, ril.SGD(0.1),
                     small_world.schedule)


def test_rid_with_zero_lambda_equals_baseline(small_world):
    a, b = fresh(small_world), fresh(small_world)
    teacher = ril.EmaTeacher.of(b, 0.37)
    teacher.model.layers[1].W = teacher.model.layers[1].W + 1.0  # a diverged teacher must not matter
    for seed in range(3):
        ril.baseline_step(a, batch(small_world, seed=seed), small_world.rewards["pref"], ril.SGD(0.05),
                          small_world.schedule)
        ril.rid_step(b, teacher, batch(small_world, seed=seed), small_world.rewards["pref"], 0.0, ril.SGD(0.05),
                     small_world.schedule)
    assert params_equal(a, b)


@pytest.mark.parametrize("name", ["smooth", "pref", "compress"])
def test_one_hot_joint_equals_baseline(small_world, name):
    a, b = fresh(small_world), fresh(small_world)
    weights = {n: (1.0 if n == name else 0.0) for n in ("smooth", "pref", "compress")}
    for seed in range(2):
        ril.baseline_step(a, batch(small_world, seed=seed), small_world.rewards[name], ril.SGD(0.05),
                          small_world.schedule)
        ril.joint_step(b, batch(small_world, seed=seed), small_world.rewards, ril.SGD(0.05), small_world.schedule,
                       weights)
    assert params_equal(a, b)


def test_joint_zero_weights(small_world):
    m = fresh(small_world)
    before = m.copy()
    s = ril.joint_step(m, batch(small_world), small_world.rewards, ril.SGD(0.05), small_world.schedule,
                       {"smooth": 0.0, "pref": 0.0, "compress": 0.0})
    assert s.loss == 0.0
    assert params_equal(m, before)


def test_joint_default_weights():
    assert ril.JOINT_WEIGHTS == {"smooth": 0.01, "pref": 2.0, "compress": 1.0}
    with pytest.raises(ContractError):
        ril.joint_reward({"smooth": None}, {"hps": 1.0})


def test_joint_reward_is_weighted_sum(small_world):
    fn, active = ril.joint_reward(small_world.rewards)
    assert active == ["smooth", "pref", "compress"]
    img = np.random.default_rng(0).random((3, 256))
    cond = np.random.default_rng(1).standard_normal((3, COND_DIM))
    r = small_world.rewards
    want = 0.01 * r["smooth"](img, cond).data + 2 * r["pref"](img, cond).data + r["compress"](img, cond).data
    np.testing.assert_allclose(fn(img, cond).data, want, rtol=1e-12)


def test_fullstep_counts_and_identity(small_world):
    m = fresh(small_world)
    teacher = ril.EmaTeacher.of(m)
    b = batch(small_world)
    d, fw = ril.fullstep_distill_loss(m, teacher, b, small_world.schedule)
    assert d.item() == 0.0
    assert fw == 2 * small_world.schedule.N * len(b)
    s = ril.rid_fullstep_step(m, teacher, b, small_world.rewards["smooth"], 0.1, ril.SGD(0.05), small_world.schedule)
    assert s.forwards == fw


def test_overhead_ratios_at_fifty_steps(small_world):
    s = build_schedule(50)
    m = Denoiser(small_world.model.copy().layers, s.alpha_bar, skip=small_world.model.skip)
    m.expand(4, 0)
    b = batch(small_world, size=2)
    base = ril.baseline_step(m.copy(), b, small_world.rewards["smooth"], ril.SGD(0.01), s).forwards
    mm = m.copy()
    rid = ril.rid_step(mm, ril.EmaTeacher.of(mm), b, small_world.rewards["smooth"], 0.1, ril.SGD(0.01), s).forwards
    mm = m.copy()
    full = ril.rid_fullstep_step(mm, ril.EmaTeacher.of(mm), b, small_world.rewards["smooth"], 0.1, ril.SGD(0.01),
                                 s).forwards
    assert rid / base == 51 / 50 == 1.02
    assert full / base == 2.0


def test_non_finite_loss_raises(small_world):
    m = fresh(small_world)

    def bad(img, cond):
        from ridiff import tensor as T

        return T.scalar_mul(T.tsum(img, axis=1), np.inf)

    with pytest.raises(TrainingError):
        ril.baseline_step(m, batch(small_world), bad, ril.SGD(0.1), small_world.schedule)
    cfg = ril.TaskRunConfig(method="baseline", reward="smooth", epochs=1)
    with pytest.raises(TrainingError) as info:
        ril.train_task(m, cfg, {"smooth": bad}, small_world.corpus.train_conditions, small_world.schedule, 0, 3)
    assert info.value.task == 3 and info.value.iteration == 0


def test_compress_probe_reward_rises(small_world):
    m = small_world.model.copy().expand(4, 0)
    reward = small_world.rewards["compress"]
    probe = batch(small_world, size=8, seed=99)

    def probe_reward():
        return reward(ddim_sample(m, probe.zN, probe.cond, small_world.schedule).image, probe.cond).data.mean()

    curve = [probe_reward()]
    opt = ril.SGD(0.02)
    for _ in range(20):
        ril.baseline_step(m, probe, reward, opt, small_world.schedule)
        curve.append(probe_reward())
    assert curve[-1] > curve[0]
    assert curve[10] > curve[0]


# -- configs and sequences ----------------------------------------------
@pytest.mark.parametrize("kwargs", [{"method": "ppo"}, {"reward": "hps"}, {"lam": -1.0}, {"ema_momentum": 2.0},
                                    {"lr": 0.0}, {"batch": 0}, {"epochs": -1}])
def test_task_config_validation(kwargs):
    with pytest.raises(ContractError):
        ril.TaskRunConfig(**kwargs)


def test_epoch_keeps_host_and_old_pairs(small_world):
    m = fresh(small_world, tasks=2)
    frozen = {n: v.copy() for n, v in m.named_params().items() if m.is_frozen(n)}
    assert any(".lora1." in n for n in frozen) and "skip.W" in frozen
    teacher = ril.EmaTeacher.of(m)
    cfg = ril.TaskRunConfig(method="rid", reward="smooth", epochs=1, batch=8, lr=0.05)
    stats = ril.train_task(m, cfg, small_world.rewards, small_world.corpus.train_conditions, small_world.schedule,
                           0, 2, teacher)
    assert len(stats) == -(-len(small_world.corpus.train_conditions) // 8)
    for n, v in frozen.items():
        assert m.named_params()[n].tobytes() == v.tobytes()


def test_empty_sequence(small_world):
    res = ril.run_sequence([], small_world.model, small_world.corpus, small_world.rewards, small_world.schedule,
                           small_world.ctx, eval_samples=2)
    assert len(res.history.records) == 1 and res.checkpoints == []


@pytest.fixture(scope="module")
def three_tasks(small_world):
    tasks = [ril.TaskRunConfig(method="rid", reward=r, epochs=1, lr=0.02) for r in ("smooth", "pref", "compress")]
    return ril.run_sequence(tasks, small_world.model, small_world.corpus, small_world.rewards, small_world.schedule,
                            small_world.ctx, seed=2, eval_samples=2)


def test_three_task_sequence_counts(three_tasks, small_world):
    res = three_tasks
    assert len(res.checkpoints) == 3
    assert [r.task_index for r in res.history.records] == [0, 1, 2, 3]
    assert all(len(g.pairs) == 3 for g in res.model.layers)
    assert len({r.noise_hash for r in res.history.records}) == 1
    assert res.history.active_from["smooth_score"] == 1
    assert res.history.active_from["lossy_bytes"] == 3
    # the caller's pretrained model is untouched
    assert small_world.model.n_tasks == 0


def test_sequence_is_reproducible(three_tasks, small_world):
    tasks = [ril.TaskRunConfig(method="rid", reward=r, epochs=1, lr=0.02) for r in ("smooth", "pref", "compress")]
    again = ril.run_sequence(tasks, small_world.model, small_world.corpus, small_world.rewards, small_world.schedule,
                             small_world.ctx, seed=2, eval_samples=2)
    assert params_equal(again.model, three_tasks.model)
    assert again.history.values("feat_fd") == three_tasks.history.values("feat_fd")


def test_persistent_teacher_option(small_world):
    tasks = [ril.TaskRunConfig(method="rid", reward=r, epochs=1, persist_teacher=True) for r in ("smooth", "pref")]
    res = ril.run_sequence(tasks, small_world.model, small_world.corpus, small_world.rewards, small_world.schedule,
                           small_world.ctx, eval_samples=1)
    assert all(len(g.pairs) == 2 for g in res.model.layers)


# -- soups --------------------------------------------------------------
def test_soup_one_hot_is_dense_merge(three_tasks, small_world):
    other = small_world.model
    soup = ril.model_soup([three_tasks.model, other, other], [1, 0, 0])
    for i, g in enumerate(three_tasks.model.layers):
        assert soup.layers[i].W.tobytes() == merge_dense(g).tobytes()
        assert soup.layers[i].pairs == []
    assert soup.skip.tobytes() == three_tasks.model.skip.tobytes()


def test_soup_of_identical_models(small_world):
    m = small_world.model
    soup = ril.model_soup([m, m, m], [0.25, 0.25, 0.5])
    for g, h in zip(soup.layers, m.layers):
        np.testing.assert_allclose(g.W, h.W, rtol=0, atol=1e-15)


def test_soup_errors(small_world):
    m = small_world.model
    with pytest.raises(ContractError):
        ril.model_soup([m, m], [0.5, 0.4])
    with pytest.raises(ContractError):
        ril.model_soup([m, m], [1.0])
    other = Denoiser.init(small_world.schedule, 0, hidden=8, n_hidden=2)
    with pytest.raises(ContractError):
        ril.model_soup([m, other], [0.5, 0.5])
