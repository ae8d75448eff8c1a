import numpy as np
import pytest
import scipy.fft
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from ridiff import tensor as T
from ridiff.corpus import COND_DIM
from ridiff.errors import ContractError
from ridiff.rewards import (
    LUMINANCE_TABLE,
    JpegPipelineConfig,
    block_dct_matrix,
    dct_matrix,
    diff_jpeg,
    jpeg_reference,
    make_reward_tasks,
    quality_table,
    reward_compress,
    soft_round,
)

rng = np.random.default_rng(2024)


def checkerboard():
    return ((np.indices((16, 16)).sum(0) % 2) * 0.8 + 0.1).reshape(1, 256)


def gradient():
    return np.tile(np.linspace(0.1, 0.9, 16), (16, 1)).reshape(1, 256)


def test_quality_mapping():
    np.testing.assert_array_equal(quality_table(50), LUMINANCE_TABLE)
    assert quality_table(100).max() == 1
    assert quality_table(10)[0, 0] == (16 * 500 + 50) // 100
    assert quality_table(1).max() == 255
    with pytest.raises(ContractError):
        quality_table(0)


def test_dct_matches_scipy():
    x = rng.standard_normal((8, 8))
    D = dct_matrix()
    np.testing.assert_allclose(D @ x @ D.T, scipy.fft.dctn(x, norm="ortho"), atol=1e-12)


def test_dct_round_trip():
    M = block_dct_matrix(16, 16)
    x = rng.random(256)
    np.testing.assert_allclose(M.T @ (M @ x), x, rtol=0, atol=1e-10)


@pytest.mark.parametrize("q", [80, 95, 100])
def test_constant_images_survive(q):
    cfg = JpegPipelineConfig(quality=q)
    for c in np.linspace(0.0, 1.0, 101):
        img = np.full((16, 16), c)
        assert np.sum((img - diff_jpeg(img, cfg).data) ** 2) < 1e-4
        assert reward_compress(img, cfg).item() >= -1e-4
        assert np.count_nonzero(jpeg_reference(img, q)[1]) <= 4


def test_dc_aligned_constant_is_exact_for_oracle():
    # DC level 8 * 255 * (c - 0.5) / 16 is an integer at quality 50
    c = 0.5 + 2 * 16 / (8 * 255)
    img = np.full((16, 16), c)
    ref, levels = jpeg_reference(img, 50)
    np.testing.assert_allclose(ref, img, atol=1e-12)
    assert np.count_nonzero(levels) == 4
    assert np.sum((img - diff_jpeg(img, JpegPipelineConfig(quality=50)).data) ** 2) < 1e-20


def test_higher_quality_reconstructs_better():
    img = rng.random((16, 16))
    err = {q: np.sum((img - diff_jpeg(img, JpegPipelineConfig(quality=q)).data) ** 2) for q in (10, 100)}
    oracle = {q: np.sum((img - jpeg_reference(img, q)[0]) ** 2) for q in (10, 100)}
    assert err[100] < err[10]
    assert oracle[100] < oracle[10]


def test_reconstruction_close_to_oracle_at_q80():
    cfg = JpegPipelineConfig(quality=80)
    r = np.random.default_rng(11)
    for _ in range(50):
        img = r.random((16, 16))
        ref, _ = jpeg_reference(img, 80)
        rel = np.linalg.norm(diff_jpeg(img, cfg).data - ref) / np.linalg.norm(ref)
        assert rel <= 0.05


def test_batch_and_single_agree():
    imgs = rng.random((3, 256))
    batch = diff_jpeg(imgs).data
    for i in range(3):
        np.testing.assert_allclose(diff_jpeg(imgs[i].reshape(16, 16)).data.reshape(-1), batch[i], atol=1e-14)


def test_size_must_be_block_aligned():
    with pytest.raises(ContractError):
        diff_jpeg(np.zeros((12, 12)))
    with pytest.raises(ContractError):
        jpeg_reference(np.zeros((10, 16)))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, (4, 8), elements=st.floats(-50, 50)))
def test_soft_round_bounds(x):
    y = soft_round(T.Tensor(x)).data
    assert np.all(np.abs(y - np.round(x)) <= 0.5 + 1e-9)
    assert np.all(np.abs(y - x) <= 1 / (2 * np.pi) + 1e-12)


def test_soft_round_is_exact_on_integers_and_monotone():
    x = np.linspace(-3, 3, 601)
    y = soft_round(T.Tensor(x)).data
    assert np.all(np.diff(y) >= 0)
    ints = np.arange(-3.0, 4.0)
    np.testing.assert_allclose(soft_round(T.Tensor(ints)).data, ints, atol=1e-12)


def test_compress_fixed_point_and_sign():
    # a zero-centred image with all coefficients zero is a fixed point
    img = np.full((1, 256), 0.5)
    assert reward_compress(img).item() == 0.0
    for _ in range(10):
        assert reward_compress(rng.random((1, 256))).item() <= 0.0


def test_checkerboard_scores_below_gradient():
    for q in (10, 50, 80):
        cfg = JpegPipelineConfig(quality=q)
        assert reward_compress(checkerboard(), cfg).item() < reward_compress(gradient(), cfg).item()


@pytest.fixture(scope="module")
def tasks():
    return make_reward_tasks(0)


def test_rewards_are_deterministic(tasks):
    img = rng.random((4, 256))
    cond = rng.standard_normal((4, COND_DIM))
    for t in tasks.values():
        assert t(img, cond).data.tobytes() == t(img, cond).data.tobytes()


@pytest.mark.parametrize("name", ["smooth", "pref", "compress"])
def test_reward_gradients(tasks, name):
    r = np.random.default_rng(5)
    for _ in range(3):
        img = r.uniform(0.05, 0.95, (2, 256))
        cond = r.standard_normal((2, COND_DIM))
        assert T.finite_diff_check(lambda x: T.tsum(tasks[name](x, cond)), img) <= 1e-5


def test_smooth_lipschitz(tasks):
    r = np.random.default_rng(6)
    img = r.uniform(0.1, 0.9, (1, 256))
    x = T.Tensor(img, requires_grad=True)
    g = T.backward(T.tsum(tasks["smooth"](x))).get(x)
    bound = np.abs(g).sum() * 1e-3 * 1.01 + 1e-9
    for _ in range(20):
        d = r.choice([-1e-3, 1e-3], size=img.shape)
        change = abs(tasks["smooth"](img + d).item() - tasks["smooth"](img).item())
        assert change <= bound


def test_scorer_seeds_disagree():
    a, b = make_reward_tasks(0), make_reward_tasks(1)
    img = rng.random((8, 256))
    assert not np.allclose(a["smooth"](img).data, b["smooth"](img).data)
    assert not np.allclose(a["pref"](img, np.zeros(COND_DIM)).data, b["pref"](img, np.zeros(COND_DIM)).data)


def test_pref_depends_on_condition(tasks):
    img = np.repeat(rng.random((1, 256)), 2, 0)
    cond = rng.standard_normal((2, COND_DIM))
    s = tasks["pref"](img, cond).data
    assert s[0] != s[1]


def test_smooth_ignores_condition(tasks):
    img = np.repeat(rng.random((1, 256)), 2, 0)
    s = tasks["smooth"](img, rng.standard_normal((2, COND_DIM))).data
    assert s[0] == s[1]


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_scale_keeps_preference(scale, seed):
    r = np.random.default_rng(seed)
    imgs = r.random((2, 256))
    cond = r.standard_normal((2, COND_DIM))
    plain = make_reward_tasks(3)
    scaled = make_reward_tasks(3, scales={"smooth": scale, "pref": scale, "compress": scale})
    for n in plain:
        assert np.argmax(plain[n](imgs, cond).data) == np.argmax(scaled[n](imgs, cond).data)


def test_unknown_scale_name():
    with pytest.raises(ContractError):
        make_reward_tasks(0, scales={"aesthetic": 2.0})
