import pytest

from ridiff.config import TASK_EPOCHS, default_config, parse_config, parse_config_text, validate
from ridiff.errors import ConfigError


def test_defaults():
    cfg = default_config()
    assert cfg["ril"]["lambda"] == 0.1
    assert cfg["ril"]["lora_rank"] == 4
    assert cfg["ril"]["ema_momentum"] == 0.99
    assert cfg["diffusion"]["ddim_steps"] == 50
    assert cfg["soup"]["alpha"] == cfg["soup"]["beta"] == 0.333
    assert cfg["eval"]["samples_per_condition"] == 16
    assert cfg["eval"]["quality"] == 80
    assert [t["reward"] for t in cfg.tasks] == ["smooth", "pref", "compress"]


def test_epoch_budgets_are_unequal():
    assert TASK_EPOCHS["compress"] > TASK_EPOCHS["pref"] > TASK_EPOCHS["smooth"]
    assert [t.epochs for t in default_config().task_configs()] == [6, 12, 16]


def test_seeds_follow_run_seed():
    cfg = validate({"seed": 7})
    assert cfg["corpus"]["seed"] == cfg["eval"]["seed"] == cfg["rewards"]["scorer_seed"] == 7
    assert validate({"seed": 7, "corpus": {"seed": 2}})["corpus"]["seed"] == 2
    assert default_config().with_seed(3)["corpus"]["seed"] == 3


def test_toml_tasks():
    cfg = parse_config_text("""
name = "x"
seed = 4
[ril]
method = "baseline"
[[tasks]]
reward = "compress"
epochs = 2
[[tasks]]
method = "rid"
reward = "pref"
lambda = 0.5
""")
    a, b = cfg.task_configs()
    assert (a.method, a.reward, a.epochs, a.lam) == ("baseline", "compress", 2, 0.1)
    assert (b.method, b.reward, b.lam, b.epochs) == ("rid", "pref", 0.5, TASK_EPOCHS["pref"])


def test_empty_task_list_is_allowed():
    assert parse_config_text("tasks = []").tasks == []


def test_joint_task_needs_no_reward():
    (t,) = validate({"tasks": [{"method": "joint"}]}).task_configs()
    assert t.reward_names() == ["smooth", "pref", "compress"]


@pytest.mark.parametrize("raw,key", [
    ({"bogus": 1}, "bogus"),
    ({"ril": {"lamda": 0.1}}, "ril.lamda"),
    ({"ril": {"lambda": -1}}, "ril.lambda"),
    ({"ril": {"lora_rank": "4"}}, "ril.lora_rank"),
    ({"eval": {"quality": 101}}, "eval.quality"),
    ({"diffusion": {"beta_min": 0.3, "beta_max": 0.2}}, "diffusion.beta_min"),
    ({"soup": {"alpha": 0.7, "beta": 0.7}}, "soup.beta"),
    ({"rewards": {"scales": {"hps": 1.0}}}, "rewards.scales.hps"),
    ({"tasks": [{"reward": "smooth", "rate": 1}]}, "tasks[0].rate"),
    ({"tasks": [{"method": "rid"}]}, "tasks[0].reward"),
    ({"tasks": {"reward": "smooth"}}, "tasks"),
    ({"seed": True}, "seed"),
])
def test_errors_carry_key_path(raw, key):
    with pytest.raises(ConfigError) as info:
        validate(raw)
    assert info.value.key == key
    assert key in str(info.value)


def test_malformed_toml():
    with pytest.raises(ConfigError):
        parse_config_text("seed = = 1")


def test_file_round_trip(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('seed = 3\n[eval]\nsamples_per_condition = 2\n')
    cfg = parse_config(p)
    assert cfg.seed == 3 and cfg["eval"]["samples_per_condition"] == 2
    assert cfg.content_hash() == parse_config(p).content_hash()
    assert cfg.content_hash() != cfg.with_seed(4).content_hash()
    with pytest.raises(OSError):
        parse_config(tmp_path / "missing.toml")
