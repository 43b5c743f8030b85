import math

import pytest

from pvn.config import PROFILES, ConfigError, RunConfig, load_config, load_profile, write_config


def test_paper_profile_constants():
    c = load_profile("paper")
    assert (c.image_width, c.image_height) == (128, 72)
    assert c.hfov == pytest.approx(math.pi / 2)
    assert (c.map_size, c.map_extent) == (64, 100.0)
    assert c.map_size / c.map_extent * 50 == 32  # 50 m environment edge spans 32 map pixels
    assert (c.image_height // 4, c.image_width // 4, c.channels) == (18, 32, 32)
    assert c.crop_k == 12 and c.t_d == 6 and c.kappa == 0.07
    assert (c.lambda_percept, c.lambda_ground, c.lambda_lang) == (1.0, 1.0, 0.25)
    assert (c.lr, c.weight_decay) == (0.001, 1e-6)
    assert (c.beta, c.dagger_iterations, c.dagger_envs_per_iter) == (0.92, 100, 10)
    assert (c.memory_size, c.memory_unit) == (600, "executions")
    assert c.n_obj == 63 and c.success_radius == 5.0


def test_desk_profile_values():
    c = load_profile("desk")
    assert (c.image_width, c.image_height, c.map_size, c.n_train, c.n_test) == (64, 36, 32, 500, 200)
    assert (c.dagger_iterations, c.memory_size, c.memory_unit) == (20, 600, "examples")
    assert c.lingunet_levels == 3 and c.hidden_u == 64 and c.word_dim == 32 and c.grounding_channels == 16


def test_unknown_profile():
    with pytest.raises(ConfigError):
        load_profile("laptop")


def test_file_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("[stage1]\nstage1_epochs = 2\nsigma_cells = 1.5\n\n[data]\nn_test = 30\n")
    c = load_config(p, "desk", ["n_test=40"])
    assert (c.stage1_epochs, c.sigma_cells, c.n_test) == (2, 1.5, 40)


def test_unknown_and_duplicate_keys(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("[a]\nkapa = 0.1\n")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("[a]\nkappa = 0.1\n[b]\nkappa = 0.2\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(None, "desk", ["kappa"])
    with pytest.raises(ConfigError):
        load_config(None, "desk", ["t_d=six"])


def test_validation():
    with pytest.raises(ConfigError):
        RunConfig(kappa=1.0)
    with pytest.raises(ConfigError):
        RunConfig(memory_unit="batches")
    with pytest.raises(ConfigError):
        RunConfig(image_width=62)
    with pytest.raises(ConfigError):
        RunConfig().replace(nope=1)


def test_write_read_round_trip_and_fingerprint(tmp_path):
    c = load_profile("desk").replace(seed=9, sigma_cells=1.25)
    write_config(tmp_path / "c.cfg", c)
    back = load_config(tmp_path / "c.cfg")
    assert back == c
    assert back.fingerprint() == c.fingerprint()
    assert c.fingerprint() != load_profile("desk").fingerprint()
    assert len({p.fingerprint() for p in PROFILES.values()}) == len(PROFILES)
