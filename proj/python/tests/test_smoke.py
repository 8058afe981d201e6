import json

import numpy as np
import pytest

gdt = pytest.importorskip("gdt", reason="extension not installed (pip install --no-build-isolation -e .)")


def test_env_roundtrip_and_oracle():
    env = gdt.Env("point-reach", "sparse")
    assert env.spec["action_dim"] == 2
    obs = env.reset(3)
    assert set(obs) == {"observation", "desired_goal", "achieved_goal"}
    solved = False
    while not env.done:
        obs, reward, terminated, truncated = env.step(env.oracle_action(obs))
        assert reward in (0.0, -1.0)
        solved |= terminated
    assert solved
    with pytest.raises(gdt.ContractError):
        env.step([0.0, 0.0])
    with pytest.raises(gdt.DimensionError):
        env.reset(1)
        env.step([0.0])


def test_reward_boundary():
    assert gdt.compute_reward([0.05, 0.0], [0.0, 0.0], "sparse") == 0.0
    assert gdt.compute_reward([0.06, 0.0], [0.0, 0.0], "sparse") == -1.0
    assert gdt.compute_reward([0.03, 0.04], [0.0, 0.0], "dense") == pytest.approx(-0.05, abs=1e-15)


def test_dataset_record_edit_roundtrip(tmp_path):
    ex = gdt.record("point-push", "dense", "expert", 600, seed=1)
    rd = gdt.record("point-push", "dense", "random", 600, seed=2)
    assert ex.n_transitions >= 600
    assert ex.manifest["expert_fraction"] == 1.0
    ep = ex.episode(0)
    assert ep["states"].shape[1] == ex.manifest["state_dim"] + 2 * ex.manifest["goal_dim"]
    np.testing.assert_array_equal(ep["returns_to_go"], gdt.returns_to_go(list(ep["rewards"])))
    assert ep["terminated"][-1] or ep["truncated"][-1]

    m = gdt.mix(ex, rd, 0.5, 400, seed=3)
    m.validate()
    assert m.manifest["expert_fraction"] >= 0.5
    s = gdt.subset(m, 100, seed=4)
    assert 100 <= s.n_transitions < 100 + 50

    path = tmp_path / "m.gde"
    m.save(path)
    assert gdt.load_dataset(path) == m
    assert gdt.dataset_from_bytes(m.to_bytes()) == m
    assert path.read_bytes() == m.to_bytes()
    with pytest.raises(gdt.FormatError):
        gdt.dataset_from_bytes(m.to_bytes()[:-3])
    with pytest.raises(gdt.IoError):
        gdt.load_dataset(tmp_path / "missing.gde")
    with pytest.raises(gdt.Error):
        gdt.mix(ex, rd, 1.5, 100)


def test_train_evaluate_save(tmp_path):
    ds = gdt.record("point-reach", "sparse", "expert", 1500, seed=5)
    losses = []
    model = gdt.train(ds, updates=40, embed_dim=16, layers=1, seed=2, log_interval=10,
                      on_loss=lambda u, l: losses.append((u, l)))
    assert losses[0][0] == 0 and losses[-1][0] == 39
    assert all(np.isfinite(l) for _, l in losses)
    assert model.config["embed_dim"] == 16
    assert model.parameter_count > 0

    report = model.evaluate(timesteps=100, seeds=[0, 1])
    assert len(report["per_seed"]) == 2
    assert 0.0 <= report["success_rate"] <= 100.0

    path = tmp_path / "m.gdt"
    model.save(path)
    again = gdt.load_model(path)
    assert gdt.evaluate(again, timesteps=100, seeds=[0, 1]) == report
    sidecar = json.loads((tmp_path / "m.gdt.json").read_text())
    assert sidecar["env"] == "point-reach"

    twin = gdt.train(ds, updates=40, embed_dim=16, layers=1, seed=2)
    twin_path = tmp_path / "twin.gdt"
    twin.save(twin_path)
    assert twin_path.read_bytes() == path.read_bytes()


def test_cli_in_process(tmp_path):
    out = tmp_path / "e.gde"
    code, stdout, _ = gdt.cli("gen-data", "--env", "point-reach", "--policy", "expert",
                              "--transitions", "300", "--out", out)
    assert code == 0
    assert json.loads(stdout)["n_transitions"] >= 300
    code, _, err = gdt.cli("inspect", tmp_path / "nope.gde")
    assert code == 1 and err.startswith("error: io:")
    code, _, err = gdt.cli("train", "--bogus")
    assert code == 2 and err.startswith("error: usage:")
