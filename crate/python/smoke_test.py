"""Smoke test for the spederlab extension module.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/spederlab-*.whl
"""

import json
import math

import spederlab as sp


def main():
    print("spederlab", sp.__version__)

    mdp = sp.Mdp.random(12, 3, 4, seed=1)
    assert (mdp.num_states, mdp.num_actions, mdp.rank) == (12, 3, 4)
    for row in mdp.kernel():
        assert abs(sum(row) - 1.0) < 1e-9
    again = sp.Mdp.from_json(mdp.to_json())
    assert again.to_json() == mdp.to_json()

    value, policy = mdp.solve()
    assert abs(mdp.policy_value(policy) - value) < 1e-6
    uniform = [[1.0 / 3] * 3 for _ in range(12)]
    assert mdp.policy_value(uniform) <= value + 1e-9

    data = sp.sample_dataset(mdp, 2000, seed=2)
    assert len(data) == 2000
    model = sp.learn(mdp, data, method="gradient", dim=4, steps=500, seed=3)
    assert model.dim == 4
    json.loads(model.to_json())

    runs = sp.run_online(mdp, 10, seed=4)
    assert len(runs) == 10 and runs[-1]["episode"] == 10
    record = sp.run_offline(mdp, data, uniform, seed=5)
    assert math.isfinite(record["value_policy"])

    grid = sp.Mdp.gridworld(3, gamma=0.9)
    offline = sp.sample_dataset(grid, 3000, seed=6)
    expert = sp.sample_trajectories(grid, 4, 15, seed=7)
    features = sp.learn(grid, offline, dim=9, steps=500, seed=8)
    metrics = sp.latent_bc(grid, features, expert, offline, seed=9, decoder_steps=200)
    assert set(metrics) >= {"pretrain_nll", "bc_nll", "return_expert", "return_cloned", "return_bc_baseline"}

    reports = sp.verify("simlemma", seed=1)
    assert reports[0]["violations"] == 0

    try:
        sp.Mdp.random(4, 2, 9, seed=0)
    except ValueError as e:
        print("rejected bad rank:", e)
    else:
        raise AssertionError("rank above the state count was accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
