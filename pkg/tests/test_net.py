import numpy as np
import pytest
from hypothesis import given, strategies as st

from qmdpnet.domains import NO_ACTION, GridEnv, build_ground_truth_pomdp, gen_maze_env, sample_task
from qmdpnet.net import (
    InjectionError,
    NetConfig,
    NetPolicy,
    QMDPNet,
    UnsupportedVariantError,
    init_params,
    inject_ground_truth,
    load_model,
    obs_bits,
    param_shapes,
    params_checksum,
    save_model,
)
from qmdpnet.pomdp import exact_filter_step
from qmdpnet.tensor import Tensor

INJECT = dict(fz_activation="relu", fr_activation="relu")


def _net(kind="grid", n=5, seed=0, **kw):
    return QMDPNet(NetConfig(kind, n, n, **kw), seed=seed)


def _theta(cfg, rng):
    H, W, Hd = cfg.height, cfg.width, cfg.headings
    th = np.zeros((H, W, 2 + Hd))
    th[..., 0] = rng.random((H, W)) < 0.2
    th[rng.integers(H), rng.integers(W), 1] = 1.0
    b = rng.random((H, W, Hd))
    th[..., 2:] = b / b.sum()
    return th


@pytest.fixture(scope="module")
def injected(grid10):
    env, task = grid10
    model = build_ground_truth_pomdp(env, "det", task.goal)
    cfg = NetConfig.for_env(env, K=30, **INJECT)
    net = QMDPNet(cfg, inject_ground_truth(cfg, model, env, task.goal))
    return env, task, model, net


# ---------------------------------------------------------------- structure


@pytest.mark.parametrize("kind", ["grid", "maze", "hallway2", "grasp"])
def test_shapes(kind):
    net = _net(kind, 7, K=4)
    cfg = net.config
    th = Tensor(_theta(cfg, np.random.default_rng(0)))
    A, Hd = cfg.n_actions, cfg.headings
    assert net.observation_map(th).shape == (1, 7, 7, cfg.n_obs * Hd)
    q = net.planner(th)
    assert q.shape == (1, 7, 7, Hd * A)
    b = net.init_belief(th)
    b2 = net.filter_step(b, [0], obs_bits([3], cfg.n_obs_bits), theta=th)
    assert b2.shape == (1, 7, 7, Hd)
    assert net.action_head(q, b2).shape == (1, A)
    assert net.n_parameters() == sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def test_alphabet_sizes():
    assert NetConfig("grid", 5, 5).n_obs == 17
    assert NetConfig("grasp", 14, 14).n_obs == 16
    assert NetConfig("grasp", 14, 14).fz_size == 5


@given(st.integers(0, 2**31 - 1), st.sampled_from(["grid", "maze"]))
def test_kernels_are_distributions(seed, kind):
    rng = np.random.default_rng(seed)
    net = _net(kind, 5)
    for p in net.params.values():
        p.data = rng.standard_normal(p.shape) * 3
    cfg = net.config
    k, Hd, A = cfg.ft_kernel, cfg.headings, cfg.n_actions
    ft = net.filter_kernel().data.reshape(k * k, Hd, A, Hd)
    np.testing.assert_allclose(ft.sum(axis=(0, 3)), 1.0, atol=1e-12)
    tp = net.planner_kernel().data
    np.testing.assert_allclose(tp.sum(axis=(0, 1, 2)), 1.0, atol=1e-12)
    assert (ft >= 0).all() and (tp >= 0).all()


@given(st.integers(0, 2**31 - 1))
def test_filter_keeps_belief_normalized(seed):
    rng = np.random.default_rng(seed)
    net = _net("maze", 5, seed=seed % 100)
    th = Tensor(_theta(net.config, rng))
    b = net.init_belief(th)
    for t in range(4):
        b = net.filter_step(b, [int(rng.integers(4))], obs_bits([int(rng.integers(16))], 4), theta=th)
        assert abs(b.data.sum() - 1.0) < 1e-9
        assert (b.data >= 0).all()


def test_prior_action_skips_prediction():
    net = _net("grid", 5)
    th = Tensor(_theta(net.config, np.random.default_rng(1)))
    b = net.init_belief(th)
    bits = obs_bits([5], 4)
    z = net.observation_map(th).data[0].reshape(5, 5, 17, 1)
    wo = net.observation_weights(bits).data[0]
    expect = b.data[0] * np.tensordot(z, wo, axes=([2], [0]))
    out = net.filter_step(b, [NO_ACTION], bits, theta=th).data[0]
    np.testing.assert_allclose(out, expect / expect.sum(), rtol=1e-12)
    with pytest.raises(ValueError):
        net.filter_step(Tensor(np.concatenate([b.data, b.data])), [NO_ACTION, 0],
                        obs_bits([5, 5], 4), theta=th)
    with pytest.raises(IndexError):
        net.filter_step(b, [7], bits, theta=th)


def test_bad_initial_belief():
    net = _net("grid", 5)
    th = _theta(net.config, np.random.default_rng(1))
    th[..., 2] *= 2
    with pytest.raises(ValueError):
        net.init_belief(th)


def test_K1_planner_is_reward():
    net = _net("grid", 5, K=7)
    th = Tensor(_theta(net.config, np.random.default_rng(2)))
    np.testing.assert_array_equal(net.planner(th, K=1).data, net.reward_map(th).data)


def test_planner_recursion_oracle():
    net = _net("grid", 5, K=3)
    th = Tensor(_theta(net.config, np.random.default_rng(3)))
    R = net.reward_map(th).data[0]
    kern = net.planner_kernel().data[:, :, 0, :]  # 3 x 3 x A
    q = R
    for _ in range(2):
        v = np.pad(q.max(axis=2), 1)
        q = R + np.stack([sum(kern[i, j, a] * v[i:i + 5, j:j + 5] for i in range(3) for j in range(3))
                          for a in range(5)], axis=2)
    np.testing.assert_allclose(net.planner(th).data[0], q, atol=1e-12)


def test_expand_K_shares_parameters():
    net = _net("grid", 5, K=4)
    big = net.expand_K(20)
    assert big.config.K == 20
    assert params_checksum(big.params) == params_checksum(net.params)
    assert all(big.params[k] is net.params[k] for k in net.params)


def test_untied_variant_rules():
    net = _net("grid", 5, K=3, variant="untied")
    assert {f"fTp_{k}" for k in range(3)} <= set(net.params)
    th = Tensor(_theta(net.config, np.random.default_rng(4)))
    net.planner(th)
    with pytest.raises(UnsupportedVariantError):
        net.planner(th, K=5)
    with pytest.raises(UnsupportedVariantError):
        net.expand_K(6)


def test_config_validation():
    for bad in (dict(kind="lake"), dict(K=0), dict(variant="shared"), dict(ft_kernel=4),
                dict(fz_activation="gelu")):
        with pytest.raises(ValueError):
            NetConfig(**{"kind": "grid", "height": 5, "width": 5, **bad})
    cfg = NetConfig("maze", 9, 9, K=12, variant="untied")
    assert NetConfig.from_dict(cfg.to_dict()) == cfg


def test_init_is_seeded():
    cfg = NetConfig("grid", 5, 5)
    assert params_checksum(init_params(cfg, 3)) == params_checksum(init_params(cfg, 3))
    assert params_checksum(init_params(cfg, 3)) != params_checksum(init_params(cfg, 4))


def test_save_load_round_trip(tmp_path):
    net = _net("maze", 7, K=5, variant="untied", seed=8)
    save_model(net, tmp_path / "m", {"note": "x"})
    back, meta = load_model(tmp_path / "m")
    assert meta["note"] == "x"
    assert back.config == net.config
    for k, p in net.params.items():
        np.testing.assert_array_equal(back.params[k].data, p.data.astype(np.float32))
    with pytest.raises(ValueError):
        load_model(tmp_path / "nothing")


# ---------------------------------------------------------------- ground-truth injection


def test_injected_observation_model(injected):
    env, task, model, net = injected
    z = net.observation_map(Tensor(task.theta)).data[0].reshape(env.height, env.width, 17)
    for s in np.flatnonzero(env.free_states()):
        r, c = divmod(s, env.width)
        np.testing.assert_allclose(z[r, c, :16], model.Z[0, s], atol=1e-12)
    for o in range(16):
        w = net.observation_weights(obs_bits([o], 4)).data[0]
        assert w[o] > 1 - 1e-12


def test_injected_rewards(injected):
    env, task, model, net = injected
    r = net.reward_map(Tensor(task.theta)).data[0].reshape(-1, 5)
    goal = task.goal[0] * env.width + task.goal[1]
    for s in np.flatnonzero(env.free_states()):
        if s != goal:
            np.testing.assert_allclose(r[s], model.R[s], atol=1e-9)


def test_injected_filter_step_on_delta_beliefs(injected):
    env, task, model, net = injected
    goal = task.goal[0] * env.width + task.goal[1]
    target, bumps = model.meta["target"], model.meta["bumps"]
    theta = Tensor(task.theta)
    z = net.observation_map(theta)
    checked = 0
    for s in np.flatnonzero(env.free_states()):
        for a in range(5):
            if s == goal or bumps[s, a] or target[s, a] == goal:
                continue
            b = np.zeros(model.nS)
            b[s] = 1.0
            o = int(model.Z[a, target[s, a]].argmax())
            exact = exact_filter_step(model, b, a, o)
            out = net.filter_step(Tensor(b.reshape(1, env.height, env.width, 1)), [a], obs_bits([o], 4), z=z)
            np.testing.assert_allclose(out.data.reshape(-1), exact, atol=1e-12)
            checked += 1
    assert checked > 100


def test_injected_policy_outputs_distribution(injected):
    env, task, model, net = injected
    policy = NetPolicy(net)
    policy.reset(sample_task(env, 0, belief_size=1, goal=task.goal))
    assert policy.probabilities().sum() == pytest.approx(1.0)


def test_injection_preconditions(grid10):
    env, task = grid10
    model = build_ground_truth_pomdp(env, "det", task.goal)
    with pytest.raises(InjectionError):
        inject_ground_truth(NetConfig.for_env(env), model, env, task.goal)  # linear f_Z
    maze = gen_maze_env(9, seed=0)
    mcfg = NetConfig.for_env(maze, **INJECT)
    with pytest.raises(InjectionError):
        inject_ground_truth(mcfg, build_ground_truth_pomdp(maze, "det", (1, 1)), maze, (1, 1))
    small = GridEnv("grid", np.zeros((6, 6), dtype=np.uint8))
    with pytest.raises(InjectionError):
        inject_ground_truth(NetConfig.for_env(env, **INJECT),
                            build_ground_truth_pomdp(small, "det", (0, 0)), small, (0, 0))
