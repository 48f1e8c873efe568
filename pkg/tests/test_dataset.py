import numpy as np
import pytest
from hypothesis import given, strategies as st

from qmdpnet import qntd
from qmdpnet.dataset import (
    DatasetFormatError,
    DomainConfig,
    dataset_checksum,
    datasets_equal,
    generate_expert_data,
    load_dataset,
    save_dataset,
    split_train_val,
)
from qmdpnet.domains import bfs_distances, build_ground_truth_pomdp, gen_grid_env, sample_task
from qmdpnet.dataset import expert_trajectory
from qmdpnet.pomdp import exact_filter_step


@pytest.fixture(scope="module")
def small():
    return generate_expert_data(DomainConfig("grid", 8, "stoch"), 6, 3, seed=4, keep_failures=True)


def test_qntd_scalar_bytes():
    blob = qntd.encode(np.ones((1, 1)), "float32")
    assert blob[:4] == b"QNTD"
    assert blob[-4:] == bytes.fromhex("0000803f")
    assert len(blob) == 4 + 2 + 2 + 2 * 4 + 4


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2**31 - 1))
def test_qntd_round_trip(shape, seed):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal(shape).astype(np.float32)
    np.testing.assert_array_equal(qntd.decode(qntd.encode(f, "float32"), "float32"), f)
    u = rng.integers(0, 256, size=shape).astype(np.uint8)
    np.testing.assert_array_equal(qntd.decode(qntd.encode(u, "uint8"), "uint8"), u)


def test_qntd_errors():
    blob = qntd.encode(np.zeros((2, 3)), "float32")
    for bad in (b"XNTD" + blob[4:], blob[:-1], blob[:4] + b"\x09\x00" + blob[6:]):
        with pytest.raises(qntd.TensorFormatError):
            qntd.decode(bad, "float32")
    with pytest.raises(qntd.TensorFormatError):
        qntd.decode(blob, "float32", (3, 2))


def test_round_trip_bit_exact(tmp_path, small):
    split_train_val(small, 0.2, seed=1)
    save_dataset(small, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert datasets_equal(small, back)
    assert dataset_checksum(small) == dataset_checksum(back)


def test_corrupt_magic_is_rejected(tmp_path, small):
    d = save_dataset(small, tmp_path / "ds")
    f = d / "traj_steps.qntd"
    f.write_bytes(b"ZZZZ" + f.read_bytes()[4:])
    with pytest.raises(DatasetFormatError):
        load_dataset(d)


def test_truncated_and_shape_mismatch(tmp_path, small):
    d = save_dataset(small, tmp_path / "a")
    f = d / "traj_theta.qntd"
    f.write_bytes(f.read_bytes()[:-3])
    with pytest.raises(DatasetFormatError):
        load_dataset(d)
    d = save_dataset(small, tmp_path / "b")
    m = (d / "manifest.json").read_text().replace('"format_version": 1', '"format_version": 2')
    (d / "manifest.json").write_text(m)
    with pytest.raises(DatasetFormatError):
        load_dataset(d)
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "missing")


def test_generation_is_deterministic():
    cfg = DomainConfig("grid", 8, "det")
    a = generate_expert_data(cfg, 4, 2, seed=9)
    b = generate_expert_data(cfg, 4, 2, seed=9)
    assert dataset_checksum(a) == dataset_checksum(b)
    assert dataset_checksum(a) != dataset_checksum(generate_expert_data(cfg, 4, 2, seed=10))


def test_training_set_has_only_successes():
    ds = generate_expert_data(DomainConfig("grid", 8, "stoch"), 10, 3, seed=2)
    assert all(t.success for t in ds.trajectories)
    assert ds.manifest["counts"]["trajectories"] == len(ds)


def test_trajectory_invariants(small):
    for t in small.trajectories:
        assert t.length >= 1
        assert t.prev_actions[0] == 4  # stay
        np.testing.assert_array_equal(t.prev_actions[1:], t.actions[:-1])
        assert 0 <= t.env_index < len(small.envs)
        assert abs(t.theta[:, :, 2:].sum() - 1.0) < 1e-6


def test_observations_replay_through_filter(small):
    for t in small.trajectories:
        env = small.envs[t.env_index]
        model = build_ground_truth_pomdp(env, "stoch", t.goal)
        b = t.task().belief()
        for a, o, _ in t.steps:
            b = exact_filter_step(model, b, a, o)  # raises on an impossible observation
            assert abs(b.sum() - 1.0) < 1e-9


def test_delta_belief_expert_is_shortest_path():
    for i in range(100):
        env = gen_grid_env(8, seed=100 + i)
        task = sample_task(env, i, belief_size=1)
        t = expert_trajectory(env, 0, "det", task, seed=i)
        model = build_ground_truth_pomdp(env, "det", task.goal)
        goal = task.goal[0] * env.width + task.goal[1]
        assert t.success
        assert t.length == bfs_distances(model, task.start)[goal]


def test_split_partition():
    ds = generate_expert_data(DomainConfig("grid", 8, "det"), 50, 2, seed=3)
    ds.trajectories = ds.trajectories[:100]
    tr, va = split_train_val(ds, 0.1, seed=5)
    assert (len(tr), len(va)) == (90, 10)
    assert not set(ds.train_idx) & set(ds.val_idx)
    assert sorted([*ds.train_idx, *ds.val_idx]) == list(range(100))
    first = ds.val_idx.copy()
    split_train_val(ds, 0.1, seed=5)
    np.testing.assert_array_equal(first, ds.val_idx)


def test_split_errors(small):
    with pytest.raises(ValueError):
        split_train_val(small, 0.0)
    with pytest.raises(ValueError):
        split_train_val(small.subset([0]), 0.5)


def test_fixed_env_stores_one_environment():
    ds = generate_expert_data(DomainConfig("grid", 8, "det", fixed_env=True), 5, 2, seed=1)
    assert len(ds.envs) == 1
    assert {t.env_index for t in ds.trajectories} == {0}


def test_config_validation():
    with pytest.raises(ValueError):
        DomainConfig("lake")
    with pytest.raises(ValueError):
        DomainConfig("grid", variant="noisy")
