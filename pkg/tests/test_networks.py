import struct

import numpy as np
import pytest

from rl4seg import autograd as ag
from rl4seg.networks import (
    CheckpointError,
    PolicyNet,
    RewardNet,
    ValueNet,
    entropy,
    greedy_action,
    load_checkpoint,
    log_prob,
    policy_forward,
    reward_forward,
    sample_action,
    save_checkpoint,
    value_forward,
)

IMG = np.random.default_rng(0).uniform(0, 1, (16, 16)).astype(np.float32)


def test_policy_output_is_a_distribution():
    d = policy_forward(PolicyNet((4, 8)), IMG)
    assert d.shape == (3, 16, 16)
    np.testing.assert_allclose(d.sum(axis=0), 1.0, atol=1e-5)


def test_batched_forward_layout():
    d = policy_forward(PolicyNet((4, 8)), np.stack([IMG, IMG]))
    assert d.shape == (2, 3, 16, 16)


def test_forward_is_deterministic():
    net = PolicyNet((4, 8))
    assert np.array_equal(policy_forward(net, IMG), policy_forward(net, IMG))


def test_untrained_policy_is_near_uniform():
    d = policy_forward(PolicyNet((8, 16, 32), seed=3), IMG)
    assert entropy(d).mean() >= 0.8 * np.log(3)


def test_default_network_size():
    n = PolicyNet((8, 16, 32)).n_params()
    assert 20_000 <= n <= 60_000


def test_image_size_must_divide_by_pooling():
    with pytest.raises(ValueError):
        PolicyNet((4, 8, 16)).log_probs(np.zeros((10, 10)))


def test_one_hot_sample_equals_greedy():
    mask = np.random.default_rng(1).integers(0, 3, (8, 8))
    d = np.moveaxis(np.eye(3)[mask], -1, 0)
    assert np.array_equal(sample_action(d, 0), mask)
    assert np.array_equal(greedy_action(d), mask)
    np.testing.assert_allclose(log_prob(d, mask), 0.0)
    np.testing.assert_allclose(entropy(d), 0.0)


def test_uniform_sampling_frequencies():
    d = np.full((3, 100, 100), 1 / 3)
    s = sample_action(d, 7)
    freq = np.bincount(s.ravel(), minlength=3) / s.size
    np.testing.assert_allclose(freq, 1 / 3, atol=0.02)
    np.testing.assert_allclose(entropy(d), np.log(3))
    assert np.array_equal(sample_action(d, 7), s)


def test_greedy_tie_break_picks_lowest_class():
    d = np.zeros((3, 1, 2))
    d[:, 0, 0] = [0.4, 0.4, 0.2]
    d[:, 0, 1] = [0.2, 0.4, 0.4]
    assert greedy_action(d).tolist() == [[0, 1]]


def test_log_prob_matches_distribution():
    d = policy_forward(PolicyNet((4, 8)), IMG)
    mask = greedy_action(d)
    lp = log_prob(d, mask)
    assert np.all(lp <= 0)
    np.testing.assert_allclose(np.exp(lp), np.take_along_axis(d, mask[None].astype(int), 0)[0], atol=1e-6)


def test_reward_and_value_outputs_inside_unit_interval():
    r = reward_forward(RewardNet((4, 8)), IMG, np.zeros((16, 16), np.uint8))
    v = value_forward(ValueNet((4, 8)), IMG)
    assert r.shape == v.shape == (16, 16)
    assert np.all((r > 0) & (r < 1)) and np.all((v > 0) & (v < 1))
    with pytest.raises(ValueError):
        reward_forward(RewardNet((4, 8)), IMG, np.zeros((8, 8), np.uint8))


@pytest.mark.parametrize("cls", [PolicyNet, RewardNet, ValueNet])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, cls):
    net = cls((4, 8), seed=5)
    for p in net.parameters():
        p.data += np.random.default_rng(0).standard_normal(p.shape).astype(np.float32) * 0.01
    save_checkpoint(net, tmp_path / "n.ckpt")
    back = load_checkpoint(tmp_path / "n.ckpt", expect=cls((4, 8)))
    assert type(back) is cls
    for k, v in net.state_dict().items():
        assert np.array_equal(v, back.params[k].data)
    x = np.stack([IMG, IMG])
    with ag.no_grad():
        if cls is PolicyNet:
            assert np.array_equal(net.log_probs(x).data, back.log_probs(x).data)


def test_checkpoint_rejects_wrong_architecture(tmp_path):
    save_checkpoint(PolicyNet((4, 8)), tmp_path / "p.ckpt")
    with pytest.raises(CheckpointError, match="architecture"):
        load_checkpoint(tmp_path / "p.ckpt", expect=PolicyNet((4, 8, 16)))


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "p.ckpt"
    save_checkpoint(PolicyNet((4, 8)), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
    path.write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_frozen_clone_is_independent():
    net = PolicyNet((4, 8))
    ref = net.clone(frozen=True)
    before = policy_forward(ref, IMG)
    opt = ag.Adam(net.parameters(), 0.1)
    loss = ag.mean(net.log_probs(IMG))
    loss.backward()
    opt.step()
    assert all(not p.requires_grad for p in ref.parameters())
    assert np.array_equal(policy_forward(ref, IMG), before)
    assert not np.array_equal(policy_forward(net, IMG), before)
