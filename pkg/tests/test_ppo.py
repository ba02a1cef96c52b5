import numpy as np
import pytest

from rl4seg import autograd as ag
from rl4seg.networks import PolicyNet, RewardNet, ValueNet
from rl4seg.ppo import (
    NonFiniteLoss,
    PpoConfig,
    PpoTrainer,
    advantage,
    clipped_surrogate,
    policy_entropy,
    pretrain_policy,
    shaped_reward,
    train_reward_net,
)
from rl4seg.reward_dataset import RewardSample


def _objective(rho, adv, eps):
    loss, _ = clipped_surrogate(np.full((2, 2), np.log(rho)), np.zeros((2, 2)), np.full((2, 2), adv), eps)
    return -loss.item()


@pytest.mark.parametrize("rho, adv, eps, expected", [
    (2.0, 1.0, 0.2, 1.2),
    (0.5, -1.0, 0.2, -0.8),
    (1.0, 0.7, 0.2, 0.7),
])
def test_clipped_surrogate_hand_values(rho, adv, eps, expected):
    assert _objective(rho, adv, eps) == pytest.approx(expected, abs=1e-6)


def test_unit_ratio_loss_is_negated_mean_advantage():
    adv = np.random.default_rng(0).standard_normal((3, 4))
    loss, _ = clipped_surrogate(np.zeros((3, 4)), np.zeros((3, 4)), adv)
    assert loss.item() == pytest.approx(-adv.mean(), abs=1e-6)


def test_surrogate_equals_unclipped_inside_band():
    rng = np.random.default_rng(1)
    logr = rng.uniform(np.log(0.81), np.log(1.19), (5, 6))
    adv = rng.standard_normal((5, 6))
    loss, _ = clipped_surrogate(logr, np.zeros_like(logr), adv, 0.2)
    assert loss.item() == pytest.approx(-(np.exp(logr) * adv).mean(), rel=1e-5)


def test_surrogate_gradient_only_reaches_new_log_probs():
    new = ag.Tensor(np.zeros((2, 2)), requires_grad=True)
    old = ag.Tensor(np.zeros((2, 2)), requires_grad=True)
    loss, _ = clipped_surrogate(new, old, np.ones((2, 2)))
    loss.backward()
    assert new.grad is not None and old.grad is None


def test_ratio_is_capped():
    _, ratio = clipped_surrogate(np.full((1,), 50.0), np.zeros(1), np.ones(1))
    assert ratio.data.max() == pytest.approx(20.0, rel=1e-5)


def test_shaped_reward_arithmetic():
    r = shaped_reward(np.array([0.8]), np.array([-0.1]), np.array([-0.5]), 0.05)
    assert r[0] == pytest.approx(0.78, abs=1e-6)
    same = np.array([[0.3, 0.9]])
    np.testing.assert_allclose(shaped_reward(same, -np.ones((1, 2)), -np.ones((1, 2)), 0.05), same)
    np.testing.assert_allclose(shaped_reward(same, np.zeros((1, 2)), -np.ones((1, 2)), 0.0), same)


def test_advantage():
    assert advantage(np.array([1.0]), np.array([0.4]))[0] == pytest.approx(0.6)
    rng = np.random.default_rng(2)
    r, v = rng.random(20), rng.random(20)
    assert np.array_equal(np.sign(advantage(r, v)), np.sign(r - v))


def test_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(epsilon=1.5)
    with pytest.raises(ValueError):
        PpoConfig(beta=-1)


# --- updates on a toy batch -----------------------------------------------------------

def _toy(seed=0, n=4):
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, (n, 8, 8)).astype(np.float32)
    gold = {j: rng.integers(0, 3, (8, 8)).astype(np.uint8) for j in range(n)}
    nets = (PolicyNet((2, 4), seed=seed), ValueNet((2, 4), seed=seed + 1), RewardNet((2, 4), seed=seed + 2))
    return images, gold, nets


def _mean_gold_logp(policy, images, gold):
    with ag.no_grad():
        lp = policy.log_probs(images).data
    return float(np.mean([np.take_along_axis(lp[j], gold[j][..., None].astype(int), -1) for j in gold]))


def test_gold_substitution_raises_gold_log_probability():
    images, gold, (policy, value, reward) = _toy()
    before = _mean_gold_logp(policy, images, gold)
    trainer = PpoTrainer(policy, value, reward, policy.clone(frozen=True), PpoConfig(ppo_epochs=1), seed=0)
    trainer.update(images, gold)
    assert _mean_gold_logp(policy, images, gold) > before


def test_gold_rollout_has_all_ones_reward():
    images, gold, (policy, value, reward) = _toy()
    trainer = PpoTrainer(policy, value, reward, policy.clone(frozen=True))
    _, _, rewards, values, is_gold = trainer.rollout(images, {0: gold[0]}, policy.clone(frozen=True))
    assert is_gold.tolist() == [True, False, False, False]
    assert np.all(rewards[0] == 1.0)
    assert np.all(rewards[0] - values[0] > 0)


def test_large_entropy_bonus_raises_entropy():
    images, _, (policy, value, reward) = _toy(seed=3)
    ref = policy.clone(frozen=True)

    def mean_entropy():
        with ag.no_grad():
            return float(policy_entropy(policy.log_probs(images)).data.mean())

    before = mean_entropy()
    trainer = PpoTrainer(policy, value, reward, ref, PpoConfig(alpha=10.0, beta=0.0), seed=0)
    # a value net that already predicts the reward exactly leaves zero advantage
    trainer.rollout = _zero_advantage_rollout(trainer)
    trainer.update(images)
    assert mean_entropy() > before


def _zero_advantage_rollout(trainer):
    original = trainer.rollout

    def rollout(images, gold, old, tag=0):
        actions, logp_old, rewards, values, is_gold = original(images, gold, old, tag)
        return actions, logp_old, values.copy(), values, is_gold

    return rollout


def test_value_and_reward_nets_untouched_by_policy_loss():
    images, gold, (policy, value, reward) = _toy()
    trainer = PpoTrainer(policy, value, reward, policy.clone(frozen=True), PpoConfig(ppo_epochs=1))
    frozen_before = trainer.reward_net.state_dict()
    trainer.update(images, gold)
    for k, v in trainer.reward_net.state_dict().items():
        np.testing.assert_array_equal(v, frozen_before[k])


def test_update_is_deterministic():
    stats = []
    for _ in range(2):
        images, gold, (policy, value, reward) = _toy(seed=5)
        trainer = PpoTrainer(policy, value, reward, policy.clone(frozen=True), seed=9)
        stats.append([trainer.update(images, {0: gold[0]}, tag=i) for i in range(2)])
    assert stats[0] == stats[1]


def test_update_reports_stats():
    images, gold, (policy, value, reward) = _toy()
    s = PpoTrainer(policy, value, reward, policy.clone(frozen=True)).update(images)
    assert set(s) == {"clip_loss", "entropy", "ratio", "clip_frac", "value_bce"}
    assert all(np.isfinite(v) for v in s.values())


def test_non_finite_loss_aborts_with_batch_index():
    images, gold, (policy, value, reward) = _toy()
    policy.params["head.b"].data[:] = np.nan
    trainer = PpoTrainer(policy, value, reward, policy.clone(frozen=True))
    with pytest.raises(NonFiniteLoss) as err:
        trainer.update(images)
    assert err.value.batch_index == 0


# --- supervised phases ---------------------------------------------------------------

def test_reward_net_fits_all_ones_targets():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (8, 8)).astype(np.float32)
    mask = rng.integers(0, 3, (8, 8)).astype(np.uint8)
    samples = [RewardSample(img, mask, mask, "gold_valid")] * 8
    net = RewardNet((2, 4), seed=0)
    curve = train_reward_net(net, samples, epochs=40, lr=1e-2, batch_size=8)
    with ag.no_grad():
        out = net.reward(img[None], mask[None]).data
    assert out.mean() >= 0.95
    assert curve[-1] < curve[0]


def test_reward_training_rejects_empty_dataset():
    with pytest.raises(ValueError):
        train_reward_net(RewardNet((2, 4)), [])


def test_pretraining_reduces_loss():
    from rl4seg import synth
    scenes = synth.generate_dataset(16, synth.SOURCE, seed=0, split="train", shape=synth.ShapeConfig(size=32))
    curve = pretrain_policy(PolicyNet((4, 8), seed=0), scenes, epochs=4, lr=5e-3, batch_size=8)
    assert curve[-1] < curve[0]
