"""Single-step PPO for segmentation, plus the supervised training phases.

Every image is a trajectory of length one, so the value of a state is the
expected immediate reward and the advantage is simply reward minus value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .networks import PolicyNet, RewardNet, ValueNet, sample_action
from .seeding import rng_for

RATIO_MAX = 20.0


class NonFiniteLoss(FloatingPointError):
    def __init__(self, what, batch_index):
        super().__init__(f"non-finite {what} in batch {batch_index}")
        self.what = what
        self.batch_index = batch_index


@dataclass
class PpoConfig:
    epsilon: float = 0.2
    alpha: float = 0.01
    beta: float = 0.05
    ppo_epochs: int = 4
    policy_lr: float = 3e-4
    value_lr: float = 1e-3
    batch_size: int = 16
    samples_per_image: int = 1

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must be in (0, 1)")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")


@dataclass
class Rollout:
    image: np.ndarray
    action: np.ndarray
    logp_old: np.ndarray
    reward_map: np.ndarray
    value_map: np.ndarray
    is_gold: bool


# --- arithmetic -------------------------------------------------------------

def shaped_reward(r_psi_map, logp_cur, logp_ref, beta):
    """Reward-network output minus a penalty for drifting from the reference policy."""
    return np.asarray(r_psi_map) - beta * (np.asarray(logp_cur) - np.asarray(logp_ref))


def advantage(reward_map, value_map):
    return np.asarray(reward_map) - np.asarray(value_map)


def clipped_surrogate(logp_new, logp_old, adv, epsilon=0.2):
    """Negated mean clipped-surrogate objective; returns ``(loss, ratio)``.

    Gradient flows through ``logp_new`` only; ``logp_old`` and ``adv`` are
    treated as constants even when passed as tensors.
    """
    logp_new = ag.as_tensor(logp_new)
    lo = np.asarray(getattr(logp_old, "data", logp_old), dtype=logp_new.data.dtype)
    a = np.asarray(getattr(adv, "data", adv), dtype=logp_new.data.dtype)
    ratio = ag.exp(ag.clip(logp_new - lo, -np.inf, math.log(RATIO_MAX)))
    objective = ag.minimum(ratio * a, ag.clip(ratio, 1 - epsilon, 1 + epsilon) * a)
    return -ag.mean(objective), ratio


def policy_entropy(log_probs: Tensor) -> Tensor:
    """Per-pixel entropy of a (..., K) log-probability tensor."""
    return -ag.sum(ag.exp(log_probs) * log_probs, axis=-1)


# --- PPO ------------------------------------------------------------------------

class PpoTrainer:
    """Holds the networks and optimiser state across PPO updates."""

    def __init__(self, policy: PolicyNet, value_net: ValueNet, reward_net: RewardNet,
                 ref_policy: PolicyNet, cfg: PpoConfig | None = None, seed=0):
        self.policy = policy
        self.value_net = value_net
        self.reward_net = reward_net.clone(frozen=True)
        self.ref_policy = ref_policy.clone(frozen=True)
        self.cfg = cfg or PpoConfig()
        self.seed = seed
        self.policy_opt = ag.Adam(policy.parameters(), self.cfg.policy_lr)
        self.value_opt = ag.Adam(value_net.parameters(), self.cfg.value_lr)
        self.batches = 0

    def set_reward_net(self, reward_net: RewardNet):
        self.reward_net = reward_net.clone(frozen=True)

    def rollout(self, images, gold: dict, old: PolicyNet, tag=0):
        """Actions, old log-probabilities, rewards and values for a batch."""
        cfg = self.cfg
        with ag.no_grad():
            lp_old = old.log_probs(images).data
            lp_ref = self.ref_policy.log_probs(images).data
            values = self.value_net.value(images).data
        actions, is_gold = [], []
        for j in range(len(images)):
            if j in gold:
                actions.append(np.asarray(gold[j], dtype=np.uint8))
                is_gold.append(True)
            else:
                rng = rng_for(self.seed, "ppo-sample", tag, self.batches, j)
                actions.append(sample_action(np.moveaxis(np.exp(lp_old[j]), -1, 0), rng))
                is_gold.append(False)
        actions = np.asarray(actions)
        is_gold = np.asarray(is_gold)
        take = lambda lp: np.take_along_axis(lp, actions[..., None].astype(np.intp), -1)[..., 0]  # noqa: E731
        logp_old, logp_ref = take(lp_old), take(lp_ref)
        with ag.no_grad():
            r_psi = self.reward_net.reward(images, actions).data
        rewards = shaped_reward(r_psi, logp_old, logp_ref, cfg.beta)
        rewards[is_gold] = 1.0
        return actions, logp_old, rewards.astype(np.float32), values, is_gold

    def update(self, images, gold: dict | None = None, tag=0):
        """One PPO update on a batch; ``gold`` maps batch positions to gold masks."""
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float32)
        gold = gold or {}
        old = self.policy.clone(frozen=True)
        stats = {"clip_loss": 0.0, "entropy": 0.0, "ratio": 0.0, "clip_frac": 0.0, "value_bce": 0.0}
        n_steps = 0
        for s in range(cfg.samples_per_image):
            actions, logp_old, rewards, values, is_gold = self.rollout(images, gold, old, tag=(tag, s))
            adv = advantage(rewards, values)
            value_target = np.clip(rewards, 0.0, 1.0)
            for _ in range(cfg.ppo_epochs):
                lp = self.policy.log_probs(images)
                logp_new = ag.gather(lp, actions, axis=-1)
                clip_loss, ratio = clipped_surrogate(logp_new, logp_old, adv, cfg.epsilon)
                ent = ag.mean(policy_entropy(lp))
                loss = clip_loss - cfg.alpha * ent
                if not np.isfinite(loss.item()):
                    raise NonFiniteLoss("policy loss", self.batches)
                self.policy_opt.zero_grad()
                loss.backward()
                self.policy_opt.step()

                v_loss = ag.bce(self.value_net.value(images), value_target)
                if not np.isfinite(v_loss.item()):
                    raise NonFiniteLoss("value loss", self.batches)
                self.value_opt.zero_grad()
                v_loss.backward()
                self.value_opt.step()

                r = ratio.data
                stats["clip_loss"] += clip_loss.item()
                stats["entropy"] += ent.item()
                stats["ratio"] += float(r.mean())
                stats["clip_frac"] += float(np.mean(np.abs(r - 1) > cfg.epsilon))
                stats["value_bce"] += v_loss.item()
                n_steps += 1
        self.batches += 1
        return {k: v / n_steps for k, v in stats.items()}


def ppo_update(policy, value_net, reward_net, ref_policy, images, gold=None, cfg=None, seed=0):
    """Stand-alone single PPO update (fresh optimiser state)."""
    return PpoTrainer(policy, value_net, reward_net, ref_policy, cfg, seed).update(images, gold)


# --- supervised phases ----------------------------------------------------------------

def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_reward_net(reward_net: RewardNet, samples, epochs=5, lr=1e-3, batch_size=16, seed=0,
                     optimizer=None):
    """Fit the reward network to agreement maps with BCE; returns per-epoch mean losses."""
    if len(samples) == 0:
        raise ValueError("reward dataset is empty")
    images = np.asarray([s.image for s in samples], dtype=np.float32)
    masks = np.asarray([s.mask for s in samples])
    targets = np.asarray([s.target for s in samples], dtype=np.float32)
    opt = optimizer or ag.Adam(reward_net.parameters(), lr)
    curve = []
    for ep in range(epochs):
        losses = []
        for idx in _batches(len(samples), batch_size, rng_for(seed, "reward-train", ep)):
            loss = ag.bce(reward_net.reward(images[idx], masks[idx]), targets[idx])
            if not np.isfinite(loss.item()):
                raise NonFiniteLoss("reward loss", len(losses))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
    return curve


def pretrain_policy(policy: PolicyNet, scenes, epochs=30, lr=2e-3, batch_size=16, seed=0):
    """Supervised cross-entropy training on labelled source scenes; returns per-epoch losses."""
    images = np.asarray([s.image for s in scenes], dtype=np.float32)
    masks = np.asarray([s.mask for s in scenes])
    opt = ag.Adam(policy.parameters(), lr)
    curve = []
    for ep in range(epochs):
        losses = []
        for idx in _batches(len(scenes), batch_size, rng_for(seed, "pretrain", ep)):
            loss = ag.cross_entropy(policy.logits(images[idx][..., None]), masks[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
    return curve
