"""Policy, reward and value networks built on a small encoder-decoder."""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor

K = 3  # BG, LV, MYO
CHECKPOINT_MAGIC = b"RL4S"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Architecture:
    kind: str  # policy | reward | value
    in_channels: int
    out_channels: int
    widths: list = field(default_factory=lambda: [8, 16])
    head_gain: float = 0.1


class UNet:
    """Encoder-decoder with one skip connection per level.

    Each encoder level is two 3x3 conv+relu followed by 2x2 max-pool; the
    bottleneck is two 3x3 conv+relu; each decoder level upsamples, concatenates
    the skip and applies one 3x3 conv+relu. A 1x1 conv produces raw logits.
    """

    def __init__(self, arch: Architecture, rng: np.random.Generator | None = None):
        self.arch = arch
        self.params: dict[str, Tensor] = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        w = list(arch.widths)
        cin = arch.in_channels
        for i, c in enumerate(w[:-1]):
            self._conv(f"enc{i}a", cin, c, 3, rng)
            self._conv(f"enc{i}b", c, c, 3, rng)
            cin = c
        self._conv("mida", cin, w[-1], 3, rng)
        self._conv("midb", w[-1], w[-1], 3, rng)
        cin = w[-1]
        for i in reversed(range(len(w) - 1)):
            self._conv(f"dec{i}", cin + w[i], w[i], 3, rng)
            cin = w[i]
        self._conv("head", cin, arch.out_channels, 1, rng, gain=arch.head_gain)

    def _conv(self, name, cin, cout, k, rng, gain=1.0):
        bound = gain * np.sqrt(6.0 / (cin * k * k))
        self.params[name + ".w"] = Tensor(rng.uniform(-bound, bound, (k, k, cin, cout)), requires_grad=True)
        self.params[name + ".b"] = Tensor(np.zeros(cout), requires_grad=True)

    def _apply(self, name, x):
        w = self.params[name + ".w"]
        return ag.conv2d(x, w, self.params[name + ".b"], padding=w.shape[0] // 2)

    def logits(self, x: Tensor) -> Tensor:
        """x: (N, H, W, C_in) -> (N, H, W, C_out) logits."""
        x = ag.as_tensor(x)
        if x.ndim != 4 or x.shape[-1] != self.arch.in_channels:
            raise ValueError(f"{self.arch.kind} net expects (N, H, W, {self.arch.in_channels}), got {x.shape}")
        levels = len(self.arch.widths) - 1
        if x.shape[1] % (2 ** levels) or x.shape[2] % (2 ** levels):
            raise ValueError(f"image size {x.shape[1:3]} must be divisible by {2 ** levels}")
        skips = []
        for i in range(levels):
            x = ag.relu(self._apply(f"enc{i}a", x))
            x = ag.relu(self._apply(f"enc{i}b", x))
            skips.append(x)
            x = ag.maxpool2(x)
        x = ag.relu(self._apply("mida", x))
        x = ag.relu(self._apply("midb", x))
        for i in reversed(range(levels)):
            x = ag.upsample2(x)
            x = ag.relu(self._apply(f"dec{i}", ag.concat([x, skips[i]], axis=-1)))
        return self._apply("head", x)

    def parameters(self):
        return list(self.params.values())

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        for k, v in state.items():
            if k not in self.params or self.params[k].shape != v.shape:
                raise CheckpointError(f"parameter {k} with shape {np.shape(v)} does not fit the architecture")
            self.params[k].data[...] = v
        missing = set(self.params) - set(state)
        if missing:
            raise CheckpointError(f"checkpoint is missing parameters {sorted(missing)}")

    def clone(self, frozen=False):
        other = copy.copy(self)
        other.params = {k: Tensor(v.data.copy(), requires_grad=not frozen) for k, v in self.params.items()}
        return other

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self


def _batch_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=ag.default_dtype())
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise ValueError(f"expected an H x W image or N x H x W batch, got shape {img.shape}")
    return img[..., None]


def encode_mask(mask) -> np.ndarray:
    """Class-index mask rendered as a single channel, index / K."""
    return np.asarray(mask, dtype=ag.default_dtype()) / K


class PolicyNet(UNet):
    def __init__(self, widths=(8, 16), head_gain=0.1, seed=0):
        super().__init__(Architecture("policy", 1, K, list(widths), head_gain), np.random.default_rng(seed))

    def log_probs(self, images) -> Tensor:
        """Per-pixel class log-probabilities, (N, H, W, K)."""
        return ag.log_softmax(self.logits(_batch_image(images)), axis=-1)

    def probs(self, images) -> Tensor:
        return ag.softmax(self.logits(_batch_image(images)), axis=-1)


class RewardNet(UNet):
    def __init__(self, widths=(8, 16), head_gain=0.1, seed=0):
        super().__init__(Architecture("reward", 2, 1, list(widths), head_gain), np.random.default_rng(seed))

    def reward_logits(self, images, masks) -> Tensor:
        x = np.concatenate([_batch_image(images), encode_mask(masks).reshape(_batch_image(images).shape)], axis=-1)
        return ag.reshape(self.logits(x), x.shape[:3])

    def reward(self, images, masks) -> Tensor:
        return ag.sigmoid(self.reward_logits(images, masks))


class ValueNet(UNet):
    def __init__(self, widths=(8, 16), head_gain=0.1, seed=0):
        super().__init__(Architecture("value", 1, 1, list(widths), head_gain), np.random.default_rng(seed))

    def value(self, images) -> Tensor:
        x = _batch_image(images)
        return ag.sigmoid(ag.reshape(self.logits(x), x.shape[:3]))


_KINDS = {"policy": PolicyNet, "reward": RewardNet, "value": ValueNet}


def _check_shapes(images, masks):
    if np.shape(images) != np.shape(masks):
        raise ValueError(f"image {np.shape(images)} and mask {np.shape(masks)} shapes differ")


# --- public per-image API (K x H x W layout) ----------------------------------

def policy_forward(policy: PolicyNet, image) -> np.ndarray:
    """Per-pixel categorical distribution, K x H x W."""
    with ag.no_grad():
        p = policy.probs(image).data
    return np.moveaxis(p[0], -1, 0) if np.ndim(image) == 2 else np.moveaxis(p, -1, 1)


def reward_forward(reward_net: RewardNet, image, mask) -> np.ndarray:
    _check_shapes(image, mask)
    with ag.no_grad():
        r = reward_net.reward(image, mask).data
    return r[0] if np.ndim(image) == 2 else r


def value_forward(value_net: ValueNet, image) -> np.ndarray:
    with ag.no_grad():
        v = value_net.value(image).data
    return v[0] if np.ndim(image) == 2 else v


def sample_action(dist, seed) -> np.ndarray:
    """Draw one class per pixel from a K x H x W (or N x K x H x W) distribution."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = np.asarray(dist, dtype=np.float64)
    cdf = np.cumsum(d, axis=-3)
    u = rng.random(d.shape[:-3] + d.shape[-2:])
    # count of cdf entries strictly below u gives the sampled class
    cls = (cdf < np.expand_dims(u, -3) * cdf[..., -1:, :, :]).sum(axis=-3)
    return np.minimum(cls, d.shape[-3] - 1).astype(np.uint8)


def greedy_action(dist) -> np.ndarray:
    # argmax returns the first maximum, i.e. the lowest class index on ties
    return np.asarray(dist).argmax(axis=-3).astype(np.uint8)


def log_prob(dist, mask) -> np.ndarray:
    d = np.asarray(dist, dtype=np.float64)
    idx = np.expand_dims(np.asarray(mask, dtype=np.intp), -3)
    return np.log(np.maximum(np.take_along_axis(d, idx, axis=-3)[..., 0, :, :], 1e-300))


def entropy(dist) -> np.ndarray:
    d = np.asarray(dist, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(d > 0, d * np.log(d), 0.0)
    return np.maximum(-terms.sum(axis=-3), 0.0)


# --- checkpoints ----------------------------------------------------------------

def save_checkpoint(net: UNet, path, rng_state=None):
    """Write ``net`` as magic, u32 version, u32 header length, JSON header, f32 payload."""
    names = list(net.params)
    header = {
        "architecture": asdict(net.arch),
        "tensors": [{"name": n, "shape": list(net.params[n].shape)} for n in names],
        "rng_state": rng_state,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        f.write(hbytes)
        for n in names:
            f.write(net.params[n].data.astype("<f4").tobytes())


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r} at byte 0")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header at byte {len(raw)}")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12:12 + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: unreadable JSON header at byte 12: {e}") from None
    off = 12 + hlen
    state = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) * 4
        if off + n > len(raw):
            raise CheckpointError(f"{path}: truncated payload for {t['name']} at byte {off}")
        state[t["name"]] = np.frombuffer(raw, dtype="<f4", count=n // 4, offset=off).reshape(t["shape"]).copy()
        off += n
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes at byte {off}")
    return header, state


def load_checkpoint(path, expect: UNet | None = None) -> UNet:
    """Load a network; with ``expect`` the stored architecture must match it."""
    header, state = read_checkpoint(path)
    arch = Architecture(**header["architecture"])
    if expect is not None and asdict(expect.arch) != asdict(arch):
        raise CheckpointError(f"{path}: architecture {asdict(arch)} does not match {asdict(expect.arch)}")
    cls = _KINDS[arch.kind]
    net = cls(widths=arch.widths, head_gain=arch.head_gain)
    net.load_state_dict(state)
    return net
