"""Reward dataset construction: triage, correction and perturbed pairs.

A stored target ``e`` is an agreement map: 1 where the mask matches its
reference, 0 where it is wrong. The reward network learns to predict it, so
its output is a reward and ``1 - output`` an uncertainty.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import anatomy
from .networks import PolicyNet, greedy_action, policy_forward
from .pgm import FormatError, read_pgm, write_pgm
from .seeding import rng_for
from .synth import read_manifest

CORRECTED = "corrected_invalid"
PERTURBED_WEIGHTS = "perturbed_weights"
PERTURBED_IMAGE = "perturbed_image"
GOLD = "gold_valid"
PROVENANCES = (CORRECTED, PERTURBED_WEIGHTS, PERTURBED_IMAGE, GOLD)

AXES = ("image_transforms", "weight_perturbations", "anatomical_correction")


@dataclass
class RewardSample:
    image: np.ndarray
    mask: np.ndarray
    reference: np.ndarray
    provenance: str

    @property
    def target(self) -> np.ndarray:
        return agreement(self.mask, self.reference)


@dataclass
class PerturbationConfig:
    weight_noise_sigma_rel: float = 0.2
    brightness_delta_range: tuple = (-0.3, 0.3)
    contrast_gain_range: tuple = (0.6, 1.6)
    pairs_per_axis: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.pairs_per_axis < 1:
            raise ValueError("pairs_per_axis must be at least 1")
        if self.weight_noise_sigma_rel <= 0:
            raise ValueError("weight_noise_sigma_rel must be positive")
        self.brightness_delta_range = tuple(self.brightness_delta_range)
        self.contrast_gain_range = tuple(self.contrast_gain_range)


@dataclass
class TriageReport:
    n_images: int = 0
    n_valid: int = 0
    n_invalid: int = 0
    skipped_irrecoverable: int = 0
    skipped_uncorrected: int = 0
    counts: dict = field(default_factory=dict)

    def to_dict(self):
        return dict(self.__dict__)


def agreement(mask, reference) -> np.ndarray:
    return (np.asarray(mask) == np.asarray(reference)).astype(np.uint8)


def perturb_image(image, brightness_delta, contrast_gain) -> np.ndarray:
    if contrast_gain <= 0:
        raise ValueError("contrast gain must be positive")
    img = np.asarray(image, dtype=np.float32)
    return np.clip(contrast_gain * (img - 0.5) + 0.5 + brightness_delta, 0.0, 1.0).astype(np.float32)


def perturb_weights(policy: PolicyNet, sigma_rel, seed) -> PolicyNet:
    """Frozen copy of ``policy`` with Gaussian noise scaled by each tensor's RMS."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noisy = policy.clone(frozen=True)
    for name in sorted(noisy.params):
        p = noisy.params[name]
        rms = float(np.sqrt(np.mean(p.data.astype(np.float64) ** 2)))
        p.data += (sigma_rel * rms * rng.standard_normal(p.shape)).astype(p.data.dtype)
    return noisy


def _greedy(policy, image):
    return greedy_action(policy_forward(policy, image))


def build_reward_dataset(policy: PolicyNet, images, perturb: PerturbationConfig | None = None,
                         thresholds=None, axes=AXES, seed=0, iteration=0, start_index=0):
    """Segment ``images`` and turn the results into reward samples.

    Invalid greedy masks are corrected (if enabled) and stored against their
    correction. Valid masks become gold standards; for each enabled
    perturbation axis they also yield perturbed masks stored against the gold
    mask, alongside the gold mask itself.

    Returns ``(samples, gold, report)`` where ``gold`` is a list of
    ``(image_index, mask)`` pairs.
    """
    perturb = perturb or PerturbationConfig()
    axes = set(axes)
    unknown = axes - set(AXES)
    if unknown:
        raise ValueError(f"unknown perturbation axes {sorted(unknown)}")
    if len(images) < 1:
        raise ValueError("need at least one image")
    samples, gold = [], []
    report = TriageReport(n_images=len(images))
    dists = [policy_forward(policy, np.asarray(images[i:i + 32])) for i in range(0, len(images), 32)]
    greedy = list(greedy_action(np.concatenate(dists)))
    for i, (img, a) in enumerate(zip(images, greedy)):
        idx = start_index + i
        if not anatomy.is_valid(a, thresholds):
            report.n_invalid += 1
            if "anatomical_correction" not in axes:
                report.skipped_uncorrected += 1
                continue
            try:
                fixed, _ = anatomy.correct(a, thresholds)
            except anatomy.Irrecoverable:
                report.skipped_irrecoverable += 1
                continue
            samples.append(RewardSample(img, a, fixed, CORRECTED))
            continue
        report.n_valid += 1
        gold.append((i, a))
        pairs = []
        if "weight_perturbations" in axes:
            for k in range(perturb.pairs_per_axis):
                rng = rng_for(perturb.seed, seed, "weights", iteration, idx, k)
                noisy = perturb_weights(policy, perturb.weight_noise_sigma_rel, rng)
                pairs.append(RewardSample(img, _greedy(noisy, img), a, PERTURBED_WEIGHTS))
        if "image_transforms" in axes:
            for k in range(perturb.pairs_per_axis):
                rng = rng_for(perturb.seed, seed, "image", iteration, idx, k)
                delta = rng.uniform(*perturb.brightness_delta_range)
                gain = rng.uniform(*perturb.contrast_gain_range)
                # the mask comes from the perturbed view but is scored on the original image
                pairs.append(RewardSample(img, _greedy(policy, perturb_image(img, delta, gain)), a, PERTURBED_IMAGE))
        if pairs:
            samples.append(RewardSample(img, a, a, GOLD))
            samples.extend(pairs)
    report.counts = dict(Counter(s.provenance for s in samples))
    return samples, gold, report


# --- persistence -------------------------------------------------------------------

def save_reward_dataset(path, samples, report: TriageReport | None = None):
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        rec = {"image": f"img_{i:05d}.pgm", "mask": f"mask_{i:05d}.pgm",
               "reference": f"ref_{i:05d}.pgm", "target": f"target_{i:05d}.pgm",
               "provenance": s.provenance, "domain": "target", "split": "reward", "spacing_mm": 1.0}
        write_pgm(root / rec["image"], np.round(np.clip(s.image, 0, 1) * 65535), 65535)
        write_pgm(root / rec["mask"], s.mask, 255)
        write_pgm(root / rec["reference"], s.reference, 255)
        write_pgm(root / rec["target"], s.target, 255)
        records.append(rec)
    manifest = {"format": "rl4seg-reward-dataset", "version": 1, "count": len(records), "records": records}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    counts = Counter(s.provenance for s in samples)
    (root / "provenance.json").write_text(json.dumps(
        {"counts": {p: counts.get(p, 0) for p in PROVENANCES},
         "provenance": [s.provenance for s in samples]}, indent=1))
    if report is not None:
        (root / "triage.json").write_text(json.dumps(report.to_dict(), indent=1))


def load_reward_dataset(path) -> list[RewardSample]:
    root = Path(path)
    m = read_manifest(root)
    if m["format"] != "rl4seg-reward-dataset":
        raise FormatError(f"{root / 'manifest.json'}: not a reward dataset (byte 0)")
    samples = []
    for r in m["records"]:
        if r.get("provenance") not in PROVENANCES:
            raise FormatError(f"{root / 'manifest.json'}: unknown provenance {r.get('provenance')!r}")
        img = read_pgm(root / r["image"]).astype(np.float32) / 65535.0
        mask = read_pgm(root / r["mask"]).astype(np.uint8)
        ref = read_pgm(root / r["reference"]).astype(np.uint8)
        tgt = read_pgm(root / r["target"]).astype(np.uint8)
        s = RewardSample(img, mask, ref, r["provenance"])
        if tgt.shape != mask.shape or not np.array_equal(tgt, s.target):
            raise FormatError(f"{root / r['target']}: target map disagrees with mask/reference (byte 0)")
        samples.append(s)
    return samples
