"""Synthetic cardiac-like scenes with a controllable source -> target shift.

An LV superellipse sits inside a MYO band of varying thickness, over a
textured background. A basal gap may open the band at the top. Target scenes
differ in brightness, contrast, speckle, blur and shape elongation.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import anatomy
from .pgm import FormatError, read_pgm, write_pgm
from .seeding import rng_for

SOURCE, TARGET = "source", "target"
MAX_RETRIES = 100
# generated shapes must clear the default rule thresholds with room to spare
MARGIN_THRESHOLDS = anatomy.Thresholds(frontier_ratio_max=0.4, myo_thickness_ratio_min=0.3,
                                       lv_myo_ratio_lo=1.5, lv_myo_ratio_hi=8.0)


@dataclass
class Scene:
    image: np.ndarray
    mask: np.ndarray | None
    spacing_mm: float = 1.0
    domain_tag: str = SOURCE
    split: str = "train"


def _range(x):
    lo, hi = x
    if lo > hi:
        raise ValueError(f"degenerate range {x}: lo > hi")
    return float(lo), float(hi)


@dataclass
class DomainShiftConfig:
    """Appearance and shape shift applied to target scenes."""

    brightness_offset_range: tuple = (0.03, 0.08)
    contrast_gain_range: tuple = (0.75, 0.95)
    speckle_noise_sigma: float = 0.3
    shape_elongation_range: tuple = (1.1, 1.35)
    blur_sigma_range: tuple = (0.9, 1.4)
    dropout_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("brightness_offset_range", "contrast_gain_range",
                     "shape_elongation_range", "blur_sigma_range"):
            setattr(self, name, _range(getattr(self, name)))
        if self.speckle_noise_sigma < 0:
            raise ValueError("speckle_noise_sigma must be non-negative")


@dataclass
class ShapeConfig:
    size: int = 64
    gap_prob: float = 0.5
    speckle_sigma: float = 0.2
    blur_sigma_range: tuple = (0.6, 1.0)
    intensities: dict = field(default_factory=lambda: {"bg": 0.32, "lv": 0.1, "myo": 0.72})
    # per-image appearance variability present in both domains
    intensity_jitter: float = 0.05
    gain_jitter: float = 0.1


def _draw_shape(rng, size, elongation, gap_prob):
    # lengths are tuned for 64 px and scale with the image
    k = size / 64
    cy = size / 2 + k * (2 + rng.uniform(-3, 3))
    cx = size / 2 + k * rng.uniform(-3, 3)
    a = k * rng.uniform(7.0, 10.0) / np.sqrt(elongation)
    b = k * rng.uniform(11.0, 14.5) * np.sqrt(elongation)
    expo = rng.uniform(2.0, 2.6)
    rot = rng.uniform(-0.3, 0.3)
    t0, t1 = k * rng.uniform(4.0, 5.5), k * rng.uniform(0.0, 1.0)
    tphase = rng.uniform(-np.pi, np.pi)

    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    dy, dx = yy - cy, xx - cx
    # rotate into the shape frame; the long axis is vertical
    u = dx * np.cos(rot) + dy * np.sin(rot)
    v = -dx * np.sin(rot) + dy * np.cos(rot)
    rho = np.hypot(u, v)
    phi = np.arctan2(v, u)
    c, s = np.abs(np.cos(phi)), np.abs(np.sin(phi))
    r_lv = ((c / a) ** expo + (s / b) ** expo) ** (-1.0 / expo)
    thick = t0 + t1 * np.cos(phi - tphase)
    if thick.min() < 1.0:
        return None
    mask = np.zeros((size, size), np.uint8)
    mask[rho <= r_lv + thick] = anatomy.MYO
    mask[rho <= r_lv] = anatomy.LV
    if rng.random() < gap_prob:
        half = rng.uniform(0.25, 0.45)
        # top of the image is negative v
        dphi = np.angle(np.exp(1j * (phi + np.pi / 2)))
        mask[(mask == anatomy.MYO) & (np.abs(dphi) < half)] = anatomy.BG
    return mask, (cy, cx, rot)


def _render(rng, mask, geom, domain, cfg: DomainShiftConfig, shape: ShapeConfig):
    size = mask.shape[0]
    j = shape.intensity_jitter
    lv_i, myo_i, bg_i = (shape.intensities[k] + rng.uniform(-j, j) for k in ("lv", "myo", "bg"))
    base = np.choose(mask, [bg_i, lv_i, myo_i]).astype(float)
    # slow background texture
    tex = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), 6)
    base += 0.5 * bg_i * tex / (np.abs(tex).max() + 1e-9) * (mask == anatomy.BG)
    speckle = shape.speckle_sigma
    blur = rng.uniform(*shape.blur_sigma_range)
    if domain == TARGET:
        speckle = cfg.speckle_noise_sigma
        blur = rng.uniform(*cfg.blur_sigma_range)
        if rng.random() < cfg.dropout_prob:
            cy, cx, _ = geom
            yy, xx = np.mgrid[0:size, 0:size]
            ang = np.arctan2(yy - cy, xx - cx)
            centre = rng.uniform(-np.pi, np.pi)
            width = rng.uniform(0.3, 0.6)
            drop = np.abs(np.angle(np.exp(1j * (ang - centre)))) < width
            base[drop & (mask == anatomy.MYO)] = rng.uniform(bg_i, 0.5 * (bg_i + myo_i))
    img = base * np.maximum(1.0 + speckle * rng.normal(0, 1, (size, size)), 0.0)
    img = ndimage.gaussian_filter(img, blur)
    gain = 1.0 + rng.uniform(-shape.gain_jitter, shape.gain_jitter)
    offset = 0.0
    if domain == TARGET:
        gain *= rng.uniform(*cfg.contrast_gain_range)
        offset = rng.uniform(*cfg.brightness_offset_range)
    m = img.mean()
    img = m + gain * (img - m) + offset
    # quantise to the 16-bit storage grid so files round-trip exactly
    return (np.round(np.clip(img, 0.0, 1.0) * 65535) / 65535).astype(np.float32)


def generate_scene(seed, index, domain=SOURCE, cfg: DomainShiftConfig | None = None,
                   shape: ShapeConfig | None = None, split="train") -> Scene:
    """One labelled scene; a pure function of its arguments."""
    cfg = cfg or DomainShiftConfig()
    shape = shape or ShapeConfig()
    rng = rng_for(seed, "synth", domain, split, index)
    elong = rng.uniform(*cfg.shape_elongation_range) if domain == TARGET else 1.0
    for _ in range(MAX_RETRIES):
        drawn = _draw_shape(rng, shape.size, elong, shape.gap_prob)
        if drawn is not None and anatomy.is_valid(drawn[0], MARGIN_THRESHOLDS):
            mask, geom = drawn
            img = _render(rng, mask, geom, domain, cfg, shape)
            return Scene(img, mask, 1.0, domain, split)
    raise RuntimeError(f"no valid shape after {MAX_RETRIES} draws (domain={domain}, index={index})")


def generate_dataset(n, domain=SOURCE, cfg: DomainShiftConfig | None = None, seed=0,
                     split="train", shape: ShapeConfig | None = None, keep_masks=None):
    """``n`` scenes. Target scenes outside the test split have their masks withheld."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if keep_masks is None:
        keep_masks = domain == SOURCE or split == "test"
    scenes = [generate_scene(seed, i, domain, cfg, shape, split) for i in range(n)]
    if not keep_masks:
        for s in scenes:
            s.mask = None
    return scenes


# --- persistence ----------------------------------------------------------------

MANIFEST = "manifest.json"


def save_dataset(path, scenes, meta: dict | None = None):
    """Directory with manifest.json, 16-bit image PGMs and 8-bit mask PGMs."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(scenes):
        img_name = f"img_{i:05d}.pgm"
        write_pgm(root / img_name, np.round(np.clip(s.image, 0, 1) * 65535), 65535)
        rec = {"image": img_name, "domain": s.domain_tag, "split": s.split, "spacing_mm": s.spacing_mm}
        if s.mask is not None:
            rec["mask"] = f"mask_{i:05d}.pgm"
            write_pgm(root / rec["mask"], s.mask, 255)
        records.append(rec)
    splits = {}
    for r in records:
        splits[r["split"]] = splits.get(r["split"], 0) + 1
    manifest = {"format": "rl4seg-dataset", "version": 1, "count": len(records),
                "splits": splits, "records": records, **(meta or {})}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, default=_jsonable))


def _jsonable(o):
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


def read_manifest(path) -> dict:
    p = Path(path) / MANIFEST
    text = p.read_bytes()
    try:
        m = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{p}: invalid JSON at byte {e.pos}: {e.msg}") from None
    if not isinstance(m, dict) or m.get("format") not in ("rl4seg-dataset", "rl4seg-reward-dataset"):
        raise FormatError(f"{p}: not an rl4seg dataset manifest (byte 0)")
    if len(m.get("records", [])) != m.get("count"):
        raise FormatError(f"{p}: record count {len(m.get('records', []))} != declared {m.get('count')}")
    return m


def load_dataset(path):
    root = Path(path)
    m = read_manifest(root)
    scenes = []
    for r in m["records"]:
        img = read_pgm(root / r["image"]).astype(np.float32) / 65535.0
        mask = read_pgm(root / r["mask"]).astype(np.uint8) if "mask" in r else None
        if mask is not None and mask.shape != img.shape:
            raise FormatError(f"{root / r['mask']}: shape {mask.shape} differs from image {img.shape} (byte 0)")
        scenes.append(Scene(img, mask, float(r["spacing_mm"]), r["domain"], r["split"]))
    return scenes
