"""Morphology primitives, anatomical validity rules and a rule-based corrector.

Masks are H x W integer grids with classes BG=0, LV=1, MYO=2. Foreground
components use 8-connectivity and background (holes) 4-connectivity.

A rule that depends on an absent class passes; the presence rules carry that
failure so each root cause fails exactly one rule.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

BG, LV, MYO = 0, 1, 2

_FOUR = ndimage.generate_binary_structure(2, 1)
_EIGHT = ndimage.generate_binary_structure(2, 2)

RULES = (
    "presence_lv",
    "presence_myo",
    "lv_holes",
    "myo_holes",
    "lv_disconnectivity",
    "myo_disconnectivity",
    "holes_between_lv_myo",
    "lv_bg_frontier_ratio",
    "myo_thickness_ratio",
    "lv_width_myo_thickness_ratio",
)


class Irrecoverable(Exception):
    """The corrector cannot turn this mask into a valid one."""


@dataclass(frozen=True)
class Thresholds:
    frontier_ratio_max: float = 0.5
    myo_thickness_ratio_min: float = 0.2
    lv_myo_ratio_lo: float = 1.0
    lv_myo_ratio_hi: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (0 < v < np.inf):
                raise ValueError(f"threshold {f.name} must be in (0, inf), got {v}")
        if self.lv_myo_ratio_lo >= self.lv_myo_ratio_hi:
            raise ValueError("lv_myo_ratio_lo must be below lv_myo_ratio_hi")


@dataclass
class ValidityReport:
    presence_lv: bool
    presence_myo: bool
    lv_holes: bool
    myo_holes: bool
    lv_disconnectivity: bool
    myo_disconnectivity: bool
    holes_between_lv_myo: bool
    lv_bg_frontier_ratio: bool
    myo_thickness_ratio: bool
    lv_width_myo_thickness_ratio: bool
    frontier_ratio: float | None = None
    thickness_ratio: float | None = None
    lv_width_myo_ratio: float | None = None

    @property
    def valid(self) -> bool:
        return all(getattr(self, r) for r in RULES)

    def failed(self) -> list[str]:
        return [r for r in RULES if not getattr(self, r)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["valid"] = self.valid
        return d


# --- primitives ---------------------------------------------------------------

def connected_components(binary, connectivity=8):
    """Label foreground components; labels 1..count follow raster order of first pixel."""
    structure = _EIGHT if connectivity == 8 else _FOUR
    labels, count = ndimage.label(np.asarray(binary, dtype=bool), structure=structure)
    return labels, int(count)


def _enclosed_components(background):
    """4-connected components of ``background`` that do not touch the grid border."""
    labels, count = ndimage.label(background, structure=_FOUR)
    border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    keep = np.setdiff1d(np.arange(1, count + 1), border)
    return labels, keep


def count_holes(binary) -> int:
    _, keep = _enclosed_components(~np.asarray(binary, dtype=bool))
    return int(keep.size)


def largest_component(binary) -> np.ndarray:
    labels, count = connected_components(binary)
    if count <= 1:
        return labels > 0
    sizes = np.bincount(labels.ravel())[1:]
    # ties go to the first component in raster order
    return labels == (int(np.argmax(sizes)) + 1)


def fill_holes(binary) -> np.ndarray:
    b = np.asarray(binary, dtype=bool)
    labels, keep = _enclosed_components(~b)
    return b | np.isin(labels, keep)


def _myo_own_holes(mask):
    """Enclosed non-MYO regions that contain no LV pixel."""
    labels, keep = _enclosed_components(mask != MYO)
    if keep.size == 0:
        return labels, keep
    has_lv = ndimage.maximum(mask == LV, labels, keep) if keep.size else []
    return labels, keep[~np.asarray(has_lv, dtype=bool)]


def _prune_endpoints(skel, iterations=3):
    s = skel.copy()
    kernel = np.ones((3, 3), dtype=int)
    for _ in range(iterations):
        nb = ndimage.convolve(s.astype(int), kernel, mode="constant") - s
        ends = s & (nb <= 1)
        if not ends.any() or ends.sum() == s.sum():
            break
        s &= ~ends
    return s if s.any() else skel


def thickness_samples(binary) -> np.ndarray:
    """Local thickness (2 * distance - 1 px) sampled on the pruned medial axis."""
    b = np.pad(np.asarray(binary, dtype=bool), 1)
    if not b.any():
        return np.zeros(0)
    skel = skeletonize(b)
    dist = ndimage.distance_transform_edt(b)
    # spurs into corners and tapered arc ends are about one radius long
    skel = _prune_endpoints(skel, int(np.ceil(dist.max())) + 1)
    return 2.0 * dist[skel] - 1.0


def myo_thickness_profile(mask):
    """(min, max) MYO thickness in pixels over the largest, hole-filled MYO component."""
    mask = np.asarray(mask)
    if not (mask == MYO).any():
        raise ValueError("empty MYO: rule presence_myo already fails")
    t = thickness_samples(_myo_body(mask))
    return float(t.min()), float(t.max())


def _myo_body(mask):
    labels, own = _myo_own_holes(mask)
    filled = (mask == MYO) | np.isin(labels, own)
    return largest_component(filled)


def lv_width(mask) -> float:
    """Diameter of the largest disc inscribed in the largest, hole-filled LV component."""
    lv = largest_component(fill_holes(np.asarray(mask) == LV))
    dist = ndimage.distance_transform_edt(np.pad(lv, 1))
    return float(2.0 * dist.max() - 1.0)


def boundary(region) -> np.ndarray:
    """Pixels of ``region`` with a 4-neighbour outside it (grid exterior counts as outside)."""
    r = np.asarray(region, dtype=bool)
    inner = ndimage.binary_erosion(r, structure=_FOUR, border_value=0)
    return r & ~inner


# --- rules --------------------------------------------------------------------

def assess_validity(mask, thresholds: Thresholds | None = None) -> ValidityReport:
    th = thresholds or Thresholds()
    mask = np.asarray(mask)
    lv, myo, bg = mask == LV, mask == MYO, mask == BG
    has_lv, has_myo = bool(lv.any()), bool(myo.any())
    both = has_lv and has_myo

    lv_holes = count_holes(lv) == 0 if has_lv else True
    if has_myo:
        _, own = _myo_own_holes(mask)
        myo_holes = own.size == 0
    else:
        myo_holes = True
    lv_conn = connected_components(lv)[1] <= 1
    myo_conn = connected_components(myo)[1] <= 1

    between = True
    if both:
        labels, keep = _enclosed_components(~(lv | myo))
        for k in keep:
            comp = labels == k
            ring = ndimage.binary_dilation(comp, structure=_FOUR) & ~comp
            if (ring & lv).any() and (ring & myo).any():
                between = False
                break

    frontier = thick = width_ratio = None
    frontier_ok = thick_ok = width_ok = True
    if both:
        edge = boundary(lv)
        bg_ext = np.pad(bg, 1, constant_values=True)
        near_bg = ndimage.binary_dilation(bg_ext, structure=_FOUR)[1:-1, 1:-1]
        frontier = float((edge & near_bg).sum() / edge.sum())
        frontier_ok = frontier <= th.frontier_ratio_max
    if has_myo:
        t = thickness_samples(_myo_body(mask))
        thick = float(t.min() / t.max())
        thick_ok = thick > th.myo_thickness_ratio_min
        if has_lv:
            width_ratio = float(lv_width(mask) / t.mean())
            width_ok = th.lv_myo_ratio_lo <= width_ratio <= th.lv_myo_ratio_hi

    return ValidityReport(
        presence_lv=has_lv,
        presence_myo=has_myo,
        lv_holes=bool(lv_holes),
        myo_holes=bool(myo_holes),
        lv_disconnectivity=bool(lv_conn),
        myo_disconnectivity=bool(myo_conn),
        holes_between_lv_myo=between,
        lv_bg_frontier_ratio=bool(frontier_ok),
        myo_thickness_ratio=bool(thick_ok),
        lv_width_myo_thickness_ratio=bool(width_ok),
        frontier_ratio=frontier,
        thickness_ratio=thick,
        lv_width_myo_ratio=width_ratio,
    )


def is_valid(mask, thresholds: Thresholds | None = None) -> bool:
    return assess_validity(mask, thresholds).valid


# --- corrector ----------------------------------------------------------------

def correct(mask, thresholds: Thresholds | None = None):
    """Project an invalid mask onto a valid one with a fixed repair pipeline.

    Returns ``(mask, changed)``. Raises :class:`Irrecoverable` when a class is
    missing or the repaired mask still fails a rule.
    """
    mask = np.asarray(mask).astype(np.uint8)
    if assess_validity(mask, thresholds).valid:
        return mask.copy(), False
    if not (mask == LV).any() or not (mask == MYO).any():
        raise Irrecoverable("mask lacks LV or MYO pixels")

    out = mask.copy()
    for cls in (LV, MYO):
        keep = largest_component(out == cls)
        out[(out == cls) & ~keep] = BG

    out[fill_holes(out == LV)] = LV
    labels, own = _myo_own_holes(out)
    out[np.isin(labels, own)] = MYO

    labels, keep = _enclosed_components(out == BG)
    for k in keep:
        comp = labels == k
        ring = ndimage.binary_dilation(comp, structure=_FOUR) & ~comp
        n_lv, n_myo = int((ring & (out == LV)).sum()), int((ring & (out == MYO)).sum())
        out[comp] = LV if n_lv >= n_myo else MYO

    report = assess_validity(out, thresholds)
    if not report.valid:
        raise Irrecoverable(f"repair leaves failing rules {report.failed()}")
    return out, True


def postprocess(mask) -> np.ndarray:
    """Keep only the largest component of each foreground class."""
    out = np.asarray(mask).astype(np.uint8).copy()
    for cls in (LV, MYO):
        region = out == cls
        if region.any():
            out[region & ~largest_component(region)] = BG
    return out
