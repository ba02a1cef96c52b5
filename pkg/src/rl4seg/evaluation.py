"""Segmentation and calibration metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from . import anatomy
from . import autograd as ag
from .anatomy import LV, MYO
from .networks import PolicyNet, RewardNet, greedy_action, policy_forward

STRUCTURES = ("endo", "epi")


class NoBoundary(ValueError):
    """A region passed to a distance metric is empty."""


@dataclass
class SegMetrics:
    dice_endo: float
    dice_epi: float
    dice_avg: float
    hd_endo_mm: float
    hd_epi_mm: float
    hd_avg_mm: float
    anatomical_validity: float
    std: dict = field(default_factory=dict)
    hd_excluded: int = 0
    n: int = 0


@dataclass
class CalibrationReport:
    edges: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray
    count: np.ndarray
    ece: float
    temperature: float = 1.0

    def rows(self):
        for b in range(len(self.count)):
            yield {"bin": b, "lo": float(self.edges[b]), "hi": float(self.edges[b + 1]),
                   "conf": float(self.confidence[b]), "acc": float(self.accuracy[b]),
                   "count": int(self.count[b])}


def structure(mask, name) -> np.ndarray:
    """ENDO is the LV; EPI is LV together with MYO."""
    mask = np.asarray(mask)
    if name == "endo":
        return mask == LV
    if name == "epi":
        return (mask == LV) | (mask == MYO)
    raise ValueError(f"unknown structure {name!r}")


def dice(pred, ref) -> float:
    p, r = np.asarray(pred, bool), np.asarray(ref, bool)
    denom = p.sum() + r.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (p & r).sum() / denom)


def boundary_points(region) -> np.ndarray:
    return np.argwhere(anatomy.boundary(region))


def hausdorff_mm(pred, ref, spacing=1.0) -> float:
    """Symmetric Hausdorff distance between boundary pixel sets, in mm."""
    a, b = boundary_points(pred), boundary_points(ref)
    if len(a) == 0 or len(b) == 0:
        raise NoBoundary("Hausdorff distance needs two non-empty regions")
    d = cdist(a, b)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()) * spacing)


def postprocess(mask) -> np.ndarray:
    """Remove disconnected regions: keep the largest component of each foreground class."""
    return anatomy.postprocess(mask)


# --- calibration ------------------------------------------------------------

def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _logit(p, eps=1e-7):
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1 - eps)
    return np.log(p) - np.log1p(-p)


def uncertainty_from_logits(logits, temperature=1.0) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return 1.0 - _sigmoid(np.asarray(logits, dtype=np.float64) / temperature)


def uncertainty_map(reward_net: RewardNet, image, mask, temperature=1.0) -> np.ndarray:
    """Complement of the temperature-scaled reward: high where errors are likely."""
    with ag.no_grad():
        z = reward_net.reward_logits(image, mask).data
    u = uncertainty_from_logits(z, temperature)
    return u[0] if np.ndim(image) == 2 else u


def binary_nll(logits, targets, temperature=1.0) -> float:
    z = np.asarray(logits, dtype=np.float64).ravel() / temperature
    t = np.asarray(targets, dtype=np.float64).ravel()
    # log(1 + e^z) - t*z, overflow-safe
    return float(np.mean(np.logaddexp(0.0, z) - t * z))


def golden_section(f, lo, hi, tol=1e-5, max_iter=200):
    """Minimise a unimodal ``f`` on ``[lo, hi]``."""
    inv = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - inv * (b - a), a + inv * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = f(d)
    return (a + b) / 2


def fit_temperature_logits(logits, targets, t_range=(0.05, 20.0)) -> float:
    """Temperature minimising the BCE of ``sigmoid(logits / T)`` against ``targets``."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if z.size == 0:
        raise ValueError("validation set is empty")
    log_t = golden_section(lambda lt: binary_nll(z, t, math.exp(lt)), math.log(t_range[0]), math.log(t_range[1]))
    return float(math.exp(log_t))


def reward_logits(reward_net: RewardNet, images, masks, batch=32) -> np.ndarray:
    out = []
    with ag.no_grad():
        for i in range(0, len(images), batch):
            out.append(reward_net.reward_logits(np.asarray(images[i:i + batch]), np.asarray(masks[i:i + batch])).data)
    return np.concatenate(out) if out else np.zeros((0,))


def fit_temperature(reward_net: RewardNet, images, masks, agreement) -> float:
    """Fit the reward network's temperature on validation (image, mask, agreement) triples."""
    if len(images) == 0:
        raise ValueError("validation set is empty")
    return fit_temperature_logits(reward_logits(reward_net, images, masks), np.asarray(agreement))


def ece_and_reliability(confidence, correct, bins=10) -> CalibrationReport:
    conf = np.asarray(confidence, dtype=np.float64).ravel()
    corr = np.asarray(correct, dtype=np.float64).ravel()
    if conf.size and (conf.min() < 0 or conf.max() > 1):
        raise ValueError("confidences must lie in [0, 1]")
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.minimum((conf * bins).astype(int), bins - 1)
    count = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=corr, minlength=bins)
    nz = np.maximum(count, 1)
    conf_b, acc_b = conf_sum / nz, acc_sum / nz
    n = max(conf.size, 1)
    ece = float(np.sum(count / n * np.abs(acc_b - conf_b)))
    return CalibrationReport(edges, conf_b, acc_b, count, ece)


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, bool).ravel()
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# --- policy evaluation ---------------------------------------------------------------

def predict_masks(policy: PolicyNet, images, batch=32, post=True) -> list[np.ndarray]:
    masks = []
    for i in range(0, len(images), batch):
        dist = policy_forward(policy, np.asarray(images[i:i + batch]))
        masks.extend(greedy_action(dist))
    return [postprocess(m) if post else m for m in masks]


def score_masks(preds, refs, spacings, thresholds=None):
    """Per-sample rows and the aggregate :class:`SegMetrics`."""
    rows = []
    excluded = 0
    for i, (p, r, sp) in enumerate(zip(preds, refs, spacings)):
        row = {"index": i}
        for s in STRUCTURES:
            ps, rs = structure(p, s), structure(r, s)
            row[f"dice_{s}"] = dice(ps, rs)
            try:
                row[f"hd_{s}_mm"] = hausdorff_mm(ps, rs, sp)
            except NoBoundary:
                row[f"hd_{s}_mm"] = float("nan")
                excluded += 1
        row["dice_avg"] = (row["dice_endo"] + row["dice_epi"]) / 2
        row["hd_avg_mm"] = (row["hd_endo_mm"] + row["hd_epi_mm"]) / 2
        row["valid"] = int(anatomy.is_valid(p, thresholds))
        rows.append(row)
    keys = ["dice_endo", "dice_epi", "dice_avg", "hd_endo_mm", "hd_epi_mm", "hd_avg_mm", "valid"]
    mean, std = {}, {}
    for k in keys:
        v = np.array([r[k] for r in rows], dtype=float)
        v = v[~np.isnan(v)]
        mean[k] = float(v.mean()) if v.size else float("nan")
        std[k] = float(v.std()) if v.size else float("nan")
    metrics = SegMetrics(
        dice_endo=mean["dice_endo"], dice_epi=mean["dice_epi"], dice_avg=mean["dice_avg"],
        hd_endo_mm=mean["hd_endo_mm"], hd_epi_mm=mean["hd_epi_mm"], hd_avg_mm=mean["hd_avg_mm"],
        anatomical_validity=mean["valid"], std=std, hd_excluded=excluded, n=len(rows),
    )
    return metrics, rows


def evaluate_policy(policy: PolicyNet, scenes, thresholds=None):
    """Greedy decode, post-process and score against the scenes' reference masks."""
    if any(s.mask is None for s in scenes):
        raise ValueError("evaluation needs labelled scenes")
    preds = predict_masks(policy, [s.image for s in scenes])
    return score_masks(preds, [s.mask for s in scenes], [s.spacing_mm for s in scenes], thresholds)


def calibration_on_scenes(policy: PolicyNet, reward_net: RewardNet, scenes, temperature=1.0, bins=10):
    """Pixel calibration of the reward network on labelled scenes.

    Confidence is the temperature-scaled reward; a pixel counts as correct when
    the post-processed greedy prediction agrees with the reference.
    Returns the report and the error-prediction AUROC of the uncertainty map.
    """
    images = np.asarray([s.image for s in scenes])
    preds = np.asarray(predict_masks(policy, images))
    refs = np.asarray([s.mask for s in scenes])
    z = reward_logits(reward_net, images, preds)
    conf = _sigmoid(z / temperature)
    correct = preds == refs
    rep = ece_and_reliability(conf, correct, bins)
    rep.temperature = temperature
    return rep, auroc(1.0 - conf, ~correct)


# --- output files ------------------------------------------------------------------

def write_metrics_csv(path, rows, metrics: SegMetrics, extra=None):
    keys = ["index", "dice_endo", "dice_epi", "dice_avg", "hd_endo_mm", "hd_epi_mm", "hd_avg_mm", "valid"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row"] + keys)
        for r in rows:
            w.writerow(["sample"] + [_fmt(r[k]) for k in keys])
        agg = asdict(metrics)
        w.writerow(["mean", ""] + [_fmt(agg[k]) for k in
                                   ("dice_endo", "dice_epi", "dice_avg", "hd_endo_mm", "hd_epi_mm", "hd_avg_mm",
                                    "anatomical_validity")])
        w.writerow(["std", ""] + [_fmt(metrics.std.get(k, float("nan"))) for k in keys[1:]])
        for k, v in (extra or {}).items():
            w.writerow([k, _fmt(v)])


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def write_reliability_csv(path, report: CalibrationReport):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["bin", "lo", "hi", "conf", "acc", "count"])
        w.writeheader()
        for row in report.rows():
            w.writerow({k: _fmt(v) for k, v in row.items()})


def reliability_svg(report: CalibrationReport, title="Reliability", size=320) -> str:
    pad = 40
    inner = size - 2 * pad
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="11">',
             f'<rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="#333"/>']
    nb = len(report.count)
    bw = inner / nb
    for b in range(nb):
        if report.count[b] == 0:
            continue
        h = report.accuracy[b] * inner
        parts.append(f'<rect x="{pad + b * bw:.1f}" y="{pad + inner - h:.1f}" width="{bw - 1:.1f}" '
                     f'height="{h:.1f}" fill="#4a78b5"/>')
    parts.append(f'<line x1="{pad}" y1="{pad + inner}" x2="{pad + inner}" y2="{pad}" stroke="#888" stroke-dasharray="4 3"/>')
    parts.append(f'<text x="{pad}" y="{pad - 10}">{title}: ECE={report.ece:.4f}, T={report.temperature:.3f}</text>')
    parts.append(f'<text x="{size / 2 - 30}" y="{size - 10}">confidence</text>')
    parts.append(f'<text x="10" y="{size / 2}" transform="rotate(-90 10 {size / 2})">accuracy</text>')
    parts.append("</svg>")
    return "\n".join(parts)
