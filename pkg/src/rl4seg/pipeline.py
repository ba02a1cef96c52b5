"""Experiment driver: data, pretraining, the adaptation loop and calibration."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation, synth
from .config import RunConfig, to_dict
from .autograd import Adam
from .networks import PolicyNet, RewardNet, ValueNet, save_checkpoint
from .ppo import PpoTrainer, pretrain_policy, train_reward_net
from .reward_dataset import build_reward_dataset, save_reward_dataset
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

TRAIN_LOG_FIELDS = ["step", "iteration", "clip_loss", "entropy", "ratio", "clip_frac", "value_bce", "reward_bce"]


@dataclass
class Datasets:
    source_train: list
    source_val: list
    source_test: list
    target_train: list
    target_test: list


@dataclass
class AdaptResult:
    policy: PolicyNet
    reward_net: RewardNet
    value_net: ValueNet
    iterations: list = field(default_factory=list)
    train_log: list = field(default_factory=list)
    reward_train: list = field(default_factory=list)
    reward_holdout: list = field(default_factory=list)
    temperature: float = 1.0


def make_datasets(cfg: RunConfig) -> Datasets:
    d = cfg.data
    seed = derive_seed(cfg.seed, "data")
    gen = lambda n, dom, split: synth.generate_dataset(n, dom, d.shift, seed, split, d.shape)  # noqa: E731
    return Datasets(
        source_train=gen(d.n_source_train, synth.SOURCE, "train"),
        source_val=gen(d.n_source_val, synth.SOURCE, "val"),
        source_test=gen(d.n_source_test, synth.SOURCE, "test"),
        target_train=gen(d.n_target_train, synth.TARGET, "train"),
        target_test=gen(d.n_target_test, synth.TARGET, "test"),
    )


def save_datasets(root, data: Datasets, cfg: RunConfig):
    meta = {"seed": cfg.seed, "shift": to_dict(cfg.data.shift), "spacing_mm": 1.0}
    for name in ("source_train", "source_val", "source_test", "target_train", "target_test"):
        synth.save_dataset(Path(root) / name, getattr(data, name), meta)


def load_datasets(root) -> Datasets:
    return Datasets(**{name: synth.load_dataset(Path(root) / name) for name in
                       ("source_train", "source_val", "source_test", "target_train", "target_test")})


def new_policy(cfg: RunConfig) -> PolicyNet:
    return PolicyNet(cfg.net.widths, cfg.net.head_gain, seed=derive_seed(cfg.seed, "init", "policy") % 2**32)


def pretrain(cfg: RunConfig, data: Datasets):
    """Supervised source training; returns the reference policy and a summary."""
    policy = new_policy(cfg)
    p = cfg.pretrain
    curve = pretrain_policy(policy, data.source_train, p.epochs, p.lr, p.batch_size,
                            seed=derive_seed(cfg.seed, "pretrain"))
    val, _ = evaluation.evaluate_policy(policy, data.source_val, cfg.thresholds)
    info = {"loss_curve": curve, "source_val_dice": val.dice_avg, "source_val_validity": val.anatomical_validity}
    log.info("pretrain: final loss %.4f, source val dice %.4f", curve[-1], val.dice_avg)
    return policy.freeze(), info


def _metrics_dict(m: evaluation.SegMetrics) -> dict:
    d = asdict(m)
    d.pop("std")
    return d


def adapt(cfg: RunConfig, ref_policy: PolicyNet, data: Datasets, on_iteration=None) -> AdaptResult:
    """Run the reward-dataset / reward-training / PPO loop for ``cfg.iterations`` rounds."""
    cfg.validate()
    n_train = len(data.target_train)
    if cfg.iterations * cfg.subset_size > n_train:
        raise ValueError("not enough target training images for the requested iterations")
    order = rng_for(cfg.seed, "subsets").permutation(n_train)
    images_all = np.asarray([s.image for s in data.target_train], dtype=np.float32)

    policy = ref_policy.clone()
    widths, gain = cfg.net.widths, cfg.net.head_gain
    value_net = ValueNet(widths, gain, seed=derive_seed(cfg.seed, "init", "value") % 2**32)
    reward_net = RewardNet(widths, gain, seed=derive_seed(cfg.seed, "init", "reward") % 2**32)
    trainer = PpoTrainer(policy, value_net, reward_net, ref_policy, cfg.ppo, seed=derive_seed(cfg.seed, "ppo"))
    reward_opt = Adam(reward_net.parameters(), cfg.reward.lr)

    result = AdaptResult(policy, reward_net, value_net)
    base, _ = evaluation.evaluate_policy(policy, data.target_test, cfg.thresholds)
    result.iterations.append({"iteration": 0, **_metrics_dict(base), "reward_set_size": 0})
    d_r, holdout = [], []
    ppo_pool, gold_pool = [], {}
    step = 0
    for it in range(1, cfg.iterations + 1):
        t0 = time.time()
        subset = order[(it - 1) * cfg.subset_size: it * cfg.subset_size]
        images = images_all[subset]
        samples, gold, report = build_reward_dataset(
            policy, images, cfg.perturb, cfg.thresholds, cfg.axes,
            seed=cfg.seed, iteration=it, start_index=int((it - 1) * cfg.subset_size))
        for k, s in enumerate(samples):
            u = rng_for(cfg.seed, "holdout", it, k).random()
            (holdout if u < cfg.reward.holdout_fraction else d_r).append(s)
        reward_curve = []
        if d_r:
            reward_curve = train_reward_net(reward_net, d_r, cfg.reward.epochs, cfg.reward.lr,
                                             cfg.reward.batch_size, seed=derive_seed(cfg.seed, "reward", it),
                                             optimizer=reward_opt)
        trainer.set_reward_net(reward_net)
        if cfg.reinit_value_each_iteration:
            trainer.value_net = value_net = ValueNet(widths, gain, seed=derive_seed(cfg.seed, "init", "value", it) % 2**32)
            trainer.value_opt = Adam(value_net.parameters(), cfg.ppo.value_lr)
            result.value_net = value_net

        if not cfg.ppo_on_cumulative:
            ppo_pool, gold_pool = [], {}
        offset = len(ppo_pool)
        ppo_pool.extend(subset.tolist())
        for i, m in gold:
            gold_pool[offset + i] = m
        pool_images = images_all[np.asarray(ppo_pool)]
        for p in range(cfg.ppo_passes):
            perm = rng_for(cfg.seed, "ppo-batches", it, p).permutation(len(ppo_pool))
            for b in range(0, len(perm), cfg.ppo.batch_size):
                idx = perm[b:b + cfg.ppo.batch_size]
                g = {j: gold_pool[int(k)] for j, k in enumerate(idx) if int(k) in gold_pool}
                stats = trainer.update(pool_images[idx], g, tag=(it, p, b))
                step += 1
                result.train_log.append({"step": step, "iteration": it, **stats,
                                         "reward_bce": reward_curve[-1] if reward_curve else float("nan")})

        m, _ = evaluation.evaluate_policy(policy, data.target_test, cfg.thresholds)
        entry = {"iteration": it, **_metrics_dict(m), "reward_set_size": len(d_r) + len(holdout),
                 "triage": report.to_dict(), "reward_loss_curve": reward_curve,
                 "wall_seconds": round(time.time() - t0, 2)}
        result.iterations.append(entry)
        log.info("iteration %d: dice %.4f hd %.2f validity %.3f |D_r|=%d", it, m.dice_avg, m.hd_avg_mm,
                 m.anatomical_validity, entry["reward_set_size"])
        if on_iteration:
            on_iteration(entry, result)

    result.reward_train, result.reward_holdout = d_r, holdout
    if holdout:
        result.temperature = evaluation.fit_temperature(
            reward_net, [s.image for s in holdout], [s.mask for s in holdout], [s.target for s in holdout])
    return result


# --- run outputs -----------------------------------------------------------------------

def write_train_log(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TRAIN_LOG_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def write_iterations_csv(path, iterations):
    keys = ["iteration", "dice_endo", "dice_epi", "dice_avg", "hd_endo_mm", "hd_epi_mm", "hd_avg_mm",
            "anatomical_validity", "reward_set_size"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(keys)
        for e in iterations:
            w.writerow([evaluation._fmt(e[k]) if isinstance(e[k], float) else e[k] for k in keys])


def calibrate(policy, reward_net, scenes, temperature, out: Path | None = None):
    report, err_auroc = evaluation.calibration_on_scenes(policy, reward_net, scenes, temperature)
    raw, _ = evaluation.calibration_on_scenes(policy, reward_net, scenes, 1.0)
    summary = {"temperature": temperature, "ece": report.ece, "ece_uncalibrated": raw.ece,
               "error_auroc": err_auroc}
    if out is not None:
        evaluation.write_reliability_csv(out / "reliability.csv", report)
        (out / "reliability.svg").write_text(evaluation.reliability_svg(report, "Reward-network uncertainty"))
        (out / "calibration.json").write_text(json.dumps(summary, indent=2))
    return summary, report


def run_experiment(cfg: RunConfig, out_dir=None, ref_policy: PolicyNet | None = None,
                   data: Datasets | None = None):
    """Generate, pretrain (unless given), adapt, evaluate and calibrate.

    Returns ``(manifest, result)``. With ``out_dir`` the usual files are written.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(to_dict(cfg), indent=2))
    t0 = time.time()
    data = data or make_datasets(cfg)
    pre_info = {}
    if ref_policy is None:
        ref_policy, pre_info = pretrain(cfg, data)
    result = adapt(cfg, ref_policy, data)
    final, rows = evaluation.evaluate_policy(result.policy, data.target_test, cfg.thresholds)
    cal, _ = calibrate(result.policy, result.reward_net, data.target_test, result.temperature, out)
    manifest = {
        "config": to_dict(cfg),
        "pretrain": pre_info,
        "baseline": result.iterations[0],
        "iterations": result.iterations,
        "final": _metrics_dict(final),
        "calibration": cal,
        "reward_set_growth": [e["reward_set_size"] for e in result.iterations],
        "wall_seconds": round(time.time() - t0, 2),
        "checkpoints": {},
    }
    if out:
        for name, net in (("policy_ref", ref_policy), ("policy", result.policy),
                          ("reward", result.reward_net), ("value", result.value_net)):
            save_checkpoint(net, out / f"{name}.ckpt")
            manifest["checkpoints"][name] = f"{name}.ckpt"
        evaluation.write_metrics_csv(out / "metrics.csv", rows, final)
        save_reward_dataset(out / "reward_dataset", result.reward_train + result.reward_holdout)
        manifest["reward_dataset"] = {"path": "reward_dataset", "n_train": len(result.reward_train),
                                      "n_holdout": len(result.reward_holdout)}
        write_iterations_csv(out / "iterations.csv", result.iterations)
        write_train_log(out / "train_log.csv", result.train_log)
        write_manifest(out / "manifest.json", manifest)
        emit_report(manifest, out)
    return manifest, result


def write_manifest(path, manifest):
    Path(path).write_text(json.dumps(manifest, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")


# --- report ------------------------------------------------------------------------------

REPORT_COLUMNS = [("iteration", "Iteration"), ("dice_avg", "Dice"), ("hd_avg_mm", "HD (mm)"),
                  ("anatomical_validity", "Validity"), ("reward_set_size", "|D_r|")]


def _trajectory_svg(iterations, key, title, width=360, height=200):
    pad = 36
    ys = [float(e[key]) for e in iterations]
    lo, hi = min(ys), max(ys)
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    n = max(len(ys) - 1, 1)
    pt = lambda i, y: (pad + i * (width - 2 * pad) / n, height - pad - (y - lo) / (hi - lo) * (height - 2 * pad))  # noqa: E731
    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in (pt(i, y) for i, y in enumerate(ys)))
    parts = [f'<g><text x="{pad}" y="16">{title}</text>',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" fill="none" stroke="#333"/>',
             f'<polyline points="{pts}" fill="none" stroke="#4a78b5" stroke-width="2"/>']
    for i, y in enumerate(ys):
        x, yy = pt(i, y)
        parts.append(f'<circle cx="{x:.1f}" cy="{yy:.1f}" r="3" fill="#4a78b5"/>')
        parts.append(f'<text x="{x - 10:.1f}" y="{height - pad + 14}">{i}</text>')
    parts.append(f'<text x="2" y="{pad + 4}">{hi:.3f}</text><text x="2" y="{height - pad}">{lo:.3f}</text></g>')
    return "\n".join(parts)


def emit_report(manifest: dict, out_dir) -> dict:
    """Write report.md, report.csv and report.svg summarising a run manifest."""
    iterations = (manifest or {}).get("iterations") or []
    if not iterations:
        raise ValueError("manifest has no iterations to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fmt = lambda k, v: str(v) if k in ("iteration", "reward_set_size") else f"{float(v):.4f}"  # noqa: E731

    with open(out / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([k for k, _ in REPORT_COLUMNS])
        for e in iterations:
            w.writerow([fmt(k, e[k]) for k, _ in REPORT_COLUMNS])

    lines = ["# Adaptation report", "", "Iteration 0 is the source-only policy before adaptation.", "",
             "| " + " | ".join(t for _, t in REPORT_COLUMNS) + " |",
             "|" + "---|" * len(REPORT_COLUMNS)]
    for e in iterations:
        lines.append("| " + " | ".join(fmt(k, e[k]) for k, _ in REPORT_COLUMNS) + " |")
    final = manifest.get("final") or iterations[-1]
    lines += ["", "## Final policy on target test", "", "| Dice ENDO | Dice EPI | HD ENDO (mm) | HD EPI (mm) | Validity |",
              "|---|---|---|---|---|",
              f"| {final['dice_endo']:.4f} | {final['dice_epi']:.4f} | {final['hd_endo_mm']:.4f} | "
              f"{final['hd_epi_mm']:.4f} | {final['anatomical_validity']:.4f} |"]
    cal = manifest.get("calibration")
    if cal:
        lines += ["", "## Reward-network uncertainty", "",
                  f"- temperature: {cal['temperature']:.4f}",
                  f"- ECE before / after scaling: {cal['ece_uncalibrated']:.4f} / {cal['ece']:.4f}",
                  f"- error-detection AUROC: {cal['error_auroc']:.4f}"]
    (out / "report.md").write_text("\n".join(lines) + "\n")

    panels = [_trajectory_svg(iterations, k, t) for k, t in
              (("dice_avg", "Dice"), ("hd_avg_mm", "HD (mm)"), ("anatomical_validity", "Validity"))]
    svg = ['<svg xmlns="http://www.w3.org/2000/svg" width="1080" height="200" font-family="sans-serif" font-size="11">']
    svg += [f'<g transform="translate({360 * i},0)">{p}</g>' for i, p in enumerate(panels)]
    svg.append("</svg>")
    (out / "report.svg").write_text("\n".join(svg) + "\n")
    return {"markdown": out / "report.md", "csv": out / "report.csv", "svg": out / "report.svg"}
