"""Command-line entry point: ``rl4seg <command> [options]``.

Exit codes: 0 success, 2 missing or invalid input, 3 training aborted on a
non-finite loss (diagnostics are written to the output directory).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import anatomy, evaluation, pipeline
from .config import dump_config, load_config
from .networks import CheckpointError, PolicyNet, RewardNet, load_checkpoint, save_checkpoint
from .pgm import FormatError, read_pgm
from .ppo import NonFiniteLoss

EXIT_INPUT = 2
EXIT_NONFINITE = 3

log = logging.getLogger("rl4seg")


class InputError(Exception):
    pass


def _config(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "ablate", None):
        overrides["ablate"] = [a.strip() for a in args.ablate.split(",") if a.strip()]
    if getattr(args, "config", None) and not Path(args.config).is_file():
        raise InputError(f"config file not found: {args.config}")
    try:
        return load_config(getattr(args, "config", None), overrides)
    except (ValueError, TypeError) as e:
        raise InputError(f"invalid configuration: {e}") from None


def _require(path, what):
    if path is None or not Path(path).exists():
        raise InputError(f"{what} not found: {path}")
    return Path(path)


def _data(args, cfg):
    if getattr(args, "data", None):
        return pipeline.load_datasets(_require(args.data, "dataset directory"))
    return pipeline.make_datasets(cfg)


def _load(path, cls, what):
    net = load_checkpoint(_require(path, what))
    if not isinstance(net, cls):
        raise InputError(f"{path}: expected a {cls.__name__} checkpoint, found {type(net).__name__}")
    return net


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands -----------------------------------------------------------------------

def cmd_generate(args):
    cfg = _config(args)
    out = _out(args)
    data = pipeline.make_datasets(cfg)
    pipeline.save_datasets(out, data, cfg)
    (out / "config.json").write_text(dump_config(cfg))
    print(json.dumps({k: len(getattr(data, k)) for k in vars(data)}))


def cmd_pretrain(args):
    cfg = _config(args)
    out = _out(args)
    policy, info = pipeline.pretrain(cfg, _data(args, cfg))
    save_checkpoint(policy, out / "policy_ref.ckpt")
    (out / "pretrain.json").write_text(json.dumps(info, indent=2))
    print(f"source val dice {info['source_val_dice']:.4f}; checkpoint {out / 'policy_ref.ckpt'}")


def cmd_adapt(args):
    cfg = _config(args)
    ref = _load(args.pretrained, PolicyNet, "pretrained policy checkpoint")
    out = _out(args)
    data = _data(args, cfg)
    manifest, _ = pipeline.run_experiment(cfg, out, ref_policy=ref.freeze(), data=data)
    _print_summary(manifest)


def _print_summary(manifest):
    base, final, cal = manifest["baseline"], manifest["final"], manifest["calibration"]
    print(f"dice {base['dice_avg']:.4f} -> {final['dice_avg']:.4f}; "
          f"validity {base['anatomical_validity']:.3f} -> {final['anatomical_validity']:.3f}; "
          f"ECE {cal['ece']:.4f}; error AUROC {cal['error_auroc']:.3f}")


def cmd_run(args):
    cfg = _config(args)
    out = _out(args)
    manifest, _ = pipeline.run_experiment(cfg, out, data=_data(args, cfg))
    _print_summary(manifest)


def cmd_evaluate(args):
    cfg = _config(args)
    policy = _load(args.policy, PolicyNet, "policy checkpoint")
    data = _data(args, cfg)
    metrics, rows = evaluation.evaluate_policy(policy, data.target_test, cfg.thresholds)
    if args.out:
        evaluation.write_metrics_csv(_out(args) / "metrics.csv", rows, metrics)
    print(json.dumps(pipeline._metrics_dict(metrics), indent=2))


def cmd_calibrate(args):
    cfg = _config(args)
    run = _require(args.run, "run directory")
    manifest_path = _require(run / "manifest.json", "run manifest")
    policy = _load(run / "policy.ckpt", PolicyNet, "policy checkpoint")
    reward_net = _load(run / "reward.ckpt", RewardNet, "reward checkpoint")
    manifest = json.loads(manifest_path.read_text())
    temperature = float(manifest.get("calibration", {}).get("temperature", 1.0))
    data = _data(args, cfg)
    out = _out(args) if args.out else run
    summary, _ = pipeline.calibrate(policy, reward_net, data.target_test, temperature, out)
    print(json.dumps(summary, indent=2))


def cmd_anatomy(args):
    if args.action != "check":
        raise InputError(f"unknown anatomy action {args.action!r}")
    mask = read_pgm(_require(args.mask, "mask file"))
    if mask.max(initial=0) > 2:
        raise InputError(f"{args.mask}: labels must be 0 (background), 1 (LV) or 2 (MYO)")
    cfg = _config(args)
    rep = anatomy.assess_validity(mask.astype(np.uint8), cfg.thresholds)
    print(json.dumps(rep.to_dict(), indent=2))


def cmd_report(args):
    run = _require(args.run, "run directory")
    manifest = json.loads(_require(run / "manifest.json", "run manifest").read_text())
    try:
        paths = pipeline.emit_report(manifest, args.out or run)
    except ValueError as e:
        raise InputError(str(e)) from None
    print(paths["markdown"])


# --- parser ----------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="rl4seg", description="Segmentation domain adaptation with an anatomical reward.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True, data=True):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--ablate", help="comma-separated reward-dataset axes to disable")
        if data:
            sp.add_argument("--data", help="dataset directory written by 'generate' (default: regenerate)")
        return sp

    common(sub.add_parser("generate", help="write source and target datasets"), data=False).set_defaults(fn=cmd_generate)
    common(sub.add_parser("pretrain", help="supervised source training")).set_defaults(fn=cmd_pretrain)
    sp = common(sub.add_parser("adapt", help="adapt a pretrained policy to the target domain"))
    sp.add_argument("--pretrained", required=True, help="policy checkpoint from 'pretrain'")
    sp.set_defaults(fn=cmd_adapt)
    common(sub.add_parser("run", help="pretrain and adapt in one go")).set_defaults(fn=cmd_run)
    sp = common(sub.add_parser("evaluate", help="score a policy on the target test split"), out_required=False)
    sp.add_argument("--policy", required=True)
    sp.set_defaults(fn=cmd_evaluate)
    sp = common(sub.add_parser("calibrate", help="reward-network calibration for a finished run"), out_required=False)
    sp.add_argument("--run", required=True, help="output directory of 'adapt' or 'run'")
    sp.set_defaults(fn=cmd_calibrate)
    sp = sub.add_parser("anatomy", help="anatomical validity of a mask")
    sp.add_argument("action", choices=["check"])
    sp.add_argument("mask")
    sp.add_argument("--config")
    sp.set_defaults(fn=cmd_anatomy)
    sp = sub.add_parser("report", help="markdown/CSV/SVG summary of a run")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (InputError, FormatError, CheckpointError, FileNotFoundError) as e:
        print(f"rl4seg: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except NonFiniteLoss as e:
        out = Path(getattr(args, "out", None) or ".")
        out.mkdir(parents=True, exist_ok=True)
        diag = out / "diagnostics.json"
        diag.write_text(json.dumps({"error": str(e), "what": e.what, "batch_index": e.batch_index}, indent=2))
        print(f"rl4seg: aborted: {e}; diagnostics in {diag}", file=sys.stderr)
        return EXIT_NONFINITE
    return 0


if __name__ == "__main__":
    sys.exit(main())
