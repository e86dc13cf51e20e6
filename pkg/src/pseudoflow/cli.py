"""Command-line entry point.

Commands: gen-data, pretrain, ssl-run, cv, eval, viz, grad-audit. Every
command takes --config (YAML or JSON) plus override flags; precedence is
flags > file > defaults, and the effective config is written into the
output directory before any work starts. Relative output/input paths
resolve under $PSEUDOFLOW_RUN_ROOT when it is set.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training
divergence, 4 gradient-audit failure.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from dataclasses import replace

import numpy as np
import yaml

from .config import ConfigError, dump_config, load_config
from .flowcore import EmptyMaskError, FlowFormatError, flow_to_color
from .flowcore import io as fio
from .model import load_checkpoint
from .ssl import kfold_cv
from .ssl import run as ssl_run_loop
from .synthdata import SPLIT_NAMES, DegenerateSceneError, load_dataset, write_dataset
from .tensorcore import NonFiniteError, audit_ops
from .trainer import DivergenceError, evaluate, pretrain

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3
EXIT_AUDIT = 4

RUN_ROOT_ENV = "PSEUDOFLOW_RUN_ROOT"


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage by default; our contract says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _resolve(path: str | None) -> str | None:
    if path is None:
        return None
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _parse_set(items):
    """--set dotted.key=value overrides, values parsed as YAML scalars."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        out[key.strip()] = yaml.safe_load(raw)
    return out


def _load_cfg(args):
    overrides = _parse_set(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    if getattr(args, "iterations", None) is not None:
        overrides["ssl.iterations"] = args.iterations
    return load_config(args.config, overrides)


def _refuse_or_clear(done: bool, target: str, force: bool, what: str) -> bool:
    """True = nothing to do (already complete and not forced)."""
    if done and not force:
        print(f"{what} already complete at {target}; use --force to redo")
        return True
    if force and os.path.exists(target):
        if os.path.isdir(target):
            shutil.rmtree(target)
        else:
            os.remove(target)
    return False


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve(args.out or cfg.paths.data)
    if _refuse_or_clear(os.path.exists(os.path.join(out, "manifest.json")),
                        out, args.force, "dataset"):
        return EXIT_OK
    tmp = out.rstrip(os.sep) + ".tmp"
    shutil.rmtree(tmp, ignore_errors=True)
    os.makedirs(tmp)
    dump_config(cfg, os.path.join(tmp, "config.used.yaml"))
    write_dataset(cfg.data, tmp, threads=cfg.threads)
    if os.path.exists(out):
        shutil.rmtree(out)
    os.rename(tmp, out)
    sizes = cfg.data.sizes()
    print(f"dataset written to {out} "
          f"({', '.join(f'{k}={v}' for k, v in sizes.items())})")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    data_dir = _resolve(args.data or cfg.paths.data)
    out = _resolve(args.out)
    phi_bs = os.path.join(out, "phi_bs.ckpt")
    phi_ours = os.path.join(out, "phi_ours.ckpt")
    if _refuse_or_clear(os.path.exists(phi_bs) and os.path.exists(phi_ours),
                        out, args.force, "pretrain"):
        return EXIT_OK
    os.makedirs(out, exist_ok=True)
    dump_config(cfg, os.path.join(out, "config.used.yaml"))
    train_splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    for s in train_splits:
        if s not in SPLIT_NAMES:
            raise ConfigError(f"unknown split {s!r}; choose from {SPLIT_NAMES}")
    ds = load_dataset(data_dir, splits=train_splits)
    pairs = [p for s in train_splits for p in ds[s]]
    model_kwargs = {f: getattr(cfg.model, f)
                    for f in ("stride", "feat_channels", "refine_steps",
                              "lookup_radius", "hidden_channels",
                              "context_channels", "corr_scaled")}
    log_path = os.path.join(out, "pretrain.jsonl")
    with open(log_path + ".tmp", "w") as fh:
        pretrain(pairs, cfg.seed, cfg.pretrain, cfg.loss,
                 phi_bs + ".tmp", phi_ours + ".tmp", log_fh=fh,
                 model_kwargs=model_kwargs)
    os.replace(phi_bs + ".tmp", phi_bs)
    os.replace(phi_ours + ".tmp", phi_ours)
    os.replace(log_path + ".tmp", log_path)
    print(f"pretrained checkpoints written to {phi_bs} and {phi_ours}")
    return EXIT_OK


def _ssl_complete(run_dir: str, iterations: int) -> bool:
    report = os.path.join(run_dir, "report.jsonl")
    if not os.path.exists(report):
        return False
    with open(report) as fh:
        lines = [json.loads(l) for l in fh if l.strip()]
    if not lines:
        return False
    return len(lines) >= iterations or bool(lines[-1].get("stopped_early"))


def cmd_ssl_run(args) -> int:
    cfg = _load_cfg(args)
    data_dir = _resolve(args.data or cfg.paths.data)
    pre_dir = _resolve(args.pretrain_dir)
    out = _resolve(args.out)
    if _refuse_or_clear(_ssl_complete(out, cfg.ssl.iterations), out,
                        args.force, "ssl run"):
        return EXIT_OK
    phi_bs = os.path.join(pre_dir, "phi_bs.ckpt")
    phi_ours = os.path.join(pre_dir, "phi_ours.ckpt")
    for p in (phi_bs, phi_ours):
        if not os.path.exists(p):
            raise FileNotFoundError(f"missing pretrained checkpoint {p}")
    os.makedirs(out, exist_ok=True)
    dump_config(cfg, os.path.join(out, "config.used.yaml"))
    splits = load_dataset(data_dir, splits=("target_train",
                                            "target_unlabeled",
                                            "target_test"))
    result = ssl_run_loop(splits, phi_bs, phi_ours, cfg.ssl, out,
                          threads=cfg.threads)
    last = result["iterations"][-1] if result["iterations"] else {}
    print(f"ssl run complete: {len(result['iterations'])} iteration(s), "
          f"final test F1-all "
          f"{last.get('test_f1_all', float('nan')):.3f} "
          f"(baseline {result['baseline_test']['f1_all']:.3f}); "
          f"master at {result['final_master']}")
    return EXIT_OK


def cmd_cv(args) -> int:
    cfg = _load_cfg(args)
    data_dir = _resolve(args.data or cfg.paths.data)
    out = _resolve(args.out)
    if _refuse_or_clear(os.path.exists(out), out, args.force, "cv report"):
        return EXIT_OK
    ds = load_dataset(data_dir, splits=("target_train",))
    report = kfold_cv(_resolve(args.ckpt), ds["target_train"], cfg.ssl,
                      threads=cfg.threads)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    with open(out + ".tmp", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(out + ".tmp", out)
    print(f"cv report written to {out}: S_ft={report.s_ft} "
          f"(mean F1 {dict(zip(report.steps, report.mean_curve))})")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    data_dir = _resolve(args.data or cfg.paths.data)
    net, flags = load_checkpoint(_resolve(args.ckpt))
    ds = load_dataset(data_dir, splits=(args.split,))
    ev = evaluate(net, ds[args.split])
    print(f"{'pair':>6s} {'epe':>10s} {'f1_all':>10s}")
    for i, (e, f) in enumerate(zip(ev["per_pair_epe"], ev["per_pair_f1"])):
        print(f"{i:6d} {e:10.4f} {f:10.4f}")
    print(f"{'mean':>6s} {ev['epe']:10.4f} {ev['f1_all']:10.4f}  "
          f"(f1 pooled over split)")
    if args.out:
        out = _resolve(args.out)
        payload = {"split": args.split, "checkpoint_flags": flags, **ev}
        with open(out + ".tmp", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(out + ".tmp", out)
        print(f"report written to {out}")
    return EXIT_OK


def cmd_viz(args) -> int:
    _ = _load_cfg(args) if args.config else None
    data_dir = _resolve(args.data)
    out = _resolve(args.out)
    if _refuse_or_clear(os.path.isdir(out) and bool(os.listdir(out)),
                        out, args.force, "viz output"):
        return EXIT_OK
    net, _flags = load_checkpoint(_resolve(args.ckpt))
    ds = load_dataset(data_dir, splits=(args.split,))
    pairs = ds[args.split]
    if args.limit:
        pairs = pairs[: args.limit]
    tmp = out.rstrip(os.sep) + ".tmp"
    shutil.rmtree(tmp, ignore_errors=True)
    os.makedirs(tmp)
    for i, p in enumerate(pairs):
        pred = net.predict(p.img1, p.img2).astype(np.float64)
        stem = os.path.join(tmp, f"{i:06d}")
        fio.write_image(flow_to_color(pred) / 255.0, stem + "_pred.png")
        fio.write_image(flow_to_color(p.flow) / 255.0, stem + "_gt.png")
        err = np.linalg.norm(pred - p.flow, axis=-1)
        err_vis = np.clip(err / args.err_scale, 0.0, 1.0)
        err_vis[~p.mask] = 0.0
        fio.write_image(err_vis, stem + "_err.png")
    shutil.rmtree(out, ignore_errors=True)
    os.rename(tmp, out)
    print(f"wrote {len(pairs)} visualization triplets to {out}")
    return EXIT_OK


def cmd_grad_audit(args) -> int:
    from .audit import tiny_model_grad_audit

    print("op-level finite-difference audit:")
    failures = []
    try:
        audit_ops(seed=args.seed or 0, verbose=True)
    except AssertionError as e:
        failures.append(str(e))
    print("end-to-end model audit (double precision):")
    try:
        tiny_model_grad_audit(seed=args.seed or 0, verbose=True)
    except AssertionError as e:
        failures.append(str(e))
    if failures:
        for f in failures:
            print(f"AUDIT FAILURE: {f}", file=sys.stderr)
        return EXIT_AUDIT
    print("gradient audit passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p, config=True):
    if config:
        p.add_argument("--config", help="YAML or JSON run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (dotted path)")
    p.add_argument("--seed", type=int, help="root seed override")
    p.add_argument("--threads", type=int,
                   help="worker processes (1 = fully deterministic)")
    p.add_argument("--force", action="store_true",
                   help="redo even if outputs already exist")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pseudoflow",
                     description="semi-supervised optical flow workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the four dataset splits")
    _common(p)
    p.add_argument("--out", help="dataset directory (default: paths.data)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the baseline + ours checkpoints")
    _common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--splits", default="source",
                   help="comma-separated training splits (default: source)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("ssl-run", help="run the iterative pseudo-label loop")
    _common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--pretrain-dir", required=True,
                   help="directory holding phi_bs.ckpt / phi_ours.ckpt")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--iterations", type=int, help="override ssl.iterations")
    p.set_defaults(func=cmd_ssl_run)

    p = sub.add_parser("cv", help="k-fold CV for the finetuning step count")
    _common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--ckpt", required=True, help="checkpoint to finetune from")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("eval", help="EPE / F1-all of a checkpoint on a split")
    _common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--split", default="target_test", choices=SPLIT_NAMES)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", help="optional JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="flow-color PNGs and error maps")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="target_test", choices=SPLIT_NAMES)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--limit", type=int, help="visualize only the first K pairs")
    p.add_argument("--err-scale", type=float, default=3.0,
                   help="error map saturates at this EPE (px)")
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("grad-audit", help="finite-difference gradient audit")
    _common(p, config=False)
    p.set_defaults(func=cmd_grad_audit)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except yaml.YAMLError as e:
        print(f"config parse error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, NonFiniteError) as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FlowFormatError, DegenerateSceneError, EmptyMaskError,
            json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, NotADirectoryError, IsADirectoryError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
