"""Command-line interface: generate / train / eval / check / summarize /
dump-attention over a JSON run configuration.

Exit codes: 0 success, 1 verification failure, 2 configuration error
(unknown flags, missing files, invalid values).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import tensor as T
from .checks import run_verification
from .config import build_run_config
from .csff import CsffBlock
from .dca import DifferentialCrossAttention
from .errors import DcaunetError
from .metrics import evaluate_masks, format_report
from .net import DCAUNet
from .train import fit, predict_masks


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="path to a JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path config override (repeatable)")
    parser.add_argument("--out", default=None, help="output directory override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcaunet",
        description="differential cross-attention segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("generate", "write a synthetic dataset (images, masks, manifest)"),
        ("train", "train on the generated dataset, logging losses and checkpoints"),
        ("eval", "evaluate a checkpoint; writes a Dice/Hausdorff report"),
        ("check", "run the verification suite; exit 1 on any failure"),
        ("summarize", "print the parameter/FLOP table per module"),
        ("dump-attention", "export attention and fusion gate maps as graymaps"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        _add_common(cmd)
        if name == "eval":
            cmd.add_argument("--checkpoint", default=None, help="checkpoint file to evaluate")
        if name == "dump-attention":
            cmd.add_argument("--checkpoint", default=None, help="checkpoint file to inspect")
            cmd.add_argument("--sample", type=int, default=0, help="dataset sample index")
            cmd.add_argument("--block", type=int, default=0, help="attention block index")
            cmd.add_argument("--fusion-block", type=int, default=0, help="fusion block index")
            cmd.add_argument("--head", type=int, default=0, help="attention head to export")
    return parser


def _banner(cfg) -> None:
    print(f"config_hash={cfg.config_hash} seed={cfg.seed}")


def cmd_generate(args, cfg) -> int:
    manifest = data_mod.write_dataset(cfg.data_dir, cfg.data_spec, cfg.n_train, cfg.n_val)
    _banner(cfg)
    print(f"wrote {cfg.n_train} train + {cfg.n_val} val samples under {cfg.data_dir}")
    print(f"manifest: {manifest}")
    return 0


def cmd_train(args, cfg) -> int:
    manifest = cfg.data_dir / "manifest.tsv"
    train_set = data_mod.load_split(manifest, "train", cfg.net.num_classes)
    try:
        val_set = data_mod.load_split(manifest, "val", cfg.net.num_classes)
    except DcaunetError:
        val_set = None
    net = DCAUNet(cfg.net, seed=cfg.net_seed)
    result = fit(net, train_set, cfg.train, out_dir=cfg.out, val_set=val_set)
    summary = {
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "best_epoch": result["best"]["epoch"],
        "best_metric": result["best"]["metric"],
        "halted": result["halted"],
        "best_checkpoint": result["best_checkpoint"],
        "last_checkpoint": result["last_checkpoint"],
    }
    with open(cfg.out / "summary.json", "w", encoding="ascii") as handle:
        json.dump(summary, handle, sort_keys=True, indent=2)
    _banner(cfg)
    epochs = [r for r in result["log"] if r["kind"] == "epoch"]
    if epochs:
        print(f"epochs={len(epochs)} final_loss={epochs[-1]['loss']:.6f} "
              f"best_epoch={result['best']['epoch']}")
    print(f"log: {cfg.out / 'train_log.jsonl'}")
    return 0


def _resolve_checkpoint(args, cfg) -> Path:
    candidate = getattr(args, "checkpoint", None) or cfg.checkpoint
    if candidate is None:
        candidate = cfg.out / "best.ckpt"
    candidate = Path(candidate)
    if not candidate.exists():
        raise DcaunetError(f"checkpoint not found: {candidate}")
    return candidate


def cmd_eval(args, cfg) -> int:
    checkpoint = _resolve_checkpoint(args, cfg)
    net = DCAUNet.load(checkpoint)
    manifest = cfg.data_dir / "manifest.tsv"
    dataset = data_mod.load_split(manifest, cfg.eval_split, net.cfg.num_classes)
    predictions = predict_masks(net, dataset.images)
    report = evaluate_masks(list(predictions), list(dataset.masks),
                            net.cfg.num_classes, percentile=cfg.eval_percentile)
    report["config_hash"] = cfg.config_hash
    report["seed"] = cfg.seed
    report["checkpoint"] = str(checkpoint)
    report["split"] = cfg.eval_split
    cfg.out.mkdir(parents=True, exist_ok=True)
    table = format_report(report)
    (cfg.out / "metrics.txt").write_text(table, encoding="ascii")
    per_class = {str(k): v for k, v in report["per_class"].items()}
    json_report = dict(report, per_class=per_class)
    with open(cfg.out / "metrics.json", "w", encoding="ascii") as handle:
        json.dump(json_report, handle, sort_keys=True, indent=2)
    _banner(cfg)
    print(table, end="")
    return 0


def cmd_check(args, cfg) -> int:
    results = run_verification(cfg.seed)
    _banner(cfg)
    failed = 0
    for name, ok, detail in results:
        status = "PASS" if ok else "FAIL"
        print(f"[{status}] {name}: {detail}")
        failed += 0 if ok else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_summarize(args, cfg) -> int:
    net = DCAUNet(cfg.net, seed=cfg.net_seed)
    summary = net.summarize()
    _banner(cfg)
    print(f"{'module':<18}{'params':>12}{'flops':>16}")
    for name, params, flops in summary["per_module"]:
        print(f"{name:<18}{params:>12}{flops:>16}")
    print(f"{'total':<18}{summary['param_count']:>12}{summary['flops_per_forward']:>16}")
    return 0


def _write_map(path: Path, array: np.ndarray) -> dict:
    lo, hi = float(array.min()), float(array.max())
    scale = hi - lo if hi > lo else 1.0
    data_mod.write_pgm(path, (array - lo) / scale, maxval=65535)
    return {"file": path.name, "min": lo, "max": hi, "shape": list(array.shape)}


def cmd_dump_attention(args, cfg) -> int:
    checkpoint = _resolve_checkpoint(args, cfg)
    net = DCAUNet.load(checkpoint)
    manifest = cfg.data_dir / "manifest.tsv"
    if manifest.exists():
        dataset = data_mod.load_split(manifest, "train", net.cfg.num_classes)
        image = dataset.images[args.sample % len(dataset)]
    else:
        image, _ = data_mod.generate(cfg.data_spec, args.sample)
    attn_modules = [m for m in net.modules() if isinstance(m, DifferentialCrossAttention)]
    fusion_modules = [m for m in net.modules() if isinstance(m, CsffBlock)]
    if not 0 <= args.block < len(attn_modules):
        raise DcaunetError(f"--block must be in [0, {len(attn_modules)}), got {args.block}")
    attn = attn_modules[args.block]
    attn.capture = True
    fusion = None
    if fusion_modules:
        if not 0 <= args.fusion_block < len(fusion_modules):
            raise DcaunetError(
                f"--fusion-block must be in [0, {len(fusion_modules)}), got {args.fusion_block}"
            )
        fusion = fusion_modules[args.fusion_block]
        fusion.capture = True

    net.eval()
    with T.no_grad():
        net(T.Tensor(image[None]))

    out_dir = cfg.out / "attention"
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"config_hash": cfg.config_hash, "seed": cfg.seed,
            "checkpoint": str(checkpoint), "block": args.block, "head": args.head,
            "maps": []}
    captured = attn.captured or {}
    head = args.head
    for key in ("s1", "s2", "diff"):
        if key in captured:
            array = captured[key][0, head]
            meta["maps"].append(_write_map(out_dir / f"{key}_block{args.block}_head{head}.pgm",
                                           array))
    if "lambda" in captured:
        meta["lambda"] = captured["lambda"]
    if fusion is not None and fusion.captured:
        gates = fusion.captured
        if "m_c" in gates:
            meta["maps"].append(_write_map(out_dir / f"m_c_fusion{args.fusion_block}.pgm",
                                           gates["m_c"][0, 0]))
        if "m_s" in gates:
            meta["maps"].append(_write_map(out_dir / f"m_s_fusion{args.fusion_block}.pgm",
                                           gates["m_s"][0, ..., 0]))
    with open(out_dir / "meta.json", "w", encoding="ascii") as handle:
        json.dump(meta, handle, sort_keys=True, indent=2)
    _banner(cfg)
    print(f"wrote {len(meta['maps'])} maps under {out_dir}")
    return 0


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "check": cmd_check,
    "summarize": cmd_summarize,
    "dump-attention": cmd_dump_attention,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_run_config(path=args.config, seed=args.seed, out=args.out,
                               overrides=args.override)
        with T.default_dtype(np.float32 if cfg.dtype == "float32" else np.float64):
            return HANDLERS[args.command](args, cfg)
    except DcaunetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
