"""Command-line entry point: ``seam <subcommand> ...``."""
import argparse
import json
import logging
import sys

from .config import TrainConfig
from .pipeline import (
    bitops_report,
    dataset_from_spec,
    diagnostics_csv,
    evaluate,
    format_bitops_table,
    load_datasets,
    load_model,
    margin_diagnostics,
    run_finetune,
    run_pretrain,
    run_search,
    sweep_gamma,
)
from .search import Policy


def _dataset_for_ckpt(spec, manifest):
    import numpy as np

    meta = manifest["meta"]
    stats = (np.asarray(meta["norm_mean"]), np.asarray(meta["norm_std"]))
    return dataset_from_spec(spec, stats=stats if spec.startswith("cifar10") else None)


def cmd_search(args):
    cfg = TrainConfig.load(args.config)
    if args.no_seam:
        cfg = cfg.replace(search={"seam": False})
    policy, report = run_search(cfg)
    policy.save(args.out)
    if args.report:
        report.save(args.report)
    print(f"policy -> {args.out} ({policy.total_bitops:.6f} GBitOPs)")


def cmd_finetune(args):
    cfg = TrainConfig.load(args.config)
    policy = Policy.load(args.policy)
    _, report = run_finetune(cfg, policy, fp_init=args.fp_init, out=args.out)
    if args.report:
        report.save(args.report)
    print(f"checkpoint -> {args.out} (best top-1 {report.summary['best_acc']:.4f})")


def cmd_pretrain(args):
    cfg = TrainConfig.load(args.config)
    _, report = run_pretrain(cfg, out=args.out)
    if args.report:
        report.save(args.report)
    print(f"checkpoint -> {args.out} (top-1 {report.summary['test_acc']:.4f})")


def cmd_eval(args):
    model, manifest = load_model(args.ckpt)
    ds = _dataset_for_ckpt(args.dataset, manifest)
    print(json.dumps(evaluate(model, ds), indent=2))


def cmd_diagnose(args):
    model, manifest = load_model(args.ckpt)
    ds = _dataset_for_ckpt(args.dataset, manifest)
    overall, rows = margin_diagnostics(model, ds, out=args.out)
    sys.stdout.write(diagnostics_csv(overall, rows))


def cmd_bitops(args):
    policy = Policy.load(args.policy) if args.policy else None
    rows, totals = bitops_report(args.preset, policy, num_classes=args.num_classes)
    if args.json:
        print(json.dumps({"rows": rows, "totals": totals}, indent=2))
    else:
        print(format_bitops_table(rows, totals))


def cmd_sweep_gamma(args):
    cfg = TrainConfig.load(args.config)
    chosen, results = sweep_gamma(cfg, args.budget, data=load_datasets(cfg), prefer=args.prefer)
    for r in results:
        print(f"gamma x{r['gamma_mult']:<5} gamma={r['gamma']:.4g} policy={r['gbitops']:.6f} G")
    if chosen is None:
        print(f"no policy meets the budget {args.budget} G", file=sys.stderr)
        return 1
    print(f"chosen gamma={chosen['gamma']:.4g} ({chosen['gbitops']:.6f} G)")
    if args.out:
        chosen["policy"].save(args.out)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="seam", description="Mixed-precision policy search with large-margin regularization")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="search a bit-width policy")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="policy JSON output")
    s.add_argument("--no-seam", action="store_true", help="cross-entropy baseline objective")
    s.add_argument("--report")
    s.set_defaults(func=cmd_search)

    f = sub.add_parser("finetune", help="quantization-aware finetune with a fixed policy")
    f.add_argument("--config", required=True)
    f.add_argument("--policy", required=True)
    f.add_argument("--out", required=True, help="checkpoint output")
    f.add_argument("--fp-init", help="full-precision checkpoint to start from")
    f.add_argument("--report")
    f.set_defaults(func=cmd_finetune)

    t = sub.add_parser("pretrain", help="train the full-precision model")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--report")
    t.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("eval", help="top-1 / per-class accuracy of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True, help="cifar10:DIR[:split] or blobs:k=4,d=16,...")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bitops", help="per-layer MACs and BitOPs")
    b.add_argument("--preset", required=True)
    b.add_argument("--policy")
    b.add_argument("--num-classes", type=int, default=10)
    b.add_argument("--json", action="store_true")
    b.set_defaults(func=cmd_bitops)

    d = sub.add_parser("diagnose", help="feature margin metrics as CSV")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--dataset", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_diagnose)

    g = sub.add_parser("sweep-gamma", help="search at 0.1x/1x/10x balanced gamma and pick one under budget")
    g.add_argument("--config", required=True)
    g.add_argument("--budget", type=float, required=True, help="GBitOPs budget")
    g.add_argument("--out", help="write the chosen policy here")
    g.add_argument("--prefer", choices=("largest", "smallest"), default="largest",
                   help="which qualifying gamma to pick (default: largest)")
    g.set_defaults(func=cmd_sweep_gamma)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args) or 0
    except (OSError, ValueError, KeyError, FloatingPointError) as e:
        # config, dataset, policy and checkpoint errors are all ValueError subclasses
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"seam: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
