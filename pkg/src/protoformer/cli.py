"""Command-line entry point: ``protoformer <subcommand> ...``.

Exit status is 0 on success, 1 on a runtime failure (one-line diagnostic on
stderr) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import parse_config


def _config(args, **extra):
    overrides = {k: v for k, v in extra.items() if v is not None}
    return parse_config(args.config, overrides)


def cmd_train(args) -> int:
    from .training import train_run

    config = _config(args, seed=args.seed, fold=args.fold, shots=args.shots, steps=args.steps, manifest=args.manifest)
    if not config.manifest:
        raise ValueError("no dataset: set 'manifest' in the config or pass --manifest")
    out = Path(args.out or config.out_dir)
    result = train_run(config, config.manifest, out_dir=out)
    print(f"trained {config.steps} steps in {result.seconds:.1f}s; final loss {result.losses[-1] if result.losses else float('nan'):.4f}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"loss trace: {out / 'loss.csv'}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import read_manifest, split_folds
    from .metrics import evaluate_fold, format_report, write_report_csv
    from .rng import SplitMix64

    reports = []
    for i, ckpt in enumerate(args.checkpoint):
        net = load_checkpoint(ckpt)
        config = net.config
        if args.config:
            config = parse_config(args.config)
        manifest_path = args.manifest or config.manifest
        if not manifest_path:
            raise ValueError("no dataset: set 'manifest' in the config or pass --manifest")
        manifest = read_manifest(manifest_path)
        split = split_folds(manifest.num_classes, net.config.num_folds, net.config.fold)
        shots = args.shots or config.shots
        episodes = args.episodes or config.eval_episodes
        dump = Path(args.dump_masks) / f"fold{split.fold_index}" if args.dump_masks else None
        reports.append(evaluate_fold(net, split, manifest, shots, episodes, SplitMix64(args.seed).spawn(i), dump))
    text = format_report(reports)
    print(text)
    out = Path(args.out)
    write_report_csv(out.with_suffix(".csv"), reports)
    out.with_suffix(".txt").write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_gen_data(args) -> int:
    from .data import SyntheticSpec, gen_synthetic_dataset

    spec = SyntheticSpec.from_file(args.spec) if args.spec else SyntheticSpec()
    if args.seed is not None:
        spec.seed = args.seed
    manifest = gen_synthetic_dataset(spec, args.out)
    print(f"wrote {len(manifest.records)} samples of {len(spec.classes)} classes to {args.out}")
    return 0


def cmd_bench_attn(args) -> int:
    from .cost import cost_model, format_cost_model, measure_attention

    print(f"C={args.dim} N_q={args.nq} N_s={args.ns} heads={args.heads}")
    print(format_cost_model(cost_model(args.dim, args.nq, args.ns, args.heads)))
    if args.measure:
        timings = measure_attention(args.dim, args.nq, args.ns)
        for name, seconds in timings.items():
            print(f"measured {name}: {seconds * 1e3:.3f} ms")
    return 0


def cmd_count_params(args) -> int:
    from .cost import count_params

    config = _config(args, dim=args.dim, decoder_layers=args.layers)
    print(count_params(config, include_backbone=args.include_backbone))
    return 0


def cmd_grad_check(args) -> int:
    from .verify import run_suite

    results, seconds = run_suite(args.seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        print(f"{status} {r.name:40s} max_rel_err={r.report.max_error:.2e} checked={r.report.checked} skipped={r.report.skipped}")
    worst = max(r.report.max_error for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} passed; worst {worst:.2e}; {seconds:.1f}s")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoformer", description="Few-shot segmentation with a prototype Query.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="episodic training on one fold")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--fold", type=int)
    p.add_argument("--shots", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="output directory (default: out_dir from the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out fold evaluation of one or more checkpoints")
    p.add_argument("--checkpoint", required=True, nargs="+", help="checkpoint directories, one per fold")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--episodes", type=int)
    p.add_argument("--shots", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="report", help="report path stem; .csv and .txt are written")
    p.add_argument("--dump-masks", metavar="DIR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-data", help="render the synthetic shape dataset")
    p.add_argument("--spec")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("bench-attn", help="analytic attention cost of both schemes")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--nq", type=int, default=3600)
    p.add_argument("--ns", type=int, default=3600)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--measure", action="store_true", help="also time both kernels")
    p.set_defaults(func=cmd_bench_attn)

    p = sub.add_parser("count-params", help="learnable parameter count")
    p.add_argument("--config")
    p.add_argument("--dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--include-backbone", action="store_true")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("grad-check", help="gradient verification of every op and the full network")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001  one-line diagnostic for any failure
        print(f"protoformer {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
