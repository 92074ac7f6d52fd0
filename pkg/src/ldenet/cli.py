"""Command-line interface: ``ldenet <subcommand> [flags]``.

Every failure exits nonzero and prints one JSON line to stderr of the form
``{"error": "<ExceptionType>", "message": "..."}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import dump_config, load_config
from .data import load_dataset, load_png, save_dataset, save_png, synth_dataset
from .errors import CheckpointError, ConfigError, DataError
from .losses import psnr, ssim
from .models import LDENet, ModelConfig, light_enhancer_count, light_param_sweep, param_breakdown
from .training import (TrainConfig, content_gap, enhance_image, eval_cross_reconstruction, train_disentangle,
                       train_enhance)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CHECK_FAILED = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _error_line("UsageError", message)
        raise SystemExit(EXIT_USAGE)


def _error_line(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def _resolve(args) -> tuple[ModelConfig, TrainConfig]:
    model_cfg, train_cfg = load_config(getattr(args, "config", None))
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["total_steps"] = args.steps
    if overrides:
        train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), **overrides})
    return model_cfg, train_cfg


def _announce(model_cfg: ModelConfig, train_cfg: TrainConfig) -> None:
    print("# resolved config")
    print(dump_config(model_cfg, train_cfg))
    print(f"seed = {train_cfg.seed}")


def _dataset(args, train_cfg: TrainConfig):
    if args.data is None:
        print(f"no --data given; using 4 synthetic {train_cfg.patch}x{train_cfg.patch} pairs (seed {train_cfg.seed})")
        return synth_dataset(4, train_cfg.patch, train_cfg.seed)
    return load_dataset(args.data)


def _model_from(ckpt_path) -> tuple[LDENet, object]:
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.model_config is None:
        raise CheckpointError(f"{ckpt_path} carries no model config")
    model = LDENet(ckpt.model_config)
    ckpt.apply_to(model)
    return model, ckpt


def cmd_synth(args) -> int:
    pairs = synth_dataset(args.n, args.size, args.seed)
    save_dataset(pairs, args.out)
    print(f"wrote {len(pairs)} pairs of {args.size}x{args.size} to {args.out} (seed {args.seed})")
    return EXIT_OK


def cmd_train_dis(args) -> int:
    model_cfg, train_cfg = _resolve(args)
    _announce(model_cfg, train_cfg)
    dataset = _dataset(args, train_cfg)
    model = LDENet(model_cfg, train_cfg.seed)
    resume = load_checkpoint(args.resume) if args.resume else None
    trace = args.trace or str(Path(args.out).with_suffix(".trace.jsonl"))
    result = train_disentangle(dataset, model, train_cfg, resume=resume, trace_path=trace, checkpoint_path=args.out)
    last = result.trace[-1] if result.trace else {}
    print(f"saved {args.out}; final total {last.get('total', float('nan')):.6f}; trace {trace}")
    return EXIT_OK


def cmd_train_enh(args) -> int:
    model_cfg, train_cfg = _resolve(args)
    if args.ckpt is None and args.resume is None:
        raise CheckpointError("train-enh needs a stage-1 checkpoint (--ckpt)")
    stage1 = load_checkpoint(args.ckpt) if args.ckpt else None
    if stage1 is not None and stage1.model_config is not None:
        if args.config is not None and stage1.model_config != model_cfg:
            raise ConfigError("model config differs from the stage-1 checkpoint's")
        model_cfg = stage1.model_config
    _announce(model_cfg, train_cfg)
    dataset = _dataset(args, train_cfg)
    model = LDENet(model_cfg, train_cfg.seed)
    resume = load_checkpoint(args.resume) if args.resume else None
    trace = args.trace or str(Path(args.out).with_suffix(".trace.jsonl"))
    result = train_enhance(dataset, model, train_cfg, mode=args.mode, stage1=stage1, resume=resume,
                           trace_path=trace, checkpoint_path=args.out)
    last = result.trace[-1] if result.trace else {}
    print(f"saved {args.out}; final l_enh {last.get('l_enh', float('nan')):.6f}; trace {trace}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    model, _ = _model_from(args.ckpt)
    src, dst = Path(args.inp), Path(args.out)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise DataError(f"no PNG images in {src}")
        targets = [(f, dst / f.name) for f in files]
    else:
        targets = [(src, dst)]
    for a, b in targets:
        save_png(enhance_image(model, load_png(a), args.mode), b)
        print(f"{a} -> {b}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pairs = load_dataset(args.data)
    model = _model_from(args.ckpt)[0] if args.ckpt else None
    rows = []
    for pair in pairs:
        out = enhance_image(model, pair.low, args.mode) if model is not None else pair.low
        rows.append((pair.id, psnr(out, pair.normal), ssim(out, pair.normal)))
    print(f"{'id':<16} {'PSNR':>9} {'SSIM':>8}")
    for name, p, s in rows:
        print(f"{name:<16} {p:9.4f} {s:8.5f}")
    print(f"{'mean':<16} {np.mean([r[1] for r in rows]):9.4f} {np.mean([r[2] for r in rows]):8.5f}")
    return EXIT_OK


def cmd_swap_eval(args) -> int:
    model, ckpt = _model_from(args.ckpt)
    pairs = load_dataset(args.data) if args.data else synth_dataset(4, 64, (ckpt.train_config or {}).get("seed", 42))
    for name, value in eval_cross_reconstruction(pairs, model):
        print(f"{name:<28} {value:9.4f} dB")
    print(f"{'mean |C_l - C_t|':<28} {content_gap(pairs, model):9.6f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradsuite import run_suite, worst

    results = run_suite(seed=args.seed, max_samples=args.samples, names=args.only)
    if not results:
        raise ConfigError(f"no gradient case matches {args.only}")
    for r in results:
        print(f"{'ok ' if r.ok else 'BAD'} {r.name:<32} rel.err {r.error:.3e} (tol {r.tol:.0e}) {r.seconds:6.2f}s")
    bad = worst(results)
    if not all(r.ok for r in results):
        _error_line("GradCheckFailed", f"worst offender {bad.name!r}: rel.err {bad.error:.3e} >= {bad.tol:.0e}")
        return EXIT_CHECK_FAILED
    print(f"all {len(results)} cases pass; worst {bad.name!r} at {bad.error:.3e}")
    return EXIT_OK


def cmd_param_count(args) -> int:
    model_cfg, _ = load_config(args.config)
    model = LDENet(model_cfg)
    for name, n in param_breakdown(model).items():
        print(f"{name:<8} {n:>10,d}")
    print(f"{'total':<8} {model.param_count():>10,d}")
    print(f"light enhancer closed form: {light_enhancer_count(model_cfg.c, model_cfg.light_c):,d}")
    if args.sweep:
        c, n, _ = light_param_sweep()
        print(f"light enhancer nearest 50k: c = light_c = {c} -> {n:,d} parameters")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ldenet", description="Latent disentanglement low-light enhancement.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every training step")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_synth)

    for name, func, help_ in (("train-dis", cmd_train_dis, "stage 1: disentangler + reconstructor"),
                              ("train-enh", cmd_train_enh, "stage 2: enhancer on frozen stage-1 weights")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--data", help="directory with low/ and normal/ (default: synthetic pairs)")
        p.add_argument("--config", help="INI file with [model] and [train] sections")
        p.add_argument("--seed", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--out", required=True, help="checkpoint path to write")
        p.add_argument("--resume", help="checkpoint of this stage to continue from")
        p.add_argument("--trace", help="JSON-lines loss trace (default: next to --out)")
        if name == "train-enh":
            p.add_argument("--ckpt", help="stage-1 checkpoint")
            p.add_argument("--mode", choices=LDENet.MODES, default="full")
        p.set_defaults(func=func)

    p = sub.add_parser("enhance", help="enhance one PNG or a directory of PNGs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=LDENet.MODES, default="full")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="PSNR/SSIM table for a paired directory")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="enhance low images first (default: compare low with normal)")
    p.add_argument("--mode", choices=LDENet.MODES, default="full")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("swap-eval", help="four-row cross-reconstruction report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.set_defaults(func=cmd_swap_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=12, help="coordinates sampled per tensor")
    p.add_argument("--only", nargs="+", metavar="CASE", help="run only the named cases")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("param-count", help="parameter counts per submodule")
    p.add_argument("--config")
    p.add_argument("--sweep", action="store_true", help="also find the light enhancer width nearest 50k")
    p.set_defaults(func=cmd_param_count)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    warnings.simplefilter("default")
    try:
        return args.func(args)
    except (ConfigError, DataError, CheckpointError, ValueError, OSError, FloatingPointError,
            RuntimeError) as exc:
        _error_line(type(exc).__name__, str(exc))
        return EXIT_FAILURE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
