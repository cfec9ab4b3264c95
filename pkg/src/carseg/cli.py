"""Command-line entry point: ``carseg <subcommand> [flags] [--key value ...]``.

Training keys come from a flat ``key = value`` config file (``--config``) and
may be overridden on the command line with ``--key value``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import analysis, experiment, gradcheck
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .synth import SceneSpec, read_dataset, write_dataset
from .train import TrainConfig, evaluate_miou, train

MODEL_KEYS = ("channels", "head_kernel", "feature_dim")


class UsageError(Exception):
    pass


def read_config(path) -> Dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    if isinstance(like, tuple):
        return tuple(int(v) for v in value.split(","))
    try:
        return type(like)(value)
    except ValueError:
        raise UsageError(f"cannot parse {value!r} as {type(like).__name__}") from None


def build_configs(settings: Dict[str, str]):
    tc, mc = TrainConfig(), ModelConfig()
    t_over, m_over = {}, {}
    t_keys = set(TrainConfig.keys())
    for key, value in settings.items():
        if key in t_keys:
            t_over[key] = _coerce(value, getattr(tc, key))
        elif key in MODEL_KEYS:
            m_over[key] = _coerce(value, getattr(mc, key))
        else:
            raise UsageError(f"unknown config key {key!r}")
    try:
        tc = replace(tc, **t_over)
        mc = replace(mc, **m_over)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return tc, replace(mc, seed=tc.seed)


def _overrides(extra: Sequence[str]) -> Dict[str, str]:
    out = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise UsageError(f"flag {tok} needs a value")
        out[key.replace("-", "_")] = value
    return out


def _settings(args, extra) -> Dict[str, str]:
    settings = read_config(args.config) if getattr(args, "config", None) else {}
    settings.update(_overrides(extra))
    return settings


def _parse_seeds(text: str) -> List[int]:
    return [int(s) for s in text.split(",") if s.strip()]


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(args, extra):
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    spec = SceneSpec(height=args.height, width=args.width, noise_std=args.noise_std, seed=args.seed)
    counts = {"train": args.train, "test_common": args.test_common, "test_rare": args.test_rare}
    index = write_dataset(args.out, spec, counts)
    print(f"wrote {index}")
    return 0


def cmd_train(args, extra):
    tc, mc = build_configs(_settings(args, extra))
    data = read_dataset(args.data, "train")
    model = build_model(mc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train(model, data, tc, log_path=out / "loss.csv")
    save_checkpoint(model, out / "model.carm")
    print(f"wrote {out / 'model.carm'} and {out / 'loss.csv'}")
    return 0


def cmd_eval(args, extra):
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    model = load_checkpoint(args.checkpoint)
    res = evaluate_miou(model, read_dataset(args.data, args.split))
    lines = ["class,iou"]
    lines += [f"{k},{v:.6f}" for k, v in enumerate(res.iou)]
    lines.append(f"mean,{res.miou:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_gradcheck(args, extra):
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    worst = gradcheck.run_suite(args.seed, args.instances)
    for name, err in worst.items():
        print(f"{name}: max relative error {err:.3e}")
    overall = max(worst.values())
    print(f"max relative error {overall:.3e} (tolerance {gradcheck.TOLERANCE:g})")
    return 0 if overall <= gradcheck.TOLERANCE else 1


def cmd_depmap(args, extra):
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    model = load_checkpoint(args.checkpoint)
    dep = analysis.compute_dependency_map(model, read_dataset(args.data, args.split), raw=args.raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    analysis.render_heatmap(dep.values, out / "depmap.ppm", scale=args.scale)
    print(f"mean off-diagonal dependency {dep.mean_off_diagonal():.6f}")
    return 0


def cmd_pixrel(args, extra):
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    model = load_checkpoint(args.checkpoint)
    samples = read_dataset(args.data, args.split)
    if not 0 <= args.index < len(samples):
        raise UsageError(f"sample index {args.index} out of range (0..{len(samples) - 1})")
    try:
        row, col = (int(v) for v in args.anchor.split(","))
        rel = analysis.compute_relation_map(model, samples[args.index], (row, col), args.index, raw=args.raw)
    except (ValueError, IndexError) as exc:
        raise UsageError(f"bad anchor {args.anchor!r}: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    analysis.render_heatmap(rel.values, out / f"pixrel_{args.index}_{row}_{col}.ppm", scale=args.scale)
    print(f"wrote relation map for sample {args.index} anchor ({row}, {col})")
    return 0


def cmd_compare(args, extra):
    tc, mc = build_configs(_settings(args, extra))
    data = experiment.default_data() if not args.data else {
        split: read_dataset(args.data, split) for split in ("train", "test_common", "test_rare")
    }
    rows = experiment.compare(_parse_seeds(args.seeds), data, tc, mc, workers=args.workers)
    table = experiment.seed_table(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.csv").write_text(experiment.compare_csv(rows))
        (out / "compare.txt").write_text(table + "\n")
    print(experiment.compare_csv(rows), end="")
    print(table)
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="carseg", description="Class-aware regularization toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=experiment.DEFAULT_COUNTS["train"])
    g.add_argument("--test-common", type=int, default=experiment.DEFAULT_COUNTS["test_common"])
    g.add_argument("--test-rare", type=int, default=experiment.DEFAULT_COUNTS["test_rare"])
    g.add_argument("--height", type=int, default=48)
    g.add_argument("--width", type=int, default=48)
    g.add_argument("--noise-std", type=float, default=SceneSpec.noise_std)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model; extra --key value pairs override the config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class IOU and mIOU of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test_common")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every CAR loss")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--instances", type=int, default=20)
    gc.set_defaults(func=cmd_gradcheck)

    for name, fn in (("depmap", cmd_depmap), ("pixrel", cmd_pixrel)):
        d = sub.add_parser(name, help=f"{name} heatmap (PPM + CSV)")
        d.add_argument("--checkpoint", required=True)
        d.add_argument("--data", required=True)
        d.add_argument("--split", default="test_common")
        d.add_argument("--out", required=True)
        d.add_argument("--raw", action="store_true", help="raw dot products instead of cosine")
        d.add_argument("--scale", type=int, default=16 if name == "depmap" else 4)
        if name == "pixrel":
            d.add_argument("--index", type=int, default=0)
            d.add_argument("--anchor", default="24,24", help="row,col")
        d.set_defaults(func=fn)

    c = sub.add_parser("compare", help="baseline vs +CAR across seeds")
    c.add_argument("--seeds", default="0,1,2")
    c.add_argument("--data", help="dataset dir; default generates the synthetic set in memory")
    c.add_argument("--out")
    c.add_argument("--config")
    c.add_argument("--workers", type=int, default=1)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"carseg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
