"""Command line entry point: ``tokenprune <subcommand> ...``.

Exit status is 0 on success, 2 on any contract violation (bad config,
shape errors, unreadable inputs) and 3 if training diverges.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import numkit as nk
from .flops import FlopsSpec, model_reduction
from .harness import data as data_mod
from .harness.config import RunConfig, desk_config

log = logging.getLogger("tokenprune")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else desk_config()
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_or_gen(path, seed, count, start=0):
    if path:
        return data_mod.load_dataset(path)
    return data_mod.gen_dataset(seed, count, start=start)


def cmd_gen_data(args) -> None:
    ds = data_mod.gen_dataset(args.seed, args.count, start=args.start)
    data_mod.save_dataset(args.out, ds)
    print(f"wrote {len(ds)} instances to {args.out}")


def _finish_run(out: Path, model, metrics, plot: bool = True) -> None:
    from .harness.sweep import write_metrics

    write_metrics(metrics, out)
    if plot and model.log:
        from .harness.plots import plot_training

        plot_training(model.log, out / "training.png")
    summary = {k: v for k, v in metrics.items() if k != "records"}
    print(json.dumps(summary, sort_keys=True))


def cmd_train(args) -> None:
    from .harness.evaluate import evaluate
    from .harness.sweep import EVAL_START
    from .harness.train import train

    cfg = _config(args)
    out = _out(args)
    train_set = _load_or_gen(args.data, cfg.dataset_seed, cfg.n_train)
    eval_set = _load_or_gen(args.eval_data, cfg.dataset_seed, cfg.n_eval, EVAL_START)
    model = train(cfg, train_set, out_dir=out, progress=args.verbose, cache_dir=args.cache)
    _finish_run(out, model, evaluate(model, eval_set, args.mode))


def cmd_eval(args) -> None:
    from .harness.evaluate import evaluate
    from .harness.sweep import EVAL_START
    from .harness.train import load_model

    model = load_model(args.checkpoint)
    cfg = model.config
    eval_set = _load_or_gen(args.data, cfg.dataset_seed if args.seed is None else args.seed,
                            args.count or cfg.n_eval, EVAL_START)
    out = _out(args)
    cfg.save(out / "config.json")
    _finish_run(out, model, evaluate(model, eval_set, args.mode), plot=False)


def _parse_schedule(text: str) -> list[tuple[int, int]]:
    pairs = []
    for part in text.split(","):
        site, _, keep = part.partition(":")
        if not keep:
            raise ValueError(f"schedule entry {part!r} must look like site:keep")
        pairs.append((int(site), int(keep)))
    return pairs


def cmd_baseline(args) -> None:
    from .harness.sweep import fixed_ratio_baseline

    cfg = _config(args)
    out = _out(args)
    model, metrics = fixed_ratio_baseline(cfg, _parse_schedule(args.schedule), out, args.cache)
    _finish_run(out, model, metrics)


def _parse_values(param: str, text: str) -> list:
    if param == "sites":
        return [[int(s) for s in group.split("+")] for group in text.split(",")]
    return [float(v) for v in text.split(",")]


def cmd_sweep(args) -> None:
    from .harness.plots import plot_sweep
    from .harness.sweep import summarize, sweep

    cfg = _config(args)
    out = _out(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    rows = sweep(cfg, args.param, _parse_values(args.param, args.values), seeds, out, args.cache, args.mode)
    summary = summarize(rows)
    plot_sweep(summary, out / "sweep.png")
    for r in summary:
        print(json.dumps(r, sort_keys=True))


def cmd_flops(args) -> None:
    doc = json.loads(Path(args.plan).read_text())
    report = model_reduction(FlopsSpec.from_dict(doc)).to_dict()
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_visualize(args) -> None:
    from .harness.plots import plot_masks
    from .harness.train import load_model
    from .harness.visualize import override_thresholds, visualize_masks, write_renders
    from contextlib import nullcontext

    model = load_model(args.checkpoint)
    if args.data:
        ds = data_mod.load_dataset(args.data)
        if not 0 <= args.index < len(ds):
            raise ValueError(f"index {args.index} outside dataset of {len(ds)}")
        inst = ds[args.index]
    else:
        seed = model.config.dataset_seed if args.seed is None else args.seed
        inst = data_mod.gen_dataset(seed, 1, start=args.index)[0]
    if model.pruner is None:
        raise ValueError("checkpoint has no pruning sites to visualize")
    ctx = nullcontext()
    if args.theta is not None:
        theta_r, theta_s = (float(v) for v in args.theta.split(","))
        ctx = override_thresholds(model.pruner, theta_r, theta_s)
    with ctx:
        renders = visualize_masks(model, inst)
    out = _out(args)
    stem = f"instance{inst.index}"
    write_renders(renders, out, stem)
    plot_masks(renders, out / f"{stem}.png", title=f"{inst.task} instance {inst.index}")
    for r in renders:
        print(f"site {r.site} theta_r={r.theta_r} theta_s={r.theta_s} kept={len(r.retained)}")
        print(r.ascii)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tokenprune", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, out=True):
        if config:
            sp.add_argument("--config", help="RunConfig JSON (defaults to the desk config)")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen-data", help="write a synthetic dataset as JSONL")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--start", type=int, default=0)
    g.add_argument("--out", required=True, help="output JSONL file")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train, then evaluate on held-out data")
    common(t)
    t.add_argument("--data", help="training JSONL (default: generated from the config)")
    t.add_argument("--eval-data")
    t.add_argument("--mode", choices=("soft", "hard"), default="hard")
    t.add_argument("--cache", help="directory for cached pretrained bases")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e, config=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--count", type=int)
    e.add_argument("--mode", choices=("soft", "hard"), default="hard")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("baseline", help="fixed-ratio top-k baseline")
    common(b)
    b.add_argument("--schedule", required=True, help="site:keep pairs, e.g. 1:32,4:16,6:8")
    b.add_argument("--cache")
    b.set_defaults(func=cmd_baseline)

    s = sub.add_parser("sweep", help="sweep lambda_atp, n_target or site placement")
    common(s)
    s.add_argument("--param", required=True, choices=("lambda_atp", "n_target", "sites"))
    s.add_argument("--values", required=True, help="comma list; for sites use 1+4+6,2+5")
    s.add_argument("--seeds", help="comma list of seeds")
    s.add_argument("--mode", choices=("soft", "hard"), default="hard")
    s.add_argument("--cache")
    s.set_defaults(func=cmd_sweep)

    f = sub.add_parser("flops", help="FLOPs report for a pruning plan document")
    f.add_argument("--plan", required=True, help="JSON with n_layers, d, m, L0 and plan")
    f.add_argument("--out", help="also write the report here")
    f.set_defaults(func=cmd_flops)

    v = sub.add_parser("visualize", help="render retained cells per site")
    common(v, config=False)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data")
    v.add_argument("--index", type=int, default=0)
    v.add_argument("--theta", help="override thresholds as theta_r,theta_s")
    v.set_defaults(func=cmd_visualize)
    return p


def main(argv=None) -> int:
    from .harness.train import DivergenceError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, TypeError, OSError, json.JSONDecodeError, nk.NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
