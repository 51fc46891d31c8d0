"""Fixed-ratio baselines and parameter sweeps over full train/evaluate runs."""
from __future__ import annotations

import csv
import json
import logging
import statistics
import warnings
from dataclasses import replace
from pathlib import Path

from ..atp import AtpPlan
from ..objective import average_token_count
from .config import RunConfig
from .data import gen_dataset
from .evaluate import evaluate
from .train import TrainedModel, train

log = logging.getLogger(__name__)

EVAL_START = 1_000_000  # eval instances live at a disjoint index range
SWEEPABLE = ("lambda_atp", "n_target", "sites")
SPLITS = ("all", "fine", "coarse")


def datasets(config: RunConfig):
    """Train and held-out eval sets, both determined by the config's data seed."""
    seed = config.dataset_seed
    return (gen_dataset(seed, config.n_train),
            gen_dataset(seed, config.n_eval, start=EVAL_START))


def run(config: RunConfig, out_dir=None, cache_dir=None, mode: str = "hard",
        data=None) -> tuple[TrainedModel, dict]:
    """Train then evaluate one config; write artifacts under ``out_dir`` if given."""
    train_set, eval_set = data if data is not None else datasets(config)
    model = train(config, train_set, out_dir=out_dir, cache_dir=cache_dir)
    metrics = evaluate(model, eval_set, mode)
    if out_dir is not None:
        write_metrics(metrics, Path(out_dir))
    return model, metrics


def write_metrics(metrics: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in metrics["records"]:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    summary = {k: v for k, v in metrics.items() if k != "records"}
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k in sorted(summary):
            v = summary[k]
            w.writerow([k, json.dumps(v) if isinstance(v, (list, dict)) else v])


# ---------------------------------------------------------------- fixed ratio

def clamp_schedule(schedule, n_vision: int) -> list[tuple[int, int]]:
    """Keep counts can only shrink along the sites; larger requests are clamped."""
    out, surviving = [], n_vision
    for site, keep in sorted((int(s), int(k)) for s, k in schedule):
        if keep < 1:
            raise ValueError(f"keep count at site {site} must be at least 1")
        if keep > surviving:
            warnings.warn(f"keep count {keep} at site {site} exceeds {surviving} surviving tokens; clamped",
                          stacklevel=2)
            keep = surviving
        out.append((site, keep))
        surviving = keep
    return out


def fixed_plan(schedule, n_vision: int, base: AtpPlan | None = None) -> AtpPlan:
    sched = clamp_schedule(schedule, n_vision)
    base = base or AtpPlan()
    return replace(base, sites=tuple(s for s, _ in sched), strategy="fixed",
                   keep_counts=tuple(k for _, k in sched))


def fixed_ratio_baseline(config: RunConfig, schedule, out_dir=None, cache_dir=None,
                         data=None) -> tuple[TrainedModel, dict]:
    """Top-k on the redundancy score at each site, otherwise trained exactly like ATP."""
    plan = fixed_plan(schedule, config.model.n_vision, config.plan)
    return run(config.with_(plan=plan), out_dir, cache_dir, "hard", data)


def ratio_schedule(sites, ratio: float, n_vision: int) -> list[tuple[int, int]]:
    """Each site drops ``ratio`` of the tokens that reach it."""
    out, keep = [], float(n_vision)
    for s in sites:
        keep *= 1.0 - ratio
        out.append((s, max(1, round(keep))))
    return out


SHAPES = {
    "constant": lambda j: 1.0,
    "halving": lambda j: 0.5 ** j,
    "front": lambda j: 1.0 if j == 0 else 0.25,
}


def matched_schedules(sites, n_vision: int, n_layers: int, target: float, tol: float = 0.05) -> dict:
    """Fixed schedules of several shapes whose average token count is within ``tol`` of ``target``.

    For each shape the overall scale is searched over integer leading keep
    counts; the closest match is kept if it falls inside the band.
    """
    found = {}
    for name, shape in SHAPES.items():
        best = None
        for lead in range(1, n_vision + 1):
            keeps = [max(1, round(lead * shape(j))) for j in range(len(sites))]
            keeps = [min(k, keeps[max(0, j - 1)]) if j else k for j, k in enumerate(keeps)]
            nbar = average_token_count(list(sites), keeps, n_layers, n_vision)
            if best is None or abs(nbar - target) < abs(best[1] - target):
                best = (keeps, nbar)
        if abs(best[1] - target) <= tol * target:
            found[name] = list(zip(sites, best[0]))
    return found


# ---------------------------------------------------------------- sweeps

def apply_setting(config: RunConfig, param: str, value) -> RunConfig:
    if param == "lambda_atp":
        return config.with_(budget=replace(config.budget, lambda_atp=float(value)))
    if param == "n_target":
        return config.with_(budget=replace(config.budget, n_target=float(value)))
    if param == "sites":
        plan = config.plan or AtpPlan()
        sites = tuple(int(s) for s in (value if isinstance(value, (list, tuple)) else [value]))
        keeps = plan.keep_counts
        if keeps is not None:
            keeps = tuple(keeps[j] if j < len(keeps) else keeps[-1] for j in range(len(sites)))
        return config.with_(plan=replace(plan, sites=sites, keep_counts=keeps))
    raise ValueError(f"cannot sweep {param!r}; choose from {SWEEPABLE}")


def _rows(param, value, seed, metrics) -> list[dict]:
    rows = []
    for split in SPLITS:
        sfx = "" if split == "all" else f"_{split}"
        if f"accuracy{sfx}" not in metrics:
            continue
        rows.append({
            "param": param, "setting": json.dumps(value), "seed": seed, "split": split,
            "accuracy": metrics[f"accuracy{sfx}"],
            "n_bar": metrics.get(f"n_bar{sfx}", metrics["n_bar"]),
            "flops_reduction": metrics.get(f"flops_reduction{sfx}", metrics["flops_reduction"]),
        })
    return rows


def sweep(config: RunConfig, param: str, values, seeds=None, out_dir=None, cache_dir=None,
          mode: str = "hard") -> list[dict]:
    """Train/evaluate every (setting, seed); one row per fine/coarse/all split."""
    values = list(values)
    if len(values) < 2:
        raise ValueError("a sweep needs at least two settings")
    seeds = [config.seed] if seeds is None else list(seeds)
    out = Path(out_dir) if out_dir is not None else None
    rows, done = [], {}
    for value in values:
        for seed in seeds:
            cfg = apply_setting(config.with_(seed=seed), param, value)
            key = cfg.to_json()
            if key not in done:
                run_dir = None if out is None else out / f"{param}={_slug(value)}" / f"seed{seed}"
                log.info("sweep %s=%s seed %d", param, value, seed)
                _, metrics = run(cfg, run_dir, cache_dir, mode)
                done[key] = metrics
            rows.extend(_rows(param, value, seed, done[key]))
    if out is not None:
        write_table(rows, out / "sweep.csv")
        write_table(summarize(rows), out / "sweep_summary.csv")
        config.save(out / "config.json")
    return rows


def summarize(rows) -> list[dict]:
    """Median over seeds for every (setting, split)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["param"], r["setting"], r["split"]), []).append(r)
    out = []
    for (param, setting, split), rs in groups.items():
        out.append({"param": param, "setting": setting, "split": split, "n_seeds": len(rs),
                    **{k: statistics.median(r[k] for r in rs) for k in ("accuracy", "n_bar", "flops_reduction")}})
    return out


def write_table(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _slug(value) -> str:
    if isinstance(value, (list, tuple)):
        return "-".join(str(v) for v in value)
    return str(value)
