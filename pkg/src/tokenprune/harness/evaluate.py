"""Accuracy, token counts and FLOPs for a trained model."""
from __future__ import annotations

from collections import defaultdict

import numpy as np
import torch

from .. import numkit as nk
from ..flops import FlopsSpec, model_reduction
from ..objective import average_token_count, states_average_tokens
from .data import FINE_TASKS, to_batch
from .train import TrainedModel, forward_batch


def _split_accuracy(correct, tasks) -> dict:
    out = {"accuracy": float(np.mean(correct))}
    by = defaultdict(list)
    for ok, task in zip(correct, tasks):
        by[task].append(ok)
        by["fine" if task in FINE_TASKS else "coarse"].append(ok)
    for key, vals in sorted(by.items()):
        out[f"accuracy_{key}"] = float(np.mean(vals))
    return out


def evaluate(model: TrainedModel, dataset, mode: str = "hard", batch_size: int = 64) -> dict:
    """``mode='soft'`` runs the batched train-mode path; ``'hard'`` drops tokens per instance."""
    if mode not in ("soft", "hard"):
        raise ValueError("mode must be 'soft' or 'hard'")
    with nk.precision(model.config.precision), torch.no_grad():
        return _evaluate(model, dataset, mode, batch_size)


def _evaluate(model: TrainedModel, dataset, mode: str, batch_size: int) -> dict:
    cfg = model.config.model
    batch = to_batch(dataset)
    pruner = model.pruner
    sites = list(pruner.sites) if pruner is not None else []
    correct, per_instance_nbar, per_site, flops_pruned = [], [], [], []
    records = []
    for start in range(0, len(batch), batch_size):
        sub = batch.select(range(start, min(start + batch_size, len(batch))))
        result = forward_batch(model.decoder, pruner, sub, "train" if mode == "soft" else "infer")
        pred = result.logits[:, -1].argmax(-1)
        correct.extend((pred == sub.answers).tolist())
        if mode == "soft":
            counts = ([s.cumulative_mask.sum(-1) for s in result.states])
            nbar = (states_average_tokens(result.states, cfg.n_layers, cfg.n_vision)
                    if result.states else torch.full((len(sub),), float(cfg.n_vision)))
        else:
            counts = [torch.tensor([len(r) for r in s.retained_indices], dtype=torch.float64)
                      for s in result.states]
            nbar = result.token_trace.mean(-1)
        per_instance_nbar.extend(nbar.tolist())
        kept = torch.stack(counts, -1).tolist() if counts else [[] for _ in range(len(sub))]
        per_site.extend(kept)
        for b, row in enumerate(kept):
            plan = list(zip(sites, [int(round(v)) for v in row])) if mode == "hard" else []
            if mode == "hard":
                flops_pruned.append(model_reduction(FlopsSpec(
                    cfg.n_layers, cfg.d_model, cfg.d_ff, cfg.n_vision, plan)).pruned_total)
            rec = {"index": start + b, "task": sub.tasks[b], "correct": bool(pred[b] == sub.answers[b]),
                   "pred": int(pred[b]), "answer": int(sub.answers[b]),
                   "n_bar": float(nbar[b]), "retained": [float(v) for v in row]}
            if mode == "hard":
                rec["flops_pruned"] = flops_pruned[-1]
            records.append(rec)
    metrics = _split_accuracy(correct, batch.tasks)
    metrics["mode"] = mode
    metrics["n_bar"] = float(np.mean(per_instance_nbar))
    for tag in ("fine", "coarse"):
        vals = [v for v, t in zip(per_instance_nbar, batch.tasks) if (t in FINE_TASKS) == (tag == "fine")]
        if vals:
            metrics[f"n_bar_{tag}"] = float(np.mean(vals))
    metrics["retained_per_site"] = (np.mean(per_site, axis=0).tolist() if sites else [])
    metrics["sites"] = sites
    baseline = model_reduction(FlopsSpec(cfg.n_layers, cfg.d_model, cfg.d_ff, cfg.n_vision, [])).baseline_total
    if mode == "hard":
        metrics["flops_reduction"] = 1.0 - float(np.mean(flops_pruned)) / baseline
        for tag in ("fine", "coarse"):
            vals = [f for f, t in zip(flops_pruned, batch.tasks) if (t in FINE_TASKS) == (tag == "fine")]
            if vals:
                metrics[f"flops_reduction_{tag}"] = 1.0 - float(np.mean(vals)) / baseline
    else:
        mean_plan = [(s, min(cfg.n_vision, round(v))) for s, v in zip(sites, metrics["retained_per_site"])]
        metrics["flops_reduction"] = model_reduction(FlopsSpec(
            cfg.n_layers, cfg.d_model, cfg.d_ff, cfg.n_vision, mean_plan)).reduction_fraction
    metrics["n"] = len(correct)
    metrics["records"] = records
    return metrics


def recount_average_tokens(retained_per_instance, sites, n_layers, n_vision) -> list[float]:
    """Independent per-instance layer walk used to cross-check reported N-bar."""
    out = []
    for row in retained_per_instance:
        count, total = n_vision, 0
        for layer in range(n_layers):
            if layer in sites:
                count = row[sites.index(layer)]
            total += count
        out.append(total / n_layers)
    return out
