"""Training loop for the decoder with (optionally) pruning sites."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .. import numkit as nk
from ..atp import Pruner
from ..decoder import Decoder, load_into, read_checkpoint, save_checkpoint
from ..objective import budget_loss
from .config import RunConfig
from .data import Batch, dumps, to_batch

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainedModel:
    config: RunConfig
    decoder: Decoder
    pruner: Pruner | None
    log: list[dict] = field(default_factory=list)

    def save(self, path) -> None:
        modules = {"decoder": self.decoder}
        if self.pruner is not None:
            modules["pruner"] = self.pruner
        save_checkpoint(path, modules, self.config.to_dict())


def build_model(config: RunConfig) -> tuple[Decoder, Pruner | None]:
    with nk.precision(config.precision):
        return _build_model(config)


def _build_model(config: RunConfig) -> tuple[Decoder, Pruner | None]:
    torch.manual_seed(config.seed)
    decoder = Decoder(config.model, seed=config.seed)
    pruner = None
    if config.plan is not None and config.plan.sites:
        pruner = Pruner(config.plan, config.model.grid, seed=config.seed)
    if config.init_checkpoint:
        _, arrays = read_checkpoint(config.init_checkpoint)
        load_into(decoder, arrays, "decoder")
        if pruner is not None and any(k.startswith("pruner/") for k in arrays):
            load_into(pruner, arrays, "pruner", strict=False)
    return decoder, pruner


def load_model(path) -> TrainedModel:
    header, arrays = read_checkpoint(path)
    config = RunConfig.from_dict(header["config"])
    with nk.precision(config.precision):
        decoder = Decoder(config.model, seed=config.seed)
        load_into(decoder, arrays, "decoder")
        pruner = None
        if config.plan is not None and config.plan.sites:
            pruner = Pruner(config.plan, config.model.grid, seed=config.seed)
            load_into(pruner, arrays, "pruner")
    return TrainedModel(config, decoder, pruner)


def forward_batch(decoder: Decoder, pruner, batch: Batch, mode: str = "train"):
    seq = decoder.embed(batch.patch_ids, batch.text_ids)
    return decoder(seq, pruner, mode)


def _num(t) -> float:
    return float(t.detach()) if torch.is_tensor(t) else float(t)


def _lr_scale(step: int, total: int, warmup: int) -> float:
    if warmup and step < warmup:
        return (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * (1 + math.cos(math.pi * min(1.0, progress)))


def pretrain_config(config: RunConfig) -> RunConfig:
    """The unpruned stage that precedes pruning-aware fine-tuning.

    Settings with no effect on an unpruned run (budget, ATP learning rate,
    eval size) are reset so that runs differing only in those share a base.
    """
    defaults = RunConfig()
    return config.with_(plan=None, epochs=config.pretrain_epochs, pretrain_epochs=0, freeze_model=False,
                        budget=defaults.budget, lr_atp=defaults.lr_atp, n_eval=defaults.n_eval)


def pretrain_base(config: RunConfig, dataset, cache_dir=None, progress: bool = False) -> TrainedModel:
    """Train (or fetch from ``cache_dir``) the unpruned base for ``config``.

    The cache key hashes the base-stage config and the serialized dataset.
    """
    base_cfg = pretrain_config(config)
    key = hashlib.sha256((base_cfg.to_json() + dumps(dataset)).encode()).hexdigest()[:20]
    path = log_path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"base-{key}.npz"
        log_path = path.with_suffix(".jsonl")
        if path.exists() and log_path.exists():
            model = load_model(path)
            model.log = [json.loads(line) for line in log_path.read_text().splitlines()]
            return model
    with nk.precision(base_cfg.precision):
        model = _fit(base_cfg, dataset, *build_model(base_cfg), progress=progress, stage="pretrain")
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.stem + ".tmp.npz")
        model.save(tmp)
        log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in model.log))
        tmp.replace(path)
    return model


def train(config: RunConfig, dataset, out_dir=None, progress: bool = False, cache_dir=None) -> TrainedModel:
    """Minimise the budgeted objective with soft masks; deterministic given the config.

    With ``pretrain_epochs > 0`` an unpruned base is trained first and the
    configured run fine-tunes from it.
    """
    decoder, pruner = build_model(config)
    prior = []
    if config.pretrain_epochs > 0:
        base = pretrain_base(config, dataset, cache_dir, progress)
        decoder.load_state_dict(base.decoder.state_dict())
        prior = base.log
    with nk.precision(config.precision):
        trained = _fit(config, dataset, decoder, pruner, progress=progress, stage="train")
    trained.log = prior + trained.log
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trained.save(out / "checkpoint.npz")
        config.save(out / "config.json")
        with open(out / "train_log.jsonl", "w") as fh:
            for rec in trained.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return trained


def _fit(config: RunConfig, dataset, decoder, pruner, progress: bool = False, stage: str = "train") -> TrainedModel:
    batch_all = to_batch(dataset)
    n = len(batch_all)
    cfg = config.model

    groups = []
    if not config.freeze_model:
        decoder_params = list(decoder.parameters())
        groups.append((decoder_params, config.lr_model))
    else:
        for p in decoder.parameters():
            p.requires_grad_(False)
    if pruner is not None:
        atp_params = [p for p in pruner.parameters() if p.requires_grad]
        if atp_params:
            groups.append((atp_params, config.lr_atp))
    optimizers = [nk.AdamW(params, lr, weight_decay=config.weight_decay) for params, lr in groups]
    all_params = [p for params, _ in groups for p in params]

    rng = np.random.default_rng([config.seed, 7])
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    answer_pos = [cfg.n_vision + batch_all.text_ids.shape[1] - 1]
    records = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = batch_all.select(order[start:start + config.batch_size])
            result = forward_batch(decoder, pruner, batch, "train")
            parts = budget_loss(result, batch.answers[:, None], answer_pos, config.budget,
                                cfg.n_layers, cfg.n_vision)
            if not torch.isfinite(parts.total):
                raise DivergenceError(f"non-finite loss at step {step}: {float(parts.total)}")
            for opt in optimizers:
                opt.zero_grad()
            if all_params:
                nk.backward(parts.total)
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(all_params, config.grad_clip)
                scale = _lr_scale(step, total_steps, config.warmup_steps)
                for opt, (_, lr) in zip(optimizers, groups):
                    opt.lr = lr * scale
                    opt.step()
            rec = {
                "stage": stage, "step": step, "epoch": epoch,
                "loss": _num(parts.total), "ntp": _num(parts.ntp),
                "atp": _num(parts.atp), "target": _num(parts.target),
                "n_bar": _num(parts.n_bar),
            }
            records.append(rec)
            if progress and step % 20 == 0:
                log.info("step %d loss %.4f ntp %.4f n_bar %.2f", step, rec["loss"], rec["ntp"], rec["n_bar"])
            step += 1

    return TrainedModel(config, decoder, pruner, records)
