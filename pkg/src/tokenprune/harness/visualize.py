"""Per-site renders of which vision cells survive hard pruning.

Cell legend (ASCII / graymap level):

    ``S`` 96   kept by the spatial grid only
    ``R`` 0    kept by the redundancy threshold only
    ``B`` 48   kept by both rules
    ``G`` 160  kept only by the floor guard
    ``.`` 255  pruned (white)
"""
from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .. import numkit as nk
from .data import SyntheticInstance, to_batch
from .train import TrainedModel, forward_batch

GLYPHS = {"spatial": "S", "redundant": "R", "both": "B", "guard": "G", "pruned": "."}
LEVELS = {"spatial": 96, "redundant": 0, "both": 48, "guard": 160, "pruned": 255}


@dataclass
class SiteRender:
    site: int
    theta_r: float | None
    theta_s: float | None
    retained: list[int]
    kinds: np.ndarray  # [rows, cols] of legend keys

    @property
    def ascii(self) -> str:
        return "\n".join("".join(GLYPHS[k] for k in row) for row in self.kinds)

    def pgm(self, cell: int = 8) -> bytes:
        """Binary PGM (P5), each grid cell drawn as a ``cell``x``cell`` block."""
        img = np.vectorize(LEVELS.get)(self.kinds).astype(np.uint8)
        img = np.kron(img, np.ones((cell, cell), dtype=np.uint8))
        h, w = img.shape
        return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()

    def counts(self) -> dict:
        keys, n = np.unique(self.kinds, return_counts=True)
        return {str(k): int(v) for k, v in zip(keys, n)}

    def to_dict(self) -> dict:
        return {"site": self.site, "theta_r": self.theta_r, "theta_s": self.theta_s,
                "retained": self.retained, "n_retained": len(self.retained),
                "kinds": self.counts(), "ascii": self.ascii}


@contextmanager
def override_thresholds(pruner, theta_r: float, theta_s: float):
    """Temporarily pin every adaptive site's thresholds."""
    sites = list(pruner.sites_)
    saved = [s.theta_override for s in sites]
    for s in sites:
        s.theta_override = (theta_r, theta_s)
    try:
        yield
    finally:
        for s, v in zip(sites, saved):
            s.theta_override = v


def _classify(state, grid) -> np.ndarray:
    rows, cols = grid
    keep = torch.zeros(rows * cols, dtype=torch.bool)
    keep[state.retained_indices[0]] = True
    mr = state.mask_r[0] > 0.5
    ms = state.mask_s[0] > 0.5
    kinds = np.full(rows * cols, "pruned", dtype=object)
    for n in torch.nonzero(keep).reshape(-1).tolist():
        if mr[n] and ms[n]:
            kinds[n] = "both"
        elif ms[n]:
            kinds[n] = "spatial"
        elif mr[n]:
            kinds[n] = "redundant"
        else:
            kinds[n] = "guard"
    return kinds.reshape(rows, cols)


@torch.no_grad()
def visualize_masks(model: TrainedModel, instance: SyntheticInstance) -> list[SiteRender]:
    """Hard-mode pass over one instance; one render per pruning site."""
    if model.pruner is None:
        return []
    batch = to_batch([instance])
    with nk.precision(model.config.precision):
        result = forward_batch(model.decoder, model.pruner, batch, "infer")
    grid = model.config.model.grid
    renders = []
    for state in result.states:
        renders.append(SiteRender(
            site=state.site_layer,
            theta_r=None if state.theta_r is None else float(state.theta_r[0]),
            theta_s=None if state.theta_s is None else float(state.theta_s[0]),
            retained=[int(i) for i in state.retained_indices[0]],
            kinds=_classify(state, grid),
        ))
    return renders


def write_renders(renders: list[SiteRender], out_dir, stem: str = "mask") -> list[Path]:
    """``<stem>_site<k>.pgm`` / ``.txt`` per site plus ``<stem>_thresholds.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in renders:
        pgm = out / f"{stem}_site{r.site}.pgm"
        pgm.write_bytes(r.pgm())
        txt = out / f"{stem}_site{r.site}.txt"
        txt.write_text(f"site {r.site} theta_r={r.theta_r} theta_s={r.theta_s} "
                       f"kept={len(r.retained)}\n{r.ascii}\n")
        paths += [pgm, txt]
    meta = out / f"{stem}_thresholds.json"
    meta.write_text(json.dumps([r.to_dict() for r in renders], indent=2) + "\n")
    paths.append(meta)
    return paths


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval, rest = data.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)
