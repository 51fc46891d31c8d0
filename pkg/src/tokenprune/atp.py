"""Adaptive token pruning: importance scores, learned thresholds, masks.

All score vectors are kept at the ORIGINAL vision length ``L_v`` so that the
threshold head sees a fixed-width input at every site. Tokens that are no
longer alive score 0 after normalization.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import torch
from torch import nn

from . import numkit as nk

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AtpPlan:
    """Where and how vision tokens are pruned.

    ``sites`` are decoder layer indices whose input is pruned; site ``s`` reads
    the attention maps produced by layer ``s - 1``. With ``strategy='fixed'``,
    ``keep_counts`` gives the top-k retained count at each site instead of
    learned thresholds.
    """

    sites: tuple[int, ...] = (1, 4, 6)
    temperature: float = 20.0
    lambda_sample: float = 3.0
    strides: tuple[int, ...] | None = None
    head_hidden: int = 32
    head_init_bias: float = -2.0
    self_direction: str = "query"
    strategy: str = "adaptive"
    keep_counts: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(int(s) for s in self.sites))
        if self.strides is not None:
            object.__setattr__(self, "strides", tuple(self.strides))
        if self.keep_counts is not None:
            object.__setattr__(self, "keep_counts", tuple(int(k) for k in self.keep_counts))
        if list(self.sites) != sorted(set(self.sites)):
            raise ValueError("sites must be strictly increasing")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.self_direction not in ("query", "key"):
            raise ValueError("self_direction must be 'query' or 'key'")
        if self.strategy not in ("adaptive", "fixed"):
            raise ValueError("strategy must be 'adaptive' or 'fixed'")
        if self.strategy == "fixed":
            if self.keep_counts is None or len(self.keep_counts) != len(self.sites):
                raise ValueError("fixed strategy needs one keep count per site")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


# -- spatial grid ----------------------------------------------------------

@dataclass(frozen=True)
class SpatialGrid:
    grid: tuple[int, int] = (8, 8)
    strides: tuple[int, ...] | None = None
    lambda_sample: float = 3.0

    def __post_init__(self):
        rows, cols = self.grid
        if self.strides is None:
            s, found = 2, []
            while s <= min(rows, cols):
                if rows % s == 0 and cols % s == 0:
                    found.append(s)
                s *= 2
            object.__setattr__(self, "strides", tuple(found))
        strides = tuple(self.strides)
        object.__setattr__(self, "strides", strides)
        for s in strides:
            if s < 1 or rows % s or cols % s:
                raise ValueError(f"stride {s} does not divide grid {self.grid}")
        if list(strides) != sorted(set(strides)):
            raise ValueError("strides must be strictly increasing")
        for fine, coarse in zip(strides, strides[1:]):
            if coarse % fine:
                raise ValueError("each stride must be a multiple of the previous one (nested grids)")
        if strides and self.lambda_sample * self.levels[0][1] >= 1:
            raise ValueError("lambda_sample * max sampling rate must be < 1")

    @property
    def levels(self) -> list[tuple[int, float]]:
        """(stride, sampling rate) from finest to coarsest."""
        rows, cols = self.grid
        return [(s, (rows // s) * (cols // s) / (rows * cols)) for s in self.strides]

    def level_members(self, stride: int) -> set[int]:
        rows, cols = self.grid
        return {r * cols + c for r in range(0, rows, stride) for c in range(0, cols, stride)}

    @property
    def membership(self) -> list[int]:
        """Coarsest stride containing each token, 0 when unsampled."""
        rows, cols = self.grid
        out = []
        for r in range(rows):
            for c in range(cols):
                out.append(max((s for s in self.strides if r % s == 0 and c % s == 0), default=0))
        return out


def spatial_score(grid: SpatialGrid) -> torch.Tensor:
    rate = dict(grid.levels)
    return nk.tensor([1.0 - rate[s] * grid.lambda_sample if s else 0.0 for s in grid.membership])


def spatial_retained(grid: SpatialGrid, theta_s: float) -> set[int]:
    """Tokens kept by the spatial rule alone, before any floor guard."""
    scores = spatial_score(grid)
    return {i for i, s in enumerate(scores.tolist()) if s >= theta_s}


# -- importance scores -----------------------------------------------------

@dataclass
class VisionLayout:
    """Where the vision tokens of the current sequence sit.

    ``vis_idx`` holds the original indices of the vision tokens currently in
    the sequence (they occupy its first ``len(vis_idx)`` rows); ``alive`` is a
    ``[B, L_v]`` bool over original indices; the last ``n_text`` rows are text.
    """

    n_vision: int
    n_text: int
    vis_idx: torch.Tensor
    alive: torch.Tensor

    @property
    def alive_current(self) -> torch.Tensor:
        return self.alive[:, self.vis_idx]


def _scatter(layout: VisionLayout, values: torch.Tensor, fill: torch.Tensor | float) -> torch.Tensor:
    B = values.shape[0]
    out = torch.zeros(B, layout.n_vision, dtype=values.dtype)
    out = out.index_copy(1, layout.vis_idx, values)
    fill = torch.as_tensor(fill, dtype=values.dtype)
    return torch.where(layout.alive, out, fill.reshape(-1, 1) if fill.dim() else fill)


def _masked_min(s, alive):
    return torch.where(alive, s, torch.full_like(s, math.inf)).amin(-1)


def _masked_max(s, alive):
    return torch.where(alive, s, torch.full_like(s, -math.inf)).amax(-1)


def self_score(attn_logits: torch.Tensor, layout: VisionLayout, direction: str = "query") -> torch.Tensor:
    """Mean pre-mask logit between each vision token and the alive vision tokens.

    ``direction='query'`` averages over queries attending key ``n``;
    ``'key'`` averages over keys seen by query ``n``. Heads are averaged
    first. Non-alive positions get the alive minimum.
    """
    w = layout.alive_current.to(attn_logits.dtype)
    if bool((w.sum(-1) == 0).any()):
        raise ValueError("self_score: no surviving vision tokens")
    nvc = len(layout.vis_idx)
    A = attn_logits.mean(1)[:, :nvc, :nvc]
    if direction == "query":
        s = (w[:, :, None] * A).sum(1) / w.sum(-1, keepdim=True)
    else:
        s = (A * w[:, None, :]).sum(2) / w.sum(-1, keepdim=True)
    full = _scatter(layout, s, 0.0)
    return _scatter(layout, s, _masked_min(full, layout.alive))


def cross_score(attn_probs: torch.Tensor, layout: VisionLayout) -> torch.Tensor:
    """Mean attention probability that the prompt text tokens put on each vision token."""
    if layout.n_text < 1:
        raise ValueError("cross_score: no text tokens to score against")
    nvc = len(layout.vis_idx)
    P = attn_probs.mean(1)[:, -layout.n_text:, :nvc]
    s = P.mean(1)
    full = _scatter(layout, s, 0.0)
    return _scatter(layout, s, _masked_min(full, layout.alive))


def minmax_normalize(s: torch.Tensor, alive: torch.Tensor) -> torch.Tensor:
    """Rescale alive entries to [0, 1] per row; constant rows map to 0.5, dead entries to 0."""
    lo = _masked_min(s, alive)[:, None]
    hi = _masked_max(s, alive)[:, None]
    span = hi - lo
    flat = span <= 0
    norm = (s - lo) / torch.where(flat, torch.ones_like(span), span)
    norm = torch.where(flat, torch.full_like(s, 0.5), norm)
    return torch.where(alive, norm, torch.zeros_like(s))


def combine_redundant(s_self, s_cross, alive=None) -> torch.Tensor:
    squeeze = s_self.dim() == 1
    if squeeze:
        s_self, s_cross = s_self[None], s_cross[None]
        alive = None if alive is None else alive[None]
    if s_self.shape != s_cross.shape:
        raise ValueError("combine_redundant: score vectors differ in length")
    if alive is None:
        alive = torch.ones_like(s_self, dtype=torch.bool)
    out = 0.5 * (minmax_normalize(s_self, alive) + minmax_normalize(s_cross, alive))
    return out[0] if squeeze else out


@dataclass
class ImportanceScores:
    s_self: torch.Tensor  # raw, [B, L_v]
    s_cross: torch.Tensor
    s_self_norm: torch.Tensor
    s_cross_norm: torch.Tensor
    s_redundant: torch.Tensor
    s_spatial: torch.Tensor
    alive: torch.Tensor


def importance_scores(out, layout: VisionLayout, grid_scores: torch.Tensor,
                      direction: str = "query") -> ImportanceScores:
    s_self = self_score(out.attn_logits, layout, direction)
    s_cross = cross_score(out.attn_probs, layout)
    alive = layout.alive
    self_n = minmax_normalize(s_self, alive)
    cross_n = minmax_normalize(s_cross, alive)
    zero = torch.zeros_like(s_self)
    return ImportanceScores(
        s_self=torch.where(alive, s_self, zero),
        s_cross=torch.where(alive, s_cross, zero),
        s_self_norm=self_n,
        s_cross_norm=cross_n,
        s_redundant=0.5 * (self_n + cross_n),
        s_spatial=torch.where(alive, grid_scores.expand_as(s_self), zero),
        alive=alive,
    )


# -- thresholds and masks --------------------------------------------------

class ThresholdHead(nn.Module):
    """Shared linear map followed by two scalar sigmoid heads (redundant, spatial)."""

    def __init__(self, n_vision: int, hidden: int = 32, seed: int = 0, init_bias: float = -2.0):
        super().__init__()
        self.w_z = nn.Linear(2 * n_vision, hidden, dtype=nk.DTYPE)
        self.head_r = nn.Linear(hidden, 1, dtype=nk.DTYPE)
        self.head_s = nn.Linear(hidden, 1, dtype=nk.DTYPE)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for lin in (self.w_z, self.head_r, self.head_s):
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.zero_()
            self.head_r.bias.fill_(init_bias)
            self.head_s.bias.fill_(init_bias)

    def forward(self, s_self_norm, s_cross_norm):
        z = self.w_z(torch.cat([s_self_norm, s_cross_norm], dim=-1))
        return nk.sigmoid(self.head_r(z)).squeeze(-1), nk.sigmoid(self.head_s(z)).squeeze(-1)


def predict_thresholds(head: ThresholdHead, scores: ImportanceScores):
    return head(scores.s_self_norm, scores.s_cross_norm)


@dataclass
class PruneState:
    site_layer: int
    scores: ImportanceScores
    theta_r: torch.Tensor | None  # [B]
    theta_s: torch.Tensor | None
    mask_r: torch.Tensor  # [B, L_v]
    mask_s: torch.Tensor
    mask_combined: torch.Tensor
    cumulative_mask: torch.Tensor
    retained_indices: list[torch.Tensor] | None = None

    def to_records(self) -> list[dict]:
        """One JSON-ready record per instance."""
        recs = []
        for b in range(self.cumulative_mask.shape[0]):
            def row(t):
                return None if t is None else [float(v) for v in t[b].detach()]
            recs.append({
                "site": self.site_layer,
                "theta_r": None if self.theta_r is None else float(self.theta_r[b]),
                "theta_s": None if self.theta_s is None else float(self.theta_s[b]),
                "retained": (None if self.retained_indices is None
                             else [int(i) for i in self.retained_indices[b]]),
                "s_self": row(self.scores.s_self),
                "s_cross": row(self.scores.s_cross),
                "s_redundant": row(self.scores.s_redundant),
                "s_spatial": row(self.scores.s_spatial),
            })
        return recs


def soft_masks(scores: ImportanceScores, theta_r, theta_s, T: float, prev_cumulative, site: int = -1) -> PruneState:
    if T <= 0:
        raise ValueError("temperature must be positive")
    theta_r = torch.as_tensor(theta_r, dtype=nk.DTYPE)
    theta_s = torch.as_tensor(theta_s, dtype=nk.DTYPE)
    tr = theta_r.reshape(-1, 1) if theta_r.dim() else theta_r
    ts = theta_s.reshape(-1, 1) if theta_s.dim() else theta_s
    mask_r = nk.sigmoid(nk.scale(nk.sub(scores.s_redundant, tr), T))
    mask_s = nk.sigmoid(nk.scale(nk.sub(scores.s_spatial, ts), T))
    combined = nk.maximum(mask_r, mask_s)
    return PruneState(site, scores, theta_r, theta_s, mask_r, mask_s, combined,
                      nk.mul(prev_cumulative, combined))


def hard_prune(scores: ImportanceScores, theta_r, theta_s, alive=None, guard: bool = True) -> torch.Tensor:
    """Bool ``[B, L_v]`` of retained tokens.

    A token survives if it is alive and clears either threshold. With
    ``guard`` an instance whose rule keeps nothing retains its single
    highest-``s_redundant`` alive token instead.
    """
    s_red, s_sp = scores.s_redundant.detach(), scores.s_spatial.detach()
    if alive is None:
        alive = scores.alive
    tr = torch.as_tensor(theta_r, dtype=nk.DTYPE).detach().reshape(-1, 1)
    ts = torch.as_tensor(theta_s, dtype=nk.DTYPE).detach().reshape(-1, 1)
    keep = alive & ((s_red >= tr) | (s_sp >= ts))
    empty = ~keep.any(-1)
    if guard and bool(empty.any()):
        best = torch.where(alive, s_red, torch.full_like(s_red, -math.inf)).argmax(-1)
        guard = torch.zeros_like(keep)
        guard[torch.arange(keep.shape[0]), best] = True
        keep = torch.where(empty[:, None], guard, keep)
    return keep


def topk_keep(s_redundant: torch.Tensor, alive: torch.Tensor, k: int) -> torch.Tensor:
    """Bool mask of the ``k`` highest-scoring alive tokens; ties go to the lower index."""
    n_alive = int(alive.sum(-1).min())
    if k > n_alive:
        warnings.warn(f"keep count {k} exceeds {n_alive} surviving tokens; clamping", stacklevel=2)
        k = n_alive
    s = torch.where(alive, s_redundant.detach(), torch.full_like(s_redundant, -math.inf))
    order = torch.sort(-s, dim=-1, stable=True).indices[:, :k]
    keep = torch.zeros_like(alive)
    keep.scatter_(1, order, True)
    return keep & alive


# -- per-site modules ------------------------------------------------------

class PruningSite(nn.Module):
    def __init__(self, layer: int, plan: AtpPlan, n_vision: int, grid_scores: torch.Tensor,
                 seed: int, keep: int | None = None):
        super().__init__()
        self.layer = layer
        self.plan = plan
        self.keep = keep
        self.theta_override: tuple[float, float] | None = None
        self.register_buffer("grid_scores", grid_scores, persistent=False)
        self.head = (ThresholdHead(n_vision, plan.head_hidden, seed, plan.head_init_bias)
                     if plan.strategy == "adaptive" else None)

    def scores(self, out, layout):
        return importance_scores(out, layout, self.grid_scores, self.plan.self_direction)

    def prune_soft(self, out, vis_cum: torch.Tensor, n_vision: int) -> PruneState:
        alive = vis_cum.detach() > 0.5
        empty = ~alive.any(-1)
        if bool(empty.any()):
            # floor guard: the strongest survivor stays alive for scoring
            top = vis_cum.detach().argmax(-1)
            alive[empty, top[empty]] = True
        n_text = out.attn_logits.shape[-1] - n_vision
        layout = VisionLayout(n_vision, n_text, torch.arange(n_vision), alive)
        sc = self.scores(out, layout)
        if self.head is None:
            keep = topk_keep(sc.s_redundant, alive, self.keep).to(nk.DTYPE)
            return PruneState(self.layer, sc, None, None, keep, torch.zeros_like(keep), keep,
                              nk.mul(vis_cum, keep))
        theta_r, theta_s = predict_thresholds(self.head, sc)
        return soft_masks(sc, theta_r, theta_s, self.plan.temperature, vis_cum, self.layer)

    @torch.no_grad()
    def prune_hard(self, out, vis_idx: torch.Tensor, alive: torch.Tensor, n_vision: int) -> PruneState:
        n_text = out.attn_logits.shape[-1] - len(vis_idx)
        layout = VisionLayout(n_vision, n_text, vis_idx, alive)
        sc = self.scores(out, layout)
        if self.head is None:
            keep = topk_keep(sc.s_redundant, alive, self.keep)
            theta_r = theta_s = None
            mask_r, mask_s = keep.to(nk.DTYPE), torch.zeros(keep.shape, dtype=nk.DTYPE)
        else:
            theta_r, theta_s = predict_thresholds(self.head, sc)
            if self.theta_override is not None:
                theta_r = torch.full_like(theta_r, float(self.theta_override[0]))
                theta_s = torch.full_like(theta_s, float(self.theta_override[1]))
            keep = hard_prune(sc, theta_r, theta_s, alive)
            mask_r = (alive & (sc.s_redundant >= theta_r[:, None])).to(nk.DTYPE)
            mask_s = (alive & (sc.s_spatial >= theta_s[:, None])).to(nk.DTYPE)
        keepf = keep.to(nk.DTYPE)
        retained = [torch.nonzero(row).reshape(-1) for row in keep]
        return PruneState(self.layer, sc, theta_r, theta_s, mask_r, mask_s, keepf, keepf, retained)


class Pruner(nn.Module):
    """All pruning sites of one model, keyed by the layer whose input they prune."""

    def __init__(self, plan: AtpPlan, grid: tuple[int, int], seed: int = 0):
        super().__init__()
        self.plan = plan
        self.grid = SpatialGrid(tuple(grid), plan.strides, plan.lambda_sample)
        n_vision = grid[0] * grid[1]
        scores = spatial_score(self.grid)
        keeps = plan.keep_counts or (None,) * len(plan.sites)
        self.sites_ = nn.ModuleList(
            PruningSite(s, plan, n_vision, scores, seed * 1000 + j, k)
            for j, (s, k) in enumerate(zip(plan.sites, keeps))
        )

    @property
    def sites(self) -> tuple[int, ...]:
        return self.plan.sites

    def site(self, layer: int) -> PruningSite:
        return self.sites_[self.plan.sites.index(layer)]


def stack_states(per_instance: list[list[PruneState]]) -> list[PruneState]:
    """Merge single-instance states (outer list over instances) into batched ones."""
    if not per_instance or not per_instance[0]:
        return []
    merged = []
    for j in range(len(per_instance[0])):
        parts = [states[j] for states in per_instance]

        def cat(get):
            vals = [get(p) for p in parts]
            return None if vals[0] is None else torch.cat([v.reshape(1, -1) if v.dim() < 2 else v for v in vals])

        sc = ImportanceScores(*(cat(lambda p, f=f: getattr(p.scores, f)) for f in
                                ("s_self", "s_cross", "s_self_norm", "s_cross_norm",
                                 "s_redundant", "s_spatial", "alive")))
        theta = lambda name: None if parts[0].__dict__[name] is None else torch.cat(
            [p.__dict__[name].reshape(-1) for p in parts])
        merged.append(PruneState(
            parts[0].site_layer, sc, theta("theta_r"), theta("theta_s"),
            cat(lambda p: p.mask_r), cat(lambda p: p.mask_s), cat(lambda p: p.mask_combined),
            cat(lambda p: p.cumulative_mask),
            [r for p in parts for r in (p.retained_indices or [])] or None,
        ))
    return merged
