"""Analytical FLOPs model for pruned decoders and a shape-walking oracle.

Convention: one multiply-accumulate counts as one FLOP, and the FFN is
costed as two ``d x m`` matrices, which gives the per-layer cost
``4*L*d^2 + 2*L^2*d + 2*L*d*m``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch


def layer_segments(sites, n_layers: int) -> list[tuple[int, int, int | None]]:
    """Split ``range(n_layers)`` into ``(start, stop, k)`` runs of equal token count.

    Site ``i_k`` prunes the input of layer ``i_k``, so layers ``[i_k, i_{k+1})``
    see the count retained at site ``k``; ``k is None`` marks the unpruned
    prefix ``[0, i_0)``. This one rule drives both the average-token count and
    the FLOPs total.
    """
    sites = list(sites)
    if sites != sorted(set(sites)):
        raise ValueError("sites must be strictly increasing")
    if sites and (sites[0] < 0 or sites[-1] >= n_layers):
        raise ValueError(f"sites must lie in [0, {n_layers})")
    bounds = [0] + sites + [n_layers]
    segs = []
    for k, (start, stop) in enumerate(zip(bounds, bounds[1:])):
        if stop > start:
            segs.append((start, stop, None if k == 0 else k - 1))
    return segs


def layer_flops(L: int, d: int, m: int) -> int:
    L, d, m = int(L), int(d), int(m)
    if min(L, d, m) < 0:
        raise ValueError("layer_flops takes non-negative integers")
    return 4 * L * d * d + 2 * L * L * d + 2 * L * d * m


@dataclass
class FlopsSpec:
    n_layers: int
    d: int
    m: int
    L0: int
    plan: list[tuple[int, int]] = field(default_factory=list)
    text_len: int = 0

    def __post_init__(self):
        self.plan = [(int(s), int(n)) for s, n in self.plan]
        sites = [s for s, _ in self.plan]
        kept = [n for _, n in self.plan]
        layer_segments(sites, self.n_layers)
        if any(b > a for a, b in zip(kept, kept[1:])):
            raise ValueError("retained lengths must be non-increasing along the plan")
        if any(n < 0 or n > self.L0 for n in kept):
            raise ValueError("retained lengths must lie in [0, L0]")

    @classmethod
    def from_dict(cls, doc: dict) -> "FlopsSpec":
        plan = doc.get("plan")
        if plan is None:
            plan = list(zip(doc.get("sites", []), doc.get("retained", [])))
        else:
            plan = [(p["site"], p["retained"]) if isinstance(p, dict) else tuple(p) for p in plan]
        return cls(int(doc["n_layers"]), int(doc["d"]), int(doc["m"]), int(doc["L0"]),
                   plan, int(doc.get("text_len", 0)))


@dataclass
class FlopsReport:
    baseline_total: int
    pruned_total: int
    reduction_fraction: float
    segments: list[dict]

    def to_dict(self) -> dict:
        return {
            "baseline_total": self.baseline_total,
            "pruned_total": self.pruned_total,
            "reduction_fraction": self.reduction_fraction,
            "segments": self.segments,
        }


def model_reduction(spec: FlopsSpec) -> FlopsReport:
    sites = [s for s, _ in spec.plan]
    kept = [n for _, n in spec.plan]
    full = layer_flops(spec.L0 + spec.text_len, spec.d, spec.m)
    baseline = spec.n_layers * full
    pruned = 0
    segments = []
    for start, stop, k in layer_segments(sites, spec.n_layers):
        L = spec.L0 if k is None else kept[k]
        per_layer = layer_flops(L + spec.text_len, spec.d, spec.m)
        pruned += (stop - start) * per_layer
        segments.append({"start": start, "stop": stop, "tokens": L,
                         "layer_flops": per_layer, "saved": (stop - start) * (full - per_layer)})
    reduction = 1.0 - pruned / baseline if baseline else 0.0
    return FlopsReport(baseline, pruned, reduction, segments)


EQ10_TAGS = ("attn.proj", "attn.score", "attn.mix", "ffn.up", "ffn.down")


def flops_oracle(spec: FlopsSpec, seed: int = 0) -> int:
    """Count MACs by running real decoder layers on shrinking inputs.

    Each layer of a freshly built decoder runs on a random hidden state whose
    length follows the plan; tokens are physically dropped at each site. MACs
    of every matmul are recorded by tag and the Eq.-10 set is summed: the
    gate projection of the gated FFN and the vocabulary head are excluded by
    convention.
    """
    from . import numkit as nk
    from .decoder import DecoderLayer, ModelConfig

    if spec.n_layers == 0:
        return 0
    # score/mix MACs do not depend on the head split, so one head suffices
    cfg = ModelConfig(n_layers=1, d_model=spec.d, n_heads=1, d_ff=max(spec.m, 1), grid=(1, 1))
    torch.manual_seed(seed)
    layer = DecoderLayer(cfg)
    with torch.no_grad():
        for p in layer.parameters():
            p.normal_(0.0, 0.1)
    site_keep = dict(spec.plan)
    L = spec.L0 + spec.text_len
    gen = torch.Generator().manual_seed(seed)
    total = 0
    for i in range(spec.n_layers):
        if i in site_keep:
            L = site_keep[i] + spec.text_len
        if L == 0:
            continue
        x = torch.randn(1, L, spec.d, dtype=nk.DTYPE, generator=gen)
        pos = torch.stack([torch.arange(L), torch.arange(L)], dim=1)
        with torch.no_grad(), nk.count_macs() as counter:
            layer(x, torch.ones(1, L, dtype=nk.DTYPE), pos)
        total += sum(counter[t] for t in EQ10_TAGS)
    return total
