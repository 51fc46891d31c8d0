"""Training objective: next-token loss plus the two token-budget terms."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from . import numkit as nk
from .flops import layer_segments


@dataclass(frozen=True)
class BudgetConfig:
    lambda_atp: float = 0.05
    lambda_target: float = 0.2
    n_target: float = 16.0
    n_vision_norm: float = 64.0
    use_cumulative: bool = True

    def __post_init__(self):
        if self.lambda_atp < 0 or self.lambda_target < 0:
            raise ValueError("budget coefficients must be non-negative")
        if not 0 < self.n_target <= self.n_vision_norm:
            raise ValueError("n_target must lie in (0, L_v]")

    def to_dict(self) -> dict:
        return asdict(self)


def _site_masks(states, use_cumulative=True):
    return [s.cumulative_mask if use_cumulative else s.mask_combined for s in states]


def atp_penalty(states, n_vision_norm: float, use_cumulative: bool = True) -> torch.Tensor:
    """Depth-weighted retained-token penalty, batch mean.

    ``sum_k site_k * sum(mask_k) / n_vision_norm``, using the cumulative mask
    at each site by default (the count later layers actually pay for).
    """
    total = torch.zeros((), dtype=nk.DTYPE)
    for state, mask in zip(states, _site_masks(states, use_cumulative)):
        kept = nk.reduce("sum", mask, axis=-1) if mask.dim() else mask
        total = total + nk.reduce("mean", nk.scale(kept, state.site_layer / n_vision_norm))
    return total


def average_token_count(sites, retained, n_layers: int, n_vision: float):
    """Mean vision-token count over all layers.

    ``retained[k]`` may be a number or a tensor (per instance, differentiable).
    """
    retained = list(retained)
    if len(retained) != len(list(sites)):
        raise ValueError("need one retained count per site")
    total = 0
    for start, stop, k in layer_segments(sites, n_layers):
        total = total + (stop - start) * (n_vision if k is None else retained[k])
    return total / n_layers


def states_average_tokens(states, n_layers: int, n_vision: int) -> torch.Tensor:
    """Per-instance differentiable average token count ``[B]`` from prune states."""
    sites = [s.site_layer for s in states]
    counts = [s.cumulative_mask.sum(-1) for s in states]
    out = average_token_count(sites, counts, n_layers, float(n_vision))
    if not torch.is_tensor(out):
        out = torch.tensor(out, dtype=nk.DTYPE)
    return out


def target_loss(n_bar, n_target) -> torch.Tensor:
    return torch.abs(torch.as_tensor(n_bar, dtype=nk.DTYPE) - n_target)


def ntp_loss(logits: torch.Tensor, targets: torch.Tensor, answer_positions) -> torch.Tensor:
    """Mean cross-entropy at the supervised positions only.

    ``logits [B, L, V]``; ``targets [B, P]`` are the tokens to predict at
    ``answer_positions`` (``[P]`` shared, or ``[B, P]``).
    """
    if logits.dim() == 2:
        logits, targets = logits[None], torch.as_tensor(targets).reshape(1, -1)
    pos = torch.as_tensor(answer_positions, dtype=torch.long)
    if pos.numel() == 0:
        raise ValueError("ntp_loss: no supervised positions")
    if pos.dim() == 1:
        pos = pos.expand(logits.shape[0], -1)
    if bool((pos < 0).any()) or bool((pos >= logits.shape[1]).any()):
        raise ValueError("ntp_loss: answer position out of range")
    picked = torch.gather(logits, 1, pos[..., None].expand(-1, -1, logits.shape[-1]))
    logp = torch.log_softmax(picked, dim=-1)
    nll = -torch.gather(logp, -1, torch.as_tensor(targets, dtype=torch.long)[..., None])
    return nk.reduce("mean", nll)


def total_loss(ntp, atp, target, cfg: BudgetConfig) -> torch.Tensor:
    return ntp + atp * cfg.lambda_atp + target * cfg.lambda_target


@dataclass
class LossBreakdown:
    total: torch.Tensor
    ntp: torch.Tensor
    atp: torch.Tensor
    target: torch.Tensor
    n_bar: torch.Tensor


def budget_loss(result, targets, answer_positions, cfg: BudgetConfig, n_layers: int,
                n_vision: int) -> LossBreakdown:
    """Full objective for one forward result; N-bar is averaged over the batch first."""
    ntp = ntp_loss(result.logits, targets, answer_positions)
    if result.states:
        atp = atp_penalty(result.states, cfg.n_vision_norm, cfg.use_cumulative)
        n_bar = states_average_tokens(result.states, n_layers, n_vision).mean()
        tgt = target_loss(n_bar, cfg.n_target)
    else:
        # no pruning sites: nothing to constrain, the budget terms vanish
        atp = tgt = torch.zeros((), dtype=nk.DTYPE)
        n_bar = torch.tensor(float(n_vision), dtype=nk.DTYPE)
    return LossBreakdown(total_loss(ntp, atp, tgt, cfg), ntp, atp, tgt, n_bar)
