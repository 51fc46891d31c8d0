"""Causal multimodal decoder with 2D rotary positions and mask-aware attention.

Sequence layout is always ``[vision tokens (row-major grid) | text tokens]``.
Every token carries a 2-column position record: vision tokens hold
``(row, col)``, text tokens hold ``(p, p)`` with ``p = L_v + j``. The record
travels with the token through pruning, so retained tokens are rotated by
their original angles.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import torch
from torch import nn

from . import numkit as nk

if TYPE_CHECKING:
    from .atp import PruneState, Pruner

CHECKPOINT_FORMAT = "tokenprune-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 64
    grid: tuple[int, int] = (8, 8)
    max_text_len: int = 16
    n_patch_classes: int = 8
    rope_base: float = 10000.0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(self.grid))
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.head_dim % 4:
            raise ValueError("head_dim must be divisible by 4 for 2D rotary embedding")
        if min(self.n_layers, self.d_ff, self.vocab_size, *self.grid) < 1:
            raise ValueError("model extents must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_vision(self) -> int:
        return self.grid[0] * self.grid[1]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenSequence:
    """Embedded multimodal input.

    ``positions`` is immutable bookkeeping: an int64 ``[L, 2]`` table of
    original positions; pruning selects rows from it but never rewrites them.
    """

    embeddings: torch.Tensor  # [B, L, D]
    positions: torch.Tensor  # [L, 2]
    n_vision: int
    n_text: int
    patch_ids: torch.Tensor | None = None
    text_ids: torch.Tensor | None = None

    def __post_init__(self):
        if self.embeddings.shape[-2] != self.n_vision + self.n_text:
            raise ValueError("embedding length does not match vision + text counts")
        if self.positions.shape != (self.n_vision + self.n_text, 2):
            raise ValueError("positions must be an [L, 2] table")
        self.positions = self.positions.clone()
        self.positions.requires_grad_(False)

    @property
    def length(self) -> int:
        return self.n_vision + self.n_text


def layout_positions(grid: tuple[int, int], n_text: int) -> torch.Tensor:
    rows, cols = grid
    r, c = torch.meshgrid(torch.arange(rows), torch.arange(cols), indexing="ij")
    vis = torch.stack([r.reshape(-1), c.reshape(-1)], dim=1)
    p = torch.arange(rows * cols, rows * cols + n_text)
    return torch.cat([vis, torch.stack([p, p], dim=1)]).long()


@dataclass
class LayerOutput:
    hidden: torch.Tensor  # [B, L, D]
    attn_logits: torch.Tensor  # [B, H, L, L], pre-mask
    attn_probs: torch.Tensor  # [B, H, L, L]


@dataclass
class ForwardResult:
    logits: torch.Tensor  # [B, L_cur, vocab]
    states: list  # PruneState per site
    token_trace: torch.Tensor  # [B, n_layers] effective vision tokens entering each layer
    kept: list[torch.Tensor] = field(default_factory=list)  # infer: original indices per instance
    hidden: torch.Tensor | None = None


def rope_frequencies(half_dim: int, base: float) -> torch.Tensor:
    return base ** (-torch.arange(0, half_dim, 2, dtype=nk.DTYPE) / half_dim)


def _rotate(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    # x [..., L, h] with adjacent pairs (2i, 2i+1); angles [L, h/2]
    x1, x2 = x[..., 0::2], x[..., 1::2]
    cos, sin = torch.cos(angles), torch.sin(angles)
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


def rope2d_apply(qk: torch.Tensor, positions: torch.Tensor | None, base: float = 10000.0) -> torch.Tensor:
    """Rotate the first half of the head dim by row angle, the second by column angle."""
    if positions is None:
        raise ValueError("rope2d_apply: missing position record")
    head_dim = qk.shape[-1]
    if head_dim % 4:
        raise ValueError("rope2d_apply: head_dim must be divisible by 4")
    if positions.shape != (qk.shape[-2], 2):
        raise ValueError("rope2d_apply: need one (row, col) record per token")
    half = head_dim // 2
    freqs = rope_frequencies(half, base)
    pos = positions.to(nk.DTYPE)
    row = _rotate(qk[..., :half], pos[:, :1] * freqs)
    col = _rotate(qk[..., half:], pos[:, 1:] * freqs)
    return torch.cat([row, col], dim=-1)


def attention_weights(cum_mask: torch.Tensor) -> torch.Tensor:
    """Key weights ``[B, 1, L, L]``: causal mask times the key's cumulative mask.

    A query always keeps full weight on itself, so no row is ever empty.
    """
    L = cum_mask.shape[-1]
    causal = torch.tril(torch.ones(L, L, dtype=nk.DTYPE))
    eye = torch.eye(L, dtype=nk.DTYPE)
    w = causal * (cum_mask[:, None, :] * (1 - eye) + eye)
    return w[:, None]


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim, dtype=nk.DTYPE))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.d_model
        self.cfg = cfg
        self.norm = RMSNorm(D)
        self.wq = nn.Parameter(torch.empty(D, D, dtype=nk.DTYPE))
        self.wk = nn.Parameter(torch.empty(D, D, dtype=nk.DTYPE))
        self.wv = nn.Parameter(torch.empty(D, D, dtype=nk.DTYPE))
        self.wo = nn.Parameter(torch.empty(D, D, dtype=nk.DTYPE))

    def _heads(self, x):
        B, L, _ = x.shape
        return x.view(B, L, self.cfg.n_heads, self.cfg.head_dim).transpose(1, 2)

    def forward(self, hidden, cum_mask, positions) -> LayerOutput:
        cfg = self.cfg
        h = self.norm(hidden)
        with nk.op_tag("attn.proj"):
            q = rope2d_apply(self._heads(nk.matmul(h, self.wq)), positions, cfg.rope_base)
            k = rope2d_apply(self._heads(nk.matmul(h, self.wk)), positions, cfg.rope_base)
            v = self._heads(nk.matmul(h, self.wv))
        with nk.op_tag("attn.score"):
            logits = nk.scale(nk.matmul(q, k.transpose(-1, -2)), 1.0 / math.sqrt(cfg.head_dim))
        probs = nk.masked_softmax(logits, attention_weights(cum_mask))
        with nk.op_tag("attn.mix"):
            mixed = nk.matmul(probs, v).transpose(1, 2).reshape(hidden.shape)
        with nk.op_tag("attn.proj"):
            out = nk.add(hidden, nk.matmul(mixed, self.wo))
        return LayerOutput(out, logits, probs)


class FeedForward(nn.Module):
    """Pre-norm gated FFN: ``x + W_down(silu(W_gate h) * (W_up h))``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm = RMSNorm(cfg.d_model)
        self.w_gate = nn.Parameter(torch.empty(cfg.d_model, cfg.d_ff, dtype=nk.DTYPE))
        self.w_up = nn.Parameter(torch.empty(cfg.d_model, cfg.d_ff, dtype=nk.DTYPE))
        self.w_down = nn.Parameter(torch.empty(cfg.d_ff, cfg.d_model, dtype=nk.DTYPE))

    def forward(self, hidden):
        h = self.norm(hidden)
        with nk.op_tag("ffn.gate"):
            gate = nk.silu(nk.matmul(h, self.w_gate))
        with nk.op_tag("ffn.up"):
            gated = nk.mul(gate, nk.matmul(h, self.w_up))
        with nk.op_tag("ffn.down"):
            return nk.add(hidden, nk.matmul(gated, self.w_down))


def ffn(hidden, block: FeedForward):
    return block(hidden)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = Attention(cfg)
        self.ffn = FeedForward(cfg)

    def forward(self, hidden, cum_mask, positions) -> LayerOutput:
        out = self.attn(hidden, cum_mask, positions)
        out.hidden = self.ffn(out.hidden)
        return out


def attention_layer(hidden, cumulative_mask, layer: DecoderLayer, positions) -> LayerOutput:
    """One full decoder layer (attention + FFN) on ``[B, L, D]`` or ``[L, D]`` input."""
    squeeze = hidden.dim() == 2
    if squeeze:
        hidden, cumulative_mask = hidden[None], cumulative_mask[None]
    out = layer(hidden, cumulative_mask, positions)
    if squeeze:
        out = LayerOutput(out.hidden[0], out.attn_logits[0], out.attn_probs[0])
    return out


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        D = cfg.d_model
        self.patch_emb = nn.Parameter(torch.empty(cfg.n_patch_classes, D, dtype=nk.DTYPE))
        self.row_emb = nn.Parameter(torch.empty(cfg.grid[0], D, dtype=nk.DTYPE))
        self.col_emb = nn.Parameter(torch.empty(cfg.grid[1], D, dtype=nk.DTYPE))
        self.tok_emb = nn.Parameter(torch.empty(cfg.vocab_size, D, dtype=nk.DTYPE))
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers))
        self.final_norm = RMSNorm(D)
        self.lm_head = nn.Parameter(torch.empty(D, cfg.vocab_size, dtype=nk.DTYPE))
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        residual_std = 0.02 / math.sqrt(2 * self.cfg.n_layers)
        for name, p in self.named_parameters():
            if name.endswith("norm.weight"):
                p.fill_(1.0)
            elif name.endswith(("wo", "w_down")):
                p.normal_(0.0, residual_std, generator=gen)
            else:
                p.normal_(0.0, 0.02, generator=gen)

    def embed(self, patch_ids: torch.Tensor, text_ids: torch.Tensor) -> TokenSequence:
        """``patch_ids [B, L_v]`` class ids, ``text_ids [B, L_t]`` vocab ids."""
        cfg = self.cfg
        if patch_ids.shape[-1] != cfg.n_vision:
            raise ValueError(f"expected {cfg.n_vision} patches, got {patch_ids.shape[-1]}")
        if text_ids.shape[-1] > cfg.max_text_len:
            raise ValueError("text longer than max_text_len")
        rows = torch.arange(cfg.grid[0]).repeat_interleave(cfg.grid[1])
        cols = torch.arange(cfg.grid[1]).repeat(cfg.grid[0])
        vis = self.patch_emb[patch_ids] + self.row_emb[rows] + self.col_emb[cols]
        txt = self.tok_emb[text_ids]
        return TokenSequence(
            embeddings=torch.cat([vis, txt], dim=-2),
            positions=layout_positions(cfg.grid, text_ids.shape[-1]),
            n_vision=cfg.n_vision,
            n_text=text_ids.shape[-1],
            patch_ids=patch_ids,
            text_ids=text_ids,
        )

    def head(self, hidden):
        with nk.op_tag("lm_head"):
            return nk.matmul(self.final_norm(hidden), self.lm_head)

    def forward(self, seq: TokenSequence, pruner: "Pruner | None" = None, mode: str = "train",
                vision_mask: torch.Tensor | None = None) -> ForwardResult:
        return decoder_forward(self, seq, pruner, mode, vision_mask=vision_mask)


def _site_schedule(pruner, n_layers):
    sites = () if pruner is None else tuple(pruner.sites)
    if list(sites) != sorted(set(sites)):
        raise ValueError("pruning sites must be strictly increasing")
    if sites and (sites[0] < 1 or sites[-1] >= n_layers):
        raise ValueError(f"pruning sites must lie in [1, {n_layers - 1}]")
    return sites


def decoder_forward(model: Decoder, seq: TokenSequence, pruner: "Pruner | None" = None,
                    mode: str = "train", vision_mask: torch.Tensor | None = None) -> ForwardResult:
    """Run all layers, invoking the pruner before each site layer.

    A site ``s`` prunes the input of layer ``s`` using the attention maps of
    layer ``s - 1``. ``mode='train'`` keeps the sequence rectangular and
    carries a soft cumulative mask; ``mode='infer'`` physically drops vision
    tokens per instance. ``vision_mask`` (train mode only) is an extra fixed
    ``[B, L_v]`` multiplicative mask applied from layer 0.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    sites = _site_schedule(pruner, model.cfg.n_layers)
    if mode == "infer":
        if vision_mask is not None:
            raise ValueError("vision_mask is only meaningful in train mode")
        return _forward_infer(model, seq, pruner, sites)
    return _forward_train(model, seq, pruner, sites, vision_mask)


def _forward_train(model, seq, pruner, sites, vision_mask):
    x = seq.embeddings
    if x.dim() == 2:
        x = x[None]
    B = x.shape[0]
    nv, nt = seq.n_vision, seq.n_text
    vis_cum = torch.ones(B, nv, dtype=nk.DTYPE) if vision_mask is None else vision_mask.to(nk.DTYPE)
    text_ones = torch.ones(B, nt, dtype=nk.DTYPE)
    states, trace = [], []
    prev_out = None
    for i, layer in enumerate(model.layers):
        if i in sites:
            state = pruner.site(i).prune_soft(prev_out, vis_cum, nv)
            states.append(state)
            vis_cum = state.cumulative_mask
        trace.append(vis_cum.sum(-1))
        prev_out = layer(x, torch.cat([vis_cum, text_ones], dim=-1), seq.positions)
        x = prev_out.hidden
    return ForwardResult(model.head(x), states, torch.stack(trace, dim=-1), hidden=x)


def _forward_infer(model, seq, pruner, sites):
    from .atp import stack_states

    emb = seq.embeddings if seq.embeddings.dim() == 3 else seq.embeddings[None]
    nv, nt = seq.n_vision, seq.n_text
    all_logits, all_states, traces, kept, hiddens = [], [], [], [], []
    for b in range(emb.shape[0]):
        x = emb[b:b + 1]
        keep = torch.arange(nv + nt)
        alive = torch.ones(1, nv, dtype=torch.bool)
        states, trace = [], []
        prev_out = None
        for i, layer in enumerate(model.layers):
            if i in sites:
                vis_idx = keep[keep < nv]
                state = pruner.site(i).prune_hard(prev_out, vis_idx, alive, nv)
                states.append(state)
                alive = state.cumulative_mask > 0.5
                retained = state.retained_indices[0]
                # positions of current tokens to keep, relative to the current sequence
                cur_keep = torch.cat([
                    torch.nonzero(torch.isin(vis_idx, retained)).reshape(-1),
                    torch.arange(len(vis_idx), len(keep)),
                ])
                x = x[:, cur_keep]
                keep = keep[cur_keep]
            trace.append(float((keep < nv).sum()))
            ones = torch.ones(1, len(keep), dtype=nk.DTYPE)
            prev_out = layer(x, ones, seq.positions[keep])
            x = prev_out.hidden
        all_logits.append(model.head(x)[0])
        hiddens.append(x[0])
        all_states.append(states)
        traces.append(trace)
        kept.append(keep)
    # text tokens are never pruned, so the tail of every sequence lines up
    logits = [lg[-nt:] for lg in all_logits]
    result = ForwardResult(
        logits=torch.stack(logits),
        states=stack_states(all_states),
        token_trace=torch.tensor(traces, dtype=nk.DTYPE),
        kept=kept,
    )
    result.full_logits = all_logits
    result.full_hidden = hiddens
    return result


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path, modules: dict[str, nn.Module], config: dict) -> None:
    """Write one ``.npz`` file: a JSON header plus every named parameter array."""
    arrays = {}
    shapes = {}
    for prefix, module in modules.items():
        for name, p in module.state_dict().items():
            key = f"{prefix}/{name}"
            arrays[key] = p.detach().cpu().numpy()
            shapes[key] = list(p.shape)
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
              "config": config, "shapes": shapes}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a tokenprune checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        arrays = {k: data[k].copy() for k in data.files if k != "__header__"}
    for key, shape in header["shapes"].items():
        if list(arrays[key].shape) != shape:
            raise ValueError(f"{path}: shape mismatch for {key}")
    return header, arrays


def load_into(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str, strict: bool = True) -> None:
    state = {k[len(prefix) + 1:]: torch.from_numpy(v) for k, v in arrays.items()
             if k.startswith(prefix + "/")}
    module.load_state_dict(state, strict=strict)
