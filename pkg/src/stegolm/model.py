"""Language-model adapter contract and the built-in tiny causal transformer.

The pipeline only needs a narrow surface from a backbone:

  * ``input_embedding_lookup(ids)``: token ids to input vectors,
  * ``forward_hidden_states(embeds, pad_mask)``: last-layer states, one
    vector per input position,
  * ``output_logits(hidden)``: vocabulary scores,
  * ``greedy_generate(prefix_embeds, max_len, stop_id)``: deterministic
    argmax decoding,
  * named parameter groups (lora_adapters, token_embeddings, lm_head, base)
    so the two training stages can select what trains.

``TinyCausalLM`` implements that contract: a pre-norm decoder-only
transformer with learned positions, untied output head, and LoRA adapters
on the attention query/key projections (rank 8, alpha 32, dropout 0.1 by
default). It is deliberately small so the full two-stage procedure runs on
a CPU in minutes. External backbones plug in through ``register_backbone``.
"""

from __future__ import annotations

import math
from typing import Callable, Protocol, runtime_checkable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LoraConfig, ModelConfig


@runtime_checkable
class LanguageModelHandle(Protocol):
    """Minimal backbone contract used by the embed/decode pipeline."""

    d_emb: int
    vocab_size: int
    read_safe: bool

    def input_embedding_lookup(self, ids: torch.Tensor) -> torch.Tensor: ...

    def forward_hidden_states(
        self, inputs_embeds: torch.Tensor, pad_mask: torch.Tensor | None = None
    ) -> torch.Tensor: ...

    def output_logits(self, hidden: torch.Tensor) -> torch.Tensor: ...

    def greedy_generate(
        self, prefix_embeds: torch.Tensor, max_len: int, stop_id: int | None = None
    ) -> list[int]: ...

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]: ...


class LoRALinear(nn.Module):
    """Linear layer with a frozen base and a trainable low-rank update.

    Effective weight is W + (alpha / rank) * B @ A with B zero-initialized,
    so a fresh adapter is an exact no-op.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: int, dropout: float):
        super().__init__()
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.rank = rank
        self.scaling = alpha / rank
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        update = self.dropout(x) @ self.lora_a.T @ self.lora_b.T
        return self.base(x) + self.scaling * update

    def lora_parameters(self) -> list[nn.Parameter]:
        return [self.lora_a, self.lora_b]


class _Attention(nn.Module):
    def __init__(self, d_emb: int, n_heads: int, lora: LoraConfig):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_emb // n_heads
        self.q_proj = LoRALinear(nn.Linear(d_emb, d_emb, bias=False), lora.rank, lora.alpha, lora.dropout)
        self.k_proj = LoRALinear(nn.Linear(d_emb, d_emb, bias=False), lora.rank, lora.alpha, lora.dropout)
        self.v_proj = nn.Linear(d_emb, d_emb, bias=False)
        self.o_proj = nn.Linear(d_emb, d_emb, bias=False)

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q = self.q_proj(x).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(x).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(x).view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        return self.o_proj(out.transpose(1, 2).reshape(b, t, d))


class _Block(nn.Module):
    def __init__(self, d_emb: int, n_heads: int, d_ff: int, lora: LoraConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_emb)
        self.attn = _Attention(d_emb, n_heads, lora)
        self.ln2 = nn.LayerNorm(d_emb)
        self.mlp = nn.Sequential(
            nn.Linear(d_emb, d_ff), nn.GELU(), nn.Linear(d_ff, d_emb)
        )

    def forward(self, x, attn_mask):
        x = x + self.attn(self.ln1(x), attn_mask)
        x = x + self.mlp(self.ln2(x))
        return x


class TinyCausalLM(nn.Module):
    """Desk-scale decoder-only transformer satisfying LanguageModelHandle."""

    read_safe = True

    def __init__(self, vocab_size: int, cfg: ModelConfig, lora: LoraConfig | None = None):
        super().__init__()
        lora = lora or LoraConfig()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.d_emb = cfg.d_emb
        self.tok_emb = nn.Embedding(vocab_size, cfg.d_emb)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, cfg.d_emb)
        self.blocks = nn.ModuleList(
            _Block(cfg.d_emb, cfg.n_heads, cfg.d_ff, lora) for _ in range(cfg.n_layers)
        )
        self.ln_f = nn.LayerNorm(cfg.d_emb)
        self.lm_head = nn.Linear(cfg.d_emb, vocab_size, bias=False)
        self.apply(self._init_weights)
        # zero-init B keeps fresh adapters inert; apply() above overwrote it
        for m in self.modules():
            if isinstance(m, LoRALinear):
                nn.init.zeros_(m.lora_b)

    @staticmethod
    def _init_weights(m):
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, mean=0.0, std=0.02)
            if isinstance(m, nn.Linear) and m.bias is not None:
                nn.init.zeros_(m.bias)

    def input_embedding_lookup(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok_emb(ids)

    def forward_hidden_states(
        self, inputs_embeds: torch.Tensor, pad_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Run the stack over (B, T, d) or (T, d) input embeddings.

        ``pad_mask`` (B, T) marks valid positions with True; padding is
        excluded from attention keys. Output matches the input batch shape.
        """
        squeeze = inputs_embeds.ndim == 2
        if squeeze:
            inputs_embeds = inputs_embeds.unsqueeze(0)
        b, t, _ = inputs_embeds.shape
        if t > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        pos = torch.arange(t, device=inputs_embeds.device)
        x = inputs_embeds + self.pos_emb(pos)[None, :, :]
        causal = torch.tril(torch.ones(t, t, dtype=torch.bool, device=x.device))
        attn_mask = causal[None, None, :, :]
        if pad_mask is not None:
            attn_mask = attn_mask & pad_mask[:, None, None, :]
        for block in self.blocks:
            x = block(x, attn_mask)
        x = self.ln_f(x)
        return x.squeeze(0) if squeeze else x

    def output_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.lm_head(hidden)

    @torch.no_grad()
    def greedy_generate(
        self, prefix_embeds: torch.Tensor, max_len: int, stop_id: int | None = None
    ) -> list[int]:
        """Deterministic argmax continuation of a (T, d) embedding prefix."""
        was_training = self.training
        self.eval()
        try:
            embeds = prefix_embeds
            out: list[int] = []
            for _ in range(max_len):
                hidden = self.forward_hidden_states(embeds)
                logits = self.output_logits(hidden[-1])
                next_id = int(torch.argmax(logits).item())
                out.append(next_id)
                if stop_id is not None and next_id == stop_id:
                    break
                next_emb = self.input_embedding_lookup(
                    torch.tensor([next_id], device=embeds.device)
                )
                embeds = torch.cat([embeds, next_emb], dim=0)
        finally:
            if was_training:
                self.train()
        return out

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        lora_params: list[nn.Parameter] = []
        for m in self.modules():
            if isinstance(m, LoRALinear):
                lora_params.extend(m.lora_parameters())
        lora_ids = {id(p) for p in lora_params}
        special = lora_ids | {id(self.tok_emb.weight), id(self.lm_head.weight)}
        base = [p for p in self.parameters() if id(p) not in special]
        return {
            "lora_adapters": lora_params,
            "token_embeddings": [self.tok_emb.weight],
            "lm_head": [self.lm_head.weight],
            "base": base,
        }


_BACKBONES: dict[str, Callable[..., LanguageModelHandle]] = {}


def register_backbone(name: str, factory: Callable[..., LanguageModelHandle]) -> None:
    """Register an external backbone factory under a preset name."""
    _BACKBONES[name] = factory


def build_model(vocab_size: int, cfg: ModelConfig, lora: LoraConfig | None = None) -> LanguageModelHandle:
    if cfg.preset == "tiny":
        return TinyCausalLM(vocab_size, cfg, lora)
    if cfg.preset in _BACKBONES:
        return _BACKBONES[cfg.preset](vocab_size=vocab_size, cfg=cfg, lora=lora)
    raise ValueError(
        f"unknown model preset {cfg.preset!r}; built-in preset is 'tiny' and external "
        f"backbones must be registered via stegolm.model.register_backbone"
    )
