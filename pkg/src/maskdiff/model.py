"""Bidirectional encoder conditioned on diffusion time through AdaLN-zero."""

from __future__ import annotations

import contextvars
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

# diffusion time fed to the network when time conditioning is disabled
UNCONDITIONED_T = 0.0
MAX_PERIOD = 10_000.0

_ROW_INVARIANT = contextvars.ContextVar("row_invariant", default=False)


@contextmanager
def row_invariant_matmul():
    """Make every projection compute each row on its own.

    BLAS picks different kernels for different row counts, so a row's result
    can change in the last bits depending on what it is batched with. Inside
    this context each row goes through an identical ``1 x K`` product, which
    makes outputs independent of batch composition (about 4x slower).
    """
    token = _ROW_INVARIANT.set(True)
    try:
        yield
    finally:
        _ROW_INVARIANT.reset(token)


def linear(x, weight, bias=None):
    if not _ROW_INVARIANT.get():
        return F.linear(x, weight, bias)
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    wt = weight.t()
    out = torch.bmm(flat[:, None, :], wt.expand(flat.shape[0], *wt.shape))[:, 0]
    if bias is not None:
        out = out + bias
    return out.reshape(*lead, weight.shape[0])


class Linear(nn.Linear):
    def forward(self, x):
        return linear(x, self.weight, self.bias)


@dataclass
class ModelConfig:
    layers: int = 4
    hidden_dim: int = 256
    heads: int = 4
    ffn_dim: int = 1024
    vocab_size: int = 2048
    max_seq_len: int = 128
    timestep_dim: int = 128
    time_conditioning: bool = True
    tie_weights: bool = True

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")
        if self.timestep_dim % 2:
            raise ValueError("timestep_dim must be even")

    def to_dict(self) -> dict:
        return asdict(self)


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form parameter count for :class:`TimeConditionedEncoder`.

    embeddings  V*H + S*H
    time MLP    T*H + H + H*H + H
    per layer   attention 4H^2 + 4H, FFN 2HF + F + H, AdaLN 6H^2 + 6H
    output      final LayerNorm 2H, bias V, untied head V*H
    """
    V, H, S, T, F_ = cfg.vocab_size, cfg.hidden_dim, cfg.max_seq_len, cfg.timestep_dim, cfg.ffn_dim
    per_layer = (4 * H * H + 4 * H) + (2 * H * F_ + F_ + H) + (6 * H * H + 6 * H)
    total = V * H + S * H + (T * H + H + H * H + H) + cfg.layers * per_layer + 2 * H + V
    if not cfg.tie_weights:
        total += V * H
    return total


def timestep_embedding(t: torch.Tensor | float, dim: int) -> torch.Tensor:
    """Sinusoidal features of ``t`` at ``dim // 2`` geometric frequencies.

    Returns ``[sin(t f_k), cos(t f_k)]`` with ``f_k = MAX_PERIOD ** (-k / half)``.
    """
    if dim % 2:
        raise ValueError(f"timestep embedding dim must be even, got {dim}")
    if not (isinstance(t, torch.Tensor) and t.is_floating_point()):
        t = torch.as_tensor(t, dtype=torch.get_default_dtype())
    if t.ndim == 0:
        t = t[None]
    half = dim // 2
    freqs = torch.exp(
        -math.log(MAX_PERIOD) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def modulate(x, shift, scale):
    return x * (1 + scale) + shift


class SelfAttention(nn.Module):
    def __init__(self, hidden_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = Linear(hidden_dim, 3 * hidden_dim)
        self.out = Linear(hidden_dim, hidden_dim)

    def forward(self, x, key_padding):
        B, L, H = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, H // self.heads).permute(2, 0, 3, 1, 4)
        if _ROW_INVARIANT.get():
            # batched matmul kernels also depend on the batch count
            y = torch.cat([
                self._attend(q[b:b + 1], k[b:b + 1], v[b:b + 1], key_padding[b:b + 1])
                for b in range(B)
            ])
        else:
            y = self._attend(q, k, v, key_padding)
        return self.out(y.transpose(1, 2).reshape(B, L, H))

    @staticmethod
    def _attend(q, k, v, key_padding):
        scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
        scores = scores.masked_fill(key_padding[:, None, None, :], float("-inf"))
        return scores.softmax(dim=-1) @ v


class EncoderBlock(nn.Module):
    """Pre-norm block; each sublayer is ``x + gate * f(modulate(norm(x)))``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        H = cfg.hidden_dim
        self.norm1 = nn.LayerNorm(H, elementwise_affine=False, eps=1e-6)
        self.attn = SelfAttention(H, cfg.heads)
        self.norm2 = nn.LayerNorm(H, elementwise_affine=False, eps=1e-6)
        self.ffn_in = Linear(H, cfg.ffn_dim)
        self.ffn_out = Linear(cfg.ffn_dim, H)
        self.adaln = Linear(H, 6 * H)

    def forward(self, x, cond, key_padding):
        shift1, scale1, gate1, shift2, scale2, gate2 = (
            self.adaln(F.silu(cond))[:, None, :].chunk(6, dim=-1)
        )
        x = x + gate1 * self.attn(modulate(self.norm1(x), shift1, scale1), key_padding)
        h = modulate(self.norm2(x), shift2, scale2)
        return x + gate2 * self.ffn_out(F.gelu(self.ffn_in(h)))


class TimeConditionedEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, pad_id: int = 0):
        super().__init__()
        self.cfg = cfg
        self.pad_id = pad_id
        H = cfg.hidden_dim
        self.tok_emb = nn.Embedding(cfg.vocab_size, H)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, H)
        self.time_mlp = nn.Sequential(
            Linear(cfg.timestep_dim, H), nn.SiLU(), Linear(H, H)
        )
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.layers))
        self.norm_out = nn.LayerNorm(H)
        self.head_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        self.head = None if cfg.tie_weights else Linear(H, cfg.vocab_size, bias=False)
        self.reset_parameters()

    def reset_parameters(self):
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                nn.init.normal_(module.weight, std=0.02)
                if getattr(module, "bias", None) is not None:
                    nn.init.zeros_(module.bias)
        # AdaLN-zero: all residual branches start switched off
        for block in self.blocks:
            nn.init.zeros_(block.adaln.weight)
            nn.init.zeros_(block.adaln.bias)
        nn.init.zeros_(self.head_bias)

    def embed(self, tokens):
        positions = torch.arange(tokens.shape[1], device=tokens.device)
        return self.tok_emb(tokens) + self.pos_emb(positions)[None]

    def output_head(self, x):
        weight = self.tok_emb.weight if self.head is None else self.head.weight
        return linear(self.norm_out(x), weight, self.head_bias)

    def forward(self, tokens, t, attention_mask=None):
        """Logits of shape ``(B, L, vocab)``.

        ``t`` is a ``(B,)`` tensor or a float shared by the batch.
        ``attention_mask`` marks real tokens; by default every non-PAD token.
        """
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be (batch, length), got {tuple(tokens.shape)}")
        B, L = tokens.shape
        if L > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {L} exceeds max_seq_len {self.cfg.max_seq_len}")
        dtype = self.tok_emb.weight.dtype
        if self.cfg.time_conditioning:
            t = torch.as_tensor(t, dtype=dtype, device=tokens.device)
            t = t.expand(B) if t.ndim == 0 else t
            if t.shape != (B,):
                raise ValueError(f"t must have shape ({B},), got {tuple(t.shape)}")
        else:
            t = torch.full((B,), UNCONDITIONED_T, dtype=dtype, device=tokens.device)
        cond = self.time_mlp(timestep_embedding(t, self.cfg.timestep_dim).to(dtype))

        if attention_mask is None:
            attention_mask = tokens != self.pad_id
        key_padding = ~attention_mask

        x = self.embed(tokens)
        for block in self.blocks:
            x = block(x, cond, key_padding)
        logits = self.output_head(x)
        if not torch.isfinite(logits).all():
            raise FloatingPointError("non-finite logits")
        return logits
