"""ConvBERT-style probe trained on frozen per-residue embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

TOKEN_TASKS = {"ssp3": 3, "ssp8": 8}
SEQUENCE_TASKS = ("fluorescence", "gb1")
TASK_KINDS = tuple(TOKEN_TASKS) + SEQUENCE_TASKS + ("contact",)


class NonFiniteLoss(FloatingPointError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class HeadConfig:
    embedding_dim: int
    num_layers: int = 1
    num_heads: int = 4
    dropout: float = 0.1
    kernel_size: int = 7
    pooling: str = "average"
    learning_rate: float = 1e-2
    warmup_steps: int = 1000
    num_epochs: int = 20
    gradient_accumulation: int = 16
    batch_size: int = 1
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.embedding_dim % 2 or self.embedding_dim % self.num_heads:
            raise ValueError("embedding_dim must be divisible by 2 and by num_heads")
        if self.num_heads % 2:
            raise ValueError("num_heads must be even (split between attention and convolution)")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @property
    def feedforward_dim(self) -> int:
        return self.embedding_dim // 2


class SeparableConv1d(nn.Module):
    def __init__(self, d_in: int, d_out: int, kernel_size: int):
        super().__init__()
        self.depthwise = nn.Conv1d(d_in, d_in, kernel_size, padding=kernel_size // 2, groups=d_in, bias=False)
        self.pointwise = nn.Conv1d(d_in, d_out, 1, bias=False)
        self.bias = nn.Parameter(torch.zeros(d_out, 1))

    def forward(self, x):  # x [B, d, L]
        return self.pointwise(self.depthwise(x)) + self.bias


class MixedAttention(nn.Module):
    """Half the heads are self-attention, half span-based dynamic convolution."""

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        d = cfg.embedding_dim
        self.head_size = d // cfg.num_heads
        self.n_attn = self.n_conv = cfg.num_heads // 2
        half = self.n_attn * self.head_size
        self.k = cfg.kernel_size
        self.query = nn.Linear(d, half)
        self.key = nn.Linear(d, half)
        self.value = nn.Linear(d, half)
        self.key_conv = SeparableConv1d(d, half, cfg.kernel_size)
        self.conv_kernel = nn.Linear(half, self.n_conv * cfg.kernel_size)
        self.conv_out = nn.Linear(d, half)
        self.dropout = nn.Dropout(cfg.dropout)

    def attention_branch(self, x, mask):
        B, L, _ = x.shape
        def heads(t):
            return t.view(B, L, self.n_attn, self.head_size).transpose(1, 2)
        q, k, v = heads(self.query(x)), heads(self.key(x)), heads(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_size)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, None, :], torch.finfo(scores.dtype).min)
        probs = self.dropout(torch.softmax(scores, -1))
        return (probs @ v).transpose(1, 2).reshape(B, L, -1)

    def conv_branch(self, x):
        B, L, _ = x.shape
        q = self.query(x)
        span_key = self.key_conv(x.transpose(1, 2)).transpose(1, 2)
        kernel = self.conv_kernel(span_key * q).view(B, L, self.n_conv, self.k)
        kernel = torch.softmax(kernel, dim=-1)
        values = self.conv_out(x)  # [B, L, half]
        pad = self.k // 2
        windows = F.pad(values, (0, 0, pad, pad)).unfold(1, self.k, 1)  # [B, L, half, k]
        windows = windows.view(B, L, self.n_conv, self.head_size, self.k)
        return torch.einsum("blhdk,blhk->blhd", windows, kernel).reshape(B, L, -1)

    def forward(self, x, mask=None):
        return torch.cat([self.attention_branch(x, mask), self.conv_branch(x)], dim=-1)


class ConvBertLayer(nn.Module):
    def __init__(self, cfg: HeadConfig):
        super().__init__()
        d = cfg.embedding_dim
        self.mixer = MixedAttention(cfg)
        self.mix_out = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d)
        self.ff_in = nn.Linear(d, cfg.feedforward_dim)
        self.ff_out = nn.Linear(cfg.feedforward_dim, d)
        self.norm2 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, mask=None):
        x = self.norm1(x + self.dropout(self.mix_out(self.mixer(x, mask))))
        return self.norm2(x + self.dropout(self.ff_out(F.gelu(self.ff_in(x)))))


class ConvBertHead(nn.Module):
    def __init__(self, cfg: HeadConfig, task: str):
        super().__init__()
        if task not in TASK_KINDS:
            raise ValueError(f"unknown task kind {task!r}; valid: {', '.join(TASK_KINDS)}")
        self.cfg = cfg
        self.task = task
        d = cfg.embedding_dim
        self.layers = nn.ModuleList(ConvBertLayer(cfg) for _ in range(cfg.num_layers))
        if task in TOKEN_TASKS:
            self.out = nn.Linear(d, TOKEN_TASKS[task])
        elif task == "contact":
            self.out = nn.Linear(4 * d, 1)
        else:
            self.out = nn.Linear(d, 1)

    def features(self, emb: torch.Tensor) -> torch.Tensor:
        x = emb
        for layer in self.layers:
            x = layer(x)
        return x

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        """Token logits ``[L, C]``, a scalar prediction, or contact scores ``[L, L]``."""
        unbatched = emb.dim() == 2
        h = self.features(emb[None] if unbatched else emb)
        if self.task in TOKEN_TASKS:
            out = self.out(h)
        elif self.task == "contact":
            L = h.shape[1]
            hi = h[:, :, None, :].expand(-1, L, L, -1)
            hj = h[:, None, :, :].expand(-1, L, L, -1)
            pair = torch.cat([hi, hj, (hi - hj).abs(), hi * hj], dim=-1)
            s = self.out(pair).squeeze(-1)
            out = 0.5 * (s + s.transpose(1, 2))
        else:
            out = self.out(h.mean(dim=1)).squeeze(-1)
        return out[0] if unbatched else out


def convbert_head_forward(head: ConvBertHead, embeddings) -> torch.Tensor:
    """Features ``[L, d]`` after the ConvBERT layers (inference mode)."""
    emb = torch.as_tensor(embeddings)
    if emb.dim() != 2 or emb.shape[1] != head.cfg.embedding_dim:
        raise ShapeMismatch(f"expected [L, {head.cfg.embedding_dim}], got {tuple(emb.shape)}")
    was_training = head.training
    head.eval()
    try:
        with torch.no_grad():
            return head.features(emb.to(next(head.parameters()).dtype)[None])[0]
    finally:
        head.train(was_training)


def example_loss(head: ConvBertHead, emb: torch.Tensor, label) -> torch.Tensor:
    out = head(emb)
    if head.task in TOKEN_TASKS:
        return F.cross_entropy(out, torch.as_tensor(label, dtype=torch.long), ignore_index=-1)
    if head.task == "contact":
        truth = torch.as_tensor(label, dtype=out.dtype)
        off = ~torch.eye(out.shape[0], dtype=torch.bool)
        return F.binary_cross_entropy_with_logits(out[off], truth[off])
    return F.mse_loss(out, torch.as_tensor(label, dtype=out.dtype))


def warmup_factor(update: int, warmup_steps: int) -> float:
    """Linear warmup over optimizer updates (1-based), then constant."""
    return min(1.0, update / warmup_steps)


def train_head(embeddings: Sequence, labels: Sequence, task: str, cfg: HeadConfig,
               seed: int, dtype: torch.dtype = torch.float32) -> ConvBertHead:
    """Fit a head with batch 1 and gradient accumulation; deterministic in ``seed``.

    The final partial accumulation window of each epoch is applied too.
    """
    if len(embeddings) != len(labels) or not embeddings:
        raise ShapeMismatch("need equal, non-zero numbers of embeddings and labels")
    embs = [torch.as_tensor(e).to(dtype) for e in embeddings]
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        head = ConvBertHead(cfg, task).to(dtype)
        opt = torch.optim.AdamW(head.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
        order_rng = np.random.default_rng(seed)
        head.train()
        updates = 0
        pending = 0
        for _ in range(cfg.num_epochs):
            for i in order_rng.permutation(len(embs)):
                value = example_loss(head, embs[i], labels[i])
                if not torch.isfinite(value):
                    raise NonFiniteLoss(f"non-finite head loss on example {i}")
                (value / cfg.gradient_accumulation).backward()
                pending += 1
                if pending == cfg.gradient_accumulation:
                    updates = _apply(opt, cfg, updates)
                    pending = 0
            if pending:
                updates = _apply(opt, cfg, updates)
                pending = 0
    head.eval()
    return head


def _apply(opt, cfg: HeadConfig, updates: int) -> int:
    updates += 1
    for group in opt.param_groups:
        group["lr"] = cfg.learning_rate * warmup_factor(updates, cfg.warmup_steps)
    opt.step()
    opt.zero_grad(set_to_none=True)
    return updates


def predict(head: ConvBertHead, emb) -> np.ndarray:
    head.eval()
    with torch.no_grad():
        out = head(torch.as_tensor(emb).to(next(head.parameters()).dtype))
    if head.task in TOKEN_TASKS:
        return out.argmax(-1).numpy()
    return out.double().numpy()
