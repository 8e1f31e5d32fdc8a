"""T5-style encoder-decoder with relative position bias and SwiGLU feedforward.

Parameters are held in a flat ``dict[str, torch.Tensor]`` so that the
optimizer, checkpoint writer and gradient checks can walk them by name.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from . import vocab

Parameters = dict[str, torch.Tensor]

RMS_EPS = 1e-6


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    d_ff: int = 128
    num_heads: int = 4
    d_kv: int = 16
    rel_attn_num_buckets: int = 32
    rel_attn_max_distance: int = 128
    vocab_size: int = vocab.VOCAB_SIZE
    tie_word_embeddings: bool = False

    def __post_init__(self):
        for name in ("d_model", "num_encoder_layers", "num_decoder_layers", "d_ff",
                     "num_heads", "d_kv", "rel_attn_num_buckets", "rel_attn_max_distance",
                     "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.tie_word_embeddings:
            raise ValueError("tied embeddings are not supported; output projection is untied")

    @property
    def inner_dim(self) -> int:
        return self.num_heads * self.d_kv

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "ankh3-large": ModelConfig(1536, 48, 24, 3840, 16, 64, 64, 128, 256, False),
    "ankh3-xl": ModelConfig(2560, 48, 24, 6720, 32, 64, 64, 128, 256, False),
    "tiny": ModelConfig(8, 1, 1, 16, 2, 4, 8, 16, 16, False),
    "desk": ModelConfig(),
}


def param_count(cfg: ModelConfig) -> tuple[int, int, int]:
    """Closed-form ``(encoder, decoder, total)`` parameter counts."""
    d, inner, ff, v = cfg.d_model, cfg.inner_dim, cfg.d_ff, cfg.vocab_size
    rel = cfg.rel_attn_num_buckets * cfg.num_heads
    enc = cfg.num_encoder_layers * (4 * d * inner + 3 * d * ff + 2 * d) + d + v * d + rel
    dec = cfg.num_decoder_layers * (8 * d * inner + 3 * d * ff + 3 * d) + d + rel + d * v
    return enc, dec, enc + dec


def _attn_shapes(prefix: str, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, inner = cfg.d_model, cfg.inner_dim
    return {f"{prefix}.q": (d, inner), f"{prefix}.k": (d, inner),
            f"{prefix}.v": (d, inner), f"{prefix}.o": (inner, d)}


def _ff_shapes(prefix: str, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff = cfg.d_model, cfg.d_ff
    return {f"{prefix}.gate": (d, ff), f"{prefix}.in": (d, ff), f"{prefix}.out": (ff, d)}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor, in a fixed order."""
    d = cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {"shared_embedding": (cfg.vocab_size, d)}
    for i in range(cfg.num_encoder_layers):
        p = f"encoder.layers.{i}"
        shapes.update(_attn_shapes(f"{p}.self_attn", cfg))
        shapes.update(_ff_shapes(f"{p}.ff", cfg))
        shapes[f"{p}.norm_attn"] = (d,)
        shapes[f"{p}.norm_ff"] = (d,)
    shapes["encoder.final_norm"] = (d,)
    shapes["encoder.rel_bias"] = (cfg.rel_attn_num_buckets, cfg.num_heads)
    for i in range(cfg.num_decoder_layers):
        p = f"decoder.layers.{i}"
        shapes.update(_attn_shapes(f"{p}.self_attn", cfg))
        shapes.update(_attn_shapes(f"{p}.cross_attn", cfg))
        shapes.update(_ff_shapes(f"{p}.ff", cfg))
        shapes[f"{p}.norm_self"] = (d,)
        shapes[f"{p}.norm_cross"] = (d,)
        shapes[f"{p}.norm_ff"] = (d,)
    shapes["decoder.final_norm"] = (d,)
    shapes["decoder.rel_bias"] = (cfg.rel_attn_num_buckets, cfg.num_heads)
    shapes["lm_head"] = (d, cfg.vocab_size)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float64) -> Parameters:
    """Normal(0, 1/fan_in) for matrices, ones for norm scales.

    Embedding rows use fan_in = d_model; relative-bias tables start at zero.
    """
    gen = torch.Generator().manual_seed(seed)
    params: Parameters = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = torch.ones(shape, dtype=dtype)
        elif name.endswith("rel_bias"):
            params[name] = torch.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[1] if name == "shared_embedding" else shape[0]
            t = torch.randn(shape, generator=gen, dtype=torch.float64) / math.sqrt(fan_in)
            params[name] = t.to(dtype)
    return params


def relative_bucket(relative_position: int, bidirectional: bool = True,
                    num_buckets: int = 32, max_distance: int = 128) -> int:
    """T5 bucket for ``relative_position = key_pos - query_pos``."""
    ret = 0
    n = -relative_position
    if bidirectional:
        num_buckets //= 2
        if n < 0:
            ret += num_buckets
        n = abs(n)
    else:
        n = max(n, 0)
    max_exact = num_buckets // 2
    if n < max_exact:
        return ret + n
    large = max_exact + int(
        math.log(n / max_exact) / math.log(max_distance / max_exact) * (num_buckets - max_exact)
    )
    return ret + min(large, num_buckets - 1)


@functools.lru_cache(maxsize=64)
def _offset_buckets(span: int, bidirectional: bool, num_buckets: int, max_distance: int) -> torch.Tensor:
    offsets = range(-(span - 1), span)
    return torch.tensor([relative_bucket(r, bidirectional, num_buckets, max_distance) for r in offsets])


def bucket_matrix(q_len: int, k_len: int, bidirectional: bool, num_buckets: int,
                  max_distance: int) -> torch.Tensor:
    span = max(q_len, k_len)
    table = _offset_buckets(span, bidirectional, num_buckets, max_distance)
    rel = torch.arange(k_len)[None, :] - torch.arange(q_len)[:, None]
    return table[rel + span - 1]


def position_bias(table: torch.Tensor, q_len: int, k_len: int, bidirectional: bool,
                  cfg: ModelConfig) -> torch.Tensor:
    buckets = bucket_matrix(q_len, k_len, bidirectional, cfg.rel_attn_num_buckets,
                            cfg.rel_attn_max_distance)
    return table[buckets].permute(2, 0, 1)  # [heads, q, k]


def rms_norm(x: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + RMS_EPS) * scale


def swiglu(x: torch.Tensor, params: Parameters, prefix: str) -> torch.Tensor:
    return (F.silu(x @ params[f"{prefix}.gate"]) * (x @ params[f"{prefix}.in"])) @ params[f"{prefix}.out"]


def attention(x: torch.Tensor, kv: torch.Tensor, params: Parameters, prefix: str, cfg: ModelConfig,
              bias: torch.Tensor | None, mask: torch.Tensor | None) -> torch.Tensor:
    # x [B, Tq, d], kv [B, Tk, d]; mask broadcastable to [B, H, Tq, Tk], True = attend
    B, Tq, _ = x.shape
    Tk = kv.shape[1]
    h, dk = cfg.num_heads, cfg.d_kv
    q = (x @ params[f"{prefix}.q"]).view(B, Tq, h, dk).transpose(1, 2)
    k = (kv @ params[f"{prefix}.k"]).view(B, Tk, h, dk).transpose(1, 2)
    v = (kv @ params[f"{prefix}.v"]).view(B, Tk, h, dk).transpose(1, 2)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(dk)
    if bias is not None:
        scores = scores + bias
    if mask is not None:
        scores = scores.masked_fill(~mask, torch.finfo(scores.dtype).min)
    weights = torch.softmax(scores, dim=-1)
    out = (weights @ v).transpose(1, 2).reshape(B, Tq, h * dk)
    return out @ params[f"{prefix}.o"]


def _as_batch(ids, name: str, cfg: ModelConfig) -> torch.Tensor:
    t = torch.as_tensor(ids, dtype=torch.long)
    if t.dim() == 1:
        t = t[None]
    if t.dim() != 2 or t.shape[1] == 0:
        raise ShapeMismatch(f"{name} must be a non-empty [len] or [batch, len] id array")
    if (t < 0).any() or (t >= cfg.vocab_size).any():
        raise ShapeMismatch(f"{name} contains ids outside [0, {cfg.vocab_size})")
    return t


def _embed(params: Parameters, ids: torch.Tensor) -> torch.Tensor:
    return F.embedding(ids, params["shared_embedding"])


def run_encoder(params: Parameters, cfg: ModelConfig, ids: torch.Tensor,
                mask: torch.Tensor) -> torch.Tensor:
    x = _embed(params, ids)
    T = ids.shape[1]
    bias = position_bias(params["encoder.rel_bias"], T, T, True, cfg)
    key_mask = mask[:, None, None, :]
    for i in range(cfg.num_encoder_layers):
        p = f"encoder.layers.{i}"
        h = rms_norm(x, params[f"{p}.norm_attn"])
        x = x + attention(h, h, params, f"{p}.self_attn", cfg, bias, key_mask)
        x = x + swiglu(rms_norm(x, params[f"{p}.norm_ff"]), params, f"{p}.ff")
    return rms_norm(x, params["encoder.final_norm"])


def run_decoder(params: Parameters, cfg: ModelConfig, ids: torch.Tensor, memory: torch.Tensor,
                memory_mask: torch.Tensor) -> torch.Tensor:
    x = _embed(params, ids)
    T = ids.shape[1]
    bias = position_bias(params["decoder.rel_bias"], T, T, False, cfg)
    causal = torch.ones(T, T, dtype=torch.bool).tril()[None, None]
    cross_mask = memory_mask[:, None, None, :]
    for i in range(cfg.num_decoder_layers):
        p = f"decoder.layers.{i}"
        h = rms_norm(x, params[f"{p}.norm_self"])
        x = x + attention(h, h, params, f"{p}.self_attn", cfg, bias, causal)
        h = rms_norm(x, params[f"{p}.norm_cross"])
        x = x + attention(h, memory, params, f"{p}.cross_attn", cfg, None, cross_mask)
        x = x + swiglu(rms_norm(x, params[f"{p}.norm_ff"]), params, f"{p}.ff")
    return rms_norm(x, params["decoder.final_norm"])


def shift_right(target_ids: torch.Tensor) -> torch.Tensor:
    """Decoder inputs: the target delayed by one, starting with pad."""
    target_ids = torch.as_tensor(target_ids, dtype=torch.long)
    start = torch.full_like(target_ids[..., :1], vocab.PAD)
    return torch.cat([start, target_ids[..., :-1]], dim=-1)


def forward(params: Parameters, cfg: ModelConfig, encoder_ids, decoder_input_ids,
            encoder_mask=None) -> torch.Tensor:
    """Logits ``[..., target_len, vocab]`` for teacher-forced decoding.

    ``encoder_mask`` marks real encoder positions (True). When omitted every
    non-pad encoder token is attended. Unbatched inputs give unbatched logits.
    """
    unbatched = torch.as_tensor(encoder_ids).dim() == 1
    enc = _as_batch(encoder_ids, "encoder_ids", cfg)
    dec = _as_batch(decoder_input_ids, "decoder_input_ids", cfg)
    if enc.shape[0] != dec.shape[0]:
        raise ShapeMismatch(f"batch sizes differ: {enc.shape[0]} vs {dec.shape[0]}")
    if encoder_mask is None:
        mask = enc != vocab.PAD
    else:
        mask = torch.as_tensor(encoder_mask, dtype=torch.bool)
        if mask.dim() == 1:
            mask = mask[None]
        if mask.shape != enc.shape:
            raise ShapeMismatch(f"encoder_mask shape {tuple(mask.shape)} != ids {tuple(enc.shape)}")
    memory = run_encoder(params, cfg, enc, mask)
    hidden = run_decoder(params, cfg, dec, memory, mask)
    logits = hidden @ params["lm_head"]
    return logits[0] if unbatched else logits


def loss(logits: torch.Tensor, target_ids) -> torch.Tensor:
    """Mean natural-log cross-entropy over non-pad targets."""
    target = torch.as_tensor(target_ids, dtype=torch.long)
    if logits.shape[:-1] != target.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs targets {tuple(target.shape)}")
    keep = target != vocab.PAD
    if not keep.any():
        warnings.warn("all targets are padding; loss defined as 0", RuntimeWarning, stacklevel=2)
        return logits.sum() * 0.0
    return F.cross_entropy(logits[keep], target[keep])


def encode_only(params: Parameters, cfg: ModelConfig, ids, mask=None) -> torch.Tensor:
    """Final encoder states ``[len, d_model]`` (or batched)."""
    unbatched = torch.as_tensor(ids).dim() == 1
    enc = _as_batch(ids, "ids", cfg)
    m = enc != vocab.PAD if mask is None else torch.as_tensor(mask, dtype=torch.bool).reshape(enc.shape)
    with torch.no_grad():
        out = run_encoder(params, cfg, enc, m)
    return out[0] if unbatched else out


def greedy_decode(params: Parameters, cfg: ModelConfig, encoder_ids, max_len: int) -> list[int]:
    """Greedy generation until eos or ``max_len`` tokens."""
    enc = _as_batch(encoder_ids, "encoder_ids", cfg)
    mask = enc != vocab.PAD
    out: list[int] = []
    with torch.no_grad():
        memory = run_encoder(params, cfg, enc, mask)
        for _ in range(max_len):
            dec = torch.tensor([[vocab.PAD] + out])
            nxt = int((run_decoder(params, cfg, dec, memory, mask)[0, -1] @ params["lm_head"]).argmax())
            out.append(nxt)
            if nxt == vocab.EOS:
                break
    return out
