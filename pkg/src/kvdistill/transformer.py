"""Decoder-only transformer with per-layer KV-cache extraction and injection."""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_HIDDEN = -1e9


class CacheMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    vocab_size: int = 97  # size of the synthetic vocabulary
    max_seq: int = 128
    position_scheme: str = "rotary"  # or "learned"
    mlp_ratio: int = 4
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.position_scheme not in ("rotary", "learned"):
            raise ValueError(f"unknown position_scheme {self.position_scheme!r}")
        if self.position_scheme == "rotary" and self.d_head % 2:
            raise ValueError("rotary positions need an even head dimension")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LayerWeights:
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    mlp_norm: Tensor
    w_in: Tensor
    w_out: Tensor

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for name in ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_in", "w_out"):
            yield name, getattr(self, name)


@dataclass
class DecoderWeights:
    config: TransformerConfig
    embed: Tensor
    layers: list[LayerWeights]
    final_norm: Tensor
    head: Tensor
    pos: Tensor | None = None

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "embed", self.embed
        if self.pos is not None:
            yield "pos", self.pos
        for i, layer in enumerate(self.layers):
            for name, t in layer.named():
                yield f"layers.{i}.{name}", t
        yield "final_norm", self.final_norm
        yield "head", self.head

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def requires_grad_(self, flag: bool) -> "DecoderWeights":
        for t in self.parameters():
            t.requires_grad = flag
        return self

    def clone(self) -> "DecoderWeights":
        cp = lambda t: Tensor(t.data.copy(), requires_grad=t.requires_grad)  # noqa: E731
        return DecoderWeights(
            config=self.config,
            embed=cp(self.embed),
            layers=[LayerWeights(*(cp(t) for _, t in layer.named())) for layer in self.layers],
            final_norm=cp(self.final_norm),
            head=cp(self.head),
            pos=None if self.pos is None else cp(self.pos),
        )


@dataclass
class KVCache:
    """Per-layer keys/values, each ``[batch, seq, heads, d_head]``.

    Keys are stored after the rotary transform, so a consumer attends with
    position-consistent keys without knowing how they were produced.
    """
    keys: list[Tensor]
    values: list[Tensor]

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    @property
    def seq_len(self) -> int:
        return self.keys[0].shape[1]

    def detached(self) -> "KVCache":
        return KVCache([k.detach() for k in self.keys], [v.detach() for v in self.values])

    def check(self, config: TransformerConfig) -> None:
        if len(self.keys) != config.n_layers or len(self.values) != config.n_layers:
            raise CacheMismatchError(f"cache has {len(self.keys)} layers, decoder has {config.n_layers}")
        ref = self.keys[0].shape
        for k, v in zip(self.keys, self.values):
            if k.shape != ref or v.shape != ref:
                raise CacheMismatchError(f"cache layers disagree in shape: {k.shape} vs {ref}")
        if ref[2:] != (config.n_heads, config.d_head):
            raise CacheMismatchError(f"cache head layout {ref[2:]} != {(config.n_heads, config.d_head)}")


@dataclass
class AttentionMask:
    """Additive mask ``[batch, seq, seq]`` plus the per-position padding indicator."""
    additive: np.ndarray
    padding: np.ndarray = field(repr=False)

    @property
    def seq_len(self) -> int:
        return self.additive.shape[-1]


def build_causal_mask(seq_len: int, padding=None) -> np.ndarray:
    """Single-sequence additive mask: hidden when key is in the future or padding."""
    padding = np.zeros(seq_len, dtype=bool) if padding is None else np.asarray(padding, dtype=bool)
    if padding.shape != (seq_len,):
        raise ValueError(f"padding length {padding.shape} != seq_len {seq_len}")
    hidden = np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1) | padding[None, :]
    return np.where(hidden, MASK_HIDDEN, 0.0)


def batch_mask(attention: np.ndarray, dtype=np.float64) -> AttentionMask:
    """Build the batched mask from ``attention`` (1 = real token, 0 = padding)."""
    attention = np.asarray(attention)
    padding = attention == 0
    additive = np.stack([build_causal_mask(attention.shape[1], p) for p in padding]).astype(dtype)
    return AttentionMask(additive, padding)


def full_mask(batch: int, seq_len: int, dtype=np.float64) -> AttentionMask:
    """Bidirectional, unpadded mask (vision encoder)."""
    return AttentionMask(np.zeros((batch, seq_len, seq_len), dtype=dtype),
                         np.zeros((batch, seq_len), dtype=bool))


@functools.lru_cache(maxsize=64)
def _rope_tables(seq_len: int, d_head: int, base: float, dtype_name: str):
    half = d_head // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    ang = np.concatenate([ang, ang], axis=-1)[:, None, :]  # [seq, 1, d_head]
    cos, sin = np.cos(ang).astype(dtype_name), np.sin(ang).astype(dtype_name)
    cos.flags.writeable = False
    sin.flags.writeable = False
    return cos, sin


def rope_tables(seq_len: int, config: TransformerConfig, dtype) -> tuple[np.ndarray, np.ndarray]:
    return _rope_tables(seq_len, config.d_head, config.rope_base, np.dtype(dtype).name)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
    """softmax(q k^T / sqrt(d_head) + M) v for ``[batch, seq, heads, d_head]`` inputs."""
    if q.ndim != 4 or k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2:] != k.shape[2:]:
        raise ad.ShapeError("causal_attention", q.shape, k.shape, v.shape)
    additive = mask.additive if isinstance(mask, AttentionMask) else np.asarray(mask)
    if additive.shape[-2:] != (q.shape[1], k.shape[1]):
        raise ad.ShapeError("causal_attention", additive.shape, (q.shape[1], k.shape[1]), detail="mask")
    qh = ad.transpose(q, (0, 2, 1, 3))
    kt = ad.transpose(k, (0, 2, 3, 1))
    vh = ad.transpose(v, (0, 2, 1, 3))
    scores = ad.scale(qh @ kt, 1.0 / math.sqrt(q.shape[-1]))
    if additive.ndim == 3:
        additive = additive[:, None, :, :]
    probs = ad.softmax_lastdim(ad.add(scores, Tensor(additive.astype(q.dtype, copy=False))))
    out = probs @ vh
    return ad.transpose(out, (0, 2, 1, 3))


def init_decoder(config: TransformerConfig, rng: np.random.Generator, dtype=np.float64) -> DecoderWeights:
    d, V = config.d_model, config.vocab_size
    hidden = config.mlp_ratio * d
    out_scale = 1.0 / math.sqrt(2 * config.n_layers)

    def w(fan_in, fan_out, s=1.0):
        return Tensor(rng.normal(0.0, s / math.sqrt(fan_in), size=(fan_in, fan_out)).astype(dtype),
                      requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n, dtype=dtype), requires_grad=True)

    embed = Tensor(rng.normal(0.0, 1.0, size=(V, d)).astype(dtype), requires_grad=True)
    pos = None
    if config.position_scheme == "learned":
        pos = Tensor(rng.normal(0.0, 0.1, size=(config.max_seq, d)).astype(dtype), requires_grad=True)
    layers = [
        LayerWeights(ones(d), w(d, d), w(d, d), w(d, d), w(d, d, out_scale),
                     ones(d), w(d, hidden), w(hidden, d, out_scale))
        for _ in range(config.n_layers)
    ]
    return DecoderWeights(config, embed, layers, ones(d), w(d, V), pos)


def embed_tokens(weights: DecoderWeights, token_ids) -> Tensor:
    """Token embeddings ``[batch, seq, d_model]`` (+ learned positions if that scheme is active)."""
    ids = np.asarray(token_ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    x = ad.embedding_lookup(weights.embed, ids)
    if weights.pos is not None:
        if ids.shape[1] > weights.config.max_seq:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq {weights.config.max_seq}")
        x = ad.add(x, weights.pos[: ids.shape[1]])
    return x[0] if squeeze else x


def add_positions(weights: DecoderWeights, x: Tensor) -> Tensor:
    """Add learned-absolute positions to an already embedded sequence (no-op under rotary)."""
    if weights.pos is None:
        return x
    return ad.add(x, weights.pos[: x.shape[1]])


def _split_heads(x: Tensor, config: TransformerConfig) -> Tensor:
    b, s, _ = x.shape
    return ad.reshape(x, (b, s, config.n_heads, config.d_head))


def decoder_forward(weights: DecoderWeights, input_embeds: Tensor, mask: AttentionMask,
                    kv_source: KVCache | None = None) -> tuple[Tensor, KVCache]:
    """Run the decoder; ``kv_source=None`` is self mode, a cache switches to inject mode.

    In inject mode this decoder's key/value projections are never evaluated:
    every layer attends with its own queries over the supplied keys/values,
    and the supplied cache is returned unchanged.
    """
    config = weights.config
    if input_embeds.ndim != 3 or input_embeds.shape[-1] != config.d_model:
        raise ad.ShapeError("decoder_forward", input_embeds.shape, (None, None, config.d_model))
    b, s, d = input_embeds.shape
    if s > config.max_seq:
        raise ValueError(f"sequence length {s} exceeds max_seq {config.max_seq}")
    if kv_source is not None:
        kv_source.check(config)
        if kv_source.seq_len != s or kv_source.keys[0].shape[0] != b:
            raise CacheMismatchError(
                f"cache covers (batch={kv_source.keys[0].shape[0]}, seq={kv_source.seq_len}), "
                f"input is (batch={b}, seq={s})")
    if mask.seq_len != s:
        raise ad.ShapeError("decoder_forward", mask.additive.shape, (s, s), detail="mask")
    rotary = config.position_scheme == "rotary"
    if rotary:
        cos, sin = rope_tables(s, config, input_embeds.dtype)

    x = input_embeds
    keys, values = [], []
    for i, layer in enumerate(weights.layers):
        h = ad.rms_norm(x, layer.attn_norm)
        q = _split_heads(h @ layer.wq, config)
        if rotary:
            q = ad.rotary(q, cos, sin)
        if kv_source is None:
            k = _split_heads(h @ layer.wk, config)
            v = _split_heads(h @ layer.wv, config)
            if rotary:
                k = ad.rotary(k, cos, sin)
        else:
            k, v = kv_source.keys[i], kv_source.values[i]
        keys.append(k)
        values.append(v)
        attn = ad.reshape(causal_attention(q, k, v, mask), (b, s, d))
        x = ad.add(x, attn @ layer.wo)
        h = ad.rms_norm(x, layer.mlp_norm)
        x = ad.add(x, ad.gelu(h @ layer.w_in) @ layer.w_out)
    logits = ad.rms_norm(x, weights.final_norm) @ weights.head
    cache = kv_source if kv_source is not None else KVCache(keys, values)
    return logits, cache
