"""Vision encoder + projector + trainable student decoder + frozen teacher decoder.

The teacher never computes its own keys/values: at every layer it attends
with its own queries over the student's cache, and its logits come back
detached so they only ever act as targets.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch
from .objective import AlphaPolicy, LossBreakdown, combined_loss
from .optim import AdamWState, adamw_step, clip_global_norm
from .transformer import (
    AttentionMask,
    DecoderWeights,
    KVCache,
    LayerWeights,
    add_positions,
    batch_mask,
    causal_attention,
    decoder_forward,
    full_mask,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VisionConfig:
    image_size: int = 24
    patch_size: int = 12
    channels: int = 1
    d_vis: int = 64
    depth: int = 2
    n_heads: int = 4
    mlp_ratio: int = 2
    projector_hidden: int = 0  # 0 = single linear map

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.d_vis % self.n_heads:
            raise ValueError("d_vis must be divisible by n_heads")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class VisionEncoderWeights:
    config: VisionConfig
    patch_w: Tensor
    patch_b: Tensor
    pos: Tensor
    blocks: list[LayerWeights]
    final_norm: Tensor

    def named_parameters(self):
        yield "patch_w", self.patch_w
        yield "patch_b", self.patch_b
        yield "pos", self.pos
        for i, blk in enumerate(self.blocks):
            for name, t in blk.named():
                yield f"blocks.{i}.{name}", t
        yield "final_norm", self.final_norm


@dataclass
class ProjectorWeights:
    w1: Tensor
    b1: Tensor
    w2: Tensor | None = None
    b2: Tensor | None = None

    def named_parameters(self):
        yield "w1", self.w1
        yield "b1", self.b1
        if self.w2 is not None:
            yield "w2", self.w2
            yield "b2", self.b2


def init_vision(config: VisionConfig, rng: np.random.Generator, dtype=np.float64) -> VisionEncoderWeights:
    d = config.d_vis
    fan = config.patch_size ** 2 * config.channels
    hidden = config.mlp_ratio * d

    def w(i, o, s=1.0):
        return Tensor(rng.normal(0.0, s / math.sqrt(i), size=(i, o)).astype(dtype), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n, dtype=dtype), requires_grad=True)

    blocks = [LayerWeights(ones(d), w(d, d), w(d, d), w(d, d), w(d, d, 0.5), ones(d), w(d, hidden), w(hidden, d, 0.5))
              for _ in range(config.depth)]
    return VisionEncoderWeights(
        config, w(fan, d), Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        Tensor(rng.normal(0.0, 0.1, size=(config.n_patches, d)).astype(dtype), requires_grad=True),
        blocks, ones(d))


def init_projector(d_vis: int, d_model: int, rng: np.random.Generator, hidden: int = 0,
                   dtype=np.float64) -> ProjectorWeights:
    def w(i, o):
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(i), size=(i, o)).astype(dtype), requires_grad=True)

    def z(n):
        return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

    if hidden:
        return ProjectorWeights(w(d_vis, hidden), z(hidden), w(hidden, d_model), z(d_model))
    return ProjectorWeights(w(d_vis, d_model), z(d_model))


@dataclass
class DualTower:
    student: DecoderWeights
    vision: VisionEncoderWeights | None = None
    projector: ProjectorWeights | None = None
    teacher: DecoderWeights | None = None
    teacher_embeds: str = "shared"  # or "own"
    train_vision: bool = True

    def __post_init__(self):
        if self.teacher_embeds not in ("shared", "own"):
            raise ValueError(f"teacher_embeds must be 'shared' or 'own', got {self.teacher_embeds!r}")
        if self.teacher is not None:
            if self.teacher.config != self.student.config:
                raise ValueError("teacher and student must be architectural twins")
            self.teacher.requires_grad_(False)

    @property
    def image_tokens(self) -> int:
        return 0 if self.vision is None else self.vision.config.n_patches

    def named_parameters(self, include_teacher: bool = False):
        """Student-side parameters (vision, projector, decoder), optionally the teacher's."""
        if self.vision is not None:
            for n, t in self.vision.named_parameters():
                yield f"vision.{n}", t
        if self.projector is not None:
            for n, t in self.projector.named_parameters():
                yield f"projector.{n}", t
        for n, t in self.student.named_parameters():
            yield f"student.{n}", t
        if include_teacher and self.teacher is not None:
            for n, t in self.teacher.named_parameters():
                yield f"teacher.{n}", t

    def trainable(self) -> dict[str, Tensor]:
        out = {}
        for name, t in self.named_parameters():
            if name.startswith("vision.") and not self.train_vision:
                continue
            out[name] = t
        return out

    def sync_requires_grad(self) -> None:
        train = self.trainable()
        for name, t in self.named_parameters():
            t.requires_grad = name in train
        if self.teacher is not None:
            self.teacher.requires_grad_(False)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, H, W]`` (or ``[B, H, W, C]``) -> ``[B, n_patches, patch*patch*C]`` in row-major patch order."""
    if images.ndim == 3:
        images = images[..., None]
    B, H, W, C = images.shape
    if H % patch or W % patch:
        raise ValueError(f"image {H}x{W} not divisible by patch size {patch}")
    x = images.reshape(B, H // patch, patch, W // patch, patch, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, (H // patch) * (W // patch), patch * patch * C)


def patch_embed(vision: VisionEncoderWeights, images) -> Tensor:
    images = np.asarray(images, dtype=vision.patch_w.dtype)
    if images.ndim == 2:
        images = images[None]
    size = vision.config.image_size
    if images.shape[1:3] != (size, size):
        raise ValueError(f"image shape {images.shape[1:3]} != configured {(size, size)}")
    patches = Tensor(patchify(images, vision.config.patch_size))
    return ad.add(patches @ vision.patch_w, vision.patch_b)


def encode_image(vision: VisionEncoderWeights, images) -> Tensor:
    """``[B, n_patches, d_vis]`` features; bidirectional attention over patches."""
    cfg = vision.config
    x = ad.add(patch_embed(vision, images), vision.pos)
    B, P, d = x.shape
    mask = full_mask(B, P, x.dtype)
    dh = d // cfg.n_heads
    for blk in vision.blocks:
        h = ad.rms_norm(x, blk.attn_norm)
        q, k, v = (ad.reshape(h @ w, (B, P, cfg.n_heads, dh)) for w in (blk.wq, blk.wk, blk.wv))
        x = ad.add(x, ad.reshape(causal_attention(q, k, v, mask), (B, P, d)) @ blk.wo)
        h = ad.rms_norm(x, blk.mlp_norm)
        x = ad.add(x, ad.gelu(h @ blk.w_in) @ blk.w_out)
    return ad.rms_norm(x, vision.final_norm)


def project_vision(projector: ProjectorWeights, feats: Tensor) -> Tensor:
    if feats.shape[-1] != projector.w1.shape[0]:
        raise ad.ShapeError("project_vision", feats.shape, projector.w1.shape)
    out = ad.add(feats @ projector.w1, projector.b1)
    if projector.w2 is not None:
        out = ad.add(ad.gelu(out) @ projector.w2, projector.b2)
    return out


@dataclass
class SequenceLayout:
    attention: np.ndarray  # [B, S]
    labels: np.ndarray  # [B, S]
    is_image: np.ndarray  # [B, S]
    mask: AttentionMask = field(repr=False, default=None)


class SequenceTooLongError(ValueError):
    pass


def build_multimodal_sequence(tower: DualTower, batch: Batch) -> tuple[Tensor, Tensor, SequenceLayout]:
    """Prefix image tokens to text embeddings: X = [X_v; X_t] per sample.

    Returns student and teacher input embeddings plus the layout. With
    ``teacher_embeds='own'`` the teacher's text positions use its own table
    while image positions still come from the projector.
    """
    student = tower.student
    dtype = student.embed.dtype
    B, S_text = batch.tokens.shape
    max_seq = student.config.max_seq
    text_s = ad.embedding_lookup(student.embed, batch.tokens)
    own = tower.teacher_embeds == "own" and tower.teacher is not None
    text_t = ad.embedding_lookup(tower.teacher.embed, batch.tokens) if own else None

    n_img = tower.image_tokens if batch.has_image.any() else 0
    if n_img and tower.vision is None:
        raise ValueError("batch has images but the tower has no vision encoder")
    lengths = batch.attention.sum(axis=1) + np.where(batch.has_image, n_img, 0)
    if lengths.max() > max_seq:
        b = int(np.argmax(lengths))
        raise SequenceTooLongError(f"sample {b} ({batch.sources[b].name}) has length {int(lengths[b])} "
                                   f"> max_seq {max_seq}")

    if n_img == 0:
        emb_s, emb_t = text_s, text_t
        attention, labels = batch.attention, batch.labels
        is_image = np.zeros((B, S_text), dtype=bool)
    else:
        img = project_vision(tower.projector, encode_image(tower.vision, batch.images))
        if batch.has_image.all():
            emb_s = ad.concat([img, text_s], axis=1)
            emb_t = ad.concat([img, text_t], axis=1) if own else None
            pad = np.full((B, n_img), -100, dtype=np.int64)
            attention = np.concatenate([np.ones((B, n_img), dtype=np.int64), batch.attention], axis=1)
            labels = np.concatenate([pad, batch.labels], axis=1)
            is_image = np.zeros(attention.shape, dtype=bool)
            is_image[:, :n_img] = True
        else:
            emb_s, emb_t, attention, labels, is_image = _mixed_layout(batch, img, text_s, text_t, n_img, dtype)
    emb_s = add_positions(student, emb_s)
    if own:
        emb_t = add_positions(tower.teacher, emb_t)
    else:
        emb_t = emb_s
    layout = SequenceLayout(attention, labels, is_image, batch_mask(attention, dtype))
    return emb_s, emb_t, layout


def _mixed_layout(batch, img, text_s, text_t, n_img, dtype):
    """Per-sample concatenation when only some samples carry an image."""
    B, S_text = batch.tokens.shape
    S = S_text + n_img
    d = text_s.shape[-1]
    rows_s, rows_t = [], []
    attention = np.zeros((B, S), dtype=np.int64)
    labels = np.full((B, S), -100, dtype=np.int64)
    is_image = np.zeros((B, S), dtype=bool)
    for b in range(B):
        parts_s = [text_s[b:b + 1]]
        parts_t = [text_t[b:b + 1]] if text_t is not None else None
        if batch.has_image[b]:
            parts_s.insert(0, img[b:b + 1])
            if parts_t is not None:
                parts_t.insert(0, img[b:b + 1])
            attention[b, :n_img] = 1
            is_image[b, :n_img] = True
            off = n_img
        else:
            zeros = Tensor(np.zeros((1, n_img, d), dtype=dtype))
            parts_s.append(zeros)
            if parts_t is not None:
                parts_t.append(zeros)
            off = 0
        attention[b, off:off + S_text] = batch.attention[b]
        labels[b, off:off + S_text] = batch.labels[b]
        rows_s.append(ad.concat(parts_s, axis=1))
        if parts_t is not None:
            rows_t.append(ad.concat(parts_t, axis=1))
    emb_t = ad.concat(rows_t, axis=0) if rows_t else None
    return ad.concat(rows_s, axis=0), emb_t, attention, labels, is_image


def student_forward(tower: DualTower, input_embeds: Tensor, mask: AttentionMask) -> tuple[Tensor, KVCache]:
    return decoder_forward(tower.student, input_embeds, mask)


def teacher_forward_shared_kv(tower: DualTower, input_embeds_teacher: Tensor, mask: AttentionMask,
                              student_cache: KVCache) -> Tensor:
    """Teacher logits over the student's cache, returned with no graph attached."""
    if tower.teacher is None:
        raise ValueError("tower has no teacher")
    with ad.no_grad():
        logits, _ = decoder_forward(tower.teacher, input_embeds_teacher.detach(), mask,
                                    kv_source=student_cache.detached())
    return logits.detach()


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    loss: LossBreakdown
    grad_norm: float
    lr: float
    skipped: bool = False
    warning: str | None = None


def forward_losses(tower: DualTower, batch: Batch, policy: AlphaPolicy | None) -> LossBreakdown:
    emb_s, emb_t, layout = build_multimodal_sequence(tower, batch)
    z_s, cache = student_forward(tower, emb_s, layout.mask)
    z_t = None
    if policy is not None:
        z_t = teacher_forward_shared_kv(tower, emb_t, layout.mask, cache)
    return combined_loss(z_t, z_s, layout.labels, layout.attention, batch.sources, policy)


def train_step(tower: DualTower, batch: Batch, policy: AlphaPolicy | None, optimizer: AdamWState,
               lr: float, max_norm: float = 1.0) -> StepResult:
    """One optimizer step on the student side; the teacher is read-only.

    ``policy=None`` gives the plain CE fine-tuning step. Any policy, even one
    with every alpha at 0, runs the teacher and the mixed objective.
    """
    params = tower.trainable()
    for t in params.values():
        t.grad = None
    loss = forward_losses(tower, batch, policy)
    if loss.empty:
        log.warning("train_step: no counted positions in batch; update skipped")
        return StepResult(loss, 0.0, lr, skipped=True, warning="empty batch")
    loss.combined.backward()
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()}
    grads, norm = clip_global_norm(grads, max_norm)
    ok = adamw_step({n: t.data for n, t in params.items()}, grads, optimizer, lr)
    for t in params.values():
        t.grad = None
    if not ok:
        log.warning("train_step: non-finite gradient; update skipped")
        return StepResult(loss, norm, lr, skipped=True, warning="non-finite gradient")
    return StepResult(loss, norm, lr)
