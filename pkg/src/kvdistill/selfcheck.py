"""Fast invariant and oracle checks runnable from the command line."""
from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import IGNORE_INDEX, Tensor
from .data import LANG_MM, OCR, TEXT, collate_batch, gen_lang_mm_samples, gen_ocr_mm_samples, gen_text_corpus
from .multimodal import DualTower, VisionConfig, init_projector, init_vision, train_step
from .objective import AlphaPolicy, combined_loss
from .optim import AdamWState
from .runner import load_checkpoint, save_checkpoint
from .transformer import TransformerConfig, batch_mask, decoder_forward, embed_tokens, init_decoder


def _check_gradients(rng) -> str:
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(5, 4))
    g = rng.normal(size=5) + 1.0
    z = rng.normal(size=(3, 4))
    labels = np.array([1, IGNORE_INDEX, 3])
    cases = {
        "matmul+gelu": lambda a, b: ad.sum_(ad.gelu(a @ b)),
        "rms_norm": lambda a, gg: ad.sum_(ad.mul(ad.rms_norm(a, gg), Tensor(np.arange(5.0)))),
        "cross_entropy": lambda zz: ad.cross_entropy_masked(zz, labels)[0],
        "kl": lambda zz: ad.kl_divergence_masked(Tensor(z[::-1].copy()), zz, labels != IGNORE_INDEX, 2.0)[0],
    }
    inputs = {"matmul+gelu": [x, w], "rms_norm": [x, g], "cross_entropy": [z], "kl": [z]}
    worst = 0.0
    for name, fn in cases.items():
        err = ad.grad_check(fn, inputs[name])
        if err >= 1e-4:
            raise AssertionError(f"{name}: relative error {err:.2e}")
        worst = max(worst, err)
    return f"max relative error {worst:.1e}"


def _tiny(rng, dtype=np.float64):
    cfg = TransformerConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=97, max_seq=40)
    return cfg, init_decoder(cfg, rng, dtype)


def _check_injection(rng) -> str:
    cfg, dec = _tiny(rng)
    ids = rng.integers(0, cfg.vocab_size, size=(2, 7))
    mask = batch_mask(np.ones((2, 7), dtype=np.int64))
    x = embed_tokens(dec, ids)
    z_self, cache = decoder_forward(dec, x, mask)
    z_inj, _ = decoder_forward(dec, x, mask, kv_source=cache)
    if not np.array_equal(z_self.data, z_inj.data):
        raise AssertionError("inject mode with own cache differs from self mode")
    return "self-cache injection bitwise equal"


def _oracle_loss(zt, zs, labels, attention, alphas, T):
    total, n = 0.0, 0
    B, S, _ = zs.shape
    for b in range(B):
        for t in range(S):
            if attention[b, t] != 1 or labels[b, t] == IGNORE_INDEX:
                continue
            n += 1
            ps = np.exp(zs[b, t] - zs[b, t].max())
            ps /= ps.sum()
            pt = np.exp(zt[b, t] / T - (zt[b, t] / T).max())
            pt /= pt.sum()
            qs = np.exp(zs[b, t] / T - (zs[b, t] / T).max())
            qs /= qs.sum()
            kl = sum(p * (math.log(p) - math.log(q)) for p, q in zip(pt, qs) if p > 0)
            ce = -math.log(ps[labels[b, t]])
            total += alphas[b] * T * T * kl + (1 - alphas[b]) * ce
    return total / n


def _check_objective(rng) -> str:
    B, S, V = 3, 5, 7
    zt, zs = rng.normal(size=(B, S, V)), rng.normal(size=(B, S, V))
    labels = rng.integers(0, V, size=(B, S))
    labels[0, 0] = IGNORE_INDEX
    attention = np.ones((B, S), dtype=np.int64)
    attention[2, 3:] = 0
    tags = [TEXT, OCR, LANG_MM]
    policy = AlphaPolicy.selective(0.7, 4.0)
    got = combined_loss(Tensor(zt), Tensor(zs), labels, attention, tags, policy).value
    want = _oracle_loss(zt, zs, labels, attention, [0.7, 0.0, 0.7], 4.0)
    if abs(got - want) > 1e-10:
        raise AssertionError(f"combined loss {got} != oracle {want}")
    return f"|diff| = {abs(got - want):.1e}"


def _tower(seed: int) -> DualTower:
    rng = np.random.default_rng(seed)
    cfg, student = _tiny(rng)
    vis = VisionConfig(patch_size=12, d_vis=8, n_heads=2, depth=1)
    tower = DualTower(student, init_vision(vis, rng), init_projector(8, 16, rng), student.clone(), train_vision=False)
    tower.sync_requires_grad()
    return tower


def _check_collapse(rng) -> str:
    samples = gen_lang_mm_samples(0, 4) + gen_ocr_mm_samples(0, 4) + gen_text_corpus(0, 2)
    batch = collate_batch(samples, 40, 4)
    a, b = _tower(7), _tower(7)
    oa, ob = AdamWState(weight_decay=0.01), AdamWState(weight_decay=0.01)
    zero = AlphaPolicy.uniform(0.0, 2.0)
    for _ in range(3):
        train_step(a, batch, None, oa, 1e-3)
        train_step(b, batch, zero, ob, 1e-3)
    for (n, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
        if not np.array_equal(x.data, y.data):
            raise AssertionError(f"alpha=0 trajectory differs from CE at {n}")
    teacher_before = [t.data.copy() for t in b.teacher.parameters()]
    train_step(b, batch, AlphaPolicy.uniform(0.5, 2.0), ob, 1e-3)
    if not all(np.array_equal(x, t.data) for x, t in zip(teacher_before, b.teacher.parameters())):
        raise AssertionError("teacher weights changed")
    if any(t.grad is not None for t in b.teacher.parameters()):
        raise AssertionError("teacher received gradients")
    return "alpha=0 matches CE bitwise over 3 steps; teacher untouched"


def _check_checkpoint(rng) -> str:
    tensors = {"a": rng.normal(size=(3, 4)), "b": rng.integers(0, 9, size=5).astype(np.int64)}
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "ck"
        save_checkpoint(p, tensors, {"step": 3})
        back, meta = load_checkpoint(p)
    if meta != {"step": 3} or any(not np.array_equal(tensors[k], back[k]) for k in tensors):
        raise AssertionError("checkpoint round trip lost data")
    return "round trip exact"


CHECKS = {
    "gradients": _check_gradients,
    "kv_injection": _check_injection,
    "objective_oracle": _check_objective,
    "collapse_and_teacher": _check_collapse,
    "checkpoint": _check_checkpoint,
}


def run_selfcheck(seed: int = 0) -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in CHECKS.items():
        rng = np.random.default_rng(seed)
        try:
            out.append((name, True, fn(rng)))
        except Exception as e:  # report every failure, keep going
            out.append((name, False, f"{type(e).__name__}: {e}"))
    return out
