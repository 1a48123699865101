"""Exact-match and perplexity evaluation, per-example win/loss counts, recovery report."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import IGNORE_INDEX
from .data import VOCAB, Batch, Sample, collate_batch, gen_lang_mm_samples, gen_ocr_mm_samples, gen_text_corpus
from .multimodal import DualTower, build_multimodal_sequence, student_forward
from .transformer import batch_mask

TASKS = ("text_qa", "mm_qa", "ocr_copy")
# group labels carried into the report
TASK_GROUPS = {"text_qa": "language/knowledge", "mm_qa": "general multimodal", "ocr_copy": "document/OCR",
               "text_ppl": "language/knowledge"}


@dataclass
class TaskSet:
    name: str
    samples: list[Sample]
    metric: str = "exact_match"  # or "perplexity"


@dataclass
class EvalSuite:
    tasks: dict[str, TaskSet]

    def __getitem__(self, name: str) -> TaskSet:
        return self.tasks[name]


def build_eval_suite(seed: int, n: int = 1000) -> EvalSuite:
    """Held-out sets drawn from the eval hash bucket, so never seen in training."""
    text = gen_text_corpus(seed, n, "eval")
    return EvalSuite({
        "text_qa": TaskSet("text_qa", text),
        "mm_qa": TaskSet("mm_qa", gen_lang_mm_samples(seed, n, "eval")),
        "ocr_copy": TaskSet("ocr_copy", gen_ocr_mm_samples(seed, n, "eval")),
        "text_ppl": TaskSet("text_ppl", text, "perplexity"),
    })


# ---------------------------------------------------------------------------
# model adapter
# ---------------------------------------------------------------------------

def model_logits(model, batch: Batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(logits [B,S,V], labels, attention)`` aligned over the full model sequence.

    ``model`` is a DualTower or any object with ``predict_logits(batch)``
    returning the same triple.
    """
    if hasattr(model, "predict_logits"):
        return model.predict_logits(batch)
    with ad.no_grad():
        emb, _, layout = build_multimodal_sequence(model, batch)
        logits, _ = student_forward(model, emb, layout.mask)
    return logits.data, layout.labels, layout.attention


def _image_tokens(model) -> int:
    return model.image_tokens if isinstance(model, DualTower) else getattr(model, "image_tokens", 0)


def _max_seq(model) -> int:
    return model.student.config.max_seq if isinstance(model, DualTower) else getattr(model, "max_seq", 1 << 30)


def _batches(model, samples: Sequence[Sample], batch_size: int):
    dtype = model.student.embed.dtype if isinstance(model, DualTower) else np.float64
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        batch = collate_batch(chunk, _max_seq(model), _image_tokens(model))
        if batch.images is not None:
            batch.images = batch.images.astype(dtype)
        yield chunk, batch


def predict_answers(model, samples: Sequence[Sample], batch_size: int = 64) -> list[tuple[int, ...]]:
    """Greedy answer tokens along the reference prefix (teacher forcing).

    The predicted span is the argmax at each answer position; it equals the
    reference iff greedy decoding would reproduce the reference exactly.
    """
    if isinstance(model, DualTower) and model.vision is None and any(s.image is not None for s in samples):
        raise ValueError("text-only model cannot be evaluated on image samples")
    preds = []
    for chunk, batch in _batches(model, samples, batch_size):
        logits, labels, attention = model_logits(model, batch)
        counted = (attention == 1) & (labels != IGNORE_INDEX)
        arg = logits.argmax(axis=-1)
        for b in range(len(chunk)):
            preds.append(tuple(int(x) for x in arg[b][counted[b]]))
    return preds


def eval_exact_match(model, task: TaskSet, batch_size: int = 64) -> float:
    correct = exact_match_vector(model, task, batch_size)
    return float(correct.mean())


def exact_match_vector(model, task: TaskSet, batch_size: int = 64) -> np.ndarray:
    if not task.samples:
        raise ValueError(f"task set {task.name!r} is empty")
    preds = predict_answers(model, task.samples, batch_size)
    return np.array([p == s.target for p, s in zip(preds, task.samples)])


def eval_perplexity(model, samples: Sequence[Sample], batch_size: int = 64) -> float:
    """exp of the mean NLL over counted (answer) positions of text-only samples."""
    if any(s.image is not None for s in samples):
        raise ValueError("perplexity is defined on text-only samples")
    total, count = 0.0, 0
    for _, batch in _batches(model, samples, batch_size):
        logits, labels, attention = model_logits(model, batch)
        counted = (attention == 1) & (labels != IGNORE_INDEX)
        z = logits[counted].astype(np.float64)
        y = labels[counted]
        m = z.max(axis=-1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
        total += float((lse - z[np.arange(len(y)), y]).sum())
        count += len(y)
    if count == 0:
        raise ValueError("no counted positions to score")
    return math.exp(total / count)


def greedy_decode(model: DualTower, prompt: Sequence[int], image=None, max_new: int = 8) -> list[int]:
    """Append argmax tokens until EOS (included) or ``max_new`` tokens."""
    tokens = list(prompt)
    out = []
    for _ in range(max_new):
        sample = Sample(np.array(tokens, dtype=np.int64), np.full(len(tokens), IGNORE_INDEX, dtype=np.int64),
                        None, image, len(tokens), np.ones(len(tokens), dtype=np.int64))
        batch = _single_batch(sample, model)
        with ad.no_grad():
            emb, _, layout = build_multimodal_sequence(model, batch)
            logits, _ = student_forward(model, emb, layout.mask)
        nxt = int(logits.data[0, -1].argmax())
        out.append(nxt)
        tokens.append(nxt)
        if nxt == VOCAB.eos:
            break
    return out


def _single_batch(sample: Sample, model: DualTower) -> Batch:
    from .data import TEXT
    image = None
    if sample.image is not None:
        image = np.asarray(sample.image, dtype=model.student.embed.dtype)[None]
    return Batch(sample.tokens[None], sample.attention[None], sample.labels[None], image,
                 np.array([sample.image is not None]), [TEXT])


# ---------------------------------------------------------------------------
# comparisons and report
# ---------------------------------------------------------------------------

def win_loss_diff(preds_a, preds_b, references) -> tuple[int, int, int]:
    """wins: a right and b wrong; losses: the reverse; net = wins - losses."""
    if not len(preds_a) == len(preds_b) == len(references):
        raise ValueError(f"length mismatch: {len(preds_a)}, {len(preds_b)}, {len(references)}")
    wins = losses = 0
    for a, b, r in zip(preds_a, preds_b, references):
        ra, rb = a == r, b == r
        wins += ra and not rb
        losses += rb and not ra
    return wins, losses, wins - losses


LOWER_IS_BETTER = {"text_ppl"}


def delta_percent(value: float, baseline: float) -> float | None:
    if value is None or baseline is None or baseline <= 0:
        return None
    return 100.0 * (value - baseline) / baseline


def recovery_fraction(variant: float, ft: float, teacher: float | None, lower_is_better: bool = False):
    """(variant - ft) / (teacher - ft), defined only when the teacher beats the fine-tuned model."""
    if teacher is None or variant is None or ft is None:
        return None
    better = teacher < ft if lower_is_better else teacher > ft
    if not better:
        return None
    return (variant - ft) / (teacher - ft)


@dataclass
class RecoveryReport:
    tasks: list[str]
    teacher: str
    baseline: str
    variants: list[str]
    scores: dict  # model -> task -> value (None = not applicable)
    deltas: dict = field(default_factory=dict)  # variant -> task -> percent
    recovery: dict = field(default_factory=dict)  # variant -> task -> fraction
    win_loss: dict = field(default_factory=dict)  # variant -> task -> (wins, losses, net) vs baseline

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "group", "model", "score", "delta_pct_vs_baseline", "recovery",
                    "wins", "losses", "net"])
        for task in self.tasks:
            for model in [self.teacher, self.baseline, *self.variants]:
                score = self.scores[model].get(task)
                d = self.deltas.get(model, {}).get(task)
                r = self.recovery.get(model, {}).get(task)
                wl = self.win_loss.get(model, {}).get(task)
                w.writerow([task, TASK_GROUPS.get(task, ""), model, _num(score), _num(d), _num(r),
                            *(("", "", "") if wl is None else wl)])
        return buf.getvalue()

    def to_text(self) -> str:
        models = [self.teacher, self.baseline, *self.variants]
        header = ["task"] + models
        rows = []
        for task in self.tasks:
            cells = [task]
            for model in models:
                score = self.scores[model].get(task)
                cell = "n/a" if score is None else f"{score:.4f}"
                d = self.deltas.get(model, {}).get(task)
                if d is not None:
                    cell += f" ({d:+.1f}%)"
                cells.append(cell)
            rows.append(cells)
            rec = [f"  recovery"] + ["", ""] + [
                "n/a" if self.recovery.get(v, {}).get(task) is None else f"{self.recovery[v][task]:+.3f}"
                for v in self.variants]
            rows.append(rec)
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        lines = ["  ".join(c.ljust(wd) for c, wd in zip(header, widths)).rstrip()]
        lines.append("  ".join("-" * wd for wd in widths))
        lines += ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in rows]
        lines.append(f"deltas vs {self.baseline}; recovery = (variant - {self.baseline}) / "
                     f"({self.teacher} - {self.baseline})")
        return "\n".join(lines) + "\n"


def _num(x) -> str:
    if x is None:
        return "n/a"
    return repr(float(x))


def recovery_report(results: dict, teacher: str = "teacher", baseline: str = "ce-full",
                    tasks: Sequence[str] | None = None, predictions: dict | None = None,
                    references: dict | None = None) -> RecoveryReport:
    """``results``: model name -> task -> score. ``predictions`` (optional): model -> task -> list."""
    for required in (teacher, baseline):
        if required not in results:
            raise KeyError(f"recovery_report: missing required baseline {required!r}")
    tasks = list(tasks) if tasks is not None else sorted({t for r in results.values() for t in r})
    variants = [m for m in results if m not in (teacher, baseline)]
    rep = RecoveryReport(tasks, teacher, baseline, variants, {m: dict(results[m]) for m in results})
    base = results[baseline]
    for v in variants:
        rep.deltas[v] = {t: delta_percent(results[v].get(t), base.get(t)) for t in tasks}
        rep.recovery[v] = {t: recovery_fraction(results[v].get(t), base.get(t), results[teacher].get(t),
                                                t in LOWER_IS_BETTER) for t in tasks}
    if predictions is not None and references is not None:
        for v in variants:
            rep.win_loss[v] = {}
            for t in tasks:
                if t in references and t in predictions.get(v, {}) and t in predictions.get(baseline, {}):
                    rep.win_loss[v][t] = win_loss_diff(predictions[v][t], predictions[baseline][t], references[t])
    return rep


def evaluate_model(model, suite: EvalSuite, tasks: Sequence[str] | None = None, batch_size: int = 64):
    """Scores and per-example predictions for every applicable task."""
    scores, preds = {}, {}
    for name, task in suite.tasks.items():
        if tasks is not None and name not in tasks:
            continue
        has_images = any(s.image is not None for s in task.samples)
        if isinstance(model, DualTower) and model.vision is None and has_images:
            scores[name] = None
            continue
        if task.metric == "perplexity":
            scores[name] = eval_perplexity(model, task.samples, batch_size)
        else:
            p = predict_answers(model, task.samples, batch_size)
            preds[name] = p
            scores[name] = float(np.mean([a == s.target for a, s in zip(p, task.samples)]))
    return scores, preds
