"""Stage loop, run configuration, variant presets and checkpoint directories.

Three stages: ``pretrain_lm`` trains the text-only decoder that later serves
as teacher; ``adapt_vlm`` copies it into a student, attaches a fresh vision
encoder + projector and fine-tunes on multimodal data with CE; ``distill``
continues the adapted student under a variant's objective with the stage-1
decoder frozen as teacher.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .autodiff import Tensor
from .data import (
    GENERATORS,
    LANGUAGE_HEAVY,
    OCR_HEAVY,
    Sample,
    collate_batch,
)
from .multimodal import DualTower, VisionConfig, init_projector, init_vision, train_step
from .objective import AlphaPolicy
from .optim import AdamWState, ScheduleConfig, cosine_warmup_lr
from .transformer import DecoderWeights, LayerWeights, TransformerConfig, init_decoder

log = logging.getLogger(__name__)

STAGES = ("pretrain_lm", "adapt_vlm", "distill")
_STAGE_IDS = {s: i + 1 for i, s in enumerate(STAGES)}

METRICS_HEADER = ("step,lr,loss_combined,loss_soft_lang,loss_soft_ocr,loss_hard_lang,loss_hard_ocr,"
                  "grad_norm,tokens_counted")


# ---------------------------------------------------------------------------
# variants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    name: str
    alpha: dict | None  # category -> alpha; None = plain CE fine-tuning
    temperature: float = 1.0
    subset: str = "full"  # "full" = language-heavy + OCR sources, "lang" = language-heavy only
    note: str = ""

    def policy(self) -> AlphaPolicy | None:
        return None if self.alpha is None else AlphaPolicy(dict(self.alpha), self.temperature)


def _sel(a):
    return {LANGUAGE_HEAVY: a, OCR_HEAVY: 0.0}


def _uni(a):
    return {LANGUAGE_HEAVY: a, OCR_HEAVY: a}


VARIANTS = {
    v.name: v for v in (
        Variant("ce-full", None, subset="full", note="CE fine-tuning on all sources (the fine-tuned baseline)"),
        Variant("ce-lang", None, subset="lang", note="CE fine-tuning on language-heavy sources only"),
        Variant("uniform-full", _uni(0.5), 2.0, "full", note="KD on every source"),
        Variant("uniform-lang", _uni(0.5), 2.0, "lang", note="KD, language-heavy sources only"),
        Variant("selective", _sel(0.7), 4.0, "full", note="KD on language-heavy sources, CE on OCR sources"),
        Variant("selective-high", _sel(0.9), 4.0, "full", note="stronger teacher weight (alpha 0.9 is our choice)"),
        Variant("selective-low", _sel(0.3), 2.0, "full", note="weaker teacher weight"),
    )
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataConfig:
    n_text: int = 20000
    n_mm: int = 8000  # per multimodal source
    n_eval: int = 1000
    data_seed: int | None = None  # None = follow the run seed
    include_text_in_stage3: bool = False


@dataclass(frozen=True)
class StageSettings:
    total_steps: int = 2000
    batch_size: int = 16
    peak_lr: float = 1e-4
    warmup_fraction: float = 0.03
    floor_lr: float = 0.0
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.peak_lr, self.warmup_fraction, self.total_steps, self.floor_lr)


@dataclass(frozen=True)
class PipelineConfig:
    """Everything needed to run all three stages and every variant."""
    model: TransformerConfig = TransformerConfig()
    vision: VisionConfig = VisionConfig()
    data: DataConfig = DataConfig()
    pretrain_lm: StageSettings = StageSettings()
    adapt_vlm: StageSettings = StageSettings()
    distill: StageSettings = StageSettings()
    variants: tuple = ("ce-full", "uniform-full", "selective", "selective-high", "selective-low")
    dtype: str = "float64"
    teacher_embeds: str = "shared"
    train_vision_in_stage3: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; known: {', '.join(VARIANTS)}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    def stage(self, name: str) -> StageSettings:
        if name not in STAGES:
            raise ConfigError(f"unknown stage {name!r}")
        return getattr(self, name)

    def run_config(self, stage: str, seed: int, variant: str | None = None) -> "RunConfig":
        if stage == "distill":
            variant = variant or "ce-full"
            if variant not in VARIANTS:
                raise ConfigError(f"unknown variant {variant!r}; known: {', '.join(VARIANTS)}")
        else:
            variant = stage
        return RunConfig(variant, stage, seed, self)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    variant: str
    stage: str
    seed: int
    pipeline: PipelineConfig = PipelineConfig()

    @property
    def settings(self) -> StageSettings:
        return self.pipeline.stage(self.stage)

    @property
    def policy(self) -> AlphaPolicy | None:
        return VARIANTS[self.variant].policy() if self.stage == "distill" else None

    @property
    def subset(self) -> str:
        return VARIANTS[self.variant].subset if self.stage == "distill" else "full"

    @property
    def data_seed(self) -> int:
        ds = self.pipeline.data.data_seed
        return self.seed if ds is None else ds

    @property
    def np_dtype(self):
        return np.dtype(self.pipeline.dtype)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "stage": self.stage, "seed": self.seed,
                "pipeline": pipeline_to_dict(self.pipeline)}


_SECTIONS = {"model": TransformerConfig, "vision": VisionConfig, "data": DataConfig,
             "pretrain_lm": StageSettings, "adapt_vlm": StageSettings, "distill": StageSettings}


def pipeline_to_dict(cfg: PipelineConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = dataclasses.asdict(v) if dataclasses.is_dataclass(v) else (list(v) if isinstance(v, tuple) else v)
    return out


def pipeline_from_dict(d: dict | None) -> PipelineConfig:
    d = dict(d or {})
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kw = {}
    for key, value in d.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            fields = {f.name for f in dataclasses.fields(cls)}
            bad = set(value or {}) - fields
            if bad:
                raise ConfigError(f"unknown keys in [{key}]: {', '.join(sorted(bad))}")
            try:
                kw[key] = cls(**(value or {}))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"[{key}]: {e}") from e
        elif key == "variants":
            kw[key] = tuple(value)
        else:
            kw[key] = value
    return PipelineConfig(**kw)


def load_pipeline_config(path) -> PipelineConfig:
    """Read a YAML pipeline config; missing sections and keys take defaults."""
    if path is None:
        return PipelineConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return pipeline_from_dict(raw)


def dump_pipeline_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(pipeline_to_dict(cfg), sort_keys=False))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "kvdistill-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointHashError(CheckpointError):
    pass


class CheckpointMissingError(CheckpointError):
    pass


def _dtype_tag(arr: np.ndarray) -> str:
    return arr.dtype.newbyteorder("<").str


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``meta.json`` plus one raw little-endian buffer per tensor.

    The directory is assembled beside the target and renamed into place.
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "tensors").mkdir(parents=True)
    index = []
    for i, name in enumerate(sorted(tensors)):
        arr = np.ascontiguousarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        buf = le.tobytes()
        fname = f"{i:04d}.bin"
        (tmp / "tensors" / fname).write_bytes(buf)
        index.append({"name": name, "file": fname, "dtype": _dtype_tag(arr), "shape": list(arr.shape),
                      "sha256": hashlib.sha256(buf).hexdigest()})
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "meta": meta, "tensors": index}
    (tmp / "meta.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    meta_file = path / "meta.json"
    if not meta_file.exists():
        raise CheckpointMissingError(f"no checkpoint at {path} (missing meta.json)")
    doc = json.loads(meta_file.read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointVersionError(f"{path}: not a {CHECKPOINT_FORMAT} directory")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {doc.get('version')} "
                                     f"!= supported {CHECKPOINT_VERSION}")
    tensors = {}
    for entry in doc["tensors"]:
        f = path / "tensors" / entry["file"]
        if not f.exists():
            raise CheckpointMissingError(f"{path}: tensor {entry['name']} missing ({entry['file']})")
        buf = f.read_bytes()
        if hashlib.sha256(buf).hexdigest() != entry["sha256"]:
            raise CheckpointHashError(f"{path}: content hash mismatch for tensor {entry['name']}")
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return tensors, doc["meta"]


def weights_hash(named) -> str:
    """sha256 over (name, dtype, shape, bytes) of every tensor, in order."""
    h = hashlib.sha256()
    for name, t in named:
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t)
        h.update(f"{name}|{arr.dtype.str}|{arr.shape}|".encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# model (de)serialization
# ---------------------------------------------------------------------------

def decoder_from_tensors(config: TransformerConfig, tensors: dict, prefix: str) -> DecoderWeights:
    def t(name):
        key = prefix + name
        if key not in tensors:
            raise CheckpointMissingError(f"checkpoint lacks tensor {key}")
        return Tensor(np.array(tensors[key]), requires_grad=True)

    layers = [LayerWeights(*(t(f"layers.{i}.{n}") for n in
                             ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_in", "w_out")))
              for i in range(config.n_layers)]
    pos = t("pos") if config.position_scheme == "learned" else None
    return DecoderWeights(config, t("embed"), layers, t("final_norm"), t("head"), pos)


def tower_from_tensors(cfg: PipelineConfig, tensors: dict, with_vision: bool) -> DualTower:
    student = decoder_from_tensors(cfg.model, tensors, "student.")
    vision = projector = None
    if with_vision:
        dtype = student.embed.dtype
        vision = init_vision(cfg.vision, np.random.default_rng(0), dtype)
        projector = init_projector(cfg.vision.d_vis, cfg.model.d_model, np.random.default_rng(0),
                                   cfg.vision.projector_hidden, dtype)
        for prefix, part in (("vision.", vision), ("projector.", projector)):
            for name, p in part.named_parameters():
                key = prefix + name
                if key not in tensors:
                    raise CheckpointMissingError(f"checkpoint lacks tensor {key}")
                if tensors[key].shape != p.data.shape:
                    raise CheckpointError(f"tensor {key} has shape {tensors[key].shape}, "
                                          f"config expects {p.data.shape}")
                p.data = np.array(tensors[key])
    return DualTower(student, vision, projector, teacher_embeds=cfg.teacher_embeds)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def stage_sources(cfg: RunConfig) -> list[str]:
    if cfg.stage == "pretrain_lm":
        return ["text"]
    sources = ["lang_mm"] if cfg.subset == "lang" else ["lang_mm", "ocr"]
    if cfg.stage == "distill" and cfg.pipeline.data.include_text_in_stage3:
        sources.append("text")
    return sources


_DATA_CACHE: dict = {}


def train_samples(source: str, cfg: RunConfig) -> list[Sample]:
    n = cfg.pipeline.data.n_text if source == "text" else cfg.pipeline.data.n_mm
    key = (source, cfg.data_seed, n)
    if key not in _DATA_CACHE:
        _DATA_CACHE.clear() if len(_DATA_CACHE) > 8 else None
        _DATA_CACHE[key] = GENERATORS[source](cfg.data_seed, n, "train")
    return _DATA_CACHE[key]


class BatchStream:
    """Seeded epoch-wise shuffling; batch ``k`` depends only on (seed, stage, k)."""

    def __init__(self, samples: list[Sample], batch_size: int, seed: int, stage: str):
        if batch_size > len(samples):
            raise ConfigError(f"batch size {batch_size} exceeds dataset size {len(samples)}")
        self.samples = samples
        self.batch_size = batch_size
        self.seed = seed
        self.stage_id = _STAGE_IDS[stage]
        self._epoch = -1
        self._perm = None

    def _permutation(self, epoch: int) -> np.ndarray:
        if epoch != self._epoch:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, self.stage_id, epoch]))
            self._perm = rng.permutation(len(self.samples))
            self._epoch = epoch
        return self._perm

    def batch(self, k: int) -> list[Sample]:
        n = len(self.samples)
        per_epoch = n // self.batch_size  # drop the ragged tail of each epoch
        epoch, j = divmod(k, per_epoch)
        idx = self._permutation(epoch)[j * self.batch_size:(j + 1) * self.batch_size]
        return [self.samples[i] for i in idx]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def metrics_row(step: int, lr: float, result) -> str:
    pc = result.loss.per_category
    return ",".join([str(step), _fmt(lr), _fmt(result.loss.value),
                     _fmt(pc[LANGUAGE_HEAVY]["soft"]), _fmt(pc[OCR_HEAVY]["soft"]),
                     _fmt(pc[LANGUAGE_HEAVY]["hard"]), _fmt(pc[OCR_HEAVY]["hard"]),
                     _fmt(result.grad_norm), str(result.loss.counted)])


def read_metrics(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ValueError(f"{path}: unexpected metrics header")
    keys = METRICS_HEADER.split(",")
    out = []
    for line in lines[1:]:
        vals = line.split(",")
        row = {k: float(v) for k, v in zip(keys, vals)}
        row["step"] = int(vals[0])
        row["tokens_counted"] = int(vals[-1])
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# the stage loop
# ---------------------------------------------------------------------------

class MissingPrerequisiteError(RuntimeError):
    pass


@dataclass
class StageResult:
    config: RunConfig
    out_dir: Path
    tower: DualTower
    metrics_path: Path
    checkpoint_path: Path
    step: int
    warnings: list = field(default_factory=list)


def _init_model_rng(cfg: RunConfig, part: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, _STAGE_IDS[cfg.stage], part]))


def build_tower(cfg: RunConfig, lm_checkpoint=None, student_checkpoint=None) -> DualTower:
    """Construct the stage's tower from prerequisites (or fresh weights for stage 1)."""
    p = cfg.pipeline
    dtype = cfg.np_dtype
    if cfg.stage == "pretrain_lm":
        lm = init_decoder(p.model, _init_model_rng(cfg, 0), dtype)
        return DualTower(lm, teacher_embeds=p.teacher_embeds)
    if lm_checkpoint is None or not (Path(lm_checkpoint) / "meta.json").exists():
        raise MissingPrerequisiteError(
            f"stage {cfg.stage} requires a pretrain_lm checkpoint (looked for {lm_checkpoint})")
    lm_tensors, _ = load_checkpoint(lm_checkpoint)
    if cfg.stage == "adapt_vlm":
        student = decoder_from_tensors(p.model, lm_tensors, "student.")
        rng = _init_model_rng(cfg, 0)
        vision = init_vision(p.vision, rng, dtype)
        projector = init_projector(p.vision.d_vis, p.model.d_model, rng, p.vision.projector_hidden, dtype)
        tower = DualTower(student, vision, projector, teacher_embeds=p.teacher_embeds, train_vision=True)
    else:
        if student_checkpoint is None or not (Path(student_checkpoint) / "meta.json").exists():
            raise MissingPrerequisiteError(
                f"stage distill requires an adapt_vlm checkpoint (looked for {student_checkpoint})")
        st_tensors, _ = load_checkpoint(student_checkpoint)
        tower = tower_from_tensors(p, st_tensors, with_vision=True)
        tower.teacher = decoder_from_tensors(p.model, lm_tensors, "student.")
        tower.train_vision = p.train_vision_in_stage3
        tower.__post_init__()
    tower.sync_requires_grad()
    return tower


def _optimizer_tensors(opt: AdamWState) -> dict:
    out = {}
    for name, m in opt.m.items():
        out[f"opt.m.{name}"] = m
        out[f"opt.v.{name}"] = opt.v[name]
    return out


def save_stage_checkpoint(path, cfg: RunConfig, tower: DualTower, opt: AdamWState, step: int,
                          last_row: str | None, prerequisites: dict) -> None:
    tensors = {name: t.data for name, t in tower.named_parameters()}
    tensors.update(_optimizer_tensors(opt))
    meta = {"run": cfg.to_dict(), "step": step, "optimizer_step": opt.step,
            "metrics_header": METRICS_HEADER, "last_metrics": last_row,
            "prerequisites": {k: str(v) for k, v in prerequisites.items()},
            "student_hash": weights_hash(tower.named_parameters())}
    save_checkpoint(path, tensors, meta)


def _restore(tower: DualTower, opt: AdamWState, tensors: dict) -> None:
    for name, t in tower.named_parameters():
        if name not in tensors:
            raise CheckpointMissingError(f"resume checkpoint lacks tensor {name}")
        t.data = np.array(tensors[name])
    for key, arr in tensors.items():
        if key.startswith("opt.m."):
            opt.m[key[6:]] = np.array(arr)
        elif key.startswith("opt.v."):
            opt.v[key[6:]] = np.array(arr)


def run_stage(cfg: RunConfig, out_dir, lm_checkpoint=None, student_checkpoint=None,
              resume: bool = False, stop_after: int | None = None, step_hook=None) -> StageResult:
    """Run one stage; writes ``metrics.csv`` and ``checkpoint/`` under ``out_dir``.

    ``stop_after`` ends the loop early (checkpoint saved, resumable);
    ``resume`` continues from ``out_dir/checkpoint``. ``step_hook(step, tower,
    result)`` is called after every step.
    """
    out_dir = Path(out_dir)
    settings = cfg.settings
    schedule = settings.schedule()
    tower = build_tower(cfg, lm_checkpoint, student_checkpoint)
    sources = stage_sources(cfg)
    samples = [s for src in sources for s in train_samples(src, cfg)]
    stream = BatchStream(samples, settings.batch_size, cfg.seed, cfg.stage)
    opt = AdamWState(weight_decay=settings.weight_decay)
    policy = cfg.policy
    max_seq = cfg.pipeline.model.max_seq

    ckpt = out_dir / "checkpoint"
    metrics_path = out_dir / "metrics.csv"
    prereq = {"lm_checkpoint": lm_checkpoint, "student_checkpoint": student_checkpoint}
    prereq = {k: v for k, v in prereq.items() if v is not None}
    start = 0
    lines = [METRICS_HEADER]
    if resume:
        tensors, meta = load_checkpoint(ckpt)
        if meta["run"] != cfg.to_dict():
            raise ConfigError(f"resume checkpoint at {ckpt} was written by a different run config")
        _restore(tower, opt, tensors)
        opt.step = meta["optimizer_step"]
        start = meta["step"]
        lines = metrics_path.read_text().splitlines()[: start + 1]
    out_dir.mkdir(parents=True, exist_ok=True)

    end = settings.total_steps if stop_after is None else min(stop_after, settings.total_steps)
    warnings = []
    with open(metrics_path, "w") as f:
        f.write("\n".join(lines) + "\n")
        f.flush()
        for k in range(start, end):
            step = k + 1
            batch = collate_batch(stream.batch(k), max_seq, tower.image_tokens)
            if batch.images is not None:
                batch.images = batch.images.astype(cfg.np_dtype)
            lr = cosine_warmup_lr(step, schedule)
            result = train_step(tower, batch, policy, opt, lr, settings.max_grad_norm)
            if result.skipped:
                warnings.append((step, result.warning))
            row = metrics_row(step, lr, result)
            lines.append(row)
            f.write(row + "\n")
            if step_hook is not None:
                step_hook(step, tower, result)
            every = cfg.pipeline.checkpoint_every
            if every and step % every == 0 and step != end:
                f.flush()
                save_stage_checkpoint(ckpt, cfg, tower, opt, step, row, prereq)
    save_stage_checkpoint(ckpt, cfg, tower, opt, end, lines[-1] if len(lines) > 1 else None, prereq)
    return StageResult(cfg, out_dir, tower, metrics_path, ckpt, end, warnings)


def stage_dir(root, stage: str, variant: str | None = None) -> Path:
    root = Path(root)
    if stage == "distill":
        return root / "distill" / (variant or "ce-full")
    return root / stage
