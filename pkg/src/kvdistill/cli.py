"""Command-line entry point: data generation, the three stages, evaluation, report."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import ManifestEntry, materialize, save_samples, write_manifest
from .evaluate import build_eval_suite, evaluate_model, recovery_report
from .runner import (
    VARIANTS,
    CheckpointError,
    ConfigError,
    MissingPrerequisiteError,
    dump_pipeline_config,
    load_checkpoint,
    load_pipeline_config,
    run_stage,
    stage_dir,
    tower_from_tensors,
)
from .selfcheck import run_selfcheck

EXIT_FAILURE = 1
EXIT_PREREQUISITE = 3
EXIT_CONFIG = 4


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_FAILURE):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _ckpt(out: Path, stage: str, variant: str | None = None) -> Path:
    return stage_dir(out, stage, variant) / "checkpoint"


def _require(path: Path, what: str) -> Path:
    if not (path / "meta.json").exists():
        raise MissingPrerequisiteError(f"missing prerequisite: {what} checkpoint not found at {path}")
    return path


def cmd_gen_data(args, cfg) -> str:
    d = cfg.data
    seed = d.data_seed if d.data_seed is not None else args.seed
    entries = [
        ManifestEntry("text", "language_heavy", d.n_text, seed, "train"),
        ManifestEntry("lang_mm", "language_heavy", d.n_mm, seed, "train"),
        ManifestEntry("ocr", "ocr_heavy", d.n_mm, seed, "train"),
    ]
    entries += [ManifestEntry(e.name, e.category, d.n_eval, args.seed, "eval") for e in entries]
    root = args.out / "data"
    root.mkdir(parents=True, exist_ok=True)
    write_manifest(root / "manifest.txt", entries)
    for e in entries:
        save_samples(root / f"{e.name}_{e.split}.kvds", materialize(e))
    return f"wrote {len(entries)} sample files under {root}"


def _stage(args, cfg, stage: str, variant: str | None = None, **prereq):
    rc = cfg.run_config(stage, args.seed, variant)
    res = run_stage(rc, stage_dir(args.out, stage, variant), resume=args.resume, **prereq)
    return f"{stage}{'/' + variant if variant else ''}: {res.step} steps, checkpoint {res.checkpoint_path}"


def cmd_pretrain(args, cfg) -> str:
    return _stage(args, cfg, "pretrain_lm")


def cmd_adapt(args, cfg) -> str:
    lm = _require(_ckpt(args.out, "pretrain_lm"), "pretrain_lm")
    return _stage(args, cfg, "adapt_vlm", lm_checkpoint=lm)


def cmd_distill(args, cfg) -> str:
    student = _require(_ckpt(args.out, "adapt_vlm"), "adapt_vlm")
    lm = _require(_ckpt(args.out, "pretrain_lm"), "pretrain_lm (teacher)")
    variants = args.variant or list(cfg.variants)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; known: {', '.join(VARIANTS)}")
    return "\n".join(_stage(args, cfg, "distill", v, lm_checkpoint=lm, student_checkpoint=student)
                     for v in variants)


def _models(out: Path, cfg):
    """Yield (name, tower) for every finished checkpoint under ``out``."""
    lm = _require(_ckpt(out, "pretrain_lm"), "pretrain_lm")
    tensors, _ = load_checkpoint(lm)
    yield "teacher", tower_from_tensors(cfg, tensors, with_vision=False)
    adapted = _ckpt(out, "adapt_vlm")
    if (adapted / "meta.json").exists():
        tensors, _ = load_checkpoint(adapted)
        yield "adapt_vlm", tower_from_tensors(cfg, tensors, with_vision=True)
    for v in VARIANTS:
        p = _ckpt(out, "distill", v)
        if (p / "meta.json").exists():
            tensors, _ = load_checkpoint(p)
            yield v, tower_from_tensors(cfg, tensors, with_vision=True)


def cmd_eval(args, cfg) -> str:
    suite = build_eval_suite(args.seed, cfg.data.n_eval)
    scores, preds = {}, {}
    for name, tower in _models(args.out, cfg):
        scores[name], p = evaluate_model(tower, suite)
        preds[name] = {task: [list(x) for x in v] for task, v in p.items()}
    refs = {name: [list(s.target) for s in task.samples] for name, task in suite.tasks.items()
            if task.metric == "exact_match"}
    root = args.out / "eval"
    root.mkdir(parents=True, exist_ok=True)
    (root / "scores.json").write_text(json.dumps(scores, indent=1, sort_keys=True) + "\n")
    (root / "predictions.json").write_text(json.dumps({"predictions": preds, "references": refs},
                                                      sort_keys=True) + "\n")
    return f"evaluated {len(scores)} models; scores in {root / 'scores.json'}"


def cmd_report(args, cfg) -> str:
    root = args.out / "eval"
    if not (root / "scores.json").exists():
        raise MissingPrerequisiteError(f"missing prerequisite: eval results not found at {root / 'scores.json'}")
    scores = json.loads((root / "scores.json").read_text())
    pred_doc = json.loads((root / "predictions.json").read_text())
    preds = {m: {t: [tuple(x) for x in v] for t, v in d.items()} for m, d in pred_doc["predictions"].items()}
    refs = {t: [tuple(x) for x in v] for t, v in pred_doc["references"].items()}
    try:
        rep = recovery_report(scores, "teacher", "ce-full", ["text_qa", "text_ppl", "mm_qa", "ocr_copy"],
                              preds, refs)
    except KeyError as e:
        raise MissingPrerequisiteError(str(e.args[0])) from e
    out = args.out / "report"
    out.mkdir(parents=True, exist_ok=True)
    (out / "recovery.csv").write_text(rep.to_csv())
    (out / "recovery.txt").write_text(rep.to_text())
    return rep.to_text()


def cmd_selfcheck(args, cfg) -> str:
    results = run_selfcheck(args.seed)
    lines = [f"{'PASS' if ok else 'FAIL'} {name}: {detail}" for name, ok, detail in results]
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "selfcheck.txt").write_text("\n".join(lines) + "\n")
    if not all(ok for _, ok, _ in results):
        raise CliError("SelfcheckFailed", "\n".join(lines))
    return "\n".join(lines)


COMMANDS = {
    "gen-data": (cmd_gen_data, "materialize the synthetic corpora and manifest"),
    "pretrain-lm": (cmd_pretrain, "stage 1: train the text-only decoder (future teacher)"),
    "adapt-vlm": (cmd_adapt, "stage 2: attach vision encoder + projector, fine-tune on multimodal data"),
    "distill": (cmd_distill, "stage 3: continue the adapted student under one or more variants"),
    "eval": (cmd_eval, "score every finished checkpoint on the held-out tasks"),
    "report": (cmd_report, "write the degradation/recovery tables"),
    "selfcheck": (cmd_selfcheck, "run the fast invariant and oracle checks"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvdistill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None, help="YAML pipeline config (defaults if omitted)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, required=True, help="run directory")
        if name in ("pretrain-lm", "adapt-vlm", "distill"):
            p.add_argument("--resume", action="store_true", help="continue from the stage's checkpoint")
        if name == "distill":
            p.add_argument("--variant", action="append", choices=sorted(VARIANTS),
                           help="variant to run (repeatable; default: all configured)")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_pipeline_config(args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command != "selfcheck" and not (args.out / "config.yaml").exists():
            dump_pipeline_config(cfg, args.out / "config.yaml")
        print(COMMANDS[args.command][0](args, cfg))
    except MissingPrerequisiteError as e:
        return _fail("MissingPrerequisite", str(e), EXIT_PREREQUISITE)
    except ConfigError as e:
        return _fail("ConfigError", str(e), EXIT_CONFIG)
    except CheckpointError as e:
        return _fail(type(e).__name__, str(e), EXIT_FAILURE)
    except CliError as e:
        return _fail(e.kind, str(e), e.code)
    return 0


if __name__ == "__main__":
    sys.exit(main())
