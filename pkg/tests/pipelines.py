"""Small pipeline configs shared by the runner, CLI and acceptance tests."""
from kvdistill.runner import pipeline_from_dict

TINY = {
    "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "max_seq": 40},
    "vision": {"patch_size": 12, "d_vis": 8, "n_heads": 2, "depth": 1},
    "data": {"n_text": 120, "n_mm": 60, "n_eval": 20},
    "pretrain_lm": {"total_steps": 6, "batch_size": 4, "peak_lr": 0.01},
    "adapt_vlm": {"total_steps": 6, "batch_size": 4, "peak_lr": 0.01},
    "distill": {"total_steps": 6, "batch_size": 4, "peak_lr": 0.01},
    "variants": ["ce-full", "selective"],
}


def tiny(**overrides):
    d = {k: (dict(v) if isinstance(v, dict) else v) for k, v in TINY.items()}
    for key, value in overrides.items():
        if isinstance(value, dict):
            d.setdefault(key, {}).update(value)
        else:
            d[key] = value
    return pipeline_from_dict(d)
