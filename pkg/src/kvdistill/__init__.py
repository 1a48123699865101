"""Source-selective distillation through a shared KV cache, on a numpy autodiff core."""

__version__ = "0.1.0"
