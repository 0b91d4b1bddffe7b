"""Prompt-adapted cross-domain retrieval on frozen encoders, with a small numpy autodiff core."""

__version__ = "0.1.0"
