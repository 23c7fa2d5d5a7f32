"""panelfusion: a numpy-only diffusion stack for learning a comic-panel style with LoRA."""

__version__ = "0.1.0"
