"""Unsupervised deformable image registration with a patch-attention encoder-decoder.

Submodules are imported lazily by callers; keep this module free of heavy
imports so the CLI can configure thread environment variables first.
"""

__version__ = "0.1.0"
