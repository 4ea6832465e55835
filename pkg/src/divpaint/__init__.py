"""Two-stage diverse image inpainting.

A hierarchical discrete auto-encoder separates structural from textural
latents; a conditional autoregressive model samples diverse structural grids
for an incomplete image; a texture generator with structural attention turns
each sampled structure into a full-resolution completion.
"""

from .config import RunConfig, desk_preset, paper_preset

__all__ = ["RunConfig", "desk_preset", "paper_preset"]
__version__ = "0.1.0"
