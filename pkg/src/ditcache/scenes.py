"""Synthetic scenes: a moving high-magnitude rectangle over textured noise.

Prompted generation is replaced by latents with known foreground structure.
The rectangle writes its magnitude onto the signal channel (and a weaker
echo on the next channel) so PCA-based segmentation has a real direction to
find, and the ground-truth token mask comes for free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .profiler import ForegroundMask


@dataclass(frozen=True)
class SceneSpec:
    background_level: float = 0.0
    background_noise: float = 0.25
    magnitude: float = 15.0
    rect: tuple[int, int, int, int] = (1, 1, 3, 2)  # (x, y, w, h) in frame 0
    motion: tuple[int, int] = (1, 0)  # (dx, dy) added per frame
    seed: int = 7
    signal_channel: int = 0

    def frame_rect(self, f: int) -> tuple[int, int, int, int]:
        x, y, w, h = self.rect
        dx, dy = self.motion
        return (x + f * dx, y + f * dy, w, h)


def generate_scene(
    spec: SceneSpec, grid: tuple[int, int, int], channels: int
) -> tuple[np.ndarray, ForegroundMask]:
    """Deterministic (C, T, H, W) latent plus its ground-truth token mask."""
    frames, height, width = grid
    rects = [spec.frame_rect(f) for f in range(frames)]
    for f, (x, y, w, h) in enumerate(rects):
        if w < 1 or h < 1:
            raise ValueError("rectangle extents must be positive")
        if x < 0 or y < 0 or x + w > width or y + h > height:
            raise ValueError(f"rectangle {(x, y, w, h)} leaves the grid in frame {f}")
    if not 0 <= spec.signal_channel < channels:
        raise ValueError("signal channel out of range")

    rng = np.random.default_rng([spec.seed & 0xFFFFFFFF, frames, height, width, channels])
    latent = spec.background_level + spec.background_noise * rng.standard_normal(
        (channels, frames, height, width)
    )
    bits = np.zeros((frames, height, width), dtype=bool)
    echo = (spec.signal_channel + 1) % channels
    for f, (x, y, w, h) in enumerate(rects):
        latent[spec.signal_channel, f, y : y + h, x : x + w] += spec.magnitude
        latent[echo, f, y : y + h, x : x + w] += 0.4 * spec.magnitude
        bits[f, y : y + h, x : x + w] = True
    return latent, ForegroundMask(bits.reshape(-1), grid, source="external")


def mask_iou(a: ForegroundMask, b: ForegroundMask) -> float:
    """Intersection over union of two token masks."""
    if a.num_tokens != b.num_tokens:
        raise ValueError("mask sizes differ")
    inter = int((a.bits & b.bits).sum())
    union = int((a.bits | b.bits).sum())
    return 1.0 if union == 0 else inter / union
