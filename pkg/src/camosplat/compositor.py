"""Foreground/background compositing with pluggable background relighting.

The foreground comes from the splat renderer under a target environment; the
background is an ordinary image captured under a source environment and must
be adapted photometrically. The relighter is an interface so a learned
image-translation model can be slotted in; the reference implementation is a
per-channel gain derived from mean environment radiance.
"""

from __future__ import annotations

from typing import Protocol

import numpy as np

from .errors import ValidationError
from .renderer import RenderOutput, build_render_plan
from .scene import Camera, EnvironmentMap, GaussianCloud
from .shading import colors_from_coefficients, shading_coefficients

GAIN_MIN = 0.05
GAIN_MAX = 20.0


class BackgroundRelighter(Protocol):
    """Maps (background, source env, target env) to a relit background.

    Implementations must keep dimensions, stay in [0, 1], and act as the
    identity when source and target environments coincide.
    """

    def __call__(
        self, bg: np.ndarray, env_src: EnvironmentMap, env_tgt: EnvironmentMap
    ) -> np.ndarray: ...


def relight_background_parametric(
    bg: np.ndarray, env_src: EnvironmentMap, env_tgt: EnvironmentMap
) -> np.ndarray:
    """Per-channel gain relight: gain = mean(target) / mean(source), clamped
    to [0.05, 20]. Identical environment ids short-circuit to the identity."""
    img = np.asarray(bg, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError("relight: background must be H x W x 3")
    if env_tgt.id == env_src.id:
        return img.copy()
    mean_src = env_src.radiance.astype(np.float64).mean(axis=(0, 1))
    mean_tgt = env_tgt.radiance.astype(np.float64).mean(axis=(0, 1))
    gain = np.clip(mean_tgt / np.maximum(mean_src, 1e-6), GAIN_MIN, GAIN_MAX)
    return np.clip(img * gain, 0.0, 1.0)


def composite(fg: RenderOutput, bg_relit: np.ndarray) -> np.ndarray:
    """mask * fg + (1 - mask) * bg with the renderer's soft object mask.

    The gradient of the output w.r.t. foreground pixels is the mask itself
    (the mask depends only on frozen geometry, never on albedo).
    """
    bg = np.asarray(bg_relit, dtype=np.float64)
    if bg.shape != fg.rgb.shape:
        raise ValidationError(
            f"composite: background shape {bg.shape} does not match render {fg.rgb.shape}"
        )
    mask = fg.object_mask[:, :, None]
    return mask * fg.rgb + (1.0 - mask) * bg


def foreground_with_frozen_regions(
    cloud: GaussianCloud,
    camera: Camera,
    env: EnvironmentMap,
    n_theta: int = 32,
    n_phi: int = 64,
    threads: int = 1,
) -> RenderOutput:
    """Shade and rasterize the full cloud.

    Every primitive renders; the camouflage region only matters for
    gradients, where ``backward_albedo`` zeroes non-camo primitives.
    """
    base, slope = shading_coefficients(cloud, camera, env, n_theta, n_phi)
    colors, _ = colors_from_coefficients(base, slope, cloud.albedos())
    return build_render_plan(cloud, camera, threads=threads).render(colors)
