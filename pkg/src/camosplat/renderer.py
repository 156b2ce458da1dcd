"""Tile-based splat rasterizer with an analytic adjoint for albedo.

Splats are projected to 2D Gaussians, depth-sorted (ties broken by source
index), and alpha-blended front to back at pixel centers. Blending weights
depend only on geometry and opacity, never on shaded colors, so a
``RenderPlan`` caches the per-pixel contribution records once per
(cloud geometry, camera) and forward/backward color passes reduce to
weighted scatter sums over those records.

Determinism: tiles are processed independently (optionally in worker
threads) and merged in fixed tile-major order; all accumulation runs in
record order, so outputs are bit-identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .scene import Camera, GaussianCloud, GaussianPrimitive

NEAR_PLANE = 0.01
LOWPASS_PX2 = 0.3
ALPHA_CUTOFF = 1.0 / 255.0
TILE = 16
_MIN_SCALE = 1e-9


def evaluate_gaussian(g: GaussianPrimitive, x: np.ndarray) -> float:
    """Unnormalized 3D density exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)) in (0, 1]."""
    if np.any(np.asarray(g.scale) < _MIN_SCALE):
        raise ValidationError("evaluate_gaussian: scale component below 1e-9 (singular)")
    d = np.asarray(x, dtype=np.float64) - g.mean
    r = g.rotation_matrix()
    local = r.T @ d
    q = float(np.sum((local / g.scale) ** 2))
    return float(np.exp(-0.5 * q))


@dataclass
class Splat2D:
    mean2d: np.ndarray  # pixels
    cov2d: np.ndarray  # 2x2, pixels^2, regularized
    depth: float  # camera-space z, meters
    opacity: float
    source_index: int
    color: np.ndarray | None = None


def project_gaussian(g: GaussianPrimitive, camera: Camera) -> Splat2D | None:
    """Perspective-project one splat; returns None when culled (behind the
    near plane, or the 3-sigma footprint misses the viewport)."""
    w = camera.basis()
    p_cam = w @ (g.mean - camera.position)
    z = float(p_cam[2])
    if z < NEAR_PLANE:
        return None
    fx, fy, cx, cy = camera.intrinsics()
    mean2d = np.array([fx * p_cam[0] / z + cx, fy * p_cam[1] / z + cy])

    jac = np.array(
        [
            [fx / z, 0.0, -fx * p_cam[0] / (z * z)],
            [0.0, fy / z, -fy * p_cam[1] / (z * z)],
        ]
    )
    jw = jac @ w
    cov2d = jw @ g.covariance() @ jw.T + LOWPASS_PX2 * np.eye(2)

    # 3-sigma viewport test against the largest eigenvalue of cov2d
    mid = 0.5 * (cov2d[0, 0] + cov2d[1, 1])
    rad = np.hypot(0.5 * (cov2d[0, 0] - cov2d[1, 1]), cov2d[0, 1])
    sigma = np.sqrt(max(mid + rad, 0.0))
    r3 = 3.0 * sigma
    if (
        mean2d[0] + r3 < 0.0
        or mean2d[0] - r3 > camera.width
        or mean2d[1] + r3 < 0.0
        or mean2d[1] - r3 > camera.height
    ):
        return None
    return Splat2D(mean2d, cov2d, z, float(g.opacity), -1)


@dataclass
class RenderOutput:
    """Forward result plus the contribution records for the backward pass."""

    rgb: np.ndarray  # H x W x 3, [0, 1]
    transmittance: np.ndarray  # H x W, remaining T
    object_mask: np.ndarray  # H x W, 1 - transmittance
    contrib_records: tuple[np.ndarray, np.ndarray, np.ndarray] | None  # (pix, src, w)
    camo_mask: np.ndarray | None
    n_primitives: int

    def records_for_pixel(self, row: int, col: int) -> list[tuple[int, float]]:
        """Ordered (source_index, weight) contributions at one pixel."""
        if self.contrib_records is None:
            raise ValidationError("contrib_records not retained")
        pix, src, w = self.contrib_records
        lin = row * self.rgb.shape[1] + col
        sel = pix == lin
        return list(zip(src[sel].tolist(), w[sel].tolist()))


class RenderPlan:
    """Geometry/opacity part of a render, reusable across color passes."""

    def __init__(self, height, width, records, n_primitives, camo_mask):
        self.height = height
        self.width = width
        self.pix, self.src, self.w = records
        self.n_primitives = n_primitives
        self.camo_mask = camo_mask
        s = np.bincount(self.pix, weights=self.w, minlength=height * width)
        self.weight_sum = s
        self.transmittance = (1.0 - s).reshape(height, width)
        self.object_mask = (1.0 - self.transmittance).reshape(height, width)

    def render(self, colors: np.ndarray) -> RenderOutput:
        colors = np.asarray(colors, dtype=np.float64)
        if colors.shape != (self.n_primitives, 3):
            raise ValidationError(
                f"shaded_colors shape {colors.shape} does not match "
                f"({self.n_primitives}, 3)"
            )
        npx = self.height * self.width
        rgb = np.empty((npx, 3))
        contrib = colors[self.src]
        for c in range(3):
            rgb[:, c] = np.bincount(self.pix, weights=self.w * contrib[:, c], minlength=npx)
        return RenderOutput(
            rgb=rgb.reshape(self.height, self.width, 3),
            transmittance=self.transmittance.copy(),
            object_mask=self.object_mask.copy(),
            contrib_records=(self.pix, self.src, self.w),
            camo_mask=self.camo_mask,
            n_primitives=self.n_primitives,
        )

    def backward_colors(self, dL_dpixels: np.ndarray) -> np.ndarray:
        """Adjoint of ``render`` w.r.t. per-primitive colors: (N, 3)."""
        up = np.asarray(dL_dpixels, dtype=np.float64).reshape(-1, 3)
        grad = np.empty((self.n_primitives, 3))
        picked = up[self.pix]
        for c in range(3):
            grad[:, c] = np.bincount(
                self.src, weights=self.w * picked[:, c], minlength=self.n_primitives
            )
        return grad


def _tile_records(tile, splats, width):
    """Blend one tile; returns flat (pix, src, w) arrays in pixel-major,
    depth order. ``splats`` is the depth-sorted subset overlapping the tile."""
    r0, r1, c0, c1 = tile
    if not splats:
        empty = np.empty(0)
        return empty.astype(np.int64), empty.astype(np.int64), empty

    mean = np.stack([s.mean2d for s in splats])  # (K, 2)
    cov = np.stack([s.cov2d for s in splats])  # (K, 2, 2)
    opac = np.array([s.opacity for s in splats])
    src = np.array([s.source_index for s in splats], dtype=np.int64)

    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    ia = cov[:, 1, 1] / det
    ib = -cov[:, 0, 1] / det
    ic = cov[:, 0, 0] / det

    rows = np.arange(r0, r1)
    cols = np.arange(c0, c1)
    px = (cols[None, :, None] + 0.5) - mean[None, None, :, 0]  # (R, C, K)
    py = (rows[:, None, None] + 0.5) - mean[None, None, :, 1]
    quad = ia * px * px + 2.0 * ib * px * py + ic * py * py
    alpha = opac * np.exp(-0.5 * quad)
    alpha = alpha.reshape(-1, len(splats))  # (P, K), pixel-major

    alpha_eff = np.where(alpha >= ALPHA_CUTOFF, alpha, 0.0)
    t_seq = np.cumprod(1.0 - alpha_eff, axis=1)
    t_excl = np.concatenate([np.ones((alpha_eff.shape[0], 1)), t_seq[:, :-1]], axis=1)
    include = t_excl >= ALPHA_CUTOFF  # blending stops once T drops below
    w = alpha_eff * t_excl * include

    keep = w > 0.0
    pflat, kidx = np.nonzero(keep)  # row-major: pixel-major, then depth order
    tile_rows = pflat // (c1 - c0) + r0
    tile_cols = pflat % (c1 - c0) + c0
    pix = tile_rows * width + tile_cols
    return pix, src[kidx], w[pflat, kidx]


def build_render_plan(
    cloud: GaussianCloud, camera: Camera, threads: int = 1
) -> RenderPlan:
    """Project, cull, sort, and blend; color-independent."""
    camera.validate()
    height, width = camera.height, camera.width

    splats: list[Splat2D] = []
    for i, g in enumerate(cloud.primitives):
        s = project_gaussian(g, camera)
        if s is not None:
            s.source_index = i
            splats.append(s)
    # Total blending order: ascending depth, ties by source index.
    splats.sort(key=lambda s: (s.depth, s.source_index))

    bounds = []
    for s in splats:
        mid = 0.5 * (s.cov2d[0, 0] + s.cov2d[1, 1])
        rad = np.hypot(0.5 * (s.cov2d[0, 0] - s.cov2d[1, 1]), s.cov2d[0, 1])
        r3 = 3.0 * np.sqrt(max(mid + rad, 0.0))
        bounds.append((s.mean2d[0] - r3, s.mean2d[0] + r3, s.mean2d[1] - r3, s.mean2d[1] + r3))

    tiles = []
    for r0 in range(0, height, TILE):
        for c0 in range(0, width, TILE):
            tiles.append((r0, min(r0 + TILE, height), c0, min(c0 + TILE, width)))

    def tile_job(tile):
        r0, r1, c0, c1 = tile
        subset = [
            s
            for s, (x0, x1, y0, y1) in zip(splats, bounds)
            if x1 >= c0 and x0 <= c1 and y1 >= r0 and y0 <= r1
        ]
        return _tile_records(tile, subset, width)

    if threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(tile_job, tiles))  # preserves tile order
    else:
        results = [tile_job(t) for t in tiles]

    pix = np.concatenate([r[0] for r in results])
    src = np.concatenate([r[1] for r in results])
    w = np.concatenate([r[2] for r in results])
    camo = cloud.camo_mask() if cloud.primitives else np.zeros(0, dtype=bool)
    return RenderPlan(height, width, (pix, src, w), len(cloud.primitives), camo)


def rasterize(
    cloud: GaussianCloud,
    camera: Camera,
    shaded_colors: np.ndarray,
    threads: int = 1,
) -> RenderOutput:
    """One-shot render: build the plan and apply per-primitive colors."""
    shaded_colors = np.asarray(shaded_colors, dtype=np.float64)
    if shaded_colors.shape != (len(cloud.primitives), 3):
        raise ValidationError(
            f"shaded_colors length {shaded_colors.shape} does not match cloud size "
            f"{len(cloud.primitives)}"
        )
    return build_render_plan(cloud, camera, threads=threads).render(shaded_colors)


def backward_albedo(
    output: RenderOutput,
    dL_dpixels: np.ndarray,
    shading_jacobians: np.ndarray,
) -> np.ndarray:
    """Chain pixel gradients back to per-primitive albedo, zeroing frozen
    (non-camo) primitives. Accumulation order is fixed (tile-major record
    order), so results are bit-reproducible."""
    if output.contrib_records is None:
        raise ValidationError("backward_albedo: contrib_records missing")
    jac = np.asarray(shading_jacobians, dtype=np.float64)
    if jac.shape != (output.n_primitives, 3, 3):
        raise ValidationError(
            f"shading_jacobians shape {jac.shape} does not match "
            f"({output.n_primitives}, 3, 3)"
        )
    up = np.asarray(dL_dpixels, dtype=np.float64)
    if up.shape != output.rgb.shape:
        raise ValidationError("dL_dpixels shape does not match the rendered image")

    pix, src, w = output.contrib_records
    flat = up.reshape(-1, 3)
    picked = flat[pix]
    n = output.n_primitives
    d_color = np.empty((n, 3))
    for c in range(3):
        d_color[:, c] = np.bincount(src, weights=w * picked[:, c], minlength=n)
    d_albedo = np.einsum("nij,ni->nj", jac, d_color)
    if output.camo_mask is not None:
        d_albedo[~output.camo_mask] = 0.0
    return d_albedo


def render_object_mask(cloud: GaussianCloud, camera: Camera, threads: int = 1) -> np.ndarray:
    """Soft object mask = 1 - transmittance of a color-free blending pass."""
    return build_render_plan(cloud, camera, threads=threads).object_mask.copy()
