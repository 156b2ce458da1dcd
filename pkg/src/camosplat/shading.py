"""Physically based shading of splat primitives.

Each primitive is shaded once per view (flat shading): outgoing radiance
toward the camera is the hemisphere integral of BRDF x incident radiance x
cosine, evaluated with a deterministic product quadrature over an
equirectangular environment map, plus a constant ambient term.

The BRDF is diffuse + GGX specular with Smith height-correlated masking and
a Schlick Fresnel term (F0 = 0.04 for dielectrics, the albedo for metals).
Every lobe is affine in albedo per channel, so a shaded color decomposes as
``base + slope * albedo``; ``shading_coefficients`` exposes that form and
the per-primitive Jacobian is the (diagonal) slope with clamped channels
zeroed.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ValidationError
from .scene import Camera, EnvironmentMap, GaussianCloud, GaussianPrimitive

# GGX roughness floor: keeps the r=0 mirror limit finite.
_ALPHA_MIN = 1e-4
_DIELECTRIC_F0 = 0.04


@dataclass(frozen=True)
class BRDFSample:
    value: np.ndarray  # RGB, 1/sr
    wi: np.ndarray
    cos_term: float


def surfel_normal(g: GaussianPrimitive, view_dir: np.ndarray) -> np.ndarray:
    """Surface normal: the rotated axis of minimal scale, oriented toward the
    camera (n . -view_dir > 0). Ties pick the lowest axis index."""
    axis = int(np.argmin(g.scale))  # argmin is the lowest index on ties
    n = g.rotation_matrix()[:, axis].copy()
    if float(np.dot(n, -np.asarray(view_dir, dtype=np.float64))) < 0.0:
        n = -n
    return n


def _frame_for_normal(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic tangent/bitangent completing n to a right-handed frame."""
    ref = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.999 else np.array([1.0, 0.0, 0.0])
    t = np.cross(ref, n)
    t = t / np.linalg.norm(t)
    return t, np.cross(n, t)


@lru_cache(maxsize=8)
def _local_nodes(n_theta: int, n_phi: int) -> tuple[np.ndarray, np.ndarray]:
    """Canonical node directions (local frame, +z up) and solid-angle weights.

    Nodes sit at bin midpoints; each weight is the exact solid angle of its
    (theta, phi) bin, so the weights always sum to 2*pi.
    """
    edges = np.linspace(0.0, np.pi / 2.0, n_theta + 1)
    theta = 0.5 * (edges[:-1] + edges[1:])
    w_theta = np.cos(edges[:-1]) - np.cos(edges[1:])
    dphi = 2.0 * np.pi / n_phi
    phi = (np.arange(n_phi) + 0.5) * dphi

    st, ct = np.sin(theta), np.cos(theta)
    local = np.empty((n_theta, n_phi, 3))
    local[:, :, 0] = st[:, None] * np.cos(phi)[None, :]
    local[:, :, 1] = st[:, None] * np.sin(phi)[None, :]
    local[:, :, 2] = ct[:, None]
    weights = np.broadcast_to((w_theta * dphi)[:, None], (n_theta, n_phi))
    return local.reshape(-1, 3), weights.reshape(-1).copy()


@dataclass(frozen=True)
class HemisphereQuadrature:
    """Product rule over the upper hemisphere of ``normal``."""

    n_theta: int
    n_phi: int
    normal: np.ndarray
    dirs: np.ndarray  # (K, 3) world directions
    weights: np.ndarray  # (K,) solid angles, sum = 2*pi

    @property
    def nodes(self) -> list[tuple[np.ndarray, float]]:
        return [(self.dirs[k], float(self.weights[k])) for k in range(len(self.weights))]


def build_quadrature(normal: np.ndarray, n_theta: int, n_phi: int) -> HemisphereQuadrature:
    if n_theta < 1 or n_phi < 1:
        raise ValidationError("quadrature counts must be >= 1")
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    local, weights = _local_nodes(int(n_theta), int(n_phi))
    t, b = _frame_for_normal(n)
    dirs = local[:, 0:1] * t + local[:, 1:2] * b + local[:, 2:3] * n
    return HemisphereQuadrature(int(n_theta), int(n_phi), n, dirs, weights)


def _ggx_terms(cos_nh, cos_ni, cos_no, roughness):
    """(D * V) for GGX with Smith height-correlated visibility.

    V folds the 1/(4 (n.wi)(n.wo)) denominator into the masking term.
    """
    alpha = np.maximum(np.asarray(roughness, dtype=np.float64) ** 2, _ALPHA_MIN)
    a2 = alpha * alpha
    d_denom = cos_nh * cos_nh * (a2 - 1.0) + 1.0
    D = a2 / (np.pi * d_denom * d_denom)
    lam_i = cos_no * np.sqrt(a2 + (1.0 - a2) * cos_ni * cos_ni)
    lam_o = cos_ni * np.sqrt(a2 + (1.0 - a2) * cos_no * cos_no)
    V = 0.5 / np.maximum(lam_i + lam_o, 1e-12)
    return D * V


def eval_brdf(albedo, roughness, metallic, n, wi, wo) -> np.ndarray:
    """BRDF value (RGB, 1/sr) for unit directions with wi.n > 0 and wo.n > 0."""
    n = np.asarray(n, dtype=np.float64)
    wi = np.asarray(wi, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    cos_ni = float(np.dot(n, wi))
    cos_no = float(np.dot(n, wo))
    if cos_ni <= 0.0 or cos_no <= 0.0:
        raise ValidationError("eval_brdf: direction below the surface")
    a = np.asarray(albedo, dtype=np.float64)
    m = float(metallic)

    h = wi + wo
    h = h / np.linalg.norm(h)
    cos_nh = min(max(float(np.dot(n, h)), 0.0), 1.0)
    cos_ih = min(max(float(np.dot(wi, h)), 0.0), 1.0)

    spec_scalar = _ggx_terms(cos_nh, cos_ni, cos_no, roughness)
    f0 = _DIELECTRIC_F0 * (1.0 - m) + m * a
    fresnel = f0 + (1.0 - f0) * (1.0 - cos_ih) ** 5
    diffuse = (1.0 - m) * a / np.pi
    return diffuse + spec_scalar * fresnel


def sample_env_batch(env: EnvironmentMap, dirs: np.ndarray) -> np.ndarray:
    """Bilinear equirectangular lookup for unit directions, shape (K, 3).

    Azimuth wraps; polar angle clamps at the poles.
    """
    d = np.asarray(dirs, dtype=np.float64)
    theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(d[:, 1], d[:, 0]), 2.0 * np.pi)
    x = phi / (2.0 * np.pi) * env.width - 0.5
    y = theta / np.pi * env.height - 0.5

    x0 = np.floor(x)
    fx = (x - x0)[:, None]
    c0 = (x0.astype(np.int64)) % env.width
    c1 = (c0 + 1) % env.width
    y0 = np.floor(y)
    fy = (y - y0)[:, None]
    r0 = np.clip(y0.astype(np.int64), 0, env.height - 1)
    r1 = np.clip(r0 + 1, 0, env.height - 1)

    rad = env.radiance.astype(np.float64, copy=False)
    top = rad[r0, c0] * (1.0 - fx) + rad[r0, c1] * fx
    bot = rad[r1, c0] * (1.0 - fx) + rad[r1, c1] * fx
    return top * (1.0 - fy) + bot * fy


def sample_env(env: EnvironmentMap, direction: np.ndarray) -> np.ndarray:
    return sample_env_batch(env, np.asarray(direction, dtype=np.float64)[None, :])[0]


def _coefficients_for_normal(
    g_roughness: float,
    g_metallic: float,
    n: np.ndarray,
    wo: np.ndarray,
    env: EnvironmentMap,
    n_theta: int,
    n_phi: int,
) -> tuple[np.ndarray, np.ndarray]:
    """(base, slope) RGB pairs so that raw color = base + slope * albedo."""
    quad = build_quadrature(n, n_theta, n_phi)
    cos_ni = quad.dirs @ n  # = cos(theta) by construction, > 0
    cos_no = float(np.dot(n, wo))

    h = quad.dirs + wo[None, :]
    h = h / np.linalg.norm(h, axis=1, keepdims=True)
    cos_nh = np.clip(h @ n, 0.0, 1.0)
    cos_ih = np.clip(np.einsum("kj,kj->k", quad.dirs, h), 0.0, 1.0)

    spec = _ggx_terms(cos_nh, cos_ni, cos_no, g_roughness)
    b_pow = (1.0 - cos_ih) ** 5
    a_pow = 1.0 - b_pow
    m = float(g_metallic)

    radiance = sample_env_batch(env, quad.dirs)
    flux = radiance * (cos_ni * quad.weights)[:, None]  # L * cos * dw per node

    base_scalar = spec * (_DIELECTRIC_F0 * (1.0 - m) * a_pow + b_pow)
    slope_scalar = (1.0 - m) / np.pi + spec * m * a_pow
    base = flux.T @ base_scalar
    slope = flux.T @ slope_scalar + env.ambient
    return base, slope


def shade(
    g: GaussianPrimitive,
    camera: Camera,
    env: EnvironmentMap,
    quad: HemisphereQuadrature,
) -> tuple[np.ndarray, np.ndarray]:
    """Shaded color for one primitive and its Jacobian w.r.t. albedo.

    ``quad`` supplies the rule resolution; nodes are re-oriented around the
    primitive's own surfel normal. The color is clamped to [0, 1] for the
    rasterizer handoff and the Jacobian is zeroed on clamped channels.
    """
    to_cam = camera.position - g.mean
    dist = np.linalg.norm(to_cam)
    if dist <= 0:
        raise ValidationError("shade: primitive coincides with the camera")
    wo = to_cam / dist
    z_cam = camera.basis()[2]
    if float(np.dot(g.mean - camera.position, z_cam)) <= 0.0:
        raise ValidationError("shade: primitive behind the camera")
    n = surfel_normal(g, -wo)
    base, slope = _coefficients_for_normal(
        g.roughness, g.metallic, n, wo, env, quad.n_theta, quad.n_phi
    )
    raw = base + slope * g.albedo
    color = np.clip(raw, 0.0, 1.0)
    unclamped = (raw >= 0.0) & (raw <= 1.0)
    jac = np.diag(slope * unclamped)
    return color, jac


def shading_coefficients(
    cloud: GaussianCloud,
    camera: Camera,
    env: EnvironmentMap,
    n_theta: int = 32,
    n_phi: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-primitive (base, slope), each (N, 3), valid for this view and env.

    Primitives behind the camera get zero coefficients (their splats are
    culled by the rasterizer anyway).
    """
    n_prims = len(cloud.primitives)
    base = np.zeros((n_prims, 3))
    slope = np.zeros((n_prims, 3))
    z_cam = camera.basis()[2]
    for i, g in enumerate(cloud.primitives):
        if float(np.dot(g.mean - camera.position, z_cam)) <= 0.0:
            continue
        to_cam = camera.position - g.mean
        wo = to_cam / np.linalg.norm(to_cam)
        n = surfel_normal(g, -wo)
        base[i], slope[i] = _coefficients_for_normal(
            g.roughness, g.metallic, n, wo, env, n_theta, n_phi
        )
    return base, slope


def colors_from_coefficients(
    base: np.ndarray, slope: np.ndarray, albedos: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Clamped colors and clamp-masked Jacobian diagonals for a whole cloud."""
    raw = base + slope * albedos
    colors = np.clip(raw, 0.0, 1.0)
    jac_diag = slope * ((raw >= 0.0) & (raw <= 1.0))
    return colors, jac_diag


def jacobians_from_diag(jac_diag: np.ndarray) -> np.ndarray:
    """Expand per-primitive diagonal Jacobians to dense (N, 3, 3)."""
    n = jac_diag.shape[0]
    out = np.zeros((n, 3, 3))
    idx = np.arange(3)
    out[:, idx, idx] = jac_diag
    return out
