"""Scene description: splat primitives, cameras, environments, and the
discretized physical configuration grid, plus canonical scene-file I/O.

Coordinate conventions (fixed here so every example value is checkable):
right-handed, z-up; azimuth measured from +x toward +y; pitch is elevation
above the horizontal plane. Scene files are UTF-8 JSON with sorted keys and
9-significant-digit decimal floats, which makes save/load round trips
byte-stable.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ParseError, ValidationError
from .imgio import read_ppm, read_radiance_f32, write_ppm, write_radiance_f32

_QUAT_NORM_TOL = 1e-9


def _vec(x, n, path) -> np.ndarray:
    try:
        a = np.asarray(x, dtype=np.float64)
    except (TypeError, ValueError):
        raise ValidationError(f"{path}: not numeric") from None
    if a.shape != (n,):
        raise ValidationError(f"{path}: expected {n} components, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{path}: non-finite component")
    return a


def _scalar(x, path) -> float:
    try:
        v = float(x)
    except (TypeError, ValueError):
        raise ValidationError(f"{path}: not numeric") from None
    if not math.isfinite(v):
        raise ValidationError(f"{path}: non-finite value")
    return v


def _unit_range(v: float, path) -> float:
    if not 0.0 <= v <= 1.0:
        raise ValidationError(f"{path}: {v} outside [0, 1]")
    return v


@dataclass
class GaussianPrimitive:
    """One splat: geometry plus intrinsic surface attributes.

    ``camo`` marks primitives whose albedo the attack may modify; all other
    attributes, and the albedo of non-camo primitives, stay frozen.
    """

    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray  # unit quaternion, (w, x, y, z)
    opacity: float
    albedo: np.ndarray
    roughness: float
    metallic: float
    camo: bool = False

    def validate(self, path: str = "gaussian") -> None:
        self.mean = _vec(self.mean, 3, f"{path}.mean")
        self.scale = _vec(self.scale, 3, f"{path}.scale")
        if np.any(self.scale <= 0.0):
            raise ValidationError(f"{path}.scale: components must be > 0")
        self.rotation = _vec(self.rotation, 4, f"{path}.rotation")
        norm = float(np.linalg.norm(self.rotation))
        if abs(norm - 1.0) > _QUAT_NORM_TOL:
            raise ValidationError(f"{path}.rotation: norm {norm} not unit within {_QUAT_NORM_TOL}")
        self.opacity = _unit_range(_scalar(self.opacity, f"{path}.opacity"), f"{path}.opacity")
        self.albedo = _vec(self.albedo, 3, f"{path}.albedo")
        if np.any(self.albedo < 0.0) or np.any(self.albedo > 1.0):
            raise ValidationError(f"{path}.albedo: channel outside [0, 1]")
        self.roughness = _unit_range(_scalar(self.roughness, f"{path}.roughness"), f"{path}.roughness")
        self.metallic = _unit_range(_scalar(self.metallic, f"{path}.metallic"), f"{path}.metallic")
        self.camo = bool(self.camo)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def covariance(self) -> np.ndarray:
        """World-space covariance R diag(s^2) R^T."""
        r = self.rotation_matrix()
        return r @ np.diag(self.scale**2) @ r.T

    def clamp_attributes(self) -> None:
        """Re-impose [0,1] bounds after any mutation of the soft attributes."""
        self.albedo = np.clip(self.albedo, 0.0, 1.0)
        self.opacity = min(max(self.opacity, 0.0), 1.0)
        self.roughness = min(max(self.roughness, 0.0), 1.0)
        self.metallic = min(max(self.metallic, 0.0), 1.0)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass
class GaussianCloud:
    primitives: list[GaussianPrimitive]
    target_center: np.ndarray

    def validate(self) -> None:
        if not self.primitives:
            raise ValidationError("gaussians: must be non-empty")
        for i, g in enumerate(self.primitives):
            g.validate(f"gaussians[{i}]")
        self.target_center = _vec(self.target_center, 3, "target_center")

    def __len__(self) -> int:
        return len(self.primitives)

    # Packed views used by the renderer and shader.
    def means(self) -> np.ndarray:
        return np.stack([g.mean for g in self.primitives])

    def albedos(self) -> np.ndarray:
        return np.stack([g.albedo for g in self.primitives])

    def opacities(self) -> np.ndarray:
        return np.array([g.opacity for g in self.primitives])

    def camo_mask(self) -> np.ndarray:
        return np.array([g.camo for g in self.primitives], dtype=bool)

    def camo_indices(self) -> np.ndarray:
        return np.nonzero(self.camo_mask())[0]


@dataclass(frozen=True)
class PhysicalConfiguration:
    """One capture cell: camera geometry plus illumination."""

    pitch_deg: float
    azimuth_deg: float
    distance_m: float
    env_id: str

    def validate(self, env_ids=None, path: str = "config") -> None:
        if not 0.0 <= self.pitch_deg <= 90.0:
            raise ValidationError(f"{path}.pitch: {self.pitch_deg} outside [0, 90]")
        if not 0.0 <= self.azimuth_deg < 360.0:
            raise ValidationError(f"{path}.azimuth: {self.azimuth_deg} outside [0, 360)")
        if not self.distance_m > 0.0:
            raise ValidationError(f"{path}.distance: must be > 0")
        if env_ids is not None and self.env_id not in env_ids:
            raise ValidationError(f"{path}.env: unknown environment id {self.env_id!r}")


@dataclass(frozen=True)
class ConfigurationSpace:
    """Discretized grid over (pitch, azimuth, distance, environment).

    Cell index <-> configuration is the row-major bijection in that
    dimension order; it is stable across runs.
    """

    pitch_bins: tuple[float, ...]
    azimuth_bins: tuple[float, ...]
    distance_bins: tuple[float, ...]
    env_ids: tuple[str, ...]

    @property
    def q(self) -> int:
        return (
            len(self.pitch_bins)
            * len(self.azimuth_bins)
            * len(self.distance_bins)
            * len(self.env_ids)
        )

    def config_of(self, i: int) -> PhysicalConfiguration:
        if not 0 <= i < self.q:
            raise ValidationError(f"cell index {i} outside [0, {self.q})")
        n_a, n_d, n_e = len(self.azimuth_bins), len(self.distance_bins), len(self.env_ids)
        e = i % n_e
        i //= n_e
        d = i % n_d
        i //= n_d
        a = i % n_a
        p = i // n_a
        return PhysicalConfiguration(
            self.pitch_bins[p], self.azimuth_bins[a], self.distance_bins[d], self.env_ids[e]
        )

    def index_of(self, cfg: PhysicalConfiguration) -> int:
        try:
            p = self.pitch_bins.index(cfg.pitch_deg)
            a = self.azimuth_bins.index(cfg.azimuth_deg)
            d = self.distance_bins.index(cfg.distance_m)
            e = self.env_ids.index(cfg.env_id)
        except ValueError:
            raise ValidationError(f"configuration {cfg} not on the grid") from None
        n_a, n_d, n_e = len(self.azimuth_bins), len(self.distance_bins), len(self.env_ids)
        return ((p * n_a + a) * n_d + d) * n_e + e

    def configs(self):
        for i in range(self.q):
            yield self.config_of(i)


def discretize_space(pitch_bins, azimuth_bins, distance_bins, env_ids) -> ConfigurationSpace:
    """Build the configuration grid; q is the exact product of dimension sizes."""
    dims = {
        "pitch": [float(v) for v in pitch_bins],
        "azimuth": [float(v) for v in azimuth_bins],
        "distance": [float(v) for v in distance_bins],
    }
    env_ids = [str(e) for e in env_ids]
    for name, vals in dims.items():
        if not vals:
            raise ValidationError(f"config_space.{name}: empty dimension")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValidationError(f"config_space.{name}: bins must be strictly ascending")
    if not env_ids:
        raise ValidationError("config_space.envs: empty dimension")
    if len(set(env_ids)) != len(env_ids):
        raise ValidationError("config_space.envs: duplicate environment id")
    for p in dims["pitch"]:
        if not 0.0 <= p <= 90.0:
            raise ValidationError(f"config_space.pitch: {p} outside [0, 90]")
    for a in dims["azimuth"]:
        if not 0.0 <= a < 360.0:
            raise ValidationError(f"config_space.azimuth: {a} outside [0, 360)")
    for d in dims["distance"]:
        if d <= 0.0:
            raise ValidationError("config_space.distance: bins must be > 0")
    return ConfigurationSpace(
        tuple(dims["pitch"]), tuple(dims["azimuth"]), tuple(dims["distance"]), tuple(env_ids)
    )


@dataclass
class EnvironmentMap:
    """Equirectangular linear-radiance grid for image-based lighting.

    Row v maps to polar angle (0 at the top row), column u to azimuth.
    ``ambient`` is a constant indirect-light term added per channel.
    """

    id: str
    width: int
    height: int
    radiance: np.ndarray  # H x W x 3, float32, >= 0
    ambient: np.ndarray  # (3,), >= 0

    def validate(self, path: str = "environment") -> None:
        if self.width != 2 * self.height:
            raise ValidationError(f"{path}.width: must equal 2 x height")
        if self.radiance.shape != (self.height, self.width, 3):
            raise ValidationError(
                f"{path}.radiance: shape {self.radiance.shape} does not match "
                f"{self.height}x{self.width}x3"
            )
        if not np.all(np.isfinite(self.radiance)):
            raise ValidationError(f"{path}.radiance: non-finite value")
        if np.any(self.radiance < 0.0):
            raise ValidationError(f"{path}.radiance: negative radiance")
        self.ambient = _vec(self.ambient, 3, f"{path}.ambient")
        if np.any(self.ambient < 0.0):
            raise ValidationError(f"{path}.ambient: negative component")


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    vertical_fov_deg: float
    width: int
    height: int

    def validate(self) -> None:
        self.position = _vec(self.position, 3, "camera.position")
        self.look_at = _vec(self.look_at, 3, "camera.look_at")
        self.up = _vec(self.up, 3, "camera.up")
        if np.allclose(self.position, self.look_at):
            raise ValidationError("camera.position: must differ from look_at")
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        u = self.up / np.linalg.norm(self.up)
        if np.linalg.norm(np.cross(fwd, u)) < 1e-12:
            raise ValidationError("camera.up: parallel to the view direction")
        if not 0.0 < self.vertical_fov_deg < 180.0:
            raise ValidationError("camera.fov: must lie in (0, 180)")
        if self.width < 1 or self.height < 1:
            raise ValidationError("camera dimensions must be >= 1")

    def basis(self) -> np.ndarray:
        """World-to-camera rotation; rows are the camera x (right), y (down),
        z (forward) axes. Image y grows downward."""
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        return np.stack([right, down, fwd])

    def intrinsics(self) -> tuple[float, float, float, float]:
        """(fx, fy, cx, cy); square pixels, principal point at image center."""
        fy = (self.height / 2.0) / math.tan(math.radians(self.vertical_fov_deg) / 2.0)
        return fy, fy, self.width / 2.0, self.height / 2.0


@dataclass(frozen=True)
class GroundTruthBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float
    class_id: int

    def validate(self, width=None, height=None, path: str = "ground_truth") -> None:
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValidationError(f"{path}: degenerate box")
        if width is not None:
            if self.xmin < 0 or self.ymin < 0 or self.xmax > width or self.ymax > height:
                raise ValidationError(f"{path}: box outside image bounds")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)


DEFAULT_FOV_DEG = 45.0
_POLE_EPS = 1e-12


def spherical_position(pitch_deg: float, azimuth_deg: float, distance_m: float) -> np.ndarray:
    """Point on the sphere: azimuth from +x toward +y, pitch = elevation."""
    p = math.radians(pitch_deg)
    a = math.radians(azimuth_deg)
    return distance_m * np.array(
        [math.cos(p) * math.cos(a), math.cos(p) * math.sin(a), math.sin(p)]
    )


def pitch_up_fallback(pitch_deg: float) -> bool:
    """True when the view direction degenerates against world-up (pitch 90)."""
    return abs(math.cos(math.radians(pitch_deg))) < _POLE_EPS


def camera_from_config(
    cfg: PhysicalConfiguration,
    target_center: np.ndarray,
    fov_deg: float = DEFAULT_FOV_DEG,
    width: int = 64,
    height: int = 64,
) -> Camera:
    """Camera on the sphere of radius distance around the target, looking at it.

    World up (0,0,1) is used except at the zenith, where the fallback up
    (1,0,0) applies (query ``pitch_up_fallback`` to report it downstream).
    """
    cfg.validate()
    center = _vec(target_center, 3, "target_center")
    position = center + spherical_position(cfg.pitch_deg, cfg.azimuth_deg, cfg.distance_m)
    up = np.array([1.0, 0.0, 0.0]) if pitch_up_fallback(cfg.pitch_deg) else np.array([0.0, 0.0, 1.0])
    cam = Camera(position, center.copy(), up, float(fov_deg), int(width), int(height))
    cam.validate()
    return cam


@dataclass
class Scene:
    """Loaded scene bundle; iterates as the (cloud, environments, background,
    ground_truth, config_space) tuple."""

    cloud: GaussianCloud
    environments: dict[str, EnvironmentMap]
    background: np.ndarray
    ground_truth: GroundTruthBox
    config_space: ConfigurationSpace
    background_path_rel: str = "background.ppm"

    def __iter__(self):
        return iter(
            (self.cloud, self.environments, self.background, self.ground_truth, self.config_space)
        )

    @property
    def source_env(self) -> EnvironmentMap:
        """Environment the background image was captured under (first entry)."""
        return next(iter(self.environments.values()))


# ---------------------------------------------------------------------------
# Scene file I/O (canonical JSON + side binaries)


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValidationError("cannot serialize non-finite float")
    return format(x, ".9g")


def _emit(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return _fmt_float(float(value))
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ",".join(_emit(v) for v in value) + "]"
    if isinstance(value, dict):
        items = sorted(value.items())
        return "{" + ",".join(f"{json.dumps(k)}:{_emit(v)}" for k, v in items) + "}"
    raise ValidationError(f"cannot serialize {type(value).__name__}")


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise ValidationError(f"{path}: missing key {key!r}")
    return obj[key]


def load_scene(path) -> Scene:
    """Load and fully validate a scene file; referenced binaries are resolved
    relative to the file's directory."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ParseError(f"{path}: {e}") from None

    def _no_const(name):
        raise ParseError(f"{path}: non-finite literal {name!r} in scene file")

    try:
        doc = json.loads(text, parse_constant=_no_const)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")

    base = os.path.dirname(os.path.abspath(path))

    prims = []
    for i, g in enumerate(_require(doc, "gaussians", "scene")):
        prim = GaussianPrimitive(
            mean=_require(g, "mean", f"gaussians[{i}]"),
            scale=_require(g, "scale", f"gaussians[{i}]"),
            rotation=_require(g, "rotation", f"gaussians[{i}]"),
            opacity=_require(g, "opacity", f"gaussians[{i}]"),
            albedo=_require(g, "albedo", f"gaussians[{i}]"),
            roughness=_require(g, "roughness", f"gaussians[{i}]"),
            metallic=_require(g, "metallic", f"gaussians[{i}]"),
            camo=bool(_require(g, "camo", f"gaussians[{i}]")),
        )
        prims.append(prim)
    cloud = GaussianCloud(prims, np.asarray(_require(doc, "target_center", "scene")))
    cloud.validate()

    environments: dict[str, EnvironmentMap] = {}
    for i, e in enumerate(_require(doc, "environments", "scene")):
        env_id = str(_require(e, "id", f"environments[{i}]"))
        if env_id in environments:
            raise ValidationError(f"environments[{i}].id: duplicate id {env_id!r}")
        width = int(_require(e, "width", f"environments[{i}]"))
        height = int(_require(e, "height", f"environments[{i}]"))
        rad_rel = str(_require(e, "radiance_path", f"environments[{i}]"))
        radiance = read_radiance_f32(os.path.join(base, rad_rel), width, height)
        env = EnvironmentMap(
            id=env_id,
            width=width,
            height=height,
            radiance=radiance,
            ambient=np.asarray(_require(e, "ambient", f"environments[{i}]")),
        )
        env.validate(f"environments[{i}]")
        env._radiance_path = rad_rel  # preserved for byte-stable re-save
        environments[env_id] = env
    if not environments:
        raise ValidationError("environments: must be non-empty")

    bg_rel = str(_require(doc, "background_path", "scene"))
    background = read_ppm(os.path.join(base, bg_rel))

    gt_doc = _require(doc, "ground_truth", "scene")
    gt = GroundTruthBox(
        xmin=_scalar(_require(gt_doc, "xmin", "ground_truth"), "ground_truth.xmin"),
        ymin=_scalar(_require(gt_doc, "ymin", "ground_truth"), "ground_truth.ymin"),
        xmax=_scalar(_require(gt_doc, "xmax", "ground_truth"), "ground_truth.xmax"),
        ymax=_scalar(_require(gt_doc, "ymax", "ground_truth"), "ground_truth.ymax"),
        class_id=int(_require(gt_doc, "class_id", "ground_truth")),
    )
    gt.validate(background.shape[1], background.shape[0])

    cs_doc = _require(doc, "config_space", "scene")
    space = discretize_space(
        _require(cs_doc, "pitch", "config_space"),
        _require(cs_doc, "azimuth", "config_space"),
        _require(cs_doc, "distance", "config_space"),
        _require(cs_doc, "envs", "config_space"),
    )
    for env_id in space.env_ids:
        if env_id not in environments:
            raise ValidationError(f"config_space.envs: unknown environment id {env_id!r}")

    return Scene(cloud, environments, background, gt, space, background_path_rel=bg_rel)


def save_scene(scene: Scene, path) -> None:
    """Canonical serialization: sorted keys, 9-significant-digit floats.

    Also writes the referenced radiance binaries and background PPM next to
    the JSON so a scene directory is self-contained.
    """
    scene.cloud.validate()
    for env in scene.environments.values():
        env.validate(f"environment {env.id!r}")
    scene.ground_truth.validate(scene.background.shape[1], scene.background.shape[0])

    base = os.path.dirname(os.path.abspath(path))
    os.makedirs(base, exist_ok=True)
    bg_rel = scene.background_path_rel

    envs_out = []
    for env in scene.environments.values():
        rad_rel = getattr(env, "_radiance_path", f"env_{env.id}.f32")
        write_radiance_f32(os.path.join(base, rad_rel), env.radiance)
        envs_out.append(
            {
                "id": env.id,
                "width": env.width,
                "height": env.height,
                "radiance_path": rad_rel,
                "ambient": [float(v) for v in env.ambient],
            }
        )
    write_ppm(os.path.join(base, bg_rel), scene.background)

    doc = {
        "gaussians": [
            {
                "mean": [float(v) for v in g.mean],
                "scale": [float(v) for v in g.scale],
                "rotation": [float(v) for v in g.rotation],
                "opacity": float(g.opacity),
                "albedo": [float(v) for v in g.albedo],
                "roughness": float(g.roughness),
                "metallic": float(g.metallic),
                "camo": bool(g.camo),
            }
            for g in scene.cloud.primitives
        ],
        "environments": envs_out,
        "background_path": bg_rel,
        "ground_truth": {
            "xmin": float(scene.ground_truth.xmin),
            "ymin": float(scene.ground_truth.ymin),
            "xmax": float(scene.ground_truth.xmax),
            "ymax": float(scene.ground_truth.ymax),
            "class_id": int(scene.ground_truth.class_id),
        },
        "config_space": {
            "pitch": list(scene.config_space.pitch_bins),
            "azimuth": list(scene.config_space.azimuth_bins),
            "distance": list(scene.config_space.distance_bins),
            "envs": list(scene.config_space.env_ids),
        },
        "target_center": [float(v) for v in scene.cloud.target_center],
    }
    data = _emit(doc) + "\n"
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(data)
