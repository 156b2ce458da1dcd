"""The attack loop: sample configurations, render, composite, score,
backpropagate to albedo, and update.

Modes: ``eot`` draws cells uniformly (average-case objective); ``hpcm``
draws from the difficulty table's softmax and feeds per-frame losses back
into it. Both modes share one counter-based RNG stream, and eot is
implemented as inverse-CDF sampling over a uniform probability vector, so
with a fresh table the first iteration of the two modes is identical and
trajectories diverge only once score updates skew the distribution.

Albedo parameters are held in float32: every update quantizes to f32, which
makes the f32 checkpoint encoding lossless and resumed runs bit-identical
to uninterrupted ones.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .compositor import composite, relight_background_parametric
from .detector import SurrogateDetector, loss_gradient
from .errors import NumericError, ParseError, ValidationError, check_finite
from .mining import (
    GlobalDifficultyTable,
    init_table,
    sample_index,
    sampling_probs,
    update_score,
)
from .renderer import backward_albedo, build_render_plan
from .rng import RngState
from .scene import ConfigurationSpace, Scene, camera_from_config, save_scene
from .shading import colors_from_coefficients, jacobians_from_diag, shading_coefficients

CHECKPOINT_MAGIC = b"RPGA"
CHECKPOINT_VERSION = 1

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


@dataclass(frozen=True)
class RunConfig:
    mode: str = "hpcm"
    iters: int = 100
    lr: float = 0.01
    batch: int = 8
    seed: int = 0
    tau: float = 1.0
    mu: float = 0.5
    init_score: float = 10.0
    quad_theta: int = 32
    quad_phi: int = 64
    optimizer: str = "sgd"
    detector: dict | None = None

    def validate(self) -> None:
        if self.mode not in ("eot", "hpcm"):
            raise ValidationError(f"mode must be eot or hpcm, got {self.mode!r}")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValidationError(f"optimizer must be sgd or adamw, got {self.optimizer!r}")
        if self.iters < 0:
            raise ValidationError("iters must be >= 0")
        if self.batch < 1:
            raise ValidationError("batch must be >= 1")
        if not self.lr >= 0.0:
            raise ValidationError("lr must be >= 0")

    def to_json(self) -> str:
        doc = {
            "mode": self.mode,
            "iters": self.iters,
            "lr": self.lr,
            "batch": self.batch,
            "seed": self.seed,
            "tau": self.tau,
            "mu": self.mu,
            "init_score": self.init_score,
            "quad_theta": self.quad_theta,
            "quad_phi": self.quad_phi,
            "optimizer": self.optimizer,
        }
        if self.detector is not None:
            doc["detector"] = self.detector
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise ParseError(f"{path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid JSON: {e}") from None
    known = {
        "mode", "iters", "lr", "batch", "seed", "tau", "mu",
        "init_score", "quad_theta", "quad_phi", "optimizer", "detector",
    }
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"run config: unknown keys {sorted(unknown)}")
    cfg = RunConfig(**doc)
    cfg.validate()
    return cfg


@dataclass(frozen=True)
class AttackState:
    """Full optimizer state; immutable, so a failed step leaves no trace."""

    albedo_params: np.ndarray  # float32, flattened camo albedos in [0, 1]
    iteration: int
    learning_rate: float
    batch_size: int
    mode: str
    seed: int
    rng: RngState
    loss_history: tuple[float, ...]
    table: GlobalDifficultyTable | None
    optimizer: str = "sgd"
    opt_m: np.ndarray | None = None
    opt_v: np.ndarray | None = None


def initial_state(scene: Scene, config: RunConfig) -> AttackState:
    config.validate()
    camo_idx = scene.cloud.camo_indices()
    if camo_idx.size == 0:
        raise ValidationError("scene has no camouflage-flagged primitives to optimize")
    albedo = scene.cloud.albedos()[camo_idx].reshape(-1).astype(np.float32)
    table = None
    if config.mode == "hpcm":
        table = init_table(scene.config_space.q, config.init_score, config.mu, config.tau)
    n = albedo.size
    return AttackState(
        albedo_params=albedo,
        iteration=0,
        learning_rate=config.lr,
        batch_size=config.batch,
        mode=config.mode,
        seed=config.seed,
        rng=RngState(config.seed),
        loss_history=(),
        table=table,
        optimizer=config.optimizer,
        opt_m=np.zeros(n) if config.optimizer == "adamw" else None,
        opt_v=np.zeros(n) if config.optimizer == "adamw" else None,
    )


class AttackContext:
    """Per-cell caches shared across iterations.

    Blend weights depend only on frozen geometry and the camera, and shaded
    colors are affine in albedo, so each cell caches its render plan, its
    shading coefficients, and the relit background once.
    """

    def __init__(self, scene: Scene, config: RunConfig, threads: int = 1):
        self.scene = scene
        self.config = config
        self.threads = threads
        self.camo_idx = scene.cloud.camo_indices()
        self._cells: dict[int, tuple] = {}
        self._relit: dict[str, np.ndarray] = {}

    def relit_background(self, env_id: str) -> np.ndarray:
        if env_id not in self._relit:
            self._relit[env_id] = relight_background_parametric(
                self.scene.background, self.scene.source_env, self.scene.environments[env_id]
            )
        return self._relit[env_id]

    def cell(self, index: int):
        if index not in self._cells:
            cfg = self.scene.config_space.config_of(index)
            h, w = self.scene.background.shape[:2]
            cam = camera_from_config(cfg, self.scene.cloud.target_center, width=w, height=h)
            plan = build_render_plan(self.scene.cloud, cam, threads=self.threads)
            base, slope = shading_coefficients(
                self.scene.cloud,
                cam,
                self.scene.environments[cfg.env_id],
                self.config.quad_theta,
                self.config.quad_phi,
            )
            self._cells[index] = (plan, base, slope, self.relit_background(cfg.env_id))
        return self._cells[index]

    def full_albedos(self, albedo_params: np.ndarray) -> np.ndarray:
        albedos = self.scene.cloud.albedos()
        albedos[self.camo_idx] = np.asarray(albedo_params, dtype=np.float64).reshape(-1, 3)
        return albedos

    def frame_loss_and_grad(self, cell_index: int, albedo_params: np.ndarray, detector):
        """Loss of one configuration and its gradient w.r.t. the flattened
        camo albedos (the straight chain: detector -> composite -> blend ->
        shading slope)."""
        plan, base, slope, bg = self.cell(cell_index)
        colors, jac_diag = colors_from_coefficients(base, slope, self.full_albedos(albedo_params))
        out = plan.render(colors)
        img = composite(out, bg)
        loss, d_img = loss_gradient(detector, img, self.scene.ground_truth)
        d_fg = d_img * out.object_mask[:, :, None]
        d_albedo = backward_albedo(out, d_fg, jacobians_from_diag(jac_diag))
        return loss, d_albedo[self.camo_idx].reshape(-1)

    def frame_loss(self, cell_index: int, albedo_params: np.ndarray, detector) -> float:
        from .detector import detection_loss

        plan, base, slope, bg = self.cell(cell_index)
        colors, _ = colors_from_coefficients(base, slope, self.full_albedos(albedo_params))
        img = composite(plan.render(colors), bg)
        loss, _ = detection_loss(detector.detect(img), self.scene.ground_truth)
        return loss


def _draw_cells(state: AttackState, q: int) -> tuple[list[int], RngState]:
    if state.mode == "hpcm":
        probs = sampling_probs(state.table)
    else:
        probs = np.full(q, 1.0 / q)
    rng = state.rng
    cells = []
    for _ in range(state.batch_size):
        idx, rng = sample_index(probs, rng)
        cells.append(idx)
    return cells, rng


def attack_step(
    state: AttackState,
    scene: Scene,
    detector: SurrogateDetector,
    ctx: AttackContext | None = None,
) -> AttackState:
    """One batch: sample, render, score, backpropagate, update.

    Any renderer/detector error propagates before the returned state is
    built, so the caller's state is never half-updated.
    """
    if ctx is None:
        ctx = AttackContext(scene, RunConfig(mode=state.mode, seed=state.seed))
    q = scene.config_space.q
    cells, rng = _draw_cells(state, q)

    losses, grads = [], []
    for cell in cells:
        loss, grad = ctx.frame_loss_and_grad(cell, state.albedo_params, detector)
        losses.append(loss)
        grads.append(grad)
    mean_grad = np.mean(grads, axis=0)
    mean_loss = float(np.mean(losses))
    check_finite("attack_step gradients", mean_grad, np.array(losses))

    albedo64 = state.albedo_params.astype(np.float64)
    opt_m, opt_v = state.opt_m, state.opt_v
    if state.optimizer == "adamw":
        t = state.iteration + 1
        opt_m = _ADAM_BETA1 * opt_m + (1.0 - _ADAM_BETA1) * mean_grad
        opt_v = _ADAM_BETA2 * opt_v + (1.0 - _ADAM_BETA2) * mean_grad**2
        m_hat = opt_m / (1.0 - _ADAM_BETA1**t)
        v_hat = opt_v / (1.0 - _ADAM_BETA2**t)
        step = state.learning_rate * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
    else:
        step = state.learning_rate * mean_grad
    new_albedo = np.clip(albedo64 - step, 0.0, 1.0).astype(np.float32)
    check_finite("albedo update", new_albedo)

    table = state.table
    if state.mode == "hpcm":
        table = GlobalDifficultyTable(
            scores=state.table.scores.copy(),
            mu=state.table.mu,
            tau=state.table.tau,
            init_value=state.table.init_value,
        )
        for cell, loss in zip(cells, losses):
            update_score(table, cell, loss)

    return replace(
        state,
        albedo_params=new_albedo,
        iteration=state.iteration + 1,
        rng=rng,
        loss_history=state.loss_history + (mean_loss,),
        table=table,
        opt_m=opt_m,
        opt_v=opt_v,
    )


def evaluate_grid(
    scene: Scene,
    detector: SurrogateDetector,
    albedo_params: np.ndarray,
    space: ConfigurationSpace,
    ctx: AttackContext | None = None,
) -> np.ndarray:
    """Deterministic per-cell detection loss over the whole grid with the
    albedo frozen."""
    if ctx is None:
        ctx = AttackContext(scene, RunConfig())
    if space is not scene.config_space and space != scene.config_space:
        raise ValidationError("evaluate_grid: space does not match the scene grid")
    return np.array(
        [ctx.frame_loss(i, albedo_params, detector) for i in range(space.q)]
    )


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(state: AttackState, path) -> None:
    """Binary snapshot: magic, version, iteration, rng state, f32 albedo,
    f64 score table, then the loss history and optimizer moments needed for
    bit-exact resume."""
    scores = state.table.scores if state.table is not None else np.zeros(0)
    hist = np.asarray(state.loss_history, dtype=np.float64)
    parts = [
        struct.pack(
            "<4sIQQQ",
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            state.iteration,
            state.rng.seed,
            state.rng.counter,
        ),
        struct.pack("<Q", state.albedo_params.size),
        state.albedo_params.astype("<f4").tobytes(),
        struct.pack("<Q", scores.size),
        scores.astype("<f8").tobytes(),
        struct.pack("<Q", hist.size),
        hist.astype("<f8").tobytes(),
    ]
    if state.optimizer == "adamw":
        parts.append(struct.pack("<B", 1))
        parts.append(state.opt_m.astype("<f8").tobytes())
        parts.append(state.opt_v.astype("<f8").tobytes())
    else:
        parts.append(struct.pack("<B", 0))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path, scene: Scene, config: RunConfig) -> AttackState:
    """Rebuild an AttackState from a checkpoint against its scene/config."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise ParseError(f"{path}: {e}") from None
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise ParseError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, data, off)
        off += size
        return vals

    magic, version, iteration, seed, counter = take("<4sIQQQ")
    if magic != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")

    def take_array(dtype, count):
        nonlocal off
        nbytes = np.dtype(dtype).itemsize * count
        if off + nbytes > len(data):
            raise ParseError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).copy()
        off += nbytes
        return arr

    (n_alb,) = take("<Q")
    albedo = take_array("<f4", n_alb)
    (n_scores,) = take("<Q")
    scores = take_array("<f8", n_scores)
    (n_hist,) = take("<Q")
    hist = take_array("<f8", n_hist)
    (has_opt,) = take("<B")
    opt_m = opt_v = None
    if has_opt:
        opt_m = take_array("<f8", n_alb)
        opt_v = take_array("<f8", n_alb)

    expected = scene.cloud.camo_indices().size * 3
    if n_alb != expected:
        raise ValidationError(
            f"checkpoint albedo length {n_alb} does not match scene ({expected})"
        )
    table = None
    if config.mode == "hpcm":
        if n_scores != scene.config_space.q:
            raise ValidationError(
                f"checkpoint score table length {n_scores} does not match grid q="
                f"{scene.config_space.q}"
            )
        table = init_table(scene.config_space.q, config.init_score, config.mu, config.tau)
        table.scores[:] = scores
    if config.optimizer == "adamw" and opt_m is None:
        raise ValidationError("checkpoint lacks optimizer moments required for adamw")
    return AttackState(
        albedo_params=albedo,
        iteration=int(iteration),
        learning_rate=config.lr,
        batch_size=config.batch,
        mode=config.mode,
        seed=int(seed),
        rng=RngState(int(seed), int(counter)),
        loss_history=tuple(float(x) for x in hist),
        table=table,
        optimizer=config.optimizer,
        opt_m=opt_m,
        opt_v=opt_v,
    )


def scene_with_albedo(scene: Scene, albedo_params: np.ndarray) -> Scene:
    """Copy of the scene with camo albedos replaced (frozen primitives are
    carried over untouched, bit for bit)."""
    import copy

    cloud = copy.deepcopy(scene.cloud)
    vals = np.asarray(albedo_params, dtype=np.float64).reshape(-1, 3)
    for row, idx in enumerate(cloud.camo_indices()):
        cloud.primitives[idx].albedo = vals[row].copy()
    return Scene(cloud, scene.environments, scene.background, scene.ground_truth, scene.config_space)


def write_loss_history_csv(history, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("iteration,mean_loss\n")
        for i, loss in enumerate(history, start=1):
            f.write(f"{i},{format(loss, '.17g')}\n")


def write_table_csv(table: GlobalDifficultyTable, space: ConfigurationSpace, path) -> None:
    probs = sampling_probs(table)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("cell_index,pitch,azimuth,distance,env,score,prob\n")
        for i in range(space.q):
            cfg = space.config_of(i)
            f.write(
                f"{i},{format(cfg.pitch_deg, '.9g')},{format(cfg.azimuth_deg, '.9g')},"
                f"{format(cfg.distance_m, '.9g')},{cfg.env_id},"
                f"{format(table.scores[i], '.17g')},{format(probs[i], '.17g')}\n"
            )


def run_attack(
    scene: Scene,
    detector: SurrogateDetector,
    iters: int,
    mode: str = "hpcm",
    seed: int = 0,
    eta: float = 0.01,
    batch: int = 8,
    *,
    tau: float = 1.0,
    mu: float = 0.5,
    init_score: float = 10.0,
    quad_theta: int = 32,
    quad_phi: int = 64,
    optimizer: str = "sgd",
    out_dir=None,
    checkpoint_every: int = 500,
    threads: int = 1,
    resume_from=None,
) -> tuple[AttackState, dict]:
    """Iterate ``attack_step`` until ``iters`` total iterations, writing
    resumable artifacts; the trajectory is a pure function of (seed, scene,
    detector, mode) and ``iters`` counts from iteration 0 even when resuming."""
    config = RunConfig(
        mode=mode, iters=iters, lr=eta, batch=batch, seed=seed, tau=tau, mu=mu,
        init_score=init_score, quad_theta=quad_theta, quad_phi=quad_phi,
        optimizer=optimizer, detector=detector.spec(),
    )
    config.validate()
    ctx = AttackContext(scene, config, threads=threads)
    if resume_from is not None:
        state = load_checkpoint(resume_from, scene, config)
    else:
        state = initial_state(scene, config)

    artifacts: dict = {}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        cfg_path = os.path.join(out_dir, "run_config.json")
        with open(cfg_path, "w", encoding="utf-8", newline="") as f:
            f.write(config.to_json())
        artifacts["run_config"] = cfg_path
        artifacts["checkpoints"] = []

    while state.iteration < iters:
        state = attack_step(state, scene, detector, ctx)
        if out_dir is not None and (
            state.iteration % checkpoint_every == 0 or state.iteration == iters
        ):
            ck = os.path.join(out_dir, f"checkpoint_{state.iteration:06d}.bin")
            save_checkpoint(state, ck)
            artifacts["checkpoints"].append(ck)

    if out_dir is not None and iters > 0:
        hist_path = os.path.join(out_dir, "loss_history.csv")
        write_loss_history_csv(state.loss_history, hist_path)
        artifacts["loss_history"] = hist_path
        final_scene = scene_with_albedo(scene, state.albedo_params)
        scene_path = os.path.join(out_dir, "final_scene.json")
        save_scene(final_scene, scene_path)
        artifacts["final_scene"] = scene_path
        if state.mode == "hpcm":
            table_path = os.path.join(out_dir, "difficulty_table.csv")
            write_table_csv(state.table, scene.config_space, table_path)
            artifacts["difficulty_table"] = table_path
    return state, artifacts
