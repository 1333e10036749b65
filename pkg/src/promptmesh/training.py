"""Two-stage amortized trainer: one conditioned model over a whole prompt set.

Stage 1 renders volumetrically and optimizes the triplane generator, the SDF
and color heads, and the sharpness scalar; the deformation head stays frozen.
Stage 2 extracts a mesh every step, rasterizes it at higher resolution, and
optimizes everything, with the zero-initialized deformation head guaranteeing
zero offsets on its first step.

Guidance gradients arrive as per-pixel arrays and are injected as the
gradient of the surrogate scalar 0.5 * sum((image - stopgrad(image - g))^2),
whose derivative with respect to the image is exactly g; with the photometric
provider this reproduces direct mean-squared-error backpropagation.

Determinism: every step draws from a fresh generator seeded by (master seed,
stage, iteration), so an interrupted-and-resumed run replays the exact
camera/prompt/shading sequence of an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import raster, tetmesh, volumetric
from . import tensor as T
from .camera import Camera, orbit_camera
from .dataset import CANONICAL_FOV, CANONICAL_VIEWS
from .embedding import directional_prompt, embed
from .fields import FieldHeads, HeadConfig
from .guidance import GuidanceError, GuidanceRequest
from .triplane import TriplaneConfig, TriplaneGenerator

CKPT_MAGIC = b"ATOMCKPT"
CKPT_VERSION = 1
SHADING_POLICIES = ("random", "albedo")
CAMERA_POLICIES = ("random", "canonical")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    seen_prompts: list[str]
    unseen_prompts: list[str] = field(default_factory=list)

    # model dimensions
    triplane_channels: int = 16
    plane_size: int = 32
    blocks: int = 2
    attn_heads: int = 4
    text_channels: int = 64
    max_tokens: int = 16
    octaves: int = 6
    hidden: int = 64
    bound: float = 1.0
    sphere_radius: float = 0.5
    grid_res: int = 48

    # stage 1 (volumetric)
    stage1_iters: int = 3000
    stage1_resolution: int = 64
    samples_per_ray: int = 24
    stage1_lr: float = 4e-4
    stage1_batch: int = 16

    # stage 2 (rasterized)
    stage2_iters: int = 1500
    stage2_resolution: int = 128
    stage2_lr: float = 2e-4
    stage2_batch: int = 16

    # camera distribution; "random" draws pose and FOV from the ranges below
    # (the pose-agnostic-prior regime), "canonical" draws only the reference
    # poses at their exact FOV (for pose-specific photometric supervision)
    camera_policy: str = "random"
    camera_distance: float = 3.0
    elevation_lo: float = -10.0
    elevation_hi: float = 60.0
    stage1_fov_lo: float = 40.0
    stage1_fov_hi: float = 70.0
    stage2_fov_lo: float = 30.0
    stage2_fov_hi: float = 40.0

    # guidance
    guidance_scale: float = 20.0
    stage1_noise_lo: float = 0.2
    stage1_noise_hi: float = 0.98
    stage2_noise_lo: float = 0.02
    stage2_noise_hi: float = 0.5

    # "random": 50/50 textureless/diffuse over random backgrounds (the SDS
    # regime); "albedo": plain albedo on white, matching the photometric
    # oracle's reference renders
    train_shading: str = "random"

    # optimizer
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8

    seed: int = 0
    embed_seed: int = 0

    def __post_init__(self):
        if not self.seen_prompts:
            raise ValueError("config needs at least one seen prompt")
        if set(self.seen_prompts) & set(self.unseen_prompts):
            raise ValueError("seen and unseen prompt sets must be disjoint")
        if self.stage1_resolution > self.stage2_resolution:
            raise ValueError("stage-1 resolution must not exceed stage 2's")
        if min(self.stage1_batch, self.stage2_batch) < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.train_shading not in SHADING_POLICIES:
            raise ValueError(f"train_shading must be one of {SHADING_POLICIES}")
        if self.camera_policy not in CAMERA_POLICIES:
            raise ValueError(f"camera_policy must be one of {CAMERA_POLICIES}")
        for lo, hi in ((self.stage1_fov_lo, self.stage1_fov_hi),
                       (self.stage2_fov_lo, self.stage2_fov_hi)):
            if not 0.0 < lo <= hi < 180.0:
                raise ValueError("FOV ranges must satisfy 0 < lo <= hi < 180")
        if self.elevation_lo > self.elevation_hi:
            raise ValueError("elevation range is inverted")
        for lo, hi in ((self.stage1_noise_lo, self.stage1_noise_hi),
                       (self.stage2_noise_lo, self.stage2_noise_hi)):
            if not 0.0 <= lo < hi <= 1.0:
                raise ValueError("noise ranges must satisfy 0 <= lo < hi <= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ValueError(f"unknown config key: {key!r}")
        return cls(**data)

    @classmethod
    def desk(cls, seen, unseen=(), **overrides) -> "TrainConfig":
        """Small-compute preset tuned for the photometric oracle."""
        # Stage 1 runs to its plateau: refinement started from a half-placed
        # surface redistributes shared capacity between prompts instead of
        # polishing all of them.  Stage 2 is then a short, gentle fine-tune:
        # the rasterizer treats pixel coverage as locally constant, so
        # aggressive steps against pixel-space feedback let silhouette-band
        # error erode vertex colors faster than the interior improves.  At
        # lr 2e-5 the refinement stays net-positive per prompt; it rolls
        # over somewhere past ~150 iters.
        base = dict(
            seen_prompts=list(seen), unseen_prompts=list(unseen),
            stage1_iters=900, stage1_resolution=32, samples_per_ray=16,
            stage1_batch=4, stage2_iters=100, stage2_resolution=64,
            stage2_batch=4, stage2_lr=2e-5, grid_res=48,
            train_shading="albedo", camera_policy="canonical",
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def full(cls, seen, unseen=(), **overrides) -> "TrainConfig":
        """Full-scale hyperparameters (not desk-runnable)."""
        base = dict(
            seen_prompts=list(seen), unseen_prompts=list(unseen),
            stage1_iters=10000, stage1_resolution=64, samples_per_ray=64,
            stage1_batch=16, stage2_iters=10000, stage2_resolution=512,
            stage2_batch=16, grid_res=128, train_shading="random",
        )
        base.update(overrides)
        return cls(**base)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------

class Model:
    """Triplane generator + field heads + the sharpness scalar."""

    def __init__(self, cfg: TrainConfig, state: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.generator = TriplaneGenerator(TriplaneConfig(
            channels=cfg.triplane_channels, plane_size=cfg.plane_size,
            blocks=cfg.blocks, heads=cfg.attn_heads,
            text_channels=cfg.text_channels, seed=cfg.seed))
        self.heads = FieldHeads(HeadConfig(
            triplane_channels=cfg.triplane_channels, octaves=cfg.octaves,
            hidden=cfg.hidden, bound=cfg.bound,
            sphere_radius=cfg.sphere_radius, grid_res=cfg.grid_res,
            seed=cfg.seed + 1))
        self.s = T.parameter(np.array(10.0), name="s")
        self._embed_cache: dict[str, object] = {}
        if state is not None:
            self.load_state(state)

    def parameters(self) -> dict[str, T.Tensor]:
        out = {f"generator.{k}": v for k, v in self.generator.parameters().items()}
        out.update({f"heads.{k}": v for k, v in self.heads.parameters().items()})
        out["s"] = self.s
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype).reshape(p.data.shape)
            p.data = arr.copy()

    def embedding(self, prompt: str):
        if prompt not in self._embed_cache:
            self._embed_cache[prompt] = embed(
                prompt, seed=self.cfg.embed_seed,
                max_tokens=self.cfg.max_tokens, channels=self.cfg.text_channels)
        return self._embed_cache[prompt]

    def planes(self, prompt: str) -> T.Tensor:
        return self.generator.generate(self.embedding(prompt))

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint") -> "Model":
        return cls(TrainConfig.from_dict(ckpt.config), state=ckpt.params)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam over a named parameter dict; moments keyed like the parameters."""

    def __init__(self, params: dict[str, T.Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def grads_finite(self) -> bool:
        return all(p._grad is None or np.isfinite(p._grad).all()
                   for p in self.params.values())

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p._grad if p._grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# camera sampling
# ---------------------------------------------------------------------------

def sample_view(cfg: TrainConfig, stage: int, rng: np.random.Generator
                ) -> tuple[float, float, float]:
    """Draw (azimuth, elevation, fov) for one training view."""
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    if cfg.camera_policy == "canonical":
        _, azimuth, elevation = CANONICAL_VIEWS[
            int(rng.integers(0, len(CANONICAL_VIEWS)))]
        return azimuth, elevation, CANONICAL_FOV
    azimuth = float(rng.uniform(0.0, 360.0))
    elevation = float(rng.uniform(cfg.elevation_lo, cfg.elevation_hi))
    if stage == 1:
        fov = float(rng.uniform(cfg.stage1_fov_lo, cfg.stage1_fov_hi))
    else:
        fov = float(rng.uniform(cfg.stage2_fov_lo, cfg.stage2_fov_hi))
    return azimuth, elevation, fov


def sample_camera(cfg: TrainConfig, stage: int, rng: np.random.Generator) -> Camera:
    azimuth, elevation, fov = sample_view(cfg, stage, rng)
    res = cfg.stage1_resolution if stage == 1 else cfg.stage2_resolution
    return orbit_camera(azimuth, elevation, distance=cfg.camera_distance,
                        fov_y=fov, width=res, height=res)


def _sample_shading(cfg: TrainConfig, rng: np.random.Generator, eye: np.ndarray):
    """Per-iteration shading mode, light direction, and background color."""
    if cfg.train_shading == "albedo":
        return "albedo", None, volumetric.BACKGROUNDS["white"]
    mode = "textureless" if rng.uniform() < 0.5 else "diffuse"
    toward_cam = eye / np.linalg.norm(eye)
    jitter = rng.standard_normal(3)
    jitter /= np.linalg.norm(jitter)
    light = toward_cam + 0.6 * jitter
    light /= np.linalg.norm(light)
    bg_name = ("white", "black", "gray")[rng.integers(0, 3)]
    return mode, light, volumetric.BACKGROUNDS[bg_name]


# ---------------------------------------------------------------------------
# guidance injection
# ---------------------------------------------------------------------------

def inject_guidance(image: T.Tensor, grad: np.ndarray, scale: float = 1.0) -> T.Tensor:
    """Surrogate scalar whose image-gradient is exactly `scale * grad`."""
    anchor = image.data - np.asarray(grad, dtype=image.data.dtype)
    diff = image - T.Tensor(anchor)
    return (diff * diff).sum() * (0.5 * scale)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    opt_t: int
    stage: int
    iteration: int
    lr_halvings: int
    skip_streak: int
    empty_skips: int
    config: dict
    config_hash: str


def _checkpoint_from(model: Model, opt: Adam, stage: int, iteration: int,
                     lr_halvings: int, skip_streak: int, empty_skips: int
                     ) -> Checkpoint:
    cfg = model.cfg
    return Checkpoint(
        params=model.state(),
        opt_m={k: v.copy() for k, v in opt.m.items()},
        opt_v={k: v.copy() for k, v in opt.v.items()},
        opt_t=opt.t, stage=stage, iteration=iteration,
        lr_halvings=lr_halvings, skip_streak=skip_streak,
        empty_skips=empty_skips, config=cfg.to_dict(),
        config_hash=cfg.config_hash())


def _write_buffer(f, name: str, arr: np.ndarray) -> None:
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    blob = name.encode("utf-8")
    f.write(struct.pack("<I", len(blob)))
    f.write(blob)
    f.write(struct.pack("<I", len(payload)))
    f.write(payload)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    config_blob = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    buffers: list[tuple[str, np.ndarray]] = []
    for name, arr in ckpt.params.items():
        buffers.append((f"param.{name}", arr))
    for name, arr in ckpt.opt_m.items():
        buffers.append((f"adam.m.{name}", arr))
    for name, arr in ckpt.opt_v.items():
        buffers.append((f"adam.v.{name}", arr))
    state = np.array([ckpt.opt_t, ckpt.stage, ckpt.iteration,
                      ckpt.lr_halvings, ckpt.skip_streak, ckpt.empty_skips],
                     dtype="<f4")
    buffers.append(("state", state))
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(config_blob)))
        f.write(config_blob)
        f.write(struct.pack("<I", len(buffers)))
        for name, arr in buffers:
            _write_buffer(f, name, arr)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", raw, 12)
    config = json.loads(raw[16:16 + clen].decode("utf-8"))
    off = 16 + clen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    buffers: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (blen,) = struct.unpack_from("<I", raw, off)
        off += 4
        buffers[name] = np.frombuffer(raw[off:off + blen], dtype="<f4").copy()
        off += blen
    if "state" not in buffers:
        raise ValueError(f"{path}: missing run-state buffer")
    state = buffers.pop("state")
    params = {k[len("param."):]: v for k, v in buffers.items()
              if k.startswith("param.")}
    opt_m = {k[len("adam.m."):]: v for k, v in buffers.items()
             if k.startswith("adam.m.")}
    opt_v = {k[len("adam.v."):]: v for k, v in buffers.items()
             if k.startswith("adam.v.")}
    cfg = TrainConfig.from_dict(config)  # validates + shapes below
    model = Model(cfg)
    shaped = {}
    for name, p in model.parameters().items():
        if name not in params:
            raise ValueError(f"{path}: missing parameter buffer {name!r}")
        shaped[name] = params[name].reshape(p.data.shape)
    shape_of = {k: p.data.shape for k, p in model.parameters().items()}
    opt_m = {k: v.reshape(shape_of[k]) for k, v in opt_m.items()}
    opt_v = {k: v.reshape(shape_of[k]) for k, v in opt_v.items()}
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    return Checkpoint(params=shaped, opt_m=opt_m, opt_v=opt_v,
                      opt_t=int(state[0]), stage=int(state[1]),
                      iteration=int(state[2]), lr_halvings=int(state[3]),
                      skip_streak=int(state[4]), empty_skips=int(state[5]),
                      config=config,
                      config_hash=hashlib.sha256(blob).hexdigest())


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _step_rng(cfg: TrainConfig, stage: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng((cfg.seed, stage, iteration))


def _restore_optimizer(opt: Adam, ckpt: Checkpoint) -> None:
    for name in opt.params:
        if name in ckpt.opt_m:
            opt.m[name] = ckpt.opt_m[name].copy()
            opt.v[name] = ckpt.opt_v[name].copy()
    opt.t = ckpt.opt_t


def _finish_step(opt: Adam, loss_value: float, base_lr: float,
                 lr_halvings: int, skip_streak: int, forced_skip: bool
                 ) -> tuple[bool, int, int]:
    """Shared skip/halving policy. Returns (skipped, lr_halvings, streak)."""
    if forced_skip or not np.isfinite(loss_value) or not opt.grads_finite():
        skip_streak += 1
        if skip_streak >= 3:
            lr_halvings += 1
            skip_streak = 0
        opt.lr = base_lr / (2 ** lr_halvings)
        return True, lr_halvings, skip_streak
    opt.step()
    return False, lr_halvings, 0


def train_stage1(cfg: TrainConfig, provider, *, resume: Checkpoint | None = None,
                 history: list | None = None) -> Checkpoint:
    """Volumetric stage: optimizes generator, SDF and color heads, and s."""
    model = Model(cfg, state=resume.params if resume else None)
    trainable = {k: v for k, v in model.parameters().items()
                 if not k.startswith("heads.deform.")}
    opt = Adam(trainable, cfg.stage1_lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    start, lr_halvings, skip_streak = 0, 0, 0
    if resume is not None and resume.stage == 1:
        _restore_optimizer(opt, resume)
        start = resume.iteration
        lr_halvings, skip_streak = resume.lr_halvings, resume.skip_streak
    opt.lr = cfg.stage1_lr / (2 ** lr_halvings)

    seen = list(cfg.seen_prompts)
    for it in range(start, cfg.stage1_iters):
        t0 = time.perf_counter()
        rng = _step_rng(cfg, 1, it)
        picks = rng.integers(0, len(seen), size=cfg.stage1_batch)
        opt.zero_grad()
        for p in model.parameters().values():
            p.zero_grad()
        loss_value, forced_skip = 0.0, False
        for idx in picks:
            prompt = seen[int(idx)]
            azimuth, elevation, fov = sample_view(cfg, 1, rng)
            cam = orbit_camera(azimuth, elevation,
                               distance=cfg.camera_distance, fov_y=fov,
                               width=cfg.stage1_resolution,
                               height=cfg.stage1_resolution)
            mode, light, bg = _sample_shading(cfg, rng, cam.eye)
            planes = model.planes(prompt)
            image, _, _ = volumetric.render_stage1(
                planes, model.heads, model.s, cam,
                n_samples=cfg.samples_per_ray, background=bg,
                shading=mode, light_dir=light)
            try:
                resp = provider(GuidanceRequest(
                    prompt=directional_prompt(prompt, azimuth, elevation),
                    image=np.clip(image.data, 0.0, 1.0), stage=1,
                    noise_range=(cfg.stage1_noise_lo, cfg.stage1_noise_hi),
                    guidance_scale=cfg.guidance_scale))
            except GuidanceError:
                forced_skip = True
                break
            surrogate = inject_guidance(image, resp.grad, 1.0 / cfg.stage1_batch)
            T.backward(surrogate)
            loss_value += (resp.loss / cfg.stage1_batch
                           if resp.loss is not None else surrogate.item())
        skipped, lr_halvings, skip_streak = _finish_step(
            opt, loss_value, cfg.stage1_lr, lr_halvings, skip_streak, forced_skip)
        if history is not None:
            history.append({"stage": 1, "iteration": it, "loss": loss_value,
                            "lr": opt.lr, "skipped": skipped,
                            "elapsed": time.perf_counter() - t0})
    return _checkpoint_from(model, opt, 1, cfg.stage1_iters,
                            lr_halvings, skip_streak, 0)


def train_stage2(cfg: TrainConfig, ckpt: Checkpoint | None, provider, *,
                 history: list | None = None) -> Checkpoint:
    """Rasterized stage: extract + shade each step, all parameters trainable.

    ckpt is normally the stage-1 result; None trains "stage 2 from scratch"
    (the ablation baseline). A stage-2 checkpoint resumes mid-stage.
    """
    model = Model(cfg, state=ckpt.params if ckpt else None)
    opt = Adam(model.parameters(), cfg.stage2_lr, cfg.beta1, cfg.beta2,
               cfg.adam_eps)
    start, lr_halvings, skip_streak, empty_skips = 0, 0, 0, 0
    if ckpt is not None and ckpt.stage == 2:
        _restore_optimizer(opt, ckpt)
        start = ckpt.iteration
        lr_halvings, skip_streak = ckpt.lr_halvings, ckpt.skip_streak
        empty_skips = ckpt.empty_skips
    opt.lr = cfg.stage2_lr / (2 ** lr_halvings)

    grid = tetmesh.build_grid(cfg.grid_res, cfg.bound)
    seen = list(cfg.seen_prompts)
    for it in range(start, cfg.stage2_iters):
        t0 = time.perf_counter()
        rng = _step_rng(cfg, 2, it)
        picks = rng.integers(0, len(seen), size=cfg.stage2_batch)
        opt.zero_grad()
        loss_value, forced_skip, step_empties = 0.0, False, 0
        for idx in picks:
            prompt = seen[int(idx)]
            azimuth, elevation, fov = sample_view(cfg, 2, rng)
            cam = orbit_camera(azimuth, elevation,
                               distance=cfg.camera_distance, fov_y=fov,
                               width=cfg.stage2_resolution,
                               height=cfg.stage2_resolution)
            mode, light, bg = _sample_shading(cfg, rng, cam.eye)
            planes = model.planes(prompt)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                mesh = tetmesh.extract(planes, model.heads, grid)
            if mesh.empty:
                step_empties += 1
                continue
            frag = raster.rasterize(mesh.vertices.data, mesh.faces, cam)
            image = raster.shade_fragments(mesh, frag, cam, shading=mode,
                                           light_dir=light, background=bg)
            try:
                resp = provider(GuidanceRequest(
                    prompt=directional_prompt(prompt, azimuth, elevation),
                    image=np.clip(image.data, 0.0, 1.0), stage=2,
                    noise_range=(cfg.stage2_noise_lo, cfg.stage2_noise_hi),
                    guidance_scale=cfg.guidance_scale))
            except GuidanceError:
                forced_skip = True
                break
            surrogate = inject_guidance(image, resp.grad, 1.0 / cfg.stage2_batch)
            T.backward(surrogate)
            loss_value += (resp.loss / cfg.stage2_batch
                           if resp.loss is not None else surrogate.item())
        empty_skips += step_empties
        if step_empties == len(picks):
            forced_skip = True  # nothing rendered this step
        skipped, lr_halvings, skip_streak = _finish_step(
            opt, loss_value, cfg.stage2_lr, lr_halvings, skip_streak, forced_skip)
        if history is not None:
            history.append({"stage": 2, "iteration": it, "loss": loss_value,
                            "lr": opt.lr, "skipped": skipped,
                            "empty_meshes": step_empties,
                            "elapsed": time.perf_counter() - t0})
    return _checkpoint_from(model, opt, 2, cfg.stage2_iters,
                            lr_halvings, skip_streak, empty_skips)


# ---------------------------------------------------------------------------
# inference and evaluation renders
# ---------------------------------------------------------------------------

def infer(prompt: str, source, grid_resolution: int | None = None
          ) -> tuple[tetmesh.TriMesh, float]:
    """Feed-forward text -> mesh; returns (mesh, elapsed seconds).

    The clock covers embedding, triplane generation, and extraction (the
    amortized path), not model construction from a checkpoint file.
    """
    model = source if isinstance(source, Model) else Model.from_checkpoint(source)
    res = grid_resolution or model.cfg.grid_res
    grid = tetmesh.build_grid(res, model.cfg.bound)
    start = time.perf_counter()
    with T.no_grad():
        planes = model.planes(prompt)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mesh = tetmesh.extract(planes, model.heads, grid,
                                   track_gradients=False)
    return mesh, time.perf_counter() - start


def render_view(model: Model, prompt: str, azimuth: float, elevation: float,
                *, stage: int, resolution: int = 128, fov: float = 50.0,
                grid: tetmesh.TetGrid | None = None) -> np.ndarray:
    """Albedo render on white background from one view, for evaluation."""
    cam = orbit_camera(azimuth, elevation, distance=model.cfg.camera_distance,
                       fov_y=fov, width=resolution, height=resolution)
    with T.no_grad():
        planes = model.planes(prompt)
        if stage == 1:
            image, _, _ = volumetric.render_stage1(
                planes, model.heads, model.s, cam,
                n_samples=model.cfg.samples_per_ray, background="white",
                shading="albedo")
            return np.clip(image.data.astype(np.float64), 0.0, 1.0)
        if grid is None:
            grid = tetmesh.build_grid(model.cfg.grid_res, model.cfg.bound)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mesh = tetmesh.extract(planes, model.heads, grid,
                                   track_gradients=False)
        if mesh.empty:
            bg = volumetric.BACKGROUNDS["white"]
            return np.tile(bg, (resolution, resolution, 1)).astype(np.float64)
        frag = raster.rasterize(mesh.vertices.data, mesh.faces, cam)
        image = raster.shade_fragments(mesh, frag, cam, shading="albedo",
                                       background="white")
    return np.clip(image.data.astype(np.float64), 0.0, 1.0)
