"""Second-stage class-conditional generation in a frozen tokenizer's latent space.

The generator is a small class-conditional UNet trained with the
flow-matching v-objective on latents produced by a frozen encoder; labels are
dropped to the null class with a configured probability so classifier-free
guidance works at sampling time. Latent-space noising uses the same schedule
type as pixel space.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .errors import ConfigurationError, DomainError, ShapeError
from .networks import LatentModelConfig, LatentUNet, seeded_build
from .sampler import SolverConfig, euler_decode
from .schedules import NoiseSchedule, add_noise, l2_loss, regression_target
from .training import TrainState, _finite_or_raise


@dataclass(frozen=True)
class GenConfig:
    """Latent generator architecture, training recipe, and sampling defaults."""

    model: LatentModelConfig = field(default_factory=LatentModelConfig)
    latent_shape: tuple[int, int, int] = (4, 8, 8)
    num_classes: int = 2
    cfg_dropout_prob: float = 0.1
    guidance_scale: float = 2.0
    steps: int = 50
    decode_steps: int = 50
    batch_size: int = 32
    total_steps: int = 1000
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    sigma_min: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise ConfigurationError(f"guidance_scale must be nonnegative, got {self.guidance_scale}")
        if not 0.0 <= self.cfg_dropout_prob <= 1.0:
            raise ConfigurationError("cfg_dropout_prob must lie in [0, 1]")
        if self.model.num_classes != self.num_classes:
            raise ConfigurationError("model.num_classes must match num_classes")

    def snapshot(self) -> dict:
        snap = asdict(self)
        snap["model"] = asdict(self.model)
        return snap

    @staticmethod
    def from_snapshot(snap: dict) -> "GenConfig":
        snap = dict(snap)
        model = dict(snap["model"])
        model["channels"] = tuple(model["channels"])
        snap["model"] = LatentModelConfig(**model)
        snap["latent_shape"] = tuple(snap["latent_shape"])
        snap["adam_betas"] = tuple(snap["adam_betas"])
        return GenConfig(**snap)


class LatentGenerator(torch.nn.Module):
    def __init__(self, cfg: GenConfig):
        super().__init__()
        self.cfg = cfg
        self.schedule = NoiseSchedule("flow_matching", cfg.sigma_min)
        self.unet = seeded_build(lambda: LatentUNet(cfg.model, cfg.latent_shape[0]), cfg.seed)
        self.null_class = self.unet.null_class


def init_latent_state(cfg: GenConfig) -> TrainState:
    model = LatentGenerator(cfg)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas, weight_decay=cfg.weight_decay
    )
    generator = torch.Generator().manual_seed(cfg.seed)
    return TrainState(cfg, model, optimizer, generator)


def latent_train_step(state: TrainState, z_batch: torch.Tensor, labels: torch.Tensor) -> dict:
    """Flow-matching v-loss on latents with per-sample label dropout."""
    cfg: GenConfig = state.cfg
    model: LatentGenerator = state.model
    n = z_batch.shape[0]
    if bool((labels < 0).any()) or bool((labels >= cfg.num_classes).any()):
        raise DomainError(f"labels must lie in [0, {cfg.num_classes})")
    drop = torch.rand(n, generator=state.generator) < cfg.cfg_dropout_prob
    class_ids = torch.where(drop, torch.full_like(labels, model.null_class), labels)
    t = torch.rand(n, generator=state.generator)
    eps = torch.randn(z_batch.shape, generator=state.generator)
    z_t = add_noise(z_batch, eps, model.schedule, t)
    target = regression_target("v_prediction", z_batch, eps, model.schedule, t)
    pred = model.unet(z_t, t, class_ids)
    loss = l2_loss(pred, target)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    _finite_or_raise(loss, state, t, {})
    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.step += 1
    return {
        "step": state.step,
        "components": {"diffusion": float(loss.detach())},
        "class_ids": class_ids.tolist(),
    }


def fit_latent(
    cfg: GenConfig,
    latents: torch.Tensor,
    labels: torch.Tensor,
    checkpoint_every: int | None = None,
    out_dir=None,
    state: TrainState | None = None,
) -> tuple[TrainState, list[dict]]:
    """Training loop over a fixed tensor of frozen-encoder latents."""
    if latents.shape[0] == 0:
        raise ConfigurationError("latent dataset is empty")
    if tuple(latents.shape[1:]) != cfg.latent_shape:
        raise ConfigurationError(
            f"latents have shape {tuple(latents.shape[1:])}, config expects {cfg.latent_shape}"
        )
    state = state or init_latent_state(cfg)
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.ndjson"

    def save(step):
        if out_dir is not None:
            save_latent_state(state, Path(out_dir) / f"checkpoint_{step:06d}.ckpt")

    records = []
    if cfg.total_steps == 0:
        save(0)
        return state, records
    while state.step < cfg.total_steps:
        idx = torch.randint(0, latents.shape[0], (cfg.batch_size,), generator=state.generator)
        record = latent_train_step(state, latents[idx], labels[idx])
        records.append(record)
        if log_path is not None:
            from .reporting import append_ndjson

            append_ndjson(
                {"step": record["step"], "components": record["components"], "wall_time": time.time()},
                log_path,
            )
        if checkpoint_every and state.step % checkpoint_every == 0:
            save(state.step)
        elif state.step == cfg.total_steps:
            save(state.step)
    return state, records


def cfg_combine(v_uncond: torch.Tensor, v_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """Classifier-free guidance: v_uncond + scale * (v_cond - v_uncond)."""
    if v_uncond.shape != v_cond.shape:
        raise ShapeError(
            f"guidance branch shapes differ: {tuple(v_uncond.shape)} vs {tuple(v_cond.shape)}"
        )
    return v_uncond + scale * (v_cond - v_uncond)


def generate_latents(
    model: LatentGenerator, class_id: int, n: int, cfg: GenConfig, base_seed: int | None = None
) -> tuple[torch.Tensor, list[int]]:
    """Integrate the guided latent field from noise; returns (latents, seeds)."""
    base_seed = cfg.seed if base_seed is None else base_seed
    seeds = [base_seed + i for i in range(n)]
    if n == 0:
        return torch.empty((0, *cfg.latent_shape)), seeds
    noise = torch.stack(
        [torch.randn(cfg.latent_shape, generator=torch.Generator().manual_seed(s)) for s in seeds]
    )
    z = noise
    dt = 1.0 / cfg.steps
    scale = cfg.guidance_scale
    with torch.no_grad():
        for k in range(cfg.steps):
            t = 1.0 - k * dt
            v_uncond = model.unet(z, t, model.null_class)
            if scale == 0.0:
                v = v_uncond
            else:
                v_cond = model.unet(z, t, class_id)
                v = cfg_combine(v_uncond, v_cond, scale)
            z = z - dt * v
    return z, seeds


def generate(
    model: LatentGenerator,
    tokenizer,
    class_id: int,
    n: int,
    cfg: GenConfig,
    base_seed: int | None = None,
) -> tuple[torch.Tensor, dict]:
    """Sample n images of one class: guided latent flow, then pixel decoding."""
    if cfg.latent_shape[0] != tokenizer.decoder.latent_channels:
        raise ConfigurationError(
            f"generator latent channels {cfg.latent_shape[0]} do not match "
            f"tokenizer latent channels {tokenizer.decoder.latent_channels}"
        )
    base_seed = cfg.seed if base_seed is None else base_seed
    z, seeds = generate_latents(model, class_id, n, cfg, base_seed)
    f = tokenizer.downsample_factor
    shape = (3, cfg.latent_shape[1] * f, cfg.latent_shape[2] * f)
    decode_seed = base_seed + n
    if n == 0:
        images = torch.empty((0, *shape))
    else:
        solver = SolverConfig(steps=cfg.decode_steps, seed=decode_seed)
        images = euler_decode(tokenizer.decoder, z, solver, shape, tokenizer.schedule, tokenizer.ptype)
    manifest = {
        "class_id": class_id,
        "guidance_scale": cfg.guidance_scale,
        "latent_steps": cfg.steps,
        "decode_steps": cfg.decode_steps,
        "decode_seed": decode_seed,
        "samples": [{"index": i, "seed": s} for i, s in enumerate(seeds)],
    }
    return images, manifest


# --- persistence ---------------------------------------------------------


def save_latent_state(state: TrainState, path) -> None:
    from .training import _optimizer_arrays

    arrays = {f"model.{k}": v.detach().numpy() for k, v in state.model.state_dict().items()}
    arrays.update(_optimizer_arrays(state.optimizer, list(state.model.named_parameters()), "opt"))
    arrays["rng.state"] = state.generator.get_state().numpy()
    meta = {"artifact": "latent_generator", "step": state.step, "config": state.cfg.snapshot()}
    ckpt.save_checkpoint(path, arrays, meta)


def load_latent_state(path) -> TrainState:
    from .training import _restore_optimizer

    arrays, meta = ckpt.load_checkpoint(path)
    cfg = GenConfig.from_snapshot(meta["config"])
    state = init_latent_state(cfg)
    model_state = {
        k[len("model.") :]: torch.from_numpy(v.copy())
        for k, v in arrays.items()
        if k.startswith("model.")
    }
    state.model.load_state_dict(model_state)
    _restore_optimizer(state.optimizer, list(state.model.named_parameters()), arrays, "opt")
    state.generator.set_state(torch.from_numpy(arrays["rng.state"].copy()))
    state.step = int(meta["step"])
    return state


def load_latent_generator(path) -> tuple[LatentGenerator, dict]:
    state = load_latent_state(path)
    state.model.eval()
    meta = {"step": state.step, "config": state.cfg.snapshot(), "model_id": ckpt.checkpoint_id(path)}
    return state.model, meta
