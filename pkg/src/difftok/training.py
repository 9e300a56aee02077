"""Tokenizer training: diffusion objective, perceptual variant, GAN baseline.

The diffusion tokenizer trains encoder and decoder jointly from scratch with
a single L2 loss between the decoder output and the regression target at a
per-sample uniform time. With probability ``noise_sync_prob`` a sample's
latent is replaced by its noised version z_tau and the denoising time is
resampled from [tau, 1], which smooths the latent's own corruption path for
downstream latent-space generators.

The GAN baseline uses a deterministic decoder trained with
L1 + perceptual + 0.5 * adaptive * hinge-GAN, the adversarial term gated
behind a warmup and balanced by the ratio of gradient norms at the decoder's
last layer.

Every stochastic draw in a run flows through one generator owned by the
train state, so a run is fully reproducible from (config, seed) and resumes
bit-exactly from a checkpoint.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .data import ImageDataset
from .errors import ConfigurationError, TrainingDiverged
from .features import RandomFeatureNet, perceptual_distance, perceptual_net
from .networks import (
    CondUNet,
    Encoder,
    EncoderConfig,
    DecoderConfig,
    GanDecoder,
    PatchDiscriminator,
    seeded_build,
)
from .schedules import (
    OBJECTIVES,
    add_noise,
    alpha_sigma,
    l2_loss,
    objective_parts,
    regression_target,
    to_sample_prediction,
)

ADAPTIVE_WEIGHT_MAX = 1e4


@dataclass(frozen=True)
class TrainConfig:
    """Everything a tokenizer training run depends on besides the dataset."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    objective: str = "flow_matching_v"
    trainer: str = "diffusion"  # "diffusion" | "gan"
    sigma_min: float = 1e-5
    noise_sync_prob: float = 0.1
    perceptual_weight: float = 0.0
    batch_size: int = 16
    total_steps: int = 1000
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    adam_betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    freeze_encoder: bool = False
    gan_warmup_fraction: float = 1.0 / 6.0
    disc_base_width: int = 32
    augment_flip: bool = True
    repeat_data: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"unknown objective {self.objective!r}")
        if self.trainer not in ("diffusion", "gan"):
            raise ConfigurationError(f"unknown trainer {self.trainer!r}")
        if not 0.0 <= self.noise_sync_prob <= 1.0:
            raise ConfigurationError(f"noise_sync_prob must lie in [0, 1], got {self.noise_sync_prob}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.perceptual_weight < 0:
            raise ConfigurationError("perceptual_weight must be nonnegative")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ConfigurationError("batch_size must be >= 1 and total_steps >= 0")

    @property
    def gan_warmup_steps(self) -> int:
        return int(round(self.gan_warmup_fraction * self.total_steps))

    def snapshot(self) -> dict:
        snap = asdict(self)
        snap["encoder"] = asdict(self.encoder)
        snap["decoder"] = asdict(self.decoder)
        return snap

    @staticmethod
    def from_snapshot(snap: dict) -> "TrainConfig":
        snap = dict(snap)
        snap["encoder"] = EncoderConfig(**snap["encoder"])
        dec = dict(snap["decoder"])
        dec["channels"] = tuple(dec["channels"])
        snap["decoder"] = DecoderConfig(**dec)
        snap["adam_betas"] = tuple(snap["adam_betas"])
        return TrainConfig(**snap)


class DiffusionTokenizer(nn.Module):
    """Encoder plus conditional diffusion decoder, built from one seed."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.schedule, self.ptype = objective_parts(cfg.objective, cfg.sigma_min)
        self.downsample_factor = cfg.encoder.downsample_factor

        def build():
            return Encoder(cfg.encoder), CondUNet(
                cfg.decoder, cfg.encoder.latent_channels, cfg.encoder.downsample_factor
            )

        self.encoder, self.decoder = seeded_build(build, cfg.seed)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)


class GanTokenizer(nn.Module):
    """Encoder plus deterministic decoder and patch discriminator."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.downsample_factor = cfg.encoder.downsample_factor

        def build():
            return (
                Encoder(cfg.encoder),
                GanDecoder(cfg.encoder),
                PatchDiscriminator(cfg.disc_base_width),
            )

        self.encoder, self.decoder, self.discriminator = seeded_build(build, cfg.seed)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)


@dataclass
class TrainState:
    """Model parameters, optimizer moments, step counter, and RNG state."""

    cfg: TrainConfig
    model: nn.Module
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    step: int = 0
    disc_optimizer: torch.optim.Optimizer | None = None
    perceptual: RandomFeatureNet | None = None


def init_train_state(cfg: TrainConfig) -> TrainState:
    if cfg.trainer == "gan":
        model = GanTokenizer(cfg)
        gen_params = list(model.decoder.parameters())
        if not cfg.freeze_encoder:
            gen_params = list(model.encoder.parameters()) + gen_params
        else:
            model.encoder.requires_grad_(False)
        optimizer = torch.optim.AdamW(
            gen_params, lr=cfg.learning_rate, betas=cfg.adam_betas, weight_decay=cfg.weight_decay
        )
        disc_optimizer = torch.optim.AdamW(
            model.discriminator.parameters(),
            lr=cfg.learning_rate,
            betas=cfg.adam_betas,
            weight_decay=cfg.weight_decay,
        )
        perceptual = perceptual_net()
    else:
        model = DiffusionTokenizer(cfg)
        params = list(model.decoder.parameters())
        if not cfg.freeze_encoder:
            params = list(model.encoder.parameters()) + params
        else:
            model.encoder.requires_grad_(False)
        optimizer = torch.optim.AdamW(
            params, lr=cfg.learning_rate, betas=cfg.adam_betas, weight_decay=cfg.weight_decay
        )
        disc_optimizer = None
        perceptual = perceptual_net() if cfg.perceptual_weight > 0 else None
    generator = torch.Generator().manual_seed(cfg.seed)
    return TrainState(cfg, model, optimizer, generator, 0, disc_optimizer, perceptual)


def draw_sync_times(n: int, prob: float, generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-sample noise-sync coins, sync times tau, and denoising times t.

    Samples whose coin fires get tau ~ U[0, 1] and t ~ U[tau, 1]; the rest
    keep tau = 0, so t is unconstrained uniform on [0, 1].
    """
    coins = torch.rand(n, generator=generator) < prob
    tau_raw = torch.rand(n, generator=generator)
    u = torch.rand(n, generator=generator)
    tau = torch.where(coins, tau_raw, torch.zeros_like(tau_raw))
    t = tau + u * (1 - tau)
    return coins, tau, t


def noise_sync_augment(z: torch.Tensor, rng: torch.Generator, schedule) -> tuple[torch.Tensor, torch.Tensor]:
    """Noise a latent along the pixel-space schedule at a uniform random time.

    Batched input draws an independent tau per sample; returns (z_tau, tau).
    """
    batched = z.ndim == 4
    n = z.shape[0] if batched else 1
    tau = torch.rand(n, generator=rng)
    eps = torch.randn(z.shape if batched else (1, *z.shape), generator=rng)
    tb = tau.reshape(-1, 1, 1, 1)
    alpha, sigma = alpha_sigma(schedule, tb)
    z_tau = alpha * (z if batched else z[None]) + sigma * eps
    if not batched:
        return z_tau[0], tau[0]
    return z_tau, tau


def _finite_or_raise(loss: torch.Tensor, state: TrainState, t: torch.Tensor, extra: dict) -> None:
    if torch.isfinite(loss):
        return
    grad_norms = {}
    for name, module in state.model.named_children():
        sq = sum(float(p.grad.pow(2).sum()) for p in module.parameters() if p.grad is not None)
        grad_norms[name] = math.sqrt(sq)
    raise TrainingDiverged(
        f"non-finite loss {float(loss)} at step {state.step + 1}",
        step=state.step + 1,
        diagnostics={"t": [round(float(v), 6) for v in t], "grad_norms": grad_norms, **extra},
    )


def _diffusion_step(state: TrainState, batch: torch.Tensor) -> dict:
    cfg = state.cfg
    model: DiffusionTokenizer = state.model
    n = batch.shape[0]
    if cfg.freeze_encoder:
        with torch.no_grad():
            z = model.encode(batch)
    else:
        z = model.encode(batch)

    # Fixed draw order so the perceptual term never shifts the RNG stream.
    coins = torch.rand(n, generator=state.generator) < cfg.noise_sync_prob
    tau_raw = torch.rand(n, generator=state.generator)
    eps_z = torch.randn(z.shape, generator=state.generator)
    u = torch.rand(n, generator=state.generator)
    eps_x = torch.randn(batch.shape, generator=state.generator)

    tau = torch.where(coins, tau_raw, torch.zeros_like(tau_raw))
    gate = coins.float().reshape(-1, 1, 1, 1)
    alpha_tau, sigma_tau = alpha_sigma(model.schedule, tau.reshape(-1, 1, 1, 1))
    z_used = (1 - gate) * z + gate * (alpha_tau * z + sigma_tau * eps_z)
    t = tau + u * (1 - tau)

    x_t = add_noise(batch, eps_x, model.schedule, t)
    target = regression_target(model.ptype, batch, eps_x, model.schedule, t)
    pred = model.decoder(x_t, t, z_used)
    diffusion = l2_loss(pred, target)
    components = {"diffusion": float(diffusion.detach())}
    total = diffusion
    if cfg.perceptual_weight > 0:
        x_bar = to_sample_prediction(pred, x_t, model.schedule, t, model.ptype)
        perceptual = perceptual_distance(state.perceptual, x_bar, batch)
        total = diffusion + cfg.perceptual_weight * perceptual
        components["perceptual"] = float(perceptual.detach())

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    _finite_or_raise(total, state, t, {"tau": [round(float(v), 6) for v in tau]})
    trainable = [p for g in state.optimizer.param_groups for p in g["params"]]
    torch.nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
    state.optimizer.step()
    state.step += 1
    return {"step": state.step, "components": components}


def _gan_step(state: TrainState, batch: torch.Tensor) -> dict:
    cfg = state.cfg
    model: GanTokenizer = state.model
    if cfg.freeze_encoder:
        with torch.no_grad():
            z = model.encode(batch)
    else:
        z = model.encode(batch)
    x_hat = model.decoder(z)
    l1 = (x_hat - batch).abs().mean()
    perceptual = perceptual_distance(state.perceptual, x_hat, batch)
    rec = l1 + perceptual
    gan_active = state.step >= cfg.gan_warmup_steps
    components = {"l1": float(l1.detach()), "perceptual": float(perceptual.detach()), "gan_g": 0.0, "gan_d": 0.0}
    total = rec
    if gan_active:
        gan_g = -model.discriminator(x_hat).mean()
        last = model.decoder.out_proj.weight
        rec_grad = torch.autograd.grad(rec, last, retain_graph=True)[0].norm()
        gan_grad = torch.autograd.grad(gan_g, last, retain_graph=True)[0].norm()
        adaptive = float(rec_grad / (gan_grad + 1e-8))
        if not math.isfinite(adaptive):
            warnings.warn(f"non-finite adaptive GAN weight at step {state.step + 1}; clamping")
            adaptive = 0.0
        adaptive = min(max(adaptive, 0.0), ADAPTIVE_WEIGHT_MAX)
        total = rec + 0.5 * adaptive * gan_g
        components["gan_g"] = float(gan_g.detach())
        components["gan_adaptive"] = adaptive

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    _finite_or_raise(total, state, torch.zeros(1), {})
    trainable = [p for g in state.optimizer.param_groups for p in g["params"]]
    torch.nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
    state.optimizer.step()

    if gan_active:
        d_real = model.discriminator(batch)
        d_fake = model.discriminator(x_hat.detach())
        d_loss = torch.relu(1.0 - d_real).mean() + torch.relu(1.0 + d_fake).mean()
        state.disc_optimizer.zero_grad(set_to_none=True)
        d_loss.backward()
        state.disc_optimizer.step()
        components["gan_d"] = float(d_loss.detach())

    state.step += 1
    return {"step": state.step, "components": components}


def train_step(state: TrainState, batch: torch.Tensor) -> dict:
    """One optimizer update; returns the loss record for this step."""
    if state.cfg.trainer == "gan":
        return _gan_step(state, batch)
    return _diffusion_step(state, batch)


def draw_batch(state: TrainState, dataset: ImageDataset) -> torch.Tensor:
    """Sample a batch (with replacement) and apply flip augmentation."""
    cfg = state.cfg
    if cfg.repeat_data:
        idx = torch.randint(0, len(dataset), (cfg.batch_size,), generator=state.generator)
    else:
        start = state.step * cfg.batch_size
        idx = torch.arange(start, start + cfg.batch_size)
    batch = dataset.images[idx]
    if cfg.augment_flip:
        flips = torch.rand(cfg.batch_size, generator=state.generator) < 0.5
        batch = torch.where(flips.reshape(-1, 1, 1, 1), batch.flip(-1), batch)
    return batch


def checkpoint_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"checkpoint_{step:06d}.ckpt"


def fit(
    cfg: TrainConfig,
    dataset: ImageDataset,
    checkpoint_every: int | None = None,
    out_dir=None,
    state: TrainState | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run the training loop; returns the final state and loss records.

    When ``out_dir`` is given, loss records are appended to
    ``train_log.ndjson`` (one JSON object per step, with wall time) and
    checkpoints are written every ``checkpoint_every`` steps plus at the end.
    Resuming from a loaded ``state`` continues the identical trajectory.
    """
    if len(dataset) == 0:
        raise ConfigurationError("dataset is empty")
    if not cfg.repeat_data and cfg.total_steps * cfg.batch_size > len(dataset):
        raise ConfigurationError(
            f"dataset of {len(dataset)} images exhausted before {cfg.total_steps} steps "
            f"of batch {cfg.batch_size} with repeat_data disabled"
        )
    state = state or init_train_state(cfg)
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.ndjson"

    def save(step):
        if out_dir is not None:
            save_train_state(state, checkpoint_path(out_dir, step))

    records = []
    if cfg.total_steps == 0:
        save(0)
        return state, records
    while state.step < cfg.total_steps:
        batch = draw_batch(state, dataset)
        record = train_step(state, batch)
        records.append(record)
        if log_path is not None:
            from .reporting import append_ndjson

            append_ndjson({**record, "wall_time": time.time()}, log_path)
        if checkpoint_every and state.step % checkpoint_every == 0:
            save(state.step)
        elif state.step == cfg.total_steps:
            save(state.step)
    return state, records


# --- persistence ---------------------------------------------------------


def _optimizer_arrays(optimizer, named_params, prefix: str) -> dict[str, np.ndarray]:
    arrays = {}
    step = None
    for name, param in named_params:
        opt_state = optimizer.state.get(param)
        if not opt_state:
            continue
        arrays[f"{prefix}.{name}.exp_avg"] = opt_state["exp_avg"].numpy()
        arrays[f"{prefix}.{name}.exp_avg_sq"] = opt_state["exp_avg_sq"].numpy()
        step = float(opt_state["step"])
    if step is not None:
        arrays[f"{prefix}.step"] = np.asarray([step], dtype=np.float64)
    return arrays


def _restore_optimizer(optimizer, named_params, arrays, prefix: str) -> None:
    key = f"{prefix}.step"
    if key not in arrays:
        return
    step = torch.tensor(float(arrays[key][0]))
    for name, param in named_params:
        avg_key = f"{prefix}.{name}.exp_avg"
        if avg_key not in arrays:
            continue
        optimizer.state[param] = {
            "step": step.clone(),
            "exp_avg": torch.from_numpy(arrays[avg_key].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"{prefix}.{name}.exp_avg_sq"].copy()),
        }


def save_train_state(state: TrainState, path) -> None:
    arrays = {f"model.{k}": v.detach().numpy() for k, v in state.model.state_dict().items()}
    named = list(state.model.named_parameters())
    arrays.update(_optimizer_arrays(state.optimizer, named, "opt"))
    if state.disc_optimizer is not None:
        arrays.update(_optimizer_arrays(state.disc_optimizer, named, "dopt"))
    arrays["rng.state"] = state.generator.get_state().numpy()
    meta = {
        "artifact": f"{state.cfg.trainer}_tokenizer",
        "step": state.step,
        "config": state.cfg.snapshot(),
    }
    ckpt.save_checkpoint(path, arrays, meta)


def load_train_state(path) -> TrainState:
    arrays, meta = ckpt.load_checkpoint(path)
    cfg = TrainConfig.from_snapshot(meta["config"])
    state = init_train_state(cfg)
    model_state = {
        k[len("model.") :]: torch.from_numpy(v.copy())
        for k, v in arrays.items()
        if k.startswith("model.")
    }
    state.model.load_state_dict(model_state)
    named = list(state.model.named_parameters())
    _restore_optimizer(state.optimizer, named, arrays, "opt")
    if state.disc_optimizer is not None:
        _restore_optimizer(state.disc_optimizer, named, arrays, "dopt")
    state.generator.set_state(torch.from_numpy(arrays["rng.state"].copy()))
    state.step = int(meta["step"])
    return state


def load_tokenizer(path) -> tuple[nn.Module, dict]:
    """Load just the model (for decoding/evaluation) plus checkpoint metadata."""
    state = load_train_state(path)
    state.model.eval()
    meta = {"step": state.step, "config": state.cfg.snapshot(), "model_id": ckpt.checkpoint_id(path)}
    return state.model, meta
