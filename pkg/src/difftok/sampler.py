"""Deterministic Euler ODE decoding from latents.

Decoding starts from standard normal noise at t = 1 (seeded from the solver
config, never global state) and takes uniform Euler steps toward t = 0 on the
grid t_k = 1 - k / steps, evaluating the network at the left endpoint of each
interval. For the flow-matching v-objective the network output is the ODE
drift itself; other objectives convert the prediction to (x_bar, eps_bar) and
integrate dx/dt = alpha'(t) x_bar + sigma'(t) eps_bar.

Outputs are returned unclamped; clamping to the pixel range happens only at
serialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError
from .schedules import NoiseSchedule, alpha_sigma_dot, to_sample_and_noise

# Conversion times are clamped inside (0, 1) for objectives whose coefficient
# matrix is singular at an endpoint (e.g. eps-prediction at t = 1).
CONVERSION_TIME_CLAMP = 1e-3


@dataclass(frozen=True)
class SolverConfig:
    steps: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError(f"solver needs at least 1 step, got {self.steps}")


def euler_decode(
    decoder,
    z: torch.Tensor,
    cfg: SolverConfig,
    shape: tuple[int, ...],
    schedule: NoiseSchedule | None = None,
    ptype: str = "v_prediction",
) -> torch.Tensor:
    """Integrate the decoder's field from noise at t = 1 down to t = 0.

    ``decoder`` is any callable (x_t, t, z) -> prediction. ``shape`` is the
    per-sample output shape, e.g. (3, H, W); a batched z yields a batch.
    """
    schedule = schedule or NoiseSchedule("flow_matching")
    batched = z.ndim == 4
    n = z.shape[0] if batched else 1
    gen = torch.Generator().manual_seed(cfg.seed)
    x = torch.randn((n, *shape), generator=gen)
    if not batched:
        x = x[0]
    dt = 1.0 / cfg.steps
    fm_v = schedule.kind == "flow_matching" and ptype == "v_prediction"
    with torch.no_grad():
        for k in range(cfg.steps):
            t = 1.0 - k * dt
            pred = decoder(x, t, z)
            if fm_v:
                x = x - dt * pred
            else:
                t_eval = min(max(t, CONVERSION_TIME_CLAMP), 1.0 - CONVERSION_TIME_CLAMP)
                x_bar, eps_bar = to_sample_and_noise(pred, x, schedule, t_eval, ptype)
                a_dot, s_dot = alpha_sigma_dot(schedule, t_eval)
                x = x - dt * (a_dot * x_bar + s_dot * eps_bar)
    return x


def reconstruct(model, images: torch.Tensor, cfg: SolverConfig) -> torch.Tensor:
    """Encode then decode; preserves the input shape."""
    with torch.no_grad():
        z = model.encode(images)
    shape = tuple(images.shape[-3:])
    return euler_decode(model.decoder, z, cfg, shape, model.schedule, model.ptype)


def steps_sweep(
    model,
    dataset,
    steps_list: list[int],
    seed: int = 0,
    subset_size: int = 64,
    batch_size: int = 32,
    metric: str = "rfid",
) -> list[dict]:
    """Reconstruction metric per decoding step count, with fixed seeds per row.

    Returns rows of {"steps", "value"} using the desk Frechet reconstruction
    distance (``metric="rfid"``) or mean PSNR (``metric="psnr"``).
    """
    from . import evaluation

    if not steps_list:
        raise ConfigurationError("steps_list must be non-empty")
    if sorted(steps_list) != list(steps_list):
        raise ConfigurationError("steps_list must be ascending")
    rows = []
    for steps in steps_list:
        solver = SolverConfig(steps=steps, seed=seed)
        if metric == "rfid":
            value = evaluation.rfid(
                lambda batch: reconstruct(model, batch, solver),
                dataset,
                subset_size=min(subset_size, len(dataset)),
                seed=seed,
                batch_size=batch_size,
            )
        elif metric == "psnr":
            subset = evaluation.eval_subset(dataset, min(subset_size, len(dataset)), seed)
            values = []
            for start in range(0, len(subset), batch_size):
                batch = subset.images[start : start + batch_size]
                rec = reconstruct(model, batch, solver)
                values.extend(evaluation.psnr(rec[i], batch[i]) for i in range(batch.shape[0]))
            value = sum(values) / len(values)
        else:
            raise ConfigurationError(f"unknown sweep metric {metric!r}")
        rows.append({"steps": steps, "value": value})
    return rows
