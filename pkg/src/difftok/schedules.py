"""Continuous-time noise schedules and the algebra built on them.

The forward corruption of data x0 at time t in [0, 1] is

    x_t = alpha_t * x0 + sigma_t * eps,    eps ~ N(0, I),

with alpha decreasing from 1 and sigma increasing to 1. Two schedules are
provided:

    flow_matching:  alpha_t = 1 - t,        sigma_t = sigma_min + t * (1 - sigma_min)
    cosine:         alpha_t = cos(pi t / 2), sigma_t = sin(pi t / 2)

The log signal-to-noise ratio is lambda_t = log(alpha_t^2 / sigma_t^2),
strictly decreasing in t. A training objective is characterised by a
prediction type ("v_prediction" or "eps_prediction") whose regression target
is A_t * x0 + B_t * eps; network outputs convert back to a sample prediction
x_bar through the 2x2 system [[alpha, sigma], [A, B]] @ (x_bar, eps_bar) =
(x_t, pred).

An objective expressed as a weighting w over lambda is an evidence-lower-bound
maximizer exactly when t -> w(lambda_t) is non-decreasing;
``elbo_condition_check`` tests this numerically and ``effective_weighting``
derives w for the uniform-time objectives used here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import torch

from .errors import ConfigurationError, DomainError, EvaluationError, ShapeError, SingularityError

Scalar = Union[float, torch.Tensor]

SCHEDULE_KINDS = ("flow_matching", "cosine")
PREDICTION_TYPES = ("v_prediction", "eps_prediction")

# Interior clamp for lambda/derivative grids; lambda diverges at the endpoints.
INTERIOR_CLAMP = 1e-4
# A central-difference estimate above -ELBO_DERIVATIVE_TOL counts as nonnegative.
ELBO_DERIVATIVE_TOL = 1e-6
# |alpha*B - sigma*A| below this is treated as a singular conversion.
CONVERSION_SINGULAR_TOL = 1e-8


@dataclass(frozen=True)
class NoiseSchedule:
    """Maps time t to the corruption coefficients (alpha_t, sigma_t)."""

    kind: str
    sigma_min: float = 1e-5

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if self.sigma_min < 0:
            raise DomainError(f"sigma_min must be nonnegative, got {self.sigma_min}")


def flow_matching_schedule(sigma_min: float = 1e-5) -> NoiseSchedule:
    return NoiseSchedule("flow_matching", sigma_min)


def cosine_schedule() -> NoiseSchedule:
    return NoiseSchedule("cosine")


# Training objectives: name -> (schedule kind, prediction type). All three run
# through the same training step; only the target/schedule differ.
OBJECTIVES = {
    "flow_matching_v": ("flow_matching", "v_prediction"),
    "cosine_v": ("cosine", "v_prediction"),
    "cosine_eps": ("cosine", "eps_prediction"),
}


def objective_parts(objective: str, sigma_min: float = 1e-5) -> tuple[NoiseSchedule, str]:
    """Resolve an objective name to its (schedule, prediction type) pair."""
    try:
        kind, ptype = OBJECTIVES[objective]
    except KeyError:
        raise ConfigurationError(
            f"unknown objective {objective!r}; expected one of {sorted(OBJECTIVES)}"
        ) from None
    return NoiseSchedule(kind, sigma_min), ptype


def _check_t(t: Scalar) -> None:
    if isinstance(t, torch.Tensor):
        if not bool(((t >= 0) & (t <= 1)).all()):
            raise DomainError(f"time must lie in [0, 1], got range [{float(t.min())}, {float(t.max())}]")
    elif not 0.0 <= float(t) <= 1.0:
        raise DomainError(f"time must lie in [0, 1], got {t}")


def alpha_sigma(schedule: NoiseSchedule, t: Scalar) -> tuple[Scalar, Scalar]:
    """Corruption coefficients (alpha_t, sigma_t) for scalar or tensor t."""
    _check_t(t)
    if schedule.kind == "flow_matching":
        s = schedule.sigma_min
        return 1.0 - t, s + t * (1.0 - s)
    if isinstance(t, torch.Tensor):
        half = math.pi / 2 * t
        return torch.cos(half), torch.sin(half)
    return math.cos(math.pi / 2 * t), math.sin(math.pi / 2 * t)


def alpha_sigma_dot(schedule: NoiseSchedule, t: Scalar) -> tuple[Scalar, Scalar]:
    """Time derivatives (d alpha/dt, d sigma/dt)."""
    _check_t(t)
    if schedule.kind == "flow_matching":
        one = torch.ones_like(t) if isinstance(t, torch.Tensor) else 1.0
        return -one, (1.0 - schedule.sigma_min) * one
    alpha, sigma = alpha_sigma(schedule, t)
    return -(math.pi / 2) * sigma, (math.pi / 2) * alpha


def log_snr(schedule: NoiseSchedule, t: Scalar) -> Scalar:
    """Log signal-to-noise ratio lambda_t = log(alpha_t^2 / sigma_t^2)."""
    alpha, sigma = alpha_sigma(schedule, t)
    # cos(pi/2) evaluates to ~6e-17, so "zero" means below rounding noise
    tiny = 1e-12
    if isinstance(t, torch.Tensor):
        if bool((alpha <= tiny).any()) or bool((sigma <= tiny).any()):
            raise SingularityError("log-SNR is singular where alpha or sigma vanishes")
        return 2.0 * (torch.log(alpha) - torch.log(sigma))
    if alpha <= tiny or sigma <= tiny:
        raise SingularityError(f"log-SNR is singular at t={t} (alpha={alpha}, sigma={sigma})")
    return 2.0 * (math.log(alpha) - math.log(sigma))


def _broadcast_like(t: Scalar, x: torch.Tensor) -> Scalar:
    """Reshape a per-sample (B,) time vector so it broadcasts against (B, ...)."""
    if isinstance(t, torch.Tensor) and t.ndim == 1 and x.ndim > 1:
        return t.reshape(-1, *([1] * (x.ndim - 1)))
    return t


def add_noise(x0: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule, t: Scalar) -> torch.Tensor:
    """Forward corruption x_t = alpha_t * x0 + sigma_t * eps."""
    if x0.shape != eps.shape:
        raise ShapeError(f"data/noise shapes differ: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    alpha, sigma = alpha_sigma(schedule, _broadcast_like(t, x0))
    return alpha * x0 + sigma * eps


def target_coefficients(ptype: str, schedule: NoiseSchedule, t: Scalar) -> tuple[Scalar, Scalar]:
    """Coefficients (A_t, B_t) of the regression target A_t * x0 + B_t * eps."""
    if ptype == "eps_prediction":
        one = torch.ones_like(t) if isinstance(t, torch.Tensor) else 1.0
        return 0.0 * one, one
    if ptype == "v_prediction":
        if schedule.kind == "flow_matching":
            one = torch.ones_like(t) if isinstance(t, torch.Tensor) else 1.0
            return -one, (1.0 - schedule.sigma_min) * one
        alpha, sigma = alpha_sigma(schedule, t)
        return -sigma, alpha
    raise ConfigurationError(f"unsupported prediction type {ptype!r}; expected one of {PREDICTION_TYPES}")


def regression_target(
    ptype: str, x0: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule, t: Scalar
) -> torch.Tensor:
    """Regression target for the given prediction type and schedule."""
    if x0.shape != eps.shape:
        raise ShapeError(f"data/noise shapes differ: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    a, b = target_coefficients(ptype, schedule, _broadcast_like(t, x0))
    return a * x0 + b * eps


def sample_conversion_matrix(schedule: NoiseSchedule, ptype: str, t: float) -> list[list[float]]:
    """Inverse of [[alpha, sigma], [A, B]]; its rows recover (x_bar, eps_bar).

    For the flow-matching v-objective the matrix is [[1, -t], [1, 1 - t]]
    exactly (unit determinant in the sigma_min -> 0 convention). Other
    pairings invert the exact coefficient matrix.
    """
    if schedule.kind == "flow_matching" and ptype == "v_prediction":
        return [[1.0, -float(t)], [1.0, 1.0 - float(t)]]
    alpha, sigma = alpha_sigma(schedule, float(t))
    a, b = target_coefficients(ptype, schedule, float(t))
    det = alpha * b - sigma * a
    if abs(det) < CONVERSION_SINGULAR_TOL:
        raise SingularityError(
            f"conversion matrix singular at t={t} for {ptype}/{schedule.kind} (det={det:.3e})"
        )
    return [[b / det, -sigma / det], [-a / det, alpha / det]]


def to_sample_prediction(
    pred: torch.Tensor, x_t: torch.Tensor, schedule: NoiseSchedule, t: Scalar, ptype: str
) -> torch.Tensor:
    """Sample prediction x_bar implied by a network output.

    Flow matching with v-prediction uses x_bar = x_t - t * pred; other
    pairings solve the 2x2 coefficient system.
    """
    if pred.shape != x_t.shape:
        raise ShapeError(f"prediction/x_t shapes differ: {tuple(pred.shape)} vs {tuple(x_t.shape)}")
    tb = _broadcast_like(t, x_t)
    if schedule.kind == "flow_matching" and ptype == "v_prediction":
        return x_t - tb * pred
    alpha, sigma = alpha_sigma(schedule, tb)
    a, b = target_coefficients(ptype, schedule, tb)
    det = alpha * b - sigma * a
    det_min = float(det.abs().min()) if isinstance(det, torch.Tensor) else abs(det)
    if det_min < CONVERSION_SINGULAR_TOL:
        raise SingularityError(f"conversion matrix singular at t={t} for {ptype}/{schedule.kind}")
    return (b * x_t - sigma * pred) / det


def to_sample_and_noise(
    pred: torch.Tensor, x_t: torch.Tensor, schedule: NoiseSchedule, t: Scalar, ptype: str
) -> tuple[torch.Tensor, torch.Tensor]:
    """Both rows of the conversion: the implied (x_bar, eps_bar) pair."""
    if pred.shape != x_t.shape:
        raise ShapeError(f"prediction/x_t shapes differ: {tuple(pred.shape)} vs {tuple(x_t.shape)}")
    tb = _broadcast_like(t, x_t)
    if schedule.kind == "flow_matching" and ptype == "v_prediction":
        return x_t - tb * pred, x_t + (1.0 - tb) * pred
    alpha, sigma = alpha_sigma(schedule, tb)
    a, b = target_coefficients(ptype, schedule, tb)
    det = alpha * b - sigma * a
    det_min = float(det.abs().min()) if isinstance(det, torch.Tensor) else abs(det)
    if det_min < CONVERSION_SINGULAR_TOL:
        raise SingularityError(f"conversion matrix singular at t={t} for {ptype}/{schedule.kind}")
    return (b * x_t - sigma * pred) / det, (-a * x_t + alpha * pred) / det


def l2_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over all elements (scalar tensor)."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction/target shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target.to(pred.dtype)) ** 2).mean()


@dataclass(frozen=True)
class WeightingFunction:
    """A scalar weighting over log-SNR, with a label for reports."""

    w: Callable[[float], float]
    label: str = ""

    def __call__(self, lam: float) -> float:
        return self.w(lam)


@dataclass
class ElboReport:
    is_elbo: bool
    min_derivative: float
    violations: list = field(default_factory=list)


def elbo_condition_check(
    w: Union[WeightingFunction, Callable[[float], float]],
    schedule: NoiseSchedule,
    grid_size: int = 256,
) -> ElboReport:
    """Numerically test whether t -> w(lambda_t) is non-decreasing.

    Central differences on a uniform grid over [INTERIOR_CLAMP,
    1 - INTERIOR_CLAMP]; an estimate >= -ELBO_DERIVATIVE_TOL counts as
    nonnegative. The test is invariant to positive rescaling of w, so no
    normalization of w is enforced.
    """
    if grid_size < 16:
        raise DomainError(f"grid_size must be >= 16, got {grid_size}")
    fn = w.w if isinstance(w, WeightingFunction) else w
    ts = [INTERIOR_CLAMP + (1 - 2 * INTERIOR_CLAMP) * i / (grid_size - 1) for i in range(grid_size)]
    values = []
    for t in ts:
        val = float(fn(log_snr(schedule, t)))
        if not math.isfinite(val):
            raise EvaluationError(f"weighting is non-finite at t={t}")
        values.append(val)
    min_derivative = math.inf
    violations = []
    for i in range(1, grid_size - 1):
        d = (values[i + 1] - values[i - 1]) / (ts[i + 1] - ts[i - 1])
        if d < min_derivative:
            min_derivative = d
        if d < -ELBO_DERIVATIVE_TOL:
            violations.append(ts[i])
    return ElboReport(is_elbo=not violations, min_derivative=min_derivative, violations=violations)


def time_of_log_snr(schedule: NoiseSchedule, lam: float) -> float:
    """Invert lambda_t on its valid range (clamped into [0, 1])."""
    ratio = math.exp(lam / 2.0)  # alpha / sigma
    if schedule.kind == "flow_matching":
        s = schedule.sigma_min
        t = (1.0 - ratio * s) / (1.0 + ratio * (1.0 - s))
    else:
        t = (2.0 / math.pi) * math.atan(1.0 / ratio)
    return min(1.0, max(0.0, t))


def effective_weighting(ptype: str, schedule: NoiseSchedule) -> WeightingFunction:
    """Weighting over log-SNR equivalent to the uniform-time objective.

    A uniform-time loss E_t ||pred - target||^2 rewritten as an integral
    w(lambda) * E||eps_hat - eps||^2 over lambda has

        w(lambda) = g(t) * |dt/dlambda|,

    where g converts the prediction error to noise-prediction error:
    g = 1 for eps_prediction and g = 1/alpha^2 for v_prediction (for both
    schedules here the v-error is the eps-error divided by alpha).
    """
    if ptype not in PREDICTION_TYPES:
        raise ConfigurationError(f"unsupported prediction type {ptype!r}")

    def w(lam: float) -> float:
        t = time_of_log_snr(schedule, lam)
        alpha, sigma = alpha_sigma(schedule, t)
        if alpha <= 0 or sigma <= 0:
            raise EvaluationError(f"effective weighting undefined at lambda={lam}")
        if schedule.kind == "flow_matching":
            # d lambda / dt = -2 (1/alpha + (1 - sigma_min)/sigma) = -2 / (alpha sigma)
            dlam_dt = -2.0 / (alpha * sigma)
        else:
            dlam_dt = -2.0 * math.pi / math.sin(math.pi * t)
        g = 1.0 if ptype == "eps_prediction" else 1.0 / (alpha * alpha)
        return g / abs(dlam_dt)

    return WeightingFunction(w, label=f"{ptype}/{schedule.kind} uniform-t")
